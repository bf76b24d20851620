//! Closed-loop cost and plan time against ensemble size on the canonical scenario.
//!
//! cargo run --release --example ensemble_size_sweep [seeds] [steps]

use std::path::Path;

use enkmp::scenario::{run_scenario, ScenarioConfig};

fn main() -> enkmp::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let seeds = args.first().copied().unwrap_or(3) as u64;
    let base = ScenarioConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/canonical.json"))?;
    let steps = args.get(1).copied().unwrap_or(base.steps);

    println!("    N  mean cost  min dist  violations  plan time [s]");
    for n in [25, 50, 100, 200, 400] {
        let (mut cost, mut min_dist, mut violations, mut time) = (0.0, f64::INFINITY, 0, 0.0);
        for seed in 0..seeds {
            let mut config = base.clone();
            config.steps = steps;
            config.rng_seed = seed;
            config.planner.smoother.n_members = n;
            let model = config.planning_model.load(&config.bicycle, config.planner.dt)?;
            let s = run_scenario(&config, model)?.summary;
            cost += s.total_cost / seeds as f64;
            time += s.mean_plan_time / seeds as f64;
            min_dist = f64::min(min_dist, s.min_distance);
            violations += s.collisions + s.boundary_violations;
        }
        println!("{n:5} {cost:10.1} {min_dist:9.2} {violations:11} {time:14.4}");
    }
    Ok(())
}
