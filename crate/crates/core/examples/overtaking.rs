//! Closed-loop overtaking on the S-curve with the learned surrogate, printing
//! the trajectory every second and a summary at the end.
//!
//! cargo run --release --example overtaking [seed] [n_members] [horizon]

use std::path::Path;

use enkmp::scenario::{run_scenario, ScenarioConfig};

fn main() -> enkmp::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize| args.get(i).map(|a| a.parse::<u64>().expect("integer"));
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut config = ScenarioConfig::load(configs.join("canonical.json"))?;
    config.rng_seed = arg(0).unwrap_or(0);
    if let Some(n) = arg(1) {
        config.planner.smoother.n_members = n as usize;
    }
    if let Some(h) = arg(2) {
        config.planner.horizon = h as usize;
    }

    let model = config.planning_model.load(&config.bicycle, config.planner.dt)?;
    let out = run_scenario(&config, model)?;
    println!("   t      x      y  heading  speed  accel  steer  min dist  margin");
    for r in out.records.iter().step_by(10) {
        let s = &r.state;
        println!(
            "{:4.1} {:6.1} {:6.2} {:8.3} {:6.2} {:6.2} {:6.3} {:9.2} {:7.2}",
            r.k as f64 * config.planner.dt,
            s.x_pos,
            s.y_pos,
            s.heading,
            s.speed,
            r.control.accel,
            r.control.steer,
            r.min_distance(),
            r.boundary_margin
        );
    }
    let s = &out.summary;
    println!(
        "{} steps, cost {:.1}, min distance {:.2} m, min margin {:.2} m, collisions {}, boundary violations {}, plan time {:.4} s",
        s.steps_completed, s.total_cost, s.min_distance, s.min_boundary_margin, s.collisions, s.boundary_violations, s.mean_plan_time
    );
    Ok(())
}
