//! One planning step of the penalty-method NMPC next to the ensemble planner,
//! kinematic model, with the ego vehicle 8 m behind the first slow vehicle in
//! its lane.
//!
//! cargo run --release --example penalty_baseline [horizon]

use std::path::Path;

use enkmp::baselines::penalty_nmpc_solve;
use enkmp::constraints::vehicle_distance;
use enkmp::dynamics::{KinematicModel, VehicleState};
use enkmp::planner::{build_reference, Planner, Scene};
use enkmp::scenario::ScenarioConfig;
use enkmp::virtual_system::predicted_obstacles;

fn main() -> enkmp::Result<()> {
    let mut config = ScenarioConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/canonical.json"))?;
    if let Some(h) = std::env::args().nth(1) {
        config.planner.horizon = h.parse().expect("integer");
    }
    let planner_config = &config.planner;
    let model = KinematicModel {
        params: config.bicycle,
        dt: planner_config.dt,
    };
    let road = config.road.build()?;
    let footprint = planner_config.constraint.footprint();
    let obstacles: Vec<_> = config
        .others
        .iter()
        .map(|ov| ov.at_step(&road, 0, planner_config.dt, &footprint))
        .collect();
    let scene = Scene {
        road: Some(&road),
        obstacles: &obstacles,
    };
    let (p, h) = road.point_at(config.others[0].s0 - 8.0);
    let lateral = config.others[0].lateral;
    let ego = VehicleState::new(p[0] - lateral * h.sin(), p[1] + lateral * h.cos(), h, config.ego.speed);
    let reference = build_reference(&road, &ego, planner_config.horizon, planner_config.dt, config.target_speed)?;

    let penalty = penalty_nmpc_solve(&model, &scene, &ego, &reference, planner_config, &config.penalty, None)?;
    let closest = penalty
        .trajectory
        .iter()
        .enumerate()
        .flat_map(|(t, x)| {
            predicted_obstacles(&obstacles, t, planner_config.dt)
                .iter()
                .map(|ob| vehicle_distance(x, &footprint, ob))
                .collect::<Vec<_>>()
        })
        .fold(f64::INFINITY, f64::min);
    println!(
        "penalty NMPC: {:.2} s, cost {:.1}, max violation {:.3}, {} gradient evaluations, closest planned approach {closest:.2} m",
        penalty.wall_time, penalty.cost, penalty.max_violation, penalty.gradient_evaluations
    );
    println!("  first control: {:?}", penalty.controls[0]);

    let mut planner = Planner::new(model, planner_config.clone())?;
    let plan = planner.plan_step(&ego, &reference, &scene)?;
    println!(
        "ensemble planner (N={}): {:.4} s, first control {:?}",
        planner_config.smoother.n_members, plan.plan_time, plan.applied_control
    );
    println!("speedup {:.0}x", penalty.wall_time / plan.plan_time);
    Ok(())
}
