//! Without inequality constraints the smoothed control sequence of a linear
//! system matches the exact LQ tracking solution as the ensemble grows.
//!
//! cargo run --release --example lq_equivalence [n_members] [seeds]

use enkmp::baselines::{lq_tracking_solve, LinearModel, LinearTestSystem};
use enkmp::dynamics::VehicleState;
use enkmp::planner::{Planner, PlannerConfig, Scene, Waypoint};
use nalgebra::{DMatrix, DVector};

const DT: f64 = 0.1;
const HORIZON: usize = 10;

/// Planar double integrator: `(x, y, vx, vy)` driven by `(ax, ay)`.
fn double_integrator() -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::identity(4, 4);
    a[(0, 2)] = DT;
    a[(1, 3)] = DT;
    let mut b = DMatrix::zeros(4, 2);
    b[(0, 0)] = 0.5 * DT * DT;
    b[(1, 1)] = 0.5 * DT * DT;
    b[(2, 0)] = DT;
    b[(3, 1)] = DT;
    (a, b)
}

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let n_members = args.first().copied().unwrap_or(2000);
    let seeds = args.get(1).copied().unwrap_or(20);

    let (a, b) = double_integrator();
    let control_weight = [1.0, 1.0];
    let state_weight = [400.0, 400.0, 400.0, 400.0];
    let system = LinearTestSystem {
        a: a.clone(),
        b: b.clone(),
        q: DMatrix::from_diagonal(&DVector::from_row_slice(&control_weight)),
        r: DMatrix::from_diagonal(&DVector::from_row_slice(&state_weight)),
        horizon: HORIZON,
    };
    let x0 = DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0]);
    let reference: Vec<Waypoint> = (0..=HORIZON)
        .map(|t| {
            let tau = t as f64 * DT;
            [1.0 * tau + 3.0 * tau * tau, 3.0 * tau * tau, 1.0 + 6.0 * tau, 6.0 * tau]
        })
        .collect();
    let reference_vecs: Vec<DVector<f64>> = reference.iter().map(|r| DVector::from_row_slice(r)).collect();
    let exact = lq_tracking_solve(&system, &reference_vecs, &x0).unwrap();
    let exact_norm = exact[..HORIZON].iter().map(|u| u.norm_squared()).sum::<f64>().sqrt();

    let mut errors = Vec::new();
    for seed in 0..seeds as u64 {
        let mut config = PlannerConfig {
            horizon: HORIZON,
            dt: DT,
            control_weight,
            state_weight,
            barrier: None,
            warmstart: false,
            ..PlannerConfig::default()
        };
        config.smoother.n_members = n_members;
        config.smoother.rng_seed = seed;
        let mut planner = Planner::new(LinearModel::new(a.clone(), b.clone()).unwrap(), config).unwrap();
        let state = VehicleState::from_slice(x0.as_slice());
        let scene = Scene {
            road: None,
            obstacles: &[],
        };
        let plan = planner.plan_step(&state, &reference, &scene).unwrap();
        let diff = plan.mean_trajectory[..HORIZON]
            .iter()
            .zip(&exact)
            .map(|(x, u)| {
                let c = x.control.to_array();
                (c[0] - u[0]).powi(2) + (c[1] - u[1]).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        errors.push(diff / exact_norm);
    }
    errors.sort_by(f64::total_cmp);
    println!(
        "N={n_members}: relative control error median {:.4}, max {:.4} over {seeds} seeds",
        errors[errors.len() / 2],
        errors[errors.len() - 1]
    );
}
