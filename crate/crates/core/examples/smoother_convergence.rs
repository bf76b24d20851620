//! RMS gap between the ensemble smoother and the exact Kalman smoother as the
//! ensemble grows; the gap should shrink roughly like `1/sqrt(N)`.
//!
//! cargo run --release --example smoother_convergence [fixtures]

use enkmp::baselines::{exact_sequential_ks, LinearEnsembleModel, LinearGaussianSystem};
use enkmp::enks::{smooth_horizon, NoiseStreams, SmootherConfig};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Constant-velocity target, position observed.
fn tracking_system() -> LinearGaussianSystem {
    let dt = 0.1;
    LinearGaussianSystem {
        transition: DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
        process_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1e-4, 1e-2])),
        observation: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        observation_cov: DMatrix::from_element(1, 1, 0.05),
        initial_mean: DVector::from_vec(vec![0.0, 1.0]),
        initial_cov: DMatrix::identity(2, 2),
    }
}

fn main() -> enkmp::Result<()> {
    let fixtures: u64 = std::env::args().nth(1).map_or(10, |a| a.parse().expect("integer"));
    let system = tracking_system();
    let model = LinearEnsembleModel::new(system.clone())?;
    let horizon = 30;
    let paths: Vec<(Vec<DVector<f64>>, DVector<f64>)> = (0..fixtures)
        .map(|seed| {
            let (_, obs) = system.simulate(horizon, &mut ChaCha8Rng::seed_from_u64(seed));
            let exact = exact_sequential_ks(&system, &obs)?.mean;
            Ok((obs, exact))
        })
        .collect::<enkmp::Result<_>>()?;

    println!("     N   mean rms gap   gap * sqrt(N)");
    for n in [25, 50, 100, 200, 400, 800, 1600, 3200] {
        let mut gap = 0.0;
        for (seed, (obs, exact)) in paths.iter().enumerate() {
            let streams = NoiseStreams::new(100 + seed as u64);
            let config = SmootherConfig {
                n_members: n,
                jitter: 0.0,
                ..SmootherConfig::default()
            };
            let initial = model.initial_ensemble(n, horizon + 1, &streams)?;
            let mean = smooth_horizon(initial, horizon, &model, obs.as_slice(), &config, &streams)?
                .stats
                .mean;
            gap += ((mean - exact).norm_squared() / exact.len() as f64).sqrt() / fixtures as f64;
        }
        println!("{n:6} {gap:14.5} {:15.4}", gap * (n as f64).sqrt());
    }
    Ok(())
}
