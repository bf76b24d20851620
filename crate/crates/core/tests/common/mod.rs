#![allow(dead_code)]

use std::cell::RefCell;
use std::path::PathBuf;

use enkmp::baselines::{exact_sequential_ks, LinearEnsembleModel, LinearGaussianSystem};
use enkmp::enks::{smooth_horizon, NoiseStreams, Observations, SmootherConfig};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// Lightly damped 4-state oscillator, positions observed.
pub fn four_state_system() -> LinearGaussianSystem {
    let dt = 0.1;
    #[rustfmt::skip]
    let f = DMatrix::from_row_slice(4, 4, &[
        1.0, 0.0, dt, 0.0,
        0.0, 1.0, 0.0, dt,
        -0.2 * dt, 0.0, 0.98, 0.05,
        0.0, -0.2 * dt, -0.05, 0.98,
    ]);
    #[rustfmt::skip]
    let h = DMatrix::from_row_slice(2, 4, &[
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.5, 0.0,
    ]);
    LinearGaussianSystem {
        transition: f,
        process_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.01, 0.05, 0.05])),
        observation: h,
        observation_cov: DMatrix::identity(2, 2) * 0.25,
        initial_mean: DVector::from_vec(vec![1.0, -0.5, 0.3, 0.2]),
        initial_cov: DMatrix::identity(4, 4),
    }
}

pub fn scalar_system(f: f64, w: f64, v: f64, m0: f64, p0: f64) -> LinearGaussianSystem {
    LinearGaussianSystem {
        transition: DMatrix::from_element(1, 1, f),
        process_cov: DMatrix::from_element(1, 1, w),
        observation: DMatrix::from_element(1, 1, 1.0),
        observation_cov: DMatrix::from_element(1, 1, v),
        initial_mean: DVector::from_element(1, m0),
        initial_cov: DMatrix::from_element(1, 1, p0),
    }
}

/// Smoothed trajectory mean of the ensemble smoother on a linear-Gaussian system.
pub fn ensemble_smoothed_mean(
    system: &LinearGaussianSystem,
    observations: &[DVector<f64>],
    n_members: usize,
    seed: u64,
) -> DVector<f64> {
    let model = LinearEnsembleModel::new(system.clone()).unwrap();
    let streams = NoiseStreams::new(seed);
    let horizon = observations.len() - 1;
    let initial = model.initial_ensemble(n_members, horizon + 1, &streams).unwrap();
    let config = SmootherConfig {
        n_members,
        jitter: 0.0,
        ..SmootherConfig::default()
    };
    smooth_horizon(initial, horizon, &model, observations, &config, &streams)
        .unwrap()
        .stats
        .mean
}

/// Observation path and exact smoothed mean for one fixture seed.
pub fn fixture(system: &LinearGaussianSystem, horizon: usize, seed: u64) -> (Vec<DVector<f64>>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, observations) = system.simulate(horizon, &mut rng);
    let exact = exact_sequential_ks(system, &observations).unwrap().mean;
    (observations, exact)
}

pub fn rms(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Records every observation index the smoother asks for.
pub struct CountingObservations {
    pub inner: Vec<DVector<f64>>,
    pub accesses: RefCell<Vec<usize>>,
}

impl CountingObservations {
    pub fn new(inner: Vec<DVector<f64>>) -> Self {
        CountingObservations {
            inner,
            accesses: RefCell::new(Vec::new()),
        }
    }
}

impl Observations for CountingObservations {
    fn observation(&self, t: usize) -> DVector<f64> {
        self.accesses.borrow_mut().push(t);
        self.inner[t].clone()
    }
}
