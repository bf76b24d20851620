mod common;

use common::*;
use enkmp::baselines::{exact_sequential_ks, LinearEnsembleModel};
use enkmp::enks::{
    cross_covariance, ensemble_mean, predict, smooth_horizon, trajectory_stats, update, EnsembleModel, NoiseStreams,
    SmootherConfig, TrajectoryEnsemble,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn predicted_mean_matches_kalman_prediction() {
    let system = four_state_system();
    let model = LinearEnsembleModel::new(system.clone()).unwrap();
    let n = 20_000;
    let streams = NoiseStreams::new(11);
    let mut ensemble = model.initial_ensemble(n, 2, &streams).unwrap();
    predict(&mut ensemble, |prev| model.transition(1, prev, &streams)).unwrap();
    let mean = ensemble_mean(ensemble.slice(1));
    let exact_mean = &system.transition * &system.initial_mean;
    let exact_cov = &system.transition * &system.initial_cov * system.transition.transpose() + &system.process_cov;
    for i in 0..4 {
        let tol = 3.0 * (exact_cov[(i, i)] / n as f64).sqrt();
        assert!((mean[i] - exact_mean[i]).abs() <= tol, "component {i}: {} vs {}", mean[i], exact_mean[i]);
    }
}

#[test]
fn scalar_update_matches_conjugate_posterior() {
    // prior N(1, 2), y = x + v with v ~ N(0, 0.5), observed 2.5
    let system = scalar_system(1.0, 0.0, 0.5, 1.0, 2.0);
    let model = LinearEnsembleModel::new(system).unwrap();
    let n = 5000;
    let streams = NoiseStreams::new(3);
    let mut ensemble = model.initial_ensemble(n, 1, &streams).unwrap();
    let y = model.measure(0, ensemble.slice(0), &streams).unwrap();
    update(&mut ensemble, &y, &DVector::from_element(1, 2.5), 0.0).unwrap();
    let stats = trajectory_stats(&ensemble, true).unwrap();
    let post_mean = 1.0 + 2.0 / 2.5 * 1.5;
    let post_var = 2.0 - 4.0 / 2.5;
    assert!((stats.mean[0] - post_mean).abs() <= 0.03 * post_mean, "mean {}", stats.mean[0]);
    let var = stats.covariance.unwrap()[(0, 0)];
    assert!((var - post_var).abs() <= 0.03 * post_var, "variance {var}");
}

#[test]
fn one_step_scalar_smoother_matches_exact() {
    let system = scalar_system(0.9, 0.3, 0.4, 0.5, 1.0);
    let observations = vec![DVector::from_element(1, 1.2), DVector::from_element(1, 0.4)];
    let exact = exact_sequential_ks(&system, &observations).unwrap();
    let n = 5000;
    let mean = ensemble_smoothed_mean(&system, &observations, n, 5);
    for t in 0..2 {
        let tol = 3.0 * (exact.covariance[(t, t)] / n as f64).sqrt();
        assert!((mean[t] - exact.mean[t]).abs() <= tol, "slice {t}: {} vs {}", mean[t], exact.mean[t]);
    }
}

#[test]
fn noiseless_system_recovers_true_trajectory() {
    let mut system = four_state_system();
    system.process_cov = DMatrix::zeros(4, 4);
    system.observation = DMatrix::identity(4, 4);
    system.observation_cov = DMatrix::zeros(4, 4);
    let x0 = DVector::from_vec(vec![0.4, 1.1, -0.3, 0.8]);
    let mut truth = vec![x0];
    for _ in 0..6 {
        truth.push(&system.transition * truth.last().unwrap());
    }
    let model = LinearEnsembleModel::new(system).unwrap();
    let streams = NoiseStreams::new(1);
    let initial = model.initial_ensemble(50, 7, &streams).unwrap();
    let config = SmootherConfig {
        n_members: 50,
        jitter: 1e-12,
        ..SmootherConfig::default()
    };
    let out = smooth_horizon(initial, 6, &model, &truth, &config, &streams).unwrap();
    for (t, x) in truth.iter().enumerate() {
        let err = (out.stats.mean.rows(4 * t, 4) - x).amax();
        assert!(err < 1e-9, "slice {t}: error {err}");
    }
}

#[test]
fn error_decays_like_inverse_sqrt_members() {
    let system = four_state_system();
    let sizes = [50usize, 200, 1000, 5000];
    let seeds = 0..8u64;
    let fixtures: Vec<_> = seeds.clone().map(|s| fixture(&system, 10, 100 + s)).collect();
    let errors: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            let e: Vec<f64> = fixtures
                .iter()
                .zip(seeds.clone())
                .map(|((obs, exact), s)| rms(&ensemble_smoothed_mean(&system, obs, n, s), exact))
                .collect();
            e.iter().sum::<f64>() / e.len() as f64
        })
        .collect();
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((-0.65..=-0.35).contains(&slope), "slope {slope}, errors {errors:?}");
}

fn max_bias_z_score(n_members: usize, reps: u64) -> f64 {
    let system = four_state_system();
    let (observations, exact) = fixture(&system, 10, 7);
    let means: Vec<DVector<f64>> = (0..reps)
        .map(|s| ensemble_smoothed_mean(&system, &observations, n_members, 1000 + s))
        .collect();
    let avg = means.iter().fold(DVector::zeros(exact.len()), |a, m| a + m) / reps as f64;
    (0..exact.len())
        .map(|i| {
            let var = means.iter().map(|m| (m[i] - avg[i]).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
            (avg[i] - exact[i]).abs() / (var / reps as f64).sqrt()
        })
        .fold(0.0, f64::max)
}

// The sampled gain makes the stochastic update biased at O(1/N); at N=100 one
// of 44 rows sits at 4.5 standard errors.
#[test]
#[ignore = "finite-ensemble gain bias reaches 4.5 standard errors at N=100"]
fn smoothed_mean_is_unbiased() {
    let z = max_bias_z_score(100, 200);
    assert!(z <= 4.0, "max z-score {z}");
}

#[test]
fn smoothed_mean_bias_vanishes_with_members() {
    let z = max_bias_z_score(1600, 400);
    assert!(z <= 4.0, "max z-score {z}");
}

#[test]
fn covariance_flag_does_not_change_the_mean() {
    let system = four_state_system();
    let (observations, _) = fixture(&system, 8, 2);
    let model = LinearEnsembleModel::new(system).unwrap();
    let streams = NoiseStreams::new(9);
    let run = |compute_covariances| {
        let config = SmootherConfig {
            n_members: 64,
            compute_covariances,
            ..SmootherConfig::default()
        };
        let initial = model.initial_ensemble(64, 9, &streams).unwrap();
        smooth_horizon(initial, 8, &model, &observations, &config, &streams).unwrap()
    };
    let (with, without) = (run(true), run(false));
    assert!(with.stats.covariance.is_some() && without.stats.covariance.is_none());
    let bits = |v: &DVector<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&with.stats.mean), bits(&without.stats.mean));
}

#[test]
fn updates_contract_uncertainty() {
    let system = four_state_system();
    let (observations, _) = fixture(&system, 10, 4);
    let model = LinearEnsembleModel::new(system).unwrap();
    let n = 200;
    let streams = NoiseStreams::new(21);
    let mut ensemble = model.initial_ensemble(n, 11, &streams).unwrap();
    let trace = |e: &TrajectoryEnsemble| trajectory_stats(e, true).unwrap().covariance.unwrap().trace();
    for (t, y) in observations.iter().enumerate() {
        if t > 0 {
            predict(&mut ensemble, |prev| model.transition(t, prev, &streams)).unwrap();
        }
        let before = trace(&ensemble);
        let meas = model.measure(t, ensemble.slice(t), &streams).unwrap();
        update(&mut ensemble, &meas, y, 0.0).unwrap();
        let after = trace(&ensemble);
        assert!(after <= before * (1.0 + 5.0 / (n as f64).sqrt()), "t={t}: {after} > {before}");
    }
}

#[test]
fn each_observation_is_read_once_in_order() {
    let system = four_state_system();
    let (observations, _) = fixture(&system, 12, 0);
    let counted = CountingObservations::new(observations);
    let model = LinearEnsembleModel::new(system).unwrap();
    let streams = NoiseStreams::new(0);
    let initial = model.initial_ensemble(30, 13, &streams).unwrap();
    let config = SmootherConfig {
        n_members: 30,
        ..SmootherConfig::default()
    };
    smooth_horizon(initial, 12, &model, &counted, &config, &streams).unwrap();
    assert_eq!(*counted.accesses.borrow(), (0..=12).collect::<Vec<_>>());
}

fn naive_cross_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let mean = |m: &DMatrix<f64>, r: usize| (0..n).map(|i| m[(r, i)]).sum::<f64>() / n as f64;
    DMatrix::from_fn(a.nrows(), b.nrows(), |r, c| {
        let (ma, mb) = (mean(a, r), mean(b, c));
        (0..n).map(|i| (a[(r, i)] - ma) * (b[(c, i)] - mb)).sum::<f64>() / (n as f64 - 1.0)
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #[test]
    fn cross_covariance_matches_naive_loops((a, b) in (2usize..60).prop_flat_map(|n| (matrix(5, n), matrix(3, n)))) {
        let (ma, mb) = (ensemble_mean(a.as_view()), ensemble_mean(b.as_view()));
        let fast = cross_covariance(a.as_view(), &ma, b.as_view(), &mb).unwrap();
        let slow = naive_cross_covariance(&a, &b);
        prop_assert!((fast - slow).amax() <= 1e-12);
    }

    #[test]
    fn statistics_are_permutation_invariant(
        (data, order) in (2usize..40).prop_flat_map(|n| (matrix(12, n), Just((0..n).collect::<Vec<_>>()).prop_shuffle()))
    ) {
        let ensemble = TrajectoryEnsemble::from_initial(data, 1).unwrap();
        let a = trajectory_stats(&ensemble, true).unwrap();
        let b = trajectory_stats(&ensemble.permuted(&order), true).unwrap();
        prop_assert!((&a.mean - &b.mean).amax() <= 1e-12);
        prop_assert!((a.covariance.unwrap() - b.covariance.unwrap()).amax() <= 1e-12);
    }
}
