//! Sequential (single forward pass) ensemble Kalman smoother.
//!
//! Each member stores its whole trajectory `x̄_k, ..., x̄_t` as one contiguous
//! column. When the measurement for time `t` arrives every past slice of every
//! member is corrected with the same gain, so the smoothed trajectory is
//! available as soon as the last measurement has been processed; there is no
//! backward sweep.

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    pub n_members: usize,
    /// Ridge added to the measurement covariance before solving.
    pub jitter: f64,
    pub compute_covariances: bool,
    pub rng_seed: u64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig {
            n_members: 200,
            jitter: 1e-8,
            compute_covariances: false,
            rng_seed: 0,
        }
    }
}

impl SmootherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_members < 2 {
            return Err(Error::config("n_members", "need at least 2 ensemble members"));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::config("jitter", "must be non-negative"));
        }
        Ok(())
    }
}

/// What a random draw is used for; part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum NoiseRole {
    Initial = 1,
    Transition = 2,
    Measurement = 3,
}

/// Independent random streams keyed by `(member, time, role)`, so draws do
/// not depend on the order in which members are processed.
#[derive(Debug, Clone, Copy)]
pub struct NoiseStreams {
    seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl NoiseStreams {
    pub fn new(seed: u64) -> Self {
        NoiseStreams { seed }
    }

    /// Derives the stream family for a sub-problem, e.g. one planning step.
    pub fn derive(&self, index: u64) -> Self {
        NoiseStreams {
            seed: splitmix(self.seed ^ splitmix(index.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    pub fn stream(&self, member: usize, time: usize, role: NoiseRole) -> ChaCha8Rng {
        let mut key = splitmix(self.seed);
        key = splitmix(key ^ member as u64);
        key = splitmix(key ^ ((time as u64) << 8) ^ role as u64);
        ChaCha8Rng::seed_from_u64(key)
    }
}

/// `N` trajectories of `slice_dim`-dimensional slices. Member `i` is column `i`;
/// slice `t` occupies rows `t * slice_dim .. (t + 1) * slice_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    slice_dim: usize,
    len: usize,
    data: DMatrix<f64>,
}

impl TrajectoryEnsemble {
    /// Starts an ensemble from its first slice (`slice_dim x N`), reserving room
    /// for `capacity` slices.
    pub fn from_initial(initial: DMatrix<f64>, capacity: usize) -> Result<Self> {
        if initial.ncols() < 2 {
            return Err(Error::DegenerateEnsemble(initial.ncols()));
        }
        let d = initial.nrows();
        let mut data = DMatrix::zeros(d * capacity.max(1), initial.ncols());
        data.rows_mut(0, d).copy_from(&initial);
        Ok(TrajectoryEnsemble {
            slice_dim: d,
            len: 1,
            data,
        })
    }

    pub fn n_members(&self) -> usize {
        self.data.ncols()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slice_dim(&self) -> usize {
        self.slice_dim
    }

    /// All stored slices, `(len * slice_dim) x N`.
    pub fn trajectories(&self) -> DMatrixView<'_, f64> {
        self.data.rows(0, self.len * self.slice_dim)
    }

    pub fn slice(&self, t: usize) -> DMatrixView<'_, f64> {
        assert!(t < self.len, "slice {t} out of range {}", self.len);
        self.data.rows(t * self.slice_dim, self.slice_dim)
    }

    pub fn last_slice(&self) -> DMatrixView<'_, f64> {
        self.slice(self.len - 1)
    }

    pub fn member(&self, i: usize) -> &[f64] {
        let rows = self.data.nrows();
        &self.data.as_slice()[i * rows..i * rows + self.len * self.slice_dim]
    }

    fn push_slice(&mut self, slice: &DMatrix<f64>) -> Result<()> {
        if slice.nrows() != self.slice_dim {
            return Err(Error::dimension("predicted slice rows", self.slice_dim, slice.nrows()));
        }
        if slice.ncols() != self.n_members() {
            return Err(Error::dimension("predicted slice members", self.n_members(), slice.ncols()));
        }
        let needed = (self.len + 1) * self.slice_dim;
        if needed > self.data.nrows() {
            let mut grown = DMatrix::zeros(needed.max(2 * self.data.nrows()), self.n_members());
            grown
                .rows_mut(0, self.len * self.slice_dim)
                .copy_from(&self.trajectories());
            self.data = grown;
        }
        self.data
            .rows_mut(self.len * self.slice_dim, self.slice_dim)
            .copy_from(slice);
        self.len += 1;
        Ok(())
    }

    /// Reorders members; used to check exchangeability.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut data = self.data.clone();
        for (dst, &src) in order.iter().enumerate() {
            data.set_column(dst, &self.data.column(src));
        }
        TrajectoryEnsemble {
            slice_dim: self.slice_dim,
            len: self.len,
            data,
        }
    }
}

/// Sample statistics of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: DVector<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

/// Arithmetic mean of the columns.
pub fn ensemble_mean(members: DMatrixView<'_, f64>) -> DVector<f64> {
    let n = members.ncols() as f64;
    let mut mean = DVector::zeros(members.nrows());
    for col in members.column_iter() {
        mean += col;
    }
    mean / n
}

fn anomalies(members: DMatrixView<'_, f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut a = members.into_owned();
    for mut col in a.column_iter_mut() {
        col -= mean;
    }
    a
}

/// `1/(N-1) sum_i (a_i - a_mean)(b_i - b_mean)^T`.
pub fn cross_covariance(
    a: DMatrixView<'_, f64>,
    a_mean: &DVector<f64>,
    b: DMatrixView<'_, f64>,
    b_mean: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.ncols();
    if n < 2 {
        return Err(Error::DegenerateEnsemble(n));
    }
    if b.ncols() != n {
        return Err(Error::dimension("cross-covariance members", n, b.ncols()));
    }
    let da = anomalies(a, a_mean);
    let db = anomalies(b, b_mean);
    Ok(da * db.transpose() / (n as f64 - 1.0))
}

/// Mean and (optionally) covariance of the full trajectories.
pub fn trajectory_stats(ensemble: &TrajectoryEnsemble, with_covariance: bool) -> Result<EnsembleStats> {
    let x = ensemble.trajectories();
    let mean = ensemble_mean(x);
    let covariance = if with_covariance {
        Some(cross_covariance(x, &mean, x, &mean)?)
    } else {
        None
    };
    Ok(EnsembleStats { mean, covariance })
}

/// Sampling maps of the system being smoothed. `t` counts slices from the
/// start of the horizon; slice 0 is the initial ensemble.
pub trait EnsembleModel {
    fn slice_dim(&self) -> usize;

    /// Draws `x̄_t^i` from `x̄_{t-1}^i` for every member (`slice_dim x N`).
    fn transition(
        &self,
        t: usize,
        previous: DMatrixView<'_, f64>,
        noise: &NoiseStreams,
    ) -> Result<DMatrix<f64>>;

    /// Draws perturbed measurements `ȳ_t^i` for every member (`m x N`).
    fn measure(&self, t: usize, slices: DMatrixView<'_, f64>, noise: &NoiseStreams)
        -> Result<DMatrix<f64>>;
}

/// Observed measurement sequence `ȳ_0 .. ȳ_H`.
pub trait Observations {
    fn observation(&self, t: usize) -> DVector<f64>;
}

impl Observations for [DVector<f64>] {
    fn observation(&self, t: usize) -> DVector<f64> {
        self[t].clone()
    }
}

impl Observations for Vec<DVector<f64>> {
    fn observation(&self, t: usize) -> DVector<f64> {
        self[t].clone()
    }
}

/// Appends one predicted slice to every member.
pub fn predict<F>(ensemble: &mut TrajectoryEnsemble, transition: F) -> Result<()>
where
    F: FnOnce(DMatrixView<'_, f64>) -> Result<DMatrix<f64>>,
{
    if ensemble.is_empty() {
        return Err(Error::config("ensemble", "cannot predict from an empty ensemble"));
    }
    let next = transition(ensemble.last_slice())?;
    ensemble.push_slice(&next)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    /// `|ȳ_t - mean(ȳ_t^i)|`.
    pub innovation_norm: f64,
    /// Squared ratio of extreme Cholesky pivots of the regularized measurement covariance.
    pub condition_estimate: f64,
}

/// Kalman update of every member with its own innovation `ȳ_t - ȳ_t^i`,
/// applied to all stored slices.
pub fn update(
    ensemble: &mut TrajectoryEnsemble,
    measurements: &DMatrix<f64>,
    observed: &DVector<f64>,
    jitter: f64,
) -> Result<UpdateDiagnostics> {
    let n = ensemble.n_members();
    if measurements.ncols() != n {
        return Err(Error::dimension("measurement members", n, measurements.ncols()));
    }
    if observed.len() != measurements.nrows() {
        return Err(Error::dimension("observation", measurements.nrows(), observed.len()));
    }
    if n < 2 {
        return Err(Error::DegenerateEnsemble(n));
    }
    let rows = ensemble.len * ensemble.slice_dim;
    let y_mean = ensemble_mean(measurements.as_view());
    let x_mean = ensemble_mean(ensemble.trajectories());
    let dx = anomalies(ensemble.trajectories(), &x_mean);
    let dy = anomalies(measurements.as_view(), &y_mean);
    let scale = 1.0 / (n as f64 - 1.0);
    let p_xy = &dx * dy.transpose() * scale;
    let mut p_yy = &dy * dy.transpose() * scale;
    for i in 0..p_yy.nrows() {
        p_yy[(i, i)] += jitter;
    }
    let condition_estimate = pivot_condition(&p_yy);
    let chol = match p_yy.clone().cholesky() {
        Some(c) => c,
        None => {
            return Err(Error::Numerical {
                reason: "measurement covariance is not positive definite".into(),
                condition: svd_condition(&p_yy),
            })
        }
    };
    let mut innovations = -measurements.clone();
    for mut col in innovations.column_iter_mut() {
        col += observed;
    }
    let solved = chol.solve(&innovations);
    let correction = p_xy * solved;
    if correction.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            reason: "non-finite ensemble correction".into(),
            condition: svd_condition(&p_yy),
        });
    }
    let mut x = ensemble.data.rows_mut(0, rows);
    x += correction;
    Ok(UpdateDiagnostics {
        innovation_norm: (observed - y_mean).norm(),
        condition_estimate,
    })
}

fn pivot_condition(m: &DMatrix<f64>) -> f64 {
    let diag = m.diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

fn svd_condition(m: &DMatrix<f64>) -> f64 {
    // the unbounded SVD never converges on non-finite input
    if m.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    let Some(svd) = m.clone().try_svd(false, false, f64::EPSILON, 500) else {
        return f64::NAN;
    };
    let sv = svd.singular_values;
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SmootherDiagnostics {
    pub updates: Vec<UpdateDiagnostics>,
}

impl SmootherDiagnostics {
    pub fn max_condition(&self) -> f64 {
        self.updates
            .iter()
            .map(|u| u.condition_estimate)
            .fold(0.0, f64::max)
    }

    pub fn mean_innovation(&self) -> f64 {
        if self.updates.is_empty() {
            return 0.0;
        }
        self.updates.iter().map(|u| u.innovation_norm).sum::<f64>() / self.updates.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct SmoothedHorizon {
    pub ensemble: TrajectoryEnsemble,
    pub stats: EnsembleStats,
    pub diagnostics: SmootherDiagnostics,
}

/// Runs predict / measure / update for `t = 0..=horizon`, consuming each
/// observation exactly once.
pub fn smooth_horizon<M, O>(
    initial: TrajectoryEnsemble,
    horizon: usize,
    model: &M,
    observations: &O,
    config: &SmootherConfig,
    noise: &NoiseStreams,
) -> Result<SmoothedHorizon>
where
    M: EnsembleModel + ?Sized,
    O: Observations + ?Sized,
{
    if horizon < 1 {
        return Err(Error::config("horizon", "must be at least 1"));
    }
    if initial.len() != 1 {
        return Err(Error::config("initial ensemble", "must hold exactly one slice"));
    }
    if initial.slice_dim() != model.slice_dim() {
        return Err(Error::dimension("initial slice", model.slice_dim(), initial.slice_dim()));
    }
    let mut ensemble = initial;
    let mut diagnostics = SmootherDiagnostics::default();
    for t in 0..=horizon {
        if t > 0 {
            predict(&mut ensemble, |prev| model.transition(t, prev, noise))?;
        }
        let measurements = model.measure(t, ensemble.slice(t), noise)?;
        let observed = observations.observation(t);
        diagnostics
            .updates
            .push(update(&mut ensemble, &measurements, &observed, config.jitter)?);
    }
    let stats = trajectory_stats(&ensemble, config.compute_covariances)?;
    Ok(SmoothedHorizon {
        ensemble,
        stats,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn mean_of_symmetric_members_is_zero() {
        let m = DMatrix::from_row_slice(2, 2, &[-1.5, 1.5, 2.0, -2.0]);
        assert_eq!(ensemble_mean(m.as_view()), DVector::zeros(2));
        let same = DMatrix::from_fn(3, 4, |r, _| r as f64 + 0.5);
        assert_eq!(ensemble_mean(same.as_view()), DVector::from_vec(vec![0.5, 1.5, 2.5]));
    }

    #[test]
    fn mean_matches_resummation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = DMatrix::from_fn(5, 7, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
        let mean = ensemble_mean(m.as_view());
        for r in 0..5 {
            let mut s = 0.0;
            for c in (0..7).rev() {
                s += m[(r, c)];
            }
            assert!((mean[r] - s / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_point_cross_covariance() {
        let a = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let b = DVector::from_vec(vec![3.0, 4.0]);
        let am = DMatrix::from_columns(&[-&a, a.clone()]);
        let bm = DMatrix::from_columns(&[-&b, b.clone()]);
        let c = cross_covariance(
            am.as_view(),
            &DVector::zeros(3),
            bm.as_view(),
            &DVector::zeros(2),
        )
        .unwrap();
        assert!((c - 2.0 * &a * b.transpose()).abs().max() < 1e-15);
    }

    #[test]
    fn cross_covariance_needs_two_members() {
        let a = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(
            cross_covariance(a.as_view(), &DVector::zeros(2), a.as_view(), &DVector::zeros(2)),
            Err(Error::DegenerateEnsemble(1))
        ));
    }

    #[test]
    fn identical_members_have_zero_covariance() {
        let a = DMatrix::from_fn(3, 5, |r, _| r as f64);
        let mean = ensemble_mean(a.as_view());
        let c = cross_covariance(a.as_view(), &mean, a.as_view(), &mean).unwrap();
        assert_eq!(c, DMatrix::zeros(3, 3));
    }

    #[test]
    fn predict_concatenates() {
        let init = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let mut ens = TrajectoryEnsemble::from_initial(init, 1).unwrap();
        predict(&mut ens, |prev| Ok(prev.map(|v| v * 10.0))).unwrap();
        predict(&mut ens, |prev| Ok(prev.into_owned())).unwrap();
        assert_eq!(ens.len(), 3);
        assert_eq!(ens.member(0), &[1.0, 10.0, 10.0]);
        assert_eq!(ens.member(1), &[2.0, 20.0, 20.0]);
    }

    #[test]
    fn zero_innovation_and_uninformative_data_leave_ensemble_unchanged() {
        let init = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 4.0, -1.0, 0.0, 3.0]);
        let mut ens = TrajectoryEnsemble::from_initial(init.clone(), 1).unwrap();
        // measurement equal to the observation for every member
        let y = DMatrix::from_element(1, 3, 0.7);
        let before = ens.clone();
        update(&mut ens, &y, &DVector::from_element(1, 0.7), 1e-8).unwrap();
        assert_eq!(ens, before);

        // measurement anomalies orthogonal to the state anomalies
        let mut ens = TrajectoryEnsemble::from_initial(
            DMatrix::from_row_slice(1, 4, &[1.0, -1.0, 1.0, -1.0]),
            1,
        )
        .unwrap();
        let y = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, -1.0, -1.0]);
        let before = ens.clone();
        update(&mut ens, &y, &DVector::from_element(1, 5.0), 0.0).unwrap();
        assert!((ens.trajectories() - before.trajectories()).abs().max() < 1e-15);
    }

    #[test]
    fn singular_measurement_covariance_is_reported() {
        let mut ens =
            TrajectoryEnsemble::from_initial(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]), 1)
                .unwrap();
        let y = DMatrix::from_element(2, 3, 1.0);
        match update(&mut ens, &y, &DVector::zeros(2), 0.0) {
            Err(Error::Numerical { condition, .. }) => assert!(condition.is_infinite()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn streams_are_keyed_not_ordered() {
        let s = NoiseStreams::new(11);
        let a: f64 = s.stream(3, 5, NoiseRole::Transition).sample(StandardNormal);
        let _: f64 = s.stream(0, 0, NoiseRole::Measurement).sample(StandardNormal);
        let b: f64 = s.stream(3, 5, NoiseRole::Transition).sample(StandardNormal);
        assert_eq!(a, b);
        let c: f64 = s.stream(3, 5, NoiseRole::Measurement).sample(StandardNormal);
        assert_ne!(a, c);
        let d: f64 = s.derive(1).stream(3, 5, NoiseRole::Transition).sample(StandardNormal);
        assert_ne!(a, d);
    }
}
