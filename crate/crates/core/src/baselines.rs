//! Reference solvers: the exact Kalman smoother on linear-Gaussian systems,
//! joint-Gaussian conditioning, exact LQ tracking, and a gradient-based
//! penalty NMPC used for runtime and cost comparisons.

use std::time::Instant;

use nalgebra::{DMatrix, DMatrixView, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, PlanningModel, VehicleState, CONTROL_DIM, STATE_DIM};
use crate::enks::{EnsembleModel, NoiseRole, NoiseStreams, TrajectoryEnsemble};
use crate::error::{Error, Result};
use crate::planner::{stage_cost, PlannerConfig, Scene, Waypoint};
use crate::virtual_system::{AugmentedState, HorizonConstraints};

/// Symmetric square root of a positive semidefinite matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// `x_{t+1} = F x_t + w_t`, `y_t = H x_t + v_t`, `x_0 ~ N(m0, P0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianSystem {
    pub transition: DMatrix<f64>,
    pub process_cov: DMatrix<f64>,
    pub observation: DMatrix<f64>,
    pub observation_cov: DMatrix<f64>,
    pub initial_mean: DVector<f64>,
    pub initial_cov: DMatrix<f64>,
}

impl LinearGaussianSystem {
    pub fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    pub fn observation_dim(&self) -> usize {
        self.observation.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.observation_dim();
        let checks = [
            ("transition", self.transition.shape(), (n, n)),
            ("process_cov", self.process_cov.shape(), (n, n)),
            ("observation", self.observation.shape(), (m, n)),
            ("observation_cov", self.observation_cov.shape(), (m, m)),
            ("initial_cov", self.initial_cov.shape(), (n, n)),
        ];
        for (name, found, expected) in checks {
            if found != expected {
                return Err(Error::dimension(name, expected.0 * expected.1, found.0 * found.1));
            }
        }
        if self.initial_mean.len() != n {
            return Err(Error::dimension("initial_mean", n, self.initial_mean.len()));
        }
        Ok(())
    }

    /// Draws a state path and its observations for `t = 0..=horizon`.
    pub fn simulate<R: Rng + ?Sized>(&self, horizon: usize, rng: &mut R) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let (n, m) = (self.state_dim(), self.observation_dim());
        let (sw, sv) = (psd_sqrt(&self.process_cov), psd_sqrt(&self.observation_cov));
        let mut x = &self.initial_mean + psd_sqrt(&self.initial_cov) * standard_normal(rng, n);
        let mut states = Vec::with_capacity(horizon + 1);
        let mut observations = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            if t > 0 {
                x = &self.transition * &x + &sw * standard_normal(rng, n);
            }
            observations.push(&self.observation * &x + &sv * standard_normal(rng, m));
            states.push(x.clone());
        }
        (states, observations)
    }
}

/// Smoothed moments of the stacked trajectory `(x_0, ..., x_T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl SmoothedMoments {
    /// Mean of `x_t`.
    pub fn state_mean(&self, t: usize, dim: usize) -> DVector<f64> {
        self.mean.rows(t * dim, dim).into_owned()
    }
}

fn solve_spd(s: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = s.clone().cholesky().ok_or_else(|| Error::Numerical {
        reason: format!("{what} is not positive definite"),
        condition: f64::INFINITY,
    })?;
    Ok(chol.solve(rhs))
}

/// Sequential smoother on the stacked trajectory with exact moments: at each
/// time the trajectory is extended by one prediction and then every past state
/// is updated with the new observation.
pub fn exact_sequential_ks(system: &LinearGaussianSystem, observations: &[DVector<f64>]) -> Result<SmoothedMoments> {
    system.validate()?;
    let n = system.state_dim();
    let m = system.observation_dim();
    if observations.is_empty() {
        return Err(Error::config("observations", "need at least one observation"));
    }
    let mut mean = system.initial_mean.clone();
    let mut cov = system.initial_cov.clone();
    for (t, y) in observations.iter().enumerate() {
        if y.len() != m {
            return Err(Error::dimension("observation", m, y.len()));
        }
        if t > 0 {
            let d = t * n;
            let last_mean = mean.rows(d - n, n).into_owned();
            let last_cols = cov.columns(d - n, n).into_owned();
            let last_block = cov.view((d - n, d - n), (n, n)).into_owned();
            let mut new_mean = DVector::zeros(d + n);
            new_mean.rows_mut(0, d).copy_from(&mean);
            new_mean.rows_mut(d, n).copy_from(&(&system.transition * last_mean));
            let cross = &last_cols * system.transition.transpose();
            let mut new_cov = DMatrix::zeros(d + n, d + n);
            new_cov.view_mut((0, 0), (d, d)).copy_from(&cov);
            new_cov.view_mut((0, d), (d, n)).copy_from(&cross);
            new_cov.view_mut((d, 0), (n, d)).copy_from(&cross.transpose());
            new_cov
                .view_mut((d, d), (n, n))
                .copy_from(&(&system.transition * last_block * system.transition.transpose() + &system.process_cov));
            mean = new_mean;
            cov = new_cov;
        }
        let d = mean.len();
        let p_xy = cov.columns(d - n, n) * system.observation.transpose();
        let p_yy = &system.observation * cov.view((d - n, d - n), (n, n)) * system.observation.transpose()
            + &system.observation_cov;
        let innovation = y - &system.observation * mean.rows(d - n, n);
        let gain_t = solve_spd(&p_yy, &p_xy.transpose(), "innovation covariance")?;
        mean += gain_t.transpose() * innovation;
        cov -= &p_xy * gain_t;
        cov = (&cov + cov.transpose()) * 0.5;
    }
    Ok(SmoothedMoments {
        mean,
        covariance: cov,
    })
}

/// Conditions the full joint Gaussian of states and observations in one solve.
pub fn joint_gaussian_smoother(system: &LinearGaussianSystem, observations: &[DVector<f64>]) -> Result<SmoothedMoments> {
    system.validate()?;
    let n = system.state_dim();
    let m = system.observation_dim();
    let len = observations.len();
    if len == 0 {
        return Err(Error::config("observations", "need at least one observation"));
    }
    // x_t = F^t x_0 + sum_{j=1..t} F^{t-j} w_j; write all states as a linear map
    // of the independent blocks (x_0, w_1, ..., w_T)
    let blocks = len;
    let mut map = DMatrix::zeros(len * n, blocks * n);
    let mut powers = vec![DMatrix::identity(n, n)];
    for _ in 1..len {
        powers.push(&system.transition * powers.last().unwrap());
    }
    for t in 0..len {
        for j in 0..=t {
            map.view_mut((t * n, j * n), (n, n)).copy_from(&powers[t - j]);
        }
    }
    let mut source_cov = DMatrix::zeros(blocks * n, blocks * n);
    source_cov.view_mut((0, 0), (n, n)).copy_from(&system.initial_cov);
    for j in 1..blocks {
        source_cov.view_mut((j * n, j * n), (n, n)).copy_from(&system.process_cov);
    }
    let mut source_mean = DVector::zeros(blocks * n);
    source_mean.rows_mut(0, n).copy_from(&system.initial_mean);

    let x_mean = &map * source_mean;
    let x_cov = &map * source_cov * map.transpose();
    let mut h_big = DMatrix::zeros(len * m, len * n);
    let mut v_big = DMatrix::zeros(len * m, len * m);
    for t in 0..len {
        h_big.view_mut((t * m, t * n), (m, n)).copy_from(&system.observation);
        v_big.view_mut((t * m, t * m), (m, m)).copy_from(&system.observation_cov);
    }
    let y: DVector<f64> = DVector::from_iterator(len * m, observations.iter().flat_map(|o| o.iter().copied()));
    let xy = &x_cov * h_big.transpose();
    let yy = &h_big * &x_cov * h_big.transpose() + v_big;
    let innovation = DMatrix::from_column_slice(len * m, 1, (y - &h_big * &x_mean).as_slice());
    let gain_t = solve_spd(&yy, &xy.transpose(), "joint observation covariance")?;
    let mean = x_mean + (gain_t.transpose() * innovation).column(0);
    let covariance = &x_cov - &xy * gain_t;
    Ok(SmoothedMoments { mean, covariance })
}

/// The linear-Gaussian system driven by an ensemble; noise is drawn from the
/// same keyed streams as the planner's virtual system.
pub struct LinearEnsembleModel {
    system: LinearGaussianSystem,
    process_sqrt: DMatrix<f64>,
    observation_sqrt: DMatrix<f64>,
}

impl LinearEnsembleModel {
    pub fn new(system: LinearGaussianSystem) -> Result<Self> {
        system.validate()?;
        Ok(LinearEnsembleModel {
            process_sqrt: psd_sqrt(&system.process_cov),
            observation_sqrt: psd_sqrt(&system.observation_cov),
            system,
        })
    }

    /// Initial ensemble sampled from `N(m0, P0)`.
    pub fn initial_ensemble(&self, n_members: usize, capacity: usize, noise: &NoiseStreams) -> Result<TrajectoryEnsemble> {
        let n = self.system.state_dim();
        let sqrt = psd_sqrt(&self.system.initial_cov);
        let mut slice = DMatrix::zeros(n, n_members);
        for i in 0..n_members {
            let xi = standard_normal(&mut noise.stream(i, 0, NoiseRole::Initial), n);
            slice.set_column(i, &(&self.system.initial_mean + &sqrt * xi));
        }
        TrajectoryEnsemble::from_initial(slice, capacity)
    }
}

impl EnsembleModel for LinearEnsembleModel {
    fn slice_dim(&self) -> usize {
        self.system.state_dim()
    }

    fn transition(&self, t: usize, previous: DMatrixView<'_, f64>, noise: &NoiseStreams) -> Result<DMatrix<f64>> {
        let n = self.system.state_dim();
        let mut next = &self.system.transition * previous;
        for i in 0..next.ncols() {
            let w = &self.process_sqrt * standard_normal(&mut noise.stream(i, t, NoiseRole::Transition), n);
            let mut col = next.column_mut(i);
            col += w;
        }
        Ok(next)
    }

    fn measure(&self, t: usize, slices: DMatrixView<'_, f64>, noise: &NoiseStreams) -> Result<DMatrix<f64>> {
        let m = self.system.observation_dim();
        let mut y = &self.system.observation * slices;
        for i in 0..y.ncols() {
            let v = &self.observation_sqrt * standard_normal(&mut noise.stream(i, t, NoiseRole::Measurement), m);
            let mut col = y.column_mut(i);
            col += v;
        }
        Ok(y)
    }
}

/// `x_{t+1} = A x_t + B u_t` with tracking cost `sum (x-r)^T R (x-r) + u^T Q u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTestSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub horizon: usize,
}

impl LinearTestSystem {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.state_dim(), self.control_dim());
        if self.a.shape() != (n, n) || self.b.nrows() != n {
            return Err(Error::dimension("A/B rows", n, self.b.nrows()));
        }
        if self.q.shape() != (m, m) || self.r.shape() != (n, n) {
            return Err(Error::dimension("weights", m * m + n * n, self.q.len() + self.r.len()));
        }
        if self.horizon < 1 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.q.clone().cholesky().is_none() || self.r.clone().cholesky().is_none() {
            return Err(Error::config("weights", "Q and R must be positive definite"));
        }
        Ok(())
    }

    /// States `x_0..x_H` under `controls` (at least `H` of them).
    pub fn rollout(&self, x0: &DVector<f64>, controls: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut xs = vec![x0.clone()];
        for u in controls.iter().take(self.horizon) {
            let next = &self.a * xs.last().unwrap() + &self.b * u;
            xs.push(next);
        }
        xs
    }

    /// Tracking cost of `controls` (`H + 1` entries; a missing last control counts as zero).
    pub fn cost(&self, x0: &DVector<f64>, reference: &[DVector<f64>], controls: &[DVector<f64>]) -> f64 {
        let xs = self.rollout(x0, controls);
        let mut total = 0.0;
        for (t, x) in xs.iter().enumerate() {
            let e = x - &reference[t];
            total += e.dot(&(&self.r * &e));
            if let Some(u) = controls.get(t) {
                total += u.dot(&(&self.q * u));
            }
        }
        total
    }

    /// The estimation form of the tracking problem: augmented state `(x, u)`,
    /// controls redrawn from `N(0, Q^-1)`, observations `x + N(0, R^-1)`.
    pub fn virtual_form(&self, x0: &DVector<f64>) -> Result<LinearGaussianSystem> {
        self.validate()?;
        let (n, m) = (self.state_dim(), self.control_dim());
        let q_inv = self.q.clone().cholesky().expect("validated").inverse();
        let r_inv = self.r.clone().cholesky().expect("validated").inverse();
        let mut f = DMatrix::zeros(n + m, n + m);
        f.view_mut((0, 0), (n, n)).copy_from(&self.a);
        f.view_mut((0, n), (n, m)).copy_from(&self.b);
        let mut w = DMatrix::zeros(n + m, n + m);
        w.view_mut((n, n), (m, m)).copy_from(&q_inv);
        let mut h = DMatrix::zeros(n, n + m);
        h.view_mut((0, 0), (n, n)).fill_with_identity();
        let mut mean = DVector::zeros(n + m);
        mean.rows_mut(0, n).copy_from(x0);
        Ok(LinearGaussianSystem {
            transition: f,
            process_cov: w.clone(),
            observation: h,
            observation_cov: r_inv,
            initial_mean: mean,
            initial_cov: w,
        })
    }
}

/// Exact minimizer of the tracking cost by stacked least squares. Returns
/// `u_0..u_H`; the last control only enters the cost and is zero.
pub fn lq_tracking_solve(
    system: &LinearTestSystem,
    reference: &[DVector<f64>],
    x0: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    system.validate()?;
    let (n, m, h) = (system.state_dim(), system.control_dim(), system.horizon);
    if reference.len() != h + 1 {
        return Err(Error::dimension("reference", h + 1, reference.len()));
    }
    // x_t = A^t x0 + sum_{j<t} A^{t-1-j} B u_j, stacked for t = 1..H
    let mut powers = vec![DMatrix::identity(n, n)];
    for _ in 0..h {
        powers.push(&system.a * powers.last().unwrap());
    }
    let mut gamma = DMatrix::zeros(h * n, h * m);
    let mut free = DVector::zeros(h * n);
    for t in 1..=h {
        free.rows_mut((t - 1) * n, n).copy_from(&(&powers[t] * x0 - &reference[t]));
        for j in 0..t {
            gamma
                .view_mut(((t - 1) * n, j * m), (n, m))
                .copy_from(&(&powers[t - 1 - j] * &system.b));
        }
    }
    let mut r_big = DMatrix::zeros(h * n, h * n);
    let mut q_big = DMatrix::zeros(h * m, h * m);
    for t in 0..h {
        r_big.view_mut((t * n, t * n), (n, n)).copy_from(&system.r);
        q_big.view_mut((t * m, t * m), (m, m)).copy_from(&system.q);
    }
    let lhs = gamma.transpose() * &r_big * &gamma + q_big;
    let rhs = -(gamma.transpose() * &r_big * free);
    let u = lhs
        .cholesky()
        .ok_or_else(|| Error::Numerical {
            reason: "tracking normal equations are rank deficient".into(),
            condition: f64::INFINITY,
        })?
        .solve(&rhs);
    let mut controls: Vec<DVector<f64>> = (0..h).map(|t| u.rows(t * m, m).into_owned()).collect();
    controls.push(DVector::zeros(m));
    Ok(controls)
}

/// Planning model `x' = A x + B u` on the vehicle-sized state, for checks
/// against the exact tracking solution.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.shape() != (STATE_DIM, STATE_DIM) {
            return Err(Error::dimension("linear model A", STATE_DIM * STATE_DIM, a.len()));
        }
        if b.shape() != (STATE_DIM, CONTROL_DIM) {
            return Err(Error::dimension("linear model B", STATE_DIM * CONTROL_DIM, b.len()));
        }
        Ok(LinearModel { a, b })
    }
}

impl PlanningModel for LinearModel {
    fn step_batch(&self, states: &DMatrix<f64>, controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if states.ncols() != controls.ncols() {
            return Err(Error::dimension("control batch columns", states.ncols(), controls.ncols()));
        }
        Ok(&self.a * states + &self.b * controls)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    /// Gradient iterations per penalty level.
    pub iterations: usize,
    pub outer_iterations: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    /// Relative central-difference step.
    pub fd_step: f64,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Stop a penalty level once the gradient norm drops below this.
    pub gradient_tolerance: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            iterations: 100,
            outer_iterations: 3,
            initial_penalty: 1.0,
            penalty_growth: 10.0,
            fd_step: 1e-6,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
            gradient_tolerance: 1e-6,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_penalty > 0.0) || !(self.penalty_growth >= 1.0) {
            return Err(Error::config("initial_penalty", "penalty must be positive and non-decreasing"));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::config("fd_step", "must be positive"));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) || !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::config("armijo", "line search constants must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PenaltyResult {
    /// `u_0..u_H`.
    pub controls: Vec<ControlInput>,
    pub trajectory: Vec<VehicleState>,
    /// Tracking cost without penalty terms.
    pub cost: f64,
    /// Largest constraint value `max g` over the horizon (`<= 0` is feasible).
    pub max_violation: f64,
    pub gradient_evaluations: usize,
    pub wall_time: f64,
}

struct PenaltyProblem<'a, M: ?Sized> {
    model: &'a M,
    reference: &'a [Waypoint],
    q: nalgebra::Matrix2<f64>,
    r: nalgebra::Matrix4<f64>,
    constraints: Option<HorizonConstraints<'a>>,
    x0: VehicleState,
}

impl<M: PlanningModel + ?Sized> PenaltyProblem<'_, M> {
    fn horizon(&self) -> usize {
        self.reference.len() - 1
    }

    /// Rolls out every column of `u` (`2(H+1) x K`) and returns, per column,
    /// `(tracking cost, sum of squared barrier terms, max g)`.
    fn evaluate(&self, u: &DMatrix<f64>) -> Result<Vec<(f64, f64, f64)>> {
        let h = self.horizon();
        let k = u.ncols();
        let mut states = DMatrix::from_fn(STATE_DIM, k, |r, _| self.x0.to_array()[r]);
        let mut out = vec![(0.0, 0.0, f64::NEG_INFINITY); k];
        let mut buf = Vec::new();
        for t in 0..=h {
            let controls = u.rows(t * CONTROL_DIM, CONTROL_DIM).into_owned();
            let context = self.constraints.as_ref().map(|c| c.context(t));
            for c in 0..k {
                let x = [states[(0, c)], states[(1, c)], states[(2, c)], states[(3, c)]];
                let uc = [controls[(0, c)], controls[(1, c)]];
                out[c].0 += stage_cost(&x, &uc, &self.reference[t], &self.q, &self.r);
                if let Some(ctx) = &context {
                    buf.clear();
                    let aug = AugmentedState::from_slice(&[x[0], x[1], x[2], x[3], uc[0], uc[1]]);
                    ctx.constraint_values(&aug, &mut buf);
                    let (alpha, beta) = (ctx.barrier.alpha, ctx.barrier.beta);
                    out[c].1 += buf
                        .iter()
                        .map(|&g| crate::constraints::softplus(g, alpha, beta).powi(2))
                        .sum::<f64>();
                    let g = &buf;
                    out[c].2 = g.iter().copied().fold(out[c].2, f64::max);
                }
            }
            if t < h {
                states = self.model.step_batch(&states, &controls)?;
            }
        }
        Ok(out)
    }
}

/// Single-shooting gradient descent on tracking cost plus `μ Σ φ(g)^2`, with
/// central finite-difference gradients, Barzilai-Borwein steps and Armijo
/// backtracking. `μ` grows by `penalty_growth` per outer iteration; the best
/// iterate (lowest penalized objective at the final penalty level) is returned.
pub fn penalty_nmpc_solve<M: PlanningModel + ?Sized>(
    model: &M,
    scene: &Scene<'_>,
    x0: &VehicleState,
    reference: &[Waypoint],
    planner: &PlannerConfig,
    config: &PenaltyConfig,
    init: Option<&[ControlInput]>,
) -> Result<PenaltyResult> {
    let started = Instant::now();
    config.validate()?;
    let h = planner.horizon;
    if reference.len() != h + 1 {
        return Err(Error::dimension("reference waypoints", h + 1, reference.len()));
    }
    let constraints = match (&planner.barrier, scene.road) {
        (Some(barrier), Some(road)) => {
            let mut c = HorizonConstraints::new(road, scene.obstacles, h, planner.dt, &planner.constraint, barrier);
            let s = road.project([x0.x_pos, x0.y_pos]).s;
            let reach = h as f64 * planner.dt * (x0.speed.max(reference[h][3]) + 15.0);
            c.window = Some((s - 20.0, s + reach + 20.0));
            Some(c)
        }
        (Some(_), None) => return Err(Error::config("scene.road", "constrained planning needs a road")),
        (None, _) => None,
    };
    let problem = PenaltyProblem {
        model,
        reference,
        q: planner.control_weight_matrix(),
        r: planner.state_weight_matrix(),
        constraints,
        x0: *x0,
    };
    let dim = CONTROL_DIM * (h + 1);
    let mut u = DVector::zeros(dim);
    if let Some(init) = init {
        if init.len() != h + 1 {
            return Err(Error::dimension("initial controls", h + 1, init.len()));
        }
        for (t, c) in init.iter().enumerate() {
            u[2 * t] = c.accel;
            u[2 * t + 1] = c.steer;
        }
    }

    let objective = |vals: &(f64, f64, f64), mu: f64| vals.0 + mu * vals.1;
    let evaluate_one = |u: &DVector<f64>| -> Result<(f64, f64, f64)> {
        let v = problem.evaluate(&DMatrix::from_column_slice(dim, 1, u.as_slice()))?[0];
        if !v.0.is_finite() || !v.1.is_finite() {
            return Err(Error::Numerical {
                reason: "penalty objective is not finite".into(),
                condition: f64::NAN,
            });
        }
        Ok(v)
    };
    // all 2 * dim perturbed rollouts go through the model as one batch
    let gradient = |u: &DVector<f64>, mu: f64| -> Result<DVector<f64>> {
        let mut batch = DMatrix::zeros(dim, 2 * dim);
        let mut steps = vec![0.0; dim];
        for j in 0..dim {
            let step = config.fd_step * u[j].abs().max(1.0);
            steps[j] = step;
            let mut plus = u.clone();
            plus[j] += step;
            let mut minus = u.clone();
            minus[j] -= step;
            batch.set_column(2 * j, &plus);
            batch.set_column(2 * j + 1, &minus);
        }
        let vals = problem.evaluate(&batch)?;
        Ok(DVector::from_fn(dim, |j, _| {
            (objective(&vals[2 * j], mu) - objective(&vals[2 * j + 1], mu)) / (2.0 * steps[j])
        }))
    };

    let mut mu = config.initial_penalty;
    let mut gradient_evaluations = 0;
    let mut best = (u.clone(), evaluate_one(&u)?);
    for outer in 0..config.outer_iterations {
        if outer > 0 {
            mu *= config.penalty_growth;
        }
        let mut current = evaluate_one(&u)?;
        best = (u.clone(), current);
        let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
        for _ in 0..config.iterations {
            let g = gradient(&u, mu)?;
            gradient_evaluations += 1;
            let g_norm = g.norm();
            if !g_norm.is_finite() {
                return Err(Error::Numerical {
                    reason: "penalty gradient is not finite".into(),
                    condition: f64::NAN,
                });
            }
            if g_norm < config.gradient_tolerance {
                break;
            }
            let mut step = match &prev {
                Some((u_prev, g_prev)) => {
                    let s = &u - u_prev;
                    let y = &g - g_prev;
                    let sy = s.dot(&y);
                    if sy > 0.0 {
                        s.dot(&s) / sy
                    } else {
                        1e-3
                    }
                }
                None => 1e-3 / g_norm.max(1.0),
            };
            let f0 = objective(&current, mu);
            let mut accepted = None;
            for _ in 0..=config.max_backtracks {
                let trial = &u - &g * step;
                if let Ok(vals) = evaluate_one(&trial) {
                    if objective(&vals, mu) <= f0 - config.armijo * step * g_norm * g_norm {
                        accepted = Some((trial, vals));
                        break;
                    }
                }
                step *= config.backtrack;
            }
            let Some((next, vals)) = accepted else { break };
            prev = Some((u.clone(), g));
            u = next;
            current = vals;
            if objective(&current, mu) < objective(&best.1, mu) {
                best = (u.clone(), current);
            }
        }
        u = best.0.clone();
    }

    let (u_best, vals) = best;
    let controls: Vec<ControlInput> = (0..=h)
        .map(|t| ControlInput::new(u_best[2 * t], u_best[2 * t + 1]))
        .collect();
    let mut trajectory = vec![*x0];
    let mut s = DMatrix::from_column_slice(STATE_DIM, 1, &x0.to_array());
    for c in controls.iter().take(h) {
        s = model.step_batch(&s, &DMatrix::from_column_slice(CONTROL_DIM, 1, &c.to_array()))?;
        trajectory.push(VehicleState::from_slice(s.as_slice()));
    }
    Ok(PenaltyResult {
        controls,
        trajectory,
        cost: vals.0,
        max_violation: vals.2,
        gradient_evaluations,
        wall_time: started.elapsed().as_secs_f64(),
    })
}
