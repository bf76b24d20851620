//! The augmented estimation system whose smoothing posterior is the motion plan.
//!
//! State `x̄ = (x, u)`: the vehicle part follows the planning model, the
//! control part is redrawn from `N(0, Q^-1)` at every step. Measurement
//! `ȳ = (x + v, φ(g(x, u)) + η)` with `v ~ N(0, R^-1)` and `η ~ N(0, R_η I)`;
//! the planner observes `(r_t, 0)`.

use nalgebra::{DMatrix, DMatrixView, Matrix2, Matrix4, SMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::constraints::{
    softplus, stack_with_boundary, BarrierConfig, ConstraintConfig, Footprint, Obstacle,
    ObstacleSnapshot,
};
use crate::dynamics::{ControlInput, PlanningModel, VehicleState, CONTROL_DIM, STATE_DIM};
use crate::enks::{EnsembleModel, NoiseRole, NoiseStreams};
use crate::error::{Error, Result};
use crate::road::RoadGeometry;

pub const SLICE_DIM: usize = STATE_DIM + CONTROL_DIM;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedState {
    pub vehicle: VehicleState,
    pub control: ControlInput,
}

impl AugmentedState {
    pub fn new(vehicle: VehicleState, control: ControlInput) -> Self {
        AugmentedState { vehicle, control }
    }

    pub fn to_array(&self) -> [f64; SLICE_DIM] {
        let v = self.vehicle.to_array();
        let u = self.control.to_array();
        [v[0], v[1], v[2], v[3], u[0], u[1]]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        AugmentedState {
            vehicle: VehicleState::from_slice(&v[..STATE_DIM]),
            control: ControlInput::from_slice(&v[STATE_DIM..SLICE_DIM]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualMeasurement {
    pub reference: [f64; STATE_DIM],
    pub barrier: Vec<f64>,
}

impl VirtualMeasurement {
    pub fn to_vec(&self) -> Vec<f64> {
        self.reference.iter().chain(&self.barrier).copied().collect()
    }
}

/// Symmetric square root of a positive semidefinite matrix.
fn psd_sqrt<const D: usize>(m: &SMatrix<f64, D, D>) -> SMatrix<f64, D, D>
where
    nalgebra::Const<D>: nalgebra::DimMin<nalgebra::Const<D>, Output = nalgebra::Const<D>>
        + nalgebra::DimSub<nalgebra::U1>,
    nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<nalgebra::Const<D>>
        + nalgebra::allocator::Allocator<
            <nalgebra::Const<D> as nalgebra::DimSub<nalgebra::U1>>::Output,
        >,
{
    let eig = SymmetricEigen::new(*m);
    let mut d = eig.eigenvalues;
    for v in d.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    eig.eigenvectors * SMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn is_symmetric<const D: usize>(m: &SMatrix<f64, D, D>) -> bool {
    (m - m.transpose()).abs().max() <= 1e-12 * (1.0 + m.abs().max())
}

/// Noise covariances of the augmented system. With weights `Q`, `R` of the
/// tracking cost these are `Q^-1`, `R^-1` and `R_η I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub control_cov: Matrix2<f64>,
    pub reference_cov: Matrix4<f64>,
    pub barrier_var: f64,
    control_sqrt: Matrix2<f64>,
    reference_sqrt: Matrix4<f64>,
}

impl NoiseModel {
    /// Builds the noise model from covariances directly; semidefinite
    /// (including zero) covariances are allowed.
    pub fn from_covariances(
        control_cov: Matrix2<f64>,
        reference_cov: Matrix4<f64>,
        barrier_var: f64,
    ) -> Result<Self> {
        if !is_symmetric(&control_cov) || !is_symmetric(&reference_cov) {
            return Err(Error::config("noise", "covariances must be symmetric"));
        }
        if !(barrier_var >= 0.0) {
            return Err(Error::config("noise_var", "must be non-negative"));
        }
        Ok(NoiseModel {
            control_sqrt: psd_sqrt(&control_cov),
            reference_sqrt: psd_sqrt(&reference_cov),
            control_cov,
            reference_cov,
            barrier_var,
        })
    }

    /// Covariances from the weights of the tracking cost, which must be
    /// symmetric positive definite.
    pub fn from_weights(
        control_weight: Matrix2<f64>,
        state_weight: Matrix4<f64>,
        barrier_var: f64,
    ) -> Result<Self> {
        let q_inv = control_weight
            .cholesky()
            .ok_or_else(|| Error::config("control_weight", "must be positive definite"))?
            .inverse();
        let r_inv = state_weight
            .cholesky()
            .ok_or_else(|| Error::config("state_weight", "must be positive definite"))?
            .inverse();
        NoiseModel::from_covariances(q_inv, r_inv, barrier_var)
    }

    pub fn sample_control<R: Rng + ?Sized>(&self, rng: &mut R) -> ControlInput {
        let xi = nalgebra::Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let u = self.control_sqrt * xi;
        ControlInput::new(u[0], u[1])
    }

    pub fn sample_reference_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; STATE_DIM] {
        let xi = nalgebra::Vector4::from_fn(|_, _| rng.sample(StandardNormal));
        let v = self.reference_sqrt * xi;
        [v[0], v[1], v[2], v[3]]
    }

    pub fn sample_barrier_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let xi: f64 = rng.sample(StandardNormal);
        self.barrier_var.sqrt() * xi
    }
}

/// Constraint data needed to evaluate the barrier part of the measurement at
/// one time step.
#[derive(Debug, Clone, Copy)]
pub struct BarrierContext<'a> {
    pub road: &'a RoadGeometry,
    /// Obstacles already predicted to the measurement time.
    pub obstacles: &'a [Obstacle],
    pub constraint: &'a ConstraintConfig,
    pub barrier: &'a BarrierConfig,
    pub footprint: &'a Footprint,
    /// Arclength range searched when projecting onto the road; `None` searches
    /// the whole road.
    pub window: Option<(f64, f64)>,
}

impl BarrierContext<'_> {
    pub fn n_constraints(&self) -> usize {
        ConstraintConfig::n_constraints(self.obstacles.len())
    }

    /// `g(x, u)`, appended to `out`.
    pub fn constraint_values(&self, x: &AugmentedState, out: &mut Vec<f64>) {
        let p = [x.vehicle.x_pos, x.vehicle.y_pos];
        let projection = match self.window {
            Some((lo, hi)) => self.road.project_window(p, lo, hi),
            None => self.road.project(p),
        };
        let boundary = projection.lateral.abs() - self.road.half_width;
        stack_with_boundary(
            &x.vehicle,
            &x.control,
            self.obstacles,
            boundary,
            self.constraint,
            self.footprint,
            out,
        );
    }

    /// `φ(g(x, u))`, appended to `out`.
    pub fn barrier_values(&self, x: &AugmentedState, out: &mut Vec<f64>) {
        let start = out.len();
        self.constraint_values(x, out);
        for g in &mut out[start..] {
            *g = softplus(*g, self.barrier.alpha, self.barrier.beta);
        }
    }
}

/// `x̄' = f̄(x̄) + w̄`: the vehicle advances under the current control, the
/// control is replaced by a fresh draw from `N(0, Q^-1)`.
pub fn transition_sample<M, R>(
    x: &AugmentedState,
    model: &M,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<AugmentedState>
where
    M: PlanningModel + ?Sized,
    R: Rng + ?Sized,
{
    let states = DMatrix::from_column_slice(STATE_DIM, 1, &x.vehicle.to_array());
    let controls = DMatrix::from_column_slice(CONTROL_DIM, 1, &x.control.to_array());
    let next = model.step_batch(&states, &controls)?;
    Ok(AugmentedState::new(
        VehicleState::from_slice(next.as_slice()),
        noise.sample_control(rng),
    ))
}

/// `ȳ = h̄(x̄) + v̄`. Without a barrier context only the reference part is produced.
pub fn measurement_sample<R: Rng + ?Sized>(
    x: &AugmentedState,
    noise: &NoiseModel,
    context: Option<&BarrierContext<'_>>,
    rng: &mut R,
) -> VirtualMeasurement {
    let v = noise.sample_reference_noise(rng);
    let s = x.vehicle.to_array();
    let reference = [s[0] + v[0], s[1] + v[1], s[2] + v[2], s[3] + v[3]];
    let mut barrier = Vec::new();
    if let Some(ctx) = context {
        barrier.reserve(ctx.n_constraints());
        ctx.barrier_values(x, &mut barrier);
        for b in &mut barrier {
            *b += noise.sample_barrier_noise(rng);
        }
    }
    VirtualMeasurement { reference, barrier }
}

/// Constant-velocity, constant-heading extrapolation by `steps * dt` seconds.
pub fn predicted_obstacles(obstacles: &[Obstacle], steps: usize, dt: f64) -> ObstacleSnapshot {
    let tau = steps as f64 * dt;
    obstacles
        .iter()
        .map(|ob| {
            let (sin, cos) = ob.heading.sin_cos();
            Obstacle {
                x: ob.x + ob.speed * tau * cos,
                y: ob.y + ob.speed * tau * sin,
                ..ob.clone()
            }
        })
        .collect()
}

/// Initial slice for a cold start: every member sits at the measured state,
/// controls are drawn from the prior `N(0, Q^-1)`.
pub fn initial_slice(
    state: &VehicleState,
    noise: &NoiseModel,
    n_members: usize,
    streams: &NoiseStreams,
) -> DMatrix<f64> {
    let mut slice = DMatrix::zeros(SLICE_DIM, n_members);
    let s = state.to_array();
    for i in 0..n_members {
        let u = noise.sample_control(&mut streams.stream(i, 0, NoiseRole::Initial));
        let mut col = slice.column_mut(i);
        for r in 0..STATE_DIM {
            col[r] = s[r];
        }
        col[4] = u.accel;
        col[5] = u.steer;
    }
    slice
}

/// Constraint data for a whole horizon.
#[derive(Debug, Clone)]
pub struct HorizonConstraints<'a> {
    pub road: &'a RoadGeometry,
    /// `predicted[t]` holds the obstacles predicted `t` steps ahead.
    pub predicted: Vec<ObstacleSnapshot>,
    pub constraint: ConstraintConfig,
    pub barrier: BarrierConfig,
    pub footprint: Footprint,
    pub window: Option<(f64, f64)>,
}

impl<'a> HorizonConstraints<'a> {
    pub fn new(
        road: &'a RoadGeometry,
        obstacles: &[Obstacle],
        horizon: usize,
        dt: f64,
        constraint: &ConstraintConfig,
        barrier: &BarrierConfig,
    ) -> Self {
        HorizonConstraints {
            road,
            predicted: (0..=horizon)
                .map(|t| predicted_obstacles(obstacles, t, dt))
                .collect(),
            constraint: constraint.clone(),
            barrier: *barrier,
            footprint: constraint.footprint(),
            window: None,
        }
    }

    pub fn context(&self, t: usize) -> BarrierContext<'_> {
        BarrierContext {
            road: self.road,
            obstacles: &self.predicted[t],
            constraint: &self.constraint,
            barrier: &self.barrier,
            footprint: &self.footprint,
            window: self.window,
        }
    }

    pub fn n_constraints(&self) -> usize {
        ConstraintConfig::n_constraints(self.predicted.first().map_or(0, |p| p.len()))
    }
}

/// The augmented system wired into the smoother.
pub struct VirtualSystem<'a, M: ?Sized> {
    pub model: &'a M,
    pub noise: &'a NoiseModel,
    pub constraints: Option<HorizonConstraints<'a>>,
}

impl<M: PlanningModel + ?Sized> VirtualSystem<'_, M> {
    pub fn measurement_dim(&self) -> usize {
        STATE_DIM + self.constraints.as_ref().map_or(0, |c| c.n_constraints())
    }
}

impl<M: PlanningModel + ?Sized> EnsembleModel for VirtualSystem<'_, M> {
    fn slice_dim(&self) -> usize {
        SLICE_DIM
    }

    fn transition(
        &self,
        t: usize,
        previous: DMatrixView<'_, f64>,
        noise: &NoiseStreams,
    ) -> Result<DMatrix<f64>> {
        let n = previous.ncols();
        let states = previous.rows(0, STATE_DIM).into_owned();
        let controls = previous.rows(STATE_DIM, CONTROL_DIM).into_owned();
        let next_states = self.model.step_batch(&states, &controls)?;
        if next_states.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("planning model diverged at step {t}")));
        }
        let mut next = DMatrix::zeros(SLICE_DIM, n);
        next.rows_mut(0, STATE_DIM).copy_from(&next_states);
        for i in 0..n {
            let u = self
                .noise
                .sample_control(&mut noise.stream(i, t, NoiseRole::Transition));
            next[(4, i)] = u.accel;
            next[(5, i)] = u.steer;
        }
        Ok(next)
    }

    fn measure(
        &self,
        t: usize,
        slices: DMatrixView<'_, f64>,
        noise: &NoiseStreams,
    ) -> Result<DMatrix<f64>> {
        let n = slices.ncols();
        let context = self.constraints.as_ref().map(|c| c.context(t));
        let mut out = DMatrix::zeros(self.measurement_dim(), n);
        for i in 0..n {
            let col = slices.column(i);
            let x = AugmentedState::from_slice(&[col[0], col[1], col[2], col[3], col[4], col[5]]);
            let y = measurement_sample(
                &x,
                self.noise,
                context.as_ref(),
                &mut noise.stream(i, t, NoiseRole::Measurement),
            );
            let mut dst = out.column_mut(i);
            for (r, v) in y.reference.iter().chain(&y.barrier).enumerate() {
                dst[r] = *v;
            }
        }
        Ok(out)
    }
}
