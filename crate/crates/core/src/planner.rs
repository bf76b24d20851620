//! Receding-horizon planning: each step smooths the augmented system over the
//! horizon and applies the first control of the smoothed mean.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::constraints::{BarrierConfig, ConstraintConfig, Obstacle};
use crate::dynamics::{ControlInput, PlanningModel, VehicleState, STATE_DIM};
use crate::enks::{smooth_horizon, NoiseStreams, SmootherConfig, SmootherDiagnostics, TrajectoryEnsemble};
use crate::error::{Error, Result};
use crate::road::{angle_diff, RoadGeometry};
use crate::virtual_system::{
    initial_slice, AugmentedState, HorizonConstraints, NoiseModel, VirtualSystem, SLICE_DIM,
};

/// A reference waypoint `(x, y, heading, speed)`.
pub type Waypoint = [f64; STATE_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub dt: f64,
    pub smoother: SmootherConfig,
    /// Diagonal of the control weight `Q`.
    pub control_weight: [f64; 2],
    /// Diagonal of the tracking weight `R`.
    pub state_weight: [f64; 4],
    /// `None` plans without inequality constraints.
    pub barrier: Option<BarrierConfig>,
    #[serde(default)]
    pub constraint: ConstraintConfig,
    #[serde(default = "default_true")]
    pub warmstart: bool,
}

fn default_true() -> bool {
    true
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 40,
            dt: 0.1,
            smoother: SmootherConfig::default(),
            control_weight: [1.0, 100.0],
            state_weight: [1.0, 1.0, 1.0, 1.0],
            barrier: Some(BarrierConfig::default()),
            constraint: ConstraintConfig::default(),
            warmstart: true,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt", "must be positive"));
        }
        self.smoother.validate()?;
        if let Some(b) = &self.barrier {
            b.validate()?;
        }
        self.constraint.validate()?;
        self.noise_model().map(|_| ())
    }

    pub fn control_weight_matrix(&self) -> Matrix2<f64> {
        Matrix2::from_diagonal(&Vector2::from(self.control_weight))
    }

    pub fn state_weight_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::from(self.state_weight))
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        let eta = self.barrier.map_or(1.0, |b| b.noise_var);
        NoiseModel::from_weights(self.control_weight_matrix(), self.state_weight_matrix(), eta)
    }
}

/// What the planner knows about the world at the current step.
#[derive(Debug, Clone, Copy)]
pub struct Scene<'a> {
    pub road: Option<&'a RoadGeometry>,
    /// Current obstacle states; motion beyond now is extrapolated at constant velocity.
    pub obstacles: &'a [Obstacle],
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    /// `u_k*` after saturation.
    pub applied_control: ControlInput,
    /// Control slice of the smoothed mean before saturation.
    pub raw_control: ControlInput,
    pub mean_trajectory: Vec<AugmentedState>,
    /// Wall-clock seconds spent in `plan_step`.
    pub plan_time: f64,
    pub diagnostics: SmootherDiagnostics,
}

/// Waypoints along the centerline starting at the vehicle's projection and
/// advancing `target_speed * dt` per step. Headings are unwrapped around the
/// vehicle heading.
pub fn build_reference(
    road: &RoadGeometry,
    state: &VehicleState,
    horizon: usize,
    dt: f64,
    target_speed: f64,
) -> Result<Vec<Waypoint>> {
    if !(target_speed >= 0.0) || !target_speed.is_finite() {
        return Err(Error::config("target_speed", "must be finite and non-negative"));
    }
    let s0 = road.project([state.x_pos, state.y_pos]).s;
    let mut heading = state.heading;
    Ok((0..=horizon)
        .map(|t| {
            let (p, h) = road.point_at(s0 + t as f64 * target_speed * dt);
            heading += angle_diff(h, heading);
            [p[0], p[1], heading, target_speed]
        })
        .collect())
}

/// `(x - r)^T R (x - r) + u^T Q u`.
pub fn stage_cost(
    x: &[f64; STATE_DIM],
    u: &[f64; 2],
    r: &[f64; STATE_DIM],
    q: &Matrix2<f64>,
    r_weight: &Matrix4<f64>,
) -> f64 {
    let e = Vector4::new(x[0] - r[0], x[1] - r[1], x[2] - r[2], x[3] - r[3]);
    let u = Vector2::from(*u);
    e.dot(&(r_weight * e)) + u.dot(&(q * u))
}

/// Initial slice for the next step: every member's smoothed slice at index 1,
/// with the vehicle part replaced by the measured state.
pub fn warmstart(previous: &TrajectoryEnsemble, state: &VehicleState) -> Result<DMatrix<f64>> {
    if previous.len() < 2 {
        return Err(Error::config("warmstart", "previous ensemble needs at least two slices"));
    }
    if previous.slice_dim() != SLICE_DIM {
        return Err(Error::dimension("warmstart slice", SLICE_DIM, previous.slice_dim()));
    }
    let mut slice = previous.slice(1).into_owned();
    let s = state.to_array();
    for mut col in slice.column_iter_mut() {
        for r in 0..STATE_DIM {
            col[r] = s[r];
        }
    }
    Ok(slice)
}

pub struct Planner<M> {
    model: M,
    config: PlannerConfig,
    noise: NoiseModel,
    streams: NoiseStreams,
    previous: Option<TrajectoryEnsemble>,
    steps: u64,
}

impl<M: PlanningModel> Planner<M> {
    pub fn new(model: M, config: PlannerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Planner {
            noise: config.noise_model()?,
            streams: NoiseStreams::new(config.smoother.rng_seed),
            model,
            config,
            previous: None,
            steps: 0,
        })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    /// Final smoothed ensemble of the last step.
    pub fn last_ensemble(&self) -> Option<&TrajectoryEnsemble> {
        self.previous.as_ref()
    }

    /// Forgets the warmstart state and restarts the noise streams.
    pub fn reset(&mut self) {
        self.previous = None;
        self.steps = 0;
    }

    /// One receding-horizon step. `reference` holds `H + 1` waypoints, used
    /// as given (see [`build_reference`] for heading unwrapping).
    pub fn plan_step(
        &mut self,
        state: &VehicleState,
        reference: &[Waypoint],
        scene: &Scene<'_>,
    ) -> Result<PlanResult> {
        let started = Instant::now();
        let h = self.config.horizon;
        if reference.len() != h + 1 {
            return Err(Error::dimension("reference waypoints", h + 1, reference.len()));
        }
        if !state.is_finite() {
            return Err(Error::InvalidState(format!("non-finite state {state:?}")));
        }
        let n = self.config.smoother.n_members;
        let streams = self.streams.derive(self.steps);

        let initial = match (&self.previous, self.config.warmstart) {
            (Some(prev), true) if prev.n_members() == n => warmstart(prev, state)?,
            _ => initial_slice(state, &self.noise, n, &streams),
        };

        let constraints = match (&self.config.barrier, scene.road) {
            (Some(barrier), Some(road)) => {
                let mut c = HorizonConstraints::new(
                    road,
                    scene.obstacles,
                    h,
                    self.config.dt,
                    &self.config.constraint,
                    barrier,
                );
                // members stay near the vehicle, so a local arclength window suffices
                let s = road.project([state.x_pos, state.y_pos]).s;
                let reach = h as f64 * self.config.dt * (state.speed.max(reference[h][3]) + 15.0);
                c.window = Some((s - 20.0, s + reach + 20.0));
                Some(c)
            }
            (Some(_), None) => {
                return Err(Error::config("scene.road", "constrained planning needs a road"))
            }
            (None, _) => None,
        };
        let n_g = constraints.as_ref().map_or(0, |c| c.n_constraints());
        let observations: Vec<DVector<f64>> = reference
            .iter()
            .map(|r| {
                let mut y = DVector::zeros(STATE_DIM + n_g);
                y.rows_mut(0, STATE_DIM).copy_from_slice(r);
                y
            })
            .collect();

        let system = VirtualSystem {
            model: &self.model,
            noise: &self.noise,
            constraints,
        };
        let smoothed = smooth_horizon(
            TrajectoryEnsemble::from_initial(initial, h + 1)?,
            h,
            &system,
            &observations,
            &self.config.smoother,
            &streams,
        )?;

        let mean = &smoothed.stats.mean;
        let mean_trajectory: Vec<AugmentedState> = (0..=h)
            .map(|t| AugmentedState::from_slice(&mean.as_slice()[t * SLICE_DIM..(t + 1) * SLICE_DIM]))
            .collect();
        let raw_control = mean_trajectory[0].control;
        if !raw_control.is_finite() {
            return Err(Error::Numerical {
                reason: "smoothed control is not finite".into(),
                condition: smoothed.diagnostics.max_condition(),
            });
        }
        let applied_control = raw_control.saturate(self.config.constraint.u_min, self.config.constraint.u_max);
        self.previous = Some(smoothed.ensemble);
        self.steps += 1;
        Ok(PlanResult {
            applied_control,
            raw_control,
            mean_trajectory,
            plan_time: started.elapsed().as_secs_f64(),
            diagnostics: smoothed.diagnostics,
        })
    }
}
