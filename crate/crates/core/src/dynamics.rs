//! Vehicle models: the kinematic single-track plant, its RK4 integrator, and
//! the one-step Euler discretization of the learned model used by the planner.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::MlpModel;

pub const STATE_DIM: usize = 4;
pub const CONTROL_DIM: usize = 2;

/// Planar pose and longitudinal speed of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x_pos: f64,
    pub y_pos: f64,
    pub heading: f64,
    pub speed: f64,
}

impl VehicleState {
    pub const fn new(x_pos: f64, y_pos: f64, heading: f64, speed: f64) -> Self {
        VehicleState {
            x_pos,
            y_pos,
            heading,
            speed,
        }
    }

    pub fn to_array(self) -> [f64; STATE_DIM] {
        [self.x_pos, self.y_pos, self.heading, self.speed]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        VehicleState::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidState(format!("non-finite vehicle state {self:?}")))
        }
    }
}

/// Longitudinal acceleration and front-wheel steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub accel: f64,
    pub steer: f64,
}

impl ControlInput {
    pub const fn new(accel: f64, steer: f64) -> Self {
        ControlInput { accel, steer }
    }

    pub fn to_array(self) -> [f64; CONTROL_DIM] {
        [self.accel, self.steer]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        ControlInput::new(v[0], v[1])
    }

    pub fn is_finite(&self) -> bool {
        self.accel.is_finite() && self.steer.is_finite()
    }

    /// Componentwise clamp into `[lo, hi]`.
    pub fn saturate(self, lo: ControlInput, hi: ControlInput) -> Self {
        ControlInput::new(self.accel.clamp(lo.accel, hi.accel), self.steer.clamp(lo.steer, hi.steer))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicycleParams {
    pub wheelbase: f64,
    pub speed_floor: f64,
    pub speed_ceiling: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        BicycleParams {
            wheelbase: 2.5,
            speed_floor: 0.0,
            speed_ceiling: 40.0,
        }
    }
}

impl BicycleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.wheelbase > 0.0 && self.wheelbase.is_finite()) {
            return Err(Error::config("wheelbase", "must be positive and finite"));
        }
        if !(self.speed_floor >= 0.0 && self.speed_floor < self.speed_ceiling) {
            return Err(Error::config(
                "speed_floor",
                "need 0 <= speed_floor < speed_ceiling",
            ));
        }
        Ok(())
    }
}

/// Continuous-time kinematic single-track model:
/// `(v cos psi, v sin psi, v tan(delta) / wheelbase, a)`.
pub fn bicycle_derivative(
    state: &VehicleState,
    control: &ControlInput,
    params: &BicycleParams,
) -> Result<[f64; STATE_DIM]> {
    state.check_finite()?;
    if !control.is_finite() {
        return Err(Error::InvalidState(format!("non-finite control {control:?}")));
    }
    Ok(derivative_unchecked(state.to_array(), control, params.wheelbase))
}

#[inline]
fn derivative_unchecked(s: [f64; STATE_DIM], u: &ControlInput, wheelbase: f64) -> [f64; STATE_DIM] {
    let (sin, cos) = s[2].sin_cos();
    [
        s[3] * cos,
        s[3] * sin,
        s[3] * u.steer.tan() / wheelbase,
        u.accel,
    ]
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Ground-truth plant step: classic RK4 over `dt`, then speed clamp and heading wrap.
pub fn true_step(
    state: &VehicleState,
    control: &ControlInput,
    params: &BicycleParams,
    dt: f64,
) -> Result<VehicleState> {
    if !(dt > 0.0) {
        return Err(Error::config("dt", "time step must be positive"));
    }
    state.check_finite()?;
    if !control.is_finite() {
        return Err(Error::InvalidState(format!("non-finite control {control:?}")));
    }
    let s0 = state.to_array();
    let add = |s: [f64; 4], k: [f64; 4], h: f64| {
        [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2], s[3] + h * k[3]]
    };
    let l = params.wheelbase;
    let k1 = derivative_unchecked(s0, control, l);
    let k2 = derivative_unchecked(add(s0, k1, dt / 2.0), control, l);
    let k3 = derivative_unchecked(add(s0, k2, dt / 2.0), control, l);
    let k4 = derivative_unchecked(add(s0, k3, dt), control, l);
    let mut next = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        next[i] = s0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    let out = VehicleState::new(
        next[0],
        next[1],
        wrap_angle(next[2]),
        next[3].clamp(params.speed_floor, params.speed_ceiling),
    );
    if !out.is_finite() {
        return Err(Error::InvalidState(format!("integration produced {out:?}")));
    }
    Ok(out)
}

/// Evaluates the learned state derivative at one `(state, control)` point.
pub fn mlp_forward(
    model: &MlpModel,
    state: &VehicleState,
    control: &ControlInput,
) -> Result<[f64; STATE_DIM]> {
    let mut input = DMatrix::zeros(6, 1);
    for (i, v) in state.to_array().iter().chain(control.to_array().iter()).enumerate() {
        input[(i, 0)] = *v;
    }
    let out = model.forward_batch(&input)?;
    Ok([out[(0, 0)], out[(1, 0)], out[(2, 0)], out[(3, 0)]])
}

/// One forward-Euler step of the learned model. No clamping or wrapping.
pub fn surrogate_step(
    model: &MlpModel,
    state: &VehicleState,
    control: &ControlInput,
    dt: f64,
) -> Result<VehicleState> {
    if !(dt > 0.0) {
        return Err(Error::config("dt", "time step must be positive"));
    }
    let d = mlp_forward(model, state, control)?;
    Ok(VehicleState::new(
        state.x_pos + dt * d[0],
        state.y_pos + dt * d[1],
        state.heading + dt * d[2],
        state.speed + dt * d[3],
    ))
}

/// Discrete-time prediction model used inside the planner.
///
/// `states` is `4 x N` and `controls` is `2 x N`, one ensemble member per
/// column; the result holds the successor states.
pub trait PlanningModel: Send + Sync {
    fn step_batch(&self, states: &DMatrix<f64>, controls: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

impl<M: PlanningModel + ?Sized> PlanningModel for &M {
    fn step_batch(&self, states: &DMatrix<f64>, controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        (**self).step_batch(states, controls)
    }
}

impl<M: PlanningModel + ?Sized> PlanningModel for Box<M> {
    fn step_batch(&self, states: &DMatrix<f64>, controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        (**self).step_batch(states, controls)
    }
}

fn check_batch(states: &DMatrix<f64>, controls: &DMatrix<f64>) -> Result<()> {
    if states.nrows() != STATE_DIM {
        return Err(Error::dimension("state batch rows", STATE_DIM, states.nrows()));
    }
    if controls.nrows() != CONTROL_DIM {
        return Err(Error::dimension("control batch rows", CONTROL_DIM, controls.nrows()));
    }
    if states.ncols() != controls.ncols() {
        return Err(Error::dimension("control batch columns", states.ncols(), controls.ncols()));
    }
    Ok(())
}

/// The learned model discretized with forward Euler.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub network: MlpModel,
    pub dt: f64,
}

impl SurrogateModel {
    pub fn new(network: MlpModel, dt: f64) -> Result<Self> {
        network.validate()?;
        if !(dt > 0.0) {
            return Err(Error::config("dt", "time step must be positive"));
        }
        Ok(SurrogateModel { network, dt })
    }
}

impl PlanningModel for SurrogateModel {
    fn step_batch(&self, states: &DMatrix<f64>, controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_batch(states, controls)?;
        let n = states.ncols();
        let mut input = DMatrix::zeros(6, n);
        input.rows_mut(0, STATE_DIM).copy_from(states);
        input.rows_mut(STATE_DIM, CONTROL_DIM).copy_from(controls);
        let deriv = self.network.forward_batch(&input)?;
        Ok(states + deriv * self.dt)
    }
}

/// Forward-Euler discretization of the analytic bicycle model, used when no
/// trained network is available.
#[derive(Debug, Clone, Copy)]
pub struct KinematicModel {
    pub params: BicycleParams,
    pub dt: f64,
}

impl PlanningModel for KinematicModel {
    fn step_batch(&self, states: &DMatrix<f64>, controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_batch(states, controls)?;
        let mut next = states.clone();
        for c in 0..states.ncols() {
            let s = [states[(0, c)], states[(1, c)], states[(2, c)], states[(3, c)]];
            let u = ControlInput::new(controls[(0, c)], controls[(1, c)]);
            let d = derivative_unchecked(s, &u, self.params.wheelbase);
            for r in 0..STATE_DIM {
                next[(r, c)] += self.dt * d[r];
            }
        }
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, DenseLayer, Normalization};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn derivative_straight_and_vertical() {
        let p = BicycleParams::default();
        let d = bicycle_derivative(&VehicleState::new(0.0, 0.0, 0.0, 1.0), &ControlInput::default(), &p)
            .unwrap();
        assert_eq!(d, [1.0, 0.0, 0.0, 0.0]);
        let d = bicycle_derivative(
            &VehicleState::new(0.0, 0.0, PI / 2.0, 2.0),
            &ControlInput::new(1.0, 0.0),
            &p,
        )
        .unwrap();
        assert!(close(d[0], 0.0, 1e-15) && close(d[1], 2.0, 1e-15));
        assert_eq!((d[2], d[3]), (0.0, 1.0));
    }

    #[test]
    fn derivative_general_point() {
        // Closed-form values evaluated with mpmath at 30 digits.
        let d = bicycle_derivative(
            &VehicleState::new(3.0, -1.0, 0.3, 5.0),
            &ControlInput::new(0.5, 0.1),
            &BicycleParams::default(),
        )
        .unwrap();
        let expected = [4.776682445628030, 1.4776010333066979, 0.20066934417090109, 0.5];
        for i in 0..4 {
            assert!(close(d[i], expected[i], 1e-14), "{i}: {} vs {}", d[i], expected[i]);
        }
    }

    #[test]
    fn derivative_rejects_non_finite() {
        let p = BicycleParams::default();
        let bad = VehicleState::new(f64::NAN, 0.0, 0.0, 1.0);
        assert!(matches!(
            bicycle_derivative(&bad, &ControlInput::default(), &p),
            Err(Error::InvalidState(_))
        ));
        let ok = VehicleState::new(0.0, 0.0, 0.0, 1.0);
        assert!(bicycle_derivative(&ok, &ControlInput::new(f64::INFINITY, 0.0), &p).is_err());
    }

    #[test]
    fn true_step_fixed_point_and_translation() {
        let p = BicycleParams::default();
        let s = VehicleState::new(1.0, 2.0, 0.4, 0.0);
        assert_eq!(true_step(&s, &ControlInput::default(), &p, 0.1).unwrap(), s);
        let next = true_step(&VehicleState::new(0.0, 0.0, 0.0, 1.0), &ControlInput::default(), &p, 0.1)
            .unwrap();
        assert!(close(next.x_pos, 0.1, 1e-15));
        assert_eq!((next.y_pos, next.heading, next.speed), (0.0, 0.0, 1.0));
    }

    fn fine_euler(s0: VehicleState, u: ControlInput, dt: f64, substeps: usize) -> [f64; 4] {
        let mut s = s0.to_array();
        let h = dt / substeps as f64;
        for _ in 0..substeps {
            let d = derivative_unchecked(s, &u, BicycleParams::default().wheelbase);
            for i in 0..4 {
                s[i] += h * d[i];
            }
        }
        s
    }

    #[test]
    fn true_step_matches_fine_euler() {
        let p = BicycleParams::default();
        let s0 = VehicleState::new(0.0, 0.0, 0.0, 5.0);
        let u = ControlInput::new(1.0, 0.1);
        let rk = true_step(&s0, &u, &p, 0.1).unwrap().to_array();
        // 1000 Euler substeps carry ~5e-6 truncation error of their own in x.
        let coarse = fine_euler(s0, u, 0.1, 1_000);
        let fine = fine_euler(s0, u, 0.1, 100_000);
        for i in 0..4 {
            assert!(close(rk[i], coarse[i], 1e-5), "{i}: {} vs {}", rk[i], coarse[i]);
            assert!(close(rk[i], fine[i], 1e-6), "{i}: {} vs {}", rk[i], fine[i]);
        }
    }

    #[test]
    fn true_step_is_fourth_order() {
        let p = BicycleParams::default();
        let s0 = VehicleState::new(0.0, 0.0, 0.2, 8.0);
        let u = ControlInput::new(0.7, 0.3);
        let err = |dt: f64| {
            let one = true_step(&s0, &u, &p, dt).unwrap();
            let half = true_step(&true_step(&s0, &u, &p, dt / 2.0).unwrap(), &u, &p, dt / 2.0).unwrap();
            one.to_array()
                .iter()
                .zip(half.to_array())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(0.2), err(0.1));
        assert!(e1 / e2 >= 8.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn true_step_clamps_and_wraps() {
        let p = BicycleParams::default();
        let s = true_step(&VehicleState::new(0.0, 0.0, 0.0, 0.05), &ControlInput::new(-3.0, 0.0), &p, 0.1)
            .unwrap();
        assert_eq!(s.speed, 0.0);
        let s = true_step(
            &VehicleState::new(0.0, 0.0, PI - 0.01, 10.0),
            &ControlInput::new(0.0, 0.5),
            &p,
            0.1,
        )
        .unwrap();
        assert!(s.heading > -PI && s.heading <= PI);
        assert!(s.heading < 0.0);
        assert!(true_step(&s, &ControlInput::default(), &p, 0.0).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!(close(wrap_angle(-PI), PI, 1e-15));
        assert!(close(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, 1e-12));
        assert!(close(wrap_angle(0.3), 0.3, 1e-15));
    }

    fn linear_net(weights: DMatrix<f64>, bias: Vec<f64>) -> MlpModel {
        MlpModel {
            layers: vec![DenseLayer {
                weights,
                bias: nalgebra::DVector::from_vec(bias),
            }],
            activations: vec![],
            input_norm: Normalization::identity(6),
            output_norm: Normalization::identity(4),
        }
    }

    #[test]
    fn affine_identity_network() {
        let w = DMatrix::from_fn(4, 6, |r, c| if r == c { 1.0 } else { 0.0 });
        let mut net = linear_net(w, vec![0.0; 4]);
        net.input_norm.offset = vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        net.input_norm.scale = vec![2.0, 2.0, 1.0, 1.0, 1.0, 1.0];
        net.output_norm.offset = vec![1.0, 1.0, 0.0, 0.0];
        net.output_norm.scale = vec![2.0, 2.0, 1.0, 1.0];
        let s = VehicleState::new(3.0, -4.0, 0.5, 7.0);
        let d = mlp_forward(&net, &s, &ControlInput::new(1.0, 2.0)).unwrap();
        assert_eq!(d, s.to_array());
    }

    #[test]
    fn constant_network() {
        let mut net = linear_net(DMatrix::zeros(4, 6), vec![1.0, -1.0, 0.5, 2.0]);
        net.output_norm.offset = vec![0.0, 0.0, 0.0, 1.0];
        net.output_norm.scale = vec![2.0, 2.0, 2.0, 2.0];
        for s in [VehicleState::new(0.0, 0.0, 0.0, 0.0), VehicleState::new(9.0, 3.0, -1.0, 20.0)] {
            let d = mlp_forward(&net, &s, &ControlInput::new(-2.0, 0.3)).unwrap();
            assert_eq!(d, [2.0, -2.0, 1.0, 5.0]);
            let next = surrogate_step(&net, &s, &ControlInput::default(), 0.1).unwrap();
            assert!(close(next.x_pos, s.x_pos + 0.2, 1e-12));
            assert!(close(next.speed, s.speed + 0.5, 1e-12));
        }
        let zero = linear_net(DMatrix::zeros(4, 6), vec![0.0; 4]);
        let s = VehicleState::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(surrogate_step(&zero, &s, &ControlInput::new(1.0, 0.2), 0.1).unwrap(), s);
    }

    #[test]
    fn surrogate_increment_is_linear_in_dt() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let net = MlpModel::new_random(&[8, 8], Activation::Tanh, &mut rng);
        let s = VehicleState::new(1.0, -2.0, 0.3, 6.0);
        let u = ControlInput::new(0.4, -0.1);
        let a = surrogate_step(&net, &s, &u, 0.05).unwrap().to_array();
        let b = surrogate_step(&net, &s, &u, 0.2).unwrap().to_array();
        let s = s.to_array();
        for i in 0..4 {
            assert!(close(b[i] - s[i], 4.0 * (a[i] - s[i]), 1e-12));
        }
    }

    #[test]
    fn mlp_forward_dimension_mismatch() {
        let net = linear_net(DMatrix::zeros(4, 5), vec![0.0; 4]);
        assert!(matches!(
            mlp_forward(&net, &VehicleState::new(0.0, 0.0, 0.0, 0.0), &ControlInput::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn batch_models_agree_with_pointwise() {
        let p = BicycleParams::default();
        let km = KinematicModel { params: p, dt: 0.1 };
        let states = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 0.0, 2.0, 0.1, -0.4, 5.0, 7.0]);
        let controls = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 0.05, 0.2]);
        let next = km.step_batch(&states, &controls).unwrap();
        for c in 0..2 {
            let s = VehicleState::from_slice(states.column(c).as_slice());
            let u = ControlInput::from_slice(controls.column(c).as_slice());
            let d = bicycle_derivative(&s, &u, &p).unwrap();
            for r in 0..4 {
                assert!(close(next[(r, c)], states[(r, c)] + 0.1 * d[r], 1e-15));
            }
        }
        assert!(km.step_batch(&states, &DMatrix::zeros(2, 3)).is_err());
    }
}
