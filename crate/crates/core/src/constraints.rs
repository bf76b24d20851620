//! Inequality constraints `g(x, u) <= 0` for collision avoidance, road
//! containment and actuator limits, plus the softplus barrier that turns
//! them into a virtual measurement.

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, VehicleState};
use crate::error::{Error, Result};
use crate::road::{rotate, RoadGeometry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    /// Required clearance between vehicle footprints.
    pub d_min: f64,
    pub u_min: ControlInput,
    pub u_max: ControlInput,
    pub vehicle_disc_radius: f64,
    pub discs_per_vehicle: usize,
    /// Body length spanned by the covering discs.
    pub vehicle_length: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            d_min: 1.0,
            u_min: ControlInput::new(-4.0, -0.5),
            u_max: ControlInput::new(2.5, 0.5),
            vehicle_disc_radius: 1.0,
            discs_per_vehicle: 2,
            vehicle_length: 4.5,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0) {
            return Err(Error::config("d_min", "must be positive"));
        }
        if !(self.u_min.accel < self.u_max.accel && self.u_min.steer < self.u_max.steer) {
            return Err(Error::config("u_min", "must be below u_max componentwise"));
        }
        if !(self.vehicle_disc_radius > 0.0) {
            return Err(Error::config("vehicle_disc_radius", "must be positive"));
        }
        if self.discs_per_vehicle == 0 {
            return Err(Error::config("discs_per_vehicle", "need at least one disc"));
        }
        if !(self.vehicle_length >= 0.0) {
            return Err(Error::config("vehicle_length", "must be non-negative"));
        }
        Ok(())
    }

    /// Footprint of the ego vehicle (and, by default, of every obstacle).
    pub fn footprint(&self) -> Footprint {
        Footprint::along_axis(self.discs_per_vehicle, self.vehicle_length, self.vehicle_disc_radius)
    }

    /// Number of entries produced by [`stack_constraints`] for `obstacles` obstacles.
    pub fn n_constraints(obstacles: usize) -> usize {
        obstacles + 1 + 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Variance of the barrier measurement noise.
    pub noise_var: f64,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        BarrierConfig {
            alpha: 1.0,
            beta: 5.0,
            noise_var: 1e-4,
        }
    }
}

impl BarrierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be positive"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("beta", "must be positive"));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::config("noise_var", "must be positive"));
        }
        Ok(())
    }
}

/// Discs covering a vehicle body, centers in the body frame (x forward, y left).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub centers: Vec<[f64; 2]>,
    pub radius: f64,
}

impl Footprint {
    pub fn single(radius: f64) -> Self {
        Footprint {
            centers: vec![[0.0, 0.0]],
            radius,
        }
    }

    /// `n` discs evenly spaced along a body of length `length`.
    pub fn along_axis(n: usize, length: f64, radius: f64) -> Self {
        let centers = (0..n)
            .map(|j| [-length / 2.0 + length * (2 * j + 1) as f64 / (2 * n) as f64, 0.0])
            .collect();
        Footprint { centers, radius }
    }

    pub fn world_centers(&self, x: f64, y: f64, heading: f64) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.centers.iter().map(move |&c| {
            let r = rotate(c, heading);
            [x + r[0], y + r[1]]
        })
    }
}

/// A moving obstacle vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub footprint: Footprint,
}

pub type ObstacleSnapshot = Vec<Obstacle>;

/// Minimum surface-to-surface distance between two disc-covered bodies;
/// negative when they overlap.
pub fn footprint_distance(
    pose_a: (f64, f64, f64),
    a: &Footprint,
    pose_b: (f64, f64, f64),
    b: &Footprint,
) -> f64 {
    let mut best = f64::INFINITY;
    for ca in a.world_centers(pose_a.0, pose_a.1, pose_a.2) {
        for cb in b.world_centers(pose_b.0, pose_b.1, pose_b.2) {
            let d = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
            best = best.min(d);
        }
    }
    best - a.radius - b.radius
}

pub fn vehicle_distance(ev: &VehicleState, ev_footprint: &Footprint, obstacle: &Obstacle) -> f64 {
    footprint_distance(
        (ev.x_pos, ev.y_pos, ev.heading),
        ev_footprint,
        (obstacle.x, obstacle.y, obstacle.heading),
        &obstacle.footprint,
    )
}

/// Positive when the vehicle reference point is outside the road band.
pub fn boundary_violation(ev: &VehicleState, road: &RoadGeometry) -> f64 {
    road.boundary_violation([ev.x_pos, ev.y_pos])
}

/// Appends `[d_min - dist_i ..., boundary, u_min - u (2), u - u_max (2)]` given a
/// precomputed boundary entry.
pub(crate) fn stack_with_boundary(
    ev: &VehicleState,
    control: &ControlInput,
    obstacles: &[Obstacle],
    boundary: f64,
    config: &ConstraintConfig,
    ev_footprint: &Footprint,
    out: &mut Vec<f64>,
) {
    for ob in obstacles {
        out.push(config.d_min - vehicle_distance(ev, ev_footprint, ob));
    }
    out.push(boundary);
    out.push(config.u_min.accel - control.accel);
    out.push(config.u_min.steer - control.steer);
    out.push(control.accel - config.u_max.accel);
    out.push(control.steer - config.u_max.steer);
}

/// The stacked constraint vector `g(x, u)`; every entry is `<= 0` when satisfied.
pub fn stack_constraints(
    ev: &VehicleState,
    control: &ControlInput,
    obstacles: &[Obstacle],
    road: &RoadGeometry,
    config: &ConstraintConfig,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(ConstraintConfig::n_constraints(obstacles.len()));
    stack_with_boundary(
        ev,
        control,
        obstacles,
        boundary_violation(ev, road),
        config,
        &config.footprint(),
        &mut out,
    );
    out
}

/// `(1 / alpha) ln(1 + exp(beta s))`, evaluated without overflow.
#[inline]
pub fn softplus(s: f64, alpha: f64, beta: f64) -> f64 {
    let z = beta * s;
    if z > 30.0 {
        (z + (-z).exp().ln_1p()) / alpha
    } else {
        z.exp().ln_1p() / alpha
    }
}

pub fn softplus_barrier(g: &[f64], barrier: &BarrierConfig) -> Vec<f64> {
    g.iter()
        .map(|&s| softplus(s, barrier.alpha, barrier.beta))
        .collect()
}
