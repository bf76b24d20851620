//! Road centerline as an arclength-parametrized polyline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Result of projecting a point onto the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arclength of the foot point, clamped to `[0, length]`.
    pub s: f64,
    pub foot: [f64; 2],
    /// Signed offset from the centerline, positive to the left of travel.
    pub lateral: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadGeometry {
    points: Vec<[f64; 2]>,
    arclength: Vec<f64>,
    /// Tangent heading at each vertex, unwrapped along the road.
    vertex_heading: Vec<f64>,
    pub half_width: f64,
}

/// Piece of a road description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RoadSegment {
    Straight { length: f64 },
    /// Positive `angle` turns left.
    Arc { radius: f64, angle: f64 },
}

impl RoadGeometry {
    pub fn new(points: Vec<[f64; 2]>, half_width: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::config("centerline", "need at least 2 points"));
        }
        if !(half_width > 0.0) {
            return Err(Error::config("half_width", "must be positive"));
        }
        let mut arclength = Vec::with_capacity(points.len());
        arclength.push(0.0);
        for w in points.windows(2) {
            let len = dist(w[0], w[1]);
            if !(len > 1e-9) || !len.is_finite() {
                return Err(Error::config(
                    "centerline",
                    "arclength must be strictly increasing (repeated or non-finite point)",
                ));
            }
            arclength.push(arclength.last().unwrap() + len);
        }
        let n = points.len();
        let seg_heading = |i: usize| {
            let (a, b) = (points[i], points[i + 1]);
            (b[1] - a[1]).atan2(b[0] - a[0])
        };
        let mut vertex_heading = Vec::with_capacity(n);
        for i in 0..n {
            let h = if i == 0 {
                seg_heading(0)
            } else if i == n - 1 {
                seg_heading(n - 2)
            } else {
                let (a, b) = (points[i - 1], points[i + 1]);
                (b[1] - a[1]).atan2(b[0] - a[0])
            };
            let h = match vertex_heading.last() {
                Some(&prev) => prev + angle_diff(h, prev),
                None => h,
            };
            vertex_heading.push(h);
        }
        Ok(RoadGeometry {
            points,
            arclength,
            vertex_heading,
            half_width,
        })
    }

    /// Samples a chain of straights and arcs roughly every `spacing` meters.
    pub fn from_segments(
        start: [f64; 2],
        start_heading: f64,
        segments: &[RoadSegment],
        spacing: f64,
        half_width: f64,
    ) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::config("spacing", "must be positive"));
        }
        let mut points = vec![start];
        let (mut p, mut h) = (start, start_heading);
        for seg in segments {
            match *seg {
                RoadSegment::Straight { length } => {
                    if !(length > 0.0) {
                        return Err(Error::config("segments.length", "must be positive"));
                    }
                    let n = (length / spacing).ceil().max(1.0) as usize;
                    let (sin, cos) = h.sin_cos();
                    for j in 1..=n {
                        let d = length * j as f64 / n as f64;
                        points.push([p[0] + d * cos, p[1] + d * sin]);
                    }
                    p = *points.last().unwrap();
                }
                RoadSegment::Arc { radius, angle } => {
                    if !(radius > 0.0) || angle == 0.0 {
                        return Err(Error::config(
                            "segments.radius",
                            "arc needs positive radius and nonzero angle",
                        ));
                    }
                    let sign = angle.signum();
                    // center sits to the left for left turns
                    let center = [
                        p[0] - sign * radius * h.sin(),
                        p[1] + sign * radius * h.cos(),
                    ];
                    let phi0 = (p[1] - center[1]).atan2(p[0] - center[0]);
                    let n = (radius * angle.abs() / spacing).ceil().max(1.0) as usize;
                    for j in 1..=n {
                        let phi = phi0 + angle * j as f64 / n as f64;
                        points.push([center[0] + radius * phi.cos(), center[1] + radius * phi.sin()]);
                    }
                    p = *points.last().unwrap();
                    h += angle;
                }
            }
        }
        RoadGeometry::new(points, half_width)
    }

    pub fn straight(start: [f64; 2], heading: f64, length: f64, half_width: f64) -> Result<Self> {
        let (sin, cos) = heading.sin_cos();
        RoadGeometry::new(
            vec![start, [start[0] + length * cos, start[1] + length * sin]],
            half_width,
        )
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.arclength.last().unwrap()
    }

    fn segment_at(&self, s: f64) -> usize {
        match self
            .arclength
            .binary_search_by(|v| v.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        }
    }

    /// Centerline point and tangent heading at arclength `s` (clamped to the road).
    pub fn point_at(&self, s: f64) -> ([f64; 2], f64) {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.arclength[i + 1] - self.arclength[i];
        let tau = ((s - self.arclength[i]) / seg).clamp(0.0, 1.0);
        let heading =
            self.vertex_heading[i] + tau * (self.vertex_heading[i + 1] - self.vertex_heading[i]);
        ([a[0] + tau * (b[0] - a[0]), a[1] + tau * (b[1] - a[1])], heading)
    }

    /// Unit left normal at arclength `s`.
    pub fn normal_at(&self, s: f64) -> [f64; 2] {
        let (_, h) = self.point_at(s);
        [-h.sin(), h.cos()]
    }

    /// Closest centerline point over the whole road.
    pub fn project(&self, p: [f64; 2]) -> Projection {
        self.project_segments(p, 0, self.points.len() - 1)
    }

    /// Closest centerline point restricted to arclengths in `[s_lo, s_hi]`.
    pub fn project_window(&self, p: [f64; 2], s_lo: f64, s_hi: f64) -> Projection {
        let lo = self.segment_at(s_lo.max(0.0));
        let hi = (self.segment_at(s_hi.min(self.length())) + 1).max(lo + 1);
        self.project_segments(p, lo, hi)
    }

    fn project_segments(&self, p: [f64; 2], first: usize, last_vertex: usize) -> Projection {
        let mut best = (f64::INFINITY, first, 0.0);
        for i in first..last_vertex {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let tau = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
            let foot = [a[0] + tau * d[0], a[1] + tau * d[1]];
            let dd = dist2(foot, p);
            if dd < best.0 {
                best = (dd, i, tau);
            }
        }
        let (_, i, tau) = best;
        let s = self.arclength[i] + tau * (self.arclength[i + 1] - self.arclength[i]);
        let (foot, heading) = self.point_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let len = dist(a, b);
        let t = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let off = [p[0] - foot[0], p[1] - foot[1]];
        let at_end = (i == 0 && tau == 0.0) || (i + 2 == self.points.len() && tau == 1.0);
        let lateral = if at_end {
            // beyond the road ends: offset perpendicular to the end tangent
            t[0] * off[1] - t[1] * off[0]
        } else {
            let sign = if t[0] * off[1] - t[1] * off[0] >= 0.0 { 1.0 } else { -1.0 };
            sign * dist2(foot, p).sqrt()
        };
        Projection {
            s,
            foot,
            lateral,
            heading,
        }
    }

    /// Signed distance outside the drivable band: `|lateral| - half_width`.
    pub fn boundary_violation(&self, p: [f64; 2]) -> f64 {
        self.project(p).lateral.abs() - self.half_width
    }

    /// Rigidly moves the road: rotation by `angle` about the origin, then translation.
    pub fn transformed(&self, angle: f64, shift: [f64; 2]) -> Result<Self> {
        let pts = self
            .points
            .iter()
            .map(|&p| {
                let q = rotate(p, angle);
                [q[0] + shift[0], q[1] + shift[1]]
            })
            .collect();
        RoadGeometry::new(pts, self.half_width)
    }
}

pub(crate) fn rotate(p: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    dist2(a, b).sqrt()
}

/// Smallest signed difference `a - b` in `(-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    crate::dynamics::wrap_angle(a - b)
}
