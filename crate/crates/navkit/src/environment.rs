//! Analytic obstacle boundary functions with gradients and Hessians, the
//! heading-lifted barrier used by the safety filter, obstacle motion
//! scripts, velocity estimation from position tracks, visibility sets, and
//! collision checks.

use crate::dynamics::State;
use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Seam/tie tolerance below which composite minimizers are treated as
/// ambiguous and flagged degenerate.
const SEAM_EPS: f64 = 1e-9;

/// Obstacle geometry. `h > 0` outside, `h = 0` on the boundary, `h < 0`
/// inside; `h` is the exact signed distance in meters for every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Circle {
        center: [f64; 2],
        radius: f64,
    },
    /// Axis-aligned rectangle with corners rounded by `corner_radius`,
    /// which keeps the boundary function twice differentiable except on
    /// the face/corner seams and the interior medial axis.
    Rect {
        min: [f64; 2],
        max: [f64; 2],
        corner_radius: f64,
    },
    Union {
        members: Vec<Shape>,
    },
}

/// Boundary function evaluation at a point: signed distance, spatial
/// gradient, and spatial Hessian. `degenerate` marks points where the
/// derivatives came from a fallback (circle center, composite seam,
/// rectangle medial axis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEval {
    pub h: f64,
    pub grad: Vector2<f64>,
    pub hess: Matrix2<f64>,
    pub degenerate: bool,
}

impl Shape {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Shape::Circle { radius, .. } => {
                if *radius <= 0.0 {
                    return Err("circle radius must be positive".into());
                }
            }
            Shape::Rect {
                min,
                max,
                corner_radius,
            } => {
                if !(min[0] < max[0] && min[1] < max[1]) {
                    return Err("rect min corner must be below max corner".into());
                }
                if *corner_radius < 0.0 {
                    return Err("corner radius must be non-negative".into());
                }
                let half = ((max[0] - min[0]) / 2.0).min((max[1] - min[1]) / 2.0);
                if *corner_radius >= half {
                    return Err("corner radius must be smaller than the half extents".into());
                }
            }
            Shape::Union { members } => {
                if members.is_empty() {
                    return Err("composite obstacle must have at least one member".into());
                }
                for m in members {
                    m.validate()?;
                    if matches!(m, Shape::Union { .. }) {
                        return Err("composite members must be primitive shapes".into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Evaluate the boundary function at `p` (shape in its declared pose).
    pub fn eval(&self, p: Vector2<f64>) -> BoundaryEval {
        match self {
            Shape::Circle { center, radius } => {
                let d = p - Vector2::new(center[0], center[1]);
                let n = d.norm();
                if n < 1e-12 {
                    return BoundaryEval {
                        h: -radius,
                        grad: Vector2::new(1.0, 0.0),
                        hess: Matrix2::zeros(),
                        degenerate: true,
                    };
                }
                let g = d / n;
                BoundaryEval {
                    h: n - radius,
                    grad: g,
                    hess: (Matrix2::identity() - g * g.transpose()) / n,
                    degenerate: false,
                }
            }
            Shape::Rect {
                min,
                max,
                corner_radius,
            } => eval_rounded_rect(p, min, max, *corner_radius),
            Shape::Union { members } => {
                let mut best: Option<BoundaryEval> = None;
                let mut second = f64::INFINITY;
                for m in members {
                    let e = m.eval(p);
                    match &mut best {
                        None => best = Some(e),
                        Some(b) => {
                            if e.h < b.h {
                                second = b.h;
                                *b = e;
                            } else if e.h < second {
                                second = e.h;
                            }
                        }
                    }
                }
                let mut b = best.expect("validated unions are non-empty");
                if second - b.h < SEAM_EPS {
                    b.degenerate = true;
                }
                b
            }
        }
    }

    /// Distance from `p` to the nearest locus where the boundary function
    /// is not twice differentiable (region seams, medial axes, circle
    /// centers, composite equidistant sets). Used to filter sample points
    /// in derivative checks and to gate the tangent construction.
    pub fn smoothness_margin(&self, p: Vector2<f64>) -> f64 {
        match self {
            Shape::Circle { center, .. } => (p - Vector2::new(center[0], center[1])).norm(),
            Shape::Rect {
                min,
                max,
                corner_radius,
            } => {
                let ctr = Vector2::new((min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0);
                let half = Vector2::new(
                    (max[0] - min[0]) / 2.0 - corner_radius,
                    (max[1] - min[1]) / 2.0 - corner_radius,
                );
                let d = p - ctr;
                let q = Vector2::new(d.x.abs() - half.x, d.y.abs() - half.y);
                let mut m = q.x.abs().min(q.y.abs());
                if q.x < 0.0 && q.y < 0.0 {
                    // interior: the max(qx, qy) ridge is non-smooth too
                    m = m.min((q.x - q.y).abs() / 2.0);
                }
                m
            }
            Shape::Union { members } => {
                let mut hs: Vec<f64> = members.iter().map(|m| m.eval(p).h).collect();
                hs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut m = members
                    .iter()
                    .map(|s| s.smoothness_margin(p))
                    .fold(f64::INFINITY, f64::min);
                if hs.len() > 1 {
                    m = m.min((hs[1] - hs[0]) / 2.0);
                }
                m
            }
        }
    }
}

fn eval_rounded_rect(p: Vector2<f64>, min: &[f64; 2], max: &[f64; 2], rc: f64) -> BoundaryEval {
    let ctr = Vector2::new((min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0);
    let half = Vector2::new(
        (max[0] - min[0]) / 2.0 - rc,
        (max[1] - min[1]) / 2.0 - rc,
    );
    let d = p - ctr;
    let sx = if d.x >= 0.0 { 1.0 } else { -1.0 };
    let sy = if d.y >= 0.0 { 1.0 } else { -1.0 };
    let q = Vector2::new(d.x.abs() - half.x, d.y.abs() - half.y);

    if q.x > 0.0 && q.y > 0.0 {
        // corner region: distance to the shrunk corner, minus the rounding
        let n = q.norm();
        let g = q / n;
        let hq = (Matrix2::identity() - g * g.transpose()) / n;
        let grad = Vector2::new(sx * g.x, sy * g.y);
        let hess = Matrix2::new(hq[(0, 0)], sx * sy * hq[(0, 1)], sx * sy * hq[(1, 0)], hq[(1, 1)]);
        BoundaryEval {
            h: n - rc,
            grad,
            hess,
            degenerate: false,
        }
    } else if q.x > q.y {
        // x-face region (covers the interior side where qx dominates)
        BoundaryEval {
            h: q.x - rc,
            grad: Vector2::new(sx, 0.0),
            hess: Matrix2::zeros(),
            degenerate: q.x < 0.0 && (q.x - q.y).abs() < SEAM_EPS,
        }
    } else {
        BoundaryEval {
            h: q.y - rc,
            grad: Vector2::new(0.0, sy),
            hess: Matrix2::zeros(),
            degenerate: q.y < 0.0 && (q.x - q.y).abs() < SEAM_EPS,
        }
    }
}

/// Scripted obstacle motion: the shape's anchor traverses the closed
/// polyline at constant speed, looping back to the first point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionScript {
    pub waypoints: Vec<[f64; 2]>,
    pub speed: f64,
}

impl MotionScript {
    fn segments(&self) -> Vec<(Vector2<f64>, Vector2<f64>, f64)> {
        let n = self.waypoints.len();
        let mut segs = Vec::new();
        for i in 0..n {
            let a = Vector2::new(self.waypoints[i][0], self.waypoints[i][1]);
            let b = Vector2::new(
                self.waypoints[(i + 1) % n][0],
                self.waypoints[(i + 1) % n][1],
            );
            let len = (b - a).norm();
            if len > 0.0 {
                segs.push((a, b, len));
            }
        }
        segs
    }

    /// Anchor position after traveling `speed * t` along the loop.
    pub fn position_at(&self, t: f64) -> Vector2<f64> {
        let first = Vector2::new(self.waypoints[0][0], self.waypoints[0][1]);
        let segs = self.segments();
        if segs.is_empty() || self.speed <= 0.0 {
            return first;
        }
        let total: f64 = segs.iter().map(|s| s.2).sum();
        let mut dist = (self.speed * t) % total;
        for (a, b, len) in &segs {
            if dist <= *len {
                return a + (b - a) * (dist / len);
            }
            dist -= len;
        }
        first
    }
}

/// An obstacle: immutable geometry, an optional motion script, and a small
/// integer id used by constraint diagnostics and tangent-sign memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub id: u32,
    pub shape: Shape,
    #[serde(default)]
    pub motion: Option<MotionScript>,
}

impl Obstacle {
    pub fn static_shape(id: u32, shape: Shape) -> Self {
        Self {
            id,
            shape,
            motion: None,
        }
    }

    /// Translation of the declared geometry at time `t` (zero at `t = 0`).
    pub fn offset_at(&self, t: f64) -> Vector2<f64> {
        match &self.motion {
            None => Vector2::zeros(),
            Some(m) => m.position_at(t) - m.position_at(0.0),
        }
    }
}

/// A world of obstacles frozen at one instant: geometry plus per-obstacle
/// translation offsets. All queries are pure.
#[derive(Debug, Clone)]
pub struct WorldSnapshot<'a> {
    pub obstacles: &'a [Obstacle],
    pub offsets: Vec<Vector2<f64>>,
    pub time: f64,
}

impl<'a> WorldSnapshot<'a> {
    pub fn new(obstacles: &'a [Obstacle], time: f64) -> Self {
        let offsets = obstacles.iter().map(|o| o.offset_at(time)).collect();
        Self {
            obstacles,
            offsets,
            time,
        }
    }

    pub fn len(&self) -> usize {
        self.obstacles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obstacles.is_empty()
    }

    /// Boundary evaluation of obstacle `j` at world point `p`.
    pub fn eval(&self, j: usize, p: Vector2<f64>) -> BoundaryEval {
        self.obstacles[j].shape.eval(p - self.offsets[j])
    }

    pub fn min_h(&self, p: Vector2<f64>) -> f64 {
        (0..self.len())
            .map(|j| self.eval(j, p).h)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Heading-lifted barrier evaluation: `hbar = h + w_h * <grad h, b>` with
/// `b = (cos θ, sin θ)`, plus its full state gradient and the coefficient
/// on the obstacle velocity in the barrier derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoCbf {
    pub hbar: f64,
    /// d hbar / d (px, py, θ)
    pub grad_state: Vector3<f64>,
    /// d hbar / d x_c for a translating obstacle (= -d hbar / d position).
    pub obstacle_term_coeff: Vector2<f64>,
    pub degenerate: bool,
}

/// Lift a boundary evaluation to the heading-augmented barrier at state `s`.
pub fn ho_cbf_from_eval(eval: &BoundaryEval, s: &State, w_h: f64) -> HoCbf {
    let b = Vector2::new(s.theta.cos(), s.theta.sin());
    let b_perp = Vector2::new(-s.theta.sin(), s.theta.cos());
    let hbar = eval.h + w_h * eval.grad.dot(&b);
    let grad_pos = eval.grad + w_h * (eval.hess * b);
    let dtheta = w_h * eval.grad.dot(&b_perp);
    HoCbf {
        hbar,
        grad_state: Vector3::new(grad_pos.x, grad_pos.y, dtheta),
        obstacle_term_coeff: -grad_pos,
        degenerate: eval.degenerate,
    }
}

/// Heading-lifted barrier of a static shape in its declared pose.
pub fn ho_cbf(s: &State, shape: &Shape, w_h: f64) -> HoCbf {
    ho_cbf_from_eval(&shape.eval(s.position()), s, w_h)
}

/// Ring buffer of timestamped anchor positions for one obstacle, filled by
/// the simulation loop whenever the obstacle is visible.
#[derive(Debug, Clone, Default)]
pub struct ObstacleTrack {
    history: VecDeque<(f64, Vector2<f64>)>,
}

/// Samples older than this relative to `now`, or gaps between the two most
/// recent samples larger than this, yield a zero velocity estimate.
pub const TRACK_STALENESS: f64 = 0.5;

impl ObstacleTrack {
    const CAPACITY: usize = 32;

    pub fn push(&mut self, t: f64, p: Vector2<f64>) {
        if let Some((last_t, _)) = self.history.back() {
            assert!(t > *last_t, "track timestamps must be strictly increasing");
        }
        if self.history.len() == Self::CAPACITY {
            self.history.pop_front();
        }
        self.history.push_back((t, p));
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Backward difference over the two most recent samples; zero until two
    /// fresh samples exist.
    pub fn estimate_velocity(&self, now: f64) -> Vector2<f64> {
        let n = self.history.len();
        if n < 2 {
            return Vector2::zeros();
        }
        let (t1, p1) = self.history[n - 1];
        let (t0, p0) = self.history[n - 2];
        if now - t1 > TRACK_STALENESS || t1 - t0 > TRACK_STALENESS {
            return Vector2::zeros();
        }
        (p1 - p0) / (t1 - t0)
    }
}

/// Indices of obstacles whose boundary is within `sensing_radius` of the
/// robot position.
pub fn visible_obstacles(s: &State, world: &WorldSnapshot, sensing_radius: f64) -> Vec<usize> {
    let p = s.position();
    (0..world.len())
        .filter(|&j| world.eval(j, p).h <= sensing_radius)
        .collect()
}

/// True iff the point keeps more than `margin` clearance from every
/// obstacle.
pub fn collision_check(p: Vector2<f64>, world: &WorldSnapshot, margin: f64) -> bool {
    world.min_h(p) > margin
}
