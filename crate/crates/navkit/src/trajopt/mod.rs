//! Offline path-library generation: waypoint grids, the waypoint-
//! constrained optimal control problem solved by an ADMM splitting whose
//! feasible step is closed-form per timestep and whose dynamics step is
//! iLQR, and the resulting per-path controller tuples (nominal inputs,
//! feedback gains, reference states).

mod ilqr;
pub mod io;

pub use ilqr::{ilqr_solve, riccati_backward, IlqrSolution, RiccatiSolution};

use crate::dynamics::{rk4_step, rk4_step_raw, Input, InputBounds, State};
use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajoptError {
    #[error("invalid planner configuration: {0}")]
    InvalidConfig(String),
    #[error("no path converged; refusing to build a library of infeasible references")]
    NoConvergedPaths,
}

/// Stage-cost weights for the feasibility step: quadratic input effort
/// `r_u |u|^2` and an optional pull of unconstrained states toward the
/// goal with weight `q_free`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    pub r_u: f64,
    pub q_free: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            r_u: 0.1,
            q_free: 0.0,
        }
    }
}

/// Manual replacement of one grid waypoint, keyed by (path, waypoint)
/// index. This is the escape hatch for worlds where some paths must first
/// move away from the goal to let the optimization converge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointOverride {
    pub path: usize,
    /// 0-based index among the tau interior waypoints.
    pub index: usize,
    pub position: [f64; 2],
}

/// Planner configuration. Key names mirror the scenario file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajoptConfig {
    /// Horizon length T (number of inputs).
    #[serde(rename = "T")]
    pub horizon: usize,
    /// Sampling time of the discretized dynamics (s).
    #[serde(rename = "Ts")]
    pub ts: f64,
    /// Lateral interval between neighboring paths (m).
    pub delta: f64,
    /// Width of the waypoint corridor (m); the library holds
    /// round(L/delta) paths.
    #[serde(rename = "L")]
    pub corridor_width: f64,
    /// Interior waypoints per path.
    pub tau: usize,
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub inner_tol: f64,
    pub rho0: f64,
    pub cost: CostParams,
    #[serde(default)]
    pub waypoint_overrides: Vec<WaypointOverride>,
}

impl Default for TrajoptConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            ts: 0.5,
            delta: 0.8,
            corridor_width: 4.0,
            tau: 3,
            eps_pri: 1e-3,
            eps_dual: 1e-3,
            max_outer: 200,
            max_inner: 10,
            inner_tol: 1e-6,
            rho0: 1.0,
            cost: CostParams::default(),
            waypoint_overrides: Vec::new(),
        }
    }
}

impl TrajoptConfig {
    pub fn validate(&self) -> Result<(), TrajoptError> {
        if self.horizon == 0 || self.ts <= 0.0 {
            return Err(TrajoptError::InvalidConfig(
                "T and Ts must be positive".into(),
            ));
        }
        if self.tau == 0 {
            return Err(TrajoptError::InvalidConfig("tau must be at least 1".into()));
        }
        if self.horizon % (self.tau + 1) != 0 {
            return Err(TrajoptError::InvalidConfig(format!(
                "T = {} must be divisible by tau + 1 = {}",
                self.horizon,
                self.tau + 1
            )));
        }
        if self.delta <= 0.0 || self.corridor_width <= 0.0 {
            return Err(TrajoptError::InvalidConfig(
                "delta and L must be positive".into(),
            ));
        }
        if self.eps_pri <= 0.0 || self.eps_dual <= 0.0 || self.rho0 <= 0.0 {
            return Err(TrajoptError::InvalidConfig(
                "tolerances and rho0 must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Index stride between waypoint times.
    pub fn waypoint_stride(&self) -> usize {
        self.horizon / (self.tau + 1)
    }
}

/// Waypoints for one path: positions pinned at the interior waypoint time
/// indices, plus the shared boundary states.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointSet {
    pub path_index: usize,
    pub lateral_offset: f64,
    /// Interior waypoint states (heading is informational; only the
    /// position is constrained).
    pub points: Vec<State>,
    /// Time indices of the interior waypoints: {stride, 2*stride, ...}.
    pub time_indices: Vec<usize>,
    pub start: State,
    pub goal: State,
}

/// Packed primal trajectory variable: T+1 states and T inputs, stored as
/// raw vectors because the splitting iterates in unwrapped heading space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryVars {
    pub x: Vec<Vector3<f64>>,
    pub u: Vec<Vector2<f64>>,
}

impl TrajectoryVars {
    pub fn zeros(t: usize) -> Self {
        Self {
            x: vec![Vector3::zeros(); t + 1],
            u: vec![Vector2::zeros(); t],
        }
    }

    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            x: self.x.iter().zip(&other.x).map(|(a, b)| a + b).collect(),
            u: self.u.iter().zip(&other.u).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            x: self.x.iter().zip(&other.x).map(|(a, b)| a - b).collect(),
            u: self.u.iter().zip(&other.u).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            x: self.x.iter().map(|a| a * s).collect(),
            u: self.u.iter().map(|a| a * s).collect(),
        }
    }

    pub fn inf_norm(&self) -> f64 {
        let mx = self
            .x
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, &a| m.max(a.abs()));
        self.u
            .iter()
            .flat_map(|v| v.iter())
            .fold(mx, |m, &a| m.max(a.abs()))
    }

    pub fn norm2(&self) -> f64 {
        let s: f64 = self.x.iter().map(|v| v.norm_squared()).sum::<f64>()
            + self.u.iter().map(|v| v.norm_squared()).sum::<f64>();
        s.sqrt()
    }
}

/// ADMM iteration state for one path.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub z: TrajectoryVars,
    pub zbar: TrajectoryVars,
    pub v: TrajectoryVars,
    pub rho: f64,
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// One path of the library: the controller tuple (nominal inputs, feedback
/// gains, reference states) plus provenance and convergence bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEntry {
    pub path_index: usize,
    pub lateral_offset: f64,
    pub mu_star: Vec<Input>,
    pub k_star: Vec<Matrix2x3<f64>>,
    pub x_star: Vec<State>,
    /// Positions this path was constrained through, with their indices.
    pub waypoints: Vec<[f64; 2]>,
    pub waypoint_indices: Vec<usize>,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub admm_iterations: usize,
    pub plan_time: f64,
}

/// The offline product: laterally ordered paths with shared grid metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PathLibrary {
    pub ts: f64,
    pub horizon: usize,
    pub delta: f64,
    pub center_path_index: usize,
    pub entries: Vec<PathEntry>,
}

impl PathLibrary {
    pub fn converged_entries(&self) -> impl Iterator<Item = &PathEntry> {
        self.entries.iter().filter(|e| e.converged)
    }

    /// Goal state shared by every path (terminal reference of the center
    /// path).
    pub fn goal(&self) -> State {
        *self.entries[self.center_path_index]
            .x_star
            .last()
            .expect("paths have T+1 states")
    }
}

fn rot90(v: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

/// Lay out the waypoint grid: round(L/delta) paths with lateral offsets
/// {-(N-1)/2, ..., +(N-1)/2} * delta off the start-goal line and interior
/// waypoints spaced D/(tau+1) longitudinally (uniform progress toward the
/// goal, matching the waypoint time indices). Manual overrides replace
/// individual grid points.
pub fn generate_waypoints(
    start: &State,
    goal: &State,
    cfg: &TrajoptConfig,
) -> Result<Vec<WaypointSet>, TrajoptError> {
    cfg.validate()?;
    let d_vec = goal.position() - start.position();
    let dist = d_vec.norm();
    if dist <= 1e-9 {
        return Err(TrajoptError::InvalidConfig(
            "start and goal positions coincide; supply waypoints manually".into(),
        ));
    }
    let n = if cfg.corridor_width < cfg.delta {
        1
    } else {
        ((cfg.corridor_width / cfg.delta).round() as usize).max(1)
    };
    let e = d_vec / dist;
    let lateral = rot90(e);
    let heading = e.y.atan2(e.x);
    let stride = cfg.waypoint_stride();

    let mut sets: Vec<WaypointSet> = (0..n)
        .map(|p| {
            let offset = (p as f64 - (n as f64 - 1.0) / 2.0) * cfg.delta;
            let points = (1..=cfg.tau)
                .map(|j| {
                    let pos = start.position()
                        + e * (j as f64 * dist / (cfg.tau as f64 + 1.0))
                        + lateral * offset;
                    State::new(pos.x, pos.y, heading)
                })
                .collect();
            WaypointSet {
                path_index: p,
                lateral_offset: offset,
                points,
                time_indices: (1..=cfg.tau).map(|j| j * stride).collect(),
                start: *start,
                goal: *goal,
            }
        })
        .collect();

    for ov in &cfg.waypoint_overrides {
        let set = sets.get_mut(ov.path).ok_or_else(|| {
            TrajoptError::InvalidConfig(format!("waypoint override path {} out of range", ov.path))
        })?;
        let heading = set.points[0].theta;
        let slot = set.points.get_mut(ov.index).ok_or_else(|| {
            TrajoptError::InvalidConfig(format!(
                "waypoint override index {} out of range",
                ov.index
            ))
        })?;
        *slot = State::new(ov.position[0], ov.position[1], heading);
    }
    Ok(sets)
}

/// Closed-form feasibility step: per timestep, minimize the stage cost
/// plus the proximal term subject to the waypoint pins, the terminal
/// equality, and the input box. Waypoints pin position only; the heading
/// there stays at the prox target. Free states are the weighted average of
/// the prox target and the goal; inputs are shrunk by the effort weight
/// and then clamped.
pub fn zbar_update(
    z: &TrajectoryVars,
    v: &TrajectoryVars,
    wp: &WaypointSet,
    bounds: &InputBounds,
    rho: f64,
    cost: &CostParams,
) -> TrajectoryVars {
    let t = z.horizon();
    let goal = wp.goal.to_vector();
    let mut out = TrajectoryVars::zeros(t);

    for i in 0..=t {
        let prox = z.x[i] + v.x[i];
        // the goal heading nearest to the iterate in unwrapped coordinates
        let goal_here = Vector3::new(
            goal.x,
            goal.y,
            prox.z + crate::dynamics::wrap_angle(goal.z - prox.z),
        );
        if let Some(k) = wp.time_indices.iter().position(|&ti| ti == i) {
            let p = wp.points[k].position();
            out.x[i] = Vector3::new(p.x, p.y, prox.z);
        } else if i == t {
            out.x[i] = goal_here;
        } else if cost.q_free > 0.0 {
            out.x[i] = (prox * rho + goal_here * 2.0 * cost.q_free) / (rho + 2.0 * cost.q_free);
        } else {
            out.x[i] = prox;
        }
    }
    let shrink = rho / (rho + 2.0 * cost.r_u);
    for i in 0..t {
        let prox = z.u[i] + v.u[i];
        let unconstrained = prox * shrink;
        out.u[i] = Vector2::new(
            unconstrained.x.clamp(bounds.v_min, bounds.v_max),
            unconstrained.y.clamp(bounds.omega_min, bounds.omega_max),
        );
    }
    out
}

/// Scaled dual ascent: v' = v + z - zbar.
pub fn dual_update(v: &TrajectoryVars, z: &TrajectoryVars, zbar: &TrajectoryVars) -> TrajectoryVars {
    v.add(&z.sub(zbar))
}

/// Residual-balancing penalty update: grow rho when the primal residual
/// dominates, shrink it when the dual residual does (factor 2, ratio 10).
pub fn rho_update(rho: f64, primal_res: f64, dual_res: f64) -> f64 {
    const MU: f64 = 10.0;
    const TAU: f64 = 2.0;
    if primal_res > MU * dual_res {
        rho * TAU
    } else if dual_res > MU * primal_res {
        rho / TAU
    } else {
        rho
    }
}

/// Initial iterate: positions interpolate piecewise-linearly through the
/// waypoint sequence (start, w_1, ..., w_tau, goal) at their time
/// indices, headings follow each segment's direction (unwrapped for
/// continuity), inputs are zero. For grid waypoints this is close to the
/// straight line; for overridden waypoints that reverse course it starts
/// the solve with the turn already encoded, which the straight-line
/// iterate cannot represent with a forward-only speed channel.
fn interpolate_initial(wp: &WaypointSet, t: usize) -> TrajectoryVars {
    let unwrap_near = |angle: f64, reference: f64| {
        reference + crate::dynamics::wrap_angle(angle - reference)
    };
    let mut z = TrajectoryVars::zeros(t);
    let mut knots: Vec<(usize, Vector2<f64>)> = Vec::with_capacity(wp.points.len() + 2);
    knots.push((0, wp.start.position()));
    for (&i, p) in wp.time_indices.iter().zip(&wp.points) {
        knots.push((i, p.position()));
    }
    knots.push((t, wp.goal.position()));
    let mut heading = wp.start.theta;
    for w in knots.windows(2) {
        let ((i0, a), (i1, b)) = (w[0], w[1]);
        let seg = b - a;
        if seg.norm() > 1e-9 {
            heading = unwrap_near(seg.y.atan2(seg.x), heading);
        }
        for i in i0..=i1 {
            let s = if i1 > i0 {
                (i - i0) as f64 / (i1 - i0) as f64
            } else {
                0.0
            };
            let p = a * (1.0 - s) + b * s;
            z.x[i] = Vector3::new(p.x, p.y, heading);
        }
    }
    z.x[0].z = wp.start.theta;
    z.x[t].z = unwrap_near(wp.goal.theta, heading);
    z
}

fn max_waypoint_deviation(z: &TrajectoryVars, wp: &WaypointSet) -> f64 {
    wp.time_indices
        .iter()
        .zip(&wp.points)
        .map(|(&i, p)| (z.x[i].xy() - p.position()).norm())
        .fold(0.0f64, f64::max)
}

/// Solve one waypoint-constrained problem with the ADMM splitting and
/// extract the controller tuple. Non-convergence is reported in the entry
/// rather than erroring, so a library build can exclude the path.
pub fn plan_path(wp: &WaypointSet, cfg: &TrajoptConfig, bounds: &InputBounds) -> PathEntry {
    let started = Instant::now();
    let t = cfg.horizon;
    let mut z = interpolate_initial(wp, t);
    let mut v = TrajectoryVars::zeros(t);
    let mut rho = cfg.rho0;
    let mut zbar_prev: Option<TrajectoryVars> = None;

    let mut converged = false;
    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;
    let mut iterations = 0;
    let mut last = None;

    for k in 0..cfg.max_outer {
        iterations = k + 1;
        let zbar = zbar_update(&z, &v, wp, bounds, rho, &cfg.cost);
        let sol = ilqr_solve(&z, &zbar, &v, &wp.start, rho, cfg.ts, cfg.max_inner, cfg.inner_tol);
        z = sol.z.clone();
        last = Some(sol);

        primal = z.sub(&zbar).inf_norm();
        dual = match &zbar_prev {
            Some(prev) => zbar.sub(prev).inf_norm() * rho,
            None => f64::INFINITY,
        };
        v = dual_update(&v, &z, &zbar);
        zbar_prev = Some(zbar);

        if primal <= cfg.eps_pri
            && dual <= cfg.eps_dual
            && max_waypoint_deviation(&z, wp) <= cfg.eps_pri
        {
            converged = true;
            break;
        }

        let rho_new = rho_update(rho, primal, dual.min(f64::MAX));
        if rho_new != rho && dual.is_finite() {
            // keep the unscaled dual rho*v invariant
            v = v.scale(rho / rho_new);
            rho = rho_new;
        }
    }

    let sol = last.expect("max_outer >= 1");
    // clamp the nominal inputs to the box (magnitude bounded by the primal
    // residual at convergence) and re-roll the reference so it is the
    // exact discrete rollout of the shipped inputs
    let mu_star: Vec<Input> = z
        .u
        .iter()
        .map(|u| Input::from_vector(*u).clamped(bounds))
        .collect();
    let mut x_star = Vec::with_capacity(t + 1);
    x_star.push(wp.start);
    for mu in &mu_star {
        let next = rk4_step(x_star.last().unwrap(), mu, cfg.ts);
        x_star.push(next);
    }

    PathEntry {
        path_index: wp.path_index,
        lateral_offset: wp.lateral_offset,
        mu_star,
        k_star: sol.k_seq,
        x_star,
        waypoints: wp.points.iter().map(|p| [p.px, p.py]).collect(),
        waypoint_indices: wp.time_indices.clone(),
        converged,
        primal_residual: primal,
        dual_residual: dual,
        admm_iterations: iterations,
        plan_time: started.elapsed().as_secs_f64(),
    }
}

/// Plan every waypoint set, in parallel when a rayon pool is available,
/// and assemble the library. The NAV_THREADS environment variable caps the
/// planner parallelism. Entries keep their grid order, so the output is
/// deterministic irrespective of scheduling.
pub fn build_library(
    start: &State,
    goal: &State,
    cfg: &TrajoptConfig,
    bounds: &InputBounds,
) -> Result<PathLibrary, TrajoptError> {
    let sets = generate_waypoints(start, goal, cfg)?;
    let entries = plan_all(&sets, cfg, bounds);
    if !entries.iter().any(|e| e.converged) {
        return Err(TrajoptError::NoConvergedPaths);
    }
    let center_path_index = entries
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            a.lateral_offset
                .abs()
                .partial_cmp(&b.lateral_offset.abs())
                .unwrap()
        })
        .map(|(i, _)| i)
        .unwrap();
    Ok(PathLibrary {
        ts: cfg.ts,
        horizon: cfg.horizon,
        delta: cfg.delta,
        center_path_index,
        entries,
    })
}

fn plan_all(sets: &[WaypointSet], cfg: &TrajoptConfig, bounds: &InputBounds) -> Vec<PathEntry> {
    use rayon::prelude::*;
    let threads = std::env::var("NAV_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(|| sets.par_iter().map(|wp| plan_path(wp, cfg, bounds)).collect()),
        None => sets.par_iter().map(|wp| plan_path(wp, cfg, bounds)).collect(),
    }
}
