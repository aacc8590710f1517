//! Deterministic discrete-time world simulator: scripted obstacle motion,
//! a rate-limited actuator that makes commanded and measured inputs
//! differ, the episode runner, and benchmark metric aggregation.

use crate::dynamics::{rk4_step, Input, InputBounds, State};
use crate::environment::{visible_obstacles, Obstacle, ObstacleTrack, WorldSnapshot};
use crate::navigator::{control_step, ControllerKind, NavParams, NavigatorState};
use crate::safety::FilterParams;
use crate::trajopt::PathLibrary;
use nalgebra::Vector2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("trace parse: {0}")]
    TraceParse(String),
}

/// Axis-aligned region, used for seeded start sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Region {
    fn contains(&self, p: Vector2<f64>) -> bool {
        p.x >= self.min[0] && p.x <= self.max[0] && p.y >= self.min[1] && p.y <= self.max[1]
    }
}

/// Simulation world description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub world_min: [f64; 2],
    pub world_max: [f64; 2],
    pub obstacles: Vec<Obstacle>,
    pub start: State,
    pub goal: State,
    pub sensing_radius: f64,
    pub control_period: f64,
    /// Actuator acceleration limits (m/s^2, rad/s^2).
    pub accel_v: f64,
    pub accel_omega: f64,
    pub duration: f64,
    pub seed: u64,
    /// When present, benchmark trials draw their starts from this region.
    pub start_region: Option<Region>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            world_min: [-5.0, -5.0],
            world_max: [8.0, 5.0],
            obstacles: Vec::new(),
            start: State::new(0.0, 0.0, 0.0),
            goal: State::new(4.0, 0.0, 0.0),
            sensing_radius: 3.0,
            control_period: 0.01,
            accel_v: 2.0,
            accel_omega: 4.0,
            duration: 60.0,
            seed: 0,
            start_region: None,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.world_min[0] < self.world_max[0] && self.world_min[1] < self.world_max[1]) {
            return Err(SimError::InvalidScenario("world bounds are empty".into()));
        }
        if self.control_period <= 0.0 || self.duration <= 0.0 {
            return Err(SimError::InvalidScenario(
                "control period and duration must be positive".into(),
            ));
        }
        if self.sensing_radius <= 0.0 {
            return Err(SimError::InvalidScenario(
                "sensing radius must be positive".into(),
            ));
        }
        for o in &self.obstacles {
            o.shape
                .validate()
                .map_err(SimError::InvalidScenario)?;
        }
        let world = WorldSnapshot::new(&self.obstacles, 0.0);
        for (name, s) in [("start", &self.start), ("goal", &self.goal)] {
            let p = s.position();
            let inside = p.x > self.world_min[0]
                && p.x < self.world_max[0]
                && p.y > self.world_min[1]
                && p.y < self.world_max[1];
            if !inside {
                return Err(SimError::InvalidScenario(format!(
                    "{name} lies outside the world bounds"
                )));
            }
            if world.min_h(p) <= 0.0 {
                return Err(SimError::InvalidScenario(format!(
                    "{name} lies inside an obstacle at t = 0"
                )));
            }
        }
        Ok(())
    }
}

/// Rate-limited actuator: the measured input moves toward the command at
/// most `accel * dt` per channel, then lands in the input box.
pub fn actuator_step(
    measured: &Input,
    commanded: &Input,
    dt: f64,
    accel_v: f64,
    accel_omega: f64,
    bounds: &InputBounds,
) -> Input {
    let slew = |m: f64, c: f64, a: f64| {
        let step = a * dt;
        let d = c - m;
        if d.abs() <= step {
            c
        } else {
            m + d.signum() * step
        }
    };
    Input::new(
        slew(measured.v, commanded.v, accel_v),
        slew(measured.omega, commanded.omega, accel_omega),
    )
    .clamped(bounds)
}

/// Solver outcome codes recorded per tick: 0 = optimal, 1 = infeasible
/// (relaxation ran; this increments the failure count), 2 = no QP ran
/// (terminal hold).
pub const QP_OK: u8 = 0;
pub const QP_FAIL: u8 = 1;
pub const QP_HOLD: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub cmd: Input,
    pub meas: Input,
    pub state: State,
    pub min_h: f64,
    pub path_q: usize,
    pub ref_i: usize,
    pub qp_status: u8,
}

/// Per-tick episode record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "t,cmd_v,cmd_w,meas_v,meas_w,px,py,theta,min_h,path_q,ref_i,qp_status";

impl Trace {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.rows.len() * 96 + 64);
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.t,
                r.cmd.v,
                r.cmd.omega,
                r.meas.v,
                r.meas.omega,
                r.state.px,
                r.state.py,
                r.state.theta,
                r.min_h,
                r.path_q,
                r.ref_i,
                r.qp_status
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Trace, SimError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == TRACE_HEADER => {}
            other => {
                return Err(SimError::TraceParse(format!(
                    "unexpected header {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 12 {
                return Err(SimError::TraceParse(format!("line {}: wrong arity", n + 2)));
            }
            let p = |s: &str| -> Result<f64, SimError> {
                s.parse()
                    .map_err(|e| SimError::TraceParse(format!("line {}: {e}", n + 2)))
            };
            rows.push(TraceRow {
                t: p(f[0])?,
                cmd: Input::new(p(f[1])?, p(f[2])?),
                meas: Input::new(p(f[3])?, p(f[4])?),
                state: State {
                    px: p(f[5])?,
                    py: p(f[6])?,
                    theta: p(f[7])?,
                },
                min_h: p(f[8])?,
                path_q: f[9]
                    .parse()
                    .map_err(|e| SimError::TraceParse(format!("line {}: {e}", n + 2)))?,
                ref_i: f[10]
                    .parse()
                    .map_err(|e| SimError::TraceParse(format!("line {}: {e}", n + 2)))?,
                qp_status: f[11]
                    .parse()
                    .map_err(|e| SimError::TraceParse(format!("line {}: {e}", n + 2)))?,
            });
        }
        Ok(Trace { rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Reached,
    Collided,
    Timeout,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Reached => "reached",
            Outcome::Collided => "collided",
            Outcome::Timeout => "timeout",
        }
    }
}

/// Benchmark statistics of one episode (percentages are 0 or 100 per
/// episode and average across trials).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub qp_failures: u64,
    pub safety_pct: f64,
    pub success_pct: f64,
    pub v_bar: f64,
    pub omega_bar: f64,
    pub e_v: f64,
    pub e_omega: f64,
}

impl Metrics {
    pub fn from_trace(trace: &Trace, outcome: Outcome) -> Metrics {
        let n = trace.rows.len().max(1) as f64;
        let qp_failures = trace
            .rows
            .iter()
            .filter(|r| r.qp_status == QP_FAIL)
            .count() as u64;
        let safe = trace.rows.iter().all(|r| r.min_h > 0.0);
        Metrics {
            qp_failures,
            safety_pct: if safe { 100.0 } else { 0.0 },
            success_pct: if outcome == Outcome::Reached { 100.0 } else { 0.0 },
            v_bar: trace.rows.iter().map(|r| r.meas.v.abs()).sum::<f64>() / n,
            omega_bar: trace.rows.iter().map(|r| r.meas.omega.abs()).sum::<f64>() / n,
            e_v: trace
                .rows
                .iter()
                .map(|r| (r.cmd.v - r.meas.v).abs())
                .sum::<f64>()
                / n,
            e_omega: trace
                .rows
                .iter()
                .map(|r| (r.cmd.omega - r.meas.omega).abs())
                .sum::<f64>()
                / n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub trace: Trace,
    pub metrics: Metrics,
    pub outcome: Outcome,
    /// Wall time of each control step (s), for budget checks.
    pub step_times: Vec<f64>,
    pub final_state: State,
}

/// Run one fixed-step episode: per tick, update obstacle tracks, run the
/// online layer, push the command through the actuator, integrate the
/// robot with the measured input, and check collision and goal
/// attainment. Deterministic for a given scenario and start.
pub fn run_episode(
    scenario: &Scenario,
    lib: &PathLibrary,
    controller: ControllerKind,
    filter_params: &FilterParams,
    nav_params: &NavParams,
    bounds: &InputBounds,
    start_override: Option<State>,
) -> EpisodeResult {
    let dt = scenario.control_period;
    let n_ticks = (scenario.duration / dt).ceil() as usize;
    let mut s = start_override.unwrap_or(scenario.start);
    let mut meas = Input::ZERO;
    let mut nav = NavigatorState::new(lib);
    let mut tracks: Vec<ObstacleTrack> =
        vec![ObstacleTrack::default(); scenario.obstacles.len()];
    let mut trace = Trace::default();
    let mut step_times = Vec::with_capacity(n_ticks);
    let goal = scenario.goal.position();
    let mut outcome = Outcome::Timeout;
    let mut last_cmd = Input::ZERO;

    for k in 0..n_ticks {
        let t = k as f64 * dt;
        let world = WorldSnapshot::new(&scenario.obstacles, t);
        let min_h = world.min_h(s.position());
        if min_h <= 0.0 {
            trace.rows.push(TraceRow {
                t,
                cmd: last_cmd,
                meas,
                state: s,
                min_h,
                path_q: nav.q,
                ref_i: nav.i,
                qp_status: QP_HOLD,
            });
            outcome = Outcome::Collided;
            break;
        }
        if (s.position() - goal).norm() <= nav_params.goal_tol {
            outcome = Outcome::Reached;
            break;
        }

        for j in visible_obstacles(&s, &world, scenario.sensing_radius) {
            let anchor = obstacle_anchor(&scenario.obstacles[j]) + world.offsets[j];
            tracks[j].push(t, anchor);
        }

        let (cmd, diag) = control_step(
            &s,
            lib,
            &world,
            &tracks,
            &mut nav,
            nav_params,
            scenario.sensing_radius,
            filter_params,
            bounds,
            controller,
            dt,
        );
        step_times.push(diag.elapsed);
        meas = actuator_step(&meas, &cmd, dt, scenario.accel_v, scenario.accel_omega, bounds);
        let qp_status = match &diag.filter {
            None => QP_HOLD,
            Some(f) if f.qp_failure => QP_FAIL,
            Some(_) => QP_OK,
        };
        trace.rows.push(TraceRow {
            t,
            cmd,
            meas,
            state: s,
            min_h,
            path_q: diag.q,
            ref_i: diag.i,
            qp_status,
        });
        last_cmd = cmd;
        s = rk4_step(&s, &meas, dt);
    }

    let metrics = Metrics::from_trace(&trace, outcome);
    EpisodeResult {
        trace,
        metrics,
        outcome,
        step_times,
        final_state: s,
    }
}

fn obstacle_anchor(obs: &Obstacle) -> Vector2<f64> {
    use crate::environment::Shape;
    fn anchor_of(shape: &Shape) -> Vector2<f64> {
        match shape {
            Shape::Circle { center, .. } => Vector2::new(center[0], center[1]),
            Shape::Rect { min, max, .. } => {
                Vector2::new((min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0)
            }
            Shape::Union { members } => anchor_of(&members[0]),
        }
    }
    anchor_of(&obs.shape)
}

/// Deterministic per-trial start: rejection-sample inside the scenario's
/// start region with 0.15 m obstacle clearance, falling back to the
/// scenario start. The draw depends only on (seed, trial), so every
/// controller sees the same starts.
pub fn sample_start(scenario: &Scenario, seed: u64, trial: usize) -> State {
    let region = match &scenario.start_region {
        None => return scenario.start,
        Some(r) => r,
    };
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9E3779B97F4A7C15));
    let world = WorldSnapshot::new(&scenario.obstacles, 0.0);
    for _ in 0..1000 {
        let p = Vector2::new(
            rng.random_range(region.min[0]..=region.max[0]),
            rng.random_range(region.min[1]..=region.max[1]),
        );
        if region.contains(p) && world.min_h(p) > 0.15 {
            return State::new(p.x, p.y, scenario.start.theta);
        }
    }
    scenario.start
}

/// One aggregated benchmark row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub controller: String,
    pub trials: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "controller,trials,qp_failures,safety_pct,success_pct,v_bar,omega_bar,e_v,e_omega\n",
        );
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.controller,
                r.trials,
                m.qp_failures,
                m.safety_pct,
                m.success_pct,
                m.v_bar,
                m.omega_bar,
                m.e_v,
                m.e_omega
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>6} {:>8} {:>9} {:>10} {:>8} {:>10} {:>8} {:>8}\n",
            "controller", "trials", "qp_fail", "safety_%", "success_%", "v_bar", "omega_bar", "e_v", "e_w"
        );
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{:<12} {:>6} {:>8} {:>9.1} {:>10.1} {:>8.3} {:>10.3} {:>8.3} {:>8.3}\n",
                r.controller,
                r.trials,
                m.qp_failures,
                m.safety_pct,
                m.success_pct,
                m.v_bar,
                m.omega_bar,
                m.e_v,
                m.e_omega
            ));
        }
        out
    }
}

/// Run `trials` seeded episodes per controller and aggregate. Failure
/// counts sum across trials; percentages and speed statistics average.
/// Rows are sorted by controller name, and the whole run is reproducible
/// from (scenario, seed).
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    scenario: &Scenario,
    lib: &PathLibrary,
    controllers: &[ControllerKind],
    trials: usize,
    seed: u64,
    filter_params: &FilterParams,
    nav_params: &NavParams,
    bounds: &InputBounds,
) -> (BenchTable, Vec<(String, usize, EpisodeResult)>) {
    let mut episodes = Vec::new();
    let mut rows = Vec::new();
    for &controller in controllers {
        let name = match controller {
            ControllerKind::Mcbf => "mcbf",
            ControllerKind::Cbf => "cbf",
        }
        .to_string();
        let mut agg = Metrics {
            qp_failures: 0,
            safety_pct: 0.0,
            success_pct: 0.0,
            v_bar: 0.0,
            omega_bar: 0.0,
            e_v: 0.0,
            e_omega: 0.0,
        };
        for trial in 0..trials {
            let start = sample_start(scenario, seed, trial);
            let res = run_episode(
                scenario,
                lib,
                controller,
                filter_params,
                nav_params,
                bounds,
                Some(start),
            );
            agg.qp_failures += res.metrics.qp_failures;
            agg.safety_pct += res.metrics.safety_pct;
            agg.success_pct += res.metrics.success_pct;
            agg.v_bar += res.metrics.v_bar;
            agg.omega_bar += res.metrics.omega_bar;
            agg.e_v += res.metrics.e_v;
            agg.e_omega += res.metrics.e_omega;
            episodes.push((name.clone(), trial, res));
        }
        let n = trials.max(1) as f64;
        agg.safety_pct /= n;
        agg.success_pct /= n;
        agg.v_bar /= n;
        agg.omega_bar /= n;
        agg.e_v /= n;
        agg.e_omega /= n;
        rows.push(BenchRow {
            controller: name,
            trials,
            metrics: agg,
        });
    }
    rows.sort_by(|a, b| a.controller.cmp(&b.controller));
    (BenchTable { rows }, episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Shape;
    use crate::trajopt::{build_library, TrajoptConfig};
    use approx::assert_relative_eq;

    fn open_scenario() -> Scenario {
        Scenario {
            duration: 30.0,
            ..Default::default()
        }
    }

    fn straight_library() -> PathLibrary {
        build_library(
            &State::new(0.0, 0.0, 0.0),
            &State::new(4.0, 0.0, 0.0),
            &TrajoptConfig::default(),
            &InputBounds::default(),
        )
        .unwrap()
    }

    #[test]
    fn actuator_identity_when_tracking() {
        let u = Input::new(0.5, -1.0);
        let out = actuator_step(&u, &u, 0.01, 2.0, 4.0, &InputBounds::default());
        assert_eq!(out, u);
    }

    #[test]
    fn actuator_rate_limit_arithmetic() {
        let out = actuator_step(
            &Input::ZERO,
            &Input::new(1.0, 0.0),
            0.01,
            2.0,
            4.0,
            &InputBounds::default(),
        );
        assert_relative_eq!(out.v, 0.02, epsilon = 1e-15);
        assert_eq!(out.omega, 0.0);
    }

    #[test]
    fn actuator_converges_within_bound() {
        let bounds = InputBounds::default();
        let mut meas = Input::ZERO;
        let cmd = Input::new(0.9, -1.7);
        let dt = 0.01;
        let ticks_v = (0.9f64 / (2.0 * dt)).ceil() as usize;
        let ticks_w = (1.7f64 / (4.0 * dt)).ceil() as usize;
        for _ in 0..ticks_v.max(ticks_w) {
            meas = actuator_step(&meas, &cmd, dt, 2.0, 4.0, &bounds);
        }
        assert_eq!(meas, cmd);
    }

    #[test]
    fn empty_world_reaches_goal_safely() {
        let sc = open_scenario();
        sc.validate().unwrap();
        let lib = straight_library();
        let res = run_episode(
            &sc,
            &lib,
            ControllerKind::Mcbf,
            &FilterParams::default(),
            &NavParams::default(),
            &InputBounds::default(),
            None,
        );
        assert_eq!(res.outcome, Outcome::Reached);
        assert_eq!(res.metrics.safety_pct, 100.0);
        assert_eq!(res.metrics.qp_failures, 0);
    }

    #[test]
    fn start_inside_obstacle_collides_at_tick_zero() {
        let mut sc = open_scenario();
        sc.obstacles = vec![Obstacle::static_shape(
            0,
            Shape::Circle {
                center: [0.0, 0.0],
                radius: 0.5,
            },
        )];
        let lib = straight_library();
        let res = run_episode(
            &sc,
            &lib,
            ControllerKind::Mcbf,
            &FilterParams::default(),
            &NavParams::default(),
            &InputBounds::default(),
            None,
        );
        assert_eq!(res.outcome, Outcome::Collided);
        assert_eq!(res.trace.rows.len(), 1);
        assert!(res.trace.rows[0].min_h <= 0.0);
        assert_eq!(res.metrics.safety_pct, 0.0);
    }

    #[test]
    fn determinism_bit_identical_traces() {
        let mut sc = open_scenario();
        sc.obstacles = vec![Obstacle {
            id: 0,
            shape: Shape::Circle {
                center: [2.0, 0.6],
                radius: 0.4,
            },
            motion: Some(crate::environment::MotionScript {
                waypoints: vec![[2.0, 0.6], [2.0, -0.6]],
                speed: 0.8,
            }),
        }];
        let lib = straight_library();
        let run = || {
            run_episode(
                &sc,
                &lib,
                ControllerKind::Mcbf,
                &FilterParams::default(),
                &NavParams::default(),
                &InputBounds::default(),
                None,
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    }

    #[test]
    fn trace_csv_round_trip_and_metric_replay() {
        let sc = open_scenario();
        let lib = straight_library();
        let res = run_episode(
            &sc,
            &lib,
            ControllerKind::Cbf,
            &FilterParams::default(),
            &NavParams::default(),
            &InputBounds::default(),
            None,
        );
        let text = res.trace.to_csv();
        assert!(text.starts_with(TRACE_HEADER));
        let back = Trace::from_csv(&text).unwrap();
        assert_eq!(back, res.trace);
        let replayed = Metrics::from_trace(&back, res.outcome);
        assert_eq!(replayed, res.metrics);
    }

    #[test]
    fn infinite_actuator_limits_zero_tracking_error() {
        let mut sc = open_scenario();
        sc.accel_v = f64::INFINITY;
        sc.accel_omega = f64::INFINITY;
        let lib = straight_library();
        let res = run_episode(
            &sc,
            &lib,
            ControllerKind::Mcbf,
            &FilterParams::default(),
            &NavParams::default(),
            &InputBounds::default(),
            None,
        );
        assert_eq!(res.metrics.e_v, 0.0);
        assert_eq!(res.metrics.e_omega, 0.0);
    }

    #[test]
    fn safety_accounting_consistent_with_outcome() {
        let mut sc = open_scenario();
        sc.obstacles = vec![Obstacle::static_shape(
            0,
            Shape::Circle {
                center: [2.0, 0.0],
                radius: 0.6,
            },
        )];
        let lib = straight_library();
        for controller in [ControllerKind::Mcbf, ControllerKind::Cbf] {
            let res = run_episode(
                &sc,
                &lib,
                controller,
                &FilterParams::default(),
                &NavParams::default(),
                &InputBounds::default(),
                None,
            );
            let any_violation = res.trace.rows.iter().any(|r| r.min_h <= 0.0);
            assert_eq!(res.outcome == Outcome::Collided, any_violation);
            assert_eq!(res.metrics.safety_pct == 0.0, any_violation);
        }
    }

    #[test]
    fn benchmark_identical_rows_without_obstacles() {
        let sc = open_scenario();
        let lib = straight_library();
        let (table, _) = run_benchmark(
            &sc,
            &lib,
            &[ControllerKind::Mcbf, ControllerKind::Cbf],
            1,
            7,
            &FilterParams::default(),
            &NavParams::default(),
            &InputBounds::default(),
        );
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].metrics, table.rows[1].metrics);
        // sorted by controller name
        assert_eq!(table.rows[0].controller, "cbf");
        assert_eq!(table.rows[1].controller, "mcbf");
    }

    #[test]
    fn benchmark_reproducible_from_seed() {
        let mut sc = open_scenario();
        sc.start_region = Some(Region {
            min: [-0.4, -0.4],
            max: [0.4, 0.4],
        });
        let lib = straight_library();
        let run = || {
            run_benchmark(
                &sc,
                &lib,
                &[ControllerKind::Mcbf, ControllerKind::Cbf],
                3,
                42,
                &FilterParams::default(),
                &NavParams::default(),
                &InputBounds::default(),
            )
        };
        let (t1, e1) = run();
        let (t2, e2) = run();
        assert_eq!(t1.to_csv(), t2.to_csv());
        for ((n1, i1, r1), (n2, i2, r2)) in e1.iter().zip(&e2) {
            assert_eq!((n1, i1), (n2, i2));
            assert_eq!(r1.trace.to_csv(), r2.trace.to_csv());
        }
    }

    #[test]
    fn sampled_starts_respect_region_and_clearance() {
        let mut sc = open_scenario();
        sc.obstacles = vec![Obstacle::static_shape(
            0,
            Shape::Circle {
                center: [0.0, 0.0],
                radius: 0.3,
            },
        )];
        sc.start = State::new(-1.0, 0.0, 0.0);
        sc.start_region = Some(Region {
            min: [-1.0, -1.0],
            max: [1.0, 1.0],
        });
        let world = WorldSnapshot::new(&sc.obstacles, 0.0);
        for trial in 0..20 {
            let s = sample_start(&sc, 3, trial);
            assert!(s.px >= -1.0 && s.px <= 1.0 && s.py >= -1.0 && s.py <= 1.0);
            assert!(world.min_h(s.position()) > 0.15);
        }
    }

    #[test]
    fn scenario_validation_rejects_bad_setups() {
        let mut sc = open_scenario();
        sc.start = State::new(100.0, 0.0, 0.0);
        assert!(sc.validate().is_err());
        let mut sc = open_scenario();
        sc.obstacles = vec![Obstacle::static_shape(
            0,
            Shape::Circle {
                center: [0.0, 0.0],
                radius: 0.5,
            },
        )];
        assert!(sc.validate().is_err(), "start inside an obstacle must be rejected");
    }
}
