//! Online layer: next-state prediction, nearest-neighbor path selection
//! with center-line tie-breaking, reference-index progression, the
//! feedforward-plus-feedback nominal law, and the composed control step
//! that ends in the safety filter.

use crate::dynamics::{rk4_step, wrap_angle, Input, InputBounds, State};
use crate::environment::{ObstacleTrack, WorldSnapshot};
use crate::safety::{cbf_filter, mcbf_filter, FilterDiagnostics, FilterParams, TangentMemory};
use crate::trajopt::{PathEntry, PathLibrary};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Which reactive filter closes the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Mcbf,
    Cbf,
}

impl std::str::FromStr for ControllerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mcbf" => Ok(Self::Mcbf),
            "cbf" => Ok(Self::Cbf),
            other => Err(format!("unknown controller '{other}' (expected mcbf or cbf)")),
        }
    }
}

/// Online-layer tuning. The sensing radius is a property of the scenario
/// and is passed to the control step separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NavParams {
    /// Reference points closer than this are considered passed (m).
    pub tol_adv: f64,
    /// Position tolerance for goal attainment (m).
    pub goal_tol: f64,
}

impl Default for NavParams {
    fn default() -> Self {
        Self {
            tol_adv: 0.3,
            goal_tol: 0.3,
        }
    }
}

/// Controller state carried across ticks: active path, reference index,
/// the previously applied command, and the tangent-sign memory.
#[derive(Debug, Clone)]
pub struct NavigatorState {
    pub q: usize,
    pub i: usize,
    pub last_command: Input,
    pub tangent: TangentMemory,
    started: bool,
}

impl NavigatorState {
    /// Start on the center line (nearest converged path to the center when
    /// the center itself did not converge).
    pub fn new(lib: &PathLibrary) -> Self {
        let q = if lib.entries[lib.center_path_index].converged {
            lib.center_path_index
        } else {
            lib.entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.converged)
                .min_by_key(|(i, _)| i.abs_diff(lib.center_path_index))
                .map(|(i, _)| i)
                .expect("library invariant: at least one converged path")
        };
        Self {
            q,
            i: 0,
            last_command: Input::ZERO,
            tangent: TangentMemory::default(),
            started: false,
        }
    }
}

/// One-step prediction with the previously applied command (zero before
/// the first tick).
pub fn predict_next(s: &State, u_prev: &Input, ts: f64) -> State {
    rk4_step(s, u_prev, ts)
}

/// Nearest path by position distance over all reference points of all
/// converged entries. Ties within 1e-9 go to the path closer to the
/// center line, then to the smaller index.
pub fn select_path(lib: &PathLibrary, x_pred: &State) -> usize {
    const TIE: f64 = 1e-9;
    let p = x_pred.position();
    let mut best: Option<(usize, f64)> = None;
    for (idx, entry) in lib.entries.iter().enumerate() {
        if !entry.converged {
            continue;
        }
        let d = entry
            .x_star
            .iter()
            .map(|x| (x.position() - p).norm())
            .fold(f64::INFINITY, f64::min);
        match best {
            None => best = Some((idx, d)),
            Some((bi, bd)) => {
                if d < bd - TIE {
                    best = Some((idx, d));
                } else if (d - bd).abs() <= TIE {
                    let center = lib.center_path_index;
                    let better_center = idx.abs_diff(center) < bi.abs_diff(center);
                    if better_center {
                        best = Some((idx, d));
                    }
                }
            }
        }
    }
    best.expect("library invariant: at least one converged path").0
}

fn nearest_index(entry: &PathEntry, p: Vector2<f64>) -> usize {
    entry
        .x_star
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (a.position() - p)
                .norm()
                .partial_cmp(&(b.position() - p).norm())
                .unwrap()
        })
        .map(|(i, _)| i)
        .unwrap()
}

/// Advance the reference index: floor at the along-path nearest point
/// minus a lookback of two, never decrease, and walk past every reference
/// point within `tol_adv` of the robot.
pub fn advance_index(entry: &PathEntry, s: &State, i: usize, tol_adv: f64) -> usize {
    let t = entry.x_star.len() - 1;
    let p = s.position();
    let nearest = nearest_index(entry, p);
    if nearest == t {
        // past the end of the path: pure terminal regulation, no stale
        // feedforward
        return t;
    }
    let mut idx = i.max(nearest.saturating_sub(2));
    while idx < t && (entry.x_star[idx].position() - p).norm() <= tol_adv {
        idx += 1;
    }
    idx
}

/// Two-degree-of-freedom nominal law: feedforward plus gain on the state
/// error, with the heading error wrapped. At the terminal index the
/// feedforward is zero and the last gain regulates to the final state.
pub fn nominal_input(entry: &PathEntry, i: usize, s: &State) -> Input {
    let t = entry.mu_star.len();
    let gi = i.min(t - 1);
    let xi = i.min(t);
    let mu = if i < t { entry.mu_star[i] } else { Input::ZERO };
    let xref = &entry.x_star[xi];
    let err = nalgebra::Vector3::new(
        xref.px - s.px,
        xref.py - s.py,
        wrap_angle(xref.theta - s.theta),
    );
    let fb = entry.k_star[gi] * err;
    Input::new(mu.v + fb.x, mu.omega + fb.y)
}

/// Diagnostics for one control step.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub filter: Option<FilterDiagnostics>,
    pub q: usize,
    pub i: usize,
    pub u_nom: Input,
    pub goal_reached: bool,
    pub path_switched: bool,
    pub elapsed: f64,
}

/// One tick of the online layer: predict, select, re-anchor on a path
/// switch, advance the reference, form the nominal command, filter it, and
/// clamp. Always returns a command.
#[allow(clippy::too_many_arguments)]
pub fn control_step(
    s: &State,
    lib: &PathLibrary,
    world: &WorldSnapshot,
    tracks: &[ObstacleTrack],
    nav: &mut NavigatorState,
    params: &NavParams,
    sensing_radius: f64,
    filter_params: &FilterParams,
    bounds: &InputBounds,
    controller: ControllerKind,
    control_period: f64,
) -> (Input, StepDiagnostics) {
    let started_at = Instant::now();
    let goal = lib.goal();
    if (s.position() - goal.position()).norm() <= params.goal_tol {
        nav.last_command = Input::ZERO;
        return (
            Input::ZERO,
            StepDiagnostics {
                filter: None,
                q: nav.q,
                i: nav.i,
                u_nom: Input::ZERO,
                goal_reached: true,
                path_switched: false,
                elapsed: started_at.elapsed().as_secs_f64(),
            },
        );
    }

    // the first tick stays on the center line
    let mut switched = false;
    if nav.started {
        let x_pred = predict_next(s, &nav.last_command, control_period);
        let q_new = select_path(lib, &x_pred);
        if q_new != nav.q {
            nav.q = q_new;
            nav.i = nearest_index(&lib.entries[q_new], s.position());
            switched = true;
        }
    } else {
        nav.started = true;
    }

    let entry = &lib.entries[nav.q];
    nav.i = advance_index(entry, s, nav.i, params.tol_adv);
    let mut u_nom = nominal_input(entry, nav.i, s);
    // the lookback floor can pin the reference behind a robot that
    // overshot the path; the nominal then balances at zero (or negative)
    // speed and deadlocks against the one-sided speed bound, so jump to
    // the nearest point
    if u_nom.v < 0.02
        && (entry.x_star[nav.i.min(entry.x_star.len() - 1)].position() - s.position()).norm()
            > params.tol_adv
    {
        let near = nearest_index(entry, s.position());
        if near > nav.i {
            // step the reference forward a little at a time so the
            // feedback never teleports to a distant target
            nav.i = near.min(nav.i + 1);
            u_nom = nominal_input(entry, nav.i, s);
        }
    }

    // reference position biases the tangent sign; at the terminal index
    // the goal itself serves
    let ref_point = entry.x_star[nav.i.min(entry.x_star.len() - 1)].position();

    let (u, fd) = match controller {
        ControllerKind::Mcbf => mcbf_filter(
            s,
            &u_nom,
            world,
            tracks,
            sensing_radius,
            filter_params,
            bounds,
            &mut nav.tangent,
            ref_point,
        ),
        ControllerKind::Cbf => cbf_filter(
            s,
            &u_nom,
            world,
            tracks,
            sensing_radius,
            filter_params,
            bounds,
        ),
    };
    nav.last_command = u;
    (
        u,
        StepDiagnostics {
            filter: Some(fd),
            q: nav.q,
            i: nav.i,
            u_nom,
            goal_reached: false,
            path_switched: switched,
            elapsed: started_at.elapsed().as_secs_f64(),
        },
    )
}
