//! Inner solver for the dynamics-feasible proximal step: time-varying
//! Riccati backward recursion and the iLQR loop that composes it with
//! closed-loop rollouts and a feedforward line search.

use crate::dynamics::{linearize, rk4_step_raw, Input, State};
use crate::trajopt::TrajectoryVars;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

/// Output of the backward pass: per-stage feedback gains and feedforward
/// corrections, plus the cost-to-go constant at the initial stage (used by
/// tests as an independent handle on the minimum value).
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub k_seq: Vec<Matrix2x3<f64>>,
    pub w_seq: Vec<Vector2<f64>>,
    pub q0: f64,
    pub regularized: bool,
}

/// Backward Riccati/feedforward recursion for the proximal tracking
/// problem: minimize `(rho/2) * sum_i (|dx_i + c_i|^2 + |du_i + d_i|^2)`
/// (the i = T term has no input part) subject to `dx_{i+1} = A_i dx_i +
/// B_i du_i`, `dx_0 = 0`.
///
/// With the value function `V_i(dx) = 1/2 dx' P_i dx + b_i' dx + q_i` the
/// consistent weights are `Q = R = rho I` and terminal `P_T = rho I`,
/// `b_T = rho c_T`; the minimizer at each stage is
/// `du_i = -K_i dx_i - w_i` with `Phi = rho I + B' P B`,
/// `K = Phi^{-1} B' P A` and `w = Phi^{-1} (rho d + B' b)`.
pub fn riccati_backward(
    a_seq: &[Matrix3<f64>],
    b_seq: &[Matrix3x2],
    c_seq: &[Vector3<f64>],
    d_seq: &[Vector2<f64>],
    rho: f64,
) -> RiccatiSolution {
    let t = a_seq.len();
    assert_eq!(b_seq.len(), t);
    assert_eq!(d_seq.len(), t);
    assert_eq!(c_seq.len(), t + 1);
    assert!(rho > 0.0);

    let mut k_seq = vec![Matrix2x3::zeros(); t];
    let mut w_seq = vec![Vector2::zeros(); t];
    let mut regularized = false;

    let mut p = Matrix3::identity() * rho;
    let mut b = c_seq[t] * rho;
    let mut q = 0.5 * rho * c_seq[t].norm_squared();

    for i in (0..t).rev() {
        let a_i = &a_seq[i];
        let b_i = &b_seq[i];
        let phi = Matrix2::identity() * rho + b_i.transpose() * p * b_i;
        let phi_inv = match phi.try_inverse() {
            Some(inv) => inv,
            None => {
                regularized = true;
                (phi + Matrix2::identity() * 1e-9)
                    .try_inverse()
                    .expect("regularized curvature must invert")
            }
        };
        let k = phi_inv * b_i.transpose() * p * a_i;
        let w = phi_inv * (d_seq[i] * rho + b_i.transpose() * b);
        let a_cl = a_i - b_i * k;

        let p_next = p;
        let b_next = b;
        let q_next = q;

        let mut p_new = Matrix3::identity() * rho + k.transpose() * k * rho
            + a_cl.transpose() * p_next * a_cl;
        p_new = (p_new + p_new.transpose()) * 0.5;
        let b_new = c_seq[i] * rho + k.transpose() * (w - d_seq[i]) * rho
            - a_cl.transpose() * (p_next * (b_i * w)) + a_cl.transpose() * b_next;
        let q_new = q_next + 0.5 * rho * (c_seq[i].norm_squared() + (w - d_seq[i]).norm_squared())
            + 0.5 * (b_i * w).dot(&(p_next * (b_i * w)))
            - b_next.dot(&(b_i * w));

        p = p_new;
        b = b_new;
        q = q_new;
        k_seq[i] = k;
        w_seq[i] = w;
    }

    RiccatiSolution {
        k_seq,
        w_seq,
        q0: q,
        regularized,
    }
}

/// Convenience alias: nalgebra's 3x2 fixed matrix.
pub type Matrix3x2 = nalgebra::Matrix3x2<f64>;

/// Result of the inner solve: a dynamically exact iterate (rolled out with
/// the discrete step, so the dynamics residual is identically zero), the
/// gains and feedforwards of the final backward pass, and bookkeeping.
#[derive(Debug, Clone)]
pub struct IlqrSolution {
    pub z: TrajectoryVars,
    pub k_seq: Vec<Matrix2x3<f64>>,
    pub w_seq: Vec<Vector2<f64>>,
    pub objective: f64,
    pub iterations: usize,
    pub improved: bool,
}

fn prox_objective(z: &TrajectoryVars, tx: &[Vector3<f64>], tu: &[Vector2<f64>], rho: f64) -> f64 {
    let mut s = 0.0;
    for (x, t) in z.x.iter().zip(tx) {
        s += (x - t).norm_squared();
    }
    for (u, t) in z.u.iter().zip(tu) {
        s += (u - t).norm_squared();
    }
    0.5 * rho * s
}

/// Solve the dynamics-feasible proximal step `min (rho/2) |z - (zbar - v)|^2`
/// over exact rollouts from `xi`, by repeated linearization, Riccati
/// backward pass, and closed-loop rollout with step-halving on the
/// feedforward term. `z0` is the warm-start iterate (the previous outer
/// iterate); the returned trajectory is always an exact rollout.
#[allow(clippy::too_many_arguments)]
pub fn ilqr_solve(
    z0: &TrajectoryVars,
    zbar: &TrajectoryVars,
    v: &TrajectoryVars,
    xi: &State,
    rho: f64,
    ts: f64,
    max_inner: usize,
    tol: f64,
) -> IlqrSolution {
    let t = z0.u.len();
    let tx: Vec<Vector3<f64>> = zbar.x.iter().zip(&v.x).map(|(a, b)| a - b).collect();
    let tu: Vec<Vector2<f64>> = zbar.u.iter().zip(&v.u).map(|(a, b)| a - b).collect();

    // ensure the starting iterate is itself an exact rollout
    let mut z = z0.clone();
    z.x[0] = xi.to_vector();
    for i in 0..t {
        z.x[i + 1] = rk4_step_raw(&z.x[i], &Input::from_vector(z.u[i]), ts);
    }
    let mut obj = prox_objective(&z, &tx, &tu, rho);

    let mut iterations = 0;
    let mut improved = true;
    let mut done = false;
    let mut a_seq = vec![Matrix3::zeros(); t];
    let mut b_seq = vec![Matrix3x2::zeros(); t];

    while iterations < max_inner && !done {
        iterations += 1;
        for i in 0..t {
            let jac = linearize(
                &State::from_vector(z.x[i]),
                &Input::from_vector(z.u[i]),
                ts,
            );
            a_seq[i] = jac.a;
            b_seq[i] = jac.b;
        }
        let c_seq: Vec<Vector3<f64>> = z.x.iter().zip(&tx).map(|(x, t)| x - t).collect();
        let d_seq: Vec<Vector2<f64>> = z.u.iter().zip(&tu).map(|(u, t)| u - t).collect();
        let ric = riccati_backward(&a_seq, &b_seq, &c_seq, &d_seq, rho);

        // step-halving line search on the feedforward term
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..9 {
            let mut zn = TrajectoryVars::zeros(t);
            zn.x[0] = z.x[0];
            for i in 0..t {
                let dx = zn.x[i] - z.x[i];
                zn.u[i] = z.u[i] - ric.w_seq[i] * alpha - ric.k_seq[i] * dx;
                zn.x[i + 1] = rk4_step_raw(&zn.x[i], &Input::from_vector(zn.u[i]), ts);
            }
            let obj_n = prox_objective(&zn, &tx, &tu, rho);
            if obj_n < obj {
                done = (obj - obj_n) < tol * obj.max(1e-300);
                z = zn;
                obj = obj_n;
                accepted = true;
                break;
            }
            alpha /= 2.0;
        }
        if !accepted {
            // no improvement even at the smallest step: either we are at
            // the fixed point (zero feedforward) or progress stalled
            let w_norm: f64 = ric.w_seq.iter().map(|w| w.norm()).sum();
            improved = w_norm < 1e-9;
            break;
        }
    }
    finish(z, obj, iterations, improved, &tx, &tu, rho, ts)
}

/// Recompute the backward pass at the final iterate so the returned gains
/// and feedforwards correspond to the trajectory actually shipped.
#[allow(clippy::too_many_arguments)]
fn finish(
    z: TrajectoryVars,
    objective: f64,
    iterations: usize,
    improved: bool,
    tx: &[Vector3<f64>],
    tu: &[Vector2<f64>],
    rho: f64,
    ts: f64,
) -> IlqrSolution {
    let t = z.u.len();
    let mut a_seq = vec![Matrix3::zeros(); t];
    let mut b_seq = vec![Matrix3x2::zeros(); t];
    for i in 0..t {
        let jac = linearize(
            &State::from_vector(z.x[i]),
            &Input::from_vector(z.u[i]),
            ts,
        );
        a_seq[i] = jac.a;
        b_seq[i] = jac.b;
    }
    let c_seq: Vec<Vector3<f64>> = z.x.iter().zip(tx).map(|(x, t)| x - t).collect();
    let d_seq: Vec<Vector2<f64>> = z.u.iter().zip(tu).map(|(u, t)| u - t).collect();
    let ric = riccati_backward(&a_seq, &b_seq, &c_seq, &d_seq, rho);
    IlqrSolution {
        z,
        k_seq: ric.k_seq,
        w_seq: ric.w_seq,
        objective,
        iterations,
        improved,
    }
}
