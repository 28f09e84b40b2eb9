//! Spatio-temporal registration: warp events to the reference time and refine
//! the affine parameters by minimizing the squared (smoothed) time-surface
//! values at the warped locations with Levenberg-Marquardt.

use std::fmt;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::event::CameraIntrinsics;
use crate::linear_solver::AffineParams;
use crate::lts::{LinearTimeSurface, SampledEventSet};

/// Minimum events with in-window warps for a refinement attempt.
pub const MIN_REFINE_EVENTS: usize = 10;
/// Fraction of out-of-window warps above which the refinement is abandoned.
pub const MAX_OUT_OF_WINDOW_FRACTION: f64 = 0.5;

#[derive(Debug)]
pub enum RegistrationError {
    InsufficientEvents { in_window: usize, need: usize },
    DivergedOutOfWindow { out: usize, total: usize },
    ReferenceTimeMismatch,
}

impl fmt::Display for RegistrationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegistrationError::InsufficientEvents { in_window, need } => {
                write!(f, "{in_window} events warp into the window, need {need}")
            }
            RegistrationError::DivergedOutOfWindow { out, total } => {
                write!(f, "{out}/{total} events warp outside the window")
            }
            RegistrationError::ReferenceTimeMismatch => {
                write!(f, "initial params and surface disagree on the reference time")
            }
        }
    }
}

impl std::error::Error for RegistrationError {}

/// Warps a normalized point observed at `t_s` to the reference time:
/// `p + A(p; a) * (t_ref - t)`.
///
/// With `a` anchored at the destination depth `Z(t_ref)` this is the exact
/// endpoint of the constant-velocity trajectory, for any start time.
#[inline]
pub fn warp_event(p: Vector2<f64>, t_s: f64, t_ref_s: f64, a: &AffineParams) -> Vector2<f64> {
    p + a.flow_at(p) * (t_ref_s - t_s)
}

/// Warps with the constant-flow model anchored at `t_anchor_s`.
///
/// Under that model every point keeps the velocity it had at the anchor time,
/// where the flow field is `A(.; a0)` with `a0 = nu / Z(t_anchor)`. An event
/// observed at `t` sits downstream of its anchor position, so its (constant)
/// velocity solves `u = A(p - u (t - t_anchor); a0)`, giving
/// `u = A(p; a0) / (1 + a0_z (t - t_anchor))`. For an event at the anchor
/// time this reduces to the plain constant-flow displacement; it never
/// matches the true dynamics once the depth changes over the slice.
#[inline]
pub fn warp_event_constant_model(
    p: Vector2<f64>,
    t_s: f64,
    t_ref_s: f64,
    t_anchor_s: f64,
    a0: &AffineParams,
) -> Vector2<f64> {
    let denom = 1.0 + a0.a_z * (t_s - t_anchor_s);
    p + a0.flow_at(p) * ((t_ref_s - t_s) / denom)
}

/// LM configuration. The damping is initialized at
/// `initial_damping_scale * trace(JtJ) / 3` and adapted multiplicatively.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub max_iters: usize,
    pub initial_damping_scale: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Stop when the accepted step norm falls below this (1/s).
    pub step_tolerance: f64,
    /// Stop when the relative cost decrease falls below this.
    pub residual_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iters: 10,
            initial_damping_scale: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            step_tolerance: 1e-7,
            residual_tolerance: 1e-10,
        }
    }
}

/// Why the refinement stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    StepTolerance,
    ResidualTolerance,
    MaxIterations,
    /// Damping grew past the point where progress is possible.
    Stalled,
}

/// Outcome of an LM refinement.
#[derive(Debug, Clone)]
pub struct RefineResult {
    pub params: AffineParams,
    /// RMS of the time-surface residuals over the used events, seconds.
    pub rms_s: f64,
    /// Accepted LM iterations.
    pub iterations: usize,
    /// Events contributing residuals at the final parameters.
    pub n_residuals: usize,
    /// Events whose warp left the window at the final parameters.
    pub n_out_of_window: usize,
    pub stop: StopReason,
}

/// Residual and Jacobian of one event under the current parameters.
///
/// The residual is the smoothed surface value at the warped pixel location.
/// The Jacobian chains the sampled surface gradient (s/px), the pixel scaling
/// and the warp derivative `d(warped)/da = dt * [[-1, 0, x], [0, -1, y]]`.
pub fn residual_and_jacobian(
    p: Vector2<f64>,
    t_s: f64,
    lts: &LinearTimeSurface,
    intr: &CameraIntrinsics,
    a: &AffineParams,
) -> Result<(f64, Vector3<f64>), crate::lts::LtsError> {
    let dt = a.t_ref_s - t_s;
    let warped = warp_event(p, t_s, a.t_ref_s, a);
    let px = intr.normalized_to_pixel(warped);
    let (value, grad) = lts.sample_value_and_gradient(px)?;
    let gx = grad.x * intr.fx;
    let gy = grad.y * intr.fy;
    let jac = Vector3::new(-gx * dt, -gy * dt, (gx * p.x + gy * p.y) * dt);
    Ok((value, jac))
}

struct Evaluation {
    cost: f64,
    hessian: Matrix3<f64>,
    gradient: Vector3<f64>,
    n_used: usize,
    n_oow: usize,
}

fn evaluate(
    events: &SampledEventSet,
    lts: &LinearTimeSurface,
    intr: &CameraIntrinsics,
    a: &AffineParams,
) -> Evaluation {
    let mut cost = 0.0;
    let mut hessian = Matrix3::zeros();
    let mut gradient = Vector3::zeros();
    let mut n_used = 0;
    let mut n_oow = 0;
    for e in &events.events {
        match residual_and_jacobian(e.p_norm, e.t_s, lts, intr, a) {
            Ok((r, j)) => {
                cost += r * r;
                hessian += j * j.transpose();
                gradient += j * r;
                n_used += 1;
            }
            Err(_) => n_oow += 1,
        }
    }
    Evaluation { cost, hessian, gradient, n_used, n_oow }
}

/// Damped normal-equation Levenberg-Marquardt on the registration objective.
///
/// Steps are accepted only when they reduce the summed squared residual, so
/// the objective sequence is non-increasing. Events whose warp leaves the
/// window are skipped for that evaluation rather than clamped.
pub fn lm_refine(
    events: &SampledEventSet,
    lts: &LinearTimeSurface,
    intr: &CameraIntrinsics,
    a_init: AffineParams,
    cfg: &LmConfig,
) -> Result<RefineResult, RegistrationError> {
    assert!(cfg.max_iters >= 1, "max_iters must be at least 1");
    if !a_init.is_finite() || (a_init.t_ref_s - lts.t_ref_s()).abs() > 1e-9 {
        return Err(RegistrationError::ReferenceTimeMismatch);
    }
    let t_ref = lts.t_ref_s();
    let total = events.events.len();

    let mut a = a_init.as_vector();
    let mut eval = evaluate(events, lts, intr, &AffineParams::from_vector(a, t_ref));
    if eval.n_oow * 2 > total {
        return Err(RegistrationError::DivergedOutOfWindow { out: eval.n_oow, total });
    }
    if eval.n_used < MIN_REFINE_EVENTS {
        return Err(RegistrationError::InsufficientEvents {
            in_window: eval.n_used,
            need: MIN_REFINE_EVENTS,
        });
    }

    let mut damping = cfg.initial_damping_scale * eval.hessian.trace() / 3.0;
    if !damping.is_finite() || damping <= 0.0 {
        // Flat surface: the gradient is zero everywhere and so is the step.
        let rms = (eval.cost / eval.n_used as f64).sqrt();
        return Ok(RefineResult {
            params: AffineParams::from_vector(a, t_ref),
            rms_s: rms,
            iterations: 0,
            n_residuals: eval.n_used,
            n_out_of_window: eval.n_oow,
            stop: StopReason::StepTolerance,
        });
    }
    let damping_ceiling = damping * 1e12;

    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;

    'outer: for _ in 0..cfg.max_iters {
        iterations += 1;
        let mut accepted = false;
        while !accepted {
            let lhs = eval.hessian + Matrix3::identity() * damping;
            let Some(step) = lhs.lu().solve(&(-eval.gradient)) else {
                damping *= cfg.damping_up;
                if damping > damping_ceiling {
                    stop = StopReason::Stalled;
                    iterations -= 1;
                    break 'outer;
                }
                continue;
            };
            let trial = a + step;
            let trial_eval =
                evaluate(events, lts, intr, &AffineParams::from_vector(trial, t_ref));
            let usable = trial_eval.n_used >= MIN_REFINE_EVENTS
                && trial_eval.n_oow * 2 <= total
                && trial_eval.cost < eval.cost;
            if usable {
                let prev_cost = eval.cost;
                a = trial;
                eval = trial_eval;
                damping /= cfg.damping_down;
                accepted = true;
                if step.norm() < cfg.step_tolerance {
                    stop = StopReason::StepTolerance;
                    break 'outer;
                }
                if (prev_cost - eval.cost) < cfg.residual_tolerance * prev_cost.max(1e-300) {
                    stop = StopReason::ResidualTolerance;
                    break 'outer;
                }
            } else {
                // Rejected: if the attempted step is already below the
                // tolerance, no meaningful move exists and the solver has
                // converged by step size.
                if step.norm() < cfg.step_tolerance {
                    stop = StopReason::StepTolerance;
                    iterations -= 1;
                    break 'outer;
                }
                damping *= cfg.damping_up;
                if damping > damping_ceiling {
                    stop = StopReason::Stalled;
                    iterations -= 1;
                    break 'outer;
                }
            }
        }
    }

    let rms = (eval.cost / eval.n_used as f64).sqrt();
    Ok(RefineResult {
        params: AffineParams::from_vector(a, t_ref),
        rms_s: rms,
        iterations,
        n_residuals: eval.n_used,
        n_out_of_window: eval.n_oow,
        stop,
    })
}
