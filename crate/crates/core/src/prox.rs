//! Proximal gradient engine shared by the block subproblems and the full-GGM
//! baseline: ISTA with backtracking on the standard sufficient-decrease
//! condition, optionally warm-started with Barzilai–Borwein steps.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::linalg::frobenius_dot;
use crate::solver::SolverConfig;

const MAX_STEP: f64 = 1e10;

/// The smooth half of a composite objective.
pub(crate) trait Smooth {
    type Point: Evaluated;

    /// Evaluates the smooth term at `x`; `Ok(None)` marks `x` infeasible.
    fn eval(&self, x: Array2<f64>) -> Result<Option<Self::Point>>;

    fn grad(&self, pt: &Self::Point) -> Array2<f64>;
}

pub(crate) trait Evaluated {
    fn x(&self) -> &Array2<f64>;
    fn value(&self) -> f64;
}

/// Non-smooth half: its value and its proximal map with parameter `step`.
pub(crate) trait Penalty {
    fn value(&self, x: &Array2<f64>) -> f64;
    fn prox(&self, x: &mut Array2<f64>, step: f64);
}

pub(crate) struct InnerOutcome<P> {
    pub point: P,
    pub iters: usize,
    /// Initial step for a later call on the same block.
    pub next_step: f64,
}

/// One backtracked proximal step from `cur` along `-grad`.
pub(crate) fn backtrack<S: Smooth, R: Penalty>(
    smooth: &S,
    penalty: &R,
    cur: &S::Point,
    grad: &Array2<f64>,
    mut step: f64,
    cfg: &SolverConfig,
) -> Result<(S::Point, f64)> {
    let f0 = cur.value();
    // Rounding allowance for the comparison; the composite objective is
    // separately checked for descent by the caller.
    let slack = 1e-14 * (1.0 + f0.abs());
    loop {
        if step < cfg.min_step {
            return Err(Error::StepUnderflow { step, min_step: cfg.min_step });
        }
        let mut cand = cur.x() - &(grad * step);
        penalty.prox(&mut cand, step);
        let (lin, sq) = {
            let mut lin = 0.0;
            let mut sq = 0.0;
            Zip::from(&cand).and(cur.x()).and(grad).for_each(|&c, &x, &g| {
                let d = c - x;
                lin += g * d;
                sq += d * d;
            });
            (lin, sq)
        };
        if let Some(pt) = smooth.eval(cand)? {
            let bound = f0 + lin + sq / (2.0 * step);
            if pt.value().is_finite() && pt.value() <= bound + slack {
                return Ok((pt, step));
            }
        }
        step *= cfg.ls_shrink;
    }
}

/// Runs proximal gradient iterations from `start` until the relative change
/// of the composite objective drops to `tol` or `max_iter` steps are taken.
/// The composite objective never increases.
#[allow(clippy::too_many_arguments)]
pub(crate) fn minimize<S: Smooth, R: Penalty>(
    smooth: &S,
    penalty: &R,
    start: S::Point,
    step: f64,
    tol: f64,
    max_iter: usize,
    cfg: &SolverConfig,
    mut on_iter: impl FnMut(f64),
) -> Result<InnerOutcome<S::Point>> {
    let mut cur = start;
    let mut grad = smooth.grad(&cur);
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let mut obj = cur.value() + penalty.value(cur.x());
    let mut step = step.clamp(cfg.min_step, MAX_STEP);
    let mut iters = 0;
    while iters < max_iter {
        let (next, used) = backtrack(smooth, penalty, &cur, &grad, step, cfg)?;
        let next_obj = next.value() + penalty.value(next.x());
        if !next_obj.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        iters += 1;
        if next_obj > obj {
            // Only reachable through the rounding slack: we are at the
            // attainable precision already.
            step = used;
            break;
        }
        let next_grad = smooth.grad(&next);
        if next_grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        step = if cfg.barzilai_borwein {
            let s = next.x() - cur.x();
            let y = &next_grad - &grad;
            let sy = frobenius_dot(s.view(), y.view());
            let ss = frobenius_dot(s.view(), s.view());
            if sy > 0.0 && ss > 0.0 {
                (ss / sy).clamp(cfg.min_step, MAX_STEP)
            } else {
                used * cfg.ls_grow
            }
        } else {
            (used * cfg.ls_grow).min(MAX_STEP)
        };
        let rel = (obj - next_obj) / obj.abs().max(1.0);
        let stalled = next.x() == cur.x();
        cur = next;
        grad = next_grad;
        obj = next_obj;
        on_iter(obj);
        if rel <= tol || stalled {
            break;
        }
    }
    Ok(InnerOutcome { point: cur, iters, next_step: step })
}
