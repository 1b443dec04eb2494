//! One-dimensional golden-section minimization.
//!
//! Shared by learning-rate optimization (maximizing a rate = minimizing its
//! negation) and decay-parameter fitting. The objective may fail, so the
//! search propagates `Result` from every evaluation.

use crate::error::Result;

const INV_PHI: f64 = 0.618_033_988_749_894_9; // (√5 − 1) / 2

/// Minimize a unimodal function on `[lo, hi]` to interval width ≤ `tol`.
///
/// Returns `(argmin, min)`. The final answer is the best point among the two
/// interior probes and the interval midpoint, so the argmin error is at most
/// `tol` — subject to the usual floating-point caveat that once objective
/// *differences* fall below rounding noise (≈ √ε scaled by the objective's
/// magnitude over its curvature), comparisons stop carrying information.
/// Evaluation errors abort the search.
pub fn golden_min<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    debug_assert!(lo <= hi && tol > 0.0);
    let mut a = lo;
    let mut b = hi;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2)?;
        }
    }
    let mid = 0.5 * (a + b);
    let fmid = f(mid)?;
    let mut best = (mid, fmid);
    if f1 < best.1 {
        best = (x1, f1);
    }
    if f2 < best.1 {
        best = (x2, f2);
    }
    Ok(best)
}
