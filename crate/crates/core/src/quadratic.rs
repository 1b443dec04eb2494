//! Exact convergence rates of decentralized SGD on an isotropic random
//! quadratic.
//!
//! The test function is `f(x) = E_d (dᵀx)²/2` with `d ~ N(0, I_d)`, whose
//! stochastic gradient `g(x) = d dᵀ x` has relative noise `ζ = d + 2`:
//! `E‖g(x)‖² = ζ‖x‖²`. Because the problem is isotropic with optimum 0, the
//! expected squared distance contracts by an exact per-step factor, the
//! *convergence rate* `r` with `E‖x^{t+1}‖² = (1 − r)·E‖x^t‖²`:
//!
//! - a single worker: `r_alone = 1 − (1−η)² − (ζ−1)η²`, maximized at η = 1/ζ;
//! - n all-reduce workers: `r_centralized = 1 − (1−η)² − (ζ−1)η²/n`,
//!   maximized at η = n/(n+ζ−1);
//! - n gossip workers: the noise is divided by the *effective number of
//!   neighbors* at the decay the optimizer itself induces, giving the fixed
//!   point
//!
//!   ```text
//!     r = 1 − (1−η)² − (ζ−1)η² / n_W(γ*),     γ* = (1−η)²/(1−r).
//!   ```
//!
//! [`rate_decentralized`] solves that fixed point. [`transition_rate_oracle`]
//! verifies it from first principles: the worker-pair second moments
//! `E[x_i x_jᵀ]` evolve linearly under one exact n²×n² transition operator,
//! whose spectral radius is computed by shifted power iteration — no
//! effective-neighbors theory involved. [`simulate_dsgd`] checks both against
//! actual runs.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{pairwise_sum, Matrix};
use crate::neighbors::{effective_neighbors_value, Decay};
use crate::rng::stream_rng;
use crate::topology::{Spectrum, TopologySchedule};

/// Residual the fixed-point solver drives to (tighter than the documented
/// 1e−10 guarantee so that exact-collapse identities hold to 1e−12).
const FIXED_POINT_TOL: f64 = 1e-13;
/// Residual above which the solver refuses to return a value.
const FIXED_POINT_ACCEPT: f64 = 1e-10;
/// Iteration budget across both solver phases.
const FIXED_POINT_MAX_ITER: usize = 100_000;

/// An isotropic random quadratic minimized by decentralized SGD.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    dimension: usize,
    eta: f64,
    schedule: TopologySchedule,
    label: String,
}

impl ToyProblem {
    /// `dimension ≥ 1`, `eta > 0`; `label` is carried into traces (usually
    /// the topology spec string).
    pub fn new(
        dimension: usize,
        eta: f64,
        schedule: TopologySchedule,
        label: impl Into<String>,
    ) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::InvalidParameter("problem dimension must be at least 1".into()));
        }
        if !eta.is_finite() || eta <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                eta
            )));
        }
        Ok(ToyProblem { dimension, eta, schedule, label: label.into() })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Relative gradient-noise parameter: `E‖g‖² = ζ‖x‖²` with `ζ = d + 2`.
    pub fn zeta(&self) -> f64 {
        self.dimension as f64 + 2.0
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn n(&self) -> usize {
        self.schedule.n()
    }

    pub fn schedule(&self) -> &TopologySchedule {
        &self.schedule
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

/// Per-step contraction rate of one worker alone:
/// `1 − (1−η)² − (ζ−1)η²`. Negative means divergence.
pub fn rate_alone(eta: f64, zeta: f64) -> f64 {
    1.0 - (1.0 - eta) * (1.0 - eta) - (zeta - 1.0) * eta * eta
}

/// Rate of n workers averaging through an all-reduce every step:
/// `1 − (1−η)² − (ζ−1)η²/n`.
pub fn rate_centralized(eta: f64, zeta: f64, n: f64) -> f64 {
    1.0 - (1.0 - eta) * (1.0 - eta) - (zeta - 1.0) * eta * eta / n
}

/// Learning rate maximizing [`rate_alone`]: `1/ζ` (optimal rate `1/ζ`).
pub fn optimal_eta_alone(zeta: f64) -> f64 {
    1.0 / zeta
}

/// Learning rate maximizing [`rate_centralized`]: `n/(n+ζ−1)` (optimal rate
/// equal to that same value).
pub fn optimal_eta_centralized(zeta: f64, n: f64) -> f64 {
    n / (n + zeta - 1.0)
}

/// Solution of the decentralized rate fixed point.
#[derive(Clone, Copy, Debug)]
pub struct RateSolution {
    /// Per-step contraction rate r (non-positive means divergence).
    pub rate: f64,
    /// The decay the optimizer induces at the solution: `(1−η)²/(1−r)`.
    pub gamma_star: f64,
    /// `n_W(γ*)`, the effective neighbors actually enjoyed at the solution.
    pub effective_neighbors: f64,
    /// True iff the solved rate is ≤ 0.
    pub diverged: bool,
    /// Fixed-point residual at the returned rate (≤ 1e−10 guaranteed).
    pub residual: f64,
}

/// Solve `r = 1 − (1−η)² − (ζ−1)η²/n_W((1−η)²/(1−r))` for gossip SGD.
///
/// The right-hand side is squeezed between `rate_alone` (n_W = 1) and
/// `rate_centralized` (n_W = n), so a root is bracketed there; damped
/// fixed-point iteration from the centralized rate does the fast work and
/// bisection guarantees the rest. A non-converged solve (residual above
/// 1e−10 after the iteration budget) is an error, distinct from a healthy
/// solution whose rate happens to be ≤ 0 (`diverged`).
pub fn rate_decentralized(spectrum: &Spectrum, eta: f64, zeta: f64) -> Result<RateSolution> {
    if !eta.is_finite() || eta <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be positive, got {}",
            eta
        )));
    }
    if !zeta.is_finite() || zeta < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "gradient-noise parameter ζ must be ≥ 1, got {}",
            zeta
        )));
    }
    let n = spectrum.n() as f64;
    let keep = (1.0 - eta) * (1.0 - eta);
    let noise = (zeta - 1.0) * eta * eta;
    let r_max = 1.0 - keep;

    if noise == 0.0 {
        // Noise-free: every worker contracts deterministically; averaging
        // changes nothing. γ* = (1−η)²/(1−r) = 1 unless η = 1 erases memory.
        let rate = r_max;
        let gamma_star = if keep == 0.0 { 0.0 } else { 1.0 };
        let effective_neighbors =
            effective_neighbors_value(spectrum, Decay::new(gamma_star)?)?;
        return Ok(RateSolution {
            rate,
            gamma_star,
            effective_neighbors,
            diverged: rate <= 0.0,
            residual: 0.0,
        });
    }

    // γ(r) < 1 strictly for r < r_max; next_down guards the rounding edge.
    let gamma_at = |r: f64| (keep / (1.0 - r)).min(1.0_f64.next_down());
    let evaluations = std::cell::Cell::new(0usize);
    let phi = |r: f64| -> Result<f64> {
        evaluations.set(evaluations.get() + 1);
        let nw = effective_neighbors_value(spectrum, Decay::new(gamma_at(r))?)?;
        Ok(r_max - noise / nw - r)
    };

    let lo = rate_alone(eta, zeta); // RHS ≥ lo ⇒ φ(lo) ≥ 0
    let hi = rate_centralized(eta, zeta, n); // RHS ≤ hi ⇒ φ(hi) ≤ 0
    let mut best_rate = hi;
    let mut best_residual = f64::INFINITY;

    // Phase 1: damped fixed-point iteration r ← r + φ(r)/2.
    let mut r = hi;
    let mut previous = f64::INFINITY;
    for _ in 0..2_000 {
        let residual = phi(r)?;
        if residual.abs() < best_residual {
            best_residual = residual.abs();
            best_rate = r;
        }
        if best_residual <= FIXED_POINT_TOL {
            break;
        }
        // Bail to bisection when contraction stalls.
        if residual.abs() >= 0.9 * previous && previous < f64::INFINITY {
            break;
        }
        previous = residual.abs();
        r += 0.5 * residual;
    }

    // Phase 2: bisection on the guaranteed bracket.
    if best_residual > FIXED_POINT_TOL {
        let (mut lo, mut hi) = (lo, hi);
        while evaluations.get() < FIXED_POINT_MAX_ITER {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break; // interval exhausted at f64 resolution
            }
            let residual = phi(mid)?;
            if residual.abs() < best_residual {
                best_residual = residual.abs();
                best_rate = mid;
            }
            if best_residual <= FIXED_POINT_TOL {
                break;
            }
            if residual > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }

    if best_residual > FIXED_POINT_ACCEPT {
        return Err(Error::Numerical(format!(
            "rate fixed point did not converge: residual {:.3e} after {} evaluations",
            best_residual,
            evaluations.get()
        )));
    }
    let rate = best_rate;
    let gamma_star = gamma_at(rate);
    let effective_neighbors = effective_neighbors_value(spectrum, Decay::new(gamma_star)?)?;
    Ok(RateSolution {
        rate,
        gamma_star,
        effective_neighbors,
        diverged: rate <= 0.0,
        residual: best_residual,
    })
}

/// First-principles rate oracle: `1 − ρ(T)` where T is the exact linear
/// operator advancing the worker-pair second moments `E_{ij} = E[x_iᵀx_j]/d`:
///
/// ```text
///   T(E) = W (D ∘ E) W,    D_ij = (1−η)² + (ζ−1)η²·[i = j].
/// ```
///
/// T = (W⊗W)·diag(D) is similar to the symmetric S = √D ∘ (W (√D ∘ E) W)
/// (entrywise √D), and T is nonnegative, so ρ(T) = λ_max(S). The power
/// iteration runs on S shifted by `c = max D` (making the operator PSD) and
/// certifies `|λ̂ − λ_max| ≤ ‖residual‖` by the symmetric residual bound.
///
/// Exponential cost in nothing, but n² state: capped at n ≤ 64.
pub fn transition_rate_oracle(w: &crate::topology::GossipMatrix, eta: f64, zeta: f64) -> Result<f64> {
    let n = w.n();
    if n > 64 {
        return Err(Error::InvalidParameter(format!(
            "transition oracle tracks n² pair moments; n = {} exceeds the n ≤ 64 cap",
            n
        )));
    }
    if !eta.is_finite() || eta <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be positive, got {}",
            eta
        )));
    }
    if !zeta.is_finite() || zeta < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "gradient-noise parameter ζ must be ≥ 1, got {}",
            zeta
        )));
    }
    let keep = (1.0 - eta) * (1.0 - eta);
    let boost = (zeta - 1.0) * eta * eta;
    let mut sqrt_d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sqrt_d.set(i, j, if i == j { (keep + boost).sqrt() } else { keep.sqrt() });
        }
    }
    let shift = keep + boost; // row sums of T are ≤ max D, so ρ(S) ≤ shift
    let weights = w.weights();
    let apply_s = |e: &Matrix| -> Matrix {
        let mut f = e.clone();
        for (v, s) in f.as_mut_slice().iter_mut().zip(sqrt_d.as_slice()) {
            *v *= s;
        }
        let mut g = weights.mul(&f).mul(weights);
        for (v, s) in g.as_mut_slice().iter_mut().zip(sqrt_d.as_slice()) {
            *v *= s;
        }
        g
    };

    // Positive start overlaps the Perron eigenvector of the nonnegative S.
    let mut e = Matrix::zeros(n, n);
    let fill = 1.0 / n as f64;
    for v in e.as_mut_slice() {
        *v = fill;
    }
    let norm = e.frobenius_norm();
    for v in e.as_mut_slice() {
        *v /= norm;
    }

    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    const TARGET: f64 = 1e-12;
    const ACCEPT: f64 = 1e-9;
    const MAX_ITER: usize = 2_000_000;
    for _ in 0..MAX_ITER {
        let mut be = apply_s(&e);
        for (b, x) in be.as_mut_slice().iter_mut().zip(e.as_slice()) {
            *b += shift * x;
        }
        lambda = be
            .as_slice()
            .iter()
            .zip(e.as_slice())
            .map(|(b, x)| b * x)
            .sum::<f64>();
        residual = be
            .as_slice()
            .iter()
            .zip(e.as_slice())
            .map(|(b, x)| {
                let r = b - lambda * x;
                r * r
            })
            .sum::<f64>()
            .sqrt();
        if residual <= TARGET {
            break;
        }
        let norm = be.frobenius_norm();
        if norm == 0.0 {
            // S ≡ 0 (e.g. η = 1, ζ = 1): spectral radius is exactly 0.
            return Ok(1.0);
        }
        for v in be.as_mut_slice() {
            *v /= norm;
        }
        e = be;
    }
    if residual > ACCEPT {
        return Err(Error::Numerical(format!(
            "power iteration stalled: residual {:.3e} exceeds {:.0e}",
            residual, ACCEPT
        )));
    }
    let rho = lambda - shift;
    Ok(1.0 - rho)
}

/// Learning rate maximizing the decentralized rate, by golden-section search
/// on [1e−6, 2] refined to |Δη| ≤ 1e−8. Returns `(η*, r*)`.
pub fn optimal_lr(spectrum: &Spectrum, zeta: f64) -> Result<(f64, f64)> {
    let objective =
        |eta: f64| rate_decentralized(spectrum, eta, zeta).map(|solution| -solution.rate);
    let (eta, negated) = crate::optim::golden_min(objective, 1e-6, 2.0, 1e-8)?;
    let rate = -negated;
    if rate <= 0.0 {
        return Err(Error::Numerical(
            "every learning rate in [1e-6, 2] diverges on this problem".into(),
        ));
    }
    Ok((eta, rate))
}

/// Aggregate error trace of a decentralized SGD run.
#[derive(Clone, Debug)]
pub struct SimTrace {
    /// `values[t]` = mean over repetitions of `Σ_i ‖x_i^t‖²`;
    /// `values[0] = n` exactly (workers share one unit-norm start).
    pub values: Vec<f64>,
    pub steps: usize,
    pub reps: usize,
    pub eta: f64,
    pub seed: u64,
    /// Topology label the problem carried (for metadata/CSV only).
    pub topology: String,
}

impl SimTrace {
    /// Two-column CSV: `step,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,value\n");
        for (t, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{}\n", t, v));
        }
        out
    }
}

/// Simulate decentralized SGD on the isotropic quadratic.
///
/// Per repetition: one shared unit-norm start `x⁰` for all workers, then
/// `steps` rounds of gradient-then-gossip,
/// `x_i ← Σ_j w_ij (x_j − η (d_jᵀx_j) d_j)` with fresh `d_j ~ N(0, I_d)` per
/// worker per step. Reps are averaged in fixed order (pairwise summation), so
/// a seed fully determines every output bit at any thread count.
pub fn simulate_dsgd(
    problem: &ToyProblem,
    steps: usize,
    reps: usize,
    seed: u64,
) -> Result<SimTrace> {
    if reps == 0 {
        return Err(Error::InvalidParameter("simulation needs at least 1 repetition".into()));
    }
    let n = problem.n();
    let d = problem.dimension();
    let eta = problem.eta();
    let schedule = problem.schedule();

    let per_rep: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(seed, rep as u64);
            // Shared unit-norm start.
            let mut start = vec![0.0f64; d];
            loop {
                for v in start.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let norm = start.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for v in start.iter_mut() {
                        *v /= norm;
                    }
                    break;
                }
            }
            let norm_sq: f64 = start.iter().map(|v| v * v).sum();
            let mut x = Matrix::zeros(n, d);
            for i in 0..n {
                x.row_mut(i).copy_from_slice(&start);
            }
            let mut trace = Vec::with_capacity(steps + 1);
            trace.push(n as f64 * norm_sq);

            let mut gradient_step = Matrix::zeros(n, d);
            let mut direction = vec![0.0f64; d];
            for t in 0..steps {
                for i in 0..n {
                    for v in direction.iter_mut() {
                        *v = rng.sample(StandardNormal);
                    }
                    let xi = x.row(i);
                    let activation: f64 =
                        direction.iter().zip(xi).map(|(a, b)| a * b).sum();
                    let out = gradient_step.row_mut(i);
                    for (o, (&xv, &dv)) in out.iter_mut().zip(xi.iter().zip(&direction)) {
                        *o = xv - eta * activation * dv;
                    }
                }
                x = schedule.matrix_at(t).weights().mul(&gradient_step);
                trace.push(x.as_slice().iter().map(|v| v * v).sum());
            }
            trace
        })
        .collect();

    let mut values = Vec::with_capacity(steps + 1);
    let mut column = vec![0.0f64; reps];
    for t in 0..=steps {
        for (r, trace) in per_rep.iter().enumerate() {
            column[r] = trace[t];
        }
        values.push(pairwise_sum(&column) / reps as f64);
    }
    Ok(SimTrace {
        values,
        steps,
        reps,
        eta,
        seed,
        topology: problem.label().to_string(),
    })
}

/// Default fit window: the last 60% of steps, `(max(1, steps − ⌊0.6·steps⌋),
/// steps)`.
pub fn default_fit_window(steps: usize) -> (usize, usize) {
    let t0 = steps.saturating_sub(steps * 6 / 10).max(1);
    (t0, steps)
}

/// Least-squares slope of `ln values[t]` over `t ∈ [t0, t1]`, reported as an
/// empirical rate `1 − exp(slope)`.
///
/// Requires `1 ≤ t0 < t1 ≤ len−1` and positive values on the window (a
/// diverged-to-zero or negative trace has no geometric rate to fit).
pub fn fit_empirical_rate(values: &[f64], window: Option<(usize, usize)>) -> Result<f64> {
    if values.len() < 3 {
        return Err(Error::InvalidParameter("need at least 3 trace points to fit a rate".into()));
    }
    let (t0, t1) = window.unwrap_or_else(|| default_fit_window(values.len() - 1));
    if t0 < 1 || t1 <= t0 || t1 > values.len() - 1 {
        return Err(Error::InvalidParameter(format!(
            "fit window [{}, {}] must satisfy 1 ≤ t0 < t1 ≤ {}",
            t0,
            t1,
            values.len() - 1
        )));
    }
    let window_values = &values[t0..=t1];
    if window_values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter(
            "fit window contains non-positive values; no geometric rate exists there".into(),
        ));
    }
    let count = window_values.len() as f64;
    let mean_t = (t0 + t1) as f64 / 2.0;
    let mean_log = window_values.iter().map(|v| v.ln()).sum::<f64>() / count;
    let mut covariance = 0.0;
    let mut variance = 0.0;
    for (offset, &v) in window_values.iter().enumerate() {
        let dt = (t0 + offset) as f64 - mean_t;
        covariance += dt * (v.ln() - mean_log);
        variance += dt * dt;
    }
    let slope = covariance / variance;
    Ok(1.0 - slope.exp())
}

/// Predicted steps and rate for one learning rate in [`time_to_target`].
#[derive(Clone, Copy, Debug)]
pub struct TimeToTarget {
    pub eta: f64,
    pub rate: f64,
    /// Steps to shrink the error by `target_ratio`; `None` when diverged.
    pub steps: Option<u64>,
    pub diverged: bool,
}

/// Predicted number of steps for the expected error to fall to
/// `target_ratio` of its initial value, per learning rate:
/// `⌈ln(target)/ln(1−r)⌉`, infinite (`None`) when diverged.
pub fn time_to_target(
    spectrum: &Spectrum,
    zeta: f64,
    target_ratio: f64,
    etas: &[f64],
) -> Result<Vec<TimeToTarget>> {
    if !(target_ratio > 0.0 && target_ratio <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target ratio must lie in (0, 1], got {}",
            target_ratio
        )));
    }
    etas.iter()
        .map(|&eta| {
            let solution = rate_decentralized(spectrum, eta, zeta)?;
            let steps = if solution.diverged {
                None
            } else if target_ratio == 1.0 {
                Some(0)
            } else if solution.rate >= 1.0 {
                Some(1) // error is annihilated in a single step
            } else {
                Some((target_ratio.ln() / (1.0 - solution.rate).ln()).ceil() as u64)
            };
            Ok(TimeToTarget { eta, rate: solution.rate, steps, diverged: solution.diverged })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_topology, parse_schedule};

    fn spectrum_of(spec: &str) -> Spectrum {
        build_topology(spec).unwrap().spectrum().unwrap()
    }

    fn assert_close(got: f64, want: f64, tol: f64) {
        assert!((got - want).abs() <= tol, "got {}, want {} (tol {})", got, want, tol);
    }

    #[test]
    fn closed_form_rates_at_their_optima() {
        // rate_alone(1/ζ) = 1/ζ and rate_centralized(n/(n+ζ−1)) = n/(n+ζ−1),
        // by direct algebra.
        for zeta in [3.0, 22.0, 102.0] {
            let eta = optimal_eta_alone(zeta);
            assert_close(rate_alone(eta, zeta), 1.0 / zeta, 1e-15);
            // Rate is zero exactly at η = 2/ζ and at η = 0.
            assert_close(rate_alone(2.0 / zeta, zeta), 0.0, 1e-15);
            assert_close(rate_alone(0.0, zeta), 0.0, 0.0);
            for n in [4.0, 32.0] {
                let eta = optimal_eta_centralized(zeta, n);
                assert_close(rate_centralized(eta, zeta, n), eta, 1e-15);
            }
        }
    }

    #[test]
    fn decentralized_collapses_to_alone_on_disconnected() {
        let s = spectrum_of("disconnected:8");
        for k in 1..=20 {
            let eta = 0.02 * k as f64;
            let solution = rate_decentralized(&s, eta, 22.0).unwrap();
            assert_close(solution.rate, rate_alone(eta, 22.0), 1e-12);
        }
    }

    #[test]
    fn decentralized_collapses_to_centralized_on_full_graph() {
        let s = spectrum_of("fully_connected:8");
        for k in 1..=20 {
            let eta = 0.02 * k as f64;
            let solution = rate_decentralized(&s, eta, 22.0).unwrap();
            assert_close(solution.rate, rate_centralized(eta, 22.0, 8.0), 1e-12);
        }
    }

    #[test]
    fn fixed_point_matches_frozen_oracle_values() {
        // Frozen from an independent dense Kronecker-eigenvalue computation.
        let ring4 = spectrum_of("ring:4");
        let solution = rate_decentralized(&ring4, 0.15, 6.0).unwrap();
        assert_close(solution.rate, 0.24897632525303282, 1e-9);
        assert!(!solution.diverged);

        let ring8 = spectrum_of("ring:8");
        let solution = rate_decentralized(&ring8, 0.1, 20.0).unwrap();
        assert_close(solution.rate, 0.16330693467681345, 1e-9);
    }

    #[test]
    fn solution_is_internally_consistent() {
        let s = spectrum_of("torus:3x3");
        let solution = rate_decentralized(&s, 0.12, 12.0).unwrap();
        assert!(solution.residual <= 1e-10);
        assert_close(
            solution.gamma_star,
            (1.0 - 0.12) * (1.0 - 0.12) / (1.0 - solution.rate),
            1e-12,
        );
        let nw =
            effective_neighbors_value(&s, Decay::new(solution.gamma_star).unwrap()).unwrap();
        assert_close(solution.effective_neighbors, nw, 1e-12);
        // The rate equation itself holds at the returned point.
        let rhs = 1.0 - solution.gamma_star * (1.0 - solution.rate) - 11.0 * 0.12 * 0.12 / nw;
        assert_close(solution.rate, rhs, 1e-10);
    }

    #[test]
    fn oracle_agrees_with_fixed_point() {
        let w = build_topology("ring:4").unwrap();
        let oracle = transition_rate_oracle(&w, 0.15, 6.0).unwrap();
        assert_close(oracle, 0.24897632525303282, 1e-9);

        let w8 = build_topology("ring:8").unwrap();
        let oracle8 = transition_rate_oracle(&w8, 0.1, 20.0).unwrap();
        assert_close(oracle8, 0.16330693467681345, 1e-9);

        // Uniform averaging: the oracle must reproduce the centralized rate.
        let full = build_topology("fully_connected:4").unwrap();
        let oracle_full = transition_rate_oracle(&full, 0.2, 10.0).unwrap();
        assert_close(oracle_full, rate_centralized(0.2, 10.0, 4.0), 1e-9);
        assert_close(oracle_full, 0.27, 1e-9);

        // Identity: the oracle must reproduce the single-worker rate.
        let lonely = build_topology("disconnected:4").unwrap();
        let oracle_lonely = transition_rate_oracle(&lonely, 0.1, 6.0).unwrap();
        assert_close(oracle_lonely, rate_alone(0.1, 6.0), 1e-9);
    }

    #[test]
    fn divergence_verdicts_agree() {
        for (spec, eta, zeta) in [
            ("ring:4", 0.3, 22.0),
            ("ring:4", 0.6, 22.0),
            ("star:5", 0.4, 30.0),
            ("chain:4", 1.9, 6.0),
        ] {
            let w = build_topology(spec).unwrap();
            let s = w.spectrum().unwrap();
            let solution = rate_decentralized(&s, eta, zeta).unwrap();
            let oracle = transition_rate_oracle(&w, eta, zeta).unwrap();
            assert_eq!(
                solution.diverged,
                oracle <= 0.0,
                "{} at η={}, ζ={}: fixed point {} vs oracle {}",
                spec,
                eta,
                zeta,
                solution.rate,
                oracle
            );
        }
    }

    #[test]
    fn optimal_lr_recovers_closed_forms() {
        let zeta = 22.0;
        let (eta, rate) = optimal_lr(&spectrum_of("disconnected:4"), zeta).unwrap();
        assert_close(eta, optimal_eta_alone(zeta), 1e-6);
        assert_close(rate, 1.0 / zeta, 1e-9);

        let (eta, rate) = optimal_lr(&spectrum_of("fully_connected:4"), zeta).unwrap();
        assert_close(eta, optimal_eta_centralized(zeta, 4.0), 1e-6);
        assert_close(rate, 4.0 / 25.0, 1e-9);
    }

    #[test]
    fn simulation_starts_at_n_and_is_deterministic() {
        let schedule = parse_schedule("ring:4").unwrap();
        let problem = ToyProblem::new(5, 0.05, schedule, "ring:4").unwrap();
        let a = simulate_dsgd(&problem, 20, 8, 99).unwrap();
        assert_eq!(a.values[0], 4.0, "workers share a unit start: Σ‖x⁰‖² = n exactly");
        assert_eq!(a.values.len(), 21);
        let b = simulate_dsgd(&problem, 20, 8, 99).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(x.to_bits(), y.to_bits(), "same seed must be bit-identical");
        }
        let c = simulate_dsgd(&problem, 20, 8, 100).unwrap();
        assert!(a.values[20] != c.values[20], "different seeds must differ");
    }

    #[test]
    fn single_worker_simulation_matches_known_rate_on_early_window() {
        // d = 1, η = 1/3 ⇒ ζ = 3 and the exact per-step factor
        // E(1 − ηg²)² = 2/3, i.e. rate 1/3 = rate_alone(1/3, 3).
        //
        // The *empirical mean* of (2/3)^t is only trackable while the
        // relative variance (E f²/(E f)²)^t = 1.6667^t stays ≪ reps, so fit
        // on the early window [2, 15] where 200k reps suffice; by step ~50
        // no feasible rep count would track the mean.
        let schedule = parse_schedule("disconnected:1").unwrap();
        let problem = ToyProblem::new(1, 1.0 / 3.0, schedule, "disconnected:1").unwrap();
        let trace = simulate_dsgd(&problem, 15, 200_000, 2024).unwrap();
        let fitted = fit_empirical_rate(&trace.values, Some((2, 15))).unwrap();
        let fitted_slope = (1.0 - fitted).ln();
        let expected_slope = (2.0f64 / 3.0).ln();
        assert!(
            (fitted_slope - expected_slope).abs() <= 0.1 * expected_slope.abs(),
            "fitted slope {} vs expected {}",
            fitted_slope,
            expected_slope
        );
    }

    #[test]
    fn rate_fit_recovers_exact_geometric_decay() {
        let values: Vec<f64> = (0..=100).map(|t| 4.0 * 0.9f64.powi(t)).collect();
        let rate = fit_empirical_rate(&values, None).unwrap();
        assert_close(rate, 0.1, 1e-12);
        let rate = fit_empirical_rate(&values, Some((1, 100))).unwrap();
        assert_close(rate, 0.1, 1e-12);
    }

    #[test]
    fn rate_fit_rejects_bad_windows() {
        let values = vec![4.0, 3.0, 2.0, 1.0];
        assert!(fit_empirical_rate(&values, Some((0, 3))).is_err(), "t0 ≥ 1");
        assert!(fit_empirical_rate(&values, Some((2, 2))).is_err(), "t1 > t0");
        assert!(fit_empirical_rate(&values, Some((1, 4))).is_err(), "t1 ≤ len−1");
        let with_zero = vec![4.0, 2.0, 0.0, 1.0];
        assert!(fit_empirical_rate(&with_zero, Some((1, 3))).is_err());
        assert!(fit_empirical_rate(&[1.0, 0.5], None).is_err(), "too short");
    }

    #[test]
    fn default_window_is_last_sixty_percent() {
        assert_eq!(default_fit_window(2000), (800, 2000));
        assert_eq!(default_fit_window(10), (4, 10));
        assert_eq!(default_fit_window(2), (1, 2));
    }

    #[test]
    fn time_to_target_arithmetic() {
        let s = spectrum_of("fully_connected:4");
        // Centralized Σ with ζ = 5, n = 4: pick η so the rate is easy. At
        // η = 0.5: r = 1 − 0.25 − 4·0.25/4 = 0.5.
        let rows = time_to_target(&s, 5.0, 0.25, &[0.5]).unwrap();
        assert_close(rows[0].rate, 0.5, 1e-12);
        assert_eq!(rows[0].steps, Some(2));
        let rows = time_to_target(&s, 5.0, 0.2, &[0.5]).unwrap();
        assert_eq!(rows[0].steps, Some(3), "⌈ln 0.2 / ln 0.5⌉ = ⌈2.32⌉");
        let rows = time_to_target(&s, 5.0, 1.0, &[0.5]).unwrap();
        assert_eq!(rows[0].steps, Some(0));
        // Divergent learning rate → no finite time.
        let rows = time_to_target(&s, 500.0, 0.5, &[1.9]).unwrap();
        assert!(rows[0].diverged);
        assert_eq!(rows[0].steps, None);
        assert!(time_to_target(&s, 5.0, 0.0, &[0.5]).is_err());
        assert!(time_to_target(&s, 5.0, 1.5, &[0.5]).is_err());
    }

    #[test]
    fn toy_problem_validation() {
        let schedule = parse_schedule("ring:4").unwrap();
        assert!(ToyProblem::new(0, 0.1, schedule.clone(), "x").is_err());
        assert!(ToyProblem::new(3, 0.0, schedule.clone(), "x").is_err());
        assert!(ToyProblem::new(3, -0.5, schedule.clone(), "x").is_err());
        let problem = ToyProblem::new(3, 0.1, schedule, "ring:4").unwrap();
        assert_eq!(problem.zeta(), 5.0);
        assert_eq!(problem.n(), 4);
    }

    #[test]
    fn rate_solver_rejects_bad_parameters() {
        let s = spectrum_of("ring:4");
        assert!(rate_decentralized(&s, 0.0, 6.0).is_err());
        assert!(rate_decentralized(&s, -0.1, 6.0).is_err());
        assert!(rate_decentralized(&s, 0.1, 0.5).is_err());
        assert!(transition_rate_oracle(&build_topology("ring:4").unwrap(), 0.0, 6.0).is_err());
    }
}
