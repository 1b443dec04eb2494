//! Effective number of neighbors of a gossip topology.
//!
//! Consider the decayed random walk each worker runs on its own,
//!
//! ```text
//!   y^{t+1} = √γ · y^t + ξ^t,          ξ ~ N(0, I)   (no averaging)
//!   z^{t+1} = W_t (√γ · z^t + ξ^t)                    (gossip averaging)
//! ```
//!
//! Averaging shrinks the stationary per-worker variance by a factor that
//! plays the role of a worker count: the *effective number of neighbors*
//!
//! ```text
//!   n_W(γ) = [1/(1−γ)] / [(1/n) Σ_i λ_i² / (1 − λ_i² γ)],
//! ```
//!
//! with λ_i the eigenvalues of W. It interpolates from n_W(0) (one round of
//! averaging) to n as γ → 1 for connected graphs, and equals 1 for the
//! identity and n for uniform averaging at every γ. The decay γ models how
//! quickly optimization forgets old gradients, so different algorithms and
//! learning rates probe the same topology at different γ.
//!
//! This module computes n_W(γ) in closed form and by Monte-Carlo simulation
//! of the two walks above, exposes the stationary covariance
//! `C = Σ_i λ_i²/(1−γλ_i²) v_i v_iᵀ` and the local-averaging matrix
//! `M = (1−γ) W² (I − γW²)^{-1}`, the comparison constant β with
//! `I − W ⪰ β (I − M)`, and inverts γ ↦ n_W(γ) by bisection.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::stream_rng;
use crate::topology::{GossipMatrix, Spectrum, TopologySchedule};

/// Decay value substituted for exact `γ = 1` queries (see [`Decay::new`]).
pub const GAMMA_ONE_PROXY: f64 = 1.0 - 1e-6;

/// A decay parameter `0 ≤ γ < 1`.
///
/// Exact `γ = 1` queries are accepted and answered at [`GAMMA_ONE_PROXY`],
/// flagged as a limit approximation, because every formula here has a
/// removable singularity there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decay {
    value: f64,
    limit_of_one: bool,
}

impl Decay {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma == 1.0 {
            return Ok(Decay { value: GAMMA_ONE_PROXY, limit_of_one: true });
        }
        if !gamma.is_finite() || !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidParameter(format!(
                "decay parameter must satisfy 0 ≤ γ ≤ 1, got {}",
                gamma
            )));
        }
        Ok(Decay { value: gamma, limit_of_one: false })
    }

    /// The γ actually used in evaluations (never 1).
    pub fn value(self) -> f64 {
        self.value
    }

    /// True when this value stands in for an exact `γ = 1` query.
    pub fn is_limit_of_one(self) -> bool {
        self.limit_of_one
    }
}

/// How an [`EffectiveNeighbors`] value was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimationMethod {
    ClosedForm,
    MonteCarlo,
}

impl EstimationMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimationMethod::ClosedForm => "closed-form",
            EstimationMethod::MonteCarlo => "monte-carlo",
        }
    }
}

/// The effective number of neighbors n_W(γ), with provenance.
#[derive(Clone, Copy, Debug)]
pub struct EffectiveNeighbors {
    /// n_W(γ) ∈ [1, n] (up to Monte-Carlo noise for estimates).
    pub value: f64,
    /// The decay at which it was evaluated.
    pub gamma: f64,
    pub method: EstimationMethod,
    /// Standard error of the estimate (Monte-Carlo only).
    pub stderr: Option<f64>,
    /// True when the query was exactly γ = 1 (evaluated at the proxy).
    pub limit_of_one: bool,
}

/// Closed-form n_W(γ) from the spectrum of W.
pub fn effective_neighbors_closed(
    spectrum: &Spectrum,
    gamma: Decay,
) -> Result<EffectiveNeighbors> {
    let value = effective_neighbors_value(spectrum, gamma)?;
    Ok(EffectiveNeighbors {
        value,
        gamma: gamma.value(),
        method: EstimationMethod::ClosedForm,
        stderr: None,
        limit_of_one: gamma.is_limit_of_one(),
    })
}

/// Closed-form n_W(γ) as a bare number.
///
/// A symmetric doubly-stochastic matrix provably has λ₁ = 1 and |λᵢ| ≤ 1;
/// the formula enforces those algebraic facts rather than trusting float
/// dust in the computed spectrum. Near γ = 1 the leading term 1/(1−γλ₁²) is
/// so ill-conditioned that an un-enforced λ₁ off by 1e−15 would shift the
/// result by ~1e−9·n/(1−γ); with the exact leading term, 1 ≤ n_W(γ) ≤ n
/// holds to rounding for every γ < 1.
pub fn effective_neighbors_value(spectrum: &Spectrum, gamma: Decay) -> Result<f64> {
    let g = gamma.value();
    let n = spectrum.n() as f64;
    let leading = 1.0 / (1.0 - g);
    let tail: f64 = spectrum
        .values()
        .iter()
        .skip(1)
        .map(|&l| {
            let l2 = (l * l).min(1.0);
            l2 / (1.0 - l2 * g)
        })
        .sum();
    let mean_term = (leading + tail) / n;
    let value = leading / mean_term;
    if !(1.0 - 1e-9..=n + 1e-9).contains(&value) {
        return Err(Error::Numerical(format!(
            "effective neighbors {} escapes [1, {}] — inconsistent spectrum",
            value, n
        )));
    }
    Ok(value)
}

/// Steps needed for the walks' transient from a zero start to decay below
/// 1e−6: `ceil(log 1e−6 / log γ)`, clamped to [100, 10⁶].
pub fn burn_in_steps(gamma: Decay) -> usize {
    let g = gamma.value();
    if g == 0.0 {
        return 100;
    }
    let raw = (1e-6_f64.ln() / g.ln()).ceil();
    raw.clamp(100.0, 1e6) as usize
}

/// Monte-Carlo n_W(γ): simulates the averaged walk z and its no-averaging
/// counterpart y on *identical* noise draws for `steps` steps, and returns
/// the ratio of mean per-worker variances at the final step, averaged over
/// repetitions, with a delta-method standard error.
///
/// Time-varying schedules are supported — this is the only n_W estimator
/// that is defined for them.
pub fn effective_neighbors_montecarlo(
    schedule: &TopologySchedule,
    gamma: Decay,
    steps: usize,
    reps: usize,
    seed: u64,
) -> Result<EffectiveNeighbors> {
    if reps < 2 {
        return Err(Error::InvalidParameter(
            "Monte-Carlo estimation needs at least 2 repetitions".into(),
        ));
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("Monte-Carlo estimation needs at least 1 step".into()));
    }
    let (z, y) = decayed_walk_finals(schedule, gamma, steps, reps, seed);
    let n = schedule.n() as f64;
    // Per-repetition mean-square per worker.
    let per_rep: Vec<(f64, f64)> = (0..reps)
        .map(|r| {
            let h = y.row(r).iter().map(|v| v * v).sum::<f64>() / n;
            let g = z.row(r).iter().map(|v| v * v).sum::<f64>() / n;
            (h, g)
        })
        .collect();
    let r = reps as f64;
    let mean_h = per_rep.iter().map(|p| p.0).sum::<f64>() / r;
    let mean_g = per_rep.iter().map(|p| p.1).sum::<f64>() / r;
    if mean_g <= 0.0 {
        return Err(Error::Numerical("degenerate Monte-Carlo sample: zero variance".into()));
    }
    let value = mean_h / mean_g;
    // Delta method for a ratio of means: Var(H/G) ≈ (s_hh/G² − 2 H s_hg/G³
    // + H² s_gg/G⁴)/R with sample (co)variances of the per-rep statistics.
    let mut s_hh = 0.0;
    let mut s_gg = 0.0;
    let mut s_hg = 0.0;
    for &(h, g) in &per_rep {
        s_hh += (h - mean_h) * (h - mean_h);
        s_gg += (g - mean_g) * (g - mean_g);
        s_hg += (h - mean_h) * (g - mean_g);
    }
    s_hh /= r - 1.0;
    s_gg /= r - 1.0;
    s_hg /= r - 1.0;
    let var = (s_hh / (mean_g * mean_g) - 2.0 * value * s_hg / (mean_g * mean_g)
        + value * value * s_gg / (mean_g * mean_g))
        / r;
    let stderr = var.max(0.0).sqrt();
    Ok(EffectiveNeighbors {
        value,
        gamma: gamma.value(),
        method: EstimationMethod::MonteCarlo,
        stderr: Some(stderr),
        limit_of_one: gamma.is_limit_of_one(),
    })
}

/// Final-step worker states of the averaged walk, one repetition per row.
///
/// This is the ensemble generator used for covariance fitting: run the walk
/// to stationarity and keep z at the last step.
pub fn random_walk_ensemble(
    schedule: &TopologySchedule,
    gamma: Decay,
    steps: usize,
    reps: usize,
    seed: u64,
) -> Result<Matrix> {
    if reps < 2 {
        return Err(Error::InvalidParameter("an ensemble needs at least 2 repetitions".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("the walk needs at least 1 step".into()));
    }
    let (z, _y) = decayed_walk_finals(schedule, gamma, steps, reps, seed);
    Ok(z)
}

/// Simulate both walks on shared noise; returns (z, y) as reps×n matrices.
///
/// Coupling the processes on identical draws leaves both marginals unchanged
/// but cancels most noise in their ratio. Each repetition owns RNG stream
/// `rep`, and rows are assembled in repetition order, so the result is
/// byte-identical for any thread count.
fn decayed_walk_finals(
    schedule: &TopologySchedule,
    gamma: Decay,
    steps: usize,
    reps: usize,
    seed: u64,
) -> (Matrix, Matrix) {
    let n = schedule.n();
    let sqrt_gamma = gamma.value().sqrt();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(seed, rep as u64);
            let mut z = vec![0.0; n];
            let mut y = vec![0.0; n];
            let mut noise = vec![0.0; n];
            let mut pre_gossip = vec![0.0; n];
            for t in 0..steps {
                for xi in noise.iter_mut() {
                    *xi = rng.sample(StandardNormal);
                }
                for i in 0..n {
                    y[i] = sqrt_gamma * y[i] + noise[i];
                    pre_gossip[i] = sqrt_gamma * z[i] + noise[i];
                }
                let weights = schedule.matrix_at(t).weights();
                for i in 0..n {
                    z[i] = dot(weights.row(i), &pre_gossip);
                }
            }
            (z, y)
        })
        .collect();
    let mut z = Matrix::zeros(reps, n);
    let mut y = Matrix::zeros(reps, n);
    for (r, (zr, yr)) in rows.into_iter().enumerate() {
        z.row_mut(r).copy_from_slice(&zr);
        y.row_mut(r).copy_from_slice(&yr);
    }
    (z, y)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stationary covariance of the averaged walk:
/// `C = Σ_i λ_i²/(1−γλ_i²) v_i v_iᵀ`.
///
/// Its trace ties back to the effective neighbors:
/// `(1−γ)·tr(C)/n = 1/n_W(γ)`.
pub fn random_walk_covariance(spectrum: &Spectrum, gamma: Decay) -> Matrix {
    let g = gamma.value();
    let coefficients: Vec<f64> = spectrum
        .values()
        .iter()
        .map(|&l| {
            // |λ| ≤ 1 holds algebraically; clamp float dust so the map stays
            // finite and positive all the way to γ → 1.
            let l2 = (l * l).min(1.0);
            l2 / (1.0 - l2 * g)
        })
        .collect();
    let v = spectrum.vectors();
    v.mul(&Matrix::from_diagonal(&coefficients)).mul(&v.transpose())
}

/// The local-averaging matrix `M = (1−γ) W² (I − γW²)^{-1}`.
///
/// M_ij is the stationary covariance of workers i and j in the averaged walk,
/// normalized so that uniform averaging gives M = ones/n and no averaging
/// gives M = I. Its diagonal is constant exactly when averaging treats all
/// workers alike; for irregular graphs the largest diagonal entry identifies
/// the worst-served worker.
#[derive(Clone, Debug)]
pub struct LocalAveragingMatrix {
    matrix: Matrix,
    gamma: f64,
}

impl LocalAveragingMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.matrix.diagonal()
    }

    pub fn max_diagonal(&self) -> f64 {
        self.diagonal().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_diagonal(&self) -> f64 {
        self.diagonal().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// True when the diagonal is constant within `tol` — i.e. every worker
    /// enjoys the same variance reduction.
    pub fn is_regular(&self, tol: f64) -> bool {
        self.max_diagonal() - self.min_diagonal() <= tol
    }
}

/// Build `M = (1−γ) W² (I − γW²)^{-1}` from the spectrum:
/// eigenvalues map as `m(λ) = (1−γ)λ²/(1−γλ²)`.
pub fn local_averaging_matrix(spectrum: &Spectrum, gamma: Decay) -> LocalAveragingMatrix {
    let g = gamma.value();
    let coefficients: Vec<f64> = spectrum
        .values()
        .iter()
        .map(|&l| {
            let l2 = (l * l).min(1.0);
            (1.0 - g) * l2 / (1.0 - l2 * g)
        })
        .collect();
    let v = spectrum.vectors();
    let matrix = v.mul(&Matrix::from_diagonal(&coefficients)).mul(&v.transpose());
    LocalAveragingMatrix { matrix, gamma: g }
}

/// The comparison constant `β = (1 − γλ₂²)/(1 + λ₂)`, the largest multiple
/// of the averaging penalty `I − M` dominated by the graph penalty `I − W`:
/// `I − W ⪰ β (I − M)`.
///
/// The positive-semidefiniteness of `(I − W) − β(I − M)` is re-verified
/// numerically; a violation beyond −1e−8 means the eigensolver contradicted
/// itself and is reported as a numerical error. Errors for a single worker
/// (λ₂ undefined) and for λ₂ = −1 (formula singular).
pub fn beta(w: &GossipMatrix, gamma: Decay) -> Result<f64> {
    let spectrum = w.spectrum()?;
    let lambda2 = spectrum.lambda2()?;
    if 1.0 + lambda2 <= 1e-12 {
        return Err(Error::Numerical(
            "β is singular for λ₂ = −1 (perfectly bipartite averaging)".into(),
        ));
    }
    let g = gamma.value();
    let value = (1.0 - g * lambda2 * lambda2) / (1.0 + lambda2);

    let m = local_averaging_matrix(&spectrum, gamma);
    let n = w.n();
    let mut difference = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let identity = if i == j { 1.0 } else { 0.0 };
            let graph_penalty = identity - w.weights().get(i, j);
            let averaging_penalty = identity - m.matrix().get(i, j);
            difference.set(i, j, graph_penalty - value * averaging_penalty);
        }
    }
    let eig = crate::eigen::sym_eigen(&difference)?;
    let min_eig = *eig.values.last().expect("n ≥ 2 here");
    if min_eig < -1e-8 {
        return Err(Error::Numerical(format!(
            "comparison inequality I − W ⪰ β(I − M) fails by {:.3e}: eigensolver inconsistency",
            -min_eig
        )));
    }
    Ok(value)
}

/// Invert γ ↦ n_W(γ) by bisection: the γ at which the effective number of
/// neighbors reaches `target`, to relative tolerance 1e−6.
///
/// Errors when the target lies outside the achievable range [n_W(0), n).
pub fn solve_gamma_for_neighbors(spectrum: &Spectrum, target: f64) -> Result<Decay> {
    let n = spectrum.n() as f64;
    if !target.is_finite() || target < 1.0 || target >= n {
        return Err(Error::InvalidParameter(format!(
            "target effective neighbors {} must lie in [1, n) with n = {}",
            target, n
        )));
    }
    let tol = 1e-6 * target;
    let nw = |g: f64| effective_neighbors_value(spectrum, Decay::new(g).expect("in range"));

    let at_zero = nw(0.0)?;
    if (at_zero - target).abs() <= tol {
        return Decay::new(0.0);
    }
    if target < at_zero {
        return Err(Error::InvalidParameter(format!(
            "target {} is below n_W(0) = {:.6}, the least averaging this topology can do",
            target, at_zero
        )));
    }
    let mut lo = 0.0;
    let mut hi = 1.0 - 1e-15;
    let at_hi = nw(hi)?;
    if target > at_hi {
        return Err(Error::InvalidParameter(format!(
            "target {} exceeds the achievable range: n_W(γ) → {:.9} as γ → 1 \
             (disconnected graphs never reach n)",
            target, at_hi
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let value = nw(mid)?;
        if (value - target).abs() <= tol {
            return Decay::new(mid);
        }
        if value < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Numerical(format!(
        "bisection for n_W(γ) = {} stalled; n_W is too flat near the solution",
        target
    )))
}
