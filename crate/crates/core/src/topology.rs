//! Gossip-matrix construction, validation, and spectral analysis.
//!
//! A *gossip matrix* W is the symmetric doubly-stochastic averaging matrix of
//! a communication graph: after every local update, worker i replaces its
//! model with `Σ_j w_ij x_j`. All built-in families use Metropolis–Hastings
//! weights, `w_ij = 1/(max(deg_i, deg_j) + 1)` on edges and
//! `w_ii = 1 − Σ_{j≠i} w_ij`, which makes any simple undirected graph doubly
//! stochastic by construction.
//!
//! Time-varying communication is a [`TopologySchedule`]: either one static
//! matrix or a periodic cycle, such as the exponential hypercube scheme whose
//! log₂(n)-step product is exact uniform averaging.

use std::collections::BTreeSet;
use std::fmt;

use crate::eigen::sym_eigen;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Canonical undirected edge set: pairs `(i, j)` with `i < j`.
pub type EdgeSet = BTreeSet<(usize, usize)>;

/// Symmetry tolerance for gossip-matrix validation.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Nonnegativity tolerance (entries may round to tiny negatives).
pub const NONNEGATIVITY_TOL: f64 = 1e-12;
/// Row/column-stochasticity tolerance.
pub const STOCHASTICITY_TOL: f64 = 1e-10;

/// A symmetric doubly-stochastic averaging matrix, optionally carrying the
/// edge set it was built from.
#[derive(Clone, Debug)]
pub struct GossipMatrix {
    weights: Matrix,
    edges: Option<EdgeSet>,
}

impl GossipMatrix {
    /// Build from the Metropolis–Hastings rule on a simple undirected graph.
    ///
    /// `edges` must be canonical (`i < j`) with both endpoints `< n`.
    pub fn metropolis_hastings(n: usize, edges: EdgeSet) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("worker count must be at least 1".into()));
        }
        for &(i, j) in &edges {
            if i >= j {
                return Err(Error::InvalidParameter(format!(
                    "edge ({}, {}) is not canonical (need i < j; self-loops are not allowed)",
                    i, j
                )));
            }
            if j >= n {
                return Err(Error::InvalidParameter(format!(
                    "edge ({}, {}) references a worker outside 0..{}",
                    i, j, n
                )));
            }
        }
        let mut degree = vec![0usize; n];
        for &(i, j) in &edges {
            degree[i] += 1;
            degree[j] += 1;
        }
        let mut weights = Matrix::zeros(n, n);
        for &(i, j) in &edges {
            let w = 1.0 / (degree[i].max(degree[j]) as f64 + 1.0);
            weights.set(i, j, w);
            weights.set(j, i, w);
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| weights.get(i, j)).sum();
            weights.set(i, i, 1.0 - off);
        }
        let gossip = GossipMatrix { weights, edges: Some(edges) };
        debug_assert!(gossip.validate().is_valid());
        Ok(gossip)
    }

    /// Wrap an arbitrary square matrix, enforcing the gossip invariants
    /// (symmetry 1e−12, entries ≥ −1e−12, row/column sums within 1e−10 of 1).
    pub fn from_weights(weights: Matrix) -> Result<Self> {
        let report = validate(&weights, None);
        if !report.is_valid() {
            return Err(Error::InvalidMatrix(report.to_string()));
        }
        Ok(GossipMatrix { weights, edges: None })
    }

    /// Worker count.
    pub fn n(&self) -> usize {
        self.weights.n_rows()
    }

    /// The averaging weights.
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    /// The declared edge set, when the matrix was built from a graph.
    pub fn edges(&self) -> Option<&EdgeSet> {
        self.edges.as_ref()
    }

    /// Report-only invariant check of this matrix.
    pub fn validate(&self) -> ValidationReport {
        validate(&self.weights, self.edges.as_ref())
    }

    /// Full eigendecomposition with gossip-specific consistency checks.
    pub fn spectrum(&self) -> Result<Spectrum> {
        Spectrum::of(self)
    }

    /// `1 − λ₂`. Errors for a single worker, where λ₂ does not exist.
    pub fn spectral_gap(&self) -> Result<f64> {
        self.spectrum()?.spectral_gap()
    }
}

/// One violated invariant, with how far the matrix is from satisfying it.
#[derive(Clone, Debug)]
pub struct Violation {
    /// Which invariant failed.
    pub check: String,
    /// Maximum deviation observed.
    pub deviation: f64,
}

/// Outcome of [`validate`]: empty iff the matrix is a valid gossip matrix.
#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            write!(f, "valid gossip matrix")
        } else {
            let lines: Vec<String> = self
                .violations
                .iter()
                .map(|v| format!("{} (deviation {:.3e})", v.check, v.deviation))
                .collect();
            write!(f, "{}", lines.join("; "))
        }
    }
}

/// Check every gossip-matrix invariant on an arbitrary matrix; report-only.
///
/// When a declared edge set is provided, additionally checks that nonzero
/// off-diagonal entries appear only on declared edges.
pub fn validate(weights: &Matrix, declared_edges: Option<&EdgeSet>) -> ValidationReport {
    let mut report = ValidationReport::default();
    if !weights.is_square() {
        report.violations.push(Violation {
            check: format!("matrix is not square ({}x{})", weights.n_rows(), weights.n_cols()),
            deviation: (weights.n_rows() as f64 - weights.n_cols() as f64).abs(),
        });
        return report;
    }
    let n = weights.n_rows();

    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((weights.get(i, j) - weights.get(j, i)).abs());
        }
    }
    if asym > SYMMETRY_TOL {
        report
            .violations
            .push(Violation { check: "symmetry violated".into(), deviation: asym });
    }

    let most_negative = weights.as_slice().iter().copied().fold(0.0_f64, f64::min);
    if most_negative < -NONNEGATIVITY_TOL {
        report.violations.push(Violation {
            check: "nonnegativity violated".into(),
            deviation: -most_negative,
        });
    }

    let worst_row = (0..n)
        .map(|i| (weights.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0_f64, f64::max);
    if worst_row > STOCHASTICITY_TOL {
        report
            .violations
            .push(Violation { check: "row-stochasticity violated".into(), deviation: worst_row });
    }
    let worst_col = (0..n)
        .map(|j| ((0..n).map(|i| weights.get(i, j)).sum::<f64>() - 1.0).abs())
        .fold(0.0_f64, f64::max);
    if worst_col > STOCHASTICITY_TOL {
        report.violations.push(Violation {
            check: "column-stochasticity violated".into(),
            deviation: worst_col,
        });
    }

    if let Some(edges) = declared_edges {
        let mut worst_off_edge: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                if !edges.contains(&(i, j)) {
                    worst_off_edge = worst_off_edge.max(weights.get(i, j).abs());
                }
            }
        }
        if worst_off_edge > 0.0 {
            report.violations.push(Violation {
                check: "zero-pattern violated (nonzero weight off the declared edge set)".into(),
                deviation: worst_off_edge,
            });
        }
    }
    report
}

/// Eigendecomposition of a gossip matrix: eigenvalues sorted descending with
/// orthonormal eigenvectors (column k pairs with eigenvalue k).
#[derive(Clone, Debug)]
pub struct Spectrum {
    values: Vec<f64>,
    vectors: Matrix,
}

impl Spectrum {
    /// Decompose a gossip matrix and verify the decomposition is consistent:
    /// λ₁ = 1 (±1e−9), |λᵢ| ≤ 1 + 1e−9, reconstruction and orthonormality
    /// defects ≤ 1e−8.
    pub fn of(gossip: &GossipMatrix) -> Result<Self> {
        let decomposition = sym_eigen(gossip.weights())?;
        let values = decomposition.values;
        let vectors = decomposition.vectors;
        let n = values.len();

        if (values[0] - 1.0).abs() > 1e-9 {
            return Err(Error::Numerical(format!(
                "leading eigenvalue {} is not 1 (doubly-stochastic matrices average to a fixed point)",
                values[0]
            )));
        }
        if let Some(bad) = values.iter().find(|v| v.abs() > 1.0 + 1e-9) {
            return Err(Error::Numerical(format!(
                "eigenvalue {} falls outside [-1, 1]",
                bad
            )));
        }
        let reconstruction = vectors
            .mul(&Matrix::from_diagonal(&values))
            .mul(&vectors.transpose());
        let defect = reconstruction.max_abs_diff(gossip.weights());
        if defect > 1e-8 {
            return Err(Error::Numerical(format!(
                "eigendecomposition reconstruction defect {:.3e} exceeds 1e-8",
                defect
            )));
        }
        let gram_defect = vectors.transpose().mul(&vectors).max_abs_diff(&Matrix::identity(n));
        if gram_defect > 1e-8 {
            return Err(Error::Numerical(format!(
                "eigenvectors are not orthonormal (defect {:.3e})",
                gram_defect
            )));
        }
        Ok(Spectrum { values, vectors })
    }

    /// Worker count.
    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Eigenvalues, descending; `values()[0] = 1`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Orthonormal eigenvectors, one per column, aligned with `values()`.
    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    /// Second-largest eigenvalue. Errors for a single worker.
    pub fn lambda2(&self) -> Result<f64> {
        if self.n() < 2 {
            return Err(Error::InvalidParameter(
                "spectral gap is undefined for a single worker".into(),
            ));
        }
        Ok(self.values[1])
    }

    /// `1 − λ₂`. Errors for a single worker.
    pub fn spectral_gap(&self) -> Result<f64> {
        Ok(1.0 - self.lambda2()?)
    }
}

/// A (possibly time-varying) sequence of gossip matrices indexed by step.
#[derive(Clone, Debug)]
pub enum TopologySchedule {
    /// The same matrix at every step.
    Static(GossipMatrix),
    /// A periodic cycle: step t uses `matrices[t % matrices.len()]`.
    Cycle(Vec<GossipMatrix>),
}

impl TopologySchedule {
    /// Wrap a periodic cycle; must be nonempty and agree on worker count.
    pub fn cycle(matrices: Vec<GossipMatrix>) -> Result<Self> {
        let first_n = matrices
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty topology cycle".into()))?
            .n();
        if matrices.iter().any(|m| m.n() != first_n) {
            return Err(Error::InvalidParameter(
                "all matrices in a cycle must share one worker count".into(),
            ));
        }
        Ok(TopologySchedule::Cycle(matrices))
    }

    /// Worker count.
    pub fn n(&self) -> usize {
        match self {
            TopologySchedule::Static(w) => w.n(),
            TopologySchedule::Cycle(ms) => ms[0].n(),
        }
    }

    /// Matrix used at step `t`.
    pub fn matrix_at(&self, t: usize) -> &GossipMatrix {
        match self {
            TopologySchedule::Static(w) => w,
            TopologySchedule::Cycle(ms) => &ms[t % ms.len()],
        }
    }

    /// Cycle length (1 for static schedules).
    pub fn period(&self) -> usize {
        match self {
            TopologySchedule::Static(_) => 1,
            TopologySchedule::Cycle(ms) => ms.len(),
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, TopologySchedule::Static(_))
    }

    /// The static matrix, if this schedule is static.
    pub fn static_matrix(&self) -> Option<&GossipMatrix> {
        match self {
            TopologySchedule::Static(w) => Some(w),
            TopologySchedule::Cycle(_) => None,
        }
    }
}

/// Build a static topology from its spec string.
///
/// Grammar: `ring:n`, `chain:n`, `star:n`, `torus:RxC` (R,C ≥ 3) or `torus:n`
/// (most-square factorization), `binary_tree:n`, `hypercube:n` (n a power of
/// two), `fully_connected:n`, `disconnected:n`, `edge_list:<path>`; n ≥ 1.
pub fn build_topology(spec: &str) -> Result<GossipMatrix> {
    let (kind, args) = match spec.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (spec, None),
    };
    let invalid = |reason: String| Error::InvalidSpec { spec: spec.to_string(), reason };
    match kind {
        "ring" => ring(parse_count(spec, args)?),
        "chain" => chain(parse_count(spec, args)?),
        "star" => star(parse_count(spec, args)?),
        "torus" => {
            let dims = args.ok_or_else(|| invalid("torus needs dimensions, e.g. torus:4x8".into()))?;
            let (rows, cols) = parse_torus_dims(spec, dims)?;
            torus(rows, cols)
        }
        "binary_tree" => binary_tree(parse_count(spec, args)?),
        "hypercube" => hypercube(parse_count(spec, args)?),
        "fully_connected" => fully_connected(parse_count(spec, args)?),
        "disconnected" => disconnected(parse_count(spec, args)?),
        "edge_list" => {
            let path = args.ok_or_else(|| invalid("edge_list needs a file path".into()))?;
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            edge_list_from_text(&text)
        }
        "exp" => Err(invalid(
            "the exponential scheme is time-varying; use a schedule-aware entry point".into(),
        )),
        other => Err(invalid(format!(
            "unknown topology kind `{}` (expected ring, chain, star, torus, binary_tree, \
             hypercube, fully_connected, disconnected, or edge_list)",
            other
        ))),
    }
}

/// Build a (possibly time-varying) schedule from its spec string: every
/// static spec accepted by [`build_topology`], plus `exp:n`.
pub fn parse_schedule(spec: &str) -> Result<TopologySchedule> {
    if let Some(rest) = spec.strip_prefix("exp:") {
        let n = parse_count(spec, Some(rest))?;
        return exponential_schedule(n);
    }
    Ok(TopologySchedule::Static(build_topology(spec)?))
}

/// The time-varying exponential scheme on `n = 2^k` workers (k ≥ 1): at step
/// t, worker i averages half-and-half with partner `i XOR 2^(t mod k)`. The
/// product of any k consecutive matrices is exactly uniform averaging — every
/// entry is a dyadic rational, so f64 arithmetic introduces no error at all.
pub fn exponential_schedule(n: usize) -> Result<TopologySchedule> {
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::InvalidSpec {
            spec: format!("exp:{}", n),
            reason: "the exponential scheme needs a power-of-two worker count ≥ 2".into(),
        });
    }
    let k = n.trailing_zeros();
    let matrices = (0..k)
        .map(|bit| {
            let edges: EdgeSet = (0..n)
                .filter_map(|i| {
                    let partner = i ^ (1usize << bit);
                    (i < partner).then_some((i, partner))
                })
                .collect();
            GossipMatrix::metropolis_hastings(n, edges)
        })
        .collect::<Result<Vec<_>>>()?;
    TopologySchedule::cycle(matrices)
}

/// Build a topology from edge-list text: one `i j` pair per line, 0-indexed,
/// undirected; `#` starts a comment. The worker count is the largest index
/// plus one. Self-loops and repeated edges (non-simple graphs) are errors.
pub fn edge_list_from_text(text: &str) -> Result<GossipMatrix> {
    let mut edges = EdgeSet::new();
    let mut max_index = 0usize;
    let mut saw_edge = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.ok_or_else(|| {
                Error::Parse(format!("edge list line {}: expected `i j`", lineno + 1))
            })?
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("edge list line {}: {}", lineno + 1, e)))
        };
        let i = parse(tokens.next())?;
        let j = parse(tokens.next())?;
        if tokens.next().is_some() {
            return Err(Error::Parse(format!(
                "edge list line {}: expected exactly two indices",
                lineno + 1
            )));
        }
        if i == j {
            return Err(Error::Parse(format!(
                "edge list line {}: self-loop {} {} makes the graph non-simple",
                lineno + 1,
                i,
                j
            )));
        }
        let edge = (i.min(j), i.max(j));
        if !edges.insert(edge) {
            return Err(Error::Parse(format!(
                "edge list line {}: duplicate edge {} {} makes the graph non-simple",
                lineno + 1,
                i,
                j
            )));
        }
        max_index = max_index.max(edge.1);
        saw_edge = true;
    }
    if !saw_edge {
        return Err(Error::Parse("edge list contains no edges".into()));
    }
    GossipMatrix::metropolis_hastings(max_index + 1, edges)
}

fn parse_count(spec: &str, args: Option<&str>) -> Result<usize> {
    let invalid = |reason: String| Error::InvalidSpec { spec: spec.to_string(), reason };
    let text = args.ok_or_else(|| invalid("missing worker count, e.g. ring:8".into()))?;
    let n = text
        .trim()
        .parse::<usize>()
        .map_err(|e| invalid(format!("worker count `{}`: {}", text, e)))?;
    if n == 0 {
        return Err(invalid("worker count must be at least 1".into()));
    }
    Ok(n)
}

fn parse_torus_dims(spec: &str, dims: &str) -> Result<(usize, usize)> {
    let invalid = |reason: String| Error::InvalidSpec { spec: spec.to_string(), reason };
    if let Some((r, c)) = dims.split_once('x') {
        let rows = r
            .trim()
            .parse::<usize>()
            .map_err(|e| invalid(format!("torus rows `{}`: {}", r, e)))?;
        let cols = c
            .trim()
            .parse::<usize>()
            .map_err(|e| invalid(format!("torus cols `{}`: {}", c, e)))?;
        return Ok((rows, cols));
    }
    // Single-count form: pick the most-square R×C factorization with R, C ≥ 3.
    let n = dims
        .trim()
        .parse::<usize>()
        .map_err(|e| invalid(format!("torus size `{}`: {}", dims, e)))?;
    let mut best: Option<(usize, usize)> = None;
    let mut r = (n as f64).sqrt().floor() as usize;
    while r >= 3 {
        if n % r == 0 && n / r >= 3 {
            best = Some((r, n / r));
            break;
        }
        r -= 1;
    }
    best.ok_or_else(|| {
        invalid(format!(
            "{} workers admit no R×C torus with R, C ≥ 3; pass explicit dimensions like torus:4x8",
            n
        ))
    })
}

fn ring(n: usize) -> Result<GossipMatrix> {
    let edges: EdgeSet = match n {
        1 => EdgeSet::new(),
        2 => [(0, 1)].into_iter().collect(),
        _ => (0..n).map(|i| (i.min((i + 1) % n), i.max((i + 1) % n))).collect(),
    };
    GossipMatrix::metropolis_hastings(n, edges)
}

fn chain(n: usize) -> Result<GossipMatrix> {
    let edges: EdgeSet = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
    GossipMatrix::metropolis_hastings(n, edges)
}

fn star(n: usize) -> Result<GossipMatrix> {
    let edges: EdgeSet = (1..n).map(|leaf| (0, leaf)).collect();
    GossipMatrix::metropolis_hastings(n, edges)
}

fn torus(rows: usize, cols: usize) -> Result<GossipMatrix> {
    if rows < 3 || cols < 3 {
        return Err(Error::InvalidSpec {
            spec: format!("torus:{}x{}", rows, cols),
            reason: "both torus dimensions must be at least 3 (4-regular wraparound grid)".into(),
        });
    }
    let index = |r: usize, c: usize| r * cols + c;
    let mut edges = EdgeSet::new();
    for r in 0..rows {
        for c in 0..cols {
            let here = index(r, c);
            let down = index((r + 1) % rows, c);
            let right = index(r, (c + 1) % cols);
            edges.insert((here.min(down), here.max(down)));
            edges.insert((here.min(right), here.max(right)));
        }
    }
    GossipMatrix::metropolis_hastings(rows * cols, edges)
}

fn binary_tree(n: usize) -> Result<GossipMatrix> {
    let mut edges = EdgeSet::new();
    for i in 0..n {
        for child in [2 * i + 1, 2 * i + 2] {
            if child < n {
                edges.insert((i, child));
            }
        }
    }
    GossipMatrix::metropolis_hastings(n, edges)
}

fn hypercube(n: usize) -> Result<GossipMatrix> {
    if !n.is_power_of_two() {
        return Err(Error::InvalidSpec {
            spec: format!("hypercube:{}", n),
            reason: "hypercube worker count must be a power of two".into(),
        });
    }
    let bits = n.trailing_zeros();
    let edges: EdgeSet = (0..n)
        .flat_map(|i| {
            (0..bits).filter_map(move |b| {
                let partner = i ^ (1usize << b);
                (i < partner).then_some((i, partner))
            })
        })
        .collect();
    GossipMatrix::metropolis_hastings(n, edges)
}

fn fully_connected(n: usize) -> Result<GossipMatrix> {
    let edges: EdgeSet = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    GossipMatrix::metropolis_hastings(n, edges)
}

fn disconnected(n: usize) -> Result<GossipMatrix> {
    GossipMatrix::metropolis_hastings(n, EdgeSet::new())
}
