//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Deterministic and dependency-free: sweeps zero out every off-diagonal pair
//! in a fixed order until the off-diagonal Frobenius norm is ≤ 1e−12, then
//! eigenpairs are sorted by descending eigenvalue with a stable permutation.
//! Quadratic convergence makes ~10 sweeps enough for the matrix sizes this
//! crate works with (n ≤ a few hundred); the hard cap is 100 sweeps.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Off-diagonal Frobenius-norm target for sweep termination.
const OFF_DIAGONAL_TOL: f64 = 1e-12;
/// Hard sweep cap; cyclic Jacobi converges quadratically, so hitting this
/// means the input was not (numerically) symmetric or contains non-finite
/// entries.
const MAX_SWEEPS: usize = 100;
/// Symmetry tolerance on the input, matching the gossip-matrix invariant.
const SYMMETRY_TOL: f64 = 1e-12;

/// Result of [`sym_eigen`]: `values[k]` pairs with column `k` of `vectors`.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    /// Eigenvalues sorted descending.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors, one per column, aligned with `values`.
    pub vectors: Matrix,
}

/// Full eigendecomposition of a symmetric matrix.
///
/// Errors if the matrix is not square, not symmetric within 1e−12, or if the
/// sweep cap is exhausted before reaching the off-diagonal tolerance.
pub fn sym_eigen(matrix: &Matrix) -> Result<EigenDecomposition> {
    if !matrix.is_square() {
        return Err(Error::InvalidParameter(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            matrix.n_rows(),
            matrix.n_cols()
        )));
    }
    let n = matrix.n_rows();
    let mut worst_asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst_asym = worst_asym.max((matrix.get(i, j) - matrix.get(j, i)).abs());
        }
    }
    if worst_asym > SYMMETRY_TOL {
        return Err(Error::InvalidParameter(format!(
            "matrix is not symmetric: max |a_ij - a_ji| = {:.3e}",
            worst_asym
        )));
    }

    let mut a = matrix.clone();
    // Re-symmetrize exactly so rounding in the caller cannot bias sweeps.
    for i in 0..n {
        for j in (i + 1)..n {
            let mean = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, mean);
            a.set(j, i, mean);
        }
    }
    let mut v = Matrix::identity(n);

    for _sweep in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= OFF_DIAGONAL_TOL {
            return Ok(sorted_decomposition(a, v));
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }
    if off_diagonal_norm(&a) <= OFF_DIAGONAL_TOL {
        return Ok(sorted_decomposition(a, v));
    }
    Err(Error::Numerical(format!(
        "Jacobi eigensolver did not reach off-diagonal norm {:.0e} in {} sweeps (residual {:.3e})",
        OFF_DIAGONAL_TOL,
        MAX_SWEEPS,
        off_diagonal_norm(&a)
    )))
}

/// One Jacobi rotation annihilating `a[p][q]` (no-op when already zero).
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a.get(p, q);
    if apq == 0.0 {
        return;
    }
    let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
    // Smaller-magnitude root of t² + 2θt − 1 = 0; the guarded branch avoids
    // overflow of θ² for extreme diagonal/off-diagonal ratios.
    let t = if theta.abs() > 1e10 {
        0.5 / theta
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let tau = s / (1.0 + c);
    let n = a.n_rows();

    let app = a.get(p, p);
    let aqq = a.get(q, q);
    a.set(p, p, app - t * apq);
    a.set(q, q, aqq + t * apq);
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);

    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let arp = a.get(r, p);
        let arq = a.get(r, q);
        let new_rp = arp - s * (arq + tau * arp);
        let new_rq = arq + s * (arp - tau * arq);
        a.set(r, p, new_rp);
        a.set(p, r, new_rp);
        a.set(r, q, new_rq);
        a.set(q, r, new_rq);
    }
    for r in 0..n {
        let vrp = v.get(r, p);
        let vrq = v.get(r, q);
        v.set(r, p, vrp - s * (vrq + tau * vrp));
        v.set(r, q, vrq + s * (vrp - tau * vrq));
    }
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.n_rows();
    let mut sum = 0.0;
    for p in 0..n {
        for q in (p + 1)..n {
            let x = a.get(p, q);
            sum += 2.0 * x * x;
        }
    }
    sum.sqrt()
}

/// Sort eigenpairs by descending eigenvalue (stable, hence deterministic).
fn sorted_decomposition(a: Matrix, v: Matrix) -> EigenDecomposition {
    let n = a.n_rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let values: Vec<f64> = order.iter().map(|&k| a.get(k, k)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, dst, v.get(r, src));
        }
    }
    EigenDecomposition { values, vectors }
}
