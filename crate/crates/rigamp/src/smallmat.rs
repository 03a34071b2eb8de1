//! Small dense-matrix helpers shared by the denoisers and the state
//! evolution. All matrices here are at most (T+2) x (T+2), so plain
//! nalgebra routines are plenty.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Relative spectral cutoff of the symmetric channel solves: directions
/// whose eigenvalue falls below this fraction of the largest one are
/// treated as carrying no usable information and dropped. Late iterations
/// drive the iterate covariances towards singularity; the Monte Carlo and
/// finite-size noise in the sub-cutoff subspace would otherwise be blown up
/// by the inverse.
pub const SOLVE_CUTOFF_REL: f64 = 1e-2;

/// Eigenvalue floor applied before factorizing a covariance for sampling.
pub const EIG_FLOOR: f64 = 1e-10;

/// Solve `m x = b` for symmetric `m` through a truncated eigendecomposition:
/// `x = sum_{lambda_i >= cutoff} v_i (v_i . b) / lambda_i` with
/// `cutoff = SOLVE_CUTOFF_REL * lambda_max`.
pub fn sym_truncated_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    debug_assert_eq!(n, b.len());
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lam_max.is_finite() {
        return Err(Error::NumericalDegeneracy(format!(
            "{n}x{n} channel covariance has a non-finite spectrum"
        )));
    }
    if lam_max <= 0.0 {
        // a vanishing covariance means the conditioning carries nothing;
        // zero weights are the consistent reduction
        return Ok(DVector::zeros(n));
    }
    let cutoff = SOLVE_CUTOFF_REL * lam_max;
    let mut x = DVector::<f64>::zeros(n);
    for j in 0..n {
        let lam = eig.eigenvalues[j];
        if lam >= cutoff {
            let v = eig.eigenvectors.column(j);
            x += v * (v.dot(b) / lam);
        }
    }
    Ok(x)
}

/// Symmetrize in place: `m <- (m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Factor `f` of a symmetric PSD matrix with eigenvalues floored at
/// [`EIG_FLOOR`], such that `f f^T` reproduces the (floored) matrix.
/// Sampling `f z` with iid standard normal `z` then has the right covariance.
pub fn psd_sampling_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    for ev in eig.eigenvalues.iter() {
        if !ev.is_finite() {
            return Err(Error::NumericalDegeneracy(format!(
                "non-finite eigenvalue in {n}x{n} covariance"
            )));
        }
    }
    let mut f = eig.eigenvectors.clone();
    for j in 0..n {
        let s = eig.eigenvalues[j].max(EIG_FLOOR).sqrt();
        for i in 0..n {
            f[(i, j)] *= s;
        }
    }
    Ok(f)
}

/// Truncated power series `sum_{j=0}^{j_max} c[j] * lead * (a b)^j` where
/// `lead` is `a` or `b` as supplied. Powers of `a b` are built incrementally.
pub fn weighted_power_series(
    lead: &DMatrix<f64>,
    ab: &DMatrix<f64>,
    coeffs: &[f64],
) -> DMatrix<f64> {
    let n = lead.nrows();
    let mut acc = DMatrix::<f64>::zeros(n, n);
    // current = lead * (ab)^j
    let mut current = lead.clone();
    for (j, &c) in coeffs.iter().enumerate() {
        if c != 0.0 {
            acc += &current * c;
        }
        if j + 1 < coeffs.len() {
            current = &current * ab;
        }
    }
    acc
}
