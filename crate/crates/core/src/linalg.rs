//! Small dense linear-algebra helpers shared by the numerical modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted non-increasing.
///
/// The input is symmetrized first; columns of the returned matrix are the
/// matching unit eigenvectors. Ties keep the solver's relative order.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = symmetrized(m);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrized(m).symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_diagonal(m: &DMatrix<f64>) -> f64 {
    m.diagonal().iter().fold(0.0_f64, |acc, v| acc.max(*v))
}

/// Flip the sign of every column so its entry of largest magnitude is
/// positive. Returns the applied signs.
pub fn normalize_column_signs(m: &mut DMatrix<f64>) -> Vec<f64> {
    let mut signs = Vec::with_capacity(m.ncols());
    for mut col in m.column_iter_mut() {
        let mut best = 0.0_f64;
        let mut sign = 1.0;
        for v in col.iter() {
            if v.abs() > best * (1.0 + 1e-12) {
                best = v.abs();
                sign = if *v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        if sign < 0.0 {
            col.neg_mut();
        }
        signs.push(sign);
    }
    signs
}

/// `Θᵀ diag(w) Θ`, symmetric by construction.
pub fn weighted_gram(theta: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let scaled = scale_rows(theta, weights);
    let mut g = theta.transpose() * scaled;
    symmetrize_in_place(&mut g);
    g
}

/// `diag(w) · M`.
pub fn scale_rows(m: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    out
}

/// `Aᵀ diag(w) C diag(w) B`, the quadrature form of a double integral of a
/// kernel against two function families.
pub fn weighted_bilinear(a: &DMatrix<f64>, c: &DMatrix<f64>, b: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let wa = scale_rows(a, weights);
    let wb = scale_rows(b, weights);
    wa.transpose() * c * wb
}

/// Outcome of a jittered Cholesky factorization.
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    /// Absolute jitter added to the diagonal (0 when none was needed).
    pub jitter: f64,
}

/// Cholesky with bounded diagonal jitter: first the plain matrix, then
/// `start_rel · max_diag`, escalating ×10 until `max_rel · max_diag`.
pub fn cholesky_with_jitter(m: &DMatrix<f64>, start_rel: f64, max_rel: f64) -> Result<JitteredCholesky> {
    let sym = symmetrized(m);
    if let Some(factor) = Cholesky::new(sym.clone()) {
        return Ok(JitteredCholesky { factor, jitter: 0.0 });
    }
    let scale = max_diagonal(&sym).max(f64::MIN_POSITIVE);
    let mut rel = start_rel;
    loop {
        let jitter = rel * scale;
        let mut jittered = sym.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(factor) = Cholesky::new(jittered) {
            return Ok(JitteredCholesky { factor, jitter });
        }
        if rel >= max_rel * (1.0 - 1e-12) {
            return Err(Error::FactorizationFailure { jitter });
        }
        rel = (rel * 10.0).min(max_rel);
    }
}

/// Solve `Lᵀ X = B` for upper-triangular `Lᵀ` given lower `L`.
pub fn solve_upper_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let lt = l.transpose();
    lt.solve_upper_triangular(b).expect("triangular factor from a successful Cholesky has a nonzero diagonal")
}

pub fn column(m: &DMatrix<f64>, j: usize) -> DVector<f64> {
    m.column(j).into_owned()
}
