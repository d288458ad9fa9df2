use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, SteerError};
use crate::scalar::{cast, to_f64, Real};

pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * cast::<T>(0.5)
}

/// Largest absolute entry of `m − mᵀ` relative to `max(1, |m|_max)`.
pub fn asymmetry<T: Real>(m: &DMatrix<T>) -> f64 {
    if m.nrows() != m.ncols() {
        return f64::INFINITY;
    }
    let d = (m - m.transpose()).amax();
    to_f64(d) / to_f64(m.amax()).max(1.0)
}

pub fn cholesky<T: Real>(m: &DMatrix<T>, what: &str) -> Result<Cholesky<T, nalgebra::Dyn>> {
    Cholesky::new(symmetrize(m)).ok_or_else(|| SteerError::CholeskyFailure(what.to_string()))
}

pub fn spd_inverse<T: Real>(m: &DMatrix<T>, what: &str) -> Result<DMatrix<T>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    Ok(symmetrize(&cholesky(m, what)?.inverse()))
}

pub fn sym_eigen<T: Real>(m: &DMatrix<T>) -> SymmetricEigen<T, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

pub fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    if m.nrows() == 0 {
        return T::zero();
    }
    sym_eigen(m).eigenvalues.min()
}

pub fn max_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    if m.nrows() == 0 {
        return T::zero();
    }
    sym_eigen(m).eigenvalues.max()
}

/// Symmetric PSD square root; negative eigenvalues are clamped to zero.
pub fn sqrtm_psd<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let a = asymmetry(m);
    if a > 1e-8 {
        return Err(SteerError::NotSymmetric(a));
    }
    Ok(psd_function(m, |x| x.max(T::zero()).sqrt()))
}

/// Inverse square root of a symmetric PD matrix.
pub fn inv_sqrtm_pd<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let e = sym_eigen(m);
    if e.eigenvalues.iter().any(|&v| v <= T::zero()) {
        return Err(SteerError::MatrixSqrtFailure("matrix is not positive definite".into()));
    }
    Ok(reassemble(&e, |x| T::one() / x.sqrt()))
}

pub fn psd_function<T: Real>(m: &DMatrix<T>, f: impl Fn(T) -> T) -> DMatrix<T> {
    reassemble(&sym_eigen(m), f)
}

fn reassemble<T: Real>(e: &SymmetricEigen<T, nalgebra::Dyn>, f: impl Fn(T) -> T) -> DMatrix<T> {
    let v = &e.eigenvectors;
    let d = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|&x| f(x)));
    let out = v * DMatrix::from_diagonal(&d) * v.transpose();
    symmetrize(&out)
}

/// Rows `start..start+len` of `m`.
pub fn rows<T: Real>(m: &DMatrix<T>, start: usize, len: usize) -> DMatrix<T> {
    m.rows(start, len).into_owned()
}

pub fn log_det_spd<T: Real>(m: &DMatrix<T>, what: &str) -> Result<T> {
    let c = cholesky(m, what)?;
    let two: T = cast(2.0);
    Ok(c.l().diagonal().iter().fold(T::zero(), |acc, &d| acc + two * d.ln()))
}

pub fn block_diag<T: Real>(blocks: &[DMatrix<T>]) -> DMatrix<T> {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), b.shape()).copy_from(b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}
