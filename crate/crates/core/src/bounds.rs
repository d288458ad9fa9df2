//! Propagation of the mixture approximation error of the initial density through a GMM policy.
//!
//! If the true initial density is `p₀ᵃ + e₀` with `p₀ᵃ` the fitted mixture, the terminal density under
//! the policy is `p_Nᵃ + e_N` with
//! `e_N(x) = Σ_ij λ_ij ℓ_i(z_ij) e₀(z_ij) / |det H_ij|`, `z_ij = H_ij⁻¹ (x + h_ij)`,
//! where `ℓ_i` is the posterior of source component `i`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{dim_err, Result, SteerError};
use crate::gaussian::{responsibilities_with, Gmm};
use crate::linalg::max_eigenvalue;
use crate::policy::GmmPolicy;
use crate::system::SteeringOperators;

/// Points per axis of [`default_grid`].
pub const GRID_POINTS: usize = 401;
/// Half-width of [`default_grid`] in units of the largest mixture standard deviation.
pub const GRID_HALF_WIDTH: f64 = 8.0;

/// Density error sampled on a set of points.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorField {
    pub grid: Vec<DVector<f64>>,
    pub values: Vec<f64>,
}

impl ErrorField {
    pub fn sample<F>(grid: &[DVector<f64>], e: F) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> f64 + Sync,
    {
        if grid.is_empty() {
            return Err(SteerError::InvalidInput("empty grid".into()));
        }
        let values: Vec<f64> = grid.par_iter().map(&e).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SteerError::InvalidInput("error field has non-finite values".into()));
        }
        Ok(Self { grid: grid.to_vec(), values })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Affine terminal map `x_N = H x₀ − h` of one policy block.
struct PairMap {
    i: usize,
    lambda: f64,
    h_inv: DMatrix<f64>,
    offset: DVector<f64>,
    abs_det: f64,
}

fn pair_maps(policy: &GmmPolicy<f64>, ops: &SteeringOperators<f64>) -> Result<Vec<PairMap>> {
    if ops.n() != policy.n() || ops.m() != policy.m() || ops.horizon() != policy.horizon() {
        return Err(dim_err("policy and system dimensions disagree"));
    }
    let mut maps = Vec::new();
    for i in 0..policy.r() {
        for j in 0..policy.q() {
            let lambda = policy.lambda()[(i, j)];
            if lambda <= 0.0 {
                continue;
            }
            let b = policy.block(i, j);
            let h = ops.phi_n0() + ops.bn() * &b.l;
            let sv = h.clone().singular_values();
            if sv.min() <= 1e-12 * sv.max().max(1.0) {
                return Err(SteerError::SingularPushforward(i, j));
            }
            let h_inv = h.clone().try_inverse().ok_or(SteerError::SingularPushforward(i, j))?;
            let offset = ops.bn() * (&b.l * policy.source().component(i).mean() - &b.ubar);
            maps.push(PairMap { i, lambda, h_inv, offset, abs_det: h.determinant().abs() });
        }
    }
    Ok(maps)
}

/// Terminal error `e_N` on `grid` for the initial error `e0`.
pub fn propagate_error<F>(policy: &GmmPolicy<f64>, ops: &SteeringOperators<f64>, e0: F, grid: &[DVector<f64>]) -> Result<ErrorField>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    if grid.iter().any(|x| x.len() != policy.n()) {
        return Err(dim_err("grid point dimension does not match the policy"));
    }
    let maps = pair_maps(policy, ops)?;
    let source = policy.source();
    let evals = source.evaluators()?;
    let weights = source.weights().as_slice();
    ErrorField::sample(grid, |x| {
        maps.iter()
            .map(|pm| {
                let z = &pm.h_inv * (x + &pm.offset);
                let e = e0(&z);
                if e == 0.0 {
                    return 0.0;
                }
                let post = responsibilities_with(&evals, weights, z.as_slice())[pm.i];
                pm.lambda * post * e / pm.abs_det
            })
            .sum()
    })
}

/// `|e / p|` on the grid of `field`. Points where both values are subnormal carry no usable ratio
/// and report 0; a subnormal density under a normal error reports `∞`.
pub fn terminal_ratios(field: &ErrorField, density: &Gmm<f64>) -> Result<Vec<f64>> {
    field
        .grid
        .iter()
        .zip(&field.values)
        .map(|(x, &e)| {
            let p = density.pdf(x)?;
            Ok(if e == 0.0 {
                0.0
            } else if p >= f64::MIN_POSITIVE {
                (e / p).abs()
            } else if e.abs() < f64::MIN_POSITIVE {
                0.0
            } else {
                f64::INFINITY
            })
        })
        .collect()
}

/// Checks on `grid` that a relative initial error `|e0 / p₀ᵃ| ≤ eps` stays within `eps` at the
/// terminal time. Fails with `InvalidInput` when the premise does not hold on the grid.
pub fn relative_bound_check<F>(
    policy: &GmmPolicy<f64>,
    ops: &SteeringOperators<f64>,
    initial: &Gmm<f64>,
    terminal: &Gmm<f64>,
    e0: F,
    eps: f64,
    grid: &[DVector<f64>],
) -> Result<bool>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    if !(eps >= 0.0) {
        return Err(SteerError::InvalidInput("eps must be nonnegative".into()));
    }
    policy.check_source(initial)?;
    let start = ErrorField::sample(grid, &e0)?;
    let premise = terminal_ratios(&start, initial)?;
    if let Some(k) = premise.iter().position(|&r| r > eps * (1.0 + 1e-9)) {
        return Err(SteerError::InvalidInput(format!("initial error ratio {:e} exceeds eps at grid point {k}", premise[k])));
    }
    let field = propagate_error(policy, ops, e0, grid)?;
    Ok(terminal_ratios(&field, terminal)?.iter().all(|&r| r <= eps * (1.0 + 1e-6)))
}

fn det_ratios(policy: &GmmPolicy<f64>, initial: &Gmm<f64>, terminal: &Gmm<f64>) -> Result<DMatrix<f64>> {
    policy.check_source(initial)?;
    if terminal.len() != policy.q() || terminal.dim() != policy.n() {
        return Err(dim_err("terminal mixture does not match the policy"));
    }
    let det = |c: &DMatrix<f64>| c.clone().cholesky().map(|ch| ch.determinant()).ok_or_else(|| SteerError::CholeskyFailure("covariance is not positive definite".into()));
    let d0: Vec<f64> = initial.components().iter().map(|c| det(c.cov())).collect::<Result<_>>()?;
    let dn: Vec<f64> = terminal.components().iter().map(|c| det(c.cov())).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(policy.r(), policy.q(), |i, j| (d0[i] / dn[j]).sqrt()))
}

/// `Σ_ij λ_ij √(det Σ_i⁰ / det Σ_jᴺ) ε₀`, a bound on `|e_N|` whenever `|e₀| ≤ ε₀`.
pub fn absolute_bound(policy: &GmmPolicy<f64>, initial: &Gmm<f64>, terminal: &Gmm<f64>, eps0: f64) -> Result<f64> {
    let d = det_ratios(policy, initial, terminal)?;
    Ok(policy.lambda().component_mul(&d).sum() * eps0)
}

/// `Σ_ij p_i⁰ λ_ij √(det Σ_i⁰ / det Σ_jᴺ) ε₀`. Not a bound in general: it drops the posterior factor,
/// which can reach 1 where one source component dominates.
pub fn absolute_bound_weighted(policy: &GmmPolicy<f64>, initial: &Gmm<f64>, terminal: &Gmm<f64>, eps0: f64) -> Result<f64> {
    let d = det_ratios(policy, initial, terminal)?;
    let p = initial.weights();
    Ok((0..policy.r()).map(|i| p[i] * policy.lambda().row(i).component_mul(&d.row(i)).sum()).sum::<f64>() * eps0)
}

/// Tensor grid over `mean ± 8 σ_max` of a one- or two-dimensional mixture.
pub fn default_grid(g: &Gmm<f64>) -> Result<Vec<DVector<f64>>> {
    grid_around(g, GRID_POINTS, GRID_HALF_WIDTH)
}

pub fn grid_around(g: &Gmm<f64>, points: usize, half_width: f64) -> Result<Vec<DVector<f64>>> {
    let n = g.dim();
    if n == 0 || n > 2 {
        return Err(SteerError::InvalidInput(format!("grids are supported in one or two dimensions, got {n}")));
    }
    if points < 2 {
        return Err(SteerError::InvalidInput("a grid needs at least two points per axis".into()));
    }
    let (mean, cov) = g.moments();
    let r = half_width * max_eigenvalue(&cov).max(0.0).sqrt();
    let axis = |c: f64| -> Vec<f64> { (0..points).map(|k| c - r + 2.0 * r * k as f64 / (points - 1) as f64).collect() };
    let xs = axis(mean[0]);
    Ok(if n == 1 {
        xs.into_iter().map(|x| DVector::from_element(1, x)).collect()
    } else {
        let ys = axis(mean[1]);
        xs.iter().flat_map(|&x| ys.iter().map(move |&y| DVector::from_vec(vec![x, y]))).collect()
    })
}
