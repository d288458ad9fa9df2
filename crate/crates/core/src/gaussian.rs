//! Gaussians, mixtures, sampling, EM fitting and the closed-form Gaussian Wasserstein distance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Result, SteerError};
use crate::linalg::{asymmetry, cholesky, log_det_spd, psd_function, symmetrize, sym_eigen};
use crate::scalar::{cast, tol, to_f64, Real};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian<T: Real> {
    mean: DVector<T>,
    cov: DMatrix<T>,
}

impl<T: Real> Gaussian<T> {
    /// Validates symmetry (1e−10 relative) and positive definiteness.
    pub fn new(mean: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || cov.shape() != (n, n) {
            return Err(dim_err(format!("mean of length {n} with covariance {:?}", cov.shape())));
        }
        let a = asymmetry(&cov);
        if a > to_f64(tol::<T>(1e-10)) {
            return Err(SteerError::NotSymmetric(a));
        }
        let cov = symmetrize(&cov);
        cholesky(&cov, "covariance is not positive definite")?;
        if sym_eigen(&cov).eigenvalues.min() <= T::zero() {
            return Err(SteerError::CholeskyFailure("covariance is not positive definite".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<T> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &DVector<T>) -> Result<T> {
        Ok(GaussianEval::new(self)?.log_pdf(x.as_slice()))
    }

    pub fn pdf(&self, x: &DVector<T>) -> Result<T> {
        Ok(self.log_pdf(x)?.exp())
    }
}

/// Precomputed `L⁻¹` and normalizer for fast repeated log-density evaluation.
pub(crate) struct GaussianEval<T: Real> {
    mean: Vec<T>,
    l_inv: DMatrix<T>,
    log_norm: T,
}

impl<T: Real> GaussianEval<T> {
    pub(crate) fn new(g: &Gaussian<T>) -> Result<Self> {
        let c = cholesky(&g.cov, "covariance is not positive definite")?;
        let n = g.dim();
        let l_inv = c.l().solve_lower_triangular(&DMatrix::identity(n, n)).ok_or_else(|| {
            SteerError::CholeskyFailure("singular Cholesky factor".into())
        })?;
        let log_det = log_det_spd(&g.cov, "covariance is not positive definite")?;
        let log_norm = -(cast::<T>(0.5 * n as f64 * LN_2PI) + log_det * cast(0.5));
        Ok(Self { mean: g.mean.as_slice().to_vec(), l_inv, log_norm })
    }

    pub(crate) fn log_pdf(&self, x: &[T]) -> T {
        let n = self.mean.len();
        let mut q = T::zero();
        for i in 0..n {
            let mut z = T::zero();
            for j in 0..=i {
                z += self.l_inv[(i, j)] * (x[j] - self.mean[j]);
            }
            q += z * z;
        }
        self.log_norm - q * cast(0.5)
    }
}

/// Finite mixture `Σ p_i 𝒩(μ_i, Σ_i)` with simplex weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmm<T: Real> {
    weights: DVector<T>,
    components: Vec<Gaussian<T>>,
}

pub(crate) fn check_simplex<T: Real>(w: &[T], what: &str) -> Result<()> {
    if w.iter().any(|&x| x < T::zero() || !x.is_finite()) {
        return Err(SteerError::InvalidInput(format!("{what} has negative or non-finite entries")));
    }
    let s = w.iter().fold(T::zero(), |a, &b| a + b);
    let t: T = tol::<T>(1e-12) * cast((w.len() as f64).max(1.0));
    if (s - T::one()).abs() > t {
        return Err(SteerError::InvalidInput(format!("{what} sums to {} instead of 1", to_f64(s))));
    }
    Ok(())
}

impl<T: Real> Gmm<T> {
    pub fn new(weights: DVector<T>, components: Vec<Gaussian<T>>) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(dim_err(format!("{} weights for {} components", weights.len(), components.len())));
        }
        let n = components[0].dim();
        if components.iter().any(|c| c.dim() != n) {
            return Err(dim_err("mixture components have different dimensions"));
        }
        check_simplex(weights.as_slice(), "mixture weights")?;
        Ok(Self { weights, components })
    }

    /// Rescales nonnegative weights to sum to one.
    pub fn normalized(weights: DVector<T>, components: Vec<Gaussian<T>>) -> Result<Self> {
        let s = weights.sum();
        if !(s > T::zero()) {
            return Err(SteerError::InvalidInput("mixture weights sum to zero".into()));
        }
        Self::new(weights / s, components)
    }

    pub fn single(g: Gaussian<T>) -> Self {
        Self { weights: DVector::from_element(1, T::one()), components: vec![g] }
    }

    pub fn weights(&self) -> &DVector<T> {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian<T>] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &Gaussian<T> {
        &self.components[i]
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub(crate) fn evaluators(&self) -> Result<Vec<GaussianEval<T>>> {
        self.components.iter().map(GaussianEval::new).collect()
    }

    pub fn log_pdf(&self, x: &DVector<T>) -> Result<T> {
        if x.len() != self.dim() {
            return Err(dim_err(format!("point of length {} for a {}-dimensional mixture", x.len(), self.dim())));
        }
        let evals = self.evaluators()?;
        let logs: Vec<T> = evals
            .iter()
            .zip(self.weights.iter())
            .map(|(e, &w)| if w > T::zero() { w.ln() + e.log_pdf(x.as_slice()) } else { T::min_value().unwrap() })
            .collect();
        Ok(log_sum_exp(&logs))
    }

    pub fn pdf(&self, x: &DVector<T>) -> Result<T> {
        Ok(self.log_pdf(x)?.exp())
    }

    /// Posterior component probabilities at `x`, computed in log space.
    pub fn responsibilities(&self, x: &DVector<T>) -> Result<DVector<T>> {
        if x.len() != self.dim() {
            return Err(dim_err("responsibility point has the wrong dimension"));
        }
        let evals = self.evaluators()?;
        Ok(responsibilities_with(&evals, self.weights.as_slice(), x.as_slice()))
    }

    /// Marginal over the listed coordinates.
    pub fn marginal(&self, coords: &[usize]) -> Result<Self> {
        let n = self.dim();
        if coords.is_empty() || coords.iter().any(|&c| c >= n) {
            return Err(dim_err("marginal coordinates out of range"));
        }
        let comps = self
            .components
            .iter()
            .map(|c| {
                let mean = DVector::from_iterator(coords.len(), coords.iter().map(|&i| c.mean[i]));
                let cov = DMatrix::from_fn(coords.len(), coords.len(), |a, b| c.cov[(coords[a], coords[b])]);
                Gaussian::new(mean, cov)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { weights: self.weights.clone(), components: comps })
    }

    /// Mixture mean and covariance.
    pub fn moments(&self) -> (DVector<T>, DMatrix<T>) {
        let n = self.dim();
        let mut mean = DVector::zeros(n);
        for (c, &w) in self.components.iter().zip(self.weights.iter()) {
            mean += &c.mean * w;
        }
        let mut cov = DMatrix::zeros(n, n);
        for (c, &w) in self.components.iter().zip(self.weights.iter()) {
            let d = &c.mean - &mean;
            cov += (&c.cov + &d * d.transpose()) * w;
        }
        (mean, cov)
    }

    /// `count × n` i.i.d. draws; component by weight, then `μ + L z` with `Σ = L Lᵀ`.
    pub fn sample(&self, count: usize, seed: u64) -> Result<DMatrix<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.sample_labeled(count, &mut rng)?.0)
    }

    pub fn sample_labeled<R: Rng>(&self, count: usize, rng: &mut R) -> Result<(DMatrix<T>, Vec<usize>)> {
        let n = self.dim();
        let factors = self
            .components
            .iter()
            .map(|c| cholesky(&c.cov, "covariance is numerically indefinite").map(|ch| ch.l()))
            .collect::<Result<Vec<_>>>()?;
        let mut out = DMatrix::zeros(count, n);
        let mut labels = Vec::with_capacity(count);
        for s in 0..count {
            let k = self.draw_component(rng);
            let x = self.draw_from(k, &factors[k], rng);
            out.row_mut(s).copy_from(&x.transpose());
            labels.push(k);
        }
        Ok((out, labels))
    }

    pub(crate) fn draw_component<R: Rng>(&self, rng: &mut R) -> usize {
        let w: Vec<f64> = self.weights.iter().map(|&x| to_f64(x)).collect();
        pick_index(&w, rng)
    }

    pub(crate) fn draw_from<R: Rng>(&self, k: usize, factor: &DMatrix<T>, rng: &mut R) -> DVector<T> {
        let n = self.dim();
        let z = DVector::from_fn(n, |_, _| cast::<T>(rng.sample::<f64, _>(StandardNormal)));
        &self.components[k].mean + factor * z
    }

    pub fn log_likelihood(&self, samples: &DMatrix<T>) -> Result<T> {
        if samples.ncols() != self.dim() {
            return Err(dim_err("sample matrix has the wrong number of columns"));
        }
        let evals = self.evaluators()?;
        let logw: Vec<T> = self.weights.iter().map(|&w| w.ln()).collect();
        let per: Vec<T> = (0..samples.nrows())
            .map(|s| {
                let x: Vec<T> = samples.row(s).iter().copied().collect();
                let l: Vec<T> = evals.iter().zip(&logw).map(|(e, &lw)| lw + e.log_pdf(&x)).collect();
                log_sum_exp(&l)
            })
            .collect();
        Ok(per.into_iter().fold(T::zero(), |a, b| a + b))
    }
}

/// Index drawn with probability proportional to `w`.
pub(crate) fn pick_index<R: Rng>(w: &[f64], rng: &mut R) -> usize {
    let total: f64 = w.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in w.iter().enumerate() {
        if x <= 0.0 {
            continue;
        }
        acc += x;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub(crate) fn log_sum_exp<T: Real>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::min_value().unwrap(), |a, b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    let s = v.iter().fold(T::zero(), |a, &x| a + (x - m).exp());
    m + s.ln()
}

pub(crate) fn responsibilities_with<T: Real>(evals: &[GaussianEval<T>], weights: &[T], x: &[T]) -> DVector<T> {
    let logs: Vec<T> = evals
        .iter()
        .zip(weights)
        .map(|(e, &w)| if w > T::zero() { w.ln() + e.log_pdf(x) } else { T::min_value().unwrap() })
        .collect();
    let lse = log_sum_exp(&logs);
    DVector::from_iterator(logs.len(), logs.iter().map(|&l| (l - lse).exp()))
}

/// Symmetric PSD square root by eigendecomposition, negative eigenvalues clamped to zero.
pub fn sqrtm_psd<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    crate::linalg::sqrtm_psd(m)
}

/// Squared 2-Wasserstein distance between two Gaussians.
pub fn w2_gaussian<T: Real>(a: &Gaussian<T>, b: &Gaussian<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(dim_err("Gaussians have different dimensions"));
    }
    let sb = checked_sqrt(b.cov())?;
    let inner = symmetrize(&(&sb * a.cov() * &sb));
    let root = checked_sqrt(&inner)?;
    let d = a.mean() - b.mean();
    let w = d.dot(&d) + a.cov().trace() + b.cov().trace() - root.trace() * cast(2.0);
    Ok(w.max(T::zero()))
}

fn checked_sqrt<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let e = sym_eigen(m);
    let scale = to_f64(m.amax()).max(1.0);
    let lo = to_f64(e.eigenvalues.min());
    if lo < -1e-10 * scale {
        return Err(SteerError::MatrixSqrtFailure(format!("eigenvalue {lo:e} below zero")));
    }
    Ok(psd_function(m, |x| x.max(T::zero()).sqrt()))
}

/// Trace of an EM run.
#[derive(Clone, Debug)]
pub struct EmFit<T: Real> {
    pub gmm: Gmm<T>,
    /// Log-likelihood of the samples after each E-step.
    pub log_likelihood: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Components re-seeded after their responsibility mass vanished.
    pub reseeded: Vec<usize>,
}

/// EM fit of an `r`-component mixture with seeded k-means++ initialization.
pub fn fit_em<T: Real>(samples: &DMatrix<T>, r: usize, seed: u64, max_iter: usize, tol: T) -> Result<Gmm<T>> {
    Ok(fit_em_trace(samples, r, seed, max_iter, tol)?.gmm)
}

pub fn fit_em_trace<T: Real>(
    samples: &DMatrix<T>,
    r: usize,
    seed: u64,
    max_iter: usize,
    tol: T,
) -> Result<EmFit<T>> {
    let (count, n) = samples.shape();
    if r == 0 || n == 0 {
        return Err(SteerError::InvalidInput("component count and dimension must be positive".into()));
    }
    if count < r * (n + 1) {
        return Err(SteerError::InvalidInput(format!("{count} samples are too few for {r} components in {n} dimensions")));
    }
    let rows: Vec<Vec<T>> = (0..count).map(|s| samples.row(s).iter().copied().collect()).collect();
    let inv_count = T::one() / cast::<T>(count as f64);

    let mut global_mean = vec![T::zero(); n];
    for x in &rows {
        for j in 0..n {
            global_mean[j] += x[j] * inv_count;
        }
    }
    let global_cov = scatter(&rows, &vec![T::one(); count], &global_mean) * inv_count;
    let mean_diag = global_cov.diagonal().sum() / cast(n as f64);
    let floor = if mean_diag > T::zero() { mean_diag * cast(1e-6) } else { cast(1e-6) };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp(&rows, r, &mut rng);

    // Hard assignment to the nearest seed center gives the first M-step.
    let mut resp = vec![vec![T::zero(); r]; count];
    for (s, x) in rows.iter().enumerate() {
        let k = nearest(&centers, x);
        resp[s][k] = T::one();
    }
    let mut comps = Vec::with_capacity(r);
    let mut weights = Vec::with_capacity(r);
    for k in 0..r {
        let wk: Vec<T> = resp.iter().map(|row| row[k]).collect();
        let nk = wk.iter().fold(T::zero(), |a, &b| a + b);
        if nk < cast((n + 1) as f64) {
            comps.push(Gaussian::new(DVector::from_vec(centers[k].clone()), floored(&global_cov, floor))?);
            weights.push(nk.max(T::one()));
        } else {
            let mean = weighted_mean(&rows, &wk, nk);
            let cov = scatter(&rows, &wk, &mean) / nk;
            comps.push(Gaussian::new(DVector::from_vec(mean), floored(&cov, floor))?);
            weights.push(nk);
        }
    }
    let total = weights.iter().fold(T::zero(), |a, &b| a + b);
    let mut weights: Vec<T> = weights.into_iter().map(|w| w / total).collect();

    let mut trace = Vec::new();
    let mut reseeded = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let vanish: T = cast::<T>(count as f64) * cast(1e-10);

    while iterations < max_iter {
        iterations += 1;
        // E-step
        let evals = comps.iter().map(GaussianEval::new).collect::<Result<Vec<_>>>()?;
        let logw: Vec<T> = weights.iter().map(|&w| w.ln()).collect();
        let per: Vec<(Vec<T>, T)> = rows
            .iter()
            .map(|x| {
                let l: Vec<T> = evals.iter().zip(&logw).map(|(e, &lw)| lw + e.log_pdf(x)).collect();
                let lse = log_sum_exp(&l);
                (l.iter().map(|&v| (v - lse).exp()).collect(), lse)
            })
            .collect();
        let ll = per.iter().fold(T::zero(), |a, p| a + p.1);
        let gain = trace.last().map(|&prev: &T| ll - prev);
        trace.push(ll);
        if let Some(g) = gain {
            if g.abs() < tol * (T::one() + ll.abs()) {
                converged = true;
                break;
            }
        }
        for (s, p) in per.into_iter().enumerate() {
            resp[s] = p.0;
        }

        // M-step
        let mut new_comps = Vec::with_capacity(r);
        let mut new_weights = Vec::with_capacity(r);
        for k in 0..r {
            let wk: Vec<T> = resp.iter().map(|row| row[k]).collect();
            let nk = wk.iter().fold(T::zero(), |a, &b| a + b);
            if nk <= vanish {
                if reseeded.contains(&k) {
                    return Err(SteerError::DegenerateComponent(k));
                }
                reseeded.push(k);
                let worst = worst_explained(&rows, &comps, &weights)?;
                new_comps.push(Gaussian::new(DVector::from_vec(rows[worst].clone()), floored(&global_cov, floor))?);
                new_weights.push(T::one() / cast(r as f64));
                continue;
            }
            let mean = weighted_mean(&rows, &wk, nk);
            let cov = scatter(&rows, &wk, &mean) / nk;
            new_comps.push(Gaussian::new(DVector::from_vec(mean), floored(&cov, floor))?);
            new_weights.push(nk * inv_count);
        }
        let total = new_weights.iter().fold(T::zero(), |a, &b| a + b);
        weights = new_weights.into_iter().map(|w| w / total).collect();
        comps = new_comps;
    }

    let gmm = Gmm::new(DVector::from_vec(weights), comps)?;
    Ok(EmFit { gmm, log_likelihood: trace, iterations, converged, reseeded })
}

fn weighted_mean<T: Real>(rows: &[Vec<T>], w: &[T], total: T) -> Vec<T> {
    let n = rows[0].len();
    let mut m = vec![T::zero(); n];
    for (x, &wi) in rows.iter().zip(w) {
        for j in 0..n {
            m[j] += x[j] * wi;
        }
    }
    m.into_iter().map(|v| v / total).collect()
}

fn scatter<T: Real>(rows: &[Vec<T>], w: &[T], mean: &[T]) -> DMatrix<T> {
    let n = mean.len();
    let mut s = DMatrix::zeros(n, n);
    let mut d = vec![T::zero(); n];
    for (x, &wi) in rows.iter().zip(w) {
        if wi == T::zero() {
            continue;
        }
        for j in 0..n {
            d[j] = x[j] - mean[j];
        }
        for a in 0..n {
            let da = d[a] * wi;
            for b in a..n {
                s[(a, b)] += da * d[b];
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            s[(a, b)] = s[(b, a)];
        }
    }
    s
}

/// Eigenvalues raised to at least `floor`; a no-op for well-conditioned covariances.
fn floored<T: Real>(cov: &DMatrix<T>, floor: T) -> DMatrix<T> {
    let e = sym_eigen(cov);
    if e.eigenvalues.min() >= floor {
        return symmetrize(cov);
    }
    psd_function(cov, |x| x.max(floor))
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

fn nearest<T: Real>(centers: &[Vec<T>], x: &[T]) -> usize {
    let mut best = 0;
    let mut bd = sq_dist(&centers[0], x);
    for (k, c) in centers.iter().enumerate().skip(1) {
        let d = sq_dist(c, x);
        if d < bd {
            bd = d;
            best = k;
        }
    }
    best
}

fn kmeans_pp<T: Real, R: Rng>(rows: &[Vec<T>], r: usize, rng: &mut R) -> Vec<Vec<T>> {
    let mut centers = vec![rows[rng.gen_range(0..rows.len())].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|x| to_f64(sq_dist(x, &centers[0]))).collect();
    while centers.len() < r {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 { pick_index(&d2, rng) } else { rng.gen_range(0..rows.len()) };
        centers.push(rows[idx].clone());
        let c = centers.last().unwrap();
        for (x, d) in rows.iter().zip(d2.iter_mut()) {
            *d = d.min(to_f64(sq_dist(x, c)));
        }
    }
    centers
}

fn worst_explained<T: Real>(rows: &[Vec<T>], comps: &[Gaussian<T>], weights: &[T]) -> Result<usize> {
    let evals = comps.iter().map(GaussianEval::new).collect::<Result<Vec<_>>>()?;
    let mut worst = 0;
    let mut wl = T::max_value().unwrap();
    for (s, x) in rows.iter().enumerate() {
        let l: Vec<T> = evals.iter().zip(weights).map(|(e, &w)| w.max(cast(1e-300)).ln() + e.log_pdf(x)).collect();
        let v = log_sum_exp(&l);
        if v < wl {
            wl = v;
            worst = s;
        }
    }
    Ok(worst)
}
