//! Randomized GMM steering policies: mixing rule, control sampling, push-forward prediction,
//! forward simulation and expected costs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::covsteer::SteeringContext;
use crate::error::{dim_err, Result, SteerError};
use crate::gaussian::{check_simplex, pick_index, responsibilities_with, Gaussian, GaussianEval, Gmm};
use crate::linalg::{cholesky, symmetrize};
use crate::scalar::{cast, to_f64, Real};
use crate::system::{CostWeights, LinearSystem, SteeringOperators};

/// Feed-forward stack `Ū_ij` (length `Nm`) and feedback stack `L_ij` (`Nm × n`) for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyBlock<T: Real> {
    pub ubar: DVector<T>,
    pub l: DMatrix<T>,
}

impl<T: Real> PolicyBlock<T> {
    pub fn zeros(nm: usize, n: usize) -> Self {
        Self { ubar: DVector::zeros(nm), l: DMatrix::zeros(nm, n) }
    }
}

/// Policy `U = Ū_ij + L_ij (x0 − μ̄_i)` chosen with probability `λ_ij ℓ_i(x0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmPolicy<T: Real> {
    source: Gmm<T>,
    lambda: DMatrix<T>,
    /// Row-major over `(i, j)`.
    blocks: Vec<PolicyBlock<T>>,
    horizon: usize,
    m: usize,
}

/// Tolerance below which a mixing weight is treated as inactive for consistency checks.
pub const ACTIVE_TOL: f64 = 1e-9;

impl<T: Real> GmmPolicy<T> {
    pub fn new(source: Gmm<T>, lambda: DMatrix<T>, blocks: Vec<PolicyBlock<T>>, horizon: usize, m: usize) -> Result<Self> {
        let (r, q) = lambda.shape();
        let n = source.dim();
        if r != source.len() || q == 0 {
            return Err(dim_err(format!("λ is {r}×{q} for a {}-component source", source.len())));
        }
        if blocks.len() != r * q {
            return Err(dim_err(format!("{} policy blocks for {r}×{q} pairs", blocks.len())));
        }
        for b in &blocks {
            if b.ubar.len() != horizon * m || b.l.shape() != (horizon * m, n) {
                return Err(dim_err("policy block has the wrong shape"));
            }
        }
        for i in 0..r {
            let row: Vec<T> = lambda.row(i).iter().copied().collect();
            check_simplex(&row, &format!("row {i} of λ"))?;
        }
        Ok(Self { source, lambda, blocks, horizon, m })
    }

    pub fn source(&self) -> &Gmm<T> {
        &self.source
    }

    pub fn lambda(&self) -> &DMatrix<T> {
        &self.lambda
    }

    pub fn r(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn q(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn n(&self) -> usize {
        self.source.dim()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn block(&self, i: usize, j: usize) -> &PolicyBlock<T> {
        &self.blocks[i * self.q() + j]
    }

    pub fn blocks(&self) -> &[PolicyBlock<T>] {
        &self.blocks
    }

    fn check_x0(&self, x0: &DVector<T>) -> Result<()> {
        if x0.len() != self.n() {
            return Err(dim_err(format!("initial state of length {}, expected {}", x0.len(), self.n())));
        }
        Ok(())
    }

    /// Posterior `ℓ_i(x0)` of the source components, computed in log space.
    pub fn component_likelihoods(&self, x0: &DVector<T>) -> Result<DVector<T>> {
        self.check_x0(x0)?;
        self.source.responsibilities(x0)
    }

    /// `γ_ij(x0) = λ_ij ℓ_i(x0)`.
    pub fn pair_probabilities(&self, x0: &DVector<T>) -> Result<DMatrix<T>> {
        let l = self.component_likelihoods(x0)?;
        Ok(DMatrix::from_fn(self.r(), self.q(), |i, j| self.lambda[(i, j)] * l[i]))
    }

    pub fn control_for(&self, i: usize, j: usize, x0: &DVector<T>) -> DVector<T> {
        let b = self.block(i, j);
        &b.ubar + &b.l * (x0 - self.source.component(i).mean())
    }

    pub fn sample_control(&self, x0: &DVector<T>, seed: u64) -> Result<DVector<T>> {
        self.check_x0(x0)?;
        let evals = self.source.evaluators()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, j) = self.draw_pair(&evals, x0, &mut rng);
        Ok(self.control_for(i, j, x0))
    }

    fn draw_pair<R: Rng>(&self, evals: &[GaussianEval<T>], x0: &DVector<T>, rng: &mut R) -> (usize, usize) {
        let l = responsibilities_with(evals, self.source.weights().as_slice(), x0.as_slice());
        let q = self.q();
        let w: Vec<f64> = (0..self.r() * q).map(|k| to_f64(self.lambda[(k / q, k % q)] * l[k / q])).collect();
        let k = pick_index(&w, rng);
        (k / q, k % q)
    }

    /// `q_j = Σ_i p_i λ_ij`.
    pub fn terminal_weights(&self) -> DVector<T> {
        let p = self.source.weights();
        DVector::from_fn(self.q(), |j, _| (0..self.r()).fold(T::zero(), |a, i| a + p[i] * self.lambda[(i, j)]))
    }

    /// Terminal mean and covariance of pair `(i, j)` started from `𝒩(μ, Σ)`.
    pub fn pushforward(&self, ops: &SteeringOperators<T>, i: usize, j: usize, mu: &DVector<T>, sigma: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
        let b = self.block(i, j);
        let mean = ops.phi_n0() * mu + ops.bn() * &b.ubar;
        let h = ops.phi_n0() + ops.bn() * &b.l;
        (mean, symmetrize(&(&h * sigma * h.transpose())))
    }

    /// Terminal mixture under the policy started from `initial`.
    pub fn predict_terminal(&self, initial: &Gmm<T>, ops: &SteeringOperators<T>) -> Result<Gmm<T>> {
        self.check_source(initial)?;
        self.check_ops(ops)?;
        let weights = self.terminal_weights();
        let active: T = cast(ACTIVE_TOL);
        let mut comps = Vec::with_capacity(self.q());
        for j in 0..self.q() {
            let mut reference: Option<(usize, DVector<T>, DMatrix<T>)> = None;
            for i in 0..self.r() {
                if self.lambda[(i, j)] <= active || initial.weights()[i] <= T::zero() {
                    continue;
                }
                let c = initial.component(i);
                let (mean, cov) = self.pushforward(ops, i, j, c.mean(), c.cov());
                match &reference {
                    None => reference = Some((i, mean, cov)),
                    Some((i0, m0, c0)) => {
                        let dm = to_f64((&mean - m0).amax()) / to_f64(m0.amax()).max(1.0);
                        let dc = to_f64((&cov - c0).amax()) / to_f64(c0.amax()).max(1.0);
                        if dm > 1e-6 || dc > 1e-6 {
                            return Err(SteerError::InconsistentPolicy(format!(
                                "pairs ({i0}, {j}) and ({i}, {j}) reach different terminal components (mean {dm:.2e}, cov {dc:.2e})"
                            )));
                        }
                    }
                }
            }
            let (i, mean, cov) = match reference {
                Some(r) => r,
                None => {
                    let i = (0..self.r())
                        .max_by(|&a, &b| self.lambda[(a, j)].partial_cmp(&self.lambda[(b, j)]).unwrap())
                        .unwrap();
                    let c = initial.component(i);
                    let (mean, cov) = self.pushforward(ops, i, j, c.mean(), c.cov());
                    (i, mean, cov)
                }
            };
            comps.push(Gaussian::new(mean, cov).map_err(|_| SteerError::SingularPushforward(i, j))?);
        }
        Gmm::new(weights, comps)
    }

    fn check_ops(&self, ops: &SteeringOperators<T>) -> Result<()> {
        if ops.n() != self.n() || ops.m() != self.m || ops.horizon() != self.horizon {
            return Err(dim_err("policy and system dimensions disagree"));
        }
        Ok(())
    }

    /// Anchors must equal the initial mixture within 1e−9.
    pub fn check_source(&self, initial: &Gmm<T>) -> Result<()> {
        let s = &self.source;
        if initial.len() != s.len() || initial.dim() != s.dim() {
            return Err(SteerError::InconsistentPolicy("policy anchors and initial mixture differ in shape".into()));
        }
        let tol = 1e-9;
        let close = |a: f64, scale: f64| a <= tol * scale.max(1.0);
        for i in 0..s.len() {
            let (a, b) = (s.component(i), initial.component(i));
            let w = to_f64((s.weights()[i] - initial.weights()[i]).abs());
            let m = to_f64((a.mean() - b.mean()).amax());
            let c = to_f64((a.cov() - b.cov()).amax());
            if !close(w, 1.0) || !close(m, to_f64(b.mean().amax())) || !close(c, to_f64(b.cov().amax())) {
                return Err(SteerError::InconsistentPolicy(format!("anchor {i} differs from the initial component")));
            }
        }
        Ok(())
    }

    /// `Σ_ij p_i λ_ij (J_mean(Ū_ij; μ_i) + J_cov(L_ij; Σ_i))` with the definitional costs.
    pub fn expected_cost(&self, initial: &Gmm<T>, ctx: &SteeringContext<T>) -> Result<T> {
        self.check_source(initial)?;
        self.check_ops(ctx.ops())?;
        let mut total = T::zero();
        for i in 0..self.r() {
            let c = initial.component(i);
            for j in 0..self.q() {
                let w = initial.weights()[i] * self.lambda[(i, j)];
                if w == T::zero() {
                    continue;
                }
                let b = self.block(i, j);
                total += w * ctx.policy_cost(c.mean(), c.cov(), &b.ubar, &b.l);
            }
        }
        Ok(total)
    }

    /// Expected per-step cost `E[J_k]` aggregated over pairs.
    pub fn expected_step_cost(&self, initial: &Gmm<T>, ops: &SteeringOperators<T>, w: &CostWeights<T>, k: usize) -> Result<T> {
        self.check_source(initial)?;
        let mut total = T::zero();
        for i in 0..self.r() {
            let c = initial.component(i);
            for j in 0..self.q() {
                let pw = initial.weights()[i] * self.lambda[(i, j)];
                if pw == T::zero() {
                    continue;
                }
                let b = self.block(i, j);
                total += pw * step_cost(&b.ubar, &b.l, c.mean(), c.cov(), ops, w, k)?;
            }
        }
        Ok(total)
    }

    /// Forward simulation with per-sample streams split from `seed`.
    pub fn simulate(&self, sys: &LinearSystem<T>, initial: &Gmm<T>, count: usize, seed: u64) -> Result<Trajectories<T>> {
        if sys.n() != self.n() || sys.m() != self.m || sys.horizon() != self.horizon {
            return Err(dim_err("policy and system dimensions disagree"));
        }
        let evals = self.source.evaluators()?;
        let factors = initial
            .components()
            .iter()
            .map(|c| cholesky(c.cov(), "initial covariance is numerically indefinite").map(|ch| ch.l()))
            .collect::<Result<Vec<_>>>()?;
        let (n, m, big_n) = (self.n(), self.m, self.horizon);
        let samples: Vec<Sample<T>> = (0..count)
            .into_par_iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(s as u64);
                let k = initial.draw_component(&mut rng);
                let x0 = initial.draw_from(k, &factors[k], &mut rng);
                let (i, j) = self.draw_pair(&evals, &x0, &mut rng);
                let u = self.control_for(i, j, &x0);
                let mut states = DMatrix::zeros(big_n + 1, n);
                let mut controls = DMatrix::zeros(big_n, m);
                states.row_mut(0).copy_from(&x0.transpose());
                let mut x = x0;
                for t in 0..big_n {
                    let ut = u.rows(t * m, m).into_owned();
                    controls.row_mut(t).copy_from(&ut.transpose());
                    x = sys.step(t, &x, &ut);
                    states.row_mut(t + 1).copy_from(&x.transpose());
                }
                Sample { states, controls, init_label: k, pair: (i, j) }
            })
            .collect();
        let mut out = Trajectories {
            states: Vec::with_capacity(count),
            controls: Vec::with_capacity(count),
            init_labels: Vec::with_capacity(count),
            pairs: Vec::with_capacity(count),
        };
        for s in samples {
            out.states.push(s.states);
            out.controls.push(s.controls);
            out.init_labels.push(s.init_label);
            out.pairs.push(s.pair);
        }
        Ok(out)
    }
}

struct Sample<T: Real> {
    states: DMatrix<T>,
    controls: DMatrix<T>,
    init_label: usize,
    pair: (usize, usize),
}

/// Simulated sample paths: `states[s]` is `(N+1) × n`, `controls[s]` is `N × m`.
#[derive(Clone, Debug)]
pub struct Trajectories<T: Real> {
    pub states: Vec<DMatrix<T>>,
    pub controls: Vec<DMatrix<T>>,
    /// Initial mixture component each `x0` was drawn from.
    pub init_labels: Vec<usize>,
    /// Policy pair `(i, j)` selected for each sample.
    pub pairs: Vec<(usize, usize)>,
}

impl<T: Real> Trajectories<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Terminal states as a `count × n` matrix.
    pub fn terminal_states(&self) -> DMatrix<T> {
        let n = self.states.first().map_or(0, |s| s.ncols());
        let mut out = DMatrix::zeros(self.len(), n);
        for (s, x) in self.states.iter().enumerate() {
            out.row_mut(s).copy_from(&x.row(x.nrows() - 1));
        }
        out
    }

    /// States at step `k` as a `count × n` matrix.
    pub fn states_at(&self, k: usize) -> DMatrix<T> {
        let n = self.states.first().map_or(0, |s| s.ncols());
        let mut out = DMatrix::zeros(self.len(), n);
        for (s, x) in self.states.iter().enumerate() {
            out.row_mut(s).copy_from(&x.row(k));
        }
        out
    }
}

/// Realized quadratic cost of one sample path.
pub fn path_cost<T: Real>(w: &CostWeights<T>, states: &DMatrix<T>, controls: &DMatrix<T>) -> T {
    let mut total = T::zero();
    for k in 0..states.nrows() {
        let e = states.row(k).transpose() - w.x_ref(k);
        total += e.dot(&(w.q(k) * &e));
    }
    for k in 0..controls.nrows() {
        let u = controls.row(k).transpose();
        total += u.dot(&(w.r(k) * &u));
    }
    total
}

/// `E[J_k]` of one pair: `‖P_kᵘŪ‖²_R + tr(R P_kᵘ L Σ0 Lᵀ P_kᵘᵀ) + ‖P_kˣ(Γμ0 + H_uŪ) − x'_k‖²_Q + tr(Q P_kˣ G Σ0 Gᵀ P_kˣᵀ)`.
pub fn step_cost<T: Real>(
    ubar: &DVector<T>,
    l: &DMatrix<T>,
    mu0: &DVector<T>,
    sigma0: &DMatrix<T>,
    ops: &SteeringOperators<T>,
    w: &CostWeights<T>,
    k: usize,
) -> Result<T> {
    if k >= ops.horizon() {
        return Err(SteerError::IndexOutOfRange(format!("step {k} for horizon {}", ops.horizon())));
    }
    let m = ops.m();
    let uk = ubar.rows(k * m, m);
    let lk = l.rows(k * m, m);
    let r = w.r(k);
    let control = uk.dot(&(r * uk)) + (r * lk * sigma0 * lk.transpose()).trace();
    Ok(control + state_term(ubar, l, mu0, sigma0, ops, w, k))
}

/// Terminal state term `E[(x_N − x'_N)ᵀ Q_N (x_N − x'_N)]`.
pub fn terminal_cost<T: Real>(
    ubar: &DVector<T>,
    l: &DMatrix<T>,
    mu0: &DVector<T>,
    sigma0: &DMatrix<T>,
    ops: &SteeringOperators<T>,
    w: &CostWeights<T>,
) -> T {
    state_term(ubar, l, mu0, sigma0, ops, w, ops.horizon())
}

fn state_term<T: Real>(
    ubar: &DVector<T>,
    l: &DMatrix<T>,
    mu0: &DVector<T>,
    sigma0: &DMatrix<T>,
    ops: &SteeringOperators<T>,
    w: &CostWeights<T>,
    k: usize,
) -> T {
    let n = ops.n();
    let q = w.q(k);
    let gk = ops.gamma().rows(k * n, n);
    let hk = ops.hu().rows(k * n, n);
    let mean = gk * mu0 + hk * ubar - w.x_ref(k);
    let g = gk + hk * l;
    mean.dot(&(q * &mean)) + (q * &g * sigma0 * g.transpose()).trace()
}
