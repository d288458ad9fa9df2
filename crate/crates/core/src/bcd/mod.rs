//! Block coordinate descent for the soft, total-cost and step-cost constrained steering problems.
//!
//! Each iteration alternates a conic program over the terminal components and pair controllers
//! (weights fixed) with a linear program over the joint weights `λ̃`, the Wasserstein coupling `β`
//! and the terminal weights `p_N` (components fixed).

mod feasibility;
mod step;
mod terminal;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use gmmsteer_conic::{ConicProgram, LinExpr};

use crate::covsteer::{MeanQuadratic, SteeringContext, SDP_TOL};
use crate::error::{dim_err, Result, SteerError};
use crate::gaussian::{Gaussian, Gmm};
use crate::hard::build_cost_matrix;
use crate::linalg::{psd_function, symmetrize};
use crate::policy::{step_cost, GmmPolicy, PolicyBlock};
use crate::system::{require_controllable, CostWeights, LinearSystem};
use crate::transport::{gmm_cost_matrix, gmm_wasserstein, solve_transport};

pub use feasibility::{check_feasibility, Budget, FeasibilityReport};
pub use step::recover_feedback;

/// Starting point of the alternation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Exact transport plan to the desired components (k-means groups of them when `q < t`).
    Transport,
    /// Each source component to its own free-response terminal component (needs `q ≥ r`).
    Identity,
    /// Product couplings `λ̃ = p⁰ uᵀ`, `β = u p_dᵀ` with `u` drawn from the seed.
    Product,
    /// Runs `Transport` and `Identity` and keeps the lower final objective.
    Best,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcdConfig {
    pub max_iter: usize,
    pub eps: f64,
    /// Terminal component count; `max(r, t)` when unset.
    pub q: Option<usize>,
    pub seed: u64,
    pub feasibility_max_iter: usize,
    pub init: InitMode,
}

impl Default for BcdConfig {
    fn default() -> Self {
        Self { max_iter: 100, eps: 1e-5, q: None, seed: 0, feasibility_max_iter: 50, init: InitMode::Best }
    }
}

impl BcdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(SteerError::InvalidInput("eps must be positive".into()));
        }
        if self.q == Some(0) {
            return Err(SteerError::InvalidInput("q must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(SteerError::InvalidInput("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    pub fn resolved_q(&self, r: usize, t: usize) -> usize {
        self.q.unwrap_or(r.max(t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BcdStatus {
    Converged,
    MaxIter,
    InfeasibleStart,
}

/// Iterate of the alternation. Pair-indexed matrices are `r × q`, coupling matrices `q × t`.
#[derive(Clone, Debug)]
pub struct BcdState {
    pub lambda_tilde: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub p_n: DVector<f64>,
    pub terminal: Vec<Gaussian<f64>>,
    /// Pair steering costs `C_ij` (for the step problem, the sum of scaled step costs).
    pub c: DMatrix<f64>,
    /// `T_jl = W²(terminal_j, desired_l)`.
    pub t: DMatrix<f64>,
    /// Row-major over `(i, j)`.
    pub blocks: Vec<PolicyBlock<f64>>,
    /// Scaled step costs `h̃_k` per pair, one matrix per constraint family and step, family-major
    /// (step problem only).
    pub step_costs: Vec<DMatrix<f64>>,
}

impl BcdState {
    fn r(&self) -> usize {
        self.lambda_tilde.nrows()
    }

    fn q(&self) -> usize {
        self.lambda_tilde.ncols()
    }

    /// `tr(Cᵀ λ̃)`.
    pub fn steering_cost(&self) -> f64 {
        self.c.component_mul(&self.lambda_tilde).sum()
    }

    /// `tr(Tᵀ β)`.
    pub fn wasserstein_term(&self) -> f64 {
        self.t.component_mul(&self.beta).sum()
    }

    /// `max_k Σ_ij λ̃_ij h̃_k(i, j)`.
    pub fn worst_step_load(&self) -> f64 {
        self.step_costs.iter().map(|h| h.component_mul(&self.lambda_tilde).sum()).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn step_loads(&self) -> Vec<f64> {
        self.step_costs.iter().map(|h| h.component_mul(&self.lambda_tilde).sum()).collect()
    }

    pub fn terminal_gmm(&self) -> Result<Gmm<f64>> {
        let w = self.p_n.map(|x| x.max(0.0));
        Gmm::normalized(w, self.terminal.clone())
    }
}

#[derive(Clone, Debug)]
pub struct BcdReport {
    /// Objective after initialization and after every accepted iteration.
    pub objective_trace: Vec<f64>,
    /// Slack values of the feasibility phase (empty when the start was feasible).
    pub feasibility_trace: Vec<f64>,
    pub status: BcdStatus,
    pub iterations: usize,
    pub terminal: Gmm<f64>,
    pub w2: f64,
    pub state: BcdState,
}

#[derive(Clone, Debug)]
enum Mode {
    Soft(f64),
    Total(f64),
    Step,
}

/// Weights below this are treated as exact zeros after a linear program.
const WEIGHT_DUST: f64 = 1e-11;
/// Relative margin kept from constraint right-hand sides inside the conic sub-problems.
const BUDGET_MARGIN: f64 = 1e-9;

pub(crate) struct Instance {
    sys: LinearSystem<f64>,
    ctx: SteeringContext<f64>,
    /// Context used for closed-form pair controllers: the original weights, or for the step
    /// problem the sum of the normalized constraint weights.
    pair_ctx: SteeringContext<f64>,
    /// Normalized step-constraint families (empty unless step constrained).
    step_weights: Vec<CostWeights<f64>>,
    initial: Gmm<f64>,
    desired: Gmm<f64>,
    q: usize,
    mean_quads: Vec<MeanQuadratic<f64>>,
    cov_floor: f64,
}

impl Instance {
    fn new(
        sys: &LinearSystem<f64>,
        w: &CostWeights<f64>,
        initial: &Gmm<f64>,
        desired: &Gmm<f64>,
        cfg: &BcdConfig,
        step_weights: Vec<CostWeights<f64>>,
    ) -> Result<Self> {
        cfg.validate()?;
        w.check_against(sys)?;
        if initial.dim() != sys.n() || desired.dim() != sys.n() {
            return Err(dim_err("mixture dimension does not match the system"));
        }
        let ctx = SteeringContext::new(sys, w)?;
        require_controllable(ctx.ops())?;
        let pair_ctx = if step_weights.is_empty() {
            ctx.clone()
        } else {
            SteeringContext::from_operators(ctx.ops().clone(), combine_families(&step_weights)?)?
        };
        let mean_quads = initial.components().iter().map(|c| pair_ctx.mean_quadratic(c.mean())).collect::<Result<_>>()?;
        let scale = desired.components().iter().chain(initial.components()).map(|c| c.cov().trace() / c.dim() as f64).sum::<f64>()
            / (desired.len() + initial.len()) as f64;
        Ok(Self {
            sys: sys.clone(),
            ctx,
            pair_ctx,
            step_weights,
            initial: initial.clone(),
            desired: desired.clone(),
            q: cfg.resolved_q(initial.len(), desired.len()),
            mean_quads,
            cov_floor: 1e-8 * scale.max(1e-12),
        })
    }

    fn r(&self) -> usize {
        self.initial.len()
    }

    fn system(&self) -> &LinearSystem<f64> {
        &self.sys
    }

    fn t(&self) -> usize {
        self.desired.len()
    }

    fn n(&self) -> usize {
        self.ctx.n()
    }

    /// Gaussian with eigenvalues raised to the covariance floor.
    fn floored(&self, mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Gaussian<f64>> {
        let f = self.cov_floor;
        Gaussian::new(mean, symmetrize(&psd_function(&symmetrize(cov), |x| x.max(f))))
    }

    /// Closed-form pair controllers, costs and Wasserstein matrix for the current terminal components.
    fn evaluate_closed_form(&self, st: &mut BcdState) -> Result<()> {
        let q = st.q();
        let targets = Gmm::new(DVector::from_element(q, 1.0 / q as f64), st.terminal.clone())?;
        let pc = build_cost_matrix(&self.pair_ctx, &self.initial, &targets)?;
        st.c = pc.cost;
        st.blocks = pc.blocks;
        st.t = gmm_cost_matrix(&targets, &self.desired)?;
        if !self.step_weights.is_empty() {
            self.evaluate_steps(st)?;
        }
        Ok(())
    }

    fn evaluate_steps(&self, st: &mut BcdState) -> Result<()> {
        let (r, q) = (st.r(), st.q());
        let ops = self.ctx.ops();
        let horizon = ops.horizon();
        let mut hs = vec![DMatrix::zeros(r, q); horizon * self.step_weights.len()];
        for i in 0..r {
            let c = self.initial.component(i);
            for j in 0..q {
                let b = &st.blocks[i * q + j];
                for (f, sw) in self.step_weights.iter().enumerate() {
                    for k in 0..horizon {
                        hs[f * horizon + k][(i, j)] = step_cost(&b.ubar, &b.l, c.mean(), c.cov(), ops, sw, k)?;
                    }
                }
            }
        }
        st.c = hs.iter().fold(DMatrix::zeros(r, q), |a, h| a + h);
        st.step_costs = hs;
        Ok(())
    }

    fn objective(&self, st: &BcdState, mode: &Mode) -> f64 {
        match mode {
            Mode::Soft(kappa) => st.steering_cost() + kappa * st.wasserstein_term(),
            Mode::Total(_) | Mode::Step => st.wasserstein_term(),
        }
    }

    /// Constraint load compared against the budget in the feasibility phase.
    fn slack(&self, st: &BcdState, mode: &Mode) -> Option<(f64, f64)> {
        match mode {
            Mode::Soft(_) => None,
            Mode::Total(kappa) => Some((st.steering_cost(), *kappa)),
            Mode::Step => Some((st.worst_step_load(), 1.0)),
        }
    }

    fn empty_state(&self) -> BcdState {
        let (r, q, t) = (self.r(), self.q, self.t());
        BcdState {
            lambda_tilde: DMatrix::zeros(r, q),
            beta: DMatrix::zeros(q, t),
            p_n: DVector::zeros(q),
            terminal: Vec::new(),
            c: DMatrix::zeros(r, q),
            t: DMatrix::zeros(q, t),
            blocks: Vec::new(),
            step_costs: Vec::new(),
        }
    }

    fn init_transport(&self) -> Result<BcdState> {
        let (q, t) = (self.q, self.t());
        let mut st = self.empty_state();
        let pd = self.desired.weights();
        if q >= t {
            st.terminal = (0..q).map(|j| self.desired.component(j % t).clone()).collect();
            for l in 0..t {
                st.beta[(l, l)] = pd[l];
                st.p_n[l] = pd[l];
            }
        } else {
            let groups = group_components(&self.desired, q);
            for (j, g) in groups.iter().enumerate() {
                let w = DVector::from_iterator(g.len(), g.iter().map(|&l| pd[l]));
                let comps = g.iter().map(|&l| self.desired.component(l).clone()).collect();
                let (mean, cov) = Gmm::normalized(w, comps)?.moments();
                st.terminal.push(self.floored(mean, &cov)?);
                for &l in g {
                    st.beta[(j, l)] = pd[l];
                    st.p_n[j] += pd[l];
                }
            }
        }
        self.evaluate_closed_form(&mut st)?;
        st.lambda_tilde = transport_plan(&st.c, self.initial.weights(), &st.p_n)?;
        Ok(st)
    }

    fn init_identity(&self) -> Result<BcdState> {
        let (r, q, t) = (self.r(), self.q, self.t());
        if q < r {
            return Err(SteerError::InvalidInput("identity start needs q ≥ r".into()));
        }
        let mut st = self.empty_state();
        let l_free = self.pair_ctx.free_feedback();
        for j in 0..q {
            if j < r {
                let c = self.initial.component(j);
                let u = self.pair_ctx.free_mean_control(c.mean());
                let mean = self.pair_ctx.terminal_mean(c.mean(), &u);
                let cov = self.pair_ctx.terminal_cov(c.cov(), &l_free);
                st.terminal.push(self.floored(mean, &cov)?);
                st.lambda_tilde[(j, j)] = self.initial.weights()[j];
                st.p_n[j] = self.initial.weights()[j];
            } else {
                st.terminal.push(self.desired.component((j - r) % t).clone());
            }
        }
        self.evaluate_closed_form(&mut st)?;
        st.beta = transport_plan(&st.t, &st.p_n, self.desired.weights())?;
        Ok(st)
    }

    fn init_product(&self, seed: u64) -> Result<BcdState> {
        let q = self.q;
        let mut st = self.empty_state();
        let u: Vec<f64> = if q == 1 {
            vec![1.0]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Dirichlet::new_with_size(1.0, q).map_err(|e| SteerError::InvalidInput(e.to_string()))?.sample(&mut rng)
        };
        let u = DVector::from_vec(u);
        let (mean, cov) = self.desired.moments();
        let g = self.floored(mean, &cov)?;
        st.terminal = vec![g; q];
        st.lambda_tilde = self.initial.weights() * u.transpose();
        st.beta = &u * self.desired.weights().transpose();
        st.p_n = u;
        self.evaluate_closed_form(&mut st)?;
        Ok(st)
    }

    fn starts(&self, cfg: &BcdConfig) -> Vec<Result<BcdState>> {
        match cfg.init {
            InitMode::Transport => vec![self.init_transport()],
            InitMode::Identity => vec![self.init_identity()],
            InitMode::Product => vec![self.init_product(cfg.seed)],
            InitMode::Best => {
                let mut v = vec![self.init_transport()];
                if self.q >= self.r() {
                    v.push(self.init_identity());
                }
                v
            }
        }
    }

    /// Components update (weights fixed).
    fn block_components(&self, st: &BcdState, mode: &Mode, slack_phase: bool) -> Result<BcdState> {
        match (mode, slack_phase) {
            (Mode::Step, _) => step::solve_step_blocks(self, st, slack_phase),
            (Mode::Soft(k), _) => terminal::solve_terminal(self, st, terminal::Objective::Soft(*k)),
            (Mode::Total(_), true) => terminal::solve_terminal(self, st, terminal::Objective::Slack),
            (Mode::Total(k), false) => terminal::solve_terminal(self, st, terminal::Objective::Total(*k)),
        }
    }

    /// Weights update (components fixed).
    fn block_weights(&self, st: &BcdState, mode: &Mode, slack_phase: bool) -> Result<BcdState> {
        let mut out = st.clone();
        let p0 = self.initial.weights();
        let pd = self.desired.weights();
        match (mode, slack_phase) {
            (Mode::Soft(kappa), _) => {
                let (lt, beta) = soft_weights(&st.c, &st.t, *kappa, p0, pd)?;
                out.lambda_tilde = lt;
                out.beta = beta;
            }
            (Mode::Total(_), true) => {
                let (r, q) = (st.r(), st.q());
                let mut lt = DMatrix::zeros(r, q);
                for i in 0..r {
                    let j = argmin_row(&st.c, i);
                    lt[(i, j)] = p0[i];
                }
                let p_n = column_sums(&lt);
                out.beta = transport_plan(&st.t, &p_n, pd)?;
                out.lambda_tilde = lt;
            }
            (Mode::Total(kappa), false) => {
                let (lt, beta) = weights_lp(st, p0, pd, &[(&st.c, *kappa)], false)?;
                out.lambda_tilde = lt;
                out.beta = beta;
            }
            (Mode::Step, slack) => {
                let cons: Vec<(&DMatrix<f64>, f64)> = st.step_costs.iter().map(|h| (h, 1.0)).collect();
                let (lt, beta) = weights_lp(st, p0, pd, &cons, slack)?;
                out.lambda_tilde = lt;
                out.beta = beta;
            }
        }
        out.p_n = column_sums(&out.lambda_tilde);
        Ok(out)
    }
}

/// One family of step constraints `E[J_k] ≤ κ_k`, `k < N`, with `J_k` the stage cost of `weights`.
#[derive(Clone, Debug)]
pub struct StepBudget {
    pub weights: CostWeights<f64>,
    pub kappas: Vec<f64>,
}

/// Sum of normalized families; all families must share the state references.
fn combine_families(families: &[CostWeights<f64>]) -> Result<CostWeights<f64>> {
    let first = &families[0];
    let horizon = first.horizon();
    for f in &families[1..] {
        if f.horizon() != horizon || f.n() != first.n() {
            return Err(dim_err("step constraint families disagree in shape"));
        }
        if (0..=horizon).any(|k| f.x_ref(k) != first.x_ref(k)) {
            return Err(SteerError::InvalidInput("step constraint families must share the state references".into()));
        }
    }
    let q = (0..=horizon).map(|k| families.iter().fold(DMatrix::zeros(first.n(), first.n()), |a, f| a + f.q(k))).collect();
    let r = (0..horizon).map(|k| families.iter().fold(DMatrix::zeros(first.m(), first.m()), |a, f| a + f.r(k))).collect();
    let x = (0..=horizon).map(|k| first.x_ref(k).clone()).collect();
    CostWeights::new(q, r, x)
}

/// Per-step normalized weights `R_k/κ_k`, `Q_k/κ_k` with the terminal penalty removed.
pub fn step_normalized(w: &CostWeights<f64>, kappas: &[f64]) -> Result<CostWeights<f64>> {
    let s = w.scaled_by_step(kappas)?;
    let n = w.n();
    let horizon = w.horizon();
    let q = (0..=horizon).map(|k| if k == horizon { DMatrix::zeros(n, n) } else { s.q(k).clone() }).collect();
    let r = (0..horizon).map(|k| s.r(k).clone()).collect();
    let x = (0..=horizon).map(|k| s.x_ref(k).clone()).collect();
    CostWeights::constraint(q, r, x)
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum())
}

fn argmin_row(c: &DMatrix<f64>, i: usize) -> usize {
    (0..c.ncols()).fold(0, |b, j| if c[(i, j)] < c[(i, b)] { j } else { b })
}

/// Transport plan with zero-mass rows and columns removed before the simplex.
fn transport_plan(c: &DMatrix<f64>, p: &DVector<f64>, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let rows: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let cols: Vec<usize> = (0..q.len()).filter(|&j| q[j] > 0.0).collect();
    let cs = DMatrix::from_fn(rows.len(), cols.len(), |a, b| c[(rows[a], cols[b])]);
    let ps = DVector::from_iterator(rows.len(), rows.iter().map(|&i| p[i]));
    let qs = DVector::from_iterator(cols.len(), cols.iter().map(|&j| q[j]));
    let qs = &qs * (ps.sum() / qs.sum());
    let plan = solve_transport(&cs, &ps, &qs)?;
    let mut out = DMatrix::zeros(p.len(), q.len());
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            out[(i, j)] = plan.plan[(a, b)];
        }
    }
    Ok(out)
}

/// Exact soft weight update: route each `(i, l)` through `argmin_j C_ij + κ T_jl`, then transport.
fn soft_weights(
    c: &DMatrix<f64>,
    t: &DMatrix<f64>,
    kappa: f64,
    p0: &DVector<f64>,
    pd: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (r, q) = c.shape();
    let tt = t.ncols();
    let mut route = vec![0usize; r * tt];
    let d = DMatrix::from_fn(r, tt, |i, l| {
        let (mut best, mut bj) = (f64::INFINITY, 0);
        for j in 0..q {
            let v = c[(i, j)] + kappa * t[(j, l)];
            if v < best {
                best = v;
                bj = j;
            }
        }
        route[i * tt + l] = bj;
        best
    });
    let pi = transport_plan(&d, p0, pd)?;
    let mut lt = DMatrix::zeros(r, q);
    let mut beta = DMatrix::zeros(q, tt);
    for i in 0..r {
        for l in 0..tt {
            let j = route[i * tt + l];
            lt[(i, j)] += pi[(i, l)];
            beta[(j, l)] += pi[(i, l)];
        }
    }
    Ok((lt, beta))
}

/// Weight LP `min ⟨T, β⟩` (or a slack) subject to the marginals and `⟨A_k, λ̃⟩ ≤ b_k`.
fn weights_lp(
    st: &BcdState,
    p0: &DVector<f64>,
    pd: &DVector<f64>,
    cons: &[(&DMatrix<f64>, f64)],
    slack: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (r, q, t) = (st.r(), st.q(), st.t.ncols());
    let mut p = ConicProgram::new();
    let lam = p.matrix("lambda", r, q);
    let beta = p.matrix("beta", q, t);
    for i in 0..r {
        for j in 0..q {
            p.add_nonneg(lam.at(i, j));
        }
    }
    for j in 0..q {
        for l in 0..t {
            p.add_nonneg(beta.at(j, l));
        }
    }
    for i in 0..r {
        let e = (0..q).fold(LinExpr::constant(-p0[i]), |e, j| e + lam.at(i, j));
        p.add_eq(e);
    }
    for j in 0..q {
        let e = (0..r).fold(LinExpr::zero(), |e, i| e + lam.at(i, j));
        let e = (0..t).fold(e, |e, l| e - beta.at(j, l));
        p.add_eq(e);
    }
    for l in 0..t {
        let e = (0..q).fold(LinExpr::constant(-pd[l]), |e, j| e + beta.at(j, l));
        p.add_eq(e);
    }
    let s = slack.then(|| p.scalar("slack"));
    for (a, b) in cons {
        let load = lam.affine().inner(a);
        match s {
            Some(s) => p.add_le(load, s.expr()),
            None => p.add_le(load, LinExpr::constant(*b)),
        }
    }
    match s {
        Some(s) => p.minimize(s.expr()),
        None => p.minimize(beta.affine().inner(&st.t)),
    }
    let sol = p.solve(SDP_TOL);
    if !sol.is_optimal() {
        return Err(SteerError::SolverFailure { status: format!("{:?}", sol.status), detail: sol.detail });
    }
    let clean = |m: DMatrix<f64>| m.map(|x| if x < WEIGHT_DUST { 0.0 } else { x });
    Ok((clean(sol.matrix(&lam)), clean(sol.matrix(&beta))))
}

/// Deterministic grouping of mixture components by weighted k-means on the means.
fn group_components(g: &Gmm<f64>, q: usize) -> Vec<Vec<usize>> {
    let t = g.len();
    let means: Vec<&DVector<f64>> = g.components().iter().map(|c| c.mean()).collect();
    let w = g.weights();
    let heaviest = (0..t).fold(0, |b, l| if w[l] > w[b] { l } else { b });
    let mut centers = vec![means[heaviest].clone()];
    while centers.len() < q {
        let far = (0..t)
            .map(|l| (l, centers.iter().map(|c| (means[l] - c).norm_squared()).fold(f64::INFINITY, f64::min)))
            .fold((0, -1.0), |b, x| if x.1 > b.1 { x } else { b })
            .0;
        centers.push(means[far].clone());
    }
    let mut assign = vec![0usize; t];
    for _ in 0..100 {
        let next: Vec<usize> = (0..t)
            .map(|l| (0..q).fold(0, |b, j| if (means[l] - &centers[j]).norm_squared() < (means[l] - &centers[b]).norm_squared() { j } else { b }))
            .collect();
        let changed = next != assign;
        assign = next;
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..t).filter(|&l| assign[l] == j).collect();
            let mass: f64 = members.iter().map(|&l| w[l]).sum();
            if mass > 0.0 {
                *c = members.iter().fold(DVector::zeros(c.len()), |a, &l| a + means[l] * w[l]) / mass;
            }
        }
        if !changed {
            break;
        }
    }
    let mut groups: Vec<Vec<usize>> = (0..q).map(|j| (0..t).filter(|&l| assign[l] == j).collect()).collect();
    // An empty group takes the farthest member of the largest group.
    for j in 0..q {
        if groups[j].is_empty() {
            let big = (0..q).fold(0, |b, k| if groups[k].len() > groups[b].len() { k } else { b });
            let l = groups[big].pop().expect("nonempty group");
            groups[j].push(l);
        }
    }
    groups
}

/// Constraint load accepted as satisfying its bound.
fn within(load: f64, bound: f64) -> bool {
    load <= bound * (1.0 + 1e-7) + 1e-9
}

struct Run {
    state: BcdState,
    trace: Vec<f64>,
    feasibility: Vec<f64>,
    status: BcdStatus,
    iterations: usize,
}

fn run_from(inst: &Instance, mode: &Mode, cfg: &BcdConfig, mut st: BcdState) -> Result<Run> {
    let mut feasibility = Vec::new();
    if let Some((mut s, bound)) = inst.slack(&st, mode) {
        if !within(s, bound) {
            feasibility.push(s);
            let mut it = 0;
            while !within(s, bound) {
                if it >= cfg.feasibility_max_iter {
                    return Err(SteerError::InfeasibleStart(format!("slack {s:.6e} above {bound:.6e} after {it} iterations")));
                }
                let cand = inst.block_components(&st, mode, true)?;
                let cand = inst.block_weights(&cand, mode, true)?;
                let (s_new, _) = inst.slack(&cand, mode).expect("constrained mode");
                if !(s_new < s * (1.0 - 1e-12)) {
                    return Err(SteerError::InfeasibleStart(format!("slack stalled at {s:.6e} (bound {bound:.6e})")));
                }
                st = cand;
                s = s_new;
                feasibility.push(s);
                it += 1;
            }
        }
    }

    let mut f = inst.objective(&st, mode);
    let mut trace = vec![f];
    let mut status = BcdStatus::MaxIter;
    let mut iterations = 0;
    if f <= cfg.eps {
        status = BcdStatus::Converged;
    } else {
        for it in 1..=cfg.max_iter {
            let cand = inst.block_components(&st, mode, false).and_then(|c| inst.block_weights(&c, mode, false));
            let cand = match cand {
                Ok(c) => c,
                // The previous iterate is feasible; a failed sub-solve ends the descent there.
                Err(SteerError::SolverFailure { .. }) => {
                    status = BcdStatus::Converged;
                    break;
                }
                Err(e) => return Err(e),
            };
            let f_new = inst.objective(&cand, mode);
            let feasible = inst.slack(&cand, mode).map_or(true, |(s, b)| within(s, b));
            if !(f_new <= f) || !feasible {
                status = BcdStatus::Converged;
                break;
            }
            st = cand;
            trace.push(f_new);
            iterations = it;
            if f_new <= cfg.eps || (f - f_new) / f_new <= cfg.eps {
                status = BcdStatus::Converged;
                break;
            }
            f = f_new;
        }
    }
    Ok(Run { state: st, trace, feasibility, status, iterations })
}

fn solve(inst: &Instance, mode: Mode, cfg: &BcdConfig) -> Result<(GmmPolicy<f64>, BcdReport)> {
    let mut best: Option<Run> = None;
    let mut first_err = None;
    for start in inst.starts(cfg) {
        let run = start.and_then(|s| run_from(inst, &mode, cfg, s));
        match run {
            Ok(r) => {
                let better = best.as_ref().map_or(true, |b| r.trace.last() < b.trace.last());
                if better {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let run = match best {
        Some(r) => r,
        None => return Err(first_err.expect("at least one start")),
    };
    let policy = policy_from_state(inst, &run.state)?;
    let terminal = policy.predict_terminal(&inst.initial, inst.ctx.ops())?;
    let (w2, _) = gmm_wasserstein(&terminal, &inst.desired)?;
    let report = BcdReport {
        objective_trace: run.trace,
        feasibility_trace: run.feasibility,
        status: run.status,
        iterations: run.iterations,
        terminal,
        w2,
        state: run.state,
    };
    Ok((policy, report))
}

fn policy_from_state(inst: &Instance, st: &BcdState) -> Result<GmmPolicy<f64>> {
    let (r, q) = (st.r(), st.q());
    let p = inst.initial.weights();
    let mut lambda = DMatrix::from_element(r, q, 1.0 / q as f64);
    for i in 0..r {
        let row = st.lambda_tilde.row(i).map(|x| x.max(0.0));
        let s = row.sum();
        if p[i] > 0.0 && s > 0.0 {
            lambda.row_mut(i).copy_from(&(row / s));
        }
    }
    GmmPolicy::new(inst.initial.clone(), lambda, st.blocks.clone(), inst.ctx.ops().horizon(), inst.ctx.ops().m())
}

/// Soft-constrained steering: minimize `E[J] + κ W²_GMM(terminal, desired)`.
pub fn solve_soft(
    sys: &LinearSystem<f64>,
    w: &CostWeights<f64>,
    initial: &Gmm<f64>,
    desired: &Gmm<f64>,
    kappa: f64,
    cfg: &BcdConfig,
) -> Result<(GmmPolicy<f64>, BcdReport)> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(SteerError::InvalidInput("kappa must be positive and finite".into()));
    }
    let inst = Instance::new(sys, w, initial, desired, cfg, Vec::new())?;
    solve(&inst, Mode::Soft(kappa), cfg)
}

/// Total-cost constrained steering: minimize `W²_GMM(terminal, desired)` subject to `E[J] ≤ κ`.
pub fn solve_total(
    sys: &LinearSystem<f64>,
    w: &CostWeights<f64>,
    initial: &Gmm<f64>,
    desired: &Gmm<f64>,
    kappa: f64,
    cfg: &BcdConfig,
) -> Result<(GmmPolicy<f64>, BcdReport)> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(SteerError::InvalidInput("kappa must be nonnegative and finite".into()));
    }
    let inst = Instance::new(sys, w, initial, desired, cfg, Vec::new())?;
    solve(&inst, Mode::Total(kappa), cfg)
}

/// Step-cost constrained steering: minimize `W²_GMM(terminal, desired)` subject to `E[J_k] ≤ κ_k`.
pub fn solve_step(
    sys: &LinearSystem<f64>,
    w: &CostWeights<f64>,
    initial: &Gmm<f64>,
    desired: &Gmm<f64>,
    kappas: &[f64],
    cfg: &BcdConfig,
) -> Result<(GmmPolicy<f64>, BcdReport)> {
    solve_step_multi(sys, initial, desired, &[StepBudget { weights: w.clone(), kappas: kappas.to_vec() }], cfg)
}

/// Step-cost constrained steering with several constraint families, each enforced at every step.
pub fn solve_step_multi(
    sys: &LinearSystem<f64>,
    initial: &Gmm<f64>,
    desired: &Gmm<f64>,
    budgets: &[StepBudget],
    cfg: &BcdConfig,
) -> Result<(GmmPolicy<f64>, BcdReport)> {
    if budgets.is_empty() {
        return Err(SteerError::InvalidInput("at least one step budget is required".into()));
    }
    let families = budgets
        .iter()
        .map(|b| {
            b.weights.check_against(sys)?;
            step_normalized(&b.weights, &b.kappas)
        })
        .collect::<Result<Vec<_>>>()?;
    let combined = combine_families(&families)?;
    let inst = Instance::new(sys, &combined, initial, desired, cfg, families)?;
    solve(&inst, Mode::Step, cfg)
}
