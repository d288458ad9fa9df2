//! Step-cost constrained component update and state-feedback recovery from path covariances.

use nalgebra::{DMatrix, DVector};

use gmmsteer_conic::{AffMat, ConicProgram, LinExpr};

use super::terminal::{add_epigraph, declare_terminal, sandwich, wasserstein_term};
use super::{BcdState, Instance, BUDGET_MARGIN};
use crate::covsteer::SDP_TOL;
use crate::error::{dim_err, Result, SteerError};
use crate::hard::build_cost_matrix;
use crate::gaussian::Gmm;
use crate::linalg::{cholesky, inv_sqrtm_pd, max_eigenvalue, spd_inverse, sqrtm_psd, sym_eigen, symmetrize};
use crate::policy::PolicyBlock;
use crate::system::{CostWeights, LinearSystem, SteeringOperators};
use crate::transport::gmm_cost_matrix;

/// Relative slack of `M − Y Σ⁻¹ Yᵀ` above which the per-step recovery is used.
const RANK_SLACK: f64 = 1e-6;
/// Weight of the summed scaled step costs added to the Wasserstein objective; keeps the
/// relaxation tight.
const EFFORT_WEIGHT: f64 = 1e-4;

fn selector(k: usize, block: usize, count: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(block, block * count);
    p.view_mut((0, k * block), (block, block)).fill_with_identity();
    p
}

struct StepTerms {
    /// Rows of `[R̃^{1/2} P_kᵘ; Q̃^{1/2} P_kˣ H_u]`.
    a: DMatrix<f64>,
    q_half: Option<DMatrix<f64>>,
    /// `P_kᵘᵀ R̃ P_kᵘ + H_kᵀ Q̃ H_k`.
    c_m: DMatrix<f64>,
    q: DMatrix<f64>,
    gamma_k: DMatrix<f64>,
    hu_k: DMatrix<f64>,
    x_ref: DVector<f64>,
}

fn step_terms(ops: &SteeringOperators<f64>, w: &CostWeights<f64>, k: usize) -> Result<StepTerms> {
    let (n, m, horizon) = (ops.n(), ops.m(), ops.horizon());
    let pu = selector(k, m, horizon);
    let hu_k = ops.hu().rows(k * n, n).into_owned();
    let gamma_k = ops.gamma().rows(k * n, n).into_owned();
    let r_half = sqrtm_psd(w.r(k))?;
    let q = w.q(k).clone();
    let q_half = if q.amax() > 0.0 { Some(sqrtm_psd(&q)?) } else { None };
    let mut a = &r_half * &pu;
    if let Some(qh) = &q_half {
        let lower = qh * &hu_k;
        let mut stacked = DMatrix::zeros(a.nrows() + n, a.ncols());
        stacked.view_mut((0, 0), a.shape()).copy_from(&a);
        stacked.view_mut((a.nrows(), 0), lower.shape()).copy_from(&lower);
        a = stacked;
    }
    let c_m = pu.transpose() * w.r(k) * &pu + hu_k.transpose() * &q * &hu_k;
    Ok(StepTerms { a, q_half, c_m, q, gamma_k, hu_k, x_ref: w.x_ref(k).clone() })
}

struct PairVars {
    i: usize,
    j: usize,
    ubar: gmmsteer_conic::VectorVar,
    m: gmmsteer_conic::SymVar,
    y: gmmsteer_conic::MatrixVar,
}

pub(super) fn solve_step_blocks(inst: &Instance, st: &BcdState, slack_phase: bool) -> Result<BcdState> {
    let ops = inst.ctx.ops();
    let (n, horizon) = (ops.n(), ops.horizon());
    let nm = horizon * ops.m();
    let mut terms = Vec::with_capacity(horizon * inst.step_weights.len());
    for sw in &inst.step_weights {
        for k in 0..horizon {
            terms.push(step_terms(ops, sw, k)?);
        }
    }
    let phi = ops.phi_n0();
    let bn = ops.bn();

    let mut p = ConicProgram::new();
    let slack = slack_phase.then(|| p.scalar("slack"));
    let mut loads = vec![LinExpr::zero(); terms.len()];
    let mut wass = LinExpr::zero();
    let mut terminals = Vec::new();
    let mut pairs = Vec::new();
    for j in 0..st.q() {
        let active: Vec<usize> = (0..inst.r()).filter(|&i| st.lambda_tilde[(i, j)] > 0.0).collect();
        if active.is_empty() {
            terminals.push(None);
            continue;
        }
        let tv = declare_terminal(&mut p, inst, j, st.terminal[j].cov())?;
        if !slack_phase {
            wass = wass + wasserstein_term(&mut p, inst, st, j, &tv)?;
        }
        for &i in &active {
            let lt = st.lambda_tilde[(i, j)];
            let c = inst.initial.component(i);
            let s0_half = sqrtm_psd(c.cov())?;
            let ubar = p.vector(&format!("U{i}_{j}"), nm);
            let mm = p.symmetric(&format!("M{i}_{j}"), nm);
            let y = p.matrix(&format!("Yp{i}_{j}"), nm, n);
            p.add_psd(&AffMat::block2(&mm.affine(), &y.affine(), &y.affine().transpose(), &AffMat::identity(n)));

            let mean_rhs = AffMat::lmul(bn, &ubar.affine()).plus_const(&DMatrix::from_column_slice(n, 1, (phi * c.mean()).as_slice()));
            p.add_eq_mat(&tv.mean.affine(), &mean_rhs);
            let cross = AffMat::lmul(bn, &y.affine()).rmul(&(&s0_half * phi.transpose()));
            let cov_rhs = cross.plus(&cross.transpose()).plus(&sandwich(bn, &mm.affine())).plus_const(&(phi * c.cov() * phi.transpose()));
            p.add_eq_sym(&tv.cov, &cov_rhs);

            for (k, tk) in terms.iter().enumerate() {
                let e = p.scalar(&format!("e{i}_{j}_{k}"));
                let mut offset = DVector::zeros(tk.a.nrows());
                if let Some(qh) = &tk.q_half {
                    let b = qh * (&tk.gamma_k * c.mean() - &tk.x_ref);
                    offset.rows_mut(tk.a.nrows() - n, n).copy_from(&b);
                }
                let v = AffMat::lmul(&tk.a, &ubar.affine()).plus_const(&DMatrix::from_column_slice(offset.len(), 1, offset.as_slice()));
                add_epigraph(&mut p, e.expr(), &v);
                let c_y = tk.hu_k.transpose() * &tk.q * &tk.gamma_k * &s0_half * 2.0;
                let konst = (&tk.q * &tk.gamma_k * c.cov() * tk.gamma_k.transpose()).trace();
                let lin = mm.affine().inner(&tk.c_m) + y.affine().inner(&c_y) + LinExpr::constant(konst);
                loads[k] = loads[k].clone() + (e.expr() + lin) * lt;
            }
            pairs.push(PairVars { i, j, ubar, m: mm, y });
        }
        terminals.push(Some(tv));
    }
    let effort = loads.iter().fold(LinExpr::zero(), |acc, l| acc + l.clone());
    for load in loads {
        match slack {
            Some(s) => p.add_le(load, s.expr()),
            None => p.add_le(load, LinExpr::constant(1.0 - BUDGET_MARGIN)),
        }
    }
    match slack {
        Some(s) => p.minimize(s.expr()),
        None => p.minimize(wass + effort * EFFORT_WEIGHT),
    }
    let sol = p.solve(SDP_TOL);
    if !sol.is_optimal() {
        return Err(SteerError::SolverFailure { status: format!("{:?}", sol.status), detail: sol.detail });
    }

    let mut out = st.clone();
    for (j, tv) in terminals.iter().enumerate() {
        if let Some(tv) = tv {
            let mean = sol.vector(&tv.mean);
            let cov = &tv.root * sol.symmetric(&tv.s) * &tv.root;
            out.terminal[j] = inst.floored(mean, &cov)?;
        }
    }
    let q = st.q();
    let targets = Gmm::new(DVector::from_element(q, 1.0 / q as f64), out.terminal.clone())?;
    out.blocks = build_cost_matrix(&inst.pair_ctx, &inst.initial, &targets)?.blocks;
    out.t = gmm_cost_matrix(&targets, &inst.desired)?;

    let sys = inst.system();
    for pv in &pairs {
        let c = inst.initial.component(pv.i);
        let s0_half = sqrtm_psd(c.cov())?;
        let ubar = sol.vector(&pv.ubar);
        let m = symmetrize(&sol.symmetric(&pv.m));
        let yp = sol.matrix(&pv.y);
        let gap = max_eigenvalue(&symmetrize(&(&m - &yp * yp.transpose())));
        let l = if gap <= RANK_SLACK * m.amax().max(1.0) {
            yp * inv_sqrtm_pd(c.cov())?
        } else {
            let y = &yp * &s0_half;
            let g = ops.gamma();
            let hu = ops.hu();
            let cross = hu * &y * g.transpose();
            let path = g * c.cov() * g.transpose() + &cross + cross.transpose() + hu * &m * hu.transpose();
            match recover_feedback(&symmetrize(&path), sys, inst.ctx.weights()) {
                Ok(l) => l,
                Err(SteerError::SolverFailure { .. } | SteerError::RecoveryFailure(_) | SteerError::SingularStepCovariance(_)) => yp * inv_sqrtm_pd(c.cov())?,
                Err(e) => return Err(e),
            }
        };
        let target = &out.terminal[pv.j];
        let block = polish(ops, c.mean(), c.cov(), PolicyBlock { ubar, l }, target.mean(), target.cov())?;
        out.blocks[pv.i * q + pv.j] = block;
    }
    inst.evaluate_steps(&mut out)?;
    Ok(out)
}

/// Minimal corrections of `(Ū, L)` so that the pair lands exactly on `𝒩(μ_t, Σ_t)`.
pub(super) fn polish(
    ops: &SteeringOperators<f64>,
    mu0: &DVector<f64>,
    s0: &DMatrix<f64>,
    block: PolicyBlock<f64>,
    mu_t: &DVector<f64>,
    s_t: &DMatrix<f64>,
) -> Result<PolicyBlock<f64>> {
    let bn = ops.bn();
    let pinv = bn.transpose() * spd_inverse(ops.grammian(), "controllability Grammian")?;
    let ubar = &block.ubar + &pinv * (mu_t - ops.phi_n0() * mu0 - bn * &block.ubar);
    let a = ops.phi_n0() + bn * &block.l;
    let reached = symmetrize(&(&a * s0 * a.transpose()));
    cholesky(&reached, "reached terminal covariance").map_err(|_| SteerError::RecoveryFailure("feedback collapses the terminal covariance".into()))?;
    // Monge map between the reached and the target zero-mean Gaussians.
    let rh = sqrtm_psd(&reached)?;
    let rih = inv_sqrtm_pd(&reached)?;
    let map = &rih * sqrtm_psd(&symmetrize(&(&rh * s_t * &rh)))? * &rih;
    let l = &block.l + &pinv * (&map * &a - &a);
    Ok(PolicyBlock { ubar, l })
}

/// Orthonormal bases of `range(B)` and its complement.
fn range_split(b: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let e = sym_eigen(&(b * b.transpose()));
    let tol = 1e-12 * e.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let (inside, outside): (Vec<usize>, Vec<usize>) = (0..b.nrows()).partition(|&i| e.eigenvalues[i] > tol);
    let pick = |idx: &[usize]| DMatrix::from_fn(b.nrows(), idx.len(), |r, c| e.eigenvectors[(r, idx[c])]);
    (pick(&inside), pick(&outside))
}

/// State-feedback gains reproducing the per-step covariances of a path covariance
/// `Σ̄` (`(N+1)n` square), returned as the stacked initial-state feedback `L` (`Nm × n`).
pub fn recover_feedback(sigma_path: &DMatrix<f64>, sys: &LinearSystem<f64>, w: &CostWeights<f64>) -> Result<DMatrix<f64>> {
    let (n, m, horizon) = (sys.n(), sys.m(), sys.horizon());
    if sigma_path.shape() != ((horizon + 1) * n, (horizon + 1) * n) {
        return Err(dim_err(format!("path covariance is {:?}, expected {1}×{1}", sigma_path.shape(), (horizon + 1) * n)));
    }
    w.check_against(sys)?;
    let block = |k: usize| symmetrize(&sigma_path.view((k * n, k * n), (n, n)).into_owned());
    let mut l = DMatrix::zeros(horizon * m, n);
    let mut transfer = DMatrix::<f64>::identity(n, n);
    for k in 0..horizon {
        let sk = block(k);
        if cholesky(&sk, "step covariance").is_err() || sym_eigen(&sk).eigenvalues.min() <= 1e-14 * sk.amax().max(1.0) {
            return Err(SteerError::SingularStepCovariance(k));
        }
        let next = block(k + 1);
        let (a, b) = (sys.a(k), sys.b(k));
        let sk_half = sqrtm_psd(&sk)?;
        let mut p = ConicProgram::new();
        let mm = p.symmetric("M", m);
        let y = p.matrix("Y", m, n);
        p.add_psd(&AffMat::block2(&mm.affine(), &y.affine(), &y.affine().transpose(), &AffMat::identity(n)));
        let cross = AffMat::lmul(b, &y.affine()).rmul(&(&sk_half * a.transpose()));
        let rhs = cross.plus(&cross.transpose()).plus(&sandwich(b, &mm.affine())).plus_const(&(a * &sk * a.transpose()));
        // Only the components touching range(B) involve the variables; the rest must already agree.
        let (u1, u2) = range_split(b);
        let gap = &next - a * &sk * a.transpose();
        if u2.ncols() > 0 {
            let off = (u2.transpose() * &gap * &u2).amax();
            if off > 1e-6 * next.amax().max(1.0) {
                return Err(SteerError::RecoveryFailure(format!("step {k}: covariance change of {off:e} outside the input range")));
            }
        }
        p.add_eq_sym(&AffMat::constant(&(u1.transpose() * &next * &u1)), &AffMat::lmul(&u1.transpose(), &rhs).rmul(&u1));
        if u2.ncols() > 0 {
            p.add_eq_mat(&AffMat::constant(&(u1.transpose() * &next * &u2)), &AffMat::lmul(&u1.transpose(), &rhs).rmul(&u2));
        }
        p.minimize(mm.affine().inner(w.r(k)));
        let sol = p.solve(SDP_TOL);
        if !sol.is_optimal() {
            return Err(SteerError::SolverFailure { status: format!("{:?}", sol.status), detail: format!("step {k}: {}", sol.detail) });
        }
        let gain = sol.matrix(&y) * inv_sqrtm_pd(&sk)?;
        l.view_mut((k * m, 0), (m, n)).copy_from(&(&gain * &transfer));
        transfer = (a + b * &gain) * transfer;
    }
    Ok(l)
}
