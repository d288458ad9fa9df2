//! Terminal-component conic program for the soft, total-cost and slack updates.
//!
//! Every terminal covariance is written as `Σ_j = R_j S_j R_j` with `R_j` the square root of the
//! previous iterate, and each LMI is congruence-scaled so that it is close to the identity there.

use nalgebra::{DMatrix, DVector};

use gmmsteer_conic::{AffMat, ConicProgram, LinExpr};

use super::{BcdState, Instance, BUDGET_MARGIN};
use crate::covsteer::SDP_TOL;
use crate::error::{Result, SteerError};
use crate::linalg::{cholesky, sqrtm_psd, sym_eigen, symmetrize};

pub(super) enum Objective {
    Soft(f64),
    Total(f64),
    Slack,
}

pub(super) fn sandwich(a: &DMatrix<f64>, x: &AffMat) -> AffMat {
    AffMat::lmul(a, x).rmul(&a.transpose())
}

pub(super) fn scalar_block(e: LinExpr) -> AffMat {
    AffMat::from_fn(1, 1, |_, _| e.clone())
}

/// `[[e, vᵀ], [v, I]] ⪰ 0`, i.e. `e ≥ ‖v‖²`.
pub(super) fn add_epigraph(p: &mut ConicProgram, e: LinExpr, v: &AffMat) {
    let k = v.nrows();
    p.add_psd(&AffMat::block2(&scalar_block(e), &v.transpose(), v, &AffMat::identity(k)));
}

/// `(P, P⁻¹)` with `P = A^{-1/2}`, eigenvalues of `A` floored at `1e−12 max(1, λ_max)`.
pub(super) fn inverse_root_pair(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let e = sym_eigen(&symmetrize(a));
    let floor = e.eigenvalues.max().max(1.0) * 1e-12;
    let lam = e.eigenvalues.map(|x| x.max(floor));
    let v = &e.eigenvectors;
    let p = v * DMatrix::from_diagonal(&lam.map(|x| 1.0 / x.sqrt())) * v.transpose();
    let p_inv = v * DMatrix::from_diagonal(&lam.map(f64::sqrt)) * v.transpose();
    (p, p_inv)
}

/// Terminal mean/covariance variables of one component.
pub(super) struct TerminalVars {
    pub mean: gmmsteer_conic::VectorVar,
    pub s: gmmsteer_conic::SymVar,
    pub root: DMatrix<f64>,
    pub cov: AffMat,
}

pub(super) fn declare_terminal(p: &mut ConicProgram, inst: &Instance, j: usize, reference: &DMatrix<f64>) -> Result<TerminalVars> {
    let n = inst.n();
    let mean = p.vector(&format!("mu{j}"), n);
    let s = p.symmetric(&format!("S{j}"), n);
    let root = sqrtm_psd(reference)?;
    let cov = sandwich(&root, &s.affine());
    p.add_psd(&cov.plus_const(&(DMatrix::identity(n, n) * -inst.cov_floor)));
    Ok(TerminalVars { mean, s, root, cov })
}

/// `Σ_l β_jl W²(𝒩(μ_j, Σ_j), desired_l)` as an affine expression with its LMIs.
pub(super) fn wasserstein_term(p: &mut ConicProgram, inst: &Instance, st: &BcdState, j: usize, tv: &TerminalVars) -> Result<LinExpr> {
    let n = inst.n();
    let b: f64 = st.beta.row(j).sum();
    if b <= 0.0 {
        return Ok(LinExpr::zero());
    }
    let mut d = DVector::zeros(n);
    for l in 0..inst.t() {
        d += inst.desired.component(l).mean() * st.beta[(j, l)];
    }
    d /= b;
    let w = p.scalar(&format!("w{j}"));
    add_epigraph(p, w.expr(), &tv.mean.affine().plus_const(&DMatrix::from_column_slice(n, 1, (-&d).as_slice())));
    let mut expr = w.expr() * b + tv.cov.trace() * b;
    for l in 0..inst.t() {
        let bl = st.beta[(j, l)];
        if bl <= 0.0 {
            continue;
        }
        let dl = inst.desired.component(l);
        let c = dl.mean() - &d;
        expr = expr + LinExpr::constant(bl * (c.norm_squared() + dl.cov().trace()));
        let y = p.matrix(&format!("Y{j}_{l}"), n, n);
        p.add_psd(&AffMat::block2(&tv.s.affine(), &y.affine(), &y.affine().transpose(), &AffMat::identity(n)));
        let coef = &tv.root * sqrtm_psd(dl.cov())?;
        expr = expr + y.affine().inner(&coef).scaled(-2.0 * bl);
    }
    Ok(expr)
}

pub(super) fn solve_terminal(inst: &Instance, st: &BcdState, obj: Objective) -> Result<BcdState> {
    let n = inst.n();
    let ctx = &inst.pair_ctx;
    let th = ctx.thetas();
    let f = cholesky(ctx.s_inv(), "S⁻¹")?.l().transpose();
    let mut p = ConicProgram::new();
    let mut cost = LinExpr::zero();
    let mut wass = LinExpr::zero();
    let mut vars = Vec::new();
    for j in 0..st.q() {
        let a: f64 = st.lambda_tilde.column(j).sum();
        let b: f64 = st.beta.row(j).sum();
        let uses_t = !matches!(obj, Objective::Slack) && b > 0.0;
        if a <= 0.0 && !uses_t {
            vars.push(None);
            continue;
        }
        let reference = st.terminal[j].cov().clone();
        let tv = declare_terminal(&mut p, inst, j, &reference)?;
        if a > 0.0 {
            let mut m = DVector::zeros(n);
            for i in 0..inst.r() {
                m += &inst.mean_quads[i].center * st.lambda_tilde[(i, j)];
            }
            m /= a;
            let mut konst = 0.0;
            for i in 0..inst.r() {
                let lt = st.lambda_tilde[(i, j)];
                if lt > 0.0 {
                    let mq = &inst.mean_quads[i];
                    let dm = &m - &mq.center;
                    konst += lt * (mq.offset + dm.dot(&(ctx.s_inv() * &dm)));
                }
            }
            let e = p.scalar(&format!("e{j}"));
            let v = AffMat::lmul(&f, &tv.mean.affine()).plus_const(&DMatrix::from_column_slice(n, 1, (-(&f * &m)).as_slice()));
            add_epigraph(&mut p, e.expr(), &v);
            cost = cost + e.expr() * a + LinExpr::constant(konst);

            let (pj, pj_inv) = inverse_root_pair(&(&th.theta8 * &reference * th.theta8.transpose()));
            let top = sandwich(&(&pj * &th.theta8 * &tv.root), &tv.s.affine());
            cost = cost + tv.cov.inner(&th.theta6) * a;
            for i in 0..inst.r() {
                let lt = st.lambda_tilde[(i, j)];
                if lt <= 0.0 {
                    continue;
                }
                let s0 = inst.initial.component(i).cov();
                let l = p.matrix(&format!("L{i}_{j}"), n, n);
                p.add_psd(&AffMat::block2(&top, &l.affine(), &l.affine().transpose(), &AffMat::identity(n)));
                let coef = &pj_inv * sqrtm_psd(s0)?;
                cost = cost + l.affine().inner(&coef).scaled(2.0 * lt) + LinExpr::constant(lt * (&th.theta7 * s0).trace());
            }
        }
        if uses_t {
            wass = wass + wasserstein_term(&mut p, inst, st, j, &tv)?;
        }
        vars.push(Some(tv));
    }
    match obj {
        Objective::Soft(kappa) => p.minimize(cost + wass * kappa),
        Objective::Slack => p.minimize(cost),
        Objective::Total(kappa) => {
            p.add_le(cost, LinExpr::constant(kappa - BUDGET_MARGIN * kappa.max(1.0)));
            p.minimize(wass);
        }
    }
    let sol = p.solve(SDP_TOL);
    if !sol.is_optimal() {
        return Err(SteerError::SolverFailure { status: format!("{:?}", sol.status), detail: sol.detail });
    }
    let mut out = st.clone();
    for (j, tv) in vars.iter().enumerate() {
        if let Some(tv) = tv {
            let mean = sol.vector(&tv.mean);
            let cov = &tv.root * sol.symmetric(&tv.s) * &tv.root;
            out.terminal[j] = inst.floored(mean, &cov)?;
        }
    }
    inst.evaluate_closed_form(&mut out)?;
    Ok(out)
}
