use std::panic::{catch_unwind, AssertUnwindSafe};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
    SupportedConeT::{NonnegativeConeT, PSDTriangleConeT, ZeroConeT},
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::expr::LinExpr;
use crate::program::{
    block_value, matrix_value, sym_value, vector_value, BlockInfo, ConicProgram, MatrixVar, ScalarVar, SymVar,
    VectorVar,
};

pub const DEFAULT_TOL: f64 = 1e-8;
const RESIDUAL_TOL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConicStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalTrouble,
}

#[derive(Clone, Debug)]
pub struct ConicSolution {
    pub status: ConicStatus,
    pub objective_value: f64,
    pub x: Vec<f64>,
    pub iterations: u32,
    /// Backend status text, kept for diagnostics.
    pub detail: String,
    /// Largest relative violation of equalities and nonnegativity rows.
    pub primal_residual: f64,
    /// Smallest relative eigenvalue across PSD constraints (0 when none).
    pub min_psd_eigenvalue: f64,
    blocks: Vec<BlockInfo>,
}

impl ConicSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == ConicStatus::Optimal
    }

    pub fn scalar(&self, v: ScalarVar) -> f64 {
        self.x[v.index()]
    }

    pub fn vector(&self, v: &VectorVar) -> DVector<f64> {
        vector_value(v, &self.x)
    }

    pub fn matrix(&self, v: &MatrixVar) -> DMatrix<f64> {
        matrix_value(v, &self.x)
    }

    pub fn symmetric(&self, v: &SymVar) -> DMatrix<f64> {
        sym_value(v, &self.x)
    }

    pub fn eval(&self, e: &LinExpr) -> f64 {
        e.eval(&self.x)
    }

    /// Value of a block by the name it was declared with.
    pub fn block(&self, name: &str) -> Option<DMatrix<f64>> {
        self.blocks.iter().find(|b| b.name == name).map(|b| block_value(b, &self.x))
    }

    fn failed(status: ConicStatus, detail: String, p: &ConicProgram) -> Self {
        Self {
            status,
            objective_value: f64::NAN,
            x: vec![f64::NAN; p.num_vars()],
            iterations: 0,
            detail,
            primal_residual: f64::INFINITY,
            min_psd_eigenvalue: f64::NEG_INFINITY,
            blocks: p.blocks().to_vec(),
        }
    }
}

fn row_scale(e: &LinExpr, x: &[f64]) -> f64 {
    1.0 + e.constant_term().abs() + e.terms().iter().map(|&(i, c)| (c * x[i]).abs()).sum::<f64>()
}

/// Relative primal residual and smallest relative PSD eigenvalue of `x` for `p`.
pub fn check_residuals(p: &ConicProgram, x: &[f64]) -> (f64, f64) {
    let mut res: f64 = 0.0;
    for e in p.equalities() {
        res = res.max(e.eval(x).abs() / row_scale(e, x));
    }
    for e in p.nonnegatives() {
        res = res.max((-e.eval(x)).max(0.0) / row_scale(e, x));
    }
    let mut min_eig: f64 = 0.0;
    for c in p.psd_constraints() {
        let m = c.eval(x);
        let scale = 1.0 + m.amax();
        let eig = SymmetricEigen::new(m).eigenvalues.min();
        min_eig = min_eig.min(eig / scale);
    }
    (res, min_eig)
}

/// Solves `p` by a primal-dual interior-point method to relative tolerance `tol`.
pub fn solve_conic(p: &ConicProgram, tol: f64) -> ConicSolution {
    let n = p.num_vars();
    let mut rows_i = Vec::new();
    let mut rows_j = Vec::new();
    let mut vals = Vec::new();
    let mut b = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

    let mut push_row = |e: &LinExpr, scale: f64, rows_i: &mut Vec<usize>, b: &mut Vec<f64>| {
        let r = b.len();
        for &(j, c) in e.terms() {
            rows_i.push(r);
            rows_j.push(j);
            vals.push(-c * scale);
        }
        b.push(e.constant_term() * scale);
    };

    if !p.equalities().is_empty() {
        for e in p.equalities() {
            push_row(e, 1.0, &mut rows_i, &mut b);
        }
        cones.push(ZeroConeT(p.equalities().len()));
    }
    if !p.nonnegatives().is_empty() {
        for e in p.nonnegatives() {
            push_row(e, 1.0, &mut rows_i, &mut b);
        }
        cones.push(NonnegativeConeT(p.nonnegatives().len()));
    }
    for c in p.psd_constraints() {
        for j in 0..c.dim {
            for i in 0..=j {
                let s = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                push_row(c.entry(i, j), s, &mut rows_i, &mut b);
            }
        }
        cones.push(PSDTriangleConeT(c.dim));
    }

    let mut q = vec![0.0; n];
    for &(j, c) in p.objective().terms() {
        q[j] += c;
    }

    if b.is_empty() {
        return if q.iter().all(|&c| c == 0.0) {
            let x = vec![0.0; n];
            ConicSolution {
                status: ConicStatus::Optimal,
                objective_value: p.objective().constant_term(),
                x,
                iterations: 0,
                detail: "trivial".into(),
                primal_residual: 0.0,
                min_psd_eigenvalue: 0.0,
                blocks: p.blocks().to_vec(),
            }
        } else {
            ConicSolution::failed(ConicStatus::Unbounded, "unconstrained linear objective".into(), p)
        };
    }

    let m = b.len();
    let a = CscMatrix::new_from_triplets(m, n, rows_i, rows_j, vals);
    let pmat = CscMatrix::<f64>::zeros((n, n));
    let settings = match DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(400)
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .tol_feas(tol)
        .build()
    {
        Ok(s) => s,
        Err(e) => return ConicSolution::failed(ConicStatus::NumericalTrouble, format!("settings: {e:?}"), p),
    };

    let run = catch_unwind(AssertUnwindSafe(|| -> Result<(SolverStatus, Vec<f64>, u32), String> {
        let mut solver = DefaultSolver::new(&pmat, &q, &a, &b, &cones, settings).map_err(|e| format!("{e:?}"))?;
        solver.solve();
        Ok((solver.solution.status, solver.solution.x.clone(), solver.solution.iterations))
    }));

    let (status, x, iterations) = match run {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => return ConicSolution::failed(ConicStatus::NumericalTrouble, e, p),
        Err(_) => return ConicSolution::failed(ConicStatus::NumericalTrouble, "backend panicked".into(), p),
    };

    let detail = format!("{status:?}");
    let mapped = match status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => ConicStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => ConicStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => ConicStatus::Unbounded,
        _ => ConicStatus::NumericalTrouble,
    };
    if mapped != ConicStatus::Optimal {
        let mut s = ConicSolution::failed(mapped, detail, p);
        s.iterations = iterations;
        return s;
    }

    let (primal_residual, min_psd_eigenvalue) = check_residuals(p, &x);
    let status = if primal_residual <= RESIDUAL_TOL && min_psd_eigenvalue >= -RESIDUAL_TOL {
        ConicStatus::Optimal
    } else {
        ConicStatus::NumericalTrouble
    };
    ConicSolution {
        status,
        objective_value: p.objective().eval(&x),
        x,
        iterations,
        detail,
        primal_residual,
        min_psd_eigenvalue,
        blocks: p.blocks().to_vec(),
    }
}

impl ConicProgram {
    pub fn solve(&self, tol: f64) -> ConicSolution {
        solve_conic(self, tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::AffMat;

    #[test]
    fn scalar_nonneg_minimum_is_zero() {
        let mut p = ConicProgram::new();
        let x = p.scalar("x");
        p.add_nonneg(x.expr());
        p.minimize(x.expr());
        let s = p.solve(DEFAULT_TOL);
        assert!(s.is_optimal());
        assert!(s.objective_value.abs() < 1e-7);
    }

    #[test]
    fn scalar_nuclear_norm_sdp() {
        let mut p = ConicProgram::new();
        let l = p.matrix("L", 1, 1);
        let one = AffMat::identity(1);
        let la = l.affine();
        p.add_psd(&AffMat::block2(&one, &la, &la.transpose(), &one));
        p.minimize(la.trace().scaled(2.0));
        let s = p.solve(DEFAULT_TOL);
        assert!(s.is_optimal());
        assert!((s.objective_value + 2.0).abs() < 1e-7);
        assert!((s.matrix(&l)[(0, 0)] + 1.0).abs() < 1e-6);
        assert!((s.block("L").unwrap()[(0, 0)] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_detected() {
        let mut p = ConicProgram::new();
        let x = p.scalar("x");
        p.add_nonneg(x.expr() - 1.0);
        p.add_nonneg(-x.expr());
        p.minimize(x.expr());
        assert_eq!(p.solve(DEFAULT_TOL).status, ConicStatus::Infeasible);
    }

    #[test]
    fn unbounded_detected() {
        let mut p = ConicProgram::new();
        let x = p.scalar("x");
        p.add_nonneg(-x.expr());
        p.minimize(x.expr());
        assert_eq!(p.solve(DEFAULT_TOL).status, ConicStatus::Unbounded);
    }

    #[test]
    fn equality_and_symmetric_block() {
        // min tr(S) s.t. S ⪰ [[2,1],[1,2]], S_01 = 1
        let mut p = ConicProgram::new();
        let s = p.symmetric("S", 2);
        let target = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        p.add_psd(&s.affine().minus(&AffMat::constant(&target)));
        p.add_eq(s.at(0, 1) - 1.0);
        p.minimize(s.affine().trace());
        let sol = p.solve(DEFAULT_TOL);
        assert!(sol.is_optimal());
        assert!((sol.objective_value - 4.0).abs() < 1e-6);
        assert!((sol.symmetric(&s) - target).amax() < 1e-5);
    }
}
