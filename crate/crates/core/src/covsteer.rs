//! Closed-form mean and covariance steering between two Gaussians, and the equivalent SDP value.

use gmmsteer_conic::{AffMat, ConicProgram, LinExpr};
use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{dim_err, Result, SteerError};
use crate::linalg::{cholesky, inv_sqrtm_pd, spd_inverse, sqrtm_psd, sym_eigen, symmetrize};
use crate::scalar::{cast, Real};
use crate::system::{require_controllable, CostWeights, LinearSystem, SteeringOperators};

/// `M = R̂ + H_uᵀ Q̂ H_u` and the matrices `Θ1 … Θ8` of the covariance steering solution.
#[derive(Clone, Debug)]
pub struct ThetaSet<T: Real> {
    pub m: DMatrix<T>,
    pub theta1: DMatrix<T>,
    pub theta2: DMatrix<T>,
    pub theta3: DMatrix<T>,
    pub theta4: DMatrix<T>,
    pub theta5: DMatrix<T>,
    pub theta6: DMatrix<T>,
    pub theta7: DMatrix<T>,
    pub theta8: DMatrix<T>,
    /// `K = Θ1 B_Nᵀ G⁻¹`, the map from the terminal transition to the feedback stack.
    pub k: DMatrix<T>,
}

#[derive(Clone, Debug)]
pub struct MeanSteerSolution<T: Real> {
    pub ubar: DVector<T>,
    pub cost: T,
    pub multiplier: DVector<T>,
}

#[derive(Clone, Debug)]
pub struct CovSteerSolution<T: Real> {
    /// Feedback stack `Nm × n`.
    pub l: DMatrix<T>,
    pub cost: T,
    pub t: DMatrix<T>,
    pub z: DMatrix<T>,
    pub omega: DMatrix<T>,
    pub h: DMatrix<T>,
}

/// Optimal mean cost as a function of the terminal mean: `c_u + (μ_d − μ*)ᵀ S⁻¹ (μ_d − μ*)`.
#[derive(Clone, Debug)]
pub struct MeanQuadratic<T: Real> {
    pub offset: T,
    pub center: DVector<T>,
}

pub fn build_thetas<T: Real>(ops: &SteeringOperators<T>, w: &CostWeights<T>) -> Result<ThetaSet<T>> {
    require_controllable(ops)?;
    let q_hat = w.q_hat();
    let r_hat = w.r_hat();
    let hu = ops.hu();
    let bn = ops.bn();
    let phi = ops.phi_n0();
    let gamma = ops.gamma();
    let d = ops.null_basis();
    let nm = hu.ncols();

    let m = symmetrize(&(&r_hat + hu.transpose() * &q_hat * hu));
    let g_inv = spd_inverse(ops.grammian(), "controllability Grammian").map_err(|_| SteerError::SingularGrammian)?;
    let hq_gamma = hu.transpose() * &q_hat * gamma;

    let (theta1, theta2) = if d.ncols() == 0 {
        (DMatrix::identity(nm, nm), DMatrix::zeros(nm, ops.n()))
    } else {
        let dmd = symmetrize(&(d.transpose() * &m * d));
        let p_d = d * spd_inverse(&dmd, "Dᵀ M D")? * d.transpose();
        (DMatrix::identity(nm, nm) - &p_d * &m, &p_d * &hq_gamma)
    };
    let theta3 = bn.transpose() * &g_inv * phi;
    let theta4 = &theta1 * &theta3 + &theta2;
    let theta5 = gamma - hu * &theta4;
    let k = &theta1 * bn.transpose() * &g_inv;
    let theta6 = symmetrize(&(k.transpose() * &m * &k));
    let theta7 = symmetrize(&(theta4.transpose() * &r_hat * &theta4 + theta5.transpose() * &q_hat * &theta5));
    let theta8 = (theta5.transpose() * &q_hat * hu - theta4.transpose() * &r_hat) * &k;
    Ok(ThetaSet { m, theta1, theta2, theta3, theta4, theta5, theta6, theta7, theta8, k })
}

/// Operators, weights and the factorizations shared by every component-pair solve.
#[derive(Clone, Debug)]
pub struct SteeringContext<T: Real> {
    ops: SteeringOperators<T>,
    weights: CostWeights<T>,
    thetas: ThetaSet<T>,
    q_hat: DMatrix<T>,
    r_hat: DMatrix<T>,
    x_ref: DVector<T>,
    m_inv: DMatrix<T>,
    s_inv: DMatrix<T>,
    /// `H_uᵀ Q̂ Γ`
    hq_gamma: DMatrix<T>,
}

impl<T: Real> SteeringContext<T> {
    pub fn new(sys: &LinearSystem<T>, weights: &CostWeights<T>) -> Result<Self> {
        weights.check_against(sys)?;
        Self::from_operators(SteeringOperators::new(sys), weights.clone())
    }

    pub fn from_operators(ops: SteeringOperators<T>, weights: CostWeights<T>) -> Result<Self> {
        if weights.horizon() != ops.horizon() || weights.n() != ops.n() || weights.m() != ops.m() {
            return Err(dim_err("cost weights do not match the system dimensions"));
        }
        let thetas = build_thetas(&ops, &weights)?;
        let m_inv = spd_inverse(&thetas.m, "M = R̂ + H_uᵀ Q̂ H_u")?;
        let s = symmetrize(&(ops.bn() * &m_inv * ops.bn().transpose()));
        let s_inv = spd_inverse(&s, "B_N M⁻¹ B_Nᵀ").map_err(|_| SteerError::SingularGrammian)?;
        let q_hat = weights.q_hat();
        let r_hat = weights.r_hat();
        let x_ref = weights.x_ref_stack();
        let hq_gamma = ops.hu().transpose() * &q_hat * ops.gamma();
        Ok(Self { ops, weights, thetas, q_hat, r_hat, x_ref, m_inv, s_inv, hq_gamma })
    }

    pub fn ops(&self) -> &SteeringOperators<T> {
        &self.ops
    }

    pub fn weights(&self) -> &CostWeights<T> {
        &self.weights
    }

    pub fn thetas(&self) -> &ThetaSet<T> {
        &self.thetas
    }

    pub fn q_hat(&self) -> &DMatrix<T> {
        &self.q_hat
    }

    pub fn r_hat(&self) -> &DMatrix<T> {
        &self.r_hat
    }

    pub fn n(&self) -> usize {
        self.ops.n()
    }

    pub fn nm(&self) -> usize {
        self.ops.hu().ncols()
    }

    /// `(B_N M⁻¹ B_Nᵀ)⁻¹`
    pub fn s_inv(&self) -> &DMatrix<T> {
        &self.s_inv
    }

    pub fn m_inv(&self) -> &DMatrix<T> {
        &self.m_inv
    }

    fn check_mean(&self, v: &DVector<T>, what: &str) -> Result<()> {
        if v.len() != self.n() {
            return Err(dim_err(format!("{what} has length {}, expected {}", v.len(), self.n())));
        }
        Ok(())
    }

    fn check_cov(&self, s: &DMatrix<T>, what: &str) -> Result<()> {
        if s.shape() != (self.n(), self.n()) {
            return Err(dim_err(format!("{what} is {:?}, expected {n}×{n}", s.shape(), n = self.n())));
        }
        cholesky(s, &format!("{what} is not positive definite")).map(|_| ())
    }

    /// `(Y, g)` with `Y = Γ μ0 − X'` and `g = H_uᵀ Q̂ Y`.
    fn mean_terms(&self, mu0: &DVector<T>) -> (DVector<T>, DVector<T>) {
        let y = self.ops.gamma() * mu0 - &self.x_ref;
        let g = self.ops.hu().transpose() * (&self.q_hat * &y);
        (y, g)
    }

    pub fn mean_steer(&self, mu0: &DVector<T>, mud: &DVector<T>) -> Result<MeanSteerSolution<T>> {
        self.check_mean(mu0, "initial mean")?;
        self.check_mean(mud, "terminal mean")?;
        let bn = self.ops.bn();
        let (_, g) = self.mean_terms(mu0);
        let b = mud - self.ops.phi_n0() * mu0;
        let m_inv_g = &self.m_inv * &g;
        let two: T = cast(2.0);
        let multiplier = &self.s_inv * (bn * &m_inv_g + &b) * two;
        let ubar = &self.m_inv * (bn.transpose() * &multiplier - &g * two) * cast::<T>(0.5);
        let cost = self.mean_cost(mu0, &ubar);
        Ok(MeanSteerSolution { ubar, cost, multiplier })
    }

    /// `(Γμ0 + H_u Ū − X')ᵀ Q̂ (⋯) + Ūᵀ R̂ Ū`.
    pub fn mean_cost(&self, mu0: &DVector<T>, ubar: &DVector<T>) -> T {
        let e = self.ops.gamma() * mu0 + self.ops.hu() * ubar - &self.x_ref;
        e.dot(&(&self.q_hat * &e)) + ubar.dot(&(&self.r_hat * ubar))
    }

    pub fn mean_quadratic(&self, mu0: &DVector<T>) -> Result<MeanQuadratic<T>> {
        self.check_mean(mu0, "initial mean")?;
        let (y, g) = self.mean_terms(mu0);
        let m_inv_g = &self.m_inv * &g;
        let center = self.ops.phi_n0() * mu0 - self.ops.bn() * &m_inv_g;
        let offset = y.dot(&(&self.q_hat * &y)) - g.dot(&m_inv_g);
        Ok(MeanQuadratic { offset, center })
    }

    /// Optimal mean cost at terminal mean `mud` via the quadratic form.
    pub fn mean_cost_at(&self, q: &MeanQuadratic<T>, mud: &DVector<T>) -> T {
        let d = mud - &q.center;
        q.offset + d.dot(&(&self.s_inv * &d))
    }

    pub fn cov_steer(&self, sigma0: &DMatrix<T>, sigmad: &DMatrix<T>) -> Result<CovSteerSolution<T>> {
        self.check_cov(sigma0, "initial covariance")?;
        self.check_cov(sigmad, "terminal covariance")?;
        let th = &self.thetas;
        let bn = self.ops.bn();
        let s0_half = sqrtm_psd(sigma0)?;
        let s0_inv_half = inv_sqrtm_pd(sigma0)?;
        let sd_half = sqrtm_psd(sigmad)?;

        let omega = &s0_half * &th.theta8 * &sd_half;
        let svd = SVD::try_new(omega.clone(), true, true, T::default_epsilon(), 0).ok_or(SteerError::SvdFailure)?;
        let (u, vt) = (svd.u.ok_or(SteerError::SvdFailure)?, svd.v_t.ok_or(SteerError::SvdFailure)?);
        let t = -(vt.transpose() * u.transpose());
        let nuclear = svd.singular_values.iter().fold(T::zero(), |a, &s| a + s);

        let g_inv = spd_inverse(self.ops.grammian(), "controllability Grammian")?;
        let w = &sd_half * &t * &s0_inv_half;
        let h = bn.transpose() * &g_inv * (&w - self.ops.phi_n0());
        let d = self.ops.null_basis();
        let (l, z) = if d.ncols() == 0 {
            (h.clone(), DMatrix::zeros(0, self.n()))
        } else {
            let dmd = symmetrize(&(d.transpose() * &th.m * d));
            let z = -(spd_inverse(&dmd, "Dᵀ M D")? * d.transpose() * (&th.m * &h + &self.hq_gamma));
            (&h + d * &z, z)
        };
        let two: T = cast(2.0);
        let cost = (&th.theta6 * sigmad).trace() + (&th.theta7 * sigma0).trace() - two * nuclear;
        Ok(CovSteerSolution { l, cost, t, z, omega, h })
    }

    /// `tr([(Γ + H_u L)ᵀ Q̂ (Γ + H_u L) + Lᵀ R̂ L] Σ0)`.
    pub fn cov_cost(&self, sigma0: &DMatrix<T>, l: &DMatrix<T>) -> T {
        let x = self.ops.gamma() + self.ops.hu() * l;
        let p = x.transpose() * &self.q_hat * &x + l.transpose() * &self.r_hat * l;
        (p * sigma0).trace()
    }

    /// Closed-form cost without the feedback: `tr(Θ6 Σd) + tr(Θ7 Σ0) − 2 ‖Σ0^{1/2} Θ8 Σd^{1/2}‖_*`.
    pub fn cov_cost_closed_form(&self, sigma0: &DMatrix<T>, sigmad: &DMatrix<T>) -> Result<T> {
        let th = &self.thetas;
        let omega = sqrtm_psd(sigma0)? * &th.theta8 * sqrtm_psd(sigmad)?;
        let svd = SVD::try_new(omega, false, false, T::default_epsilon(), 0).ok_or(SteerError::SvdFailure)?;
        let nuclear = svd.singular_values.iter().fold(T::zero(), |a, &s| a + s);
        Ok((&th.theta6 * sigmad).trace() + (&th.theta7 * sigma0).trace() - nuclear * cast(2.0))
    }

    /// Terminal covariance `(Φ + B_N L) Σ0 (Φ + B_N L)ᵀ`.
    pub fn terminal_cov(&self, sigma0: &DMatrix<T>, l: &DMatrix<T>) -> DMatrix<T> {
        let a = self.ops.phi_n0() + self.ops.bn() * l;
        symmetrize(&(&a * sigma0 * a.transpose()))
    }

    pub fn terminal_mean(&self, mu0: &DVector<T>, ubar: &DVector<T>) -> DVector<T> {
        self.ops.phi_n0() * mu0 + self.ops.bn() * ubar
    }

    /// Unconstrained minimizer `Ū = −M⁻¹ g` of the mean cost.
    pub fn free_mean_control(&self, mu0: &DVector<T>) -> DVector<T> {
        let (_, g) = self.mean_terms(mu0);
        -(&self.m_inv * g)
    }

    /// Unconstrained minimizer `L = −M⁻¹ H_uᵀ Q̂ Γ` of the covariance cost.
    pub fn free_feedback(&self) -> DMatrix<T> {
        -(&self.m_inv * &self.hq_gamma)
    }

    /// Expected quadratic cost of the affine policy `U = Ū + L (x0 − μ0)` with `x0 ~ 𝒩(μ0, Σ0)`.
    pub fn policy_cost(&self, mu0: &DVector<T>, sigma0: &DMatrix<T>, ubar: &DVector<T>, l: &DMatrix<T>) -> T {
        self.mean_cost(mu0, ubar) + self.cov_cost(sigma0, l)
    }
}

pub fn mean_steer<T: Real>(
    ops: &SteeringOperators<T>,
    w: &CostWeights<T>,
    mu0: &DVector<T>,
    mud: &DVector<T>,
) -> Result<MeanSteerSolution<T>> {
    SteeringContext::from_operators(ops.clone(), w.clone())?.mean_steer(mu0, mud)
}

pub fn cov_steer<T: Real>(
    ops: &SteeringOperators<T>,
    w: &CostWeights<T>,
    sigma0: &DMatrix<T>,
    sigmad: &DMatrix<T>,
) -> Result<CovSteerSolution<T>> {
    SteeringContext::from_operators(ops.clone(), w.clone())?.cov_steer(sigma0, sigmad)
}

pub const SDP_TOL: f64 = 1e-10;

/// Optimal covariance steering cost as the SDP over an `n × n` coupling block `L`:
/// `min tr(Θ6 Σd) + tr(Θ7 Σ0) + tr(L + Lᵀ)` s.t. `[[Θ8 Σd Θ8ᵀ, L], [Lᵀ, Σ0]] ⪰ 0`.
pub fn cov_steer_sdp_value(ctx: &SteeringContext<f64>, sigma0: &DMatrix<f64>, sigmad: &DMatrix<f64>) -> Result<f64> {
    ctx.check_cov(sigma0, "initial covariance")?;
    ctx.check_cov(sigmad, "terminal covariance")?;
    let n = ctx.n();
    let th = ctx.thetas();
    let mut p = ConicProgram::new();
    let l = p.matrix("L", n, n);
    let la = l.affine();
    let top = symmetrize(&(&th.theta8 * sigmad * th.theta8.transpose()));
    // Congruence by P = A^{-1/2} (eigenvalues floored) and Q = Σ0^{-1/2}: the variable is P L Q.
    let e = sym_eigen(&top);
    let floor = e.eigenvalues.max().max(1.0) * 1e-12;
    let lam = e.eigenvalues.map(|x| x.max(floor));
    let v = &e.eigenvectors;
    let p_inv = v * DMatrix::from_diagonal(&lam.map(f64::sqrt)) * v.transpose();
    let scaled_top = v * DMatrix::from_diagonal(&e.eigenvalues.zip_map(&lam, |a, b| a / b)) * v.transpose();
    let q_inv = sqrtm_psd(sigma0)?;
    p.add_psd(&AffMat::block2(&AffMat::constant(&symmetrize(&scaled_top)), &la, &la.transpose(), &AffMat::identity(n)));
    let tr_l = la.inner(&(&p_inv * &q_inv));
    let constant = (&th.theta6 * sigmad).trace() + (&th.theta7 * sigma0).trace();
    p.minimize(tr_l.scaled(2.0) + LinExpr::constant(constant));
    let sol = p.solve(SDP_TOL);
    if !sol.is_optimal() {
        return Err(SteerError::SolverFailure { status: format!("{:?}", sol.status), detail: sol.detail });
    }
    Ok(sol.objective_value)
}
