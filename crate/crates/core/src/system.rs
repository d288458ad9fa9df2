//! Time-varying linear dynamics `x_{k+1} = A_k x_k + B_k u_k` and the stacked operators over a horizon.

use nalgebra::{ColPivQR, DMatrix, DVector};

use crate::error::{dim_err, Result, SteerError};
use crate::linalg::{block_diag, cholesky, max_eigenvalue, min_eigenvalue, symmetrize, sym_eigen};
use crate::scalar::{cast, tol, to_f64, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem<T: Real> {
    a: Vec<DMatrix<T>>,
    b: Vec<DMatrix<T>>,
    n: usize,
    m: usize,
}

impl<T: Real> LinearSystem<T> {
    pub fn new(a: Vec<DMatrix<T>>, b: Vec<DMatrix<T>>) -> Result<Self> {
        if a.is_empty() {
            return Err(dim_err("horizon must be at least 1"));
        }
        if a.len() != b.len() {
            return Err(dim_err(format!("{} state matrices but {} input matrices", a.len(), b.len())));
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        if n == 0 || m == 0 {
            return Err(dim_err("state and input dimensions must be positive"));
        }
        for (k, (ak, bk)) in a.iter().zip(&b).enumerate() {
            if ak.shape() != (n, n) {
                return Err(dim_err(format!("A_{k} is {:?}, expected ({n}, {n})", ak.shape())));
            }
            if bk.shape() != (n, m) {
                return Err(dim_err(format!("B_{k} is {:?}, expected ({n}, {m})", bk.shape())));
            }
        }
        Ok(Self { a, b, n, m })
    }

    pub fn time_invariant(a: DMatrix<T>, b: DMatrix<T>, horizon: usize) -> Result<Self> {
        Self::new(vec![a; horizon], vec![b; horizon])
    }

    /// `A = I`, `B = Δt I` in `dim` dimensions.
    pub fn single_integrator(dim: usize, dt: T, horizon: usize) -> Result<Self> {
        Self::time_invariant(DMatrix::identity(dim, dim), DMatrix::identity(dim, dim) * dt, horizon)
    }

    /// Position/velocity chain `A = [[I, Δt I], [0, I]]`, `B = [[Δt²/2 I], [I]]`.
    pub fn double_integrator(dim: usize, dt: T, horizon: usize) -> Result<Self> {
        let mut a = DMatrix::identity(2 * dim, 2 * dim);
        let mut b = DMatrix::zeros(2 * dim, dim);
        for i in 0..dim {
            a[(i, dim + i)] = dt;
            b[(i, i)] = dt * dt * cast::<T>(0.5);
            b[(dim + i, i)] = T::one();
        }
        Self::time_invariant(a, b, horizon)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self, k: usize) -> &DMatrix<T> {
        &self.a[k]
    }

    pub fn b(&self, k: usize) -> &DMatrix<T> {
        &self.b[k]
    }

    pub fn step(&self, k: usize, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        &self.a[k] * x + &self.b[k] * u
    }

    /// State stack `[x_0; …; x_N]` from `x0` and the input stack `[u_0; …; u_{N−1}]`.
    pub fn rollout(&self, x0: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        let (n, m, big_n) = (self.n, self.m, self.horizon());
        if x0.len() != n || u.len() != big_n * m {
            return Err(dim_err("rollout inputs do not match the system"));
        }
        let mut out = DVector::zeros((big_n + 1) * n);
        let mut x = x0.clone();
        out.rows_mut(0, n).copy_from(&x);
        for k in 0..big_n {
            x = self.step(k, &x, &u.rows(k * m, m).into_owned());
            out.rows_mut((k + 1) * n, n).copy_from(&x);
        }
        Ok(out)
    }
}

/// Stacked horizon operators: transitions, `Γ`, `H_u`, `B_N`, the Grammian and a null-space basis of `B_N`.
#[derive(Clone, Debug)]
pub struct SteeringOperators<T: Real> {
    n: usize,
    m: usize,
    horizon: usize,
    /// `Φ_{k2,k1}` stored at `k2 (k2 + 1) / 2 + k1`.
    phi: Vec<DMatrix<T>>,
    gamma: DMatrix<T>,
    hu: DMatrix<T>,
    bn: DMatrix<T>,
    grammian: DMatrix<T>,
    null_basis: DMatrix<T>,
}

pub fn build_operators<T: Real>(sys: &LinearSystem<T>) -> SteeringOperators<T> {
    SteeringOperators::new(sys)
}

impl<T: Real> SteeringOperators<T> {
    pub fn new(sys: &LinearSystem<T>) -> Self {
        let (n, m, big_n) = (sys.n(), sys.m(), sys.horizon());
        let mut phi = Vec::with_capacity((big_n + 1) * (big_n + 2) / 2);
        for k2 in 0..=big_n {
            for k1 in 0..=k2 {
                let p = if k1 == k2 {
                    DMatrix::identity(n, n)
                } else {
                    // Φ_{k2,k1} = A_{k2−1} Φ_{k2−1,k1}
                    sys.a(k2 - 1) * &phi[(k2 - 1) * k2 / 2 + k1]
                };
                phi.push(p);
            }
        }
        let at = |k2: usize, k1: usize| &phi[k2 * (k2 + 1) / 2 + k1];

        let mut gamma = DMatrix::zeros((big_n + 1) * n, n);
        for k in 0..=big_n {
            gamma.view_mut((k * n, 0), (n, n)).copy_from(at(k, 0));
        }
        let mut hu = DMatrix::zeros((big_n + 1) * n, big_n * m);
        for k in 1..=big_n {
            for j in 0..k {
                let blk = at(k, j + 1) * sys.b(j);
                hu.view_mut((k * n, j * m), (n, m)).copy_from(&blk);
            }
        }
        let bn = hu.rows(big_n * n, n).into_owned();
        let grammian = symmetrize(&(&bn * bn.transpose()));
        let null_basis = null_space_basis(&bn);
        Self { n, m, horizon: big_n, phi, gamma, hu, bn, grammian, null_basis }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `Φ_{k2,k1} = A_{k2−1} ⋯ A_{k1}` for `k1 ≤ k2 ≤ N`.
    pub fn phi(&self, k2: usize, k1: usize) -> &DMatrix<T> {
        assert!(k1 <= k2 && k2 <= self.horizon, "phi({k2}, {k1}) out of range");
        &self.phi[k2 * (k2 + 1) / 2 + k1]
    }

    pub fn phi_n0(&self) -> &DMatrix<T> {
        self.phi(self.horizon, 0)
    }

    pub fn gamma(&self) -> &DMatrix<T> {
        &self.gamma
    }

    pub fn hu(&self) -> &DMatrix<T> {
        &self.hu
    }

    pub fn bn(&self) -> &DMatrix<T> {
        &self.bn
    }

    pub fn grammian(&self) -> &DMatrix<T> {
        &self.grammian
    }

    /// Orthonormal basis `D` of the null space of `B_N`, `Nm × (Nm − n)`.
    pub fn null_basis(&self) -> &DMatrix<T> {
        &self.null_basis
    }

    /// Rows of `H_u` producing `x_k`.
    pub fn hu_row(&self, k: usize) -> DMatrix<T> {
        self.hu.rows(k * self.n, self.n).into_owned()
    }

    pub fn state_stack(&self, x0: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        &self.gamma * x0 + &self.hu * u
    }
}

/// Orthonormal complement of the row space of `bn` from a column-pivoted QR of `[B_Nᵀ | 0]`.
fn null_space_basis<T: Real>(bn: &DMatrix<T>) -> DMatrix<T> {
    let (n, nm) = bn.shape();
    if nm <= n {
        return DMatrix::zeros(nm, 0);
    }
    let mut padded = DMatrix::zeros(nm, nm);
    padded.view_mut((0, 0), (nm, n)).copy_from(&bn.transpose());
    let q = ColPivQR::new(padded).q();
    q.columns(n, nm - n).into_owned()
}

/// True iff `λ_min(G) > tol · λ_max(G)`.
pub fn check_controllable<T: Real>(ops: &SteeringOperators<T>, tol: T) -> bool {
    let e = sym_eigen(ops.grammian()).eigenvalues;
    let (lo, hi) = (e.min(), e.max());
    hi > T::zero() && lo > tol * hi
}

pub const CONTROLLABILITY_TOL: f64 = 1e-10;

/// Quadratic weights `Q_0..Q_N` (PSD), `R_0..R_{N−1}` (PD) and reference states `x'_0..x'_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostWeights<T: Real> {
    q: Vec<DMatrix<T>>,
    r: Vec<DMatrix<T>>,
    x_ref: Vec<DVector<T>>,
}

impl<T: Real> CostWeights<T> {
    pub fn new(q: Vec<DMatrix<T>>, r: Vec<DMatrix<T>>, x_ref: Vec<DVector<T>>) -> Result<Self> {
        Self::build(q, r, x_ref, false)
    }

    /// Stage-cost weights whose input weights need only be PSD, e.g. a pure state constraint.
    /// Such weights describe constraints; an objective needs `R_k ≻ 0`.
    pub fn constraint(q: Vec<DMatrix<T>>, r: Vec<DMatrix<T>>, x_ref: Vec<DVector<T>>) -> Result<Self> {
        Self::build(q, r, x_ref, true)
    }

    fn build(q: Vec<DMatrix<T>>, r: Vec<DMatrix<T>>, x_ref: Vec<DVector<T>>, psd_inputs: bool) -> Result<Self> {
        let big_n = r.len();
        if big_n == 0 || q.len() != big_n + 1 || x_ref.len() != big_n + 1 {
            return Err(dim_err(format!(
                "expected N+1 state weights and references for N = {big_n} input weights, got {} and {}",
                q.len(),
                x_ref.len()
            )));
        }
        let n = q[0].nrows();
        let m = r[0].nrows();
        let mut q_clamped = Vec::with_capacity(q.len());
        for (k, qk) in q.iter().enumerate() {
            if qk.shape() != (n, n) || x_ref[k].len() != n {
                return Err(dim_err(format!("Q_{k} or x'_{k} has the wrong shape")));
            }
            let e = sym_eigen(qk);
            let scale = to_f64(qk.amax()).max(1.0);
            if to_f64(e.eigenvalues.min()) < -1e-10 * scale {
                return Err(SteerError::InvalidInput(format!("Q_{k} is not positive semidefinite")));
            }
            let d = e.eigenvalues.map(|v| v.max(T::zero()));
            let v = &e.eigenvectors;
            q_clamped.push(symmetrize(&(v * DMatrix::from_diagonal(&d) * v.transpose())));
        }
        for (k, rk) in r.iter().enumerate() {
            if rk.shape() != (m, m) {
                return Err(dim_err(format!("R_{k} has the wrong shape")));
            }
            if psd_inputs {
                let scale = to_f64(rk.amax()).max(1.0);
                if to_f64(min_eigenvalue(rk)) < -1e-10 * scale {
                    return Err(SteerError::InvalidInput(format!("R_{k} is not positive semidefinite")));
                }
                continue;
            }
            cholesky(rk, &format!("R_{k} is not positive definite"))
                .map_err(|_| SteerError::InvalidInput(format!("R_{k} is not positive definite")))?;
            if min_eigenvalue(rk) <= T::zero() {
                return Err(SteerError::InvalidInput(format!("R_{k} is not positive definite")));
            }
        }
        Ok(Self { q: q_clamped, r: r.into_iter().map(|x| symmetrize(&x)).collect(), x_ref })
    }

    /// Same `Q` for `k < N`, `q_terminal` at `N`, same `R`, zero references.
    pub fn uniform(q: DMatrix<T>, q_terminal: DMatrix<T>, r: DMatrix<T>, horizon: usize) -> Result<Self> {
        let n = q.nrows();
        let mut qs = vec![q; horizon];
        qs.push(q_terminal);
        Self::new(qs, vec![r; horizon], vec![DVector::zeros(n); horizon + 1])
    }

    /// `Q = 0`, `R = r·I`.
    pub fn control_only(n: usize, m: usize, r: T, horizon: usize) -> Result<Self> {
        Self::uniform(DMatrix::zeros(n, n), DMatrix::zeros(n, n), DMatrix::identity(m, m) * r, horizon)
    }

    pub fn horizon(&self) -> usize {
        self.r.len()
    }

    pub fn n(&self) -> usize {
        self.q[0].nrows()
    }

    pub fn m(&self) -> usize {
        self.r[0].nrows()
    }

    pub fn q(&self, k: usize) -> &DMatrix<T> {
        &self.q[k]
    }

    pub fn r(&self, k: usize) -> &DMatrix<T> {
        &self.r[k]
    }

    pub fn x_ref(&self, k: usize) -> &DVector<T> {
        &self.x_ref[k]
    }

    pub fn q_hat(&self) -> DMatrix<T> {
        block_diag(&self.q)
    }

    pub fn r_hat(&self) -> DMatrix<T> {
        block_diag(&self.r)
    }

    pub fn x_ref_stack(&self) -> DVector<T> {
        let n = self.n();
        let mut out = DVector::zeros(self.x_ref.len() * n);
        for (k, x) in self.x_ref.iter().enumerate() {
            out.rows_mut(k * n, n).copy_from(x);
        }
        out
    }

    /// Per-step weights divided by `κ_k` (terminal weight left unchanged).
    pub fn scaled_by_step(&self, kappas: &[T]) -> Result<Self> {
        if kappas.len() != self.horizon() {
            return Err(dim_err(format!("expected {} step bounds, got {}", self.horizon(), kappas.len())));
        }
        if kappas.iter().any(|&k| k <= T::zero()) {
            return Err(SteerError::InvalidInput("step bounds must be positive".into()));
        }
        let mut q = self.q.clone();
        let mut r = self.r.clone();
        for (k, &kap) in kappas.iter().enumerate() {
            q[k] /= kap;
            r[k] /= kap;
        }
        Ok(Self { q, r, x_ref: self.x_ref.clone() })
    }

    pub fn check_against(&self, sys: &LinearSystem<T>) -> Result<()> {
        if self.horizon() != sys.horizon() || self.n() != sys.n() || self.m() != sys.m() {
            return Err(dim_err("cost weights do not match the system dimensions"));
        }
        Ok(())
    }
}

/// Grammian conditioning check returning `SingularGrammian` on failure.
pub fn require_controllable<T: Real>(ops: &SteeringOperators<T>) -> Result<()> {
    if check_controllable(ops, tol::<T>(CONTROLLABILITY_TOL)) {
        Ok(())
    } else {
        Err(SteerError::SingularGrammian)
    }
}

/// Spread of Grammian eigenvalues, `λ_max / λ_min`.
pub fn grammian_condition<T: Real>(ops: &SteeringOperators<T>) -> f64 {
    to_f64(max_eigenvalue(ops.grammian())) / to_f64(min_eigenvalue(ops.grammian()))
}
