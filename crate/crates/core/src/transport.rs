//! Exact discrete optimal transport (transportation simplex) and the GMM Wasserstein distance.

use std::collections::VecDeque;
use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{Num, Signed, ToPrimitive};

use crate::error::{dim_err, Result, SteerError};
use crate::gaussian::{w2_gaussian, Gmm};
use crate::scalar::Real;

/// Number type the transportation simplex runs on. Floats compare against a relative tolerance;
/// rationals are exact.
pub trait TransportScalar: Num + Signed + Clone + PartialOrd + Debug + 'static {
    /// Reduced costs above `−tol(scale)` count as nonnegative; `scale` is the largest `|C_ij|`.
    fn pivot_tol(scale: &Self) -> Self;
    /// Allowed difference between total source and target mass.
    fn mass_tol() -> Self;
    fn is_finite_value(&self) -> bool;
    fn as_f64(&self) -> f64;
}

impl TransportScalar for f64 {
    fn pivot_tol(scale: &Self) -> Self {
        1e-12 * scale.max(1.0)
    }
    fn mass_tol() -> Self {
        1e-8
    }
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
    fn as_f64(&self) -> f64 {
        *self
    }
}

impl TransportScalar for f32 {
    fn pivot_tol(scale: &Self) -> Self {
        64.0 * f32::EPSILON * scale.max(1.0)
    }
    fn mass_tol() -> Self {
        1e-5
    }
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
    fn as_f64(&self) -> f64 {
        *self as f64
    }
}

impl<I> TransportScalar for Ratio<I>
where
    I: Integer + Signed + Clone + Debug + ToPrimitive + 'static,
{
    fn pivot_tol(_: &Self) -> Self {
        Self::from_integer(I::zero())
    }
    fn mass_tol() -> Self {
        Self::from_integer(I::zero())
    }
    fn is_finite_value(&self) -> bool {
        true
    }
    fn as_f64(&self) -> f64 {
        self.numer().to_f64().unwrap_or(f64::NAN) / self.denom().to_f64().unwrap_or(f64::NAN)
    }
}

/// Optimal coupling and its cost.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan<S: TransportScalar> {
    pub plan: DMatrix<S>,
    pub cost: S,
}

impl<S: TransportScalar> TransportPlan<S> {
    pub fn row_sums(&self) -> Vec<S> {
        (0..self.plan.nrows())
            .map(|i| (0..self.plan.ncols()).fold(S::zero(), |a, j| a + self.plan[(i, j)].clone()))
            .collect()
    }

    pub fn col_sums(&self) -> Vec<S> {
        (0..self.plan.ncols())
            .map(|j| (0..self.plan.nrows()).fold(S::zero(), |a, i| a + self.plan[(i, j)].clone()))
            .collect()
    }

    /// `Σ plan_ij C_ij` recomputed from the plan.
    pub fn objective(&self, c: &DMatrix<S>) -> S {
        let mut s = S::zero();
        for j in 0..c.ncols() {
            for i in 0..c.nrows() {
                s = s + self.plan[(i, j)].clone() * c[(i, j)].clone();
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
struct Cell<S> {
    i: usize,
    j: usize,
    flow: S,
}

fn sum<S: TransportScalar>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |a, b| a + b.clone())
}

/// Global minimizer of `Σ M_ij C_ij` over couplings of `p` and `q`.
pub fn solve_transport<S: TransportScalar>(c: &DMatrix<S>, p: &DVector<S>, q: &DVector<S>) -> Result<TransportPlan<S>> {
    let (rows, cols) = c.shape();
    if rows == 0 || cols == 0 || p.len() != rows || q.len() != cols {
        return Err(dim_err(format!("cost {rows}×{cols} with marginals of length {} and {}", p.len(), q.len())));
    }
    if c.iter().any(|x| !x.is_finite_value()) {
        return Err(SteerError::InvalidInput("transport cost has non-finite entries".into()));
    }
    if p.iter().chain(q.iter()).any(|x| !x.is_finite_value() || x.is_negative()) {
        return Err(SteerError::InvalidInput("transport marginals must be finite and nonnegative".into()));
    }
    let sp = sum(p.as_slice());
    let sq = sum(q.as_slice());
    if (sp.clone() - sq.clone()).abs() > S::mass_tol() {
        return Err(SteerError::InfeasibleMarginals(sp.as_f64(), sq.as_f64()));
    }

    let scale = c.iter().fold(S::zero(), |a, x| if x.abs() > a { x.abs() } else { a });
    let tol = S::pivot_tol(&scale);
    let mut basis = northwest_corner(p.as_slice(), q.as_slice());
    let max_pivots = 64 * rows * cols + 1024;

    for _ in 0..max_pivots {
        let (u, v) = potentials(&basis, c, rows, cols);
        let mut in_basis = vec![false; rows * cols];
        for b in &basis {
            in_basis[b.i * cols + b.j] = true;
        }
        let neg_tol = -tol.clone();
        let mut entering = None;
        'scan: for i in 0..rows {
            for j in 0..cols {
                if in_basis[i * cols + j] {
                    continue;
                }
                let rc = c[(i, j)].clone() - u[i].clone() - v[j].clone();
                if rc < neg_tol {
                    entering = Some((i, j));
                    break 'scan;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            let mut plan = DMatrix::from_element(rows, cols, S::zero());
            for b in &basis {
                plan[(b.i, b.j)] = b.flow.clone();
            }
            let mut out = TransportPlan { plan, cost: S::zero() };
            out.cost = out.objective(c);
            return Ok(out);
        };
        pivot(&mut basis, ei, ej, rows, cols);
    }
    Err(SteerError::SolverFailure {
        status: "pivot limit".into(),
        detail: format!("transportation simplex did not terminate within {max_pivots} pivots"),
    })
}

/// Basic feasible solution with exactly `N + M − 1` cells; ties advance the row unless it is the last.
fn northwest_corner<S: TransportScalar>(p: &[S], q: &[S]) -> Vec<Cell<S>> {
    let (rows, cols) = (p.len(), q.len());
    let mut a = p.to_vec();
    let mut b = q.to_vec();
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(rows + cols - 1);
    loop {
        let take_row = a[i] <= b[j];
        let x = if take_row { a[i].clone() } else { b[j].clone() };
        a[i] = a[i].clone() - x.clone();
        b[j] = b[j].clone() - x.clone();
        out.push(Cell { i, j, flow: x });
        if i == rows - 1 && j == cols - 1 {
            break;
        }
        if i == rows - 1 {
            j += 1;
        } else if j == cols - 1 || take_row {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

fn potentials<S: TransportScalar>(basis: &[Cell<S>], c: &DMatrix<S>, rows: usize, cols: usize) -> (Vec<S>, Vec<S>) {
    let adj = adjacency(basis, rows, cols);
    let mut pot: Vec<Option<S>> = vec![None; rows + cols];
    pot[0] = Some(S::zero());
    let mut queue = VecDeque::from([0usize]);
    while let Some(node) = queue.pop_front() {
        let pn = pot[node].clone().unwrap();
        for &(next, k) in &adj[node] {
            if pot[next].is_some() {
                continue;
            }
            let cij = c[(basis[k].i, basis[k].j)].clone();
            pot[next] = Some(cij - pn.clone());
            queue.push_back(next);
        }
    }
    let u = (0..rows).map(|i| pot[i].clone().unwrap_or_else(S::zero)).collect();
    let v = (0..cols).map(|j| pot[rows + j].clone().unwrap_or_else(S::zero)).collect();
    (u, v)
}

/// Node adjacency of the basis tree; rows are nodes `0..N`, columns `N..N+M`.
fn adjacency<S>(basis: &[Cell<S>], rows: usize, cols: usize) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); rows + cols];
    for (k, b) in basis.iter().enumerate() {
        adj[b.i].push((rows + b.j, k));
        adj[rows + b.j].push((b.i, k));
    }
    adj
}

fn pivot<S: TransportScalar>(basis: &mut [Cell<S>], ei: usize, ej: usize, rows: usize, cols: usize) {
    let adj = adjacency(basis, rows, cols);
    // Tree path from row ei to column ej; its edges alternate −, +, −, … starting at ei.
    let target = rows + ej;
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; rows + cols];
    let mut seen = vec![false; rows + cols];
    seen[ei] = true;
    let mut queue = VecDeque::from([ei]);
    while let Some(node) = queue.pop_front() {
        if node == target {
            break;
        }
        for &(next, k) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, k));
                queue.push_back(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = target;
    while node != ei {
        let (prev, k) = parent[node].expect("basis is a spanning tree");
        path.push(k);
        node = prev;
    }
    path.reverse();

    let minus: Vec<usize> = path.iter().step_by(2).copied().collect();
    let plus: Vec<usize> = path.iter().skip(1).step_by(2).copied().collect();
    let theta = minus.iter().map(|&k| basis[k].flow.clone()).fold(None, |acc: Option<S>, f| match acc {
        Some(a) if a <= f => Some(a),
        _ => Some(f),
    });
    let theta = theta.unwrap();
    let leaving = minus
        .iter()
        .copied()
        .filter(|&k| basis[k].flow == theta)
        .min_by_key(|&k| (basis[k].i, basis[k].j))
        .unwrap();
    for &k in &minus {
        basis[k].flow = basis[k].flow.clone() - theta.clone();
    }
    for &k in &plus {
        basis[k].flow = basis[k].flow.clone() + theta.clone();
    }
    basis[leaving] = Cell { i: ei, j: ej, flow: theta };
}

/// Squared GMM Wasserstein distance with Gaussian `W²` ground costs, and the optimal coupling.
pub fn gmm_wasserstein<T: Real + TransportScalar>(a: &Gmm<T>, b: &Gmm<T>) -> Result<(T, TransportPlan<T>)> {
    if a.dim() != b.dim() {
        return Err(dim_err("mixtures have different dimensions"));
    }
    let c = gmm_cost_matrix(a, b)?;
    let plan = solve_transport(&c, a.weights(), b.weights())?;
    Ok((plan.cost, plan))
}

/// `C_ij = W²(a_i, b_j)`.
pub fn gmm_cost_matrix<T: Real>(a: &Gmm<T>, b: &Gmm<T>) -> Result<DMatrix<T>> {
    let mut c = DMatrix::zeros(a.len(), b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            c[(i, j)] = w2_gaussian(a.component(i), b.component(j))?;
        }
    }
    Ok(c)
}
