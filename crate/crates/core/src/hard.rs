//! Exact GMM density steering: pairwise closed-form costs and the transport LP over mixing weights.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covsteer::SteeringContext;
use crate::error::{dim_err, Result};
use crate::gaussian::Gmm;
use crate::policy::{GmmPolicy, PolicyBlock};
use crate::scalar::{cast, Real};
use crate::system::{CostWeights, LinearSystem};
use crate::transport::{solve_transport, TransportPlan, TransportScalar};

/// `C_ij = J*_mean(μ_i⁰, μ_j^d) + J*_cov(Σ_i⁰, Σ_j^d)` with the optimal pair controllers.
#[derive(Clone, Debug)]
pub struct PairCosts<T: Real> {
    pub cost: DMatrix<T>,
    pub mean_cost: DMatrix<T>,
    pub cov_cost: DMatrix<T>,
    /// Row-major over `(i, j)`.
    pub blocks: Vec<PolicyBlock<T>>,
}

pub fn build_cost_matrix<T: Real>(ctx: &SteeringContext<T>, initial: &Gmm<T>, desired: &Gmm<T>) -> Result<PairCosts<T>> {
    if initial.dim() != ctx.n() || desired.dim() != ctx.n() {
        return Err(dim_err("mixture dimension does not match the system"));
    }
    let (r, t) = (initial.len(), desired.len());
    let entries: Vec<(T, T, PolicyBlock<T>)> = (0..r * t)
        .into_par_iter()
        .map(|k| {
            let (a, b) = (initial.component(k / t), desired.component(k % t));
            let ms = ctx.mean_steer(a.mean(), b.mean())?;
            let cs = ctx.cov_steer(a.cov(), b.cov())?;
            Ok((ms.cost, cs.cost, PolicyBlock { ubar: ms.ubar, l: cs.l }))
        })
        .collect::<Result<_>>()?;
    let mut mean_cost = DMatrix::zeros(r, t);
    let mut cov_cost = DMatrix::zeros(r, t);
    let mut blocks = Vec::with_capacity(r * t);
    for (k, (jm, jc, b)) in entries.into_iter().enumerate() {
        mean_cost[(k / t, k % t)] = jm;
        cov_cost[(k / t, k % t)] = jc;
        blocks.push(b);
    }
    Ok(PairCosts { cost: &mean_cost + &cov_cost, mean_cost, cov_cost, blocks })
}

#[derive(Clone, Debug)]
pub struct HardSolution<T: Real + TransportScalar> {
    pub policy: GmmPolicy<T>,
    pub value: T,
    /// Joint weights `λ̃ = diag(p⁰) λ`.
    pub plan: TransportPlan<T>,
    pub costs: PairCosts<T>,
}

pub fn solve_hard<T: Real + TransportScalar>(
    sys: &LinearSystem<T>,
    w: &CostWeights<T>,
    initial: &Gmm<T>,
    desired: &Gmm<T>,
) -> Result<HardSolution<T>> {
    let ctx = SteeringContext::new(sys, w)?;
    solve_hard_with(&ctx, initial, desired)
}

pub fn solve_hard_with<T: Real + TransportScalar>(ctx: &SteeringContext<T>, initial: &Gmm<T>, desired: &Gmm<T>) -> Result<HardSolution<T>> {
    let costs = build_cost_matrix(ctx, initial, desired)?;
    let (r, t) = costs.cost.shape();
    let p = initial.weights();
    let rows: Vec<usize> = (0..r).filter(|&i| p[i] > T::zero()).collect();
    let c_sub = DMatrix::from_fn(rows.len(), t, |a, j| costs.cost[(rows[a], j)]);
    let p_sub = DVector::from_iterator(rows.len(), rows.iter().map(|&i| p[i]));
    let sub = solve_transport(&c_sub, &p_sub, desired.weights())?;

    let mut joint = DMatrix::zeros(r, t);
    let mut lambda = DMatrix::from_element(r, t, T::one() / cast(t as f64));
    for (a, &i) in rows.iter().enumerate() {
        for j in 0..t {
            joint[(i, j)] = sub.plan[(a, j)];
            lambda[(i, j)] = sub.plan[(a, j)] / p[i];
        }
        // Clean rounding so each row lies on the simplex.
        let s = lambda.row(i).sum();
        lambda.row_mut(i).scale_mut(T::one() / s);
    }
    let plan = TransportPlan { plan: joint, cost: sub.cost };
    let policy = GmmPolicy::new(initial.clone(), lambda, costs.blocks.clone(), ctx.ops().horizon(), ctx.ops().m())?;
    Ok(HardSolution { policy, value: sub.cost, plan, costs })
}
