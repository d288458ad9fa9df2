//! Sufficient feasibility test: every source component steered by its own free-terminal minimizer.

use crate::covsteer::SteeringContext;
use crate::error::{Result, SteerError};
use crate::gaussian::Gmm;
use crate::policy::{step_cost, PolicyBlock};
use crate::system::{CostWeights, LinearSystem};

use super::step_normalized;

#[derive(Clone, Debug, PartialEq)]
pub enum Budget {
    /// Bound on the expected total cost.
    Total(f64),
    /// Bounds `κ_k` on every expected step cost.
    Step(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct FeasibilityReport {
    /// `true` certifies feasibility; `false` is inconclusive.
    pub feasible: bool,
    /// Free-terminal minimizer per source component.
    pub witnesses: Vec<PolicyBlock<f64>>,
    /// Witness costs, `r × 1` for a total budget and `r × N` for step budgets.
    pub values: Vec<Vec<f64>>,
}

pub fn check_feasibility(
    sys: &LinearSystem<f64>,
    w: &CostWeights<f64>,
    initial: &Gmm<f64>,
    budget: &Budget,
    q: usize,
) -> Result<FeasibilityReport> {
    if q < initial.len() {
        return Err(SteerError::InvalidInput(format!("the test needs q ≥ r, got q = {q} < r = {}", initial.len())));
    }
    w.check_against(sys)?;
    let mut witnesses = Vec::with_capacity(initial.len());
    let mut values = Vec::with_capacity(initial.len());
    let mut feasible = true;
    match budget {
        Budget::Total(kappa) => {
            if !(*kappa >= 0.0) {
                return Err(SteerError::InvalidInput("kappa must be nonnegative".into()));
            }
            let ctx = SteeringContext::new(sys, w)?;
            for c in initial.components() {
                let ubar = ctx.free_mean_control(c.mean());
                let l = ctx.free_feedback();
                let cost = ctx.policy_cost(c.mean(), c.cov(), &ubar, &l);
                feasible &= cost <= *kappa;
                values.push(vec![cost]);
                witnesses.push(PolicyBlock { ubar, l });
            }
        }
        Budget::Step(kappas) => {
            let sw = step_normalized(w, kappas)?;
            let ctx = SteeringContext::new(sys, &sw)?;
            for c in initial.components() {
                let ubar = ctx.free_mean_control(c.mean());
                let l = ctx.free_feedback();
                let costs = (0..sys.horizon()).map(|k| step_cost(&ubar, &l, c.mean(), c.cov(), ctx.ops(), w, k)).collect::<Result<Vec<_>>>()?;
                feasible &= costs.iter().zip(kappas).all(|(h, k)| h <= k);
                values.push(costs);
                witnesses.push(PolicyBlock { ubar, l });
            }
        }
    }
    Ok(FeasibilityReport { feasible, witnesses, values })
}
