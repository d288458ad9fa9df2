//! Subcommand implementations. Each returns after writing its artifacts atomically into `out`.

use std::path::Path;
use std::time::Instant;

use gmmsteer::{
    absolute_bound, absolute_bound_weighted, default_grid, fit_em_trace, gmm_wasserstein, grid_around, propagate_error, solve_hard,
    solve_soft, solve_step_multi, solve_total, terminal_ratios, BcdReport, CostWeights, Gmm, GmmPolicy, SteeringContext, SteeringOperators,
    StepBudget, Trajectories,
};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::io::{read_json, read_samples, write_atomic, write_json, GmmDoc, PolicyDoc};
use crate::scenario::{Overrides, Resolved, Scenario};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Hard,
    Soft,
    Total,
    Step,
}

#[derive(Debug, Serialize)]
pub struct BcdMetrics {
    pub status: String,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
    pub feasibility_trace: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct StepCostMetrics {
    /// `E[J_k]` for `k = 0..N−1`.
    pub expected: Vec<f64>,
    pub kappas: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct WallTimes {
    pub load_s: f64,
    pub solve_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Serialize)]
pub struct Metrics {
    pub problem: Problem,
    pub objective: f64,
    pub w2_gmm: f64,
    pub expected_cost: f64,
    /// One entry per constraint family for the step problem, otherwise the per-step split of the
    /// scenario weights.
    pub step_costs: Vec<StepCostMetrics>,
    pub r: usize,
    pub q: usize,
    pub t: usize,
    pub bcd: Option<BcdMetrics>,
    pub wall_times: WallTimes,
}

fn ops_of(res: &Resolved) -> SteeringOperators<f64> {
    SteeringOperators::new(&res.sys)
}

fn load(scenario: &Path, ov: &Overrides) -> CliResult<Resolved> {
    let (sc, base) = Scenario::load(scenario)?;
    sc.resolve(&base, ov)
}

fn require<T: Clone>(v: &Option<T>, what: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| CliError::Config(format!("{what} is required for this problem")))
}

fn step_families(res: &Resolved) -> Option<&[StepBudget]> {
    res.step.as_deref()
}

fn step_cost_metrics(policy: &GmmPolicy<f64>, res: &Resolved, families: &[(CostWeights<f64>, Option<Vec<f64>>)]) -> CliResult<Vec<StepCostMetrics>> {
    let ops = ops_of(res);
    families
        .iter()
        .map(|(w, kappas)| {
            let expected = (0..res.sys.horizon()).map(|k| policy.expected_step_cost(&res.initial, &ops, w, k)).collect::<gmmsteer::Result<Vec<_>>>()?;
            Ok(StepCostMetrics { expected, kappas: kappas.clone() })
        })
        .collect()
}

fn cost_families(problem: Problem, res: &Resolved) -> Vec<(CostWeights<f64>, Option<Vec<f64>>)> {
    match (problem, step_families(res)) {
        (Problem::Step, Some(f)) => f.iter().map(|b| (b.weights.clone(), Some(b.kappas.clone()))).collect(),
        _ => vec![(res.weights.clone(), None)],
    }
}

fn bcd_metrics(rep: &BcdReport) -> BcdMetrics {
    BcdMetrics {
        status: format!("{:?}", rep.status),
        iterations: rep.iterations,
        objective_trace: rep.objective_trace.clone(),
        feasibility_trace: rep.feasibility_trace.clone(),
    }
}

/// Solves `problem` on the scenario and writes `policy.json`, `terminal.json`, `trajectories.csv`,
/// `density.csv` and `metrics.json`.
pub fn steer(problem: Problem, scenario: &Path, ov: &Overrides, out: &Path) -> CliResult<Metrics> {
    let start = Instant::now();
    let res = load(scenario, ov)?;
    let loaded = start.elapsed().as_secs_f64();
    let solve_start = Instant::now();
    let (policy, objective, report) = match problem {
        Problem::Hard => {
            let sol = solve_hard(&res.sys, &res.weights, &res.initial, &res.desired)?;
            (sol.policy, sol.value, None)
        }
        Problem::Soft => {
            let (p, rep) = solve_soft(&res.sys, &res.weights, &res.initial, &res.desired, require(&res.kappa, "kappa")?, &res.bcd)?;
            let obj = *rep.objective_trace.last().unwrap_or(&f64::NAN);
            (p, obj, Some(rep))
        }
        Problem::Total => {
            let (p, rep) = solve_total(&res.sys, &res.weights, &res.initial, &res.desired, require(&res.kappa, "kappa")?, &res.bcd)?;
            let obj = *rep.objective_trace.last().unwrap_or(&f64::NAN);
            (p, obj, Some(rep))
        }
        Problem::Step => {
            let families = step_families(&res).ok_or_else(|| CliError::Config("the step problem needs kappas, step_constraints or speed_accel".into()))?;
            let (p, rep) = solve_step_multi(&res.sys, &res.initial, &res.desired, families, &res.bcd)?;
            let obj = *rep.objective_trace.last().unwrap_or(&f64::NAN);
            (p, obj, Some(rep))
        }
    };
    let solved = solve_start.elapsed().as_secs_f64();

    let ops = ops_of(&res);
    let terminal = policy.predict_terminal(&res.initial, &ops)?;
    let (w2, _) = gmm_wasserstein(&terminal, &res.desired)?;
    let ctx = SteeringContext::new(&res.sys, &res.weights)?;
    let expected_cost = policy.expected_cost(&res.initial, &ctx)?;
    let step_costs = step_cost_metrics(&policy, &res, &cost_families(problem, &res))?;

    write_json(&out.join("policy.json"), &PolicyDoc::from_policy(&policy))?;
    write_json(&out.join("terminal.json"), &GmmDoc::from_gmm(&terminal))?;
    let traj = policy.simulate(&res.sys, &res.initial, res.outputs.trajectories, res.seed)?;
    write_atomic(&out.join("trajectories.csv"), trajectories_csv(&traj).as_bytes())?;
    write_atomic(&out.join("density.csv"), density_csv(&terminal, &res)?.as_bytes())?;

    let metrics = Metrics {
        problem,
        objective,
        w2_gmm: w2,
        expected_cost,
        step_costs,
        r: res.initial.len(),
        q: policy.q(),
        t: res.desired.len(),
        bcd: report.as_ref().map(bcd_metrics),
        wall_times: WallTimes { load_s: loaded, solve_s: solved, total_s: start.elapsed().as_secs_f64() },
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// `sample,k,x0,…` rows for every state of every path.
pub fn trajectories_csv(t: &Trajectories<f64>) -> String {
    let n = t.states.first().map_or(0, |s| s.ncols());
    let mut out = String::from("sample,k");
    for c in 0..n {
        out.push_str(&format!(",x{c}"));
    }
    out.push('\n');
    for (s, states) in t.states.iter().enumerate() {
        for (k, row) in states.row_iter().enumerate() {
            out.push_str(&format!("{s},{k}"));
            for v in row.iter() {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Terminal density on a grid over the configured coordinates: `x,y,pdf`, or `x,pdf` for one coordinate.
pub fn density_csv(terminal: &Gmm<f64>, res: &Resolved) -> CliResult<String> {
    let n = terminal.dim();
    let coords: Vec<usize> = res.outputs.grid_coords.iter().copied().filter(|&c| c < n).take(2).collect();
    if coords.is_empty() {
        return Err(CliError::Config("grid_coords selects no state coordinate".into()));
    }
    let marginal = terminal.marginal(&coords)?;
    let grid = grid_around(&marginal, res.outputs.grid_points, res.outputs.grid_half_width)?;
    let mut out = String::from(if coords.len() == 2 { "x,y,pdf\n" } else { "x,pdf\n" });
    for x in &grid {
        let p = marginal.pdf(x)?;
        let cols: Vec<String> = x.iter().chain(std::iter::once(&p)).map(|v| format!("{v:?}")).collect();
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub r: usize,
    pub samples: usize,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
}

/// EM fit of a sample CSV; writes `gmm.json` and `fit.json`.
pub fn fit_gmm(samples: &Path, r: usize, seed: u64, max_iter: usize, out: &Path) -> CliResult<FitReport> {
    let data = read_samples(samples)?;
    let fit = fit_em_trace(&data, r, seed, max_iter, 1e-8).map_err(|e| CliError::Config(format!("EM fit failed: {e}")))?;
    write_json(&out.join("gmm.json"), &GmmDoc::from_gmm(&fit.gmm))?;
    let report = FitReport {
        r,
        samples: data.nrows(),
        iterations: fit.iterations,
        converged: fit.converged,
        log_likelihood: fit.log_likelihood.last().copied().unwrap_or(f64::NAN),
    };
    write_json(&out.join("fit.json"), &report)?;
    Ok(report)
}

fn load_policy(path: &Path, res: &Resolved) -> CliResult<GmmPolicy<f64>> {
    let doc: PolicyDoc = read_json(path)?;
    let policy = doc.to_policy()?;
    if policy.n() != res.sys.n() || policy.m() != res.sys.m() || policy.horizon() != res.sys.horizon() {
        return Err(CliError::Config("policy and scenario system dimensions disagree".into()));
    }
    policy.check_source(&res.initial).map_err(|e| CliError::Config(format!("policy does not match the scenario's initial density: {e}")))?;
    Ok(policy)
}

/// Forward simulation of a stored policy; writes `trajectories.csv`.
pub fn simulate(policy: &Path, scenario: &Path, count: usize, ov: &Overrides, out: &Path) -> CliResult<usize> {
    let res = load(scenario, ov)?;
    let policy = load_policy(policy, &res)?;
    let traj = policy.simulate(&res.sys, &res.initial, count, res.seed)?;
    write_atomic(&out.join("trajectories.csv"), trajectories_csv(&traj).as_bytes())?;
    Ok(traj.len())
}

/// Standard errors allowed between empirical and predicted component means.
pub const MEAN_SE_LIMIT: f64 = 4.0;
/// Relative slack allowed on empirical step costs.
pub const STEP_COST_SLACK: f64 = 0.05;
/// Samples per pair below which component moments are not compared.
pub const MIN_GROUP: usize = 30;
/// Terminal samples used for the EM refit.
const REFIT_SAMPLES: usize = 20_000;

#[derive(Debug, Serialize)]
pub struct PairCheck {
    pub i: usize,
    pub j: usize,
    pub samples: usize,
    /// Largest `|mean error| / standard error` over coordinates.
    pub max_mean_z: f64,
    /// `‖Σ_emp − Σ_pred‖_F / ‖Σ_pred‖_F`.
    pub cov_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
pub struct FamilyCheck {
    pub predicted: Vec<f64>,
    pub empirical: Vec<f64>,
    pub kappas: Vec<f64>,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
pub struct Validation {
    pub samples: usize,
    pub pairs: Vec<PairCheck>,
    pub step_costs: Vec<FamilyCheck>,
    /// `W²_GMM` between an EM refit of the simulated terminal states and the predicted terminal mixture.
    pub refit_w2_gmm: Option<f64>,
    pub pass: bool,
}

/// Monte Carlo check of a stored policy against its predicted moments and step bounds; writes
/// `validation.json` and fails with a validation error when a check does not hold.
pub fn validate(policy: &Path, scenario: &Path, count: usize, ov: &Overrides, out: &Path) -> CliResult<Validation> {
    let res = load(scenario, ov)?;
    let policy = load_policy(policy, &res)?;
    let ops = ops_of(&res);
    let traj = policy.simulate(&res.sys, &res.initial, count, res.seed)?;
    let big_n = res.sys.horizon();
    let n = res.sys.n();

    let mut pairs = Vec::new();
    for i in 0..policy.r() {
        for j in 0..policy.q() {
            let idx: Vec<usize> = (0..traj.len()).filter(|&s| traj.pairs[s] == (i, j)).collect();
            if idx.len() < MIN_GROUP {
                continue;
            }
            let c = res.initial.component(i);
            let (mu, sigma) = policy.pushforward(&ops, i, j, c.mean(), c.cov());
            let xs = DMatrix::from_fn(idx.len(), n, |r, col| traj.states[idx[r]][(big_n, col)]);
            let (mean, cov) = sample_moments(&xs);
            let max_mean_z = (0..n).map(|d| (mean[d] - mu[d]).abs() / (sigma[(d, d)] / idx.len() as f64).sqrt().max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
            let cov_rel_error = (&cov - &sigma).norm() / sigma.norm().max(f64::MIN_POSITIVE);
            pairs.push(PairCheck { i, j, samples: idx.len(), max_mean_z, cov_rel_error, pass: max_mean_z <= MEAN_SE_LIMIT });
        }
    }

    let mut step_costs = Vec::new();
    if let Some(families) = step_families(&res) {
        for fam in families {
            let predicted = (0..big_n).map(|k| policy.expected_step_cost(&res.initial, &ops, &fam.weights, k)).collect::<gmmsteer::Result<Vec<_>>>()?;
            let empirical = (0..big_n).map(|k| empirical_step_cost(&traj, &fam.weights, k)).collect::<Vec<_>>();
            let pass = empirical.iter().zip(&fam.kappas).all(|(e, k)| *e <= k * (1.0 + STEP_COST_SLACK));
            step_costs.push(FamilyCheck { predicted, empirical, kappas: fam.kappas.clone(), pass });
        }
    }

    let refit_w2_gmm = refit_w2(&traj, &policy, &res, &ops);
    let pass = pairs.iter().all(|p| p.pass) && step_costs.iter().all(|f| f.pass);
    let report = Validation { samples: traj.len(), pairs, step_costs, refit_w2_gmm, pass };
    write_json(&out.join("validation.json"), &report)?;
    if !report.pass {
        return Err(CliError::Validation(format!("see {}", out.join("validation.json").display())));
    }
    Ok(report)
}

fn refit_w2(traj: &Trajectories<f64>, policy: &GmmPolicy<f64>, res: &Resolved, ops: &SteeringOperators<f64>) -> Option<f64> {
    let terminal = policy.predict_terminal(&res.initial, ops).ok()?;
    let states = traj.terminal_states();
    let rows = states.nrows().min(REFIT_SAMPLES);
    let fit = fit_em_trace(&states.rows(0, rows).into_owned(), terminal.len(), res.seed, 300, 1e-8).ok()?;
    gmm_wasserstein(&fit.gmm, &terminal).ok().map(|(w, _)| w)
}

fn sample_moments(xs: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let count = xs.nrows() as f64;
    let mean = xs.row_mean().transpose();
    let centered = DMatrix::from_fn(xs.nrows(), xs.ncols(), |r, c| xs[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (count - 1.0).max(1.0);
    (mean, cov)
}

/// Sample average of `(x_k − x'_k)ᵀ Q_k (x_k − x'_k) + u_kᵀ R_k u_k`.
pub fn empirical_step_cost(traj: &Trajectories<f64>, w: &CostWeights<f64>, k: usize) -> f64 {
    let total: f64 = traj
        .states
        .iter()
        .zip(&traj.controls)
        .map(|(x, u)| {
            let dx = x.row(k).transpose() - w.x_ref(k);
            let uk = u.row(k).transpose();
            (dx.transpose() * w.q(k) * &dx)[(0, 0)] + (uk.transpose() * w.r(k) * &uk)[(0, 0)]
        })
        .sum();
    total / traj.len().max(1) as f64
}

#[derive(Debug, Serialize)]
pub struct BoundsReport {
    pub eps: f64,
    /// `Σ λ_ij √(det Σ_i⁰ / det Σ_jᴺ) ε`.
    pub absolute_bound: f64,
    /// Mixture-weighted variant of the absolute bound; reported for comparison, not a bound.
    pub absolute_bound_weighted: f64,
    /// Grid maximum of `|e_N|` for the test error `e₀ = ε p₀ᵃ / max p₀ᵃ`.
    pub absolute_grid_max: Option<f64>,
    /// Grid maximum of `|e_N / p_Nᵃ|` for the test error `e₀ = ε p₀ᵃ cos(Σ x)`.
    pub relative_grid_max: Option<f64>,
    pub pass: bool,
}

/// Error-propagation bounds of a stored policy; grid checks run for one- and two-dimensional states.
/// Writes `bounds.json`.
pub fn bounds(policy: &Path, scenario: &Path, eps: f64, ov: &Overrides, out: &Path) -> CliResult<BoundsReport> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(CliError::Config("eps must be a nonnegative number".into()));
    }
    let res = load(scenario, ov)?;
    let policy = load_policy(policy, &res)?;
    let ops = ops_of(&res);
    let terminal = policy.predict_terminal(&res.initial, &ops)?;
    let abs = absolute_bound(&policy, &res.initial, &terminal, eps)?;
    let weighted = absolute_bound_weighted(&policy, &res.initial, &terminal, eps)?;
    let (mut absolute_grid_max, mut relative_grid_max) = (None, None);
    if res.sys.n() <= 2 {
        let init_grid = default_grid(&res.initial)?;
        let peak = init_grid.iter().map(|x| res.initial.pdf(x)).collect::<gmmsteer::Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
        let grid = default_grid(&terminal)?;
        let initial = &res.initial;
        let scaled = |x: &DVector<f64>| eps * initial.pdf(x).unwrap_or(0.0) / peak.max(f64::MIN_POSITIVE);
        absolute_grid_max = Some(propagate_error(&policy, &ops, scaled, &grid)?.max_abs());
        let wavy = |x: &DVector<f64>| eps * initial.pdf(x).unwrap_or(0.0) * x.sum().cos();
        let field = propagate_error(&policy, &ops, wavy, &grid)?;
        relative_grid_max = Some(terminal_ratios(&field, &terminal)?.into_iter().fold(0.0, f64::max));
    }
    let pass = absolute_grid_max.map_or(true, |m| m <= abs * (1.0 + 1e-9) + 1e-300) && relative_grid_max.map_or(true, |m| m <= eps * (1.0 + 1e-6));
    let report = BoundsReport { eps, absolute_bound: abs, absolute_bound_weighted: weighted, absolute_grid_max, relative_grid_max, pass };
    write_json(&out.join("bounds.json"), &report)?;
    if !report.pass {
        return Err(CliError::Validation(format!("see {}", out.join("bounds.json").display())));
    }
    Ok(report)
}
