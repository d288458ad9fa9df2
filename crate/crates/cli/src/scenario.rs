//! Scenario files: system, weights, densities, budgets and output settings.

use std::path::{Path, PathBuf};

use gmmsteer::{fit_em, BcdConfig, CostWeights, Gmm, LinearSystem, StepBudget};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{as_config, CliError, CliResult};
use crate::io::{from_rows, read_json, read_samples, GmmDoc, Rows};

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// `A = I`, `B = Δt I`.
    SingleIntegrator { dim: usize, dt: f64, horizon: usize },
    /// `A = [I Δt I; 0 I]`, `B = [Δt²/2 I; I]`.
    DoubleIntegrator { dim: usize, dt: f64, horizon: usize },
    TimeInvariant { a: Rows, b: Rows, horizon: usize },
    TimeVarying { a: Vec<Rows>, b: Vec<Rows> },
}

impl SystemSpec {
    pub fn build(&self) -> CliResult<LinearSystem<f64>> {
        let sys = match self {
            SystemSpec::SingleIntegrator { dim, dt, horizon } => LinearSystem::single_integrator(*dim, *dt, *horizon),
            SystemSpec::DoubleIntegrator { dim, dt, horizon } => LinearSystem::double_integrator(*dim, *dt, *horizon),
            SystemSpec::TimeInvariant { a, b, horizon } => LinearSystem::time_invariant(from_rows(a, "A")?, from_rows(b, "B")?, *horizon),
            SystemSpec::TimeVarying { a, b } => LinearSystem::new(
                a.iter().map(|m| from_rows(m, "A_k")).collect::<CliResult<_>>()?,
                b.iter().map(|m| from_rows(m, "B_k")).collect::<CliResult<_>>()?,
            ),
        };
        sys.map_err(as_config)
    }
}

/// Time-invariant quadratic weights; missing entries default to `Q = 0`, `R = I`, zero references.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSpec {
    pub q: Option<Rows>,
    pub r: Option<Rows>,
    pub q_terminal: Option<Rows>,
    pub x_ref: Option<Vec<f64>>,
}

struct WeightParts {
    q: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
    x_ref: Vec<DVector<f64>>,
}

impl WeightsSpec {
    fn parts(&self, sys: &LinearSystem<f64>, default_r: f64) -> CliResult<WeightParts> {
        let (n, m, horizon) = (sys.n(), sys.m(), sys.horizon());
        let mat = |rows: &Option<Rows>, what: &str, dim: usize, default: DMatrix<f64>| -> CliResult<DMatrix<f64>> {
            match rows {
                Some(rows) => {
                    let a = from_rows(rows, what)?;
                    if a.shape() != (dim, dim) {
                        return Err(CliError::Config(format!("{what} must be {dim}×{dim}, got {:?}", a.shape())));
                    }
                    Ok(a)
                }
                None => Ok(default),
            }
        };
        let q = mat(&self.q, "Q", n, DMatrix::zeros(n, n))?;
        let qn = mat(&self.q_terminal, "terminal Q", n, DMatrix::zeros(n, n))?;
        let r = mat(&self.r, "R", m, DMatrix::identity(m, m) * default_r)?;
        let x_ref = match &self.x_ref {
            Some(v) if v.len() != n => return Err(CliError::Config(format!("x_ref must have length {n}"))),
            Some(v) => DVector::from_vec(v.clone()),
            None => DVector::zeros(n),
        };
        let mut qs = vec![q; horizon];
        qs.push(qn);
        Ok(WeightParts { q: qs, r: vec![r; horizon], x_ref: vec![x_ref; horizon + 1] })
    }

    pub fn build(&self, sys: &LinearSystem<f64>) -> CliResult<CostWeights<f64>> {
        let p = self.parts(sys, 1.0)?;
        CostWeights::new(p.q, p.r, p.x_ref).map_err(as_config)
    }
}

/// One family of step-cost bounds `E[J_k] ≤ κ_k`; `R` may be singular here and defaults to 0.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub q: Option<Rows>,
    pub r: Option<Rows>,
    pub x_ref: Option<Vec<f64>>,
    pub kappas: Option<Vec<f64>>,
}

/// Separate expected speed and acceleration bounds for a double integrator:
/// `R = a_max⁻² I` for the acceleration and `Q = diag(0, v_max⁻¹ I)` for the speed.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedAccelSpec {
    pub a_max: f64,
    pub v_max: f64,
    #[serde(default = "one")]
    pub kappa: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum DensitySpec {
    Gmm(GmmDoc),
    Samples(SampleFit),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFit {
    /// CSV path, relative to the scenario file.
    pub samples: PathBuf,
    pub r: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "em_max_iter")]
    pub max_iter: usize,
    #[serde(default = "em_tol")]
    pub tol: f64,
}

fn em_max_iter() -> usize {
    500
}

fn em_tol() -> f64 {
    1e-8
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Sample paths written to `trajectories.csv`.
    pub trajectories: usize,
    /// Points per axis of `density.csv`.
    pub grid_points: usize,
    /// Coordinates of the terminal marginal written to `density.csv`.
    pub grid_coords: Vec<usize>,
    /// Half-width of the density grid in units of the largest marginal standard deviation.
    pub grid_half_width: f64,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { trajectories: 200, grid_points: 101, grid_coords: vec![0, 1], grid_half_width: 4.0 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub system: SystemSpec,
    #[serde(default)]
    pub weights: WeightsSpec,
    #[serde(default)]
    pub step_constraints: Vec<FamilySpec>,
    pub speed_accel: Option<SpeedAccelSpec>,
    pub initial: DensitySpec,
    pub desired: DensitySpec,
    pub kappa: Option<f64>,
    pub kappas: Option<Vec<f64>>,
    #[serde(default)]
    pub bcd: BcdConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub outputs: OutputSpec,
}

/// Command-line values that take precedence over the scenario file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub q: Option<usize>,
    pub kappa: Option<f64>,
    pub kappas: Option<Vec<f64>>,
    pub eps: Option<f64>,
    pub max_iter: Option<usize>,
}

/// Scenario with every density fitted and every matrix built.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub sys: LinearSystem<f64>,
    pub weights: CostWeights<f64>,
    pub initial: Gmm<f64>,
    pub desired: Gmm<f64>,
    pub kappa: Option<f64>,
    pub kappas: Option<Vec<f64>>,
    pub step: Option<Vec<StepBudget>>,
    pub bcd: BcdConfig,
    pub seed: u64,
    pub outputs: OutputSpec,
}

impl Scenario {
    pub fn load(path: &Path) -> CliResult<(Self, PathBuf)> {
        let scenario: Scenario = read_json(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((scenario, base))
    }

    pub fn resolve(&self, base: &Path, ov: &Overrides) -> CliResult<Resolved> {
        let sys = self.system.build()?;
        let weights = self.weights.build(&sys)?;
        let initial = load_density(&self.initial, base, "initial")?;
        let desired = load_density(&self.desired, base, "desired")?;
        for (g, what) in [(&initial, "initial"), (&desired, "desired")] {
            if g.dim() != sys.n() {
                return Err(CliError::Config(format!("{what} density has dimension {}, the system has {}", g.dim(), sys.n())));
            }
        }
        let seed = ov.seed.unwrap_or(self.seed);
        let mut bcd = self.bcd.clone();
        if ov.seed.is_some() {
            bcd.seed = seed;
        }
        if let Some(q) = ov.q {
            bcd.q = Some(q);
        }
        if let Some(eps) = ov.eps {
            bcd.eps = eps;
        }
        if let Some(it) = ov.max_iter {
            bcd.max_iter = it;
        }
        bcd.validate().map_err(as_config)?;
        let kappa = ov.kappa.or(self.kappa);
        let kappas = ov.kappas.clone().or_else(|| self.kappas.clone());
        let step = self.step_budgets(&sys, &weights, ov.kappas.as_deref(), kappas.as_deref())?;
        if self.outputs.grid_points < 2 {
            return Err(CliError::Config("grid_points must be at least 2".into()));
        }
        Ok(Resolved { sys, weights, initial, desired, kappa, kappas, step, bcd, seed, outputs: self.outputs.clone() })
    }

    /// Step-constraint families, or `None` when the scenario defines no step bounds.
    fn step_budgets(
        &self,
        sys: &LinearSystem<f64>,
        weights: &CostWeights<f64>,
        forced: Option<&[f64]>,
        default: Option<&[f64]>,
    ) -> CliResult<Option<Vec<StepBudget>>> {
        let horizon = sys.horizon();
        let check = |k: &[f64]| -> CliResult<Vec<f64>> {
            if k.len() != horizon {
                return Err(CliError::Config(format!("kappas has {} entries, the horizon is {horizon}", k.len())));
            }
            Ok(k.to_vec())
        };
        let mut families = Vec::new();
        for (idx, f) in self.step_constraints.iter().enumerate() {
            let kappas = forced.or(f.kappas.as_deref()).or(default).ok_or_else(|| CliError::Config(format!("step constraint {idx} has no kappas")))?;
            let spec = WeightsSpec { q: f.q.clone(), r: f.r.clone(), q_terminal: None, x_ref: f.x_ref.clone() };
            let p = spec.parts(sys, 0.0)?;
            let mut q = p.q;
            q[horizon] = DMatrix::zeros(sys.n(), sys.n());
            let w = CostWeights::constraint(q, p.r, p.x_ref).map_err(as_config)?;
            families.push(StepBudget { weights: w, kappas: check(kappas)? });
        }
        if let Some(sa) = &self.speed_accel {
            let (n, m) = (sys.n(), sys.m());
            if n != 2 * m {
                return Err(CliError::Config("speed_accel needs a double integrator state [position, velocity]".into()));
            }
            if !(sa.a_max > 0.0) || !(sa.v_max > 0.0) {
                return Err(CliError::Config("a_max and v_max must be positive".into()));
            }
            let kappas = match forced {
                Some(k) => check(k)?,
                None => vec![sa.kappa; horizon],
            };
            let zq = vec![DMatrix::zeros(n, n); horizon + 1];
            let zx = vec![DVector::zeros(n); horizon + 1];
            let accel = CostWeights::constraint(zq, vec![DMatrix::identity(m, m) / (sa.a_max * sa.a_max); horizon], zx.clone()).map_err(as_config)?;
            let mut qv = DMatrix::zeros(n, n);
            qv.view_mut((m, m), (m, m)).fill_with_identity();
            qv /= sa.v_max;
            let mut qs = vec![qv; horizon];
            qs.push(DMatrix::zeros(n, n));
            let speed = CostWeights::constraint(qs, vec![DMatrix::zeros(m, m); horizon], zx).map_err(as_config)?;
            families.push(StepBudget { weights: accel, kappas: kappas.clone() });
            families.push(StepBudget { weights: speed, kappas });
        }
        if families.is_empty() {
            return Ok(match default {
                Some(k) => Some(vec![StepBudget { weights: weights.clone(), kappas: check(k)? }]),
                None => None,
            });
        }
        Ok(Some(families))
    }
}

pub fn load_density(spec: &DensitySpec, base: &Path, what: &str) -> CliResult<Gmm<f64>> {
    match spec {
        DensitySpec::Gmm(doc) => doc.to_gmm(),
        DensitySpec::Samples(fit) => {
            let path = base.join(&fit.samples);
            if !path.exists() {
                return Err(CliError::Config(format!("{what} sample file {} does not exist", path.display())));
            }
            let samples = read_samples(&path)?;
            fit_em(&samples, fit.r, fit.seed, fit.max_iter, fit.tol).map_err(|e| CliError::Config(format!("fitting the {what} density: {e}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Scenario {
        serde_json::from_str(text).unwrap()
    }

    const DENS1: &str = r#"{"weights": [1.0], "components": [{"mean": [0.0, 0.0], "cov": [[1.0, 0.0], [0.0, 1.0]]}]}"#;

    fn scenario(system: &str, extra: &str) -> Scenario {
        parse(&format!(r#"{{"system": {system}, "initial": {DENS1}, "desired": {DENS1}{extra}}}"#))
    }

    #[test]
    fn shorthand_systems_expand() {
        let sc = scenario(r#"{"kind": "single_integrator", "dim": 2, "dt": 0.5, "horizon": 3}"#, "");
        let sys = sc.system.build().unwrap();
        assert_eq!(sys.b(0), &(DMatrix::identity(2, 2) * 0.5));
        let sc = scenario(r#"{"kind": "double_integrator", "dim": 1, "dt": 2.0, "horizon": 3}"#, "");
        let sys = sc.system.build().unwrap();
        assert_eq!(sys.a(1), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]));
        assert_eq!(sys.b(1), &DMatrix::from_row_slice(2, 1, &[2.0, 1.0]));
    }

    #[test]
    fn weights_default_to_control_effort() {
        let sc = scenario(r#"{"kind": "single_integrator", "dim": 2, "dt": 1.0, "horizon": 2}"#, "");
        let res = sc.resolve(Path::new("."), &Overrides::default()).unwrap();
        assert_eq!(res.weights.r(1), &DMatrix::identity(2, 2));
        assert_eq!(res.weights.q(2), &DMatrix::zeros(2, 2));
        assert!(res.step.is_none());
    }

    #[test]
    fn speed_accel_builds_two_families() {
        let dens = DENS1.replace("[0.0, 0.0]", "[0.0, 0.0, 0.0, 0.0]").replace("[[1.0, 0.0], [0.0, 1.0]]", "[[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]");
        let text = format!(
            r#"{{"system": {{"kind": "double_integrator", "dim": 2, "dt": 1.0, "horizon": 3}}, "speed_accel": {{"a_max": 0.5, "v_max": 2.0}}, "initial": {dens}, "desired": {dens}}}"#
        );
        let res = parse(&text).resolve(Path::new("."), &Overrides::default()).unwrap();
        let fams = res.step.unwrap();
        assert_eq!(fams.len(), 2);
        assert_eq!(fams[0].weights.r(0), &(DMatrix::identity(2, 2) * 4.0));
        assert_eq!(fams[1].weights.q(0)[(2, 2)], 0.5);
        assert_eq!(fams[1].weights.q(0)[(0, 0)], 0.0);
        assert_eq!(fams[1].weights.r(0), &DMatrix::zeros(2, 2));
        assert_eq!(fams[0].kappas, vec![1.0; 3]);
    }

    #[test]
    fn overrides_win() {
        let sc = scenario(r#"{"kind": "single_integrator", "dim": 2, "dt": 1.0, "horizon": 2}"#, r#", "kappa": 1.0, "kappas": [1.0, 1.0], "seed": 4"#);
        let ov = Overrides { seed: Some(9), q: Some(3), kappa: Some(2.0), kappas: Some(vec![0.5, 0.25]), eps: Some(1e-3), max_iter: Some(7) };
        let res = sc.resolve(Path::new("."), &ov).unwrap();
        assert_eq!((res.seed, res.bcd.seed, res.bcd.q, res.kappa), (9, 9, Some(3), Some(2.0)));
        assert_eq!((res.bcd.eps, res.bcd.max_iter), (1e-3, 7));
        assert_eq!(res.step.unwrap()[0].kappas, vec![0.5, 0.25]);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        let sc = scenario(r#"{"kind": "single_integrator", "dim": 2, "dt": 1.0, "horizon": 2}"#, r#", "kappas": [1.0]"#);
        assert!(matches!(sc.resolve(Path::new("."), &Overrides::default()), Err(CliError::Config(_))));
        let sc = scenario(r#"{"kind": "single_integrator", "dim": 3, "dt": 1.0, "horizon": 2}"#, "");
        assert!(matches!(sc.resolve(Path::new("."), &Overrides::default()), Err(CliError::Config(_))));
        let text = format!(r#"{{"system": {{"kind": "single_integrator", "dim": 2, "dt": 1.0, "horizon": 2}}, "initial": {{"samples": "missing.csv", "r": 2}}, "desired": {DENS1}}}"#);
        assert!(matches!(parse(&text).resolve(Path::new("."), &Overrides::default()), Err(CliError::Config(_))));
        assert!(serde_json::from_str::<Scenario>(r#"{"system": {"kind": "warp"}}"#).is_err());
    }
}
