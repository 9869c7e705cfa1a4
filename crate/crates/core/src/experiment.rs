//! Declarative experiment configuration and single-run composition shared by
//! the command line, sweeps and the acceptance suite.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_dataset, Dataset};
use crate::diagnostics::{convergence_fit, plateau, ConvergenceFit};
use crate::env::{builtin_env_with, Benchmark, EnvParams, BUILTIN_NAMES};
use crate::error::{Error, Result};
use crate::funcspace::{AdvFeatureSpec, AdvantageClass, Coeffs, FeatureSpec, ValueClass};
use crate::oracle::{self, l2nu_error, sobolev_error, EvalMeasure, GridSpec, Interpolation, OracleOptions, OracleSolution};
use crate::par::Parallelism;
use crate::solver::{fit, FitResult, Mode, SolverConfig};

/// Radius used when no oracle is available to size the classes.
pub const FALLBACK_RADIUS: f64 = 50.0;
/// Multiple of the oracle's best-fit coefficient norm used as default radius.
pub const RADIUS_FACTOR: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub name: String,
    pub beta: f64,
    pub h: f64,
    pub substeps: usize,
    pub reward_noise: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let p = EnvParams::default();
        Self {
            name: "ou1d".into(),
            beta: p.beta,
            h: p.h,
            substeps: p.substeps,
            reward_noise: p.reward_noise,
        }
    }
}

impl EnvSection {
    pub fn params(&self) -> EnvParams {
        EnvParams {
            beta: self.beta,
            h: self.h,
            substeps: self.substeps,
            reward_noise: self.reward_noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { n: 1000, seed: 42 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuncspaceSection {
    pub value_features: FeatureSpec,
    pub adv_features: AdvFeatureSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius_q: Option<f64>,
}

impl Default for FuncspaceSection {
    fn default() -> Self {
        Self {
            value_features: FeatureSpec::Polynomial { degree: 3 },
            adv_features: AdvFeatureSpec::Bilinear(FeatureSpec::Polynomial { degree: 3 }),
            radius_v: None,
            radius_q: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub iterations: usize,
    pub alpha: f64,
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    pub no_split: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            iterations: 30,
            alpha: 0.2,
            mode: Mode::Sobolev,
            ridge: None,
            no_split: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Compute oracle errors when the environment supports it.
    pub enabled: bool,
    pub lo: f64,
    pub hi: f64,
    pub grid_points: usize,
    pub quadrature_nodes: usize,
    pub interpolation: Interpolation,
    pub tol: f64,
    pub max_iter: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl Default for OracleSection {
    fn default() -> Self {
        let o = OracleOptions::default();
        Self {
            enabled: true,
            lo: o.grid.lo,
            hi: o.grid.hi,
            grid_points: o.grid.points,
            quadrature_nodes: o.quadrature_nodes,
            interpolation: o.interpolation,
            tol: o.tol,
            max_iter: o.max_iter,
            cache_dir: None,
        }
    }
}

impl OracleSection {
    pub fn options(&self) -> OracleOptions {
        OracleOptions {
            grid: GridSpec {
                lo: self.lo,
                hi: self.hi,
                points: self.grid_points,
            },
            quadrature_nodes: self.quadrature_nodes,
            interpolation: self.interpolation,
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Fraction of trailing iterations averaged into the plateau.
    pub plateau_fraction: f64,
    /// Write the generated dataset next to the run outputs.
    pub write_data: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            plateau_fraction: 0.2,
            write_data: true,
        }
    }
}

/// A complete experiment description. Every section and key is optional;
/// unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub data: DataSection,
    pub funcspace: FuncspaceSection,
    pub solver: SolverSection,
    pub oracle: OracleSection,
    pub output: OutputSection,
}

fn range_error(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Range checks, reporting the first offending field as `[section].key`.
    pub fn validate(&self) -> Result<()> {
        let e = &self.env;
        if !BUILTIN_NAMES.contains(&e.name.as_str()) {
            return Err(range_error(
                "[env].name",
                format!("unknown environment `{}` (expected one of {})", e.name, BUILTIN_NAMES.join(", ")),
            ));
        }
        if !(e.beta > 0.0 && e.beta.is_finite()) {
            return Err(range_error("[env].beta", format!("must be positive, got {}", e.beta)));
        }
        if !(e.h > 0.0 && e.h < 0.5) {
            return Err(range_error("[env].h", format!("must lie in (0, 0.5), got {}", e.h)));
        }
        if e.substeps == 0 {
            return Err(range_error("[env].substeps", "must be at least 1"));
        }
        if !(0.0..=0.2).contains(&e.reward_noise) {
            return Err(range_error("[env].reward_noise", format!("must lie in [0, 0.2], got {}", e.reward_noise)));
        }
        let s = &self.solver;
        if s.iterations == 0 {
            return Err(range_error("[solver].iterations", "must be at least 1"));
        }
        if !(s.alpha > 0.0 && s.alpha.is_finite()) {
            return Err(range_error("[solver].alpha", format!("must be positive, got {}", s.alpha)));
        }
        if let Some(r) = s.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(range_error("[solver].ridge", format!("must be non-negative, got {r}")));
            }
        }
        if self.data.n == 0 {
            return Err(range_error("[data].n", "must be at least 1"));
        }
        if !s.no_split && self.data.n < 2 * s.iterations {
            return Err(range_error(
                "[data].n",
                format!("{} trajectories cannot fill {} folds", self.data.n, 2 * s.iterations),
            ));
        }
        for (field, r) in [("[funcspace].radius_v", self.funcspace.radius_v), ("[funcspace].radius_q", self.funcspace.radius_q)] {
            if let Some(r) = r {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(range_error(field, format!("must be positive, got {r}")));
                }
            }
        }
        let o = &self.oracle;
        if o.grid_points < 3 {
            return Err(range_error("[oracle].grid_points", "must be at least 3"));
        }
        if !(o.hi > o.lo) {
            return Err(range_error("[oracle].hi", "must exceed [oracle].lo"));
        }
        if !(o.tol > 0.0) {
            return Err(range_error("[oracle].tol", "must be positive"));
        }
        if o.quadrature_nodes == 0 {
            return Err(range_error("[oracle].quadrature_nodes", "must be at least 1"));
        }
        if o.max_iter == 0 {
            return Err(range_error("[oracle].max_iter", "must be at least 1"));
        }
        let f = self.output.plateau_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(range_error("[output].plateau_fraction", format!("must lie in (0, 1], got {f}")));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn solver_config(&self, par: Parallelism) -> SolverConfig {
        SolverConfig {
            iterations: self.solver.iterations,
            alpha: self.solver.alpha,
            ridge: self.solver.ridge,
            mode: self.solver.mode,
            no_split: self.solver.no_split,
            theta0: None,
            eta0: None,
            par,
        }
    }

    pub fn oracle_supported(&self) -> bool {
        self.env.name == "ou1d"
    }
}

/// Environment, classes and (optionally) the oracle of a configuration.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub bench: Benchmark,
    pub value: ValueClass,
    pub adv: AdvantageClass,
    pub oracle: Option<OracleSolution>,
}

/// Builds the benchmark, solves the oracle when enabled and supported, and
/// sizes the coefficient balls.
pub fn prepare(config: &ExperimentConfig, par: Parallelism) -> Result<Prepared> {
    prepare_with(config, &|bench, opts| solve_oracle(config, bench, opts, par))
}

/// Key identifying the oracle of a configuration, if it has one.
pub fn oracle_key(config: &ExperimentConfig) -> Result<Option<String>> {
    if !(config.oracle.enabled && config.oracle_supported()) {
        return Ok(None);
    }
    let bench = builtin_env_with(&config.env.name, config.env.params())?;
    Ok(Some(oracle::cache_key(&bench, &config.oracle.options())))
}

fn solve_oracle(config: &ExperimentConfig, bench: &Benchmark, opts: &OracleOptions, par: Parallelism) -> Result<OracleSolution> {
    match &config.oracle.cache_dir {
        Some(dir) => oracle::load_or_solve(dir, bench, opts, par),
        None => oracle::grid_dp_solve(bench, opts, par),
    }
}

/// As [`prepare`], with the oracle obtained from `solve`.
pub fn prepare_with(
    config: &ExperimentConfig,
    solve: &dyn Fn(&Benchmark, &OracleOptions) -> Result<OracleSolution>,
) -> Result<Prepared> {
    config.validate()?;
    let bench = builtin_env_with(&config.env.name, config.env.params())?;
    let env = &bench.env;
    let oracle = if config.oracle.enabled && config.oracle_supported() {
        Some(solve(&bench, &config.oracle.options())?)
    } else {
        None
    };
    let features = config.funcspace.value_features.build(env.dim())?;
    let raw = config.funcspace.adv_features.build(env.dim(), env.actions())?;
    let probe_v = ValueClass::new(features, FALLBACK_RADIUS)?;
    let probe_q = AdvantageClass::new(raw, bench.policy.clone(), FALLBACK_RADIUS)?;
    let (rv, rq) = match &oracle {
        Some(o) => (
            RADIUS_FACTOR * o.project_value(&probe_v)?.norm(),
            RADIUS_FACTOR * o.project_advantage(&probe_q)?.norm(),
        ),
        None => (FALLBACK_RADIUS, FALLBACK_RADIUS),
    };
    let value = probe_v.with_radius(config.funcspace.radius_v.unwrap_or(rv))?;
    let adv = probe_q.with_radius(config.funcspace.radius_q.unwrap_or(rq))?;
    Ok(Prepared {
        bench,
        value,
        adv,
        oracle,
    })
}

/// Generates the dataset of a configuration and splits it into `2N` folds
/// (none when fold splitting is disabled).
pub fn generate(config: &ExperimentConfig, prepared: &Prepared, par: Parallelism) -> Result<Dataset> {
    let b = &prepared.bench;
    let data = generate_dataset(&b.env, &b.policy, &b.initial, config.data.n, config.data.seed, par)?;
    if config.solver.no_split {
        Ok(data)
    } else {
        data.split_folds(2 * config.solver.iterations)
    }
}

/// Oracle errors of a coefficient pair, integrated against the grid occupancy.
pub fn oracle_errors(prepared: &Prepared, theta: &Coeffs, eta: &Coeffs) -> Option<Result<(f64, f64)>> {
    let o = prepared.oracle.as_ref()?;
    Some((|| {
        let ev = sobolev_error(theta, &prepared.value, o, EvalMeasure::Grid)?.value;
        let eq = l2nu_error(eta, &prepared.adv, o, EvalMeasure::Grid, &prepared.bench.policy)?.value;
        Ok((ev, eq))
    })())
}

/// Machine-readable outcome of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub env: String,
    pub mode: Mode,
    pub n: usize,
    pub seed: u64,
    pub iterations: usize,
    pub radius_v: f64,
    pub radius_q: f64,
    pub final_err_v_h1: Option<f64>,
    pub final_err_q_l2: Option<f64>,
    pub plateau_err_v_h1: Option<f64>,
    pub convergence: Option<ConvergenceFit>,
    pub value_projections: usize,
    pub config_hash: String,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub fit: FitResult,
    pub summary: Summary,
}

/// Fits a prepared configuration on a dataset and summarises the run.
pub fn run(config: &ExperimentConfig, prepared: &Prepared, dataset: &Dataset, par: Parallelism) -> Result<RunOutcome> {
    let start = Instant::now();
    let evaluator = |t: &Coeffs, e: &Coeffs| oracle_errors(prepared, t, e).unwrap_or(Ok((f64::NAN, f64::NAN)));
    let eval_ref: Option<&crate::solver::Evaluator<'_>> = if prepared.oracle.is_some() { Some(&evaluator) } else { None };
    let fit = fit(
        dataset,
        &prepared.bench.env,
        &prepared.value,
        &prepared.adv,
        &config.solver_config(par),
        eval_ref,
    )?;
    let errors = fit.log.value_errors();
    let frac = config.output.plateau_fraction;
    let last = fit.log.records.last().expect("log is never empty");
    let summary = Summary {
        env: config.env.name.clone(),
        mode: config.solver.mode,
        n: dataset.n(),
        seed: dataset.meta.seed,
        iterations: config.solver.iterations,
        radius_v: prepared.value.radius(),
        radius_q: prepared.adv.radius(),
        final_err_v_h1: last.err_v_h1,
        final_err_q_l2: last.err_q_l2,
        plateau_err_v_h1: errors.as_deref().map(|e| plateau(e, frac)),
        convergence: errors.as_deref().map(|e| convergence_fit(e, frac)),
        value_projections: fit.log.value_projections(),
        config_hash: config.hash(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { fit, summary })
}

/// `prepare`, `generate` and `run` in one call.
pub fn run_experiment(config: &ExperimentConfig, par: Parallelism) -> Result<(Dataset, RunOutcome)> {
    let prepared = prepare(config, par)?;
    let data = generate(config, &prepared, par)?;
    let outcome = run(config, &prepared, &data, par)?;
    Ok((data, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn range_errors_name_the_field() {
        let mut c = ExperimentConfig::default();
        c.solver.alpha = -1.0;
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "[solver].alpha"),
            other => panic!("{other:?}"),
        }
        let mut c = ExperimentConfig::default();
        c.env.name = "pendulum".into();
        assert!(matches!(c.validate(), Err(Error::Config { ref field, .. }) if field == "[env].name"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.data.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn small_run_is_deterministic() {
        let mut c = ExperimentConfig::default();
        c.data.n = 200;
        c.solver.iterations = 5;
        c.oracle.grid_points = 201;
        let (d1, r1) = run_experiment(&c, Parallelism::default()).unwrap();
        let (d2, r2) = run_experiment(&c, Parallelism::Sequential).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(r1.fit, r2.fit);
        assert!(r1.summary.final_err_v_h1.is_some());
        assert_eq!(r1.fit.log.records.len(), 6);
    }

    #[test]
    fn no_oracle_for_nonlinear_benchmarks() {
        let mut c = ExperimentConfig::default();
        c.env.name = "doublewell1d".into();
        c.data.n = 100;
        c.solver.iterations = 2;
        let p = prepare(&c, Parallelism::default()).unwrap();
        assert!(p.oracle.is_none());
        assert_eq!(p.value.radius(), FALLBACK_RADIUS);
    }
}
