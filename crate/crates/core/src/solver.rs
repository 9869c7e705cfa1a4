//! The fitted q-learning outer loop with sample splitting.
//!
//! Iteration `t` (0-based) fits the advantage on fold `2t` and takes the
//! proximal value step on fold `2t + 1`. In Sobolev mode the proximal metric is
//! the empirical `H¹` Gram matrix; in `L²` mode it drops the gradient terms.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bellman::{
    advantage_targets, bilinear_vector, check_learning_rate, l2_gram, sobolev_gram, solve_advantage_regression,
    value_prox_step,
};
use crate::data::{Dataset, Fold};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::funcspace::{AdvantageClass, Coeffs, ValueClass};
use crate::par::Parallelism;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Sobolev,
    L2,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Sobolev => "sobolev",
            Mode::L2 => "l2",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sobolev" => Ok(Mode::Sobolev),
            "l2" => Ok(Mode::L2),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}` (expected sobolev or l2)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Number of outer iterations `N`.
    pub iterations: usize,
    /// Step size `α`. Zero freezes the value iterate.
    pub alpha: f64,
    /// Ridge on the advantage regression; `None` uses the trace-scaled default.
    pub ridge: Option<f64>,
    pub mode: Mode,
    /// Reuse the whole dataset at every step instead of splitting it.
    pub no_split: bool,
    pub theta0: Option<Coeffs>,
    pub eta0: Option<Coeffs>,
    pub par: Parallelism,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            alpha: 0.2,
            ridge: None,
            mode: Mode::Sobolev,
            no_split: false,
            theta0: None,
            eta0: None,
            par: Parallelism::default(),
        }
    }
}

/// One row of the iterate log, describing `(θ_t, η_t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub t: usize,
    pub theta_norm: f64,
    pub eta_norm: f64,
    /// `‖b‖` of the value step that produced `θ_t`; absent at `t = 0`.
    pub resid_norm: Option<f64>,
    pub err_v_h1: Option<f64>,
    pub err_q_l2: Option<f64>,
    pub theta_projected: bool,
    pub eta_projected: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterateLog {
    pub records: Vec<IterateRecord>,
    /// Folds in the order they were consumed.
    pub folds_used: Vec<usize>,
}

impl IterateLog {
    /// Oracle value errors, if every record carries one.
    pub fn value_errors(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.err_v_h1).collect()
    }

    pub fn advantage_errors(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.err_q_l2).collect()
    }

    /// Number of value steps whose result was projected.
    pub fn value_projections(&self) -> usize {
        self.records.iter().filter(|r| r.theta_projected).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub theta: Coeffs,
    pub eta: Coeffs,
    pub log: IterateLog,
    /// `(θ_t, η_t)` for `t = 0..=N`.
    pub history: Vec<(Coeffs, Coeffs)>,
}

/// Oracle errors `(‖v - v*_h‖², ‖q - q*_h‖²)` of a coefficient pair.
pub type Evaluator<'a> = dyn Fn(&Coeffs, &Coeffs) -> Result<(f64, f64)> + 'a;

fn initial(given: &Option<Coeffs>, len: usize, radius: f64, what: &'static str) -> Result<Coeffs> {
    let c = given.clone().unwrap_or_else(|| DVector::zeros(len));
    if c.len() != len {
        return Err(Error::DimensionMismatch {
            context: what,
            expected: len,
            got: c.len(),
        });
    }
    if c.norm() > radius || c.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} lies outside its coefficient ball")));
    }
    Ok(c)
}

/// Runs `N` alternating advantage and proximal value updates.
pub fn fit(
    dataset: &Dataset,
    env: &Environment,
    value: &ValueClass,
    adv: &AdvantageClass,
    config: &SolverConfig,
    evaluator: Option<&Evaluator<'_>>,
) -> Result<FitResult> {
    let n_iter = config.iterations;
    if n_iter == 0 {
        return Err(Error::InvalidArgument("at least one iteration is required".into()));
    }
    if !(config.alpha >= 0.0 && config.alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("α must be non-negative, got {}", config.alpha)));
    }
    let whole = config.no_split.then(|| dataset.whole());
    if whole.is_none() && dataset.num_folds() < 2 * n_iter {
        return Err(Error::InsufficientData {
            folds: 2 * n_iter,
            trajectories: dataset.n(),
        });
    }
    if config.alpha > 0.0 {
        check_learning_rate(env, config.alpha);
    }
    let fold = |k: usize| -> Result<Fold<'_>> {
        match &whole {
            Some(w) => Ok(w.clone()),
            None => dataset.fold(k),
        }
    };

    let mut theta = initial(&config.theta0, value.len(), value.radius(), "initial value coefficients")?;
    let mut eta = initial(&config.eta0, adv.len(), adv.radius(), "initial advantage coefficients")?;
    let mut log = IterateLog::default();
    let mut history = Vec::with_capacity(n_iter + 1);
    let record = |t, theta: &Coeffs, eta: &Coeffs, resid, projected: (bool, bool)| -> Result<IterateRecord> {
        let errs = evaluator.map(|f| f(theta, eta)).transpose()?;
        Ok(IterateRecord {
            t,
            theta_norm: theta.norm(),
            eta_norm: eta.norm(),
            resid_norm: resid,
            err_v_h1: errs.map(|e| e.0),
            err_q_l2: errs.map(|e| e.1),
            theta_projected: projected.0,
            eta_projected: projected.1,
        })
    };
    log.records.push(record(0, &theta, &eta, None, (false, false))?);
    history.push((theta.clone(), eta.clone()));

    for t in 0..n_iter {
        let step = || -> Result<_> {
            let (kq, kv) = if config.no_split { (0, 0) } else { (2 * t, 2 * t + 1) };
            let fold_q = fold(kq)?;
            let problem = advantage_targets(&fold_q, env, value, &theta, adv, &eta, config.par)?;
            let reg = solve_advantage_regression(&problem, adv, config.ridge)?;
            let fold_v = fold(kv)?;
            let gram = match config.mode {
                Mode::Sobolev => sobolev_gram(&fold_v, env, value, config.par)?,
                Mode::L2 => l2_gram(&fold_v, env, value, config.par)?,
            };
            let b = bilinear_vector(&fold_v, env, value, &theta, adv, &reg.eta, config.par)?;
            let prox = value_prox_step(&gram.matrix, &b, &theta, config.alpha, env.h(), value.radius())?;
            Ok(((kq, kv), reg, prox, b.norm()))
        };
        let ((kq, kv), reg, prox, resid) = step().map_err(|e| e.in_iteration(t))?;
        log.folds_used.extend([kq, kv]);
        eta = reg.eta;
        theta = prox.theta;
        let rec = record(t + 1, &theta, &eta, Some(resid), (prox.projected, reg.projected))
            .map_err(|e| e.in_iteration(t))?;
        log::debug!(
            "t = {}: |θ| = {:.4e}, |η| = {:.4e}, |b| = {:.4e}",
            t + 1,
            rec.theta_norm,
            rec.eta_norm,
            resid
        );
        log.records.push(rec);
        history.push((theta.clone(), eta.clone()));
    }
    Ok(FitResult {
        theta,
        eta,
        log,
        history,
    })
}

/// [`fit`] with the plain `L²` proximal metric.
pub fn fit_l2_baseline(
    dataset: &Dataset,
    env: &Environment,
    value: &ValueClass,
    adv: &AdvantageClass,
    config: &SolverConfig,
    evaluator: Option<&Evaluator<'_>>,
) -> Result<FitResult> {
    let config = SolverConfig {
        mode: Mode::L2,
        ..config.clone()
    };
    fit(dataset, env, value, adv, &config, evaluator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::env::{builtin_env, builtin_env_with, EnvParams};
    use crate::funcspace::{AdvFeatureSpec, FeatureSpec};

    fn classes(env: &Environment, policy: &crate::env::BehaviorPolicy) -> (ValueClass, AdvantageClass) {
        let v = ValueClass::new("poly:3".parse::<FeatureSpec>().unwrap().build(env.dim()).unwrap(), 50.0).unwrap();
        let raw = "poly:3".parse::<AdvFeatureSpec>().unwrap().build(env.dim(), env.actions()).unwrap();
        (v, AdvantageClass::new(raw, policy.clone(), 50.0).unwrap())
    }

    fn setup(n: usize, iterations: usize) -> (crate::env::Benchmark, Dataset) {
        let b = builtin_env("ou1d").unwrap();
        let data = generate_dataset(&b.env, &b.policy, &b.initial, n, 17, Parallelism::default())
            .unwrap()
            .split_folds(2 * iterations)
            .unwrap();
        (b, data)
    }

    #[test]
    fn zero_step_freezes_value() {
        let (b, data) = setup(200, 5);
        let (v, q) = classes(&b.env, &b.policy);
        let cfg = SolverConfig {
            iterations: 5,
            alpha: 0.0,
            ..SolverConfig::default()
        };
        let fit = fit(&data, &b.env, &v, &q, &cfg, None).unwrap();
        assert!(fit.history.iter().all(|(t, _)| t == &DVector::zeros(4)));
        assert!(fit.history.iter().skip(1).any(|(_, e)| e.norm() > 0.0));
    }

    #[test]
    fn zero_reward_stays_at_zero() {
        let b = builtin_env_with(
            "ou1d",
            EnvParams {
                reward_noise: 0.0,
                ..EnvParams::default()
            },
        )
        .unwrap();
        let mut data = generate_dataset(&b.env, &b.policy, &b.initial, 100, 3, Parallelism::default()).unwrap();
        for t in &mut data.trajectories {
            let zeroed = crate::data::Trajectory::new(
                t.index,
                1,
                (0..=t.len()).flat_map(|k| t.state(k).to_vec()).collect(),
                t.actions().to_vec(),
                vec![0.0; t.len()],
            )
            .unwrap();
            *t = zeroed;
        }
        let data = data.split_folds(6).unwrap();
        let (v, q) = classes(&b.env, &b.policy);
        let cfg = SolverConfig {
            iterations: 3,
            ..SolverConfig::default()
        };
        let fit = fit(&data, &b.env, &v, &q, &cfg, None).unwrap();
        assert_eq!(fit.theta, DVector::zeros(4));
        assert_eq!(fit.eta, DVector::zeros(q.len()));
    }

    #[test]
    fn fold_audit_and_log_shape() {
        let (b, data) = setup(300, 4);
        let (v, q) = classes(&b.env, &b.policy);
        let cfg = SolverConfig {
            iterations: 4,
            ..SolverConfig::default()
        };
        let fit = fit(&data, &b.env, &v, &q, &cfg, None).unwrap();
        assert_eq!(fit.log.folds_used, (0..8).collect::<Vec<_>>());
        assert_eq!(fit.log.records.len(), 5);
        assert_eq!(fit.history.len(), 5);
        assert!(fit.log.records[0].resid_norm.is_none());
        assert!(fit.log.records[1..].iter().all(|r| r.resid_norm.is_some()));
        for (t, e) in &fit.history {
            assert!(t.norm() <= v.radius() && e.norm() <= q.radius());
        }
    }

    #[test]
    fn fold_shortage_is_reported() {
        let (b, data) = setup(100, 2);
        let (v, q) = classes(&b.env, &b.policy);
        let cfg = SolverConfig {
            iterations: 3,
            ..SolverConfig::default()
        };
        assert!(matches!(
            fit(&data, &b.env, &v, &q, &cfg, None),
            Err(Error::InsufficientData { folds: 6, .. })
        ));
    }

    #[test]
    fn deterministic_across_modes() {
        let (b, data) = setup(400, 3);
        let (v, q) = classes(&b.env, &b.policy);
        let cfg = SolverConfig {
            iterations: 3,
            ..SolverConfig::default()
        };
        let a = fit(&data, &b.env, &v, &q, &cfg, None).unwrap();
        let again = fit(&data, &b.env, &v, &q, &cfg, None).unwrap();
        let seq = fit(
            &data,
            &b.env,
            &v,
            &q,
            &SolverConfig {
                par: Parallelism::Sequential,
                ..cfg.clone()
            },
            None,
        )
        .unwrap();
        assert_eq!(a, again);
        assert_eq!(a, seq);
    }

    #[test]
    fn sobolev_and_l2_differ() {
        let (b, data) = setup(400, 2);
        let (v, q) = classes(&b.env, &b.policy);
        let cfg = SolverConfig {
            iterations: 2,
            ..SolverConfig::default()
        };
        let s = fit(&data, &b.env, &v, &q, &cfg, None).unwrap();
        let l = fit_l2_baseline(&data, &b.env, &v, &q, &cfg, None).unwrap();
        assert_eq!(s.history[1].1, l.history[1].1);
        assert_ne!(s.history[1].0, l.history[1].0);
    }

    #[test]
    fn no_split_reuses_everything() {
        let b = builtin_env("ou1d").unwrap();
        let data = generate_dataset(&b.env, &b.policy, &b.initial, 50, 2, Parallelism::default()).unwrap();
        let (v, q) = classes(&b.env, &b.policy);
        let cfg = SolverConfig {
            iterations: 3,
            no_split: true,
            ..SolverConfig::default()
        };
        let fit = fit(&data, &b.env, &v, &q, &cfg, None).unwrap();
        assert_eq!(fit.log.folds_used, vec![0; 6]);
    }

    #[test]
    fn iteration_errors_carry_the_index() {
        let (b, data) = setup(100, 2);
        let (v, q) = classes(&b.env, &b.policy);
        let cfg = SolverConfig {
            iterations: 2,
            ..SolverConfig::default()
        };
        let failing = |_: &Coeffs, _: &Coeffs| -> Result<(f64, f64)> { Err(Error::SingularGram) };
        let counted = std::cell::Cell::new(0);
        let after_first = |_: &Coeffs, _: &Coeffs| -> Result<(f64, f64)> {
            counted.set(counted.get() + 1);
            if counted.get() > 2 {
                Err(Error::SingularGram)
            } else {
                Ok((0.0, 0.0))
            }
        };
        assert!(matches!(fit(&data, &b.env, &v, &q, &cfg, Some(&failing)), Err(Error::SingularGram)));
        let err = fit(&data, &b.env, &v, &q, &cfg, Some(&after_first)).unwrap_err();
        assert!(matches!(err, Error::Iteration { iteration: 1, .. }));
        assert!(err.is_numeric());
    }
}
