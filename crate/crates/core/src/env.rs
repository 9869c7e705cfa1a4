//! Controlled diffusion environments with a finite action set.
//!
//! An [`Environment`] couples a controlled SDE `dX = b(X, a) dt + Σ(X) dB`
//! with a bounded reward, a discount rate `beta` and a control step `h`.
//! Actions are held fixed over each control interval; the interval is
//! integrated with Euler–Maruyama using `substeps` inner steps.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::distr::{Distribution, OpenClosed01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random stream used for all simulation.
pub type StreamRng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Ordered, duplicate-free list of action vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    actions: Vec<Vec<f64>>,
}

impl ActionSet {
    pub fn new(actions: Vec<Vec<f64>>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidEnvironment("action set is empty".into()));
        }
        let dim = actions[0].len();
        for (i, a) in actions.iter().enumerate() {
            if a.len() != dim {
                return Err(Error::InvalidEnvironment(format!(
                    "action {i} has dimension {} (expected {dim})",
                    a.len()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidEnvironment(format!("action {i} is not finite")));
            }
            if actions[..i].contains(a) {
                return Err(Error::InvalidEnvironment(format!("duplicate action {a:?}")));
            }
        }
        Ok(Self { actions })
    }

    /// Scalar actions.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].len()
    }

    pub fn get(&self, idx: usize) -> &[f64] {
        &self.actions[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.actions.iter().map(Vec::as_slice)
    }
}

/// Drift and diffusion of a controlled SDE.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Writes `b(x, action)` into `out`.
    fn drift(&self, x: &[f64], action: &[f64], out: &mut [f64]);

    /// Writes the diffusion factor `Λ(x)^{1/2}` (row-major `d×d`) into `out`.
    fn diffusion_factor(&self, x: &[f64], out: &mut [f64]);

    /// Parameters of the exact Gaussian kernel, when the drift is linear and the
    /// diffusion constant.
    fn linear_gaussian(&self) -> Option<LinearGaussian> {
        None
    }
}

/// `b(x, a) = a - κ x`, `Λ = σ² I`, applied coordinatewise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    pub kappa: f64,
    pub sigma: f64,
}

impl LinearGaussian {
    /// Mean and variance (per coordinate) of `X_h` given `X_0 = x` under action `a`.
    pub fn transition(&self, x: f64, a: f64, h: f64) -> (f64, f64) {
        let decay = (-self.kappa * h).exp();
        let mean = x * decay + a * (1.0 - decay) / self.kappa;
        let var = self.sigma * self.sigma * (1.0 - (-2.0 * self.kappa * h).exp()) / (2.0 * self.kappa);
        (mean, var)
    }
}

/// Ornstein–Uhlenbeck process pulled towards the action: `dX = (a - κX) dt + σ dB`.
#[derive(Clone, Debug)]
pub struct OrnsteinUhlenbeck {
    pub dim: usize,
    pub kappa: f64,
    pub sigma: f64,
}

impl Dynamics for OrnsteinUhlenbeck {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &[f64], action: &[f64], out: &mut [f64]) {
        for ((o, &xi), &ai) in out.iter_mut().zip(x).zip(action) {
            *o = ai - self.kappa * xi;
        }
    }

    fn diffusion_factor(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = self.sigma;
        }
    }

    fn linear_gaussian(&self) -> Option<LinearGaussian> {
        Some(LinearGaussian {
            kappa: self.kappa,
            sigma: self.sigma,
        })
    }
}

/// Scalar double-well: `dX = (a + X - X³) dt + σ dB`.
#[derive(Clone, Debug)]
pub struct DoubleWell {
    pub sigma: f64,
}

impl Dynamics for DoubleWell {
    fn dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], action: &[f64], out: &mut [f64]) {
        out[0] = action[0] + x[0] - x[0].powi(3);
    }

    fn diffusion_factor(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma;
    }
}

type RewardFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// Declared structural constants of an environment, checked by sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConstants {
    /// Ellipticity bounds on the eigenvalues of `Λ(x)`.
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `B` in `b(x, a)ᵀx ≤ B`.
    pub stability_bound: f64,
    /// `sup |r(x, a)|`.
    pub reward_bound: f64,
}

/// Tunable scalars of an environment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub beta: f64,
    pub h: f64,
    pub substeps: usize,
    pub reward_noise: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            h: 0.1,
            substeps: 10,
            reward_noise: 0.1,
        }
    }
}

/// A controlled diffusion with discrete actuation. Immutable once built.
#[derive(Clone)]
pub struct Environment {
    name: String,
    dynamics: Arc<dyn Dynamics>,
    reward: Arc<RewardFn>,
    actions: ActionSet,
    params: EnvParams,
    constants: EnvConstants,
}

impl fmt::Debug for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Environment")
            .field("name", &self.name)
            .field("dynamics", &self.dynamics)
            .field("actions", &self.actions)
            .field("params", &self.params)
            .field("constants", &self.constants)
            .finish()
    }
}

impl Environment {
    pub fn new<R>(
        name: impl Into<String>,
        dynamics: Arc<dyn Dynamics>,
        reward: R,
        actions: ActionSet,
        params: EnvParams,
        constants: EnvConstants,
    ) -> Result<Self>
    where
        R: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        let EnvParams {
            beta,
            h,
            substeps,
            reward_noise,
        } = params;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidEnvironment(format!("beta must be positive, got {beta}")));
        }
        if !(h > 0.0 && h < 0.5) {
            return Err(Error::InvalidEnvironment(format!("h must lie in (0, 1/2), got {h}")));
        }
        if substeps == 0 {
            return Err(Error::InvalidEnvironment("substeps must be at least 1".into()));
        }
        if !(reward_noise >= 0.0) {
            return Err(Error::InvalidEnvironment(format!(
                "reward noise must be nonnegative, got {reward_noise}"
            )));
        }
        if constants.reward_bound + reward_noise > 1.0 + 1e-12 {
            return Err(Error::InvalidEnvironment(format!(
                "observed rewards may exceed 1: sup|r| = {} plus noise {reward_noise}",
                constants.reward_bound
            )));
        }
        if !(constants.lambda_min > 0.0 && constants.lambda_min <= constants.lambda_max) {
            return Err(Error::InvalidEnvironment(format!(
                "ellipticity bounds must satisfy 0 < λ_min ≤ λ_max, got [{}, {}]",
                constants.lambda_min, constants.lambda_max
            )));
        }
        Ok(Self {
            name: name.into(),
            dynamics,
            reward: Arc::new(reward),
            actions,
            params,
            constants,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn actions(&self) -> &ActionSet {
        &self.actions
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn constants(&self) -> &EnvConstants {
        &self.constants
    }

    pub fn beta(&self) -> f64 {
        self.params.beta
    }

    pub fn h(&self) -> f64 {
        self.params.h
    }

    pub fn substeps(&self) -> usize {
        self.params.substeps
    }

    pub fn reward_noise(&self) -> f64 {
        self.params.reward_noise
    }

    /// Per-step discount factor `e^{-βh}`.
    pub fn discount(&self) -> f64 {
        (-self.params.beta * self.params.h).exp()
    }

    /// `1 - e^{-βh}`, the stopping probability of the observed chain.
    pub fn stop_probability(&self) -> f64 {
        -(-self.params.beta * self.params.h).exp_m1()
    }

    /// Same environment with different scalars (re-validated).
    pub fn with_params(&self, params: EnvParams) -> Result<Self> {
        let reward = Arc::clone(&self.reward);
        Self::new(
            self.name.clone(),
            Arc::clone(&self.dynamics),
            move |x: &[f64], a: &[f64]| reward(x, a),
            self.actions.clone(),
            params,
            self.constants,
        )
    }

    /// Mean reward `r(x, a)`.
    pub fn reward(&self, x: &[f64], a_idx: usize) -> f64 {
        (self.reward)(x, self.actions.get(a_idx))
    }

    /// `r^{π}(x) = Σ_a π(a|x) r(x, a)`.
    pub fn policy_reward(&self, x: &[f64], policy: &BehaviorPolicy) -> f64 {
        let probs = policy.probs(x);
        probs
            .iter()
            .enumerate()
            .map(|(a, p)| p * self.reward(x, a))
            .sum()
    }

    /// Noisy reward observation `r(x, a) + U[-σ_R, σ_R]`.
    pub fn sample_reward<R: Rng + ?Sized>(&self, x: &[f64], a_idx: usize, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.reward(x, a_idx) + self.params.reward_noise * (2.0 * u - 1.0)
    }

    /// Integrates one control interval `[0, h)` with the action held fixed.
    pub fn simulate_interval<R: Rng + ?Sized>(&self, x: &[f64], a_idx: usize, rng: &mut R) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "simulate_interval state",
                expected: self.dim(),
                got: x.len(),
            });
        }
        if a_idx >= self.n_actions() {
            return Err(Error::InvalidArgument(format!(
                "action index {a_idx} out of range for {} actions",
                self.n_actions()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationBlowup { substep: 0 });
        }
        let mut state = x.to_vec();
        let mut scratch = SimScratch::new(self.dim());
        self.advance(&mut state, a_idx, &mut scratch, rng)?;
        Ok(state)
    }

    pub(crate) fn advance<R: Rng + ?Sized>(
        &self,
        state: &mut [f64],
        a_idx: usize,
        scratch: &mut SimScratch,
        rng: &mut R,
    ) -> Result<()> {
        let d = self.dim();
        let action = self.actions.get(a_idx);
        let dt = self.params.h / self.params.substeps as f64;
        let sqrt_dt = dt.sqrt();
        for step in 1..=self.params.substeps {
            self.dynamics.drift(state, action, &mut scratch.drift);
            self.dynamics.diffusion_factor(state, &mut scratch.factor);
            for z in scratch.noise.iter_mut() {
                *z = rng.sample(StandardNormal);
            }
            for i in 0..d {
                let mut shock = 0.0;
                for j in 0..d {
                    shock += scratch.factor[i * d + j] * scratch.noise[j];
                }
                state[i] += scratch.drift[i] * dt + shock * sqrt_dt;
            }
            if state.iter().any(|v| !v.is_finite()) {
                return Err(Error::SimulationBlowup { substep: step });
            }
        }
        Ok(())
    }
}

pub(crate) struct SimScratch {
    drift: Vec<f64>,
    factor: Vec<f64>,
    noise: Vec<f64>,
}

impl SimScratch {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            drift: vec![0.0; d],
            factor: vec![0.0; d * d],
            noise: vec![0.0; d],
        }
    }
}

type PolicyFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Known behavior policy generating the offline data.
#[derive(Clone)]
pub struct BehaviorPolicy {
    n_actions: usize,
    p_min: f64,
    probs: Option<Arc<PolicyFn>>,
}

impl fmt::Debug for BehaviorPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BehaviorPolicy")
            .field("n_actions", &self.n_actions)
            .field("p_min", &self.p_min)
            .field("uniform", &self.probs.is_none())
            .finish()
    }
}

impl BehaviorPolicy {
    pub fn uniform(n_actions: usize) -> Self {
        assert!(n_actions > 0);
        Self {
            n_actions,
            p_min: 1.0 / n_actions as f64,
            probs: None,
        }
    }

    /// State-dependent policy. `p_min` is the declared lower bound on every
    /// action probability and is enforced by [`BehaviorPolicy::validate_at`].
    pub fn from_fn<F>(n_actions: usize, p_min: f64, f: F) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if n_actions == 0 {
            return Err(Error::InvalidPolicy("no actions".into()));
        }
        if !(p_min > 0.0 && p_min * n_actions as f64 <= 1.0 + 1e-12) {
            return Err(Error::InvalidPolicy(format!(
                "p_min = {p_min} infeasible for {n_actions} actions"
            )));
        }
        Ok(Self {
            n_actions,
            p_min,
            probs: Some(Arc::new(f)),
        })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    /// `c_𝔸 = p_min^{-1/2}`: `max_a |q(x,a)| ≤ c_𝔸 (Σ_a π(a|x) q(x,a)²)^{1/2}`.
    pub fn action_comparison_constant(&self) -> f64 {
        self.p_min.powf(-0.5)
    }

    pub fn probs_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.probs {
            None => out.fill(1.0 / self.n_actions as f64),
            Some(f) => f(x, out),
        }
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_actions];
        self.probs_into(x, &mut out);
        out
    }

    /// Checks that the probability vector at `x` is valid and respects `p_min`.
    pub fn validate_at(&self, x: &[f64]) -> Result<()> {
        let p = self.probs(x);
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidPolicy(format!("negative or non-finite entry at {x:?}: {p:?}")));
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidPolicy(format!("probabilities sum to {sum} at {x:?}")));
        }
        let min = p.iter().copied().fold(f64::INFINITY, f64::min);
        if min < self.p_min * (1.0 - 1e-12) {
            return Err(Error::InvalidPolicy(format!(
                "minimum probability {min} below p_min {} at {x:?}",
                self.p_min
            )));
        }
        Ok(())
    }

    /// Draws an action index with one uniform variate.
    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        match &self.probs {
            None => ((u * self.n_actions as f64) as usize).min(self.n_actions - 1),
            Some(_) => {
                let p = self.probs(x);
                let mut acc = 0.0;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i;
                    }
                }
                self.n_actions - 1
            }
        }
    }
}

/// Initial state distribution `ρ₀`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitialDistribution {
    /// Isotropic Gaussian `N(mean·1, std² I)`.
    Normal { dim: usize, mean: f64, std: f64 },
    Point(Vec<f64>),
}

impl InitialDistribution {
    pub fn standard_normal(dim: usize) -> Self {
        InitialDistribution::Normal {
            dim,
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialDistribution::Normal { dim, .. } => *dim,
            InitialDistribution::Point(x) => x.len(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            InitialDistribution::Normal { dim, mean, std } => (0..*dim)
                .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            InitialDistribution::Point(x) => x.clone(),
        }
    }

    /// Unnormalised 1-D density, used to seed grid occupancy computations.
    pub fn density_1d(&self, x: f64) -> Option<f64> {
        match self {
            InitialDistribution::Normal { dim: 1, mean, std } => {
                let z = (x - mean) / std;
                Some((-0.5 * z * z).exp())
            }
            _ => None,
        }
    }
}

/// Environment bundled with its behavior policy and initial distribution.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub env: Environment,
    pub policy: BehaviorPolicy,
    pub initial: InitialDistribution,
}

pub const BUILTIN_NAMES: [&str; 3] = ["ou1d", "doublewell1d", "ou2d"];

fn gaussian_bump_reward(x: &[f64], a: &[f64]) -> f64 {
    let x2: f64 = x.iter().map(|v| v * v).sum();
    let a2: f64 = a.iter().map(|v| v * v).sum();
    0.8 * (-x2).exp() - 0.1 * a2
}

/// Builtin benchmark with default parameters.
pub fn builtin_env(name: &str) -> Result<Benchmark> {
    builtin_env_with(name, EnvParams::default())
}

/// Builtin benchmark with overridden scalars.
///
/// * `ou1d`: `b(x,a) = a - x`, `Λ = 1`, actions `{-1, 0, 1}`.
/// * `doublewell1d`: `b(x,a) = a + x - x³`, otherwise as `ou1d`.
/// * `ou2d`: coordinatewise `ou1d` with actions `{-1, 0, 1}²`.
///
/// All use `r(x,a) = 0.8·exp(-|x|²) - 0.1·|a|²`, a uniform behavior policy and
/// `ρ₀ = N(0, I)`.
pub fn builtin_env_with(name: &str, params: EnvParams) -> Result<Benchmark> {
    builtin_env_sigma(name, params, 1.0)
}

/// Builtin benchmark with overridden scalars and diffusion scale `σ`. With
/// `σ = 0` the ellipticity constants are meaningless; only the simulation is
/// affected, which is what deterministic tests need.
pub fn builtin_env_sigma(name: &str, params: EnvParams, sigma: f64) -> Result<Benchmark> {
    let lam = (sigma * sigma).max(f64::MIN_POSITIVE);
    let (dynamics, actions, stability_bound): (Arc<dyn Dynamics>, ActionSet, f64) = match name {
        "ou1d" => (
            Arc::new(OrnsteinUhlenbeck {
                dim: 1,
                kappa: 1.0,
                sigma,
            }),
            ActionSet::scalar(&[-1.0, 0.0, 1.0])?,
            0.25,
        ),
        // max over x of x + x² - x⁴ is ≈ 1.0554
        "doublewell1d" => (
            Arc::new(DoubleWell { sigma }),
            ActionSet::scalar(&[-1.0, 0.0, 1.0])?,
            1.06,
        ),
        "ou2d" => {
            let mut acts = Vec::new();
            for a0 in [-1.0, 0.0, 1.0] {
                for a1 in [-1.0, 0.0, 1.0] {
                    acts.push(vec![a0, a1]);
                }
            }
            (
                Arc::new(OrnsteinUhlenbeck {
                    dim: 2,
                    kappa: 1.0,
                    sigma,
                }),
                ActionSet::new(acts)?,
                0.5,
            )
        }
        other => return Err(Error::UnknownEnvironment(other.to_string())),
    };
    let dim = dynamics.dim();
    let n_actions = actions.len();
    let env = Environment::new(
        name,
        dynamics,
        gaussian_bump_reward,
        actions,
        params,
        EnvConstants {
            lambda_min: lam,
            lambda_max: lam,
            stability_bound,
            reward_bound: 0.8,
        },
    )?;
    Ok(Benchmark {
        env,
        policy: BehaviorPolicy::uniform(n_actions),
        initial: InitialDistribution::standard_normal(dim),
    })
}

/// Outcome of the sampled structural-assumption checks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub states_checked: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub ellipticity_ok: bool,
    pub max_drift_inner: f64,
    pub stability_ok: bool,
    pub min_probability: f64,
}

impl AssumptionReport {
    pub fn all_ok(&self) -> bool {
        self.ellipticity_ok && self.stability_ok
    }
}

/// Spot-checks ellipticity, drift stability and policy validity on `n_states`
/// states drawn uniformly from `[-5, 5]^d`.
///
/// Ellipticity and stability failures only warn. An invalid probability vector
/// is an error.
pub fn check_assumptions<R: Rng + ?Sized>(
    env: &Environment,
    policy: &BehaviorPolicy,
    n_states: usize,
    rng: &mut R,
) -> Result<AssumptionReport> {
    let d = env.dim();
    let consts = env.constants();
    let mut factor = vec![0.0; d * d];
    let mut drift = vec![0.0; d];
    let mut report = AssumptionReport {
        states_checked: n_states,
        min_eigenvalue: f64::INFINITY,
        max_eigenvalue: f64::NEG_INFINITY,
        ellipticity_ok: true,
        max_drift_inner: f64::NEG_INFINITY,
        stability_ok: true,
        min_probability: f64::INFINITY,
    };
    for _ in 0..n_states {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..=5.0)).collect();
        env.dynamics().diffusion_factor(&x, &mut factor);
        let s = DMatrix::from_row_slice(d, d, &factor);
        let eig = (&s * s.transpose()).symmetric_eigenvalues();
        report.min_eigenvalue = report.min_eigenvalue.min(eig.min());
        report.max_eigenvalue = report.max_eigenvalue.max(eig.max());
        for a in env.actions().iter() {
            env.dynamics().drift(&x, a, &mut drift);
            let inner: f64 = drift.iter().zip(&x).map(|(b, xi)| b * xi).sum();
            report.max_drift_inner = report.max_drift_inner.max(inner);
        }
        policy.validate_at(&x)?;
        let pmin = policy.probs(&x).into_iter().fold(f64::INFINITY, f64::min);
        report.min_probability = report.min_probability.min(pmin);
    }
    let tol = 1e-12;
    report.ellipticity_ok = report.min_eigenvalue >= consts.lambda_min * (1.0 - tol)
        && report.max_eigenvalue <= consts.lambda_max * (1.0 + tol);
    report.stability_ok = report.max_drift_inner <= consts.stability_bound + tol;
    if !report.ellipticity_ok {
        log::warn!(
            "{}: diffusion eigenvalues [{:.4e}, {:.4e}] outside declared [{}, {}]",
            env.name(),
            report.min_eigenvalue,
            report.max_eigenvalue,
            consts.lambda_min,
            consts.lambda_max
        );
    }
    if !report.stability_ok {
        log::warn!(
            "{}: drift inner product reaches {:.4} > B = {}",
            env.name(),
            report.max_drift_inner,
            consts.stability_bound
        );
    }
    Ok(report)
}

/// Constants entering the lower bound on the discount rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityConstants {
    pub c: f64,
    pub c_mall: f64,
    pub c_discr: f64,
    pub c_action: f64,
}

/// Soft check `β ≥ c·max{c_Mall² log(1/h), c_discr, c_𝔸 √log(1/h)}`. Warns and
/// returns `false` when violated.
pub fn check_discount_rate(beta: f64, h: f64, k: &RegularityConstants) -> bool {
    let log_inv_h = (1.0 / h).ln();
    let bound = k.c
        * (k.c_mall * k.c_mall * log_inv_h)
            .max(k.c_discr)
            .max(k.c_action * log_inv_h.sqrt());
    let ok = beta >= bound;
    if !ok {
        log::warn!("discount rate β = {beta} below the recommended lower bound {bound:.4}");
    }
    ok
}

/// Largest step size allowed by `α ≤ c₁ min{λ_min/λ_max², β/log(1/h)}`.
pub fn learning_rate_bound(constants: &EnvConstants, beta: f64, h: f64, c1: f64) -> f64 {
    let l = constants.lambda_min / (constants.lambda_max * constants.lambda_max);
    c1 * l.min(beta / (1.0 / h).ln())
}

/// Draws a uniform variate in `(0, 1]`.
pub(crate) fn open_closed_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    OpenClosed01.sample(rng)
}
