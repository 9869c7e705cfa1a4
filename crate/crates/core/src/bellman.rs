//! Empirical Sobolev Gram matrices, regression targets, the empirical Bellman
//! bilinear form, and Monte Carlo population operators.
//!
//! All assembly loops are chunked map-reduces over the tuples of a fold (see
//! [`crate::par`]), so results do not depend on the thread count.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{sample_horizon, Fold, Transition};
use crate::env::{stream_rng, BehaviorPolicy, Environment, InitialDistribution, SimScratch};
use crate::error::{Error, Result};
use crate::funcspace::{dot, project_ball, AdvantageClass, Coeffs, Metric, ValueClass};
use crate::par::{self, Parallelism, CHUNK};

/// `G = scale · Σ (φφᵀ + JJᵀ)` over the tuples of a fold, so that
/// `⟨θ₁ᵀφ, θ₂ᵀφ⟩ = θ₁ᵀGθ₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct SobolevGram {
    pub matrix: DMatrix<f64>,
    pub scale: f64,
}

impl SobolevGram {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `θᵀGθ`.
    pub fn quadratic_form(&self, theta: &Coeffs) -> f64 {
        theta.dot(&(&self.matrix * theta))
    }
}

fn check_fold(fold: &Fold<'_>) -> Result<()> {
    if fold.is_empty() || fold.n_trajectories == 0 {
        Err(Error::Empty("fold"))
    } else {
        Ok(())
    }
}

fn check_state(class: &ValueClass, env: &Environment) -> Result<()> {
    if class.state_dim() == env.dim() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context: "value features vs environment",
            expected: env.dim(),
            got: class.state_dim(),
        })
    }
}

fn gram(fold: &Fold<'_>, env: &Environment, class: &ValueClass, gradients: bool, par: Parallelism) -> Result<SobolevGram> {
    check_fold(fold)?;
    check_state(class, env)?;
    let (p, d) = (class.len(), class.state_dim());
    let features = class.features();
    let tuples = &fold.tuples;
    let sum = par::chunked_reduce(
        tuples.len(),
        CHUNK,
        par,
        |range| {
            let mut acc = DMatrix::<f64>::zeros(p, p);
            let mut phi = vec![0.0; p];
            let mut jac = vec![0.0; p * d];
            for t in &tuples[range] {
                features.eval_into(t.x, &mut phi);
                if gradients {
                    features.jacobian_into(t.x, &mut jac);
                }
                for j in 0..p {
                    for i in j..p {
                        let mut v = phi[i] * phi[j];
                        if gradients {
                            v += dot(&jac[i * d..(i + 1) * d], &jac[j * d..(j + 1) * d]);
                        }
                        acc[(i, j)] += v;
                    }
                }
            }
            acc
        },
        |a, b| a + b,
    )
    .ok_or(Error::Empty("fold"))?;
    let scale = fold.scale(env);
    let mut matrix = sum * scale;
    for j in 0..p {
        for i in j + 1..p {
            matrix[(j, i)] = matrix[(i, j)];
        }
    }
    Ok(SobolevGram { matrix, scale })
}

/// Empirical Sobolev Gram matrix of a fold.
pub fn sobolev_gram(fold: &Fold<'_>, env: &Environment, class: &ValueClass, par: Parallelism) -> Result<SobolevGram> {
    gram(fold, env, class, true, par)
}

/// Empirical `L²` Gram matrix `scale · Σ φφᵀ` (no gradient terms).
pub fn l2_gram(fold: &Fold<'_>, env: &Environment, class: &ValueClass, par: Parallelism) -> Result<SobolevGram> {
    gram(fold, env, class, false, par)
}

/// Least-squares inputs for the advantage update.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionProblem {
    /// One centred feature row `ψ̃(x_k, a_k)` per tuple.
    pub design: DMatrix<f64>,
    pub targets: DVector<f64>,
}

/// Regression target of one tuple and the design row.
fn target_row(
    t: &Transition<'_>,
    env: &Environment,
    value: &ValueClass,
    theta: &Coeffs,
    adv: &AdvantageClass,
    eta: &Coeffs,
    phi: &mut [f64],
) -> (Vec<f64>, f64) {
    let q = adv.len();
    let gamma = env.discount();
    value.features().eval_into(t.x, phi);
    let v = dot(phi, theta.as_slice());
    value.features().eval_into(t.x_next, phi);
    let v_next = dot(phi, theta.as_slice());
    let (next_feats, _) = adv.centered_all(t.x_next);
    let q_next = next_feats
        .chunks(q)
        .map(|row| dot(row, eta.as_slice()))
        .fold(f64::NEG_INFINITY, f64::max);
    let target = t.r + gamma / env.h() * (v_next - v) + gamma * q_next;
    (adv.centered(t.x, t.a_idx), target)
}

fn check_coeffs(value: &ValueClass, theta: &Coeffs, adv: &AdvantageClass, eta: &Coeffs) -> Result<()> {
    if theta.len() != value.len() {
        return Err(Error::DimensionMismatch {
            context: "value coefficients",
            expected: value.len(),
            got: theta.len(),
        });
    }
    if eta.len() != adv.len() {
        return Err(Error::DimensionMismatch {
            context: "advantage coefficients",
            expected: adv.len(),
            got: eta.len(),
        });
    }
    Ok(())
}

/// Builds the advantage regression on a fold: rows `ψ̃(x_k, a_k)` and targets
/// `R + (e^{-βh}/h)(v(x') - v(x)) + e^{-βh} max_a' q(x', a')`.
pub fn advantage_targets(
    fold: &Fold<'_>,
    env: &Environment,
    value: &ValueClass,
    theta: &Coeffs,
    adv: &AdvantageClass,
    eta: &Coeffs,
    par: Parallelism,
) -> Result<RegressionProblem> {
    check_fold(fold)?;
    check_state(value, env)?;
    check_coeffs(value, theta, adv, eta)?;
    let (n, q) = (fold.len(), adv.len());
    let chunks = par::chunk_ranges(n, CHUNK);
    let parts = par::map_collect(chunks.len(), par, |c| {
        let mut phi = vec![0.0; value.len()];
        fold.tuples[chunks[c].clone()]
            .iter()
            .map(|t| target_row(t, env, value, theta, adv, eta, &mut phi))
            .collect::<Vec<_>>()
    });
    let mut design = DMatrix::zeros(n, q);
    let mut targets = DVector::zeros(n);
    for (k, (row, y)) in parts.into_iter().flatten().enumerate() {
        design.row_mut(k).copy_from_slice(&row);
        targets[k] = y;
    }
    Ok(RegressionProblem { design, targets })
}

/// Fitted advantage coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionFit {
    pub eta: Coeffs,
    pub ridge: f64,
    /// Whether the ball constraint was active.
    pub projected: bool,
}

/// Default ridge `1e-8 · tr(AᵀA) / q`.
pub fn default_ridge(ata: &DMatrix<f64>) -> f64 {
    1e-8 * ata.trace() / ata.nrows() as f64
}

/// Minimises `‖Aη - y‖² + λ‖η‖²` over `‖η‖₂ ≤ R_q`.
///
/// The unconstrained ridge solution is projected onto the ball in the metric
/// `AᵀA + λI`, which is exact for the constrained problem.
pub fn solve_advantage_regression(
    problem: &RegressionProblem,
    adv: &AdvantageClass,
    ridge: Option<f64>,
) -> Result<RegressionFit> {
    let a = &problem.design;
    if a.nrows() == 0 {
        return Err(Error::Empty("regression design"));
    }
    if a.ncols() != adv.len() {
        return Err(Error::DimensionMismatch {
            context: "regression design columns",
            expected: adv.len(),
            got: a.ncols(),
        });
    }
    let q = a.ncols();
    let ata = a.tr_mul(a);
    let aty = a.tr_mul(&problem.targets);
    let lambda = ridge.unwrap_or_else(|| default_ridge(&ata));
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge must be non-negative, got {lambda}")));
    }
    let metric = &ata + DMatrix::identity(q, q) * lambda;
    let chol = Cholesky::new(metric.clone())
        .ok_or_else(|| Error::Conditioning(format!("AᵀA + λI not positive definite (λ = {lambda:e})")))?;
    let eta = chol.solve(&aty);
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning("non-finite regression solution".into()));
    }
    let proj = project_ball(&eta, adv.radius(), Metric::Matrix(&metric))?;
    Ok(RegressionFit {
        eta: proj.theta,
        ridge: lambda,
        projected: proj.active,
    })
}

/// `b_j = B_n(v_θ, φ_j, q_η)`: the empirical Bellman residual of `(v_θ, q_η)`
/// tested against each value feature.
pub fn bilinear_vector(
    fold: &Fold<'_>,
    env: &Environment,
    value: &ValueClass,
    theta: &Coeffs,
    adv: &AdvantageClass,
    eta: &Coeffs,
    par: Parallelism,
) -> Result<DVector<f64>> {
    check_fold(fold)?;
    check_state(value, env)?;
    check_coeffs(value, theta, adv, eta)?;
    let (p, q) = (value.len(), adv.len());
    let (h, gamma) = (env.h(), env.discount());
    let tuples = &fold.tuples;
    let sum = par::chunked_reduce(
        tuples.len(),
        CHUNK,
        par,
        |range| {
            let mut acc = DVector::<f64>::zeros(p);
            let mut phi = vec![0.0; p];
            let mut phi_next = vec![0.0; p];
            for t in &tuples[range] {
                value.features().eval_into(t.x, &mut phi);
                value.features().eval_into(t.x_next, &mut phi_next);
                let (next_feats, _) = adv.centered_all(t.x_next);
                let q_next = next_feats
                    .chunks(q)
                    .map(|row| dot(row, eta.as_slice()))
                    .fold(f64::NEG_INFINITY, f64::max);
                let resid = dot(&phi, theta.as_slice())
                    - h * t.r
                    - gamma * dot(&phi_next, theta.as_slice())
                    - h * gamma * q_next;
                for (a, f) in acc.iter_mut().zip(&phi) {
                    *a += resid * f;
                }
            }
            acc
        },
        |a, b| a + b,
    )
    .ok_or(Error::Empty("fold"))?;
    Ok(sum * fold.scale(env))
}

/// Result of one proximal value step.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxStep {
    pub theta: Coeffs,
    pub projected: bool,
    /// Jitter added to the Gram diagonal, zero when none was needed.
    pub jitter: f64,
}

/// `argmin_{‖θ‖₂ ≤ R_v} (θ - θ_t)ᵀG(θ - θ_t) + (2α/h) bᵀ(θ - θ_t)`.
pub fn value_prox_step(
    gram: &DMatrix<f64>,
    b: &DVector<f64>,
    theta_t: &Coeffs,
    alpha: f64,
    h: f64,
    radius: f64,
) -> Result<ProxStep> {
    let p = gram.nrows();
    if gram.ncols() != p || b.len() != p || theta_t.len() != p {
        return Err(Error::DimensionMismatch {
            context: "value_prox_step",
            expected: p,
            got: if b.len() != p { b.len() } else { theta_t.len() },
        });
    }
    if !(alpha >= 0.0 && h > 0.0) {
        return Err(Error::InvalidArgument(format!("need α ≥ 0 and h > 0, got α = {alpha}, h = {h}")));
    }
    if alpha == 0.0 {
        return Ok(ProxStep {
            theta: theta_t.clone(),
            projected: false,
            jitter: 0.0,
        });
    }
    let (chol, metric, jitter) = factor_with_jitter(gram)?;
    let step = chol.solve(&(b * (-alpha / h)));
    let proj = project_ball(&(theta_t + step), radius, Metric::Matrix(&metric))?;
    Ok(ProxStep {
        theta: proj.theta,
        projected: proj.active,
        jitter,
    })
}

fn factor_with_jitter(gram: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>, f64)> {
    if let Some(c) = Cholesky::new(gram.clone()) {
        return Ok((c, gram.clone(), 0.0));
    }
    let p = gram.nrows();
    let jitter = 1e-12 * gram.trace() / p as f64;
    if !(jitter > 0.0) {
        return Err(Error::SingularGram);
    }
    let metric = gram + DMatrix::identity(p, p) * jitter;
    let chol = Cholesky::new(metric.clone()).ok_or(Error::SingularGram)?;
    log::debug!("Gram matrix needed jitter {jitter:e}");
    Ok((chol, metric, jitter))
}

/// Warns when `α` exceeds the step-size bound with `c₁ = 1`. Returns whether
/// the bound holds.
pub fn check_learning_rate(env: &Environment, alpha: f64) -> bool {
    let bound = crate::env::learning_rate_bound(env.constants(), env.beta(), env.h(), 1.0);
    let ok = alpha <= bound;
    if !ok {
        log::warn!("step size α = {alpha} exceeds the recommended bound {bound:.4}");
    }
    ok
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

/// One control interval from `x` under action `a_idx`, using the exact
/// Gaussian kernel when the dynamics provide one.
pub(crate) fn step_state<R: Rng + ?Sized>(env: &Environment, x: &[f64], a_idx: usize, scratch: &mut SimScratch, rng: &mut R) -> Result<Vec<f64>> {
    match env.dynamics().linear_gaussian() {
        Some(k) => {
            let a = env.actions().get(a_idx);
            Ok(x.iter()
                .zip(a)
                .map(|(&xi, &ai)| {
                    let (m, v) = k.transition(xi, ai, env.h());
                    m + v.sqrt() * rng.sample::<f64, _>(StandardNormal)
                })
                .collect())
        }
        None => {
            let mut s = x.to_vec();
            env.advance(&mut s, a_idx, scratch, rng)?;
            Ok(s)
        }
    }
}

/// Per-action sample mean and variance of `v(X_h) + h max_a' q(X_h, a')`.
fn continuation_moments<R: Rng + ?Sized>(
    env: &Environment,
    value: &ValueClass,
    theta: &Coeffs,
    adv: &AdvantageClass,
    eta: &Coeffs,
    x: &[f64],
    n_mc: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    if n_mc < 2 {
        return Err(Error::InvalidArgument("n_mc must be at least 2".into()));
    }
    check_coeffs(value, theta, adv, eta)?;
    let mut scratch = SimScratch::new(env.dim());
    (0..env.n_actions())
        .map(|a| {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n_mc {
                let y = step_state(env, x, a, &mut scratch, rng)?;
                let g = value.eval(theta, &y)? + env.h() * adv.max(eta, &y)?.0;
                sum += g;
                sum_sq += g * g;
            }
            let mean = sum / n_mc as f64;
            let var = (sum_sq - n_mc as f64 * mean * mean).max(0.0) / (n_mc - 1) as f64;
            Ok((mean, var))
        })
        .collect()
}

/// `h r^{π₀}(x) + e^{-βh} E^{π₀}[v(X_h) + h max_a' q(X_h, a')]`, with `n_mc`
/// fresh draws per action.
#[allow(clippy::too_many_arguments)]
pub fn mc_population_bellman_v<R: Rng + ?Sized>(
    env: &Environment,
    policy: &BehaviorPolicy,
    value: &ValueClass,
    theta: &Coeffs,
    adv: &AdvantageClass,
    eta: &Coeffs,
    x: &[f64],
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    let moments = continuation_moments(env, value, theta, adv, eta, x, n_mc, rng)?;
    let probs = policy.probs(x);
    let gamma = env.discount();
    let mean: f64 = probs.iter().zip(&moments).map(|(p, (m, _))| p * m).sum();
    let var: f64 = probs.iter().zip(&moments).map(|(p, (_, v))| p * p * v).sum();
    Ok(McEstimate {
        mean: env.h() * env.policy_reward(x, policy) + gamma * mean,
        se: gamma * (var / n_mc as f64).sqrt(),
    })
}

/// `r(x,a) - r^{π₀}(x) + (e^{-βh}/h)(E^a - E^{π₀})[v(X_h) + h max_a' q(X_h, a')]`.
#[allow(clippy::too_many_arguments)]
pub fn mc_population_bellman_q<R: Rng + ?Sized>(
    env: &Environment,
    policy: &BehaviorPolicy,
    value: &ValueClass,
    theta: &Coeffs,
    adv: &AdvantageClass,
    eta: &Coeffs,
    x: &[f64],
    a_idx: usize,
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if a_idx >= env.n_actions() {
        return Err(Error::InvalidArgument(format!("action index {a_idx} out of range")));
    }
    let moments = continuation_moments(env, value, theta, adv, eta, x, n_mc, rng)?;
    let probs = policy.probs(x);
    let c = env.discount() / env.h();
    let mut mean = 0.0;
    let mut var = 0.0;
    for (b, (p, (m, v))) in probs.iter().zip(&moments).enumerate() {
        let w = c * (f64::from(u8::from(b == a_idx)) - p);
        mean += w * m;
        var += w * w * v;
    }
    Ok(McEstimate {
        mean: env.reward(x, a_idx) - env.policy_reward(x, policy) + mean,
        se: (var / n_mc as f64).sqrt(),
    })
}

/// Draws `k` states from the discounted occupancy of the behavior chain:
/// `K ~ Geometric(1 - e^{-βh})` steps from `x₀ ~ ρ₀`, simulated exactly as the
/// data generator does.
pub fn sample_occupancy(
    env: &Environment,
    policy: &BehaviorPolicy,
    initial: &InitialDistribution,
    k: usize,
    seed: u64,
    par: Parallelism,
) -> Result<Vec<Vec<f64>>> {
    let chunks = par::chunk_ranges(k, CHUNK);
    let parts = par::try_map_collect(chunks.len(), par, |c| {
        let mut rng = stream_rng(seed, c as u64);
        let mut scratch = SimScratch::new(env.dim());
        chunks[c]
            .clone()
            .map(|_| {
                let steps = sample_horizon(env.beta(), env.h(), &mut rng).steps;
                let mut x = initial.sample(&mut rng);
                for _ in 0..steps {
                    let a = policy.sample(&x, &mut rng);
                    env.advance(&mut x, a, &mut scratch, &mut rng)?;
                }
                Ok(x)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Monte Carlo `‖θᵀφ‖²_{H¹}` over the given states, with standard error.
pub fn mc_sobolev_norm(class: &ValueClass, theta: &Coeffs, states: &[Vec<f64>]) -> Result<McEstimate> {
    if states.is_empty() {
        return Err(Error::Empty("state sample"));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for x in states {
        let v = class.eval(theta, x)?;
        let g = class.grad(theta, x)?;
        let s = v * v + dot(&g, &g);
        sum += s;
        sum_sq += s * s;
    }
    let n = states.len() as f64;
    let mean = sum / n;
    Ok(McEstimate {
        mean,
        se: ((sum_sq / n - mean * mean).max(0.0) / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, Dataset, DatasetMeta, Trajectory};
    use crate::env::{builtin_env, builtin_env_with, ActionSet, EnvConstants, EnvParams, OrnsteinUhlenbeck};
    use crate::funcspace::{BilinearFeatures, FeatureSpec, FnAdvantageFeatures, GaussianRbf, Polynomial};
    use std::sync::Arc;

    const H: f64 = 0.1;

    fn affine_class() -> ValueClass {
        ValueClass::new(Arc::new(Polynomial::new(1, 1).unwrap()), 100.0).unwrap()
    }

    fn zero_adv(policy: &BehaviorPolicy) -> AdvantageClass {
        AdvantageClass::new(
            Arc::new(FnAdvantageFeatures::new(1, |_x, _a, out| out[0] = 1.0)),
            policy.clone(),
            10.0,
        )
        .unwrap()
    }

    fn bilinear_adv(env: &Environment, policy: &BehaviorPolicy, deg: u32) -> AdvantageClass {
        let raw = BilinearFeatures::new(Arc::new(Polynomial::new(env.dim(), deg).unwrap()), env.actions());
        AdvantageClass::new(Arc::new(raw), policy.clone(), 50.0).unwrap()
    }

    /// A dataset holding a single tuple `(x, a, r, x')`.
    fn one_tuple(x: f64, a_idx: usize, r: f64, x_next: f64) -> Dataset {
        let t = Trajectory::new(0, 1, vec![x, x_next], vec![a_idx], vec![r]).unwrap();
        let meta = DatasetMeta {
            seed: 0,
            env: "ou1d".into(),
            n: 1,
            h: H,
            beta: 1.0,
            truncations: 0,
        };
        Dataset::new(vec![t], meta)
    }

    fn ou1d() -> (Environment, BehaviorPolicy, InitialDistribution) {
        let b = builtin_env("ou1d").unwrap();
        (b.env, b.policy, b.initial)
    }

    fn const_reward_env(c: f64) -> Environment {
        Environment::new(
            "const",
            Arc::new(OrnsteinUhlenbeck {
                dim: 1,
                kappa: 1.0,
                sigma: 1.0,
            }),
            move |_x: &[f64], _a: &[f64]| c,
            ActionSet::scalar(&[-1.0, 0.0, 1.0]).unwrap(),
            EnvParams {
                reward_noise: 0.0,
                ..EnvParams::default()
            },
            EnvConstants {
                lambda_min: 1.0,
                lambda_max: 1.0,
                stability_bound: 0.25,
                reward_bound: c.abs(),
            },
        )
        .unwrap()
    }

    #[test]
    fn gram_single_tuple() {
        let (env, ..) = ou1d();
        let data = one_tuple(2.0, 0, 0.0, 1.0);
        let fold = data.whole();
        let g = sobolev_gram(&fold, &env, &affine_class(), Parallelism::Sequential).unwrap();
        let s = env.stop_probability();
        assert_eq!(g.scale, s);
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]) * s;
        assert!((g.matrix - expected).amax() < 1e-15);
        let l2 = l2_gram(&fold, &env, &affine_class(), Parallelism::Sequential).unwrap();
        assert!((l2.matrix[(1, 1)] - 4.0 * s).abs() < 1e-15);
    }

    #[test]
    fn gram_is_symmetric_psd_and_thread_stable() {
        let (env, policy, init) = ou1d();
        let data = generate_dataset(&env, &policy, &init, 500, 3, Parallelism::default()).unwrap();
        let class = ValueClass::new(Arc::new(GaussianRbf::on_grid(1, 9, 0.7).unwrap()), 10.0).unwrap();
        let fold = data.whole();
        let g = sobolev_gram(&fold, &env, &class, Parallelism::default()).unwrap();
        let g_seq = sobolev_gram(&fold, &env, &class, Parallelism::Sequential).unwrap();
        assert_eq!(g, g_seq);
        assert!((&g.matrix - g.matrix.transpose()).amax() <= 1e-12);
        assert!(g.matrix.clone().symmetric_eigenvalues().min() >= -1e-10);
        assert_eq!(g.quadratic_form(&DVector::zeros(9)), 0.0);
        let mut rng = stream_rng(4, 0);
        for _ in 0..100 {
            let theta = DVector::from_fn(9, |_, _| rng.sample::<f64, _>(StandardNormal));
            assert!(g.quadratic_form(&theta) >= 0.0);
        }
    }

    #[test]
    fn empty_fold_is_an_error() {
        let (env, ..) = ou1d();
        let data = one_tuple(0.0, 0, 0.0, 0.0);
        let mut fold = data.whole();
        fold.tuples.clear();
        assert!(matches!(
            sobolev_gram(&fold, &env, &affine_class(), Parallelism::Sequential),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn target_examples() {
        let (env, policy, _) = ou1d();
        let adv = zero_adv(&policy);
        let eta = DVector::zeros(1);
        let value = affine_class();
        let data = one_tuple(1.0, 2, 0.3, 1.2);
        let fold = data.whole();
        let zero = DVector::zeros(2);
        let p = advantage_targets(&fold, &env, &value, &zero, &adv, &eta, Parallelism::Sequential).unwrap();
        assert_eq!(p.targets[0], 0.3);
        let constant = DVector::from_vec(vec![4.0, 0.0]);
        let p = advantage_targets(&fold, &env, &value, &constant, &adv, &eta, Parallelism::Sequential).unwrap();
        assert_eq!(p.targets[0], 0.3);
        let data = one_tuple(1.0, 2, 0.0, 1.2);
        let identity = DVector::from_vec(vec![0.0, 1.0]);
        let p = advantage_targets(&data.whole(), &env, &value, &identity, &adv, &eta, Parallelism::Sequential).unwrap();
        assert!((p.targets[0] - 1.809674836071919).abs() < 1e-12);
        assert_eq!(p.design.shape(), (1, 1));
    }

    #[test]
    fn targets_are_affine_in_value_coefficients() {
        let (env, policy, init) = ou1d();
        let data = generate_dataset(&env, &policy, &init, 50, 5, Parallelism::default()).unwrap();
        let fold = data.whole();
        let value = ValueClass::new(Arc::new(Polynomial::new(1, 3).unwrap()), 100.0).unwrap();
        let adv = bilinear_adv(&env, &policy, 2);
        let mut rng = stream_rng(6, 0);
        let mut rand = |n| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eta = rand(adv.len());
        let (t1, t2) = (rand(4), rand(4));
        let y = |t: &Coeffs| {
            advantage_targets(&fold, &env, &value, t, &adv, &eta, Parallelism::default())
                .unwrap()
                .targets
        };
        let comb = y(&(&t1 + &t2)) - y(&t1) - y(&t2) + y(&DVector::zeros(4));
        assert!(comb.amax() < 1e-9, "{}", comb.amax());
        let b = |t: &Coeffs| bilinear_vector(&fold, &env, &value, t, &adv, &eta, Parallelism::default()).unwrap();
        let comb = b(&(&t1 + &t2)) - b(&t1) - b(&t2) + b(&DVector::zeros(4));
        assert!(comb.amax() < 1e-9);
    }

    #[test]
    fn target_substitution_is_orthogonal_to_centred_features() {
        // Replacing P̄v(x) by v(x) in the target shifts it by a function of x
        // alone, which is uncorrelated with every centred advantage feature.
        let (env, policy, init) = ou1d();
        let data = generate_dataset(&env, &policy, &init, 4000, 7, Parallelism::default()).unwrap();
        let fold = data.whole();
        let adv = bilinear_adv(&env, &policy, 2);
        let c = env.discount() / env.h();
        let decay = (-env.h()).exp();
        let n = fold.len() as f64;
        for j in 0..adv.len() {
            let terms: Vec<f64> = fold
                .tuples
                .iter()
                .map(|t| adv.centered(t.x, t.a_idx)[j] * c * (decay * t.x[0] - t.x[0]))
                .collect();
            let mean = terms.iter().sum::<f64>() / n;
            let sd = (terms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            // tuples within a trajectory are correlated; allow a generous band
            assert!(mean.abs() <= 6.0 * sd / n.sqrt(), "feature {j}: {mean} vs sd {sd}");
        }
    }

    #[test]
    fn bilinear_examples() {
        let (env, policy, _) = ou1d();
        let env = env
            .with_params(EnvParams {
                reward_noise: 0.0,
                ..*env.params()
            })
            .unwrap();
        let adv = zero_adv(&policy);
        let eta = DVector::zeros(1);
        let value = affine_class();
        let data = one_tuple(1.0, 1, 0.0, 1.3);
        let b = bilinear_vector(&data.whole(), &env, &value, &DVector::zeros(2), &adv, &eta, Parallelism::Sequential).unwrap();
        assert_eq!(b, DVector::zeros(2));
        let data = one_tuple(1.0, 1, 0.5, 1.2);
        let fold = data.whole();
        let theta = DVector::from_vec(vec![0.0, 1.0]);
        let b = bilinear_vector(&fold, &env, &value, &theta, &adv, &eta, Parallelism::Sequential).unwrap();
        let resid = 1.0 - 0.05 - (-0.1f64).exp() * 1.2;
        assert!((resid + 0.135805).abs() < 1e-6);
        let s = fold.scale(&env);
        assert!((b - DVector::from_vec(vec![s * resid, s * resid])).amax() < 1e-15);
    }

    #[test]
    fn bilinear_vector_vanishes_at_constant_reward_fixed_point() {
        let c = 0.5;
        let env = const_reward_env(c);
        let policy = BehaviorPolicy::uniform(3);
        let init = InitialDistribution::standard_normal(1);
        let data = generate_dataset(&env, &policy, &init, 2000, 9, Parallelism::default()).unwrap();
        let value = affine_class();
        let adv = bilinear_adv(&env, &policy, 1);
        let v_star = H * c / env.stop_probability();
        let theta = DVector::from_vec(vec![v_star, 0.0]);
        let b = bilinear_vector(&data.whole(), &env, &value, &theta, &adv, &DVector::zeros(adv.len()), Parallelism::default()).unwrap();
        assert!(b.amax() < 1e-12, "{b}");
    }

    #[test]
    fn regression_examples() {
        let (_, policy, _) = ou1d();
        let adv = AdvantageClass::new(
            Arc::new(FnAdvantageFeatures::new(3, |_x, _a, out| out.fill(0.0))),
            policy,
            100.0,
        )
        .unwrap();
        let problem = RegressionProblem {
            design: DMatrix::identity(3, 3),
            targets: DVector::zeros(3),
        };
        assert_eq!(solve_advantage_regression(&problem, &adv, None).unwrap().eta, DVector::zeros(3));
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let problem = RegressionProblem {
            design: DMatrix::identity(3, 3),
            targets: y.clone(),
        };
        let fit = solve_advantage_regression(&problem, &adv, None).unwrap();
        assert!((fit.eta - &y / (1.0 + fit.ridge)).amax() < 1e-15);
    }

    #[test]
    fn constrained_regression_is_stationary_or_on_the_boundary() {
        let (_, policy, _) = ou1d();
        let mut rng = stream_rng(10, 0);
        for radius in [100.0, 0.3] {
            let adv = AdvantageClass::new(
                Arc::new(FnAdvantageFeatures::new(4, |_x, _a, out| out.fill(0.0))),
                policy.clone(),
                radius,
            )
            .unwrap();
            let a = DMatrix::from_fn(40, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(40, |_, _| rng.sample::<f64, _>(StandardNormal));
            let problem = RegressionProblem { design: a.clone(), targets: y.clone() };
            let fit = solve_advantage_regression(&problem, &adv, None).unwrap();
            let grad = a.tr_mul(&(&a * &fit.eta - &y)) + &fit.eta * fit.ridge;
            if fit.projected {
                // KKT: grad + μη = 0 with μ ≥ 0
                assert!((fit.eta.norm() - radius).abs() < 1e-9);
                let mu = -grad.dot(&fit.eta) / fit.eta.norm_squared();
                assert!(mu >= 0.0);
                assert!((grad + &fit.eta * mu).norm() <= 1e-8);
            } else {
                assert!(grad.norm() <= 1e-8, "{}", grad.norm());
            }
        }
    }

    #[test]
    fn prox_step_examples() {
        let g = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let s = value_prox_step(&g, &b, &DVector::zeros(2), 0.5, H, 1e6).unwrap();
        assert!((s.theta - DVector::from_vec(vec![-5.0, 0.0])).amax() <= 1e-12);
        let theta = DVector::from_vec(vec![0.3, -0.2]);
        let s = value_prox_step(&g, &DVector::zeros(2), &theta, 0.5, H, 10.0).unwrap();
        assert_eq!(s.theta, theta);
        let singular = DMatrix::zeros(2, 2);
        assert!(matches!(
            value_prox_step(&singular, &b, &theta, 0.5, H, 10.0),
            Err(Error::SingularGram)
        ));
    }

    #[test]
    fn prox_step_minimises_the_objective() {
        let mut rng = stream_rng(11, 0);
        for _ in 0..20 {
            let a = DMatrix::from_fn(5, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let g = &a * a.transpose() + DMatrix::identity(5, 5) * 0.01;
            let b = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let theta_t = DVector::from_fn(5, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
            let (alpha, radius) = (0.2, 2.0);
            let obj = |t: &Coeffs| {
                let d = t - &theta_t;
                d.dot(&(&g * &d)) + 2.0 * alpha / H * b.dot(&d)
            };
            let s = value_prox_step(&g, &b, &theta_t, alpha, H, radius).unwrap();
            assert!(s.theta.norm() <= radius);
            let best = obj(&s.theta);
            if theta_t.norm() <= radius {
                assert!(best <= obj(&theta_t) + 1e-12);
            }
            for _ in 0..10 {
                let mut p = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
                p *= radius * rng.random::<f64>() / p.norm();
                assert!(best <= obj(&p) + 1e-9);
            }
        }
    }

    #[test]
    fn regression_matches_gradient_descent() {
        let (_, policy, _) = ou1d();
        let mut rng = stream_rng(12, 0);
        for _ in 0..5 {
            let adv = AdvantageClass::new(
                Arc::new(FnAdvantageFeatures::new(3, |_x, _a, out| out.fill(0.0))),
                policy.clone(),
                1e3,
            )
            .unwrap();
            let a = DMatrix::from_fn(25, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(25, |_, _| rng.sample::<f64, _>(StandardNormal));
            let fit = solve_advantage_regression(&RegressionProblem { design: a.clone(), targets: y.clone() }, &adv, None).unwrap();
            let ata = a.tr_mul(&a) + DMatrix::identity(3, 3) * fit.ridge;
            let aty = a.tr_mul(&y);
            let step = 1.0 / ata.clone().symmetric_eigenvalues().max();
            let mut eta = DVector::zeros(3);
            for _ in 0..100_000 {
                let grad = &ata * &eta - &aty;
                if grad.norm() < 1e-14 {
                    break;
                }
                eta -= grad * step;
            }
            assert!((eta - fit.eta).amax() <= 1e-6);
        }
    }

    #[test]
    fn population_operators_on_trivial_functions() {
        let env = const_reward_env(0.5);
        let policy = BehaviorPolicy::uniform(3);
        let value = affine_class();
        let adv = bilinear_adv(&env, &policy, 1);
        let eta = DVector::zeros(adv.len());
        let c = 1.7;
        let theta = DVector::from_vec(vec![c, 0.0]);
        let mut rng = stream_rng(13, 0);
        let tv = mc_population_bellman_v(&env, &policy, &value, &theta, &adv, &eta, &[0.4], 1000, &mut rng).unwrap();
        let exact = H * 0.5 + env.discount() * c;
        assert!((tv.mean - exact).abs() <= 3.0 * tv.se + 1e-12);

        let b = builtin_env_with(
            "ou1d",
            EnvParams {
                reward_noise: 0.0,
                ..EnvParams::default()
            },
        )
        .unwrap();
        let zero = DVector::zeros(2);
        for a in 0..3 {
            let x = [0.3];
            let tq = mc_population_bellman_q(&b.env, &b.policy, &value, &zero, &adv, &eta, &x, a, 1000, &mut rng).unwrap();
            let exact = b.env.reward(&x, a) - b.env.policy_reward(&x, &b.policy);
            assert!((tq.mean - exact).abs() <= 3.0 * tq.se + 1e-12);
        }
    }

    #[test]
    fn occupancy_samples_are_reproducible() {
        let (env, policy, init) = ou1d();
        let a = sample_occupancy(&env, &policy, &init, 3000, 1, Parallelism::default()).unwrap();
        let b = sample_occupancy(&env, &policy, &init, 3000, 1, Parallelism::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3000);
    }

    #[test]
    fn gram_matches_fresh_sobolev_norm() {
        let (env, policy, init) = ou1d();
        let data = generate_dataset(&env, &policy, &init, 10_000, 21, Parallelism::default()).unwrap();
        let class = ValueClass::new("rbf:9:1.0".parse::<FeatureSpec>().unwrap().build(1).unwrap(), 50.0).unwrap();
        let g = sobolev_gram(&data.whole(), &env, &class, Parallelism::default()).unwrap();
        let states = sample_occupancy(&env, &policy, &init, 200_000, 22, Parallelism::default()).unwrap();
        let mut rng = stream_rng(23, 0);
        for _ in 0..3 {
            let theta = DVector::from_fn(class.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let mc = mc_sobolev_norm(&class, &theta, &states).unwrap();
            let emp = g.quadratic_form(&theta);
            assert!((emp / mc.mean - 1.0).abs() <= 0.05, "{emp} vs {}", mc.mean);
        }
    }
}
