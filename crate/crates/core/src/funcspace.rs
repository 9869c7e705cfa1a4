//! Linear value and advantage classes.
//!
//! Values are `v = θᵀφ(x)`; advantages are `q = ηᵀψ̃(x, a)` where `ψ̃` is the
//! raw feature centred under the behavior policy, so every member satisfies
//! `Σ_a π₀(a|x) q(x, a) = 0` by construction. Both classes are intersected with
//! a Euclidean ball on the coefficients.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::BehaviorPolicy;
use crate::error::{Error, Result};

pub type Coeffs = DVector<f64>;

/// State feature family, written `poly:<deg>` or `rbf:<count>:<bandwidth>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FeatureSpec {
    /// All monomials of total degree ≤ `degree` (degree ≤ 5).
    Polynomial { degree: u32 },
    /// Gaussian bumps on an equispaced `count^d` grid over `[-4, 4]^d`.
    GaussianRbf { count: usize, bandwidth: f64 },
}

impl FeatureSpec {
    pub fn build(&self, dim: usize) -> Result<Arc<dyn FeatureMap>> {
        match *self {
            FeatureSpec::Polynomial { degree } => Ok(Arc::new(Polynomial::new(dim, degree)?)),
            FeatureSpec::GaussianRbf { count, bandwidth } => {
                Ok(Arc::new(GaussianRbf::on_grid(dim, count, bandwidth)?))
            }
        }
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSpec::Polynomial { degree } => write!(f, "poly:{degree}"),
            FeatureSpec::GaussianRbf { count, bandwidth } => write!(f, "rbf:{count}:{bandwidth}"),
        }
    }
}

impl FromStr for FeatureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::FeatureSpec(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts.as_slice() {
            ["poly", deg] => {
                let degree: u32 = deg.parse().map_err(|_| bad())?;
                if degree > 5 {
                    return Err(bad());
                }
                Ok(FeatureSpec::Polynomial { degree })
            }
            ["rbf", count, bw] => {
                let count: usize = count.parse().map_err(|_| bad())?;
                let bandwidth: f64 = bw.parse().map_err(|_| bad())?;
                if count == 0 || !(bandwidth > 0.0 && bandwidth.is_finite()) {
                    return Err(bad());
                }
                Ok(FeatureSpec::GaussianRbf { count, bandwidth })
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for FeatureSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FeatureSpec> for String {
    fn from(s: FeatureSpec) -> String {
        s.to_string()
    }
}

/// Advantage feature family: the state features combined with the action.
///
/// `<state-spec>` gives the bilinear family `[a_i φ(x), a_i² φ(x)]` over action
/// coordinates `i`; `onehot:<state-spec>` gives `e_a ⊗ φ(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AdvFeatureSpec {
    Bilinear(FeatureSpec),
    OneHot(FeatureSpec),
}

impl AdvFeatureSpec {
    pub fn build(&self, dim: usize, actions: &crate::env::ActionSet) -> Result<Arc<dyn AdvantageFeatures>> {
        match self {
            AdvFeatureSpec::Bilinear(s) => Ok(Arc::new(BilinearFeatures::new(s.build(dim)?, actions))),
            AdvFeatureSpec::OneHot(s) => Ok(Arc::new(OneHotFeatures::new(s.build(dim)?, actions.len()))),
        }
    }
}

impl fmt::Display for AdvFeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdvFeatureSpec::Bilinear(s) => write!(f, "{s}"),
            AdvFeatureSpec::OneHot(s) => write!(f, "onehot:{s}"),
        }
    }
}

impl FromStr for AdvFeatureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().strip_prefix("onehot:") {
            Some(rest) => Ok(AdvFeatureSpec::OneHot(rest.parse()?)),
            None => Ok(AdvFeatureSpec::Bilinear(s.parse()?)),
        }
    }
}

impl TryFrom<String> for AdvFeatureSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AdvFeatureSpec> for String {
    fn from(s: AdvFeatureSpec) -> String {
        s.to_string()
    }
}

/// Smooth state features with an analytic Jacobian.
pub trait FeatureMap: Send + Sync + fmt::Debug {
    /// State dimension `d`.
    fn state_dim(&self) -> usize;

    /// Feature count `p`.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    /// Row-major `p×d` Jacobian.
    fn jacobian_into(&self, x: &[f64], out: &mut [f64]);

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }

    fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len() * self.state_dim()];
        self.jacobian_into(x, &mut out);
        out
    }
}

/// Monomials `Π x_i^{α_i}` with `|α| ≤ degree`, in graded order.
#[derive(Clone, Debug)]
pub struct Polynomial {
    dim: usize,
    exponents: Vec<Vec<u32>>,
}

impl Polynomial {
    pub fn new(dim: usize, degree: u32) -> Result<Self> {
        if dim == 0 || degree > 5 {
            return Err(Error::FeatureSpec(format!("poly:{degree} in dimension {dim}")));
        }
        let mut exponents = Vec::new();
        for total in 0..=degree {
            let mut current = vec![0u32; dim];
            push_compositions(total, 0, &mut current, &mut exponents);
        }
        Ok(Self { dim, exponents })
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }
}

fn push_compositions(remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for k in (0..=remaining).rev() {
        current[pos] = k;
        push_compositions(remaining - k, pos + 1, current, out);
    }
    current[pos] = 0;
}

impl FeatureMap for Polynomial {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.exponents.len()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(x).map(|(&k, &xi)| xi.powi(k as i32)).product();
        }
    }

    fn jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (row, e) in out.chunks_mut(d).zip(&self.exponents) {
            for (j, o) in row.iter_mut().enumerate() {
                if e[j] == 0 {
                    *o = 0.0;
                    continue;
                }
                let mut v = e[j] as f64 * x[j].powi(e[j] as i32 - 1);
                for (i, (&k, &xi)) in e.iter().zip(x).enumerate() {
                    if i != j {
                        v *= xi.powi(k as i32);
                    }
                }
                *o = v;
            }
        }
    }
}

/// `exp(-|x - c|² / (2 w²))` for each centre `c`.
#[derive(Clone, Debug)]
pub struct GaussianRbf {
    dim: usize,
    centers: Vec<Vec<f64>>,
    bandwidth: f64,
}

impl GaussianRbf {
    pub fn new(centers: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        let dim = centers.first().map_or(0, Vec::len);
        if dim == 0 || centers.iter().any(|c| c.len() != dim) || !(bandwidth > 0.0) {
            return Err(Error::FeatureSpec(format!("rbf with {} centres", centers.len())));
        }
        Ok(Self {
            dim,
            centers,
            bandwidth,
        })
    }

    /// `count` equispaced centres per axis on `[-4, 4]`.
    pub fn on_grid(dim: usize, count: usize, bandwidth: f64) -> Result<Self> {
        let axis: Vec<f64> = if count == 1 {
            vec![0.0]
        } else {
            (0..count).map(|i| -4.0 + 8.0 * i as f64 / (count - 1) as f64).collect()
        };
        let mut centers = vec![Vec::new()];
        for _ in 0..dim {
            centers = centers
                .into_iter()
                .flat_map(|c| {
                    axis.iter().map(move |&v| {
                        let mut c = c.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        Self::new(centers, bandwidth)
    }
}

impl FeatureMap for GaussianRbf {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.centers.len()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let s = 0.5 / (self.bandwidth * self.bandwidth);
        for (o, c) in out.iter_mut().zip(&self.centers) {
            let r2: f64 = c.iter().zip(x).map(|(ci, xi)| (xi - ci) * (xi - ci)).sum();
            *o = (-s * r2).exp();
        }
    }

    fn jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        let w2 = self.bandwidth * self.bandwidth;
        let s = 0.5 / w2;
        for (row, c) in out.chunks_mut(self.dim).zip(&self.centers) {
            let r2: f64 = c.iter().zip(x).map(|(ci, xi)| (xi - ci) * (xi - ci)).sum();
            let phi = (-s * r2).exp();
            for ((o, ci), xi) in row.iter_mut().zip(c).zip(x) {
                *o = -(xi - ci) / w2 * phi;
            }
        }
    }
}

/// Largest mixed error `|J - J_fd| / max(1, |J|)` between the analytic Jacobian and
/// central finite differences with the given step.
pub fn jacobian_fd_error(features: &dyn FeatureMap, states: &[Vec<f64>], step: f64) -> f64 {
    let (p, d) = (features.len(), features.state_dim());
    let mut worst: f64 = 0.0;
    for x in states {
        let jac = features.jacobian(x);
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let (fp, fm) = (features.eval(&xp), features.eval(&xm));
            for i in 0..p {
                let fd = (fp[i] - fm[i]) / (2.0 * step);
                let a = jac[i * d + j];
                worst = worst.max((a - fd).abs() / a.abs().max(1.0));
            }
        }
    }
    worst
}

/// Raw (uncentred) advantage features `ψ(x, a)`.
pub trait AdvantageFeatures: Send + Sync + fmt::Debug {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn eval_into(&self, x: &[f64], a_idx: usize, out: &mut [f64]);
}

/// `[a_i φ(x), a_i² φ(x)]` over action coordinates `i`.
#[derive(Clone, Debug)]
pub struct BilinearFeatures {
    state: Arc<dyn FeatureMap>,
    actions: Vec<Vec<f64>>,
}

impl BilinearFeatures {
    pub fn new(state: Arc<dyn FeatureMap>, actions: &crate::env::ActionSet) -> Self {
        Self {
            state,
            actions: actions.iter().map(<[f64]>::to_vec).collect(),
        }
    }
}

impl AdvantageFeatures for BilinearFeatures {
    fn len(&self) -> usize {
        2 * self.actions[0].len() * self.state.len()
    }

    fn eval_into(&self, x: &[f64], a_idx: usize, out: &mut [f64]) {
        let p = self.state.len();
        let (head, _) = out.split_at_mut(p);
        self.state.eval_into(x, head);
        let phi = head.to_vec();
        let a = &self.actions[a_idx];
        for (i, &ai) in a.iter().enumerate() {
            for (k, w) in [ai, ai * ai].into_iter().enumerate() {
                let block = &mut out[(2 * i + k) * p..(2 * i + k + 1) * p];
                for (o, f) in block.iter_mut().zip(&phi) {
                    *o = w * f;
                }
            }
        }
    }
}

/// `e_a ⊗ φ(x)`.
#[derive(Clone, Debug)]
pub struct OneHotFeatures {
    state: Arc<dyn FeatureMap>,
    n_actions: usize,
}

impl OneHotFeatures {
    pub fn new(state: Arc<dyn FeatureMap>, n_actions: usize) -> Self {
        Self { state, n_actions }
    }
}

impl AdvantageFeatures for OneHotFeatures {
    fn len(&self) -> usize {
        self.n_actions * self.state.len()
    }

    fn eval_into(&self, x: &[f64], a_idx: usize, out: &mut [f64]) {
        let p = self.state.len();
        out.fill(0.0);
        self.state.eval_into(x, &mut out[a_idx * p..(a_idx + 1) * p]);
    }
}

type AdvFn = dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync;

/// Advantage features from a closure.
#[derive(Clone)]
pub struct FnAdvantageFeatures {
    len: usize,
    f: Arc<AdvFn>,
}

impl FnAdvantageFeatures {
    pub fn new<F>(len: usize, f: F) -> Self
    where
        F: Fn(&[f64], usize, &mut [f64]) + Send + Sync + 'static,
    {
        Self { len, f: Arc::new(f) }
    }
}

impl fmt::Debug for FnAdvantageFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnAdvantageFeatures").field("len", &self.len).finish()
    }
}

impl AdvantageFeatures for FnAdvantageFeatures {
    fn len(&self) -> usize {
        self.len
    }

    fn eval_into(&self, x: &[f64], a_idx: usize, out: &mut [f64]) {
        (self.f)(x, a_idx, out)
    }
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { context, expected, got })
    }
}

/// `{θᵀφ : ‖θ‖₂ ≤ R_v}`.
#[derive(Clone, Debug)]
pub struct ValueClass {
    features: Arc<dyn FeatureMap>,
    radius: f64,
}

impl ValueClass {
    pub fn new(features: Arc<dyn FeatureMap>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument(format!("value radius must be positive, got {radius}")));
        }
        Ok(Self { features, radius })
    }

    pub fn features(&self) -> &dyn FeatureMap {
        self.features.as_ref()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn with_radius(&self, radius: f64) -> Result<Self> {
        Self::new(Arc::clone(&self.features), radius)
    }

    /// Coefficient dimension `p`.
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.features.state_dim()
    }

    pub fn contains(&self, theta: &Coeffs) -> bool {
        theta.norm() <= self.radius
    }

    fn check(&self, theta: &Coeffs, x: &[f64]) -> Result<()> {
        check_len("value coefficients", self.len(), theta.len())?;
        check_len("value state", self.state_dim(), x.len())
    }

    /// `θᵀφ(x)`.
    pub fn eval(&self, theta: &Coeffs, x: &[f64]) -> Result<f64> {
        self.check(theta, x)?;
        Ok(self.features.eval(x).iter().zip(theta.iter()).map(|(f, t)| f * t).sum())
    }

    /// `J(x)ᵀθ`.
    pub fn grad(&self, theta: &Coeffs, x: &[f64]) -> Result<Vec<f64>> {
        self.check(theta, x)?;
        let d = self.state_dim();
        let jac = self.features.jacobian(x);
        let mut g = vec![0.0; d];
        for (row, t) in jac.chunks(d).zip(theta.iter()) {
            for (gj, r) in g.iter_mut().zip(row) {
                *gj += t * r;
            }
        }
        Ok(g)
    }
}

/// `{ηᵀψ̃ : ‖η‖₂ ≤ R_q}` with `ψ̃` centred under the behavior policy.
#[derive(Clone, Debug)]
pub struct AdvantageClass {
    raw: Arc<dyn AdvantageFeatures>,
    policy: BehaviorPolicy,
    radius: f64,
}

impl AdvantageClass {
    pub fn new(raw: Arc<dyn AdvantageFeatures>, policy: BehaviorPolicy, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument(format!("advantage radius must be positive, got {radius}")));
        }
        Ok(Self { raw, policy, radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn with_radius(&self, radius: f64) -> Result<Self> {
        Self::new(Arc::clone(&self.raw), self.policy.clone(), radius)
    }

    pub fn policy(&self) -> &BehaviorPolicy {
        &self.policy
    }

    pub fn n_actions(&self) -> usize {
        self.policy.n_actions()
    }

    /// Coefficient dimension.
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn contains(&self, eta: &Coeffs) -> bool {
        eta.norm() <= self.radius
    }

    /// Centred features for every action, row-major `m_A × len`, and the
    /// behavior probabilities at `x`.
    pub fn centered_all(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, q) = (self.n_actions(), self.len());
        let mut feats = vec![0.0; m * q];
        for (a, row) in feats.chunks_mut(q).enumerate() {
            self.raw.eval_into(x, a, row);
        }
        let probs = self.policy.probs(x);
        let mut mean = vec![0.0; q];
        for (row, p) in feats.chunks(q).zip(&probs) {
            for (mu, f) in mean.iter_mut().zip(row) {
                *mu += p * f;
            }
        }
        for row in feats.chunks_mut(q) {
            for (f, mu) in row.iter_mut().zip(&mean) {
                *f -= mu;
            }
        }
        (feats, probs)
    }

    /// `ψ̃(x, a)`.
    pub fn centered(&self, x: &[f64], a_idx: usize) -> Vec<f64> {
        let q = self.len();
        let (feats, _) = self.centered_all(x);
        feats[a_idx * q..(a_idx + 1) * q].to_vec()
    }

    /// `ηᵀψ̃(x, a)`.
    pub fn eval(&self, eta: &Coeffs, x: &[f64], a_idx: usize) -> Result<f64> {
        check_len("advantage coefficients", self.len(), eta.len())?;
        if a_idx >= self.n_actions() {
            return Err(Error::InvalidArgument(format!("action index {a_idx} out of range")));
        }
        Ok(dot(&self.centered(x, a_idx), eta.as_slice()))
    }

    /// `q(x, ·)` for every action.
    pub fn eval_all(&self, eta: &Coeffs, x: &[f64]) -> Result<Vec<f64>> {
        check_len("advantage coefficients", self.len(), eta.len())?;
        let (feats, _) = self.centered_all(x);
        Ok(feats.chunks(self.len()).map(|row| dot(row, eta.as_slice())).collect())
    }

    /// `max_a q(x, a)` and its argmax; ties go to the smallest index.
    pub fn max(&self, eta: &Coeffs, x: &[f64]) -> Result<(f64, usize)> {
        Ok(argmax(&self.eval_all(eta, x)?))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximum and first maximising index.
pub fn argmax(values: &[f64]) -> (f64, usize) {
    let mut best = (values[0], 0);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.0 {
            best = (v, i);
        }
    }
    best
}

/// Metric for [`project_ball`].
#[derive(Clone, Copy, Debug)]
pub enum Metric<'a> {
    Identity,
    Matrix(&'a DMatrix<f64>),
}

/// Result of projecting onto a coefficient ball.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub theta: Coeffs,
    /// Whether the constraint was active.
    pub active: bool,
    /// Lagrange multiplier `μ ≥ 0` in `G(θ' - θ) + μθ' = 0`.
    pub multiplier: f64,
}

/// `argmin_{‖θ'‖₂ ≤ radius} (θ' - θ)ᵀG(θ' - θ)`.
///
/// With the identity metric this is radial scaling. For a general PSD `G` the
/// multiplier `μ` solving `‖(G + μI)⁻¹Gθ‖₂ = radius` is found by bisection in
/// the eigenbasis of `G`, run until the bracket collapses to adjacent floats;
/// the returned point always lies inside the ball.
pub fn project_ball(theta: &Coeffs, radius: f64, metric: Metric<'_>) -> Result<Projection> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    let norm = theta.norm();
    if norm <= radius {
        return Ok(Projection {
            theta: theta.clone(),
            active: false,
            multiplier: 0.0,
        });
    }
    let radial = || Projection {
        theta: inside(theta * (radius / norm), radius),
        active: true,
        multiplier: norm / radius - 1.0,
    };
    let g = match metric {
        Metric::Identity => return Ok(radial()),
        Metric::Matrix(g) => g,
    };
    check_len("projection metric", theta.len(), g.nrows())?;
    check_len("projection metric", theta.len(), g.ncols())?;
    let scale = g.amax().max(f64::MIN_POSITIVE);
    if (g - g.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidArgument("projection metric is not symmetric".into()));
    }
    let eig = g.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig < -1e-10 * scale {
        return Err(Error::NotPositiveSemidefinite(min_eig));
    }
    let zero_tol = 1e-14 * scale;
    let lambdas: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| if l <= zero_tol { 0.0 } else { l })
        .collect();
    if lambdas.iter().all(|&l| l == 0.0) {
        return Ok(radial());
    }
    let coords = eig.eigenvectors.transpose() * theta;
    let shrunk = |mu: f64| -> DVector<f64> {
        DVector::from_iterator(
            coords.len(),
            coords.iter().zip(&lambdas).map(|(c, &l)| if l == 0.0 { 0.0 } else { c * l / (l + mu) }),
        )
    };
    let range_norm = shrunk(0.0).norm();
    if range_norm <= radius {
        // Singular G: the range component is free, fill the rest of the ball
        // along the null-space component.
        let null = DVector::from_iterator(
            coords.len(),
            coords.iter().zip(&lambdas).map(|(c, &l)| if l == 0.0 { *c } else { 0.0 }),
        );
        let null_norm = null.norm();
        let t = ((radius * radius - range_norm * range_norm).max(0.0)).sqrt() / null_norm;
        let local = shrunk(0.0) + null * t.min(1.0);
        return Ok(Projection {
            theta: inside(&eig.eigenvectors * local, radius),
            active: true,
            multiplier: 0.0,
        });
    }
    let mut lo = 0.0;
    let mut hi = lambdas.iter().copied().fold(0.0, f64::max);
    while shrunk(hi).norm() > radius {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if shrunk(mid).norm() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Projection {
        theta: inside(&eig.eigenvectors * shrunk(hi), radius),
        active: true,
        multiplier: hi,
    })
}

/// Pulls a point that rounding left just outside the ball back onto it.
fn inside(mut theta: Coeffs, radius: f64) -> Coeffs {
    while theta.norm() > radius {
        theta *= 1.0 - 4.0 * f64::EPSILON;
    }
    theta
}
