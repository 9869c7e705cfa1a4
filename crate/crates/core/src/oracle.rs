//! Ground truth on one-dimensional linear-Gaussian benchmarks by grid value
//! iteration with the exact one-step kernel, plus the error metrics measured
//! against it.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{BehaviorPolicy, Benchmark};
use crate::error::{Error, Result};
use crate::funcspace::{dot, AdvantageClass, Coeffs, ValueClass};
use crate::par::{self, Parallelism};

/// Equispaced one-dimensional grid `lo, …, hi` with `points` nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: -5.0,
            hi: 5.0,
            points: 801,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points < 3 || !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid grid {self:?}")));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.node(i)).collect()
    }

    /// Cell index `i` and offset `t ∈ [0, 1]` with `y = (1-t)·x_i + t·x_{i+1}`,
    /// after clamping `y` into the box. The flag reports whether clamping occurred.
    fn locate(&self, y: f64) -> (usize, f64, bool) {
        let clamped = y < self.lo || y > self.hi;
        let s = ((y.clamp(self.lo, self.hi) - self.lo) / self.step()).min((self.points - 1) as f64);
        let i = (s.floor() as usize).min(self.points - 2);
        (i, s - i as f64, clamped)
    }

    /// Linear interpolation of a nodal table.
    pub fn interpolate(&self, table: &[f64], y: f64) -> (f64, bool) {
        let (i, t, clamped) = self.locate(y);
        ((1.0 - t) * table[i] + t * table[i + 1], clamped)
    }
}

/// How successor values between grid nodes are reconstructed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    /// Four-point Lagrange, falling back to linear in the boundary cells.
    #[default]
    Cubic,
}

/// Settings of [`grid_dp_solve`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub grid: GridSpec,
    pub quadrature_nodes: usize,
    pub interpolation: Interpolation,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            quadrature_nodes: 31,
            interpolation: Interpolation::default(),
            tol: 1e-9,
            max_iter: 100_000,
        }
    }
}

/// Nodes and weights of the `n`-point Gauss–Hermite rule for `E[f(Z)]`,
/// `Z ~ N(0, 1)`, via the Golub–Welsch eigenproblem.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(z, w)| (z, w / total)).unzip()
}

/// Sparse transition stencils, one row per `(node, action)`.
#[derive(Clone, Debug)]
struct Stencils {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    clamped: usize,
}

impl Stencils {
    fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.cols[span.clone()].iter().map(|&c| c as usize).zip(self.vals[span].iter().copied())
    }

    fn apply(&self, r: usize, v: &[f64]) -> f64 {
        self.row(r).map(|(c, w)| w * v[c]).sum()
    }
}

fn build_stencils(
    bench: &Benchmark,
    grid: &GridSpec,
    nodes: &[f64],
    weights: &[f64],
    interp: Interpolation,
    par: Parallelism,
) -> Result<Stencils> {
    let env = &bench.env;
    let kernel = env
        .dynamics()
        .linear_gaussian()
        .ok_or_else(|| Error::UnsupportedOracle(format!("{} has no exact Gaussian kernel", env.name())))?;
    let m = env.n_actions();
    let xs = grid.nodes();
    let rows = par::map_collect(grid.points * m, par, |r| {
        let (i, a) = (r / m, r % m);
        let (mean, var) = kernel.transition(xs[i], env.actions().get(a)[0], env.h());
        let sd = var.sqrt();
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(4 * nodes.len());
        let mut clamped = 0;
        for (z, w) in nodes.iter().zip(weights) {
            let (c, t, cl) = grid.locate(mean + sd * z);
            clamped += usize::from(cl);
            match interp {
                Interpolation::Cubic if c >= 1 && c + 2 < grid.points => {
                    let lagrange = [
                        -t * (t - 1.0) * (t - 2.0) / 6.0,
                        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
                        -(t + 1.0) * t * (t - 2.0) / 2.0,
                        (t + 1.0) * t * (t - 1.0) / 6.0,
                    ];
                    for (k, l) in lagrange.iter().enumerate() {
                        entries.push(((c + k - 1) as u32, w * l));
                    }
                }
                _ => {
                    entries.push((c as u32, w * (1.0 - t)));
                    entries.push((c as u32 + 1, w * t));
                }
            }
        }
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
        for (c, w) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += w,
                _ => merged.push((c, w)),
            }
        }
        (merged, clamped)
    });
    let mut st = Stencils {
        offsets: vec![0],
        cols: Vec::new(),
        vals: Vec::new(),
        clamped: 0,
    };
    for (row, clamped) in rows {
        st.clamped += clamped;
        for (c, w) in row {
            st.cols.push(c);
            st.vals.push(w);
        }
        st.offsets.push(st.cols.len());
    }
    Ok(st)
}

/// Oracle tables on the grid. Two-index tables are row-major `node × action`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSolution {
    pub env: String,
    pub grid: GridSpec,
    pub n_actions: usize,
    pub h: f64,
    /// `Q*`.
    pub q_star: Vec<f64>,
    /// `v* = max_a Q*`.
    pub v_star: Vec<f64>,
    /// `v*_h = E_{a∼π₀} Q*`.
    pub v_h: Vec<f64>,
    /// Central-difference derivative of `v*_h`.
    pub v_h_grad: Vec<f64>,
    /// `q*_h = (Q* - v*_h) / h`.
    pub q_h: Vec<f64>,
    /// Behavior probabilities at each node.
    pub policy: Vec<f64>,
    /// Discounted occupancy weights, summing to one.
    pub rho: Vec<f64>,
    /// Sup-norm Bellman residual at exit.
    pub residual: f64,
    pub iterations: usize,
}

/// Grid value iteration `Q ← h r + e^{-βh} E^a[max_a' Q(X_h, a')]` with the exact
/// Gaussian kernel, followed by the auxiliary value, advantage and occupancy.
pub fn grid_dp_solve(bench: &Benchmark, opts: &OracleOptions, par: Parallelism) -> Result<OracleSolution> {
    let env = &bench.env;
    if env.dim() != 1 {
        return Err(Error::UnsupportedOracle(format!(
            "{} is {}-dimensional; the grid oracle is one-dimensional",
            env.name(),
            env.dim()
        )));
    }
    opts.grid.validate()?;
    if !(opts.tol > 0.0) || opts.quadrature_nodes == 0 {
        return Err(Error::InvalidArgument("oracle tolerance and quadrature order must be positive".into()));
    }
    let grid = opts.grid;
    let (gh_z, gh_w) = gauss_hermite(opts.quadrature_nodes);
    let stencils = build_stencils(bench, &grid, &gh_z, &gh_w, opts.interpolation, par)?;
    if stencils.clamped > 0 {
        log::debug!("{} quadrature nodes clamped into the grid box", stencils.clamped);
    }
    let (n, m) = (grid.points, env.n_actions());
    let xs = grid.nodes();
    let gamma = env.discount();
    let h = env.h();
    let hr: Vec<f64> = (0..n * m).map(|r| h * env.reward(&[xs[r / m]], r % m)).collect();

    let mut q = vec![0.0; n * m];
    let mut v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let next = par::map_collect(n * m, par, |r| hr[r] + gamma * stencils.apply(r, &v));
        residual = next.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q = next;
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = q[i * m..(i + 1) * m].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        iterations += 1;
        // ‖TQ - Q‖ ≤ γ‖Q - Q_prev‖ for the fresh iterate
        if gamma * residual <= opts.tol {
            break;
        }
    }
    let final_residual = gamma * residual;
    if final_residual > opts.tol {
        return Err(Error::NotConverged {
            residual: final_residual,
            iterations,
        });
    }

    let policy: Vec<f64> = xs.iter().flat_map(|&x| bench.policy.probs(&[x])).collect();
    let v_h: Vec<f64> = (0..n).map(|i| dot(&policy[i * m..(i + 1) * m], &q[i * m..(i + 1) * m])).collect();
    let q_h: Vec<f64> = (0..n * m).map(|r| (q[r] - v_h[r / m]) / h).collect();
    let v_h_grad = central_differences(&v_h, grid.step());
    let rho = occupancy(bench, &grid, &gh_z, &gh_w, &policy, par)?;
    Ok(OracleSolution {
        env: env.name().to_string(),
        grid,
        n_actions: m,
        h,
        q_star: q,
        v_star: v,
        v_h,
        v_h_grad,
        q_h,
        policy,
        rho,
        residual: final_residual,
        iterations,
    })
}

fn central_differences(f: &[f64], dx: f64) -> Vec<f64> {
    let n = f.len();
    (0..n)
        .map(|i| match i {
            0 => (f[1] - f[0]) / dx,
            _ if i == n - 1 => (f[n - 1] - f[n - 2]) / dx,
            _ => (f[i + 1] - f[i - 1]) / (2.0 * dx),
        })
        .collect()
}

/// `ρ = (1 - γ) Σ_k γ^k (P̄ᵀ)^k ρ₀` on the grid, truncated once `γ^K < 1e-13`.
/// Uses linear stencils so that mass stays non-negative.
fn occupancy(
    bench: &Benchmark,
    grid: &GridSpec,
    gh_z: &[f64],
    gh_w: &[f64],
    policy: &[f64],
    par: Parallelism,
) -> Result<Vec<f64>> {
    let n = grid.points;
    let m = bench.env.n_actions();
    let stencils = build_stencils(bench, grid, gh_z, gh_w, Interpolation::Linear, par)?;
    let mut mu: Vec<f64> = (0..n)
        .map(|i| {
            bench
                .initial
                .density_1d(grid.node(i))
                .ok_or_else(|| Error::UnsupportedOracle("initial distribution has no 1-D density".into()))
        })
        .collect::<Result<_>>()?;
    let total: f64 = mu.iter().sum();
    mu.iter_mut().for_each(|w| *w /= total);
    let gamma = bench.env.discount();
    let mut rho = vec![0.0; n];
    let mut weight = 1.0 - gamma;
    while weight >= 1e-13 * (1.0 - gamma) {
        for (r, w) in rho.iter_mut().zip(&mu) {
            *r += weight * w;
        }
        let mut next = vec![0.0; n];
        for i in 0..n {
            for a in 0..m {
                let mass = mu[i] * policy[i * m + a];
                for (c, w) in stencils.row(i * m + a) {
                    next[c] += mass * w;
                }
            }
        }
        mu = next;
        weight *= gamma;
    }
    let total: f64 = rho.iter().sum();
    rho.iter_mut().for_each(|w| *w /= total);
    Ok(rho)
}

impl OracleSolution {
    /// `v*_h` and its derivative at an arbitrary state, by linear interpolation
    /// of the nodal tables. The flag reports clamping into the grid box.
    pub fn value_at(&self, x: f64) -> (f64, f64, bool) {
        let (v, clamped) = self.grid.interpolate(&self.v_h, x);
        let (g, _) = self.grid.interpolate(&self.v_h_grad, x);
        (v, g, clamped)
    }

    /// `q*_h(x, ·)` by linear interpolation.
    pub fn advantage_at(&self, x: f64) -> (Vec<f64>, bool) {
        let (i, t, clamped) = self.grid.locate(x);
        let m = self.n_actions;
        let q = (0..m)
            .map(|a| (1.0 - t) * self.q_h[i * m + a] + t * self.q_h[(i + 1) * m + a])
            .collect();
        (q, clamped)
    }

    /// Largest violation of `Q* = v*_h + h q*_h` and `v* = v*_h + h max_a q*_h`.
    pub fn recovery_error(&self) -> f64 {
        let m = self.n_actions;
        let mut worst: f64 = 0.0;
        for i in 0..self.grid.points {
            let mut max_q = f64::NEG_INFINITY;
            for a in 0..m {
                let r = i * m + a;
                worst = worst.max((self.q_star[r] - self.v_h[i] - self.h * self.q_h[r]).abs());
                max_q = max_q.max(self.q_h[r]);
            }
            worst = worst.max((self.v_star[i] - self.v_h[i] - self.h * max_q).abs());
        }
        worst
    }

    /// Largest `|Σ_a π₀(a|x) q*_h(x, a)|` over the grid.
    pub fn advantage_mean_error(&self) -> f64 {
        let m = self.n_actions;
        (0..self.grid.points)
            .map(|i| dot(&self.policy[i * m..(i + 1) * m], &self.q_h[i * m..(i + 1) * m]).abs())
            .fold(0.0, f64::max)
    }

    /// `Var_ρ(X)` under the grid occupancy.
    pub fn occupancy_variance(&self) -> f64 {
        let xs = self.grid.nodes();
        let mean: f64 = xs.iter().zip(&self.rho).map(|(x, w)| x * w).sum();
        xs.iter().zip(&self.rho).map(|(x, w)| w * (x - mean).powi(2)).sum()
    }

    /// Weighted least-squares fit of `v*_h` in the `H¹(ρ)` norm over the grid.
    pub fn project_value(&self, class: &ValueClass) -> Result<Coeffs> {
        check_1d(class.state_dim())?;
        let p = class.len();
        let mut gram = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for (i, x) in self.grid.nodes().into_iter().enumerate() {
            let w = self.rho[i];
            let phi = DVector::from_vec(class.features().eval(&[x]));
            let jac = DVector::from_vec(class.features().jacobian(&[x]));
            gram += (&phi * phi.transpose() + &jac * jac.transpose()) * w;
            rhs += (&phi * self.v_h[i] + &jac * self.v_h_grad[i]) * w;
        }
        solve_normal(gram, rhs)
    }

    /// Weighted least-squares fit of `q*_h` in `L²(ρ × π₀)` over the grid.
    pub fn project_advantage(&self, class: &AdvantageClass) -> Result<Coeffs> {
        let (q, m) = (class.len(), self.n_actions);
        let mut gram = DMatrix::zeros(q, q);
        let mut rhs = DVector::zeros(q);
        for (i, x) in self.grid.nodes().into_iter().enumerate() {
            let (feats, probs) = class.centered_all(&[x]);
            for a in 0..m {
                let w = self.rho[i] * probs[a];
                let psi = DVector::from_column_slice(&feats[a * q..(a + 1) * q]);
                gram += &psi * psi.transpose() * w;
                rhs += psi * (self.q_h[i * m + a] * w);
            }
        }
        solve_normal(gram, rhs)
    }
}

fn solve_normal(gram: DMatrix<f64>, rhs: DVector<f64>) -> Result<Coeffs> {
    let p = gram.nrows();
    let ridge = 1e-12 * gram.trace().max(f64::MIN_POSITIVE) / p as f64;
    let reg = gram + DMatrix::identity(p, p) * ridge;
    let chol = reg
        .cholesky()
        .ok_or_else(|| Error::Conditioning("oracle projection system is not positive definite".into()))?;
    Ok(chol.solve(&rhs))
}

fn check_1d(d: usize) -> Result<()> {
    if d == 1 {
        Ok(())
    } else {
        Err(Error::UnsupportedOracle(format!("{d}-dimensional class against a 1-D oracle")))
    }
}

/// Where an error norm is integrated.
#[derive(Clone, Copy, Debug)]
pub enum EvalMeasure<'a> {
    /// Quadrature against the grid occupancy weights.
    Grid,
    /// Uniform average over sampled states.
    States(&'a [Vec<f64>]),
}

/// An error estimate together with the number of states clamped into the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorEstimate {
    pub value: f64,
    pub clamped: usize,
}

fn weighted_average<F>(oracle: &OracleSolution, measure: EvalMeasure<'_>, f: F) -> Result<ErrorEstimate>
where
    F: Fn(f64, Option<usize>) -> Result<(f64, bool)>,
{
    let (mut total, mut clamped) = (0.0, 0);
    match measure {
        EvalMeasure::Grid => {
            for (i, w) in oracle.rho.iter().enumerate() {
                total += w * f(oracle.grid.node(i), Some(i))?.0;
            }
        }
        EvalMeasure::States(states) => {
            if states.is_empty() {
                return Err(Error::Empty("evaluation states"));
            }
            for x in states {
                check_1d(x.len())?;
                let (v, c) = f(x[0], None)?;
                total += v;
                clamped += usize::from(c);
            }
            total /= states.len() as f64;
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} evaluation states clamped into the oracle grid");
    }
    Ok(ErrorEstimate { value: total, clamped })
}

/// `‖θᵀφ - v*_h‖²_{H¹(ρ)}`.
pub fn sobolev_error(
    theta: &Coeffs,
    class: &ValueClass,
    oracle: &OracleSolution,
    measure: EvalMeasure<'_>,
) -> Result<ErrorEstimate> {
    check_1d(class.state_dim())?;
    weighted_average(oracle, measure, |x, node| {
        let (v, g, clamped) = match node {
            Some(i) => (oracle.v_h[i], oracle.v_h_grad[i], false),
            None => oracle.value_at(x),
        };
        let dv = class.eval(theta, &[x])? - v;
        let dg = class.grad(theta, &[x])?[0] - g;
        Ok((dv * dv + dg * dg, clamped))
    })
}

/// `E_{x∼ρ, a∼π₀}(ηᵀψ̃(x, a) - q*_h(x, a))²`, with the action expectation exact.
pub fn l2nu_error(
    eta: &Coeffs,
    class: &AdvantageClass,
    oracle: &OracleSolution,
    measure: EvalMeasure<'_>,
    policy: &BehaviorPolicy,
) -> Result<ErrorEstimate> {
    let m = oracle.n_actions;
    if class.n_actions() != m || policy.n_actions() != m {
        return Err(Error::DimensionMismatch {
            context: "advantage actions vs oracle",
            expected: m,
            got: class.n_actions(),
        });
    }
    weighted_average(oracle, measure, |x, node| {
        let (target, clamped) = match node {
            Some(i) => (oracle.q_h[i * m..(i + 1) * m].to_vec(), false),
            None => oracle.advantage_at(x),
        };
        let est = class.eval_all(eta, &[x])?;
        let probs = policy.probs(&[x]);
        let err = (0..m).map(|a| probs[a] * (est[a] - target[a]).powi(2)).sum();
        Ok((err, clamped))
    })
}

/// `ln³(n/δ) √(d/n)`.
pub fn critical_radius_parametric(d: usize, n: usize, delta: f64) -> Result<f64> {
    if d == 0 || n < d || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "critical radius needs n ≥ d ≥ 1 and δ in (0, 1), got d = {d}, n = {n}, δ = {delta}"
        )));
    }
    let n = n as f64;
    Ok((n / delta).ln().powi(3) * (d as f64 / n).sqrt())
}

const CACHE_MAGIC: &[u8; 8] = b"SOBOQOR1";

/// Cache key: SHA-256 over the environment, its scalars and the solver options.
pub fn cache_key(bench: &Benchmark, opts: &OracleOptions) -> String {
    let mut hasher = Sha256::new();
    let payload = serde_json::json!({
        "env": bench.env.name(),
        "params": bench.env.params(),
        "kernel": bench.env.dynamics().linear_gaussian(),
        "initial": bench.initial,
        "options": opts,
    });
    hasher.update(payload.to_string().as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> io::Result<()> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R) -> io::Result<Vec<f64>> {
    let len = read_u64(r)? as usize;
    (0..len).map(|_| read_u64(r).map(f64::from_bits)).collect()
}

impl OracleSolution {
    /// Little-endian binary dump.
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        let name = self.env.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        write_f64s(w, &[self.grid.lo, self.grid.hi, self.h, self.residual])?;
        for n in [self.grid.points, self.n_actions, self.iterations] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for table in [&self.q_star, &self.v_star, &self.v_h, &self.v_h_grad, &self.q_h, &self.policy, &self.rho] {
            write_f64s(w, table)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(bad("not an oracle cache file"));
        }
        let len = read_u64(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let env = String::from_utf8(name).map_err(|_| bad("environment name is not UTF-8"))?;
        let scalars = read_f64s(r)?;
        if scalars.len() != 4 {
            return Err(bad("corrupt header"));
        }
        let points = read_u64(r)? as usize;
        let n_actions = read_u64(r)? as usize;
        let iterations = read_u64(r)? as usize;
        let mut tables = (0..7).map(|_| read_f64s(r)).collect::<io::Result<Vec<_>>>()?.into_iter();
        let mut next = || tables.next().unwrap();
        let sol = Self {
            env,
            grid: GridSpec {
                lo: scalars[0],
                hi: scalars[1],
                points,
            },
            n_actions,
            h: scalars[2],
            residual: scalars[3],
            iterations,
            q_star: next(),
            v_star: next(),
            v_h: next(),
            v_h_grad: next(),
            q_h: next(),
            policy: next(),
            rho: next(),
        };
        let nm = points * n_actions;
        if [&sol.q_star, &sol.q_h, &sol.policy].iter().any(|t| t.len() != nm)
            || [&sol.v_star, &sol.v_h, &sol.v_h_grad, &sol.rho].iter().any(|t| t.len() != points)
        {
            return Err(bad("table sizes disagree with the grid"));
        }
        Ok(sol)
    }
}

/// Loads the oracle from `dir/<key>.bin`, solving and storing it on a miss.
/// The file is written to a temporary name first and renamed into place.
pub fn load_or_solve(dir: &Path, bench: &Benchmark, opts: &OracleOptions, par: Parallelism) -> Result<OracleSolution> {
    let path: PathBuf = dir.join(format!("{}.bin", cache_key(bench, opts)));
    if let Ok(file) = fs::File::open(&path) {
        match OracleSolution::read_from(&mut io::BufReader::new(file)) {
            Ok(sol) => return Ok(sol),
            Err(e) => log::warn!("ignoring unreadable oracle cache {}: {e}", path.display()),
        }
    }
    let sol = grid_dp_solve(bench, opts, par)?;
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut w = io::BufWriter::new(fs::File::create(&tmp)?);
        sol.write_to(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, &path)?;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{builtin_env, ActionSet, EnvConstants, EnvParams, Environment, InitialDistribution, OrnsteinUhlenbeck};
    use crate::funcspace::{FeatureSpec, Polynomial};
    use std::sync::Arc;

    fn const_reward_bench(c: f64) -> Benchmark {
        let env = Environment::new(
            "const",
            Arc::new(OrnsteinUhlenbeck {
                dim: 1,
                kappa: 1.0,
                sigma: 1.0,
            }),
            move |_x: &[f64], _a: &[f64]| c,
            ActionSet::scalar(&[-1.0, 0.0, 1.0]).unwrap(),
            EnvParams::default(),
            EnvConstants {
                lambda_min: 1.0,
                lambda_max: 1.0,
                stability_bound: 0.25,
                reward_bound: c.abs(),
            },
        )
        .unwrap();
        Benchmark {
            env,
            policy: BehaviorPolicy::uniform(3),
            initial: InitialDistribution::standard_normal(1),
        }
    }

    fn small_opts() -> OracleOptions {
        OracleOptions {
            grid: GridSpec {
                lo: -5.0,
                hi: 5.0,
                points: 201,
            },
            ..OracleOptions::default()
        }
    }

    #[test]
    fn gauss_hermite_moments() {
        let (z, w) = gauss_hermite(31);
        let moment = |k: i32| z.iter().zip(&w).map(|(z, w)| w * z.powi(k)).sum::<f64>();
        assert!((moment(0) - 1.0).abs() < 1e-14);
        assert!(moment(1).abs() < 1e-13);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-11);
        assert!((moment(10) / 945.0 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_rewards() {
        for c in [0.0, 0.5] {
            let sol = grid_dp_solve(&const_reward_bench(c), &small_opts(), Parallelism::default()).unwrap();
            let exact = c * 0.1 / (1.0 - (-0.1f64).exp());
            if c == 0.5 {
                assert!((exact - 0.525417).abs() < 1e-6);
            }
            for (q, v) in sol.q_star.iter().zip(sol.v_h.iter().cycle()) {
                assert!((q - exact).abs() < 1e-8);
                assert!((v - exact).abs() < 1e-8);
            }
            assert!(sol.q_h.iter().all(|q| q.abs() < 1e-7));
        }
    }

    #[test]
    fn ou1d_invariants() {
        let b = builtin_env("ou1d").unwrap();
        let sol = grid_dp_solve(&b, &OracleOptions::default(), Parallelism::default()).unwrap();
        assert!(sol.residual <= 1e-9);
        assert!(sol.recovery_error() <= 1e-9);
        assert!(sol.advantage_mean_error() <= 1e-9);
        assert!((sol.rho.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(sol.rho.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn other_benchmarks_are_unsupported() {
        let opts = small_opts();
        for name in ["doublewell1d", "ou2d"] {
            let b = builtin_env(name).unwrap();
            assert!(matches!(grid_dp_solve(&b, &opts, Parallelism::default()), Err(Error::UnsupportedOracle(_))));
        }
    }

    #[test]
    fn realizable_constant_has_zero_error() {
        let b = const_reward_bench(0.5);
        let sol = grid_dp_solve(&b, &small_opts(), Parallelism::default()).unwrap();
        let class = ValueClass::new(Arc::new(Polynomial::new(1, 2).unwrap()), 10.0).unwrap();
        let theta = DVector::from_vec(vec![0.05 / (1.0 - (-0.1f64).exp()), 0.0, 0.0]);
        let e = sobolev_error(&theta, &class, &sol, EvalMeasure::Grid).unwrap();
        assert!(e.value <= 1e-8);
    }

    #[test]
    fn zero_estimator_error_is_oracle_norm() {
        let b = builtin_env("ou1d").unwrap();
        let sol = grid_dp_solve(&b, &small_opts(), Parallelism::default()).unwrap();
        let class = ValueClass::new("poly:3".parse::<FeatureSpec>().unwrap().build(1).unwrap(), 10.0).unwrap();
        let e = sobolev_error(&DVector::zeros(4), &class, &sol, EvalMeasure::Grid).unwrap();
        let norm: f64 = (0..sol.grid.points)
            .map(|i| sol.rho[i] * (sol.v_h[i].powi(2) + sol.v_h_grad[i].powi(2)))
            .sum();
        assert!((e.value - norm).abs() <= 1e-15 * norm.max(1.0));
    }

    #[test]
    fn critical_radius_examples() {
        let r = critical_radius_parametric(10, 1_000_000, 0.01).unwrap();
        let independent = 1e8f64.ln().powi(3) * 1e-5f64.sqrt();
        assert!((r - independent).abs() < 1e-12 && (r - 19.766).abs() < 1e-3, "{r}");
        let unit = critical_radius_parametric(1, 1, (-1.0f64).exp()).unwrap();
        assert!((unit - 1.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in 10..30 {
            let r = critical_radius_parametric(5, 1 << k, 0.05).unwrap();
            assert!(r < prev);
            prev = r;
        }
        assert!(critical_radius_parametric(5, 4, 0.1).is_err());
        assert!(critical_radius_parametric(1, 4, 1.0).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let b = builtin_env("ou1d").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = small_opts();
        let a = load_or_solve(dir.path(), &b, &opts, Parallelism::default()).unwrap();
        let again = load_or_solve(dir.path(), &b, &opts, Parallelism::default()).unwrap();
        assert_eq!(a, again);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        let other = OracleOptions { tol: 1e-8, ..opts };
        assert_ne!(cache_key(&b, &opts), cache_key(&b, &other));
    }

    #[test]
    fn solve_is_mode_independent() {
        let b = builtin_env("ou1d").unwrap();
        let a = grid_dp_solve(&b, &small_opts(), Parallelism::default()).unwrap();
        let s = grid_dp_solve(&b, &small_opts(), Parallelism::Sequential).unwrap();
        assert_eq!(a, s);
    }

    #[test]
    fn grid_refinement_drift() {
        let b = builtin_env("ou1d").unwrap();
        let coarse = OracleOptions::default();
        let fine = OracleOptions {
            grid: GridSpec {
                points: 1601,
                ..coarse.grid
            },
            ..coarse
        };
        let a = grid_dp_solve(&b, &coarse, Parallelism::default()).unwrap();
        let f = grid_dp_solve(&b, &fine, Parallelism::default()).unwrap();
        let drift = (0..a.grid.points)
            .filter(|&i| a.grid.node(i).abs() <= 4.0 + 1e-12)
            .map(|i| (a.v_h[i] - f.v_h[2 * i]).abs())
            .fold(0.0, f64::max);
        assert!(drift <= 1e-5, "drift {drift:e}");
    }
}
