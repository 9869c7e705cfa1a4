//! Off-policy datasets of geometric-horizon trajectories and fold splitting.

mod jsonl;

pub use jsonl::{read_jsonl, write_jsonl};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{open_closed_uniform, stream_rng, BehaviorPolicy, Environment, InitialDistribution, SimScratch};
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};

/// Horizons are truncated at `T_MAX_RATES / β` time units.
pub const T_MAX_RATES: f64 = 50.0;

/// One observed `(x, a, R, x')` tuple, borrowed from its trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition<'a> {
    pub x: &'a [f64],
    pub a_idx: usize,
    pub r: f64,
    pub x_next: &'a [f64],
}

/// A trajectory of `steps + 1` transitions.
///
/// States are stored as a chain `x_0, …, x_{steps+1}`; transition `k` reads
/// `x_k` and `x_{k+1}`, so the final successor is always present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Trajectory index; also the id of the random stream that produced it.
    pub index: usize,
    dim: usize,
    states: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(index: usize, dim: usize, states: Vec<f64>, actions: Vec<usize>, rewards: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        if actions.is_empty() || rewards.len() != actions.len() {
            return Err(Error::InvalidArgument(format!(
                "trajectory {index}: {} actions and {} rewards",
                actions.len(),
                rewards.len()
            )));
        }
        if states.len() != (actions.len() + 1) * dim {
            return Err(Error::InvalidArgument(format!(
                "trajectory {index}: expected {} state values, got {}",
                (actions.len() + 1) * dim,
                states.len()
            )));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("trajectory {index}: non-finite state")));
        }
        if rewards.iter().any(|r| !(r.abs() <= 1.0)) {
            return Err(Error::InvalidArgument(format!("trajectory {index}: reward outside [-1, 1]")));
        }
        Ok(Self {
            index,
            dim,
            states,
            actions,
            rewards,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `⌊T/h⌋`.
    pub fn horizon_steps(&self) -> usize {
        self.actions.len() - 1
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// State `x_k` for `k ∈ 0..=steps+1`.
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn transition(&self, k: usize) -> Transition<'_> {
        Transition {
            x: self.state(k),
            a_idx: self.actions[k],
            r: self.rewards[k],
            x_next: self.state(k + 1),
        }
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition<'_>> + '_ {
        (0..self.len()).map(move |k| self.transition(k))
    }
}

/// Provenance of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub env: String,
    pub n: usize,
    pub h: f64,
    pub beta: f64,
    /// Number of horizons clamped at `T_max`.
    pub truncations: usize,
}

/// Round-robin assignment of trajectories to folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub num_folds: usize,
    pub assignment: Vec<usize>,
}

/// A collection of trajectories, optionally split into folds.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub meta: DatasetMeta,
    folds: Option<FoldAssignment>,
}

/// Tuples of one fold, flattened in trajectory order.
#[derive(Clone, Debug)]
pub struct Fold<'a> {
    pub index: usize,
    pub n_trajectories: usize,
    pub tuples: Vec<Transition<'a>>,
}

impl Fold<'_> {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Scale `(1 - e^{-βh}) / n` turning tuple sums into occupancy averages.
    pub fn scale(&self, env: &Environment) -> f64 {
        env.stop_probability() / self.n_trajectories as f64
    }
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, meta: DatasetMeta) -> Self {
        Self {
            trajectories,
            meta,
            folds: None,
        }
    }

    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    pub fn total_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn folds(&self) -> Option<&FoldAssignment> {
        self.folds.as_ref()
    }

    pub fn num_folds(&self) -> usize {
        self.folds.as_ref().map_or(0, |f| f.num_folds)
    }

    /// Assigns trajectory `i` to fold `i mod num_folds`.
    pub fn split_folds(mut self, num_folds: usize) -> Result<Self> {
        if num_folds == 0 {
            return Err(Error::InvalidArgument("number of folds must be positive".into()));
        }
        if self.n() < num_folds {
            return Err(Error::InsufficientData {
                folds: num_folds,
                trajectories: self.n(),
            });
        }
        self.folds = Some(FoldAssignment {
            num_folds,
            assignment: (0..self.n()).map(|i| i % num_folds).collect(),
        });
        Ok(self)
    }

    /// Tuples of fold `k`.
    pub fn fold(&self, k: usize) -> Result<Fold<'_>> {
        let folds = self
            .folds
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dataset has not been split into folds".into()))?;
        if k >= folds.num_folds {
            return Err(Error::InvalidArgument(format!(
                "fold {k} requested but only {} exist",
                folds.num_folds
            )));
        }
        let members: Vec<&Trajectory> = self
            .trajectories
            .iter()
            .zip(&folds.assignment)
            .filter(|(_, &f)| f == k)
            .map(|(t, _)| t)
            .collect();
        Ok(Fold {
            index: k,
            n_trajectories: members.len(),
            tuples: members.iter().flat_map(|t| t.transitions()).collect(),
        })
    }

    /// All tuples as a single fold.
    pub fn whole(&self) -> Fold<'_> {
        Fold {
            index: 0,
            n_trajectories: self.n(),
            tuples: self.trajectories.iter().flat_map(|t| t.transitions()).collect(),
        }
    }
}

/// A horizon draw `⌊T/h⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HorizonDraw {
    pub steps: usize,
    pub truncated: bool,
}

/// `⌊T/h⌋` for `T = -ln(u)/β`, with `T` clamped at `T_MAX_RATES/β`.
pub fn horizon_from_uniform(u: f64, beta: f64, h: f64) -> HorizonDraw {
    let t_max = T_MAX_RATES / beta;
    let t = -u.ln() / beta;
    let (t, truncated) = if t > t_max { (t_max, true) } else { (t, false) };
    HorizonDraw {
        steps: (t / h).floor() as usize,
        truncated,
    }
}

/// Samples a geometric horizon from an `Exp(β)` trajectory length.
pub fn sample_horizon<R: Rng + ?Sized>(beta: f64, h: f64, rng: &mut R) -> HorizonDraw {
    horizon_from_uniform(open_closed_uniform(rng), beta, h)
}

fn generate_trajectory(
    env: &Environment,
    policy: &BehaviorPolicy,
    initial: &InitialDistribution,
    index: usize,
    seed: u64,
) -> Result<(Trajectory, bool)> {
    let mut rng = stream_rng(seed, index as u64);
    let d = env.dim();
    let horizon = sample_horizon(env.beta(), env.h(), &mut rng);
    let len = horizon.steps + 1;
    let mut states = Vec::with_capacity((len + 1) * d);
    let mut actions = Vec::with_capacity(len);
    let mut rewards = Vec::with_capacity(len);
    let mut x = initial.sample(&mut rng);
    let mut scratch = SimScratch::new(d);
    states.extend_from_slice(&x);
    for _ in 0..len {
        let a = policy.sample(&x, &mut rng);
        let r = env.sample_reward(&x, a, &mut rng);
        env.advance(&mut x, a, &mut scratch, &mut rng)?;
        actions.push(a);
        rewards.push(r);
        states.extend_from_slice(&x);
    }
    Ok((
        Trajectory {
            index,
            dim: d,
            states,
            actions,
            rewards,
        },
        horizon.truncated,
    ))
}

/// Generates `n` independent trajectories under the behavior policy.
///
/// Trajectory `i` is driven by stream `i` of the generator seeded with
/// `master_seed`, so the result does not depend on the thread count.
pub fn generate_dataset(
    env: &Environment,
    policy: &BehaviorPolicy,
    initial: &InitialDistribution,
    n: usize,
    master_seed: u64,
    par: Parallelism,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if initial.dim() != env.dim() || policy.n_actions() != env.n_actions() {
        return Err(Error::DimensionMismatch {
            context: "generate_dataset",
            expected: env.dim(),
            got: initial.dim(),
        });
    }
    let out = par::try_map_collect(n, par, |i| {
        generate_trajectory(env, policy, initial, i, master_seed).map_err(|e| e.in_trajectory(i))
    })?;
    let truncations = out.iter().filter(|(_, t)| *t).count();
    if truncations > 0 {
        log::info!("{truncations} horizons truncated at T_max = {}", T_MAX_RATES / env.beta());
    }
    Ok(Dataset::new(
        out.into_iter().map(|(t, _)| t).collect(),
        DatasetMeta {
            seed: master_seed,
            env: env.name().to_string(),
            n,
            h: env.h(),
            beta: env.beta(),
            truncations,
        },
    ))
}

/// Draws `k` recorded states uniformly with replacement over all tuples.
pub fn empirical_state_sample<R: Rng + ?Sized>(dataset: &Dataset, k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let mut offsets = Vec::with_capacity(dataset.n() + 1);
    offsets.push(0usize);
    for t in &dataset.trajectories {
        offsets.push(offsets.last().unwrap() + t.len());
    }
    let total = *offsets.last().unwrap();
    if total == 0 {
        return Err(Error::Empty("dataset"));
    }
    Ok((0..k)
        .map(|_| {
            let j = rng.random_range(0..total);
            // last trajectory whose offset is ≤ j
            let t = offsets.partition_point(|&o| o <= j) - 1;
            dataset.trajectories[t].state(j - offsets[t]).to_vec()
        })
        .collect())
}
