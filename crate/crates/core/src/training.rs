//! Tabular value-based episodic memory training loop.
//!
//! Two critics with lagged target copies. Every step samples a batch of
//! stored transitions together with their planned returns, moves each
//! online critic toward the gradient-expectile target built from its own
//! planned return, refits the actor by advantage-weighted regression and
//! logs metrics. Every `memory_update_period` steps the targets take a Polyak
//! step and the memory is re-planned against the new targets.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, VemError};
use crate::mdp::{solve_optimal_values, TabularMdp, TabularPolicy, ValueTable, DEFAULT_TOL};
use crate::memory::{update_memory, OfflineDataset, PlanningConfig, Transition, N_CRITICS};
use crate::operators::{check_step_size, step_size_bound};
use crate::policy::{apply_weighting, compute_advantages, evaluate_policy, fit_policy, WeightingFn};
use crate::seeding::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    /// κ in `θ' ← κθ + (1−κ)θ'`.
    pub target_update_rate: f64,
    pub memory_update_period: usize,
    /// α of the gradient expectile target.
    pub critic_step_size: f64,
    /// Fraction of the way each visited table entry moves toward its
    /// regression target per step; 1 is the exact least-squares solution.
    pub learning_rate: f64,
    pub tau: f64,
    /// Longest rollout for memory planning; `None` uses the longest stored
    /// trajectory.
    pub n_max: Option<usize>,
    /// Critics start at independent uniform draws in `[0, init_noise)`.
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let tau = 0.7;
        TrainConfig {
            total_steps: 1_000,
            batch_size: 128,
            target_update_rate: 0.005,
            memory_update_period: 100,
            critic_step_size: step_size_bound(tau),
            learning_rate: 1.0,
            tau,
            n_max: None,
            init_noise: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.memory_update_period == 0 {
            return Err(VemError::param("batch_size and memory_update_period must be positive"));
        }
        if !(self.target_update_rate > 0.0 && self.target_update_rate <= 1.0) {
            return Err(VemError::param(format!(
                "target_update_rate must lie in (0, 1], got {}",
                self.target_update_rate
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(VemError::param("learning_rate must lie in (0, 1]"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(VemError::param(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        check_step_size(self.tau, self.critic_step_size)?;
        if self.n_max == Some(0) {
            return Err(VemError::param("n_max must be at least 1"));
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return Err(VemError::param("init_noise must be non-negative"));
        }
        Ok(())
    }
}

/// Online critics and their lagged target copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticPair {
    pub online: [ValueTable; N_CRITICS],
    pub target: [ValueTable; N_CRITICS],
}

impl CriticPair {
    /// Both critics at zero plus independent `U[0, noise)` perturbations;
    /// targets copy the online tables.
    pub fn new(n_states: usize, noise: f64, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut draw = || -> ValueTable {
            (0..n_states)
                .map(|_| if noise > 0.0 { rng.gen_range(0.0..noise) } else { 0.0 })
                .collect::<Vec<_>>()
                .into()
        };
        let online = [draw(), draw()];
        CriticPair {
            target: online.clone(),
            online,
        }
    }

    pub fn from_tables(online: [ValueTable; N_CRITICS]) -> Result<Self> {
        check_dim("critic", online[0].len(), online[1].len())?;
        Ok(CriticPair {
            target: online.clone(),
            online,
        })
    }

    pub fn n_states(&self) -> usize {
        self.online[0].len()
    }

    /// Elementwise mean of the online critics.
    pub fn mean_online(&self) -> ValueTable {
        let [a, b] = &self.online;
        a.iter().zip(b.iter()).map(|(x, y)| 0.5 * (x + y)).collect::<Vec<_>>().into()
    }

    pub fn online_refs(&self) -> [&ValueTable; N_CRITICS] {
        [&self.online[0], &self.online[1]]
    }

    pub fn target_refs(&self) -> [&ValueTable; N_CRITICS] {
        [&self.target[0], &self.target[1]]
    }

    /// Largest and smallest entry across the online tables.
    pub fn online_range(&self) -> (f64, f64) {
        self.online.iter().flat_map(|t| t.iter()).fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), &v| (lo.min(v), hi.max(v)),
        )
    }
}

#[inline]
fn expectile_target(base: f64, delta: f64, tau: f64, alpha: f64) -> f64 {
    let step = if delta > 0.0 { tau * delta } else { (1.0 - tau) * delta };
    base + 2.0 * alpha * step
}

/// Regress every visited online entry toward the mean of its targets.
/// Returns the mean squared regression error before the move.
fn regress(online: &mut ValueTable, targets: &[(usize, f64)], lr: f64) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut loss = 0.0;
    for &(s, y) in targets {
        loss += (y - online[s]) * (y - online[s]);
        let e = sums.entry(s).or_insert((0.0, 0));
        e.0 += y;
        e.1 += 1;
    }
    for (s, (sum, n)) in sums {
        let mean = sum / n as f64;
        online[s] += lr * (mean - online[s]);
    }
    loss / targets.len() as f64
}

/// Per-critic regression losses of one step; `samples == 0` flags a skipped
/// (empty) batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub samples: usize,
    pub losses: [f64; N_CRITICS],
}

/// One-step expectile V-learning update from transitions:
/// target `V'(s) + 2α(τ[δ]₊ + (1−τ)[δ]₋)` with `δ = r + γV'(s') − V'(s)`
/// computed on each critic's target table. Targets are not modified.
pub fn evl_step(critics: &mut CriticPair, batch: &[Transition], gamma: f64, cfg: &TrainConfig) -> Result<StepStats> {
    cfg.validate()?;
    if batch.is_empty() {
        return Ok(StepStats {
            samples: 0,
            losses: [0.0; N_CRITICS],
        });
    }
    let n = critics.n_states();
    if let Some(bad) = batch.iter().find(|t| t.s >= n || t.s_next >= n) {
        return Err(VemError::param(format!("transition ({}, {}) out of range", bad.s, bad.s_next)));
    }
    let mut losses = [0.0; N_CRITICS];
    for i in 0..N_CRITICS {
        let target = &critics.target[i];
        let ys: Vec<(usize, f64)> = batch
            .iter()
            .map(|t| {
                let delta = t.r + gamma * target[t.s_next] - target[t.s];
                (t.s, expectile_target(target[t.s], delta, cfg.tau, cfg.critic_step_size))
            })
            .collect();
        losses[i] = regress(&mut critics.online[i], &ys, cfg.learning_rate);
    }
    Ok(StepStats {
        samples: batch.len(),
        losses,
    })
}

/// A sampled memory entry: state and the planned return for each critic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemorySample {
    pub s: usize,
    pub a: usize,
    pub planned: [f64; N_CRITICS],
}

/// Critic update toward planned returns: target
/// `V'(s) + 2α(τ[δ]₊ + (1−τ)[δ]₋)` with `δ = R̂^{(i)} − V'_i(s)`.
/// With `n_max = 1` the planned return is the one-step backup and this is
/// exactly [`evl_step`].
pub fn memory_step(critics: &mut CriticPair, batch: &[MemorySample], cfg: &TrainConfig) -> StepStats {
    let mut losses = [0.0; N_CRITICS];
    for i in 0..N_CRITICS {
        let target = &critics.target[i];
        let ys: Vec<(usize, f64)> = batch
            .iter()
            .map(|m| {
                let delta = m.planned[i] - target[m.s];
                (m.s, expectile_target(target[m.s], delta, cfg.tau, cfg.critic_step_size))
            })
            .collect();
        losses[i] = regress(&mut critics.online[i], &ys, cfg.learning_rate);
    }
    StepStats {
        samples: batch.len(),
        losses,
    }
}

/// `θ' ← κθ + (1−κ)θ'` per critic.
pub fn polyak_update(critics: &mut CriticPair, kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(VemError::param(format!("kappa must lie in (0, 1], got {kappa}")));
    }
    for i in 0..N_CRITICS {
        let online = critics.online[i].as_slice().to_vec();
        for (t, o) in critics.target[i].as_mut_slice().iter_mut().zip(online) {
            *t = kappa * o + (1.0 - kappa) * *t;
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub critic_loss_1: f64,
    pub critic_loss_2: f64,
    /// `J(π)` of the actor after this step.
    pub policy_return: f64,
    /// Mean over states of the mean online critic.
    pub mean_value: f64,
    /// `mean_s V̄(s) − mean_s V*(s)`.
    pub value_error: f64,
    pub max_critic_value: f64,
    pub min_critic_value: f64,
}

/// Run settings echoed at the start of every metrics row.
pub const METRICS_ECHO_HEADER: &str =
    "seed,tau,critic_step_size,learning_rate,batch_size,target_update_rate,memory_update_period,n_max";
pub const METRICS_HEADER: &str =
    "step,critic_loss_1,critic_loss_2,policy_return,mean_value,value_error,max_critic_value,min_critic_value";

impl MetricRecord {
    /// CSV fields matching [`METRICS_HEADER`]. Floats use the shortest
    /// round-tripping representation.
    pub fn csv_fields(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.step,
            self.critic_loss_1,
            self.critic_loss_2,
            self.policy_return,
            self.mean_value,
            self.value_error,
            self.max_critic_value,
            self.min_critic_value
        )
    }
}

fn echo_fields(cfg: &TrainConfig, n_max: usize) -> String {
    format!(
        "{},{:?},{:?},{:?},{},{:?},{},{}",
        cfg.seed,
        cfg.tau,
        cfg.critic_step_size,
        cfg.learning_rate,
        cfg.batch_size,
        cfg.target_update_rate,
        cfg.memory_update_period,
        n_max
    )
}

/// Write the metrics log as CSV. Each row starts with the run settings;
/// `n_max` is the planning horizon actually used.
pub fn write_metrics_csv(
    records: &[MetricRecord],
    cfg: &TrainConfig,
    n_max: usize,
    mut out: impl Write,
) -> std::io::Result<()> {
    writeln!(out, "{METRICS_ECHO_HEADER},{METRICS_HEADER}")?;
    let echo = echo_fields(cfg, n_max);
    for r in records {
        writeln!(out, "{echo},{}", r.csv_fields())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: TabularPolicy,
    pub critics: CriticPair,
    pub log: Vec<MetricRecord>,
    /// Dataset with the final planned returns.
    pub memory: OfflineDataset,
    /// Batches that came back empty and were skipped.
    pub empty_batches: usize,
    /// Planning horizon used.
    pub n_max: usize,
}

impl TrainOutcome {
    pub fn metrics_csv(&self, cfg: &TrainConfig) -> String {
        let mut buf = Vec::new();
        write_metrics_csv(&self.log, cfg, self.n_max, &mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }

    /// First step at which `J(π)` reaches `fraction` of its final value.
    pub fn steps_to_fraction_of_final(&self, fraction: f64) -> Option<usize> {
        let last = self.log.last()?.policy_return;
        self.log
            .iter()
            .find(|m| m.policy_return >= fraction * last)
            .map(|m| m.step)
    }
}

fn fit_actor(
    memory: &OfflineDataset,
    critics: &CriticPair,
    f: &WeightingFn,
    n_states: usize,
    n_actions: usize,
) -> Result<TabularPolicy> {
    let records = compute_advantages(memory, critics.online_refs())?;
    let weighted = apply_weighting(&records, f)?;
    fit_policy(&weighted, n_states, n_actions)
}

/// Run the full training loop.
pub fn train_vem(
    mdp: &TabularMdp,
    dataset: &OfflineDataset,
    cfg: &TrainConfig,
    f: &WeightingFn,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    f.validate()?;
    check_dim("dataset states", mdp.n_states(), dataset.n_states)?;
    check_dim("dataset actions", mdp.n_actions(), dataset.n_actions)?;
    dataset.validate()?;

    let n_states = mdp.n_states();
    let n_actions = mdp.n_actions();
    let plan = PlanningConfig::new(cfg.n_max.unwrap_or_else(|| dataset.max_len()), mdp.gamma())?;
    let mut critics = CriticPair::new(n_states, cfg.init_noise, derive_seed(cfg.seed, "critic-init"));
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "batches"));

    let mut memory = dataset.clone();
    if !memory.has_planned_returns() {
        update_memory(&mut memory, critics.target_refs(), &plan)?;
    }
    if cfg.total_steps == 0 {
        return Ok(TrainOutcome {
            policy: TabularPolicy::uniform(n_states, n_actions),
            critics,
            log: Vec::new(),
            memory,
            empty_batches: 0,
            n_max: plan.n_max,
        });
    }

    let v_star_mean = solve_optimal_values(mdp, DEFAULT_TOL)?.mean();
    let index: Vec<(usize, usize)> = memory
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();

    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut policy = TabularPolicy::uniform(n_states, n_actions);
    let mut empty_batches = 0;
    for step in 1..=cfg.total_steps {
        let batch: Vec<MemorySample> = (0..cfg.batch_size)
            .map(|_| {
                let (i, k) = index[rng.gen_range(0..index.len())];
                let traj = &memory.trajectories[i];
                let planned = traj.planned_returns.as_ref().expect("memory is planned");
                MemorySample {
                    s: traj.steps[k].s,
                    a: traj.steps[k].a,
                    planned: [planned[0][k], planned[1][k]],
                }
            })
            .collect();
        let stats = memory_step(&mut critics, &batch, cfg);
        if stats.samples == 0 {
            empty_batches += 1;
        }
        policy = fit_actor(&memory, &critics, f, n_states, n_actions)?;

        if step % cfg.memory_update_period == 0 {
            polyak_update(&mut critics, cfg.target_update_rate)?;
            update_memory(&mut memory, critics.target_refs(), &plan)?;
        }

        let mean = critics.mean_online();
        let (lo, hi) = critics.online_range();
        log.push(MetricRecord {
            step,
            critic_loss_1: stats.losses[0],
            critic_loss_2: stats.losses[1],
            policy_return: evaluate_policy(mdp, &policy, DEFAULT_TOL)?,
            mean_value: mean.mean(),
            value_error: mean.mean() - v_star_mean,
            max_critic_value: hi,
            min_critic_value: lo,
        });
    }

    Ok(TrainOutcome {
        policy,
        critics,
        log,
        memory,
        empty_batches,
        n_max: plan.n_max,
    })
}
