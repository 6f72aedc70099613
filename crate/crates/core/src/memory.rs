//! Episodic memory: offline trajectories and the planned returns computed
//! along them.
//!
//! Planning compares, at every step, continuing along the stored trajectory
//! with stopping and bootstrapping from the current value estimate:
//!
//! ```text
//! R̂_t = r_t + γ max(R̂_{t+1}, V̂(s_{t+1}))   for t < T
//! R̂_T = r_T
//! ```
//!
//! The unrolled form takes the best of the `n`-step bootstrapped returns for
//! `1 ≤ n ≤ n_max`; with `n_max` covering the horizon both agree exactly.
//!
//! Trajectories that end because they hit the length limit rather than a
//! terminal state bootstrap their last step: `R̂_T = r_T + γ V̂(s_{T+1})`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, VemError};
use crate::mdp::{TabularMdp, TabularPolicy, ValueTable, FORMAT_VERSION};
use crate::operators::{expectile_gradient_unchecked, OperatorConfig, OperatorKind};
use crate::seeding::rng_from_seed;

/// Number of critics whose planned returns live in memory.
pub const N_CRITICS: usize = 2;

const DATASET_FORMAT: &str = "vem-dataset";

/// One `(s, a, r, s')` record. Serialized as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64, usize)", into = "(usize, usize, f64, usize)")]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

impl From<(usize, usize, f64, usize)> for Transition {
    fn from((s, a, r, s_next): (usize, usize, f64, usize)) -> Self {
        Transition { s, a, r, s_next }
    }
}

impl From<Transition> for (usize, usize, f64, usize) {
    fn from(t: Transition) -> Self {
        (t.s, t.a, t.r, t.s_next)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: u64,
    pub steps: Vec<Transition>,
    /// True when the last transition enters a terminal state.
    pub done: bool,
    /// Planned return per critic and step, once memory has been updated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planned_returns: Option<[Vec<f64>; N_CRITICS]>,
}

impl Trajectory {
    pub fn new(episode_id: u64, steps: Vec<Transition>, done: bool) -> Result<Self> {
        let traj = Trajectory {
            episode_id,
            steps,
            done,
            planned_returns: None,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(VemError::param(format!("trajectory {} is empty", self.episode_id)));
        }
        for (t, pair) in self.steps.windows(2).enumerate() {
            if pair[0].s_next != pair[1].s {
                return Err(VemError::param(format!(
                    "trajectory {} breaks at step {t}: s_next {} then s {}",
                    self.episode_id,
                    pair[0].s_next,
                    pair[1].s
                )));
            }
        }
        if let Some(planned) = &self.planned_returns {
            for p in planned {
                check_dim("planned returns", self.steps.len(), p.len())?;
            }
        }
        Ok(())
    }

    fn check_against(&self, n_states: usize, n_actions: usize) -> Result<()> {
        for st in &self.steps {
            if st.s >= n_states || st.s_next >= n_states || st.a >= n_actions {
                return Err(VemError::param(format!(
                    "trajectory {} references a state or action outside {n_states}x{n_actions}",
                    self.episode_id
                )));
            }
        }
        Ok(())
    }

    /// State reached after the last step.
    pub fn final_state(&self) -> usize {
        self.steps.last().map(|t| t.s_next).unwrap_or(0)
    }

    /// Value used past the end of the trajectory: zero after a terminal,
    /// the bootstrap estimate after truncation.
    fn tail_value(&self, v_hat: &ValueTable) -> f64 {
        if self.done {
            0.0
        } else {
            v_hat[self.final_state()]
        }
    }

    /// Discounted return-to-go of the stored rewards, with the same tail
    /// convention as planning.
    pub fn return_to_go(&self, v_hat: &ValueTable, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.steps.len()];
        let mut acc = self.tail_value(v_hat);
        for (t, st) in self.steps.iter().enumerate().rev() {
            acc = st.r + gamma * acc;
            out[t] = acc;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningConfig {
    /// Longest rollout considered by the unrolled planner.
    pub n_max: usize,
    pub gamma: f64,
}

impl PlanningConfig {
    pub fn new(n_max: usize, gamma: f64) -> Result<Self> {
        let cfg = PlanningConfig { n_max, gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_max < 1 {
            return Err(VemError::param("n_max must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(VemError::param(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

fn check_plan_inputs(traj: &Trajectory, v_hat: &ValueTable) -> Result<()> {
    if traj.is_empty() {
        return Err(VemError::param(format!("trajectory {} is empty", traj.episode_id)));
    }
    traj.check_against(v_hat.len(), usize::MAX)
}

/// Planned returns by one reverse sweep of the recursive form.
pub fn plan_returns_recursive(traj: &Trajectory, v_hat: &ValueTable, gamma: f64) -> Result<Vec<f64>> {
    check_plan_inputs(traj, v_hat)?;
    let n = traj.len();
    let mut out = vec![0.0; n];
    let last = traj.steps[n - 1];
    out[n - 1] = last.r + gamma * traj.tail_value(v_hat);
    for t in (0..n - 1).rev() {
        let st = traj.steps[t];
        out[t] = st.r + gamma * out[t + 1].max(v_hat[st.s_next]);
    }
    Ok(out)
}

/// Planned returns from the unrolled form: the best `n`-step bootstrapped
/// return over `1 ≤ n ≤ n_max`.
pub fn plan_returns_unrolled(traj: &Trajectory, v_hat: &ValueTable, cfg: &PlanningConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_plan_inputs(traj, v_hat)?;
    let n_max = cfg.n_max;
    let gamma = cfg.gamma;
    let len = traj.len();
    // `ahead[k]` holds the k-step estimate from the step after the current one.
    let mut ahead = vec![traj.tail_value(v_hat); n_max];
    let mut here = vec![0.0; n_max];
    let mut out = vec![0.0; len];
    for t in (0..len).rev() {
        let st = traj.steps[t];
        here[0] = v_hat[st.s];
        for k in 1..n_max {
            here[k] = st.r + gamma * ahead[k - 1];
        }
        let longest = st.r + gamma * ahead[n_max - 1];
        out[t] = here[1..]
            .iter()
            .copied()
            .fold(longest, f64::max);
        std::mem::swap(&mut ahead, &mut here);
    }
    Ok(out)
}

/// Result of one VEM operator application.
#[derive(Debug, Clone, PartialEq)]
pub struct VemOutput {
    pub values: ValueTable,
    /// Maximizing rollout length per state, 1-based; smallest on ties.
    pub n_star: Vec<usize>,
}

/// `(T_vem V)(s) = max_{1≤n≤n_max} ((T^μ)^{n−1} T^μ_τ V)(s)`.
pub fn vem_operator(
    v: &ValueTable,
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    op_cfg: &OperatorConfig,
    plan_cfg: &PlanningConfig,
) -> Result<VemOutput> {
    if op_cfg.kind != OperatorKind::ExpectileGradient {
        return Err(VemError::param("the VEM operator needs kind = expectile_gradient"));
    }
    op_cfg.validate()?;
    if plan_cfg.n_max < 1 {
        return Err(VemError::param("n_max must be at least 1"));
    }
    mdp.check_values(v)?;
    mu.check_against(mdp)?;
    Ok(vem_unchecked(v, mdp, mu, op_cfg.tau, op_cfg.alpha, plan_cfg.n_max))
}

pub(crate) fn vem_unchecked(
    v: &ValueTable,
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    tau: f64,
    alpha: f64,
    n_max: usize,
) -> VemOutput {
    let mut member = expectile_gradient_unchecked(v, mdp, mu, tau, alpha);
    let mut best = member.clone();
    let mut n_star = vec![1; mdp.n_states()];
    for n in 2..=n_max {
        member = crate::mdp::expectation_backup(mdp, mu, &member);
        for s in 0..mdp.n_states() {
            if member[s] > best[s] {
                best[s] = member[s];
                n_star[s] = n;
            }
        }
    }
    VemOutput {
        values: best,
        n_star,
    }
}

/// Offline dataset: trajectories plus a free-form provenance record.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub n_states: usize,
    pub n_actions: usize,
    pub source: BTreeMap<String, String>,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    n_states: usize,
    n_actions: usize,
    source: BTreeMap<String, String>,
}

impl OfflineDataset {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        source: BTreeMap<String, String>,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        let ds = OfflineDataset {
            n_states,
            n_actions,
            source,
            trajectories,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(VemError::param("dataset has no trajectories"));
        }
        for traj in &self.trajectories {
            traj.validate()?;
            traj.check_against(self.n_states, self.n_actions)?;
        }
        Ok(())
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn has_planned_returns(&self) -> bool {
        self.trajectories.iter().all(|t| t.planned_returns.is_some())
    }

    /// Longest stored trajectory.
    pub fn max_len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).max().unwrap_or(0)
    }

    /// Append another dataset's trajectories, renumbering their episode ids.
    pub fn merge(&mut self, other: OfflineDataset) -> Result<()> {
        check_dim("dataset states", self.n_states, other.n_states)?;
        check_dim("dataset actions", self.n_actions, other.n_actions)?;
        let offset = self.trajectories.iter().map(|t| t.episode_id + 1).max().unwrap_or(0);
        for (k, v) in other.source {
            self.source.entry(k).or_insert(v);
        }
        self.trajectories.extend(other.trajectories.into_iter().map(|mut t| {
            t.episode_id += offset;
            t
        }));
        Ok(())
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            version: FORMAT_VERSION,
            n_states: self.n_states,
            n_actions: self.n_actions,
            source: self.source.clone(),
        };
        let fmt = |e: serde_json::Error| VemError::Format(e.to_string());
        let io = |e: std::io::Error| VemError::Format(e.to_string());
        serde_json::to_writer(&mut out, &header).map_err(fmt)?;
        out.write_all(b"\n").map_err(io)?;
        for traj in &self.trajectories {
            serde_json::to_writer(&mut out, traj).map_err(fmt)?;
            out.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| VemError::Format("dataset file is empty".into()))?
            .map_err(|e| VemError::Format(e.to_string()))?;
        let header: DatasetHeader =
            serde_json::from_str(&header_line).map_err(|e| VemError::Format(format!("header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(VemError::Format(format!("not a dataset file: {}", header.format)));
        }
        if header.version != FORMAT_VERSION {
            return Err(VemError::Format(format!("unsupported dataset version {}", header.version)));
        }
        let mut trajectories = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| VemError::Format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let traj: Trajectory = serde_json::from_str(&line)
                .map_err(|e| VemError::Format(format!("line {}: {e}", i + 2)))?;
            trajectories.push(traj);
        }
        OfflineDataset::new(header.n_states, header.n_actions, header.source, trajectories)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| VemError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| VemError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| VemError::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

/// Recompute every trajectory's planned returns against each critic
/// (reverse sweep, unrolled form).
pub fn update_memory(
    dataset: &mut OfflineDataset,
    critics: [&ValueTable; N_CRITICS],
    cfg: &PlanningConfig,
) -> Result<()> {
    cfg.validate()?;
    for critic in critics {
        check_dim("critic", dataset.n_states, critic.len())?;
    }
    for traj in &mut dataset.trajectories {
        let first = plan_returns_unrolled(traj, critics[0], cfg)?;
        let second = plan_returns_unrolled(traj, critics[1], cfg)?;
        traj.planned_returns = Some([first, second]);
    }
    Ok(())
}

/// Roll out `episodes` trajectories of at most `max_len` steps under `mu`.
/// Episodes stop early when they enter a terminal state.
pub fn generate_dataset(
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    episodes: usize,
    max_len: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    mu.check_against(mdp)?;
    if episodes == 0 || max_len == 0 {
        return Err(VemError::param("episodes and max_len must be positive"));
    }
    if (0..mdp.n_states()).all(|s| mdp.initial_dist()[s] == 0.0 || mdp.is_terminal(s)) {
        return Err(VemError::param("every start state is terminal"));
    }
    let mut rng = rng_from_seed(seed);
    let start = WeightedIndex::new(mdp.initial_dist()).map_err(|e| VemError::param(e.to_string()))?;
    let rows: Vec<WeightedIndex<f64>> = (0..mdp.n_states())
        .map(|s| WeightedIndex::new(mu.row(s)).map_err(|e| VemError::param(e.to_string())))
        .collect::<Result<_>>()?;

    let mut trajectories = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut s = start.sample(&mut rng);
        while mdp.is_terminal(s) {
            s = start.sample(&mut rng);
        }
        let mut steps = Vec::with_capacity(max_len);
        let mut done = false;
        for _ in 0..max_len {
            let a = rows[s].sample(&mut rng);
            let s_next = mdp.next(s, a);
            steps.push(Transition {
                s,
                a,
                r: mdp.reward(s, a),
                s_next,
            });
            s = s_next;
            if mdp.is_terminal(s) {
                done = true;
                break;
            }
        }
        trajectories.push(Trajectory::new(ep as u64, steps, done)?);
    }
    let mut source = BTreeMap::new();
    source.insert("seed".to_string(), seed.to_string());
    source.insert("episodes".to_string(), episodes.to_string());
    source.insert("max_len".to_string(), max_len.to_string());
    OfflineDataset::new(mdp.n_states(), mdp.n_actions(), source, trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(states: &[usize], rewards: &[f64], done: bool) -> Trajectory {
        let steps = rewards
            .iter()
            .enumerate()
            .map(|(t, &r)| Transition {
                s: states[t],
                a: 0,
                r,
                s_next: states[t + 1],
            })
            .collect();
        Trajectory::new(0, steps, done).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn recursive_with_zero_values() {
        let traj = line(&[0, 1, 2, 3], &[0.0, 0.0, 1.0], true);
        let r = plan_returns_recursive(&traj, &ValueTable::zeros(4), 0.9).unwrap();
        assert!(close(&r, &[0.81, 0.9, 1.0]), "{r:?}");
    }

    #[test]
    fn recursive_switches_to_value_branch() {
        let traj = line(&[0, 2, 1], &[1.0, 0.0], true);
        let v = ValueTable::new(vec![0.0, 0.0, 5.0]);
        let r = plan_returns_recursive(&traj, &v, 0.9).unwrap();
        assert!(close(&r, &[5.5, 0.0]), "{r:?}");
    }

    #[test]
    fn unrolled_hand_enumerated() {
        let traj = line(&[0, 1, 2, 3], &[0.0, 0.0, 1.0], true);
        let cfg = PlanningConfig::new(2, 0.9).unwrap();
        let r = plan_returns_unrolled(&traj, &ValueTable::zeros(4), &cfg).unwrap();
        assert!(close(&r, &[0.0, 0.9, 1.0]), "{r:?}");
    }

    #[test]
    fn unrolled_one_step_is_backup() {
        let traj = line(&[0, 1, 2, 3], &[0.5, 0.2, 1.0], false);
        let v = ValueTable::new(vec![1.0, 2.0, 3.0, 4.0]);
        let cfg = PlanningConfig::new(1, 0.9).unwrap();
        let r = plan_returns_unrolled(&traj, &v, &cfg).unwrap();
        assert!(close(&r, &[0.5 + 0.9 * 2.0, 0.2 + 0.9 * 3.0, 1.0 + 0.9 * 4.0]));
    }

    #[test]
    fn truncated_end_bootstraps() {
        let traj = line(&[0, 1], &[1.0], false);
        let v = ValueTable::new(vec![0.0, 2.0]);
        let r = plan_returns_recursive(&traj, &v, 0.5).unwrap();
        assert!(close(&r, &[2.0]));
    }

    #[test]
    fn empty_trajectory_rejected() {
        assert!(Trajectory::new(0, vec![], true).is_err());
        let traj = Trajectory {
            episode_id: 0,
            steps: vec![],
            done: true,
            planned_returns: None,
        };
        assert!(plan_returns_recursive(&traj, &ValueTable::zeros(1), 0.9).is_err());
        assert!(PlanningConfig::new(0, 0.9).is_err());
    }

    #[test]
    fn broken_trajectory_rejected() {
        let steps = vec![
            Transition { s: 0, a: 0, r: 0.0, s_next: 1 },
            Transition { s: 2, a: 0, r: 0.0, s_next: 3 },
        ];
        assert!(Trajectory::new(0, steps, false).is_err());
    }

    #[test]
    fn identical_critics_give_identical_memory() {
        let mdp = crate::mdp::sparse_chain(6, 2, 0.9).unwrap();
        let mu = TabularPolicy::uniform(6, 2);
        let mut ds = generate_dataset(&mdp, &mu, 5, 12, 3).unwrap();
        let v = ValueTable::new(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.0]);
        update_memory(&mut ds, [&v, &v], &PlanningConfig::new(12, 0.9).unwrap()).unwrap();
        for t in &ds.trajectories {
            let [a, b] = t.planned_returns.as_ref().unwrap();
            assert_eq!(a, b);
        }
        let short = ValueTable::zeros(3);
        assert!(update_memory(&mut ds, [&v, &short], &PlanningConfig::new(12, 0.9).unwrap()).is_err());
    }

    #[test]
    fn large_critic_always_wins() {
        let mdp = crate::mdp::sparse_chain(6, 2, 0.9).unwrap();
        let mu = TabularPolicy::uniform(6, 2);
        let mut ds = generate_dataset(&mdp, &mu, 8, 10, 4).unwrap();
        let c = 100.0;
        let big = ValueTable::constant(6, c);
        let zero = ValueTable::zeros(6);
        update_memory(&mut ds, [&zero, &big], &PlanningConfig::new(10, 0.9).unwrap()).unwrap();
        for traj in &ds.trajectories {
            let planned = &traj.planned_returns.as_ref().unwrap()[1];
            for (t, st) in traj.steps.iter().enumerate() {
                let last_terminal = traj.done && t + 1 == traj.len();
                if !last_terminal {
                    assert!((planned[t] - (st.r + 0.9 * c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dataset_generation_is_seeded_and_stops_at_terminals() {
        let mdp = crate::mdp::sparse_chain(4, 2, 0.9).unwrap();
        let mu = TabularPolicy::deterministic(2, &[1, 1, 1, 1]).unwrap();
        let ds = generate_dataset(&mdp, &mu, 3, 50, 1).unwrap();
        assert_eq!(ds, generate_dataset(&mdp, &mu, 3, 50, 1).unwrap());
        for traj in &ds.trajectories {
            assert!(traj.done);
            assert_eq!(traj.len(), 3);
        }
    }

    #[test]
    fn vem_with_one_step_is_expectile_gradient() {
        let mdp = crate::mdp::generate_random_mdp(3, &Default::default()).unwrap();
        let mu = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
        let cfg = OperatorConfig::expectile_gradient(0.7);
        let v = ValueTable::new((0..mdp.n_states()).map(|s| s as f64 * 0.3).collect());
        let out = vem_operator(&v, &mdp, &mu, &cfg, &PlanningConfig::new(1, mdp.gamma()).unwrap()).unwrap();
        let direct = crate::operators::apply_expectile_gradient(&v, &mdp, &mu, &cfg).unwrap();
        assert_eq!(out.values, direct);
        assert!(out.n_star.iter().all(|&n| n == 1));
    }
}
