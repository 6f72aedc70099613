//! Deterministic tabular MDPs, random generation and exact solvers.
//!
//! Transitions are stored as a dense `state x action -> next state` table.
//! The exact solvers in here are the ground truth that every other module is
//! checked against.

use std::ops::{Index, IndexMut};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, VemError};
use crate::seeding::rng_from_seed;

/// Default tolerance for the exact solvers.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Tolerance for probability vectors summing to one.
pub const PROB_TOL: f64 = 1e-12;

const MAX_SOLVER_ITERS: usize = 10_000_000;

/// A real value per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueTable(Vec<f64>);

impl ValueTable {
    pub fn new(values: Vec<f64>) -> Self {
        ValueTable(values)
    }

    pub fn zeros(n_states: usize) -> Self {
        ValueTable(vec![0.0; n_states])
    }

    pub fn constant(n_states: usize, value: f64) -> Self {
        ValueTable(vec![value; n_states])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// `‖self − other‖∞`.
    pub fn sup_distance(&self, other: &ValueTable) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    /// `‖self − other‖₂`.
    pub fn l2_distance(&self, other: &ValueTable) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Index<usize> for ValueTable {
    type Output = f64;

    fn index(&self, s: usize) -> &f64 {
        &self.0[s]
    }
}

impl IndexMut<usize> for ValueTable {
    fn index_mut(&mut self, s: usize) -> &mut f64 {
        &mut self.0[s]
    }
}

impl From<Vec<f64>> for ValueTable {
    fn from(v: Vec<f64>) -> Self {
        ValueTable(v)
    }
}

/// Stochastic policy: one action distribution per state, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        let policy = TabularPolicy {
            n_states,
            n_actions,
            probs,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Deterministic policy picking `actions[s]` at state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(VemError::param(format!(
                    "action {a} out of range at state {s}"
                )));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(TabularPolicy {
            n_states: actions.len(),
            n_actions,
            probs,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(VemError::param("policy needs at least one state and action"));
        }
        check_dim("policy table", self.n_states * self.n_actions, self.probs.len())?;
        for s in 0..self.n_states {
            let row = self.row(s);
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(VemError::param(format!("negative or non-finite probability at state {s}")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(VemError::param(format!(
                    "policy row {s} sums to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Most probable action per state; lowest index on ties.
    pub fn argmax_actions(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| argmax(self.row(s))).collect()
    }

    pub(crate) fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        check_dim("policy states", mdp.n_states(), self.n_states)?;
        check_dim("policy actions", mdp.n_actions(), self.n_actions)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PolicyDocument {
            format: POLICY_FORMAT.to_string(),
            version: FORMAT_VERSION,
            policy: self.clone(),
        })
        .expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolicyDocument =
            serde_json::from_str(text).map_err(|e| VemError::Format(e.to_string()))?;
        check_header(&doc.format, POLICY_FORMAT, doc.version)?;
        doc.policy.validate()?;
        Ok(doc.policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| VemError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VemError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Deterministic finite MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    next_state: Vec<usize>,
    reward: Vec<f64>,
    gamma: f64,
    initial_dist: Vec<f64>,
    terminal_mask: Vec<bool>,
    /// Generator seed, when the MDP came from [`generate_random_mdp`].
    seed: Option<u64>,
}

impl TabularMdp {
    /// Build and validate an MDP from row-major `state x action` tables.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        next_state: Vec<usize>,
        reward: Vec<f64>,
        gamma: f64,
        initial_dist: Vec<f64>,
        terminal_mask: Vec<bool>,
    ) -> Result<Self> {
        let mdp = TabularMdp {
            n_states,
            n_actions,
            next_state,
            reward,
            gamma,
            initial_dist,
            terminal_mask,
            seed: None,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(VemError::param("MDP needs at least one state and one action"));
        }
        let pairs = self.n_states * self.n_actions;
        check_dim("next_state table", pairs, self.next_state.len())?;
        check_dim("reward table", pairs, self.reward.len())?;
        check_dim("initial_dist", self.n_states, self.initial_dist.len())?;
        check_dim("terminal_mask", self.n_states, self.terminal_mask.len())?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(VemError::param(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if let Some(bad) = self.next_state.iter().find(|&&s| s >= self.n_states) {
            return Err(VemError::param(format!("next state {bad} out of range")));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(VemError::param("rewards must be finite"));
        }
        if self.initial_dist.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(VemError::param("initial_dist entries must be non-negative"));
        }
        let total: f64 = self.initial_dist.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(VemError::param(format!("initial_dist sums to {total}, expected 1")));
        }
        for s in (0..self.n_states).filter(|&s| self.terminal_mask[s]) {
            for a in 0..self.n_actions {
                if self.next(s, a) != s || self.reward(s, a) != 0.0 {
                    return Err(VemError::param(format!(
                        "terminal state {s} must self-loop with zero reward"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    #[inline]
    pub fn next(&self, s: usize, a: usize) -> usize {
        self.next_state[s * self.n_actions + a]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn next_states(&self) -> &[usize] {
        &self.next_state
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal_mask[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal_mask
    }

    /// Largest reward in the table.
    pub fn reward_max(&self) -> f64 {
        self.reward.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn reward_min(&self) -> f64 {
        self.reward.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Return a copy with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut out = self.clone();
        out.gamma = gamma;
        out.validate()?;
        Ok(out)
    }

    /// Return a copy with a different start distribution.
    pub fn with_initial_dist(&self, initial_dist: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.initial_dist = initial_dist;
        out.validate()?;
        Ok(out)
    }

    /// One-step backup `r(s,a) + γ V(s')`.
    #[inline]
    pub fn backup(&self, v: &ValueTable, s: usize, a: usize) -> f64 {
        self.reward(s, a) + self.gamma * v[self.next(s, a)]
    }

    /// `Q(s,a) = r(s,a) + γ V(s')` for every pair, row-major.
    pub fn q_values(&self, v: &ValueTable) -> Vec<f64> {
        let mut q = Vec::with_capacity(self.n_states * self.n_actions);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                q.push(self.backup(v, s, a));
            }
        }
        q
    }

    pub(crate) fn check_values(&self, v: &ValueTable) -> Result<()> {
        check_dim("value table", self.n_states, v.len())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MdpDocument::from(self)).expect("MDP serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument =
            serde_json::from_str(text).map_err(|e| VemError::Format(e.to_string()))?;
        check_header(&doc.format, MDP_FORMAT, doc.version)?;
        let mut mdp = TabularMdp::new(
            doc.n_states,
            doc.n_actions,
            doc.next_state,
            doc.reward,
            doc.gamma,
            doc.initial_dist,
            doc.terminal_mask,
        )?;
        mdp.seed = doc.seed;
        Ok(mdp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| VemError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VemError::io(path, e))?;
        Self::from_json(&text)
    }
}

pub const FORMAT_VERSION: u32 = 1;
const MDP_FORMAT: &str = "vem-mdp";
const POLICY_FORMAT: &str = "vem-policy";

fn check_header(found: &str, expected: &str, version: u32) -> Result<()> {
    if found != expected {
        return Err(VemError::Format(format!("expected a {expected} document, found {found}")));
    }
    if version != FORMAT_VERSION {
        return Err(VemError::Format(format!(
            "unsupported {expected} version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

/// On-disk layout of an MDP. Tables are row-major over `(state, action)`.
#[derive(Debug, Serialize, Deserialize)]
struct MdpDocument {
    format: String,
    version: u32,
    seed: Option<u64>,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    next_state: Vec<usize>,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    terminal_mask: Vec<bool>,
}

impl From<&TabularMdp> for MdpDocument {
    fn from(m: &TabularMdp) -> Self {
        MdpDocument {
            format: MDP_FORMAT.to_string(),
            version: FORMAT_VERSION,
            seed: m.seed,
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            next_state: m.next_state.clone(),
            reward: m.reward.clone(),
            initial_dist: m.initial_dist.clone(),
            terminal_mask: m.terminal_mask.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyDocument {
    format: String,
    version: u32,
    policy: TabularPolicy,
}

/// Parameters for [`generate_random_mdp`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomMdpParams {
    pub n_states: usize,
    pub n_actions: usize,
    pub reward_low: f64,
    pub reward_high: f64,
    pub gamma: f64,
    /// Number of absorbing terminal states (chosen at random).
    pub n_terminals: usize,
}

impl Default for RandomMdpParams {
    fn default() -> Self {
        RandomMdpParams {
            n_states: 10,
            n_actions: 3,
            reward_low: 0.0,
            reward_high: 1.0,
            gamma: 0.9,
            n_terminals: 0,
        }
    }
}

impl RandomMdpParams {
    pub fn new(n_states: usize, n_actions: usize, reward_low: f64, reward_high: f64) -> Self {
        RandomMdpParams {
            n_states,
            n_actions,
            reward_low,
            reward_high,
            ..Default::default()
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }
}

/// Draw a random deterministic MDP. Next states and rewards are uniform; the
/// start distribution is uniform over non-terminal states.
pub fn generate_random_mdp(seed: u64, params: &RandomMdpParams) -> Result<TabularMdp> {
    let RandomMdpParams {
        n_states,
        n_actions,
        reward_low,
        reward_high,
        gamma,
        n_terminals,
    } = *params;
    if n_states < 2 {
        return Err(VemError::param(format!("n_states must be at least 2, got {n_states}")));
    }
    if n_actions < 2 {
        return Err(VemError::param(format!("n_actions must be at least 2, got {n_actions}")));
    }
    if !(reward_low < reward_high) {
        return Err(VemError::param(format!(
            "reward range [{reward_low}, {reward_high}] is empty"
        )));
    }
    if n_terminals >= n_states {
        return Err(VemError::param("at least one state must be non-terminal"));
    }

    let mut rng = rng_from_seed(seed);
    let pairs = n_states * n_actions;
    let next_state: Vec<usize> = (0..pairs).map(|_| rng.gen_range(0..n_states)).collect();
    let reward: Vec<f64> = (0..pairs)
        .map(|_| rng.gen_range(reward_low..=reward_high))
        .collect();

    let mut terminal_mask = vec![false; n_states];
    if n_terminals > 0 {
        let picked = rand::seq::index::sample(&mut rng, n_states, n_terminals);
        for s in picked.iter() {
            terminal_mask[s] = true;
        }
    }
    let mut mdp = TabularMdp {
        n_states,
        n_actions,
        next_state,
        reward,
        gamma,
        initial_dist: vec![0.0; n_states],
        terminal_mask,
        seed: Some(seed),
    };
    for s in (0..n_states).filter(|&s| mdp.terminal_mask[s]) {
        for a in 0..n_actions {
            mdp.next_state[s * n_actions + a] = s;
            mdp.reward[s * n_actions + a] = 0.0;
        }
    }
    let live = n_states - n_terminals;
    for s in 0..n_states {
        if !mdp.terminal_mask[s] {
            mdp.initial_dist[s] = 1.0 / live as f64;
        }
    }
    mdp.validate()?;
    Ok(mdp)
}

/// Sparse-reward chain: states `0..n`, action 0 moves left, action 1 moves
/// right, any further actions stay put. Entering the last state pays 1 and
/// ends the episode; every other transition pays 0. Episodes start at state 0.
pub fn sparse_chain(n_states: usize, n_actions: usize, gamma: f64) -> Result<TabularMdp> {
    if n_states < 2 || n_actions < 2 {
        return Err(VemError::param("a chain needs at least 2 states and 2 actions"));
    }
    let goal = n_states - 1;
    let mut next_state = Vec::with_capacity(n_states * n_actions);
    let mut reward = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        for a in 0..n_actions {
            let s_next = if s == goal {
                goal
            } else {
                match a {
                    0 => s.saturating_sub(1),
                    1 => s + 1,
                    _ => s,
                }
            };
            next_state.push(s_next);
            reward.push(if s != goal && s_next == goal { 1.0 } else { 0.0 });
        }
    }
    let mut initial_dist = vec![0.0; n_states];
    initial_dist[0] = 1.0;
    let mut terminal_mask = vec![false; n_states];
    terminal_mask[goal] = true;
    TabularMdp::new(n_states, n_actions, next_state, reward, gamma, initial_dist, terminal_mask)
}

/// `V*` by value iteration, to within `tol` in the sup norm.
pub fn solve_optimal_values(mdp: &TabularMdp, tol: f64) -> Result<ValueTable> {
    if !(tol > 0.0) {
        return Err(VemError::param("tol must be positive"));
    }
    Ok(iterate_until(ValueTable::zeros(mdp.n_states()), tol * (1.0 - mdp.gamma()), |v| {
        optimality_backup(mdp, v)
    }))
}

/// `V^μ` by iterative policy evaluation, to within `tol` in the sup norm.
pub fn solve_behavior_values(mdp: &TabularMdp, mu: &TabularPolicy, tol: f64) -> Result<ValueTable> {
    if !(tol > 0.0) {
        return Err(VemError::param("tol must be positive"));
    }
    mu.check_against(mdp)?;
    Ok(iterate_until(ValueTable::zeros(mdp.n_states()), tol * (1.0 - mdp.gamma()), |v| {
        expectation_backup(mdp, mu, v)
    }))
}

/// `Q*(s,a) = r(s,a) + γ V*(s')`, row-major.
pub fn optimal_q_values(mdp: &TabularMdp, tol: f64) -> Result<Vec<f64>> {
    Ok(mdp.q_values(&solve_optimal_values(mdp, tol)?))
}

/// Greedy deterministic policy with respect to `V`.
pub fn greedy_policy(mdp: &TabularMdp, v: &ValueTable) -> TabularPolicy {
    let q = mdp.q_values(v);
    let n = mdp.n_actions();
    let actions: Vec<usize> = q.chunks(n).map(argmax).collect();
    TabularPolicy::deterministic(n, &actions).expect("argmax is in range")
}

/// `μ(a|s) ∝ exp(Q*(s,a) / temperature)`.
pub fn softmax_behavior_policy(mdp: &TabularMdp, temperature: f64) -> Result<TabularPolicy> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(VemError::param(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let q = optimal_q_values(mdp, DEFAULT_TOL)?;
    let n = mdp.n_actions();
    let mut probs = Vec::with_capacity(q.len());
    for row in q.chunks(n) {
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| ((x - top) / temperature).exp()).collect();
        let z: f64 = exps.iter().sum();
        probs.extend(exps.iter().map(|e| e / z));
    }
    TabularPolicy::new(mdp.n_states(), n, probs)
}

pub(crate) fn optimality_backup(mdp: &TabularMdp, v: &ValueTable) -> ValueTable {
    (0..mdp.n_states())
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| mdp.backup(v, s, a))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect::<Vec<_>>()
        .into()
}

pub(crate) fn expectation_backup(mdp: &TabularMdp, mu: &TabularPolicy, v: &ValueTable) -> ValueTable {
    (0..mdp.n_states())
        .map(|s| {
            mu.row(s)
                .iter()
                .enumerate()
                .map(|(a, p)| p * mdp.backup(v, s, a))
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into()
}

fn iterate_until(mut v: ValueTable, tol: f64, mut op: impl FnMut(&ValueTable) -> ValueTable) -> ValueTable {
    for _ in 0..MAX_SOLVER_ITERS {
        let next = op(&v);
        let step = next.sup_distance(&v);
        let floor = 4.0 * f64::EPSILON * next.sup_norm().max(1.0);
        v = next;
        if step <= tol.max(floor) {
            break;
        }
    }
    v
}
