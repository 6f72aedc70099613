//! Value operators on deterministic tabular MDPs.
//!
//! Every operator maps a [`ValueTable`] to a new one. With the TD error
//! `δ(s,a) = r(s,a) + γV(s') − V(s)`:
//!
//! * expectation: `Σ_a μ(a|s) (r + γV(s'))`
//! * optimality: `max_a (r + γV(s'))`
//! * exact expectile: the τ-expectile of the μ-weighted backups at `s`
//! * gradient expectile: `V(s) + 2α Σ_a μ(a|s) (τ[δ]₊ + (1−τ)[δ]₋)`
//! * gradient quantile: `V(s) + 2α Σ_a μ(a|s) (τ·1{δ>0} − (1−τ)·1{δ<0})`,
//!   the subgradient step of the asymmetric absolute loss with unit step.
//!
//! `[x]₊ = max(x, 0)` and `[x]₋ = min(x, 0)`. A zero TD error falls in the
//! `[·]₋` branch, where it contributes nothing.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VemError};
use crate::mdp::{expectation_backup, optimality_backup, TabularMdp, TabularPolicy, ValueTable};
use crate::seeding::{rng_from_seed, Rng};

/// Bisection tolerance for the exact expectile.
pub const EXPECTILE_TOL: f64 = 1e-12;
/// Bisection iteration cap for the exact expectile.
pub const EXPECTILE_MAX_HALVINGS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Expectation,
    Optimality,
    ExpectileExact,
    ExpectileGradient,
    QuantileGradient,
}

impl OperatorKind {
    pub fn is_gradient(self) -> bool {
        matches!(self, OperatorKind::ExpectileGradient | OperatorKind::QuantileGradient)
    }

    pub fn uses_tau(self) -> bool {
        matches!(
            self,
            OperatorKind::ExpectileExact | OperatorKind::ExpectileGradient | OperatorKind::QuantileGradient
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    pub kind: OperatorKind,
    pub tau: f64,
    pub alpha: f64,
    /// Scale of the Gaussian noise added to each output entry; 0 is exact.
    pub noise_sigma: f64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig::expectile_gradient(0.7)
    }
}

impl OperatorConfig {
    /// Gradient-expectile config with α at its largest admissible value.
    pub fn expectile_gradient(tau: f64) -> Self {
        OperatorConfig {
            kind: OperatorKind::ExpectileGradient,
            tau,
            alpha: step_size_bound(tau),
            noise_sigma: 0.0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.uses_tau() && !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(VemError::param(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.kind.is_gradient() {
            check_step_size(self.tau, self.alpha)?;
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(VemError::param("noise_sigma must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Largest step size that keeps the gradient expectile update from
/// overshooting its backup: `1 / (2 max{τ, 1−τ})`.
pub fn step_size_bound(tau: f64) -> f64 {
    1.0 / (2.0 * tau.max(1.0 - tau))
}

/// Reject step sizes violating `2ατ ≤ 1` or `2α(1−τ) ≤ 1`.
pub fn check_step_size(tau: f64, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(VemError::param(format!("step size alpha must be positive, got {alpha}")));
    }
    let bound = step_size_bound(tau);
    if alpha > bound * (1.0 + 1e-12) {
        return Err(VemError::param(format!(
            "step size alpha = {alpha} violates 2ατ ≤ 1 and 2α(1−τ) ≤ 1 for tau = {tau} (bound {bound})"
        )));
    }
    Ok(())
}

/// Contraction modulus of the gradient expectile operator:
/// `γ_τ = 1 − 2α(1−γ) min{τ, 1−τ}`.
pub fn contraction_modulus(tau: f64, alpha: f64, gamma: f64) -> f64 {
    1.0 - 2.0 * alpha * (1.0 - gamma) * tau.min(1.0 - tau)
}

#[inline]
fn pos(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
fn neg(x: f64) -> f64 {
    if x > 0.0 {
        0.0
    } else {
        x
    }
}

#[inline]
fn td_error(mdp: &TabularMdp, v: &ValueTable, s: usize, a: usize) -> f64 {
    mdp.backup(v, s, a) - v[s]
}

fn check_inputs(v: &ValueTable, mdp: &TabularMdp, mu: Option<&TabularPolicy>) -> Result<()> {
    mdp.check_values(v)?;
    if let Some(mu) = mu {
        mu.check_against(mdp)?;
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(VemError::param(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

/// Per-state map `s -> V(s) + Σ_a μ(a|s) g(δ(s,a))`.
fn td_map(
    v: &ValueTable,
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    mut g: impl FnMut(f64) -> f64,
) -> ValueTable {
    (0..mdp.n_states())
        .map(|s| {
            let inc: f64 = mu
                .row(s)
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(a, p)| p * g(td_error(mdp, v, s, a)))
                .sum();
            v[s] + inc
        })
        .collect::<Vec<_>>()
        .into()
}

/// Bellman expectation operator under `μ`.
pub fn apply_expectation(v: &ValueTable, mdp: &TabularMdp, mu: &TabularPolicy) -> Result<ValueTable> {
    check_inputs(v, mdp, Some(mu))?;
    Ok(expectation_backup(mdp, mu, v))
}

/// Bellman optimality operator.
pub fn apply_optimality(v: &ValueTable, mdp: &TabularMdp) -> Result<ValueTable> {
    check_inputs(v, mdp, None)?;
    Ok(optimality_backup(mdp, v))
}

/// τ-expectile of a weighted sample: the root of
/// `τ Σ w (z − v)₊ = (1 − τ) Σ w (v − z)₊`, found by bisection on
/// `[min z, max z]`. Entries with non-positive weight are ignored.
pub fn weighted_expectile(values: &[f64], weights: &[f64], tau: f64) -> f64 {
    debug_assert_eq!(values.len(), weights.len());
    let support = || values.iter().zip(weights).filter(|(_, w)| **w > 0.0);
    let (mut lo, mut hi) = support().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (z, _)| {
        (lo.min(*z), hi.max(*z))
    });
    if lo >= hi {
        return lo;
    }
    let foc = |v: f64| -> f64 {
        support()
            .map(|(z, w)| w * (tau * pos(z - v) + (1.0 - tau) * neg(z - v)))
            .sum()
    };
    for _ in 0..EXPECTILE_MAX_HALVINGS {
        if hi - lo <= EXPECTILE_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if foc(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact Bellman expectile operator: the μ-weighted τ-expectile of the
/// one-step backups at each state.
pub fn apply_expectile_exact(
    v: &ValueTable,
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    tau: f64,
) -> Result<ValueTable> {
    check_tau(tau)?;
    check_inputs(v, mdp, Some(mu))?;
    let mut backups = vec![0.0; mdp.n_actions()];
    let out: Vec<f64> = (0..mdp.n_states())
        .map(|s| {
            for (a, b) in backups.iter_mut().enumerate() {
                *b = mdp.backup(v, s, a);
            }
            weighted_expectile(&backups, mu.row(s), tau)
        })
        .collect();
    Ok(out.into())
}

/// One-step gradient expectile operator (noise-free; see [`ValueOperator`]
/// for the noisy variant).
pub fn apply_expectile_gradient(
    v: &ValueTable,
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    cfg: &OperatorConfig,
) -> Result<ValueTable> {
    if cfg.kind != OperatorKind::ExpectileGradient {
        return Err(VemError::param("apply_expectile_gradient needs kind = expectile_gradient"));
    }
    cfg.validate()?;
    check_inputs(v, mdp, Some(mu))?;
    Ok(expectile_gradient_unchecked(v, mdp, mu, cfg.tau, cfg.alpha))
}

pub(crate) fn expectile_gradient_unchecked(
    v: &ValueTable,
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    tau: f64,
    alpha: f64,
) -> ValueTable {
    td_map(v, mdp, mu, |d| 2.0 * alpha * (tau * pos(d) + (1.0 - tau) * neg(d)))
}

/// Subgradient step of the asymmetric absolute (quantile) loss.
pub fn apply_quantile_gradient(
    v: &ValueTable,
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    cfg: &OperatorConfig,
) -> Result<ValueTable> {
    if cfg.kind != OperatorKind::QuantileGradient {
        return Err(VemError::param("apply_quantile_gradient needs kind = quantile_gradient"));
    }
    cfg.validate()?;
    check_inputs(v, mdp, Some(mu))?;
    let (tau, alpha) = (cfg.tau, cfg.alpha);
    Ok(td_map(v, mdp, mu, |d| {
        let step = if d > 0.0 {
            tau
        } else if d < 0.0 {
            -(1.0 - tau)
        } else {
            0.0
        };
        2.0 * alpha * step
    }))
}

/// `T₊V(s) = V(s) + Σ_a μ(a|s) [δ(s,a)]₊`.
pub fn apply_positive_part(v: &ValueTable, mdp: &TabularMdp, mu: &TabularPolicy) -> Result<ValueTable> {
    check_inputs(v, mdp, Some(mu))?;
    Ok(td_map(v, mdp, mu, pos))
}

/// `T₋V(s) = V(s) + Σ_a μ(a|s) [δ(s,a)]₋`.
pub fn apply_negative_part(v: &ValueTable, mdp: &TabularMdp, mu: &TabularPolicy) -> Result<ValueTable> {
    check_inputs(v, mdp, Some(mu))?;
    Ok(td_map(v, mdp, mu, neg))
}

/// Noise scale used when none is given: a tenth of the reward range.
pub fn default_noise_sigma(reward_low: f64, reward_high: f64) -> f64 {
    0.1 * (reward_high - reward_low)
}

/// Add i.i.d. `N(0, sigma²)` noise to every entry.
pub fn add_gaussian_noise(v: &mut ValueTable, sigma: f64, rng: &mut Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    for x in v.as_mut_slice() {
        *x += normal.sample(rng);
    }
}

/// A configured operator bound to an MDP and behavior policy. Noise, when
/// enabled, is drawn after the exact operator from a seeded stream, fresh
/// on every application.
pub struct ValueOperator<'a> {
    mdp: &'a TabularMdp,
    mu: &'a TabularPolicy,
    cfg: OperatorConfig,
    rng: Rng,
}

impl<'a> ValueOperator<'a> {
    pub fn new(mdp: &'a TabularMdp, mu: &'a TabularPolicy, cfg: OperatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        mu.check_against(mdp)?;
        Ok(ValueOperator {
            mdp,
            mu,
            cfg,
            rng: rng_from_seed(seed),
        })
    }

    pub fn config(&self) -> &OperatorConfig {
        &self.cfg
    }

    /// Apply the exact operator, ignoring any configured noise.
    pub fn apply_exact(&self, v: &ValueTable) -> ValueTable {
        let (mdp, mu) = (self.mdp, self.mu);
        match self.cfg.kind {
            OperatorKind::Expectation => expectation_backup(mdp, mu, v),
            OperatorKind::Optimality => optimality_backup(mdp, v),
            OperatorKind::ExpectileExact => {
                apply_expectile_exact(v, mdp, mu, self.cfg.tau).expect("validated at construction")
            }
            OperatorKind::ExpectileGradient => {
                expectile_gradient_unchecked(v, mdp, mu, self.cfg.tau, self.cfg.alpha)
            }
            OperatorKind::QuantileGradient => {
                apply_quantile_gradient(v, mdp, mu, &self.cfg).expect("validated at construction")
            }
        }
    }

    pub fn apply(&mut self, v: &ValueTable) -> ValueTable {
        let mut out = self.apply_exact(v);
        add_gaussian_noise(&mut out, self.cfg.noise_sigma, &mut self.rng);
        out
    }
}

/// Outcome of [`fixed_point`].
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub values: ValueTable,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterate `op` from `v0` until `‖V_{k+1} − V_k‖∞ ≤ tol` or `max_iters`
/// applications. Non-convergence is reported through the flag.
pub fn fixed_point(
    mut op: impl FnMut(&ValueTable) -> ValueTable,
    v0: ValueTable,
    tol: f64,
    max_iters: usize,
) -> Result<FixedPoint> {
    if !(tol > 0.0) {
        return Err(VemError::param("tol must be positive"));
    }
    let mut v = v0;
    for k in 1..=max_iters {
        let next = op(&v);
        let step = next.sup_distance(&v);
        v = next;
        if step <= tol {
            return Ok(FixedPoint {
                values: v,
                iterations: k,
                converged: true,
            });
        }
    }
    Ok(FixedPoint {
        values: v,
        iterations: max_iters,
        converged: false,
    })
}

/// Fixed point of the gradient expectile operator. Iterates until the step
/// drops below `tol · (1 − γ_τ)`, which bounds the distance to the true
/// fixed point by `tol`.
pub fn expectile_fixed_point(
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    tau: f64,
    alpha: f64,
    tol: f64,
) -> Result<ValueTable> {
    let cfg = OperatorConfig::expectile_gradient(tau).with_alpha(alpha);
    cfg.validate()?;
    mu.check_against(mdp)?;
    let modulus = contraction_modulus(tau, alpha, mdp.gamma());
    let step_tol = (tol * (1.0 - modulus)).max(f64::EPSILON);
    let fp = fixed_point(
        |v| expectile_gradient_unchecked(v, mdp, mu, tau, alpha),
        ValueTable::zeros(mdp.n_states()),
        step_tol,
        usize::MAX,
    )?;
    Ok(fp.values)
}

/// Value table with entries drawn uniformly from `[-scale, scale]`.
pub fn random_values(n_states: usize, scale: f64, rng: &mut Rng) -> ValueTable {
    (0..n_states)
        .map(|_| rng.gen_range(-scale..=scale))
        .collect::<Vec<_>>()
        .into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_random_mdp, solve_behavior_values, RandomMdpParams};

    fn one_state(r: f64, gamma: f64) -> (TabularMdp, TabularPolicy) {
        let mdp = TabularMdp::new(1, 1, vec![0], vec![r], gamma, vec![1.0], vec![false]).unwrap();
        (mdp, TabularPolicy::uniform(1, 1))
    }

    /// One state, two actions whose backups are exactly `z0` and `z1` when V = 0.
    fn two_backups(z0: f64, z1: f64) -> (TabularMdp, TabularPolicy) {
        let mdp = TabularMdp::new(1, 2, vec![0, 0], vec![z0, z1], 0.0, vec![1.0], vec![false]).unwrap();
        (mdp, TabularPolicy::uniform(1, 2))
    }

    #[test]
    fn modulus_matches_lemma_value() {
        assert!((contraction_modulus(0.5, 0.5, 0.9) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn step_size_bound_is_enforced() {
        assert!(check_step_size(0.9, 1.0 / 1.8).is_ok());
        let err = check_step_size(0.9, 0.6).unwrap_err().to_string();
        assert!(err.contains("2ατ ≤ 1"), "{err}");
        assert!(OperatorConfig::expectile_gradient(1.0).validate().is_err());
        assert!(OperatorConfig::expectile_gradient(0.0).validate().is_err());
    }

    #[test]
    fn expectile_gradient_single_term() {
        let (mdp, mu) = one_state(1.0, 0.0);
        let cfg = OperatorConfig::expectile_gradient(0.9).with_alpha(0.5);
        let out = apply_expectile_gradient(&ValueTable::zeros(1), &mdp, &mu, &cfg).unwrap();
        assert!((out[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn quantile_gradient_single_term() {
        let (mdp, mu) = one_state(1.0, 0.0);
        let cfg = OperatorConfig {
            kind: OperatorKind::QuantileGradient,
            tau: 0.9,
            alpha: 0.5,
            noise_sigma: 0.0,
        };
        let v = ValueTable::new(vec![0.0]);
        let out = apply_quantile_gradient(&v, &mdp, &mu, &cfg).unwrap();
        assert!((out[0] - 0.9).abs() < 1e-15);
        // zero TD error everywhere: backup equals V
        let (mdp0, mu0) = one_state(0.0, 0.0);
        let out0 = apply_quantile_gradient(&v, &mdp0, &mu0, &cfg).unwrap();
        assert_eq!(out0, v);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let (mdp, mu) = one_state(1.0, 0.5);
        let cfg = OperatorConfig::expectile_gradient(0.5);
        assert!(apply_quantile_gradient(&ValueTable::zeros(1), &mdp, &mu, &cfg).is_err());
    }

    #[test]
    fn expectile_exact_two_point() {
        let (mdp, mu) = two_backups(0.0, 1.0);
        let v = ValueTable::zeros(1);
        let half = apply_expectile_exact(&v, &mdp, &mu, 0.5).unwrap();
        assert!((half[0] - 0.5).abs() < 1e-11);
        // For {0, 1} with equal weights the FOC τ(1 − v) = (1 − τ)v gives v = τ.
        let high = apply_expectile_exact(&v, &mdp, &mu, 0.9).unwrap();
        assert!((high[0] - 0.9).abs() < 1e-11);
        assert!(apply_expectile_exact(&v, &mdp, &mu, 1.0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (mdp, mu) = two_backups(0.0, 1.0);
        let err = apply_expectation(&ValueTable::zeros(3), &mdp, &mu).unwrap_err();
        assert!(matches!(err, VemError::Dimension { .. }));
    }

    #[test]
    fn fixed_point_edge_cases() {
        let v0 = ValueTable::new(vec![1.0, 2.0]);
        let id = fixed_point(|v| v.clone(), v0.clone(), 1e-9, 10).unwrap();
        assert_eq!(id.iterations, 1);
        assert!(id.converged);
        let none = fixed_point(|v| v.clone(), v0.clone(), 1e-9, 0).unwrap();
        assert_eq!(none.values, v0);
        assert!(!none.converged);
        assert!(fixed_point(|v| v.clone(), v0, 0.0, 1).is_err());
    }

    #[test]
    fn noisy_operator_is_seeded() {
        let mdp = generate_random_mdp(2, &RandomMdpParams::default()).unwrap();
        let mu = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
        let cfg = OperatorConfig::expectile_gradient(0.7).with_noise(0.1);
        let v = ValueTable::zeros(mdp.n_states());
        let mut a = ValueOperator::new(&mdp, &mu, cfg, 5).unwrap();
        let mut b = ValueOperator::new(&mdp, &mu, cfg, 5).unwrap();
        let (xa, xb) = (a.apply(&v), b.apply(&v));
        assert_eq!(xa, xb);
        assert_ne!(xa, a.apply_exact(&v));
    }

    #[test]
    fn half_tau_fixed_point_is_behavior_value() {
        let mdp = generate_random_mdp(4, &RandomMdpParams::default()).unwrap();
        let mu = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
        let v_mu = solve_behavior_values(&mdp, &mu, 1e-12).unwrap();
        let fp = expectile_fixed_point(&mdp, &mu, 0.5, 1.0, 1e-10).unwrap();
        assert!(fp.sup_distance(&v_mu) < 1e-9);
    }
}
