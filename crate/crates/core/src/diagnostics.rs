//! Operator diagnostics: empirical contraction rate, fixed-point bias and
//! update variance.
//!
//! * contraction: `max ‖T V₁ − T V₂‖∞ / ‖V₁ − V₂‖∞` over random pairs with
//!   entries uniform in `±value_scale`. Sampling can only under-report the
//!   supremum, so checking it against a theoretical bound stays sound.
//! * bias: `‖V_T − V*‖∞` where `V_T` is the operator's fixed point.
//! * variance: `E[‖T̂V − TV‖₂²]^{1/2}` where `T̂` applies the same operator
//!   with the behavior policy replaced by the empirical action frequencies of
//!   `k` resampled actions per state.

use rand::distributions::{Distribution, WeightedIndex};
use serde::Serialize;

use crate::error::{Result, VemError};
use crate::mdp::{solve_optimal_values, TabularMdp, TabularPolicy, ValueTable};
use crate::operators::{fixed_point, random_values};
use crate::seeding::{rng_from_seed, Rng};

/// Random pairs used for the contraction estimate.
pub const DEFAULT_PAIRS: usize = 1_000;
/// Entry scale of the random value tables in the contraction estimate.
pub const DEFAULT_VALUE_SCALE: f64 = 10.0;
/// Actions resampled per state for the stochastic operator.
pub const DEFAULT_SAMPLES_PER_STATE: usize = 1;

/// The three headline metrics plus the `n*` histogram for one operator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorDiagnostics {
    pub contraction_rate: f64,
    pub contraction_bound: f64,
    pub fixed_point_bias: f64,
    pub update_variance: f64,
    /// `n_star_histogram[n − 1]` counts states whose maximizing rollout is `n`.
    pub n_star_histogram: Vec<usize>,
}

/// Largest observed Lipschitz ratio of `op` in the sup norm over `n_pairs`
/// random pairs.
pub fn estimate_contraction(
    op: impl Fn(&ValueTable) -> ValueTable,
    n_states: usize,
    n_pairs: usize,
    value_scale: f64,
    seed: u64,
) -> Result<f64> {
    if n_pairs == 0 || !(value_scale > 0.0) {
        return Err(VemError::param("need at least one pair and a positive value scale"));
    }
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_pairs {
        let v1 = random_values(n_states, value_scale, &mut rng);
        let v2 = random_values(n_states, value_scale, &mut rng);
        let denom = v1.sup_distance(&v2);
        if denom == 0.0 {
            continue;
        }
        worst = worst.max(op(&v1).sup_distance(&op(&v2)) / denom);
    }
    Ok(worst)
}

/// Iterate `op` from zero to its fixed point and return `‖V_T − V*‖∞`.
///
/// `modulus` is the operator's contraction modulus (or an upper bound); the
/// iteration stops once the step is below `tol (1 − modulus)`, which puts
/// the iterate within `tol` of the fixed point.
pub fn measure_bias(
    op: impl FnMut(&ValueTable) -> ValueTable,
    mdp: &TabularMdp,
    modulus: f64,
    tol: f64,
) -> Result<f64> {
    let v_star = solve_optimal_values(mdp, tol.min(1e-10))?;
    let fp = fixed_point_within(op, mdp.n_states(), modulus, tol)?;
    Ok(fp.sup_distance(&v_star))
}

/// Fixed point of a contraction with known modulus, to within `tol`.
pub fn fixed_point_within(
    op: impl FnMut(&ValueTable) -> ValueTable,
    n_states: usize,
    modulus: f64,
    tol: f64,
) -> Result<ValueTable> {
    if !(modulus < 1.0) {
        return Err(VemError::param("fixed point needs a modulus below 1"));
    }
    let step_tol = (tol * (1.0 - modulus)).max(1e-15);
    let fp = fixed_point(op, ValueTable::zeros(n_states), step_tol, usize::MAX)?;
    Ok(fp.values)
}

/// Root-mean-square 2-norm deviation of stochastic applications from the
/// exact one at `v`. `stochastic` receives a fresh generator state for every
/// draw and must return one sampled application.
pub fn measure_variance(
    exact: impl Fn(&ValueTable) -> ValueTable,
    mut stochastic: impl FnMut(&ValueTable, &mut Rng) -> ValueTable,
    v: &ValueTable,
    n_draws: usize,
    seed: u64,
) -> Result<f64> {
    if n_draws == 0 {
        return Err(VemError::param("need at least one draw"));
    }
    let reference = exact(v);
    let mut rng = rng_from_seed(seed);
    let total: f64 = (0..n_draws)
        .map(|_| {
            let d = stochastic(v, &mut rng).l2_distance(&reference);
            d * d
        })
        .sum();
    Ok((total / n_draws as f64).sqrt())
}

/// Behavior policy replaced by the empirical frequencies of `k` actions
/// drawn from `mu` at every state.
pub fn empirical_policy(mu: &TabularPolicy, k: usize, rng: &mut Rng) -> Result<TabularPolicy> {
    if k == 0 {
        return Err(VemError::param("need at least one sample per state"));
    }
    let n_actions = mu.n_actions();
    let mut probs = vec![0.0; mu.n_states() * n_actions];
    for s in 0..mu.n_states() {
        let dist = WeightedIndex::new(mu.row(s)).map_err(|e| VemError::param(e.to_string()))?;
        for _ in 0..k {
            probs[s * n_actions + dist.sample(rng)] += 1.0;
        }
        for p in &mut probs[s * n_actions..(s + 1) * n_actions] {
            *p /= k as f64;
        }
    }
    // Row sums are exact up to rounding of c/k; renormalize to be safe.
    for row in probs.chunks_mut(n_actions) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= z);
    }
    TabularPolicy::new(mu.n_states(), n_actions, probs)
}

/// `n_star_histogram` from a per-state `n*` vector.
pub fn n_star_histogram(n_star: &[usize], n_max: usize) -> Vec<usize> {
    let mut hist = vec![0; n_max];
    for &n in n_star {
        hist[n - 1] += 1;
    }
    hist
}
