//! Advantage-weighted policy extraction and exact policy evaluation.
//!
//! Advantages come from the twin-critic memory:
//! `Â(s_t, a_t) = min_i R̂_t^{(i)} − mean_i V_i(s_t)`.
//! Weights are either the leaky form (`Â` if positive, `Â / scale`
//! otherwise) or a softmax of `Â / scale` over the whole record set. The
//! tabular maximizer of the weighted log-likelihood is
//! `π(a|s) ∝ Σ max(weight, 0)` over records at `(s, a)`; states with no
//! positive weight fall back to uniform.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, VemError};
use crate::mdp::{solve_behavior_values, TabularMdp, TabularPolicy, ValueTable};
use crate::memory::{OfflineDataset, N_CRITICS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingKind {
    LeakyRelu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightingFn {
    pub kind: WeightingKind,
    pub scale: f64,
}

impl Default for WeightingFn {
    fn default() -> Self {
        WeightingFn::softmax(0.01)
    }
}

impl WeightingFn {
    pub fn leaky_relu(scale: f64) -> Self {
        WeightingFn {
            kind: WeightingKind::LeakyRelu,
            scale,
        }
    }

    pub fn softmax(scale: f64) -> Self {
        WeightingFn {
            kind: WeightingKind::Softmax,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(VemError::param(format!("weighting scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Unnormalized weight of a single advantage. For softmax this is
    /// `exp(Â / scale)` before normalization over the batch.
    pub fn raw(&self, advantage: f64) -> f64 {
        match self.kind {
            WeightingKind::LeakyRelu => {
                if advantage > 0.0 {
                    advantage
                } else {
                    advantage / self.scale
                }
            }
            WeightingKind::Softmax => (advantage / self.scale).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub s: usize,
    pub a: usize,
    pub advantage: f64,
    pub weight: f64,
}

/// One record per stored transition. Weights start at zero.
pub fn compute_advantages(
    dataset: &OfflineDataset,
    critics: [&ValueTable; N_CRITICS],
) -> Result<Vec<AdvantageRecord>> {
    for c in critics {
        check_dim("critic", dataset.n_states, c.len())?;
    }
    let mut out = Vec::with_capacity(dataset.n_transitions());
    for traj in &dataset.trajectories {
        let planned = traj.planned_returns.as_ref().ok_or_else(|| {
            VemError::State(format!(
                "trajectory {} has no planned returns; run update_memory first",
                traj.episode_id
            ))
        })?;
        for (t, st) in traj.steps.iter().enumerate() {
            let target = planned.iter().map(|p| p[t]).fold(f64::INFINITY, f64::min);
            let baseline = critics.iter().map(|c| c[st.s]).sum::<f64>() / N_CRITICS as f64;
            out.push(AdvantageRecord {
                s: st.s,
                a: st.a,
                advantage: target - baseline,
                weight: 0.0,
            });
        }
    }
    Ok(out)
}

/// Fill in `weight = f(Â)`. Leaky weights keep their raw (possibly
/// negative) value; softmax weights are normalized over `records`.
pub fn apply_weighting(records: &[AdvantageRecord], f: &WeightingFn) -> Result<Vec<AdvantageRecord>> {
    f.validate()?;
    match f.kind {
        WeightingKind::LeakyRelu => Ok(records
            .iter()
            .map(|r| AdvantageRecord {
                weight: f.raw(r.advantage),
                ..*r
            })
            .collect()),
        WeightingKind::Softmax => {
            if records.is_empty() {
                return Err(VemError::param("softmax weighting needs a non-empty batch"));
            }
            let top = records.iter().map(|r| r.advantage).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = records.iter().map(|r| ((r.advantage - top) / f.scale).exp()).collect();
            let z: f64 = exps.iter().sum();
            Ok(records
                .iter()
                .zip(exps)
                .map(|(r, e)| AdvantageRecord { weight: e / z, ..*r })
                .collect())
        }
    }
}

/// Closed-form weighted maximum-likelihood tabular policy.
pub fn fit_policy(records: &[AdvantageRecord], n_states: usize, n_actions: usize) -> Result<TabularPolicy> {
    if records.is_empty() {
        return Err(VemError::param("cannot fit a policy without records"));
    }
    let mut mass = vec![0.0; n_states * n_actions];
    for r in records {
        if r.s >= n_states || r.a >= n_actions {
            return Err(VemError::param(format!("record ({}, {}) out of range", r.s, r.a)));
        }
        if !r.weight.is_finite() {
            return Err(VemError::param("record weight is not finite"));
        }
        mass[r.s * n_actions + r.a] += r.weight.max(0.0);
    }
    for row in mass.chunks_mut(n_actions) {
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            row.iter_mut().for_each(|p| *p /= z);
        } else {
            row.fill(1.0 / n_actions as f64);
        }
    }
    TabularPolicy::new(n_states, n_actions, mass)
}

/// `J(π) = Σ_s ρ₀(s) V^π(s)`.
pub fn evaluate_policy(mdp: &TabularMdp, pi: &TabularPolicy, tol: f64) -> Result<f64> {
    let v = solve_behavior_values(mdp, pi, tol)?;
    Ok(mdp
        .initial_dist()
        .iter()
        .zip(v.iter())
        .map(|(p, v)| p * v)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{Trajectory, Transition};
    use std::collections::BTreeMap;

    fn rec(s: usize, a: usize, advantage: f64, weight: f64) -> AdvantageRecord {
        AdvantageRecord { s, a, advantage, weight }
    }

    #[test]
    fn leaky_weights() {
        let out = apply_weighting(&[rec(0, 0, 2.0, 0.0), rec(0, 1, -2.0, 0.0)], &WeightingFn::leaky_relu(4.0)).unwrap();
        assert_eq!(out[0].weight, 2.0);
        assert_eq!(out[1].weight, -0.5);
        let zero = apply_weighting(&[rec(0, 0, 0.0, 0.0)], &WeightingFn::leaky_relu(4.0)).unwrap();
        assert_eq!(zero[0].weight, 0.0);
    }

    #[test]
    fn softmax_weights() {
        let out = apply_weighting(&[rec(0, 0, 1.0, 0.0), rec(0, 1, 0.0, 0.0)], &WeightingFn::softmax(1.0)).unwrap();
        let e = std::f64::consts::E;
        assert!((out[0].weight - e / (e + 1.0)).abs() < 1e-15);
        assert!((out[1].weight - 1.0 / (e + 1.0)).abs() < 1e-15);
        let flat = apply_weighting(&[rec(0, 0, 0.0, 0.0); 4], &WeightingFn::softmax(1.0)).unwrap();
        assert!(flat.iter().all(|r| (r.weight - 0.25).abs() < 1e-15));
        assert!(apply_weighting(&[], &WeightingFn::softmax(1.0)).is_err());
        assert!(apply_weighting(&flat, &WeightingFn::softmax(0.0)).is_err());
    }

    #[test]
    fn fit_normalizes_and_falls_back() {
        let pi = fit_policy(&[rec(0, 1, 1.0, 1.0)], 2, 2).unwrap();
        assert_eq!(pi.row(0), &[0.0, 1.0]);
        assert_eq!(pi.row(1), &[0.5, 0.5]);
        let pi = fit_policy(&[rec(0, 0, 0.0, 1.0), rec(0, 1, 0.0, 3.0)], 1, 2).unwrap();
        assert_eq!(pi.row(0), &[0.25, 0.75]);
        // negative weights contribute nothing
        let pi = fit_policy(&[rec(0, 0, -1.0, -0.5), rec(0, 1, 1.0, 1.0)], 1, 2).unwrap();
        assert_eq!(pi.row(0), &[0.0, 1.0]);
        assert!(fit_policy(&[], 1, 2).is_err());
    }

    fn tiny_dataset(planned: bool) -> OfflineDataset {
        let mut traj = Trajectory::new(0, vec![Transition { s: 0, a: 1, r: 1.0, s_next: 1 }], true).unwrap();
        if planned {
            traj.planned_returns = Some([vec![3.0], vec![5.0]]);
        }
        OfflineDataset::new(2, 2, BTreeMap::new(), vec![traj]).unwrap()
    }

    #[test]
    fn advantages_use_min_target_and_mean_baseline() {
        let ds = tiny_dataset(true);
        let v1 = ValueTable::new(vec![1.0, 0.0]);
        let v2 = ValueTable::new(vec![3.0, 0.0]);
        let recs = compute_advantages(&ds, [&v1, &v2]).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].advantage, 1.0);
    }

    #[test]
    fn advantages_need_memory() {
        let ds = tiny_dataset(false);
        let v = ValueTable::zeros(2);
        let err = compute_advantages(&ds, [&v, &v]).unwrap_err();
        assert!(matches!(err, VemError::State(_)));
        assert!(err.to_string().contains("update_memory"));
    }
}
