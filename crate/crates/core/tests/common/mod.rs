//! Independent reference implementations shared by the integration tests.
//! None of these call into the library's operator code.
#![allow(dead_code)]

use vem::mdp::{RandomMdpParams, TabularMdp, TabularPolicy};

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// `V^π = (I − γ P^π)^{-1} r^π` by a direct linear solve.
pub fn linear_policy_values(mdp: &TabularMdp, pi: &TabularPolicy) -> Vec<f64> {
    let n = mdp.n_states();
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for s in 0..n {
        a[s][s] += 1.0;
        for act in 0..mdp.n_actions() {
            let p = pi.prob(s, act);
            a[s][mdp.next(s, act)] -= mdp.gamma() * p;
            b[s] += p * mdp.reward(s, act);
        }
    }
    gauss_solve(a, b)
}

/// Backup `r(s,a) + γ V(s')` written out directly.
pub fn naive_backup(mdp: &TabularMdp, v: &[f64], s: usize, a: usize) -> f64 {
    mdp.rewards()[s * mdp.n_actions() + a] + mdp.gamma() * v[mdp.next_states()[s * mdp.n_actions() + a]]
}

pub fn naive_expectation(mdp: &TabularMdp, mu: &TabularPolicy, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mdp.n_states()];
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            out[s] += mu.as_slice()[s * mdp.n_actions() + a] * naive_backup(mdp, v, s, a);
        }
    }
    out
}

pub fn naive_optimality(mdp: &TabularMdp, v: &[f64]) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; mdp.n_states()];
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let q = naive_backup(mdp, v, s, a);
            if q > out[s] {
                out[s] = q;
            }
        }
    }
    out
}

/// `V(s) + 2α Σ_a μ(a|s)(τ[δ]₊ + (1−τ)[δ]₋)` coded from the definition.
pub fn naive_expectile_gradient(mdp: &TabularMdp, mu: &TabularPolicy, v: &[f64], tau: f64, alpha: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    for s in 0..mdp.n_states() {
        let mut inc = 0.0;
        for a in 0..mdp.n_actions() {
            let d = naive_backup(mdp, v, s, a) - v[s];
            let w = if d > 0.0 { tau } else { 1.0 - tau };
            inc += mu.prob(s, a) * w * d;
        }
        out[s] += 2.0 * alpha * inc;
    }
    out
}

/// Weighted τ-expectile by bisection on
/// `τ Σ w (z − v)₊ = (1−τ) Σ w (v − z)₊`.
pub fn bisect_expectile(z: &[f64], w: &[f64], tau: f64) -> f64 {
    let foc = |v: f64| -> f64 {
        z.iter()
            .zip(w)
            .map(|(&zi, &wi)| {
                if zi > v {
                    tau * wi * (zi - v)
                } else {
                    -(1.0 - tau) * wi * (v - zi)
                }
            })
            .sum()
    };
    let mut lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if foc(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Iterate `f` from zero until the sup step is below `tol`.
pub fn naive_fixed_point(n: usize, tol: f64, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut v = vec![0.0; n];
    loop {
        let next = f(&v);
        let step = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if step <= tol {
            return v;
        }
    }
}

pub fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn params(n_states: usize, n_actions: usize) -> RandomMdpParams {
    RandomMdpParams::new(n_states, n_actions, 0.0, 1.0)
}

/// Random row-stochastic policy from raw non-negative weights.
pub fn policy_from_weights(n_states: usize, n_actions: usize, raw: &[f64]) -> TabularPolicy {
    let mut probs = raw.to_vec();
    for row in probs.chunks_mut(n_actions) {
        let z: f64 = row.iter().sum();
        if z <= 0.0 {
            row.fill(1.0 / n_actions as f64);
        } else {
            row.iter_mut().for_each(|p| *p /= z);
        }
    }
    let mut pi = TabularPolicy::new(n_states, n_actions, probs.clone());
    if pi.is_err() {
        // absorb rounding so rows sum to one within the policy tolerance
        for row in probs.chunks_mut(n_actions) {
            let z: f64 = row.iter().sum();
            row[0] += 1.0 - z;
        }
        pi = TabularPolicy::new(n_states, n_actions, probs);
    }
    pi.unwrap()
}
