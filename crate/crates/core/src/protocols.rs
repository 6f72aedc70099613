//! Operator-study protocols over families of seeded random MDPs.
//!
//! * `figure1`: noisy operator iteration, terminal error per τ against the
//!   noisy optimality operator.
//! * `figure2`: VEM operator diagnostics over a (τ, n_max) grid.
//! * `figure3`: the `figure2` grid repeated per behavior temperature.
//!
//! Every row echoes the settings it was produced with. MDP `i` of a run is
//! generated from seed `mdp_seed_start + i`; all other randomness is derived
//! from that seed, so a row is reproducible on its own.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    empirical_policy, estimate_contraction, fixed_point_within, measure_variance, n_star_histogram,
    OperatorDiagnostics, DEFAULT_PAIRS, DEFAULT_SAMPLES_PER_STATE, DEFAULT_VALUE_SCALE,
};
use crate::error::{Result, VemError};
use crate::mdp::{
    generate_random_mdp, softmax_behavior_policy, solve_behavior_values, solve_optimal_values,
    RandomMdpParams, TabularMdp, TabularPolicy, ValueTable,
};
use crate::memory::vem_unchecked;
use crate::operators::{contraction_modulus, step_size_bound, OperatorConfig, OperatorKind, ValueOperator};
use crate::seeding::derive_seed;

pub const FIGURE2_TAUS: [f64; 4] = [0.6, 0.7, 0.8, 0.9];
pub const FIGURE2_N_MAXES: [usize; 4] = [1, 2, 3, 4];
pub const FIGURE3_TEMPERATURES: [f64; 4] = [0.1, 0.3, 1.0, 3.0];
pub const FIGURE1_TAUS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Shared settings of every protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSettings {
    pub n_mdps: usize,
    pub mdp_seed_start: u64,
    pub mdp: RandomMdpParams,
    /// Step size as a fraction of `1 / (2 max{τ, 1−τ})`.
    pub alpha_fraction: f64,
    pub n_pairs: usize,
    pub value_scale: f64,
    pub samples_per_state: usize,
    pub variance_draws: usize,
    pub bias_tol: f64,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        ProtocolSettings {
            n_mdps: 20,
            mdp_seed_start: 0,
            mdp: RandomMdpParams::default(),
            alpha_fraction: 1.0,
            n_pairs: DEFAULT_PAIRS,
            value_scale: DEFAULT_VALUE_SCALE,
            samples_per_state: DEFAULT_SAMPLES_PER_STATE,
            variance_draws: 200,
            bias_tol: 1e-10,
        }
    }
}

impl ProtocolSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_mdps == 0 || self.n_pairs == 0 || self.samples_per_state == 0 || self.variance_draws == 0 {
            return Err(VemError::param(
                "n_mdps, n_pairs, samples_per_state and variance_draws must be positive",
            ));
        }
        if !(self.alpha_fraction > 0.0 && self.alpha_fraction <= 1.0) {
            return Err(VemError::param("alpha_fraction must lie in (0, 1]"));
        }
        if !(self.value_scale > 0.0) || !(self.bias_tol > 0.0) {
            return Err(VemError::param("value_scale and bias_tol must be positive"));
        }
        Ok(())
    }

    pub fn alpha(&self, tau: f64) -> f64 {
        self.alpha_fraction * step_size_bound(tau)
    }

    pub fn mdp_seeds(&self) -> impl Iterator<Item = u64> {
        let start = self.mdp_seed_start;
        (0..self.n_mdps as u64).map(move |i| start + i)
    }

    pub fn generate(&self, seed: u64) -> Result<TabularMdp> {
        generate_random_mdp(seed, &self.mdp)
    }
}

/// `softmax(Q*/temperature)`, or uniform when `temperature` is `None`.
pub fn behavior_policy(mdp: &TabularMdp, temperature: Option<f64>) -> Result<TabularPolicy> {
    match temperature {
        Some(t) => softmax_behavior_policy(mdp, t),
        None => Ok(TabularPolicy::uniform(mdp.n_states(), mdp.n_actions())),
    }
}

fn check_taus(taus: &[f64]) -> Result<()> {
    if taus.is_empty() {
        return Err(VemError::param("need at least one tau"));
    }
    match taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        Some(t) => Err(VemError::param(format!("tau must lie in (0, 1), got {t}"))),
        None => Ok(()),
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| VemError::param(format!("cannot start worker pool: {e}")))
}

/// Per-MDP measurements of the VEM operator.
#[derive(Debug, Clone, PartialEq)]
pub struct VemDiagnostics {
    pub mdp_seed: u64,
    pub diagnostics: OperatorDiagnostics,
    /// `‖T 0 − V_fp‖∞ / ‖V_fp‖∞`: contraction toward the fixed point from the
    /// pessimistic all-zero table.
    pub pessimistic_contraction: f64,
    pub fixed_point: ValueTable,
}

/// Contraction, bias, variance and `n*` histogram of the VEM operator
/// `(τ, α, n_max)` under `mu` on one MDP.
pub fn diagnose_vem(
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    tau: f64,
    alpha: f64,
    n_max: usize,
    settings: &ProtocolSettings,
    mdp_seed: u64,
) -> Result<VemDiagnostics> {
    OperatorConfig::expectile_gradient(tau).with_alpha(alpha).validate()?;
    mu.check_against(mdp)?;
    if n_max == 0 {
        return Err(VemError::param("n_max must be at least 1"));
    }
    let n = mdp.n_states();
    let op = |v: &ValueTable| vem_unchecked(v, mdp, mu, tau, alpha, n_max).values;
    let modulus = contraction_modulus(tau, alpha, mdp.gamma());

    let contraction_rate = estimate_contraction(
        op,
        n,
        settings.n_pairs,
        settings.value_scale,
        derive_seed(mdp_seed, "contraction"),
    )?;
    let fixed_point = fixed_point_within(op, n, modulus, settings.bias_tol)?;
    let v_star = solve_optimal_values(mdp, settings.bias_tol.min(1e-10))?;
    let zero = ValueTable::zeros(n);
    let denom = fixed_point.sup_norm();
    let pessimistic_contraction = if denom > 0.0 {
        op(&zero).sup_distance(&fixed_point) / denom
    } else {
        0.0
    };
    let k = settings.samples_per_state;
    let update_variance = measure_variance(
        op,
        |v, rng| {
            let hat = empirical_policy(mu, k, rng).expect("k is positive and mu is valid");
            vem_unchecked(v, mdp, &hat, tau, alpha, n_max).values
        },
        &zero,
        settings.variance_draws,
        derive_seed(mdp_seed, "variance"),
    )?;
    let n_star = vem_unchecked(&fixed_point, mdp, mu, tau, alpha, n_max).n_star;

    Ok(VemDiagnostics {
        mdp_seed,
        diagnostics: OperatorDiagnostics {
            contraction_rate,
            contraction_bound: modulus,
            fixed_point_bias: fixed_point.sup_distance(&v_star),
            update_variance,
            n_star_histogram: n_star_histogram(&n_star, n_max),
        },
        pessimistic_contraction,
        fixed_point,
    })
}

/// One seed-averaged grid point of the `figure2` and `figure3` protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub protocol: String,
    /// Empty when the behavior policy is uniform.
    pub behavior_temperature: Option<f64>,
    pub tau: f64,
    pub alpha: f64,
    pub n_max: usize,
    pub gamma: f64,
    pub n_states: usize,
    pub n_actions: usize,
    pub reward_low: f64,
    pub reward_high: f64,
    pub n_mdps: usize,
    pub mdp_seed_start: u64,
    pub n_pairs: usize,
    pub value_scale: f64,
    pub samples_per_state: usize,
    pub variance_draws: usize,
    pub variance_at: String,
    pub contraction_rate: f64,
    pub max_contraction_rate: f64,
    pub contraction_bound: f64,
    pub pessimistic_contraction: f64,
    pub fixed_point_bias: f64,
    pub update_variance: f64,
    /// Counts per `n = 1..n_max`, summed over MDPs, joined by `;`.
    pub n_star_histogram: String,
}

/// Every per-MDP measurement of one grid point, plus its averaged row.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub row: DiagnosticsRow,
    pub per_mdp: Vec<VemDiagnostics>,
}

fn grid_point(
    protocol: &str,
    settings: &ProtocolSettings,
    temperature: Option<f64>,
    tau: f64,
    n_max: usize,
    per_mdp: Vec<VemDiagnostics>,
) -> GridPoint {
    let m = per_mdp.len() as f64;
    let avg = |f: &dyn Fn(&VemDiagnostics) -> f64| per_mdp.iter().map(f).sum::<f64>() / m;
    let mut hist = vec![0usize; n_max];
    for d in &per_mdp {
        for (h, c) in hist.iter_mut().zip(&d.diagnostics.n_star_histogram) {
            *h += c;
        }
    }
    let alpha = settings.alpha(tau);
    let row = DiagnosticsRow {
        protocol: protocol.to_string(),
        behavior_temperature: temperature,
        tau,
        alpha,
        n_max,
        gamma: settings.mdp.gamma,
        n_states: settings.mdp.n_states,
        n_actions: settings.mdp.n_actions,
        reward_low: settings.mdp.reward_low,
        reward_high: settings.mdp.reward_high,
        n_mdps: settings.n_mdps,
        mdp_seed_start: settings.mdp_seed_start,
        n_pairs: settings.n_pairs,
        value_scale: settings.value_scale,
        samples_per_state: settings.samples_per_state,
        variance_draws: settings.variance_draws,
        variance_at: "zero".to_string(),
        contraction_rate: avg(&|d| d.diagnostics.contraction_rate),
        max_contraction_rate: per_mdp
            .iter()
            .map(|d| d.diagnostics.contraction_rate)
            .fold(0.0, f64::max),
        contraction_bound: contraction_modulus(tau, alpha, settings.mdp.gamma),
        pessimistic_contraction: avg(&|d| d.pessimistic_contraction),
        fixed_point_bias: avg(&|d| d.diagnostics.fixed_point_bias),
        update_variance: avg(&|d| d.diagnostics.update_variance),
        n_star_histogram: hist.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
    };
    GridPoint { row, per_mdp }
}

fn vem_grid(
    protocol: &str,
    settings: &ProtocolSettings,
    temperatures: &[Option<f64>],
    taus: &[f64],
    n_maxes: &[usize],
    jobs: usize,
) -> Result<Vec<GridPoint>> {
    settings.validate()?;
    check_taus(taus)?;
    if n_maxes.is_empty() || n_maxes.contains(&0) {
        return Err(VemError::param("n_max values must be positive and non-empty"));
    }
    let seeds: Vec<u64> = settings.mdp_seeds().collect();
    let per_seed: Vec<Vec<VemDiagnostics>> = pool(jobs)?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| -> Result<Vec<VemDiagnostics>> {
                let mdp = settings.generate(seed)?;
                let mut out = Vec::new();
                for &temp in temperatures {
                    let mu = behavior_policy(&mdp, temp)?;
                    for &tau in taus {
                        for &n_max in n_maxes {
                            out.push(diagnose_vem(&mdp, &mu, tau, settings.alpha(tau), n_max, settings, seed)?);
                        }
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut points = Vec::new();
    let mut idx = 0;
    for &temp in temperatures {
        for &tau in taus {
            for &n_max in n_maxes {
                let per_mdp = per_seed.iter().map(|v| v[idx].clone()).collect();
                points.push(grid_point(protocol, settings, temp, tau, n_max, per_mdp));
                idx += 1;
            }
        }
    }
    Ok(points)
}

/// Contraction, bias and variance over the `(τ, n_max)` grid, averaged over
/// the MDP family, with `μ = softmax(Q*/temperature)` (uniform if `None`).
pub fn run_figure2_protocol(
    settings: &ProtocolSettings,
    taus: &[f64],
    n_maxes: &[usize],
    behavior_temperature: Option<f64>,
    jobs: usize,
) -> Result<Vec<GridPoint>> {
    vem_grid("figure2", settings, &[behavior_temperature], taus, n_maxes, jobs)
}

/// The `figure2` grid for each behavior temperature, in the given order.
pub fn run_figure3_protocol(
    settings: &ProtocolSettings,
    temperatures: &[f64],
    taus: &[f64],
    n_maxes: &[usize],
    jobs: usize,
) -> Result<Vec<GridPoint>> {
    if temperatures.is_empty() {
        return Err(VemError::param("need at least one temperature"));
    }
    let temps: Vec<Option<f64>> = temperatures.iter().map(|&t| Some(t)).collect();
    vem_grid("figure3", settings, &temps, taus, n_maxes, jobs)
}

/// Settings of the `figure1` protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Figure1Settings {
    /// Gaussian noise standard deviation added after every application.
    pub noise_sigma: f64,
    pub behavior_temperature: Option<f64>,
    pub max_iters: usize,
    /// Stop once `‖V_{k+1} − V_k‖∞ < stop_tol (1 − γ)`.
    pub stop_tol: f64,
    /// Curve sampling interval in iterations.
    pub record_every: usize,
}

impl Default for Figure1Settings {
    fn default() -> Self {
        Figure1Settings {
            noise_sigma: 0.1,
            behavior_temperature: None,
            max_iters: 2_000,
            stop_tol: 1e-8,
            record_every: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure1Row {
    pub protocol: String,
    pub operator: OperatorKind,
    /// Empty for the optimality operator.
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    pub noise_sigma: f64,
    pub behavior_temperature: Option<f64>,
    pub gamma: f64,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_mdps: usize,
    pub mdp_seed_start: u64,
    pub max_iters: usize,
    pub stop_tol: f64,
    pub mean_iterations: f64,
    pub terminal_mean_value: f64,
    pub v_star_mean_value: f64,
    pub v_mu_mean_value: f64,
    /// Seed average of `‖V_final − V*‖∞`.
    pub terminal_error: f64,
    /// Largest `‖V_final − V*‖∞` over seeds.
    pub max_terminal_error: f64,
}

/// Seed-averaged mean value along the iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub operator: OperatorKind,
    pub tau: Option<f64>,
    pub noise_sigma: f64,
    pub iteration: usize,
    pub mean_value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Figure1Output {
    pub rows: Vec<Figure1Row>,
    pub curve: Vec<CurvePoint>,
}

struct Run {
    iterations: usize,
    final_values: ValueTable,
    curve: Vec<f64>,
}

fn iterate_noisy(mut op: ValueOperator<'_>, n: usize, gamma: f64, s: &Figure1Settings) -> Run {
    let step_tol = s.stop_tol * (1.0 - gamma);
    let mut v = ValueTable::zeros(n);
    let mut curve = vec![v.mean()];
    let mut iterations = s.max_iters;
    for k in 1..=s.max_iters {
        let next = op.apply(&v);
        let step = next.sup_distance(&v);
        v = next;
        if k % s.record_every == 0 {
            curve.push(v.mean());
        }
        if step < step_tol {
            iterations = k;
            break;
        }
    }
    Run {
        iterations,
        final_values: v,
        curve,
    }
}

/// Noisy iteration of the optimality operator and of the gradient expectile
/// operator at every τ, each from zero, sharing one noise stream per MDP.
/// Rows: the noisy optimality operator, the noiseless optimality operator,
/// then one per τ.
pub fn run_figure1_protocol(
    settings: &ProtocolSettings,
    fig: &Figure1Settings,
    taus: &[f64],
    jobs: usize,
) -> Result<Figure1Output> {
    settings.validate()?;
    check_taus(taus)?;
    if !(fig.noise_sigma >= 0.0) || fig.max_iters == 0 || fig.record_every == 0 || !(fig.stop_tol > 0.0) {
        return Err(VemError::param(
            "noise_sigma must be non-negative; max_iters, record_every and stop_tol positive",
        ));
    }
    let mut configs: Vec<OperatorConfig> = vec![
        OperatorConfig {
            kind: OperatorKind::Optimality,
            tau: 0.5,
            alpha: 1.0,
            noise_sigma: fig.noise_sigma,
        },
        OperatorConfig {
            kind: OperatorKind::Optimality,
            tau: 0.5,
            alpha: 1.0,
            noise_sigma: 0.0,
        },
    ];
    for &tau in taus {
        configs.push(
            OperatorConfig::expectile_gradient(tau)
                .with_alpha(settings.alpha(tau))
                .with_noise(fig.noise_sigma),
        );
    }
    for c in &configs {
        c.validate()?;
    }

    struct PerMdp {
        runs: Vec<Run>,
        v_star: ValueTable,
        v_mu: ValueTable,
    }
    let seeds: Vec<u64> = settings.mdp_seeds().collect();
    let per_seed: Vec<PerMdp> = pool(jobs)?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| -> Result<PerMdp> {
                let mdp = settings.generate(seed)?;
                let mu = behavior_policy(&mdp, fig.behavior_temperature)?;
                let noise_seed = derive_seed(seed, "operator-noise");
                let runs = configs
                    .iter()
                    .map(|c| {
                        let op = ValueOperator::new(&mdp, &mu, *c, noise_seed)?;
                        Ok(iterate_noisy(op, mdp.n_states(), mdp.gamma(), fig))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PerMdp {
                    runs,
                    v_star: solve_optimal_values(&mdp, 1e-12)?,
                    v_mu: solve_behavior_values(&mdp, &mu, 1e-12)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let m = per_seed.len() as f64;
    let v_star_mean = per_seed.iter().map(|p| p.v_star.mean()).sum::<f64>() / m;
    let v_mu_mean = per_seed.iter().map(|p| p.v_mu.mean()).sum::<f64>() / m;
    let mut out = Figure1Output::default();
    for (j, c) in configs.iter().enumerate() {
        let is_evl = c.kind == OperatorKind::ExpectileGradient;
        let errors: Vec<f64> = per_seed
            .iter()
            .map(|p| p.runs[j].final_values.sup_distance(&p.v_star))
            .collect();
        out.rows.push(Figure1Row {
            protocol: "figure1".to_string(),
            operator: c.kind,
            tau: is_evl.then_some(c.tau),
            alpha: is_evl.then_some(c.alpha),
            noise_sigma: c.noise_sigma,
            behavior_temperature: fig.behavior_temperature,
            gamma: settings.mdp.gamma,
            n_states: settings.mdp.n_states,
            n_actions: settings.mdp.n_actions,
            n_mdps: settings.n_mdps,
            mdp_seed_start: settings.mdp_seed_start,
            max_iters: fig.max_iters,
            stop_tol: fig.stop_tol,
            mean_iterations: per_seed.iter().map(|p| p.runs[j].iterations as f64).sum::<f64>() / m,
            terminal_mean_value: per_seed.iter().map(|p| p.runs[j].final_values.mean()).sum::<f64>() / m,
            v_star_mean_value: v_star_mean,
            v_mu_mean_value: v_mu_mean,
            terminal_error: errors.iter().sum::<f64>() / m,
            max_terminal_error: errors.iter().cloned().fold(0.0, f64::max),
        });
        // Runs that stopped early hold their final value for the rest of the curve.
        let len = fig.max_iters / fig.record_every + 1;
        for i in 0..len {
            let mean = per_seed
                .iter()
                .map(|p| {
                    let curve = &p.runs[j].curve;
                    curve[i.min(curve.len() - 1)]
                })
                .sum::<f64>()
                / m;
            out.curve.push(CurvePoint {
                operator: c.kind,
                tau: is_evl.then_some(c.tau),
                noise_sigma: c.noise_sigma,
                iteration: i * fig.record_every,
                mean_value: mean,
            });
        }
    }
    Ok(out)
}

/// Lowest terminal error over the expectile rows, with its τ.
pub fn best_evl(rows: &[Figure1Row]) -> Option<(f64, f64)> {
    rows.iter()
        .filter(|r| r.operator == OperatorKind::ExpectileGradient)
        .map(|r| (r.tau.unwrap_or(f64::NAN), r.terminal_error))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Write serializable rows as CSV with a header. An empty slice yields the
/// header alone when `header` is given.
pub fn write_csv<T: Serialize>(rows: &[T], header: &[&str], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(header).map_err(|e| VemError::Format(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| VemError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| VemError::Format(e.to_string()))?;
    Ok(())
}

pub const DIAGNOSTICS_HEADER: &[&str] = &[
    "protocol",
    "behavior_temperature",
    "tau",
    "alpha",
    "n_max",
    "gamma",
    "n_states",
    "n_actions",
    "reward_low",
    "reward_high",
    "n_mdps",
    "mdp_seed_start",
    "n_pairs",
    "value_scale",
    "samples_per_state",
    "variance_draws",
    "variance_at",
    "contraction_rate",
    "max_contraction_rate",
    "contraction_bound",
    "pessimistic_contraction",
    "fixed_point_bias",
    "update_variance",
    "n_star_histogram",
];

pub const FIGURE1_HEADER: &[&str] = &[
    "protocol",
    "operator",
    "tau",
    "alpha",
    "noise_sigma",
    "behavior_temperature",
    "gamma",
    "n_states",
    "n_actions",
    "n_mdps",
    "mdp_seed_start",
    "max_iters",
    "stop_tol",
    "mean_iterations",
    "terminal_mean_value",
    "v_star_mean_value",
    "v_mu_mean_value",
    "terminal_error",
    "max_terminal_error",
];

pub const CURVE_HEADER: &[&str] = &["operator", "tau", "noise_sigma", "iteration", "mean_value"];

/// `figure2` or `figure3` rows as CSV text.
pub fn diagnostics_csv(points: &[GridPoint]) -> Result<String> {
    let rows: Vec<&DiagnosticsRow> = points.iter().map(|p| &p.row).collect();
    to_string(&rows, DIAGNOSTICS_HEADER)
}

pub fn figure1_csv(out: &Figure1Output) -> Result<(String, String)> {
    Ok((to_string(&out.rows, FIGURE1_HEADER)?, to_string(&out.curve, CURVE_HEADER)?))
}

fn to_string<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, header, &mut buf)?;
    String::from_utf8(buf).map_err(|e| VemError::Format(e.to_string()))
}
