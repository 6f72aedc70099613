//! Command-line front end.
//!
//! Every subcommand reads an optional TOML config plus `--set key.path=value`
//! overrides, writes its artifacts and the resolved `config.toml` into the
//! output directory. Exit code 1 signals a validation or I/O failure and 2 a
//! usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{Result, VemError};
use crate::export::export_results;
use crate::mdp::{greedy_policy, optimal_q_values, solve_behavior_values, solve_optimal_values, TabularPolicy};
use crate::memory::PlanningConfig;
use crate::operators::{OperatorKind, ValueOperator};
use crate::policy::evaluate_policy;
use crate::protocols::{
    behavior_policy, best_evl, diagnostics_csv, figure1_csv, run_figure1_protocol, run_figure2_protocol,
    run_figure3_protocol,
};
use crate::seeding::{derive_seed, rng_from_seed};
use crate::training::train_vem;
use crate::{memory, ValueTable};

#[derive(Debug, Parser)]
#[command(name = "vem", version, about = "Tabular expectile V-learning and episodic-memory experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `train.tau=0.9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an MDP and write it as JSON.
    GenMdp(Common),
    /// Roll out an offline dataset under the behavior policy.
    GenDataset(Common),
    /// Solve V* and V^μ exactly.
    Solve(Common),
    /// Iterate the configured operator and record the trajectory.
    RunEvl(Common),
    /// Train the twin-critic episodic-memory agent.
    RunVem(Common),
    /// Run the operator diagnostics protocols.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Figures to run (1, 2, 3); defaults to `grid.figures`.
        #[arg(long)]
        figure: Vec<u8>,
        /// Worker threads for the seed grid.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a stored policy on the configured MDP.
    EvalPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Collect the tables of a run directory into `<dir>/export`.
    Export {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Parse `argv` and run. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p, &common.overrides)?,
        None => ExperimentConfig::from_overrides(&common.overrides)?,
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| VemError::io(&dir, e))?;
    write(&dir.join("config.toml"), &cfg.to_toml_string())?;
    Ok((cfg, dir))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| VemError::io(path, e))
}

fn config_json(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| VemError::Format(e.to_string()))?;
    text.push('\n');
    write(path, &text)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenMdp(c) => gen_mdp(&c),
        Command::GenDataset(c) => gen_dataset(&c),
        Command::Solve(c) => solve(&c),
        Command::RunEvl(c) => run_evl(&c),
        Command::RunVem(c) => run_vem(&c),
        Command::Diagnose { common, figure, jobs } => diagnose(&common, &figure, jobs),
        Command::EvalPolicy { common, policy } => eval_policy(&common, &policy),
        Command::Export { run } => {
            let summary = export_results(&run)?;
            for (file, n) in summary.rows {
                println!("{}: {n} rows", summary.bundle_dir.join(file).display());
            }
            Ok(())
        }
    }
}

fn gen_mdp(c: &Common) -> Result<()> {
    let (cfg, dir) = load(c)?;
    let mdp = cfg.mdp.build()?;
    let path = dir.join("mdp.json");
    mdp.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn gen_dataset(c: &Common) -> Result<()> {
    let (cfg, dir) = load(c)?;
    let mdp = cfg.mdp.build()?;
    let ds = cfg.dataset.build(&mdp)?;
    let path = dir.join("dataset.jsonl");
    ds.save(&path)?;
    println!("{} ({} trajectories, {} transitions)", path.display(), ds.trajectories.len(), ds.n_transitions());
    Ok(())
}

fn solve(c: &Common) -> Result<()> {
    let (cfg, dir) = load(c)?;
    let mdp = cfg.mdp.build()?;
    let mu = cfg.dataset.behavior(&mdp)?;
    let tol = 1e-12;
    let v_star = solve_optimal_values(&mdp, tol)?;
    let v_mu = solve_behavior_values(&mdp, &mu, tol)?;
    let greedy = greedy_policy(&mdp, &v_star);
    let out = json!({
        "config": config_json(&cfg),
        "seed": cfg.seed,
        "v_star": v_star,
        "v_mu": v_mu,
        "q_star": optimal_q_values(&mdp, tol)?,
        "greedy_actions": greedy.argmax_actions(),
        "j_star": evaluate_policy(&mdp, &greedy, tol)?,
        "j_mu": evaluate_policy(&mdp, &mu, tol)?,
    });
    write_json(&dir.join("solution.json"), &out)?;
    println!("{}", serde_json::to_string(&v_star).expect("values serialize"));
    Ok(())
}

fn run_evl(c: &Common) -> Result<()> {
    let (cfg, dir) = load(c)?;
    let mdp = cfg.mdp.build()?;
    let mu = behavior_policy(&mdp, cfg.evl.behavior_temperature)?;
    let op_cfg = cfg.operator;
    let n_max = cfg.evl.n_max;
    if n_max > 1 && op_cfg.kind != OperatorKind::ExpectileGradient {
        return Err(VemError::param("evl.n_max > 1 needs operator.kind = \"expectile_gradient\""));
    }
    let plan = PlanningConfig::new(n_max, mdp.gamma())?;
    let mut op = ValueOperator::new(&mdp, &mu, op_cfg, derive_seed(cfg.seed, "evl-noise"))?;
    let mut noise_rng = rng_from_seed(derive_seed(cfg.seed, "evl-vem-noise"));
    let v_star = solve_optimal_values(&mdp, 1e-12)?;
    let v_mu = solve_behavior_values(&mdp, &mu, 1e-12)?;

    let step_tol = cfg.evl.tol * (1.0 - mdp.gamma());
    let mut v = ValueTable::zeros(mdp.n_states());
    let echo = format!(
        "{},{:?},{:?},{:?},{},{}",
        serde_json::to_value(op_cfg.kind).expect("kind serializes").as_str().unwrap_or_default(),
        op_cfg.tau,
        op_cfg.alpha,
        op_cfg.noise_sigma,
        n_max,
        cfg.seed
    );
    let mut csv = String::from("kind,tau,alpha,noise_sigma,n_max,seed,iteration,step,mean_value,error_v_star\n");
    csv.push_str(&format!("{echo},0,0.0,{:?},{:?}\n", v.mean(), v.sup_distance(&v_star)));
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=cfg.evl.max_iters {
        let next = if n_max > 1 {
            let mut out = memory::vem_operator(&v, &mdp, &mu, &op_cfg, &plan)?.values;
            crate::operators::add_gaussian_noise(&mut out, op_cfg.noise_sigma, &mut noise_rng);
            out
        } else {
            op.apply(&v)
        };
        let step = next.sup_distance(&v);
        v = next;
        iterations = k;
        csv.push_str(&format!("{echo},{k},{step:?},{:?},{:?}\n", v.mean(), v.sup_distance(&v_star)));
        if step < step_tol {
            converged = true;
            break;
        }
    }
    write(&dir.join("evl.csv"), &csv)?;
    let summary = json!({
        "config": config_json(&cfg),
        "seed": cfg.seed,
        "iterations": iterations,
        "converged": converged,
        "final_values": v,
        "error_v_star": v.sup_distance(&v_star),
        "error_v_mu": v.sup_distance(&v_mu),
    });
    write_json(&dir.join("evl_summary.json"), &summary)?;
    println!(
        "iterations {iterations} converged {converged} ‖V − V*‖∞ = {:e}",
        v.sup_distance(&v_star)
    );
    Ok(())
}

fn run_vem(c: &Common) -> Result<()> {
    let (cfg, dir) = load(c)?;
    let mdp = cfg.mdp.build()?;
    let ds = cfg.dataset.build(&mdp)?;
    let out = train_vem(&mdp, &ds, &cfg.train, &cfg.weighting)?;
    write(&dir.join("metrics.csv"), &out.metrics_csv(&cfg.train))?;
    out.policy.save(&dir.join("policy.json"))?;
    let v_star = solve_optimal_values(&mdp, 1e-12)?;
    let j_star = evaluate_policy(&mdp, &greedy_policy(&mdp, &v_star), 1e-12)?;
    let final_j = out.log.last().map_or(evaluate_policy(&mdp, &out.policy, 1e-12)?, |m| m.policy_return);
    let summary = json!({
        "config": config_json(&cfg),
        "seed": cfg.seed,
        "n_max": out.n_max,
        "final_policy_return": final_j,
        "j_star": j_star,
        "steps_to_95_percent_of_final": out.steps_to_fraction_of_final(0.95),
        "empty_batches": out.empty_batches,
        "critics": out.critics,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!("J(π) = {final_j:.6}  J* = {j_star:.6}");
    Ok(())
}

fn diagnose(c: &Common, figures: &[u8], jobs: usize) -> Result<()> {
    let (cfg, dir) = load(c)?;
    let figures = if figures.is_empty() { cfg.grid.figures.clone() } else { figures.to_vec() };
    if let Some(f) = figures.iter().find(|f| !(1..=3).contains(*f)) {
        return Err(VemError::param(format!("--figure must be 1, 2 or 3, got {f}")));
    }
    let s = &cfg.diagnostics;
    for f in figures {
        match f {
            1 => {
                let out = run_figure1_protocol(s, &cfg.figure1, &cfg.grid.figure1_taus, jobs)?;
                let (rows, curve) = figure1_csv(&out)?;
                write(&dir.join("figure1.csv"), &rows)?;
                write(&dir.join("figure1_curve.csv"), &curve)?;
                if let Some((tau, err)) = best_evl(&out.rows) {
                    println!(
                        "figure1: noisy optimality error {:.4}, best EVL error {err:.4} at tau {tau}",
                        out.rows[0].terminal_error
                    );
                }
            }
            2 => {
                let points =
                    run_figure2_protocol(s, &cfg.grid.taus, &cfg.grid.n_maxes, cfg.grid.behavior_temperature, jobs)?;
                write(&dir.join("figure2.csv"), &diagnostics_csv(&points)?)?;
                println!("figure2: {} rows", points.len());
            }
            _ => {
                let points =
                    run_figure3_protocol(s, &cfg.grid.temperatures, &cfg.grid.taus, &cfg.grid.n_maxes, jobs)?;
                write(&dir.join("figure3.csv"), &diagnostics_csv(&points)?)?;
                println!("figure3: {} rows", points.len());
            }
        }
    }
    Ok(())
}

fn eval_policy(c: &Common, policy: &Path) -> Result<()> {
    let (cfg, dir) = load(c)?;
    let mdp = cfg.mdp.build()?;
    let pi = TabularPolicy::load(policy)?;
    pi.check_against(&mdp)?;
    let v = solve_behavior_values(&mdp, &pi, 1e-12)?;
    let j = evaluate_policy(&mdp, &pi, 1e-12)?;
    let v_star = solve_optimal_values(&mdp, 1e-12)?;
    let j_star = evaluate_policy(&mdp, &greedy_policy(&mdp, &v_star), 1e-12)?;
    let out = json!({
        "config": config_json(&cfg),
        "seed": cfg.seed,
        "policy": policy,
        "policy_return": j,
        "j_star": j_star,
        "values": v,
    });
    write_json(&dir.join("evaluation.json"), &out)?;
    println!("J(π) = {j:.6}  J* = {j_star:.6}");
    Ok(())
}
