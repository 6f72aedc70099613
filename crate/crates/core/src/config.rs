//! Experiment configuration: one TOML file per run, with dotted-path
//! overrides.
//!
//! Parsing resolves every seed the run needs from the root `seed` (unless a
//! section pins its own) and fills step sizes left unset with their largest
//! admissible value, so the serialized config fully describes the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Result, VemError};
use crate::mdp::{generate_random_mdp, sparse_chain, RandomMdpParams, TabularMdp, TabularPolicy};
use crate::memory::{generate_dataset, OfflineDataset};
use crate::operators::{step_size_bound, OperatorConfig};
use crate::policy::WeightingFn;
use crate::protocols::{
    behavior_policy, Figure1Settings, ProtocolSettings, FIGURE1_TAUS, FIGURE2_N_MAXES, FIGURE2_TAUS,
    FIGURE3_TEMPERATURES,
};
use crate::seeding::derive_seed;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdpSource {
    Random,
    Chain,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpSpec {
    pub source: MdpSource,
    /// MDP document to load when `source = "file"`.
    pub path: Option<PathBuf>,
    pub n_states: usize,
    pub n_actions: usize,
    pub reward_low: f64,
    pub reward_high: f64,
    pub gamma: f64,
    pub n_terminals: usize,
    pub seed: Option<u64>,
}

impl Default for MdpSpec {
    fn default() -> Self {
        let p = RandomMdpParams::default();
        MdpSpec {
            source: MdpSource::Random,
            path: None,
            n_states: p.n_states,
            n_actions: p.n_actions,
            reward_low: p.reward_low,
            reward_high: p.reward_high,
            gamma: p.gamma,
            n_terminals: p.n_terminals,
            seed: None,
        }
    }
}

impl MdpSpec {
    pub fn params(&self) -> RandomMdpParams {
        RandomMdpParams {
            n_states: self.n_states,
            n_actions: self.n_actions,
            reward_low: self.reward_low,
            reward_high: self.reward_high,
            gamma: self.gamma,
            n_terminals: self.n_terminals,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.source {
            MdpSource::File => match &self.path {
                Some(p) if p.is_file() => Ok(()),
                Some(p) => Err(VemError::param(format!("mdp.path {} does not exist", p.display()))),
                None => Err(VemError::param("mdp.source = \"file\" needs mdp.path")),
            },
            _ => {
                if self.n_states < 2 || self.n_actions < 2 {
                    return Err(VemError::param("mdp needs at least 2 states and 2 actions"));
                }
                if !(0.0..1.0).contains(&self.gamma) {
                    return Err(VemError::param(format!("mdp.gamma must lie in [0, 1), got {}", self.gamma)));
                }
                if self.source == MdpSource::Random && !(self.reward_low < self.reward_high) {
                    return Err(VemError::param("mdp.reward_low must be below mdp.reward_high"));
                }
                Ok(())
            }
        }
    }

    pub fn build(&self) -> Result<TabularMdp> {
        match self.source {
            MdpSource::Random => generate_random_mdp(self.seed.unwrap_or(0), &self.params()),
            MdpSource::Chain => sparse_chain(self.n_states, self.n_actions, self.gamma),
            MdpSource::File => TabularMdp::load(self.path.as_deref().expect("validated")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Existing dataset to load instead of generating one.
    pub path: Option<PathBuf>,
    /// Behavior policy `softmax(Q*/temperature)`; uniform when unset.
    pub behavior_temperature: Option<f64>,
    pub episodes: usize,
    pub episode_length: usize,
    /// Additional episodes from the uniform policy, for mixed-quality data.
    pub uniform_episodes: usize,
    pub seed: Option<u64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            path: None,
            behavior_temperature: None,
            episodes: 100,
            episode_length: 50,
            uniform_episodes: 0,
            seed: None,
        }
    }
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        if let Some(p) = &self.path {
            if !p.is_file() {
                return Err(VemError::param(format!("dataset.path {} does not exist", p.display())));
            }
            return Ok(());
        }
        if self.episodes == 0 || self.episode_length == 0 {
            return Err(VemError::param("dataset.episodes and dataset.episode_length must be positive"));
        }
        if let Some(t) = self.behavior_temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(VemError::param("dataset.behavior_temperature must be positive"));
            }
        }
        Ok(())
    }

    pub fn behavior(&self, mdp: &TabularMdp) -> Result<TabularPolicy> {
        behavior_policy(mdp, self.behavior_temperature)
    }

    /// Load the dataset file, or roll out the configured episodes.
    pub fn build(&self, mdp: &TabularMdp) -> Result<OfflineDataset> {
        if let Some(p) = &self.path {
            return OfflineDataset::load(p);
        }
        let seed = self.seed.unwrap_or(0);
        let mu = self.behavior(mdp)?;
        let mut ds = generate_dataset(mdp, &mu, self.episodes, self.episode_length, derive_seed(seed, "behavior"))?;
        let label = match self.behavior_temperature {
            Some(t) => format!("softmax(Q*/{t})"),
            None => "uniform".to_string(),
        };
        ds.source.insert("behavior".into(), label);
        ds.source.insert("seed".into(), seed.to_string());
        ds.source.insert("episodes".into(), self.episodes.to_string());
        ds.source.insert("episode_length".into(), self.episode_length.to_string());
        if self.uniform_episodes > 0 {
            let uni = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
            let extra =
                generate_dataset(mdp, &uni, self.uniform_episodes, self.episode_length, derive_seed(seed, "uniform"))?;
            ds.merge(extra)?;
            ds.source.insert("uniform_episodes".into(), self.uniform_episodes.to_string());
        }
        Ok(ds)
    }
}

/// Operator iteration study settings (`run-evl`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvlSpec {
    pub max_iters: usize,
    /// Stop once the step falls below `tol (1 − γ)`.
    pub tol: f64,
    /// Rollout horizon; above 1 the expectile operator is wrapped in the VEM
    /// operator.
    pub n_max: usize,
    /// Behavior policy temperature; uniform when unset.
    pub behavior_temperature: Option<f64>,
}

impl Default for EvlSpec {
    fn default() -> Self {
        EvlSpec {
            max_iters: 10_000,
            tol: 1e-10,
            n_max: 1,
            behavior_temperature: None,
        }
    }
}

/// Which protocols `diagnose` runs and over which grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub figures: Vec<u8>,
    pub taus: Vec<f64>,
    pub n_maxes: Vec<usize>,
    pub temperatures: Vec<f64>,
    /// Behavior temperature of the `figure2` grid; uniform when unset.
    pub behavior_temperature: Option<f64>,
    pub figure1_taus: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            figures: vec![1, 2, 3],
            taus: FIGURE2_TAUS.to_vec(),
            n_maxes: FIGURE2_N_MAXES.to_vec(),
            temperatures: FIGURE3_TEMPERATURES.to_vec(),
            behavior_temperature: Some(1.0),
            figure1_taus: FIGURE1_TAUS.to_vec(),
        }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if let Some(f) = self.figures.iter().find(|f| !(1..=3).contains(*f)) {
            return Err(VemError::param(format!("grid.figures entries must be 1, 2 or 3, got {f}")));
        }
        for &t in self.taus.iter().chain(&self.figure1_taus) {
            if !(t > 0.0 && t < 1.0) {
                return Err(VemError::param(format!("grid tau must lie in (0, 1), got {t}")));
            }
        }
        if self.n_maxes.contains(&0) {
            return Err(VemError::param("grid.n_maxes entries must be positive"));
        }
        if self.temperatures.iter().chain(&self.behavior_temperature).any(|t| !(*t > 0.0)) {
            return Err(VemError::param("grid temperatures must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every consumer derives its own stream from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub mdp: MdpSpec,
    pub dataset: DatasetSpec,
    pub operator: OperatorConfig,
    pub evl: EvlSpec,
    pub train: TrainConfig,
    pub weighting: WeightingFn,
    pub diagnostics: ProtocolSettings,
    pub figure1: Figure1Settings,
    pub grid: GridSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            mdp: MdpSpec::default(),
            dataset: DatasetSpec::default(),
            operator: OperatorConfig::default(),
            evl: EvlSpec::default(),
            train: TrainConfig::default(),
            weighting: WeightingFn::default(),
            diagnostics: ProtocolSettings::default(),
            figure1: Figure1Settings::default(),
            grid: GridSpec::default(),
        }
    }
}

fn section<'a>(root: &'a mut Table, name: &str) -> Result<&'a mut Table> {
    root.entry(name)
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| VemError::param(format!("{name} must be a table")))
}

fn fill(table: &mut Table, key: &str, value: impl Into<Value>) {
    table.entry(key).or_insert_with(|| value.into());
}

fn seed_value(seed: u64) -> Value {
    // TOML integers are signed 64-bit; keep derived seeds in range.
    Value::Integer((seed >> 1) as i64)
}

fn tau_of(table: &Table) -> Option<f64> {
    match table.get("tau") {
        Some(Value::Float(t)) => Some(*t),
        Some(Value::Integer(t)) => Some(*t as f64),
        None => Some(0.7),
        _ => None,
    }
}

/// Parse a `--set` value as a TOML literal, falling back to a bare string.
pub fn parse_override_value(text: &str) -> Value {
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(text.to_string()),
    }
}

/// Apply `a.b.c=value` overrides to a raw config table.
pub fn apply_overrides(root: &mut Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (path, value) = o
            .split_once('=')
            .ok_or_else(|| VemError::param(format!("override {o:?} is not of the form key.path=value")))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(VemError::param(format!("override key {path:?} is malformed")));
        }
        let mut table = &mut *root;
        for k in &keys[..keys.len() - 1] {
            table = section(table, k)?;
        }
        table.insert(keys[keys.len() - 1].to_string(), parse_override_value(value.trim()));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parse `text` with `overrides` applied, then resolve and validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: Table = text.parse().map_err(|e: toml::de::Error| VemError::Format(e.to_string()))?;
        apply_overrides(&mut root, overrides)?;
        Self::resolve(&mut root)?;
        let cfg: ExperimentConfig = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| VemError::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VemError::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Defaults plus overrides, for runs without a config file.
    pub fn from_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_toml_str("", overrides)
    }

    fn resolve(root: &mut Table) -> Result<()> {
        let seed = match root.get("seed") {
            None => 0,
            Some(Value::Integer(s)) if *s >= 0 => *s as u64,
            Some(_) => return Err(VemError::param("seed must be a non-negative integer")),
        };
        root.insert("seed".into(), Value::Integer(seed as i64));
        let mdp = section(root, "mdp")?;
        if mdp.get("source").and_then(Value::as_str) != Some("file") {
            fill(mdp, "seed", seed_value(derive_seed(seed, "mdp")));
        }
        fill(section(root, "dataset")?, "seed", seed_value(derive_seed(seed, "dataset")));
        let train = section(root, "train")?;
        fill(train, "seed", seed_value(derive_seed(seed, "train")));
        if let Some(t) = tau_of(train) {
            fill(train, "critic_step_size", step_size_bound(t));
        }
        let op = section(root, "operator")?;
        if let Some(t) = tau_of(op) {
            fill(op, "alpha", step_size_bound(t));
        }
        fill(section(root, "diagnostics")?, "mdp_seed_start", Value::Integer(seed as i64));
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.mdp.validate()?;
        self.dataset.validate()?;
        self.operator.validate()?;
        if self.evl.max_iters == 0 || !(self.evl.tol > 0.0) || self.evl.n_max == 0 {
            return Err(VemError::param("evl.max_iters, evl.tol and evl.n_max must be positive"));
        }
        self.train.validate()?;
        self.weighting.validate()?;
        self.diagnostics.validate()?;
        if !(self.figure1.noise_sigma >= 0.0) || self.figure1.max_iters == 0 || self.figure1.record_every == 0 {
            return Err(VemError::param("figure1 settings out of range"));
        }
        self.grid.validate()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
