//! Declarative experiment configuration (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{HibidArch, QMckpArch};
use crate::bidders::BidderSpec;
use crate::env::EnvFactory;
use crate::error::{Error, Result};
use crate::hier::InitialPlanMode;
use crate::nn::PlannerArch;
use crate::ppo::PpoConfig;
use crate::replay::{self, ReplayConfig, ReplayFactory};
use crate::runner::PlannerOptions;
use crate::simenv::{SimConfig, SimFactory};

/// Version of the configuration schema described in the docs.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Seeds initialization, exploration, shuffling and bootstrap draws.
    #[serde(default)]
    pub seed: u64,
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub bidder: BidderSpec,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentConfig {
    Sim(SimConfig),
    Replay(ReplaySource),
}

/// A log file plus the replay settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySource {
    pub path: PathBuf,
    #[serde(default = "replay_defaults::stages")]
    pub stages: usize,
    #[serde(default = "replay_defaults::episodes")]
    pub episodes: usize,
    #[serde(default = "replay_defaults::budget")]
    pub budget: f64,
    #[serde(default)]
    pub budgets: BTreeMap<String, f64>,
    #[serde(default = "replay_defaults::eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

mod replay_defaults {
    use crate::replay::ReplayConfig;

    pub fn stages() -> usize {
        ReplayConfig::default().stages
    }
    pub fn episodes() -> usize {
        ReplayConfig::default().episodes
    }
    pub fn budget() -> f64 {
        ReplayConfig::default().budget
    }
    pub fn eval_fraction() -> f64 {
        ReplayConfig::default().eval_fraction
    }
}

impl ReplaySource {
    pub fn replay_config(&self) -> ReplayConfig {
        ReplayConfig {
            stages: self.stages,
            episodes: self.episodes,
            budget: self.budget,
            budgets: self.budgets.clone(),
            eval_fraction: self.eval_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Abplanner,
    EqualSplit,
    Qmckp,
    HibidPrime,
    None,
}

impl PlannerKind {
    pub fn name(self) -> &'static str {
        match self {
            PlannerKind::Abplanner => "abplanner",
            PlannerKind::EqualSplit => "equal_split",
            PlannerKind::Qmckp => "qmckp",
            PlannerKind::HibidPrime => "hibid_prime",
            PlannerKind::None => "none",
        }
    }

    pub fn trainable(self) -> bool {
        matches!(self, PlannerKind::Abplanner | PlannerKind::Qmckp | PlannerKind::HibidPrime)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub kind: PlannerKind,
    pub initial_plan: InitialPlanMode,
    /// Per-component action bound in units of `B / m`; `inf` disables it.
    pub action_clamp: f64,
    /// Checkpoint used by `eval` when none is given on the command line.
    pub checkpoint: Option<PathBuf>,
    pub encoder: usize,
    pub hidden: usize,
    pub head: usize,
    /// Initial standard deviation of the Gaussian policy.
    pub initial_std: f64,
    pub mean_init_scale: f64,
    /// Budget bins for Q-MCKP.
    pub bins: usize,
    /// Initial Q-MCKP exploration rate.
    pub epsilon: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        let arch = PlannerArch::default();
        let q = QMckpArch::default();
        Self {
            kind: PlannerKind::Abplanner,
            initial_plan: InitialPlanMode::FirstEpisodeConsumption,
            action_clamp: 1.0,
            checkpoint: None,
            encoder: arch.encoder,
            hidden: arch.hidden,
            head: arch.head,
            initial_std: arch.initial_log_std.exp(),
            mean_init_scale: arch.mean_init_scale,
            bins: q.bins,
            epsilon: q.epsilon,
        }
    }
}

impl PlannerConfig {
    pub fn options(&self) -> PlannerOptions {
        PlannerOptions {
            initial_plan: self.initial_plan,
            action_clamp: Some(self.action_clamp).filter(|c| c.is_finite()),
        }
    }

    pub fn abplanner_arch(&self, stages: usize) -> PlannerArch {
        PlannerArch {
            stages,
            encoder: self.encoder,
            hidden: self.hidden,
            head: self.head,
            initial_log_std: self.initial_std.ln(),
            mean_init_scale: self.mean_init_scale,
        }
    }

    pub fn qmckp_arch(&self, stages: usize) -> QMckpArch {
        QMckpArch { stages, bins: self.bins, encoder: self.encoder, hidden: self.hidden, head: self.head, epsilon: self.epsilon }
    }

    /// The feedforward planner uses `head` as its hidden width.
    pub fn hibid_arch(&self, stages: usize) -> HibidArch {
        HibidArch { stages, hidden: self.head, initial_log_std: self.initial_std.ln() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.action_clamp > 0.0) {
            return Err(Error::Config(format!("planner.action_clamp must be > 0, got {}", self.action_clamp)));
        }
        if !(self.initial_std > 0.0 && self.initial_std.is_finite()) {
            return Err(Error::Config("planner.initial_std must be > 0".into()));
        }
        if self.encoder == 0 || self.hidden == 0 || self.head == 0 {
            return Err(Error::Config("planner network sizes must be >= 1".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config("planner.bins must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("planner.epsilon must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out advertisers `0..advertisers` of the eval split.
    pub advertisers: usize,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { advertisers: 500, bootstrap_resamples: 2000, confidence: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/experiment"), checkpoint_every: 0 }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative replay paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let EnvironmentConfig::Replay(src) = &mut cfg.environment {
            if src.path.is_relative() {
                if let Some(dir) = path.parent() {
                    src.path = dir.join(&src.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match &self.environment {
            EnvironmentConfig::Sim(c) => c.validate()?,
            EnvironmentConfig::Replay(r) => r.replay_config().validate()?,
        }
        self.bidder.validate()?;
        self.planner.validate()?;
        self.ppo.validate()?;
        if self.eval.advertisers == 0 || self.eval.bootstrap_resamples == 0 {
            return Err(Error::Config("eval.advertisers and eval.bootstrap_resamples must be >= 1".into()));
        }
        if !(self.eval.confidence > 0.0 && self.eval.confidence < 1.0) {
            return Err(Error::Config("eval.confidence must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        match &self.environment {
            EnvironmentConfig::Sim(c) => c.stages,
            EnvironmentConfig::Replay(r) => r.stages,
        }
    }

    pub fn episodes(&self) -> usize {
        match &self.environment {
            EnvironmentConfig::Sim(c) => c.episodes,
            EnvironmentConfig::Replay(r) => r.episodes,
        }
    }

    /// A copy with `m` stages.
    pub fn with_stages(&self, m: usize) -> Self {
        let mut cfg = self.clone();
        match &mut cfg.environment {
            EnvironmentConfig::Sim(c) => c.stages = m,
            EnvironmentConfig::Replay(r) => r.stages = m,
        }
        cfg
    }

    pub fn factory(&self) -> Result<Box<dyn EnvFactory>> {
        match &self.environment {
            EnvironmentConfig::Sim(c) => Ok(Box::new(SimFactory::new(c.clone())?)),
            EnvironmentConfig::Replay(r) => {
                let store = replay::ingest(&r.path)?;
                Ok(Box::new(ReplayFactory::new(&store, r.replay_config())?))
            }
        }
    }
}
