//! Experiment configuration. Every field has a default, so a config file
//! only needs the fields it changes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::SuiteKind;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParadigmKind {
    Sequential,
    Er,
    Packnet,
    Multitask,
}

impl FromStr for ParadigmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sequential" => Ok(ParadigmKind::Sequential),
            "er" => Ok(ParadigmKind::Er),
            "packnet" => Ok(ParadigmKind::Packnet),
            "multitask" => Ok(ParadigmKind::Multitask),
            other => Err(Error::Config(format!("unknown paradigm `{other}`"))),
        }
    }
}

impl fmt::Display for ParadigmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParadigmKind::Sequential => "sequential",
            ParadigmKind::Er => "er",
            ParadigmKind::Packnet => "packnet",
            ParadigmKind::Multitask => "multitask",
        })
    }
}

/// Whether adapters keep one `(Q, λ)` per task or a single shared pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterMode {
    /// Per-task under PackNet, shared otherwise.
    Auto,
    PerTask,
    Shared,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub codebook: bool,
    pub adapters: bool,
    pub hierarchy: bool,
}

impl Ablation {
    pub fn apply(&mut self, component: &str) -> Result<()> {
        match component {
            "codebook" => self.codebook = true,
            "adapters" => self.adapters = true,
            "hierarchy" => self.hierarchy = true,
            other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    /// Skill vectors added per task (M).
    pub skills_per_task: usize,
    /// Skills mixed per selection (C).
    pub top_c: usize,
    pub cp_rank: usize,
    pub gmm_components: usize,
    pub window: usize,
    pub adapter_mode: AdapterMode,
    pub ablate: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            blocks: 2,
            mlp_hidden: 256,
            skills_per_task: 10,
            top_c: 10,
            cp_rank: 8,
            gmm_components: 5,
            window: 10,
            adapter_mode: AdapterMode::Auto,
            ablate: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig {
            d: 384,
            heads: 6,
            blocks: 4,
            mlp_hidden: 1536,
            cp_rank: 64,
            ..Self::default()
        }
    }

    /// Tokens per window: five modalities per step.
    pub fn seq_len(&self) -> usize {
        self.window * 5
    }

    /// Index of the window slot holding the current step.
    pub fn center_slot(&self) -> usize {
        (self.window - 1) / 2
    }

    pub fn validate(&self, n_tasks: usize) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return err(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.blocks == 0 || self.mlp_hidden == 0 || self.window == 0 {
            return err("blocks, mlp_hidden and window must be positive".into());
        }
        if self.gmm_components == 0 || self.cp_rank == 0 {
            return err("gmm_components and cp_rank must be positive".into());
        }
        if !self.ablate.codebook {
            if self.skills_per_task == 0 || self.top_c == 0 || self.top_c > self.skills_per_task {
                return err(format!(
                    "need 1 <= top_c ({}) <= skills_per_task ({})",
                    self.top_c, self.skills_per_task
                ));
            }
            if n_tasks * self.skills_per_task > self.d {
                return err(format!(
                    "{n_tasks} tasks x {} skills exceed width d = {}; orthogonal expansion is impossible",
                    self.skills_per_task, self.d
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Global gradient norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Half-width of uniform noise added to the normalized gripper label.
    pub gripper_label_noise: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub demos_per_task: usize,
    /// Stop once the current task's success has fallen twice in a row after
    /// first reaching this level.
    pub early_stop_threshold: f64,
    pub early_stop: bool,
    /// Evaluate earlier tasks at every eval point instead of only at e*.
    pub eval_offdiag_all_points: bool,
    /// Sample actions from the mixture during evaluation (mean of the
    /// heaviest component otherwise).
    pub stochastic_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 32,
            grad_clip: 0.0,
            gripper_label_noise: 0.1,
            eval_every: 5,
            eval_episodes: 20,
            demos_per_task: 10,
            early_stop_threshold: 0.95,
            early_stop: true,
            eval_offdiag_all_points: false,
            stochastic_eval: true,
        }
    }
}

impl TrainConfig {
    pub fn eval_points(&self) -> Vec<usize> {
        let mut pts: Vec<usize> = (0..=self.epochs).step_by(self.eval_every.max(1)).collect();
        if *pts.last().unwrap() != self.epochs {
            pts.push(self.epochs);
        }
        pts
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.eval_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, eval_every and batch_size must be positive".into()));
        }
        if self.eval_episodes == 0 || self.demos_per_task == 0 {
            return Err(Error::Config("eval_episodes and demos_per_task must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) || !(self.gripper_label_noise >= 0.0) {
            return Err(Error::Config("grad_clip and gripper_label_noise must be non-negative".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParadigmConfig {
    pub kind: ParadigmKind,
    pub er_capacity: usize,
    pub packnet_keep_ratio: f64,
    pub packnet_finetune_epochs: usize,
}

impl Default for ParadigmConfig {
    fn default() -> Self {
        ParadigmConfig {
            kind: ParadigmKind::Er,
            er_capacity: 100,
            packnet_keep_ratio: 0.5,
            packnet_finetune_epochs: 5,
        }
    }
}

impl ParadigmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.packnet_keep_ratio > 0.0 && self.packnet_keep_ratio < 1.0) {
            return Err(Error::Config(format!(
                "packnet_keep_ratio must lie in (0, 1), got {}",
                self.packnet_keep_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub kind: SuiteKind,
    pub n_tasks: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            kind: SuiteKind::Goal,
            n_tasks: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub suite: SuiteConfig,
    /// One run per paradigm per seed.
    pub paradigms: Vec<ParadigmConfig>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            name: "experiment".into(),
            suite: SuiteConfig::default(),
            paradigms: vec![ParadigmConfig::default()],
            seeds: vec![0, 1, 2],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output_dir: "runs".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.suite.n_tasks == 0 {
            return Err(Error::Config("suite.n_tasks must be >= 1".into()));
        }
        if self.paradigms.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("need at least one paradigm and one seed".into()));
        }
        for p in &self.paradigms {
            p.validate()?;
        }
        self.model.validate(self.suite.n_tasks)?;
        self.train.validate()
    }
}

/// Stable 64-bit FNV-1a hash, used to tie run directories to their config.
pub fn fingerprint(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
