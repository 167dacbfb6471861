//! End-to-end run configuration: one JSON document with a section per
//! stage. Every field has a default so partial documents work, unknown keys
//! are rejected everywhere, and the master seed deterministically derives
//! every per-stage seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arflow::FlowConfig;
use crate::error::{Error, Result};
use crate::gdpo::GdpoConfig;
use crate::motionvae::VaeConfig;
use crate::rng::Stream;
use crate::samplers::{SamplerConfig, WindowConfig};
use crate::synthdata::DyadConfig;

/// Per-stage seed derived from the master seed, so stages draw from
/// decorrelated streams and adding a stage never shifts another's draws.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    Stream::derive(master, &["stage", stage], &[]).below(u64::MAX)
}

/// Corpus settings: the synthetic conversation generator plus how many
/// conversations to train on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Conversations in the training corpus.
    pub train_dyads: usize,
    /// Generator settings shared by training and evaluation corpora.
    pub dyad: DyadConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { train_dyads: 24, dyad: DyadConfig::default() }
    }
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out conversations scored per evaluation pass.
    pub eval_dyads: usize,
    /// Generations per context for the diversity metric (≥ 2).
    pub diversity_samples: usize,
    /// Contexts the diversity metric averages over.
    pub diversity_contexts: usize,
    /// Withhold the text prompt during evaluation rollouts, so the model
    /// must cover the reaction modes without being told which to take —
    /// the condition under which mean-collapse shows.
    pub withhold_text: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_dyads: 12,
            diversity_samples: 4,
            diversity_contexts: 4,
            withhold_text: true,
        }
    }
}

/// Filesystem settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Output directory for checkpoints, reports, and manifests. The CLI
    /// lets a flag or environment variable override it.
    pub out_dir: String,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { out_dir: "runs".into() }
    }
}

/// Master configuration for a full run.
///
/// The top-level `seed` drives everything: the nested `data.dyad.seed` and
/// `sampler.seed` fields are overwritten with seeds derived from it when a
/// document is loaded (or [`RunConfig::with_seed`] is called), so one number
/// pins the whole pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub vae: VaeConfig,
    pub flow: FlowConfig,
    pub sampler: SamplerConfig,
    pub window: WindowConfig,
    pub gdpo: GdpoConfig,
    pub metrics: EvalConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            data: DataSection::default(),
            vae: VaeConfig::default(),
            flow: FlowConfig::default(),
            sampler: SamplerConfig::default(),
            window: WindowConfig::default(),
            gdpo: GdpoConfig::default(),
            metrics: EvalConfig::default(),
            io: IoConfig::default(),
        };
        cfg.propagate_seed();
        cfg
    }
}

impl RunConfig {
    /// Desk-scale preset for the collapse-and-repair demonstration: short
    /// two-mode conversations and a model small enough to train on one CPU
    /// core in minutes, yet expressive enough to collapse and recover.
    pub fn demo() -> Self {
        let mut cfg = RunConfig::default();
        cfg.data.train_dyads = 24;
        cfg.data.dyad.frames = 64;
        cfg.data.dyad.seg_min = 12;
        cfg.data.dyad.seg_max = 20;
        cfg.data.dyad.intents = 2;
        cfg.data.dyad.modes = 2;
        cfg.vae.steps = 400;
        cfg.flow.layers = 2;
        cfg.flow.heads = 4;
        cfg.flow.width = 64;
        cfg.flow.steps = 1800;
        // Training horizon is 8 latent tokens; windows must not exceed it.
        cfg.window.window_tokens = 8;
        cfg.window.carry = 1;
        cfg.propagate_seed();
        cfg
    }

    /// Re-derive every nested seed from the master seed.
    fn propagate_seed(&mut self) {
        self.data.dyad.seed = stage_seed(self.seed, "data");
        self.sampler.seed = stage_seed(self.seed, "sampler");
    }

    /// Replace the master seed (e.g. from a `--seed` flag) and re-derive.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.propagate_seed();
        self
    }

    /// Parse a JSON document, derive nested seeds, and validate. Malformed
    /// documents are configuration (usage) errors, not runtime failures.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Validate every section and the couplings between them.
    pub fn validate(&self) -> Result<()> {
        self.data.dyad.validate()?;
        self.vae.validate()?;
        self.flow.validate()?;
        self.sampler.validate()?;
        self.window.validate()?;
        self.gdpo.validate()?;
        if self.data.train_dyads == 0 {
            return Err(Error::Config("training corpus must be non-empty".into()));
        }
        if self.metrics.eval_dyads == 0 {
            return Err(Error::Config("evaluation needs at least one conversation".into()));
        }
        if self.metrics.diversity_samples < 2 {
            return Err(Error::Config("diversity needs at least two generations".into()));
        }
        if self.metrics.diversity_contexts == 0 {
            return Err(Error::Config("diversity needs at least one context".into()));
        }
        if self.io.out_dir.is_empty() {
            return Err(Error::Config("output directory must be non-empty".into()));
        }
        if self.flow.r != self.vae.r || self.flow.latent_dim != self.vae.latent_dim {
            return Err(Error::Config(format!(
                "flow (r={}, D_v={}) does not match VAE (r={}, D_v={})",
                self.flow.r, self.flow.latent_dim, self.vae.r, self.vae.latent_dim
            )));
        }
        if self.flow.audio_dim != self.data.dyad.audio_dim {
            return Err(Error::Config(format!(
                "flow audio width {} does not match generator width {}",
                self.flow.audio_dim, self.data.dyad.audio_dim
            )));
        }
        if (self.flow.text_vocab as u64) < self.data.dyad.modes as u64 {
            return Err(Error::Config(format!(
                "text vocabulary {} cannot name {} reaction modes",
                self.flow.text_vocab, self.data.dyad.modes
            )));
        }
        Ok(())
    }
}
