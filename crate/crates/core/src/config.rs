//! Experiment configuration: one hierarchical TOML file, preset defaults
//! underneath it, environment overrides for paths on top.
//!
//! Resolution order, later wins: preset defaults, the config file, the
//! `PRISM_*` path variables, command-line flags. The resolved value is
//! complete, so writing it back out freezes the run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptationConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::model::{ModelConfig, PretrainConfig};
use crate::optim::AdamWConfig;
use crate::protocol::{FactorGrid, HarnessOptions};
use crate::recording::SyntheticTaskSpec;
use crate::signal::PipelineConfig;
use crate::tokenizer::TokenizerConfig;

pub const ENV_DATA: &str = "PRISM_DATA";
pub const ENV_OUTPUT: &str = "PRISM_OUTPUT";
pub const ENV_CHECKPOINT: &str = "PRISM_CHECKPOINT";

/// File name of the frozen config written into every run directory.
pub const FROZEN_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Single-CPU scale.
    #[default]
    Desk,
    /// Full-size backbone and schedule.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Labeled dataset directory; `synth` writes here, the other commands
    /// read from it. Defaults to `<output>/data`.
    pub path: Option<PathBuf>,
    /// Pretraining pools. Empty means `[path]`.
    pub pretrain_paths: Vec<PathBuf>,
    pub synthetic: SyntheticTaskSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            pretrain_paths: Vec::new(),
            synthetic: SyntheticTaskSpec::two_class(20),
        }
    }
}

/// Model names understood by `sweep`.
pub const MODEL_NAMES: [&str; 3] = ["bandpower", "subject_keyed", "prism"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub grid: FactorGrid,
    pub options: HarnessOptions,
    /// One fit per seed per cell.
    pub seeds: Vec<u64>,
    pub models: Vec<String>,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            grid: FactorGrid::default(),
            options: HarnessOptions::default(),
            seeds: (0..5).collect(),
            models: MODEL_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Root of every named random substream.
    pub seed: u64,
    pub output: PathBuf,
    /// Pretrained (or adapted) checkpoint consumed by `adapt`, `eval` and
    /// `sweep`; defaults to the one under `output`.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub pretrain: PretrainConfig,
    pub adaptation: AdaptationConfig,
    pub head: HeadConfig,
    pub protocol: ProtocolSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

/// Recursively overlay `top` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Command-line values that take precedence over the file and environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, pretrain) = match preset {
            Preset::Desk => (ModelConfig::desk(), PretrainConfig::default()),
            Preset::Paper => (
                ModelConfig::paper(),
                PretrainConfig {
                    steps: 100_000,
                    batch_size: 64,
                    optimizer: AdamWConfig {
                        lr: 3e-4,
                        weight_decay: 0.05,
                        warmup_steps: 2_000,
                        total_steps: 100_000,
                        ..AdamWConfig::default()
                    },
                },
            ),
        };
        Self {
            preset,
            seed: 0,
            output: PathBuf::from("runs/default"),
            checkpoint: None,
            data: DataConfig::default(),
            pipeline: PipelineConfig::default(),
            model,
            mask: MaskConfig::default(),
            pretrain,
            adaptation: AdaptationConfig::default(),
            head: HeadConfig::default(),
            protocol: ProtocolSection::default(),
        }
    }

    /// Parse `text` over the defaults of its preset (or `preset_override`).
    pub fn from_toml_str(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let file: toml::Value = toml::from_str(text)?;
        let preset = match preset_override {
            Some(p) => p,
            None => match file.get("preset") {
                Some(v) => v.clone().try_into::<Preset>()?,
                None => Preset::Desk,
            },
        };
        let mut value = toml::Value::try_from(Self::preset(preset))
            .map_err(|e| Error::InvalidConfig(format!("preset serialization: {e}")))?;
        merge(&mut value, file);
        let mut cfg: Self = value.try_into()?;
        cfg.preset = preset;
        Ok(cfg)
    }

    /// Full resolution: preset, optional file, environment, flags.
    pub fn resolve(path: Option<&Path>, ov: &Overrides, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_str(&text, ov.preset)?
            }
            None => Self::preset(ov.preset.unwrap_or_default()),
        };
        if let Some(v) = env(ENV_DATA) {
            cfg.data.path = Some(PathBuf::from(v));
        }
        if let Some(v) = env(ENV_OUTPUT) {
            cfg.output = PathBuf::from(v);
        }
        if let Some(v) = env(ENV_CHECKPOINT) {
            cfg.checkpoint = Some(PathBuf::from(v));
        }
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(o) = &ov.output {
            cfg.output = o.clone();
        }
        if let Some(c) = &ov.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        if cfg.data.path.is_none() {
            cfg.data.path = Some(cfg.output.join("data"));
        }
        Ok(cfg)
    }

    /// The tokenizer is fixed by the backbone's patch geometry.
    pub fn tokenizer(&self) -> TokenizerConfig {
        self.model.tokenizer()
    }

    pub fn data_path(&self) -> PathBuf {
        self.data
            .path
            .clone()
            .unwrap_or_else(|| self.output.join("data"))
    }

    pub fn pretrain_paths(&self) -> Vec<PathBuf> {
        if self.data.pretrain_paths.is_empty() {
            vec![self.data_path()]
        } else {
            self.data.pretrain_paths.clone()
        }
    }

    /// Every sub-config satisfies its own invariants.
    pub fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        self.pipeline.validate()?;
        self.model.validate()?;
        self.tokenizer().validate()?;
        self.mask.validate()?;
        self.pretrain.optimizer.validate()?;
        if self.pretrain.batch_size == 0 {
            return Err(Error::InvalidConfig("pretrain.batch_size must be positive".into()));
        }
        self.adaptation.validate(self.model.encoder_layers)?;
        self.head.validate()?;
        self.protocol.grid.validate()?;
        if self.protocol.seeds.is_empty() {
            return Err(Error::InvalidConfig("protocol.seeds is empty".into()));
        }
        if self.protocol.models.is_empty() {
            return Err(Error::InvalidConfig("protocol.models is empty".into()));
        }
        if let Some(m) = self
            .protocol
            .models
            .iter()
            .find(|m| !MODEL_NAMES.contains(&m.as_str()))
        {
            return Err(Error::InvalidConfig(format!(
                "unknown model {m:?}; expected one of {MODEL_NAMES:?}"
            )));
        }
        Ok(())
    }

    /// Each path must exist; the error names the first that does not.
    pub fn require_paths<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
        for p in paths {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(format!("config serialization: {e}")))
    }

    /// Write the resolved config into `dir`.
    pub fn freeze(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(FROZEN_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
