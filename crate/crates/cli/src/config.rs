//! Run configuration: one TOML file with a section per component.
//!
//! Resolution order is flag > file > default. The top-level `seed` fills
//! every component seed the file leaves unset; `--seed` overrides all of
//! them. The resolved configuration is what gets echoed next to outputs.

use std::path::Path;

use anyhow::{bail, Context};
use finegrain_core::curation::CurationConfig;
use finegrain_core::synth::SynthConfig;
use finegrain_core::trainer::StageConfig;
use finegrain_core::vlm::VlmConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generation budget per sample.
    pub max_new: usize,
    /// IoU threshold for Caption2Bbox accuracy.
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_new: 40, tau: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for data-parallel work; 0 uses one per core.
    pub workers: usize,
    pub synth: SynthConfig,
    pub curation: CurationConfig,
    pub model: VlmConfig,
    pub stage0: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            synth: SynthConfig::default(),
            curation: CurationConfig::default(),
            model: VlmConfig::default(),
            stage0: StageConfig::stage0(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            eval: EvalConfig::default(),
        }
    }
}

/// Marks configuration problems so `main` can map them to the usage exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

const SEEDED: [&str; 4] = ["curation", "stage0", "stage1", "stage2"];
const STAGES: [&str; 3] = ["stage0", "stage1", "stage2"];

impl RunConfig {
    pub fn stage(&self, n: u8) -> &StageConfig {
        match n {
            0 => &self.stage0,
            1 => &self.stage1,
            _ => &self.stage2,
        }
    }

    pub fn stage_mut(&mut self, n: u8) -> &mut StageConfig {
        match n {
            0 => &mut self.stage0,
            1 => &mut self.stage1,
            _ => &mut self.stage2,
        }
    }

    /// Parses TOML text and resolves seeds and stage tags.
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| config_error(format!("invalid TOML: {e}")))?;
        let mut cfg: RunConfig = table
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        let has = |section: &str, key: &str| {
            table
                .get(section)
                .and_then(|s| s.as_table())
                .is_some_and(|s| s.contains_key(key))
        };
        for (n, section) in STAGES.iter().enumerate() {
            if has(section, "stage") && cfg.stage(n as u8).stage != n as u8 {
                return Err(config_error(format!("[{section}] stage must be {n}")));
            }
            cfg.stage_mut(n as u8).stage = n as u8;
        }
        let seed = cfg.seed;
        for section in SEEDED {
            if !has(section, "seed") {
                cfg.set_component_seed(section, seed);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).map_err(|e| match e.downcast::<ConfigError>() {
                    Ok(c) => config_error(format!("{}: {c}", p.display())),
                    Err(e) => e,
                })
            }
        }
    }

    fn set_component_seed(&mut self, section: &str, seed: u64) {
        match section {
            "curation" => self.curation.seed = seed,
            "stage0" => self.stage0.seed = seed,
            "stage1" => self.stage1.seed = seed,
            "stage2" => self.stage2.seed = seed,
            _ => unreachable!("unknown seeded section {section}"),
        }
    }

    /// `--seed`: replaces the global seed and every component seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        for section in SEEDED {
            self.set_component_seed(section, seed);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let wrap = |r: finegrain_core::Result<()>, what: &str| r.map_err(|e| config_error(format!("[{what}] {e}")));
        wrap(self.synth.validate(), "synth")?;
        wrap(self.curation.validate(), "curation")?;
        wrap(self.model.validate(), "model")?;
        for (n, section) in STAGES.iter().enumerate() {
            wrap(self.stage(n as u8).validate(), section)?;
        }
        if !(self.eval.tau > 0.0 && self.eval.tau <= 1.0) || self.eval.max_new == 0 {
            bail!(config_error("[eval] tau must be in (0, 1] and max_new positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Writes the resolved configuration to `path`.
    pub fn echo(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }
}
