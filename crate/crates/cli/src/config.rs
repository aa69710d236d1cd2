//! Run configuration file. Every field is optional; command-line flags win
//! over the file and the file wins over the built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use omg_core::loss::LossWeights;
use omg_core::model::GranularityConfig;
use omg_core::schedule::ScheduleConfig;
use omg_core::text::{Lexicon, DEFAULT_COLORS, DEFAULT_TYPES};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tracks: Option<PathBuf>,
    /// Directory of `<id>/<frame>.omgt` images for tracks without a scene.
    pub frames: Option<PathBuf>,
    /// Lexicon files, one entry per line, `alias=canonical` allowed.
    pub colors: Option<PathBuf>,
    pub types: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub dim: Option<usize>,
    pub schedule: Option<ScheduleConfig>,
    pub weights: Option<LossWeights>,
    pub granularity: Option<GranularityToggles>,
    pub mft: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GranularityToggles {
    pub context: Option<bool>,
    pub motion: Option<bool>,
    pub local: Option<bool>,
    pub prompt: Option<bool>,
}

impl GranularityToggles {
    /// `self` over `fallback` over everything enabled.
    pub fn resolve(self, fallback: Option<GranularityToggles>) -> GranularityConfig {
        let f = fallback.unwrap_or_default();
        let d = GranularityConfig::default();
        GranularityConfig {
            context: self.context.or(f.context).unwrap_or(d.context),
            motion: self.motion.or(f.motion).unwrap_or(d.motion),
            local: self.local.or(f.local).unwrap_or(d.local),
            prompt: self.prompt.or(f.prompt).unwrap_or(d.prompt),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn schedule(&self) -> ScheduleConfig {
        self.schedule.unwrap_or_default()
    }

    pub fn weights(&self) -> LossWeights {
        self.weights.unwrap_or_default()
    }

    pub fn lexicon(&self) -> anyhow::Result<Lexicon> {
        let read = |p: &Option<PathBuf>, default: &str| -> anyhow::Result<String> {
            match p {
                Some(p) => std::fs::read_to_string(p)
                    .with_context(|| format!("reading lexicon {}", p.display())),
                None => Ok(default.to_owned()),
            }
        };
        Ok(Lexicon::parse(
            &read(&self.colors, DEFAULT_COLORS)?,
            &read(&self.types, DEFAULT_TYPES)?,
        )?)
    }
}
