//! Strict JSON run configuration. Every section and key is optional; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::CoverScale;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::metrics::StatsConfig;
use crate::spatial::SplitConfig;
use crate::train::{BotaspConfig, ModelConfig, TrainConfig};

use super::synth::SynthConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub releves: Option<PathBuf>,
    pub cover: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub presence: Option<PathBuf>,
    pub occurrences: Option<PathBuf>,
    pub soil: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Pretrained Botania checkpoint for the relevé tower.
    pub pretrained: Option<PathBuf>,
    /// Trained alignment or baseline checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub split_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// The one seed of a run; seeds nested in other sections are replaced by
    /// it in [`RunConfig::resolved`].
    pub seed: u64,
    /// Unit-normalize embedding rows when reading `EMB1` files.
    pub normalize_on_load: bool,
    pub data: DataPaths,
    pub cover_scale: CoverScale,
    pub model: ModelConfig,
    pub botaclip: TrainConfig,
    pub botania: TrainConfig,
    pub botasp: TrainConfig,
    pub botasp_arch: BotaspConfig,
    pub split: SplitConfig,
    pub eval: EvalConfig,
    pub stats: StatsConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            normalize_on_load: true,
            data: DataPaths::default(),
            cover_scale: CoverScale::default(),
            model: ModelConfig::default(),
            botaclip: TrainConfig::botaclip(),
            botania: TrainConfig::botania(),
            botasp: TrainConfig::botasp(),
            botasp_arch: BotaspConfig::default(),
            split: SplitConfig::default(),
            eval: EvalConfig::default(),
            stats: StatsConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copy with the top-level seed pushed into every section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.botaclip.seed = c.seed;
        c.botania.seed = c.seed;
        c.botasp.seed = c.seed;
        c.eval.forest.seed = c.seed;
        c.synth.seed = c.seed;
        c
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration's canonical JSON.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(&self.resolved()).expect("config serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
