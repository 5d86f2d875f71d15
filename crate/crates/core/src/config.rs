//! Run configuration shared by every subcommand.
//!
//! A run starts from a preset, merges a TOML file over it key by key and
//! finally applies command-line flags. Unknown keys are rejected with their
//! name.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{CorpusSpec, ToySnrSpec};
use crate::error::{Error, Result};
use crate::network::UNetConfig;
use crate::stft::CodecConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Paper,
    Tiny,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Preset::Paper => "paper",
            Preset::Tiny => "tiny",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::config("preset", format!("unknown preset {s:?} (expected paper or tiny)"))),
        }
    }
}

/// Value type used for model parameters during training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Model initialisation and training RNG seed.
    pub seed: u64,
    pub precision: Precision,
    /// Corpus directory holding the manifest.
    pub data_dir: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    /// Checkpoint to resume from or to load for inference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Steps between checkpoints during training.
    pub checkpoint_every: u64,
    pub unet: UNetConfig,
    pub codec: CodecConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    pub toy: ToySnrSpec,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let unet = match preset {
            Preset::Paper => UNetConfig::paper(),
            Preset::Tiny => UNetConfig::tiny(),
        };
        let codec = match preset {
            Preset::Paper => CodecConfig::default(),
            Preset::Tiny => CodecConfig::for_bins(unet.freq_bins),
        };
        Self {
            preset,
            seed: 0,
            precision: Precision::F32,
            data_dir: PathBuf::from("data"),
            out: PathBuf::from("runs"),
            checkpoint: None,
            checkpoint_every: 1000,
            unet,
            codec,
            train: TrainConfig::default(),
            corpus: CorpusSpec {
                channels: unet.channels,
                ..CorpusSpec::default()
            },
            toy: ToySnrSpec::default(),
        }
    }

    /// The paper-scale configuration as TOML.
    pub fn paper_defaults_toml() -> String {
        toml::to_string_pretty(&Self::preset(Preset::Paper)).expect("config serialises")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format("config", e.to_string()))
    }

    /// Preset defaults (flag, then file, then `fallback`), overlaid with the
    /// file's keys.
    pub fn resolve(file: Option<&Path>, preset_flag: Option<Preset>, fallback: Preset) -> Result<Self> {
        let table = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::format("config", format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        let preset = match (preset_flag, table.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| Error::config("preset", "must be a string"))?
                .parse()?,
            (None, None) => fallback,
        };
        let mut merged = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::format("config", e.to_string()))?;
        merge(&mut merged, table);
        merged.insert("preset".into(), toml::Value::String(preset.to_string()));
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::format("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.codec.validate()?;
        if self.codec.freq_bins() != self.unet.freq_bins {
            return Err(Error::config(
                "codec.window_len",
                format!("gives {} bins but unet.freq_bins is {}", self.codec.freq_bins(), self.unet.freq_bins),
            ));
        }
        if self.codec.samples_for_frames(self.unet.frames).is_none() {
            return Err(Error::config("codec.pad", "leaves a segment shorter than one window for unet.frames"));
        }
        if self.corpus.channels != self.unet.channels {
            return Err(Error::config(
                "corpus.channels",
                format!("{} does not match unet.channels = {}", self.corpus.channels, self.unet.channels),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be positive"));
        }
        self.train.validate()?;
        self.toy.validate()
    }

    /// Samples per model segment.
    pub fn segment_len(&self) -> usize {
        self.codec.samples_for_frames(self.unet.frames).unwrap_or(0)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
