//! Single TOML configuration file; sections mirror the modules. The effective
//! configuration is embedded in every bank's provenance block.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compaction::SummarizerConfig;
use crate::corpus::EmbedderConfig;
use crate::error::{Error, Result};
use crate::finch::FinchConfig;
use crate::membank::BankMode;
use crate::retrieval::RetrievalConfig;

pub const SCHEMA: &str = "hiermem.config/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub captions: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub normalize: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            captions: None,
            embeddings: None,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub mode: BankMode,
    /// Record the wall-clock build time in the bank. Off keeps the file
    /// byte-reproducible.
    pub record_timestamp: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Frames per video after subsampling or padding.
    pub frames: usize,
    /// Temporal anchors per video.
    pub count: usize,
    pub renormalize: bool,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            frames: 100,
            count: 10,
            renormalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeTokenConfig {
    pub bins: u32,
}

impl Default for TimeTokenConfig {
    fn default() -> Self {
        Self { bins: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusConfig,
    pub embedder: EmbedderConfig,
    pub summarizer: SummarizerConfig,
    pub finch: FinchConfig,
    pub build: BuildConfig,
    pub anchors: AnchorConfig,
    pub retrieval: RetrievalConfig,
    pub time_tokens: TimeTokenConfig,
    pub service: ServiceConfig,
}

/// Named parameter sets for the two benchmark regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// 10 anchors, 10 features per level.
    YouCook2,
    /// 30 anchors, 30 features per level.
    Vitt,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "youcook2" => Ok(Profile::YouCook2),
            "vitt" => Ok(Profile::Vitt),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

impl Config {
    pub fn profile(profile: Profile) -> Self {
        let mut c = Config::default();
        let (w, k) = match profile {
            Profile::YouCook2 => (10, 10),
            Profile::Vitt => (30, 30),
        };
        c.anchors.count = w;
        c.retrieval.k = k;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// JSON form recorded in bank provenance and echoed by the CLI.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes to JSON");
        v["schema"] = serde_json::Value::from(SCHEMA);
        v
    }

    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate()?;
        if self.anchors.count == 0 || self.anchors.count > self.anchors.frames {
            return Err(Error::Config(format!(
                "anchors.count {} must be in 1..={}",
                self.anchors.count, self.anchors.frames
            )));
        }
        if self.time_tokens.bins == 0 {
            return Err(Error::Config("time_tokens.bins must be positive".into()));
        }
        if self.embedder.dim == 0 {
            return Err(Error::Config("embedder.dim must be positive".into()));
        }
        if self.summarizer.max_words == 0 {
            return Err(Error::Config(
                "summarizer.max_words must be positive".into(),
            ));
        }
        Ok(())
    }
}
