//! Run configuration, loadable from a versioned TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::store::{EmbeddingStore, Split};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    CeOnly,
    CePlusPride,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::CeOnly => "ce_only",
            LossMode::CePlusPride => "ce_plus_pride",
        })
    }
}

/// Class partition by counts in class-index order. Used when the store's
/// manifest carries no split assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base: usize,
    pub val: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub store: Option<PathBuf>,
    pub split: Option<SplitSpec>,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub model: ModelConfig,
    pub tau: f64,
    pub ema_decay: f64,
    pub loss_mode: LossMode,
    pub optimizer: AdamConfig,
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    /// Validation-based model selection period, in training episodes.
    pub val_every: usize,
    pub eval_split: Split,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            store: None,
            split: None,
            n_way: 5,
            k_shot: 5,
            n_query: 5,
            model: ModelConfig::default(),
            tau: 0.1,
            ema_decay: 0.99,
            loss_mode: LossMode::CeOnly,
            optimizer: AdamConfig::default(),
            train_episodes: 500,
            val_episodes: 100,
            test_episodes: 200,
            val_every: 500,
            eval_split: Split::Novel,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.n_way == 0 || self.k_shot == 0 || self.n_query == 0 {
            return Err(Error::Config(format!(
                "episode counts must be positive (N={}, K={}, M={})",
                self.n_way, self.k_shot, self.n_query
            )));
        }
        if self.test_episodes == 0 || self.val_every == 0 {
            return Err(Error::Config("test_episodes and val_every must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature τ must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        self.optimizer.validate()?;
        self.model.validate()
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Copies the store's frame count and width into the model config, and
    /// applies `split` when the manifest has no assignment of its own.
    pub fn resolve(&mut self, store: EmbeddingStore) -> Result<EmbeddingStore> {
        self.model.frames = store.frames();
        self.model.dim = store.dim();
        self.validate()?;
        let assigned = store.manifest().videos.iter().any(|v| v.split.is_some());
        match (self.split, assigned) {
            (Some(spec), _) => {
                let m = crate::episode::split_by_counts(store.manifest(), spec.base, spec.val)?;
                store.with_manifest(m)
            }
            (None, true) => Ok(store),
            (None, false) => Err(Error::Config(
                "store has no split assignment; run `split` or set `split` in the config".into(),
            )),
        }
    }

    /// Fails unless the store matches the model's frame count and width.
    pub fn check_store(&self, store: &EmbeddingStore) -> Result<()> {
        if store.frames() != self.model.frames || store.dim() != self.model.dim {
            return Err(Error::dim(
                "check_store",
                format!(
                    "store has L={} d={}, model expects L={} d={}",
                    store.frames(),
                    store.dim(),
                    self.model.frames,
                    self.model.dim
                ),
            ));
        }
        Ok(())
    }
}
