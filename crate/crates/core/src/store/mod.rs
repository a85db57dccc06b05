//! On-disk cache of per-video frame embeddings and per-(template, class)
//! label-text embeddings.
//!
//! A store is a directory holding `manifest.toml` and a binary payload (see
//! [`format`] for the byte layout).

pub mod format;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use format::{read_store, write_store, MANIFEST_FILE, PAYLOAD_FILE};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" | "train" => Ok(Split::Base),
            "val" => Ok(Split::Val),
            "novel" | "test" => Ok(Split::Novel),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Provenance of a generated store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub class_sep: f64,
    pub text_corr: f64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub dataset_name: String,
    /// Frames per video.
    pub frames: usize,
    /// Embedding width shared by frames and texts.
    pub dim: usize,
    pub n_temp: usize,
    pub classes: Vec<String>,
    #[serde(default)]
    pub templates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
    pub videos: Vec<VideoEntry>,
}

impl StoreManifest {
    /// Checks every manifest invariant, naming the offending field on failure.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::validation(
                "format_version",
                format!("unsupported version {}", self.format_version),
            ));
        }
        if self.frames < 2 {
            return Err(Error::validation("frames", format!("need at least 2, got {}", self.frames)));
        }
        if self.dim < 4 {
            return Err(Error::validation("dim", format!("need at least 4, got {}", self.dim)));
        }
        if self.n_temp < 1 {
            return Err(Error::validation("n_temp", "need at least one template"));
        }
        if !self.templates.is_empty() && self.templates.len() != self.n_temp {
            return Err(Error::validation(
                "templates",
                format!("{} strings for n_temp = {}", self.templates.len(), self.n_temp),
            ));
        }
        if self.classes.is_empty() {
            return Err(Error::validation("classes", "no classes"));
        }
        let mut names = BTreeSet::new();
        for c in &self.classes {
            if !names.insert(c) {
                return Err(Error::validation("classes", format!("duplicate class `{c}`")));
            }
        }
        let mut ids = BTreeSet::new();
        let mut class_splits: HashMap<usize, BTreeSet<Option<Split>>> = HashMap::new();
        for v in &self.videos {
            if !ids.insert(&v.id) {
                return Err(Error::validation("videos.id", format!("duplicate video id `{}`", v.id)));
            }
            if v.class >= self.classes.len() {
                return Err(Error::validation(
                    "videos.class",
                    format!("video `{}` has class {} of {}", v.id, v.class, self.classes.len()),
                ));
            }
            class_splits.entry(v.class).or_default().insert(v.split);
        }
        for (class, splits) in class_splits {
            if splits.len() > 1 {
                return Err(Error::validation(
                    "videos.split",
                    format!(
                        "class `{}` appears in several splits: {:?}",
                        self.classes[class], splits
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Classes whose videos are assigned to `split`, in class-index order.
    pub fn split_classes(&self, split: Split) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .videos
            .iter()
            .filter(|v| v.split == Some(split))
            .map(|v| v.class)
            .collect();
        set.into_iter().collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// Embeddings keyed the way producers emit them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingRecords {
    /// `frames × dim` per video id.
    pub visual: BTreeMap<String, Tensor<f32>>,
    /// `dim` values per `(template, class)`.
    pub text: BTreeMap<(usize, usize), Vec<f32>>,
}

/// Validated, in-memory store. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    manifest: StoreManifest,
    /// Aligned with `manifest.videos`.
    visual: Vec<Tensor<f32>>,
    /// Row `template * n_classes + class`.
    text: Vec<Vec<f32>>,
    by_class: Vec<Vec<usize>>,
}

impl EmbeddingStore {
    pub fn new(manifest: StoreManifest, mut records: EmbeddingRecords) -> Result<Self> {
        manifest.validate()?;
        let (l, d) = (manifest.frames, manifest.dim);

        let mut missing = Vec::new();
        for v in &manifest.videos {
            if !records.visual.contains_key(&v.id) {
                missing.push(format!("visual:{}", v.id));
            }
        }
        for t in 0..manifest.n_temp {
            for c in 0..manifest.classes.len() {
                if !records.text.contains_key(&(t, c)) {
                    missing.push(format!("text:({t},{c})"));
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::validation("records", format!("missing keys: {}", missing.join(", "))));
        }
        let known: BTreeSet<&String> = manifest.videos.iter().map(|v| &v.id).collect();
        if let Some(extra) = records.visual.keys().find(|k| !known.contains(k)) {
            return Err(Error::validation("records", format!("video `{extra}` not in manifest")));
        }

        let mut visual = Vec::with_capacity(manifest.videos.len());
        for v in &manifest.videos {
            let t = records.visual.remove(&v.id).expect("checked above");
            if t.shape() != [l, d] {
                return Err(Error::validation(
                    "visual",
                    format!("video `{}` has shape {:?}, expected [{l}, {d}]", v.id, t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::validation("visual", format!("video `{}` has non-finite values", v.id)));
            }
            visual.push(t);
        }
        let n_classes = manifest.classes.len();
        let mut text = Vec::with_capacity(manifest.n_temp * n_classes);
        for t in 0..manifest.n_temp {
            for c in 0..n_classes {
                let row = records.text.remove(&(t, c)).expect("checked above");
                if row.len() != d {
                    return Err(Error::validation(
                        "text",
                        format!("(template {t}, class {c}) has dimension {}, expected {d}", row.len()),
                    ));
                }
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(Error::validation("text", format!("(template {t}, class {c}) is non-finite")));
                }
                text.push(row);
            }
        }
        if let Some(k) = records.text.keys().next() {
            return Err(Error::validation("records", format!("text key {k:?} out of range")));
        }

        let mut by_class = vec![Vec::new(); n_classes];
        for (i, v) in manifest.videos.iter().enumerate() {
            by_class[v.class].push(i);
        }
        Ok(Self {
            manifest,
            visual,
            text,
            by_class,
        })
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn frames(&self) -> usize {
        self.manifest.frames
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn n_videos(&self) -> usize {
        self.manifest.videos.len()
    }

    /// `frames × dim` embeddings of video `index` (manifest order).
    pub fn visual(&self, index: usize) -> &Tensor<f32> {
        &self.visual[index]
    }

    pub fn text(&self, template: usize, class: usize) -> &[f32] {
        &self.text[template * self.n_classes() + class]
    }

    pub fn video(&self, index: usize) -> &VideoEntry {
        &self.manifest.videos[index]
    }

    /// Video indices of `class`, in manifest order.
    pub fn videos_of_class(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    /// Copies the embeddings back into keyed records.
    pub fn records(&self) -> EmbeddingRecords {
        let visual = self
            .manifest
            .videos
            .iter()
            .zip(&self.visual)
            .map(|(v, t)| (v.id.clone(), t.clone()))
            .collect();
        let n = self.n_classes();
        let text = self
            .text
            .iter()
            .enumerate()
            .map(|(i, row)| ((i / n, i % n), row.clone()))
            .collect();
        EmbeddingRecords { visual, text }
    }

    /// Same embeddings under a new manifest (e.g. after re-splitting).
    pub fn with_manifest(&self, manifest: StoreManifest) -> Result<Self> {
        Self::new(manifest, self.records())
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        format::write_store_files(dir.as_ref(), self)
    }
}
