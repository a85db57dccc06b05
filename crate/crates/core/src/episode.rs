//! N-way K-shot episode sampling and base/val/novel class splits.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, Split, StoreManifest};
use crate::text::select_template;

/// One few-shot task. Support and query lists are slot-major: the videos of
/// class slot `n` are `support[n*K..(n+1)*K]` and `query[n*M..(n+1)*M]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Dataset class index of each slot.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub template_index: usize,
}

impl Episode {
    /// Ground-truth slot of every query, in query order.
    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.query.len()).map(|i| i / self.n_query).collect()
    }

    pub fn dump(&self, store: &EmbeddingStore) -> EpisodeDump {
        let m = store.manifest();
        let refs = |videos: &[usize], per: usize| {
            videos
                .iter()
                .enumerate()
                .map(|(i, &v)| VideoRef {
                    video_id: m.videos[v].id.clone(),
                    slot: i / per,
                })
                .collect()
        };
        EpisodeDump {
            classes: self.classes.iter().map(|&c| m.classes[c].clone()).collect(),
            support: refs(&self.support, self.k_shot),
            query: refs(&self.query, self.n_query),
            template_index: self.template_index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRef {
    pub video_id: String,
    pub slot: usize,
}

/// Reproducibility record of an episode, by video id and class name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeDump {
    pub classes: Vec<String>,
    pub support: Vec<VideoRef>,
    pub query: Vec<VideoRef>,
    pub template_index: usize,
}

/// First `k` entries of `items` after a partial Fisher-Yates shuffle.
fn draw<T: Copy, R: Rng + ?Sized>(items: &[T], k: usize, rng: &mut R) -> Vec<T> {
    let mut pool = items.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Samples `n_way` classes of `split` uniformly without replacement, then
/// `k_shot + n_query` videos per class without replacement; the first
/// `k_shot` become support and the rest query.
pub fn sample_episode<R: Rng + ?Sized>(
    store: &EmbeddingStore,
    split: Split,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || n_query == 0 {
        return Err(Error::Config(format!(
            "episode counts must be positive (N={n_way}, K={k_shot}, M={n_query})"
        )));
    }
    let classes = store.manifest().split_classes(split);
    if classes.len() < n_way {
        return Err(Error::Capacity(format!(
            "{split} split has {} classes, {n_way}-way episodes need {n_way}",
            classes.len()
        )));
    }
    let need = k_shot + n_query;
    for &c in &classes {
        let have = store.videos_of_class(c).len();
        if have < need {
            return Err(Error::Capacity(format!(
                "class `{}` has {have} videos, K+M = {need} required",
                store.manifest().classes[c]
            )));
        }
    }
    let chosen = draw(&classes, n_way, rng);
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * n_query);
    for &c in &chosen {
        let vids = draw(store.videos_of_class(c), need, rng);
        support.extend_from_slice(&vids[..k_shot]);
        query.extend_from_slice(&vids[k_shot..]);
    }
    let template_index = select_template(rng, store.manifest().n_temp)?;
    Ok(Episode {
        n_way,
        k_shot,
        n_query,
        classes: chosen,
        support,
        query,
        template_index,
    })
}

/// Assigns every video to the split of its class. The three lists must
/// partition the store's classes; `val` may be empty.
pub fn split_store(manifest: &StoreManifest, base: &[String], val: &[String], novel: &[String]) -> Result<StoreManifest> {
    let mut assignment = vec![None; manifest.classes.len()];
    for (split, names) in [(Split::Base, base), (Split::Val, val), (Split::Novel, novel)] {
        for name in names {
            let c = manifest
                .class_index(name)
                .ok_or_else(|| Error::Config(format!("partition error: unknown class `{name}`")))?;
            if let Some(prev) = assignment[c] {
                return Err(Error::Config(format!(
                    "partition error: class `{name}` listed in both {prev} and {split}"
                )));
            }
            assignment[c] = Some(split);
        }
    }
    let unassigned: Vec<&str> = assignment
        .iter()
        .zip(&manifest.classes)
        .filter(|(a, _)| a.is_none())
        .map(|(_, n)| n.as_str())
        .collect();
    if !unassigned.is_empty() {
        return Err(Error::Config(format!(
            "partition error: classes not assigned to any split: {}",
            unassigned.join(", ")
        )));
    }
    let mut out = manifest.clone();
    for v in &mut out.videos {
        v.split = assignment[v.class];
    }
    out.validate()?;
    Ok(out)
}

/// Splits classes in index order: the first `n_base` are base, the next
/// `n_val` val, the rest novel.
pub fn split_by_counts(manifest: &StoreManifest, n_base: usize, n_val: usize) -> Result<StoreManifest> {
    let names = &manifest.classes;
    if n_base + n_val > names.len() {
        return Err(Error::Config(format!(
            "partition error: {n_base} base + {n_val} val exceeds {} classes",
            names.len()
        )));
    }
    split_store(
        manifest,
        &names[..n_base],
        &names[n_base..n_base + n_val],
        &names[n_base + n_val..],
    )
}

/// Checks the structural episode invariants; used by tests and the CLI dump.
pub fn check_episode(store: &EmbeddingStore, ep: &Episode) -> Result<()> {
    let s: BTreeSet<_> = ep.support.iter().collect();
    let q: BTreeSet<_> = ep.query.iter().collect();
    if s.len() != ep.support.len() || q.len() != ep.query.len() || !s.is_disjoint(&q) {
        return Err(Error::Usage("episode reuses a video".into()));
    }
    let distinct: BTreeSet<_> = ep.classes.iter().collect();
    if distinct.len() != ep.n_way
        || ep.support.len() != ep.n_way * ep.k_shot
        || ep.query.len() != ep.n_way * ep.n_query
    {
        return Err(Error::Usage("episode slot counts are inconsistent".into()));
    }
    for (i, &v) in ep.support.iter().enumerate() {
        if store.video(v).class != ep.classes[i / ep.k_shot] {
            return Err(Error::Usage(format!("support video {v} in wrong slot")));
        }
    }
    for (i, &v) in ep.query.iter().enumerate() {
        if store.video(v).class != ep.classes[i / ep.n_query] {
            return Err(Error::Usage(format!("query video {v} in wrong slot")));
        }
    }
    Ok(())
}
