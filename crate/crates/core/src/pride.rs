//! Prototype similarity difference (PRIDE): real-prototype banks, the
//! per-video score, the InfoNCE-style training loss and the learnable
//! CE/PRIDE mixture.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::model::{forward, EpisodeBatch, ModelConfig, ModelParams};
use crate::store::{EmbeddingStore, Split};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::text::select_template;

/// `dot(a, b) / (‖a‖·‖b‖)`, accumulated in f64.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", format!("lengths {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// One averaged prototype per class of an evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealPrototypeBank {
    /// Dataset class index of each row.
    pub classes: Vec<usize>,
    pub prototypes: Vec<Vec<f32>>,
}

impl RealPrototypeBank {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn position(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// `[N_bank × d_p]`
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let d = self.prototypes.first().map_or(0, |p| p.len());
        let data = self
            .prototypes
            .iter()
            .flat_map(|p| p.iter().map(|&v| T::from_f64_lossy(v as f64)))
            .collect();
        Tensor::new(vec![self.len(), d], data)
    }
}

/// `Sim_i − mean_{j≠i} Sim_j` with cosine similarities to the bank rows;
/// `true_pos` is the row of the prototype's own class.
pub fn pride_score(prototype: &[f32], true_pos: usize, bank: &RealPrototypeBank) -> Result<f64> {
    let n = bank.len();
    if n < 2 {
        return Err(Error::Config(format!("PRIDE needs at least 2 classes, bank has {n}")));
    }
    if true_pos >= n {
        return Err(Error::Usage(format!("class row {true_pos} outside bank of {n}")));
    }
    let mut own = 0.0;
    let mut others = 0.0;
    for (j, real) in bank.prototypes.iter().enumerate() {
        let sim = cosine_similarity(prototype, real)?;
        if j == true_pos {
            own = sim;
        } else {
            others += sim;
        }
    }
    Ok(own - others / (n - 1) as f64)
}

/// InfoNCE over bank rows with raw dot products:
/// `−log softmax_j(p·P_j/τ)[target]`, averaged over the rows of `prototypes`.
///
/// `prototypes` is `[B × d_p]`, `bank` is `[N_bank × d_p]` and is treated as
/// a constant.
pub fn pride_loss<'t, T: Element>(prototypes: Var<'t, T>, targets: &[usize], bank: &Tensor<T>, tau: f64) -> Result<Var<'t, T>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature τ must be positive, got {tau}")));
    }
    let shape = prototypes.shape();
    let [rows, d_p] = shape[..] else {
        return Err(Error::dim("pride_loss", format!("expected [B × d_p], got {shape:?}")));
    };
    let n = bank.shape()[0];
    if bank.rank() != 2 || bank.shape()[1] != d_p || targets.len() != rows || targets.iter().any(|&t| t >= n) {
        return Err(Error::dim(
            "pride_loss",
            format!("prototypes {shape:?}, bank {:?}, {} targets", bank.shape(), targets.len()),
        ));
    }
    let bank_t = prototypes.tape().constant(bank.clone());
    let picks: Vec<usize> = targets.iter().enumerate().map(|(r, &t)| r * n + t).collect();
    prototypes
        .matmul(&bank_t.t()?)?
        .scale(T::from_f64_lossy(1.0 / tau))?
        .log_softmax(1)?
        .reshape(&[rows * n])?
        .index_select(&picks)?
        .mean()?
        .neg()
}

/// `σ(mix)·ce + (1 − σ(mix))·pride`
pub fn combined_loss<'t, T: Element>(ce: Var<'t, T>, pride: Var<'t, T>, mix_param: Var<'t, T>) -> Result<Var<'t, T>> {
    let w = mix_param.sigmoid()?;
    let shape = ce.shape();
    let w = w.reshape(&vec![1; shape.len()])?.broadcast_to(&shape)?;
    let one_minus = w.neg()?.add_scalar(T::one())?;
    ce.mul(&w)?.add(&pride.mul(&one_minus)?)
}

/// Exponential moving average of true-class prototypes over base classes,
/// used as the bank of the training-time PRIDE loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaBank {
    pub decay: f64,
    entries: Vec<Option<Vec<f32>>>,
}

impl EmaBank {
    pub fn new(n_classes: usize, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self {
            decay,
            entries: vec![None; n_classes],
        })
    }

    /// Folds one observation into `class`; the first observation initialises it.
    pub fn update(&mut self, class: usize, value: &[f32]) {
        let d = self.decay;
        match &mut self.entries[class] {
            Some(e) => {
                for (a, &b) in e.iter_mut().zip(value) {
                    *a = (d * *a as f64 + (1.0 - d) * b as f64) as f32;
                }
            }
            slot @ None => *slot = Some(value.to_vec()),
        }
    }

    pub fn get(&self, class: usize) -> Option<&[f32]> {
        self.entries[class].as_deref()
    }

    /// Initialised classes as a bank.
    pub fn snapshot(&self) -> RealPrototypeBank {
        let (classes, prototypes) = self
            .entries
            .iter()
            .enumerate()
            .filter_map(|(c, e)| e.as_ref().map(|v| (c, v.clone())))
            .unzip();
        RealPrototypeBank { classes, prototypes }
    }
}

/// Per-video RNG stream derived from a base seed.
pub(crate) fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 20);
    rng
}

const PRIDE_STREAM: u64 = 0x5052_4944;

/// The 1-way episode used for `video`'s own-class prototype: `video` as the
/// only query and `k_shot` other videos of its class as support.
pub fn video_episode(store: &EmbeddingStore, video: usize, k_shot: usize, seed: u64) -> Result<Episode> {
    let class = store.video(video).class;
    let mut pool: Vec<usize> = store.videos_of_class(class).iter().copied().filter(|&v| v != video).collect();
    if pool.len() < k_shot {
        return Err(Error::Capacity(format!(
            "class `{}` has {} videos, {} needed for {k_shot}-shot prototypes",
            store.manifest().classes[class],
            pool.len() + 1,
            k_shot + 1
        )));
    }
    let mut rng = derived_rng(seed, PRIDE_STREAM, video as u64);
    for i in 0..k_shot {
        let j = rand::Rng::random_range(&mut rng, i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k_shot);
    Ok(Episode {
        n_way: 1,
        k_shot,
        n_query: 1,
        classes: vec![class],
        support: pool,
        query: vec![video],
        template_index: select_template(&mut rng, store.manifest().n_temp)?,
    })
}

/// Tuple-averaged query-specific prototype of `video` for its own class.
pub fn video_prototype<T: Element>(
    store: &EmbeddingStore,
    config: &ModelConfig,
    params: &ModelParams<T>,
    video: usize,
    k_shot: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    let episode = video_episode(store, video, k_shot, seed)?;
    let batch = EpisodeBatch::<T>::from_episode(store, &episode)?;
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = forward(&tape, config, &bound, &batch)?;
    let v = out.class_prototypes.value();
    Ok(v.data().iter().map(|x| x.as_f64() as f32).collect())
}

/// Prototype of every video of `split`, with its class.
pub fn split_prototypes<T: Element>(
    store: &EmbeddingStore,
    split: Split,
    config: &ModelConfig,
    params: &ModelParams<T>,
    k_shot: usize,
    seed: u64,
) -> Result<Vec<(usize, usize, Vec<f32>)>> {
    let classes = store.manifest().split_classes(split);
    if classes.is_empty() {
        return Err(Error::Capacity(format!("{split} split has no classes")));
    }
    for &c in &classes {
        let n = store.videos_of_class(c).len();
        if n < k_shot + 1 {
            return Err(Error::Capacity(format!(
                "class `{}` has {n} videos, {} needed for {k_shot}-shot prototypes",
                store.manifest().classes[c],
                k_shot + 1
            )));
        }
    }
    let videos: Vec<usize> = classes.iter().flat_map(|&c| store.videos_of_class(c).iter().copied()).collect();
    videos
        .par_iter()
        .map(|&v| Ok((v, store.video(v).class, video_prototype(store, config, params, v, k_shot, seed)?)))
        .collect()
}

fn bank_from(classes: &[usize], protos: &[(usize, usize, Vec<f32>)]) -> RealPrototypeBank {
    let d = protos.first().map_or(0, |p| p.2.len());
    let prototypes = classes
        .iter()
        .map(|&c| {
            let mut acc = vec![0.0f64; d];
            let mut n = 0usize;
            for (_, class, p) in protos.iter().filter(|p| p.1 == c) {
                debug_assert_eq!(*class, c);
                for (a, &x) in acc.iter_mut().zip(p) {
                    *a += x as f64;
                }
                n += 1;
            }
            acc.into_iter().map(|a| (a / n as f64) as f32).collect()
        })
        .collect();
    RealPrototypeBank {
        classes: classes.to_vec(),
        prototypes,
    }
}

/// Averages every video's own-class prototype into one row per class.
pub fn build_real_prototypes<T: Element>(
    store: &EmbeddingStore,
    split: Split,
    config: &ModelConfig,
    params: &ModelParams<T>,
    k_shot: usize,
    seed: u64,
) -> Result<RealPrototypeBank> {
    let protos = split_prototypes(store, split, config, params, k_shot, seed)?;
    Ok(bank_from(&store.manifest().split_classes(split), &protos))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPride {
    pub video: usize,
    pub class: usize,
    pub pride: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPride {
    pub class_name: String,
    pub mean_pride: f64,
    pub n_videos: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrideReport {
    pub per_video: Vec<VideoPride>,
    pub per_class: Vec<ClassPride>,
    pub mean_pride: f64,
    pub bank: RealPrototypeBank,
}

impl PrideReport {
    /// `class_name,mean_pride,n_videos`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.per_class {
            w.serialize(c).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Builds the bank on `split` and scores every video against it.
pub fn pride_report<T: Element>(
    store: &EmbeddingStore,
    split: Split,
    config: &ModelConfig,
    params: &ModelParams<T>,
    k_shot: usize,
    seed: u64,
) -> Result<PrideReport> {
    let classes = store.manifest().split_classes(split);
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "PRIDE needs at least 2 classes in the {split} split, found {}",
            classes.len()
        )));
    }
    let protos = split_prototypes(store, split, config, params, k_shot, seed)?;
    let bank = bank_from(&classes, &protos);
    let per_video = protos
        .iter()
        .map(|(v, c, p)| {
            let pos = bank.position(*c).expect("bank covers split classes");
            Ok(VideoPride {
                video: *v,
                class: *c,
                pride: pride_score(p, pos, &bank)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_class = classes
        .iter()
        .map(|&c| {
            let vals: Vec<f64> = per_video.iter().filter(|p| p.class == c).map(|p| p.pride).collect();
            ClassPride {
                class_name: store.manifest().classes[c].clone(),
                mean_pride: vals.iter().sum::<f64>() / vals.len() as f64,
                n_videos: vals.len(),
            }
        })
        .collect();
    let mean_pride = per_video.iter().map(|p| p.pride).sum::<f64>() / per_video.len() as f64;
    Ok(PrideReport {
        per_video,
        per_class,
        mean_pride,
        bank,
    })
}
