//! Full episode forward pass: visual flow, text flow, fusion and logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::mpe::{fuse, MpeConfig, MpeMode, MpeParams, MpeVars};
use crate::store::EmbeddingStore;
use crate::tensor::{AttentionParams, AttentionVars, Element, Tape, Tensor, Var};
use crate::text::{class_text_batch, inflate, se_module};
use crate::visual::{enumerate_tuples, logits_from_prototypes, trx_prototypes, TrxParams, TrxVars};

/// Architecture knobs. `frames` and `dim` must match the store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frames: usize,
    pub dim: usize,
    /// Tuple sizes; logits are averaged across them.
    pub omegas: Vec<usize>,
    pub d_k: usize,
    pub d_p: usize,
    pub se_heads: usize,
    /// `false` runs the visual flow alone.
    pub use_text: bool,
    pub mpe: MpeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            dim: 64,
            omegas: vec![2],
            d_k: 32,
            d_p: 64,
            se_heads: 4,
            use_text: true,
            mpe: MpeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.omegas.is_empty() {
            return Err(Error::Config("at least one tuple size ω is required".into()));
        }
        for &w in &self.omegas {
            if w == 0 || w > self.frames {
                return Err(Error::Config(format!(
                    "tuple size ω = {w} must lie in 1..={}",
                    self.frames
                )));
            }
        }
        if self.d_k == 0 || self.d_p == 0 || self.dim == 0 {
            return Err(Error::Config("d, d_k and d_p must be positive".into()));
        }
        if self.se_heads == 0 || self.d_p % self.se_heads != 0 {
            return Err(Error::Config(format!(
                "SE heads {} must divide d_p = {}",
                self.se_heads, self.d_p
            )));
        }
        self.mpe.validate(self.d_p)
    }

    /// Whether the text flow contributes to the prototypes at all.
    pub fn text_active(&self) -> bool {
        self.use_text && !(self.mpe.mode == MpeMode::WeightedAverage && self.mpe.lambda == 0.0)
    }
}

/// `ln 9`: the CE weight `σ(mix)` starts at 0.9.
pub const MIX_INIT: f64 = 2.197_224_577_336_219_6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + serde::de::DeserializeOwned")]
pub struct ModelParams<T = f32> {
    pub trx: Vec<TrxParams<T>>,
    pub se: AttentionParams<T>,
    pub mpe: MpeParams<T>,
    /// Logit of the CE share in the combined loss.
    pub mix_param: Tensor<T>,
}

impl<T: Element> ModelParams<T> {
    /// Initialisation order is fixed (TRX maps, SE, MPE) so that the visual
    /// weights do not depend on the fusion mode.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let trx = config
            .omegas
            .iter()
            .map(|&w| TrxParams::init(w, config.dim, config.d_k, config.d_p, rng))
            .collect::<Result<Vec<_>>>()?;
        let se = AttentionParams::init(config.dim, config.dim, config.d_p, config.d_p, config.se_heads, rng)?;
        let mpe = MpeParams::init(&config.mpe, config.d_p, rng)?;
        Ok(Self {
            trx,
            se,
            mpe,
            mix_param: Tensor::scalar(T::from_f64_lossy(MIX_INIT)),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.trx.iter().flat_map(|p| p.tensors()).collect();
        out.extend(self.se.tensors());
        out.extend(self.mpe.tensors());
        out.push(&self.mix_param);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.trx.iter_mut().flat_map(|p| p.tensors_mut()).collect();
        out.extend(self.se.tensors_mut());
        out.extend(self.mpe.tensors_mut());
        out.push(&mut self.mix_param);
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            trx: self.trx.iter().map(|p| p.cast()).collect(),
            se: self.se.cast(),
            mpe: self.mpe.cast(),
            mix_param: self.mix_param.cast(),
        }
    }

    /// Rebuilds parameters from tensors listed in [`ModelParams::tensors`] order.
    pub fn with_tensors(&self, tensors: &[Tensor<T>]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Usage(format!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::dim("with_tensors", format!("{:?} vs {:?}", slot.shape(), t.shape())));
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        BoundParams {
            trx: self.trx.iter().map(|p| p.bind(tape)).collect(),
            se: self.se.bind(tape),
            mpe: self.mpe.bind(tape),
            mix_param: tape.param(self.mix_param.clone()),
        }
    }
}

/// [`ModelParams`] recorded on a tape.
pub struct BoundParams<'t, T: Element = f32> {
    pub trx: Vec<TrxVars<'t, T>>,
    pub se: AttentionVars<'t, T>,
    pub mpe: MpeVars<'t, T>,
    pub mix_param: Var<'t, T>,
}

impl<'t, T: Element> BoundParams<'t, T> {
    /// Same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        let mut out: Vec<Var<'t, T>> = self.trx.iter().flat_map(|p| p.vars()).collect();
        out.extend(self.se.vars());
        out.extend(self.mpe.vars());
        out.push(self.mix_param);
        out
    }

    /// Rebinds from a flat list of vars in [`BoundParams::vars`] order.
    pub fn from_vars(template: &ModelParams<T>, vars: &[Var<'t, T>]) -> Result<Self> {
        let mut it = vars.iter().copied();
        let mut next = || it.next().ok_or_else(|| Error::Usage("too few parameter vars".into()));
        let mut trx = Vec::new();
        for p in &template.trx {
            trx.push(TrxVars {
                omega: p.omega,
                query_map: next()?,
                key_map: next()?,
                value_map: next()?,
            });
        }
        let se = AttentionVars {
            w_query: next()?,
            w_key: next()?,
            w_value: next()?,
            w_out: next()?,
            heads: template.se.heads,
        };
        let mpe = match &template.mpe {
            MpeParams::WeightedAverage => MpeVars::WeightedAverage,
            MpeParams::Attention(a) => MpeVars::Attention(AttentionVars {
                w_query: next()?,
                w_key: next()?,
                w_value: next()?,
                w_out: next()?,
                heads: a.heads,
            }),
            MpeParams::ConcatMlp(_) => MpeVars::ConcatMlp([next()?, next()?, next()?, next()?]),
            MpeParams::MlpConcat { .. } => MpeVars::MlpConcat(
                [next()?, next()?, next()?, next()?],
                [next()?, next()?, next()?, next()?],
            ),
        };
        let mix_param = next()?;
        Ok(Self { trx, se, mpe, mix_param })
    }
}

/// Dense inputs of one episode, slot-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch<T = f32> {
    /// `[N·K × L × d]`
    pub support: Tensor<T>,
    /// `[N·M × L × d]`
    pub query: Tensor<T>,
    /// `[N × d]`
    pub texts: Tensor<T>,
    pub n_way: usize,
    pub k_shot: usize,
    /// Ground-truth slot of each query.
    pub labels: Vec<usize>,
}

fn stack_videos<T: Element>(store: &EmbeddingStore, videos: &[usize]) -> Tensor<T> {
    let (l, d) = (store.frames(), store.dim());
    let mut data = Vec::with_capacity(videos.len() * l * d);
    for &v in videos {
        data.extend(store.visual(v).data().iter().map(|&x| T::from_f64_lossy(x as f64)));
    }
    Tensor::from_parts(vec![videos.len(), l, d], data)
}

impl<T: Element> EpisodeBatch<T> {
    pub fn from_episode(store: &EmbeddingStore, episode: &Episode) -> Result<Self> {
        Ok(Self {
            support: stack_videos(store, &episode.support),
            query: stack_videos(store, &episode.query),
            texts: class_text_batch(store, &episode.classes, episode.template_index)?,
            n_way: episode.n_way,
            k_shot: episode.k_shot,
            labels: episode.query_labels(),
        })
    }

    pub fn n_queries(&self) -> usize {
        self.query.shape()[0]
    }
}

pub struct ForwardOutput<'t, T: Element = f32> {
    /// `[NM × N]`
    pub logits: Var<'t, T>,
    /// Final prototypes averaged over tuples (and tuple sizes), `[NM × N × d_p]`.
    pub class_prototypes: Var<'t, T>,
}

fn average<'t, T: Element>(vars: Vec<Var<'t, T>>) -> Result<Var<'t, T>> {
    let n = vars.len();
    let mut it = vars.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Usage("nothing to average".into()))?;
    for v in it {
        acc = acc.add(&v)?;
    }
    if n == 1 {
        Ok(acc)
    } else {
        acc.scale(T::from_f64_lossy(1.0 / n as f64))
    }
}

pub fn forward<'t, T: Element>(
    tape: &'t Tape<T>,
    config: &ModelConfig,
    params: &BoundParams<'t, T>,
    batch: &EpisodeBatch<T>,
) -> Result<ForwardOutput<'t, T>> {
    let q = tape.constant(batch.query.clone());
    let s = tape.constant(batch.support.clone());
    let n_queries = batch.n_queries();
    let text_prototypes = if config.text_active() {
        Some(se_module(tape.constant(batch.texts.clone()), &params.se)?)
    } else {
        None
    };

    let mut logits = Vec::with_capacity(params.trx.len());
    let mut protos = Vec::with_capacity(params.trx.len());
    for trx in &params.trx {
        let tuples = enumerate_tuples(config.frames, trx.omega)?;
        let out = trx_prototypes(q, s, &tuples, trx, batch.n_way, batch.k_shot)?;
        let fused = match text_prototypes {
            Some(tp) => {
                let p_t = inflate(tp, n_queries, tuples.len())?;
                fuse(out.prototypes, p_t, &config.mpe, &params.mpe)?
            }
            None => out.prototypes,
        };
        logits.push(logits_from_prototypes(fused, out.query_values)?);
        protos.push(fused.mean_axis(2)?);
    }
    Ok(ForwardOutput {
        logits: average(logits)?,
        class_prototypes: average(protos)?,
    })
}

/// Mean negative log-likelihood of the ground-truth slots.
pub fn cross_entropy<'t, T: Element>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    let [rows, n] = shape[..] else {
        return Err(Error::dim("cross_entropy", format!("expected [rows × N], got {shape:?}")));
    };
    if labels.len() != rows || labels.iter().any(|&y| y >= n) {
        return Err(Error::dim("cross_entropy", "labels do not match logits"));
    }
    let picks: Vec<usize> = labels.iter().enumerate().map(|(r, &y)| r * n + y).collect();
    logits
        .log_softmax(1)?
        .reshape(&[rows * n])?
        .index_select(&picks)?
        .mean()?
        .neg()
}

/// Prototype of each query for its own slot, `[NM × d_p]`.
pub fn true_class_prototypes<'t, T: Element>(class_prototypes: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let shape = class_prototypes.shape();
    let [rows, n, d_p] = shape[..] else {
        return Err(Error::dim("true_class_prototypes", format!("unexpected shape {shape:?}")));
    };
    let picks: Vec<usize> = labels.iter().enumerate().map(|(r, &y)| r * n + y).collect();
    class_prototypes.reshape(&[rows * n, d_p])?.index_select(&picks)
}

/// Logits of one episode without recording gradients for later use.
pub fn predict_logits(config: &ModelConfig, params: &ModelParams, batch: &EpisodeBatch) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = forward(&tape, config, &bound, batch)?;
    let v = out.logits.value();
    Ok((*v).clone())
}
