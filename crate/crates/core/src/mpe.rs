//! Multimodal prototype enhancement: fuses visual and inflated text
//! prototypes of identical shape `[.. × d_p]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{multi_head_attention, AttentionParams, AttentionVars, Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MpeMode {
    /// `(1 − λ)·P_V + λ·P_T`
    WeightedAverage,
    /// Two-token multi-head attention with a residual on the visual token.
    Attention,
    /// Concatenate features, then a two-layer map back to `d_p`.
    ConcatMlp,
    /// A two-layer map per modality, then concatenate to `d_p`.
    MlpConcat,
}

impl std::fmt::Display for MpeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MpeMode::WeightedAverage => "weighted_average",
            MpeMode::Attention => "attention",
            MpeMode::ConcatMlp => "concat_mlp",
            MpeMode::MlpConcat => "mlp_concat",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpeConfig {
    pub mode: MpeMode,
    pub lambda: f64,
    pub heads: usize,
}

impl Default for MpeConfig {
    fn default() -> Self {
        Self {
            mode: MpeMode::WeightedAverage,
            lambda: 0.5,
            heads: 8,
        }
    }
}

impl MpeConfig {
    pub fn validate(&self, d_p: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("λ must lie in [0, 1], got {}", self.lambda)));
        }
        if self.mode == MpeMode::Attention && (self.heads == 0 || d_p % self.heads != 0) {
            return Err(Error::Config(format!(
                "MPE heads {} must divide d_p = {d_p}",
                self.heads
            )));
        }
        if self.mode == MpeMode::MlpConcat && d_p < 2 {
            return Err(Error::Config("mlp_concat needs d_p ≥ 2".into()));
        }
        Ok(())
    }
}

/// Two-layer perceptron with ReLU: `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + serde::de::DeserializeOwned")]
pub struct MlpParams<T = f32> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Element> MlpParams<T> {
    pub fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        let b_in = 1.0 / (d_in as f64).sqrt();
        let b_h = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: Tensor::uniform(&[d_in, hidden], b_in, rng),
            b1: Tensor::uniform(&[hidden], b_in, rng),
            w2: Tensor::uniform(&[hidden, d_out], b_h, rng),
            b2: Tensor::uniform(&[d_out], b_h, rng),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn cast<U: Element>(&self) -> MlpParams<U> {
        MlpParams {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }

    fn bind<'t>(&self, tape: &'t Tape<T>) -> [Var<'t, T>; 4] {
        self.tensors().map(|t| tape.param(t.clone()))
    }
}

fn mlp<'t, T: Element>(x: Var<'t, T>, p: &[Var<'t, T>; 4]) -> Result<Var<'t, T>> {
    let rows = x.shape()[0];
    let affine = |x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>| -> Result<Var<'t, T>> {
        let y = x.matmul(&w)?;
        let width = y.shape()[1];
        y.add(&b.reshape(&[1, width])?.broadcast_to(&[rows, width])?)
    };
    let h = affine(x, p[0], p[1])?.relu()?;
    affine(h, p[2], p[3])
}

/// Trainable weights of the chosen fusion mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + serde::de::DeserializeOwned")]
#[serde(rename_all = "snake_case")]
pub enum MpeParams<T = f32> {
    WeightedAverage,
    Attention(AttentionParams<T>),
    ConcatMlp(MlpParams<T>),
    MlpConcat { visual: MlpParams<T>, text: MlpParams<T> },
}

impl<T: Element> MpeParams<T> {
    /// Hidden width of the MLP variants is `2·d_p`; the attention output
    /// projection starts at zero so fusion begins as the identity on `P_V`.
    pub fn init<R: Rng + ?Sized>(config: &MpeConfig, d_p: usize, rng: &mut R) -> Result<Self> {
        config.validate(d_p)?;
        Ok(match config.mode {
            MpeMode::WeightedAverage => MpeParams::WeightedAverage,
            MpeMode::Attention => {
                let mut p = AttentionParams::init(d_p, d_p, d_p, d_p, config.heads, rng)?;
                p.w_out = Tensor::zeros(&[d_p, d_p]);
                MpeParams::Attention(p)
            }
            MpeMode::ConcatMlp => MpeParams::ConcatMlp(MlpParams::init(2 * d_p, 2 * d_p, d_p, rng)),
            MpeMode::MlpConcat => MpeParams::MlpConcat {
                visual: MlpParams::init(d_p, 2 * d_p, d_p / 2, rng),
                text: MlpParams::init(d_p, 2 * d_p, d_p - d_p / 2, rng),
            },
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            MpeParams::WeightedAverage => Vec::new(),
            MpeParams::Attention(p) => p.tensors().to_vec(),
            MpeParams::ConcatMlp(p) => p.tensors().to_vec(),
            MpeParams::MlpConcat { visual, text } => visual.tensors().into_iter().chain(text.tensors()).collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            MpeParams::WeightedAverage => Vec::new(),
            MpeParams::Attention(p) => p.tensors_mut().into_iter().collect(),
            MpeParams::ConcatMlp(p) => p.tensors_mut().into_iter().collect(),
            MpeParams::MlpConcat { visual, text } => {
                visual.tensors_mut().into_iter().chain(text.tensors_mut()).collect()
            }
        }
    }

    pub fn cast<U: Element>(&self) -> MpeParams<U> {
        match self {
            MpeParams::WeightedAverage => MpeParams::WeightedAverage,
            MpeParams::Attention(p) => MpeParams::Attention(p.cast()),
            MpeParams::ConcatMlp(p) => MpeParams::ConcatMlp(p.cast()),
            MpeParams::MlpConcat { visual, text } => MpeParams::MlpConcat {
                visual: visual.cast(),
                text: text.cast(),
            },
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> MpeVars<'t, T> {
        match self {
            MpeParams::WeightedAverage => MpeVars::WeightedAverage,
            MpeParams::Attention(p) => MpeVars::Attention(p.bind(tape)),
            MpeParams::ConcatMlp(p) => MpeVars::ConcatMlp(p.bind(tape)),
            MpeParams::MlpConcat { visual, text } => MpeVars::MlpConcat(visual.bind(tape), text.bind(tape)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum MpeVars<'t, T: Element = f32> {
    WeightedAverage,
    Attention(AttentionVars<'t, T>),
    ConcatMlp([Var<'t, T>; 4]),
    MlpConcat([Var<'t, T>; 4], [Var<'t, T>; 4]),
}

impl<'t, T: Element> MpeVars<'t, T> {
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        match self {
            MpeVars::WeightedAverage => Vec::new(),
            MpeVars::Attention(a) => a.vars().to_vec(),
            MpeVars::ConcatMlp(p) => p.to_vec(),
            MpeVars::MlpConcat(v, t) => v.iter().chain(t).copied().collect(),
        }
    }
}

fn same_shape<T: Element>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.is_empty() {
        return Err(Error::dim(op, format!("visual {sa:?} vs text {sb:?}")));
    }
    Ok(sa)
}

/// Elementwise convex combination `(1 − λ)·P_V + λ·P_T`. `λ = 0` and
/// `λ = 1` return the visual or text operand itself.
pub fn mpe_weighted<'t, T: Element>(p_v: Var<'t, T>, p_t: Var<'t, T>, lambda: f64) -> Result<Var<'t, T>> {
    same_shape("mpe_weighted", &p_v, &p_t)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("λ must lie in [0, 1], got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(p_v);
    }
    if lambda == 1.0 {
        return Ok(p_t);
    }
    // P_V + λ·(P_T − P_V) keeps equal operands exactly fixed
    p_v.add(&p_t.sub(&p_v)?.scale(T::from_f64_lossy(lambda))?)
}

/// For every prototype position, the sequence `[P_V, P_T]` is attended from
/// the visual token; the output at that position is added to `P_V`.
pub fn mpe_attention<'t, T: Element>(p_v: Var<'t, T>, p_t: Var<'t, T>, params: &AttentionVars<'t, T>) -> Result<Var<'t, T>> {
    let shape = same_shape("mpe_attention", &p_v, &p_t)?;
    let d_p = *shape.last().unwrap();
    let width = params.w_query.shape()[1];
    if params.heads == 0 || width % params.heads != 0 {
        return Err(Error::Config(format!(
            "MPE heads {} must divide width {width}",
            params.heads
        )));
    }
    if params.w_query.shape()[0] != d_p || params.w_out.shape()[1] != d_p {
        return Err(Error::Config(format!(
            "MPE attention expects d_p = {d_p} in and out"
        )));
    }
    let b = shape.iter().product::<usize>() / d_p;
    let v = p_v.reshape(&[b, 1, d_p])?;
    let t = p_t.reshape(&[b, 1, d_p])?;
    let tokens = Var::concat(&[v, t], 1)?;
    let out = multi_head_attention(v, tokens, tokens, params)?.output;
    out.reshape(&shape)?.add(&p_v)
}

pub fn mpe_concat_mlp<'t, T: Element>(p_v: Var<'t, T>, p_t: Var<'t, T>, params: &[Var<'t, T>; 4]) -> Result<Var<'t, T>> {
    let shape = same_shape("mpe_concat_mlp", &p_v, &p_t)?;
    let d_p = *shape.last().unwrap();
    let b = shape.iter().product::<usize>() / d_p;
    let x = Var::concat(&[p_v.reshape(&[b, d_p])?, p_t.reshape(&[b, d_p])?], 1)?;
    mlp(x, params)?.reshape(&shape)
}

pub fn mpe_mlp_concat<'t, T: Element>(
    p_v: Var<'t, T>,
    p_t: Var<'t, T>,
    visual: &[Var<'t, T>; 4],
    text: &[Var<'t, T>; 4],
) -> Result<Var<'t, T>> {
    let shape = same_shape("mpe_mlp_concat", &p_v, &p_t)?;
    let d_p = *shape.last().unwrap();
    let b = shape.iter().product::<usize>() / d_p;
    let hv = mlp(p_v.reshape(&[b, d_p])?, visual)?;
    let ht = mlp(p_t.reshape(&[b, d_p])?, text)?;
    Var::concat(&[hv, ht], 1)?.reshape(&shape)
}

/// Dispatches on the bound parameter variant.
pub fn fuse<'t, T: Element>(p_v: Var<'t, T>, p_t: Var<'t, T>, config: &MpeConfig, vars: &MpeVars<'t, T>) -> Result<Var<'t, T>> {
    match vars {
        MpeVars::WeightedAverage => mpe_weighted(p_v, p_t, config.lambda),
        MpeVars::Attention(a) => mpe_attention(p_v, p_t, a),
        MpeVars::ConcatMlp(p) => mpe_concat_mlp(p_v, p_t, p),
        MpeVars::MlpConcat(v, t) => mpe_mlp_concat(p_v, p_t, v, t),
    }
}
