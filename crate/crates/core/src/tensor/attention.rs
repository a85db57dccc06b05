use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Weights of a multi-head scaled dot-product attention block (no biases).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + serde::de::DeserializeOwned")]
pub struct AttentionParams<T = f32> {
    /// `[d_query_in × width]`
    pub w_query: Tensor<T>,
    /// `[d_kv_in × width]`
    pub w_key: Tensor<T>,
    /// `[d_kv_in × width]`
    pub w_value: Tensor<T>,
    /// `[width × d_out]`
    pub w_out: Tensor<T>,
    pub heads: usize,
}

impl<T: Element> AttentionParams<T> {
    /// Uniform `±1/√fan_in` initialisation for every projection.
    pub fn init<R: Rng + ?Sized>(
        d_query_in: usize,
        d_kv_in: usize,
        width: usize,
        d_out: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        let b_q = 1.0 / (d_query_in as f64).sqrt();
        let b_kv = 1.0 / (d_kv_in as f64).sqrt();
        let b_o = 1.0 / (width as f64).sqrt();
        Ok(Self {
            w_query: Tensor::uniform(&[d_query_in, width], b_q, rng),
            w_key: Tensor::uniform(&[d_kv_in, width], b_kv, rng),
            w_value: Tensor::uniform(&[d_kv_in, width], b_kv, rng),
            w_out: Tensor::uniform(&[width, d_out], b_o, rng),
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.w_query.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w_query, &self.w_key, &self.w_value, &self.w_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [
            &mut self.w_query,
            &mut self.w_key,
            &mut self.w_value,
            &mut self.w_out,
        ]
    }

    pub fn cast<U: Element>(&self) -> AttentionParams<U> {
        AttentionParams {
            w_query: self.w_query.cast(),
            w_key: self.w_key.cast(),
            w_value: self.w_value.cast(),
            w_out: self.w_out.cast(),
            heads: self.heads,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> AttentionVars<'t, T> {
        AttentionVars {
            w_query: tape.param(self.w_query.clone()),
            w_key: tape.param(self.w_key.clone()),
            w_value: tape.param(self.w_value.clone()),
            w_out: tape.param(self.w_out.clone()),
            heads: self.heads,
        }
    }
}

/// [`AttentionParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars<'t, T: Element = f32> {
    pub w_query: Var<'t, T>,
    pub w_key: Var<'t, T>,
    pub w_value: Var<'t, T>,
    pub w_out: Var<'t, T>,
    pub heads: usize,
}

impl<'t, T: Element> AttentionVars<'t, T> {
    pub fn vars(&self) -> [Var<'t, T>; 4] {
        [self.w_query, self.w_key, self.w_value, self.w_out]
    }
}

pub struct AttentionOutput<'t, T: Element = f32> {
    /// `[s_q × d_out]` for 2-D inputs, `[B × s_q × d_out]` for batched ones.
    pub output: Var<'t, T>,
    /// `[B·heads × s_q × s_k]`, rows sum to one.
    pub weights: Var<'t, T>,
}

fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, bool)> {
    match *shape {
        [s, d] => Ok((1, s, d, false)),
        [b, s, d] => Ok((b, s, d, true)),
        _ => Err(Error::dim(op, format!("expected rank 2 or 3, got {shape:?}"))),
    }
}

/// Multi-head scaled dot-product attention.
///
/// Accepts `[s × d]` inputs or batches `[B × s × d]`; each head attends with
/// scale `1/√(width/heads)` and the concatenated head outputs go through the
/// output projection.
pub fn multi_head_attention<'t, T: Element>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    params: &AttentionVars<'t, T>,
) -> Result<AttentionOutput<'t, T>> {
    const OP: &str = "multi_head_attention";
    let (b, s_q, d_q, batched) = dims3(OP, &q.shape())?;
    let (bk, s_k, d_k, _) = dims3(OP, &k.shape())?;
    let (bv, s_v, d_v, _) = dims3(OP, &v.shape())?;
    if bk != b || bv != b || s_v != s_k || d_v != d_k {
        return Err(Error::dim(
            OP,
            format!("query {:?}, key {:?}, value {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let width = params.w_query.shape()[1];
    let heads = params.heads;
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {width} not divisible by {heads} heads"
        )));
    }
    let dh = width / heads;
    let d_out = params.w_out.shape()[1];

    let split_heads = |x: Var<'t, T>, s: usize, d: usize, w: Var<'t, T>| -> Result<Var<'t, T>> {
        x.reshape(&[b * s, d])?
            .matmul(&w)?
            .reshape(&[b, s, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * heads, s, dh])
    };
    let qh = split_heads(q, s_q, d_q, params.w_query)?;
    let kh = split_heads(k, s_k, d_k, params.w_key)?;
    let vh = split_heads(v, s_k, d_k, params.w_value)?;

    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let scores = qh.bmm(&kh.permute(&[0, 2, 1])?)?.scale(scale)?;
    let weights = scores.softmax(2)?;
    let ctx = weights
        .bmm(&vh)?
        .reshape(&[b, heads, s_q, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * s_q, width])?;
    let out = ctx.matmul(&params.w_out)?;
    let output = if batched {
        out.reshape(&[b, s_q, d_out])?
    } else {
        out
    };
    Ok(AttentionOutput { output, weights })
}
