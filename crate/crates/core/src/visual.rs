//! Visual flow: frame tuples and query-specific cross-attention prototypes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// All strictly increasing `omega`-subsequences of `0..frames`, in
/// lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TupleIndexSet {
    pub omega: usize,
    pub frames: usize,
    pub indices: Vec<Vec<usize>>,
}

impl TupleIndexSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

pub fn enumerate_tuples(frames: usize, omega: usize) -> Result<TupleIndexSet> {
    if omega == 0 || omega > frames {
        return Err(Error::Config(format!(
            "tuple size ω = {omega} must lie in 1..={frames}"
        )));
    }
    let mut indices = Vec::with_capacity(binomial(frames, omega));
    let mut cur: Vec<usize> = (0..omega).collect();
    loop {
        indices.push(cur.clone());
        // rightmost position that can still advance
        let Some(pos) = (0..omega).rev().find(|&i| cur[i] < frames - omega + i) else {
            break;
        };
        cur[pos] += 1;
        for i in pos + 1..omega {
            cur[i] = cur[i - 1] + 1;
        }
    }
    Ok(TupleIndexSet { omega, frames, indices })
}

/// Concatenates the frames of every tuple.
///
/// `frames` is `[L × d]` or a batch `[V × L × d]`; the result is
/// `[T × ω·d]` or `[V·T × ω·d]` with row `v·T + t` for video `v`, tuple `t`.
pub fn tuple_representations<'t, T: Element>(frames: Var<'t, T>, tuples: &TupleIndexSet) -> Result<Var<'t, T>> {
    let shape = frames.shape();
    let (videos, l, d) = match *shape {
        [l, d] => (1, l, d),
        [v, l, d] => (v, l, d),
        _ => return Err(Error::dim("tuple_representations", format!("unexpected shape {shape:?}"))),
    };
    if l != tuples.frames {
        return Err(Error::dim(
            "tuple_representations",
            format!("{l} frames but tuples enumerate {}", tuples.frames),
        ));
    }
    let mut rows = Vec::with_capacity(videos * tuples.len() * tuples.omega);
    for v in 0..videos {
        for tuple in &tuples.indices {
            rows.extend(tuple.iter().map(|&f| v * l + f));
        }
    }
    frames
        .reshape(&[videos * l, d])?
        .index_select(&rows)?
        .reshape(&[videos * tuples.len(), tuples.omega * d])
}

/// Linear maps of one cross-attention block at a fixed tuple size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + serde::de::DeserializeOwned")]
pub struct TrxParams<T = f32> {
    pub omega: usize,
    /// `[ω·d × d_k]`
    pub query_map: Tensor<T>,
    /// `[ω·d × d_k]`
    pub key_map: Tensor<T>,
    /// `[ω·d × d_p]`, shared by support and query tuples.
    pub value_map: Tensor<T>,
}

impl<T: Element> TrxParams<T> {
    pub fn init<R: Rng + ?Sized>(omega: usize, dim: usize, d_k: usize, d_p: usize, rng: &mut R) -> Result<Self> {
        if d_k == 0 || d_p == 0 || omega == 0 {
            return Err(Error::Config("d_k, d_p and ω must be positive".into()));
        }
        let fan_in = omega * dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            omega,
            query_map: Tensor::uniform(&[fan_in, d_k], bound, rng),
            key_map: Tensor::uniform(&[fan_in, d_k], bound, rng),
            value_map: Tensor::uniform(&[fan_in, d_p], bound, rng),
        })
    }

    pub fn tensors(&self) -> [&Tensor<T>; 3] {
        [&self.query_map, &self.key_map, &self.value_map]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [&mut self.query_map, &mut self.key_map, &mut self.value_map]
    }

    pub fn cast<U: Element>(&self) -> TrxParams<U> {
        TrxParams {
            omega: self.omega,
            query_map: self.query_map.cast(),
            key_map: self.key_map.cast(),
            value_map: self.value_map.cast(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> TrxVars<'t, T> {
        TrxVars {
            omega: self.omega,
            query_map: tape.param(self.query_map.clone()),
            key_map: tape.param(self.key_map.clone()),
            value_map: tape.param(self.value_map.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrxVars<'t, T: Element = f32> {
    pub omega: usize,
    pub query_map: Var<'t, T>,
    pub key_map: Var<'t, T>,
    pub value_map: Var<'t, T>,
}

impl<'t, T: Element> TrxVars<'t, T> {
    pub fn vars(&self) -> [Var<'t, T>; 3] {
        [self.query_map, self.key_map, self.value_map]
    }
}

pub struct TrxOutput<'t, T: Element = f32> {
    /// `[NM × N × C(L,ω) × d_p]`
    pub prototypes: Var<'t, T>,
    /// Value-mapped query tuples, `[NM × C(L,ω) × d_p]`.
    pub query_values: Var<'t, T>,
    /// `[NM·C(L,ω) × N × K·C(L,ω)]`, a simplex over each class's support tuples.
    pub attention: Var<'t, T>,
}

/// Query-specific class prototypes.
///
/// Every query tuple attends, separately for each class, over all `K·C(L,ω)`
/// support tuples of that class; the prototype is the attention-weighted sum
/// of value-mapped support tuples. `support_frames` must be slot-major
/// (`[N·K × L × d]`, class `n` at rows `n·K..(n+1)·K`).
pub fn trx_prototypes<'t, T: Element>(
    query_frames: Var<'t, T>,
    support_frames: Var<'t, T>,
    tuples: &TupleIndexSet,
    params: &TrxVars<'t, T>,
    n_way: usize,
    k_shot: usize,
) -> Result<TrxOutput<'t, T>> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Capacity(format!(
            "every class needs support videos (N = {n_way}, K = {k_shot})"
        )));
    }
    if tuples.omega != params.omega {
        return Err(Error::Config(format!(
            "tuples have ω = {} but parameters expect ω = {}",
            tuples.omega, params.omega
        )));
    }
    let qs = query_frames.shape();
    let ss = support_frames.shape();
    if qs.len() != 3 || ss.len() != 3 || ss[0] != n_way * k_shot || qs[1..] != ss[1..] {
        return Err(Error::dim(
            "trx_prototypes",
            format!("query {qs:?}, support {ss:?}, N = {n_way}, K = {k_shot}"),
        ));
    }
    let n_queries = qs[0];
    let t = tuples.len();
    let d_k = params.key_map.shape()[1];
    let d_p = params.value_map.shape()[1];

    let q_rep = tuple_representations(query_frames, tuples)?;
    let s_rep = tuple_representations(support_frames, tuples)?;

    let q_emb = q_rep.matmul(&params.query_map)?;
    let k_emb = s_rep.matmul(&params.key_map)?;
    let s_val = s_rep.matmul(&params.value_map)?;
    let q_val = q_rep.matmul(&params.value_map)?;

    let scale = T::from_f64_lossy(1.0 / (d_k as f64).sqrt());
    let attention = q_emb
        .matmul(&k_emb.t()?)?
        .scale(scale)?
        .reshape(&[n_queries * t, n_way, k_shot * t])?
        .softmax(2)?;

    let prototypes = attention
        .permute(&[1, 0, 2])?
        .bmm(&s_val.reshape(&[n_way, k_shot * t, d_p])?)?
        .reshape(&[n_way, n_queries, t, d_p])?
        .permute(&[1, 0, 2, 3])?;
    Ok(TrxOutput {
        prototypes,
        query_values: q_val.reshape(&[n_queries, t, d_p])?,
        attention,
    })
}

/// `logit(m, n) = −mean_t ‖P(m,n,t) − query_values(m,t)‖²`
pub fn logits_from_prototypes<'t, T: Element>(prototypes: Var<'t, T>, query_values: Var<'t, T>) -> Result<Var<'t, T>> {
    let ps = prototypes.shape();
    let qs = query_values.shape();
    if ps.len() != 4 || qs.len() != 3 || ps[0] != qs[0] || ps[2..] != qs[1..] {
        return Err(Error::dim(
            "logits_from_prototypes",
            format!("prototypes {ps:?} vs query values {qs:?}"),
        ));
    }
    let q = query_values.reshape(&[qs[0], 1, qs[1], qs[2]])?.broadcast_to(&ps)?;
    prototypes.sq_l2_distance(&q)?.mean_axis(2)?.neg()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tuple_counts() {
        assert_eq!(enumerate_tuples(8, 2).unwrap().len(), 28);
        assert_eq!(enumerate_tuples(3, 3).unwrap().indices, vec![vec![0, 1, 2]]);
        assert_eq!(
            enumerate_tuples(4, 2).unwrap().indices,
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        assert!(matches!(enumerate_tuples(3, 4), Err(Error::Config(_))));
        for l in 1..=9 {
            for w in 1..=l {
                let set = enumerate_tuples(l, w).unwrap();
                assert_eq!(set.len(), binomial(l, w));
                assert!(set.indices.iter().all(|t| t.windows(2).all(|p| p[0] < p[1])));
                assert!(set.indices.windows(2).all(|p| p[0] < p[1]));
            }
        }
    }

    #[test]
    fn tuple_rows_are_concatenated_frames() {
        let tape = Tape::<f32>::new();
        let f = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let r = tuple_representations(f, &enumerate_tuples(2, 2).unwrap()).unwrap();
        assert_eq!(r.value().data(), &[1.0, 0.0, 0.0, 1.0]);

        let x = Tensor::<f32>::from_fn(&[4, 3], |i| i as f32);
        let fx = tape.constant(x.clone());
        let id = tuple_representations(fx, &enumerate_tuples(4, 1).unwrap()).unwrap();
        assert_eq!(*id.value(), x);

        let pairs = enumerate_tuples(4, 2).unwrap();
        let r = tuple_representations(fx, &pairs).unwrap().value();
        // tuple (1,3) in one-based numbering is (0,2), the second tuple
        assert_eq!(&r.data()[6..12], &[0.0, 1.0, 2.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[-1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn logits_hand_cases() {
        let tape = Tape::<f32>::new();
        let qv = Tensor::<f32>::from_fn(&[1, 2, 2], |i| i as f32);
        let mut p = Vec::new();
        p.extend_from_slice(qv.data());
        // +1 on both features: squared distance 2 for every tuple
        p.extend(qv.data().iter().map(|v| v + 1.0));
        let pt = Tensor::new(vec![1, 2, 2, 2], p).unwrap();
        let l = logits_from_prototypes(tape.constant(pt), tape.constant(qv)).unwrap();
        assert_eq!(l.value().data(), &[0.0, -2.0]);
    }
}
