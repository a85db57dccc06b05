//! Loop-based reference implementations shared by the integration and
//! acceptance tests. Nothing here touches the tape or the tensor kernels.

#![allow(dead_code)]

use morn_core::store::{EmbeddingStore, SyntheticSpec};
use morn_core::tensor::{AttentionParams, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat<T: morn_core::tensor::Element>(t: &Tensor<T>) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| (0..c).map(|j| t.at(&[i, j]).as_f64()).collect()).collect()
}

/// `x · W` for a row vector.
pub fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Increasing index tuples by recursion (independent of the library's
/// iterative enumeration).
pub fn combos(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// `[L][d]` frames of a video.
pub type Video = Mat;

pub fn video_of(store: &EmbeddingStore, v: usize) -> Video {
    mat(store.visual(v))
}

pub fn tuple_rep(video: &Video, tuple: &[usize]) -> Vec<f64> {
    tuple.iter().flat_map(|&f| video[f].iter().copied()).collect()
}

pub struct TrxRef {
    /// `[m][n][t][d_p]`
    pub prototypes: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[m][t][d_p]`
    pub query_values: Vec<Vec<Vec<f64>>>,
}

/// Direct enumeration: for each query tuple and class, softmax over every
/// (support video, support tuple) of that class, then the weighted sum of
/// value-mapped support tuples.
pub fn trx_reference(
    queries: &[Video],
    supports: &[Video],
    omega: usize,
    q_map: &Mat,
    k_map: &Mat,
    v_map: &Mat,
    n_way: usize,
    k_shot: usize,
) -> TrxRef {
    let frames = queries[0].len();
    let tuples = combos(frames, omega);
    let d_k = q_map[0].len();
    let mut prototypes = Vec::new();
    let mut query_values = Vec::new();
    for q in queries {
        let mut per_class = Vec::new();
        for c in 0..n_way {
            let mut per_tuple = Vec::new();
            for t in &tuples {
                let qe = vecmat(&tuple_rep(q, t), q_map);
                let mut scores = Vec::new();
                let mut values = Vec::new();
                for s in &supports[c * k_shot..(c + 1) * k_shot] {
                    for u in &tuples {
                        let rep = tuple_rep(s, u);
                        scores.push(dot(&qe, &vecmat(&rep, k_map)) / (d_k as f64).sqrt());
                        values.push(vecmat(&rep, v_map));
                    }
                }
                let w = softmax(&scores);
                let mut p = vec![0.0; v_map[0].len()];
                for (wi, v) in w.iter().zip(&values) {
                    for (a, b) in p.iter_mut().zip(v) {
                        *a += wi * b;
                    }
                }
                per_tuple.push(p);
            }
            per_class.push(per_tuple);
        }
        prototypes.push(per_class);
        query_values.push(tuples.iter().map(|t| vecmat(&tuple_rep(q, t), v_map)).collect());
    }
    TrxRef { prototypes, query_values }
}

/// `−mean_t Σ (P − qv)²` per query and class.
pub fn logits_reference(r: &TrxRef) -> Mat {
    r.prototypes
        .iter()
        .zip(&r.query_values)
        .map(|(per_class, qv)| {
            per_class
                .iter()
                .map(|per_tuple| {
                    let total: f64 = per_tuple
                        .iter()
                        .zip(qv)
                        .map(|(p, q)| p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                        .sum();
                    -total / per_tuple.len() as f64
                })
                .collect()
        })
        .collect()
}

/// Multi-head attention one head at a time: heads own contiguous column
/// blocks of the projected width.
pub fn attention_reference(q: &Mat, kv: &Mat, p: &AttentionParams<f64>) -> Mat {
    let (wq, wk, wv, wo) = (mat(&p.w_query), mat(&p.w_key), mat(&p.w_value), mat(&p.w_out));
    let width = wq[0].len();
    let dh = width / p.heads;
    let qp: Mat = q.iter().map(|x| vecmat(x, &wq)).collect();
    let kp: Mat = kv.iter().map(|x| vecmat(x, &wk)).collect();
    let vp: Mat = kv.iter().map(|x| vecmat(x, &wv)).collect();
    let mut out = Vec::new();
    for qi in &qp {
        let mut concat = vec![0.0; width];
        for h in 0..p.heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = kp
                .iter()
                .map(|kj| dot(&qi[cols.clone()], &kj[cols.clone()]) / (dh as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for (wj, vj) in w.iter().zip(&vp) {
                for c in cols.clone() {
                    concat[c] += wj * vj[c];
                }
            }
        }
        out.push(vecmat(&concat, &wo));
    }
    out
}

pub fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in acc.iter_mut().zip(r) {
            *a += b;
        }
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

/// The reference acceptance store: 10 classes × 20 videos, L=8, d=64.
pub fn separable(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        n_classes: 10,
        videos_per_class: 20,
        frames: 8,
        dim: 64,
        class_sep: 4.0,
        text_corr: 0.9,
        n_temp: 4,
        noise_std: None,
    }
}

/// Own-class prototype of `video` for f64 parameters under weighted-average
/// fusion, built from the same support draw the library uses.
pub fn video_prototype_reference(
    store: &EmbeddingStore,
    config: &morn_core::model::ModelConfig,
    params: &morn_core::model::ModelParams<f64>,
    video: usize,
    k_shot: usize,
    seed: u64,
) -> Vec<f64> {
    let ep = morn_core::pride::video_episode(store, video, k_shot, seed).unwrap();
    let query = vec![video_of(store, video)];
    let supports: Vec<Video> = ep.support.iter().map(|&s| video_of(store, s)).collect();
    let mut per_omega = Vec::new();
    for trx in &params.trx {
        let r = trx_reference(
            &query,
            &supports,
            trx.omega,
            &mat(&trx.query_map),
            &mat(&trx.key_map),
            &mat(&trx.value_map),
            1,
            k_shot,
        );
        let p_v = mean_rows(&r.prototypes[0][0]);
        let fused = if config.text_active() {
            let text: Vec<f64> = store.text(ep.template_index, ep.classes[0]).iter().map(|&x| x as f64).collect();
            let p_t = &attention_reference(&vec![text.clone()], &vec![text], &params.se)[0];
            let lambda = config.mpe.lambda;
            p_v.iter().zip(p_t).map(|(v, t)| (1.0 - lambda) * v + lambda * t).collect()
        } else {
            p_v
        };
        per_omega.push(fused);
    }
    mean_rows(&per_omega)
}

/// Class-mean of `video_prototype_reference` over every video of `split`.
pub fn real_prototypes_reference(
    store: &EmbeddingStore,
    split: morn_core::store::Split,
    config: &morn_core::model::ModelConfig,
    params: &morn_core::model::ModelParams<f64>,
    k_shot: usize,
    seed: u64,
) -> Vec<(usize, Vec<f64>)> {
    store
        .manifest()
        .split_classes(split)
        .into_iter()
        .map(|c| {
            let protos: Vec<Vec<f64>> = store
                .videos_of_class(c)
                .iter()
                .map(|&v| video_prototype_reference(store, config, params, v, k_shot, seed))
                .collect();
            (c, mean_rows(&protos))
        })
        .collect()
}

/// Two-class toy store for the bank oracle: 4 videos per class, L=3, d=4.
pub fn toy_bank_store(seed: u64) -> EmbeddingStore {
    let store = morn_core::store::gen_synthetic(&SyntheticSpec {
        seed,
        n_classes: 2,
        videos_per_class: 4,
        frames: 3,
        dim: 4,
        class_sep: 1.0,
        text_corr: 0.5,
        n_temp: 2,
        noise_std: Some(0.5),
    })
    .unwrap();
    let m = morn_core::episode::split_by_counts(store.manifest(), 0, 0).unwrap();
    store.with_manifest(m).unwrap()
}

pub fn toy_bank_config() -> morn_core::model::ModelConfig {
    morn_core::model::ModelConfig {
        frames: 3,
        dim: 4,
        omegas: vec![2],
        d_k: 4,
        d_p: 4,
        se_heads: 2,
        use_text: true,
        mpe: morn_core::mpe::MpeConfig {
            mode: morn_core::mpe::MpeMode::WeightedAverage,
            lambda: 0.5,
            heads: 2,
        },
    }
}
