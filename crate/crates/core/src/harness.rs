//! Episodic training, evaluation with confidence intervals, PRIDE reports
//! and grid sweeps.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{LossMode, TrainConfig};
use crate::episode::{sample_episode, Episode};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, forward, predict_logits, true_class_prototypes, BoundParams, EpisodeBatch, ModelParams};
use crate::mpe::MpeMode;
use crate::optim::Adam;
use crate::pride::{combined_loss, derived_rng, pride_loss, EmaBank, PrideReport};
use crate::store::{EmbeddingStore, Split};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::visual::argmax;

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const VAL_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

/// Parameters as initialised from `config.seed`.
pub fn init_params(config: &TrainConfig) -> Result<ModelParams> {
    let mut rng = derived_rng(config.seed, INIT_STREAM, 0);
    ModelParams::init(&config.model, &mut rng)
}

/// Episode `index` of the evaluation stream for `split`; independent of
/// every other index so episodes can be scored in any order.
pub fn eval_episode(store: &EmbeddingStore, config: &TrainConfig, split: Split, index: usize) -> Result<Episode> {
    let stream = if split == Split::Val { VAL_STREAM } else { EVAL_STREAM };
    let mut rng = derived_rng(config.seed, stream, index as u64);
    sample_episode(store, split, config.n_way, config.k_shot, config.n_query, &mut rng)
}

/// Training objective of one episode from a forward pass.
///
/// With `pride` set to `(bank, targets)`, the CE term is combined with the
/// InfoNCE term over `bank` rows through `mix_param`.
pub fn episode_loss<'t, T: Element>(
    logits: Var<'t, T>,
    class_prototypes: Var<'t, T>,
    labels: &[usize],
    mix_param: Var<'t, T>,
    pride: Option<(&Tensor<T>, &[usize], f64)>,
) -> Result<Var<'t, T>> {
    let ce = cross_entropy(logits, labels)?;
    match pride {
        None => Ok(ce),
        Some((bank, targets, tau)) => {
            let own = true_class_prototypes(class_prototypes, labels)?;
            let pr = pride_loss(own, targets, bank, tau)?;
            combined_loss(ce, pr, mix_param)
        }
    }
}

/// Folds the episode's per-slot mean true-class prototype into the bank and
/// returns the bank rows plus each query's target row.
fn update_bank(bank: &mut EmaBank, episode: &Episode, labels: &[usize], own: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<usize>)> {
    let d_p = own.shape()[1];
    for (slot, &class) in episode.classes.iter().enumerate() {
        let mut acc = vec![0.0f64; d_p];
        let mut n = 0usize;
        for (r, _) in labels.iter().enumerate().filter(|(_, &y)| y == slot) {
            for (a, &x) in acc.iter_mut().zip(&own.data()[r * d_p..(r + 1) * d_p]) {
                *a += x as f64;
            }
            n += 1;
        }
        let mean: Vec<f32> = acc.iter().map(|a| (a / n as f64) as f32).collect();
        bank.update(class, &mean);
    }
    let snap = bank.snapshot();
    let targets = labels
        .iter()
        .map(|&y| snap.position(episode.classes[y]).expect("updated classes are in the bank"))
        .collect();
    Ok((snap.to_tensor()?, targets))
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            detail: format!("non-finite value from {op}"),
        },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub episode: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Loss of every training episode, in order.
    pub loss_curve: Vec<f64>,
    pub val_history: Vec<ValPoint>,
    /// Training episodes seen by the returned params.
    pub selected_episode: usize,
    pub seed: u64,
}

/// Runs `config.train_episodes` sequential episodes on the base split.
///
/// When the store has a non-empty val split and `val_episodes > 0`, the
/// parameters are scored on val every `val_every` episodes and after the
/// last one; the best snapshot is returned (earliest on ties).
pub fn train(store: &EmbeddingStore, config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(store, config, init_params(config)?)
}

pub fn train_from(store: &EmbeddingStore, config: &TrainConfig, mut params: ModelParams) -> Result<TrainOutcome> {
    config.validate()?;
    config.check_store(store)?;
    let mut rng = derived_rng(config.seed, TRAIN_STREAM, 0);
    let mut adam = Adam::new(config.optimizer, &params.tensors());
    let mut bank = EmaBank::new(store.n_classes(), config.ema_decay)?;
    let use_val = config.val_episodes > 0 && !store.manifest().split_classes(Split::Val).is_empty();

    let mut loss_curve = Vec::with_capacity(config.train_episodes);
    let mut val_history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for step in 0..config.train_episodes {
        let episode = sample_episode(store, Split::Base, config.n_way, config.k_shot, config.n_query, &mut rng)?;
        let batch = EpisodeBatch::from_episode(store, &episode)?;
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (loss, grads) = train_step(&tape, config, &bound, &batch, &episode, &mut bank).map_err(|e| diverged(step, e))?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!("loss {loss} or its gradient is not finite"),
            });
        }
        loss_curve.push(loss);
        drop(bound);
        adam.step(&mut params.tensors_mut(), &grads)?;
        if params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "parameters became non-finite after the update".into(),
            });
        }

        let done = step + 1;
        if use_val && (done % config.val_every == 0 || done == config.train_episodes) {
            let acc = evaluate_split(store, config, &params, Split::Val, config.val_episodes)?.accuracy;
            val_history.push(ValPoint { episode: done, accuracy: acc });
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, done, params.clone()));
            }
        }
    }

    let (params, selected_episode) = match best {
        Some((_, at, p)) => (p, at),
        None => (params, config.train_episodes),
    };
    Ok(TrainOutcome {
        params,
        loss_curve,
        val_history,
        selected_episode,
        seed: config.seed,
    })
}

fn train_step<'t>(
    tape: &'t Tape<f32>,
    config: &TrainConfig,
    bound: &BoundParams<'t, f32>,
    batch: &EpisodeBatch,
    episode: &Episode,
    bank: &mut EmaBank,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let out = forward(tape, &config.model, bound, batch)?;
    let pride_inputs = match config.loss_mode {
        LossMode::CeOnly => None,
        LossMode::CePlusPride => {
            let own = true_class_prototypes(out.class_prototypes, &batch.labels)?.value();
            Some(update_bank(bank, episode, &batch.labels, &own)?)
        }
    };
    let pride = pride_inputs.as_ref().map(|(b, t)| (b, t.as_slice(), config.tau));
    let loss = episode_loss(out.logits, out.class_prototypes, &batch.labels, bound.mix_param, pride)?;
    let g = tape.backward(loss)?;
    let grads = bound.vars().iter().map(|&v| g.wrt(v)).collect();
    Ok((loss.value().item() as f64, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_name: String,
    pub accuracy: f64,
    pub n_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub episodes: usize,
    pub accuracy: f64,
    /// Normal-approximation half-width over per-episode accuracies.
    pub ci95: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub mean_pride: Option<f64>,
    pub seed: u64,
    pub config: TrainConfig,
    pub wall_clock_s: f64,
}

/// Per-episode accuracies and `(class, correct)` per query.
fn score_episode(store: &EmbeddingStore, config: &TrainConfig, params: &ModelParams, episode: &Episode) -> Result<Vec<(usize, bool)>> {
    let batch = EpisodeBatch::from_episode(store, episode)?;
    let logits = predict_logits(&config.model, params, &batch)?;
    let n = config.n_way;
    Ok(batch
        .labels
        .iter()
        .enumerate()
        .map(|(r, &y)| (episode.classes[y], argmax(&logits.data()[r * n..(r + 1) * n]) == y))
        .collect())
}

/// Scores `config.test_episodes` episodes of `config.eval_split`.
pub fn evaluate(store: &EmbeddingStore, config: &TrainConfig, params: &ModelParams) -> Result<EvalReport> {
    evaluate_split(store, config, params, config.eval_split, config.test_episodes)
}

pub fn evaluate_split(
    store: &EmbeddingStore,
    config: &TrainConfig,
    params: &ModelParams,
    split: Split,
    episodes: usize,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".into()));
    }
    config.check_store(store)?;
    let started = Instant::now();
    let scored = (0..episodes)
        .into_par_iter()
        .map(|i| score_episode(store, config, params, &eval_episode(store, config, split, i)?))
        .collect::<Result<Vec<_>>>()?;

    let accs: Vec<f64> = scored
        .iter()
        .map(|s| s.iter().filter(|(_, ok)| *ok).count() as f64 / s.len() as f64)
        .collect();
    let n = accs.len() as f64;
    let accuracy = accs.iter().sum::<f64>() / n;
    let ci95 = if accs.len() > 1 {
        let var = accs.iter().map(|a| (a - accuracy).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * var.sqrt() / n.sqrt()
    } else {
        0.0
    };

    let mut hits = vec![(0usize, 0usize); store.n_classes()];
    for &(c, ok) in scored.iter().flatten() {
        hits[c].1 += 1;
        hits[c].0 += ok as usize;
    }
    let per_class = hits
        .iter()
        .enumerate()
        .filter(|(_, h)| h.1 > 0)
        .map(|(c, &(ok, total))| ClassAccuracy {
            class_name: store.manifest().classes[c].clone(),
            accuracy: ok as f64 / total as f64,
            n_queries: total,
        })
        .collect();

    Ok(EvalReport {
        split,
        episodes,
        accuracy,
        ci95,
        per_class,
        mean_pride: None,
        seed: config.seed,
        config: config.clone(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// Builds the real-prototype bank on `config.eval_split` and scores every video.
pub fn pride_report(store: &EmbeddingStore, config: &TrainConfig, params: &ModelParams) -> Result<PrideReport> {
    config.check_store(store)?;
    crate::pride::pride_report(store, config.eval_split, &config.model, params, config.k_shot, config.seed)
}

/// Axes of a sweep; the run is their cartesian product in the order
/// mode, λ, MPE heads, SE heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub modes: Vec<MpeMode>,
    pub lambdas: Vec<f64>,
    pub mpe_heads: Vec<usize>,
    pub se_heads: Vec<usize>,
}

impl SweepGrid {
    pub fn points(&self) -> Vec<(MpeMode, f64, usize, usize)> {
        let mut out = Vec::new();
        for &m in &self.modes {
            for &l in &self.lambdas {
                for &h in &self.mpe_heads {
                    for &s in &self.se_heads {
                        out.push((m, l, h, s));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: MpeMode,
    pub lambda: f64,
    pub mpe_heads: usize,
    pub se_heads: usize,
    pub accuracy: f64,
    pub ci95: f64,
    pub seed: u64,
    pub wall_clock_s: f64,
    pub cumulative_s: f64,
}

/// One train + evaluate per grid point, all with `base.seed`.
pub fn sweep(store: &EmbeddingStore, base: &TrainConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(points.len());
    let mut cumulative = 0.0;
    for (mode, lambda, mpe_heads, se_heads) in points {
        let started = Instant::now();
        let mut cfg = base.clone();
        cfg.model.mpe.mode = mode;
        cfg.model.mpe.lambda = lambda;
        cfg.model.mpe.heads = mpe_heads;
        cfg.model.se_heads = se_heads;
        cfg.validate()?;
        let trained = train(store, &cfg)?;
        let report = evaluate(store, &cfg, &trained.params)?;
        let wall = started.elapsed().as_secs_f64();
        cumulative += wall;
        rows.push(SweepRow {
            mode,
            lambda,
            mpe_heads,
            se_heads,
            accuracy: report.accuracy,
            ci95: report.ci95,
            seed: cfg.seed,
            wall_clock_s: wall,
            cumulative_s: cumulative,
        });
    }
    Ok(rows)
}

pub fn to_csv<S: Serialize>(rows: &[S]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
