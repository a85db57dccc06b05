use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use morn_core::config::{LossMode, SplitSpec, TrainConfig};
use morn_core::episode::{split_by_counts, split_store};
use morn_core::harness::{self, eval_episode, SweepGrid};
use morn_core::model::ModelParams;
use morn_core::mpe::MpeMode;
use morn_core::store::{gen_synthetic, read_store, EmbeddingStore, Split, SyntheticSpec};
use morn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "morn", version, about = "Few-shot video classification over cached embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic embedding store.
    Gen(GenArgs),
    /// Assign classes of a store to base/val/novel splits.
    Split(SplitArgs),
    /// Train on the base split and save a parameter snapshot.
    Train(TrainArgs),
    /// Evaluate a parameter snapshot on held-out episodes.
    Eval(EvalArgs),
    /// Per-class PRIDE table for a parameter snapshot.
    Pride(EvalArgs),
    /// Train and evaluate over a grid of fusion settings.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    videos_per_class: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4.0)]
    class_sep: f64,
    #[arg(long, default_value_t = 0.9)]
    text_corr: f64,
    #[arg(long, default_value_t = 4)]
    n_temp: usize,
    /// Per-coordinate frame noise; defaults to 1/sqrt(dim).
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    store: PathBuf,
    /// Output directory; defaults to rewriting the input store.
    #[arg(long)]
    out: Option<PathBuf>,
    /// First N classes (index order) become base.
    #[arg(long, conflicts_with_all = ["base", "val", "novel"])]
    base_count: Option<usize>,
    #[arg(long, default_value_t = 0, requires = "base_count")]
    val_count: usize,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',')]
    base: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    val: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    novel: Vec<String>,
}

/// Flags that override the config file.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    n_query: Option<usize>,
    /// Base/val class counts applied when the store has no split.
    #[arg(long, value_names = ["BASE", "VAL"], num_args = 2)]
    split_counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    omegas: Option<Vec<usize>>,
    #[arg(long)]
    d_k: Option<usize>,
    #[arg(long)]
    d_p: Option<usize>,
    #[arg(long)]
    se_heads: Option<usize>,
    #[arg(long)]
    no_text: bool,
    #[arg(long, value_enum)]
    mpe_mode: Option<MpeMode>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mpe_heads: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    loss_mode: Option<LossMode>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    train_episodes: Option<usize>,
    #[arg(long)]
    val_episodes: Option<usize>,
    #[arg(long)]
    test_episodes: Option<usize>,
    #[arg(long)]
    eval_split: Option<Split>,
}

impl RunArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            seed => c.seed,
            n_way => c.n_way,
            k_shot => c.k_shot,
            n_query => c.n_query,
            omegas => c.model.omegas,
            d_k => c.model.d_k,
            d_p => c.model.d_p,
            se_heads => c.model.se_heads,
            mpe_mode => c.model.mpe.mode,
            lambda => c.model.mpe.lambda,
            mpe_heads => c.model.mpe.heads,
            tau => c.tau,
            loss_mode => c.loss_mode,
            lr => c.optimizer.lr,
            beta1 => c.optimizer.beta1,
            beta2 => c.optimizer.beta2,
            train_episodes => c.train_episodes,
            val_episodes => c.val_episodes,
            test_episodes => c.test_episodes,
            eval_split => c.eval_split,
        );
        if let Some(s) = &self.store {
            c.store = Some(s.clone());
        }
        if let Some(v) = &self.split_counts {
            c.split = Some(SplitSpec { base: v[0], val: v[1] });
        }
        if self.no_text {
            c.model.use_text = false;
        }
        Ok(c)
    }

    /// Config with store-derived fields filled in, plus the loaded store.
    fn resolve(&self) -> Result<(TrainConfig, EmbeddingStore)> {
        let mut c = self.config()?;
        let path = c
            .store
            .clone()
            .ok_or_else(|| Error::Config("no store given (use --store or `store` in the config)".into()))?;
        let store = c.resolve(read_store(&path)?)?;
        Ok((c, store))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory for params.json, loss.csv and config.toml.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Snapshot written by `train`; without it, freshly initialised params are used.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Report destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the sampled episodes as JSON.
    #[arg(long)]
    dump_episodes: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "weighted-average")]
    modes: Vec<MpeMode>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "8")]
    mpe_heads_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    se_heads_grid: Vec<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parameter snapshot with the config that produced it.
#[derive(Serialize, Deserialize)]
struct Snapshot {
    seed: u64,
    config: TrainConfig,
    selected_episode: usize,
    params: ModelParams,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<S: Serialize>(value: &S) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn load_params(path: Option<&Path>, config: &TrainConfig) -> Result<ModelParams> {
    let Some(path) = path else {
        return harness::init_params(config);
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let snap: Snapshot = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if snap.config.model != config.model {
        return Err(Error::Config(format!(
            "snapshot {} was trained with a different model config",
            path.display()
        )));
    }
    Ok(snap.params)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let store = gen_synthetic(&SyntheticSpec {
                seed: a.seed,
                n_classes: a.classes,
                videos_per_class: a.videos_per_class,
                frames: a.frames,
                dim: a.dim,
                class_sep: a.class_sep,
                text_corr: a.text_corr,
                n_temp: a.n_temp,
                noise_std: a.noise_std,
            })?;
            store.write(&a.out)?;
            eprintln!("wrote {} videos of {} classes to {}", store.n_videos(), store.n_classes(), a.out.display());
        }
        Command::Split(a) => {
            let store = read_store(&a.store)?;
            let manifest = match a.base_count {
                Some(n) => split_by_counts(store.manifest(), n, a.val_count)?,
                None => split_store(store.manifest(), &a.base, &a.val, &a.novel)?,
            };
            let out = a.out.unwrap_or(a.store);
            store.with_manifest(manifest)?.write(&out)?;
            eprintln!("wrote split store to {}", out.display());
        }
        Command::Train(a) => {
            let (config, store) = a.run.resolve()?;
            let outcome = harness::train(&store, &config)?;
            let snap = Snapshot {
                seed: config.seed,
                config: config.clone(),
                selected_episode: outcome.selected_episode,
                params: outcome.params,
            };
            write(&a.out.join("params.json"), &json(&snap))?;
            let curve: Vec<LossRow> = outcome
                .loss_curve
                .iter()
                .enumerate()
                .map(|(i, &loss)| LossRow {
                    episode: i + 1,
                    loss,
                    seed: config.seed,
                })
                .collect();
            write(&a.out.join("loss.csv"), &harness::to_csv(&curve)?)?;
            write(&a.out.join("config.toml"), &config.to_toml())?;
            eprintln!(
                "trained {} episodes (selected {}), final loss {:.4}",
                outcome.loss_curve.len(),
                outcome.selected_episode,
                outcome.loss_curve.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval(a) => {
            let (config, store) = a.run.resolve()?;
            let params = load_params(a.params.as_deref(), &config)?;
            if let Some(p) = &a.dump_episodes {
                let dumps = (0..config.test_episodes)
                    .map(|i| Ok(eval_episode(&store, &config, config.eval_split, i)?.dump(&store)))
                    .collect::<Result<Vec<_>>>()?;
                write(p, &json(&EpisodeFile { seed: config.seed, episodes: dumps }))?;
            }
            let report = harness::evaluate(&store, &config, &params)?;
            emit(a.out.as_deref(), &json(&report))?;
            eprintln!("accuracy {:.4} ± {:.4} over {} episodes", report.accuracy, report.ci95, report.episodes);
        }
        Command::Pride(a) => {
            let (config, store) = a.run.resolve()?;
            let params = load_params(a.params.as_deref(), &config)?;
            let report = harness::pride_report(&store, &config, &params)?;
            emit(a.out.as_deref(), &report.to_csv()?)?;
            let summary = PrideSummary {
                mean_pride: report.mean_pride,
                n_videos: report.per_video.len(),
                seed: config.seed,
                config,
            };
            match &a.out {
                Some(p) => write(&p.with_extension("summary.json"), &json(&summary))?,
                None => eprint!("{}", json(&summary)),
            }
        }
        Command::Sweep(a) => {
            let (config, store) = a.run.resolve()?;
            let grid = SweepGrid {
                modes: a.modes,
                lambdas: a.lambdas,
                mpe_heads: a.mpe_heads_grid,
                se_heads: a.se_heads_grid,
            };
            let rows = harness::sweep(&store, &config, &grid)?;
            emit(a.out.as_deref(), &harness::to_csv(&rows)?)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    episode: usize,
    loss: f64,
    seed: u64,
}

#[derive(Serialize)]
struct EpisodeFile {
    seed: u64,
    episodes: Vec<morn_core::episode::EpisodeDump>,
}

#[derive(Serialize)]
struct PrideSummary {
    mean_pride: f64,
    n_videos: usize,
    seed: u64,
    config: TrainConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
