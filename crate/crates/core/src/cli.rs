//! `msseg` command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{embed_features, middle_slice_profile, source_kdes, source_separability, KdeSeries};
use crate::config::Config;
use crate::dataset::{load_manifest, load_split, write_dataset, Split};
use crate::error::{Error, Result};
use crate::partition::{partition_sources, SourcePartition};
use crate::svg::{line_chart, scatter_chart, Series};
use crate::trainer::{
    evaluate, load_checkpoint, main_student_features, predict, run_training, score_predictions, PredictMode, RunDir,
    Subsets, TrainerState,
};
use crate::volume::{write_atomic, Volume};

#[derive(Debug, Parser)]
#[command(name = "msseg", version, about = "Multi-source semi-supervised volume segmentation")]
pub struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config; defaults are used for anything missing.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<Config> {
        let mut all = self.overrides.clone();
        all.extend_from_slice(extra);
        Config::load(self.config.as_deref(), &all)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AblationArg {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
    Exp5,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Main,
    Ensemble,
}

impl From<ModeArg> for PredictMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Main => PredictMode::Main,
            ModeArg::Ensemble => PredictMode::Ensemble,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate phantom sources into a dataset directory.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Split unlabelled training samples into mixed and other subsets.
    Partition {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        mixed_fraction: Option<f64>,
        /// Defaults to `<dataset>/partition.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train into a run directory (config snapshot, checkpoints, metrics log).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to `<dataset>/partition.json`.
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Discard an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on the held-out split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Specific `ckpt/step-N` directory; defaults to the latest.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<run>/eval-<mode>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write each prediction as raw little-endian u16 to `<dir>/<sample_id>.pred`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Intensity densities, profiles, feature embeddings and separability.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Trained run; adds trained-feature separability next to the untrained one.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { cfg, out, force } => cmd_generate(&cfg.load(&[])?, &out, force),
        Command::Partition {
            cfg,
            dataset,
            mixed_fraction,
            out,
        } => {
            let mut extra = Vec::new();
            if let Some(f) = mixed_fraction {
                extra.push(format!("partition.mixed_fraction={f}"));
            }
            let out = out.unwrap_or_else(|| dataset.join("partition.json"));
            cmd_partition(&cfg.load(&extra)?, &dataset, &out).map(|_| ())
        }
        Command::Train {
            cfg,
            dataset,
            partition,
            run,
            ablation,
            epochs,
            seed,
            resume,
            force,
        } => {
            let mut extra = Vec::new();
            if let Some(a) = ablation {
                let name = a.to_possible_value().expect("named variant").get_name().to_string();
                extra.push(format!("ablation=\"{name}\""));
            }
            if let Some(e) = epochs {
                extra.push(format!("train.epochs={e}"));
            }
            if let Some(s) = seed {
                extra.push(format!("train.seed={s}"));
                extra.push(format!("model.rng_seed={s}"));
            }
            let partition = partition.unwrap_or_else(|| dataset.join("partition.json"));
            let opts = TrainOptions { resume, force };
            cmd_train(&cfg.load(&extra)?, &dataset, &partition, &run, opts).map(|_| ())
        }
        Command::Evaluate {
            run,
            dataset,
            mode,
            checkpoint,
            out,
            predictions,
        } => {
            let opts = EvalOptions {
                mode: mode.map(Into::into),
                checkpoint,
                out,
                predictions,
            };
            cmd_evaluate(&run, &dataset, &opts).map(|_| ())
        }
        Command::Analyze { cfg, dataset, run, out } => {
            cmd_analyze(&cfg.load(&[])?, &dataset, run.as_deref(), &out).map(|_| ())
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub fn cmd_generate(cfg: &Config, out: &Path, force: bool) -> Result<()> {
    let manifest = write_dataset(&cfg.data, out, force)?;
    write_json(&out.join("config.json"), cfg)?;
    println!(
        "wrote {} volumes ({} train, {} test) to {}",
        manifest.entries.len(),
        manifest.split(Split::Train).count(),
        manifest.split(Split::Test).count(),
        out.display()
    );
    Ok(())
}

pub fn cmd_partition(cfg: &Config, dataset: &Path, out: &Path) -> Result<SourcePartition> {
    let manifest = load_manifest(dataset)?;
    let train = load_split(dataset, &manifest, Split::Train)?;
    let (labeled, unlabeled): (Vec<Volume>, Vec<Volume>) = train.into_iter().partition(|v| v.is_labeled());
    let p = partition_sources(&labeled, &unlabeled, &cfg.partition)?;
    p.save(out)?;
    println!(
        "main {} / mixed {} / other {} -> {}",
        p.main.len(),
        p.mixed.len(),
        p.other.len(),
        out.display()
    );
    Ok(p)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub resume: bool,
    pub force: bool,
}

/// Where the run came from; together with `config.json` this reproduces it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub dataset: PathBuf,
    pub partition: PathBuf,
}

pub fn cmd_train(
    cfg: &Config,
    dataset: &Path,
    partition_path: &Path,
    run: &Path,
    opts: TrainOptions,
) -> Result<crate::trainer::TrainingReport> {
    let manifest = load_manifest(dataset)?;
    let train = load_split(dataset, &manifest, Split::Train)?;
    let partition = SourcePartition::load(partition_path)?;
    let labeled: Vec<&str> = train.iter().filter(|v| v.is_labeled()).map(|v| v.sample_id.as_str()).collect();
    let unlabeled: Vec<&str> = train.iter().filter(|v| !v.is_labeled()).map(|v| v.sample_id.as_str()).collect();
    partition.validate(&labeled, &unlabeled)?;
    let subsets = Subsets::from_partition(&partition, &train)?;

    let run_dir = RunDir::new(run);
    let existing = run.exists() && fs::read_dir(run).map_err(|e| Error::io(run, e))?.next().is_some();
    let mut state = match (existing, opts.resume, opts.force) {
        (true, true, _) => {
            let snapshot: Config = read_json(&run.join("config.json"))?;
            if snapshot.model != cfg.model || snapshot.train_config()? != cfg.train_config()? {
                return Err(Error::InvalidArgument(
                    "resume config differs from the run's config.json snapshot".into(),
                ));
            }
            match run_dir.latest_checkpoint()? {
                Some(ckpt) => {
                    info!("resuming from {}", ckpt.display());
                    load_checkpoint(&ckpt)?
                }
                None => TrainerState::new(cfg.model.clone(), cfg.train_config()?)?,
            }
        }
        (true, false, false) => return Err(Error::OutputExists(run.to_path_buf())),
        (true, false, true) => {
            fs::remove_dir_all(run).map_err(|e| Error::io(run, e))?;
            TrainerState::new(cfg.model.clone(), cfg.train_config()?)?
        }
        (false, _, _) => TrainerState::new(cfg.model.clone(), cfg.train_config()?)?,
    };
    fs::create_dir_all(run).map_err(|e| Error::io(run, e))?;
    write_json(&run.join("config.json"), cfg)?;
    partition.save(&run.join("partition.json"))?;
    write_json(
        &run.join("run.json"),
        &RunInfo {
            dataset: dataset.to_path_buf(),
            partition: partition_path.to_path_buf(),
        },
    )?;
    let report = run_training(&mut state, &subsets, cfg.train.epochs, Some(&run_dir))?;
    write_json(&run.join("report.json"), &report)?;
    println!(
        "trained {} -> {} steps ({}), digest {}",
        report.start_step,
        report.final_step,
        cfg.ablation,
        &report.final_digest[..16]
    );
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub mode: Option<PredictMode>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

fn load_run_state(run: &Path, checkpoint: Option<&Path>) -> Result<TrainerState> {
    let ckpt = match checkpoint {
        Some(c) => c.to_path_buf(),
        None => RunDir::new(run)
            .latest_checkpoint()?
            .ok_or_else(|| Error::Missing(run.join("ckpt")))?,
    };
    load_checkpoint(&ckpt)
}

pub fn encode_labels(labels: &[u16]) -> Vec<u8> {
    labels.iter().flat_map(|l| l.to_le_bytes()).collect()
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u16>> {
    if bytes.len() % 2 != 0 {
        return Err(Error::Truncated {
            expected: bytes.len() + 1,
            found: bytes.len(),
        });
    }
    Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
}

pub fn cmd_evaluate(run: &Path, dataset: &Path, opts: &EvalOptions) -> Result<crate::trainer::EvalReport> {
    let state = load_run_state(run, opts.checkpoint.as_deref())?;
    let snapshot: Option<Config> = read_json(&run.join("config.json")).ok();
    let mode = opts
        .mode
        .or(snapshot.map(|c| c.evaluate.mode))
        .unwrap_or(PredictMode::Main);
    let manifest = load_manifest(dataset)?;
    let test = load_split(dataset, &manifest, Split::Test)?;
    let refs: Vec<&Volume> = test.iter().collect();
    let report = match &opts.predictions {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let preds = refs
                .iter()
                .map(|v| {
                    let p = predict(&state, v, mode)?;
                    write_atomic(&dir.join(format!("{}.pred", v.sample_id)), &encode_labels(&p))?;
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()?;
            score_predictions(&refs, &preds, state.net.class_count, state.step, mode)?
        }
        None => evaluate(&state, &refs, mode)?,
    };
    let mode_name = match mode {
        PredictMode::Main => "main",
        PredictMode::Ensemble => "ensemble",
    };
    let out = opts.out.clone().unwrap_or_else(|| run.join(format!("eval-{mode_name}.json")));
    write_json(&out, &report)?;
    let o = &report.overall;
    println!(
        "step {} {mode_name}: mIoU {:.2} Dice {:.2} Recall {:.2} Acc {:.2} -> {}",
        report.step,
        o.miou,
        o.dice,
        o.recall,
        o.accuracy,
        out.display()
    );
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EmbeddedPoint {
    pub sample_id: String,
    pub source_id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FeatureAnalysis {
    pub separability: f64,
    pub embedding: Vec<EmbeddedPoint>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AnalysisReport {
    pub sources: Vec<String>,
    pub kde: Vec<KdeSeries>,
    /// Per source, the mean central-slice profile over its volumes.
    pub profiles: BTreeMap<String, Vec<f64>>,
    pub profile_axis: usize,
    pub untrained: Option<FeatureAnalysis>,
    pub trained: Option<FeatureAnalysis>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

fn feature_analysis(state: &TrainerState, volumes: &[&Volume], cfg: &Config) -> Result<FeatureAnalysis> {
    let features = volumes
        .iter()
        .map(|v| main_student_features(state, v))
        .collect::<Result<Vec<_>>>()?;
    let sources: Vec<&str> = volumes.iter().map(|v| v.source_id.as_str()).collect();
    let separability = source_separability(&features, &sources)?;
    let points = embed_features(&features, &cfg.analyze.projection)?;
    let embedding = volumes
        .iter()
        .zip(points)
        .map(|(v, [x, y])| EmbeddedPoint {
            sample_id: v.sample_id.clone(),
            source_id: v.source_id.clone(),
            x,
            y,
        })
        .collect();
    Ok(FeatureAnalysis { separability, embedding })
}

fn scatter_figure(title: &str, fa: &FeatureAnalysis) -> String {
    let mut by_source: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for p in &fa.embedding {
        by_source.entry(&p.source_id).or_default().push((p.x, p.y));
    }
    let series: Vec<Series> = by_source
        .into_iter()
        .map(|(label, points)| Series { label, points })
        .collect();
    scatter_chart(&format!("{title} (silhouette {:.3})", fa.separability), &series)
}

/// Writes `analysis.json` and SVG figures into `out`. When separability is
/// undefined (fewer than two sources) the density and profile outputs are
/// still written before the error is returned.
pub fn cmd_analyze(cfg: &Config, dataset: &Path, run: Option<&Path>, out: &Path) -> Result<AnalysisReport> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = load_manifest(dataset)?;
    let mut all = load_split(dataset, &manifest, Split::Train)?;
    let test = load_split(dataset, &manifest, Split::Test)?;
    all.extend(test.iter().cloned());
    let refs: Vec<&Volume> = all.iter().collect();

    let kde = source_kdes(&refs, cfg.analyze.kde_points, cfg.analyze.kde_samples_per_volume)?;
    let axis = cfg.analyze.profile_axis;
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for v in &refs {
        let p = middle_slice_profile(v, axis)?;
        let e = sums.entry(v.source_id.clone()).or_insert((vec![0.0; p.len()], 0));
        if e.0.len() != p.len() {
            return Err(Error::Shape(format!("source {} mixes volume shapes", v.source_id)));
        }
        e.0.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let profiles: BTreeMap<String, Vec<f64>> = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|x| x / n as f64).collect()))
        .collect();
    let sources: Vec<String> = profiles.keys().cloned().collect();

    let kde_series: Vec<Series> = kde
        .iter()
        .map(|k| Series {
            label: &k.source_id,
            points: k.grid.iter().copied().zip(k.density.iter().copied()).collect(),
        })
        .collect();
    write_atomic(
        &out.join("kde.svg"),
        line_chart("Intensity density per source", "intensity", "density", &kde_series).as_bytes(),
    )?;
    let profile_series: Vec<Series> = profiles
        .iter()
        .map(|(k, p)| Series {
            label: k,
            points: p.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect(),
        })
        .collect();
    write_atomic(
        &out.join("profiles.svg"),
        line_chart("Central-slice intensity profile", "position", "mean intensity", &profile_series).as_bytes(),
    )?;

    let mut report = AnalysisReport {
        sources,
        kde,
        profiles,
        profile_axis: axis,
        untrained: None,
        trained: None,
        error: None,
    };
    // features come from held-out samples when there are any
    let feature_vols: Vec<&Volume> = if test.is_empty() { refs.clone() } else { test.iter().collect() };
    let result = (|| -> Result<()> {
        let (untrained_state, trained_state) = match run {
            Some(run) => {
                let snapshot: Config = read_json(&run.join("config.json"))?;
                let initial = RunDir::new(run).checkpoint_dir(0);
                let untrained = if initial.join("manifest.json").exists() {
                    load_checkpoint(&initial)?
                } else {
                    TrainerState::new(snapshot.model.clone(), snapshot.train_config()?)?
                };
                (untrained, Some(load_run_state(run, None)?))
            }
            None => (TrainerState::new(cfg.model.clone(), cfg.train_config()?)?, None),
        };
        let u = feature_analysis(&untrained_state, &feature_vols, cfg)?;
        write_atomic(&out.join("embedding-untrained.svg"), scatter_figure("Untrained features", &u).as_bytes())?;
        report.untrained = Some(u);
        if let Some(t) = trained_state {
            let fa = feature_analysis(&t, &feature_vols, cfg)?;
            write_atomic(
                &out.join("embedding-trained.svg"),
                scatter_figure(&format!("Trained features (step {})", t.step), &fa).as_bytes(),
            )?;
            report.trained = Some(fa);
        }
        Ok(())
    })();
    if let Err(e) = &result {
        report.error = Some(e.to_string());
    }
    write_json(&out.join("analysis.json"), &report)?;
    result?;
    let sep = |f: &Option<FeatureAnalysis>| f.as_ref().map(|f| format!("{:.4}", f.separability));
    println!(
        "analysis -> {} (separability untrained {:?}, trained {:?})",
        out.display(),
        sep(&report.untrained),
        sep(&report.trained)
    );
    Ok(report)
}
