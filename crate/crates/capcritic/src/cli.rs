//! Command-line front end: vocabulary building, synthetic data, training,
//! scoring, the two-fold generator evaluation, robustness sweeps,
//! correlation reports, baseline metrics, and word-frequency profiles.
//!
//! Options come from flags or a JSON run configuration (`--config`); flags
//! win. One `--seed` governs every random choice, `--threads 1` makes runs
//! bit-reproducible, and outputs are never overwritten without `--force`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baseline::CiderCorpusStats;
use crate::corpus::{load_dataset, scan_t_max, synth_dataset, Caption, Dataset, Vocabulary};
use crate::critic::{CriticConfig, CriticModel};
use crate::encoder::ContextMode;
use crate::error::{Error, Result};
use crate::evalstats::{
    kendall_tau, pearson_rho, robustness_curve, word_frequency_profile, write_robustness_csv,
    BleuMetric, CandidateMetric, CiderMetric, CorrelationReport, CriticMetric, PairLabel,
    RobustnessCurve, RougeMetric,
};
use crate::fusion::{FusionConfig, FusionStrategy};
use crate::stablehash::derive_seed;
use crate::trainer::{
    score_pairs, train_with_validation, two_fold_score, write_history_csv, TrainConfig,
    GENERATOR_EVAL_EPOCHS,
};

/// JSON side of the command line; every field has a flag that overrides it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub generator: Option<String>,
    pub replicas: Option<usize>,
    pub gamma_grid: Option<Vec<f64>>,
    pub train: Option<TrainConfig>,
}

#[derive(Parser, Debug)]
#[command(
    name = "capcritic",
    version,
    about = "Learned caption critic with rule-based baselines, robustness sweeps and correlation reports"
)]
pub struct Cli {
    /// JSON run configuration; explicit flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for every random choice in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for fold/replica training; 1 is fully sequential.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    /// Directory for outputs without explicit paths.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Caption JSON file (image_id, references, generated captions).
    #[arg(long, value_name = "FILE")]
    captions: Option<PathBuf>,
    /// Binary image-feature file.
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,
    /// Vocabulary file, one word per line.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a frequency-ranked vocabulary from a caption file.
    BuildVocab {
        #[arg(long, value_name = "FILE")]
        captions: Option<PathBuf>,
        /// Keep at most this many words.
        #[arg(long, default_value_t = 10_000)]
        max_vocab: usize,
        /// Drop words seen fewer times than this.
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        /// Output path (default: vocab.txt under the output directory).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic captioned-image dataset for experiments.
    SynthData {
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long, default_value_t = 120)]
        vocab_size: usize,
        #[arg(long, default_value_t = 16)]
        d_img: usize,
    },
    /// Train a critic; writes the model file and a history CSV.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Generator whose captions serve as generator negatives.
        #[arg(long)]
        generator: Option<String>,
        /// Pretrained word embedding text file.
        #[arg(long, value_name = "FILE")]
        embeddings: Option<PathBuf>,
    },
    /// Score one generator's captions with a trained critic.
    Score {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        #[arg(long)]
        generator: Option<String>,
        /// Output path (default: scores.csv under the output directory).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Two-fold protocol: train on each half, score the other; prints the
    /// generator's mean score.
    EvaluateGenerator {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        generator: Option<String>,
        /// Seed replicas to average.
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sweep transforms over gamma and write normalized score curves.
    Robustness {
        #[command(flatten)]
        data: DataArgs,
        /// Trained critic; required when the metric list includes "critic".
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Comma-separated metrics: bleu1..bleu4, rougeL, cider, critic.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        /// Comma-separated transforms: rc, wp, rw.
        #[arg(long, value_delimiter = ',')]
        transforms: Vec<String>,
        /// Comma-separated gamma grid spanning [0,1].
        #[arg(long)]
        gamma_grid: Option<String>,
        /// Output path (default: robustness.csv under the output directory).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Correlate human judgments with metric scores from a CSV.
    Correlate {
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// kendall or pearson.
        #[arg(long, default_value = "kendall")]
        method: String,
        /// Column holding human scores.
        #[arg(long, default_value = "human_score")]
        human_col: String,
        /// Column holding metric scores.
        #[arg(long, default_value = "metric_score")]
        metric_col: String,
        /// Also write the JSON report here (it always goes to stdout).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Rule-based metric scores for one generator's captions.
    Baseline {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        generator: Option<String>,
        /// Comma-separated metrics: bleu1..bleu4, rougeL, cider.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        /// Output path (default: baseline.csv under the output directory).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Per-word relative frequency profile of a caption set.
    WordFreq {
        #[command(flatten)]
        data: DataArgs,
        /// Profile this generator's captions instead of the references.
        #[arg(long)]
        generator: Option<String>,
        /// Output path (default: word_freq.csv under the output directory).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

/// Entry point used by the binary; parses `std::env::args`.
pub fn run() -> Result<()> {
    run_cli(Cli::parse())
}

fn run_cli(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| Error::config(format!("bad config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let ctx = Context {
        seed: cli.seed.or(cfg.seed).unwrap_or(0),
        threads: cli.threads.or(cfg.threads).unwrap_or(1).max(1),
        force: cli.force,
        out_dir: cli
            .out_dir
            .clone()
            .or(cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from(".")),
        seed_given: cli.seed.is_some(),
        cfg,
    };
    match cli.cmd {
        Command::BuildVocab {
            captions,
            max_vocab,
            min_freq,
            out,
        } => build_vocab(&ctx, captions, max_vocab, min_freq, out),
        Command::SynthData {
            images,
            vocab_size,
            d_img,
        } => synth_data(&ctx, images, vocab_size, d_img),
        Command::Train {
            data,
            epochs,
            generator,
            embeddings,
        } => train_cmd(&ctx, data, epochs, generator, embeddings),
        Command::Score {
            data,
            model,
            generator,
            out,
        } => score_cmd(&ctx, data, model, generator, out),
        Command::EvaluateGenerator {
            data,
            generator,
            replicas,
            epochs,
        } => evaluate_generator(&ctx, data, generator, replicas, epochs),
        Command::Robustness {
            data,
            model,
            metrics,
            transforms,
            gamma_grid,
            out,
        } => robustness(&ctx, data, model, metrics, transforms, gamma_grid, out),
        Command::Correlate {
            input,
            method,
            human_col,
            metric_col,
            out,
        } => correlate(&ctx, input, &method, &human_col, &metric_col, out),
        Command::Baseline {
            data,
            generator,
            metrics,
            out,
        } => baseline_cmd(&ctx, data, generator, metrics, out),
        Command::WordFreq {
            data,
            generator,
            out,
        } => word_freq(&ctx, data, generator, out),
    }
}

/// Resolved global options plus the JSON config for per-field fallbacks.
struct Context {
    seed: u64,
    threads: usize,
    force: bool,
    out_dir: PathBuf,
    /// Whether --seed was passed explicitly (it then overrides seeds inside
    /// a config-file train block too).
    seed_given: bool,
    cfg: RunConfig,
}

impl Context {
    /// Output path: explicit flag, else `out_dir/name`.
    fn out_path(&self, explicit: Option<PathBuf>, name: &str) -> PathBuf {
        explicit.unwrap_or_else(|| self.out_dir.join(name))
    }

    fn check_overwrite(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(Error::config(format!(
                "refusing to overwrite {} (pass --force)",
                path.display()
            )));
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        Ok(())
    }

    fn required(
        &self,
        flag: Option<PathBuf>,
        cfg_field: &Option<PathBuf>,
        name: &str,
    ) -> Result<PathBuf> {
        flag.or_else(|| cfg_field.clone())
            .ok_or_else(|| Error::config(format!("missing --{name}")))
    }

    fn load_data(&self, data: &DataArgs) -> Result<(Dataset, Arc<Vocabulary>)> {
        let captions = self.required(data.captions.clone(), &self.cfg.captions, "captions")?;
        let features = self.required(data.features.clone(), &self.cfg.features, "features")?;
        let vocab_path = self.required(data.vocab.clone(), &self.cfg.vocab, "vocab")?;
        check_input(&captions)?;
        check_input(&features)?;
        check_input(&vocab_path)?;
        let vocab = Arc::new(Vocabulary::load(&vocab_path)?);
        let t_max = scan_t_max(&captions)?;
        let ds = load_dataset(&captions, &features, Arc::clone(&vocab), t_max)?;
        Ok((ds, vocab))
    }

    /// Training configuration: the config file's train block if present
    /// (with --seed overriding its seeds when given), else defaults sized
    /// to the dataset.
    fn train_config(&self, ds: &Dataset) -> TrainConfig {
        let mut cfg = match &self.cfg.train {
            Some(t) => t.clone(),
            None => TrainConfig::new(default_model_config(ds, derive_seed(self.seed, "model", 0))),
        };
        if self.cfg.train.is_none() || self.seed_given {
            cfg.seed = self.seed;
            cfg.model.seed = derive_seed(self.seed, "model", 0);
        }
        if cfg.model.vocab_size == 0 {
            cfg.model.vocab_size = ds.vocab.size();
        }
        if cfg.model.t_max < ds.t_max {
            cfg.model.t_max = ds.t_max;
        }
        cfg
    }

    fn generator_name(&self, flag: Option<String>, ds: &Dataset) -> Result<String> {
        if let Some(g) = flag.or_else(|| self.cfg.generator.clone()) {
            return Ok(g);
        }
        let names = ds.generator_names();
        match names.len() {
            0 => Err(Error::data("dataset has no generated captions")),
            1 => Ok(names.into_iter().next().unwrap()),
            _ => Err(Error::config(format!(
                "dataset has several generators ({}); pick one with --generator",
                names.join(", ")
            ))),
        }
    }
}

/// Missing inputs are usage errors: the path is wrong, not the data.
fn check_input(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::config(format!(
            "input file {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

/// Desk-scale architecture used when no config file provides one.
fn default_model_config(ds: &Dataset, seed: u64) -> CriticConfig {
    CriticConfig {
        context_mode: ContextMode::ImageCaption,
        fusion: FusionConfig::new(FusionStrategy::ConcatLinear),
        emb_dim: 48,
        hidden: 64,
        lstm_layers: 1,
        d_img: ds.feature_dim(),
        t_max: ds.t_max,
        vocab_size: 0,
        seed,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn build_vocab(
    ctx: &Context,
    captions: Option<PathBuf>,
    max_vocab: usize,
    min_freq: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let captions = ctx.required(captions, &ctx.cfg.captions, "captions")?;
    check_input(&captions)?;
    if max_vocab == 0 {
        return Err(Error::config("--max-vocab must be at least 1"));
    }
    let text = fs::read_to_string(&captions).map_err(|e| Error::io(&captions, e))?;
    #[derive(Deserialize)]
    struct Rec {
        #[allow(dead_code)]
        image_id: String,
        references: Vec<String>,
        #[serde(default)]
        #[allow(dead_code)]
        generated: serde_json::Value,
    }
    let records: Vec<Rec> =
        serde_json::from_str(&text).map_err(|e| Error::format(&captions, e.to_string()))?;
    let texts: Vec<String> = records.into_iter().flat_map(|r| r.references).collect();
    let vocab = Vocabulary::build(&texts, max_vocab, min_freq)?;
    let out = ctx.out_path(out, "vocab.txt");
    ctx.check_overwrite(&out)?;
    vocab.save(&out)?;
    println!(
        "vocabulary of {} words written to {}",
        vocab.size(),
        out.display()
    );
    Ok(())
}

fn synth_data(ctx: &Context, images: usize, vocab_size: usize, d_img: usize) -> Result<()> {
    let ds = synth_dataset(ctx.seed, images, vocab_size, d_img)?;
    let captions = ctx.out_dir.join("captions.json");
    let features = ctx.out_dir.join("features.bin");
    let vocab_path = ctx.out_dir.join("vocab.txt");
    for p in [&captions, &features, &vocab_path] {
        ctx.check_overwrite(p)?;
    }
    crate::corpus::write_dataset(&ds, &captions, &features)?;
    ds.vocab.save(&vocab_path)?;
    println!(
        "synthetic dataset: {} images, vocab {} -> {}",
        ds.n_images(),
        ds.vocab.size(),
        ctx.out_dir.display()
    );
    Ok(())
}

fn train_cmd(
    ctx: &Context,
    data: DataArgs,
    epochs: Option<usize>,
    generator: Option<String>,
    embeddings: Option<PathBuf>,
) -> Result<()> {
    let (ds, vocab) = ctx.load_data(&data)?;
    let mut cfg = ctx.train_config(&ds);
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let generator = if cfg.mixer.generator {
        Some(ctx.generator_name(generator, &ds)?)
    } else {
        None
    };
    let model_path = ctx.out_dir.join("model.bin");
    let history_path = ctx.out_dir.join("history.csv");
    ctx.check_overwrite(&model_path)?;
    ctx.check_overwrite(&history_path)?;

    let pretrained = match embeddings.or_else(|| ctx.cfg.embeddings.clone()) {
        Some(p) => {
            check_input(&p)?;
            Some(crate::encoder::load_embedding_file(&p)?)
        }
        None => None,
    };
    let (model, history) = match pretrained {
        None => train_with_validation(&ds, &cfg, None, generator.as_deref())?,
        Some(table) => {
            // Rebuild the model with pretrained rows, then train in place.
            train_pretrained(&ds, &cfg, generator.as_deref(), &table, &vocab)?
        }
    };
    model.save(&model_path)?;
    let mut buf = Vec::new();
    write_history_csv(&history, &mut buf)?;
    write_text(
        &history_path,
        &String::from_utf8(buf).expect("csv is utf-8"),
    )?;
    let last = history.last().expect("at least one epoch");
    println!(
        "trained {} epochs (final mean loss {:.6}); model -> {}",
        history.len(),
        last.mean_loss,
        model_path.display()
    );
    Ok(())
}

/// Training with pretrained embeddings goes through the same loop; only
/// model construction differs, so reuse the trainer by seeding its model
/// construction through the config and swapping the embedding rows in.
fn train_pretrained(
    ds: &Dataset,
    cfg: &TrainConfig,
    generator: Option<&str>,
    table: &std::collections::HashMap<String, Vec<f64>>,
    vocab: &Vocabulary,
) -> Result<(CriticModel, Vec<crate::trainer::EpochStats>)> {
    let probe = CriticModel::new(cfg.model.clone(), vocab, Some(table))?;
    crate::trainer::resume_training(probe, ds, cfg, None, generator)
}

fn load_model_checked(path: &Path, vocab: &Vocabulary) -> Result<CriticModel> {
    check_input(path)?;
    let model = CriticModel::load(path)?;
    if model.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::data(format!(
            "model {} was trained under a different vocabulary",
            path.display()
        )));
    }
    Ok(model)
}

fn score_cmd(
    ctx: &Context,
    data: DataArgs,
    model: Option<PathBuf>,
    generator: Option<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (ds, vocab) = ctx.load_data(&data)?;
    let model_path = ctx.required(model, &ctx.cfg.model, "model")?;
    let model = load_model_checked(&model_path, &vocab)?;
    let generator = ctx.generator_name(generator, &ds)?;
    if !ds.generator_names().iter().any(|n| n == &generator) {
        return Err(Error::data(format!(
            "dataset has no captions from generator {generator:?}"
        )));
    }
    let out = ctx.out_path(out, "scores.csv");
    ctx.check_overwrite(&out)?;

    let pairs = score_pairs(&model, &ds, Some(&generator))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::data(format!("writing scores csv: {e}"));
    w.write_record(["image_id", "caption", "score"])
        .map_err(io_err)?;
    for p in pairs.iter().filter(|p| p.label == PairLabel::Generated) {
        w.write_record([
            p.image_id.as_str(),
            p.caption.as_str(),
            &p.score.to_string(),
        ])
        .map_err(io_err)?;
    }
    let buf = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    write_text(&out, &String::from_utf8(buf).expect("csv is utf-8"))?;
    println!("scores -> {}", out.display());
    Ok(())
}

fn evaluate_generator(
    ctx: &Context,
    data: DataArgs,
    generator: Option<String>,
    replicas: Option<usize>,
    epochs: Option<usize>,
) -> Result<()> {
    let (ds, _) = ctx.load_data(&data)?;
    let generator = ctx.generator_name(generator, &ds)?;
    let mut cfg = ctx.train_config(&ds);
    // The generator-evaluation preset trains shorter than the metric study.
    cfg.epochs = epochs.unwrap_or(if ctx.cfg.train.is_some() {
        cfg.epochs
    } else {
        GENERATOR_EVAL_EPOCHS
    });
    let replicas = replicas.or(ctx.cfg.replicas).unwrap_or(1);
    let pairs_path = ctx.out_dir.join("pairs.csv");
    ctx.check_overwrite(&pairs_path)?;

    let report = two_fold_score(&ds, &generator, &cfg, replicas, ctx.threads)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::data(format!("writing pairs csv: {e}"));
    w.write_record(["image_id", "caption", "label", "score"])
        .map_err(io_err)?;
    for p in &report.pairs {
        let label = match p.label {
            PairLabel::Human => "human",
            PairLabel::Generated => "generated",
        };
        w.write_record([
            p.image_id.as_str(),
            p.caption.as_str(),
            label,
            &p.score.to_string(),
        ])
        .map_err(io_err)?;
    }
    let buf = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    write_text(&pairs_path, &String::from_utf8(buf).expect("csv is utf-8"))?;

    let gen_scores: Vec<f64> = report
        .pairs
        .iter()
        .filter(|p| p.label == PairLabel::Generated)
        .map(|p| p.score)
        .collect();
    let mean = gen_scores.iter().sum::<f64>() / gen_scores.len() as f64;
    println!("{mean}");
    Ok(())
}

fn parse_metric(
    name: &str,
    ds: &Dataset,
    model: &mut Option<CriticModel>,
) -> Result<Box<dyn CandidateMetric>> {
    Ok(match name {
        "bleu1" => Box::new(BleuMetric(1)),
        "bleu2" => Box::new(BleuMetric(2)),
        "bleu3" => Box::new(BleuMetric(3)),
        "bleu4" => Box::new(BleuMetric(4)),
        "rougeL" => Box::new(RougeMetric),
        "cider" => {
            let refs: Vec<&[Caption]> = ds.images.iter().map(|e| e.references.as_slice()).collect();
            Box::new(CiderMetric(CiderCorpusStats::build(&refs)?))
        }
        "critic" => Box::new(CriticMetric(model.take().ok_or_else(|| {
            Error::config("metric \"critic\" needs --model (and may appear only once)")
        })?)),
        other => {
            return Err(Error::config(format!(
                "unknown metric {other:?} (expected bleu1..bleu4, rougeL, cider or critic)"
            )))
        }
    })
}

fn parse_gamma_grid(arg: Option<String>, cfg: &RunConfig) -> Result<Vec<f64>> {
    if let Some(text) = arg {
        let grid: Vec<f64> = text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("bad gamma value {t:?}")))
            })
            .collect::<Result<_>>()?;
        return Ok(grid);
    }
    Ok(cfg
        .gamma_grid
        .clone()
        .unwrap_or_else(|| (0..=10).map(|i| i as f64 / 10.0).collect()))
}

fn robustness(
    ctx: &Context,
    data: DataArgs,
    model: Option<PathBuf>,
    metrics: Vec<String>,
    transforms: Vec<String>,
    gamma_grid: Option<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (ds, vocab) = ctx.load_data(&data)?;
    let model_path = model.or_else(|| ctx.cfg.model.clone());
    let mut critic = match &model_path {
        Some(p) => Some(load_model_checked(p, &vocab)?),
        None => None,
    };
    let metric_names = if metrics.is_empty() {
        let mut m = vec!["bleu4".to_owned(), "rougeL".to_owned(), "cider".to_owned()];
        if critic.is_some() {
            m.push("critic".to_owned());
        }
        m
    } else {
        metrics
    };
    let kinds: Vec<crate::augment::TransformKind> = if transforms.is_empty() {
        crate::augment::TransformKind::ALL.to_vec()
    } else {
        transforms
            .iter()
            .map(|t| t.parse())
            .collect::<Result<_>>()?
    };
    let grid = parse_gamma_grid(gamma_grid, &ctx.cfg)?;
    let out = ctx.out_path(out, "robustness.csv");
    ctx.check_overwrite(&out)?;

    let mut curves: Vec<RobustnessCurve> = Vec::new();
    for name in &metric_names {
        let metric = parse_metric(name, &ds, &mut critic)?;
        for &kind in &kinds {
            let seed = derive_seed(ctx.seed, "robustness", curves.len() as u64);
            curves.push(robustness_curve(metric.as_ref(), &ds, kind, &grid, seed)?);
        }
    }
    let mut buf = Vec::new();
    write_robustness_csv(&curves, &mut buf)?;
    write_text(&out, &String::from_utf8(buf).expect("csv is utf-8"))?;
    for c in &curves {
        println!("{} {} auc {}", c.metric, c.transform, c.auc);
    }
    Ok(())
}

fn correlate(
    ctx: &Context,
    input: Option<PathBuf>,
    method: &str,
    human_col: &str,
    metric_col: &str,
    out: Option<PathBuf>,
) -> Result<()> {
    let input = input.ok_or_else(|| Error::config("missing --input"))?;
    check_input(&input)?;
    let mut reader =
        csv::Reader::from_path(&input).map_err(|e| Error::format(&input, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(&input, e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::data(format!(
                "{} has no column {name:?} (columns: {})",
                input.display(),
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })
    };
    let hi = col(human_col)?;
    let mi = col(metric_col)?;
    let mut pairs = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(&input, e.to_string()))?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    Error::data(format!(
                        "{} row {}: cannot parse {:?} as a number",
                        input.display(),
                        row + 2,
                        rec.get(i).unwrap_or("")
                    ))
                })
        };
        pairs.push((parse(hi)?, parse(mi)?));
    }
    let report: CorrelationReport = match method {
        "kendall" => kendall_tau(&pairs)?,
        "pearson" => {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            pearson_rho(&x, &y)?
        }
        other => {
            return Err(Error::config(format!(
                "unknown method {other:?} (expected kendall or pearson)"
            )))
        }
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(out) = out {
        ctx.check_overwrite(&out)?;
        write_text(&out, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn baseline_cmd(
    ctx: &Context,
    data: DataArgs,
    generator: Option<String>,
    metrics: Vec<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (ds, _) = ctx.load_data(&data)?;
    let generator = ctx.generator_name(generator, &ds)?;
    if !ds.generator_names().iter().any(|n| n == &generator) {
        return Err(Error::data(format!(
            "dataset has no captions from generator {generator:?}"
        )));
    }
    let names = if metrics.is_empty() {
        vec!["bleu4".to_owned(), "rougeL".to_owned(), "cider".to_owned()]
    } else {
        metrics
    };
    let mut none = None;
    let parsed: Vec<Box<dyn CandidateMetric>> = names
        .iter()
        .map(|n| {
            if n == "critic" {
                Err(Error::config(
                    "baseline covers rule metrics; use score for the critic",
                ))
            } else {
                parse_metric(n, &ds, &mut none)
            }
        })
        .collect::<Result<_>>()?;
    let out = ctx.out_path(out, "baseline.csv");
    ctx.check_overwrite(&out)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::data(format!("writing baseline csv: {e}"));
    w.write_record(["image_id", "caption", "metric", "score"])
        .map_err(io_err)?;
    for entry in &ds.images {
        if let Some(caps) = entry.generated.get(&generator) {
            for c in caps {
                for m in &parsed {
                    let s = m.score(&entry.image, &entry.references, c)?;
                    w.write_record([
                        entry.image.id.as_str(),
                        c.raw.as_str(),
                        &m.name(),
                        &s.to_string(),
                    ])
                    .map_err(io_err)?;
                }
            }
        }
    }
    let buf = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    write_text(&out, &String::from_utf8(buf).expect("csv is utf-8"))?;
    println!("baseline scores -> {}", out.display());
    Ok(())
}

fn word_freq(
    ctx: &Context,
    data: DataArgs,
    generator: Option<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (ds, vocab) = ctx.load_data(&data)?;
    let captions: Vec<&Caption> = match &generator {
        None => ds.images.iter().flat_map(|e| &e.references).collect(),
        Some(g) => {
            let caps: Vec<&Caption> = ds
                .images
                .iter()
                .filter_map(|e| e.generated.get(g))
                .flatten()
                .collect();
            if caps.is_empty() {
                return Err(Error::data(format!(
                    "dataset has no captions from generator {g:?}"
                )));
            }
            caps
        }
    };
    let profile = word_frequency_profile(&captions, &vocab)?;
    let out = ctx.out_path(out, "word_freq.csv");
    ctx.check_overwrite(&out)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::data(format!("writing word-freq csv: {e}"));
    w.write_record(["word", "frequency"]).map_err(io_err)?;
    for (id, f) in profile.iter().enumerate() {
        w.write_record([vocab.word(id), &f.to_string()])
            .map_err(io_err)?;
    }
    let buf = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    write_text(&out, &String::from_utf8(buf).expect("csv is utf-8"))?;
    println!("word frequencies -> {}", out.display());
    Ok(())
}
