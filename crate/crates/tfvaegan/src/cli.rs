//! Command-line surface: experiment configuration (flat JSON config
//! files with dotted keys, mirrored by flags that override them),
//! training/evaluation orchestration, the ablation grid and embedding
//! export.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric
//! abort.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{Map, Value};

use crate::bundle::{load_native_bundle, save_native_bundle_with, ExtraArray};
use crate::checkpoint::{self, Checkpoint};
use crate::classify::transform;
use crate::data::{
    apply_scaler, load_benchmark_bundle, SplitIndices, SplitKind, SyntheticSpec, ZslDataset,
};
use crate::error::{Error, Result};
use crate::networks::ModelConfig;
use crate::pipeline::{ablation_grid, evaluate_checkpoint, train_to_checkpoint, AppendixGrid};
use crate::synthesis::synthesize;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "TFVAEGAN_OUT";

#[derive(Parser)]
#[command(
    name = "tfvaegan",
    version,
    about = "Feature-generating VAE-GAN for (generalized) zero-shot classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-step metrics log.
    Train(TrainArgs),
    /// Synthesize features, train final classifiers and write ZSL/GZSL reports.
    Eval(EvalArgs),
    /// Run the ablation grid (baseline / feedback / t-feature / full) over seeds.
    Ablate(AblateArgs),
    /// Export transformed real-test and synthesized features as a native bundle.
    ExportEmbeddings(ExportArgs),
    /// Generate a synthetic dataset and save it as a native bundle.
    MakeSynth(MakeSynthArgs),
    /// Load a dataset and check every invariant.
    ValidateData(ValidateArgs),
}

#[derive(Args, Clone, Default)]
struct SourceArgs {
    /// Synthetic dataset spec as `k=v,...` (keys: seed, n_seen, n_unseen,
    /// d_a, d_x, per_class, sigma); empty value uses defaults
    #[arg(long, value_name = "SPEC", num_args = 0..=1, default_missing_value = "")]
    synthetic: Option<String>,
    /// Native bundle directory
    #[arg(long, value_name = "DIR")]
    native: Option<PathBuf>,
    /// Benchmark feature file (d_x x N matrix + labels)
    #[arg(long, value_name = "FILE", requires = "benchmark_splits")]
    benchmark_features: Option<PathBuf>,
    /// Benchmark splits file (attributes + 1-indexed locations)
    #[arg(long, value_name = "FILE", requires = "benchmark_features")]
    benchmark_splits: Option<PathBuf>,
}

/// Model hyper-parameter flags; unset flags fall back to the config
/// file, then to defaults. Flag names mirror the config keys
/// (`--hidden` is `model.hidden`, and so on).
#[derive(Args, Clone, Debug, Default)]
struct ModelFlags {
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda_gp: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    n_critic: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    syn_num: Option<usize>,
    #[arg(long)]
    leaky_slope: Option<f64>,
    #[arg(long)]
    hidden_bias_init: Option<f64>,
    /// inductive | transductive
    #[arg(long)]
    mode: Option<String>,
    /// decoder | discriminator
    #[arg(long)]
    feedback_source: Option<String>,
    /// alternating | two_stage
    #[arg(long)]
    strategy: Option<String>,
    /// orig | concat_attr | concat_latent
    #[arg(long)]
    classifier_input: Option<String>,
    #[arg(long)]
    feedback_loops: Option<usize>,
    #[arg(long)]
    recon_samples: Option<usize>,
    #[arg(long)]
    d2_weight: Option<f64>,
    #[arg(long)]
    dec_in_generator_step: Option<bool>,
    #[arg(long)]
    gzsl_synthesize_seen: Option<bool>,
    /// minmax | none
    #[arg(long)]
    scaling: Option<String>,
    #[arg(long)]
    classifier_lr: Option<f64>,
    #[arg(long)]
    classifier_epochs: Option<usize>,
    #[arg(long)]
    classifier_batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    model: ModelFlags,
    /// Flat JSON config file with dotted keys
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory (default: $TFVAEGAN_OUT/train)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory (default: $TFVAEGAN_OUT/eval)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Also write per_class.csv with per-class accuracies
    #[arg(long)]
    per_class_csv: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Number of seeds to average over
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Extra grid: feedback | classifier-input
    #[arg(long, value_name = "GRID")]
    appendix: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output bundle directory (default: $TFVAEGAN_OUT/embeddings)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MakeSynthArgs {
    /// Synthetic dataset spec as `k=v,...`
    #[arg(long, value_name = "SPEC", num_args = 0..=1, default_missing_value = "")]
    synthetic: Option<String>,
    /// Output bundle directory (default: $TFVAEGAN_OUT/synth)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    source: SourceArgs,
}

/// Dataset source resolved from flags and config file.
#[derive(Debug, Clone, PartialEq)]
enum DataSource {
    Synthetic(SyntheticSpec),
    Native(PathBuf),
    Benchmark { features: PathBuf, splits: PathBuf },
}

impl DataSource {
    fn load(&self) -> Result<ZslDataset> {
        match self {
            DataSource::Synthetic(spec) => Ok(spec.build()?.0),
            DataSource::Native(dir) => load_native_bundle(dir),
            DataSource::Benchmark { features, splits } => load_benchmark_bundle(features, splits),
        }
    }

    fn echo_into(&self, map: &mut Map<String, Value>) {
        match self {
            DataSource::Synthetic(spec) => {
                let s = format!(
                    "seed={},n_seen={},n_unseen={},d_a={},d_x={},per_class={},sigma={}",
                    spec.seed, spec.n_seen, spec.n_unseen, spec.d_a, spec.d_x, spec.per_class,
                    spec.sigma
                );
                map.insert("data.synthetic".into(), Value::String(s));
            }
            DataSource::Native(dir) => {
                map.insert(
                    "data.native".into(),
                    Value::String(dir.display().to_string()),
                );
            }
            DataSource::Benchmark { features, splits } => {
                map.insert(
                    "data.benchmark_features".into(),
                    Value::String(features.display().to_string()),
                );
                map.insert(
                    "data.benchmark_splits".into(),
                    Value::String(splits.display().to_string()),
                );
            }
        }
    }
}

/// Flat config file contents, before merging with flags.
#[derive(Debug, Default)]
struct FileConfig {
    model: ModelFlags,
    synthetic: Option<String>,
    native: Option<PathBuf>,
    benchmark_features: Option<PathBuf>,
    benchmark_splits: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| Error::Config(format!("{key}: expected a non-negative integer")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Config(format!("{key}: expected a non-negative integer")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("{key}: expected a number")))
}

fn as_str(key: &str, v: &Value) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("{key}: expected a string")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("{key}: expected a boolean")))
}

fn parse_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let map: Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut fc = FileConfig::default();
    for (key, v) in &map {
        let m = &mut fc.model;
        match key.as_str() {
            "model.hidden" => m.hidden = Some(as_usize(key, v)?),
            "model.alpha" => m.alpha = Some(as_f64(key, v)?),
            "model.beta" => m.beta = Some(as_f64(key, v)?),
            "model.delta" => m.delta = Some(as_f64(key, v)?),
            "model.lambda_gp" => m.lambda_gp = Some(as_f64(key, v)?),
            "model.lr" => m.lr = Some(as_f64(key, v)?),
            "model.adam_beta1" => m.adam_beta1 = Some(as_f64(key, v)?),
            "model.adam_beta2" => m.adam_beta2 = Some(as_f64(key, v)?),
            "model.n_critic" => m.n_critic = Some(as_usize(key, v)?),
            "model.batch_size" => m.batch_size = Some(as_usize(key, v)?),
            "model.epochs" => m.epochs = Some(as_usize(key, v)?),
            "model.syn_num" => m.syn_num = Some(as_usize(key, v)?),
            "model.leaky_slope" => m.leaky_slope = Some(as_f64(key, v)?),
            "model.hidden_bias_init" => m.hidden_bias_init = Some(as_f64(key, v)?),
            "model.mode" => m.mode = Some(as_str(key, v)?),
            "model.feedback_source" => m.feedback_source = Some(as_str(key, v)?),
            "model.strategy" => m.strategy = Some(as_str(key, v)?),
            "model.classifier_input" => m.classifier_input = Some(as_str(key, v)?),
            "model.feedback_loops" => m.feedback_loops = Some(as_usize(key, v)?),
            "model.recon_samples" => m.recon_samples = Some(as_usize(key, v)?),
            "model.d2_weight" => m.d2_weight = Some(as_f64(key, v)?),
            "model.dec_in_generator_step" => m.dec_in_generator_step = Some(as_bool(key, v)?),
            "model.gzsl_synthesize_seen" => m.gzsl_synthesize_seen = Some(as_bool(key, v)?),
            "model.scaling" => m.scaling = Some(as_str(key, v)?),
            "model.classifier_lr" => m.classifier_lr = Some(as_f64(key, v)?),
            "model.classifier_epochs" => m.classifier_epochs = Some(as_usize(key, v)?),
            "model.classifier_batch" => m.classifier_batch = Some(as_usize(key, v)?),
            "model.seed" => m.seed = Some(as_u64(key, v)?),
            // dimensions are derived from the data but accepted in echoes
            "model.d_x" | "model.d_a" | "model.d_z" => {}
            "data.synthetic" => fc.synthetic = Some(as_str(key, v)?),
            "data.native" => fc.native = Some(PathBuf::from(as_str(key, v)?)),
            "data.benchmark_features" => {
                fc.benchmark_features = Some(PathBuf::from(as_str(key, v)?))
            }
            "data.benchmark_splits" => fc.benchmark_splits = Some(PathBuf::from(as_str(key, v)?)),
            "out.dir" => fc.out = Some(PathBuf::from(as_str(key, v)?)),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
    }
    Ok(fc)
}

fn apply_model_flags(cfg: &mut ModelConfig, f: &ModelFlags) -> Result<()> {
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = f.$field {
                cfg.$field = v;
            }
        };
    }
    set!(hidden);
    set!(alpha);
    set!(beta);
    set!(delta);
    set!(lambda_gp);
    set!(lr);
    set!(adam_beta1);
    set!(adam_beta2);
    set!(n_critic);
    set!(batch_size);
    set!(epochs);
    set!(syn_num);
    set!(leaky_slope);
    set!(hidden_bias_init);
    set!(feedback_loops);
    set!(recon_samples);
    set!(d2_weight);
    set!(dec_in_generator_step);
    set!(gzsl_synthesize_seen);
    set!(classifier_lr);
    set!(classifier_epochs);
    set!(classifier_batch);
    set!(seed);
    if let Some(s) = &f.mode {
        cfg.mode = s.parse()?;
    }
    if let Some(s) = &f.feedback_source {
        cfg.feedback_source = s.parse()?;
    }
    if let Some(s) = &f.strategy {
        cfg.strategy = s.parse()?;
    }
    if let Some(s) = &f.classifier_input {
        cfg.classifier_input = s.parse()?;
    }
    if let Some(s) = &f.scaling {
        cfg.scaling = s.parse()?;
    }
    Ok(())
}

/// Resolve the dataset source: flags beat the config file; exactly one
/// source must remain.
fn resolve_source(flags: &SourceArgs, file: &FileConfig) -> Result<DataSource> {
    let flag_sources = [
        flags.synthetic.is_some(),
        flags.native.is_some(),
        flags.benchmark_features.is_some() || flags.benchmark_splits.is_some(),
    ];
    let use_file = !flag_sources.iter().any(|&b| b);

    let synthetic = flags
        .synthetic
        .clone()
        .or_else(|| use_file.then(|| file.synthetic.clone()).flatten());
    let native = flags
        .native
        .clone()
        .or_else(|| use_file.then(|| file.native.clone()).flatten());
    let bench_f = flags
        .benchmark_features
        .clone()
        .or_else(|| use_file.then(|| file.benchmark_features.clone()).flatten());
    let bench_s = flags
        .benchmark_splits
        .clone()
        .or_else(|| use_file.then(|| file.benchmark_splits.clone()).flatten());

    let mut sources = Vec::new();
    if let Some(spec) = synthetic {
        sources.push(DataSource::Synthetic(SyntheticSpec::parse(&spec)?));
    }
    if let Some(dir) = native {
        sources.push(DataSource::Native(dir));
    }
    match (bench_f, bench_s) {
        (Some(features), Some(splits)) => sources.push(DataSource::Benchmark { features, splits }),
        (None, None) => {}
        _ => {
            return Err(Error::Config(
                "benchmark source needs both --benchmark-features and --benchmark-splits".into(),
            ))
        }
    }
    match sources.len() {
        0 => Err(Error::Config(
            "no dataset source: pass --synthetic, --native or --benchmark-features/--benchmark-splits"
                .into(),
        )),
        1 => Ok(sources.pop().unwrap()),
        _ => Err(Error::Config("more than one dataset source given".into())),
    }
}

fn resolve_out(flag: &Option<PathBuf>, file: &FileConfig, default_leaf: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    if let Some(p) = &file.out {
        return p.clone();
    }
    let root = std::env::var(OUT_ENV).unwrap_or_else(|_| "tfvaegan-out".into());
    Path::new(&root).join(default_leaf)
}

/// Effective configuration assembled from defaults, file and flags.
struct Resolved {
    source: DataSource,
    dataset: ZslDataset,
    config: ModelConfig,
    out: PathBuf,
}

fn resolve(
    source_flags: &SourceArgs,
    model_flags: &ModelFlags,
    config_path: &Option<PathBuf>,
    out_flag: &Option<PathBuf>,
    default_leaf: &str,
) -> Result<Resolved> {
    let file = match config_path {
        Some(p) => parse_file_config(p)?,
        None => FileConfig::default(),
    };
    let source = resolve_source(source_flags, &file)?;
    let dataset = source.load()?;
    let mut config = ModelConfig::new(dataset.d_x(), dataset.d_a());
    apply_model_flags(&mut config, &file.model)?;
    apply_model_flags(&mut config, model_flags)?;
    config.d_z = config.d_a;
    config.validate()?;
    let out = resolve_out(out_flag, &file, default_leaf);
    Ok(Resolved {
        source,
        dataset,
        config,
        out,
    })
}

/// Flat dotted-key echo of the effective configuration.
fn config_echo(source: &DataSource, cfg: &ModelConfig, out: &Path) -> Result<String> {
    let mut map = Map::new();
    source.echo_into(&mut map);
    map.insert("out.dir".into(), Value::String(out.display().to_string()));
    let model = serde_json::to_value(cfg)?;
    if let Value::Object(fields) = model {
        for (k, v) in fields {
            map.insert(format!("model.{k}"), v);
        }
    }
    Ok(serde_json::to_string_pretty(&Value::Object(map))?)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let r = resolve(&args.source, &args.model, &args.config, &args.out, "train")?;
    std::fs::create_dir_all(&r.out)?;
    let metrics_path = r.out.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let mut sink_err = None;
    let (ckpt, _) = train_to_checkpoint(&r.dataset, &r.config, &mut |record| {
        if sink_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut metrics, record)
                .map_err(Error::from)
                .and_then(|_| metrics.write_all(b"\n").map_err(Error::from))
            {
                sink_err = Some(e);
            }
        }
    })?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    metrics.flush()?;
    checkpoint::save(&r.out.join("checkpoint.ckpt"), &ckpt)?;
    write_out(
        &r.out,
        "config.json",
        &config_echo(&r.source, &r.config, &r.out)?,
    )?;
    println!(
        "trained {} epochs on {} instances; checkpoint: {}",
        r.config.epochs,
        r.dataset.num_instances(),
        r.out.join("checkpoint.ckpt").display()
    );
    Ok(())
}

fn load_checkpoint_with_overrides(
    path: &Path,
    file: &FileConfig,
    flags: &ModelFlags,
) -> Result<Checkpoint> {
    let mut ckpt = checkpoint::load(path)?;
    apply_model_flags(&mut ckpt.config, &file.model)?;
    apply_model_flags(&mut ckpt.config, flags)?;
    ckpt.config.validate()?;
    Ok(ckpt)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => parse_file_config(p)?,
        None => FileConfig::default(),
    };
    let source = resolve_source(&args.source, &file)?;
    let dataset = source.load()?;
    let ckpt = load_checkpoint_with_overrides(&args.checkpoint, &file, &args.model)?;
    let out = resolve_out(&args.out, &file, "eval");

    let outcome = evaluate_checkpoint(&ckpt, &dataset, ckpt.config.seed)?;
    let report = serde_json::json!({
        "zsl_t1": outcome.zsl.zsl_t1,
        "u": outcome.gzsl.gzsl_u,
        "s": outcome.gzsl.gzsl_s,
        "H": outcome.gzsl.gzsl_h,
        "feature_width": outcome.feature_width,
        "classifier_input": serde_json::to_value(ckpt.config.classifier_input)?,
    });
    let report_path = write_out(&out, "report.json", &serde_json::to_string_pretty(&report)?)?;
    if args.per_class_csv {
        let mut csv = String::from("class,split,accuracy\n");
        for (class, acc) in &outcome.gzsl.per_class_acc {
            let split = if dataset.seen_classes.contains(class) {
                "seen"
            } else {
                "unseen"
            };
            csv.push_str(&format!("{class},{split},{acc}\n"));
        }
        write_out(&out, "per_class.csv", &csv)?;
    }
    println!("report: {}", report_path.display());
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let r = resolve(&args.source, &args.model, &args.config, &args.out, "ablate")?;
    let appendix = args
        .appendix
        .as_deref()
        .map(str::parse::<AppendixGrid>)
        .transpose()?;

    let base_source = r.source.clone();
    let mut provider = move |i: usize| -> Result<ZslDataset> {
        match &base_source {
            DataSource::Synthetic(spec) => {
                let mut s = spec.clone();
                s.seed = s.seed.wrapping_add(i as u64);
                Ok(s.build()?.0)
            }
            other => other.load(),
        }
    };
    let table = ablation_grid(&mut provider, &r.config, args.seeds, appendix)?;

    write_out(
        &r.out,
        "ablation.json",
        &serde_json::to_string_pretty(&table)?,
    )?;
    write_out(
        &r.out,
        "config.json",
        &config_echo(&r.source, &r.config, &r.out)?,
    )?;

    // human-readable summary table
    let mut text = String::from("task");
    for col in &table.columns {
        text.push_str(&format!("\t{}", col.name));
    }
    text.push('\n');
    text.push_str("zsl");
    for col in &table.columns {
        text.push_str(&format!("\t{:.4}", col.zsl_mean));
    }
    text.push('\n');
    text.push_str("gzsl");
    for col in &table.columns {
        text.push_str(&format!("\t{:.4}", col.gzsl_mean));
    }
    text.push('\n');
    write_out(&r.out, "ablation.tsv", &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_export_embeddings(args: &ExportArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => parse_file_config(p)?,
        None => FileConfig::default(),
    };
    let source = resolve_source(&args.source, &file)?;
    let dataset = source.load()?;
    let ckpt = load_checkpoint_with_overrides(&args.checkpoint, &file, &args.model)?;
    let out = resolve_out(&args.out, &file, "embeddings");
    let cfg = &ckpt.config;

    let scaled = |kind: SplitKind| {
        apply_scaler(&ckpt.scaler, dataset.split_features(kind).view()).mapv(f64::from)
    };
    let attributes = dataset.attributes.mapv(f64::from);
    let synth = synthesize(
        &ckpt.params,
        &attributes,
        &dataset.unseen_classes,
        cfg.syn_num,
        cfg,
        cfg.seed,
    )?;

    let tr = |x: &ndarray::Array2<f64>| {
        transform(x, &ckpt.params.decoder, cfg.classifier_input, cfg.leaky_slope)
    };
    let seen_t = tr(&scaled(SplitKind::TestSeen))?;
    let unseen_t = tr(&scaled(SplitKind::TestUnseen))?;
    let synth_t = tr(&synth.features)?;

    let features = ndarray::concatenate(
        ndarray::Axis(0),
        &[seen_t.view(), unseen_t.view(), synth_t.view()],
    )
    .expect("export concat")
    .mapv(|v| v as f32);
    let mut labels = dataset.split_labels(SplitKind::TestSeen);
    labels.extend(dataset.split_labels(SplitKind::TestUnseen));
    labels.extend_from_slice(&synth.labels);
    let n_seen = seen_t.nrows();
    let n_unseen = unseen_t.nrows();
    let n_synth = synth_t.nrows();
    let source_flags: Vec<i32> = std::iter::repeat_n(0, n_seen + n_unseen)
        .chain(std::iter::repeat_n(1, n_synth))
        .collect();

    let export = ZslDataset {
        features,
        labels,
        attributes: dataset.attributes.clone(),
        seen_classes: dataset.seen_classes.clone(),
        unseen_classes: dataset.unseen_classes.clone(),
        split: SplitIndices {
            train_seen: vec![],
            test_seen: (0..n_seen).collect(),
            test_unseen: (n_seen..n_seen + n_unseen + n_synth).collect(),
        },
    };
    export.validate()?;
    save_native_bundle_with(
        &out,
        &export,
        &[ExtraArray::I32Vector("source".into(), source_flags)],
    )?;
    println!(
        "exported {} rows ({} real, {} synthesized) to {}",
        n_seen + n_unseen + n_synth,
        n_seen + n_unseen,
        n_synth,
        out.display()
    );
    Ok(())
}

fn cmd_make_synth(args: &MakeSynthArgs) -> Result<()> {
    let spec = SyntheticSpec::parse(args.synthetic.as_deref().unwrap_or(""))?;
    let (dataset, oracle) = spec.build()?;
    let out = match &args.out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var(OUT_ENV).unwrap_or_else(|_| "tfvaegan-out".into());
            Path::new(&root).join("synth")
        }
    };
    save_native_bundle_with(
        &out,
        &dataset,
        &[ExtraArray::F32Matrix(
            "oracle_map".into(),
            oracle.map.mapv(|v| v as f32),
        )],
    )?;
    println!(
        "wrote synthetic bundle ({} instances, {} classes) to {}",
        dataset.num_instances(),
        dataset.num_classes(),
        out.display()
    );
    Ok(())
}

fn cmd_validate_data(args: &ValidateArgs) -> Result<()> {
    let source = resolve_source(&args.source, &FileConfig::default())?;
    let dataset = source.load()?;
    dataset.validate()?;
    println!(
        "ok: {} instances, {} features, {} attributes, {} seen / {} unseen classes",
        dataset.num_instances(),
        dataset.d_x(),
        dataset.d_a(),
        dataset.seen_classes.len(),
        dataset.unseen_classes.len()
    );
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) | Error::State(_) => 2,
        Error::Numeric { .. } => 4,
        _ => 3,
    }
}

/// Parse arguments from the environment and run; returns the process
/// exit code.
pub fn run() -> i32 {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::ExportEmbeddings(args) => cmd_export_embeddings(args),
        Command::MakeSynth(args) => cmd_make_synth(args),
        Command::ValidateData(args) => cmd_validate_data(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
