//! End-to-end experiment plumbing shared by the CLI and the test
//! suites: train-to-checkpoint, checkpoint evaluation (synthesis,
//! transformation, final classifiers, reports) and the ablation grid.

use ndarray::Array2;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::classify::{
    evaluate_gzsl, evaluate_zsl, train_softmax, transform, EvalReport, SoftmaxOptions,
};
use crate::data::{apply_scaler, SplitKind, ZslDataset};
use crate::error::{Error, Result};
use crate::networks::{ClassifierInput, FeedbackSource, ModelConfig, Strategy};
use crate::synthesis::synthesize;
use crate::training::{train_with, StepRecord};

/// Train on a dataset and package the result as a checkpoint.
pub fn train_to_checkpoint(
    dataset: &ZslDataset,
    config: &ModelConfig,
    sink: &mut dyn FnMut(&StepRecord),
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let out = train_with(dataset, config, sink)?;
    let history = out.state.history.clone();
    Ok((
        Checkpoint {
            config: config.clone(),
            params: out.state.params,
            scaler: out.scaler,
        },
        history,
    ))
}

/// ZSL and GZSL reports for one trained model on one dataset.
#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub zsl: EvalReport,
    pub gzsl: EvalReport,
    /// Width of the transformed classifier inputs.
    pub feature_width: usize,
}

fn check_compatible(ckpt: &Checkpoint, dataset: &ZslDataset) -> Result<()> {
    if ckpt.config.d_x != dataset.d_x() || ckpt.config.d_a != dataset.d_a() {
        return Err(Error::Config(format!(
            "checkpoint dims ({}, {}) do not match dataset dims ({}, {})",
            ckpt.config.d_x,
            ckpt.config.d_a,
            dataset.d_x(),
            dataset.d_a()
        )));
    }
    Ok(())
}

/// Synthesize unseen-class features, transform everything consistently,
/// train the final ZSL and GZSL classifiers and evaluate them.
///
/// ZSL trains on synthesized unseen features only; GZSL trains on real
/// seen training features plus synthesized unseen features (plus
/// synthesized seen features when the config asks for them).
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    dataset: &ZslDataset,
    eval_seed: u64,
) -> Result<EvalOutcome> {
    check_compatible(ckpt, dataset)?;
    let cfg = &ckpt.config;
    let slope = cfg.leaky_slope;
    let variant = cfg.classifier_input;
    let attributes = dataset.attributes.mapv(f64::from);

    let scaled = |kind: SplitKind| -> Array2<f64> {
        apply_scaler(&ckpt.scaler, dataset.split_features(kind).view()).mapv(f64::from)
    };
    let train_seen_x = scaled(SplitKind::TrainSeen);
    let train_seen_labels = dataset.split_labels(SplitKind::TrainSeen);
    let test_seen_x = scaled(SplitKind::TestSeen);
    let test_seen_labels = dataset.split_labels(SplitKind::TestSeen);
    let test_unseen_x = scaled(SplitKind::TestUnseen);
    let test_unseen_labels = dataset.split_labels(SplitKind::TestUnseen);

    let synth_unseen = synthesize(
        &ckpt.params,
        &attributes,
        &dataset.unseen_classes,
        cfg.syn_num,
        cfg,
        eval_seed,
    )?;

    let opts = |seed_offset: u64| SoftmaxOptions {
        lr: cfg.classifier_lr,
        epochs: cfg.classifier_epochs,
        batch_size: cfg.classifier_batch,
        seed: eval_seed.wrapping_add(seed_offset),
        adam_beta1: cfg.adam_beta1,
        adam_beta2: cfg.adam_beta2,
    };

    // ZSL: classifier over unseen classes, trained on synthesized features
    let synth_t = transform(&synth_unseen.features, &ckpt.params.decoder, variant, slope)?;
    let feature_width = synth_t.ncols();
    let zsl_clf = train_softmax(
        &synth_t,
        &synth_unseen.labels,
        &dataset.unseen_classes,
        &opts(1),
    )?;
    let zsl = evaluate_zsl(
        &zsl_clf,
        &ckpt.params.decoder,
        &test_unseen_x,
        &test_unseen_labels,
        &dataset.unseen_classes,
        variant,
        slope,
    )?;

    // GZSL: union classifier on real seen + synthesized unseen
    let mut gzsl_x = transform(&train_seen_x, &ckpt.params.decoder, variant, slope)?;
    let mut gzsl_labels = train_seen_labels.clone();
    gzsl_x = ndarray::concatenate(ndarray::Axis(0), &[gzsl_x.view(), synth_t.view()])
        .expect("gzsl concat");
    gzsl_labels.extend_from_slice(&synth_unseen.labels);
    if cfg.gzsl_synthesize_seen {
        let synth_seen = synthesize(
            &ckpt.params,
            &attributes,
            &dataset.seen_classes,
            cfg.syn_num,
            cfg,
            eval_seed.wrapping_add(7),
        )?;
        let seen_t = transform(&synth_seen.features, &ckpt.params.decoder, variant, slope)?;
        gzsl_x = ndarray::concatenate(ndarray::Axis(0), &[gzsl_x.view(), seen_t.view()])
            .expect("gzsl concat");
        gzsl_labels.extend_from_slice(&synth_seen.labels);
    }
    let all_classes: Vec<usize> = dataset
        .seen_classes
        .iter()
        .chain(&dataset.unseen_classes)
        .copied()
        .collect();
    let gzsl_clf = train_softmax(&gzsl_x, &gzsl_labels, &all_classes, &opts(2))?;
    let gzsl = evaluate_gzsl(
        &gzsl_clf,
        &ckpt.params.decoder,
        (&test_seen_x, &test_seen_labels),
        (&test_unseen_x, &test_unseen_labels),
        &dataset.seen_classes,
        &dataset.unseen_classes,
        variant,
        slope,
    )?;

    Ok(EvalOutcome {
        zsl,
        gzsl,
        feature_width,
    })
}

/// One column of the ablation table.
#[derive(Debug, Clone, Serialize)]
pub struct AblationColumn {
    pub name: String,
    pub zsl_per_seed: Vec<f64>,
    pub gzsl_per_seed: Vec<f64>,
    pub zsl_mean: f64,
    pub gzsl_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub tasks: [&'static str; 2],
    pub columns: Vec<AblationColumn>,
}

/// Optional appendix grids added to the base ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendixGrid {
    /// Feedback design choices: two-stage with discriminator-fed F,
    /// two-stage with decoder-fed F, and the alternating strategy.
    Feedback,
    /// Classifier-input choices: original features, features with
    /// reconstructed attributes, features with decoder latents.
    ClassifierInput,
}

impl std::str::FromStr for AppendixGrid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feedback" => Ok(AppendixGrid::Feedback),
            "classifier-input" | "classifier_input" => Ok(AppendixGrid::ClassifierInput),
            other => Err(Error::Config(format!("unknown appendix grid `{other}`"))),
        }
    }
}

/// Training configurations the grid shares between columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TrainVariant {
    /// feedback off, cycle off (plain conditional VAE-GAN)
    Plain,
    /// feedback off, cycle on (decoder trained, no F)
    CycleOnly,
    /// feedback on, cycle on (the full model, alternating)
    Full,
    /// two-stage with the given feedback source
    TwoStage(FeedbackSource),
}

fn variant_config(base: &ModelConfig, v: TrainVariant, seed: u64) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    match v {
        TrainVariant::Plain => {
            cfg.feedback_loops = 0;
            cfg.beta = 0.0;
        }
        TrainVariant::CycleOnly => {
            cfg.feedback_loops = 0;
        }
        TrainVariant::Full => {
            cfg.feedback_loops = cfg.feedback_loops.max(1);
        }
        TrainVariant::TwoStage(source) => {
            cfg.feedback_loops = cfg.feedback_loops.max(1);
            cfg.strategy = Strategy::TwoStage;
            cfg.feedback_source = source;
        }
    }
    cfg
}

/// A column is a training variant classified with a given input.
struct ColumnSpec {
    name: &'static str,
    train: TrainVariant,
    classifier: ClassifierInput,
}

fn base_columns() -> Vec<ColumnSpec> {
    vec![
        ColumnSpec {
            name: "baseline",
            train: TrainVariant::Plain,
            classifier: ClassifierInput::Orig,
        },
        ColumnSpec {
            name: "feedback",
            train: TrainVariant::Full,
            classifier: ClassifierInput::Orig,
        },
        ColumnSpec {
            name: "t_feature",
            train: TrainVariant::CycleOnly,
            classifier: ClassifierInput::ConcatLatent,
        },
        ColumnSpec {
            name: "tf_vaegan",
            train: TrainVariant::Full,
            classifier: ClassifierInput::ConcatLatent,
        },
    ]
}

fn appendix_columns(grid: AppendixGrid) -> Vec<ColumnSpec> {
    match grid {
        AppendixGrid::Feedback => vec![
            ColumnSpec {
                name: "two_stage_d",
                train: TrainVariant::TwoStage(FeedbackSource::Discriminator),
                classifier: ClassifierInput::Orig,
            },
            ColumnSpec {
                name: "two_stage_dec",
                train: TrainVariant::TwoStage(FeedbackSource::Decoder),
                classifier: ClassifierInput::Orig,
            },
            ColumnSpec {
                name: "alternating",
                train: TrainVariant::Full,
                classifier: ClassifierInput::Orig,
            },
        ],
        AppendixGrid::ClassifierInput => vec![
            ColumnSpec {
                name: "orig_feat",
                train: TrainVariant::CycleOnly,
                classifier: ClassifierInput::Orig,
            },
            ColumnSpec {
                name: "concat_feat",
                train: TrainVariant::CycleOnly,
                classifier: ClassifierInput::ConcatAttr,
            },
            ColumnSpec {
                name: "t_feature",
                train: TrainVariant::CycleOnly,
                classifier: ClassifierInput::ConcatLatent,
            },
        ],
    }
}

/// Run the ablation grid: per seed, train each required variant once,
/// evaluate every (variant, classifier-input) column on it, and average
/// over seeds. The dataset provider receives the seed index so
/// synthetic sources can redraw per seed.
pub fn ablation_grid(
    dataset_for_seed: &mut dyn FnMut(usize) -> Result<ZslDataset>,
    base_config: &ModelConfig,
    n_seeds: usize,
    appendix: Option<AppendixGrid>,
) -> Result<AblationTable> {
    let mut columns = base_columns();
    if let Some(grid) = appendix {
        columns.extend(appendix_columns(grid));
    }

    let seeds: Vec<u64> = (0..n_seeds as u64)
        .map(|i| base_config.seed.wrapping_add(i))
        .collect();
    let mut zsl_scores = vec![Vec::new(); columns.len()];
    let mut gzsl_scores = vec![Vec::new(); columns.len()];

    for (i, &seed) in seeds.iter().enumerate() {
        let dataset = dataset_for_seed(i)?;
        let needed: Vec<TrainVariant> = {
            let mut v: Vec<TrainVariant> = columns.iter().map(|c| c.train).collect();
            v.dedup_by(|a, b| a == b);
            let mut uniq = Vec::new();
            for t in v {
                if !uniq.contains(&t) {
                    uniq.push(t);
                }
            }
            uniq
        };
        let mut checkpoints: Vec<(TrainVariant, Checkpoint)> = Vec::new();
        for &tv in &needed {
            let cfg = variant_config(base_config, tv, seed);
            let (ckpt, _) = train_to_checkpoint(&dataset, &cfg, &mut |_| {})?;
            checkpoints.push((tv, ckpt));
        }
        for (ci, col) in columns.iter().enumerate() {
            let ckpt = checkpoints
                .iter()
                .find(|(tv, _)| *tv == col.train)
                .map(|(_, c)| c)
                .expect("training variant prepared above");
            let mut eval_ckpt = ckpt.clone();
            eval_ckpt.config.classifier_input = col.classifier;
            let outcome = evaluate_checkpoint(&eval_ckpt, &dataset, seed)?;
            zsl_scores[ci].push(outcome.zsl.zsl_t1.unwrap_or(0.0));
            gzsl_scores[ci].push(outcome.gzsl.gzsl_h.unwrap_or(0.0));
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(AblationTable {
        seeds,
        tasks: ["zsl", "gzsl"],
        columns: columns
            .iter()
            .enumerate()
            .map(|(i, c)| AblationColumn {
                name: c.name.to_string(),
                zsl_mean: mean(&zsl_scores[i]),
                gzsl_mean: mean(&gzsl_scores[i]),
                zsl_per_seed: zsl_scores[i].clone(),
                gzsl_per_seed: gzsl_scores[i].clone(),
            })
            .collect(),
    })
}
