//! Discriminative feature transformation, the final ZSL/GZSL softmax
//! classifiers and the evaluation protocol (per-class top-1 accuracy,
//! harmonic mean).

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::networks::{decode, ClassifierInput, DecoderParams};

/// Concatenate features with decoder outputs according to the chosen
/// classifier-input variant. `orig` returns the features untouched.
pub fn transform(
    features: &Array2<f64>,
    dec: &DecoderParams,
    variant: ClassifierInput,
    slope: f64,
) -> Result<Array2<f64>> {
    match variant {
        ClassifierInput::Orig => Ok(features.clone()),
        ClassifierInput::ConcatAttr => {
            let (_, a_hat) = decode(dec, features, slope)?;
            Ok(crate::networks::concat_cols(features, &a_hat))
        }
        ClassifierInput::ConcatLatent => {
            let (h, _) = decode(dec, features, slope)?;
            Ok(crate::networks::concat_cols(features, &h))
        }
    }
}

/// Single linear layer trained with softmax cross-entropy; output order
/// follows the sorted class set.
#[derive(Debug, Clone)]
pub struct SoftmaxClassifier {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
    pub classes: Vec<usize>,
}

/// Options for [`train_softmax`]; Adam betas follow the main model.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxOptions {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for SoftmaxOptions {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 25,
            batch_size: 100,
            seed: 0,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
        }
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Train the final classifier over `class_set` on (already transformed)
/// features. Deterministic under the seed.
pub fn train_softmax(
    features: &Array2<f64>,
    labels: &[usize],
    class_set: &[usize],
    opts: &SoftmaxOptions,
) -> Result<SoftmaxClassifier> {
    if features.nrows() != labels.len() {
        return Err(Error::Input(format!(
            "{} labels for {} rows",
            labels.len(),
            features.nrows()
        )));
    }
    if features.nrows() == 0 {
        return Err(Error::Input("empty training set".into()));
    }
    let mut classes: Vec<usize> = class_set.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let index_of: BTreeMap<usize, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| {
            index_of
                .get(l)
                .copied()
                .ok_or_else(|| Error::Input(format!("label {l} outside the class set")))
        })
        .collect::<Result<_>>()?;

    let (n, d) = features.dim();
    let c = classes.len();
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut w = Array2::from_shape_fn((d, c), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * 0.02
    });
    let mut b = Array2::<f64>::zeros((1, c));
    let (mut mw, mut vw) = (Array2::<f64>::zeros((d, c)), Array2::<f64>::zeros((d, c)));
    let (mut mb, mut vb) = (Array2::<f64>::zeros((1, c)), Array2::<f64>::zeros((1, c)));
    let mut t = 0u64;

    for _ in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let bsz = chunk.len();
            let mut x = Array2::zeros((bsz, d));
            for (i, &r) in chunk.iter().enumerate() {
                x.row_mut(i).assign(&features.row(r));
            }
            let logits = x.dot(&w) + &b;
            let mut dlogits = softmax_rows(&logits);
            for (i, &r) in chunk.iter().enumerate() {
                dlogits[[i, targets[r]]] -= 1.0;
            }
            dlogits /= bsz as f64;
            let gw = x.t().dot(&dlogits);
            let gb = dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));

            t += 1;
            let bc1 = 1.0 - opts.adam_beta1.powi(t as i32);
            let bc2 = 1.0 - opts.adam_beta2.powi(t as i32);
            for ((theta, g), (m, v)) in [(&mut w, &gw), (&mut b, &gb)]
                .into_iter()
                .zip([(&mut mw, &mut vw), (&mut mb, &mut vb)])
            {
                ndarray::Zip::from(&mut *m)
                    .and(g)
                    .for_each(|mi, &gi| *mi = opts.adam_beta1 * *mi + (1.0 - opts.adam_beta1) * gi);
                ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                    *vi = opts.adam_beta2 * *vi + (1.0 - opts.adam_beta2) * gi * gi
                });
                ndarray::Zip::from(&mut **theta).and(&*m).and(&*v).for_each(
                    |th, &mi, &vi| {
                        *th -= opts.lr * (mi / bc1) / ((vi / bc2).sqrt() + 1e-8);
                    },
                );
            }
        }
    }

    Ok(SoftmaxClassifier { w, b, classes })
}

/// Argmax class id per row.
pub fn predict(clf: &SoftmaxClassifier, features: &Array2<f64>) -> Result<Vec<usize>> {
    if features.ncols() != clf.w.nrows() {
        return Err(Error::Shape(format!(
            "classifier expects width {}, got {}",
            clf.w.nrows(),
            features.ncols()
        )));
    }
    let logits = features.dot(&clf.w) + &clf.b;
    Ok(logits
        .axis_iter(Axis(0))
        .map(|row| {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            clf.classes[best]
        })
        .collect())
}

/// Per-class accuracy over `classes`; classes with no test instances are
/// excluded from the map entirely.
pub fn per_class_accuracy(
    predictions: &[usize],
    labels: &[usize],
    classes: &[usize],
) -> BTreeMap<usize, f64> {
    let mut correct: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&pred, &truth) in predictions.iter().zip(labels) {
        if classes.contains(&truth) {
            let entry = correct.entry(truth).or_insert((0, 0));
            entry.1 += 1;
            if pred == truth {
                entry.0 += 1;
            }
        }
    }
    correct
        .into_iter()
        .map(|(c, (hit, total))| (c, hit as f64 / total as f64))
        .collect()
}

fn mean_over(acc: &BTreeMap<usize, f64>, classes: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = classes.iter().filter_map(|c| acc.get(c).copied()).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Harmonic mean `2us/(u+s)`; defined as 0 when both accuracies vanish.
/// Accepts either `[0,1]` fractions or percentages, consistently.
pub fn harmonic_mean(u: f64, s: f64) -> Result<f64> {
    if u < 0.0 || s < 0.0 {
        return Err(Error::Domain(format!(
            "harmonic_mean needs non-negative inputs, got ({u}, {s})"
        )));
    }
    if u + s == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * u * s / (u + s))
}

/// Per-class accuracies plus the ZSL/GZSL summary metrics; all values
/// are `[0,1]` fractions.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub per_class_acc: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zsl_t1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gzsl_u: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gzsl_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gzsl_h: Option<f64>,
}

/// Assemble a GZSL report from raw predictions: per-class top-1 over all
/// test classes, means over unseen (u) and seen (s), harmonic mean.
pub fn gzsl_report_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    seen: &[usize],
    unseen: &[usize],
) -> Result<EvalReport> {
    let all: Vec<usize> = seen.iter().chain(unseen).copied().collect();
    let per_class = per_class_accuracy(predictions, labels, &all);
    let u = mean_over(&per_class, unseen).unwrap_or(0.0);
    let s = mean_over(&per_class, seen).unwrap_or(0.0);
    Ok(EvalReport {
        per_class_acc: per_class,
        zsl_t1: None,
        gzsl_u: Some(u),
        gzsl_s: Some(s),
        gzsl_h: Some(harmonic_mean(u, s)?),
    })
}

/// ZSL evaluation: transform the unseen test features exactly as the
/// training features were, predict with a classifier over the unseen
/// classes only, and average per-class accuracy.
pub fn evaluate_zsl(
    clf: &SoftmaxClassifier,
    dec: &DecoderParams,
    test_features: &Array2<f64>,
    test_labels: &[usize],
    unseen_classes: &[usize],
    variant: ClassifierInput,
    slope: f64,
) -> Result<EvalReport> {
    let transformed = transform(test_features, dec, variant, slope)?;
    let preds = predict(clf, &transformed)?;
    let per_class = per_class_accuracy(&preds, test_labels, unseen_classes);
    let t1 = mean_over(&per_class, unseen_classes).unwrap_or(0.0);
    Ok(EvalReport {
        per_class_acc: per_class,
        zsl_t1: Some(t1),
        gzsl_u: None,
        gzsl_s: None,
        gzsl_h: None,
    })
}

/// GZSL evaluation over the union classifier: seen and unseen test sets
/// are transformed identically, predictions pooled, and u/s/H computed
/// from per-class accuracies.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_gzsl(
    clf: &SoftmaxClassifier,
    dec: &DecoderParams,
    test_seen: (&Array2<f64>, &[usize]),
    test_unseen: (&Array2<f64>, &[usize]),
    seen_classes: &[usize],
    unseen_classes: &[usize],
    variant: ClassifierInput,
    slope: f64,
) -> Result<EvalReport> {
    let mut preds = predict(clf, &transform(test_seen.0, dec, variant, slope)?)?;
    preds.extend(predict(clf, &transform(test_unseen.0, dec, variant, slope)?)?);
    let mut labels = test_seen.1.to_vec();
    labels.extend_from_slice(test_unseen.1);
    gzsl_report_from_predictions(&preds, &labels, seen_classes, unseen_classes)
}
