//! Dataset model, ingestion, feature scaling and the synthetic benchmark.
//!
//! Class ids are dense and 0-based everywhere inside the crate; loaders
//! convert from whatever indexing the source uses.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instance index lists for the three evaluation splits.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train_seen: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

/// A zero-shot classification dataset: backbone features, per-instance
/// labels, per-class semantic embeddings and the seen/unseen partition.
#[derive(Debug, Clone)]
pub struct ZslDataset {
    /// `[N, d_x]`, one row per instance.
    pub features: Array2<f32>,
    /// Dense 0-based class id per instance.
    pub labels: Vec<usize>,
    /// `[C, d_a]`, one row per class.
    pub attributes: Array2<f32>,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub split: SplitIndices,
}

impl ZslDataset {
    pub fn num_instances(&self) -> usize {
        self.features.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.features.ncols()
    }

    pub fn d_a(&self) -> usize {
        self.attributes.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.attributes.nrows()
    }

    /// Check every dataset invariant; loaders call this before returning.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_instances();
        let c = self.num_classes();
        if self.labels.len() != n {
            return Err(Error::Validation(format!(
                "{} labels for {} feature rows",
                self.labels.len(),
                n
            )));
        }
        let seen: BTreeSet<usize> = self.seen_classes.iter().copied().collect();
        let unseen: BTreeSet<usize> = self.unseen_classes.iter().copied().collect();
        if let Some(k) = seen.intersection(&unseen).next() {
            return Err(Error::Validation(format!(
                "class {k} is both seen and unseen"
            )));
        }
        for &k in seen.iter().chain(unseen.iter()) {
            if k >= c {
                return Err(Error::Validation(format!(
                    "class {k} has no attribute row (only {c} rows)"
                )));
            }
        }
        if self.attributes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite attribute value".into()));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        for &idx in self
            .split
            .train_seen
            .iter()
            .chain(&self.split.test_seen)
            .chain(&self.split.test_unseen)
        {
            if idx >= n {
                return Err(Error::Validation(format!(
                    "split index {idx} out of range (N={n})"
                )));
            }
        }
        let mut used = vec![false; n];
        for &idx in self
            .split
            .train_seen
            .iter()
            .chain(&self.split.test_seen)
            .chain(&self.split.test_unseen)
        {
            if used[idx] {
                return Err(Error::Validation(format!(
                    "instance {idx} appears in more than one split"
                )));
            }
            used[idx] = true;
        }
        for &idx in self.split.train_seen.iter().chain(&self.split.test_seen) {
            if !seen.contains(&self.labels[idx]) {
                return Err(Error::Validation(format!(
                    "instance {idx} in a seen split has non-seen label {}",
                    self.labels[idx]
                )));
            }
        }
        for &idx in &self.split.test_unseen {
            if !unseen.contains(&self.labels[idx]) {
                return Err(Error::Validation(format!(
                    "instance {idx} in test_unseen has non-unseen label {}",
                    self.labels[idx]
                )));
            }
        }
        Ok(())
    }

    fn rows(&self, indices: &[usize]) -> Array2<f32> {
        let mut out = Array2::zeros((indices.len(), self.d_x()));
        for (i, &idx) in indices.iter().enumerate() {
            out.row_mut(i).assign(&self.features.row(idx));
        }
        out
    }

    pub fn split_features(&self, split: SplitKind) -> Array2<f32> {
        self.rows(self.split_indices(split))
    }

    pub fn split_labels(&self, split: SplitKind) -> Vec<usize> {
        self.split_indices(split)
            .iter()
            .map(|&i| self.labels[i])
            .collect()
    }

    fn split_indices(&self, split: SplitKind) -> &[usize] {
        match split {
            SplitKind::TrainSeen => &self.split.train_seen,
            SplitKind::TestSeen => &self.split.test_seen,
            SplitKind::TestUnseen => &self.split.test_unseen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    TrainSeen,
    TestSeen,
    TestUnseen,
}

/// Per-dimension min-max scaler fit on seen training features only, so
/// no test statistics leak into training.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub min: Array1<f32>,
    pub max: Array1<f32>,
}

impl FeatureScaler {
    /// Identity scaler: maps `[0,1]` to itself (still clamps outside).
    pub fn identity(d_x: usize) -> Self {
        Self {
            min: Array1::zeros(d_x),
            max: Array1::ones(d_x),
        }
    }

    pub fn d_x(&self) -> usize {
        self.min.len()
    }
}

/// Fit the scaler on the dataset's `train_seen` rows.
pub fn fit_scaler(dataset: &ZslDataset) -> Result<FeatureScaler> {
    if dataset.split.train_seen.is_empty() {
        return Err(Error::Input("cannot fit scaler: train_seen is empty".into()));
    }
    let rows = dataset.split_features(SplitKind::TrainSeen);
    let min = rows.fold_axis(Axis(0), f32::INFINITY, |acc, &v| acc.min(v));
    let max = rows.fold_axis(Axis(0), f32::NEG_INFINITY, |acc, &v| acc.max(v));
    Ok(FeatureScaler { min, max })
}

/// Scale features to `[0,1]` per dimension. Degenerate dimensions
/// (max = min) map to 0; out-of-range values are clamped.
pub fn apply_scaler(scaler: &FeatureScaler, features: ArrayView2<f32>) -> Array2<f32> {
    assert_eq!(features.ncols(), scaler.d_x(), "scaler width mismatch");
    let mut out = features.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        for (j, v) in row.iter_mut().enumerate() {
            let (lo, hi) = (scaler.min[j], scaler.max[j]);
            *v = if hi > lo {
                ((*v - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    out
}

/// Ground truth behind [`make_synthetic`]: the linear attribute-to-feature
/// map plus the attribute table, enough for nearest-attribute
/// classification independent of any trained model.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    /// `[d_a, d_x]` linear map applied before the sigmoid squash.
    pub map: Array2<f64>,
    /// `[C, d_a]` class attributes (f64 copy of the dataset's).
    pub attributes: Array2<f64>,
}

impl SyntheticOracle {
    /// Nearest-attribute prediction restricted to `candidates`: unsquash
    /// each feature row and pick the class whose mapped attribute is
    /// closest in L2.
    pub fn classify(&self, features: ArrayView2<f32>, candidates: &[usize]) -> Vec<usize> {
        let centers: Vec<Array1<f64>> = candidates
            .iter()
            .map(|&c| self.attributes.row(c).dot(&self.map))
            .collect();
        features
            .axis_iter(Axis(0))
            .map(|row| {
                let logit: Array1<f64> = row
                    .iter()
                    .map(|&v| {
                        let p = f64::from(v).clamp(1e-7, 1.0 - 1e-7);
                        (p / (1.0 - p)).ln()
                    })
                    .collect();
                let best = centers
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let d = (&logit - c).mapv(|x| x * x).sum();
                        (i, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("no candidate classes")
                    .0;
                candidates[best]
            })
            .collect()
    }
}

/// Desk-scale synthetic benchmark: class attributes drawn uniformly in
/// `[0,1]^{d_a}`, features `sigmoid(W a_c + sigma * noise)` under a fixed
/// random linear map `W`. Returns the dataset and the oracle.
///
/// Seen classes get an 80/20 train/test split; unseen classes go
/// entirely to `test_unseen`.
#[allow(clippy::too_many_arguments)]
pub fn make_synthetic(
    seed: u64,
    n_seen_classes: usize,
    n_unseen_classes: usize,
    d_a: usize,
    d_x: usize,
    samples_per_class: usize,
    noise_sigma: f64,
) -> Result<(ZslDataset, SyntheticOracle)> {
    if d_x < d_a {
        return Err(Error::Input(format!("d_x ({d_x}) must be >= d_a ({d_a})")));
    }
    if n_seen_classes == 0 || n_unseen_classes == 0 || samples_per_class == 0 {
        return Err(Error::Input("class and sample counts must be >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let c = n_seen_classes + n_unseen_classes;

    let attributes = Array2::from_shape_fn((c, d_a), |_| rng.random::<f64>());
    let w_scale = 3.0 / (d_a as f64).sqrt();
    let map = Array2::from_shape_fn((d_a, d_x), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * w_scale
    });

    let n = c * samples_per_class;
    let mut features = Array2::<f32>::zeros((n, d_x));
    let mut labels = Vec::with_capacity(n);
    let mut split = SplitIndices::default();
    let train_per_class = (samples_per_class * 4).div_ceil(5).min(samples_per_class);

    let mut row = 0;
    for class in 0..c {
        let center = attributes.row(class).dot(&map);
        for s in 0..samples_per_class {
            for j in 0..d_x {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let pre = center[j] + noise_sigma * eps;
                features[[row, j]] = crate::autodiff::sigmoid(pre) as f32;
            }
            labels.push(class);
            if class < n_seen_classes {
                if s < train_per_class {
                    split.train_seen.push(row);
                } else {
                    split.test_seen.push(row);
                }
            } else {
                split.test_unseen.push(row);
            }
            row += 1;
        }
    }

    let dataset = ZslDataset {
        features,
        labels,
        attributes: attributes.mapv(|v| v as f32),
        seen_classes: (0..n_seen_classes).collect(),
        unseen_classes: (n_seen_classes..c).collect(),
        split,
    };
    dataset.validate()?;
    Ok((dataset, SyntheticOracle { map, attributes }))
}

/// Parameters for [`make_synthetic`], parseable from a `k=v` list.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub d_a: usize,
    pub d_x: usize,
    pub per_class: usize,
    pub sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_seen: 10,
            n_unseen: 5,
            d_a: 16,
            d_x: 32,
            per_class: 100,
            sigma: 0.1,
        }
    }
}

impl SyntheticSpec {
    /// Parse a comma-separated `key=value` list; empty string keeps all
    /// defaults.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut out = Self::default();
        for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("synthetic spec `{part}` is not key=value")))?;
            let bad = |e: std::num::ParseIntError| {
                Error::Config(format!("synthetic spec {key}: {e}"))
            };
            match key.trim() {
                "seed" => out.seed = value.trim().parse().map_err(bad)?,
                "n_seen" => out.n_seen = value.trim().parse().map_err(bad)?,
                "n_unseen" => out.n_unseen = value.trim().parse().map_err(bad)?,
                "d_a" => out.d_a = value.trim().parse().map_err(bad)?,
                "d_x" => out.d_x = value.trim().parse().map_err(bad)?,
                "per_class" => out.per_class = value.trim().parse().map_err(bad)?,
                "sigma" => {
                    out.sigma = value.trim().parse().map_err(|e| {
                        Error::Config(format!("synthetic spec sigma: {e}"))
                    })?
                }
                other => {
                    return Err(Error::Config(format!("unknown synthetic spec key `{other}`")))
                }
            }
        }
        Ok(out)
    }

    pub fn build(&self) -> Result<(ZslDataset, SyntheticOracle)> {
        make_synthetic(
            self.seed,
            self.n_seen,
            self.n_unseen,
            self.d_a,
            self.d_x,
            self.per_class,
            self.sigma,
        )
    }
}

#[derive(Deserialize)]
struct BenchmarkFeaturesFile {
    /// `d_x x N`, column per instance.
    features: Vec<Vec<f64>>,
    /// 1-indexed class id per instance.
    labels: Vec<i64>,
}

#[derive(Deserialize)]
struct BenchmarkSplitsFile {
    /// `d_a x C`, column per class.
    att: Vec<Vec<f64>>,
    /// 1-indexed instance locations.
    trainval_loc: Vec<i64>,
    test_seen_loc: Vec<i64>,
    test_unseen_loc: Vec<i64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn to_zero_indexed(locs: &[i64], n: usize, field: &str) -> Result<Vec<usize>> {
    locs.iter()
        .map(|&v| {
            if v < 1 || v as usize > n {
                Err(Error::Validation(format!(
                    "{field}: 1-indexed location {v} out of range 1..={n}"
                )))
            } else {
                Ok(v as usize - 1)
            }
        })
        .collect()
}

/// Load the conventional two-file benchmark layout: a feature file
/// (`d_x x N` matrix plus 1-indexed labels) and a splits file (`d_a x C`
/// attribute matrix plus 1-indexed trainval / test-seen / test-unseen
/// locations). Seen classes are those appearing in the trainval split,
/// unseen classes those in test-unseen.
pub fn load_benchmark_bundle(features_path: &Path, splits_path: &Path) -> Result<ZslDataset> {
    let feats: BenchmarkFeaturesFile = read_json(features_path)?;
    let splits: BenchmarkSplitsFile = read_json(splits_path)?;

    let d_x = feats.features.len();
    if d_x == 0 {
        return Err(Error::Format("features matrix is empty".into()));
    }
    let n = feats.features[0].len();
    if feats.features.iter().any(|row| row.len() != n) {
        return Err(Error::Format("features matrix rows have unequal length".into()));
    }
    if feats.labels.len() != n {
        return Err(Error::Format(format!(
            "{} labels for {} instances",
            feats.labels.len(),
            n
        )));
    }
    let d_a = splits.att.len();
    if d_a == 0 {
        return Err(Error::Format("att matrix is empty".into()));
    }
    let c = splits.att[0].len();
    if splits.att.iter().any(|row| row.len() != c) {
        return Err(Error::Format("att matrix rows have unequal length".into()));
    }

    // transpose to instance-major / class-major layouts
    let mut features = Array2::<f32>::zeros((n, d_x));
    for (j, col) in feats.features.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            features[[i, j]] = v as f32;
        }
    }
    let mut attributes = Array2::<f32>::zeros((c, d_a));
    for (j, col) in splits.att.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            attributes[[i, j]] = v as f32;
        }
    }

    let labels: Vec<usize> = feats
        .labels
        .iter()
        .map(|&v| {
            if v < 1 || v as usize > c {
                Err(Error::Validation(format!(
                    "label {v} out of range 1..={c}"
                )))
            } else {
                Ok(v as usize - 1)
            }
        })
        .collect::<Result<_>>()?;

    let split = SplitIndices {
        train_seen: to_zero_indexed(&splits.trainval_loc, n, "trainval_loc")?,
        test_seen: to_zero_indexed(&splits.test_seen_loc, n, "test_seen_loc")?,
        test_unseen: to_zero_indexed(&splits.test_unseen_loc, n, "test_unseen_loc")?,
    };

    let seen: BTreeSet<usize> = split.train_seen.iter().map(|&i| labels[i]).collect();
    let unseen: BTreeSet<usize> = split.test_unseen.iter().map(|&i| labels[i]).collect();

    let dataset = ZslDataset {
        features,
        labels,
        attributes,
        seen_classes: seen.into_iter().collect(),
        unseen_classes: unseen.into_iter().collect(),
        split,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn toy_dataset() -> ZslDataset {
        let features = Array2::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f32 / 10.0);
        ZslDataset {
            features,
            labels: vec![0, 0, 1, 1, 2, 2],
            attributes: Array2::from_shape_fn((3, 2), |(i, j)| (i + j) as f32),
            seen_classes: vec![0, 1],
            unseen_classes: vec![2],
            split: SplitIndices {
                train_seen: vec![0, 2],
                test_seen: vec![1, 3],
                test_unseen: vec![4, 5],
            },
        }
    }

    #[test]
    fn valid_dataset_passes() {
        toy_dataset().validate().unwrap();
    }

    #[test]
    fn seen_unseen_overlap_rejected() {
        let mut ds = toy_dataset();
        ds.unseen_classes.push(0);
        assert!(matches!(ds.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn seen_label_in_test_unseen_rejected() {
        let mut ds = toy_dataset();
        ds.labels[4] = 0;
        assert!(matches!(ds.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut ds = toy_dataset();
        ds.split.test_seen.push(0);
        assert!(matches!(ds.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn out_of_range_split_rejected() {
        let mut ds = toy_dataset();
        ds.split.test_unseen.push(99);
        assert!(matches!(ds.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn scaler_linear_map_and_degenerate_column() {
        let ds = ZslDataset {
            features: ndarray::array![[2.0, 7.0], [6.0, 7.0], [4.0, 7.0]],
            labels: vec![0, 0, 0],
            attributes: Array2::ones((1, 2)),
            seen_classes: vec![0],
            unseen_classes: vec![],
            split: SplitIndices {
                train_seen: vec![0, 1, 2],
                ..Default::default()
            },
        };
        let scaler = fit_scaler(&ds).unwrap();
        let scaled = apply_scaler(&scaler, ds.features.view());
        assert_abs_diff_eq!(scaled[[2, 0]], 0.5); // (4-2)/(6-2)
        assert_abs_diff_eq!(scaled[[0, 0]], 0.0);
        assert_abs_diff_eq!(scaled[[1, 0]], 1.0);
        // constant column maps to zero
        assert!(scaled.column(1).iter().all(|&v| v == 0.0));
        // out-of-range test value clamps
        let test = ndarray::array![[8.0f32, 7.0]];
        let scaled = apply_scaler(&scaler, test.view());
        assert_abs_diff_eq!(scaled[[0, 0]], 1.0);
    }

    #[test]
    fn scaled_train_hits_zero_and_one_per_dimension() {
        let (ds, _) = make_synthetic(3, 4, 2, 4, 8, 20, 0.3).unwrap();
        let scaler = fit_scaler(&ds).unwrap();
        let scaled = apply_scaler(&scaler, ds.split_features(SplitKind::TrainSeen).view());
        for j in 0..scaled.ncols() {
            let col = scaled.column(j);
            let min = col.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_abs_diff_eq!(min, 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(max, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let (a, _) = make_synthetic(42, 3, 2, 4, 8, 5, 0.2).unwrap();
        let (b, _) = make_synthetic(42, 3, 2, 4, 8, 5, 0.2).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.attributes, b.attributes);
    }

    #[test]
    fn synthetic_row_count() {
        let (ds, _) = make_synthetic(1, 10, 5, 8, 16, 100, 0.1).unwrap();
        assert_eq!(ds.features.dim(), (1500, 16));
        assert_eq!(ds.num_classes(), 15);
    }

    #[test]
    fn zero_noise_oracle_is_perfect_on_every_split() {
        let (ds, oracle) = make_synthetic(7, 6, 4, 6, 12, 10, 0.0).unwrap();
        let all: Vec<usize> = (0..ds.num_classes()).collect();
        for kind in [SplitKind::TrainSeen, SplitKind::TestSeen, SplitKind::TestUnseen] {
            let feats = ds.split_features(kind);
            let labels = ds.split_labels(kind);
            let preds = oracle.classify(feats.view(), &all);
            assert_eq!(preds, labels, "oracle not perfect on {kind:?}");
        }
        // restricted to unseen candidates as well
        let preds = oracle.classify(
            ds.split_features(SplitKind::TestUnseen).view(),
            &ds.unseen_classes,
        );
        assert_eq!(preds, ds.split_labels(SplitKind::TestUnseen));
    }

    #[test]
    fn zero_noise_class_samples_identical() {
        let (ds, _) = make_synthetic(9, 2, 1, 3, 6, 4, 0.0).unwrap();
        for class in 0..3 {
            let rows: Vec<_> = (0..ds.num_instances())
                .filter(|&i| ds.labels[i] == class)
                .collect();
            for &r in &rows[1..] {
                assert_eq!(ds.features.row(r), ds.features.row(rows[0]));
            }
        }
    }

    #[test]
    fn synthetic_spec_parsing() {
        let spec = SyntheticSpec::parse("seed=3,n_seen=7,sigma=0.25").unwrap();
        assert_eq!(spec.seed, 3);
        assert_eq!(spec.n_seen, 7);
        assert_abs_diff_eq!(spec.sigma, 0.25);
        assert_eq!(spec.n_unseen, SyntheticSpec::default().n_unseen);
        assert!(SyntheticSpec::parse("bogus=1").is_err());
        assert!(SyntheticSpec::parse("seed").is_err());
        assert_eq!(SyntheticSpec::parse("").unwrap(), SyntheticSpec::default());
    }

    #[test]
    fn benchmark_bundle_round_trip_and_indexing() {
        let dir = tempfile::tempdir().unwrap();
        // 4 instances, d_x=2; classes 1..=3 (1-indexed in the file)
        let features = serde_json::json!({
            "features": [[0.1, 0.2, 0.3, 0.4], [1.0, 1.1, 1.2, 1.3]],
            "labels": [1, 2, 2, 3],
        });
        let splits = serde_json::json!({
            "att": [[0.5, 0.6, 0.7], [0.8, 0.9, 1.0]],
            "trainval_loc": [1, 2],
            "test_seen_loc": [3],
            "test_unseen_loc": [4],
        });
        let fpath = dir.path().join("features.json");
        let spath = dir.path().join("splits.json");
        std::fs::write(&fpath, features.to_string()).unwrap();
        std::fs::write(&spath, splits.to_string()).unwrap();

        let ds = load_benchmark_bundle(&fpath, &spath).unwrap();
        assert_eq!(ds.num_instances(), 4);
        assert_eq!(ds.d_x(), 2);
        assert_eq!(ds.d_a(), 2);
        assert_eq!(ds.seen_classes, vec![0, 1]);
        assert_eq!(ds.unseen_classes, vec![2]);
        // 1-indexed locations became 0-indexed
        assert_eq!(ds.split.train_seen, vec![0, 1]);
        assert_eq!(ds.split.test_unseen, vec![3]);
        assert_abs_diff_eq!(ds.features[[0, 1]], 1.0);
        assert_abs_diff_eq!(ds.attributes[[2, 0]], 0.7);
    }

    #[test]
    fn benchmark_bundle_seen_unseen_sizes_follow_split_file() {
        // 200 classes, 150 seen / 50 unseen, one instance per class
        let dir = tempfile::tempdir().unwrap();
        let n = 200;
        let features = serde_json::json!({
            "features": [(0..n).map(|i| i as f64 / 100.0).collect::<Vec<_>>()],
            "labels": (1..=n).collect::<Vec<_>>(),
        });
        let splits = serde_json::json!({
            "att": [(0..n).map(|i| i as f64).collect::<Vec<_>>()],
            "trainval_loc": (1..=150).collect::<Vec<_>>(),
            "test_seen_loc": Vec::<i64>::new(),
            "test_unseen_loc": (151..=200).collect::<Vec<_>>(),
        });
        let fpath = dir.path().join("features.json");
        let spath = dir.path().join("splits.json");
        std::fs::write(&fpath, features.to_string()).unwrap();
        std::fs::write(&spath, splits.to_string()).unwrap();
        let ds = load_benchmark_bundle(&fpath, &spath).unwrap();
        assert_eq!(ds.seen_classes.len(), 150);
        assert_eq!(ds.unseen_classes.len(), 50);
    }

    #[test]
    fn benchmark_bundle_overlap_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let features = serde_json::json!({
            "features": [[0.1, 0.2, 0.3]],
            "labels": [1, 2, 1],
        });
        // class 1 appears in both trainval and test_unseen
        let splits = serde_json::json!({
            "att": [[0.5, 0.6]],
            "trainval_loc": [1],
            "test_seen_loc": [2],
            "test_unseen_loc": [3],
        });
        let fpath = dir.path().join("features.json");
        let spath = dir.path().join("splits.json");
        std::fs::write(&fpath, features.to_string()).unwrap();
        std::fs::write(&spath, splits.to_string()).unwrap();
        // label of test_seen instance (class 2) is not seen -> validation error
        assert!(matches!(
            load_benchmark_bundle(&fpath, &spath),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn benchmark_bundle_missing_field_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("features.json");
        let spath = dir.path().join("splits.json");
        std::fs::write(&fpath, r#"{"features": [[0.1]], "labels": [1]}"#).unwrap();
        std::fs::write(&spath, r#"{"trainval_loc": [1], "test_seen_loc": [], "test_unseen_loc": []}"#)
            .unwrap();
        let err = load_benchmark_bundle(&fpath, &spath).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("att"), "error should name the field: {msg}");
    }

    proptest! {
        #[test]
        fn synthetic_datasets_always_validate(
            seed in 0u64..1000,
            n_seen in 1usize..5,
            n_unseen in 1usize..4,
            d_a in 1usize..5,
            extra in 0usize..4,
            per_class in 1usize..6,
            sigma in 0.0f64..2.0,
        ) {
            let (ds, _) = make_synthetic(seed, n_seen, n_unseen, d_a, d_a + extra, per_class, sigma).unwrap();
            prop_assert!(ds.validate().is_ok());
        }

        #[test]
        fn scaled_features_stay_in_unit_interval(
            seed in 0u64..1000,
            shift in -5.0f32..5.0,
        ) {
            let (mut ds, _) = make_synthetic(seed, 3, 2, 3, 5, 8, 0.5).unwrap();
            let scaler = fit_scaler(&ds).unwrap();
            // perturb features so test rows fall outside the fit range
            ds.features.mapv_inplace(|v| v + shift);
            let scaled = apply_scaler(&scaler, ds.features.view());
            prop_assert!(scaled.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
