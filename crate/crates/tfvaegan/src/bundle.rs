//! Native on-disk bundle: a directory holding `manifest.json` plus one
//! raw little-endian, row-major binary file per array.
//!
//! The manifest declares `{name, dtype, shape, path}` per array and
//! carries the split index lists and class sets as plain JSON. The same
//! array convention (and [`ArrayEntry`] schema) is reused by the
//! checkpoint archive.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{SplitIndices, ZslDataset};
use crate::error::{Error, Result};

pub const BUNDLE_FORMAT: &str = "zsl-bundle-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub path: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub arrays: Vec<ArrayEntry>,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub splits: SplitIndices,
}

fn dtype_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f32le" | "i32le" => Ok(4),
        "f64le" => Ok(8),
        other => Err(Error::Format(format!("unknown dtype `{other}`"))),
    }
}

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn i32_bytes(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn bytes_to_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn bytes_to_i32(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn check_len(entry: &ArrayEntry, byte_len: usize) -> Result<()> {
    let elems: usize = entry.shape.iter().product();
    let expect = elems * dtype_size(&entry.dtype)?;
    if byte_len != expect {
        return Err(Error::Format(format!(
            "array `{}`: file holds {byte_len} bytes but shape {:?} ({}) needs {expect}",
            entry.name, entry.shape, entry.dtype
        )));
    }
    Ok(())
}

fn read_entry_bytes(dir: &Path, entry: &ArrayEntry) -> Result<Vec<u8>> {
    let bytes = std::fs::read(dir.join(&entry.path))
        .map_err(|e| Error::Format(format!("array `{}`: {e}", entry.name)))?;
    check_len(entry, bytes.len())?;
    Ok(bytes)
}

fn find_entry<'m>(manifest: &'m BundleManifest, name: &str) -> Result<&'m ArrayEntry> {
    manifest
        .arrays
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Format(format!("manifest missing array `{name}`")))
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::Format(format!(
            "unsupported bundle format `{}`",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Read a named 2-D f32 array from a bundle directory.
pub fn read_f32_matrix(dir: &Path, manifest: &BundleManifest, name: &str) -> Result<Array2<f32>> {
    let entry = find_entry(manifest, name)?;
    if entry.dtype != "f32le" || entry.shape.len() != 2 {
        return Err(Error::Format(format!(
            "array `{name}` must be a 2-D f32le matrix"
        )));
    }
    let bytes = read_entry_bytes(dir, entry)?;
    Array2::from_shape_vec((entry.shape[0], entry.shape[1]), bytes_to_f32(&bytes))
        .map_err(|e| Error::Format(format!("array `{name}`: {e}")))
}

/// Read a named 1-D i32 array from a bundle directory.
pub fn read_i32_vector(dir: &Path, manifest: &BundleManifest, name: &str) -> Result<Vec<i32>> {
    let entry = find_entry(manifest, name)?;
    if entry.dtype != "i32le" || entry.shape.len() != 1 {
        return Err(Error::Format(format!(
            "array `{name}` must be a 1-D i32le vector"
        )));
    }
    let bytes = read_entry_bytes(dir, entry)?;
    Ok(bytes_to_i32(&bytes))
}

/// An extra array to include alongside the dataset arrays when writing
/// a bundle (e.g. real/synth source flags).
pub enum ExtraArray {
    F32Matrix(String, Array2<f32>),
    I32Vector(String, Vec<i32>),
}

pub fn save_native_bundle_with(
    dir: &Path,
    dataset: &ZslDataset,
    extras: &[ExtraArray],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut arrays = vec![
        ArrayEntry {
            name: "features".into(),
            dtype: "f32le".into(),
            shape: vec![dataset.features.nrows(), dataset.features.ncols()],
            path: "features.bin".into(),
        },
        ArrayEntry {
            name: "labels".into(),
            dtype: "i32le".into(),
            shape: vec![dataset.labels.len()],
            path: "labels.bin".into(),
        },
        ArrayEntry {
            name: "attributes".into(),
            dtype: "f32le".into(),
            shape: vec![dataset.attributes.nrows(), dataset.attributes.ncols()],
            path: "attributes.bin".into(),
        },
    ];

    let feat = dataset.features.as_standard_layout();
    std::fs::write(
        dir.join("features.bin"),
        f32_bytes(feat.as_slice().expect("standard layout")),
    )?;
    let labels: Vec<i32> = dataset.labels.iter().map(|&l| l as i32).collect();
    std::fs::write(dir.join("labels.bin"), i32_bytes(&labels))?;
    let attr = dataset.attributes.as_standard_layout();
    std::fs::write(
        dir.join("attributes.bin"),
        f32_bytes(attr.as_slice().expect("standard layout")),
    )?;

    for extra in extras {
        match extra {
            ExtraArray::F32Matrix(name, m) => {
                let path = format!("{name}.bin");
                let std_m = m.as_standard_layout();
                std::fs::write(dir.join(&path), f32_bytes(std_m.as_slice().unwrap()))?;
                arrays.push(ArrayEntry {
                    name: name.clone(),
                    dtype: "f32le".into(),
                    shape: vec![m.nrows(), m.ncols()],
                    path,
                });
            }
            ExtraArray::I32Vector(name, v) => {
                let path = format!("{name}.bin");
                std::fs::write(dir.join(&path), i32_bytes(v))?;
                arrays.push(ArrayEntry {
                    name: name.clone(),
                    dtype: "i32le".into(),
                    shape: vec![v.len()],
                    path,
                });
            }
        }
    }

    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.into(),
        arrays,
        seen_classes: dataset.seen_classes.clone(),
        unseen_classes: dataset.unseen_classes.clone(),
        splits: dataset.split.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn save_native_bundle(dir: &Path, dataset: &ZslDataset) -> Result<()> {
    save_native_bundle_with(dir, dataset, &[])
}

/// Load and validate a dataset from a native bundle directory. Arrays
/// beyond the three the dataset needs are ignored.
pub fn load_native_bundle(dir: &Path) -> Result<ZslDataset> {
    let manifest = read_manifest(dir)?;
    let features = read_f32_matrix(dir, &manifest, "features")?;
    let attributes = read_f32_matrix(dir, &manifest, "attributes")?;
    let labels_i32 = read_i32_vector(dir, &manifest, "labels")?;
    let labels = labels_i32
        .iter()
        .map(|&v| {
            usize::try_from(v).map_err(|_| Error::Format(format!("negative label {v}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let dataset = ZslDataset {
        features,
        labels,
        attributes,
        seen_classes: manifest.seen_classes,
        unseen_classes: manifest.unseen_classes,
        split: manifest.splits,
    };
    dataset.validate()?;
    Ok(dataset)
}
