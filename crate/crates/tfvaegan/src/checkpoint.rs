//! Single-file model checkpoint: a magic tag, a JSON header (config echo
//! plus an array index in the bundle's `{name, dtype, shape}` schema,
//! extended with byte offsets) and the raw little-endian tensor data.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::bundle::{bytes_to_f32, bytes_to_f64, f32_bytes, f64_bytes};
use crate::data::FeatureScaler;
use crate::error::{Error, Result};
use crate::networks::{
    CriticParams, DecoderParams, EncoderParams, FeedbackParams, GeneratorParams, Linear, Mode,
    ModelConfig, ModelParams,
};

const MAGIC: &[u8; 8] = b"TFVGCKP1";

/// Everything needed to synthesize and evaluate: the config echo, the
/// trained weights and the feature scaler fitted at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub scaler: FeatureScaler,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    byte_len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    arrays: Vec<IndexEntry>,
}

fn linear_entries(prefix: &str, lin: &Linear) -> Vec<(String, Vec<usize>, Vec<u8>)> {
    vec![
        (
            format!("{prefix}.w"),
            vec![lin.w.nrows(), lin.w.ncols()],
            f64_bytes(lin.w.as_standard_layout().as_slice().unwrap()),
        ),
        (
            format!("{prefix}.b"),
            vec![lin.b.nrows(), lin.b.ncols()],
            f64_bytes(lin.b.as_standard_layout().as_slice().unwrap()),
        ),
    ]
}

fn named_arrays(ckpt: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<u8>)> {
    let p = &ckpt.params;
    let mut out = Vec::new();
    out.extend(linear_entries("encoder.input", &p.encoder.input));
    out.extend(linear_entries("encoder.mu_head", &p.encoder.mu_head));
    out.extend(linear_entries("encoder.logvar_head", &p.encoder.logvar_head));
    out.extend(linear_entries("generator.input", &p.generator.input));
    out.extend(linear_entries("generator.output", &p.generator.output));
    out.extend(linear_entries("discriminator.input", &p.discriminator.input));
    out.extend(linear_entries("discriminator.output", &p.discriminator.output));
    if let Some(d2) = &p.discriminator2 {
        out.extend(linear_entries("discriminator2.input", &d2.input));
        out.extend(linear_entries("discriminator2.output", &d2.output));
    }
    out.extend(linear_entries("decoder.input", &p.decoder.input));
    out.extend(linear_entries("decoder.output", &p.decoder.output));
    out.extend(linear_entries("feedback.l1", &p.feedback.l1));
    out.extend(linear_entries("feedback.l2", &p.feedback.l2));
    out.push((
        "scaler.min".into(),
        vec![ckpt.scaler.min.len()],
        f32_bytes(ckpt.scaler.min.as_slice().unwrap()),
    ));
    out.push((
        "scaler.max".into(),
        vec![ckpt.scaler.max.len()],
        f32_bytes(ckpt.scaler.max.as_slice().unwrap()),
    ));
    out
}

/// Serialize a checkpoint to bytes (`save` writes these to a file).
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let arrays = named_arrays(ckpt);
    let mut index = Vec::new();
    let mut offset = 0usize;
    for (name, shape, bytes) in &arrays {
        let dtype = if name.starts_with("scaler.") { "f32le" } else { "f64le" };
        index.push(IndexEntry {
            name: name.clone(),
            dtype: dtype.into(),
            shape: shape.clone(),
            offset,
            byte_len: bytes.len(),
        });
        offset += bytes.len();
    }
    let header = Header {
        format: "tfvaegan-checkpoint-v1".into(),
        config: ckpt.config.clone(),
        arrays: index,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_json.len() + offset);
    out.write_all(MAGIC)?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;
    for (_, _, bytes) in &arrays {
        out.write_all(bytes)?;
    }
    Ok(out)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, to_bytes(ckpt)?)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    index: Vec<IndexEntry>,
}

impl Reader<'_> {
    fn f64_matrix(&self, name: &str) -> Result<Array2<f64>> {
        let e = self
            .index
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing array `{name}`")))?;
        if e.dtype != "f64le" || e.shape.len() != 2 {
            return Err(Error::Format(format!("array `{name}` must be 2-D f64le")));
        }
        let bytes = self
            .data
            .get(e.offset..e.offset + e.byte_len)
            .ok_or_else(|| Error::Format(format!("array `{name}` out of bounds")))?;
        let values = bytes_to_f64(bytes);
        if values.len() != e.shape[0] * e.shape[1] {
            return Err(Error::Format(format!(
                "array `{name}`: {} values for shape {:?}",
                values.len(),
                e.shape
            )));
        }
        Array2::from_shape_vec((e.shape[0], e.shape[1]), values)
            .map_err(|err| Error::Format(format!("array `{name}`: {err}")))
    }

    fn f32_vector(&self, name: &str) -> Result<Array1<f32>> {
        let e = self
            .index
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing array `{name}`")))?;
        if e.dtype != "f32le" || e.shape.len() != 1 {
            return Err(Error::Format(format!("array `{name}` must be 1-D f32le")));
        }
        let bytes = self
            .data
            .get(e.offset..e.offset + e.byte_len)
            .ok_or_else(|| Error::Format(format!("array `{name}` out of bounds")))?;
        let values = bytes_to_f32(bytes);
        if values.len() != e.shape[0] {
            return Err(Error::Format(format!(
                "array `{name}`: {} values for shape {:?}",
                values.len(),
                e.shape
            )));
        }
        Ok(Array1::from_vec(values))
    }

    fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            w: self.f64_matrix(&format!("{prefix}.w"))?,
            b: self.f64_matrix(&format!("{prefix}.b"))?,
        })
    }
}

pub fn from_bytes(data: &[u8]) -> Result<Checkpoint> {
    if data.len() < 16 || &data[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(data[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    let header_bytes = data
        .get(16..header_end)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format != "tfvaegan-checkpoint-v1" {
        return Err(Error::Format(format!(
            "unsupported checkpoint format `{}`",
            header.format
        )));
    }

    let reader = Reader {
        data: &data[header_end..],
        index: header.arrays,
    };
    let config = header.config;
    config.validate()?;

    let params = ModelParams {
        encoder: EncoderParams {
            input: reader.linear("encoder.input")?,
            mu_head: reader.linear("encoder.mu_head")?,
            logvar_head: reader.linear("encoder.logvar_head")?,
        },
        generator: GeneratorParams {
            input: reader.linear("generator.input")?,
            output: reader.linear("generator.output")?,
        },
        discriminator: CriticParams {
            input: reader.linear("discriminator.input")?,
            output: reader.linear("discriminator.output")?,
        },
        discriminator2: match config.mode {
            Mode::Transductive => Some(CriticParams {
                input: reader.linear("discriminator2.input")?,
                output: reader.linear("discriminator2.output")?,
            }),
            Mode::Inductive => None,
        },
        decoder: DecoderParams {
            input: reader.linear("decoder.input")?,
            output: reader.linear("decoder.output")?,
        },
        feedback: FeedbackParams {
            l1: reader.linear("feedback.l1")?,
            l2: reader.linear("feedback.l2")?,
        },
    };
    let scaler = FeatureScaler {
        min: reader.f32_vector("scaler.min")?,
        max: reader.f32_vector("scaler.max")?,
    };
    Ok(Checkpoint {
        config,
        params,
        scaler,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let data =
        std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn sample_checkpoint(mode: Mode) -> Checkpoint {
        let mut cfg = ModelConfig::new(8, 4);
        cfg.hidden = 6;
        cfg.mode = mode;
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let params = ModelParams::init(&cfg, &mut rng);
        Checkpoint {
            config: cfg,
            params,
            scaler: FeatureScaler {
                min: ndarray::Array1::from_vec(vec![0.1; 8]),
                max: ndarray::Array1::from_vec(vec![0.9; 8]),
            },
        }
    }

    #[test]
    fn round_trip_is_lossless_in_both_modes() {
        for mode in [Mode::Inductive, Mode::Transductive] {
            let ckpt = sample_checkpoint(mode);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            save(&path, &ckpt).unwrap();
            let loaded = load(&path).unwrap();
            assert_eq!(loaded, ckpt);
            // serialization is canonical: same bytes on re-save
            assert_eq!(to_bytes(&loaded).unwrap(), to_bytes(&ckpt).unwrap());
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let err = from_bytes(b"NOTACKPTxxxxxxxxxxxx").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncated_data_is_format_error() {
        let ckpt = sample_checkpoint(Mode::Inductive);
        let bytes = to_bytes(&ckpt).unwrap();
        let err = from_bytes(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn missing_feedback_arrays_is_format_error() {
        let ckpt = sample_checkpoint(Mode::Inductive);
        let mut bytes = to_bytes(&ckpt).unwrap();
        // corrupt the header by renaming the feedback array
        let needle = b"feedback.l1".as_slice();
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        bytes[pos..pos + 8].copy_from_slice(b"feedXack");
        let err = from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err}");
    }
}
