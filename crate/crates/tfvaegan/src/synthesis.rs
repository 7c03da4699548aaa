//! Labeled feature synthesis from a trained model: prior noise through
//! the generator with a single decoder-fed feedback refinement pass,
//! plus the decoder latent of every synthesized feature.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::networks::{decode, ModelConfig, ModelParams};
use crate::training::refined_generate_plain;

/// Generated features with their class labels and decoder latents.
#[derive(Debug, Clone)]
pub struct SynthesizedSet {
    /// `[K, d_x]`, strictly inside `(0,1)`.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// `[K, hidden]` decoder latent of each synthesized feature.
    pub latents: Array2<f64>,
}

impl SynthesizedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Synthesize `n_per_class` features for each requested class: draw
/// `z ~ N(0,1)`, generate, refine once through Dec and F (unless the
/// model was trained without feedback), and keep the same `z` for the
/// refined call.
pub fn synthesize(
    params: &ModelParams,
    attributes: &Array2<f64>,
    class_ids: &[usize],
    n_per_class: usize,
    config: &ModelConfig,
    seed: u64,
) -> Result<SynthesizedSet> {
    for &c in class_ids {
        if c >= attributes.nrows() {
            return Err(Error::Input(format!(
                "class {c} has no attribute row (only {})",
                attributes.nrows()
            )));
        }
    }
    let k = class_ids.len() * n_per_class;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // all noise drawn up-front: exactly K x d_z normal draws
    let z_all = Array2::from_shape_fn((k, config.d_z), |_| StandardNormal.sample(&mut rng));

    let mut features = Array2::zeros((k, config.d_x));
    let mut latents = Array2::zeros((k, config.hidden));
    let mut labels = Vec::with_capacity(k);

    let loops = if config.feedback_loops > 0 { 1 } else { 0 };
    for (ci, &class) in class_ids.iter().enumerate() {
        let row_range = ci * n_per_class..(ci + 1) * n_per_class;
        let z = z_all.slice(ndarray::s![row_range.clone(), ..]).to_owned();
        let mut a = Array2::zeros((n_per_class, config.d_a));
        for mut row in a.rows_mut() {
            row.assign(&attributes.row(class));
        }
        let (_, x_hat) = refined_generate_plain(params, &z, &a, loops, config)?;
        let (h, _) = decode(&params.decoder, &x_hat, config.leaky_slope)?;
        features
            .slice_mut(ndarray::s![row_range.clone(), ..])
            .assign(&x_hat);
        latents.slice_mut(ndarray::s![row_range, ..]).assign(&h);
        labels.extend(std::iter::repeat_n(class, n_per_class));
    }

    Ok(SynthesizedSet {
        features,
        labels,
        latents,
    })
}
