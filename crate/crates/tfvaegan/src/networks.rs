//! Parameter containers and forward computations for the encoder E,
//! generator G (with its feedback injection point), conditional critic D,
//! unconditional critic D2, semantic embedding decoder Dec and feedback
//! module F.
//!
//! Every network is a two-layer fully-connected net: leaky-ReLU hidden
//! layer, then a head. Heads are linear except for the generator
//! (sigmoid, so synthesized features live in `(0,1)`) and the feedback
//! module (leaky-ReLU, matching the hidden activations it modulates).
//! Forward passes are pure functions of `(params, inputs)`.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Inductive,
    Transductive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Decoder,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Alternating,
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    Orig,
    ConcatAttr,
    ConcatLatent,
}

impl ClassifierInput {
    /// Width of transformed features for this variant.
    pub fn transformed_width(self, d_x: usize, d_a: usize, hidden: usize) -> usize {
        match self {
            ClassifierInput::Orig => d_x,
            ClassifierInput::ConcatAttr => d_x + d_a,
            ClassifierInput::ConcatLatent => d_x + hidden,
        }
    }
}

fn parse_variant<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("invalid {what} `{s}`")))
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_variant(s, "mode")
    }
}

impl std::str::FromStr for FeedbackSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_variant(s, "feedback source")
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_variant(s, "strategy")
    }
}

impl std::str::FromStr for ClassifierInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_variant(s, "classifier input")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    Minmax,
    None,
}

impl std::str::FromStr for ScalingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_variant(s, "scaling")
    }
}

/// Architecture and training hyper-parameters. The latent dimension
/// always equals the attribute dimension.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_a: usize,
    pub d_z: usize,
    pub hidden: usize,
    /// Adversarial loss weight.
    pub alpha: f64,
    /// Embedding cycle-consistency weight.
    pub beta: f64,
    /// Feedback modulation gain.
    pub delta: f64,
    /// Gradient penalty coefficient.
    pub lambda_gp: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Synthesized features per unseen class.
    pub syn_num: usize,
    pub leaky_slope: f64,
    /// Constant initial bias of hidden layers (positive starts units in
    /// the active, near-linear region).
    pub hidden_bias_init: f64,
    pub mode: Mode,
    pub feedback_source: FeedbackSource,
    pub strategy: Strategy,
    pub classifier_input: ClassifierInput,
    /// Number of feedback refinement sub-iterations per generator step.
    pub feedback_loops: usize,
    /// Posterior samples averaged in the reconstruction term.
    pub recon_samples: usize,
    /// Weight of the unconditional critic's adversarial term relative to
    /// the conditional one (transductive mode).
    pub d2_weight: f64,
    /// Also update Dec during the generator step (off: Dec learns only
    /// in its own step).
    pub dec_in_generator_step: bool,
    /// GZSL classifier training also uses synthesized seen-class
    /// features in addition to the real ones.
    pub gzsl_synthesize_seen: bool,
    pub scaling: ScalingKind,
    pub classifier_lr: f64,
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults for the given data dimensions.
    pub fn new(d_x: usize, d_a: usize) -> Self {
        Self {
            d_x,
            d_a,
            d_z: d_a,
            hidden: 4096,
            alpha: 10.0,
            beta: 0.01,
            delta: 1.0,
            lambda_gp: 10.0,
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            n_critic: 5,
            batch_size: 64,
            epochs: 30,
            syn_num: 300,
            leaky_slope: 0.2,
            hidden_bias_init: 0.0,
            mode: Mode::Inductive,
            feedback_source: FeedbackSource::Decoder,
            strategy: Strategy::Alternating,
            classifier_input: ClassifierInput::ConcatLatent,
            feedback_loops: 1,
            recon_samples: 1,
            d2_weight: 1.0,
            dec_in_generator_step: false,
            gzsl_synthesize_seen: false,
            scaling: ScalingKind::Minmax,
            classifier_lr: 1e-3,
            classifier_epochs: 25,
            classifier_batch: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_a == 0 || self.hidden == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.d_z != self.d_a {
            return Err(Error::Config(format!(
                "d_z ({}) must equal d_a ({})",
                self.d_z, self.d_a
            )));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("delta", self.delta),
            ("lambda_gp", self.lambda_gp),
            ("d2_weight", self.d2_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.n_critic < 1 {
            return Err(Error::Config("n_critic must be >= 1".into()));
        }
        if self.batch_size == 0 || self.classifier_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.syn_num == 0 {
            return Err(Error::Config("syn_num must be >= 1".into()));
        }
        if self.recon_samples == 0 {
            return Err(Error::Config("recon_samples must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.classifier_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config("leaky_slope must be in [0,1)".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0,1)")));
            }
        }
        Ok(())
    }
}

/// One fully-connected layer; weights are `[in, out]` so the forward
/// pass is `x.dot(w) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Linear {
    /// Fan-in-scaled normal init, zero bias.
    pub fn init<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Self::init_with_bias(rng, d_in, d_out, 0.0)
    }

    /// Fan-in-scaled normal init with a constant bias. Hidden layers use
    /// a positive bias so their units start in the active region, which
    /// keeps the initial map close to linear.
    pub fn init_with_bias<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, bias: f64) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let scale = 1.0 / (d_in as f64).sqrt();
        let w = Array2::from_shape_fn((d_in, d_out), |_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        });
        Self {
            w,
            b: Array2::from_elem((1, d_out), bias),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub input: Linear,
    pub mu_head: Linear,
    pub logvar_head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub input: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub input: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub input: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackParams {
    pub l1: Linear,
    pub l2: Linear,
}

/// All trainable weights. `discriminator2` exists only in transductive
/// mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub generator: GeneratorParams,
    pub discriminator: CriticParams,
    pub discriminator2: Option<CriticParams>,
    pub decoder: DecoderParams,
    pub feedback: FeedbackParams,
}

/// Identifies one network's parameter group, e.g. for optimizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetId {
    Encoder,
    Generator,
    Discriminator,
    Discriminator2,
    Decoder,
    Feedback,
}

impl ModelParams {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let h = config.hidden;
        let hb = config.hidden_bias_init;
        Self {
            encoder: EncoderParams {
                input: Linear::init_with_bias(rng, config.d_x + config.d_a, h, hb),
                mu_head: Linear::init(rng, h, config.d_z),
                logvar_head: Linear::init(rng, h, config.d_z),
            },
            generator: GeneratorParams {
                input: Linear::init_with_bias(rng, config.d_z + config.d_a, h, hb),
                output: Linear::init(rng, h, config.d_x),
            },
            discriminator: CriticParams {
                input: Linear::init_with_bias(rng, config.d_x + config.d_a, h, hb),
                output: Linear::init(rng, h, 1),
            },
            discriminator2: match config.mode {
                Mode::Transductive => Some(CriticParams {
                    input: Linear::init_with_bias(rng, config.d_x, h, hb),
                    output: Linear::init(rng, h, 1),
                }),
                Mode::Inductive => None,
            },
            decoder: DecoderParams {
                input: Linear::init_with_bias(rng, config.d_x, h, hb),
                output: Linear::init(rng, h, config.d_a),
            },
            feedback: FeedbackParams {
                l1: Linear::init_with_bias(rng, h, h, hb),
                l2: Linear::init_with_bias(rng, h, h, hb),
            },
        }
    }

    /// Tensors of one network, in a stable order (weight then bias per
    /// layer). Optimizer moments and checkpoint layouts rely on this
    /// order.
    pub fn net_tensors(&self, net: NetId) -> Vec<&Array2<f64>> {
        match net {
            NetId::Encoder => vec![
                &self.encoder.input.w,
                &self.encoder.input.b,
                &self.encoder.mu_head.w,
                &self.encoder.mu_head.b,
                &self.encoder.logvar_head.w,
                &self.encoder.logvar_head.b,
            ],
            NetId::Generator => vec![
                &self.generator.input.w,
                &self.generator.input.b,
                &self.generator.output.w,
                &self.generator.output.b,
            ],
            NetId::Discriminator => vec![
                &self.discriminator.input.w,
                &self.discriminator.input.b,
                &self.discriminator.output.w,
                &self.discriminator.output.b,
            ],
            NetId::Discriminator2 => match &self.discriminator2 {
                Some(d2) => vec![&d2.input.w, &d2.input.b, &d2.output.w, &d2.output.b],
                None => vec![],
            },
            NetId::Decoder => vec![
                &self.decoder.input.w,
                &self.decoder.input.b,
                &self.decoder.output.w,
                &self.decoder.output.b,
            ],
            NetId::Feedback => vec![
                &self.feedback.l1.w,
                &self.feedback.l1.b,
                &self.feedback.l2.w,
                &self.feedback.l2.b,
            ],
        }
    }

    pub fn net_tensors_mut(&mut self, net: NetId) -> Vec<&mut Array2<f64>> {
        match net {
            NetId::Encoder => vec![
                &mut self.encoder.input.w,
                &mut self.encoder.input.b,
                &mut self.encoder.mu_head.w,
                &mut self.encoder.mu_head.b,
                &mut self.encoder.logvar_head.w,
                &mut self.encoder.logvar_head.b,
            ],
            NetId::Generator => vec![
                &mut self.generator.input.w,
                &mut self.generator.input.b,
                &mut self.generator.output.w,
                &mut self.generator.output.b,
            ],
            NetId::Discriminator => vec![
                &mut self.discriminator.input.w,
                &mut self.discriminator.input.b,
                &mut self.discriminator.output.w,
                &mut self.discriminator.output.b,
            ],
            NetId::Discriminator2 => match &mut self.discriminator2 {
                Some(d2) => vec![
                    &mut d2.input.w,
                    &mut d2.input.b,
                    &mut d2.output.w,
                    &mut d2.output.b,
                ],
                None => vec![],
            },
            NetId::Decoder => vec![
                &mut self.decoder.input.w,
                &mut self.decoder.input.b,
                &mut self.decoder.output.w,
                &mut self.decoder.output.b,
            ],
            NetId::Feedback => vec![
                &mut self.feedback.l1.w,
                &mut self.feedback.l1.b,
                &mut self.feedback.l2.w,
                &mut self.feedback.l2.b,
            ],
        }
    }
}

pub fn leaky_relu(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn sigmoid_mat(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(crate::autodiff::sigmoid)
}

fn check_width(name: &str, m: &Array2<f64>, want: usize) -> Result<()> {
    if m.ncols() != want {
        return Err(Error::Shape(format!(
            "{name} has width {}, expected {want}",
            m.ncols()
        )));
    }
    Ok(())
}

fn check_rows(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "batch sizes differ: {} vs {}",
            a.nrows(),
            b.nrows()
        )));
    }
    Ok(())
}

/// E(x, a) -> (mu, logvar) of the approximate posterior.
pub fn encode(
    params: &EncoderParams,
    x: &Array2<f64>,
    a: &Array2<f64>,
    slope: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_rows(x, a)?;
    check_width("encoder input x+a", &concat_cols(x, a), params.input.w.nrows())?;
    let h = leaky_relu(&params.input.forward(&concat_cols(x, a)), slope);
    Ok((params.mu_head.forward(&h), params.logvar_head.forward(&h)))
}

/// z = mu + exp(logvar / 2) * eps.
pub fn reparameterize(mu: &Array2<f64>, logvar: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    assert_eq!(mu.dim(), logvar.dim(), "reparameterize shape mismatch");
    assert_eq!(mu.dim(), eps.dim(), "reparameterize eps shape mismatch");
    mu + &(logvar.mapv(|v| (v / 2.0).exp()) * eps)
}

pub(crate) fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("concat_cols")
}

/// Hidden activation, output logits and sigmoid features of the
/// generator; the feedback vector (when present and `delta != 0`)
/// additively modulates the hidden layer.
pub fn generate_detail(
    params: &GeneratorParams,
    z: &Array2<f64>,
    a: &Array2<f64>,
    feedback: Option<&Array2<f64>>,
    delta: f64,
    slope: f64,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    check_rows(z, a)?;
    let za = concat_cols(z, a);
    check_width("generator input z+a", &za, params.input.w.nrows())?;
    let mut hidden = leaky_relu(&params.input.forward(&za), slope);
    if let Some(f) = feedback {
        check_rows(&hidden, f)?;
        check_width("feedback", f, hidden.ncols())?;
        if delta != 0.0 {
            hidden = hidden + &(f * delta);
        }
    }
    let logits = params.output.forward(&hidden);
    let x_hat = sigmoid_mat(&logits);
    Ok((hidden, logits, x_hat))
}

/// G(z, a, feedback) -> synthesized features in `(0,1)`.
pub fn generate(
    params: &GeneratorParams,
    z: &Array2<f64>,
    a: &Array2<f64>,
    feedback: Option<&Array2<f64>>,
    delta: f64,
    slope: f64,
) -> Result<Array2<f64>> {
    Ok(generate_detail(params, z, a, feedback, delta, slope)?.2)
}

/// The critic's post-activation hidden layer (feedback source in the
/// discriminator-fed ablation).
pub(crate) fn critic_hidden(
    params: &CriticParams,
    input: &Array2<f64>,
    slope: f64,
) -> Result<Array2<f64>> {
    check_width("critic input", input, params.input.w.nrows())?;
    Ok(leaky_relu(&params.input.forward(input), slope))
}

fn critic_forward(params: &CriticParams, input: &Array2<f64>, slope: f64) -> Result<Array1<f64>> {
    let h = critic_hidden(params, input, slope)?;
    Ok(params.output.forward(&h).column(0).to_owned())
}

/// Conditional critic score per instance (unbounded).
pub fn discriminate(
    params: &CriticParams,
    x: &Array2<f64>,
    a: &Array2<f64>,
    slope: f64,
) -> Result<Array1<f64>> {
    check_rows(x, a)?;
    critic_forward(params, &concat_cols(x, a), slope)
}

/// Unconditional critic score per instance.
pub fn discriminate_unconditional(
    params: &CriticParams,
    x: &Array2<f64>,
    slope: f64,
) -> Result<Array1<f64>> {
    critic_forward(params, x, slope)
}

/// Dec(x) -> (latent embedding h, reconstructed attributes).
pub fn decode(
    params: &DecoderParams,
    x: &Array2<f64>,
    slope: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_width("decoder input", x, params.input.w.nrows())?;
    let h = leaky_relu(&params.input.forward(x), slope);
    let a_hat = params.output.forward(&h);
    Ok((h, a_hat))
}

/// F(h) -> additive feedback for the generator's hidden layer.
pub fn feedback_transform(
    params: &FeedbackParams,
    h: &Array2<f64>,
    slope: f64,
) -> Result<Array2<f64>> {
    check_width("feedback input", h, params.l1.w.nrows())?;
    let mid = leaky_relu(&params.l1.forward(h), slope);
    Ok(leaky_relu(&params.l2.forward(&mid), slope))
}

/// Gradient of the critic score with respect to the first `d_x` input
/// columns, in closed form for the two-layer architecture:
/// `grad = (phi'(u) .* w2^T) W1_x^T` with `u` the hidden pre-activation.
///
/// This is what the gradient penalty differentiates; since leaky-ReLU is
/// piecewise linear, treating `phi'(u)` as locally constant is exact
/// almost everywhere.
pub fn critic_input_gradient(
    params: &CriticParams,
    x: &Array2<f64>,
    a: Option<&Array2<f64>>,
    slope: f64,
) -> Result<Array2<f64>> {
    let input = match a {
        Some(a) => {
            check_rows(x, a)?;
            concat_cols(x, a)
        }
        None => x.clone(),
    };
    check_width("critic input", &input, params.input.w.nrows())?;
    let u = params.input.forward(&input);
    let phi_prime = u.mapv(|v| if v > 0.0 { 1.0 } else { slope });
    let w2_row = params.output.w.t(); // [1, hidden]
    let t = &phi_prime * &w2_row;
    let w1_x = params.input.w.slice(ndarray::s![..x.ncols(), ..]);
    Ok(t.dot(&w1_x.t()))
}
