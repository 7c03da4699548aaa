//! The optimization schedule: critic steps (with the gradient-penalty
//! second-order path), joint encoder/generator steps with in-loop
//! feedback refinement, alternating feedback/decoder steps, the
//! two-stage ablation schedule and the transductive unconditional
//! critic branch.
//!
//! Each step draws its randomness from the state's seeded stream, builds
//! the objective on the autodiff tape, backpropagates and applies one
//! Adam update to exactly its declared parameter group. Plain
//! (tape-free) twins of every objective exist for logging and as
//! independent oracles in tests.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{Graph, Gradients, Var};
use crate::data::{apply_scaler, FeatureScaler, SplitKind, ZslDataset};
use crate::error::{Error, Result};
use crate::losses;
use crate::networks::{
    decode, discriminate, discriminate_unconditional, encode, feedback_transform,
    generate_detail, reparameterize, CriticParams, FeedbackSource, Linear, Mode, ModelConfig,
    ModelParams, NetId, ScalingKind, Strategy,
};

/// Training-time view of a dataset. Training code touches data only
/// through this trait, which is the seam the ZSL-condition audit hooks
/// into: inductive training must never request test-split features, and
/// no mode may request test-split labels.
pub trait TrainData {
    fn d_x(&self) -> usize;
    fn d_a(&self) -> usize;
    fn attributes(&self) -> Array2<f32>;
    fn seen_classes(&self) -> Vec<usize>;
    fn unseen_classes(&self) -> Vec<usize>;
    fn split_features(&self, split: SplitKind) -> Array2<f32>;
    fn split_labels(&self, split: SplitKind) -> Vec<usize>;
}

impl TrainData for ZslDataset {
    fn d_x(&self) -> usize {
        ZslDataset::d_x(self)
    }
    fn d_a(&self) -> usize {
        ZslDataset::d_a(self)
    }
    fn attributes(&self) -> Array2<f32> {
        self.attributes.clone()
    }
    fn seen_classes(&self) -> Vec<usize> {
        self.seen_classes.clone()
    }
    fn unseen_classes(&self) -> Vec<usize> {
        self.unseen_classes.clone()
    }
    fn split_features(&self, split: SplitKind) -> Array2<f32> {
        ZslDataset::split_features(self, split)
    }
    fn split_labels(&self, split: SplitKind) -> Vec<usize> {
        ZslDataset::split_labels(self, split)
    }
}

/// One line of the training trace; serialized as line-delimited JSON by
/// the CLI.
#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum StepRecord {
    Critic {
        iteration: u64,
        epoch: usize,
        phase: u8,
        loss: f64,
        gp: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        d2_loss: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        d2_gp: Option<f64>,
    },
    Generator {
        iteration: u64,
        epoch: usize,
        phase: u8,
        total: f64,
        kl: f64,
        recon: f64,
        adv: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        adv2: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        cycle: Option<f64>,
    },
    Feedback {
        iteration: u64,
        epoch: usize,
        phase: u8,
        loss: f64,
        adv: f64,
        cycle: f64,
    },
}

/// Adam with bias correction; one moment pair per tensor, in
/// `net_tensors` order.
#[derive(Debug, Clone)]
pub struct Adam {
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    fn for_net(params: &ModelParams, net: NetId) -> Self {
        let shapes: Vec<_> = params.net_tensors(net).iter().map(|t| t.dim()).collect();
        Adam {
            t: 0,
            m: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
            v: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
        }
    }

    fn step(
        &mut self,
        tensors: Vec<&mut Array2<f64>>,
        grads: &[Array2<f64>],
        lr: f64,
        beta1: f64,
        beta2: f64,
    ) {
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((theta, g), (m, v)) in tensors
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            });
            ndarray::Zip::from(theta)
                .and(&*m)
                .and(&*v)
                .for_each(|t, &mi, &vi| {
                    *t -= lr * (mi / bc1) / ((vi / bc2).sqrt() + EPS);
                });
        }
    }
}

#[derive(Debug, Clone)]
struct Optimizers {
    encoder: Adam,
    generator: Adam,
    discriminator: Adam,
    discriminator2: Option<Adam>,
    decoder: Adam,
    feedback: Adam,
}

impl Optimizers {
    fn new(params: &ModelParams) -> Self {
        Self {
            encoder: Adam::for_net(params, NetId::Encoder),
            generator: Adam::for_net(params, NetId::Generator),
            discriminator: Adam::for_net(params, NetId::Discriminator),
            discriminator2: params
                .discriminator2
                .as_ref()
                .map(|_| Adam::for_net(params, NetId::Discriminator2)),
            decoder: Adam::for_net(params, NetId::Decoder),
            feedback: Adam::for_net(params, NetId::Feedback),
        }
    }
}

/// Mutable training state threaded through the steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub epoch: usize,
    pub iteration: u64,
    pub history: Vec<StepRecord>,
    pub rng: ChaCha12Rng,
    opt: Optimizers,
}

impl TrainState {
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(config, &mut rng);
        let opt = Optimizers::new(&params);
        TrainState {
            params,
            epoch: 0,
            iteration: 0,
            history: Vec::new(),
            rng,
            opt,
        }
    }
}

/// Per-step immutable context assembled by the training loop.
pub struct StepContext<'a> {
    pub config: &'a ModelConfig,
    /// `[C, d_a]` attribute matrix, f64.
    pub attributes: &'a Array2<f64>,
    pub unseen_classes: &'a [usize],
    /// Scaled unlabeled feature pool (transductive mode only).
    pub unlabeled: Option<&'a Array2<f64>>,
    /// Feedback refinement count for this phase.
    pub loops: usize,
    pub phase: u8,
}

impl StepContext<'_> {
    fn transductive(&self) -> bool {
        self.config.mode == Mode::Transductive
    }
}

/// One mini-batch of scaled seen-class features with their per-instance
/// attribute rows.
pub struct TrainBatch {
    pub x: Array2<f64>,
    pub a: Array2<f64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

fn sample_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn sample_uniform_col<R: Rng>(rng: &mut R, rows: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, 1), |_| rng.random::<f64>())
}

/// Attribute rows for a batch of labels.
pub fn attrs_for_labels(attributes: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), attributes.ncols()));
    for (i, &l) in labels.iter().enumerate() {
        out.row_mut(i).assign(&attributes.row(l));
    }
    out
}

fn gather_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (i, &r) in idx.iter().enumerate() {
        out.row_mut(i).assign(&m.row(r));
    }
    out
}

// ---------------------------------------------------------------------------
// Tape-side network builders
// ---------------------------------------------------------------------------

struct LinearVars {
    w: Var,
    b: Var,
}

fn reg_linear(g: &mut Graph, lin: &Linear, grad: bool) -> LinearVars {
    let (w, b) = if grad {
        (g.param(lin.w.clone()), g.param(lin.b.clone()))
    } else {
        (g.constant(lin.w.clone()), g.constant(lin.b.clone()))
    };
    LinearVars { w, b }
}

fn linear_fwd(g: &mut Graph, l: &LinearVars, x: Var) -> Var {
    let y = g.matmul(x, l.w);
    g.add_row(y, l.b)
}

struct ModelVars {
    enc_input: LinearVars,
    enc_mu: LinearVars,
    enc_logvar: LinearVars,
    gen_input: LinearVars,
    gen_output: LinearVars,
    d_input: LinearVars,
    d_output: LinearVars,
    d2_input: Option<LinearVars>,
    d2_output: Option<LinearVars>,
    dec_input: LinearVars,
    dec_output: LinearVars,
    f_l1: LinearVars,
    f_l2: LinearVars,
}

/// Which networks get tracked gradients in a step's graph.
#[derive(Debug, Clone, Copy, Default)]
struct GradSet {
    encoder: bool,
    generator: bool,
    discriminator: bool,
    discriminator2: bool,
    decoder: bool,
    feedback: bool,
}

fn register_model(g: &mut Graph, p: &ModelParams, gs: GradSet) -> ModelVars {
    ModelVars {
        enc_input: reg_linear(g, &p.encoder.input, gs.encoder),
        enc_mu: reg_linear(g, &p.encoder.mu_head, gs.encoder),
        enc_logvar: reg_linear(g, &p.encoder.logvar_head, gs.encoder),
        gen_input: reg_linear(g, &p.generator.input, gs.generator),
        gen_output: reg_linear(g, &p.generator.output, gs.generator),
        d_input: reg_linear(g, &p.discriminator.input, gs.discriminator),
        d_output: reg_linear(g, &p.discriminator.output, gs.discriminator),
        d2_input: p
            .discriminator2
            .as_ref()
            .map(|d2| reg_linear(g, &d2.input, gs.discriminator2)),
        d2_output: p
            .discriminator2
            .as_ref()
            .map(|d2| reg_linear(g, &d2.output, gs.discriminator2)),
        dec_input: reg_linear(g, &p.decoder.input, gs.decoder),
        dec_output: reg_linear(g, &p.decoder.output, gs.decoder),
        f_l1: reg_linear(g, &p.feedback.l1, gs.feedback),
        f_l2: reg_linear(g, &p.feedback.l2, gs.feedback),
    }
}

impl ModelVars {
    /// Vars of one network, in `ModelParams::net_tensors` order.
    fn net_vars(&self, net: NetId) -> Vec<Var> {
        match net {
            NetId::Encoder => vec![
                self.enc_input.w,
                self.enc_input.b,
                self.enc_mu.w,
                self.enc_mu.b,
                self.enc_logvar.w,
                self.enc_logvar.b,
            ],
            NetId::Generator => vec![
                self.gen_input.w,
                self.gen_input.b,
                self.gen_output.w,
                self.gen_output.b,
            ],
            NetId::Discriminator => vec![
                self.d_input.w,
                self.d_input.b,
                self.d_output.w,
                self.d_output.b,
            ],
            NetId::Discriminator2 => match (&self.d2_input, &self.d2_output) {
                (Some(i), Some(o)) => vec![i.w, i.b, o.w, o.b],
                _ => vec![],
            },
            NetId::Decoder => vec![
                self.dec_input.w,
                self.dec_input.b,
                self.dec_output.w,
                self.dec_output.b,
            ],
            NetId::Feedback => vec![self.f_l1.w, self.f_l1.b, self.f_l2.w, self.f_l2.b],
        }
    }
}

fn encode_graph(g: &mut Graph, v: &ModelVars, xa: Var, slope: f64) -> (Var, Var) {
    let pre = linear_fwd(g, &v.enc_input, xa);
    let h = g.leaky_relu(pre, slope);
    (linear_fwd(g, &v.enc_mu, h), linear_fwd(g, &v.enc_logvar, h))
}

/// Generator forward on the tape; returns (hidden, logits, x_hat).
/// Mirrors `networks::generate_detail` bitwise, including skipping the
/// feedback addition entirely when `delta == 0`.
fn generate_graph(
    g: &mut Graph,
    v: &ModelVars,
    za: Var,
    feedback: Option<Var>,
    delta: f64,
    slope: f64,
) -> (Var, Var, Var) {
    let pre = linear_fwd(g, &v.gen_input, za);
    let mut hidden = g.leaky_relu(pre, slope);
    if let Some(f) = feedback {
        if delta != 0.0 {
            let scaled = g.scale(f, delta);
            hidden = g.add(hidden, scaled);
        }
    }
    let logits = linear_fwd(g, &v.gen_output, hidden);
    let x_hat = g.sigmoid(logits);
    (hidden, logits, x_hat)
}

fn critic_graph(
    g: &mut Graph,
    input_l: &LinearVars,
    output_l: &LinearVars,
    input: Var,
    slope: f64,
) -> (Var, Var) {
    let pre = linear_fwd(g, input_l, input);
    let hidden = g.leaky_relu(pre, slope);
    (hidden, linear_fwd(g, output_l, hidden))
}

fn decode_graph(g: &mut Graph, v: &ModelVars, x: Var, slope: f64) -> (Var, Var) {
    let pre = linear_fwd(g, &v.dec_input, x);
    let h = g.leaky_relu(pre, slope);
    (h, linear_fwd(g, &v.dec_output, h))
}

fn feedback_graph(g: &mut Graph, v: &ModelVars, h: Var, slope: f64) -> Var {
    let pre = linear_fwd(g, &v.f_l1, h);
    let mid = g.leaky_relu(pre, slope);
    let pre2 = linear_fwd(g, &v.f_l2, mid);
    g.leaky_relu(pre2, slope)
}

/// Gradient penalty on the tape via the closed-form critic input
/// gradient `(phi'(u) .* w2^T) W1_x^T`. `phi'(u)` enters as a constant:
/// its derivative is zero almost everywhere for leaky-ReLU, so this is
/// the exact second-order path.
fn gradient_penalty_graph(
    g: &mut Graph,
    input_l: &LinearVars,
    output_l: &LinearVars,
    critic: &CriticParams,
    x_tilde: &Array2<f64>,
    a: Option<&Array2<f64>>,
    slope: f64,
) -> Var {
    let full_input = match a {
        Some(a) => crate::networks::concat_cols(x_tilde, a),
        None => x_tilde.clone(),
    };
    let u = critic.input.forward(&full_input);
    let phi_prime = u.mapv(|v| if v > 0.0 { 1.0 } else { slope });

    let s = g.constant(phi_prime);
    let w2t = g.transpose(output_l.w);
    let t = g.mul_row(s, w2t);
    let w1x = g.slice_rows(input_l.w, 0, x_tilde.ncols());
    let w1xt = g.transpose(w1x);
    let grad = g.matmul(t, w1xt);
    let sq = g.square(grad);
    let norm2 = g.sum_rows(sq);
    let norm = g.sqrt(norm2);
    let dev = g.add_scalar(norm, -1.0);
    let pen = g.square(dev);
    g.mean_all(pen)
}

fn kl_graph(g: &mut Graph, mu: Var, logvar: Var) -> Var {
    let sq = g.square(mu);
    let ex = g.exp(logvar);
    let one_plus = g.add_scalar(logvar, 1.0);
    let t = g.sub(one_plus, sq);
    let t = g.sub(t, ex);
    let rows = g.sum_rows(t);
    let m = g.mean_all(rows);
    g.scale(m, -0.5)
}

fn l1_rows_graph(g: &mut Graph, diff: Var) -> Var {
    let a = g.abs(diff);
    let rows = g.sum_rows(a);
    g.mean_all(rows)
}

/// Build the refined synthesis `x_hat[loops]` on the tape, threading the
/// feedback through Dec (or D) and F.
#[allow(clippy::too_many_arguments)]
fn refined_generate_graph(
    g: &mut Graph,
    v: &ModelVars,
    za: Var,
    a: Var,
    loops: usize,
    config: &ModelConfig,
) -> (Var, Var) {
    let slope = config.leaky_slope;
    let (_, mut logits, mut x_hat) = generate_graph(g, v, za, None, config.delta, slope);
    for _ in 0..loops {
        let h = match config.feedback_source {
            FeedbackSource::Decoder => decode_graph(g, v, x_hat, slope).0,
            FeedbackSource::Discriminator => {
                let xa = g.concat_cols(x_hat, a);
                critic_graph(g, &v.d_input, &v.d_output, xa, slope).0
            }
        };
        let fb = feedback_graph(g, v, h, slope);
        let (_, l, x) = generate_graph(g, v, za, Some(fb), config.delta, slope);
        logits = l;
        x_hat = x;
    }
    (logits, x_hat)
}

/// Plain twin of [`refined_generate_graph`]; also used by the critic
/// step (fakes are detached) and by feature synthesis.
pub(crate) fn refined_generate_plain(
    params: &ModelParams,
    z: &Array2<f64>,
    a: &Array2<f64>,
    loops: usize,
    config: &ModelConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let slope = config.leaky_slope;
    let (_, mut logits, mut x_hat) =
        generate_detail(&params.generator, z, a, None, config.delta, slope)?;
    for _ in 0..loops {
        let h = match config.feedback_source {
            FeedbackSource::Decoder => decode(&params.decoder, &x_hat, slope)?.0,
            FeedbackSource::Discriminator => crate::networks::critic_hidden(
                &params.discriminator,
                &crate::networks::concat_cols(&x_hat, a),
                slope,
            )?,
        };
        let fb = feedback_transform(&params.feedback, &h, slope)?;
        let (_, l, x) = generate_detail(&params.generator, z, a, Some(&fb), config.delta, slope)?;
        logits = l;
        x_hat = x;
    }
    Ok((logits, x_hat))
}

// ---------------------------------------------------------------------------
// Step randomness
// ---------------------------------------------------------------------------

/// Noise consumed by one critic step, drawn up-front so tests can
/// replicate a step from a cloned RNG.
pub struct CriticDraws {
    pub reparam_eps: Array2<f64>,
    pub gp_eps: Array2<f64>,
    pub trans: Option<CriticTransDraws>,
}

pub struct CriticTransDraws {
    pub z_unseen: Array2<f64>,
    pub unseen_attrs: Array2<f64>,
    pub unlabeled_rows: Vec<usize>,
    pub gp_eps: Array2<f64>,
}

impl CriticDraws {
    pub fn sample<R: Rng>(rng: &mut R, batch: usize, ctx: &StepContext) -> Self {
        let d_z = ctx.config.d_z;
        let reparam_eps = sample_normal(rng, batch, d_z);
        let gp_eps = sample_uniform_col(rng, batch);
        let trans = ctx.transductive().then(|| {
            let z_unseen = sample_normal(rng, batch, d_z);
            let picks: Vec<usize> = (0..batch)
                .map(|_| ctx.unseen_classes[rng.random_range(0..ctx.unseen_classes.len())])
                .collect();
            let unseen_attrs = attrs_for_labels(ctx.attributes, &picks);
            let pool = ctx.unlabeled.expect("transductive mode needs unlabeled pool");
            let unlabeled_rows: Vec<usize> =
                (0..batch).map(|_| rng.random_range(0..pool.nrows())).collect();
            let gp_eps = sample_uniform_col(rng, batch);
            CriticTransDraws {
                z_unseen,
                unseen_attrs,
                unlabeled_rows,
                gp_eps,
            }
        });
        CriticDraws {
            reparam_eps,
            gp_eps,
            trans,
        }
    }
}

/// Noise consumed by one generator step.
pub struct GenDraws {
    /// One reparameterization draw per reconstruction sample.
    pub reparam_eps: Vec<Array2<f64>>,
    pub trans: Option<GenTransDraws>,
}

pub struct GenTransDraws {
    pub z_unseen: Array2<f64>,
    pub unseen_attrs: Array2<f64>,
}

impl GenDraws {
    pub fn sample<R: Rng>(rng: &mut R, batch: usize, ctx: &StepContext) -> Self {
        let d_z = ctx.config.d_z;
        let reparam_eps = (0..ctx.config.recon_samples)
            .map(|_| sample_normal(rng, batch, d_z))
            .collect();
        let trans = ctx.transductive().then(|| {
            let z_unseen = sample_normal(rng, batch, d_z);
            let picks: Vec<usize> = (0..batch)
                .map(|_| ctx.unseen_classes[rng.random_range(0..ctx.unseen_classes.len())])
                .collect();
            GenTransDraws {
                z_unseen,
                unseen_attrs: attrs_for_labels(ctx.attributes, &picks),
            }
        });
        GenDraws { reparam_eps, trans }
    }
}

/// Noise consumed by one feedback step.
pub struct FeedbackDraws {
    pub reparam_eps: Array2<f64>,
}

impl FeedbackDraws {
    pub fn sample<R: Rng>(rng: &mut R, batch: usize, ctx: &StepContext) -> Self {
        FeedbackDraws {
            reparam_eps: sample_normal(rng, batch, ctx.config.d_z),
        }
    }
}

// ---------------------------------------------------------------------------
// Objective values (plain route)
// ---------------------------------------------------------------------------

/// Generator-step loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenTerms {
    pub kl: f64,
    pub recon: f64,
    pub adv: f64,
    pub adv2: Option<f64>,
    pub cycle: Option<f64>,
    pub total: f64,
}

/// Evaluate the generator objective without the tape; the independent
/// route used to cross-check the graph and for finite differences.
pub fn generator_terms_plain(
    params: &ModelParams,
    batch: &TrainBatch,
    draws: &GenDraws,
    ctx: &StepContext,
) -> Result<GenTerms> {
    let cfg = ctx.config;
    let slope = cfg.leaky_slope;
    let (mu, logvar) = encode(&params.encoder, &batch.x, &batch.a, slope)?;
    let kl = losses::kl_term(&mu, &logvar)?;

    let mut recon_sum = 0.0;
    let mut final_x_hat = None;
    for eps in &draws.reparam_eps {
        let z = reparameterize(&mu, &logvar, eps);
        let (_, x_hat) = refined_generate_plain(params, &z, &batch.a, ctx.loops, cfg)?;
        recon_sum += losses::reconstruction_term(&x_hat, &batch.x)?;
        if final_x_hat.is_none() {
            final_x_hat = Some(x_hat);
        }
    }
    let recon = recon_sum / draws.reparam_eps.len() as f64;
    let x_hat = final_x_hat.expect("recon_samples >= 1");

    let adv = losses::generator_adv_loss(&params.discriminator, &x_hat, Some(&batch.a), slope)?;
    let cycle = if cfg.beta > 0.0 {
        Some(losses::cycle_loss(
            &params.decoder,
            &batch.x,
            &x_hat,
            &batch.a,
            slope,
        )?)
    } else {
        None
    };
    let adv2 = match (&draws.trans, &params.discriminator2) {
        (Some(t), Some(d2)) => {
            let (_, x_u) =
                refined_generate_plain(params, &t.z_unseen, &t.unseen_attrs, ctx.loops, cfg)?;
            Some(losses::generator_adv_loss(d2, &x_u, None, slope)?)
        }
        _ => None,
    };

    let mut total = losses::total_vae_gan(kl, recon, adv, cfg.alpha);
    if let Some(c) = cycle {
        total = losses::total_with_cycle(total, c, cfg.beta);
    }
    if let Some(a2) = adv2 {
        total += cfg.alpha * cfg.d2_weight * a2;
    }
    Ok(GenTerms {
        kl,
        recon,
        adv,
        adv2,
        cycle,
        total,
    })
}

/// Critic-step loss terms (one critic).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticTerms {
    pub wasserstein: f64,
    pub gp: f64,
    pub total: f64,
}

/// Plain critic objective on given real/fake batches and interpolation
/// draws.
pub fn critic_terms_plain(
    critic: &CriticParams,
    x: &Array2<f64>,
    x_hat: &Array2<f64>,
    a: Option<&Array2<f64>>,
    gp_eps: &Array2<f64>,
    lambda_gp: f64,
    slope: f64,
) -> Result<CriticTerms> {
    let draw = losses::InterpolationDraw::at(gp_eps.clone(), x, x_hat);
    let gp = losses::gradient_penalty_at(critic, &draw, a, slope)?;
    let real = match a {
        Some(a) => discriminate(critic, x, a, slope)?,
        None => discriminate_unconditional(critic, x, slope)?,
    };
    let fake = match a {
        Some(a) => discriminate(critic, x_hat, a, slope)?,
        None => discriminate_unconditional(critic, x_hat, slope)?,
    };
    let wasserstein = fake.mean().unwrap() - real.mean().unwrap();
    Ok(CriticTerms {
        wasserstein,
        gp,
        total: wasserstein + lambda_gp * gp,
    })
}

/// Feedback-step loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackTerms {
    pub adv: f64,
    pub cycle: f64,
    pub total: f64,
}

/// Plain feedback objective: adversarial + cycle terms on the refined
/// synthesis, with `z` reparameterized from the (frozen) encoder.
pub fn feedback_terms_plain(
    params: &ModelParams,
    batch: &TrainBatch,
    draws: &FeedbackDraws,
    ctx: &StepContext,
) -> Result<FeedbackTerms> {
    let cfg = ctx.config;
    let slope = cfg.leaky_slope;
    let (mu, logvar) = encode(&params.encoder, &batch.x, &batch.a, slope)?;
    let z = reparameterize(&mu, &logvar, &draws.reparam_eps);
    let (_, x_hat) = refined_generate_plain(params, &z, &batch.a, ctx.loops, cfg)?;
    let adv = losses::generator_adv_loss(&params.discriminator, &x_hat, Some(&batch.a), slope)?;
    let cycle = losses::cycle_loss(&params.decoder, &batch.x, &x_hat, &batch.a, slope)?;
    Ok(FeedbackTerms {
        adv,
        cycle,
        total: cfg.alpha * adv + cfg.beta * cycle,
    })
}

// ---------------------------------------------------------------------------
// Graph objectives
// ---------------------------------------------------------------------------

struct GenGraphTerms {
    total: Var,
    kl: Var,
    recon: Var,
    adv: Var,
    adv2: Option<Var>,
    cycle: Option<Var>,
}

fn generator_objective_graph(
    g: &mut Graph,
    v: &ModelVars,
    batch: &TrainBatch,
    draws: &GenDraws,
    ctx: &StepContext,
) -> GenGraphTerms {
    let cfg = ctx.config;
    let slope = cfg.leaky_slope;
    let x = g.constant(batch.x.clone());
    let a = g.constant(batch.a.clone());
    let xa = g.concat_cols(x, a);
    let (mu, logvar) = encode_graph(g, v, xa, slope);
    let kl = kl_graph(g, mu, logvar);

    let mut recon_parts = Vec::new();
    let mut final_x_hat = None;
    for eps in &draws.reparam_eps {
        let eps = g.constant(eps.clone());
        let half = g.scale(logvar, 0.5);
        let sd = g.exp(half);
        let noise = g.mul(sd, eps);
        let z = g.add(mu, noise);
        let za = g.concat_cols(z, a);
        let (logits, x_hat) = refined_generate_graph(g, v, za, a, ctx.loops, cfg);
        recon_parts.push(g.bce_from_logits(logits, x));
        if final_x_hat.is_none() {
            final_x_hat = Some(x_hat);
        }
    }
    let mut recon = recon_parts[0];
    for part in &recon_parts[1..] {
        recon = g.add(recon, *part);
    }
    if recon_parts.len() > 1 {
        recon = g.scale(recon, 1.0 / recon_parts.len() as f64);
    }
    let x_hat = final_x_hat.expect("recon_samples >= 1");

    let xa_fake = g.concat_cols(x_hat, a);
    let (_, fake_scores) = critic_graph(g, &v.d_input, &v.d_output, xa_fake, slope);
    let mean_fake = g.mean_all(fake_scores);
    let adv = g.neg(mean_fake);

    let cycle = (cfg.beta > 0.0).then(|| {
        let (_, a_hat_real) = decode_graph(g, v, x, slope);
        let diff_real = g.sub(a_hat_real, a);
        let term_real = l1_rows_graph(g, diff_real);
        let (_, a_hat_fake) = decode_graph(g, v, x_hat, slope);
        let diff_fake = g.sub(a_hat_fake, a);
        let term_fake = l1_rows_graph(g, diff_fake);
        g.add(term_real, term_fake)
    });

    let adv2 = draws.trans.as_ref().map(|t| {
        let z_u = g.constant(t.z_unseen.clone());
        let a_u = g.constant(t.unseen_attrs.clone());
        let za_u = g.concat_cols(z_u, a_u);
        let (_, x_u) = refined_generate_graph(g, v, za_u, a_u, ctx.loops, cfg);
        let (d2i, d2o) = (
            v.d2_input.as_ref().expect("transductive D2"),
            v.d2_output.as_ref().expect("transductive D2"),
        );
        let (_, scores) = critic_graph(g, d2i, d2o, x_u, slope);
        let mean = g.mean_all(scores);
        g.neg(mean)
    });

    let vae = g.add(kl, recon);
    let weighted_adv = g.scale(adv, cfg.alpha);
    let mut total = g.add(vae, weighted_adv);
    if let Some(c) = cycle {
        let wc = g.scale(c, cfg.beta);
        total = g.add(total, wc);
    }
    if let Some(a2) = adv2 {
        let wa2 = g.scale(a2, cfg.alpha * cfg.d2_weight);
        total = g.add(total, wa2);
    }
    GenGraphTerms {
        total,
        kl,
        recon,
        adv,
        adv2,
        cycle,
    }
}

fn critic_objective_graph(
    g: &mut Graph,
    input_l: &LinearVars,
    output_l: &LinearVars,
    critic: &CriticParams,
    x: &Array2<f64>,
    x_hat: &Array2<f64>,
    a: Option<&Array2<f64>>,
    gp_eps: &Array2<f64>,
    lambda_gp: f64,
    slope: f64,
) -> (Var, Var) {
    let draw = losses::InterpolationDraw::at(gp_eps.clone(), x, x_hat);
    let gp = gradient_penalty_graph(g, input_l, output_l, critic, &draw.x_tilde, a, slope);

    let real_input = match a {
        Some(a) => crate::networks::concat_cols(x, a),
        None => x.clone(),
    };
    let fake_input = match a {
        Some(a) => crate::networks::concat_cols(x_hat, a),
        None => x_hat.clone(),
    };
    let real_in = g.constant(real_input);
    let fake_in = g.constant(fake_input);
    let (_, real_scores) = critic_graph(g, input_l, output_l, real_in, slope);
    let (_, fake_scores) = critic_graph(g, input_l, output_l, fake_in, slope);
    let mean_real = g.mean_all(real_scores);
    let mean_fake = g.mean_all(fake_scores);
    let w = g.sub(mean_fake, mean_real);
    let wgp = g.scale(gp, lambda_gp);
    (g.add(w, wgp), gp)
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

fn check_finite(term: &str, value: f64, iteration: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric {
            term: term.into(),
            iteration,
        })
    }
}

fn extract_grads(grads: &Gradients, vars: &[Var], params: &[&Array2<f64>]) -> Vec<Array2<f64>> {
    vars.iter()
        .zip(params)
        .map(|(v, p)| match grads.get(*v) {
            Some(gr) => gr.clone(),
            None => Array2::zeros(p.dim()),
        })
        .collect()
}

fn adam_update(
    state: &mut TrainState,
    grads_by_net: Vec<(NetId, Vec<Array2<f64>>)>,
    lr: f64,
    b1: f64,
    b2: f64,
) {
    for (net, grads) in grads_by_net {
        let opt = match net {
            NetId::Encoder => &mut state.opt.encoder,
            NetId::Generator => &mut state.opt.generator,
            NetId::Discriminator => &mut state.opt.discriminator,
            NetId::Discriminator2 => state
                .opt
                .discriminator2
                .as_mut()
                .expect("D2 optimizer missing"),
            NetId::Decoder => &mut state.opt.decoder,
            NetId::Feedback => &mut state.opt.feedback,
        };
        // split borrow: optimizer state and parameter tensors are disjoint
        let opt_ptr: *mut Adam = opt;
        let tensors = state.params.net_tensors_mut(net);
        unsafe { (*opt_ptr).step(tensors, &grads, lr, b1, b2) };
    }
}

/// One critic update on real vs synthesized features (feedback applied
/// exactly as in the generator step, so D sees the same distribution);
/// in transductive mode additionally one update of the unconditional
/// critic on (unlabeled real, synthesized unseen).
pub fn critic_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    ctx: &StepContext,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Input("critic_step: empty batch".into()));
    }
    let cfg = ctx.config;
    let slope = cfg.leaky_slope;
    let draws = CriticDraws::sample(&mut state.rng, batch.len(), ctx);

    // synthesize fakes with the current generator, detached
    let (mu, logvar) = encode(&state.params.encoder, &batch.x, &batch.a, slope)?;
    let z = reparameterize(&mu, &logvar, &draws.reparam_eps);
    let (_, x_hat) = refined_generate_plain(&state.params, &z, &batch.a, ctx.loops, cfg)?;

    let mut g = Graph::new();
    let vars = register_model(
        &mut g,
        &state.params,
        GradSet {
            discriminator: true,
            ..Default::default()
        },
    );
    let (loss, gp) = critic_objective_graph(
        &mut g,
        &vars.d_input,
        &vars.d_output,
        &state.params.discriminator,
        &batch.x,
        &x_hat,
        Some(&batch.a),
        &draws.gp_eps,
        cfg.lambda_gp,
        slope,
    );
    let loss_val = check_finite("d_loss", g.scalar(loss), state.iteration)?;
    let gp_val = g.scalar(gp);
    let grads = g.backward(loss);
    let d_vars = vars.net_vars(NetId::Discriminator);
    let d_params = state.params.net_tensors(NetId::Discriminator);
    let d_grads = extract_grads(&grads, &d_vars, &d_params);
    adam_update(
        state,
        vec![(NetId::Discriminator, d_grads)],
        cfg.lr,
        cfg.adam_beta1,
        cfg.adam_beta2,
    );

    let (mut d2_loss, mut d2_gp) = (None, None);
    if let Some(t) = &draws.trans {
        let pool = ctx.unlabeled.expect("transductive mode needs unlabeled pool");
        let x_real = gather_rows(pool, &t.unlabeled_rows);
        let (_, x_u) =
            refined_generate_plain(&state.params, &t.z_unseen, &t.unseen_attrs, ctx.loops, cfg)?;
        let d2 = state
            .params
            .discriminator2
            .as_ref()
            .ok_or_else(|| Error::State("transductive mode without D2 parameters".into()))?
            .clone();
        let mut g2 = Graph::new();
        let vars2 = register_model(
            &mut g2,
            &state.params,
            GradSet {
                discriminator2: true,
                ..Default::default()
            },
        );
        let (d2i, d2o) = (
            vars2.d2_input.as_ref().unwrap(),
            vars2.d2_output.as_ref().unwrap(),
        );
        let (loss2, gp2) = critic_objective_graph(
            &mut g2,
            d2i,
            d2o,
            &d2,
            &x_real,
            &x_u,
            None,
            &t.gp_eps,
            cfg.lambda_gp,
            slope,
        );
        let loss2_val = check_finite("d2_loss", g2.scalar(loss2), state.iteration)?;
        let gp2_val = g2.scalar(gp2);
        let grads2 = g2.backward(loss2);
        let d2_vars = vars2.net_vars(NetId::Discriminator2);
        let d2_params = state.params.net_tensors(NetId::Discriminator2);
        let d2_grads = extract_grads(&grads2, &d2_vars, &d2_params);
        adam_update(
            state,
            vec![(NetId::Discriminator2, d2_grads)],
            cfg.lr,
            cfg.adam_beta1,
            cfg.adam_beta2,
        );
        d2_loss = Some(loss2_val);
        d2_gp = Some(gp2_val);
    }

    let record = StepRecord::Critic {
        iteration: state.iteration,
        epoch: state.epoch,
        phase: ctx.phase,
        loss: loss_val,
        gp: gp_val,
        d2_loss,
        d2_gp,
    };
    state.history.push(record.clone());
    Ok(record)
}

/// One joint update of E and G on the total objective, with the
/// feedback refinement loop unrolled inside the step (F and Dec frozen
/// unless `dec_in_generator_step` is set).
pub fn generator_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    ctx: &StepContext,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Input("generator_step: empty batch".into()));
    }
    let cfg = ctx.config;
    let draws = GenDraws::sample(&mut state.rng, batch.len(), ctx);

    let update_dec = cfg.dec_in_generator_step && cfg.beta > 0.0;
    let mut g = Graph::new();
    let vars = register_model(
        &mut g,
        &state.params,
        GradSet {
            encoder: true,
            generator: true,
            decoder: update_dec,
            ..Default::default()
        },
    );
    let terms = generator_objective_graph(&mut g, &vars, batch, &draws, ctx);

    let total = check_finite("g_total", g.scalar(terms.total), state.iteration)?;
    let kl = check_finite("g_kl", g.scalar(terms.kl), state.iteration)?;
    let recon = check_finite("g_recon", g.scalar(terms.recon), state.iteration)?;
    let adv = check_finite("g_adv", g.scalar(terms.adv), state.iteration)?;
    let cycle = terms.cycle.map(|c| g.scalar(c));
    let adv2 = terms.adv2.map(|a| g.scalar(a));
    if let Some(c) = cycle {
        check_finite("g_cycle", c, state.iteration)?;
    }
    if let Some(a2) = adv2 {
        check_finite("g_adv2", a2, state.iteration)?;
    }

    let grads = g.backward(terms.total);
    let mut updates = Vec::new();
    for net in [NetId::Encoder, NetId::Generator] {
        let net_vars = vars.net_vars(net);
        let net_params = state.params.net_tensors(net);
        updates.push((net, extract_grads(&grads, &net_vars, &net_params)));
    }
    if update_dec {
        let net_vars = vars.net_vars(NetId::Decoder);
        let net_params = state.params.net_tensors(NetId::Decoder);
        updates.push((
            NetId::Decoder,
            extract_grads(&grads, &net_vars, &net_params),
        ));
    }
    adam_update(state, updates, cfg.lr, cfg.adam_beta1, cfg.adam_beta2);

    let record = StepRecord::Generator {
        iteration: state.iteration,
        epoch: state.epoch,
        phase: ctx.phase,
        total,
        kl,
        recon,
        adv,
        adv2,
        cycle,
    };
    state.history.push(record.clone());
    Ok(record)
}

/// One update of F (and, in the alternating strategy, Dec) with G
/// frozen: first sub-iteration synthesizes `x_hat[0]`, the following
/// sub-iterations refine through F, and the Dec/adversarial terms are
/// evaluated on the final synthesis. With `ctx.loops == 0` this
/// degenerates to a decoder-only step on the cycle loss.
pub fn feedback_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    ctx: &StepContext,
    update_dec: bool,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Input("feedback_step: empty batch".into()));
    }
    let cfg = ctx.config;
    let slope = cfg.leaky_slope;
    let draws = FeedbackDraws::sample(&mut state.rng, batch.len(), ctx);

    // z from the frozen encoder's posterior
    let (mu, logvar) = encode(&state.params.encoder, &batch.x, &batch.a, slope)?;
    let z = reparameterize(&mu, &logvar, &draws.reparam_eps);

    let mut g = Graph::new();
    let vars = register_model(
        &mut g,
        &state.params,
        GradSet {
            feedback: ctx.loops > 0,
            decoder: update_dec,
            ..Default::default()
        },
    );
    let zc = g.constant(z);
    let ac = g.constant(batch.a.clone());
    let xc = g.constant(batch.x.clone());
    let za = g.concat_cols(zc, ac);
    let (_, x_hat) = refined_generate_graph(&mut g, &vars, za, ac, ctx.loops, cfg);

    let xa_fake = g.concat_cols(x_hat, ac);
    let (_, fake_scores) = critic_graph(&mut g, &vars.d_input, &vars.d_output, xa_fake, slope);
    let mean_fake = g.mean_all(fake_scores);
    let adv = g.neg(mean_fake);

    let (_, a_hat_real) = decode_graph(&mut g, &vars, xc, slope);
    let diff_real = g.sub(a_hat_real, ac);
    let term_real = l1_rows_graph(&mut g, diff_real);
    let (_, a_hat_fake) = decode_graph(&mut g, &vars, x_hat, slope);
    let diff_fake = g.sub(a_hat_fake, ac);
    let term_fake = l1_rows_graph(&mut g, diff_fake);
    let cycle = g.add(term_real, term_fake);

    let wadv = g.scale(adv, cfg.alpha);
    let wcycle = g.scale(cycle, cfg.beta);
    let total = g.add(wadv, wcycle);

    let total_val = check_finite("f_loss", g.scalar(total), state.iteration)?;
    let adv_val = g.scalar(adv);
    let cycle_val = g.scalar(cycle);

    let grads = g.backward(total);
    let mut updates = Vec::new();
    if ctx.loops > 0 {
        let net_vars = vars.net_vars(NetId::Feedback);
        let net_params = state.params.net_tensors(NetId::Feedback);
        updates.push((
            NetId::Feedback,
            extract_grads(&grads, &net_vars, &net_params),
        ));
    }
    if update_dec {
        let net_vars = vars.net_vars(NetId::Decoder);
        let net_params = state.params.net_tensors(NetId::Decoder);
        updates.push((
            NetId::Decoder,
            extract_grads(&grads, &net_vars, &net_params),
        ));
    }
    adam_update(state, updates, cfg.lr, cfg.adam_beta1, cfg.adam_beta2);

    let record = StepRecord::Feedback {
        iteration: state.iteration,
        epoch: state.epoch,
        phase: ctx.phase,
        loss: total_val,
        adv: adv_val,
        cycle: cycle_val,
    };
    state.history.push(record.clone());
    Ok(record)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub scaler: FeatureScaler,
}

struct PhasePlan {
    phase: u8,
    epochs: usize,
    loops: usize,
    train_generator: bool,
    train_feedback: bool,
    update_dec: bool,
}

fn phase_plan(config: &ModelConfig) -> Vec<PhasePlan> {
    match config.strategy {
        Strategy::Alternating => vec![PhasePlan {
            phase: 1,
            epochs: config.epochs,
            loops: config.feedback_loops,
            train_generator: true,
            train_feedback: config.feedback_loops > 0 || config.beta > 0.0,
            update_dec: config.beta > 0.0,
        }],
        Strategy::TwoStage => vec![
            PhasePlan {
                phase: 1,
                epochs: config.epochs,
                loops: 0,
                train_generator: true,
                train_feedback: config.beta > 0.0,
                update_dec: config.beta > 0.0,
            },
            PhasePlan {
                phase: 2,
                epochs: config.epochs,
                loops: config.feedback_loops.max(1),
                train_generator: false,
                train_feedback: true,
                update_dec: false,
            },
        ],
    }
}

/// Run the full schedule and return the trained state plus the feature
/// scaler fitted on seen training data.
pub fn train<D: TrainData>(data: &D, config: &ModelConfig) -> Result<TrainOutput> {
    train_with(data, config, &mut |_| {})
}

/// As [`train`], additionally streaming every step record to `sink`.
pub fn train_with<D: TrainData>(
    data: &D,
    config: &ModelConfig,
    sink: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutput> {
    config.validate()?;
    if data.d_x() != config.d_x || data.d_a() != config.d_a {
        return Err(Error::Config(format!(
            "config dims ({}, {}) do not match data dims ({}, {})",
            config.d_x,
            config.d_a,
            data.d_x(),
            data.d_a()
        )));
    }

    let train_raw = data.split_features(SplitKind::TrainSeen);
    if train_raw.nrows() == 0 {
        return Err(Error::Input("training requires a non-empty train_seen split".into()));
    }
    let scaler = match config.scaling {
        ScalingKind::Minmax => {
            let min = train_raw.fold_axis(ndarray::Axis(0), f32::INFINITY, |acc, &v| acc.min(v));
            let max =
                train_raw.fold_axis(ndarray::Axis(0), f32::NEG_INFINITY, |acc, &v| acc.max(v));
            FeatureScaler { min, max }
        }
        ScalingKind::None => FeatureScaler::identity(config.d_x),
    };
    let train_x = apply_scaler(&scaler, train_raw.view()).mapv(f64::from);
    let train_labels = data.split_labels(SplitKind::TrainSeen);
    let attributes = data.attributes().mapv(f64::from);
    let unseen_classes = data.unseen_classes();

    let unlabeled: Option<Array2<f64>> = match config.mode {
        Mode::Transductive => {
            let pool = data.split_features(SplitKind::TestUnseen);
            if pool.nrows() == 0 {
                return Err(Error::Input(
                    "transductive mode requires unlabeled test features".into(),
                ));
            }
            Some(apply_scaler(&scaler, pool.view()).mapv(f64::from))
        }
        Mode::Inductive => None,
    };

    let mut state = TrainState::init(config);
    let n = train_x.nrows();

    for plan in phase_plan(config) {
        let ctx = StepContext {
            config,
            attributes: &attributes,
            unseen_classes: &unseen_classes,
            unlabeled: unlabeled.as_ref(),
            loops: plan.loops,
            phase: plan.phase,
        };
        for _ in 0..plan.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut state.rng);
            for chunk in order.chunks(config.batch_size) {
                let batch = TrainBatch {
                    x: gather_rows(&train_x, chunk),
                    a: attrs_for_labels(
                        &attributes,
                        &chunk.iter().map(|&i| train_labels[i]).collect::<Vec<_>>(),
                    ),
                };
                let before = state.history.len();
                for _ in 0..config.n_critic {
                    // the critic trains on fresh uniform batches so it
                    // sees more of the data distribution per iteration
                    let rows: Vec<usize> = (0..chunk.len())
                        .map(|_| state.rng.random_range(0..n))
                        .collect();
                    let critic_batch = TrainBatch {
                        x: gather_rows(&train_x, &rows),
                        a: attrs_for_labels(
                            &attributes,
                            &rows.iter().map(|&i| train_labels[i]).collect::<Vec<_>>(),
                        ),
                    };
                    critic_step(&mut state, &critic_batch, &ctx)?;
                }
                if plan.train_generator {
                    generator_step(&mut state, &batch, &ctx)?;
                }
                if plan.train_feedback {
                    feedback_step(&mut state, &batch, &ctx, plan.update_dec)?;
                }
                for record in &state.history[before..] {
                    sink(record);
                }
                state.iteration += 1;
            }
            state.epoch += 1;
        }
    }

    Ok(TrainOutput { state, scaler })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use approx::assert_abs_diff_eq;

    fn small_setup(mode: Mode) -> (crate::data::ZslDataset, ModelConfig) {
        let (ds, _) = make_synthetic(11, 4, 2, 4, 8, 12, 0.2).unwrap();
        let mut cfg = ModelConfig::new(8, 4);
        cfg.hidden = 6;
        cfg.batch_size = 8;
        cfg.epochs = 2;
        cfg.n_critic = 2;
        cfg.mode = mode;
        cfg.seed = 5;
        (ds, cfg)
    }

    fn context<'a>(
        cfg: &'a ModelConfig,
        attributes: &'a Array2<f64>,
        unseen: &'a [usize],
        unlabeled: Option<&'a Array2<f64>>,
    ) -> StepContext<'a> {
        StepContext {
            config: cfg,
            attributes,
            unseen_classes: unseen,
            unlabeled,
            loops: cfg.feedback_loops,
            phase: 1,
        }
    }

    fn batch_from(ds: &crate::data::ZslDataset, cfg: &ModelConfig, n: usize) -> TrainBatch {
        let scaler = crate::data::fit_scaler(ds).unwrap();
        let x = apply_scaler(&scaler, ds.split_features(SplitKind::TrainSeen).view())
            .mapv(f64::from);
        let labels = ds.split_labels(SplitKind::TrainSeen);
        let attrs = ds.attributes.mapv(f64::from);
        let idx: Vec<usize> = (0..n).collect();
        let _ = cfg;
        TrainBatch {
            x: gather_rows(&x, &idx),
            a: attrs_for_labels(&attrs, &labels[..n].to_vec()),
        }
    }

    #[test]
    fn epochs_zero_returns_initial_state() {
        let (ds, mut cfg) = small_setup(Mode::Inductive);
        cfg.epochs = 0;
        let out = train(&ds, &cfg).unwrap();
        assert!(out.state.history.is_empty());
        assert_eq!(out.state.iteration, 0);
        let fresh = TrainState::init(&cfg);
        assert_eq!(out.state.params, fresh.params);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_traces_and_params() {
        let (ds, cfg) = small_setup(Mode::Inductive);
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.state.history, b.state.history);
        assert_eq!(a.state.params, b.state.params);
    }

    #[test]
    fn inductive_critic_step_leaves_d2_untouched_and_counts_traces() {
        let (ds, cfg) = small_setup(Mode::Inductive);
        let attrs = ds.attributes.mapv(f64::from);
        let unseen = ds.unseen_classes.clone();
        let ctx = context(&cfg, &attrs, &unseen, None);
        let mut state = TrainState::init(&cfg);
        assert!(state.params.discriminator2.is_none());
        let batch = batch_from(&ds, &cfg, 6);
        critic_step(&mut state, &batch, &ctx).unwrap();
        critic_step(&mut state, &batch, &ctx).unwrap();
        let critic_records = state
            .history
            .iter()
            .filter(|r| matches!(r, StepRecord::Critic { .. }))
            .count();
        assert_eq!(critic_records, 2, "one D entry per critic_step call");
        assert!(state.params.discriminator2.is_none());
    }

    #[test]
    fn step_freeze_contracts() {
        let (ds, mut cfg) = small_setup(Mode::Transductive);
        cfg.feedback_loops = 1;
        let attrs = ds.attributes.mapv(f64::from);
        let unseen = ds.unseen_classes.clone();
        let scaler = crate::data::fit_scaler(&ds).unwrap();
        let pool = apply_scaler(&scaler, ds.split_features(SplitKind::TestUnseen).view())
            .mapv(f64::from);
        let ctx = context(&cfg, &attrs, &unseen, Some(&pool));
        let mut state = TrainState::init(&cfg);
        let batch = batch_from(&ds, &cfg, 6);

        let nets = [
            NetId::Encoder,
            NetId::Generator,
            NetId::Discriminator,
            NetId::Discriminator2,
            NetId::Decoder,
            NetId::Feedback,
        ];
        let snapshot = |p: &ModelParams| -> Vec<Vec<Array2<f64>>> {
            nets.iter()
                .map(|&n| p.net_tensors(n).into_iter().cloned().collect())
                .collect()
        };
        let changed = |a: &[Vec<Array2<f64>>], b: &[Vec<Array2<f64>>]| -> Vec<bool> {
            a.iter().zip(b).map(|(x, y)| x != y).collect()
        };

        let before = snapshot(&state.params);
        critic_step(&mut state, &batch, &ctx).unwrap();
        let after = snapshot(&state.params);
        assert_eq!(
            changed(&before, &after),
            vec![false, false, true, true, false, false],
            "critic_step must update exactly D and D2"
        );

        let before = snapshot(&state.params);
        generator_step(&mut state, &batch, &ctx).unwrap();
        let after = snapshot(&state.params);
        assert_eq!(
            changed(&before, &after),
            vec![true, true, false, false, false, false],
            "generator_step must update exactly E and G"
        );

        let before = snapshot(&state.params);
        feedback_step(&mut state, &batch, &ctx, true).unwrap();
        let after = snapshot(&state.params);
        assert_eq!(
            changed(&before, &after),
            vec![false, false, false, false, true, true],
            "feedback_step must update exactly F and Dec"
        );

        // two-stage phase 2 variant: Dec stays frozen
        let before = snapshot(&state.params);
        feedback_step(&mut state, &batch, &ctx, false).unwrap();
        let after = snapshot(&state.params);
        assert_eq!(
            changed(&before, &after),
            vec![false, false, false, false, false, true],
            "feedback_step without Dec must update exactly F"
        );
    }

    #[test]
    fn generator_objective_graph_matches_plain_and_hand_composition() {
        for mode in [Mode::Inductive, Mode::Transductive] {
            let (ds, mut cfg) = small_setup(mode);
            cfg.feedback_loops = 1;
            cfg.recon_samples = 2;
            let attrs = ds.attributes.mapv(f64::from);
            let unseen = ds.unseen_classes.clone();
            let scaler = crate::data::fit_scaler(&ds).unwrap();
            let pool = apply_scaler(&scaler, ds.split_features(SplitKind::TestUnseen).view())
                .mapv(f64::from);
            let pool_opt = (mode == Mode::Transductive).then_some(&pool);
            let ctx = context(&cfg, &attrs, &unseen, pool_opt);
            let state = TrainState::init(&cfg);
            let batch = batch_from(&ds, &cfg, 6);

            let mut rng = state.rng.clone();
            let draws = GenDraws::sample(&mut rng, batch.len(), &ctx);

            let plain = generator_terms_plain(&state.params, &batch, &draws, &ctx).unwrap();

            let mut g = Graph::new();
            let vars = register_model(
                &mut g,
                &state.params,
                GradSet {
                    encoder: true,
                    generator: true,
                    ..Default::default()
                },
            );
            let graph_terms = generator_objective_graph(&mut g, &vars, &batch, &draws, &ctx);
            assert_abs_diff_eq!(g.scalar(graph_terms.kl), plain.kl, epsilon = 1e-10);
            assert_abs_diff_eq!(g.scalar(graph_terms.recon), plain.recon, epsilon = 1e-10);
            assert_abs_diff_eq!(g.scalar(graph_terms.adv), plain.adv, epsilon = 1e-10);
            if let (Some(c), Some(cp)) = (graph_terms.cycle, plain.cycle) {
                assert_abs_diff_eq!(g.scalar(c), cp, epsilon = 1e-10);
            }
            assert_abs_diff_eq!(g.scalar(graph_terms.total), plain.total, epsilon = 1e-10);

            // hand composition of the loss operations
            let mut hand = crate::losses::total_vae_gan(plain.kl, plain.recon, plain.adv, cfg.alpha);
            if let Some(c) = plain.cycle {
                hand = crate::losses::total_with_cycle(hand, c, cfg.beta);
            }
            if let Some(a2) = plain.adv2 {
                hand += cfg.alpha * cfg.d2_weight * a2;
            }
            assert_abs_diff_eq!(plain.total, hand, epsilon = 1e-12);
        }
    }

    #[test]
    fn baseline_config_never_touches_feedback_or_decoder() {
        let (ds, mut cfg) = small_setup(Mode::Inductive);
        cfg.feedback_loops = 0;
        cfg.beta = 0.0;
        let out = train(&ds, &cfg).unwrap();
        let init = TrainState::init(&cfg);
        assert_eq!(
            out.state.params.feedback, init.params.feedback,
            "baseline must leave F at init"
        );
        assert_eq!(
            out.state.params.decoder, init.params.decoder,
            "baseline must leave Dec at init"
        );
        // and its generator records carry no cycle/adv2 terms
        for r in &out.state.history {
            if let StepRecord::Generator { cycle, adv2, .. } = r {
                assert!(cycle.is_none() && adv2.is_none());
            }
        }
        // no feedback records at all
        assert!(!out
            .state
            .history
            .iter()
            .any(|r| matches!(r, StepRecord::Feedback { .. })));
    }

    #[test]
    fn alternating_schedule_counts() {
        let (ds, cfg) = small_setup(Mode::Inductive);
        let out = train(&ds, &cfg).unwrap();
        let (mut d, mut gen, mut fb) = (0usize, 0usize, 0usize);
        for r in &out.state.history {
            match r {
                StepRecord::Critic { .. } => d += 1,
                StepRecord::Generator { .. } => gen += 1,
                StepRecord::Feedback { .. } => fb += 1,
            }
        }
        assert_eq!(d, cfg.n_critic * gen, "#critic = n_critic x #generator");
        assert_eq!(gen, fb, "alternating: one feedback step per generator step");
        assert_eq!(gen as u64, out.state.iteration);
        // batches per epoch: ceil(40 / 8) = 5, two epochs
        assert_eq!(gen, 10);
    }

    #[test]
    fn two_stage_has_two_phases_and_frozen_g_in_phase_two() {
        let (ds, mut cfg) = small_setup(Mode::Inductive);
        cfg.strategy = Strategy::TwoStage;
        cfg.epochs = 1;
        let out = train(&ds, &cfg).unwrap();
        let phases: std::collections::BTreeSet<u8> = out
            .state
            .history
            .iter()
            .map(|r| match r {
                StepRecord::Critic { phase, .. }
                | StepRecord::Generator { phase, .. }
                | StepRecord::Feedback { phase, .. } => *phase,
            })
            .collect();
        assert_eq!(phases.into_iter().collect::<Vec<_>>(), vec![1, 2]);
        // no generator updates in phase 2
        assert!(!out.state.history.iter().any(|r| matches!(
            r,
            StepRecord::Generator { phase: 2, .. }
        )));
        // but feedback updates happen there
        assert!(out.state.history.iter().any(|r| matches!(
            r,
            StepRecord::Feedback { phase: 2, .. }
        )));
    }

    #[test]
    fn nan_abort_names_term_and_iteration() {
        let (ds, mut cfg) = small_setup(Mode::Inductive);
        cfg.lr = 1e18; // force divergence
        cfg.epochs = 3;
        let err = train(&ds, &cfg).unwrap_err();
        match err {
            Error::Numeric { term, .. } => {
                assert!(!term.is_empty());
            }
            other => panic!("expected numeric abort, got {other}"),
        }
    }

    #[test]
    fn transductive_training_runs_and_updates_d2() {
        let (ds, mut cfg) = small_setup(Mode::Transductive);
        cfg.epochs = 1;
        let out = train(&ds, &cfg).unwrap();
        let init = TrainState::init(&cfg);
        assert_ne!(
            out.state.params.discriminator2, init.params.discriminator2,
            "transductive training must move D2"
        );
        assert!(out.state.history.iter().any(|r| matches!(
            r,
            StepRecord::Critic { d2_loss: Some(_), .. }
        )));
        assert!(out.state.history.iter().any(|r| matches!(
            r,
            StepRecord::Generator { adv2: Some(_), .. }
        )));
    }

    #[test]
    fn feedback_source_discriminator_changes_refinement() {
        let (ds, mut cfg) = small_setup(Mode::Inductive);
        cfg.feedback_loops = 1;
        let state = TrainState::init(&cfg);
        let batch = batch_from(&ds, &cfg, 4);
        let z = Array2::from_elem((4, cfg.d_z), 0.3);

        let (_, from_dec) =
            refined_generate_plain(&state.params, &z, &batch.a, 1, &cfg).unwrap();
        let mut cfg_d = cfg.clone();
        cfg_d.feedback_source = FeedbackSource::Discriminator;
        let (_, from_d) =
            refined_generate_plain(&state.params, &z, &batch.a, 1, &cfg_d).unwrap();
        assert_ne!(from_dec, from_d);

        // loops = 0 ignores the source entirely
        let (_, plain_a) = refined_generate_plain(&state.params, &z, &batch.a, 0, &cfg).unwrap();
        let (_, plain_b) =
            refined_generate_plain(&state.params, &z, &batch.a, 0, &cfg_d).unwrap();
        assert_eq!(plain_a, plain_b);
    }
}
