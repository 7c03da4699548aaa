//! Scalar training objectives: VAE terms, WGAN-GP critic and generator
//! terms, embedding cycle-consistency and their weighted compositions.
//!
//! These are the plain (non-differentiable) evaluations used for
//! logging, tests and finite-difference oracles; the training steps
//! rebuild the same math on the autodiff tape and the two routes are
//! cross-checked in tests.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::networks::{
    critic_input_gradient, decode, discriminate, discriminate_unconditional, CriticParams,
    DecoderParams,
};

/// Batch-mean KL divergence of `N(mu, exp(logvar))` against `N(0, 1)`,
/// summed over latent dimensions. Always >= 0.
pub fn kl_term(mu: &Array2<f64>, logvar: &Array2<f64>) -> Result<f64> {
    if mu.dim() != logvar.dim() {
        return Err(Error::Shape(format!(
            "kl_term shapes differ: {:?} vs {:?}",
            mu.dim(),
            logvar.dim()
        )));
    }
    if mu.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("kl_term: non-finite input".into()));
    }
    let per_instance = mu
        .axis_iter(Axis(0))
        .zip(logvar.axis_iter(Axis(0)))
        .map(|(m, lv)| {
            m.iter()
                .zip(lv.iter())
                .map(|(&mi, &li)| -0.5 * (1.0 + li - mi * mi - li.exp()))
                .sum::<f64>()
        })
        .sum::<f64>();
    Ok(per_instance / mu.nrows() as f64)
}

/// Binary cross-entropy summed over feature dimensions, averaged over
/// the batch. Targets must lie in `[0,1]`, reconstructions strictly
/// inside `(0,1)` (the generator's sigmoid guarantees this).
pub fn reconstruction_term(x_hat: &Array2<f64>, x: &Array2<f64>) -> Result<f64> {
    if x_hat.dim() != x.dim() {
        return Err(Error::Shape(format!(
            "reconstruction_term shapes differ: {:?} vs {:?}",
            x_hat.dim(),
            x.dim()
        )));
    }
    if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain(
            "reconstruction_term: target outside [0,1]".into(),
        ));
    }
    if x_hat.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain(
            "reconstruction_term: reconstruction outside (0,1)".into(),
        ));
    }
    let total: f64 = x
        .iter()
        .zip(x_hat.iter())
        .map(|(&t, &p)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
        .sum();
    Ok(total / x.nrows() as f64)
}

/// Per-row uniform draws and the induced interpolates between real and
/// synthesized features.
#[derive(Debug, Clone)]
pub struct InterpolationDraw {
    /// `[B, 1]` uniform(0,1) draw per row.
    pub eps: Array2<f64>,
    /// `eps * x + (1 - eps) * x_hat`, row-wise.
    pub x_tilde: Array2<f64>,
}

impl InterpolationDraw {
    pub fn sample<R: Rng>(rng: &mut R, x: &Array2<f64>, x_hat: &Array2<f64>) -> Self {
        assert_eq!(x.dim(), x_hat.dim(), "interpolation shape mismatch");
        let eps = Array2::from_shape_fn((x.nrows(), 1), |_| rng.random::<f64>());
        Self::at(eps, x, x_hat)
    }

    /// Build the interpolates for given draws (used to share draws
    /// between the plain and tape routes).
    pub fn at(eps: Array2<f64>, x: &Array2<f64>, x_hat: &Array2<f64>) -> Self {
        let x_tilde = x * &eps + &(x_hat * &(1.0 - &eps));
        Self { eps, x_tilde }
    }
}

/// Mean squared deviation of the critic's input-gradient norm from 1 on
/// the given interpolates. The lambda weighting is applied by the caller.
pub fn gradient_penalty_at(
    critic: &CriticParams,
    draw: &InterpolationDraw,
    a: Option<&Array2<f64>>,
    slope: f64,
) -> Result<f64> {
    let grad = critic_input_gradient(critic, &draw.x_tilde, a, slope)?;
    let penalty: f64 = grad
        .axis_iter(Axis(0))
        .map(|row| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm - 1.0) * (norm - 1.0)
        })
        .sum();
    Ok(penalty / grad.nrows() as f64)
}

/// Draw interpolates between `x` and `x_hat` and evaluate the penalty.
pub fn gradient_penalty<R: Rng>(
    critic: &CriticParams,
    x: &Array2<f64>,
    x_hat: &Array2<f64>,
    a: Option<&Array2<f64>>,
    slope: f64,
    rng: &mut R,
) -> Result<f64> {
    let draw = InterpolationDraw::sample(rng, x, x_hat);
    gradient_penalty_at(critic, &draw, a, slope)
}

fn critic_scores(
    critic: &CriticParams,
    x: &Array2<f64>,
    a: Option<&Array2<f64>>,
    slope: f64,
) -> Result<ndarray::Array1<f64>> {
    match a {
        Some(a) => discriminate(critic, x, a, slope),
        None => discriminate_unconditional(critic, x, slope),
    }
}

/// Critic minimization objective:
/// `mean D(x_hat) - mean D(x) + lambda * gradient_penalty`.
pub fn critic_loss_at(
    critic: &CriticParams,
    x: &Array2<f64>,
    x_hat: &Array2<f64>,
    a: Option<&Array2<f64>>,
    lambda_gp: f64,
    draw: &InterpolationDraw,
    slope: f64,
) -> Result<f64> {
    let real = critic_scores(critic, x, a, slope)?;
    let fake = critic_scores(critic, x_hat, a, slope)?;
    let gp = gradient_penalty_at(critic, draw, a, slope)?;
    Ok(fake.mean().unwrap() - real.mean().unwrap() + lambda_gp * gp)
}

pub fn critic_loss<R: Rng>(
    critic: &CriticParams,
    x: &Array2<f64>,
    x_hat: &Array2<f64>,
    a: Option<&Array2<f64>>,
    lambda_gp: f64,
    slope: f64,
    rng: &mut R,
) -> Result<f64> {
    let draw = InterpolationDraw::sample(rng, x, x_hat);
    critic_loss_at(critic, x, x_hat, a, lambda_gp, &draw, slope)
}

/// Generator's adversarial term: `-mean D(x_hat, a)`.
pub fn generator_adv_loss(
    critic: &CriticParams,
    x_hat: &Array2<f64>,
    a: Option<&Array2<f64>>,
    slope: f64,
) -> Result<f64> {
    Ok(-critic_scores(critic, x_hat, a, slope)?.mean().unwrap())
}

fn l1_rows(diff: &Array2<f64>) -> f64 {
    diff.iter().map(|v| v.abs()).sum::<f64>() / diff.nrows() as f64
}

/// Embedding cycle-consistency: `mean ||Dec(x) - a||_1 +
/// mean ||Dec(x_hat) - a||_1` (L1 over attribute dims, mean over batch).
pub fn cycle_loss(
    dec: &DecoderParams,
    x: &Array2<f64>,
    x_hat: &Array2<f64>,
    a: &Array2<f64>,
    slope: f64,
) -> Result<f64> {
    let (_, a_real) = decode(dec, x, slope)?;
    let (_, a_fake) = decode(dec, x_hat, slope)?;
    Ok(l1_rows(&(&a_real - a)) + l1_rows(&(&a_fake - a)))
}

/// `L_vaegan = (kl + recon) + alpha * gen_adv`.
pub fn total_vae_gan(kl: f64, recon: f64, gen_adv: f64, alpha: f64) -> f64 {
    kl + recon + alpha * gen_adv
}

/// `L_total = L_vaegan + beta * cycle`.
pub fn total_with_cycle(vaegan: f64, cycle: f64, beta: f64) -> f64 {
    vaegan + beta * cycle
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{generate, Linear, ModelConfig, ModelParams};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn kl_closed_form_cases() {
        // posterior equals prior
        let zero = Array2::zeros((1, 1));
        assert_abs_diff_eq!(kl_term(&zero, &zero).unwrap(), 0.0);
        // mu=1, logvar=0: -1/2 (1 + 0 - 1 - 1) = 1/2
        assert_abs_diff_eq!(
            kl_term(&array![[1.0]], &array![[0.0]]).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        // mu=0, logvar=ln 4: (4 - ln 4 - 1) / 2
        let expect = (4.0 - 4.0_f64.ln() - 1.0) / 2.0;
        assert_abs_diff_eq!(
            kl_term(&array![[0.0]], &array![[4.0_f64.ln()]]).unwrap(),
            expect,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(expect, 0.8069, epsilon = 5e-5);
    }

    #[test]
    fn kl_rejects_non_finite() {
        assert!(matches!(
            kl_term(&array![[f64::NAN]], &array![[0.0]]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn bce_closed_form_cases() {
        let half = array![[0.5]];
        assert_abs_diff_eq!(
            reconstruction_term(&half, &half).unwrap(),
            2.0_f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            reconstruction_term(&half, &array![[1.0]]).unwrap(),
            2.0_f64.ln(),
            epsilon = 1e-12
        );
        let loss = reconstruction_term(&array![[0.9, 0.2]], &array![[1.0, 0.0]]).unwrap();
        let expect = -(0.9_f64.ln()) - (0.8_f64.ln());
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.3285, epsilon = 5e-5);
    }

    #[test]
    fn bce_domain_errors() {
        assert!(matches!(
            reconstruction_term(&array![[0.5]], &array![[1.5]]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            reconstruction_term(&array![[1.0]], &array![[0.5]]),
            Err(Error::Domain(_))
        ));
    }

    /// Critic acting as D(x) = w . x on `[0,1]` inputs: big first-layer
    /// bias keeps every hidden unit in the linear region.
    fn linear_region_critic(d_x: usize, w: &[f64]) -> CriticParams {
        let hidden = d_x;
        let mut input = Linear {
            w: Array2::eye(d_x),
            b: Array2::from_elem((1, hidden), 10.0),
        };
        input.w = Array2::eye(d_x);
        let mut output = Linear {
            w: Array2::zeros((hidden, 1)),
            b: Array2::from_elem((1, 1), -10.0 * w.iter().sum::<f64>()),
        };
        for (i, &wi) in w.iter().enumerate() {
            output.w[[i, 0]] = wi;
        }
        CriticParams { input, output }
    }

    fn constant_critic(d_x: usize, hidden: usize, c: f64) -> CriticParams {
        CriticParams {
            input: Linear {
                w: Array2::zeros((d_x, hidden)),
                b: Array2::zeros((1, hidden)),
            },
            output: Linear {
                w: Array2::zeros((hidden, 1)),
                b: Array2::from_elem((1, 1), c),
            },
        }
    }

    #[test]
    fn gradient_penalty_unit_norm_linear_critic_is_zero() {
        let critic = linear_region_critic(2, &[1.0, 0.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let x = array![[0.2, 0.8], [0.5, 0.1]];
        let x_hat = array![[0.3, 0.4], [0.6, 0.9]];
        let gp = gradient_penalty(&critic, &x, &x_hat, None, 0.2, &mut rng).unwrap();
        assert_abs_diff_eq!(gp, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_penalty_of_constant_critic_is_one() {
        let critic = constant_critic(3, 4, 7.0);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = Array2::from_elem((4, 3), 0.5);
        let x_hat = Array2::from_elem((4, 3), 0.25);
        let gp = gradient_penalty(&critic, &x, &x_hat, None, 0.2, &mut rng).unwrap();
        assert_abs_diff_eq!(gp, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_interpolation_segment() {
        let x = array![[0.3, 0.7]];
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let draw = InterpolationDraw::sample(&mut rng, &x, &x);
        assert_eq!(draw.x_tilde, x);
    }

    #[test]
    fn interpolates_lie_on_the_segment() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = array![[0.1, 0.9], [0.4, 0.2]];
        let x_hat = array![[0.5, 0.3], [0.8, 0.6]];
        let draw = InterpolationDraw::sample(&mut rng, &x, &x_hat);
        for i in 0..2 {
            for j in 0..2 {
                let (lo, hi) = (
                    x[[i, j]].min(x_hat[[i, j]]),
                    x[[i, j]].max(x_hat[[i, j]]),
                );
                assert!((lo..=hi).contains(&draw.x_tilde[[i, j]]));
            }
        }
    }

    #[test]
    fn critic_loss_cases() {
        // x = x_hat with unit-gradient critic: Wasserstein terms cancel, gp = 0
        let critic = linear_region_critic(2, &[0.6, 0.8]); // norm 1
        let x = array![[0.2, 0.4], [0.9, 0.1]];
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let loss = critic_loss(&critic, &x, &x, None, 10.0, 0.2, &mut rng).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-9);

        // constant critic: terms cancel, penalty = 1 -> lambda
        let critic = constant_critic(2, 3, 5.0);
        let x_hat = array![[0.3, 0.3], [0.5, 0.5]];
        let loss = critic_loss(&critic, &x, &x_hat, None, 10.0, 0.2, &mut rng).unwrap();
        assert_abs_diff_eq!(loss, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn critic_loss_matches_hand_composed_terms() {
        let mut cfg = ModelConfig::new(5, 3);
        cfg.hidden = 4;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let params = ModelParams::init(&cfg, &mut rng);
        let x = Array2::from_shape_fn((6, 5), |_| rng.random::<f64>());
        let x_hat = Array2::from_shape_fn((6, 5), |_| rng.random::<f64>());
        let a = Array2::from_shape_fn((6, 3), |_| rng.random::<f64>());
        let draw = InterpolationDraw::sample(&mut rng, &x, &x_hat);

        let loss = critic_loss_at(
            &params.discriminator,
            &x,
            &x_hat,
            Some(&a),
            10.0,
            &draw,
            0.2,
        )
        .unwrap();

        let real = discriminate(&params.discriminator, &x, &a, 0.2).unwrap();
        let fake = discriminate(&params.discriminator, &x_hat, &a, 0.2).unwrap();
        let gp = gradient_penalty_at(&params.discriminator, &draw, Some(&a), 0.2).unwrap();
        let hand = fake.mean().unwrap() - real.mean().unwrap() + 10.0 * gp;
        assert_abs_diff_eq!(loss, hand, epsilon = 1e-12);
    }

    #[test]
    fn generator_adv_loss_cases() {
        let critic = constant_critic(2, 3, 5.0);
        let x_hat = array![[0.1, 0.2], [0.3, 0.4]];
        assert_abs_diff_eq!(
            generator_adv_loss(&critic, &x_hat, None, 0.2).unwrap(),
            -5.0,
            epsilon = 1e-12
        );

        // doubling the critic's output doubles the loss magnitude
        let critic1 = linear_region_critic(2, &[0.5, 0.25]);
        let critic2 = linear_region_critic(2, &[1.0, 0.5]);
        let l1 = generator_adv_loss(&critic1, &x_hat, None, 0.2).unwrap();
        let l2 = generator_adv_loss(&critic2, &x_hat, None, 0.2).unwrap();
        assert_abs_diff_eq!(l2, 2.0 * l1, epsilon = 1e-9);

        // equals -mean of the discriminate() scores
        let mut cfg = ModelConfig::new(2, 2);
        cfg.hidden = 3;
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let params = ModelParams::init(&cfg, &mut rng);
        let a = array![[0.5, 0.5], [0.1, 0.9]];
        let scores = discriminate(&params.discriminator, &x_hat, &a, 0.2).unwrap();
        assert_abs_diff_eq!(
            generator_adv_loss(&params.discriminator, &x_hat, Some(&a), 0.2).unwrap(),
            -scores.mean().unwrap(),
            epsilon = 1e-12
        );
    }

    /// Decoder acting as the identity on 1-d features (linear region).
    fn identity_decoder() -> DecoderParams {
        DecoderParams {
            input: Linear {
                w: array![[1.0]],
                b: array![[10.0]],
            },
            output: Linear {
                w: array![[1.0]],
                b: array![[-10.0]],
            },
        }
    }

    #[test]
    fn cycle_loss_hand_case() {
        // Dec = identity: Dec(x)=0.5, Dec(x_hat)=0.1, a=0.2 -> 0.3 + 0.1
        let dec = identity_decoder();
        let loss = cycle_loss(&dec, &array![[0.5]], &array![[0.1]], &array![[0.2]], 0.2).unwrap();
        assert_abs_diff_eq!(loss, 0.4, epsilon = 1e-9);

        // exact reconstruction on both terms -> 0
        let loss = cycle_loss(&dec, &array![[0.2]], &array![[0.2]], &array![[0.2]], 0.2).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-9);

        // swapping which argument is "real" just swaps the two summands
        let ab = cycle_loss(&dec, &array![[0.5]], &array![[0.1]], &array![[0.2]], 0.2).unwrap();
        let ba = cycle_loss(&dec, &array![[0.1]], &array![[0.5]], &array![[0.2]], 0.2).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
    }

    #[test]
    fn composite_losses() {
        assert_abs_diff_eq!(
            total_with_cycle(total_vae_gan(1.0, 2.0, 3.0, 10.0), 4.0, 0.01),
            33.04,
            epsilon = 1e-12
        );
        let vaegan = total_vae_gan(0.3, 0.7, -2.0, 10.0);
        assert_abs_diff_eq!(total_with_cycle(vaegan, 5.0, 0.0), vaegan);
        // published defaults compose as stated
        let cfg = ModelConfig::new(8, 4);
        assert_abs_diff_eq!(
            total_with_cycle(total_vae_gan(1.0, 1.0, 1.0, cfg.alpha), 1.0, cfg.beta),
            2.0 + 10.0 + 0.01,
            epsilon = 1e-12
        );
    }

    #[test]
    fn tape_bce_matches_plain_reconstruction_term() {
        let mut cfg = ModelConfig::new(6, 3);
        cfg.hidden = 5;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let params = ModelParams::init(&cfg, &mut rng);
        let z = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() - 0.5);
        let a = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>());
        let x = Array2::from_shape_fn((4, 6), |_| rng.random::<f64>());
        let x_hat = generate(&params.generator, &z, &a, None, 0.0, 0.2).unwrap();
        let plain = reconstruction_term(&x_hat, &x).unwrap();

        let mut g = crate::autodiff::Graph::new();
        let (_, logits, _) =
            crate::networks::generate_detail(&params.generator, &z, &a, None, 0.0, 0.2).unwrap();
        let l = g.constant(logits);
        let t = g.constant(x.clone());
        let loss = g.bce_from_logits(l, t);
        assert_abs_diff_eq!(g.scalar(loss), plain, epsilon = 1e-10);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mu in proptest::collection::vec(-3.0f64..3.0, 1..8),
            lv in proptest::collection::vec(-3.0f64..3.0, 1..8),
        ) {
            let n = mu.len().min(lv.len());
            let mu = Array2::from_shape_vec((1, n), mu[..n].to_vec()).unwrap();
            let lv = Array2::from_shape_vec((1, n), lv[..n].to_vec()).unwrap();
            prop_assert!(kl_term(&mu, &lv).unwrap() >= 0.0);
        }

        #[test]
        fn gradient_penalty_is_nonnegative(seed in 0u64..200) {
            let mut cfg = ModelConfig::new(4, 2);
            cfg.hidden = 3;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let params = ModelParams::init(&cfg, &mut rng);
            let x = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>());
            let x_hat = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>());
            let a = Array2::from_shape_fn((3, 2), |_| rng.random::<f64>());
            let gp = gradient_penalty(&params.discriminator, &x, &x_hat, Some(&a), 0.2, &mut rng).unwrap();
            prop_assert!(gp >= 0.0);
        }

        #[test]
        fn cycle_loss_is_nonnegative(seed in 0u64..200) {
            let mut cfg = ModelConfig::new(4, 2);
            cfg.hidden = 3;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let params = ModelParams::init(&cfg, &mut rng);
            let x = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>());
            let x_hat = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>());
            let a = Array2::from_shape_fn((3, 2), |_| rng.random::<f64>());
            prop_assert!(cycle_loss(&params.decoder, &x, &x_hat, &a, 0.2).unwrap() >= 0.0);
        }
    }
}
