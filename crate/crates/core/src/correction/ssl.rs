//! Semi-supervised objective on mixed batches: cross-entropy against the
//! mean of corrupted softmaxes for `X'`, squared error for `U'`.

use ndarray::{concatenate, Array2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, UlcError};
use crate::network::{sigmoid, ForwardMode, ModelState, Params};
use crate::rng::Rng;
use crate::uncertainty::{corrupted_loss, CorruptedTarget, LogitNoise};

use super::mixmatch::MixedBatch;

/// Settings read by [`ssl_losses`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslSettings {
    pub lambda_u: f64,
    /// Logit corruption draws per sample.
    pub samples: usize,
    /// When false, variances are treated as zero and receive no gradient.
    pub aleatoric: bool,
    pub uniform_prior_reg: f64,
}

#[derive(Debug, Clone)]
pub struct SslLoss {
    pub total: f64,
    pub labeled: f64,
    pub unlabeled: f64,
    pub prior: f64,
    pub grads: Params,
}

/// Draws `samples` corruption patterns per row. The class-pair matrix noise is
/// shared by all rows within a draw; the per-instance noise is not.
pub fn draw_batch_noise(rows: usize, classes: usize, samples: usize, rng: &mut Rng) -> Vec<Vec<LogitNoise>> {
    let shared: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..classes * classes).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    (0..rows)
        .map(|_| {
            shared
                .iter()
                .map(|z| LogitNoise {
                    z: z.clone(),
                    zx: (0..classes).map(|_| StandardNormal.sample(rng)).collect(),
                })
                .collect()
        })
        .collect()
}

/// `l_x + lambda_u * l_u (+ lambda_r * l_reg)` and its gradient for every
/// parameter tensor, including `sigma_raw` and the variance head.
///
/// `noise[i]` holds the draws for row `i` of `X'` followed by `U'`; pass the
/// same draws and `mode` to get a deterministic function of the parameters.
pub fn ssl_losses_with(
    model: &ModelState,
    labeled: &MixedBatch,
    unlabeled: &MixedBatch,
    settings: &SslSettings,
    noise: &[Vec<LogitNoise>],
    mode: ForwardMode<'_>,
) -> Result<SslLoss> {
    let n_x = labeled.len();
    let n_u = unlabeled.len();
    let n = n_x + n_u;
    if n == 0 {
        return Err(UlcError::InsufficientData("empty SSL batch".into()));
    }
    if noise.len() != n {
        return Err(UlcError::Shape(format!("{} noise rows for {n} samples", noise.len())));
    }
    let c = model.classes();
    let x =
        concatenate(Axis(0), &[labeled.x.view(), unlabeled.x.view()]).map_err(|e| UlcError::Shape(e.to_string()))?;
    let rec = model.forward(x.view(), mode)?;
    let sigma = if settings.aleatoric {
        model.sigma()
    } else {
        Array2::zeros((c, c))
    };
    let zero_x = vec![0.0; c];

    let mut d_logits = Array2::zeros((n, c));
    let mut d_sigma_x = Array2::zeros((n, c));
    let mut d_sigma = Array2::zeros((c, c));
    let (mut loss_x, mut loss_u) = (0.0, 0.0);
    for i in 0..n {
        let v = rec.logits.row(i).to_vec();
        let sx = if settings.aleatoric {
            rec.sigma_x.row(i).to_vec()
        } else {
            zero_x.clone()
        };
        let (target, kind, weight) = if i < n_x {
            (labeled.y.row(i), CorruptedTarget::CrossEntropy, 1.0 / n_x as f64)
        } else {
            (
                unlabeled.y.row(i - n_x),
                CorruptedTarget::SquaredError,
                settings.lambda_u / n_u as f64,
            )
        };
        let out = corrupted_loss(
            &v,
            &sigma,
            &sx,
            &noise[i],
            target.as_slice().expect("standard layout"),
            kind,
        );
        if i < n_x {
            loss_x += out.loss / n_x as f64;
        } else {
            loss_u += out.loss / n_u as f64;
        }
        for j in 0..c {
            d_logits[[i, j]] = weight * out.d_logits[j];
            d_sigma_x[[i, j]] = weight * out.d_sigma_x[j];
        }
        d_sigma.scaled_add(weight, &out.d_sigma);
    }

    let mut prior = 0.0;
    if settings.uniform_prior_reg > 0.0 {
        // sum_c pi_c log(pi_c / mean_p_c) with a uniform pi, on uncorrupted predictions
        let probs = rec.probs();
        let mean = probs.mean_axis(Axis(0)).expect("nonempty");
        let pi = 1.0 / c as f64;
        prior = mean.iter().map(|&m| pi * (pi / m).ln()).sum();
        let g: Vec<f64> = mean.iter().map(|&m| -settings.uniform_prior_reg * pi / m).collect();
        for (i, p) in probs.outer_iter().enumerate() {
            let dot: f64 = g.iter().zip(p).map(|(g, p)| g * p).sum();
            for j in 0..c {
                d_logits[[i, j]] += p[j] * (g[j] - dot) / n as f64;
            }
        }
    }

    let total = loss_x + settings.lambda_u * loss_u + settings.uniform_prior_reg * prior;
    if !total.is_finite() {
        return Err(UlcError::Divergence(format!("non-finite SSL loss {total}")));
    }
    let grads = if settings.aleatoric {
        let mut g = model.backward(&rec, &d_logits, Some(&d_sigma_x));
        g.sigma_raw = Zip::from(&d_sigma)
            .and(&model.params.sigma_raw)
            .map_collect(|&d, &raw| d * sigmoid(raw));
        g
    } else {
        model.backward(&rec, &d_logits, None)
    };
    Ok(SslLoss {
        total,
        labeled: loss_x,
        unlabeled: loss_u,
        prior,
        grads,
    })
}

/// [`ssl_losses_with`] with dropout masks and corruption drawn from `rng`.
pub fn ssl_losses(
    model: &ModelState,
    labeled: &MixedBatch,
    unlabeled: &MixedBatch,
    settings: &SslSettings,
    rng: &mut Rng,
) -> Result<SslLoss> {
    let samples = if settings.aleatoric { settings.samples.max(1) } else { 1 };
    let noise = draw_batch_noise(labeled.len() + unlabeled.len(), model.classes(), samples, rng);
    ssl_losses_with(model, labeled, unlabeled, settings, &noise, ForwardMode::Train(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ce_entropy_from_logits, softplus_inv};
    use crate::rng::rng_from;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn batches() -> (MixedBatch, MixedBatch) {
        let xp = MixedBatch {
            x: array![[0.4, -0.2], [1.1, 0.7], [-0.5, 0.3]],
            y: array![[0.8, 0.2], [0.1, 0.9], [0.5, 0.5]],
        };
        let up = MixedBatch {
            x: array![[0.2, 0.9], [-1.0, -0.4]],
            y: array![[0.3, 0.7], [0.9, 0.1]],
        };
        (xp, up)
    }

    fn settings(lambda_u: f64, aleatoric: bool) -> SslSettings {
        SslSettings {
            lambda_u,
            samples: 5,
            aleatoric,
            uniform_prior_reg: 0.0,
        }
    }

    fn model() -> ModelState {
        let mut m = ModelState::new(2, 8, 2, 0.3, 9).unwrap();
        let mut rng = rng_from(2);
        m.params
            .sigma_raw
            .mapv_inplace(|_| softplus_inv(0.05 + 0.3 * rand::Rng::random::<f64>(&mut rng)));
        m.params.bv.mapv_inplace(|_| softplus_inv(0.2));
        m
    }

    #[test]
    fn zero_variance_reduces_to_cross_entropy() {
        let mut m = model();
        m.params.sigma_raw.fill(-60.0);
        m.params.wv.fill(0.0);
        m.params.bv.fill(-60.0);
        let (xp, _) = batches();
        let empty = MixedBatch::empty(2, 2);
        let noise = draw_batch_noise(3, 2, 4, &mut rng_from(1));
        let out = ssl_losses_with(
            &m,
            &xp,
            &empty,
            &settings(25.0, true),
            &noise,
            ForwardMode::Deterministic,
        )
        .unwrap();
        let logits = m.forward(xp.x.view(), ForwardMode::Deterministic).unwrap().logits;
        let (ce, _) = ce_entropy_from_logits(&logits, &xp.y, 0.0);
        assert_abs_diff_eq!(out.total, ce, epsilon = 1e-9);
    }

    #[test]
    fn lambda_zero_drops_unlabeled_term() {
        let m = model();
        let (xp, up) = batches();
        let noise = draw_batch_noise(5, 2, 4, &mut rng_from(1));
        let out = ssl_losses_with(&m, &xp, &up, &settings(0.0, true), &noise, ForwardMode::Deterministic).unwrap();
        assert_eq!(out.total, out.labeled);
        assert!(out.unlabeled > 0.0);
    }

    fn perturbed(m: &ModelState, tensor: usize, k: usize, h: f64) -> ModelState {
        let mut m2 = m.clone();
        m2.params.slices_mut()[tensor][k] += h;
        m2
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model();
        let (xp, up) = batches();
        let s = SslSettings {
            uniform_prior_reg: 0.5,
            ..settings(3.0, true)
        };
        let noise = draw_batch_noise(5, 2, 6, &mut rng_from(7));
        let seed = 42;
        let eval = |m: &ModelState| ssl_losses_with(m, &xp, &up, &s, &noise, ForwardMode::McDropout(seed)).unwrap();
        let analytic = eval(&m).grads;
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (tensor, g) in analytic.slices().iter().enumerate() {
            for k in 0..g.len() {
                let fd =
                    (eval(&perturbed(&m, tensor, k, h)).total - eval(&perturbed(&m, tensor, k, -h)).total) / (2.0 * h);
                let err = (fd - g[k]).abs() / (fd.abs() + g[k].abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-2, "max relative error {worst}");
    }

    #[test]
    fn disabled_aleatoric_leaves_variances_untouched() {
        let m = model();
        let (xp, up) = batches();
        let out = ssl_losses(&m, &xp, &up, &settings(25.0, false), &mut rng_from(3)).unwrap();
        assert!(out.grads.sigma_raw.iter().all(|&g| g == 0.0));
        assert!(out.grads.wv.iter().all(|&g| g == 0.0));
    }
}
