//! Feature-space MixMatch: sharpened pseudo-labels from stochastic forward
//! passes, then mixup over the union of labeled and unlabeled rows.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::error::{Result, UlcError};
use crate::network::{ForwardMode, ModelState};
use crate::rng::Rng;

use super::config::MixMatchConfig;

/// Inputs with soft target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

impl MixedBatch {
    pub fn empty(dim: usize, classes: usize) -> Self {
        MixedBatch {
            x: Array2::zeros((0, dim)),
            y: Array2::zeros((0, classes)),
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Raises each entry to `1 / temperature` and renormalizes rows.
pub fn sharpen(probs: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = probs.mapv(|p| p.powf(1.0 / temperature));
    for mut row in out.outer_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    out
}

/// Sharpened mean of `passes` dropout-enabled predictions.
pub fn pseudo_labels(
    model: &ModelState,
    x: ArrayView2<f64>,
    cfg: &MixMatchConfig,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    let mut acc = Array2::zeros((x.nrows(), model.classes()));
    for _ in 0..cfg.augmentations {
        acc += &model.forward(x, ForwardMode::Train(rng))?.probs();
    }
    acc /= cfg.augmentations as f64;
    Ok(sharpen(&acc, cfg.temperature))
}

/// `lambda * a + (1 - lambda) * a[partner]` for inputs and targets alike.
pub fn mix_pairs(x: &Array2<f64>, y: &Array2<f64>, partner: &[usize], lambda: f64) -> MixedBatch {
    let px = x.select(Axis(0), partner);
    let py = y.select(Axis(0), partner);
    MixedBatch {
        x: x * lambda + &(px * (1.0 - lambda)),
        y: y * lambda + &(py * (1.0 - lambda)),
    }
}

/// Mixes a labeled batch (targets given) with an unlabeled batch (targets
/// guessed by `model`). Returns `(X', U')` with the original batch sizes.
pub fn mixmatch_lite(
    labeled_x: ArrayView2<f64>,
    labeled_y: ArrayView2<f64>,
    unlabeled_x: ArrayView2<f64>,
    model: &ModelState,
    cfg: &MixMatchConfig,
    rng: &mut Rng,
) -> Result<(MixedBatch, MixedBatch)> {
    if labeled_x.nrows() != labeled_y.nrows() {
        return Err(UlcError::Shape("labeled inputs and targets differ in length".into()));
    }
    let n_l = labeled_x.nrows();
    if n_l + unlabeled_x.nrows() == 0 {
        return Err(UlcError::InsufficientData("both MixMatch batches are empty".into()));
    }
    if n_l == 0 {
        log::warn!("no samples selected as clean; training on pseudo-labels only");
    }
    let guessed = if unlabeled_x.nrows() > 0 {
        pseudo_labels(model, unlabeled_x, cfg, rng)?
    } else {
        Array2::zeros((0, model.classes()))
    };
    let all_x = concatenate(Axis(0), &[labeled_x, unlabeled_x]).expect("same width");
    let all_y = concatenate(Axis(0), &[labeled_y, guessed.view()]).expect("same width");
    let mut partner: Vec<usize> = (0..all_x.nrows()).collect();
    partner.shuffle(rng);
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|e| UlcError::Config(format!("mixmatch alpha: {e}")))?;
    let lambda: f64 = beta.sample(rng);
    let lambda = if lambda.is_finite() {
        lambda.max(1.0 - lambda)
    } else {
        rng.random_range(0.5..1.0)
    };
    let mixed = mix_pairs(&all_x, &all_y, &partner, lambda);
    let x_prime = MixedBatch {
        x: mixed.x.slice(s![..n_l, ..]).to_owned(),
        y: mixed.y.slice(s![..n_l, ..]).to_owned(),
    };
    let u_prime = MixedBatch {
        x: mixed.x.slice(s![n_l.., ..]).to_owned(),
        y: mixed.y.slice(s![n_l.., ..]).to_owned(),
    };
    Ok((x_prime, u_prime))
}
