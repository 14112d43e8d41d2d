//! Loss-based noise modeling: per-class mixtures, clean-probability fusion
//! with epistemic uncertainty, label refinement and the clean/unlabeled split.

mod gmm;
mod strategies;

pub use gmm::{fit_gmm2, fit_gmm2_traced, posterior_clean, ClassGmm, GmmOptions, GmmScope};
pub use strategies::{noise_modelers, ClassAgnostic, ClassSpecific, NoiseModelInput, NoiseModelOutput, NoiseModeler};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UlcError};

pub const DEFAULT_MIN_CLASS_SIZE: usize = 10;
pub const DEFAULT_R: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.5;
/// Threshold used when the noise ratio is extreme (90%).
pub const HIGH_NOISE_TAU: f64 = 0.6;

/// Min-max scaling to `[0, 1]`; a constant vector maps to 0.5.
pub fn normalize_losses(losses: &[f64]) -> Vec<f64> {
    let (lo, hi) = losses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.5; losses.len()];
    }
    losses.iter().map(|&v| (v - lo) / span).collect()
}

/// Per-class mixtures plus the always-present global fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseGmm {
    pub per_class: Vec<Option<ClassGmm>>,
    pub global: ClassGmm,
}

impl ClasswiseGmm {
    /// The mixture serving `class`: its own fit, or the global one.
    pub fn for_class(&self, class: usize) -> &ClassGmm {
        self.per_class
            .get(class)
            .and_then(Option::as_ref)
            .unwrap_or(&self.global)
    }

    pub fn posterior(&self, class: usize, loss: f64) -> f64 {
        self.for_class(class).posterior_clean(loss)
    }
}

/// Fits one mixture per observed class with at least `min_class_size`
/// members, and a global mixture over all losses.
pub fn fit_classwise(
    losses: &[f64],
    observed_labels: &[usize],
    class_count: usize,
    min_class_size: usize,
    opts: &GmmOptions,
) -> Result<ClasswiseGmm> {
    if losses.len() != observed_labels.len() {
        return Err(UlcError::Shape(format!(
            "{} losses for {} labels",
            losses.len(),
            observed_labels.len()
        )));
    }
    if let Some(&l) = observed_labels.iter().find(|&&l| l >= class_count) {
        return Err(UlcError::Contract(format!("label {l} >= class count {class_count}")));
    }
    let global = fit_gmm2(losses, opts)?.with_scope(GmmScope::Global);
    let mut buckets = vec![Vec::new(); class_count];
    for (&loss, &label) in losses.iter().zip(observed_labels) {
        buckets[label].push(loss);
    }
    let per_class = buckets
        .iter()
        .enumerate()
        .map(|(c, xs)| {
            if xs.len() < min_class_size.max(2) {
                return None;
            }
            fit_gmm2(xs, opts).ok().map(|g| g.with_scope(GmmScope::Class(c)))
        })
        .collect();
    Ok(ClasswiseGmm { per_class, global })
}

/// Weighted geometric mean `(1 - epsilon)^r * p_loss^(1 - r)`.
pub fn clean_probability(p_loss: f64, epsilon: f64, r: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(UlcError::Config(format!("uncertainty ratio r = {r} outside [0, 1]")));
    }
    let p = p_loss.clamp(0.0, 1.0);
    let e = epsilon.clamp(0.0, 1.0);
    Ok((1.0 - e).powf(r) * p.powf(1.0 - r))
}

/// `omega * noisy + (1 - omega) * prediction`, renormalized.
pub fn correct_label(omega: f64, noisy_onehot: &[f64], mean_pred: &[f64]) -> Vec<f64> {
    let mut y: Vec<f64> = noisy_onehot
        .iter()
        .zip(mean_pred)
        .map(|(n, p)| omega * n + (1.0 - omega) * p)
        .collect();
    let s: f64 = y.iter().sum();
    if s > 0.0 {
        y.iter_mut().for_each(|v| *v /= s);
    }
    y
}

/// Indices with `omega >= tau` (labeled) and the rest (unlabeled), both sorted.
pub fn partition(omega: &[f64], tau: f64) -> (Vec<usize>, Vec<usize>) {
    (0..omega.len()).partition(|&i| omega[i] >= tau)
}

/// Outcome of one noise-modeling round for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionState {
    pub clean_prob: Vec<f64>,
    pub corrected_labels: Array2<f64>,
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
}

impl CorrectionState {
    /// Applies label refinement and thresholding to precomputed clean probabilities.
    pub fn build(clean_prob: Vec<f64>, observed_labels: &[usize], mean_probs: &Array2<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(UlcError::Config(format!("tau = {tau} outside (0, 1)")));
        }
        let (n, c) = mean_probs.dim();
        if clean_prob.len() != n || observed_labels.len() != n {
            return Err(UlcError::Shape(
                "clean probabilities, labels and predictions differ in length".into(),
            ));
        }
        let mut corrected_labels = Array2::zeros((n, c));
        let mut onehot = vec![0.0; c];
        for i in 0..n {
            onehot.iter_mut().for_each(|v| *v = 0.0);
            onehot[observed_labels[i]] = 1.0;
            let pred = mean_probs.row(i);
            let y = correct_label(clean_prob[i], &onehot, pred.as_slice().expect("standard layout"));
            corrected_labels.row_mut(i).assign(&ndarray::ArrayView1::from(&y));
        }
        let (labeled_idx, unlabeled_idx) = partition(&clean_prob, tau);
        Ok(CorrectionState {
            clean_prob,
            corrected_labels,
            labeled_idx,
            unlabeled_idx,
        })
    }

    pub fn labeled_fraction(&self) -> f64 {
        self.labeled_idx.len() as f64 / self.clean_prob.len().max(1) as f64
    }
}
