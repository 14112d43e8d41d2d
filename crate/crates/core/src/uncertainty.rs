//! Epistemic uncertainty from MC-dropout ensembles and aleatoric logit
//! corruption `v_hat = (I + delta) v + delta_x` with
//! `delta_jk ~ N(0, sigma_jk)` and `delta_x_j ~ N(0, sigma_x_j)`.
//!
//! Noise is drawn as standard normals scaled by the square root of the
//! variance, so the corrupted logits are differentiable in `v`, `sigma` and
//! `sigma_x` for a fixed draw.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, UlcError};
use crate::network::{softmax, ForwardMode, ModelState};
use crate::rng::{derive_seed, rng_from, Rng};

/// `T` stochastic softmax rows for one sample and their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub member_probs: Array2<f64>,
    pub mean_prob: Vec<f64>,
    pub epsilon: f64,
}

/// MC-dropout means and uncertainties for a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEnsemble {
    pub mean_probs: Array2<f64>,
    pub epsilon: Vec<f64>,
}

fn check_passes(t: usize) -> Result<()> {
    if t == 0 {
        Err(UlcError::Config("number of Monte Carlo passes must be >= 1".into()))
    } else {
        Ok(())
    }
}

/// `T` forward passes of a single input with independent dropout masks.
pub fn mc_predict(model: &ModelState, x: ArrayView1<f64>, t: usize, seed: u64) -> Result<EnsemblePrediction> {
    check_passes(t)?;
    let x2 = x.insert_axis(Axis(0));
    let c = model.classes();
    let mut member_probs = Array2::zeros((t, c));
    for pass in 0..t {
        let rec = model.forward(x2, ForwardMode::McDropout(derive_seed(seed, pass as u64)))?;
        member_probs.row_mut(pass).assign(&rec.probs().row(0));
    }
    let mean_prob = member_probs.mean_axis(Axis(0)).expect("t >= 1").to_vec();
    let epsilon = epistemic_uncertainty(&mean_prob)?;
    Ok(EnsemblePrediction {
        member_probs,
        mean_prob,
        epsilon,
    })
}

/// Batched variant of [`mc_predict`]: pass `t` draws masks for all rows from one stream.
pub fn mc_predict_batch(model: &ModelState, x: ArrayView2<f64>, t: usize, seed: u64) -> Result<BatchEnsemble> {
    check_passes(t)?;
    let mut acc = Array2::<f64>::zeros((x.nrows(), model.classes()));
    for pass in 0..t {
        let rec = model.forward(x, ForwardMode::McDropout(derive_seed(seed, pass as u64)))?;
        acc += &rec.probs();
    }
    acc /= t as f64;
    let epsilon = acc
        .outer_iter()
        .map(|row| epistemic_uncertainty(row.as_slice().expect("standard layout")))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchEnsemble {
        mean_probs: acc,
        epsilon,
    })
}

/// Entropy of `p` divided by `ln C`, so the result lies in `[0, 1]`.
pub fn epistemic_uncertainty(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(UlcError::Contract("need at least two classes".into()));
    }
    if let Some(v) = p.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(UlcError::Contract(format!("invalid probability {v}")));
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    Ok((h / (p.len() as f64).ln()).clamp(0.0, 1.0))
}

/// One draw of standard normals for a `C`-class corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitNoise {
    /// Row-major `C x C`.
    pub z: Vec<f64>,
    pub zx: Vec<f64>,
}

impl LogitNoise {
    pub fn draw(classes: usize, rng: &mut Rng) -> Self {
        LogitNoise {
            z: (0..classes * classes).map(|_| StandardNormal.sample(rng)).collect(),
            zx: (0..classes).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }

    pub fn draws(classes: usize, t: usize, rng: &mut Rng) -> Vec<LogitNoise> {
        (0..t).map(|_| LogitNoise::draw(classes, rng)).collect()
    }
}

fn check_variances(sigma: &Array2<f64>, sigma_x: &[f64], c: usize) -> Result<()> {
    if sigma.dim() != (c, c) || sigma_x.len() != c {
        return Err(UlcError::Shape(format!(
            "sigma {:?} / sigma_x {} for {c} classes",
            sigma.dim(),
            sigma_x.len()
        )));
    }
    if let Some(v) = sigma.iter().chain(sigma_x).find(|&&v| !(v >= 0.0)) {
        return Err(UlcError::Contract(format!("negative or invalid variance {v}")));
    }
    Ok(())
}

/// `(I + sqrt(sigma) * z) v + sqrt(sigma_x) * zx` for a fixed draw.
pub fn corrupt_with(v: &[f64], sigma: &Array2<f64>, sigma_x: &[f64], noise: &LogitNoise) -> Vec<f64> {
    let c = v.len();
    (0..c)
        .map(|j| {
            let mut out = v[j] + sigma_x[j].sqrt() * noise.zx[j];
            for k in 0..c {
                out += sigma[[j, k]].sqrt() * noise.z[j * c + k] * v[k];
            }
            out
        })
        .collect()
}

/// Draws one corrupted logit vector.
pub fn sample_corrupted_logits(v: &[f64], sigma: &Array2<f64>, sigma_x: &[f64], seed: u64) -> Result<Vec<f64>> {
    check_variances(sigma, sigma_x, v.len())?;
    let noise = LogitNoise::draw(v.len(), &mut rng_from(seed));
    Ok(corrupt_with(v, sigma, sigma_x, &noise))
}

/// Mean of softmax over corrupted draws.
pub fn corrupted_mean_prob(v: &[f64], sigma: &Array2<f64>, sigma_x: &[f64], noise: &[LogitNoise]) -> Vec<f64> {
    let c = v.len();
    let mut mean = vec![0.0; c];
    for n in noise {
        for (m, q) in mean.iter_mut().zip(softmax(&corrupt_with(v, sigma, sigma_x, n))) {
            *m += q;
        }
    }
    mean.iter_mut().for_each(|m| *m /= noise.len() as f64);
    mean
}

/// Deterministic forward for `v` and `sigma_x`, then `T` corrupted draws.
pub fn stochastic_mean_prob(model: &ModelState, x: ArrayView1<f64>, t: usize, seed: u64) -> Result<Vec<f64>> {
    check_passes(t)?;
    let rec = model.forward(x.insert_axis(Axis(0)), ForwardMode::Deterministic)?;
    let v = rec.logits.row(0).to_vec();
    let sigma_x = rec.sigma_x.row(0).to_vec();
    let sigma = model.sigma();
    check_variances(&sigma, &sigma_x, v.len())?;
    let noise = LogitNoise::draws(v.len(), t, &mut rng_from(seed));
    Ok(corrupted_mean_prob(&v, &sigma, &sigma_x, &noise))
}

/// Loss over the corrupted mean and its gradients for one sample.
#[derive(Debug, Clone)]
pub struct CorruptedLoss {
    pub loss: f64,
    pub mean_prob: Vec<f64>,
    pub d_logits: Vec<f64>,
    /// Gradient w.r.t. the variance matrix (not the raw parameter).
    pub d_sigma: Array2<f64>,
    pub d_sigma_x: Vec<f64>,
}

/// Which loss is applied to the corrupted mean prediction `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptedTarget {
    /// `-y . log m`, evaluated with log-sum-exp over draws.
    CrossEntropy,
    /// `||y - m||^2`.
    SquaredError,
}

/// Evaluates the chosen loss on `m = (1/T) sum_t softmax(v_hat_t)` and
/// back-propagates it to `v`, `sigma` and `sigma_x` through the fixed draws.
pub fn corrupted_loss(
    v: &[f64],
    sigma: &Array2<f64>,
    sigma_x: &[f64],
    noise: &[LogitNoise],
    target: &[f64],
    kind: CorruptedTarget,
) -> CorruptedLoss {
    let c = v.len();
    let t = noise.len();
    let draws: Vec<Vec<f64>> = noise.iter().map(|n| corrupt_with(v, sigma, sigma_x, n)).collect();
    // log softmax per draw
    let log_q: Vec<Vec<f64>> = draws
        .iter()
        .map(|vh| {
            let max = vh.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + vh.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            vh.iter().map(|x| x - lse).collect()
        })
        .collect();
    let q: Vec<Vec<f64>> = log_q.iter().map(|l| l.iter().map(|x| x.exp()).collect()).collect();
    let mut mean_prob = vec![0.0; c];
    for qt in &q {
        for (m, v) in mean_prob.iter_mut().zip(qt) {
            *m += v / t as f64;
        }
    }

    // g_vhat[t][i] = d loss / d v_hat_t[i]
    let (loss, g_vhat): (f64, Vec<Vec<f64>>) = match kind {
        CorruptedTarget::CrossEntropy => {
            // log m_j = logsumexp_t(log q_tj) - ln T; w_tj = q_tj / sum_s q_sj
            let mut log_m = vec![0.0; c];
            let mut w = vec![vec![0.0; c]; t];
            for j in 0..c {
                let max = log_q.iter().fold(f64::NEG_INFINITY, |m, l| m.max(l[j]));
                let s: f64 = log_q.iter().map(|l| (l[j] - max).exp()).sum();
                log_m[j] = max + s.ln() - (t as f64).ln();
                for (wt, l) in w.iter_mut().zip(&log_q) {
                    wt[j] = (l[j] - max).exp() / s;
                }
            }
            let loss = -target
                .iter()
                .zip(&log_m)
                .map(|(y, l)| if *y == 0.0 { 0.0 } else { y * l })
                .sum::<f64>();
            let g = (0..t)
                .map(|ti| {
                    let yw: f64 = (0..c).map(|j| target[j] * w[ti][j]).sum();
                    (0..c).map(|i| -target[i] * w[ti][i] + q[ti][i] * yw).collect()
                })
                .collect();
            (loss, g)
        }
        CorruptedTarget::SquaredError => {
            let loss = target.iter().zip(&mean_prob).map(|(y, m)| (y - m) * (y - m)).sum();
            let g_m: Vec<f64> = target
                .iter()
                .zip(&mean_prob)
                .map(|(y, m)| -2.0 * (y - m) / t as f64)
                .collect();
            let g = q
                .iter()
                .map(|qt| {
                    let dot: f64 = g_m.iter().zip(qt).map(|(g, q)| g * q).sum();
                    (0..c).map(|i| qt[i] * (g_m[i] - dot)).collect()
                })
                .collect();
            (loss, g)
        }
    };

    let mut d_logits = vec![0.0; c];
    let mut d_sigma = Array2::zeros((c, c));
    let mut d_sigma_x = vec![0.0; c];
    let sqrt_sigma = sigma.mapv(f64::sqrt);
    for (g, n) in g_vhat.iter().zip(noise) {
        for j in 0..c {
            // v_hat_j = v_j + sum_k sqrt(s_jk) z_jk v_k + sqrt(sx_j) zx_j
            d_logits[j] += g[j];
            for k in 0..c {
                let z = n.z[j * c + k];
                d_logits[k] += g[j] * sqrt_sigma[[j, k]] * z;
                if sqrt_sigma[[j, k]] > 0.0 {
                    d_sigma[[j, k]] += g[j] * z * v[k] / (2.0 * sqrt_sigma[[j, k]]);
                }
            }
            if sigma_x[j] > 0.0 {
                d_sigma_x[j] += g[j] * n.zx[j] / (2.0 * sigma_x[j].sqrt());
            }
        }
    }
    CorruptedLoss {
        loss,
        mean_prob,
        d_logits,
        d_sigma,
        d_sigma_x,
    }
}

/// Total-variation distance between two distributions.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Arithmetic mean of rows; convenience for ensembles.
pub fn row_mean(a: &Array2<f64>) -> Array1<f64> {
    a.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(a.ncols()))
}
