//! One-dimensional two-component Gaussian mixture fitted by EM.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UlcError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub var_floor: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            tol: 1e-4,
            max_iter: 100,
            var_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GmmScope {
    Class(usize),
    Global,
}

/// Component 0 always has the smaller mean (the small-loss, clean component).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGmm {
    pub mu0: f64,
    pub mu1: f64,
    pub var0: f64,
    pub var1: f64,
    pub pi0: f64,
    pub pi1: f64,
    pub converged: bool,
    pub scope: GmmScope,
}

fn log_normal(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mu) * (x - mu) / var)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

impl ClassGmm {
    fn component_logs(&self, x: f64) -> (f64, f64) {
        (
            self.pi0.ln() + log_normal(x, self.mu0, self.var0),
            self.pi1.ln() + log_normal(x, self.mu1, self.var1),
        )
    }

    /// Responsibility of the small-mean component for `loss`.
    pub fn posterior_clean(&self, loss: f64) -> f64 {
        let (a, b) = self.component_logs(loss);
        let p = 1.0 / (1.0 + (b - a).exp());
        if p.is_nan() {
            0.5
        } else {
            p.clamp(0.0, 1.0)
        }
    }

    /// Mean log-likelihood per sample.
    pub fn mean_log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let (a, b) = self.component_logs(x);
                log_add_exp(a, b)
            })
            .sum::<f64>()
            / xs.len() as f64
    }

    fn ordered(mut self) -> Self {
        let swap = self.mu0 > self.mu1 || (self.mu0 == self.mu1 && self.pi0 < self.pi1);
        if swap {
            std::mem::swap(&mut self.mu0, &mut self.mu1);
            std::mem::swap(&mut self.var0, &mut self.var1);
            std::mem::swap(&mut self.pi0, &mut self.pi1);
        }
        self
    }

    pub fn with_scope(mut self, scope: GmmScope) -> Self {
        self.scope = scope;
        self
    }
}

/// Free-function form of [`ClassGmm::posterior_clean`].
pub fn posterior_clean(gmm: &ClassGmm, loss: f64) -> f64 {
    gmm.posterior_clean(loss)
}

fn moments(xs: &[f64], floor: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.max(floor))
}

/// Fits the mixture and returns it with the log-likelihood trace
/// (initial value followed by one entry per EM iteration).
pub fn fit_gmm2_traced(losses: &[f64], opts: &GmmOptions) -> Result<(ClassGmm, Vec<f64>)> {
    if losses.len() < 2 {
        return Err(UlcError::InsufficientData(format!(
            "GMM needs at least 2 samples, got {}",
            losses.len()
        )));
    }
    if let Some(v) = losses.iter().find(|v| !v.is_finite()) {
        return Err(UlcError::Contract(format!("non-finite loss {v}")));
    }
    let floor = opts.var_floor;
    let (lo, hi) = losses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi - lo <= 0.0 {
        let g = ClassGmm {
            mu0: lo,
            mu1: lo,
            var0: floor,
            var1: floor,
            pi0: 0.5,
            pi1: 0.5,
            converged: false,
            scope: GmmScope::Global,
        };
        let ll = g.mean_log_likelihood(losses);
        return Ok((g, vec![ll]));
    }

    // median split by sorted position, so both halves are nonempty
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = sorted.len() / 2;
    let (m0, v0) = moments(&sorted[..half], floor);
    let (m1, v1) = moments(&sorted[half..], floor);
    let n = losses.len() as f64;
    let mut g = ClassGmm {
        mu0: m0,
        mu1: m1,
        var0: v0,
        var1: v1,
        pi0: half as f64 / n,
        pi1: 1.0 - half as f64 / n,
        converged: false,
        scope: GmmScope::Global,
    };
    let mut trace = vec![g.mean_log_likelihood(losses)];
    let mut resp = vec![0.0; losses.len()];
    for _ in 0..opts.max_iter {
        for (r, &x) in resp.iter_mut().zip(losses) {
            *r = g.posterior_clean(x);
        }
        let w0: f64 = resp.iter().sum();
        let w1 = n - w0;
        // a component that lost all mass stays where it is
        if w0 > f64::EPSILON {
            g.mu0 = resp.iter().zip(losses).map(|(r, x)| r * x).sum::<f64>() / w0;
            g.var0 = (resp
                .iter()
                .zip(losses)
                .map(|(r, x)| r * (x - g.mu0).powi(2))
                .sum::<f64>()
                / w0)
                .max(floor);
        }
        if w1 > f64::EPSILON {
            g.mu1 = resp.iter().zip(losses).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / w1;
            g.var1 = (resp
                .iter()
                .zip(losses)
                .map(|(r, x)| (1.0 - r) * (x - g.mu1).powi(2))
                .sum::<f64>()
                / w1)
                .max(floor);
        }
        g.pi0 = (w0 / n).clamp(f64::MIN_POSITIVE, 1.0);
        g.pi1 = 1.0 - g.pi0;
        if g.pi1 <= 0.0 {
            g.pi1 = f64::MIN_POSITIVE;
        }
        let ll = g.mean_log_likelihood(losses);
        let prev = *trace.last().expect("nonempty");
        trace.push(ll);
        if ll - prev < opts.tol {
            g.converged = true;
            break;
        }
    }
    Ok((g.ordered(), trace))
}

pub fn fit_gmm2(losses: &[f64], opts: &GmmOptions) -> Result<ClassGmm> {
    fit_gmm2_traced(losses, opts).map(|(g, _)| g)
}
