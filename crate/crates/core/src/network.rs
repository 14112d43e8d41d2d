//! Two-hidden-layer ReLU MLP with inverted dropout, an instance-variance head
//! and a global class-dependent variance matrix. Gradients are derived by hand.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, UlcError};
use crate::rng::{rng_from, Rng};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_DROPOUT: f64 = 0.3;
/// Initial value of every softplus-transformed variance.
pub const INITIAL_VARIANCE: f64 = 0.05;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Every trainable tensor. Also used for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    /// Variance head weights, last hidden layer -> C.
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    /// Pre-softplus class-dependent variance, C x C.
    pub sigma_raw: Array2<f64>,
}

pub const TENSOR_NAMES: [&str; 9] = ["w1", "b1", "w2", "b2", "w3", "b3", "wv", "bv", "sigma_raw"];

impl Params {
    pub fn zeros(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Params {
            w1: Array2::zeros((input_dim, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array1::zeros(hidden),
            w3: Array2::zeros((hidden, classes)),
            b3: Array1::zeros(classes),
            wv: Array2::zeros((hidden, classes)),
            bv: Array1::zeros(classes),
            sigma_raw: Array2::zeros((classes, classes)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params::zeros(self.w1.nrows(), self.w1.ncols(), self.w3.ncols())
    }

    pub fn slices(&self) -> [&[f64]; 9] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
            self.wv.as_slice().expect("standard layout"),
            self.bv.as_slice().expect("standard layout"),
            self.sigma_raw.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
            self.wv.as_slice_mut().expect("standard layout"),
            self.bv.as_slice_mut().expect("standard layout"),
            self.sigma_raw.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn shapes(&self) -> [(usize, usize); 9] {
        [
            self.w1.dim(),
            (1, self.b1.len()),
            self.w2.dim(),
            (1, self.b2.len()),
            self.w3.dim(),
            (1, self.b3.len()),
            self.wv.dim(),
            (1, self.bv.len()),
            self.sigma_raw.dim(),
        ]
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.shapes() == other.shapes()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

/// A dropout MLP `d -> H -> H -> C` plus variance parameters and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: Params,
    pub momentum: Params,
    pub dropout_rate: f64,
}

/// How dropout is handled in a forward pass.
pub enum ForwardMode<'a> {
    /// Expectation: no mask (inverted dropout keeps activations unbiased).
    Deterministic,
    /// Fresh masks from the caller's stream.
    Train(&'a mut Rng),
    /// Fresh masks from a stream seeded with the given value.
    McDropout(u64),
}

/// Cached activations for one batch.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub logits: Array2<f64>,
    /// Instance-dependent variances, softplus of the head output.
    pub sigma_x: Array2<f64>,
    input: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    mask1: Option<Array2<f64>>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    mask2: Option<Array2<f64>>,
    var_pre: Array2<f64>,
}

impl ForwardRecord {
    pub fn probs(&self) -> Array2<f64> {
        softmax_rows(&self.logits)
    }

    pub fn batch_size(&self) -> usize {
        self.logits.nrows()
    }
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Array2<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < keep { scale } else { 0.0 })
}

impl ModelState {
    /// He-normal hidden layers, variances at [`INITIAL_VARIANCE`].
    pub fn new(input_dim: usize, hidden: usize, classes: usize, dropout_rate: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || classes < 2 {
            return Err(UlcError::Config(format!(
                "invalid architecture d={input_dim} H={hidden} C={classes}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(UlcError::Config(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        let mut rng = rng_from(seed);
        let mut p = Params::zeros(input_dim, hidden, classes);
        let mut fill = |a: &mut Array2<f64>, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            a.mapv_inplace(|_| normal.sample(&mut rng));
        };
        fill(&mut p.w1, (2.0 / input_dim as f64).sqrt());
        fill(&mut p.w2, (2.0 / hidden as f64).sqrt());
        fill(&mut p.w3, (1.0 / hidden as f64).sqrt());
        fill(&mut p.wv, 0.01 / (hidden as f64).sqrt());
        let raw = softplus_inv(INITIAL_VARIANCE);
        p.bv.fill(raw);
        p.sigma_raw.fill(raw);
        let momentum = p.zeros_like();
        Ok(ModelState {
            params: p,
            momentum,
            dropout_rate,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.params.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.params.w1.ncols()
    }

    pub fn classes(&self) -> usize {
        self.params.w3.ncols()
    }

    /// Class-dependent variances `softplus(sigma_raw)`.
    pub fn sigma(&self) -> Array2<f64> {
        self.params.sigma_raw.mapv(softplus)
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: ForwardMode<'_>) -> Result<ForwardRecord> {
        if x.ncols() != self.input_dim() {
            return Err(UlcError::Shape(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let p = &self.params;
        let b = x.nrows();
        let h = self.hidden();
        let mut owned_rng;
        let rng: Option<&mut Rng> = match mode {
            ForwardMode::Deterministic => None,
            ForwardMode::Train(r) => Some(r),
            ForwardMode::McDropout(seed) => {
                owned_rng = rng_from(seed);
                Some(&mut owned_rng)
            }
        };
        let use_masks = rng.is_some() && self.dropout_rate > 0.0;
        let (mask1, mask2) = match rng {
            Some(r) if use_masks => (
                Some(dropout_mask(b, h, self.dropout_rate, r)),
                Some(dropout_mask(b, h, self.dropout_rate, r)),
            ),
            _ => (None, None),
        };

        let z1 = x.dot(&p.w1) + &p.b1;
        let mut h1 = z1.mapv(|v| v.max(0.0));
        if let Some(m) = &mask1 {
            h1 *= m;
        }
        let z2 = h1.dot(&p.w2) + &p.b2;
        let mut h2 = z2.mapv(|v| v.max(0.0));
        if let Some(m) = &mask2 {
            h2 *= m;
        }
        let logits = h2.dot(&p.w3) + &p.b3;
        let var_pre = h2.dot(&p.wv) + &p.bv;
        let sigma_x = var_pre.mapv(softplus);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(UlcError::Divergence("non-finite logits".into()));
        }
        Ok(ForwardRecord {
            logits,
            sigma_x,
            input: x.to_owned(),
            z1,
            h1,
            mask1,
            z2,
            h2,
            mask2,
            var_pre,
        })
    }

    /// Deterministic softmax probabilities for a batch.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x, ForwardMode::Deterministic)?.probs())
    }

    /// Back-propagates `d loss / d logits` and `d loss / d sigma_x` into every
    /// network tensor. `sigma_raw` is left at zero; callers add its gradient.
    pub fn backward(&self, rec: &ForwardRecord, d_logits: &Array2<f64>, d_sigma_x: Option<&Array2<f64>>) -> Params {
        let p = &self.params;
        let mut g = p.zeros_like();
        g.w3 = rec.h2.t().dot(d_logits);
        g.b3 = d_logits.sum_axis(Axis(0));
        let mut d_h2 = d_logits.dot(&p.w3.t());
        if let Some(ds) = d_sigma_x {
            let d_var_pre = Zip::from(ds).and(&rec.var_pre).map_collect(|&d, &u| d * sigmoid(u));
            g.wv = rec.h2.t().dot(&d_var_pre);
            g.bv = d_var_pre.sum_axis(Axis(0));
            d_h2 += &d_var_pre.dot(&p.wv.t());
        }
        let d_z2 = relu_mask_grad(d_h2, &rec.z2, rec.mask2.as_ref());
        g.w2 = rec.h1.t().dot(&d_z2);
        g.b2 = d_z2.sum_axis(Axis(0));
        let d_h1 = d_z2.dot(&p.w2.t());
        let d_z1 = relu_mask_grad(d_h1, &rec.z1, rec.mask1.as_ref());
        g.w1 = rec.input.t().dot(&d_z1);
        g.b1 = d_z1.sum_axis(Axis(0));
        g
    }
}

fn relu_mask_grad(mut d: Array2<f64>, pre: &Array2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => Zip::from(&mut d).and(pre).and(m).for_each(|d, &z, &m| {
            *d = if z > 0.0 { *d * m } else { 0.0 };
        }),
        None => Zip::from(&mut d).and(pre).for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        }),
    }
    d
}

/// Checks that every label row is a probability vector.
pub fn check_label_rows(labels: &Array2<f64>) -> Result<()> {
    for (i, row) in labels.outer_iter().enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < -1e-12) {
            return Err(UlcError::Contract(format!(
                "label row {i} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Batch-mean cross-entropy against soft labels, plus
/// `entropy_weight * sum_j p_j log p_j` (a penalty on confident predictions).
/// Returns the loss and gradients for the MLP tensors; variance parameters get zero.
pub fn ce_loss_and_grad(
    model: &ModelState,
    x: ArrayView2<f64>,
    labels: &Array2<f64>,
    entropy_weight: f64,
    mode: ForwardMode<'_>,
) -> Result<(f64, Params)> {
    if labels.dim() != (x.nrows(), model.classes()) {
        return Err(UlcError::Shape(format!(
            "labels {:?} for batch of {} with {} classes",
            labels.dim(),
            x.nrows(),
            model.classes()
        )));
    }
    check_label_rows(labels)?;
    let rec = model.forward(x, mode)?;
    let (loss, d_logits) = ce_entropy_from_logits(&rec.logits, labels, entropy_weight);
    let grads = model.backward(&rec, &d_logits, None);
    Ok((loss, grads))
}

/// Loss and `d loss / d logits` for [`ce_loss_and_grad`].
pub fn ce_entropy_from_logits(logits: &Array2<f64>, labels: &Array2<f64>, entropy_weight: f64) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let mut loss = 0.0;
    let mut d = Array2::zeros(logits.dim());
    for ((row, y), mut drow) in logits.outer_iter().zip(labels.outer_iter()).zip(d.outer_iter_mut()) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let logp: Vec<f64> = row.iter().map(|v| v - lse).collect();
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let neg_entropy: f64 = p.iter().zip(&logp).map(|(p, l)| p * l).sum();
        loss += -y.iter().zip(&logp).map(|(y, l)| y * l).sum::<f64>() + entropy_weight * neg_entropy;
        for j in 0..p.len() {
            let ce = p[j] - y[j];
            let ent = p[j] * (logp[j] - neg_entropy);
            drow[j] = (ce + entropy_weight * ent) / b;
        }
    }
    (loss / b, d)
}

/// `buffer = momentum * buffer + grad; param -= lr * buffer`.
pub fn sgd_step(model: &mut ModelState, grads: &Params, lr: f64, momentum: f64) -> Result<()> {
    if !model.params.same_shape(grads) {
        return Err(UlcError::Shape("gradient shapes differ from parameters".into()));
    }
    if !grads.is_finite() {
        return Err(UlcError::Divergence("non-finite gradient".into()));
    }
    for ((param, buf), grad) in model
        .params
        .slices_mut()
        .into_iter()
        .zip(model.momentum.slices_mut())
        .zip(grads.slices())
    {
        for ((p, m), g) in param.iter_mut().zip(buf.iter_mut()).zip(grad) {
            *m = momentum * *m + g;
            *p -= lr * *m;
        }
    }
    Ok(())
}

const MODEL_TAG: &str = "#ulc-model";

/// Text checkpoint of parameters and momentum buffers.
pub fn model_to_text(model: &ModelState) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{MODEL_TAG} v1 {} {} {} {}",
        model.input_dim(),
        model.hidden(),
        model.classes(),
        model.dropout_rate
    );
    for (prefix, params) in [("", &model.params), ("momentum.", &model.momentum)] {
        for ((name, data), (r, c)) in TENSOR_NAMES.iter().zip(params.slices()).zip(params.shapes()) {
            let values: Vec<String> = data.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{prefix}{name} {r} {c} {}", values.join(","));
        }
    }
    out
}

pub fn model_from_text(text: &str) -> Result<ModelState> {
    let err = |line: usize, m: String| UlcError::Parse { line, message: m };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty checkpoint".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 6 || h[0] != MODEL_TAG || h[1] != "v1" {
        return Err(err(1, format!("bad checkpoint header `{header}`")));
    }
    let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| err(1, format!("bad integer `{s}`")));
    let (d, hid, c) = (parse_usize(h[2])?, parse_usize(h[3])?, parse_usize(h[4])?);
    let dropout_rate: f64 = h[5].parse().map_err(|_| err(1, format!("bad dropout `{}`", h[5])))?;
    let mut params = Params::zeros(d, hid, c);
    let mut momentum = Params::zeros(d, hid, c);
    let mut seen = 0;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(4, ' ');
        let name = parts.next().unwrap_or_default();
        let (target, base) = match name.strip_prefix("momentum.") {
            Some(base) => (&mut momentum, base),
            None => (&mut params, name),
        };
        let idx = TENSOR_NAMES
            .iter()
            .position(|&n| n == base)
            .ok_or_else(|| err(line_no, format!("unknown tensor `{name}`")))?;
        let shape = target.shapes()[idx];
        let r: usize = parts.next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
        let cc: usize = parts.next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
        if (r, cc) != shape {
            return Err(err(
                line_no,
                format!("tensor `{name}` has shape {r}x{cc}, expected {shape:?}"),
            ));
        }
        let values = parts.next().unwrap_or_default();
        let slot = &mut target.slices_mut()[idx];
        let mut count = 0;
        for (k, v) in values.split(',').filter(|s| !s.is_empty()).enumerate() {
            if k >= slot.len() {
                return Err(err(line_no, format!("tensor `{name}` has too many values")));
            }
            slot[k] = v
                .parse()
                .map_err(|_| err(line_no, format!("tensor `{name}` value {k} `{v}` is not a number")))?;
            count += 1;
        }
        if count != slot.len() {
            return Err(err(
                line_no,
                format!("tensor `{name}` has {count} values, expected {}", slot.len()),
            ));
        }
        seen += 1;
    }
    if seen != 2 * TENSOR_NAMES.len() {
        return Err(err(text.lines().count(), format!("expected 18 tensors, found {seen}")));
    }
    Ok(ModelState {
        params,
        momentum,
        dropout_rate,
    })
}

pub fn save_model(model: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, model_to_text(model)).map_err(|e| UlcError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let text = fs::read_to_string(path).map_err(|e| UlcError::io(path, e))?;
    model_from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn toy(dropout: f64) -> ModelState {
        ModelState::new(3, 6, 4, dropout, 11).unwrap()
    }

    fn batch() -> Array2<f64> {
        array![[0.3, -1.2, 0.8], [1.5, 0.2, -0.4], [-0.7, 0.9, 0.1], [0.05, 0.4, -1.1]]
    }

    #[test]
    fn zero_dropout_train_equals_deterministic() {
        let m = toy(0.0);
        let x = batch();
        let det = m.forward(x.view(), ForwardMode::Deterministic).unwrap();
        let mut rng = rng_from(5);
        let tr = m.forward(x.view(), ForwardMode::Train(&mut rng)).unwrap();
        assert_eq!(det.logits, tr.logits);
        assert_eq!(det.sigma_x, tr.sigma_x);
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut m = toy(0.3);
        let sigma_raw = m.params.sigma_raw.clone();
        m.params = m.params.zeros_like();
        m.params.sigma_raw = sigma_raw;
        let p = m.predict_proba(batch().view()).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let rec = m.forward(batch().view(), ForwardMode::Deterministic).unwrap();
        assert!(rec.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mc_dropout_is_seeded() {
        let m = toy(0.3);
        let a = m.forward(batch().view(), ForwardMode::McDropout(9)).unwrap();
        let b = m.forward(batch().view(), ForwardMode::McDropout(9)).unwrap();
        let c = m.forward(batch().view(), ForwardMode::McDropout(10)).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_ne!(a.logits, c.logits);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let m = toy(0.0);
        let x = Array2::zeros((2, 5));
        assert!(matches!(
            m.forward(x.view(), ForwardMode::Deterministic),
            Err(UlcError::Shape(_))
        ));
    }

    #[test]
    fn variances_start_positive() {
        let m = toy(0.3);
        assert!(m.sigma().iter().all(|&s| (s - INITIAL_VARIANCE).abs() < 1e-12));
        let rec = m.forward(batch().view(), ForwardMode::Deterministic).unwrap();
        assert!(rec.sigma_x.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let m = toy(0.3);
        let x = batch();
        let det = m.forward(x.view(), ForwardMode::Deterministic).unwrap();
        let mut rng = rng_from(1);
        let mut acc = Array2::<f64>::zeros(det.h1.dim());
        let draws = 10_000;
        for _ in 0..draws {
            let mask = dropout_mask(det.h1.nrows(), det.h1.ncols(), 0.3, &mut rng);
            acc += &(&det.h1 * &mask);
        }
        acc /= draws as f64;
        for (a, d) in acc.iter().zip(det.h1.iter()) {
            if *d > 1e-3 {
                assert!((a - d).abs() / d < 0.02, "{a} vs {d}");
            }
        }
    }

    #[test]
    fn ce_saturates_and_matches_log_c() {
        let logits = array![[50.0, 0.0, 0.0]];
        let (loss, _) = ce_entropy_from_logits(&logits, &array![[1.0, 0.0, 0.0]], 0.0);
        assert!(loss < 1e-15);
        let (loss, _) = ce_entropy_from_logits(&Array2::zeros((2, 5)), &Array2::from_elem((2, 5), 0.2), 0.0);
        assert_abs_diff_eq!(loss, 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ce_rejects_unnormalized_labels() {
        let m = toy(0.0);
        let labels = Array2::from_elem((4, 4), 0.3);
        assert!(matches!(
            ce_loss_and_grad(&m, batch().view(), &labels, 0.0, ForwardMode::Deterministic),
            Err(UlcError::Contract(_))
        ));
    }

    fn soft_labels() -> Array2<f64> {
        array![
            [0.7, 0.1, 0.1, 0.1],
            [0.0, 1.0, 0.0, 0.0],
            [0.25, 0.25, 0.25, 0.25],
            [0.1, 0.2, 0.3, 0.4]
        ]
    }

    /// Central differences over every coordinate of every tensor.
    fn check_fd(model: &ModelState, entropy_weight: f64, seed: Option<u64>) {
        let x = batch();
        let y = soft_labels();
        let mode = || match seed {
            Some(s) => ForwardMode::McDropout(s),
            None => ForwardMode::Deterministic,
        };
        let (_, g) = ce_loss_and_grad(model, x.view(), &y, entropy_weight, mode()).unwrap();
        let h = 1e-4;
        for (t, name) in TENSOR_NAMES.iter().enumerate() {
            let n = model.params.slices()[t].len();
            for k in 0..n {
                let mut plus = model.clone();
                plus.params.slices_mut()[t][k] += h;
                let mut minus = model.clone();
                minus.params.slices_mut()[t][k] -= h;
                let lp = ce_loss_and_grad(&plus, x.view(), &y, entropy_weight, mode()).unwrap().0;
                let lm = ce_loss_and_grad(&minus, x.view(), &y, entropy_weight, mode())
                    .unwrap()
                    .0;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.slices()[t][k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    rel < 1e-3 || (fd - an).abs() < 1e-8,
                    "{name}[{k}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        check_fd(&toy(0.0), 0.0, None);
    }

    #[test]
    fn ce_entropy_gradient_matches_finite_differences_with_dropout() {
        check_fd(&toy(0.3), 0.8, Some(21));
    }

    #[test]
    fn sgd_lr_zero_and_plain_step() {
        let mut m = toy(0.0);
        let before = m.params.clone();
        let mut g = m.params.zeros_like();
        for s in g.slices_mut() {
            s.iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * i as f64 - 0.3);
        }
        sgd_step(&mut m, &g, 0.0, 0.9).unwrap();
        assert_eq!(m.params, before);

        let mut m = toy(0.0);
        sgd_step(&mut m, &g, 0.1, 0.0).unwrap();
        let mut expected = before.clone();
        expected.add_scaled(&g, -0.1);
        for (a, b) in m.params.slices().iter().zip(expected.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut m = toy(0.0);
        let before = m.params.clone();
        let mut g = m.params.zeros_like();
        g.w1.fill(0.5);
        sgd_step(&mut m, &g, 0.1, 0.9).unwrap();
        sgd_step(&mut m, &g, 0.1, 0.9).unwrap();
        let moved = &before.w1 - &m.params.w1;
        for v in moved.iter() {
            assert_abs_diff_eq!(*v, 0.1 * 0.5 * 2.9, epsilon = 1e-12);
        }
    }

    #[test]
    fn sgd_rejects_nan() {
        let mut m = toy(0.0);
        let mut g = m.params.zeros_like();
        g.b2[0] = f64::NAN;
        assert!(matches!(sgd_step(&mut m, &g, 0.1, 0.9), Err(UlcError::Divergence(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut m = toy(0.3);
        let mut g = m.params.zeros_like();
        g.w2.fill(0.1);
        sgd_step(&mut m, &g, 0.1, 0.9).unwrap();
        let back = model_from_text(&model_to_text(&m)).unwrap();
        assert_eq!(back, m);
        let broken = model_to_text(&m).replace("w3 6 4", "w3 6 5");
        assert!(model_from_text(&broken).is_err());
    }

    #[test]
    fn softplus_inverse() {
        for y in [1e-4, 0.05, 1.0, 7.5] {
            assert_abs_diff_eq!(softplus(softplus_inv(y)), y, epsilon = 1e-12);
        }
    }
}
