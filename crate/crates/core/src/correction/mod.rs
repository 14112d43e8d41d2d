//! The training procedure: cross-entropy warm-up of two networks, then per
//! epoch a noise-modeling round (each network's split comes from the other
//! network's losses) followed by one semi-supervised epoch per network.

mod config;
mod mixmatch;
mod ssl;

pub use config::{Ablation, MixMatchConfig, UlcConfig};
pub use mixmatch::{mix_pairs, mixmatch_lite, pseudo_labels, sharpen, MixedBatch};
pub use ssl::{draw_batch_noise, ssl_losses, ssl_losses_with, SslLoss, SslSettings};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::dataset::Dataset;
use crate::error::{Result, UlcError};
use crate::metrics::{argmax_rows, auc, per_class_accuracy};
use crate::network::{ce_loss_and_grad, sgd_step, ForwardMode, ModelState, Params};
use crate::noise_model::{noise_modelers, CorrectionState, NoiseModelInput, NoiseModelOutput, NoiseModeler};
use crate::report::{EpochRecord, Phase};
use crate::rng::{derive_seed, rng_from, stream, Rng};
use crate::uncertainty::mc_predict_batch;

/// Two networks trained side by side, each with its latest split.
#[derive(Debug, Clone)]
pub struct CoTeachingState {
    pub nets: [ModelState; 2],
    pub corrections: [Option<CorrectionState>; 2],
}

impl CoTeachingState {
    pub fn new(input_dim: usize, classes: usize, cfg: &UlcConfig) -> Result<Self> {
        let init = |tag| {
            ModelState::new(
                input_dim,
                cfg.hidden_width,
                classes,
                cfg.dropout,
                derive_seed(cfg.seed, tag),
            )
        };
        Ok(CoTeachingState {
            nets: [init(stream::INIT_NET1)?, init(stream::INIT_NET2)?],
            corrections: [None, None],
        })
    }

    /// Mean of the two networks' deterministic softmax outputs.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut p = self.nets[0].predict_proba(x)?;
        p += &self.nets[1].predict_proba(x)?;
        p /= 2.0;
        Ok(p)
    }
}

/// Statistics of one network in a noise-modeling round.
#[derive(Debug, Clone)]
pub struct NetworkNoise {
    /// This network's per-sample loss against the observed labels.
    pub losses: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub mean_probs: Array2<f64>,
    /// Mixture output for this network, fitted on the peer's losses.
    pub model: NoiseModelOutput,
    pub correction: CorrectionState,
}

#[derive(Debug, Clone)]
pub struct NoiseRound {
    pub epoch: usize,
    pub nets: [NetworkNoise; 2],
}

impl NoiseRound {
    /// Clean probability averaged over both networks.
    pub fn mean_omega(&self) -> Vec<f64> {
        self.nets[0]
            .correction
            .clean_prob
            .iter()
            .zip(&self.nets[1].correction.clean_prob)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }
}

/// Hooks for logging and diagnostics. Both default to no-ops.
pub trait Observer {
    fn on_round(&mut self, _round: &NoiseRound, _train: &Dataset) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl Observer for NoObserver {}

pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    y
}

fn apply_weight_decay(grads: &mut Params, model: &ModelState, wd: f64) {
    if wd > 0.0 {
        grads.w1.scaled_add(wd, &model.params.w1);
        grads.w2.scaled_add(wd, &model.params.w2);
        grads.w3.scaled_add(wd, &model.params.w3);
    }
}

/// One pass of shuffled mini-batch cross-entropy on the observed labels.
/// Returns the mean batch loss.
pub fn ce_epoch(
    model: &mut ModelState,
    x: ArrayView2<f64>,
    targets: &Array2<f64>,
    cfg: &UlcConfig,
    epoch: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let bx = x.select(Axis(0), chunk);
        let by = targets.select(Axis(0), chunk);
        let (loss, mut grads) = ce_loss_and_grad(model, bx.view(), &by, cfg.entropy_weight, ForwardMode::Train(rng))?;
        if !loss.is_finite() {
            return Err(UlcError::Divergence(format!(
                "non-finite cross-entropy at epoch {epoch}"
            )));
        }
        apply_weight_decay(&mut grads, model, cfg.weight_decay);
        sgd_step(model, &grads, cfg.lr_at(epoch), cfg.momentum)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Runs every warm-up epoch on both networks. Variance parameters receive
/// no gradient here.
pub fn warmup(state: &mut CoTeachingState, data: &Dataset, cfg: &UlcConfig) -> Result<Vec<f64>> {
    let mut trainer = Trainer::new(state.clone(), cfg.clone())?;
    let targets = one_hot(&data.noisy_labels, data.class_count);
    let mut losses = Vec::new();
    for epoch in 0..cfg.warmup_epochs {
        losses.push(trainer.warmup_epoch(data, &targets, epoch)?);
    }
    *state = trainer.state;
    Ok(losses)
}

fn sample_losses(mean_probs: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -mean_probs[[i, l]].max(1e-12).ln())
        .collect()
}

/// MC-integrated predictions, losses and uncertainties for both networks,
/// then cross-fitted mixtures, label refinement and the threshold split.
pub fn model_noise_epoch(
    state: &CoTeachingState,
    data: &Dataset,
    cfg: &UlcConfig,
    modeler: &dyn NoiseModeler,
    epoch: usize,
) -> Result<NoiseRound> {
    let mut ensembles = Vec::with_capacity(2);
    for (k, net) in state.nets.iter().enumerate() {
        let seed = derive_seed(derive_seed(cfg.seed, stream::MC), (epoch * 2 + k) as u64);
        let ens = mc_predict_batch(net, data.features.view(), cfg.mc_passes, seed)?;
        let losses = sample_losses(&ens.mean_probs, &data.noisy_labels);
        ensembles.push((ens, losses));
    }
    let mut nets = Vec::with_capacity(2);
    for k in 0..2 {
        let (ens, losses) = &ensembles[k];
        let peer_losses = &ensembles[1 - k].1;
        let model = modeler.model(&NoiseModelInput {
            losses: peer_losses,
            observed_labels: &data.noisy_labels,
            epsilon: &ens.epsilon,
            class_count: data.class_count,
            r: cfg.r,
            min_class_size: cfg.min_class_size,
            gmm: cfg.gmm,
        })?;
        let correction = CorrectionState::build(model.omega.clone(), &data.noisy_labels, &ens.mean_probs, cfg.tau)?;
        nets.push(NetworkNoise {
            losses: losses.clone(),
            epsilon: ens.epsilon.clone(),
            mean_probs: ens.mean_probs.clone(),
            model,
            correction,
        });
    }
    let second = nets.pop().expect("two networks");
    let first = nets.pop().expect("two networks");
    Ok(NoiseRound {
        epoch,
        nets: [first, second],
    })
}

/// Draws batches of `size` from `pool` in shuffled order, reshuffling on wrap.
struct Cycler {
    pool: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(pool: &[usize], rng: &mut Rng) -> Self {
        let mut pool = pool.to_vec();
        pool.shuffle(rng);
        Cycler { pool, pos: 0 }
    }

    fn next(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        if self.pool.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.pool.len()) {
            if self.pos == self.pool.len() {
                self.pool.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.pool[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One semi-supervised epoch for one network on its split. Returns the mean
/// batch loss.
pub fn ssl_epoch(
    model: &mut ModelState,
    data: &Dataset,
    correction: &CorrectionState,
    cfg: &UlcConfig,
    epoch: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let labeled = &correction.labeled_idx;
    let unlabeled = &correction.unlabeled_idx;
    let driving = if labeled.is_empty() {
        unlabeled.len()
    } else {
        labeled.len()
    };
    let iters = driving.div_ceil(cfg.batch_size).max(1);
    let mut lab = Cycler::new(labeled, rng);
    let mut unl = Cycler::new(unlabeled, rng);
    let settings = SslSettings {
        lambda_u: cfg.lambda_u_at(epoch),
        samples: cfg.aleatoric_samples,
        aleatoric: cfg.aleatoric,
        uniform_prior_reg: cfg.uniform_prior_reg,
    };
    let mut total = 0.0;
    for _ in 0..iters {
        let li = lab.next(cfg.batch_size, rng);
        let ui = unl.next(cfg.batch_size, rng);
        let lx = data.features.select(Axis(0), &li);
        let ly = correction.corrected_labels.select(Axis(0), &li);
        let ux = data.features.select(Axis(0), &ui);
        let (xp, up) = mixmatch_lite(lx.view(), ly.view(), ux.view(), model, &cfg.mixmatch, rng)?;
        let mut out = ssl_losses(model, &xp, &up, &settings, rng).map_err(|e| match e {
            UlcError::Divergence(m) => UlcError::Divergence(format!("epoch {epoch}: {m}")),
            other => other,
        })?;
        apply_weight_decay(&mut out.grads, model, cfg.weight_decay);
        sgd_step(model, &out.grads, cfg.lr_at(epoch), cfg.momentum)?;
        total += out.total;
    }
    Ok(total / iters as f64)
}

/// Per-epoch driver holding both networks and their random streams.
pub struct Trainer {
    pub state: CoTeachingState,
    pub cfg: UlcConfig,
    modeler: Box<dyn NoiseModeler>,
    rngs: [Rng; 2],
}

impl Trainer {
    pub fn new(state: CoTeachingState, cfg: UlcConfig) -> Result<Self> {
        cfg.validate()?;
        let modeler = noise_modelers().create(&cfg.noise_model)?;
        let rngs = [
            rng_from(derive_seed(cfg.seed, stream::TRAIN_NET1)),
            rng_from(derive_seed(cfg.seed, stream::TRAIN_NET2)),
        ];
        Ok(Trainer {
            state,
            cfg,
            modeler,
            rngs,
        })
    }

    pub fn for_data(data: &Dataset, cfg: UlcConfig) -> Result<Self> {
        let state = CoTeachingState::new(data.dim(), data.class_count, &cfg)?;
        Trainer::new(state, cfg)
    }

    pub fn modeler(&self) -> &dyn NoiseModeler {
        self.modeler.as_ref()
    }

    pub fn warmup_epoch(&mut self, data: &Dataset, targets: &Array2<f64>, epoch: usize) -> Result<f64> {
        let mut total = 0.0;
        for k in 0..2 {
            total += ce_epoch(
                &mut self.state.nets[k],
                data.features.view(),
                targets,
                &self.cfg,
                epoch,
                &mut self.rngs[k],
            )?;
        }
        Ok(total / 2.0)
    }

    pub fn noise_round(&self, data: &Dataset, epoch: usize) -> Result<NoiseRound> {
        model_noise_epoch(&self.state, data, &self.cfg, self.modeler.as_ref(), epoch)
    }

    /// Installs the round's splits and trains each network on its own.
    pub fn ssl_step(&mut self, data: &Dataset, round: &NoiseRound, epoch: usize) -> Result<f64> {
        let mut total = 0.0;
        for k in 0..2 {
            let correction = &round.nets[k].correction;
            total += ssl_epoch(
                &mut self.state.nets[k],
                data,
                correction,
                &self.cfg,
                epoch,
                &mut self.rngs[k],
            )?;
            self.state.corrections[k] = Some(correction.clone());
        }
        Ok(total / 2.0)
    }
}

/// Test-set accuracy of the averaged networks.
pub fn evaluate(state: &CoTeachingState, test: &Dataset, minority: &[usize]) -> Result<crate::metrics::ClassAccuracy> {
    let probs = state.predict_proba(test.features.view())?;
    per_class_accuracy(&argmax_rows(&probs), &test.true_labels, test.class_count, minority)
}

/// Outcome of [`run_ulc`].
#[derive(Debug, Clone)]
pub struct UlcRun {
    pub state: CoTeachingState,
    pub epochs: Vec<EpochRecord>,
}

/// Full procedure: warm-up, then alternating noise rounds and SSL epochs
/// until `max_epochs`. Test accuracy is measured after every epoch.
pub fn run_ulc(train: &Dataset, test: &Dataset, cfg: &UlcConfig, observer: &mut dyn Observer) -> Result<UlcRun> {
    if train.dim() != test.dim() || train.class_count != test.class_count {
        return Err(UlcError::Shape(
            "train and test sets disagree on dimension or classes".into(),
        ));
    }
    let mut trainer = Trainer::for_data(train, cfg.clone())?;
    let targets = one_hot(&train.noisy_labels, train.class_count);
    let minority = &train.meta.minority_classes;
    let clean: Vec<bool> = train.is_noisy.iter().map(|n| !n).collect();
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    for epoch in 0..cfg.max_epochs {
        let (phase, loss, auc_value, labeled_fraction) = if epoch < cfg.warmup_epochs {
            (Phase::Warmup, trainer.warmup_epoch(train, &targets, epoch)?, None, None)
        } else {
            let round = trainer.noise_round(train, epoch)?;
            observer.on_round(&round, train)?;
            let a = auc(&round.mean_omega(), &clean).ok();
            let frac =
                0.5 * (round.nets[0].correction.labeled_fraction() + round.nets[1].correction.labeled_fraction());
            let loss = trainer.ssl_step(train, &round, epoch)?;
            (Phase::Ssl, loss, a, Some(frac))
        };
        let acc = evaluate(&trainer.state, test, minority)?;
        let record = EpochRecord::new(epoch, phase, loss, &acc, auc_value, labeled_fraction);
        log::debug!("epoch {epoch} {phase:?} loss {loss:.4} acc {:.4}", acc.overall);
        observer.on_epoch(&record)?;
        epochs.push(record);
    }
    Ok(UlcRun {
        state: trainer.state,
        epochs,
    })
}
