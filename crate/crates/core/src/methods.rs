//! Training methods selectable by name: `ulc` and the plain cross-entropy
//! baseline `ce`.

use crate::correction::{ce_epoch, one_hot, run_ulc, Observer, UlcConfig};
use crate::dataset::Dataset;
use crate::error::{Result, UlcError};
use crate::metrics::{argmax_rows, per_class_accuracy};
use crate::network::ModelState;
use crate::registry::Registry;
use crate::report::{EpochRecord, Phase, Report};
use crate::rng::{derive_seed, rng_from, stream};

/// Per-epoch records plus the trained networks.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub epochs: Vec<EpochRecord>,
    pub models: Vec<ModelState>,
}

pub trait TrainingMethod: Send + Sync {
    fn name(&self) -> &'static str;

    fn run(&self, train: &Dataset, test: &Dataset, cfg: &UlcConfig, observer: &mut dyn Observer) -> Result<MethodRun>;
}

pub struct Ulc;

impl TrainingMethod for Ulc {
    fn name(&self) -> &'static str {
        "ulc"
    }

    fn run(&self, train: &Dataset, test: &Dataset, cfg: &UlcConfig, observer: &mut dyn Observer) -> Result<MethodRun> {
        let run = run_ulc(train, test, cfg, observer)?;
        Ok(MethodRun {
            epochs: run.epochs,
            models: run.state.nets.to_vec(),
        })
    }
}

/// One network, cross-entropy on the observed labels for every epoch.
pub struct CrossEntropy;

impl TrainingMethod for CrossEntropy {
    fn name(&self) -> &'static str {
        "ce"
    }

    fn run(&self, train: &Dataset, test: &Dataset, cfg: &UlcConfig, observer: &mut dyn Observer) -> Result<MethodRun> {
        cfg.validate()?;
        if train.dim() != test.dim() || train.class_count != test.class_count {
            return Err(UlcError::Shape(
                "train and test sets disagree on dimension or classes".into(),
            ));
        }
        let cfg = UlcConfig {
            entropy_weight: 0.0,
            ..cfg.clone()
        };
        let mut net = ModelState::new(
            train.dim(),
            cfg.hidden_width,
            train.class_count,
            cfg.dropout,
            derive_seed(cfg.seed, stream::INIT_NET1),
        )?;
        let mut rng = rng_from(derive_seed(cfg.seed, stream::TRAIN_NET1));
        let targets = one_hot(&train.noisy_labels, train.class_count);
        let mut epochs = Vec::with_capacity(cfg.max_epochs);
        for epoch in 0..cfg.max_epochs {
            let loss = ce_epoch(&mut net, train.features.view(), &targets, &cfg, epoch, &mut rng)?;
            let preds = argmax_rows(&net.predict_proba(test.features.view())?);
            let acc = per_class_accuracy(
                &preds,
                &test.true_labels,
                test.class_count,
                &train.meta.minority_classes,
            )?;
            let record = EpochRecord::new(epoch, Phase::Ce, loss, &acc, None, None);
            observer.on_epoch(&record)?;
            epochs.push(record);
        }
        Ok(MethodRun {
            epochs,
            models: vec![net],
        })
    }
}

pub fn training_methods() -> Registry<dyn TrainingMethod> {
    let mut r: Registry<dyn TrainingMethod> = Registry::new("training method");
    r.register("ulc", || Box::new(Ulc))
        .register("ce", || Box::new(CrossEntropy));
    r
}

/// Runs `method` and wraps the epochs in a [`Report`] that echoes `cfg`.
pub fn train_with_models(
    method: &str,
    train: &Dataset,
    test: &Dataset,
    cfg: &UlcConfig,
    observer: &mut dyn Observer,
) -> Result<(Report, Vec<ModelState>)> {
    let m = training_methods().create(method)?;
    let run = m.run(train, test, cfg, observer)?;
    let report = Report::from_epochs(m.name(), cfg.seed, serde_json::to_value(cfg)?, run.epochs)?;
    Ok((report, run.models))
}

pub fn train_report(
    method: &str,
    train: &Dataset,
    test: &Dataset,
    cfg: &UlcConfig,
    observer: &mut dyn Observer,
) -> Result<Report> {
    train_with_models(method, train, test, cfg, observer).map(|(r, _)| r)
}

pub fn run_baseline_ce(train: &Dataset, test: &Dataset, cfg: &UlcConfig) -> Result<Report> {
    train_report("ce", train, test, cfg, &mut crate::correction::NoObserver)
}
