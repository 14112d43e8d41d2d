//! Dataset construction for experiments, seed sweeps and the noise-model
//! comparison measured from training rounds.

use serde::{Deserialize, Serialize};

use crate::correction::{NoiseRound, Observer};
use crate::dataset::{
    cyclic_asym_map, generate_blobs, generate_blobs_with_stream, inject_asymmetric_noise, inject_symmetric_noise,
    resample_imbalance, BlobConfig, Dataset, NoiseConvention, NoiseKind,
};
use crate::error::{Result, UlcError};
use crate::metrics::auc;
use crate::noise_model::{ClassAgnostic, ClassSpecific, GmmOptions, NoiseModelInput, NoiseModeler};
use crate::rng::stream;

/// Everything needed to regenerate a train/test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub class_count: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub center_spread: f64,
    pub within_std: f64,
    pub imbalance_ratio: f64,
    pub noise: NoiseKind,
    pub noise_rate: f64,
    pub convention: NoiseConvention,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            class_count: 4,
            dim: 16,
            per_class: 500,
            test_per_class: 250,
            center_spread: 1.0,
            within_std: 1.0,
            imbalance_ratio: 1.0,
            noise: NoiseKind::None,
            noise_rate: 0.0,
            convention: NoiseConvention::ExcludeSelf,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn blobs(&self) -> Result<BlobConfig> {
        BlobConfig::with_random_centers(
            self.class_count,
            self.dim,
            self.per_class,
            self.center_spread,
            self.within_std,
            self.seed,
        )
    }

    /// Imbalanced, noisy training set.
    pub fn train_set(&self) -> Result<Dataset> {
        let base = generate_blobs(&self.blobs()?)?;
        let data = if self.imbalance_ratio > 1.0 {
            resample_imbalance(&base, self.imbalance_ratio, self.seed)?
        } else {
            base
        };
        match self.noise {
            NoiseKind::None => Ok(data),
            NoiseKind::Symmetric => inject_symmetric_noise(&data, self.noise_rate, self.convention, self.seed),
            NoiseKind::Asymmetric => {
                inject_asymmetric_noise(&data, self.noise_rate, &cyclic_asym_map(self.class_count), self.seed)
            }
        }
    }

    /// Balanced, noise-free held-out set around the same centers.
    pub fn test_set(&self) -> Result<Dataset> {
        let mut blobs = self.blobs()?;
        blobs.per_class_count = vec![self.test_per_class; self.class_count];
        generate_blobs_with_stream(&blobs, stream::TEST_SET)
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        Ok((self.train_set()?, self.test_set()?))
    }
}

/// Runs `job` for each seed, on up to `jobs` threads. Results keep seed order.
pub fn run_seeds<T, F>(seeds: &[u64], jobs: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    if jobs <= 1 {
        return seeds.iter().map(|&s| job(s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| UlcError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        use rayon::prelude::*;
        seeds.par_iter().map(|&s| job(s)).collect()
    })
}

/// Clean-vs-noisy AUC for the three noise models on one set of losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantAuc {
    pub cam: f64,
    pub csm: f64,
    pub eucs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAucs {
    pub epoch: usize,
    pub all: VariantAuc,
    /// Restricted to samples whose observed label is a minority class.
    pub minority: Option<VariantAuc>,
    pub majority: Option<VariantAuc>,
}

fn variant_scores(
    round: &NoiseRound,
    train: &Dataset,
    k: usize,
    r: f64,
    min_class_size: usize,
    gmm: GmmOptions,
) -> Result<[Vec<f64>; 3]> {
    let input = NoiseModelInput {
        losses: &round.nets[1 - k].losses,
        observed_labels: &train.noisy_labels,
        epsilon: &round.nets[k].epsilon,
        class_count: train.class_count,
        r,
        min_class_size,
        gmm,
    };
    let cam = ClassAgnostic { uncertainty: false }.model(&input)?.p_loss;
    let cs = ClassSpecific { uncertainty: true }.model(&input)?;
    Ok([cam, cs.p_loss, cs.omega])
}

fn subset_auc(scores: &[Vec<f64>; 3], clean: &[bool], keep: &[usize]) -> Option<VariantAuc> {
    let labels: Vec<bool> = keep.iter().map(|&i| clean[i]).collect();
    let pick = |s: &Vec<f64>| -> Option<f64> {
        let sub: Vec<f64> = keep.iter().map(|&i| s[i]).collect();
        auc(&sub, &labels).ok()
    };
    Some(VariantAuc {
        cam: pick(&scores[0])?,
        csm: pick(&scores[1])?,
        eucs: pick(&scores[2])?,
    })
}

/// Scores the same round with every noise model, averaging the two networks.
pub fn variant_aucs(
    round: &NoiseRound,
    train: &Dataset,
    r: f64,
    min_class_size: usize,
    gmm: GmmOptions,
) -> Result<VariantAucs> {
    let clean: Vec<bool> = train.is_noisy.iter().map(|n| !n).collect();
    let minority = &train.meta.minority_classes;
    let all: Vec<usize> = (0..train.len()).collect();
    let (min_idx, maj_idx): (Vec<usize>, Vec<usize>) =
        all.iter().partition(|&&i| minority.contains(&train.noisy_labels[i]));
    let per_net = (0..2)
        .map(|k| {
            let s = variant_scores(round, train, k, r, min_class_size, gmm)?;
            Ok([
                subset_auc(&s, &clean, &all),
                subset_auc(&s, &clean, &min_idx),
                subset_auc(&s, &clean, &maj_idx),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let avg = |j: usize| -> Option<VariantAuc> {
        let a = per_net[0][j]?;
        let b = per_net[1][j]?;
        Some(VariantAuc {
            cam: 0.5 * (a.cam + b.cam),
            csm: 0.5 * (a.csm + b.csm),
            eucs: 0.5 * (a.eucs + b.eucs),
        })
    };
    Ok(VariantAucs {
        epoch: round.epoch,
        all: avg(0).ok_or_else(|| UlcError::UndefinedMetric("no clean or no noisy samples".into()))?,
        minority: avg(1),
        majority: avg(2),
    })
}

/// Collects [`variant_aucs`] for every noise round of a run.
pub struct VariantAucTracker {
    pub r: f64,
    pub min_class_size: usize,
    pub gmm: GmmOptions,
    pub rounds: Vec<VariantAucs>,
}

impl VariantAucTracker {
    pub fn new(cfg: &crate::correction::UlcConfig) -> Self {
        VariantAucTracker {
            r: cfg.r,
            min_class_size: cfg.min_class_size,
            gmm: cfg.gmm,
            rounds: Vec::new(),
        }
    }
}

impl Observer for VariantAucTracker {
    fn on_round(&mut self, round: &NoiseRound, train: &Dataset) -> Result<()> {
        self.rounds
            .push(variant_aucs(round, train, self.r, self.min_class_size, self.gmm)?);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_set_is_balanced_and_clean() {
        let cfg = DataConfig {
            imbalance_ratio: 10.0,
            noise: NoiseKind::Symmetric,
            noise_rate: 0.5,
            per_class: 100,
            test_per_class: 30,
            seed: 4,
            ..Default::default()
        };
        let (train, test) = cfg.datasets().unwrap();
        assert_eq!(test.class_counts(&test.true_labels), vec![30; 4]);
        assert_eq!(test.noise_fraction(), 0.0);
        assert_eq!(train.meta.minority_classes.len(), 2);
        assert!(train.noise_fraction() > 0.3);
        assert_eq!(cfg.datasets().unwrap().0, train);
    }

    #[test]
    fn seeds_keep_order_across_threads() {
        let seeds = [5, 1, 9, 3];
        let serial = run_seeds(&seeds, 1, |s| Ok(s * 2)).unwrap();
        let parallel = run_seeds(&seeds, 3, |s| Ok(s * 2)).unwrap();
        assert_eq!(serial, vec![10, 2, 18, 6]);
        assert_eq!(serial, parallel);
    }
}
