use crate::error::Result;
use crate::registry::Registry;

use super::{clean_probability, fit_classwise, fit_gmm2, normalize_losses, GmmOptions, GmmScope};

/// Everything a noise modeler sees for one network and one epoch.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModelInput<'a> {
    /// Raw per-sample losses (normalized internally).
    pub losses: &'a [f64],
    pub observed_labels: &'a [usize],
    pub epsilon: &'a [f64],
    pub class_count: usize,
    pub r: f64,
    pub min_class_size: usize,
    pub gmm: GmmOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModelOutput {
    pub normalized_losses: Vec<f64>,
    /// Mixture posterior of the small-loss component.
    pub p_loss: Vec<f64>,
    /// Final clean probability (equals `p_loss` when uncertainty is not used).
    pub omega: Vec<f64>,
}

/// Maps per-sample losses (and optionally uncertainties) to clean probabilities.
pub trait NoiseModeler: Send + Sync {
    fn name(&self) -> &'static str;

    fn uses_uncertainty(&self) -> bool;

    fn model(&self, input: &NoiseModelInput<'_>) -> Result<NoiseModelOutput>;
}

fn fuse(
    p_loss: Vec<f64>,
    normalized_losses: Vec<f64>,
    input: &NoiseModelInput<'_>,
    use_eps: bool,
) -> Result<NoiseModelOutput> {
    let r = if use_eps { input.r } else { 0.0 };
    let omega = p_loss
        .iter()
        .zip(input.epsilon)
        .map(|(&p, &e)| clean_probability(p, e, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(NoiseModelOutput {
        normalized_losses,
        p_loss,
        omega,
    })
}

/// One mixture over every sample regardless of its label.
pub struct ClassAgnostic {
    pub uncertainty: bool,
}

impl NoiseModeler for ClassAgnostic {
    fn name(&self) -> &'static str {
        if self.uncertainty {
            "eu-cam"
        } else {
            "cam"
        }
    }

    fn uses_uncertainty(&self) -> bool {
        self.uncertainty
    }

    fn model(&self, input: &NoiseModelInput<'_>) -> Result<NoiseModelOutput> {
        let normalized = normalize_losses(input.losses);
        let gmm = fit_gmm2(&normalized, &input.gmm)?.with_scope(GmmScope::Global);
        let p_loss = normalized.iter().map(|&l| gmm.posterior_clean(l)).collect();
        fuse(p_loss, normalized, input, self.uncertainty)
    }
}

/// One mixture per observed label, with a global fallback for small classes.
pub struct ClassSpecific {
    pub uncertainty: bool,
}

impl NoiseModeler for ClassSpecific {
    fn name(&self) -> &'static str {
        if self.uncertainty {
            "eucs"
        } else {
            "csm"
        }
    }

    fn uses_uncertainty(&self) -> bool {
        self.uncertainty
    }

    fn model(&self, input: &NoiseModelInput<'_>) -> Result<NoiseModelOutput> {
        let normalized = normalize_losses(input.losses);
        let fits = fit_classwise(
            &normalized,
            input.observed_labels,
            input.class_count,
            input.min_class_size,
            &input.gmm,
        )?;
        let p_loss = normalized
            .iter()
            .zip(input.observed_labels)
            .map(|(&l, &c)| fits.posterior(c, l))
            .collect();
        fuse(p_loss, normalized, input, self.uncertainty)
    }
}

/// Built-in modelers: `cam`, `eu-cam`, `csm`, `eucs`.
pub fn noise_modelers() -> Registry<dyn NoiseModeler> {
    let mut r: Registry<dyn NoiseModeler> = Registry::new("noise model");
    r.register("cam", || Box::new(ClassAgnostic { uncertainty: false }))
        .register("eu-cam", || Box::new(ClassAgnostic { uncertainty: true }))
        .register("csm", || Box::new(ClassSpecific { uncertainty: false }))
        .register("eucs", || Box::new(ClassSpecific { uncertainty: true }));
    r
}
