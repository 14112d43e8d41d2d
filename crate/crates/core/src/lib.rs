//! Uncertainty-aware label correction for learning classifiers from noisy
//! labels on class-imbalanced data.
//!
//! The pipeline warms up two dropout MLPs, then alternates between
//! class-specific loss mixtures fused with MC-dropout uncertainty (to split
//! clean from noisy samples and refine labels) and semi-supervised training
//! under Gaussian logit corruption.

pub mod correction;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod methods;
pub mod metrics;
pub mod network;
pub mod noise_model;
pub mod registry;
pub mod report;
pub mod rng;
pub mod uncertainty;

pub use error::{Result, UlcError};
