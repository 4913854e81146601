//! Variational Bayes training and adaptation of simplified PLDA models.
//!
//! The model is `φ_ij = μ + V y_i + ε_ij` with `y_i ~ N(0, I)` and
//! `ε_ij ~ N(0, W⁻¹)`. Seven prior schemes on `(V, μ, W)` are supported; see
//! [`Variant`].

pub mod data;
pub mod elbo;
pub mod engine;
pub mod error;
pub mod hyperopt;
pub mod io;
pub mod linalg;
pub mod model;
pub mod numerics;
pub mod posterior;
pub mod synth;

pub use data::{accumulate, Dataset, SpeakerPartition, SpeakerStats, SuffStats};
pub use elbo::{elbo_total, ElboBreakdown};
pub use engine::{fit, fit_stats, AnnealStep, FitConfig, FitOutput, FitReport, VariationalState};
pub use error::{Error, Result};
pub use io::TrainedModel;
pub use model::{ModelParams, PriorConfig, RowPrior, VPrior, Variant, WPrior};
pub use posterior::{QAlpha, QVtilde, QW, QY};
pub use synth::{sample, GenSpec, Sample, SplitMix64};
