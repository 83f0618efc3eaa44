//! Evolutionary search over the weight variance `sigma_w^2` of a linear
//! stochastic network, steered toward marginal stability.
//!
//! The pipeline for one candidate variance: draw connectivity matrices from
//! the model's ensemble ([`ensembles`]), integrate the noisy linear dynamics
//! ([`dynamics`]), estimate their power spectrum ([`spectra`]) and growth
//! rate ([`diagnostics`]), and score the candidate ([`evolution`]). A
//! population of candidates then goes through Boltzmann selection, Gaussian
//! mutation and clipping, generation after generation.

pub mod config;
pub mod diagnostics;
pub mod dynamics;
pub mod ensembles;
pub mod error;
pub mod evolution;
pub mod linalg;
pub mod output;
pub mod quadrature;
pub mod spectra;

pub use config::{
    derive_domain_seed, derive_seed, load_config, reference_config, DynamicsParams, Ensemble,
    EvolutionParams, ExperimentConfig, FitnessWeights, MeasurementParams, ModelTag, ModelVariant,
    PhaseConvention, SeedDomain,
};
pub use diagnostics::{Activation, LyapunovEstimate, LyapunovMethod, MeanFieldResult, SweepPoint};
pub use dynamics::TrajectoryStats;
pub use ensembles::ConnectivityMatrix;
pub use error::{Error, Result};
pub use evolution::{FitnessBreakdown, GenerationRecord, Genotype};
pub use spectra::SpectrumPair;
