//! Experiment description: dynamics, measurement, evolution and fitness
//! parameters plus the model variant, with validation, TOML (de)serialization
//! and deterministic seed derivation.
//!
//! The on-disk format is TOML with one table per parameter group. Unknown keys
//! are rejected. See `configs/` in the repository root for the reference files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Linear stochastic depth dynamics `h <- h + dt (-gamma h + W h) + sqrt(2 kappa dt) eta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsParams {
    pub n_units: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub gamma: f64,
    pub kappa: f64,
}

impl DynamicsParams {
    /// Total depth `T = n_steps * dt`.
    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    /// Prefactor `gamma T / N` of the finite-width spectral correction.
    pub fn finite_width_prefactor(&self) -> f64 {
        self.gamma * self.horizon() / self.n_units as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_units < 2 {
            return Err(Error::validation("dynamics.n_units", "must be at least 2"));
        }
        if self.n_steps < 2 {
            return Err(Error::validation("dynamics.n_steps", "must be at least 2"));
        }
        positive("dynamics.dt", self.dt)?;
        positive("dynamics.gamma", self.gamma)?;
        positive("dynamics.kappa", self.kappa)?;
        if !self.horizon().is_finite() {
            return Err(Error::validation(
                "dynamics.dt",
                "horizon n_steps * dt is not finite",
            ));
        }
        Ok(())
    }
}

/// How trajectories are turned into spectra.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementParams {
    /// Leading steps discarded before the spectrum is estimated.
    pub burn_in: usize,
    /// Number of half-overlapping Welch segments.
    pub psd_segments: usize,
    /// Seeds averaged for the final best-individual spectrum.
    pub snapshot_seeds: usize,
}

impl MeasurementParams {
    pub fn validate(&self, dynamics: &DynamicsParams) -> Result<()> {
        if self.burn_in >= dynamics.n_steps {
            return Err(Error::validation(
                "measurement.burn_in",
                "must be smaller than dynamics.n_steps",
            ));
        }
        if self.psd_segments < 3 {
            return Err(Error::validation(
                "measurement.psd_segments",
                "must be at least 3",
            ));
        }
        let recorded = dynamics.n_steps - self.burn_in;
        let segment = 2 * recorded / (self.psd_segments + 1);
        if segment < 8 {
            return Err(Error::validation(
                "measurement.psd_segments",
                format!("leaves segments of {segment} samples from {recorded} recorded steps"),
            ));
        }
        if self.snapshot_seeds == 0 {
            return Err(Error::validation(
                "measurement.snapshot_seeds",
                "must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionParams {
    pub population: usize,
    pub generations: usize,
    pub init_low: f64,
    pub init_high: f64,
    pub mut_std0: f64,
    pub mut_decay: f64,
    pub beta0: f64,
    pub beta_growth: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub n_seeds: usize,
    /// Carry the best individual over unchanged. Off in the reference runs.
    #[serde(default)]
    pub elitism: bool,
}

impl EvolutionParams {
    /// Mutation standard deviation applied when breeding from generation `k`.
    pub fn mutation_std(&self, generation: usize) -> f64 {
        self.mut_std0 * self.mut_decay.powi(generation as i32)
    }

    /// Inverse temperature used to select parents from generation `k`.
    pub fn beta(&self, generation: usize) -> f64 {
        self.beta0 * self.beta_growth.powi(generation as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::validation(
                "evolution.population",
                "must be positive",
            ));
        }
        if self.generations == 0 {
            return Err(Error::validation(
                "evolution.generations",
                "must be positive",
            ));
        }
        if self.n_seeds == 0 {
            return Err(Error::validation("evolution.n_seeds", "must be positive"));
        }
        finite("evolution.init_low", self.init_low)?;
        finite("evolution.init_high", self.init_high)?;
        finite("evolution.clip_low", self.clip_low)?;
        finite("evolution.clip_high", self.clip_high)?;
        if self.init_low >= self.init_high {
            return Err(Error::validation(
                "evolution.init_low",
                "must be below evolution.init_high",
            ));
        }
        if self.clip_low < 0.0 {
            return Err(Error::validation(
                "evolution.clip_low",
                "variances cannot be negative",
            ));
        }
        if self.clip_low > self.init_low {
            return Err(Error::validation(
                "evolution.clip_low",
                "must not exceed evolution.init_low",
            ));
        }
        if self.clip_high < self.init_high {
            return Err(Error::validation(
                "evolution.clip_high",
                "must not be below evolution.init_high",
            ));
        }
        // zero is allowed: it switches mutation off
        if !(self.mut_std0.is_finite() && self.mut_std0 >= 0.0) {
            return Err(Error::validation(
                "evolution.mut_std0",
                "must be finite and nonnegative",
            ));
        }
        if !(self.mut_decay > 0.0 && self.mut_decay <= 1.0) {
            return Err(Error::validation(
                "evolution.mut_decay",
                "must lie in (0, 1]",
            ));
        }
        positive("evolution.beta0", self.beta0)?;
        if !(self.beta_growth.is_finite() && self.beta_growth >= 1.0) {
            return Err(Error::validation(
                "evolution.beta_growth",
                "must be finite and at least 1",
            ));
        }
        if !self.beta(self.generations.saturating_sub(1)).is_finite() {
            return Err(Error::validation(
                "evolution.beta_growth",
                "annealed beta overflows",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitnessWeights {
    pub w_spec: f64,
    pub w_lambda: f64,
    pub w_crit: f64,
    /// Lower edge of the spectral band. Kept above zero to stay clear of the
    /// near-critical pole at the origin.
    pub band_min: f64,
    pub band_max: f64,
}

impl FitnessWeights {
    pub fn validate(&self) -> Result<()> {
        nonnegative("fitness.w_spec", self.w_spec)?;
        nonnegative("fitness.w_lambda", self.w_lambda)?;
        nonnegative("fitness.w_crit", self.w_crit)?;
        nonnegative("fitness.band_min", self.band_min)?;
        positive("fitness.band_max", self.band_max)?;
        if self.band_min >= self.band_max {
            return Err(Error::validation(
                "fitness.band_min",
                "must be below fitness.band_max",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelTag {
    A,
    B,
    C,
}

impl ModelTag {
    pub const ALL: [ModelTag; 3] = [ModelTag::A, ModelTag::B, ModelTag::C];

    pub fn ensemble(self) -> Ensemble {
        match self {
            ModelTag::A => Ensemble::Ginibre,
            ModelTag::B => Ensemble::RealSymmetric,
            ModelTag::C => Ensemble::PhasedGinibre,
        }
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelTag::A => "A",
            ModelTag::B => "B",
            ModelTag::C => "C",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(ModelTag::A),
            "B" | "b" => Ok(ModelTag::B),
            "C" | "c" => Ok(ModelTag::C),
            other => Err(Error::InvalidParameter(format!(
                "unknown model `{other}`, expected A, B or C"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ensemble {
    Ginibre,
    RealSymmetric,
    PhasedGinibre,
}

impl fmt::Display for Ensemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ensemble::Ginibre => "ginibre",
            Ensemble::RealSymmetric => "real-symmetric",
            Ensemble::PhasedGinibre => "phased-ginibre",
        };
        f.write_str(s)
    }
}

/// How the phase `theta_ij` modulates a Ginibre draw `G_ij`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseConvention {
    /// `W_ij = G_ij cos(theta_ij)`: the phase fluctuates around the entry's
    /// own phase (0 or pi), so the couplings stay zero-mean.
    #[default]
    SignPreserving,
    /// `W_ij = |G_ij| cos(theta_ij)`: every coupling is nonnegative and the
    /// matrix acquires a Perron eigenvalue of order `sqrt(N) sigma_w`.
    Magnitude,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelVariant {
    pub tag: ModelTag,
    pub ensemble: Ensemble,
    #[serde(default)]
    pub phase_std: f64,
    #[serde(default)]
    pub phase_convention: PhaseConvention,
}

impl ModelVariant {
    pub fn reference(tag: ModelTag) -> Self {
        ModelVariant {
            tag,
            ensemble: tag.ensemble(),
            phase_std: if tag == ModelTag::C { 0.3 } else { 0.0 },
            phase_convention: PhaseConvention::SignPreserving,
        }
    }

    pub fn validate(&self, fitness: &FitnessWeights) -> Result<()> {
        nonnegative("variant.phase_std", self.phase_std)?;
        if self.ensemble != self.tag.ensemble() {
            return Err(Error::validation(
                "variant.ensemble",
                format!(
                    "model {} requires the {} ensemble, got {}",
                    self.tag,
                    self.tag.ensemble(),
                    self.ensemble
                ),
            ));
        }
        match self.tag {
            ModelTag::A if fitness.w_crit != 0.0 => Err(Error::validation(
                "fitness.w_crit",
                "must be 0 for model A (no critical anchor)",
            )),
            ModelTag::B | ModelTag::C if fitness.w_crit <= 0.0 => Err(Error::validation(
                "fitness.w_crit",
                format!("must be positive for model {}", self.tag),
            )),
            ModelTag::C if self.phase_std <= 0.0 => Err(Error::validation(
                "variant.phase_std",
                "must be positive for model C",
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub dynamics: DynamicsParams,
    pub measurement: MeasurementParams,
    pub evolution: EvolutionParams,
    pub fitness: FitnessWeights,
    pub variant: ModelVariant,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    self.schema_version
                ),
            ));
        }
        if self.master_seed > i64::MAX as u64 {
            // TOML integers are signed 64-bit
            return Err(Error::validation(
                "master_seed",
                format!("{} exceeds {}", self.master_seed, i64::MAX),
            ));
        }
        self.dynamics.validate()?;
        self.measurement.validate(&self.dynamics)?;
        self.evolution.validate()?;
        self.fitness.validate()?;
        self.variant.validate(&self.fitness)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::output::write_atomic(path, self.to_toml().as_bytes())?;
        Ok(())
    }
}

/// Reads and validates an experiment file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    ExperimentConfig::from_toml(&text, path)
}

/// Reference setup shared by the three models: N = 256, L = 2000, dt = 0.05,
/// gamma = kappa = 1, P = 48, K = 100, initial variances uniform on
/// [0.30, 1.30] and mutation std `0.02 * 0.98^k`.
pub fn reference_config(tag: ModelTag) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        master_seed: 0,
        out_dir: PathBuf::from("out"),
        dynamics: DynamicsParams {
            n_units: 256,
            n_steps: 2000,
            dt: 0.05,
            gamma: 1.0,
            kappa: 1.0,
        },
        measurement: MeasurementParams {
            burn_in: 500,
            psd_segments: 8,
            snapshot_seeds: 8,
        },
        evolution: EvolutionParams {
            population: 48,
            generations: 100,
            init_low: 0.30,
            init_high: 1.30,
            mut_std0: 0.02,
            mut_decay: 0.98,
            beta0: 5.0,
            beta_growth: 1.05,
            clip_low: 0.30,
            clip_high: 1.30,
            n_seeds: 4,
            elitism: false,
        },
        fitness: FitnessWeights {
            w_spec: 1.0,
            w_lambda: 1.0,
            w_crit: if tag == ModelTag::A { 0.0 } else { 1.0 },
            band_min: 0.1,
            band_max: 2.0,
        },
        variant: ModelVariant::reference(tag),
    }
}

/// Independent random streams drawn from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SeedDomain {
    /// Connectivity matrix of one evaluation replica.
    Matrix,
    /// Noise driving the trajectory of one evaluation replica.
    Noise,
    /// Initial population.
    Init,
    /// Parent sampling in one generation.
    Selection,
    /// Mutation of one child.
    Mutation,
    /// Replicas of a standalone spectrum snapshot.
    Snapshot,
    /// Matrices of a growth-rate sweep over the genotype axis.
    Sweep,
}

impl SeedDomain {
    fn label(self) -> &'static [u8] {
        match self {
            SeedDomain::Matrix => b"matrix",
            SeedDomain::Noise => b"noise",
            SeedDomain::Init => b"init",
            SeedDomain::Selection => b"selection",
            SeedDomain::Mutation => b"mutation",
            SeedDomain::Snapshot => b"snapshot",
            SeedDomain::Sweep => b"sweep",
        }
    }
}

/// Seed for evaluation replica `replica` of individual `individual` in
/// generation `generation`. Pure function of its arguments.
pub fn derive_seed(master_seed: u64, generation: u64, individual: u64, replica: u64) -> u64 {
    derive_domain_seed(
        master_seed,
        SeedDomain::Matrix,
        generation,
        individual,
        replica,
    )
}

/// SHA-256 of the domain label and the index tuple, truncated to 64 bits.
pub fn derive_domain_seed(master_seed: u64, domain: SeedDomain, a: u64, b: u64, c: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"marginal-evo/seed/v1/");
    hasher.update(domain.label());
    hasher.update([0u8]);
    for word in [master_seed, a, b, c] {
        hasher.update(word.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn finite(field: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, "must be finite"))
    }
}

fn positive(field: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::validation(field, "must be finite and positive"))
    }
}

fn nonnegative(field: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(Error::validation(field, "must be finite and nonnegative"))
    }
}
