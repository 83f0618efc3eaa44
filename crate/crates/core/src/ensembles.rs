//! Random connectivity ensembles for the three model variants.
//!
//! Entries are drawn in row-major order from a ChaCha8 stream seeded with the
//! caller's seed, so a `(n, sigma_w2, seed)` triple always yields the same
//! matrix regardless of platform or thread.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{Ensemble, ModelVariant, PhaseConvention};
use crate::error::{Error, Result};
use crate::output::{fmt_f64, write_atomic};

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityMatrix {
    pub entries: DMatrix<f64>,
    /// Generating variance `sigma_w^2`; entries have variance `sigma_w^2 / n`.
    pub genotype: f64,
    pub ensemble: Ensemble,
    pub seed: u64,
}

impl ConnectivityMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// All-zero couplings, used to isolate the leak and noise terms.
    pub fn zeros(n: usize, ensemble: Ensemble) -> Self {
        ConnectivityMatrix {
            entries: DMatrix::zeros(n, n),
            genotype: 0.0,
            ensemble,
            seed: 0,
        }
    }

    pub fn from_entries(entries: DMatrix<f64>, ensemble: Ensemble) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimensionMismatch {
                expected: entries.nrows(),
                found: entries.ncols(),
            });
        }
        Ok(ConnectivityMatrix {
            entries,
            genotype: f64::NAN,
            ensemble,
            seed: 0,
        })
    }

    /// Dense CSV dump: a `#` comment line with the metadata, then one line per row.
    pub fn to_csv(&self) -> String {
        let n = self.dim();
        let mut out = format!(
            "# ensemble={} n={} genotype={} seed={}\n",
            self.ensemble,
            n,
            fmt_f64(self.genotype),
            self.seed
        );
        for i in 0..n {
            for j in 0..n {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", fmt_f64(self.entries[(i, j)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())?;
        Ok(())
    }
}

fn check_args(n: usize, sigma_w2: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "matrix dimension {n} must be at least 2"
        )));
    }
    if !(sigma_w2.is_finite() && sigma_w2 >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "variance {sigma_w2} must be finite and nonnegative"
        )));
    }
    Ok(())
}

fn gaussian_row_major(n: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] = std * z;
        }
    }
    m
}

/// Real Ginibre matrix: i.i.d. `N(0, sigma_w2 / n)` entries.
pub fn sample_ginibre(n: usize, sigma_w2: f64, seed: u64) -> Result<ConnectivityMatrix> {
    check_args(n, sigma_w2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = gaussian_row_major(n, (sigma_w2 / n as f64).sqrt(), &mut rng);
    Ok(ConnectivityMatrix {
        entries,
        genotype: sigma_w2,
        ensemble: Ensemble::Ginibre,
        seed,
    })
}

/// GOE-type symmetric matrix: off-diagonal variance `sigma_w2 / n`, diagonal
/// variance `2 sigma_w2 / n`. The bulk spectrum is the semicircle on
/// `[-2 sigma_w, 2 sigma_w]`.
pub fn sample_real_symmetric(n: usize, sigma_w2: f64, seed: u64) -> Result<ConnectivityMatrix> {
    check_args(n, sigma_w2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (sigma_w2 / n as f64).sqrt();
    let diag_std = std * std::f64::consts::SQRT_2;
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            if i == j {
                entries[(i, i)] = diag_std * z;
            } else {
                entries[(i, j)] = std * z;
                entries[(j, i)] = std * z;
            }
        }
    }
    Ok(ConnectivityMatrix {
        entries,
        genotype: sigma_w2,
        ensemble: Ensemble::RealSymmetric,
        seed,
    })
}

/// Ginibre draw modulated by independent phases `theta_ij ~ N(0, phase_std^2)`.
///
/// The Ginibre part consumes the stream first, so with `phase_std = 0` and the
/// sign-preserving convention the result equals [`sample_ginibre`] for the
/// same seed. No rescaling is applied: the entry variance shrinks by
/// `E[cos^2 theta] = (1 + exp(-2 phase_std^2)) / 2`.
pub fn sample_phased_ginibre(
    n: usize,
    sigma_w2: f64,
    phase_std: f64,
    convention: PhaseConvention,
    seed: u64,
) -> Result<ConnectivityMatrix> {
    check_args(n, sigma_w2)?;
    if !(phase_std.is_finite() && phase_std >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "phase_std {phase_std} must be finite and nonnegative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = gaussian_row_major(n, (sigma_w2 / n as f64).sqrt(), &mut rng);
    for i in 0..n {
        for j in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let c = (phase_std * z).cos();
            let g = entries[(i, j)];
            entries[(i, j)] = match convention {
                PhaseConvention::SignPreserving => g * c,
                PhaseConvention::Magnitude => g.abs() * c,
            };
        }
    }
    Ok(ConnectivityMatrix {
        entries,
        genotype: sigma_w2,
        ensemble: Ensemble::PhasedGinibre,
        seed,
    })
}

/// Draws from the ensemble selected by `variant`.
pub fn sample(
    variant: &ModelVariant,
    n: usize,
    sigma_w2: f64,
    seed: u64,
) -> Result<ConnectivityMatrix> {
    match variant.ensemble {
        Ensemble::Ginibre => sample_ginibre(n, sigma_w2, seed),
        Ensemble::RealSymmetric => sample_real_symmetric(n, sigma_w2, seed),
        Ensemble::PhasedGinibre => sample_phased_ginibre(
            n,
            sigma_w2,
            variant.phase_std,
            variant.phase_convention,
            seed,
        ),
    }
}

/// `E[cos^2 theta]` for `theta ~ N(0, phase_std^2)`.
pub fn phase_shrinkage(phase_std: f64) -> f64 {
    0.5 * (1.0 + (-2.0 * phase_std * phase_std).exp())
}
