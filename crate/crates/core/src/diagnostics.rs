//! Stability diagnostics: the maximal Lyapunov exponent (from the spectrum of
//! the drift and from two-replica runs) and the mean-field amplification
//! factor with its variance fixed point.
//!
//! All exponents are continuous-time rates in inverse depth units. The
//! two-replica indicator is a per-step log growth and is divided by `dt`.

use rayon::prelude::*;

use crate::config::{derive_domain_seed, DynamicsParams, ModelVariant, SeedDomain};
use crate::dynamics::TrajectoryStats;
use crate::ensembles::{self, ConnectivityMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::GaussHermite;

pub const QUADRATURE_ORDER: usize = 64;
pub const DAMPING: f64 = 0.5;
pub const MAX_ITERATIONS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LyapunovMethod {
    SpectralAbscissa,
    TwoReplica,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LyapunovEstimate {
    pub value: f64,
    pub method: LyapunovMethod,
    pub stderr: f64,
}

/// `max Re eig(W) - gamma`, the growth rate of the linear drift `W - gamma I`.
pub fn lyapunov_spectral(
    params: &DynamicsParams,
    w: &ConnectivityMatrix,
) -> Result<LyapunovEstimate> {
    if w.dim() != params.n_units {
        return Err(Error::DimensionMismatch {
            expected: params.n_units,
            found: w.dim(),
        });
    }
    let abscissa = linalg::spectral_abscissa(&w.entries)?;
    Ok(LyapunovEstimate {
        value: abscissa - params.gamma,
        method: LyapunovMethod::SpectralAbscissa,
        stderr: 0.0,
    })
}

/// Mean per-step log growth of the replica separation, as a rate. Steps
/// before `stats.burn_in` are skipped so the alignment transient of the
/// initial offset does not bias the estimate.
pub fn lyapunov_replica(stats: &TrajectoryStats, dt: f64) -> Result<LyapunovEstimate> {
    let growth = stats
        .replica_log_growth
        .as_deref()
        .map(|g| &g[stats.burn_in.min(g.len())..])
        .filter(|g| !g.is_empty())
        .ok_or(Error::MissingData(
            "trajectory has no replica log-growth record",
        ))?;
    let count = growth.len() as f64;
    let mean = growth.iter().sum::<f64>() / count;
    let stderr = if growth.len() > 1 {
        let var = growth.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (count - 1.0);
        var.sqrt() / (count.sqrt() * dt)
    } else {
        0.0
    };
    Ok(LyapunovEstimate {
        value: mean / dt,
        method: LyapunovMethod::TwoReplica,
        stderr,
    })
}

/// Spectral growth rate at one genotype, over independent matrices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub sigma_w2: f64,
    pub lambda_mean: f64,
    /// Sample standard deviation over matrices (zero for a single matrix).
    pub lambda_std: f64,
    pub n_seeds: usize,
}

/// [`lyapunov_spectral`] over `n_seeds` matrices of the variant's ensemble
/// at every grid genotype. Matrix `r` of grid point `i` uses the sweep seed
/// `(i, r)`, so results do not depend on scheduling.
pub fn abscissa_sweep(
    variant: &ModelVariant,
    params: &DynamicsParams,
    grid: &[f64],
    n_seeds: usize,
    master_seed: u64,
) -> Result<Vec<SweepPoint>> {
    if n_seeds == 0 {
        return Err(Error::InvalidParameter(
            "sweep needs at least one seed".into(),
        ));
    }
    let tasks: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|i| (0..n_seeds).map(move |r| (i, r)))
        .collect();
    let lambdas = tasks
        .par_iter()
        .map(|&(i, r)| {
            let seed = derive_domain_seed(master_seed, SeedDomain::Sweep, i as u64, r as u64, 0);
            let w = ensembles::sample(variant, params.n_units, grid[i], seed)?;
            Ok(lyapunov_spectral(params, &w)?.value)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(grid
        .iter()
        .zip(lambdas.chunks(n_seeds))
        .map(|(&sigma_w2, l)| {
            let k = l.len() as f64;
            let mean = l.iter().sum::<f64>() / k;
            let lambda_std = if l.len() > 1 {
                (l.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            SweepPoint {
                sigma_w2,
                lambda_mean: mean,
                lambda_std,
                n_seeds,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
}

impl Activation {
    fn phi(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
        }
    }

    fn dphi(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanFieldResult {
    pub q_star: f64,
    pub chi: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Variance map `F(q) = sigma_w2 E[phi(sqrt(q) Z)^2]` and gain
/// `chi(q) = sigma_w2 E[phi'(sqrt(q) Z)^2]` under a fixed quadrature rule.
pub struct MeanField {
    rule: GaussHermite,
}

impl Default for MeanField {
    fn default() -> Self {
        MeanField {
            rule: GaussHermite::new(QUADRATURE_ORDER),
        }
    }
}

impl MeanField {
    pub fn with_order(order: usize) -> Self {
        MeanField {
            rule: GaussHermite::new(order),
        }
    }

    pub fn variance_map(&self, activation: Activation, sigma_w2: f64, q: f64) -> f64 {
        let s = q.max(0.0).sqrt();
        sigma_w2 * self.rule.expect(|z| activation.phi(s * z).powi(2))
    }

    pub fn gain(&self, activation: Activation, sigma_w2: f64, q: f64) -> f64 {
        let s = q.max(0.0).sqrt();
        sigma_w2 * self.rule.expect(|z| activation.dphi(s * z).powi(2))
    }

    /// Damped fixed-point iteration `q <- (1 - d) q + d F(q)` from `q = 1`.
    /// On hitting the iteration cap the error carries the iterate with the
    /// smallest residual.
    pub fn solve(
        &self,
        sigma_w2: f64,
        activation: Activation,
        tolerance: f64,
    ) -> Result<MeanFieldResult> {
        if !(sigma_w2.is_finite() && sigma_w2 >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma_w2 {sigma_w2} must be finite and nonnegative"
            )));
        }
        if tolerance.is_nan() || tolerance <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "tolerance {tolerance} must be positive"
            )));
        }
        if activation == Activation::Linear {
            // q = sigma_w2 q has only the trivial root off criticality; chi = sigma_w2
            return Ok(MeanFieldResult {
                q_star: 0.0,
                chi: sigma_w2,
                converged: true,
                iterations: 0,
            });
        }

        let mut q = 1.0;
        let mut best = (f64::INFINITY, q);
        for iteration in 0..MAX_ITERATIONS {
            let f = self.variance_map(activation, sigma_w2, q);
            let residual = (q - f).abs();
            if residual < best.0 {
                best = (residual, q);
            }
            if residual < tolerance {
                return Ok(MeanFieldResult {
                    q_star: q,
                    chi: self.gain(activation, sigma_w2, q),
                    converged: true,
                    iterations: iteration,
                });
            }
            q = (1.0 - DAMPING) * q + DAMPING * f;
        }
        let q = best.1;
        Err(Error::NonConvergence {
            best: MeanFieldResult {
                q_star: q,
                chi: self.gain(activation, sigma_w2, q),
                converged: false,
                iterations: MAX_ITERATIONS,
            },
        })
    }

    /// Bisection for `chi(sigma_w2) = 1` on `[0, 4]`.
    ///
    /// Right at the transition `q*` vanishes only algebraically and the fixed
    /// point may not reach `tolerance` within the cap; there the best iterate
    /// is used, whose gain is within the same tolerance of one.
    pub fn critical_sigma(&self, activation: Activation, tolerance: f64) -> Result<f64> {
        if tolerance.is_nan() || tolerance <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "tolerance {tolerance} must be positive"
            )));
        }
        if activation == Activation::Linear {
            return Ok(1.0);
        }
        let chi_at = |s: f64| -> Result<f64> {
            match self.solve(s, activation, tolerance * 1e-3) {
                Ok(r) => Ok(r.chi),
                Err(Error::NonConvergence { best }) => Ok(best.chi),
                Err(e) => Err(e),
            }
        };
        let (mut lo, mut hi) = (0.0, 4.0);
        let (mut chi_lo, mut chi_hi) = (chi_at(lo)?, chi_at(hi)?);
        if !(chi_lo < 1.0 && chi_hi > 1.0) {
            return Err(Error::BisectionFailure);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let chi_mid = chi_at(mid)?;
            // gain must be nondecreasing in the variance
            if chi_mid < chi_lo - tolerance || chi_mid > chi_hi + tolerance {
                return Err(Error::BisectionFailure);
            }
            if (chi_mid - 1.0).abs() < tolerance && hi - lo < tolerance {
                return Ok(mid);
            }
            if chi_mid < 1.0 {
                lo = mid;
                chi_lo = chi_mid;
            } else {
                hi = mid;
                chi_hi = chi_mid;
            }
        }
        Err(Error::BisectionFailure)
    }
}

/// Solves the variance fixed point and returns the amplification factor.
pub fn meanfield_chi(
    sigma_w2: f64,
    activation: Activation,
    tolerance: f64,
) -> Result<MeanFieldResult> {
    MeanField::default().solve(sigma_w2, activation, tolerance)
}

/// Variance at which the mean-field amplification factor crosses one.
pub fn critical_sigma(activation: Activation, tolerance: f64) -> Result<f64> {
    MeanField::default().critical_sigma(activation, tolerance)
}
