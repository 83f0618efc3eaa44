//! Simulated and theoretical power spectra.
//!
//! Spectra are two-sided densities in angular frequency,
//! `S(omega) = ∫ C(tau) exp(-i omega tau) dtau`, so the Ornstein–Uhlenbeck
//! baseline is the Lorentzian `2 kappa / (omega^2 + gamma^2)` and
//! `∫ S d omega / 2 pi` over `(-pi/dt, pi/dt)` is the variance.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::config::DynamicsParams;
use crate::dynamics::TrajectoryStats;
use crate::error::{Error, Result};
use crate::output::{fmt_f64, CsvTable};

/// Band points closer than this to the `omega^2 + gamma^2 = sigma_w^2` pole
/// (or past it) are left out of the spectral fitness term.
pub const NEAR_POLE_GUARD: f64 = 1e-6;

fn pole_denominator(omega: f64, gamma: f64, sigma_w2: f64) -> Result<(f64, f64)> {
    let base = omega * omega + gamma * gamma;
    let denominator = base - sigma_w2;
    if denominator.abs() <= 8.0 * f64::EPSILON * (base + sigma_w2.abs()) {
        return Err(Error::Pole { omega, denominator });
    }
    Ok((base, denominator))
}

/// Free Ornstein–Uhlenbeck kernel `c(omega) = 2 kappa / (omega^2 + gamma^2)`.
pub fn ou_kernel(omega: f64, gamma: f64, kappa: f64) -> f64 {
    2.0 * kappa / (omega * omega + gamma * gamma)
}

/// Leading-order correlator
/// `X0 = c(omega) (omega^2 + gamma^2) / (omega^2 + gamma^2 - sigma_w2)`.
pub fn x0(omega: f64, gamma: f64, kappa: f64, sigma_w2: f64) -> Result<f64> {
    let (base, d) = pole_denominator(omega, gamma, sigma_w2)?;
    Ok(ou_kernel(omega, gamma, kappa) * base / d)
}

/// Finite-width correction
/// `X1 = (sigma_w2 / 2) c(omega) (omega^2 + gamma^2) / (omega^2 + gamma^2 - sigma_w2)^2`.
pub fn x1(omega: f64, gamma: f64, kappa: f64, sigma_w2: f64) -> Result<f64> {
    let (base, d) = pole_denominator(omega, gamma, sigma_w2)?;
    Ok(0.5 * sigma_w2 * ou_kernel(omega, gamma, kappa) * base / (d * d))
}

/// `X_th = X0 + (gamma T / N) X1` on every grid point.
pub fn x_theory(grid: &[f64], params: &DynamicsParams, sigma_w2: f64) -> Result<Vec<f64>> {
    let prefactor = params.finite_width_prefactor();
    grid.iter()
        .map(|&w| {
            let a = x0(w, params.gamma, params.kappa, sigma_w2)?;
            let b = x1(w, params.gamma, params.kappa, sigma_w2)?;
            Ok(a + prefactor * b)
        })
        .collect()
}

/// Simulated spectrum next to the theoretical curves on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumPair {
    pub omega: Vec<f64>,
    pub x_sim: Vec<f64>,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub x_th: Vec<f64>,
    /// `gamma T / N` used to combine `x0` and `x1`.
    pub prefactor: f64,
    pub n_seeds_averaged: usize,
    pub sigma_w2: f64,
    pub gamma: f64,
}

/// Agreement of a simulated spectrum with the theory over a band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandAgreement {
    pub relmse: f64,
    pub mean_rel_dev: f64,
    /// Band points dropped by the near-pole guard.
    pub excluded: usize,
}

impl SpectrumPair {
    pub fn new(
        omega: Vec<f64>,
        x_sim: Vec<f64>,
        params: &DynamicsParams,
        sigma_w2: f64,
        n_seeds_averaged: usize,
    ) -> Result<Self> {
        if omega.len() != x_sim.len() {
            return Err(Error::DimensionMismatch {
                expected: omega.len(),
                found: x_sim.len(),
            });
        }
        if omega.windows(2).any(|w| w[1] <= w[0]) || omega.first().is_some_and(|&w| w <= 0.0) {
            return Err(Error::InvalidInput(
                "frequency grid must be positive and strictly increasing".into(),
            ));
        }
        let prefactor = params.finite_width_prefactor();
        let mut v0 = Vec::with_capacity(omega.len());
        let mut v1 = Vec::with_capacity(omega.len());
        for &w in &omega {
            v0.push(x0(w, params.gamma, params.kappa, sigma_w2)?);
            v1.push(x1(w, params.gamma, params.kappa, sigma_w2)?);
        }
        let x_th = v0.iter().zip(&v1).map(|(a, b)| a + prefactor * b).collect();
        Ok(SpectrumPair {
            omega,
            x_sim,
            x0: v0,
            x1: v1,
            x_th,
            prefactor,
            n_seeds_averaged,
            sigma_w2,
            gamma: params.gamma,
        })
    }

    /// RelMSE and mean relative deviation of `x_sim` from `x_th` over
    /// `[band_min, band_max]`, skipping points next to the pole.
    pub fn band_agreement(&self, band_min: f64, band_max: f64) -> Result<BandAgreement> {
        let (kept, _) = pole_free_points(&self.omega, self.gamma, self.sigma_w2);
        let pick = |v: &[f64]| kept.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let (grid, sim, th) = (pick(&self.omega), pick(&self.x_sim), pick(&self.x_th));
        let in_band = |v: &[f64]| {
            v.iter()
                .filter(|&&w| w >= band_min && w <= band_max)
                .count()
        };
        Ok(BandAgreement {
            relmse: relmse_band(&sim, &th, &grid, band_min, band_max)?,
            mean_rel_dev: band_mean_rel_dev(&sim, &th, &grid, band_min, band_max)?,
            excluded: in_band(&self.omega) - in_band(&grid),
        })
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut table = CsvTable::new(&["omega", "x_sim", "x0", "x1", "x_th"]);
        for i in 0..self.omega.len() {
            table.push_row(
                [
                    self.omega[i],
                    self.x_sim[i],
                    self.x0[i],
                    self.x1[i],
                    self.x_th[i],
                ]
                .map(fmt_f64),
            );
        }
        table
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.to_csv().write_to(path)?;
        Ok(())
    }
}

/// Welch estimator with a periodic Hann window and half-overlapping segments.
///
/// Segments are not detrended. The simulated process has zero mean by
/// construction, and subtracting a segment mean removes low-frequency power
/// that the window then leaks out of the first bin (about 20% at the
/// reference segment length).
pub struct Welch {
    segment: usize,
    hop: usize,
    window: Vec<f64>,
    window_power: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl Welch {
    pub fn new(segment: usize) -> Self {
        assert!(segment >= 2, "segment length must be at least 2");
        let window: Vec<f64> = (0..segment)
            .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / segment as f64).cos()))
            .collect();
        let window_power = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(segment);
        Welch {
            segment,
            hop: segment / 2,
            window,
            window_power,
            fft,
        }
    }

    /// Segment length giving `segments` half-overlapping segments over `samples`.
    pub fn segment_length(samples: usize, segments: usize) -> usize {
        2 * samples / (segments + 1)
    }

    pub fn segment(&self) -> usize {
        self.segment
    }

    /// Number of segments that fit into `samples`.
    pub fn count(&self, samples: usize) -> usize {
        if samples < self.segment {
            0
        } else {
            (samples - self.segment) / self.hop + 1
        }
    }

    /// Bins `k = 0 ..= segment / 2` averaged over all segments of all series.
    /// `series` yields equally long sample vectors.
    pub fn one_sided_bins<'a, I>(&self, series: I, dt: f64) -> Vec<f64>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let m = self.segment;
        let half = m / 2;
        let mut acc = vec![0.0; half + 1];
        let mut buf = vec![Complex::new(0.0, 0.0); m];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut periodograms = 0usize;
        for x in series {
            for s in 0..self.count(x.len()) {
                let seg = &x[s * self.hop..s * self.hop + m];
                for ((b, &v), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                    *b = Complex::new(v * w, 0.0);
                }
                self.fft.process_with_scratch(&mut buf, &mut scratch);
                for (a, b) in acc.iter_mut().zip(&buf) {
                    *a += b.norm_sqr();
                }
                periodograms += 1;
            }
        }
        let scale = dt / (self.window_power * periodograms.max(1) as f64);
        acc.iter_mut().for_each(|a| *a *= scale);
        acc
    }

    /// Angular frequency of bin `k`.
    pub fn omega(&self, k: usize, dt: f64) -> f64 {
        2.0 * std::f64::consts::PI * k as f64 / (self.segment as f64 * dt)
    }
}

/// Welch spectrum of every unit's recorded series, averaged over units.
/// Returns the positive frequency grid `omega_m = 2 pi m / (segment dt)`,
/// `m = 1 ..= segment / 2`, and the density on it.
pub fn estimate_psd(
    stats: &TrajectoryStats,
    params: &DynamicsParams,
    segments: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let samples = stats.n_recorded();
    let segment = Welch::segment_length(samples, segments);
    if segments < 1 || segment < 4 || samples < 2 * segment {
        return Err(Error::InsufficientData { samples, segment });
    }
    let welch = Welch::new(segment);
    let series: Vec<Vec<f64>> = (0..stats.n_units)
        .map(|u| stats.unit_series(u).collect())
        .collect();
    let bins = welch.one_sided_bins(series.iter().map(Vec::as_slice), params.dt);
    let grid = (1..bins.len()).map(|k| welch.omega(k, params.dt)).collect();
    Ok((grid, bins[1..].to_vec()))
}

fn band_points(grid: &[f64], band_min: f64, band_max: f64) -> Vec<usize> {
    grid.iter()
        .enumerate()
        .filter(|(_, &w)| w >= band_min && w <= band_max)
        .map(|(i, _)| i)
        .collect()
}

fn relative_errors(
    sim: &[f64],
    theory: &[f64],
    grid: &[f64],
    band_min: f64,
    band_max: f64,
) -> Result<Vec<f64>> {
    if sim.len() != grid.len() || theory.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            found: sim.len().min(theory.len()),
        });
    }
    let idx = band_points(grid, band_min, band_max);
    if idx.len() < 3 {
        return Err(Error::EmptyBand {
            band_min,
            band_max,
            points: idx.len(),
        });
    }
    idx.into_iter()
        .map(|i| {
            if theory[i] == 0.0 || !theory[i].is_finite() {
                Err(Error::ZeroTheory { omega: grid[i] })
            } else {
                Ok((sim[i] - theory[i]) / theory[i])
            }
        })
        .collect()
}

/// Mean over band points of `((sim - theory) / theory)^2`.
pub fn relmse_band(
    sim: &[f64],
    theory: &[f64],
    grid: &[f64],
    band_min: f64,
    band_max: f64,
) -> Result<f64> {
    let rel = relative_errors(sim, theory, grid, band_min, band_max)?;
    Ok(rel.iter().map(|r| r * r).sum::<f64>() / rel.len() as f64)
}

/// Mean over band points of `|sim - theory| / theory`.
pub fn band_mean_rel_dev(
    sim: &[f64],
    theory: &[f64],
    grid: &[f64],
    band_min: f64,
    band_max: f64,
) -> Result<f64> {
    let rel = relative_errors(sim, theory, grid, band_min, band_max)?;
    Ok(rel.iter().map(|r| r.abs()).sum::<f64>() / rel.len() as f64)
}

/// Grid indices where the theoretical curve is usable for `sigma_w2`: the
/// denominator `omega^2 + gamma^2 - sigma_w2` must be at least
/// [`NEAR_POLE_GUARD`] in magnitude. Returns the kept indices and the number
/// dropped.
///
/// Points beyond the pole (negative denominator, only possible above
/// `sigma_w2 = gamma^2`) are kept: the curve there is negative, so they score
/// as a large mismatch instead of silently leaving the band.
pub fn pole_free_points(grid: &[f64], gamma: f64, sigma_w2: f64) -> (Vec<usize>, usize) {
    let kept: Vec<usize> = grid
        .iter()
        .enumerate()
        .filter(|(_, &w)| (w * w + gamma * gamma - sigma_w2).abs() >= NEAR_POLE_GUARD)
        .map(|(i, _)| i)
        .collect();
    let dropped = grid.len() - kept.len();
    (kept, dropped)
}
