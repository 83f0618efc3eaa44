//! Fitness, selection, mutation and the generation loop.
//!
//! The fitness of a variance `sigma_w^2` is
//!
//! ```text
//! F = w_spec RelMSE_band[X_sim, X_th] + w_lambda lambda_max^2 + w_crit (sigma_w^2 - gamma^2)^2
//! ```
//!
//! where `X_sim` is the Welch spectrum averaged over `n_seeds` independent
//! (matrix, noise) replicas and `lambda_max` is the mean spectral abscissa of
//! `W - gamma I` over the same matrices. Lower is better.

use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::{
    derive_domain_seed, derive_seed, EvolutionParams, ExperimentConfig, SeedDomain,
};
use crate::diagnostics::lyapunov_spectral;
use crate::dynamics::simulate;
use crate::ensembles::{self, ConnectivityMatrix};
use crate::error::{Error, Result};
use crate::output::{fmt_f64, CsvTable};
use crate::spectra::{estimate_psd, pole_free_points, relmse_band, x_theory, SpectrumPair};

/// Base fitness of a candidate whose simulation blew up or whose spectrum
/// could not be scored. The squared growth rate is added on top so such
/// candidates still rank by how unstable they are.
pub const DIVERGENCE_PENALTY: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Genotype {
    pub sigma_w2: f64,
}

impl Genotype {
    pub fn new(sigma_w2: f64) -> Self {
        Genotype { sigma_w2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitnessBreakdown {
    pub spec_term: f64,
    pub lambda_term: f64,
    pub crit_term: f64,
    /// Sum of the three terms, or the divergence penalty when `diverged`.
    pub total: f64,
    /// Mean spectral-abscissa exponent over the sampled matrices.
    pub lambda_value: f64,
    pub relmse: f64,
    pub diverged: bool,
    /// Band points dropped by the near-pole guard.
    pub excluded_points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub genotypes: Vec<Genotype>,
    pub fitness: Vec<FitnessBreakdown>,
    pub mean_sigma: f64,
    pub std_sigma: f64,
    pub best_sigma: f64,
    pub best_index: usize,
    pub best_total: f64,
    pub mean_total: f64,
    pub mean_lambda: f64,
    pub best_lambda: f64,
    pub best_relmse: f64,
    pub n_diverged: usize,
    pub beta: f64,
    pub mut_std: f64,
}

impl GenerationRecord {
    fn new(
        generation: usize,
        genotypes: Vec<Genotype>,
        fitness: Vec<FitnessBreakdown>,
        evo: &EvolutionParams,
    ) -> Self {
        let p = genotypes.len() as f64;
        let mean_sigma = genotypes.iter().map(|g| g.sigma_w2).sum::<f64>() / p;
        let std_sigma = (genotypes
            .iter()
            .map(|g| (g.sigma_w2 - mean_sigma).powi(2))
            .sum::<f64>()
            / p)
            .sqrt();
        let best_index = fitness
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total.total_cmp(&b.1.total))
            .map(|(i, _)| i)
            .expect("population is nonempty");
        let finite_lambdas: Vec<f64> = fitness
            .iter()
            .map(|f| f.lambda_value)
            .filter(|l| l.is_finite())
            .collect();
        let mean_lambda = if finite_lambdas.is_empty() {
            f64::NAN
        } else {
            finite_lambdas.iter().sum::<f64>() / finite_lambdas.len() as f64
        };
        let best = &fitness[best_index];
        GenerationRecord {
            generation,
            mean_sigma,
            std_sigma,
            best_sigma: genotypes[best_index].sigma_w2,
            best_index,
            best_total: best.total,
            mean_total: fitness.iter().map(|f| f.total).sum::<f64>() / p,
            mean_lambda,
            best_lambda: best.lambda_value,
            best_relmse: best.relmse,
            n_diverged: fitness.iter().filter(|f| f.diverged).count(),
            beta: evo.beta(generation),
            mut_std: evo.mutation_std(generation),
            genotypes,
            fitness,
        }
    }
}

/// Seeds of one evaluation replica.
#[derive(Clone, Copy, Debug)]
struct ReplicaSeeds {
    matrix: u64,
    noise: u64,
}

struct ReplicaOutcome {
    lambda: Option<f64>,
    psd: Result<(Vec<f64>, Vec<f64>)>,
}

fn run_replica(
    sigma_w2: f64,
    cfg: &ExperimentConfig,
    seeds: ReplicaSeeds,
    zero_coupling: bool,
) -> Result<ReplicaOutcome> {
    let n = cfg.dynamics.n_units;
    let w = if zero_coupling {
        ConnectivityMatrix::zeros(n, cfg.variant.ensemble)
    } else {
        // only configuration-type failures can come out of the samplers
        ensembles::sample(&cfg.variant, n, sigma_w2, seeds.matrix)?
    };
    let lambda = match lyapunov_spectral(&cfg.dynamics, &w) {
        Ok(est) => Some(est.value),
        Err(e) => {
            log::warn!("sigma_w2 = {sigma_w2}: {e}");
            None
        }
    };
    let psd = simulate(&cfg.dynamics, &w, seeds.noise, cfg.measurement.burn_in)
        .and_then(|stats| estimate_psd(&stats, &cfg.dynamics, cfg.measurement.psd_segments));
    Ok(ReplicaOutcome { lambda, psd })
}

fn average_psd(outcomes: &[ReplicaOutcome]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut grid = Vec::new();
    let mut acc: Vec<f64> = Vec::new();
    for o in outcomes {
        let (g, psd) = o
            .psd
            .as_ref()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        if acc.is_empty() {
            grid = g.clone();
            acc = psd.clone();
        } else {
            acc.iter_mut().zip(psd).for_each(|(a, b)| *a += b);
        }
    }
    let k = outcomes.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok((grid, acc))
}

fn score(sigma_w2: f64, cfg: &ExperimentConfig, outcomes: &[ReplicaOutcome]) -> FitnessBreakdown {
    let weights = &cfg.fitness;
    let gamma = cfg.dynamics.gamma;
    let lambdas: Vec<f64> = outcomes.iter().filter_map(|o| o.lambda).collect();
    let lambda_value = if lambdas.len() == outcomes.len() {
        lambdas.iter().sum::<f64>() / lambdas.len() as f64
    } else {
        f64::NAN
    };
    let lambda_term = weights.w_lambda * lambda_value * lambda_value;
    let crit_term = weights.w_crit * (sigma_w2 - gamma * gamma).powi(2);

    let spectral = average_psd(outcomes).and_then(|(grid, psd)| {
        let (kept, excluded) = pole_free_points(&grid, gamma, sigma_w2);
        let in_band = |w: f64| w >= weights.band_min && w <= weights.band_max;
        let excluded_in_band = grid.iter().filter(|&&w| in_band(w)).count()
            - kept.iter().filter(|&&i| in_band(grid[i])).count();
        if excluded > 0 {
            log::debug!("sigma_w2 = {sigma_w2}: {excluded} grid points dropped near the pole");
        }
        let grid: Vec<f64> = kept.iter().map(|&i| grid[i]).collect();
        let sim: Vec<f64> = kept.iter().map(|&i| psd[i]).collect();
        let theory = x_theory(&grid, &cfg.dynamics, sigma_w2)?;
        Ok((
            relmse_band(&sim, &theory, &grid, weights.band_min, weights.band_max)?,
            excluded_in_band,
        ))
    });

    match spectral {
        Ok((relmse, excluded_points)) if lambda_value.is_finite() => {
            let spec_term = weights.w_spec * relmse;
            FitnessBreakdown {
                spec_term,
                lambda_term,
                crit_term,
                total: spec_term + lambda_term + crit_term,
                lambda_value,
                relmse,
                diverged: false,
                excluded_points,
            }
        }
        other => {
            if let Err(e) = &other {
                log::debug!("sigma_w2 = {sigma_w2}: penalized ({e})");
            }
            let total = if lambda_value.is_finite() {
                DIVERGENCE_PENALTY + lambda_value * lambda_value
            } else {
                2.0 * DIVERGENCE_PENALTY
            };
            FitnessBreakdown {
                spec_term: 0.0,
                lambda_term,
                crit_term,
                total,
                lambda_value,
                relmse: f64::NAN,
                diverged: true,
                excluded_points: 0,
            }
        }
    }
}

fn evaluate_with(
    genotype: Genotype,
    cfg: &ExperimentConfig,
    seeds: impl Fn(u64) -> ReplicaSeeds,
    zero_coupling: bool,
) -> Result<FitnessBreakdown> {
    let outcomes = (0..cfg.evolution.n_seeds as u64)
        .map(|r| run_replica(genotype.sigma_w2, cfg, seeds(r), zero_coupling))
        .collect::<Result<Vec<_>>>()?;
    Ok(score(genotype.sigma_w2, cfg, &outcomes))
}

fn evaluation_seeds(master: u64, generation: u64, individual: u64) -> impl Fn(u64) -> ReplicaSeeds {
    move |r| ReplicaSeeds {
        matrix: derive_seed(master, generation, individual, r),
        noise: derive_domain_seed(master, SeedDomain::Noise, generation, individual, r),
    }
}

/// Scores one genotype. Numerical failures (divergence, unusable spectrum)
/// become the penalty fitness with `diverged` set; only invalid parameters
/// are returned as errors.
pub fn evaluate(
    genotype: Genotype,
    cfg: &ExperimentConfig,
    generation: usize,
    individual: usize,
) -> Result<FitnessBreakdown> {
    evaluate_with(
        genotype,
        cfg,
        evaluation_seeds(cfg.master_seed, generation as u64, individual as u64),
        false,
    )
}

/// Same as [`evaluate`] with the couplings forced to zero, isolating the
/// leak and noise terms.
pub fn evaluate_zero_coupling(
    genotype: Genotype,
    cfg: &ExperimentConfig,
    generation: usize,
    individual: usize,
) -> Result<FitnessBreakdown> {
    evaluate_with(
        genotype,
        cfg,
        evaluation_seeds(cfg.master_seed, generation as u64, individual as u64),
        true,
    )
}

/// Samples `count` parent indices with replacement, index `i` with
/// probability proportional to `exp(-beta (F_i - min F))`.
pub fn select(fitness: &[f64], beta: f64, seed: u64, count: usize) -> Result<Vec<usize>> {
    if fitness.is_empty() {
        return Err(Error::InvalidInput("empty fitness list".into()));
    }
    if let Some(bad) = fitness.iter().find(|f| !f.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite fitness value {bad}"
        )));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "inverse temperature {beta} must be finite and nonnegative"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidInput(
            "selection count must be positive".into(),
        ));
    }
    let min = fitness.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = fitness.iter().map(|f| (-beta * (f - min)).exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| dist.sample(&mut rng)).collect())
}

/// Gaussian perturbation with the generation's step size, clipped back into
/// the admissible interval.
pub fn mutate(parent: Genotype, generation: usize, evo: &EvolutionParams, seed: u64) -> Genotype {
    let std = evo.mutation_std(generation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: f64 = StandardNormal.sample(&mut rng);
    Genotype::new((parent.sigma_w2 + std * z).clamp(evo.clip_low, evo.clip_high))
}

/// Draws the initial population uniformly from `[init_low, init_high)`.
pub fn initial_population(cfg: &ExperimentConfig) -> Vec<Genotype> {
    let evo = &cfg.evolution;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_domain_seed(
        cfg.master_seed,
        SeedDomain::Init,
        0,
        0,
        0,
    ));
    (0..evo.population)
        .map(|_| Genotype::new(rng.gen_range(evo.init_low..evo.init_high)))
        .collect()
}

/// Runs all generations and returns one record per generation. Evaluations
/// within a generation run on the current rayon pool; results do not depend
/// on the number of threads.
pub fn run_evolution<F>(cfg: &ExperimentConfig, mut progress: F) -> Result<Vec<GenerationRecord>>
where
    F: FnMut(&GenerationRecord),
{
    cfg.validate()?;
    let evo = &cfg.evolution;
    let mut population = initial_population(cfg);
    let mut records = Vec::with_capacity(evo.generations);

    for k in 0..evo.generations {
        let fitness = population
            .par_iter()
            .enumerate()
            .map(|(i, &g)| evaluate(g, cfg, k, i))
            .collect::<Result<Vec<_>>>()?;
        let record = GenerationRecord::new(k, population.clone(), fitness, evo);
        progress(&record);

        if k + 1 < evo.generations {
            let totals: Vec<f64> = record.fitness.iter().map(|f| f.total).collect();
            let selection_seed =
                derive_domain_seed(cfg.master_seed, SeedDomain::Selection, k as u64, 0, 0);
            let parents = select(&totals, record.beta, selection_seed, evo.population)?;
            population = parents
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let seed = derive_domain_seed(
                        cfg.master_seed,
                        SeedDomain::Mutation,
                        k as u64,
                        i as u64,
                        0,
                    );
                    mutate(record.genotypes[p], k, evo, seed)
                })
                .collect();
            if evo.elitism {
                population[0] = record.genotypes[record.best_index];
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Seed-averaged simulated spectrum of one genotype next to the theoretical
/// curves, on the positive Welch grid.
pub fn snapshot_spectrum(
    genotype: Genotype,
    cfg: &ExperimentConfig,
    n_seeds: usize,
) -> Result<SpectrumPair> {
    if n_seeds == 0 {
        return Err(Error::InvalidParameter(
            "snapshot needs at least one seed".into(),
        ));
    }
    let master = cfg.master_seed;
    let outcomes = (0..n_seeds as u64)
        .into_par_iter()
        .map(|r| {
            let seeds = ReplicaSeeds {
                matrix: derive_domain_seed(master, SeedDomain::Snapshot, 0, r, 0),
                noise: derive_domain_seed(master, SeedDomain::Snapshot, 1, r, 0),
            };
            let n = cfg.dynamics.n_units;
            let w = ensembles::sample(&cfg.variant, n, genotype.sigma_w2, seeds.matrix)?;
            let stats = simulate(&cfg.dynamics, &w, seeds.noise, cfg.measurement.burn_in)?;
            estimate_psd(&stats, &cfg.dynamics, cfg.measurement.psd_segments)
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = outcomes[0].0.clone();
    let mut avg = vec![0.0; grid.len()];
    for (_, psd) in &outcomes {
        avg.iter_mut().zip(psd).for_each(|(a, b)| *a += b);
    }
    avg.iter_mut().for_each(|a| *a /= n_seeds as f64);
    SpectrumPair::new(grid, avg, &cfg.dynamics, genotype.sigma_w2, n_seeds)
}

pub const GENERATIONS_HEADER: [&str; 13] = [
    "generation",
    "mean_sigma_w2",
    "std_sigma_w2",
    "best_sigma_w2",
    "best_fitness",
    "mean_fitness",
    "mean_lambda",
    "best_lambda",
    "best_relmse",
    "n_diverged",
    "beta",
    "mut_std",
    "population",
];

/// One row per generation with the scalar fields of each record.
pub fn generations_table(records: &[GenerationRecord]) -> CsvTable {
    let mut table = CsvTable::new(&GENERATIONS_HEADER);
    for r in records {
        table.push_row([
            r.generation.to_string(),
            fmt_f64(r.mean_sigma),
            fmt_f64(r.std_sigma),
            fmt_f64(r.best_sigma),
            fmt_f64(r.best_total),
            fmt_f64(r.mean_total),
            fmt_f64(r.mean_lambda),
            fmt_f64(r.best_lambda),
            fmt_f64(r.best_relmse),
            r.n_diverged.to_string(),
            fmt_f64(r.beta),
            fmt_f64(r.mut_std),
            r.genotypes.len().to_string(),
        ]);
    }
    table
}

pub const POPULATION_HEADER: [&str; 10] = [
    "generation",
    "individual",
    "sigma_w2",
    "fitness",
    "spec_term",
    "lambda_term",
    "crit_term",
    "lambda",
    "relmse",
    "diverged",
];

/// One row per individual per generation.
pub fn population_table(records: &[GenerationRecord]) -> CsvTable {
    let mut table = CsvTable::new(&POPULATION_HEADER);
    for r in records {
        for (i, (g, f)) in r.genotypes.iter().zip(&r.fitness).enumerate() {
            table.push_row([
                r.generation.to_string(),
                i.to_string(),
                fmt_f64(g.sigma_w2),
                fmt_f64(f.total),
                fmt_f64(f.spec_term),
                fmt_f64(f.lambda_term),
                fmt_f64(f.crit_term),
                fmt_f64(f.lambda_value),
                fmt_f64(f.relmse),
                u8::from(f.diverged).to_string(),
            ]);
        }
    }
    table
}

pub fn write_generations_csv(records: &[GenerationRecord], path: &Path) -> Result<()> {
    generations_table(records).write_to(path)?;
    Ok(())
}
