//! Command-line driver: evolution runs, spectrum checks and growth-rate
//! sweeps, each writing CSV artifacts into one output directory.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use marginal_evo_core::config::SCHEMA_VERSION;
use marginal_evo_core::diagnostics::abscissa_sweep;
use marginal_evo_core::dynamics::simulate;
use marginal_evo_core::evolution::{
    generations_table, population_table, run_evolution, snapshot_spectrum, GenerationRecord,
    Genotype,
};
use marginal_evo_core::output::{fmt_f64, write_atomic, CsvTable};
use marginal_evo_core::{
    derive_domain_seed, ensembles, load_config, reference_config, ExperimentConfig, ModelTag,
    SeedDomain,
};

pub const THREADS_ENV: &str = "MARGINAL_EVO_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] marginal_evo_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    /// 2 for configuration and usage errors, 3 for file system errors, 1 for
    /// anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Core(marginal_evo_core::Error::Io(_)) => 3,
            CliError::Core(e) if e.is_config_error() => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "marginal-evo",
    version,
    about = "Evolve the weight variance of a noisy linear network toward marginal stability"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the reference configuration of a model as TOML.
    Config {
        #[arg(long, value_parser = parse_model)]
        model: ModelTag,
    },
    /// Run the evolution and write generations.csv, population.csv,
    /// best_psd.csv and manifest.json.
    Run(RunArgs),
    /// Compare the simulated spectrum at one variance with the theory and
    /// write psd.csv.
    PsdCheck(PsdCheckArgs),
    /// Mean spectral growth rate over a grid of variances; writes sweep.csv.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file (TOML).
    #[arg(long, conflicts_with = "model")]
    pub config: Option<PathBuf>,
    /// Use the reference configuration of this model.
    #[arg(long, value_parser = parse_model)]
    pub model: Option<ModelTag>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads, 0 for one per core.
    #[arg(long, env = THREADS_ENV, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of generations K, overriding the configuration
    #[arg(long)]
    pub generations: Option<usize>,
    /// Population size P, overriding the configuration
    #[arg(long)]
    pub population: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DynamicsOverrides {
    /// Network width N
    #[arg(long)]
    pub n_units: Option<usize>,
    /// Integration steps L
    #[arg(long)]
    pub n_steps: Option<usize>,
    /// Euler-Maruyama step
    #[arg(long)]
    pub dt: Option<f64>,
    /// Leak rate
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Noise strength
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Steps dropped before recording
    #[arg(long)]
    pub burn_in: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PsdCheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub dynamics: DynamicsOverrides,
    /// Weight variance sigma_w^2 to check
    #[arg(long, allow_negative_numbers = true)]
    pub sigma_w2: f64,
    /// Number of (matrix, noise) replicas averaged; defaults to the
    /// configuration's snapshot_seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Also write the first replica's recorded trajectory to trajectory.csv.
    #[arg(long)]
    pub dump_trajectory: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub dynamics: DynamicsOverrides,
    /// Grid `lo:hi:n` of n evenly spaced variances, endpoints included.
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    pub sigma_grid: Grid,
    #[arg(long, default_value_t = 16)]
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Grid {
    pub fn points(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.lo];
        }
        let step = (self.hi - self.lo) / (self.n - 1) as f64;
        (0..self.n)
            .map(|i| {
                if i + 1 == self.n {
                    self.hi
                } else {
                    self.lo + step * i as f64
                }
            })
            .collect()
    }
}

fn parse_model(s: &str) -> Result<ModelTag, String> {
    s.parse::<ModelTag>().map_err(|e| e.to_string())
}

pub fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err(format!("expected lo:hi:n, got {s:?}"));
    };
    let lo: f64 = lo
        .trim()
        .parse()
        .map_err(|e| format!("bad lower bound: {e}"))?;
    let hi: f64 = hi
        .trim()
        .parse()
        .map_err(|e| format!("bad upper bound: {e}"))?;
    let n: usize = n
        .trim()
        .parse()
        .map_err(|e| format!("bad point count: {e}"))?;
    if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi < lo {
        return Err(format!("need 0 <= lo <= hi, got {lo}:{hi}"));
    }
    if n == 0 {
        return Err("grid needs at least one point".into());
    }
    Ok(Grid { lo, hi, n })
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Config { model } => {
            print!("{}", reference_config(model).to_toml());
            Ok(())
        }
        Command::Run(args) => cmd_run(args),
        Command::PsdCheck(args) => cmd_psd_check(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

/// Loads the configuration, applies the shared overrides and validates.
fn resolve(common: &Common, default_model: Option<ModelTag>) -> CliResult<ExperimentConfig> {
    let mut cfg = match (&common.config, common.model.or(default_model)) {
        (Some(path), _) => load_config(path)?,
        (None, Some(tag)) => reference_config(tag),
        (None, None) => {
            return Err(CliError::Usage(
                "either --config or --model is required".into(),
            ))
        }
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn apply_dynamics(cfg: &mut ExperimentConfig, o: &DynamicsOverrides) {
    let d = &mut cfg.dynamics;
    d.n_units = o.n_units.unwrap_or(d.n_units);
    d.n_steps = o.n_steps.unwrap_or(d.n_steps);
    d.dt = o.dt.unwrap_or(d.dt);
    d.gamma = o.gamma.unwrap_or(d.gamma);
    d.kappa = o.kappa.unwrap_or(d.kappa);
    cfg.measurement.burn_in = o.burn_in.unwrap_or(cfg.measurement.burn_in);
}

fn init_threads(threads: usize) -> CliResult<()> {
    // a second call in the same process (tests) finds the pool already built
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
    {
        log::debug!("thread pool already initialized: {e}");
    }
    Ok(())
}

/// Creates the output directory and checks it is writable before any
/// expensive work starts.
fn prepare_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let probe = dir.join(".marginal-evo-probe");
    fs::write(&probe, b"").map_err(io_err(dir))?;
    fs::remove_file(&probe).map_err(io_err(&probe))?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic(path, bytes).map_err(io_err(path))
}

fn timestamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Serialize)]
pub struct BestIndividual {
    pub generation: usize,
    pub sigma_w2: f64,
    pub fitness: f64,
    pub lambda: f64,
    pub relmse: f64,
    pub psd_band_mean_rel_dev: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub schema_version: u32,
    pub command: String,
    pub master_seed: u64,
    pub started: String,
    pub finished: String,
    pub wall_clock_seconds: f64,
    pub threads: usize,
    pub generation_seconds: Vec<f64>,
    pub best: Option<BestIndividual>,
    pub artifacts: Vec<String>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig, started: String, elapsed: f64) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            tool_version: env!("CARGO_PKG_VERSION"),
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            master_seed: cfg.master_seed,
            started,
            finished: timestamp(),
            wall_clock_seconds: elapsed,
            threads: rayon::current_num_threads(),
            generation_seconds: Vec::new(),
            best: None,
            artifacts: Vec::new(),
            config: cfg.clone(),
        }
    }

    /// Writes the manifest last, after every artifact it lists exists.
    fn write(&self, dir: &Path) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(&dir.join("manifest.json"), json.as_bytes())
    }
}

fn cmd_run(args: RunArgs) -> CliResult<()> {
    let mut cfg = resolve(&args.common, None)?;
    if let Some(k) = args.generations {
        cfg.evolution.generations = k;
    }
    if let Some(p) = args.population {
        cfg.evolution.population = p;
    }
    cfg.validate()?;
    init_threads(args.common.threads)?;
    let dir = cfg.out_dir.clone();
    prepare_out_dir(&dir)?;

    let started = timestamp();
    let clock = Instant::now();
    let mut generation_seconds = Vec::with_capacity(cfg.evolution.generations);
    let mut last = Instant::now();
    println!(
        "model {} | N={} L={} P={} K={} seeds={} | master seed {}",
        cfg.variant.tag,
        cfg.dynamics.n_units,
        cfg.dynamics.n_steps,
        cfg.evolution.population,
        cfg.evolution.generations,
        cfg.evolution.n_seeds,
        cfg.master_seed
    );
    let records = run_evolution(&cfg, |r: &GenerationRecord| {
        let secs = last.elapsed().as_secs_f64();
        last = Instant::now();
        generation_seconds.push(secs);
        println!(
            "gen {:>4}  best F {:.6e}  mean sigma_w2 {:.4}  best lambda {:+.4}  diverged {:>2}  ({secs:.1} s)",
            r.generation, r.best_total, r.mean_sigma, r.best_lambda, r.n_diverged
        );
    })?;

    let final_gen = records.last().expect("at least one generation");
    let best = Genotype::new(final_gen.best_sigma);
    let pair = snapshot_spectrum(best, &cfg, cfg.measurement.snapshot_seeds)?;
    let dev = pair
        .band_agreement(cfg.fitness.band_min, cfg.fitness.band_max)
        .ok()
        .map(|a| a.mean_rel_dev);

    write_file(
        &dir.join("generations.csv"),
        generations_table(&records).as_str().as_bytes(),
    )?;
    write_file(
        &dir.join("population.csv"),
        population_table(&records).as_str().as_bytes(),
    )?;
    write_file(&dir.join("best_psd.csv"), pair.to_csv().as_str().as_bytes())?;

    let mut manifest = RunManifest::new("run", &cfg, started, clock.elapsed().as_secs_f64());
    manifest.generation_seconds = generation_seconds;
    manifest.best = Some(BestIndividual {
        generation: final_gen.generation,
        sigma_w2: best.sigma_w2,
        fitness: final_gen.best_total,
        lambda: final_gen.best_lambda,
        relmse: final_gen.best_relmse,
        psd_band_mean_rel_dev: dev,
    });
    manifest.artifacts = vec![
        "generations.csv".into(),
        "population.csv".into(),
        "best_psd.csv".into(),
        "manifest.json".into(),
    ];
    manifest.write(&dir)?;

    println!(
        "final: mean sigma_w2 {:.4}, best sigma_w2 {:.4}, best lambda {:+.4}, psd band deviation {}",
        final_gen.mean_sigma,
        best.sigma_w2,
        final_gen.best_lambda,
        dev.map_or("n/a".to_string(), |d| format!("{d:.4}"))
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_psd_check(args: PsdCheckArgs) -> CliResult<()> {
    let mut cfg = resolve(&args.common, Some(ModelTag::A))?;
    apply_dynamics(&mut cfg, &args.dynamics);
    if !(args.sigma_w2.is_finite() && args.sigma_w2 >= 0.0) {
        return Err(CliError::Usage(format!(
            "--sigma-w2 must be a nonnegative number, got {}",
            args.sigma_w2
        )));
    }
    cfg.validate()?;
    let n_seeds = args.seeds.unwrap_or(cfg.measurement.snapshot_seeds);
    init_threads(args.common.threads)?;
    let dir = cfg.out_dir.clone();
    prepare_out_dir(&dir)?;
    let started = timestamp();
    let clock = Instant::now();

    let genotype = Genotype::new(args.sigma_w2);
    let pair = snapshot_spectrum(genotype, &cfg, n_seeds)?;
    let (lo, hi) = (cfg.fitness.band_min, cfg.fitness.band_max);
    let agreement = pair.band_agreement(lo, hi)?;
    if agreement.excluded > 0 {
        log::warn!(
            "{} band points dropped next to the pole",
            agreement.excluded
        );
    }
    let (relmse, dev) = (agreement.relmse, agreement.mean_rel_dev);

    let mut artifacts = vec!["psd.csv".to_string()];
    write_file(&dir.join("psd.csv"), pair.to_csv().as_str().as_bytes())?;
    if args.dump_trajectory {
        let seed = |k| derive_domain_seed(cfg.master_seed, SeedDomain::Snapshot, k, 0, 0);
        let w = ensembles::sample(&cfg.variant, cfg.dynamics.n_units, args.sigma_w2, seed(0))?;
        let stats = simulate(&cfg.dynamics, &w, seed(1), cfg.measurement.burn_in)?;
        stats.write_csv(&dir.join("trajectory.csv"))?;
        artifacts.push("trajectory.csv".into());
    }
    let mut manifest = RunManifest::new("psd-check", &cfg, started, clock.elapsed().as_secs_f64());
    artifacts.push("manifest.json".into());
    manifest.artifacts = artifacts;
    manifest.write(&dir)?;

    println!(
        "sigma_w2 {}  seeds {n_seeds}  band [{lo}, {hi}]",
        args.sigma_w2
    );
    println!("relmse {}", fmt_f64(relmse));
    println!("band_mean_rel_dev {}", fmt_f64(dev));
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let mut cfg = resolve(&args.common, Some(ModelTag::A))?;
    apply_dynamics(&mut cfg, &args.dynamics);
    cfg.validate()?;
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    init_threads(args.common.threads)?;
    let dir = cfg.out_dir.clone();
    prepare_out_dir(&dir)?;
    let started = timestamp();
    let clock = Instant::now();

    let rows = abscissa_sweep(
        &cfg.variant,
        &cfg.dynamics,
        &args.sigma_grid.points(),
        args.seeds,
        cfg.master_seed,
    )?;
    let mut table = CsvTable::new(&["sigma_w2", "lambda_mean", "lambda_std"]);
    for r in &rows {
        println!(
            "sigma_w2 {:.4}  lambda {:+.5} +- {:.5}",
            r.sigma_w2, r.lambda_mean, r.lambda_std
        );
        table.push_row([
            fmt_f64(r.sigma_w2),
            fmt_f64(r.lambda_mean),
            fmt_f64(r.lambda_std),
        ]);
    }
    write_file(&dir.join("sweep.csv"), table.as_str().as_bytes())?;
    let mut manifest = RunManifest::new("sweep", &cfg, started, clock.elapsed().as_secs_f64());
    manifest.artifacts = vec!["sweep.csv".into(), "manifest.json".into()];
    manifest.write(&dir)?;
    Ok(())
}
