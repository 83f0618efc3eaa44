//! Acceptance suite. Every test prints one `ACCEPTANCE <id> PASS|FAIL` line
//! (written straight to stderr so it shows up without `--nocapture`) and
//! then asserts the same outcome.
//!
//! The reference-scale evolution runs (criteria 6 to 8) take tens of minutes
//! each on one core. They run once per process and are shared.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use marginal_evo_core::config::SeedDomain;
use marginal_evo_core::diagnostics::{
    critical_sigma, lyapunov_replica, lyapunov_spectral, meanfield_chi,
};
use marginal_evo_core::dynamics::{simulate_two_replica, DEFAULT_DELTA0};
use marginal_evo_core::ensembles::sample_ginibre;
use marginal_evo_core::evolution::{mutate, run_evolution, select, snapshot_spectrum};
use marginal_evo_core::output::write_atomic;
use marginal_evo_core::spectra::{band_mean_rel_dev, x0, x1, x_theory, SpectrumPair};
use marginal_evo_core::{
    derive_domain_seed, reference_config, Activation, DynamicsParams, ExperimentConfig, Genotype,
    ModelTag,
};

const MASTER_SEEDS: [u64; 3] = [0, 1, 2];

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("ACCEPTANCE {id:>2} {verdict} {name}: {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn note(text: &str) {
    let _ = std::io::stderr().write_all(format!("  .. {text}\n").as_bytes());
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_marginal-evo")
}

fn artifact_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn c01_closed_form_kernels() {
    let clock = Instant::now();
    let tuples = [
        (1.0, 1.0, 0.5),
        (1.0, 1.0, 0.0),
        (0.7, 2.0, 0.3),
        (1.5, 0.5, 2.0),
        (2.0, 1.3, 3.9),
    ];
    let mut worst = 0.0f64;
    let mut identity_ok = true;
    for &(gamma, kappa, s) in &tuples {
        let params = DynamicsParams {
            n_units: 256,
            n_steps: 2000,
            dt: 0.05,
            gamma,
            kappa,
        };
        let ratio = gamma * params.n_steps as f64 * params.dt / params.n_units as f64;
        let grid: Vec<f64> = (1..=20).map(|k| 0.1 * k as f64).collect();
        let th = x_theory(&grid, &params, s).unwrap();
        for (&w, &t) in grid.iter().zip(&th) {
            // simplified forms: c (w^2+g^2) cancels
            let d = w * w + gamma * gamma - s;
            let e0 = 2.0 * kappa / d;
            let e1 = s * kappa / (d * d);
            let et = e0 + ratio * e1;
            let a0 = x0(w, gamma, kappa, s).unwrap();
            let a1 = x1(w, gamma, kappa, s).unwrap();
            for (a, e) in [(a0, e0), (a1, e1), (t, et)] {
                let rel = if e == 0.0 {
                    a.abs()
                } else {
                    ((a - e) / e).abs()
                };
                worst = worst.max(rel);
            }
        }
        let pair = SpectrumPair::new(grid.clone(), vec![1.0; grid.len()], &params, s, 1).unwrap();
        for i in 0..grid.len() {
            let sum = pair.x0[i] + pair.prefactor * pair.x1[i];
            identity_ok &= (pair.x_th[i] - sum).abs() <= 2.0 * f64::EPSILON * sum.abs();
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    report(
        1,
        "closed-form kernel suite",
        worst < 1e-12 && identity_ok && secs < 1.0,
        &format!("max relative error {worst:.2e} (< 1e-12), identity holds: {identity_ok}, {secs:.3} s (< 1 s)"),
    );
}

#[test]
fn c02_ou_calibration() {
    let clock = Instant::now();
    let cfg = reference_config(ModelTag::A);
    let pair = snapshot_spectrum(Genotype::new(0.0), &cfg, 8).unwrap();
    let lorentz: Vec<f64> = pair.omega.iter().map(|w| 2.0 / (w * w + 1.0)).collect();
    let dev = band_mean_rel_dev(&pair.x_sim, &lorentz, &pair.omega, 0.1, 2.0).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    report(
        2,
        "OU spectral calibration",
        dev < 0.1 && secs < 30.0,
        &format!("band-mean relative deviation {dev:.4} (< 0.1), {secs:.1} s (< 30 s)"),
    );
}

#[test]
fn c03_lyapunov_cross_validation() {
    let clock = Instant::now();
    let params = DynamicsParams {
        n_units: 64,
        n_steps: 2000,
        dt: 0.05,
        gamma: 1.0,
        kappa: 1.0,
    };
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..32u64 {
        let s = 0.3 + i as f64 / 31.0;
        let w = sample_ginibre(64, s, derive_domain_seed(11, SeedDomain::Matrix, i, 0, 0)).unwrap();
        let spectral = lyapunov_spectral(&params, &w).unwrap().value;
        let noise = derive_domain_seed(11, SeedDomain::Noise, i, 0, 0);
        let stats = simulate_two_replica(&params, &w, noise, 500, DEFAULT_DELTA0).unwrap();
        let replica = lyapunov_replica(&stats, params.dt).unwrap().value;
        let tol = (0.05 * spectral.abs()).max(0.02);
        let ratio = (replica - spectral).abs() / tol;
        worst = worst.max(ratio);
        if ratio > 1.0 {
            failures += 1;
            note(&format!(
                "sigma_w2 {s:.3}: spectral {spectral:+.4}, replica {replica:+.4}"
            ));
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    report(
        3,
        "Lyapunov cross-validation",
        failures == 0 && secs < 60.0,
        &format!("{failures}/32 outside max(5%, 0.02); worst error at {worst:.2} of tolerance, {secs:.1} s (< 60 s)"),
    );
}

#[test]
fn c04_circular_law_marginality() {
    let clock = Instant::now();
    let dir = artifact_dir("c04_sweep");
    let status = Command::new(bin())
        .args([
            "sweep",
            "--model",
            "A",
            "--sigma-grid",
            "0.3:1.3:11",
            "--seeds",
            "16",
        ])
        .arg("--out-dir")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let text = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[0], f[1])
        })
        .collect();
    let crossing = rows.windows(2).find_map(|p| {
        let ((s0, l0), (s1, l1)) = (p[0], p[1]);
        (l0 < 0.0 && l1 >= 0.0).then(|| s0 + (s1 - s0) * (-l0) / (l1 - l0))
    });
    let secs = clock.elapsed().as_secs_f64();
    let pass = crossing.is_some_and(|c| (0.9..=1.1).contains(&c)) && secs < 120.0;
    report(
        4,
        "circular-law marginality",
        pass,
        &format!(
            "zero crossing of the mean abscissa at sigma_w2 = {} (in [0.9, 1.1]), {secs:.1} s (< 120 s)",
            crossing.map_or("none".into(), |c| format!("{c:.4}"))
        ),
    );
}

/// Monte-Carlo oracle for the tanh mean field: `(sigma_w2, q_star, chi)`
/// from 10^7 standard normals (ChaCha8, seed 20240607), the fixed point
/// iterated on that fixed sample. Regenerate with
/// `cargo test -p marginal-evo-cli --test acceptance -- --ignored --nocapture regenerate_meanfield_oracle`.
const TANH_ORACLE: [(f64, f64, f64); 4] = [
    (1.5, 0.2864632820, 1.0411210116),
    (2.0, 0.6174966457, 1.1060374786),
    (3.0, 1.3448255430, 1.2393528646),
    (4.0, 2.1207955238, 1.3632995174),
];

const ORACLE_SAMPLES: usize = 10_000_000;

fn monte_carlo_meanfield(sigma_w2: f64, z: &[f64]) -> (f64, f64) {
    let mean = |f: &dyn Fn(f64) -> f64| z.iter().map(|&x| f(x)).sum::<f64>() / z.len() as f64;
    let mut q: f64 = 1.0;
    for _ in 0..500 {
        let s = q.sqrt();
        let next = sigma_w2 * mean(&|x| (s * x).tanh().powi(2));
        let done = (next - q).abs() < 1e-12;
        q = next;
        if done {
            break;
        }
    }
    let s = q.sqrt();
    let chi = sigma_w2 * mean(&|x| (1.0 - (s * x).tanh().powi(2)).powi(2));
    (q, chi)
}

#[test]
#[ignore]
fn regenerate_meanfield_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240607);
    let z: Vec<f64> = (0..ORACLE_SAMPLES)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    for &(s, _, _) in &TANH_ORACLE {
        let (q, chi) = monte_carlo_meanfield(s, &z);
        println!("    ({s:?}, {q:.10}, {chi:.10}),");
    }
}

/// Adaptive-quadrature reference for the same fixed points, `(sigma_w2,
/// q_star, chi)`, integrated on [-40, 40] to 1e-14 relative.
const TANH_REFERENCE: [(f64, f64, f64); 4] = [
    (1.5, 0.2868942294, 1.0405675650),
    (2.0, 0.6179647698, 1.1055288204),
    (3.0, 1.3453932251, 1.2387971496),
    (4.0, 2.1214735682, 1.3626733375),
];

/// True when `value` matches `oracle` to three significant digits, i.e.
/// within half a unit in the oracle's third digit.
fn three_digits(value: f64, oracle: f64) -> bool {
    let unit = 10f64.powi(oracle.abs().log10().floor() as i32 - 2);
    (value - oracle).abs() <= 0.5 * unit
}

#[test]
fn c05_mean_field() {
    let clock = Instant::now();
    let mut linear_ok = critical_sigma(Activation::Linear, 1e-12).unwrap() == 1.0;
    for s in [0.0, 0.25, 0.5, 1.0, 1.7, 3.0] {
        linear_ok &= meanfield_chi(s, Activation::Linear, 1e-12).unwrap().chi == s;
    }
    let mut digits_ok = true;
    let mut worst_mc = 0.0f64;
    let mut worst_ref = 0.0f64;
    for (&(s, q_mc, chi_mc), &(_, q_ref, chi_ref)) in TANH_ORACLE.iter().zip(&TANH_REFERENCE) {
        let r = meanfield_chi(s, Activation::Tanh, 1e-13).unwrap();
        digits_ok &= three_digits(r.q_star, q_mc) && three_digits(r.chi, chi_mc);
        worst_mc = worst_mc
            .max(((r.q_star - q_mc) / q_mc).abs())
            .max(((r.chi - chi_mc) / chi_mc).abs());
        worst_ref = worst_ref
            .max(((r.q_star - q_ref) / q_ref).abs())
            .max(((r.chi - chi_ref) / chi_ref).abs());
    }
    let secs = clock.elapsed().as_secs_f64();
    report(
        5,
        "mean-field diagnostics",
        linear_ok && digits_ok && secs < 30.0,
        &format!(
            "linear exact: {linear_ok}, tanh q*/chi match the 1e7-sample oracle to 3 significant digits: {digits_ok} \
             (max relative gap {worst_mc:.2e}), order-64 gap to adaptive quadrature {worst_ref:.1e}, {secs:.2} s (< 30 s)"
        ),
    );
}

/// Final-generation summary of one evolution run.
#[derive(Clone, Debug)]
struct RunOutcome {
    seed: u64,
    mean_sigma: f64,
    best_sigma: f64,
    best_lambda: f64,
    psd_dev: Option<f64>,
    seconds: f64,
}

fn evolve(cfg: &ExperimentConfig, label: &str) -> RunOutcome {
    let clock = Instant::now();
    let records = run_evolution(cfg, |r| {
        if r.generation % 10 == 9 || r.generation + 1 == cfg.evolution.generations {
            note(&format!(
                "{label}: generation {:>3}, mean sigma_w2 {:.4}, best lambda {:+.4}, {:.0} s",
                r.generation,
                r.mean_sigma,
                r.best_lambda,
                clock.elapsed().as_secs_f64()
            ));
        }
    })
    .unwrap();
    let seconds = clock.elapsed().as_secs_f64();
    let last = records.last().unwrap();
    let pair = snapshot_spectrum(
        Genotype::new(last.best_sigma),
        cfg,
        cfg.measurement.snapshot_seeds,
    )
    .unwrap();
    let psd_dev = pair
        .band_agreement(cfg.fitness.band_min, cfg.fitness.band_max)
        .ok()
        .map(|a| a.mean_rel_dev);

    let dir = artifact_dir(label);
    let generations = marginal_evo_core::evolution::generations_table(&records);
    write_atomic(
        &dir.join("generations.csv"),
        generations.as_str().as_bytes(),
    )
    .unwrap();
    write_atomic(&dir.join("best_psd.csv"), pair.to_csv().as_str().as_bytes()).unwrap();

    let outcome = RunOutcome {
        seed: cfg.master_seed,
        mean_sigma: last.mean_sigma,
        best_sigma: last.best_sigma,
        best_lambda: last.best_lambda,
        psd_dev,
        seconds,
    };
    note(&format!("{label}: {outcome:?}"));
    outcome
}

fn reference_runs(tag: ModelTag) -> &'static [RunOutcome] {
    static A: OnceLock<Vec<RunOutcome>> = OnceLock::new();
    static C: OnceLock<Vec<RunOutcome>> = OnceLock::new();
    let cell = match tag {
        ModelTag::A => &A,
        ModelTag::C => &C,
        ModelTag::B => unreachable!("no reference criterion uses model B"),
    };
    cell.get_or_init(|| {
        MASTER_SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = reference_config(tag);
                cfg.master_seed = seed;
                evolve(&cfg, &format!("model_{tag}_seed{seed}"))
            })
            .collect()
    })
}

/// N = 128, L = 1000, K = 50. The burn-in keeps the reference quarter of the
/// trajectory and four Welch segments keep four grid points inside the band.
fn reduced_profile(tag: ModelTag) -> ExperimentConfig {
    let mut cfg = reference_config(tag);
    cfg.dynamics.n_units = 128;
    cfg.dynamics.n_steps = 1000;
    cfg.measurement.burn_in = 250;
    cfg.measurement.psd_segments = 4;
    cfg.evolution.generations = 50;
    cfg
}

#[test]
fn c06_model_a_subcritical() {
    let runs = reference_runs(ModelTag::A);
    let signs_ok = runs.iter().all(|r| r.best_lambda < 0.0);
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);

    let reduced: Vec<RunOutcome> = MASTER_SEEDS
        .iter()
        .map(|&seed| {
            let mut cfg = reduced_profile(ModelTag::A);
            cfg.master_seed = seed;
            evolve(&cfg, &format!("model_A_reduced_seed{seed}"))
        })
        .collect();
    let reduced_ok = reduced.iter().all(|r| r.best_lambda < 0.0);
    let reduced_slowest = reduced.iter().map(|r| r.seconds).fold(0.0, f64::max);

    let lambdas = |rs: &[RunOutcome]| {
        rs.iter()
            .map(|r| format!("{:+.4}", r.best_lambda))
            .collect::<Vec<_>>()
            .join(", ")
    };
    report(
        6,
        "model A drifts subcritical",
        signs_ok && reduced_ok && slowest <= 900.0 && reduced_slowest <= 180.0,
        &format!(
            "reference best lambda [{}] (< 0), slowest run {slowest:.0} s (<= 900 s); reduced best lambda [{}], slowest {reduced_slowest:.0} s (<= 180 s)",
            lambdas(runs),
            lambdas(&reduced)
        ),
    );
}

#[test]
fn c07_model_c_marginal() {
    let runs = reference_runs(ModelTag::C);
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let dev = r.psd_dev.unwrap_or(f64::INFINITY);
        let ok = (0.85..=1.15).contains(&r.mean_sigma) && r.best_lambda.abs() < 0.1 && dev < 0.15;
        pass &= ok;
        parts.push(format!(
            "seed {}: mean sigma_w2 {:.4}, best sigma_w2 {:.4}, best |lambda| {:.4}, psd deviation {dev:.4}",
            r.seed,
            r.mean_sigma,
            r.best_sigma,
            r.best_lambda.abs()
        ));
    }
    report(
        7,
        "model C self-organizes near marginality",
        pass,
        &format!(
            "{} (need sigma in [0.85, 1.15], |lambda| < 0.1, deviation < 0.15)",
            parts.join("; ")
        ),
    );
}

#[test]
fn c08_model_ordering() {
    let a = reference_runs(ModelTag::A);
    let c = reference_runs(ModelTag::C);
    let mut pass = true;
    let mut parts = Vec::new();
    for (ra, rc) in a.iter().zip(c) {
        let (da, dc) = ((ra.mean_sigma - 1.0).abs(), (rc.mean_sigma - 1.0).abs());
        pass &= dc < da;
        parts.push(format!("seed {}: C {dc:.4} vs A {da:.4}", ra.seed));
    }
    report(
        8,
        "model C closer to the anchor than model A",
        pass,
        &format!("|mean sigma_w2 - 1| {}", parts.join("; ")),
    );
}

fn run_cli(args: &[&str], out: &Path) {
    let output = Command::new(bin())
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn c09_determinism() {
    let commands: [&[&str]; 3] = [
        &[
            "run",
            "--model",
            "C",
            "--seed",
            "7",
            "--generations",
            "3",
            "--population",
            "6",
        ],
        &[
            "psd-check",
            "--sigma-w2",
            "0.5",
            "--seeds",
            "3",
            "--dump-trajectory",
            "--n-units",
            "64",
        ],
        &[
            "sweep",
            "--sigma-grid",
            "0.3:1.3:5",
            "--seeds",
            "4",
            "--n-units",
            "64",
        ],
    ];
    let tmp = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut compared = 0;
    for (i, args) in commands.iter().enumerate() {
        let first = tmp.path().join(format!("{i}a"));
        let second = tmp.path().join(format!("{i}b"));
        run_cli(args, &first);
        run_cli(args, &second);
        let (a, b) = (csv_files(&first), csv_files(&second));
        pass &= !a.is_empty() && a == b;
        compared += a.len();
    }
    report(
        9,
        "determinism",
        pass,
        &format!(
            "{compared} CSV files from run, psd-check and sweep byte-identical across re-runs"
        ),
    );
}

#[test]
fn c10_evolution_operators() {
    let clock = Instant::now();
    let mut checks = Vec::new();

    // beta = 0: uniform over 5 individuals, 10^5 draws, 3 sigma multinomial bands
    let draws = 100_000;
    let picks = select(&[0.3, 2.0, 7.5, 0.1, 4.0], 0.0, 1, draws).unwrap();
    let p = 0.2;
    let band = 3.0 * (draws as f64 * p * (1.0 - p)).sqrt();
    let uniform = (0..5).all(|i| {
        let count = picks.iter().filter(|&&k| k == i).count() as f64;
        (count - draws as f64 * p).abs() <= band
    });
    checks.push(("uniform at beta 0", uniform));

    let picks = select(&[0.0, 10.0], 10.0, 2, 10_000).unwrap();
    let freq = picks.iter().filter(|&&k| k == 0).count() as f64 / 1e4;
    checks.push(("two-point Boltzmann at beta 10", freq >= 0.999));

    let equal = select(&[3.0; 4], 50.0, 3, draws).unwrap();
    let band = 3.0 * (draws as f64 * 0.25 * 0.75).sqrt();
    let flat = (0..4).all(|i| {
        let count = equal.iter().filter(|&&k| k == i).count() as f64;
        (count - draws as f64 * 0.25).abs() <= band
    });
    checks.push(("equal fitness is uniform", flat));

    let fitness = [0.4, 1.1, 0.05, 2.5, 0.7, 0.9];
    let shifted: Vec<f64> = fitness.iter().map(|f| f + 123.456).collect();
    checks.push((
        "shift invariance",
        select(&fitness, 7.0, 4, 1000).unwrap() == select(&shifted, 7.0, 4, 1000).unwrap(),
    ));

    let evo = reference_config(ModelTag::C).evolution;
    let mut schedule = true;
    // the reference is built by k roundings, so compare within (k + 1) ulps
    let mut expected: f64 = 0.02;
    for k in 0..100 {
        let bound = 2.0 * (k + 1) as f64 * f64::EPSILON * expected;
        schedule &= (evo.mutation_std(k) - expected).abs() <= bound;
        expected *= 0.98;
    }
    schedule &= evo.mutation_std(0) == 0.02 && (evo.mutation_std(1) - 0.0196).abs() < 1e-17;
    checks.push(("mutation schedule 0.02 * 0.98^k", schedule));

    let mut bounded = true;
    for seed in 0..20_000u64 {
        for parent in [evo.clip_low, 0.8, evo.clip_high] {
            let child = mutate(Genotype::new(parent), (seed % 3) as usize, &evo, seed).sigma_w2;
            bounded &= (evo.clip_low..=evo.clip_high).contains(&child);
        }
    }
    let seed = (0..)
        .find(|&s| mutate(Genotype::new(0.8), 0, &evo, s).sigma_w2 > 0.8)
        .unwrap();
    bounded &= mutate(Genotype::new(evo.clip_high), 0, &evo, seed).sigma_w2 == evo.clip_high;
    checks.push(("projection bounds", bounded));

    let secs = clock.elapsed().as_secs_f64();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        10,
        "evolution operators",
        failed.is_empty() && secs < 30.0,
        &format!(
            "{}/{} checks pass{}, {secs:.2} s (< 30 s)",
            checks.len() - failed.len(),
            checks.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(" (failed: {})", failed.join(", "))
            }
        ),
    );
}
