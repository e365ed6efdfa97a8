//! Fixed reference setups and the reporting used by the acceptance checks.

use std::collections::BTreeMap;
use std::io::Write;

use bhchain::ensemble::{evolve_ensemble, make_ensemble, EnsembleSpec, VarianceSeries};
use bhchain::integrate::{IntegratorConfig, ENSEMBLE_TOL};
use bhchain::model::{ActionAngleState, ChainParams};
use bhchain_cli::config::{EnsembleOptions, Experiment, Filling, FitOptions, InitialSpec, RunConfig};
use bhchain_cli::output::OutputDir;

/// Seed shared by every ensemble check.
pub const SEED: u64 = 20_240_101;

/// Writes one verdict line straight to stderr, past the test harness capture.
pub fn report(criterion: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {criterion:>2} [{verdict}] {title}: {detail}");
}

/// Zero angles, actions rescaled to `norm`; `sites` are 1-based.
pub fn filled(l: usize, sites: &[(usize, f64)], norm: f64) -> ActionAngleState {
    let mut a = vec![0.0; l];
    for &(n, v) in sites {
        a[n - 1] = v;
    }
    let s: f64 = a.iter().sum();
    a.iter_mut().for_each(|x| *x *= norm / s);
    ActionAngleState::with_zero_angles(a).expect("valid state")
}

pub fn ensemble_integrator(t_end: f64) -> IntegratorConfig {
    IntegratorConfig::new(t_end).with_tolerances(ENSEMBLE_TOL, ENSEMBLE_TOL)
}

/// Default ensemble around `base` evolved to `t_end`.
pub fn run_ensemble(params: &ChainParams, base: &ActionAngleState, t_end: f64, workers: usize) -> VarianceSeries {
    let spec = EnsembleSpec::new(base.clone(), SEED);
    let members = make_ensemble(&spec, params).expect("ensemble");
    evolve_ensemble(&members, params, &ensemble_integrator(t_end), workers).expect("evolution")
}

/// Ensemble run of the single-filled-site chain: L=10, U/J=25, μ/J=0.05,
/// site 5 filled, 100 orbits to t=1e4.
pub fn single_site_config(workers: usize) -> RunConfig {
    RunConfig {
        experiment: Experiment::Ensemble,
        chain: ChainParams::new(10, 1.0, 25.0, 0.05),
        initial: InitialSpec::Filled {
            sites: vec![Filling { site: 5, filling: 1.0 }],
            angles: None,
        },
        integrator: Some(ensemble_integrator(1e4)),
        ensemble: Some(EnsembleOptions::default()),
        lyapunov: None,
        fit: FitOptions::default(),
        grid: None,
        theory: None,
        output: std::path::PathBuf::from("unused"),
        seed: SEED,
        workers,
    }
}

/// Runs a configuration through the command layer into a temporary
/// directory and returns every written file.
pub fn run_cli(cfg: &RunConfig) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut out = OutputDir::create(dir.path()).expect("output dir");
    bhchain_cli::commands::run(cfg, &mut out).expect("run");
    out.files
        .iter()
        .map(|f| (f.path.clone(), std::fs::read(dir.path().join(&f.path)).expect("read back")))
        .collect()
}
