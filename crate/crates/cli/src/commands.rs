//! One function per subcommand. Each writes its data files and returns the
//! per-task statuses for the manifest.

use bhchain::chaos::{lyapunov, LyapunovMode, LyapunovResult, LyapunovStatus};
use bhchain::ensemble::{evolve_ensemble, make_ensemble, VarianceSeries};
use bhchain::integrate::{integrate_orbit, IntegrationStatus, IntegratorConfig, SampleSchedule, DEFAULT_TOL};
use bhchain::model::{action_angle_to_pq, hamiltonian_action_angle, pq_to_action_angle, ActionAngleState, ChainParams};
use bhchain::scaling::{detect_crossover, fit_exponent, predict_exponents};
use bhchain::theory::{
    averaged_hamiltonian, compare_covariance_rates, diffusion_matrix_langevin, diffusion_matrix_leading,
    dnse_series, dominant_angular_frequency, langevin_sigma, perturb_coeff_h2, perturb_coeff_h2tilde,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{Experiment, RunConfig};
use crate::output::{fmt_f64, read_numeric_csv, Csv, OutputDir, TaskStatus};
use crate::CliError;

pub struct Outcome {
    pub tasks: Vec<TaskStatus>,
    /// Some task failed or was cut short but outputs were written.
    pub partial: bool,
}

pub fn run(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    match cfg.experiment {
        Experiment::Orbit => cmd_orbit(cfg, out),
        Experiment::Lyapunov => cmd_lyapunov(cfg, out),
        Experiment::Ensemble => cmd_ensemble(cfg, out),
        Experiment::Sweep => cmd_sweep(cfg, out),
        Experiment::Theory => cmd_theory(cfg, out),
    }
}

fn numerical<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Numerical(e.to_string())
}

fn integrator(cfg: &RunConfig) -> &IntegratorConfig {
    cfg.integrator.as_ref().expect("validated")
}

fn site_columns(prefix: &str, l: usize) -> impl Iterator<Item = String> + '_ {
    (1..=l).map(move |n| format!("{prefix}_{n}"))
}

pub fn cmd_orbit(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let params = cfg.chain;
    let initial = cfg.initial.resolve(&params, cfg.seed)?;
    let pq = action_angle_to_pq(&initial).map_err(numerical)?;
    let res = integrate_orbit(&pq, &params, integrator(cfg)).map_err(numerical)?;
    let l = params.sites;
    let mut csv = Csv::new(
        std::iter::once("t[1/J]".to_string())
            .chain(site_columns("I", l))
            .chain(site_columns("phi", l))
            .chain(["energy[J]".to_string(), "constraint".to_string()]),
    );
    for (k, s) in res.trajectory.states.iter().enumerate() {
        let aa = pq_to_action_angle(s);
        let mut row = vec![res.trajectory.times[k]];
        row.extend(&aa.actions);
        row.extend(&aa.angles);
        row.push(res.trajectory.energy[k]);
        row.push(res.trajectory.constraint[k]);
        csv.numbers(row);
    }
    out.write_csv("orbit.csv", &csv)?;
    match res.status {
        IntegrationStatus::Completed => Ok(Outcome {
            tasks: vec![TaskStatus::ok("orbit")],
            partial: false,
        }),
        other => Err(CliError::Numerical(format!(
            "integration stopped early: {}",
            serde_json::to_string(&other).unwrap_or_default()
        ))),
    }
}

fn lyapunov_status(r: &LyapunovResult) -> &'static str {
    match r.status {
        LyapunovStatus::Completed => "completed",
        LyapunovStatus::ConstraintBreach { .. } => "constraint_breach",
        LyapunovStatus::StepFailure { .. } => "step_failure",
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Io(e.to_string()))
}

/// Grid points of the run; the chain's own `U/J`, `μ/J` without a grid.
fn grid_points(cfg: &RunConfig) -> Vec<(f64, f64)> {
    match &cfg.grid {
        Some(g) => g.points(),
        None => vec![(
            cfg.chain.interaction / cfg.chain.hopping,
            cfg.chain.chemical_potential / cfg.chain.hopping,
        )],
    }
}

pub fn cmd_lyapunov(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let lcfg = cfg.lyapunov.as_ref().expect("validated");
    let points = grid_points(cfg);
    let initial = cfg.initial.resolve(&cfg.chain, cfg.seed)?;
    let pq = action_angle_to_pq(&initial).map_err(numerical)?;
    let results: Vec<_> = pool(cfg.workers)?.install(|| {
        points
            .par_iter()
            .map(|&(u, mu)| {
                let params = cfg.chain_at(u, mu);
                let energy = hamiltonian_action_angle(&initial, &params).unwrap_or(f64::NAN);
                (energy, lyapunov(&pq, &params, lcfg))
            })
            .collect()
    });

    let l = cfg.chain.sites;
    let spectrum = lcfg.mode == LyapunovMode::Spectrum;
    let mut header: Vec<String> = ["U/J", "mu/J", "energy[J]", "lambda_max[J]"].map(String::from).to_vec();
    header.extend((1..=l).map(|n| format!("lambda_{n}[J]")));
    if spectrum {
        header.extend((1..=2 * l).map(|k| format!("spectrum_{k}[J]")));
    }
    header.extend(["converged", "status", "flag"].map(String::from));
    let mut csv = Csv::new(header);
    let mut tasks = Vec::new();
    let mut partial = false;
    for (&(u, mu), (energy, res)) in points.iter().zip(&results) {
        let task = format!("U/J={u},mu/J={mu}");
        let mut row = vec![fmt_f64(u), fmt_f64(mu), fmt_f64(*energy)];
        let flag = if u == 0.0 { "zero_interaction" } else { "" };
        match res {
            Ok(r) => {
                row.push(fmt_f64(r.lambda_max));
                row.extend(r.lambda_per_site.iter().copied().map(fmt_f64));
                if spectrum {
                    let s = r.spectrum.clone().unwrap_or_else(|| vec![f64::NAN; 2 * l]);
                    row.extend(s.into_iter().map(fmt_f64));
                }
                row.push(r.converged.to_string());
                row.push(lyapunov_status(r).into());
                if r.status == LyapunovStatus::Completed {
                    tasks.push(TaskStatus::ok(task));
                } else {
                    partial = true;
                    tasks.push(TaskStatus::with(task, lyapunov_status(r), format!("stopped at t={}", r.t_end)));
                }
            }
            Err(e) => {
                partial = true;
                let width = 1 + l + if spectrum { 2 * l } else { 0 };
                row.extend(std::iter::repeat_n(fmt_f64(f64::NAN), width));
                row.push("false".into());
                row.push("error".into());
                tasks.push(TaskStatus::with(task, "error", e.to_string()));
            }
        }
        row.push(flag.into());
        csv.row(row);
    }
    out.write_csv("lyapunov.csv", &csv)?;
    if results.iter().all(|(_, r)| r.is_err()) {
        return Err(CliError::Numerical("every grid point failed".into()));
    }
    Ok(Outcome { tasks, partial })
}

fn variance_csv(series: &VarianceSeries) -> Csv {
    let l = series.sites();
    let mut csv = Csv::new(
        std::iter::once("t[1/J]".to_string())
            .chain(site_columns("var", l))
            .chain(site_columns("mean", l))
            .chain((1..l).map(|n| format!("cov_{n}_{}", n + 1))),
    );
    for (k, &t) in series.times.iter().enumerate() {
        let mut row = vec![t];
        row.extend(&series.var[k]);
        row.extend(&series.mean[k]);
        row.extend(&series.cov_nn[k]);
        csv.numbers(row);
    }
    csv
}

/// Inverse of [`variance_csv`]; next-nearest covariances are not stored.
fn series_from_csv(path: &std::path::Path, sites: usize) -> Result<VarianceSeries, CliError> {
    let (header, rows) = read_numeric_csv(path)?;
    if header.len() != 3 * sites {
        return Err(CliError::Config(format!(
            "{}: expected {} columns for {sites} sites",
            path.display(),
            3 * sites
        )));
    }
    let l = sites;
    Ok(VarianceSeries {
        times: rows.iter().map(|r| r[0]).collect(),
        var: rows.iter().map(|r| r[1..=l].to_vec()).collect(),
        mean: rows.iter().map(|r| r[l + 1..=2 * l].to_vec()).collect(),
        cov_nn: rows.iter().map(|r| r[2 * l + 1..].to_vec()).collect(),
        cov_nnn: rows.iter().map(|_| Vec::new()).collect(),
        valid_until: None,
        members: 0,
        truncated: Vec::new(),
    })
}

fn run_ensemble(
    cfg: &RunConfig,
    params: &ChainParams,
    initial: &ActionAngleState,
) -> Result<VarianceSeries, CliError> {
    let spec = cfg.ensemble_options().spec(initial.clone(), cfg.seed);
    let members = make_ensemble(&spec, params).map_err(|e| CliError::Config(e.to_string()))?;
    evolve_ensemble(&members, params, integrator(cfg), cfg.workers).map_err(numerical)
}

fn fits_json(cfg: &RunConfig, series: &VarianceSeries) -> Value {
    Value::Array(
        (1..=series.sites())
            .map(|n| match fit_exponent(series, n, cfg.fit.window) {
                Ok(f) => serde_json::to_value(f).unwrap_or(Value::Null),
                Err(e) => json!({"site": n, "error": e.to_string()}),
            })
            .collect(),
    )
}

pub fn cmd_ensemble(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let params = cfg.chain;
    let initial = cfg.initial.resolve(&params, cfg.seed)?;
    let series = run_ensemble(cfg, &params, &initial)?;
    out.write_csv("variance.csv", &variance_csv(&series))?;
    out.write_json("fits.json", &fits_json(cfg, &series))?;
    let predictions = predict_exponents(&params, &initial, cfg.fit.series, cfg.fit.fill_fraction);
    out.write_json("predictions.json", &predictions)?;

    let crossovers: Vec<Value> = (1..=series.sites())
        .filter_map(|n| detect_crossover(&series, n).ok().map(|c| (n, c)))
        .filter(|(_, c)| c.t_star.is_some() || c.t_star2.is_some())
        .map(|(n, c)| json!({"site": n, "t_star": c.t_star, "t_star2": c.t_star2}))
        .collect();
    if !crossovers.is_empty() {
        out.write_json("crossover.json", &crossovers)?;
    }

    let mut tasks = vec![TaskStatus::ok("ensemble")];
    let partial = !series.truncated.is_empty();
    if partial {
        tasks[0] = TaskStatus::with(
            "ensemble",
            "truncated",
            format!(
                "{} members stopped early; statistics end at t={:?}",
                series.truncated.len(),
                series.times.last()
            ),
        );
    }
    Ok(Outcome { tasks, partial })
}

pub fn cmd_sweep(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let initial = cfg.initial.resolve(&cfg.chain, cfg.seed)?;
    let mut csv = Csv::new(
        ["U/J", "mu/J", "site", "slope", "stderr", "r2", "class", "predicted_zeta", "status"].map(String::from),
    );
    let mut tasks = Vec::new();
    let mut partial = false;
    let mut failures = 0;
    let points = grid_points(cfg);
    for &(u, mu) in &points {
        let task = format!("U/J={u},mu/J={mu}");
        let params = cfg.chain_at(u, mu);
        let predictions = predict_exponents(&params, &initial, cfg.fit.series, cfg.fit.fill_fraction);
        let series = match run_ensemble(cfg, &params, &initial) {
            Ok(s) => s,
            Err(e) => {
                partial = true;
                failures += 1;
                tasks.push(TaskStatus::with(task, "error", e.to_string()));
                continue;
            }
        };
        let status = if series.truncated.is_empty() { "completed" } else { "truncated" };
        partial |= status != "completed";
        for n in 1..=params.sites {
            let zeta = predictions[n - 1].zeta.map_or(String::new(), |z| z.to_string());
            let mut row = vec![fmt_f64(u), fmt_f64(mu), n.to_string()];
            match fit_exponent(&series, n, cfg.fit.window) {
                Ok(f) => {
                    row.extend([fmt_f64(f.slope), fmt_f64(f.stderr), fmt_f64(f.r2)]);
                    row.push(serde_json::to_string(&f.classified).unwrap_or_default().replace(',', ";"));
                }
                Err(_) => {
                    row.extend(std::iter::repeat_n(fmt_f64(f64::NAN), 3));
                    row.push("none".into());
                }
            }
            row.push(zeta);
            row.push(status.into());
            csv.row(row);
        }
        tasks.push(if status == "completed" {
            TaskStatus::ok(task)
        } else {
            TaskStatus::with(task, status, "members stopped early")
        });
    }
    out.write_csv("sweep.csv", &csv)?;
    if failures == points.len() {
        return Err(CliError::Numerical("every grid point failed".into()));
    }
    Ok(Outcome { tasks, partial })
}

fn per_site<F>(l: usize, f: F) -> Value
where
    F: Fn(usize) -> Result<f64, bhchain::theory::TheoryError>,
{
    Value::Array(
        (1..=l)
            .map(|j| match f(j) {
                Ok(v) => json!({"site": j, "value": v}),
                Err(e) => json!({"site": j, "error": e.to_string()}),
            })
            .collect(),
    )
}

fn closed_forms(actions: &[f64], params: &ChainParams) -> Value {
    let l = params.sites;
    let or_error = |r: Result<Value, bhchain::theory::TheoryError>| r.unwrap_or_else(|e| json!({"error": e.to_string()}));
    json!({
        "h2": per_site(l, |j| perturb_coeff_h2(actions, j, params)),
        "h2tilde": per_site(l, |j| perturb_coeff_h2tilde(actions, j, params)),
        "averaged_hamiltonian": or_error(averaged_hamiltonian(actions, params).map(|v| json!(v))),
        "leading": or_error(diffusion_matrix_leading(actions, params).map(|d| json!(d))),
        "langevin_sigma": or_error(langevin_sigma(actions, params).map(|s| json!(s))),
        "langevin": or_error(diffusion_matrix_langevin(actions, params).map(|d| json!(d))),
    })
}

pub fn cmd_theory(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let opts = cfg.theory.clone().unwrap_or_default();
    let initial = cfg.initial.resolve(&cfg.chain, cfg.seed)?;
    let actions = opts.actions.clone().unwrap_or_else(|| initial.actions.clone());
    if actions.len() != cfg.chain.sites {
        return Err(CliError::Config("theory.actions has the wrong length".into()));
    }
    let points = grid_points(cfg);
    let mut tasks = Vec::new();
    let mut partial = false;

    let mut evaluations = Vec::new();
    for &(u, mu) in &points {
        let params = cfg.chain_at(u, mu);
        let mut v = closed_forms(&actions, &params);
        v["U/J"] = json!(u);
        v["mu/J"] = json!(mu);
        evaluations.push(v);
    }
    let mut report = json!({"actions": actions, "points": evaluations});

    if let Some(d) = &opts.diffusion {
        if let Some(files) = &d.variance_csv {
            if files.len() != points.len() {
                return Err(CliError::Config(format!(
                    "theory.diffusion.variance_csv needs {} files, one per grid point",
                    points.len()
                )));
            }
        }
        let mut table = Csv::new(
            ["U/J", "mu/J", "n", "m", "fitted_rate", "predicted_rate", "abs_log_gap", "status"].map(String::from),
        );
        for (k, &(u, mu)) in points.iter().enumerate() {
            let task = format!("diffusion U/J={u},mu/J={mu}");
            let params = cfg.chain_at(u, mu);
            let series = match &d.variance_csv {
                Some(files) => series_from_csv(&files[k], params.sites),
                None => run_ensemble(cfg, &params, &initial),
            };
            let compared = series.and_then(|s| {
                compare_covariance_rates(&s, &params, d.window).map_err(numerical)
            });
            match compared {
                Ok(rows) => {
                    for c in rows {
                        let nan = f64::NAN;
                        table.row(vec![
                            fmt_f64(u),
                            fmt_f64(mu),
                            c.site.to_string(),
                            (c.site + 1).to_string(),
                            fmt_f64(c.fitted_rate.unwrap_or(nan)),
                            fmt_f64(c.predicted_rate),
                            fmt_f64(c.log_gap.unwrap_or(nan)),
                            c.error.unwrap_or_else(|| "ok".into()).replace(',', ";"),
                        ]);
                    }
                    tasks.push(TaskStatus::ok(task));
                }
                Err(e) => {
                    partial = true;
                    tasks.push(TaskStatus::with(task, "error", e.to_string()));
                }
            }
        }
        out.write_csv("diffusion_table.csv", &table)?;
    }

    if let Some(d) = &opts.dnse {
        match dnse_comparison(cfg, &initial, d.t_end, d.samples, out) {
            Ok(freqs) => {
                report["dnse"] = freqs;
                tasks.push(TaskStatus::ok("dnse"));
            }
            Err(e) => {
                partial = true;
                tasks.push(TaskStatus::with("dnse", "error", e.to_string()));
            }
        }
    }

    out.write_json("theory.json", &report)?;
    tasks.insert(0, TaskStatus::ok("closed_forms"));
    Ok(Outcome { tasks, partial })
}

/// Integrates the configured state on a uniform grid and writes, for every
/// initially filled site, the zero-hopping prediction next to the simulated action.
fn dnse_comparison(
    cfg: &RunConfig,
    initial: &ActionAngleState,
    t_end: Option<f64>,
    samples: usize,
    out: &mut OutputDir,
) -> Result<Value, CliError> {
    let params = cfg.chain;
    let mu = params.chemical_potential;
    let t_end = t_end.unwrap_or(100.0 / mu);
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(CliError::Config("dnse needs mu > 0 or an explicit t_end".into()));
    }
    let times: Vec<f64> = (0..samples).map(|k| t_end * k as f64 / (samples - 1) as f64).collect();
    let mut icfg = IntegratorConfig::new(t_end).with_samples(SampleSchedule::Explicit { times: times.clone() });
    icfg.rel_tol = DEFAULT_TOL;
    icfg.abs_tol = DEFAULT_TOL;
    let pq = action_angle_to_pq(initial).map_err(numerical)?;
    let res = integrate_orbit(&pq, &params, &icfg).map_err(numerical)?;
    if res.status != IntegrationStatus::Completed {
        return Err(CliError::Numerical("integration stopped early".into()));
    }
    let sim = res.trajectory.actions();
    let filled: Vec<usize> = (0..params.sites).filter(|&n| initial.actions[n] > 0.0).collect();
    let predicted: Vec<Vec<f64>> = filled
        .iter()
        .map(|&n| {
            dnse_series(initial.actions[n], &params, &times)
                .map(|f| f.iter().map(|z| z.norm_sqr()).collect())
                .map_err(numerical)
        })
        .collect::<Result<_, _>>()?;
    let mut csv = Csv::new(
        std::iter::once("t[1/J]".to_string())
            .chain(filled.iter().flat_map(|n| [format!("f2_{}", n + 1), format!("I_{}", n + 1)])),
    );
    for (k, &t) in times.iter().enumerate() {
        let mut row = vec![t];
        for (j, &n) in filled.iter().enumerate() {
            row.push(predicted[j][k]);
            row.push(sim[k][n]);
        }
        csv.numbers(row);
    }
    out.write_csv("dnse.csv", &csv)?;
    let nyquist = std::f64::consts::PI * (samples - 1) as f64 / t_end;
    let rows = (0..params.sites)
        .map(|n| {
            let x: Vec<f64> = sim.iter().map(|r| r[n]).collect();
            let omega = dominant_angular_frequency(&times, &x, nyquist).map_err(numerical)?;
            Ok(json!({"site": n + 1, "omega_simulated": omega, "omega_2mu": 2.0 * mu}))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(Value::Array(rows))
}
