//! Acceptance checks. Each test prints one verdict line and then asserts it.
//! The two extended checks take hours and are ignored by default:
//! `cargo test -p validation --test acceptance -- --ignored`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use bhchain::chaos::{lyapunov, LyapunovConfig, LyapunovMode, LyapunovResult, LyapunovStatus};
use bhchain::ensemble::VarianceSeries;
use bhchain::integrate::{integrate_orbit, IntegrationStatus, IntegratorConfig, SampleSchedule};
use bhchain::model::{action_angle_to_pq, eom_pq, Boundary, ChainParams, PQState};
use bhchain::scaling::{
    detect_crossover, fit_exponent, predict_exponents, Classification, ExponentSeries, DEFAULT_FILL_FRACTION,
};
use bhchain::theory::{
    angle_average_mc, compare_covariance_rates, diffusion_matrix_leading, dnse_homogeneous,
    dominant_angular_frequency, AngleAverage, AngleSampling,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use validation::{filled, report, run_cli, run_ensemble, single_site_config};

/// Single-site ensemble outputs at one worker, shared by criteria 1, 2 and 10.
fn single_site_outputs() -> &'static BTreeMap<String, Vec<u8>> {
    static OUT: OnceLock<BTreeMap<String, Vec<u8>>> = OnceLock::new();
    OUT.get_or_init(|| run_cli(&single_site_config(1)))
}

struct SiteFit {
    site: usize,
    slope: f64,
    r2: f64,
    class: Classification,
}

fn parse_fits(bytes: &[u8]) -> Vec<Option<SiteFit>> {
    let v: Vec<Value> = serde_json::from_slice(bytes).expect("fits.json");
    v.into_iter()
        .map(|f| {
            f.get("slope").map(|_| SiteFit {
                site: f["site"].as_u64().unwrap() as usize,
                slope: f["slope"].as_f64().unwrap(),
                r2: f["r2"].as_f64().unwrap(),
                class: serde_json::from_value(f["classified"].clone()).unwrap(),
            })
        })
        .collect()
}

fn fits_of(series: &VarianceSeries, window: (f64, f64)) -> Vec<Option<SiteFit>> {
    (1..=series.sites())
        .map(|n| {
            fit_exponent(series, n, window).ok().map(|f| SiteFit {
                site: n,
                slope: f.slope,
                r2: f.r2,
                class: f.classified,
            })
        })
        .collect()
}

fn class_name(c: Classification) -> String {
    match c {
        Classification::Even(k) => format!("Even({k})"),
        other => format!("{other:?}"),
    }
}

#[test]
fn c01_single_site_exponent_classes() {
    let fits = parse_fits(&single_site_outputs()["fits.json"]);
    let expected: [(usize, u32); 9] = [(5, 0), (4, 4), (6, 4), (1, 4), (9, 4), (3, 8), (7, 8), (2, 8), (8, 8)];
    let mut ok = true;
    let mut detail = Vec::new();
    for (site, k) in expected {
        let (good, text) = match &fits[site - 1] {
            Some(f) => (
                f.class == Classification::Even(k),
                format!("site {site} slope {:.2} {} want Even({k})", f.slope, class_name(f.class)),
            ),
            None => (false, format!("site {site} fit failed")),
        };
        ok &= good;
        detail.push(text);
    }
    report(1, "single-site exponent classes in [10, 1e3]", ok, &detail.join("; "));
    assert!(ok);
}

#[test]
fn c02_distance_rule_predictions() {
    let single = parse_fits(&single_site_outputs()["fits.json"]);
    let p1 = ChainParams::new(10, 1.0, 25.0, 0.05);
    let b1 = filled(10, &[(5, 1.0)], 1.0);
    let pred1 = predict_exponents(&p1, &b1, ExponentSeries::FourM, DEFAULT_FILL_FRACTION);

    let p2 = ChainParams::new(20, 1.0, 25.0, 0.05);
    let b2 = filled(20, &[(7, 0.5), (16, 0.5)], 1.0);
    let pred2 = predict_exponents(&p2, &b2, ExponentSeries::FourM, DEFAULT_FILL_FRACTION);
    let two = fits_of(&run_ensemble(&p2, &b2, 1e3, 1), (10.0, 1e3));

    let mut checked = 0;
    let mut mismatches = Vec::new();
    let mut best_r2: f64 = 0.0;
    for (label, fits, pred) in [("L=10", &single, &pred1), ("L=20", &two, &pred2)] {
        for f in fits.iter().flatten() {
            best_r2 = best_r2.max(f.r2);
            if f.r2 < 0.95 {
                continue;
            }
            checked += 1;
            let zeta = pred[f.site - 1].zeta;
            if !zeta.is_some_and(|z| f.class.matches(z)) {
                mismatches.push(format!("{label} site {} {} vs {:?}", f.site, class_name(f.class), zeta));
            }
        }
    }
    // agreement on zero qualifying sites would be vacuous
    let ok = checked > 0 && mismatches.is_empty();
    let detail = if checked == 0 {
        format!("no site reached r2 >= 0.95 (best {best_r2:.3}); the rule could not be tested")
    } else {
        format!("{checked} sites checked, mismatches: {mismatches:?}")
    };
    report(2, "distance rule vs fitted classes", ok, &detail);
    assert!(ok);
}

#[test]
fn c03_no_transport_is_flat() {
    let homogeneous = ChainParams::new(20, 1.0, 5.0, 0.25);
    let all: Vec<(usize, f64)> = (1..=20).map(|n| (n, 1.0)).collect();
    let h = fits_of(&run_ensemble(&homogeneous, &filled(20, &all, 1.0), 1e3, 1), (10.0, 1e3));
    let ring = ChainParams::new(10, 1.0, 25.0, 0.05).with_boundary(Boundary::Periodic);
    let r = fits_of(&run_ensemble(&ring, &filled(10, &[(5, 1.0)], 1.0), 1e3, 1), (10.0, 1e3));
    let mut ok = true;
    let mut detail = Vec::new();
    for (label, fits) in [("homogeneous L=20", &h), ("periodic L=10", &r)] {
        let slopes: Vec<String> = fits
            .iter()
            .map(|f| f.as_ref().map_or("fail".into(), |f| format!("{:.2}", f.slope)))
            .collect();
        ok &= fits.iter().all(|f| f.as_ref().is_some_and(|f| f.class == Classification::Flat));
        detail.push(format!("{label} slopes [{}]", slopes.join(" ")));
    }
    report(3, "no-transport cases classify Flat", ok, &detail.join("; "));
    assert!(ok);
}

#[test]
#[ignore = "extended: about an hour"]
fn c04_crossover_to_normal_diffusion() {
    let params = ChainParams::new(10, 1.0, 10.0, 0.0);
    let base = filled(10, &[(4, 0.5), (5, 0.5)], 1.0);
    let t_end = 12f64.exp();
    let series = run_ensemble(&params, &base, t_end, 1);
    let late = (t_end / 10.0, t_end);
    let mut ok = series.times.last().is_some_and(|&t| t >= t_end * (1.0 - 1e-12));
    let mut detail = vec![format!("series ends at {:?}", series.times.last())];
    for n in (1..=10).filter(|&n| n != 4 && n != 5) {
        let c = detect_crossover(&series, n);
        let fit = fit_exponent(&series, n, late);
        let star_ok = matches!(&c, Ok(c) if c.t_star.is_some_and(|t| t <= 8f64.exp()));
        let slope_ok = matches!(&fit, Ok(f) if (f.slope - 1.0).abs() <= 0.3);
        ok &= star_ok && slope_ok;
        detail.push(format!(
            "site {n} t_star {:?} late slope {:?}",
            c.as_ref().ok().and_then(|c| c.t_star),
            fit.as_ref().ok().map(|f| (f.slope * 100.0).round() / 100.0)
        ));
    }
    report(4, "crossover to normal diffusion", ok, &detail.join("; "));
    assert!(ok);
}

#[test]
#[ignore = "extended: several hours"]
fn c05_diffusion_coefficient_magnitude() {
    let t_end = 1e5;
    let window = (1e4, 1e5);
    let mut ok = true;
    let mut detail = Vec::new();
    for u in [1.0, 10.0, 50.0] {
        let params = ChainParams::new(20, 1.0, u, 0.0);
        let series = run_ensemble(&params, &filled(20, &[(4, 0.5), (5, 0.5)], 1.0), t_end, 1);
        match compare_covariance_rates(&series, &params, window) {
            Ok(rows) => {
                let worst = rows.iter().map(|r| r.log_gap.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
                let failed = rows.iter().filter(|r| r.error.is_some()).count();
                ok &= worst <= 1.5;
                detail.push(format!("U/J={u}: worst |ln gap| {worst:.2}, {failed} fits outside the normal regime"));
            }
            Err(e) => {
                ok = false;
                detail.push(format!("U/J={u}: {e}"));
            }
        }
    }
    report(5, "nearest-neighbour diffusion rates within 1.5 in ln", ok, &detail.join("; "));
    assert!(ok);
}

/// Twenty random action vectors for each of L = 3, 5, 10.
fn oracle_vectors() -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    for l in [3usize, 5, 10] {
        for _ in 0..20 {
            let raw: Vec<f64> = (0..l).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            out.push(raw.iter().map(|x| x / s).collect());
        }
    }
    out
}

fn oracle_run(workers: usize) -> Vec<AngleAverage> {
    oracle_vectors()
        .iter()
        .map(|a| {
            let params = ChainParams::new(a.len(), 1.0, 1.0, 0.0);
            angle_average_mc(a, &params, 1_000_000, 7, AngleSampling::ShiftedLattice, workers).expect("mc")
        })
        .collect()
}

fn oracle_single_worker() -> &'static Vec<AngleAverage> {
    static OUT: OnceLock<Vec<AngleAverage>> = OnceLock::new();
    OUT.get_or_init(|| oracle_run(1))
}

#[test]
fn c06_leading_matrix_matches_angle_average() {
    let mut worst_rel: f64 = 0.0;
    let mut worst_zero: f64 = 0.0;
    for (a, mc) in oracle_vectors().iter().zip(oracle_single_worker()) {
        let params = ChainParams::new(a.len(), 1.0, 1.0, 0.0);
        let d = diffusion_matrix_leading(a, &params).unwrap();
        let max = d.entries.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for (i, row) in d.entries.iter().enumerate() {
            for (j, &want) in row.iter().enumerate() {
                let got = mc.normalized.entries[i][j];
                if want != 0.0 {
                    worst_rel = worst_rel.max((got - want).abs() / want.abs());
                } else {
                    worst_zero = worst_zero.max((got - want).abs() / max);
                }
            }
        }
    }
    let ok = worst_rel <= 1e-3 && worst_zero <= 1e-3;
    report(
        6,
        "leading diffusion matrix vs angle average (1e6 lattice samples)",
        ok,
        &format!("worst relative error {worst_rel:.2e}; structural zeros within {worst_zero:.2e} of max|D|"),
    );
    assert!(ok);
}

#[test]
fn c07_conservation() {
    let mut ok = true;
    let mut detail = Vec::new();
    let setups = [
        ("I4=.31,I5=.69", filled(10, &[(4, 0.31), (5, 0.69)], 1.0), 1.0),
        ("I4=I5=1", filled(10, &[(4, 1.0), (5, 1.0)], 2.0), 2.0),
    ];
    for (label, state, norm) in &setups {
        for u in [50.0, 5.0] {
            let params = ChainParams::new(10, 1.0, u, 0.0).with_norm(*norm);
            let res = integrate_orbit(&action_angle_to_pq(state).unwrap(), &params, &IntegratorConfig::new(1e4)).unwrap();
            let drift = res.trajectory.max_energy_drift(&params);
            let c = res.stats.max_constraint_violation;
            ok &= res.status == IntegrationStatus::Completed && drift <= 1e-8 && c <= 0.01;
            detail.push(format!("{label} U/J={u}: energy {drift:.1e}, constraint {c:.1e}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let raw: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let angles: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let state = bhchain::model::ActionAngleState::new(raw.iter().map(|x| x / s).collect(), angles).unwrap();
    let params = ChainParams::new(10, 0.0, 3.0, 0.4);
    let res = integrate_orbit(&action_angle_to_pq(&state).unwrap(), &params, &IntegratorConfig::new(1e4)).unwrap();
    let moved = res
        .trajectory
        .actions()
        .iter()
        .flat_map(|row| row.iter().zip(&state.actions).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    ok &= moved <= 1e-12;
    detail.push(format!("J=0 actions moved {moved:.1e}"));

    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let l = rng.gen_range(2..12);
        let params = ChainParams::new(l, rng.gen_range(0.1..2.0), rng.gen_range(0.0..20.0), rng.gen_range(-1.0..1.0));
        let p: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = PQState::new(p, q).unwrap();
        let dx = eom_pq(&x, &params).unwrap();
        let total: f64 = (0..l).map(|n| x.p[n] * dx.p[n] + x.q[n] * dx.q[n]).sum();
        worst = worst.max(total.abs());
    }
    ok &= worst <= 1e-12;
    detail.push(format!("sum of action rates {worst:.1e}"));
    report(7, "conservation", ok, &detail.join("; "));
    assert!(ok);
}

fn lyap(params: &ChainParams, sites: &[(usize, f64)], cfg: &LyapunovConfig) -> LyapunovResult {
    let pq = action_angle_to_pq(&filled(params.sites, sites, params.norm)).unwrap();
    lyapunov(&pq, params, cfg).expect("lyapunov")
}

/// Sites at distance at least 3 from every filled site (1-based).
fn far_sites(l: usize, filled_sites: &[usize]) -> Vec<usize> {
    (1..=l).filter(|n| filled_sites.iter().all(|f| n.abs_diff(*f) >= 3)).collect()
}

#[test]
fn c08_lyapunov_structure() {
    let mut detail = Vec::new();

    let mut worst_zero: f64 = 0.0;
    for mu in [0.0, 0.5, 1.0, 1.5, 2.0] {
        let r = lyap(&ChainParams::new(10, 1.0, 0.0, mu), &[(5, 1.0)], &LyapunovConfig::new(1e4));
        worst_zero = r.lambda_per_site.iter().chain([&r.lambda_max]).fold(worst_zero, |m, v| m.max(v.abs()));
    }
    let a = worst_zero <= 1e-3;
    detail.push(format!("(a) U=0 max |lambda| {worst_zero:.1e}"));

    let chaotic = ChainParams::new(10, 1.0, 5.0, 0.2);
    let spec = lyap(&chaotic, &[(4, 1.0), (5, 1.0)], &LyapunovConfig::new(1e3).with_mode(LyapunovMode::Spectrum));
    let s = spec.spectrum.clone().unwrap();
    let pairing = (0..10).map(|k| (s[k] + s[19 - k]).abs()).fold(0.0, f64::max);
    let b = spec.status == LyapunovStatus::Completed && pairing <= 2e-2;
    detail.push(format!("(b) worst pair sum {pairing:.1e}"));

    let mut c = true;
    for filled_sites in [vec![5usize], vec![4, 5]] {
        let sites: Vec<(usize, f64)> = filled_sites.iter().map(|&n| (n, 1.0)).collect();
        let r = lyap(&chaotic, &sites, &LyapunovConfig::new(1e4));
        let far = far_sites(10, &filled_sites);
        let lowest_filled = filled_sites.iter().map(|&n| r.lambda_per_site[n - 1]).fold(f64::INFINITY, f64::min);
        let highest_far = far.iter().map(|&n| r.lambda_per_site[n - 1]).fold(f64::NEG_INFINITY, f64::max);
        c &= lowest_filled > highest_far;
        detail.push(format!(
            "(c) filled {filled_sites:?}: min filled {lowest_filled:.4} vs max far {highest_far:.4}"
        ));
    }

    let positive = s.iter().filter(|&&x| x > 1e-2).count();
    let d = positive >= 5;
    detail.push(format!("(d) {positive} of 20 exponents above 1e-2"));

    let ok = a && b && c && d;
    report(8, "Lyapunov structure", ok, &detail.join("; "));
    assert!(ok, "a={a} b={b} c={c} d={d}");
}

#[test]
fn c09_zero_hopping_limit() {
    // closed form against the integrator at J=0
    let params = ChainParams::new(2, 0.0, 13.3, 0.05);
    let i0 = 0.5;
    let t_end = 100.0 / params.chemical_potential;
    let times: Vec<f64> = (0..=2000).map(|k| t_end * k as f64 / 2000.0).collect();
    let state = filled(2, &[(1, 0.5), (2, 0.5)], 1.0);
    let cfg = IntegratorConfig::new(t_end).with_samples(SampleSchedule::Explicit { times: times.clone() });
    let sim = integrate_orbit(&action_angle_to_pq(&state).unwrap(), &params, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for (k, &t) in times.iter().enumerate() {
        let f2 = dnse_homogeneous(i0, &params, t).unwrap().norm_sqr();
        worst = worst.max((f2 - sim.trajectory.actions()[k][0]).abs());
    }
    let first = worst <= 1e-8;

    // oscillation frequency of the two-filled-site chain
    let params = ChainParams::new(20, 1.0, 13.3, 0.05);
    let state = filled(20, &[(7, 0.5), (16, 0.5)], 1.0);
    let t_end = 100.0 / params.chemical_potential;
    let n = 20_001;
    let times: Vec<f64> = (0..n).map(|k| t_end * k as f64 / (n - 1) as f64).collect();
    let cfg = IntegratorConfig::new(t_end).with_samples(SampleSchedule::Explicit { times: times.clone() });
    let sim = integrate_orbit(&action_angle_to_pq(&state).unwrap(), &params, &cfg).unwrap();
    let actions = sim.trajectory.actions();
    let target = 2.0 * params.chemical_potential;
    let nyquist = std::f64::consts::PI * (n - 1) as f64 / t_end;
    let mut second = sim.status == IntegrationStatus::Completed;
    let mut freqs = Vec::new();
    for site in [7usize, 13, 16] {
        let x: Vec<f64> = actions.iter().map(|r| r[site - 1]).collect();
        let w = dominant_angular_frequency(&times, &x, nyquist).unwrap();
        second &= ((w - target) / target).abs() <= 0.1;
        freqs.push(format!("site {site} omega {w:.4}"));
    }

    let ok = first && second;
    report(
        9,
        "zero-hopping limit",
        ok,
        &format!(
            "|f|^2 vs integrator worst {worst:.2e} (I0=0.5, U=13.3, mu=0.05); {} vs 2mu={target}",
            freqs.join(", ")
        ),
    );
    assert!(ok, "first={first} second={second}");
}

#[test]
fn c10_outputs_independent_of_workers() {
    let four = run_cli(&single_site_config(4));
    let one = single_site_outputs();
    let ensemble_same = &four == one;
    let oracle_same = serde_json::to_vec(&oracle_run(4)).unwrap() == serde_json::to_vec(oracle_single_worker()).unwrap();
    let ok = ensemble_same && oracle_same;
    report(
        10,
        "byte-identical outputs at 1 and 4 workers",
        ok,
        &format!(
            "ensemble files {:?} identical: {ensemble_same}; angle averages identical: {oracle_same}",
            one.keys().collect::<Vec<_>>()
        ),
    );
    assert!(ok);
}
