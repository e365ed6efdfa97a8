//! Transport exponents from variance series: power-law fits, classification into
//! the quantized series, the distance-rule prediction, crossover detection and
//! normal-diffusion rates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::VarianceSeries;
use crate::model::{ActionAngleState, Boundary, ChainParams};
pub use crate::theory::{rg_exponent, ExponentSeries};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScalingError {
    #[error("window [{t_lo}, {t_hi}] must satisfy 0 < t_lo and span at least one decade")]
    InvalidWindow { t_lo: f64, t_hi: f64 },
    #[error("window holds {got} samples, need at least {need}")]
    WindowTooSparse { got: usize, need: usize },
    #[error("non-positive value {value} at t = {t}")]
    NonPositiveVariance { t: f64, value: f64 },
    #[error("log-log slope {slope:.3} is outside the normal-diffusion band [0.7, 1.3]")]
    WindowNotNormal { slope: f64 },
    #[error("site {site} out of range for {sites} sites")]
    SiteOutOfRange { site: usize, sites: usize },
}

pub const MIN_SAMPLES: usize = 8;
const EVEN_TOL: f64 = 0.5;
const NORMAL_TOL: f64 = 0.3;
const FLAT_TOL: f64 = 0.3;
const NORMAL_BAND: (f64, f64) = (0.7, 1.3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", content = "k", rename_all = "snake_case")]
pub enum Classification {
    Even(u32),
    Normal,
    Flat,
    Unclassified,
}

impl Classification {
    /// Flat first, then normal, then the nearest even integer.
    pub fn of_slope(slope: f64) -> Self {
        if !slope.is_finite() {
            return Self::Unclassified;
        }
        if slope.abs() <= FLAT_TOL {
            return Self::Flat;
        }
        if (slope - 1.0).abs() <= NORMAL_TOL {
            return Self::Normal;
        }
        let k = (slope / 2.0).round() * 2.0;
        if k >= 0.0 && (slope - k).abs() <= EVEN_TOL {
            Self::Even(k as u32)
        } else {
            Self::Unclassified
        }
    }

    /// Whether this class is consistent with exponent `zeta`. A flat fit counts
    /// as exponent 0.
    pub fn matches(self, zeta: u32) -> bool {
        match self {
            Self::Even(k) => k == zeta,
            Self::Flat => zeta == 0,
            Self::Normal | Self::Unclassified => false,
        }
    }

    pub fn even_exponent(self) -> Option<u32> {
        match self {
            Self::Even(k) => Some(k),
            Self::Flat => Some(0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = a + b x`.
pub fn line_fit(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = (syy - slope * sxy).max(0.0);
    let stderr = if x.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    LineFit {
        slope,
        intercept,
        stderr,
        r2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// 1-based site index.
    pub site: usize,
    pub window: (f64, f64),
    pub slope: f64,
    pub stderr: f64,
    pub r2: f64,
    pub classified: Classification,
}

fn check_window(t_lo: f64, t_hi: f64) -> Result<(), ScalingError> {
    // allow round-off on exact decades
    if !(t_lo > 0.0 && t_hi.is_finite() && t_hi >= 10.0 * t_lo * (1.0 - 1e-12)) {
        return Err(ScalingError::InvalidWindow { t_lo, t_hi });
    }
    Ok(())
}

/// Indices of samples inside `[t_lo, t_hi]`.
fn window_indices(times: &[f64], t_lo: f64, t_hi: f64) -> Vec<usize> {
    times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= t_lo * (1.0 - 1e-12) && t <= t_hi * (1.0 + 1e-12))
        .map(|(i, _)| i)
        .collect()
}

/// Log-log slope of `values` against `times` inside a window. `site` is only
/// carried into the result.
pub fn fit_power_law(
    times: &[f64],
    values: &[f64],
    site: usize,
    window: (f64, f64),
) -> Result<ScalingFit, ScalingError> {
    check_window(window.0, window.1)?;
    let idx = window_indices(times, window.0, window.1);
    if idx.len() < MIN_SAMPLES {
        return Err(ScalingError::WindowTooSparse {
            got: idx.len(),
            need: MIN_SAMPLES,
        });
    }
    if let Some(&i) = idx.iter().find(|&&i| values[i] <= 0.0 || !values[i].is_finite()) {
        return Err(ScalingError::NonPositiveVariance {
            t: times[i],
            value: values[i],
        });
    }
    let x: Vec<f64> = idx.iter().map(|&i| times[i].ln()).collect();
    let y: Vec<f64> = idx.iter().map(|&i| values[i].ln()).collect();
    let f = line_fit(&x, &y);
    Ok(ScalingFit {
        site,
        window,
        slope: f.slope,
        stderr: f.stderr,
        r2: f.r2,
        classified: Classification::of_slope(f.slope),
    })
}

/// Fits `σ²(I_site) ∝ t^ζ` over `window`. `site` is 1-based.
pub fn fit_exponent(
    series: &VarianceSeries,
    site: usize,
    window: (f64, f64),
) -> Result<ScalingFit, ScalingError> {
    let sites = series.sites();
    if site == 0 || site > sites {
        return Err(ScalingError::SiteOutOfRange { site, sites });
    }
    fit_power_law(&series.times, &series.site_var(site - 1), site, window)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentPrediction {
    /// 1-based site index.
    pub site: usize,
    /// Effective distance; `None` means no transport is expected.
    pub m: Option<usize>,
    pub zeta: Option<u32>,
    pub series: ExponentSeries,
}

pub const DEFAULT_FILL_FRACTION: f64 = 0.1;

/// 1-based indices of sites holding at least `fill_fraction · max I`.
pub fn filled_sites(initial: &ActionAngleState, fill_fraction: f64) -> Vec<usize> {
    let max = initial.actions.iter().cloned().fold(0.0, f64::max);
    initial
        .actions
        .iter()
        .enumerate()
        .filter(|(_, &a)| max > 0.0 && a >= fill_fraction * max)
        .map(|(i, _)| i + 1)
        .collect()
}

/// Distance rule: `m = min(|n − n₀|, n, L − n)` over filled sites `n₀`, with
/// 1-based `n`. Periodic chains get no prediction.
pub fn predict_exponents(
    params: &ChainParams,
    initial: &ActionAngleState,
    series: ExponentSeries,
    fill_fraction: f64,
) -> Vec<ExponentPrediction> {
    let l = params.sites;
    let filled = filled_sites(initial, fill_fraction);
    (1..=l)
        .map(|n| {
            let m = match params.boundary {
                Boundary::Periodic => None,
                Boundary::HardWall => filled
                    .iter()
                    .map(|&n0| n.abs_diff(n0))
                    .chain([n, l - n])
                    .min(),
            };
            ExponentPrediction {
                site: n,
                m,
                zeta: m.map(|m| rg_exponent(m, series)),
                series,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Crossover {
    /// End of the longest early stretch with a stable even exponent.
    pub t_star: Option<f64>,
    /// Start of the last stretch with normal (slope ≈ 1) growth.
    pub t_star2: Option<f64>,
}

/// Local one-decade fits slid in steps of a quarter decade.
pub fn local_slopes(times: &[f64], values: &[f64]) -> Vec<ScalingFit> {
    let positive: Vec<f64> = times.iter().cloned().filter(|&t| t > 0.0).collect();
    let (Some(&t0), Some(&t1)) = (positive.first(), positive.last()) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut lo = t0;
    while lo * 10.0 <= t1 * (1.0 + 1e-12) {
        if let Ok(f) = fit_power_law(times, values, 0, (lo, lo * 10.0)) {
            out.push(f);
        }
        lo *= 10f64.powf(0.25);
    }
    out
}

/// Needs at least four decades of positive-time data.
pub fn detect_crossover(series: &VarianceSeries, site: usize) -> Result<Crossover, ScalingError> {
    let sites = series.sites();
    if site == 0 || site > sites {
        return Err(ScalingError::SiteOutOfRange { site, sites });
    }
    Ok(crossover_from(&series.times, &series.site_var(site - 1)))
}

pub fn crossover_from(times: &[f64], values: &[f64]) -> Crossover {
    let positive: Vec<f64> = times.iter().cloned().filter(|&t| t > 0.0).collect();
    match (positive.first(), positive.last()) {
        (Some(&a), Some(&b)) if b >= a * 1e4 * (1.0 - 1e-12) => {}
        _ => return Crossover::default(),
    }
    let fits = local_slopes(times, values);
    let classes: Vec<Classification> = fits.iter().map(|f| f.classified).collect();

    // last run of normal windows
    let mut t_star2 = None;
    let mut normal_from = fits.len();
    if let Some(last) = classes.iter().rposition(|c| *c == Classification::Normal) {
        let mut first = last;
        while first > 0 && classes[first - 1] == Classification::Normal {
            first -= 1;
        }
        t_star2 = Some(fits[first].window.0);
        normal_from = first;
    }

    // longest run of one even exponent before that
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < normal_from {
        let Some(k) = classes[i].even_exponent() else {
            i += 1;
            continue;
        };
        let mut j = i;
        while j + 1 < normal_from && classes[j + 1].even_exponent() == Some(k) {
            j += 1;
        }
        if best.map_or(true, |(a, b)| j - i > b - a) {
            best = Some((i, j));
        }
        i = j + 1;
    }
    Crossover {
        t_star: best.map(|(_, j)| fits[j].window.1),
        t_star2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "site", rename_all = "snake_case")]
pub enum Moment {
    /// `σ²(I_n)`, 1-based `n`.
    Variance(usize),
    /// `Cov(I_n, I_{n+1})`, 1-based `n`.
    NearestCovariance(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionFit {
    pub moment: Moment,
    pub window: (f64, f64),
    /// Linear growth rate `d⟨·⟩/dt`; equals `2D` for `σ² = 2Dt + c`.
    pub rate: f64,
    /// Log-log slope of the magnitude over the same window.
    pub loglog_slope: f64,
}

/// Linear growth rate of a second moment over a window in the normal regime.
pub fn fit_diffusion_coefficient(
    series: &VarianceSeries,
    moment: Moment,
    window: (f64, f64),
) -> Result<DiffusionFit, ScalingError> {
    let sites = series.sites();
    let values: Vec<f64> = match moment {
        Moment::Variance(n) if (1..=sites).contains(&n) => series.site_var(n - 1),
        Moment::NearestCovariance(n) if (1..sites).contains(&n) => {
            series.cov_nn.iter().map(|row| row[n - 1]).collect()
        }
        Moment::Variance(n) | Moment::NearestCovariance(n) => {
            return Err(ScalingError::SiteOutOfRange { site: n, sites })
        }
    };
    let magnitude: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let loglog = match fit_power_law(&series.times, &magnitude, 0, window) {
        Ok(f) => f.slope,
        // a moment stuck at zero is not diffusing
        Err(ScalingError::NonPositiveVariance { .. }) => 0.0,
        Err(e) => return Err(e),
    };
    if !(NORMAL_BAND.0..=NORMAL_BAND.1).contains(&loglog) {
        return Err(ScalingError::WindowNotNormal { slope: loglog });
    }
    let idx = window_indices(&series.times, window.0, window.1);
    let x: Vec<f64> = idx.iter().map(|&i| series.times[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
    Ok(DiffusionFit {
        moment,
        window,
        rate: line_fit(&x, &y).slope,
        loglog_slope: loglog,
    })
}

/// Per-site variance rates; sites outside the normal regime carry their error.
pub fn fit_diffusion_coefficients(
    series: &VarianceSeries,
    window: (f64, f64),
) -> Vec<Result<DiffusionFit, ScalingError>> {
    (1..=series.sites())
        .map(|n| fit_diffusion_coefficient(series, Moment::Variance(n), window))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::log_schedule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series_from(times: &[f64], f: impl Fn(f64) -> f64) -> VarianceSeries {
        VarianceSeries {
            times: times.to_vec(),
            mean: times.iter().map(|_| vec![1.0]).collect(),
            var: times.iter().map(|&t| vec![f(t)]).collect(),
            cov_nn: times.iter().map(|_| vec![]).collect(),
            cov_nnn: times.iter().map(|_| vec![]).collect(),
            valid_until: None,
            members: 2,
            truncated: vec![],
        }
    }

    #[test]
    fn exact_power_law_slope() {
        let t = log_schedule(0.1, 1e5, 20).unwrap();
        let s = series_from(&t, |t| 3.0 * t.powi(4));
        let f = fit_exponent(&s, 1, (10.0, 1e3)).unwrap();
        assert!((f.slope - 4.0).abs() < 1e-12);
        assert_eq!(f.classified, Classification::Even(4));
        assert!(f.r2 > 1.0 - 1e-12);
    }

    #[test]
    fn constant_is_flat() {
        let t = log_schedule(0.1, 1e5, 20).unwrap();
        let f = fit_exponent(&series_from(&t, |_| 2.5), 1, (10.0, 1e3)).unwrap();
        assert!(f.slope.abs() < 1e-12);
        assert_eq!(f.classified, Classification::Flat);
        assert!(f.classified.matches(0));
    }

    #[test]
    fn noisy_quartic_keeps_class() {
        let t = log_schedule(0.1, 1e5, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<f64> = t.iter().map(|_| 1.0 + rng.gen_range(-0.05..0.05)).collect();
        let s = VarianceSeries {
            var: t.iter().zip(&noise).map(|(t, e)| vec![t.powi(4) * e]).collect(),
            ..series_from(&t, |_| 1.0)
        };
        assert_eq!(fit_exponent(&s, 1, (10.0, 1e3)).unwrap().classified, Classification::Even(4));
    }

    #[test]
    fn classification_bands() {
        assert_eq!(Classification::of_slope(0.2), Classification::Flat);
        assert_eq!(Classification::of_slope(0.45), Classification::Even(0));
        assert_eq!(Classification::of_slope(1.25), Classification::Normal);
        assert_eq!(Classification::of_slope(1.6), Classification::Even(2));
        assert_eq!(Classification::of_slope(3.0), Classification::Unclassified);
        assert_eq!(Classification::of_slope(8.4), Classification::Even(8));
        assert_eq!(Classification::of_slope(-1.0), Classification::Unclassified);
    }

    #[test]
    fn fit_errors() {
        let t = log_schedule(1.0, 1e3, 2).unwrap();
        let s = series_from(&t, |t| t);
        assert!(matches!(fit_exponent(&s, 1, (1.0, 1e3)), Err(ScalingError::WindowTooSparse { .. })));
        let t = log_schedule(1.0, 1e3, 20).unwrap();
        let s = series_from(&t, |t| t - 50.0);
        assert!(matches!(fit_exponent(&s, 1, (1.0, 1e3)), Err(ScalingError::NonPositiveVariance { .. })));
        assert!(matches!(fit_exponent(&s, 1, (1.0, 5.0)), Err(ScalingError::InvalidWindow { .. })));
        assert!(matches!(fit_exponent(&s, 2, (1.0, 1e3)), Err(ScalingError::SiteOutOfRange { .. })));
    }

    #[test]
    fn distance_rule_single_site() {
        let params = ChainParams::new(10, 1.0, 25.0, 0.05);
        let mut a = vec![0.0; 10];
        a[4] = 1.0;
        let init = ActionAngleState::with_zero_angles(a).unwrap();
        let zeta: Vec<u32> = predict_exponents(&params, &init, ExponentSeries::FourM, DEFAULT_FILL_FRACTION)
            .iter()
            .map(|p| p.zeta.unwrap())
            .collect();
        assert_eq!(zeta, vec![4, 8, 8, 4, 0, 4, 8, 8, 4, 0]);
    }

    #[test]
    fn distance_rule_two_sites_and_homogeneous() {
        let params = ChainParams::new(20, 1.0, 13.3, 0.05);
        let mut a = vec![0.0; 20];
        a[6] = 0.5;
        a[15] = 0.5;
        let init = ActionAngleState::with_zero_angles(a).unwrap();
        let m: Vec<usize> = predict_exponents(&params, &init, ExponentSeries::FourM, 0.1)
            .iter()
            .map(|p| p.m.unwrap())
            .collect();
        assert_eq!(m, vec![1, 2, 3, 3, 2, 1, 0, 1, 2, 3, 4, 4, 3, 2, 1, 0, 1, 2, 1, 0]);

        let homo = ActionAngleState::with_zero_angles(vec![0.05; 20]).unwrap();
        assert!(predict_exponents(&params, &homo, ExponentSeries::TwoM, 0.1)
            .iter()
            .all(|p| p.zeta == Some(0)));
        let ring = params.clone().with_boundary(Boundary::Periodic);
        assert!(predict_exponents(&ring, &init, ExponentSeries::FourM, 0.1)
            .iter()
            .all(|p| p.zeta.is_none()));
    }

    #[test]
    fn rg_exponents() {
        assert_eq!(rg_exponent(0, ExponentSeries::FourM), 0);
        assert_eq!(rg_exponent(2, ExponentSeries::FourM), 8);
        assert_eq!(rg_exponent(3, ExponentSeries::TwoM), 6);
    }

    #[test]
    fn piecewise_crossover() {
        let t = log_schedule(0.1, 1e6, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // t^4 up to 1e2, a noisy plateau up to 1e3, then linear growth
        let v: Vec<f64> = t
            .iter()
            .map(|&t| {
                if t <= 1e2 {
                    t.powi(4)
                } else if t <= 1e3 {
                    1e8 * (1.0 + rng.gen_range(-0.3..0.3))
                } else {
                    1e8 * t / 1e3
                }
            })
            .collect();
        let c = crossover_from(&t, &v);
        let (ts, ts2) = (c.t_star.unwrap(), c.t_star2.unwrap());
        assert!((ts / 1e2).log10().abs() <= 0.5, "{ts}");
        assert!((ts2 / 1e3).log10().abs() <= 0.5, "{ts2}");
    }

    #[test]
    fn pure_power_law_has_no_normal_regime() {
        let t = log_schedule(0.1, 1e5, 20).unwrap();
        let v: Vec<f64> = t.iter().map(|t| t.powi(4)).collect();
        let c = crossover_from(&t, &v);
        assert!((c.t_star.unwrap() / 1e5 - 1.0).abs() < 1e-9);
        assert_eq!(c.t_star2, None);
        assert_eq!(crossover_from(&t[..40], &v[..40]), Crossover::default());
    }

    #[test]
    fn diffusion_rate_is_linear_slope() {
        let t = log_schedule(0.1, 1e5, 20).unwrap();
        let s = series_from(&t, |t| 2.0 * 0.3 * t + 1e-3);
        let f = fit_diffusion_coefficient(&s, Moment::Variance(1), (1e2, 1e4)).unwrap();
        assert!((f.rate - 0.6).abs() < 1e-10);
        let flat = series_from(&t, |_| 1e-6);
        assert!(matches!(
            fit_diffusion_coefficient(&flat, Moment::Variance(1), (1e2, 1e4)),
            Err(ScalingError::WindowNotNormal { .. })
        ));
    }
}
