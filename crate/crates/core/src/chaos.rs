//! Tangent-space dynamics and Lyapunov exponents.
//!
//! Tangent vectors are evolved together with the orbit by the linearised
//! equations of motion and renormalised every `renorm_interval`. The site-resolved
//! exponent `λ_n` is the growth rate of the `(δP_n, δQ_n)` block of the first
//! tangent vector, with renormalisation acting on the whole vector. The orbit
//! alone is propagated through the transient and every tangent vector starts
//! there with equal weight on all components.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::{propagate, Dop853, IntegrateError, OdeSystem, StepError, ENSEMBLE_TOL};
use crate::model::{constraint_flat, eom_into, ChainParams, ModelError, PQState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChaosError {
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid Lyapunov configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovMode {
    #[default]
    PerSite,
    MaxOnly,
    Spectrum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovConfig {
    pub t_transient: f64,
    pub t_total: f64,
    pub delta0: f64,
    pub renorm_interval: f64,
    #[serde(default)]
    pub mode: LyapunovMode,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Relative constraint violation at which the run is cut short.
    pub constraint_tol: f64,
}

impl LyapunovConfig {
    pub fn new(t_total: f64) -> Self {
        Self {
            t_transient: 10.0,
            t_total,
            delta0: 1e-9,
            renorm_interval: 1.0,
            mode: LyapunovMode::PerSite,
            rel_tol: ENSEMBLE_TOL,
            abs_tol: ENSEMBLE_TOL,
            constraint_tol: 0.01,
        }
    }

    pub fn with_mode(mut self, mode: LyapunovMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_transient(mut self, t_transient: f64) -> Self {
        self.t_transient = t_transient;
        self
    }

    pub fn with_delta0(mut self, delta0: f64) -> Self {
        self.delta0 = delta0;
        self
    }

    pub fn validate(&self) -> Result<(), ChaosError> {
        let bad = |m: &str| Err(ChaosError::InvalidConfig(m.into()));
        if !(1e-14..=1e-6).contains(&self.delta0) {
            return bad("delta0 must lie in [1e-14, 1e-6]");
        }
        if !(self.t_transient > 0.0 && self.t_total > self.t_transient && self.t_total.is_finite()) {
            return bad("need t_total > t_transient > 0");
        }
        if !(self.renorm_interval > 0.0 && self.renorm_interval.is_finite()) {
            return bad("renorm_interval must be finite and > 0");
        }
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return bad("tolerances must be > 0");
        }
        if !(self.constraint_tol > 0.0 && self.constraint_tol < 1.0) {
            return bad("constraint_tol must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub t: f64,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LyapunovStatus {
    Completed,
    ConstraintBreach { t: f64 },
    StepFailure { t: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovResult {
    pub lambda_per_site: Vec<f64>,
    pub lambda_max: f64,
    /// Descending, length `2L`, only in [`LyapunovMode::Spectrum`].
    pub spectrum: Option<Vec<f64>>,
    pub convergence: Vec<ConvergencePoint>,
    /// False when the estimate moved by more than 10% over the last decade.
    pub converged: bool,
    pub status: LyapunovStatus,
    /// End of the averaging window actually used.
    pub t_end: f64,
}

/// Jacobian of the `(P,Q)` vector field at `state`, applied to `variation`.
pub fn variational_rhs(
    state: &PQState,
    variation: &PQState,
    params: &ChainParams,
) -> Result<PQState, ModelError> {
    state.check(params)?;
    variation.check(params)?;
    let mut out = PQState::zeros(params.sites);
    variational_into(
        &state.p,
        &state.q,
        &variation.p,
        &variation.q,
        params,
        &mut out.p,
        &mut out.q,
    );
    Ok(out)
}

#[inline]
fn variational_into(
    p: &[f64],
    q: &[f64],
    vp: &[f64],
    vq: &[f64],
    params: &ChainParams,
    dp: &mut [f64],
    dq: &mut [f64],
) {
    let u = params.interaction;
    let mu = params.chemical_potential;
    let j_hop = params.hopping;
    for j in 0..params.sites {
        let w = 0.5 * u * (p[j] * p[j] + q[j] * q[j]) - mu;
        let dr = u * (p[j] * vp[j] + q[j] * vq[j]);
        dp[j] = vq[j] * w + q[j] * dr;
        dq[j] = -vp[j] * w - p[j] * dr;
    }
    if j_hop != 0.0 {
        for (a, b) in params.bonds() {
            dp[a] -= j_hop * vq[b];
            dp[b] -= j_hop * vq[a];
            dq[a] += j_hop * vp[b];
            dq[b] += j_hop * vp[a];
        }
    }
}

/// Orbit followed by `vectors` tangent vectors, each laid out as `[δP, δQ]`.
struct TangentSystem<'a> {
    params: &'a ChainParams,
    vectors: usize,
}

impl OdeSystem for TangentSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.params.sites * (1 + self.vectors)
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let l = self.params.sites;
        let (x, vs) = y.split_at(2 * l);
        let (dx, dvs) = dy.split_at_mut(2 * l);
        let (p, q) = x.split_at(l);
        {
            let (dp, dq) = dx.split_at_mut(l);
            eom_into(p, q, self.params, dp, dq);
        }
        for (v, dv) in vs.chunks_exact(2 * l).zip(dvs.chunks_exact_mut(2 * l)) {
            let (vp, vq) = v.split_at(l);
            let (dp, dq) = dv.split_at_mut(l);
            variational_into(p, q, vp, vq, self.params, dp, dq);
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm of the site-`n` block of a `[δP, δQ]` vector.
fn site_norm(v: &[f64], l: usize, n: usize) -> f64 {
    v[n].hypot(v[l + n])
}

/// Modified Gram-Schmidt on consecutive `dim`-blocks of `vs`; returns the norms
/// removed from each vector, after which every block has length `scale`.
fn orthonormalize(vs: &mut [f64], dim: usize, scale: f64) -> Vec<f64> {
    let k = vs.len() / dim;
    let mut r = Vec::with_capacity(k);
    for i in 0..k {
        let (done, rest) = vs.split_at_mut(i * dim);
        let vi = &mut rest[..dim];
        for j in 0..i {
            let vj = &done[j * dim..(j + 1) * dim];
            let c = vi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>() / (scale * scale);
            vi.iter_mut().zip(vj).for_each(|(a, b)| *a -= c * b);
        }
        let nrm = norm(vi);
        r.push(nrm);
        let s = scale / nrm;
        vi.iter_mut().for_each(|a| *a *= s);
    }
    r
}

fn check_inputs(initial: &PQState, params: &ChainParams, cfg: &LyapunovConfig) -> Result<(), ChaosError> {
    params.validate()?;
    initial.check(params)?;
    cfg.validate()
}

/// Site-resolved exponents from a single tangent vector.
pub fn lyapunov_per_site(
    initial: &PQState,
    params: &ChainParams,
    cfg: &LyapunovConfig,
) -> Result<LyapunovResult, ChaosError> {
    check_inputs(initial, params, cfg)?;
    run(initial, params, cfg, 1)
}

/// Full spectrum from `2L` tangent vectors; also fills the site-resolved
/// exponents from the leading vector.
pub fn lyapunov_spectrum(
    initial: &PQState,
    params: &ChainParams,
    cfg: &LyapunovConfig,
) -> Result<LyapunovResult, ChaosError> {
    check_inputs(initial, params, cfg)?;
    run(initial, params, cfg, 2 * params.sites)
}

/// Dispatches on `cfg.mode`.
pub fn lyapunov(
    initial: &PQState,
    params: &ChainParams,
    cfg: &LyapunovConfig,
) -> Result<LyapunovResult, ChaosError> {
    match cfg.mode {
        LyapunovMode::PerSite | LyapunovMode::MaxOnly => lyapunov_per_site(initial, params, cfg),
        LyapunovMode::Spectrum => lyapunov_spectrum(initial, params, cfg),
    }
}

fn run(
    initial: &PQState,
    params: &ChainParams,
    cfg: &LyapunovConfig,
    vectors: usize,
) -> Result<LyapunovResult, ChaosError> {
    let l = params.sites;
    let dim = 2 * l;
    let start = propagate(initial, params, 0.0, cfg.t_transient, cfg.rel_tol, cfg.abs_tol)?;

    let mut y = start.to_flat();
    y.resize(dim * (1 + vectors), 0.0);
    {
        let vs = &mut y[dim..];
        vs[..dim].fill(1.0);
        for i in 1..vectors {
            vs[i * dim + i - 1] = 1.0;
        }
        orthonormalize(vs, dim, cfg.delta0);
    }
    let initial_site: Vec<f64> = (0..l).map(|n| site_norm(&y[dim..2 * dim], l, n)).collect();

    let sys = TangentSystem { params, vectors };
    let mut solver = Dop853::new(&sys, cfg.t_transient, &y, cfg.t_total, cfg.rel_tol, cfg.abs_tol);
    // tangent components live at scale delta0, so their absolute tolerance does too
    let mut atol = vec![cfg.abs_tol; y.len()];
    atol[dim..].iter_mut().for_each(|a| *a *= cfg.delta0);
    solver.set_abs_tol(&atol);

    let mut log_stretch = vec![0.0; vectors];
    let mut convergence = Vec::new();
    let mut status = LyapunovStatus::Completed;
    let mut t_prev = cfg.t_transient;

    while t_prev < cfg.t_total {
        let t_next = (t_prev + cfg.renorm_interval).min(cfg.t_total);
        let mut failed = None;
        while solver.t() < t_next {
            if let Err(e) = solver.step(t_next) {
                failed = Some(match e {
                    StepError::TooSmall { t } | StepError::NonFinite { t } => t,
                });
                break;
            }
        }
        if let Some(t) = failed {
            status = LyapunovStatus::StepFailure { t };
            break;
        }
        let mut y = solver.y().to_vec();
        let c = constraint_flat(&y[..l], &y[l..dim]);
        if ((c - params.norm) / params.norm).abs() > cfg.constraint_tol {
            status = LyapunovStatus::ConstraintBreach { t: t_next };
            break;
        }
        let r = orthonormalize(&mut y[dim..], dim, cfg.delta0);
        for (acc, ri) in log_stretch.iter_mut().zip(&r) {
            *acc += (ri / cfg.delta0).ln();
        }
        solver.reset_state(&y);
        t_prev = t_next;
        convergence.push(ConvergencePoint {
            t: t_next,
            lambda_max: log_stretch[0] / (t_next - cfg.t_transient),
        });
    }

    let span = t_prev - cfg.t_transient;
    if span <= 0.0 {
        return Err(ChaosError::InvalidConfig(
            "integration failed before the first renormalisation".into(),
        ));
    }
    let lambda_first = log_stretch[0] / span;
    // site block at the end relative to its start, both measured at scale delta0
    let final_vec = &solver.y()[dim..2 * dim];
    let final_total = norm(final_vec);
    let lambda_per_site = (0..l)
        .map(|n| {
            let share = site_norm(final_vec, l, n) / final_total * cfg.delta0;
            if share == 0.0 || initial_site[n] == 0.0 {
                f64::NEG_INFINITY
            } else {
                lambda_first + (share / initial_site[n]).ln() / span
            }
        })
        .collect();
    let spectrum = (vectors > 1).then(|| {
        let mut s: Vec<f64> = log_stretch.iter().map(|x| x / span).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    });
    let lambda_max = spectrum.as_ref().map_or(lambda_first, |s| s[0]);
    let converged = is_converged(&convergence, cfg.t_transient);
    Ok(LyapunovResult {
        lambda_per_site,
        lambda_max,
        spectrum,
        convergence,
        converged,
        status,
        t_end: t_prev,
    })
}

/// Relative change of the running estimate over the last decade of averaging
/// time, with an absolute floor of `1e-3` for orbits whose exponent is ~0.
fn is_converged(series: &[ConvergencePoint], t0: f64) -> bool {
    let Some(last) = series.last() else {
        return false;
    };
    let t_ref = t0 + (last.t - t0) / 10.0;
    let Some(earlier) = series.iter().rev().find(|c| c.t <= t_ref) else {
        return false;
    };
    let change = (last.lambda_max - earlier.lambda_max).abs();
    change <= (0.1 * last.lambda_max.abs()).max(1e-3)
}
