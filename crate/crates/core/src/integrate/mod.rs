//! Adaptive time integration of the `(P,Q)` equations of motion with energy and
//! constraint monitoring.
//!
//! Orbits are integrated without enforcing the number constraint; its value is
//! watched after every accepted step and at every sample, and the run stops as
//! soon as the relative violation exceeds `constraint_tol`. In
//! [`IntegrationMode::Projected`] the state is instead pulled back radially onto
//! the constraint sphere after each step.

mod dop853;
mod tableau;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dop853::{Dop853, OdeSystem, StepError};

use crate::model::{constraint_flat, eom_into, ChainParams, ModelError, PQState, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("initial state violates the constraint: relative error {violation:.3e} > {tol:.3e}")]
    InitialConstraint { violation: f64, tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMode {
    #[default]
    Unconstrained,
    Projected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SampleSchedule {
    Explicit { times: Vec<f64> },
    Log { t_min: f64, points_per_decade: usize },
}

impl SampleSchedule {
    pub fn resolve(&self, t_end: f64) -> Result<Vec<f64>, IntegrateError> {
        match self {
            SampleSchedule::Explicit { times } => {
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(IntegrateError::InvalidSchedule(
                        "sample times must be strictly increasing".into(),
                    ));
                }
                if times.iter().any(|&t| !(0.0..=t_end).contains(&t)) {
                    return Err(IntegrateError::InvalidSchedule(format!(
                        "sample times must lie in [0, {t_end}]"
                    )));
                }
                Ok(times.clone())
            }
            SampleSchedule::Log {
                t_min,
                points_per_decade,
            } => log_schedule(*t_min, t_end, *points_per_decade),
        }
    }
}

pub const DEFAULT_TOL: f64 = 1e-14;
pub const ENSEMBLE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub t_end: f64,
    pub sample_times: SampleSchedule,
    pub constraint_tol: f64,
    #[serde(default)]
    pub mode: IntegrationMode,
}

impl IntegratorConfig {
    /// Tight tolerances (`1e-14`), 1% constraint budget and 20 log-spaced
    /// samples per decade from `t = 0.1`. Ensemble runs usually loosen the
    /// tolerances to `1e-10`.
    pub fn new(t_end: f64) -> Self {
        Self {
            rel_tol: DEFAULT_TOL,
            abs_tol: DEFAULT_TOL,
            t_end,
            sample_times: SampleSchedule::Log {
                t_min: 0.1_f64.min(t_end),
                points_per_decade: 20,
            },
            constraint_tol: 0.01,
            mode: IntegrationMode::Unconstrained,
        }
    }

    pub fn with_tolerances(mut self, rel_tol: f64, abs_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self.abs_tol = abs_tol;
        self
    }

    pub fn with_samples(mut self, sample_times: SampleSchedule) -> Self {
        self.sample_times = sample_times;
        self
    }

    pub fn with_mode(mut self, mode: IntegrationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), IntegrateError> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(IntegrateError::InvalidConfig("tolerances must be > 0".into()));
        }
        if !(self.constraint_tol > 0.0 && self.constraint_tol < 1.0) {
            return Err(IntegrateError::InvalidConfig(
                "constraint_tol must lie in (0, 1)".into(),
            ));
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(IntegrateError::InvalidConfig("t_end must be finite and > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum IntegrationStatus {
    Completed,
    ConstraintBreach { t: f64 },
    StepFailure { t: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrationStats {
    pub accepted_steps: u64,
    pub rejected_steps: u64,
    pub rhs_evals: u64,
    pub wall_time_s: f64,
    /// Largest relative constraint violation seen before projection (Projected
    /// mode) or on any accepted step (Unconstrained mode).
    pub max_constraint_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationOutcome {
    pub trajectory: Trajectory,
    pub status: IntegrationStatus,
    pub stats: IntegrationStats,
}

/// Vector field of the chain on the packed `[P, Q]` layout.
pub struct ChainSystem<'a> {
    pub params: &'a ChainParams,
}

impl OdeSystem for ChainSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.params.sites
    }

    #[inline]
    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let l = self.params.sites;
        let (p, q) = y.split_at(l);
        let (dp, dq) = dy.split_at_mut(l);
        eom_into(p, q, self.params, dp, dq);
    }
}

/// Logarithmically spaced times from `t_min` to `t_end` inclusive.
pub fn log_schedule(
    t_min: f64,
    t_end: f64,
    points_per_decade: usize,
) -> Result<Vec<f64>, IntegrateError> {
    if !(t_min > 0.0 && t_end > t_min && t_end.is_finite()) {
        return Err(IntegrateError::InvalidSchedule(format!(
            "need 0 < t_min < t_end, got t_min={t_min}, t_end={t_end}"
        )));
    }
    if points_per_decade == 0 {
        return Err(IntegrateError::InvalidSchedule(
            "points_per_decade must be >= 1".into(),
        ));
    }
    let ppd = points_per_decade as f64;
    let span = ppd * (t_end / t_min).log10();
    // tolerate round-off so that exact decades land on t_end
    let last = (span - 1e-9).ceil().max(1.0) as usize;
    let mut out: Vec<f64> = (0..last)
        .map(|k| t_min * 10f64.powf(k as f64 / ppd))
        .filter(|&t| t < t_end)
        .collect();
    out.push(t_end);
    out.dedup();
    Ok(out)
}

fn relative_violation(y: &[f64], norm: f64) -> f64 {
    let l = y.len() / 2;
    ((constraint_flat(&y[..l], &y[l..]) - norm) / norm).abs()
}

/// Integrates one orbit and samples it at the configured times (plus `t = 0`).
pub fn integrate_orbit(
    initial: &PQState,
    params: &ChainParams,
    cfg: &IntegratorConfig,
) -> Result<IntegrationOutcome, IntegrateError> {
    params.validate()?;
    cfg.validate()?;
    if initial.sites() != params.sites || initial.q.len() != params.sites {
        return Err(ModelError::DimensionMismatch {
            expected: params.sites,
            got: initial.sites(),
        }
        .into());
    }
    let samples = cfg.sample_times.resolve(cfg.t_end)?;
    let y0 = initial.to_flat();
    let v0 = relative_violation(&y0, params.norm);
    if v0 > cfg.constraint_tol {
        return Err(IntegrateError::InitialConstraint {
            violation: v0,
            tol: cfg.constraint_tol,
        });
    }

    let started = Instant::now();
    let mut trajectory = Trajectory::default();
    trajectory.push(0.0, initial.clone(), params);
    let mut pending = samples.into_iter().filter(|&t| t > 0.0).peekable();

    let sys = ChainSystem { params };
    let mut solver = Dop853::new(&sys, 0.0, &y0, cfg.t_end, cfg.rel_tol, cfg.abs_tol);
    let mut stats = IntegrationStats {
        max_constraint_violation: v0,
        ..Default::default()
    };
    let mut buf = vec![0.0; y0.len()];
    let mut status = IntegrationStatus::Completed;

    'outer: while solver.t() < cfg.t_end {
        if let Err(e) = solver.step(cfg.t_end) {
            let t = match e {
                StepError::TooSmall { t } | StepError::NonFinite { t } => t,
            };
            status = IntegrationStatus::StepFailure { t };
            break;
        }
        let t = solver.t();
        let violation = relative_violation(solver.y(), params.norm);
        stats.max_constraint_violation = stats.max_constraint_violation.max(violation);

        while let Some(&ts) = pending.peek() {
            if ts > t {
                break;
            }
            solver.dense_output(ts, &mut buf);
            if cfg.mode == IntegrationMode::Unconstrained
                && relative_violation(&buf, params.norm) > cfg.constraint_tol
            {
                status = IntegrationStatus::ConstraintBreach { t: ts };
                break 'outer;
            }
            if cfg.mode == IntegrationMode::Projected {
                project_onto_sphere(&mut buf, params.norm);
            }
            trajectory.push(ts, PQState::from_flat(&buf), params);
            pending.next();
        }

        match cfg.mode {
            IntegrationMode::Unconstrained => {
                if violation > cfg.constraint_tol {
                    status = IntegrationStatus::ConstraintBreach { t };
                    break;
                }
            }
            IntegrationMode::Projected => {
                buf.copy_from_slice(solver.y());
                project_onto_sphere(&mut buf, params.norm);
                solver.reset_state(&buf);
            }
        }
    }

    stats.accepted_steps = solver.accepted;
    stats.rejected_steps = solver.rejected;
    stats.rhs_evals = solver.rhs_evals;
    stats.wall_time_s = started.elapsed().as_secs_f64();
    Ok(IntegrationOutcome {
        trajectory,
        status,
        stats,
    })
}

/// Radial rescaling of a packed `[P, Q]` vector onto `½|y|² = norm`.
pub fn project_onto_sphere(y: &mut [f64], norm: f64) {
    let l = y.len() / 2;
    let c = constraint_flat(&y[..l], &y[l..]);
    if c > 0.0 {
        let s = (norm / c).sqrt();
        y.iter_mut().for_each(|v| *v *= s);
    }
}

/// Integrates from `t0` to `t1` (either direction) without sampling.
pub fn propagate(
    state: &PQState,
    params: &ChainParams,
    t0: f64,
    t1: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<PQState, IntegrateError> {
    params.validate()?;
    let sys = ChainSystem { params };
    let y0 = state.to_flat();
    let mut solver = Dop853::new(&sys, t0, &y0, t1, rel_tol, abs_tol);
    while solver.t() != t1 {
        solver.step(t1).map_err(|e| {
            IntegrateError::InvalidConfig(format!("step failure during propagation: {e:?}"))
        })?;
    }
    Ok(PQState::from_flat(solver.y()))
}
