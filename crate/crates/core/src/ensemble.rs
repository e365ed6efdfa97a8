//! Ensembles of orbits started from a sharply peaked distribution, and the
//! per-site action statistics `σ²(I_n)(t)` computed over them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::{integrate_orbit, IntegrateError, IntegrationStatus, IntegratorConfig};
use crate::model::{action_angle_to_pq, ActionAngleState, ChainParams, ModelError, PQState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error("invalid ensemble specification: {0}")]
    InvalidSpec(String),
    #[error("member {member}: every action clipped to zero")]
    InfeasibleBase { member: usize },
    #[error("fewer than two members survive to the first sample")]
    FewerThanTwoMembers,
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// `ξ` uniform on `[-width, width]`.
    #[default]
    Uniform,
    /// `ξ` normal with standard deviation `width`.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleInit {
    /// Base angles jittered by `ξ`.
    FixedBase,
    #[default]
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionPerturbation {
    /// `I_n (1 + ξ_n)`.
    #[default]
    Relative,
    /// `I_n + ξ_n`.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub base: ActionAngleState,
    #[serde(default)]
    pub dist: Distribution,
    pub width: f64,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub angle_init: AngleInit,
    #[serde(default)]
    pub perturbation: ActionPerturbation,
    /// Actions below this are raised to it before perturbing.
    pub empty_floor: f64,
}

impl EnsembleSpec {
    pub fn new(base: ActionAngleState, seed: u64) -> Self {
        Self {
            base,
            dist: Distribution::Uniform,
            width: 1e-3,
            count: 100,
            seed,
            angle_init: AngleInit::UniformRandom,
            perturbation: ActionPerturbation::Relative,
            empty_floor: 1e-12,
        }
    }

    pub fn validate(&self, params: &ChainParams) -> Result<(), EnsembleError> {
        let bad = |m: String| Err(EnsembleError::InvalidSpec(m));
        self.base.check(params)?;
        if !(0.0..=0.1).contains(&self.width) {
            return bad(format!("width must lie in [0, 0.1], got {}", self.width));
        }
        if self.count < 2 {
            return bad("count must be >= 2".into());
        }
        if !(self.empty_floor >= 0.0 && self.empty_floor < params.norm) {
            return bad("empty_floor must lie in [0, norm)".into());
        }
        let total = self.base.total_action();
        if ((total - params.norm) / params.norm).abs() > 1e-9 {
            return bad(format!("base actions sum to {total}, expected {}", params.norm));
        }
        Ok(())
    }
}

/// Generator for member `k`: one ChaCha stream per member under the master seed.
pub fn member_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

fn draw(rng: &mut ChaCha8Rng, dist: Distribution, width: f64) -> f64 {
    match dist {
        Distribution::Uniform => width * rng.gen_range(-1.0..=1.0),
        Distribution::Gaussian => width * rng.sample::<f64, _>(StandardNormal),
    }
}

/// Initial actions and angles of member `k`.
pub fn make_member(
    spec: &EnsembleSpec,
    params: &ChainParams,
    k: usize,
) -> Result<ActionAngleState, EnsembleError> {
    let mut rng = member_rng(spec.seed, k);
    let mut actions: Vec<f64> = spec
        .base
        .actions
        .iter()
        .map(|&i| {
            let i = i.max(spec.empty_floor);
            let xi = draw(&mut rng, spec.dist, spec.width);
            let v = match spec.perturbation {
                ActionPerturbation::Relative => i * (1.0 + xi),
                ActionPerturbation::Absolute => i + xi,
            };
            v.max(0.0)
        })
        .collect();
    let total: f64 = actions.iter().sum();
    if total <= 0.0 {
        return Err(EnsembleError::InfeasibleBase { member: k });
    }
    let s = params.norm / total;
    actions.iter_mut().for_each(|a| *a *= s);
    let angles = spec
        .base
        .angles
        .iter()
        .map(|&phi| match spec.angle_init {
            AngleInit::FixedBase => phi + draw(&mut rng, spec.dist, spec.width),
            AngleInit::UniformRandom => rng.gen_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    Ok(ActionAngleState::new(actions, angles)?)
}

/// All `count` initial states.
pub fn make_ensemble(spec: &EnsembleSpec, params: &ChainParams) -> Result<Vec<PQState>, EnsembleError> {
    params.validate()?;
    spec.validate(params)?;
    (0..spec.count)
        .map(|k| Ok(action_angle_to_pq(&make_member(spec, params, k)?)?))
        .collect()
}

/// Per-site statistics over an ensemble, row per sample time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceSeries {
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    /// `Cov(I_n, I_{n+1})`, `L − 1` entries per row.
    pub cov_nn: Vec<Vec<f64>>,
    /// `Cov(I_n, I_{n+2})`, `L − 2` entries per row.
    pub cov_nnn: Vec<Vec<f64>>,
    /// Time at which the first member left the constraint budget or failed.
    pub valid_until: Option<f64>,
    pub members: usize,
    /// Member indices whose integration was cut short, with the time.
    pub truncated: Vec<(usize, f64)>,
}

impl VarianceSeries {
    pub fn sites(&self) -> usize {
        self.mean.first().map_or(0, Vec::len)
    }

    /// `σ²(I_n)` for one site over time.
    pub fn site_var(&self, n: usize) -> Vec<f64> {
        self.var.iter().map(|row| row[n]).collect()
    }

    pub fn site_mean(&self, n: usize) -> Vec<f64> {
        self.mean.iter().map(|row| row[n]).collect()
    }

    /// Builds the statistics from per-member action rows sampled on a common
    /// time grid. Members may be shorter than `times`; rows are kept only while
    /// every member is present.
    pub fn from_members(times: &[f64], members: &[Vec<Vec<f64>>]) -> Result<Self, EnsembleError> {
        if members.len() < 2 {
            return Err(EnsembleError::FewerThanTwoMembers);
        }
        let len = members.iter().map(Vec::len).min().unwrap_or(0).min(times.len());
        if len == 0 {
            return Err(EnsembleError::FewerThanTwoMembers);
        }
        let l = members[0][0].len();
        let c = members.len() as f64;
        let mut out = VarianceSeries {
            times: times[..len].to_vec(),
            members: members.len(),
            ..Default::default()
        };
        for s in 0..len {
            let mean: Vec<f64> = (0..l)
                .map(|n| members.iter().map(|m| m[s][n]).sum::<f64>() / c)
                .collect();
            let cov = |a: usize, b: usize| {
                members
                    .iter()
                    .map(|m| (m[s][a] - mean[a]) * (m[s][b] - mean[b]))
                    .sum::<f64>()
                    / c
            };
            out.var.push((0..l).map(|n| cov(n, n)).collect());
            out.cov_nn.push((0..l.saturating_sub(1)).map(|n| cov(n, n + 1)).collect());
            out.cov_nnn.push((0..l.saturating_sub(2)).map(|n| cov(n, n + 2)).collect());
            out.mean.push(mean);
        }
        Ok(out)
    }
}

/// Integrates every member on a pool of `workers` threads and reduces the
/// statistics in member order, so the result does not depend on `workers`.
pub fn evolve_ensemble(
    members: &[PQState],
    params: &ChainParams,
    cfg: &IntegratorConfig,
    workers: usize,
) -> Result<VarianceSeries, EnsembleError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EnsembleError::Pool(e.to_string()))?;
    let outcomes: Vec<_> = pool.install(|| {
        members
            .par_iter()
            .map(|m| integrate_orbit(m, params, cfg))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let times = outcomes
        .iter()
        .max_by_key(|o| o.trajectory.len())
        .map(|o| o.trajectory.times.clone())
        .unwrap_or_default();
    let mut truncated = Vec::new();
    for (k, o) in outcomes.iter().enumerate() {
        match o.status {
            IntegrationStatus::Completed => {}
            IntegrationStatus::ConstraintBreach { t } | IntegrationStatus::StepFailure { t } => {
                truncated.push((k, t))
            }
        }
    }
    let actions: Vec<_> = outcomes.iter().map(|o| o.trajectory.actions()).collect();
    let mut series = VarianceSeries::from_members(&times, &actions)?;
    series.valid_until = truncated.iter().map(|&(_, t)| t).reduce(f64::min);
    series.truncated = truncated;
    Ok(series)
}
