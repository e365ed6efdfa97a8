//! Chain parameters, phase-space states and the classical Bose-Hubbard vector field.
//!
//! The chain is written in canonical `(P, Q)` variables
//!
//! ```text
//! H = Σ' [ -J (Q_j Q_{j+1} + P_j P_{j+1}) + U/8 (Q_j² + P_j²)² - μ/2 (Q_j² + P_j²) ]
//! ```
//!
//! with the action-angle map `P = √(2I) sin φ`, `Q = √(2I) cos φ`. The primed sum
//! drops the bond beyond the chain ends for hard walls and wraps `L → 1` on a ring.
//! Number conservation is the constraint `½ Σ (P² + Q²) = norm`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid chain parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: expected {expected} sites, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("negative action {value} at site {site}")]
    NegativeAction { site: usize, value: f64 },
    #[error("action {value} at site {site} is below the angle floor {floor}; integrate in (P,Q) instead")]
    AngleSingularity { site: usize, value: f64, floor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    HardWall,
    Periodic,
}

/// Physical and boundary parameters of one chain. Energies are in the same
/// units as the hopping; times are reported in units of `1/J`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainParams {
    pub sites: usize,
    pub hopping: f64,
    pub interaction: f64,
    pub chemical_potential: f64,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default = "default_norm")]
    pub norm: f64,
}

fn default_norm() -> f64 {
    1.0
}

impl ChainParams {
    /// Hard-wall chain with unit norm.
    pub fn new(sites: usize, hopping: f64, interaction: f64, chemical_potential: f64) -> Self {
        Self {
            sites,
            hopping,
            interaction,
            chemical_potential,
            boundary: Boundary::HardWall,
            norm: 1.0,
        }
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn with_norm(mut self, norm: f64) -> Self {
        self.norm = norm;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sites < 2 {
            return Err(ModelError::InvalidParams(format!(
                "need at least 2 sites, got {}",
                self.sites
            )));
        }
        for (name, v) in [
            ("hopping", self.hopping),
            ("interaction", self.interaction),
            ("chemical_potential", self.chemical_potential),
            ("norm", self.norm),
        ] {
            if !v.is_finite() {
                return Err(ModelError::InvalidParams(format!("{name} is not finite")));
            }
        }
        if self.hopping < 0.0 {
            return Err(ModelError::InvalidParams("hopping must be >= 0".into()));
        }
        if self.norm <= 0.0 {
            return Err(ModelError::InvalidParams("norm must be > 0".into()));
        }
        Ok(())
    }

    /// Nearest-neighbour bonds `(j, k)` entering the primed sum.
    pub fn bonds(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let l = self.sites;
        let wrap = match self.boundary {
            Boundary::HardWall => None,
            Boundary::Periodic => Some((l - 1, 0)),
        };
        (0..l.saturating_sub(1)).map(|j| (j, j + 1)).chain(wrap)
    }

    /// Left and right neighbours of site `j`, if present.
    #[inline]
    pub fn neighbours(&self, j: usize) -> (Option<usize>, Option<usize>) {
        let l = self.sites;
        match self.boundary {
            Boundary::HardWall => (j.checked_sub(1), (j + 1 < l).then_some(j + 1)),
            Boundary::Periodic => (Some((j + l - 1) % l), Some((j + 1) % l)),
        }
    }
}

/// Phase-space point in canonical coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PQState {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl PQState {
    pub fn zeros(sites: usize) -> Self {
        Self {
            p: vec![0.0; sites],
            q: vec![0.0; sites],
        }
    }

    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self, ModelError> {
        if p.len() != q.len() {
            return Err(ModelError::DimensionMismatch {
                expected: p.len(),
                got: q.len(),
            });
        }
        Ok(Self { p, q })
    }

    pub fn sites(&self) -> usize {
        self.p.len()
    }

    /// Packs into `[P_1..P_L, Q_1..Q_L]`, the layout used by the integrators.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut y = Vec::with_capacity(2 * self.sites());
        y.extend_from_slice(&self.p);
        y.extend_from_slice(&self.q);
        y
    }

    pub fn from_flat(y: &[f64]) -> Self {
        let l = y.len() / 2;
        Self {
            p: y[..l].to_vec(),
            q: y[l..2 * l].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(&self.q).all(|v| v.is_finite())
    }

    pub(crate) fn check(&self, params: &ChainParams) -> Result<(), ModelError> {
        if self.p.len() != params.sites || self.q.len() != params.sites {
            return Err(ModelError::DimensionMismatch {
                expected: params.sites,
                got: self.p.len().min(self.q.len()),
            });
        }
        Ok(())
    }
}

/// Phase-space point in action-angle coordinates. Actions are occupation numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionAngleState {
    pub actions: Vec<f64>,
    pub angles: Vec<f64>,
}

impl ActionAngleState {
    /// Builds a state, reducing angles into `[0, 2π)`.
    pub fn new(actions: Vec<f64>, angles: Vec<f64>) -> Result<Self, ModelError> {
        if actions.len() != angles.len() {
            return Err(ModelError::DimensionMismatch {
                expected: actions.len(),
                got: angles.len(),
            });
        }
        if let Some((site, &value)) = actions.iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(ModelError::NegativeAction { site, value });
        }
        let angles = angles.into_iter().map(wrap_angle).collect();
        Ok(Self { actions, angles })
    }

    pub fn with_zero_angles(actions: Vec<f64>) -> Result<Self, ModelError> {
        let n = actions.len();
        Self::new(actions, vec![0.0; n])
    }

    pub fn sites(&self) -> usize {
        self.actions.len()
    }

    pub fn total_action(&self) -> f64 {
        self.actions.iter().sum()
    }

    pub(crate) fn check(&self, params: &ChainParams) -> Result<(), ModelError> {
        if self.actions.len() != params.sites || self.angles.len() != params.sites {
            return Err(ModelError::DimensionMismatch {
                expected: params.sites,
                got: self.actions.len().min(self.angles.len()),
            });
        }
        if let Some((site, &value)) = self.actions.iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(ModelError::NegativeAction { site, value });
        }
        Ok(())
    }
}

/// Time-sampled orbit together with the conserved-quantity diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PQState>,
    pub energy: Vec<f64>,
    pub constraint: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, t: f64, state: PQState, params: &ChainParams) {
        self.energy.push(hamiltonian_flat(&state.p, &state.q, params));
        self.constraint.push(constraint_value(&state));
        self.times.push(t);
        self.states.push(state);
    }

    /// Largest `|H(t) - H(0)|` over the orbit, relative to [`energy_scale`] of
    /// the first sample. Zero for an empty trajectory.
    pub fn max_energy_drift(&self, params: &ChainParams) -> f64 {
        let (Some(first), Some(&e0)) = (self.states.first(), self.energy.first()) else {
            return 0.0;
        };
        let scale = energy_scale(&first.p, &first.q, params);
        self.energy
            .iter()
            .map(|e| (e - e0).abs() / scale)
            .fold(0.0, f64::max)
    }

    /// Actions `I_n(t)` at every sample, row per time.
    pub fn actions(&self) -> Vec<Vec<f64>> {
        self.states
            .iter()
            .map(|s| s.p.iter().zip(&s.q).map(|(p, q)| 0.5 * (p * p + q * q)).collect())
            .collect()
    }
}

#[inline]
pub fn wrap_angle(phi: f64) -> f64 {
    let r = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

pub fn hamiltonian_pq(state: &PQState, params: &ChainParams) -> Result<f64, ModelError> {
    state.check(params)?;
    Ok(hamiltonian_flat(&state.p, &state.q, params))
}

pub(crate) fn hamiltonian_flat(p: &[f64], q: &[f64], params: &ChainParams) -> f64 {
    let u = params.interaction;
    let mu = params.chemical_potential;
    let onsite: f64 = p
        .iter()
        .zip(q)
        .map(|(p, q)| {
            let r2 = p * p + q * q;
            0.125 * u * r2 * r2 - 0.5 * mu * r2
        })
        .sum();
    let hop: f64 = params
        .bonds()
        .map(|(j, k)| q[j] * q[k] + p[j] * p[k])
        .sum();
    onsite - params.hopping * hop
}

/// Sum of the magnitudes of the individual energy terms, never below `|H|`.
/// Used to measure drift when `H` itself is close to zero.
pub fn energy_scale(p: &[f64], q: &[f64], params: &ChainParams) -> f64 {
    let u = params.interaction.abs();
    let mu = params.chemical_potential.abs();
    let onsite: f64 = p
        .iter()
        .zip(q)
        .map(|(p, q)| {
            let r2 = p * p + q * q;
            0.125 * u * r2 * r2 + 0.5 * mu * r2
        })
        .sum();
    let hop: f64 = params
        .bonds()
        .map(|(j, k)| (q[j] * q[k] + p[j] * p[k]).abs())
        .sum();
    let total = onsite + params.hopping.abs() * hop;
    total.max(hamiltonian_flat(p, q, params).abs()).max(f64::MIN_POSITIVE)
}

/// `H0(I) + J·H1(I, φ)`.
pub fn hamiltonian_action_angle(
    state: &ActionAngleState,
    params: &ChainParams,
) -> Result<f64, ModelError> {
    state.check(params)?;
    let (i, phi) = (&state.actions, &state.angles);
    let u = params.interaction;
    let mu = params.chemical_potential;
    let h0: f64 = i.iter().map(|&x| 0.5 * u * x * x - mu * x).sum();
    let h1: f64 = params
        .bonds()
        .map(|(j, k)| -2.0 * (i[j] * i[k]).sqrt() * (phi[j] - phi[k]).cos())
        .sum();
    Ok(h0 + params.hopping * h1)
}

/// Time derivative of a `(P,Q)` point.
pub fn eom_pq(state: &PQState, params: &ChainParams) -> Result<PQState, ModelError> {
    state.check(params)?;
    let l = params.sites;
    let mut d = PQState::zeros(l);
    eom_into(&state.p, &state.q, params, &mut d.p, &mut d.q);
    Ok(d)
}

/// Allocation-free vector field used by the integrators.
#[inline]
pub(crate) fn eom_into(p: &[f64], q: &[f64], params: &ChainParams, dp: &mut [f64], dq: &mut [f64]) {
    let j_hop = params.hopping;
    let u = params.interaction;
    let mu = params.chemical_potential;
    let l = params.sites;
    for j in 0..l {
        let w = 0.5 * u * (p[j] * p[j] + q[j] * q[j]) - mu;
        dp[j] = q[j] * w;
        dq[j] = -p[j] * w;
    }
    if j_hop != 0.0 {
        for (a, b) in params.bonds() {
            dp[a] -= j_hop * q[b];
            dp[b] -= j_hop * q[a];
            dq[a] += j_hop * p[b];
            dq[b] += j_hop * p[a];
        }
    }
}

/// Default floor below which the angle equation is treated as singular.
pub const DEFAULT_ACTION_FLOOR: f64 = 1e-14;

/// Hamilton equations in action-angle form. Returned as an `ActionAngleState`
/// whose fields hold `(İ, φ̇)`; the angle rates are not wrapped.
pub fn eom_action_angle(
    state: &ActionAngleState,
    params: &ChainParams,
    action_floor: f64,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    state.check(params)?;
    let (i, phi) = (&state.actions, &state.angles);
    if let Some((site, &value)) = i.iter().enumerate().find(|(_, &v)| v <= action_floor) {
        return Err(ModelError::AngleSingularity {
            site,
            value,
            floor: action_floor,
        });
    }
    let l = params.sites;
    let j_hop = params.hopping;
    let mut di = vec![0.0; l];
    let mut dphi: Vec<f64> = i
        .iter()
        .map(|&x| -params.chemical_potential + params.interaction * x)
        .collect();
    if j_hop != 0.0 {
        for (a, b) in params.bonds() {
            let s = (i[a] * i[b]).sqrt();
            let diff = phi[b] - phi[a];
            di[a] += 2.0 * j_hop * s * diff.sin();
            di[b] -= 2.0 * j_hop * s * diff.sin();
            dphi[a] -= j_hop * (i[b] / i[a]).sqrt() * diff.cos();
            dphi[b] -= j_hop * (i[a] / i[b]).sqrt() * diff.cos();
        }
    }
    Ok((di, dphi))
}

/// `½ Σ (P² + Q²)`.
pub fn constraint_value(state: &PQState) -> f64 {
    constraint_flat(&state.p, &state.q)
}

#[inline]
pub(crate) fn constraint_flat(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(p, q)| p * p + q * q).sum::<f64>()
}

/// `I = (P² + Q²)/2`, `φ = atan2(P, Q)` reduced to `[0, 2π)`; `φ = 0` on empty sites.
pub fn pq_to_action_angle(state: &PQState) -> ActionAngleState {
    let (actions, angles) = state
        .p
        .iter()
        .zip(&state.q)
        .map(|(&p, &q)| {
            let i = 0.5 * (p * p + q * q);
            let phi = if i == 0.0 { 0.0 } else { wrap_angle(p.atan2(q)) };
            (i, phi)
        })
        .unzip();
    ActionAngleState { actions, angles }
}

pub fn action_angle_to_pq(state: &ActionAngleState) -> Result<PQState, ModelError> {
    if let Some((site, &value)) = state.actions.iter().enumerate().find(|(_, &v)| v < 0.0) {
        return Err(ModelError::NegativeAction { site, value });
    }
    let (p, q) = state
        .actions
        .iter()
        .zip(&state.angles)
        .map(|(&i, &phi)| {
            let r = (2.0 * i).sqrt();
            (r * phi.sin(), r * phi.cos())
        })
        .unzip();
    Ok(PQState { p, q })
}
