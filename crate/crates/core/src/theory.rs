//! Closed-form predictions: second-order perturbation coefficients, the 1:1
//! resonant Hamiltonian, pendulum timescale, diffusion matrices from the angle
//! average and from the Langevin picture, and the zero-hopping DNSE solution.
//! Also the Monte Carlo angle averages used to check them.
//!
//! Site arguments are 1-based. Diffusion matrices act on the reduced set of
//! sites `1..L-1`; the last action is fixed by the constraint.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rustfft::FftPlanner;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::VarianceSeries;
use crate::model::{ChainParams, ModelError};
use crate::scaling::{fit_diffusion_coefficient, Moment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("1:1 resonance at site {site}: |I_j - I_k| = {gap:.3e}")]
    ResonanceDivergence { site: usize, gap: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("DNSE denominator passes through zero near t = {t}")]
    BranchCrossing { t: f64 },
}

/// Relative gap below which a 1:1 resonance is declared.
pub const RESONANCE_EPS: f64 = 1e-6;

fn check_actions(actions: &[f64], params: &ChainParams) -> Result<(), TheoryError> {
    params.validate()?;
    if actions.len() != params.sites {
        return Err(ModelError::DimensionMismatch {
            expected: params.sites,
            got: actions.len(),
        }
        .into());
    }
    if let Some((site, &value)) = actions.iter().enumerate().find(|(_, &v)| !(v >= 0.0)) {
        return Err(ModelError::NegativeAction { site, value }.into());
    }
    Ok(())
}

fn site_index(j: usize, params: &ChainParams) -> Result<usize, TheoryError> {
    if j == 0 || j > params.sites {
        return Err(TheoryError::Domain(format!("site {j} outside 1..={}", params.sites)));
    }
    Ok(j - 1)
}

/// Action of a neighbour, zero past a hard wall.
fn neighbour_actions(actions: &[f64], params: &ChainParams, j: usize) -> (f64, f64) {
    let (left, right) = params.neighbours(j);
    (
        left.map_or(0.0, |k| actions[k]),
        right.map_or(0.0, |k| actions[k]),
    )
}

fn resonance_gap(a: f64, b: f64, site: usize, norm: f64) -> Result<f64, TheoryError> {
    let gap = a - b;
    if gap.abs() < RESONANCE_EPS * norm {
        return Err(TheoryError::ResonanceDivergence { site, gap: gap.abs() });
    }
    Ok(gap)
}

/// `h⁽²⁾_j`, the coefficient of `cos(φ_j − φ_{j+1})`. A vanishing numerator
/// gives zero without a resonance check.
pub fn perturb_coeff_h2(actions: &[f64], j: usize, params: &ChainParams) -> Result<f64, TheoryError> {
    check_actions(actions, params)?;
    let i = site_index(j, params)?;
    let (_, next) = neighbour_actions(actions, params, i);
    let num = actions[i] * next;
    if num == 0.0 {
        return Ok(0.0);
    }
    let gap = resonance_gap(actions[i], next, j, params.norm)?;
    let (jh, u) = (params.hopping, params.interaction);
    Ok(-2.0 * jh * jh / u * num / (gap * gap))
}

/// `h̃⁽²⁾_j`, the coefficient of `cos(φ_{j−1} − 2φ_j + φ_{j+1})` (centred on `j`).
pub fn perturb_coeff_h2tilde(
    actions: &[f64],
    j: usize,
    params: &ChainParams,
) -> Result<f64, TheoryError> {
    check_actions(actions, params)?;
    let i = site_index(j, params)?;
    let (prev, next) = neighbour_actions(actions, params, i);
    let ij = actions[i];
    if ij * prev * next == 0.0 {
        return Ok(0.0);
    }
    let g1 = resonance_gap(ij, prev, j, params.norm)?;
    let g2 = resonance_gap(ij, next, j, params.norm)?;
    let bracket = prev * prev + 2.0 * ij * ij + next * next - 2.0 * (prev + next) * ij;
    let (jh, u) = (params.hopping, params.interaction);
    Ok(-2.0 * jh * jh / u * ij * (prev * next).sqrt() / (g1 * g1 * g2 * g2) * bracket)
}

/// Angle-independent part of the second-order Hamiltonian, constant included.
pub fn averaged_hamiltonian(actions: &[f64], params: &ChainParams) -> Result<f64, TheoryError> {
    check_actions(actions, params)?;
    let (jh, u, mu) = (params.hopping, params.interaction, params.chemical_potential);
    let h0: f64 = actions.iter().map(|&x| 0.5 * u * x * x - mu * x).sum();
    if jh == 0.0 {
        return Ok(h0);
    }
    let mut h2 = 8.0 * jh * jh / u;
    for (a, b) in params.bonds() {
        let num = actions[a] * actions[b];
        if num != 0.0 {
            let gap = resonance_gap(actions[a], actions[b], a + 1, params.norm)?;
            h2 += 4.0 * jh * jh / u * num / (gap * gap);
        }
    }
    Ok(h0 + h2)
}

/// Point in the reduced 1:1 resonance coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonantPoint {
    pub i_r: f64,
    pub i_0: f64,
    pub phi: f64,
    pub interaction: f64,
    pub hopping: f64,
}

pub fn resonant_hamiltonian(p: &ResonantPoint) -> Result<f64, TheoryError> {
    if !(p.i_r >= 0.0 && p.i_r <= p.i_0) {
        return Err(TheoryError::Domain(format!(
            "need 0 <= I_r <= I_0, got I_r={}, I_0={}",
            p.i_r, p.i_0
        )));
    }
    let u = p.interaction;
    Ok(u * p.i_r * p.i_r + u * p.i_0 * p.i_r
        - 2.0 * p.hopping * (p.i_r * (p.i_0 - p.i_r)).sqrt() * p.phi.cos())
}

/// `T = √I / J`, the proportionality constant set to one.
pub fn pendulum_timescale(action: f64, hopping: f64) -> Result<f64, TheoryError> {
    if !(action > 0.0 && hopping > 0.0) {
        return Err(TheoryError::Domain("need I > 0 and J > 0".into()));
    }
    Ok(action.sqrt() / hopping)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentSeries {
    #[default]
    FourM,
    TwoM,
}

/// `4m` or `2m`.
pub fn rg_exponent(m: usize, series: ExponentSeries) -> u32 {
    let m = m as u32;
    match series {
        ExponentSeries::FourM => 4 * m,
        ExponentSeries::TwoM => 2 * m,
    }
}

/// Convention of the leading-order matrix: the angle average of `İ_i İ_j`
/// divided by `4J²√(I_i I_j)`, which equals `⟨⟨ȧ_i ȧ_j⟩⟩ / J²` with `a = √I`.
pub const LEADING_NORMALIZATION: &str = "<<dI_i/dt dI_j/dt>> / (4 J^2 sqrt(I_i I_j)) = <<da_i/dt da_j/dt>> / J^2, a = sqrt(I)";
/// Convention of the Langevin matrix: `ḡ σ² ḡᵀ` in `a = √I` variables, so that
/// `⟨Δa_n Δa_m⟩ = D_nm t / 2`.
pub const LANGEVIN_NORMALIZATION: &str = "gbar sigma2 gbar^T in a = sqrt(I); <da_n da_m> = D_nm t / 2";

/// Symmetric `(L−1)×(L−1)` matrix over the reduced sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionMatrix {
    pub dim: usize,
    /// Row-major entries.
    pub entries: Vec<Vec<f64>>,
    pub normalization: String,
}

impl DiffusionMatrix {
    fn zeros(dim: usize, normalization: &str) -> Self {
        Self {
            dim,
            entries: vec![vec![0.0; dim]; dim],
            normalization: normalization.into(),
        }
    }

    /// Entry for 1-based reduced sites.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i - 1][j - 1]
    }

    /// Largest `|i − j|` with a nonzero entry.
    pub fn bandwidth(&self) -> usize {
        let mut b = 0;
        for (i, row) in self.entries.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if *v != 0.0 {
                    b = b.max(i.abs_diff(j));
                }
            }
        }
        b
    }

    pub fn diagonal(&self, offset: usize) -> Vec<f64> {
        (0..self.dim.saturating_sub(offset))
            .map(|i| self.entries[i][i + offset])
            .collect()
    }
}

/// Leading-order matrix: `D_nn = (I_{n−1} + I_{n+1})/2`, `D_{n,n±1} = −√(I_n I_{n±1})/2`.
pub fn diffusion_matrix_leading(
    actions: &[f64],
    params: &ChainParams,
) -> Result<DiffusionMatrix, TheoryError> {
    check_actions(actions, params)?;
    let dim = params.sites - 1;
    let mut d = DiffusionMatrix::zeros(dim, LEADING_NORMALIZATION);
    for (a, b) in params.bonds() {
        if a < dim {
            d.entries[a][a] += 0.5 * actions[b];
        }
        if b < dim {
            d.entries[b][b] += 0.5 * actions[a];
        }
        if a < dim && b < dim {
            let off = -0.5 * (actions[a] * actions[b]).sqrt();
            d.entries[a][b] += off;
            d.entries[b][a] += off;
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleSampling {
    /// Independent uniform angles.
    #[default]
    Iid,
    /// Randomly shifted Kronecker lattice; the error estimate comes from the
    /// spread over independent shifts.
    ShiftedLattice,
}

/// Number of independent shifts used by [`AngleSampling::ShiftedLattice`].
pub const LATTICE_SHIFTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleAverage {
    /// `⟨⟨İ_i İ_j⟩⟩` over the reduced sites.
    pub raw: Vec<Vec<f64>>,
    pub raw_stderr: Vec<Vec<f64>>,
    /// `raw / (4J²√(I_i I_j))`, zero where an action vanishes.
    pub normalized: DiffusionMatrix,
    pub normalized_stderr: Vec<Vec<f64>>,
    pub samples: usize,
    pub sampling: AngleSampling,
}

/// `İ_j` for every site at the given angles.
fn action_rates(actions: &[f64], angles: &[f64], params: &ChainParams, out: &mut [f64]) {
    out.fill(0.0);
    let c = 2.0 * params.hopping;
    for (a, b) in params.bonds() {
        let s = c * (actions[a] * actions[b]).sqrt() * (angles[b] - angles[a]).sin();
        out[a] += s;
        out[b] -= s;
    }
}

fn primes(n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    let mut k = 2u64;
    while out.len() < n {
        if out.iter().take_while(|&&p| p * p <= k).all(|&p| k % p != 0) {
            out.push(k);
        }
        k += 1;
    }
    out
}

/// Sums of products of action rates (and their squares) over one group of samples.
struct GroupSums {
    prod: Vec<f64>,
    sq: Vec<f64>,
    count: usize,
}

fn group_sums(
    actions: &[f64],
    params: &ChainParams,
    sampling: AngleSampling,
    mut rng: ChaCha8Rng,
    count: usize,
    alpha: &[f64],
) -> GroupSums {
    let l = params.sites;
    let dim = l - 1;
    let mut angles = vec![0.0; l];
    let mut rates = vec![0.0; l];
    let mut out = GroupSums {
        prod: vec![0.0; dim * dim],
        sq: vec![0.0; dim * dim],
        count,
    };
    let shift: Vec<f64> = match sampling {
        AngleSampling::ShiftedLattice => (0..l).map(|_| rng.gen::<f64>()).collect(),
        AngleSampling::Iid => Vec::new(),
    };
    for k in 0..count {
        match sampling {
            AngleSampling::Iid => angles.iter_mut().for_each(|a| *a = rng.gen_range(0.0..TAU)),
            AngleSampling::ShiftedLattice => {
                for d in 0..l {
                    angles[d] = TAU * (shift[d] + k as f64 * alpha[d]).fract();
                }
            }
        }
        action_rates(actions, &angles, params, &mut rates);
        for i in 0..dim {
            for j in i..dim {
                let p = rates[i] * rates[j];
                out.prod[i * dim + j] += p;
                out.sq[i * dim + j] += p * p;
            }
        }
    }
    out
}

/// Monte Carlo estimate of the angle average of `İ_i İ_j`. Samples are split
/// into [`LATTICE_SHIFTS`] groups, each with its own random stream, and the
/// groups are reduced in order, so the result does not depend on `workers`.
pub fn angle_average_mc(
    actions: &[f64],
    params: &ChainParams,
    samples: usize,
    seed: u64,
    sampling: AngleSampling,
    workers: usize,
) -> Result<AngleAverage, TheoryError> {
    check_actions(actions, params)?;
    if samples < 10_000 {
        return Err(TheoryError::Domain("need at least 1e4 samples".into()));
    }
    let l = params.sites;
    let dim = l - 1;
    let alpha: Vec<f64> = primes(l).iter().map(|&p| (p as f64).sqrt().fract()).collect();
    let groups = LATTICE_SHIFTS;
    let sizes: Vec<usize> = (0..groups)
        .map(|g| samples / groups + usize::from(g < samples % groups))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TheoryError::Domain(e.to_string()))?;
    let sums: Vec<GroupSums> = pool.install(|| {
        sizes
            .par_iter()
            .enumerate()
            .map(|(g, &n)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(g as u64);
                group_sums(actions, params, sampling, rng, n, &alpha)
            })
            .collect()
    });

    let mut mean = vec![0.0; dim * dim];
    let mut stderr = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in i..dim {
            let e = i * dim + j;
            let (m, se) = match sampling {
                AngleSampling::Iid => {
                    let n = samples as f64;
                    let m = sums.iter().map(|s| s.prod[e]).sum::<f64>() / n;
                    let sq = sums.iter().map(|s| s.sq[e]).sum::<f64>() / n;
                    let var = (sq - m * m).max(0.0) * n / (n - 1.0);
                    (m, (var / n).sqrt())
                }
                // error from the spread of the per-shift means
                AngleSampling::ShiftedLattice => {
                    let k = groups as f64;
                    let means: Vec<f64> = sums.iter().map(|s| s.prod[e] / s.count as f64).collect();
                    let m = means.iter().sum::<f64>() / k;
                    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0);
                    (m, (var / k).sqrt())
                }
            };
            mean[e] = m;
            mean[j * dim + i] = m;
            stderr[e] = se;
            stderr[j * dim + i] = se;
        }
    }

    let to_rows = |v: &[f64]| -> Vec<Vec<f64>> { v.chunks(dim).map(<[f64]>::to_vec).collect() };
    let jh2 = params.hopping * params.hopping;
    let scale = |i: usize, j: usize| {
        let s = 4.0 * jh2 * (actions[i] * actions[j]).sqrt();
        if s > 0.0 {
            1.0 / s
        } else {
            0.0
        }
    };
    let mut normalized = DiffusionMatrix::zeros(dim, LEADING_NORMALIZATION);
    let mut normalized_stderr = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        for j in 0..dim {
            normalized.entries[i][j] = mean[i * dim + j] * scale(i, j);
            normalized_stderr[i][j] = stderr[i * dim + j] * scale(i, j);
        }
    }
    Ok(AngleAverage {
        raw: to_rows(&mean),
        raw_stderr: to_rows(&stderr),
        normalized,
        normalized_stderr,
        samples,
        sampling,
    })
}

/// Nearest-neighbour noise correlations `σ²_{i,i±1} = U I_i (2μ − U I_i) / (J² + (μ − U I_i)²)`.
/// `forward[i]` is `σ²_{i,i+1}` and `backward[i]` is `σ²_{i+1,i}` (0-based);
/// they differ because each is normalised by its own row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangevinSigma {
    pub diagonal: Vec<f64>,
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
}

impl LangevinSigma {
    /// Tridiagonal matrix over the reduced sites with the two one-sided values
    /// averaged, so that the contraction stays symmetric.
    pub fn symmetric_matrix(&self) -> Vec<Vec<f64>> {
        let dim = self.diagonal.len();
        let mut m = vec![vec![0.0; dim]; dim];
        for i in 0..dim {
            m[i][i] = self.diagonal[i];
            if i + 1 < dim {
                let s = 0.5 * (self.forward[i] + self.backward[i]);
                m[i][i + 1] = s;
                m[i + 1][i] = s;
            }
        }
        m
    }
}

fn sigma_nn(action: f64, params: &ChainParams) -> f64 {
    let (jh, u, mu) = (params.hopping, params.interaction, params.chemical_potential);
    let ui = u * action;
    let den = jh * jh + (mu - ui) * (mu - ui);
    if den == 0.0 {
        0.0
    } else {
        ui * (2.0 * mu - ui) / den
    }
}

/// Noise correlations over the reduced sites `1..L-1`.
pub fn langevin_sigma(actions: &[f64], params: &ChainParams) -> Result<LangevinSigma, TheoryError> {
    check_actions(actions, params)?;
    let dim = params.sites - 1;
    Ok(LangevinSigma {
        diagonal: vec![1.0; dim],
        forward: (0..dim.saturating_sub(1)).map(|i| sigma_nn(actions[i], params)).collect(),
        backward: (0..dim.saturating_sub(1)).map(|i| sigma_nn(actions[i + 1], params)).collect(),
    })
}

/// Exact angle average `⟨⟨φ̇_i φ̇_k⟩⟩ / ⟨⟨φ̇_i²⟩⟩` for neighbouring 1-based sites,
/// from the angle equations with independent uniform angles.
pub fn phase_rate_correlation(
    actions: &[f64],
    i: usize,
    k: usize,
    params: &ChainParams,
) -> Result<f64, TheoryError> {
    check_actions(actions, params)?;
    let (a, b) = (site_index(i, params)?, site_index(k, params)?);
    if a.abs_diff(b) != 1 {
        return Err(TheoryError::Domain("sites must be nearest neighbours".into()));
    }
    if actions[a] == 0.0 || actions[b] == 0.0 {
        return Err(TheoryError::Domain("phase rate undefined at zero action".into()));
    }
    let (jh, u, mu) = (params.hopping, params.interaction, params.chemical_potential);
    let w = |x: f64| u * x - mu;
    let (prev, next) = neighbour_actions(actions, params, a);
    let self_sq = w(actions[a]).powi(2) + jh * jh * (prev + next) / (2.0 * actions[a]);
    // only the shared bond term survives the average
    let cross = w(actions[a]) * w(actions[b]) + 0.5 * jh * jh;
    Ok(cross / self_sq)
}

/// `ḡ` over the reduced sites: `ḡ_{i,i+1} = J a_{i+1}`, `ḡ_{i,i−1} = −J a_{i−1}`.
pub fn langevin_g(actions: &[f64], params: &ChainParams) -> Result<Vec<Vec<f64>>, TheoryError> {
    check_actions(actions, params)?;
    let dim = params.sites - 1;
    let jh = params.hopping;
    let mut g = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        if i + 1 < dim {
            g[i][i + 1] = jh * actions[i + 1].sqrt();
        }
        if i > 0 {
            g[i][i - 1] = -jh * actions[i - 1].sqrt();
        }
    }
    Ok(g)
}

/// `ḡ σ² ḡᵀ` for arbitrary `ḡ` and `σ²` of matching size.
pub fn contract(g: &[Vec<f64>], sigma2: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = g.len();
    let mut gs = vec![vec![0.0; dim]; dim];
    for n in 0..dim {
        for j in 0..dim {
            gs[n][j] = (0..dim).map(|i| g[n][i] * sigma2[i][j]).sum();
        }
    }
    let mut d = vec![vec![0.0; dim]; dim];
    for n in 0..dim {
        for m in 0..dim {
            d[n][m] = (0..dim).map(|j| gs[n][j] * g[m][j]).sum();
        }
    }
    d
}

/// Langevin diffusion matrix `D = ḡ σ² ḡᵀ` with the symmetrised tridiagonal `σ²`.
pub fn diffusion_matrix_langevin(
    actions: &[f64],
    params: &ChainParams,
) -> Result<DiffusionMatrix, TheoryError> {
    let g = langevin_g(actions, params)?;
    let sigma = langevin_sigma(actions, params)?;
    let entries = contract(&g, &sigma.symmetric_matrix());
    Ok(DiffusionMatrix {
        dim: entries.len(),
        entries,
        normalization: LANGEVIN_NORMALIZATION.into(),
    })
}

/// Predicted growth rate of `Cov(I_n, I_m)` (1-based reduced sites) from an
/// `a`-space matrix: `ΔI ≈ 2aΔa` and `⟨Δa_n Δa_m⟩ = D_nm t / 2`.
pub fn action_covariance_rate(d: &DiffusionMatrix, actions: &[f64], n: usize, m: usize) -> f64 {
    2.0 * (actions[n - 1] * actions[m - 1]).sqrt() * d.get(n, m)
}

/// Fitted against predicted growth rate of `Cov(I_n, I_{n+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceComparison {
    /// 1-based; the pair is `(n, n+1)`.
    pub site: usize,
    pub fitted_rate: Option<f64>,
    pub predicted_rate: f64,
    /// `|ln|fitted| − ln|predicted||`.
    pub log_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Nearest-neighbour covariance rates of an ensemble against the Langevin
/// matrix evaluated at the ensemble-mean actions at the start of `window`.
pub fn compare_covariance_rates(
    series: &VarianceSeries,
    params: &ChainParams,
    window: (f64, f64),
) -> Result<Vec<CovarianceComparison>, TheoryError> {
    let row = series
        .times
        .iter()
        .position(|&t| t >= window.0)
        .ok_or_else(|| TheoryError::Domain("window starts after the series ends".into()))?;
    let mean = &series.mean[row];
    let d = diffusion_matrix_langevin(mean, params)?;
    Ok((1..params.sites - 1)
        .map(|n| {
            let predicted_rate = action_covariance_rate(&d, mean, n, n + 1);
            match fit_diffusion_coefficient(series, Moment::NearestCovariance(n), window) {
                Ok(f) => CovarianceComparison {
                    site: n,
                    fitted_rate: Some(f.rate),
                    predicted_rate,
                    log_gap: Some((f.rate.abs().ln() - predicted_rate.abs().ln()).abs()),
                    error: None,
                },
                Err(e) => CovarianceComparison {
                    site: n,
                    fitted_rate: None,
                    predicted_rate,
                    log_gap: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

/// Zero-hopping DNSE amplitude `√μ / √((μ/I₀ − U) e^{2iμt} + U)`, principal branch.
pub fn dnse_homogeneous(i0: f64, params: &ChainParams, t: f64) -> Result<Complex64, TheoryError> {
    let w = dnse_denominator(i0, params, t)?;
    Ok(Complex64::from(params.chemical_potential.sqrt()) / w.sqrt())
}

fn dnse_denominator(i0: f64, params: &ChainParams, t: f64) -> Result<Complex64, TheoryError> {
    let (u, mu) = (params.interaction, params.chemical_potential);
    if !(mu > 0.0 && u >= 0.0 && i0 > 0.0 && t.is_finite()) {
        return Err(TheoryError::Domain("need mu > 0, U >= 0, I0 > 0".into()));
    }
    let w = Complex64::new(0.0, 2.0 * mu * t).exp() * (mu / i0 - u) + u;
    if w.norm() <= 1e-12 * (mu / i0 + u) {
        return Err(TheoryError::BranchCrossing { t });
    }
    Ok(w)
}

/// The DNSE amplitude along increasing times, with the square-root sign chosen
/// to keep the amplitude continuous between samples.
pub fn dnse_series(i0: f64, params: &ChainParams, times: &[f64]) -> Result<Vec<Complex64>, TheoryError> {
    let mu = Complex64::from(params.chemical_potential.sqrt());
    let mut prev: Option<Complex64> = None;
    times
        .iter()
        .map(|&t| {
            let mut s = dnse_denominator(i0, params, t)?.sqrt();
            if let Some(p) = prev {
                if (s - p).norm() > (s + p).norm() {
                    s = -s;
                }
            }
            prev = Some(s);
            Ok(mu / s)
        })
        .collect()
}

/// Angular frequency with the largest periodogram power in `(0, omega_max]`
/// for uniformly spaced samples. A zero-padded FFT locates the peak, which is
/// then refined on the exact transform. The mean is removed first.
pub fn dominant_angular_frequency(times: &[f64], values: &[f64], omega_max: f64) -> Result<f64, TheoryError> {
    let n = times.len();
    if n < 4 || values.len() != n {
        return Err(TheoryError::Domain("need at least 4 paired samples".into()));
    }
    let dt = (times[n - 1] - times[0]) / (n - 1) as f64;
    if !(dt > 0.0) || times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt) {
        return Err(TheoryError::Domain("samples must be uniformly spaced".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let pad = (8 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = values.iter().map(|&x| Complex64::from(x - mean)).collect();
    buf.resize(pad, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(pad).process(&mut buf);
    let bin = TAU / (pad as f64 * dt);
    let top = ((omega_max / bin).floor() as usize).min(pad / 2);
    let best = (1..=top.max(1))
        .max_by(|&a, &b| buf[a].norm_sqr().total_cmp(&buf[b].norm_sqr()))
        .unwrap_or(1);
    let power = |w: f64| {
        let mut z = Complex64::new(0.0, 0.0);
        for (&t, &x) in times.iter().zip(values) {
            z += Complex64::new(0.0, -w * (t - times[0])).exp() * (x - mean);
        }
        z.norm_sqr()
    };
    let (mut a, mut b) = ((best as f64 - 1.0).max(0.5) * bin, (best as f64 + 1.0) * bin);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..50 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if power(c) > power(d) {
            b = d;
        } else {
            a = c;
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(l: usize, j: f64, u: f64, mu: f64) -> ChainParams {
        ChainParams::new(l, j, u, mu)
    }

    fn random_actions(l: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..l).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }

    #[test]
    fn h2_examples() {
        let params = p(2, 1.0, 2.0, 0.0).with_norm(0.75);
        assert!((perturb_coeff_h2(&[0.5, 0.25], 1, &params).unwrap() + 2.0).abs() < 1e-14);
        let params = p(3, 1.0, 2.0, 0.0);
        assert_eq!(perturb_coeff_h2(&[0.5, 0.0, 0.5], 1, &params).unwrap(), 0.0);
        assert!(matches!(
            perturb_coeff_h2(&[0.4, 0.4, 0.2], 1, &params),
            Err(TheoryError::ResonanceDivergence { site: 1, .. })
        ));
        assert!(perturb_coeff_h2tilde(&[0.3, 0.3, 0.4], 2, &params).is_err());
    }

    #[test]
    fn coefficients_scale_as_j2_over_u() {
        let a = random_actions(6, 4);
        let base = p(6, 0.7, 3.0, 0.1);
        let scaled = p(6, 0.7 * 3.0, 3.0, 0.1);
        let heavy = p(6, 0.7, 6.0, 0.1);
        for j in 1..=6 {
            let h = perturb_coeff_h2(&a, j, &base).unwrap();
            let t = perturb_coeff_h2tilde(&a, j, &base).unwrap();
            assert!((perturb_coeff_h2(&a, j, &scaled).unwrap() - 9.0 * h).abs() <= 1e-12 * h.abs());
            assert!((perturb_coeff_h2tilde(&a, j, &scaled).unwrap() - 9.0 * t).abs() <= 1e-12 * t.abs());
            assert!((perturb_coeff_h2(&a, j, &heavy).unwrap() - 0.5 * h).abs() <= 1e-12 * h.abs());
        }
    }

    #[test]
    fn averaged_hamiltonian_reduces_to_h0() {
        let a = random_actions(5, 8);
        let h0: f64 = a.iter().map(|&x| 1.5 * x * x - 0.2 * x).sum();
        let zero = averaged_hamiltonian(&a, &p(5, 0.0, 3.0, 0.2)).unwrap();
        assert!((zero - h0).abs() < 1e-15);
        let c1 = averaged_hamiltonian(&a, &p(5, 1e-3, 3.0, 0.2)).unwrap() - h0;
        let c2 = averaged_hamiltonian(&a, &p(5, 2e-3, 3.0, 0.2)).unwrap() - h0;
        assert!(c1 > 0.0);
        assert!((c2 / c1 - 4.0).abs() < 1e-6);
    }

    #[test]
    fn resonant_examples() {
        let pt = |i_r, phi| ResonantPoint {
            i_r,
            i_0: 0.8,
            phi,
            interaction: 3.0,
            hopping: 1.0,
        };
        assert_eq!(resonant_hamiltonian(&pt(0.0, 0.3)).unwrap(), 0.0);
        assert!((resonant_hamiltonian(&pt(0.8, 0.3)).unwrap() - 2.0 * 3.0 * 0.64).abs() < 1e-14);
        let mid = resonant_hamiltonian(&pt(0.4, std::f64::consts::FRAC_PI_2)).unwrap();
        assert!((mid - 0.75 * 3.0 * 0.64).abs() < 1e-14);
        assert!(resonant_hamiltonian(&pt(0.9, 0.0)).is_err());
    }

    #[test]
    fn pendulum_and_rg() {
        assert_eq!(pendulum_timescale(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(pendulum_timescale(4.0, 2.0).unwrap(), 1.0);
        let (i, lam) = (0.3, 1.7);
        let ratio = pendulum_timescale(lam * lam * i, 1.0).unwrap() / pendulum_timescale(i, 1.0).unwrap();
        assert!((ratio - lam).abs() < 1e-14);
        assert_eq!(rg_exponent(0, ExponentSeries::FourM), 0);
        assert_eq!(rg_exponent(2, ExponentSeries::FourM), 8);
        assert_eq!(rg_exponent(3, ExponentSeries::TwoM), 6);
    }

    #[test]
    fn leading_matrix_example() {
        let d = diffusion_matrix_leading(&[0.2, 0.3, 0.5], &p(3, 1.0, 1.0, 0.0)).unwrap();
        assert_eq!(d.dim, 2);
        assert!((d.get(2, 2) - 0.35).abs() < 1e-15);
        assert!((d.get(1, 2) + (0.06f64).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(d.get(1, 2), d.get(2, 1));
        let d = diffusion_matrix_leading(&[0.5, 0.0, 0.0, 0.5], &p(4, 1.0, 1.0, 0.0)).unwrap();
        assert_eq!(d.get(2, 3), 0.0);
    }

    #[test]
    fn leading_matrix_is_symmetric_tridiagonal() {
        for seed in 0..10 {
            let a = random_actions(7, seed);
            let d = diffusion_matrix_leading(&a, &p(7, 1.0, 2.0, 0.0)).unwrap();
            assert!(d.bandwidth() <= 1);
            for i in 1..=6 {
                assert!(d.get(i, i) >= 0.0);
                for j in 1..=6 {
                    assert_eq!(d.get(i, j), d.get(j, i));
                    if i != j {
                        assert!(d.get(i, j) <= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn mc_single_site_gives_zero() {
        let a = [0.0, 1.0, 0.0, 0.0];
        let r = angle_average_mc(&a, &p(4, 1.0, 1.0, 0.0), 10_000, 1, AngleSampling::Iid, 1).unwrap();
        assert!(r.raw.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn mc_raw_nearest_neighbour_average() {
        let a = [1.0 / 3.0; 3];
        let params = p(3, 1.0, 1.0, 0.0);
        let exact = -2.0 * a[0] * a[1];
        for sampling in [AngleSampling::Iid, AngleSampling::ShiftedLattice] {
            let r = angle_average_mc(&a, &params, 200_000, 3, sampling, 1).unwrap();
            let err = (r.raw[0][1] - exact).abs();
            assert!(err < 5.0 * r.raw_stderr[0][1] + 1e-12, "{sampling:?}: {err}");
        }
    }

    #[test]
    fn mc_error_shrinks_as_inverse_sqrt() {
        // quadrupling the sample count halves the standard error
        let a = random_actions(5, 2);
        let params = p(5, 1.0, 1.0, 0.0);
        let small = angle_average_mc(&a, &params, 40_000, 9, AngleSampling::Iid, 1).unwrap();
        let large = angle_average_mc(&a, &params, 160_000, 9, AngleSampling::Iid, 1).unwrap();
        let ratio = small.raw_stderr[1][1] / large.raw_stderr[1][1];
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn mc_independent_of_workers() {
        let a = random_actions(4, 5);
        let params = p(4, 1.0, 1.0, 0.0);
        for sampling in [AngleSampling::Iid, AngleSampling::ShiftedLattice] {
            let one = angle_average_mc(&a, &params, 20_001, 4, sampling, 1).unwrap();
            let three = angle_average_mc(&a, &params, 20_001, 4, sampling, 3).unwrap();
            assert_eq!(one, three);
        }
    }

    #[test]
    fn lattice_matches_leading_matrix() {
        let a = random_actions(5, 6);
        let params = p(5, 1.0, 1.0, 0.0);
        let exact = diffusion_matrix_leading(&a, &params).unwrap();
        let r = angle_average_mc(&a, &params, 160_000, 1, AngleSampling::ShiftedLattice, 1).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((r.normalized.entries[i][j] - exact.entries[i][j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn sigma_examples() {
        let a = random_actions(6, 1);
        let s = langevin_sigma(&a, &p(6, 1.0, 0.0, 0.3)).unwrap();
        assert!(s.forward.iter().chain(&s.backward).all(|&v| v == 0.0));
        let s = langevin_sigma(&a, &p(6, 1.0, 4.0, 0.0)).unwrap();
        for (k, v) in s.forward.iter().enumerate() {
            let ui = 4.0 * a[k];
            assert!((v + ui * ui / (1.0 + ui * ui)).abs() < 1e-15);
            assert!(*v > -1.0 && *v <= 0.0);
        }
        let mut b = a.clone();
        b[0] = 0.1;
        let s = langevin_sigma(&b, &p(6, 1.0, 4.0, 0.2)).unwrap();
        assert!(s.forward[0].abs() < 1e-15);
    }

    #[test]
    fn langevin_identity_noise() {
        // with σ² = 1 the contraction is ḡḡᵀ: diagonal J²(I_{n−1}+I_{n+1}),
        // no nearest-neighbour entries, next-nearest −J² I_{n+1}
        let a = random_actions(6, 3);
        let params = p(6, 1.3, 0.0, 0.2);
        let d = diffusion_matrix_langevin(&a, &params).unwrap();
        let lead = diffusion_matrix_leading(&a, &params).unwrap();
        let j2 = 1.3 * 1.3;
        for n in 1..=5 {
            let left = if n > 1 { a[n - 2] } else { 0.0 };
            let right = if n < 5 { a[n] } else { 0.0 };
            assert!((d.get(n, n) - j2 * (left + right)).abs() < 1e-14);
            if n > 1 && n < 5 {
                assert!((d.get(n, n) - 2.0 * j2 * lead.get(n, n)).abs() < 1e-14);
            }
            if n < 5 {
                assert!(d.get(n, n + 1).abs() < 1e-15);
            }
            if n < 4 {
                assert!((d.get(n, n + 2) + j2 * a[n]).abs() < 1e-14);
            }
        }
        assert_eq!(d.bandwidth(), 2);
    }

    #[test]
    fn langevin_hand_contraction() {
        let g = vec![
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.0, 2.0],
            vec![0.0, 0.0, 0.0],
        ];
        let s = vec![
            vec![1.0, 0.5, 0.0],
            vec![0.5, 1.0, -0.3],
            vec![0.0, -0.3, 1.0],
        ];
        let d = contract(&g, &s);
        let mut want = vec![vec![0.0; 3]; 3];
        want[1][1] = 4.0;
        assert_eq!(d, want);
    }

    #[test]
    fn langevin_matrix_is_symmetric() {
        let a = random_actions(5, 12);
        let d = diffusion_matrix_langevin(&a, &p(5, 1.0, 7.0, 0.4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((d.entries[i][j] - d.entries[j][i]).abs() < 1e-15);
            }
        }
        assert!(d.bandwidth() <= 3);
    }

    #[test]
    fn phase_correlation_matches_sampling() {
        let a = random_actions(5, 21);
        let params = p(5, 1.0, 3.0, 0.3);
        let exact = phase_rate_correlation(&a, 2, 3, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rate = |phi: &[f64], i: usize| {
            let w = 3.0 * a[i] - 0.3;
            w - (a[i - 1] / a[i]).sqrt() * (phi[i] - phi[i - 1]).cos()
                - (a[i + 1] / a[i]).sqrt() * (phi[i] - phi[i + 1]).cos()
        };
        let (mut cross, mut own) = (0.0, 0.0);
        for _ in 0..400_000 {
            let phi: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..TAU)).collect();
            let (x, y) = (rate(&phi, 1), rate(&phi, 2));
            cross += x * y;
            own += x * x;
        }
        assert!((cross / own - exact).abs() < 1e-2, "{} vs {exact}", cross / own);
    }

    #[test]
    fn dnse_examples() {
        let params = p(4, 0.0, 2.0, 0.3);
        let f0 = dnse_homogeneous(0.25, &params, 0.0).unwrap();
        assert!((f0.norm_sqr() - 0.25).abs() < 1e-15);
        let fixed = 0.3 / 2.0;
        for t in [0.0, 1.0, 7.3, 40.0] {
            let f = dnse_homogeneous(fixed, &params, t).unwrap();
            assert!((f.norm_sqr() - fixed).abs() < 1e-15);
        }
        let period = std::f64::consts::PI / 0.3;
        for t in [0.4, 2.2, 5.1] {
            let a = dnse_homogeneous(0.25, &params, t).unwrap().norm_sqr();
            let b = dnse_homogeneous(0.25, &params, t + period).unwrap().norm_sqr();
            assert!((a - b).abs() < 1e-12);
        }
        // μ/I₀ = 2U puts the denominator through zero at 2μt = π
        assert!(matches!(
            dnse_homogeneous(0.075, &params, std::f64::consts::PI / 0.6),
            Err(TheoryError::BranchCrossing { .. })
        ));
        assert!(dnse_homogeneous(0.25, &p(4, 0.0, 2.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn dnse_series_is_continuous() {
        let params = p(4, 0.0, 2.0, 0.3);
        let times: Vec<f64> = (0..400).map(|k| 0.05 * k as f64).collect();
        let f = dnse_series(0.1, &params, &times).unwrap();
        for w in f.windows(2) {
            assert!((w[1] - w[0]).norm() < 0.1);
        }
    }

    #[test]
    fn frequency_of_a_sinusoid() {
        let times: Vec<f64> = (0..2000).map(|k| 0.5 * k as f64).collect();
        let x: Vec<f64> = times.iter().map(|t| 3.0 + (0.37 * t + 0.4).cos()).collect();
        let w = dominant_angular_frequency(&times, &x, 2.0).unwrap();
        assert!((w - 0.37).abs() < 1e-4, "{w}");
        let mut uneven = times.clone();
        uneven[5] += 0.1;
        assert!(dominant_angular_frequency(&uneven, &x, 2.0).is_err());
    }
}
