//! JSON run configuration and command-line overrides.

use std::path::PathBuf;

use bhchain::chaos::LyapunovConfig;
use bhchain::ensemble::{ActionPerturbation, AngleInit, Distribution, EnsembleSpec};
use bhchain::integrate::IntegratorConfig;
use bhchain::model::{ActionAngleState, ChainParams};
use bhchain::scaling::{ExponentSeries, DEFAULT_FILL_FRACTION};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Orbit,
    Lyapunov,
    Ensemble,
    Sweep,
    Theory,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Orbit => "orbit",
            Experiment::Lyapunov => "lyapunov",
            Experiment::Ensemble => "ensemble",
            Experiment::Sweep => "sweep",
            Experiment::Theory => "theory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Filling {
    /// 1-based.
    pub site: usize,
    pub filling: f64,
}

/// Initial actions; angles are zero unless given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Filled {
        sites: Vec<Filling>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        angles: Option<Vec<f64>>,
    },
    Explicit {
        actions: Vec<f64>,
        angles: Vec<f64>,
    },
    Homogeneous,
    /// Actions drawn uniformly from `[0, 1)` and rescaled; the run seed is used
    /// when `seed` is absent.
    RandomUniform {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

impl InitialSpec {
    /// Actions rescaled to sum to the chain norm.
    pub fn resolve(&self, params: &ChainParams, run_seed: u64) -> Result<ActionAngleState, CliError> {
        let l = params.sites;
        let (mut actions, angles) = match self {
            InitialSpec::Filled { sites, angles } => {
                let mut a = vec![0.0; l];
                for f in sites {
                    if f.site == 0 || f.site > l {
                        return Err(CliError::Config(format!("filled site {} outside 1..={l}", f.site)));
                    }
                    a[f.site - 1] = f.filling;
                }
                (a, angles.clone().unwrap_or_else(|| vec![0.0; l]))
            }
            InitialSpec::Explicit { actions, angles } => (actions.clone(), angles.clone()),
            InitialSpec::Homogeneous => (vec![1.0; l], vec![0.0; l]),
            InitialSpec::RandomUniform { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(run_seed));
                ((0..l).map(|_| rng.gen::<f64>()).collect(), vec![0.0; l])
            }
        };
        if actions.len() != l || angles.len() != l {
            return Err(CliError::Config(format!(
                "initial state needs {l} actions and angles, got {} and {}",
                actions.len(),
                angles.len()
            )));
        }
        if actions.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
            return Err(CliError::Config("initial actions must be finite and non-negative".into()));
        }
        let total: f64 = actions.iter().sum();
        if total <= 0.0 {
            return Err(CliError::Config("initial actions sum to zero".into()));
        }
        let s = params.norm / total;
        actions.iter_mut().for_each(|a| *a *= s);
        ActionAngleState::new(actions, angles).map_err(|e| CliError::Config(e.to_string()))
    }
}

fn default_width() -> f64 {
    1e-3
}
fn default_count() -> usize {
    100
}
fn default_floor() -> f64 {
    1e-12
}

/// Ensemble settings; the base state is the resolved initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleOptions {
    #[serde(default)]
    pub dist: Distribution,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub angle_init: AngleInit,
    #[serde(default)]
    pub perturbation: ActionPerturbation,
    #[serde(default = "default_floor")]
    pub empty_floor: f64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            dist: Distribution::default(),
            width: default_width(),
            count: default_count(),
            angle_init: AngleInit::default(),
            perturbation: ActionPerturbation::default(),
            empty_floor: default_floor(),
        }
    }
}

impl EnsembleOptions {
    pub fn spec(&self, base: ActionAngleState, seed: u64) -> EnsembleSpec {
        EnsembleSpec {
            base,
            dist: self.dist,
            width: self.width,
            count: self.count,
            seed,
            angle_init: self.angle_init,
            perturbation: self.perturbation,
            empty_floor: self.empty_floor,
        }
    }
}

fn default_window() -> (f64, f64) {
    (10.0, 1e3)
}
fn default_fill() -> f64 {
    DEFAULT_FILL_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    #[serde(default = "default_window")]
    pub window: (f64, f64),
    #[serde(default)]
    pub series: ExponentSeries,
    #[serde(default = "default_fill")]
    pub fill_fraction: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            window: default_window(),
            series: ExponentSeries::default(),
            fill_fraction: default_fill(),
        }
    }
}

/// Grid of `U/J` and `μ/J` values; `J` is taken from the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub interaction: Vec<f64>,
    pub chemical_potential: Vec<f64>,
}

impl Grid {
    /// Points in row-major order, `μ` fastest.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.interaction
            .iter()
            .flat_map(|&u| self.chemical_potential.iter().map(move |&m| (u, m)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionOptions {
    /// Fit window inside the normal regime.
    pub window: (f64, f64),
    /// One `variance.csv` per grid point (or one without a grid). When absent
    /// the ensemble is simulated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_csv: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnseOptions {
    /// Defaults to `100/μ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default = "default_dnse_samples")]
    pub samples: usize,
}

fn default_dnse_samples() -> usize {
    20_001
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryOptions {
    /// Evaluate the closed forms here instead of at the initial actions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<DiffusionOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dnse: Option<DnseOptions>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub chain: ChainParams,
    pub initial: InitialSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<LyapunovConfig>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheoryOptions>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl RunConfig {
    /// Cross-field checks that serde cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        self.chain.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        if let Some(g) = &self.grid {
            if g.interaction.is_empty() || g.chemical_potential.is_empty() {
                return bad("grid lists must be non-empty");
            }
        }
        let needs = |present: bool, what: &str| {
            if present {
                Ok(())
            } else {
                Err(CliError::Config(format!(
                    "{} runs need a `{what}` section",
                    self.experiment.name()
                )))
            }
        };
        match self.experiment {
            Experiment::Orbit | Experiment::Ensemble => needs(self.integrator.is_some(), "integrator")?,
            Experiment::Lyapunov => needs(self.lyapunov.is_some(), "lyapunov")?,
            Experiment::Sweep => {
                needs(self.integrator.is_some(), "integrator")?;
                needs(self.grid.is_some(), "grid")?;
            }
            Experiment::Theory => {
                if let Some(TheoryOptions { diffusion: Some(d), .. }) = &self.theory {
                    if d.variance_csv.is_none() {
                        needs(self.integrator.is_some(), "integrator")?;
                    }
                }
                if let Some(TheoryOptions { dnse: Some(d), .. }) = &self.theory {
                    if d.samples < 2 {
                        return bad("dnse.samples must be >= 2");
                    }
                }
            }
        }
        if let Some(i) = &self.integrator {
            i.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some(l) = &self.lyapunov {
            l.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.initial.resolve(&self.chain, self.seed)?;
        Ok(())
    }

    /// Chain parameters at a grid point.
    pub fn chain_at(&self, interaction: f64, chemical_potential: f64) -> ChainParams {
        let mut p = self.chain;
        p.interaction = interaction * p.hopping;
        p.chemical_potential = chemical_potential * p.hopping;
        p
    }

    pub fn ensemble_options(&self) -> EnsembleOptions {
        self.ensemble.clone().unwrap_or_default()
    }
}

/// Sets `path` (dot-separated) in a JSON object, creating objects on the way.
/// The value is parsed as JSON when possible and taken as a string otherwise.
pub fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{path}`")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(CliError::Config(format!("override `{path}` descends into a non-object")));
            }
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == keys.len() {
            map.insert((*key).to_string(), value);
            return Ok(());
        }
        node = map.entry((*key).to_string()).or_insert(Value::Null);
    }
    unreachable!("keys is non-empty")
}

/// Applies `--a.b=value` overrides.
pub fn apply_overrides(root: &mut Value, overrides: &[String]) -> Result<(), CliError> {
    for o in overrides {
        let body = o
            .strip_prefix("--")
            .ok_or_else(|| CliError::Config(format!("unexpected argument `{o}`")))?;
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{o}` needs the form --key=value")))?;
        set_path(root, key, value)?;
    }
    Ok(())
}
