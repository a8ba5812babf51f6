use std::path::PathBuf;

use mvcage::bayes::ModelConfig;
use mvcage::covariance::{BivariateMaternParams, MaternParams};
use mvcage::kle::Truncation;
use mvcage::regionalize::{FeatureSource, RegionalizeConfig, StoppingRule};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::CliError;

pub const PRESETS: &[&str] = &["sim-matern-1d", "county-style", "argmin-bounded"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceSpec {
    /// Simulate replications from a bivariate Matérn model.
    Parametric {
        params: BivariateMaternParams,
        #[serde(default = "one")]
        replications: usize,
        #[serde(default)]
        noise_var: f64,
    },
    /// Replicated data from a CSV or binary file.
    Data { path: PathBuf },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BasisSpec {
    Fourier {
        k: usize,
    },
    Rbf {
        knots: Vec<usize>,
        #[serde(default)]
        bandwidth: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    /// Parametric covariance, Galerkin KLE per process, score covariance.
    ScoreCov,
    /// Empirical cross-covariance of the replications, then as `score-cov`.
    Empirical,
    /// Gibbs fit and eigendecomposition of the posterior coefficient
    /// covariance.
    PosteriorEof,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionSpec {
    Blocks { units: usize },
    Singletons,
    Whole,
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CageSpec {
    pub loss: String,
    pub partition: PartitionSpec,
    /// Average over per-draw eigensystems (posterior route only).
    pub per_draw: bool,
}

impl Default for CageSpec {
    fn default() -> Self {
        CageSpec { loss: "squared".into(), partition: PartitionSpec::Blocks { units: 10 }, per_draw: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    /// Stop by the relative-change rule.
    #[default]
    Epsilon,
    /// Minimum over `j_min..=j_max`.
    Argmin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionSpec {
    pub mode: SearchMode,
    pub gamma: f64,
    pub epsilon: f64,
    pub j_min: Option<usize>,
    pub j_max: Option<usize>,
    pub enforce_contiguity: bool,
    pub features: FeatureSource,
    pub stopping: StoppingRule,
}

impl Default for RegionSpec {
    fn default() -> Self {
        let d = RegionalizeConfig::default();
        RegionSpec {
            mode: SearchMode::default(),
            gamma: d.gamma,
            epsilon: d.epsilon,
            j_min: d.j_min,
            j_max: d.j_max,
            enforce_contiguity: d.enforce_contiguity,
            features: d.features,
            stopping: d.stopping,
        }
    }
}

impl RegionSpec {
    pub fn to_config(&self, seed: u64) -> RegionalizeConfig {
        RegionalizeConfig {
            gamma: self.gamma,
            epsilon: self.epsilon,
            j_min: self.j_min,
            j_max: self.j_max,
            enforce_contiguity: self.enforce_contiguity,
            features: self.features,
            stopping: self.stopping,
            seed,
        }
    }
}

/// One document describing a whole experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub grid: GridSpec,
    pub source: SourceSpec,
    pub basis: BasisSpec,
    pub route: Route,
    #[serde(default)]
    pub truncation: Truncation,
    /// Sampler settings; the seed is taken from the top-level `seed`.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub cage: CageSpec,
    #[serde(default)]
    pub regionalize: RegionSpec,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

pub fn preset(name: &str) -> Result<Value, CliError> {
    let sim = BivariateMaternParams::simulation_defaults();
    let v = match name {
        // One-dimensional bivariate Matérn at desk scale, empirical KLE.
        "sim-matern-1d" => json!({
            "preset": name,
            "seed": 0,
            "grid": {"lo": [0.0], "hi": [1.0], "counts": [200]},
            "source": {"kind": "parametric", "params": sim, "replications": 500, "noise_var": 0.0},
            "basis": {"kind": "fourier", "k": 50},
            "route": "empirical",
            "regionalize": {"epsilon": 1e-4},
        }),
        // Two-dimensional lattice, Gaussian generating basis, Bayesian route.
        "county-style" => {
            let params = BivariateMaternParams {
                p1: MaternParams { nu: 0.5, a: 6.0, sigma2: 1.0 },
                p2: MaternParams { nu: 1.0, a: 8.0, sigma2: 1.0 },
                nu12: 0.75,
                a12: 8.0,
                rho: 0.5,
            };
            json!({
                "preset": name,
                "seed": 0,
                "grid": {"lo": [0.0, 0.0], "hi": [1.0, 1.0], "counts": [20, 20]},
                "source": {"kind": "parametric", "params": params, "replications": 20, "noise_var": 0.05},
                "basis": {"kind": "rbf", "knots": [6, 6]},
                "route": "posterior-eof",
                "model": {"n_iter": 600, "n_burn": 200, "thin": 4},
                "cage": {"partition": {"kind": "blocks", "units": 16}},
                "regionalize": {"epsilon": 0.01},
            })
        }
        // Parametric KLE with an explicit unit-count window.
        "argmin-bounded" => json!({
            "preset": name,
            "seed": 0,
            "grid": {"lo": [0.0], "hi": [1.0], "counts": [200]},
            "source": {"kind": "parametric", "params": sim, "replications": 1, "noise_var": 0.0},
            "basis": {"kind": "fourier", "k": 50},
            "route": "score-cov",
            "regionalize": {"mode": "argmin", "j_min": 20, "j_max": 40},
        }),
        other => {
            return Err(CliError::Config(format!("unknown preset `{other}` (known: {})", PRESETS.join(", "))));
        }
    };
    Ok(v)
}

/// Recursively overlays `top` on `base`; objects merge key by key, anything
/// else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    // A tagged enum with a different tag replaces wholesale.
                    Some(old) if !same_tag(old, &v) => *old = v,
                    Some(old) => merge(old, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn same_tag(a: &Value, b: &Value) -> bool {
    match (a.get("kind"), b.get("kind")) {
        (Some(x), Some(y)) => x == y,
        _ => true,
    }
}

/// Accepts either a config document or a manifest (whose `config` field is
/// used).
pub fn unwrap_manifest(v: Value) -> Value {
    match v {
        Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => {
            m.remove("config").expect("checked above")
        }
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_value(v: Value) -> Result<Self, CliError> {
        let mut cfg: ExperimentConfig =
            serde_json::from_value(v).map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
        cfg.model.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let g = &self.grid;
        if g.lo.len() != g.counts.len() || g.hi.len() != g.counts.len() || g.counts.is_empty() {
            return Err(CliError::Config("grid lo, hi and counts must have the same length".into()));
        }
        if let SourceSpec::Parametric { replications, noise_var, .. } = &self.source {
            if *replications == 0 {
                return Err(CliError::Config("replications must be positive".into()));
            }
            if noise_var.is_nan() || *noise_var < 0.0 {
                return Err(CliError::Config("noise_var must be nonnegative".into()));
            }
        }
        if self.route == Route::ScoreCov && matches!(self.source, SourceSpec::Data { .. }) {
            return Err(CliError::Config("route score-cov needs a parametric source".into()));
        }
        if self.cage.per_draw && self.route != Route::PosteriorEof {
            return Err(CliError::Config("cage.per_draw applies to the posterior-eof route only".into()));
        }
        if self.regionalize.mode == SearchMode::Argmin
            && (self.regionalize.j_min.is_none() || self.regionalize.j_max.is_none())
        {
            return Err(CliError::Config("argmin mode needs regionalize.j_min and regionalize.j_max".into()));
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.regionalize.to_config(self.seed).validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }
}
