//! Experiment configuration files.

use std::path::{Path, PathBuf};

use bergman_lab::generation::DecomposeConfig;
use bergman_lab::toeplitz::GalerkinConfig;
use bergman_lab::weights::{PolydiscPair, ReinhardtWeight};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Moments,
    Volume,
    Spectrum,
    Generation,
    Regularize,
    IdealSweep,
    Offdiag,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Moments => "moments",
            Kind::Volume => "volume",
            Kind::Spectrum => "spectrum",
            Kind::Generation => "generation",
            Kind::Regularize => "regularize",
            Kind::IdealSweep => "ideal-sweep",
            Kind::Offdiag => "offdiag",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Relative tolerance of every quadrature.
    pub quad_rel: f64,
    /// Certified relative kernel tail.
    pub tail: f64,
    /// Accepted `|v_hat / target - 1|`.
    pub volume_rel_gap: f64,
    /// Slack in the eigenvalue count estimate.
    pub number_slack: f64,
    /// Galerkin against diagonal eigenvalues, and the eigenvector ratio identity.
    pub galerkin: f64,
    /// Closed-form approximant comparison.
    pub oracle: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { quad_rel: 1e-12, tail: 1e-13, volume_rel_gap: 0.03, number_slack: 0.05, galerkin: 1e-8, oracle: 1e-8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub per_axis: usize,
    /// Largest modulus as a fraction of the outer radius.
    pub fraction: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { per_axis: 8, fraction: 0.9 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub samples: usize,
    pub degree: u32,
    pub seed: u64,
    pub c_init: f64,
    pub tail_trials: usize,
    pub decompose: DecomposeConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { samples: 10, degree: 12, seed: 1, c_init: 1.0, tail_trials: 100, decompose: DecomposeConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffdiagConfig {
    pub zeta: [f64; 2],
    pub radius: f64,
}

impl Default for OffdiagConfig {
    fn default() -> Self {
        OffdiagConfig { zeta: [0.3, 0.0], radius: 0.2 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdealConfig {
    /// Multiples checked past the threshold.
    pub extra: u32,
    pub max_p: u32,
}

impl Default for IdealConfig {
    fn default() -> Self {
        IdealConfig { extra: 8, max_p: 4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required by `run`; the other subcommands imply it.
    #[serde(default)]
    pub kind: Option<Kind>,
    pub weight: ReinhardtWeight,
    pub polydisc: PolydiscPair,
    #[serde(default)]
    pub ladder: Vec<u32>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub generation: GenerationConfig,
    /// Run the Galerkin comparison in spectrum experiments (`n = 1`).
    #[serde(default)]
    pub galerkin: Option<GalerkinConfig>,
    #[serde(default)]
    pub offdiag: OffdiagConfig,
    #[serde(default)]
    pub ideal: IdealConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

fn default_eps() -> f64 {
    0.1
}

fn default_delta() -> f64 {
    0.5
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError(m));
        if let Err(e) = self.weight.validate_on(&self.polydisc.outer) {
            return bad(e.to_string());
        }
        if let Err(e) = self.polydisc.validate() {
            return bad(e.to_string());
        }
        if self.polydisc.dim() != self.weight.dim {
            return bad("weight and polydisc dimensions differ".into());
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("quad_rel", t.quad_rel),
            ("tail", t.tail),
            ("volume_rel_gap", t.volume_rel_gap),
            ("number_slack", t.number_slack),
            ("galerkin", t.galerkin),
            ("oracle", t.oracle),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("tolerance {name} must be positive"));
            }
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return bad(format!("eps must lie in (0, 1), got {}", self.eps));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.ladder.contains(&0) {
            return bad("ladder entries must be positive".into());
        }
        if self.grid.per_axis == 0 || !(self.grid.fraction > 0.0 && self.grid.fraction < 1.0) {
            return bad("grid needs per_axis >= 1 and fraction in (0, 1)".into());
        }
        if self.generation.decompose.grid < 2 {
            return bad("the decomposition grid needs at least two points per axis".into());
        }
        Ok(())
    }

    /// The experiment to run, from the subcommand or the config.
    pub fn resolve_kind(&self, forced: Option<Kind>) -> Result<Kind, ConfigError> {
        match (forced, self.kind) {
            (Some(k), _) => Ok(k),
            (None, Some(k)) => Ok(k),
            (None, None) => Err(ConfigError("the config has no \"kind\"".into())),
        }
    }
}
