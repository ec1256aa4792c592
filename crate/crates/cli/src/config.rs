//! TOML experiment configuration with defaults matching the two case
//! studies, so a stock config reproduces each experiment end to end.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use daestep::data::{NoiseChannels, NoiseSpec};
use daestep::integrators::Stepper;
use daestep::reference::{Inflow, ManifoldSpec, NetworkSpec};
use daestep::training::models::{ManifoldModelConfig, NetworkModelConfig};
use daestep::training::{LossWeights, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Manifold,
    Network,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExperimentKind::Manifold => write!(f, "manifold"),
            ExperimentKind::Network => write!(f, "network"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub manifold: ManifoldSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub noise: Option<NoiseSection>,
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifoldSection {
    pub known_area: f64,
    pub dt: f64,
    pub steps: usize,
    pub x0: f64,
    pub inflow: Inflow,
}

impl Default for ManifoldSection {
    fn default() -> Self {
        let spec = ManifoldSpec::default();
        ManifoldSection {
            known_area: spec.known_area,
            dt: spec.dt,
            steps: spec.steps,
            x0: spec.x0,
            inflow: spec.inflow,
        }
    }
}

impl ManifoldSection {
    pub fn to_spec(&self) -> ManifoldSpec {
        ManifoldSpec {
            known_area: self.known_area,
            dt: self.dt,
            steps: self.steps,
            x0: self.x0,
            inflow: self.inflow,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub areas: [f64; 4],
    pub pump_coeff: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub dt: f64,
    pub steps: usize,
    pub x0: [f64; 4],
}

impl Default for NetworkSection {
    fn default() -> Self {
        let spec = NetworkSpec::default();
        NetworkSection {
            areas: spec.areas,
            pump_coeff: spec.pump_coeff,
            alpha1: spec.alpha1,
            alpha2: spec.alpha2,
            dt: spec.dt,
            steps: spec.steps,
            x0: spec.x0,
        }
    }
}

impl NetworkSection {
    pub fn to_spec(&self) -> NetworkSpec {
        NetworkSpec {
            areas: self.areas,
            pump_coeff: self.pump_coeff,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            dt: self.dt,
            steps: self.steps,
            x0: self.x0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub manifold_hidden: usize,
    pub network_hidden: Vec<usize>,
    pub stepper: Stepper,
    pub alpha_init: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            manifold_hidden: 5,
            network_hidden: vec![30, 30],
            stepper: Stepper::Euler,
            alpha_init: 0.2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub lambda_residual: f64,
    pub lambda_constraint: f64,
    /// Loss tolerance; if absent, 1e-6 for noiseless runs and disabled when
    /// a noise section is present.
    pub loss_tol: Option<f64>,
    /// Rollout horizon in steps (absent = full dataset).
    pub horizon: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            max_epochs: 20_000,
            patience: 20,
            lr: 1e-3,
            lambda_residual: 1.0,
            lambda_constraint: 1.0,
            loss_tol: None,
            horizon: None,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub snr_db: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub channels: NoiseChannels,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    /// Field-path diagnostics for every violated numeric domain.
    pub fn validate(&self) -> Result<(), String> {
        let mut errors = Vec::new();
        let m = &self.manifold;
        if !(m.dt > 0.0) {
            errors.push(format!("manifold.dt: must be > 0, got {}", m.dt));
        }
        if m.steps == 0 {
            errors.push("manifold.steps: must be >= 1".into());
        }
        if m.x0 < 0.0 {
            errors.push(format!("manifold.x0: height must be >= 0, got {}", m.x0));
        }
        if !(m.known_area > 0.0) {
            errors.push(format!(
                "manifold.known_area: must be > 0, got {}",
                m.known_area
            ));
        }
        match m.inflow {
            Inflow::Constant { value } if value < 0.0 => {
                errors.push(format!("manifold.inflow.value: must be >= 0, got {value}"));
            }
            Inflow::Sinusoid { period_scale: 0.0, .. } => {
                errors.push("manifold.inflow.period_scale: must be nonzero".into());
            }
            _ => {}
        }

        let n = &self.network;
        if !(n.dt > 0.0) {
            errors.push(format!("network.dt: must be > 0, got {}", n.dt));
        }
        if n.steps == 0 {
            errors.push("network.steps: must be >= 1".into());
        }
        if n.areas.iter().any(|&a| !(a > 0.0)) {
            errors.push(format!("network.areas: must all be > 0, got {:?}", n.areas));
        }
        if n.x0.iter().any(|&h| h < 0.0) {
            errors.push(format!("network.x0: heights must be >= 0, got {:?}", n.x0));
        }
        if (n.x0[0] - n.x0[1]).abs() > 1e-12 {
            errors.push(format!(
                "network.x0: tanks 1 and 2 share a manifold, heights must match, got {} vs {}",
                n.x0[0], n.x0[1]
            ));
        }

        if self.model.manifold_hidden == 0 {
            errors.push("model.manifold_hidden: must be >= 1".into());
        }
        if self.model.network_hidden.is_empty()
            || self.model.network_hidden.contains(&0)
        {
            errors.push(format!(
                "model.network_hidden: layer widths must be >= 1, got {:?}",
                self.model.network_hidden
            ));
        }

        let t = &self.train;
        if t.max_epochs == 0 {
            errors.push("train.max_epochs: must be >= 1".into());
        }
        if t.patience == 0 {
            errors.push("train.patience: must be >= 1".into());
        }
        if !(t.lr >= 0.0) {
            errors.push(format!("train.lr: must be >= 0, got {}", t.lr));
        }
        if t.lambda_residual < 0.0 || t.lambda_constraint < 0.0 {
            errors.push("train.lambda_residual/lambda_constraint: must be >= 0".into());
        }
        if t.lambda_residual == 0.0 && t.lambda_constraint == 0.0 {
            errors.push("train.lambda_residual, train.lambda_constraint: must not both be 0".into());
        }
        if let Some(h) = t.horizon {
            if h == 0 {
                errors.push("train.horizon: must be >= 1 when set".into());
            }
        }

        if let Some(noise) = &self.noise {
            if !noise.snr_db.is_finite() {
                errors.push(format!("noise.snr_db: must be finite, got {}", noise.snr_db));
            }
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors.join("\n"))
        }
    }

    pub fn manifold_model_config(&self) -> ManifoldModelConfig {
        ManifoldModelConfig {
            hidden: self.model.manifold_hidden,
            seed: self.seed,
            dt: self.manifold.dt,
            stepper: self.model.stepper,
            known_area: self.manifold.known_area,
        }
    }

    pub fn network_model_config(&self) -> NetworkModelConfig {
        NetworkModelConfig {
            hidden: self.model.network_hidden.clone(),
            seed: self.seed,
            dt: self.network.dt,
            stepper: self.model.stepper,
            areas: self.network.areas,
            alpha_init: self.model.alpha_init,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let loss_tol = self
            .train
            .loss_tol
            .unwrap_or(if self.noise.is_some() { 0.0 } else { 1e-6 });
        TrainConfig {
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            loss_tol,
            weights: LossWeights {
                residual: self.train.lambda_residual,
                constraint: self.train.lambda_constraint,
            },
            lr: self.train.lr,
            horizon: self.train.horizon,
            seed: self.seed,
            checkpoint_every: self.train.checkpoint_every,
            checkpoint_dir: self.out_dir.clone(),
        }
    }

    pub fn noise_spec(&self) -> Option<NoiseSpec> {
        self.noise.as_ref().map(|n| NoiseSpec {
            snr_db: n.snr_db,
            seed: n.seed.unwrap_or_else(|| self.seed.wrapping_add(1000)),
            channels: n.channels,
        })
    }
}
