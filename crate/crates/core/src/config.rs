//! Run configuration: one TOML file whose values are laid over the built-in
//! defaults. Callers apply command-line overrides afterwards.

use crate::curation::CurationCriteria;
use crate::grpo::TrainConfig;
use crate::raster::RenderSpec;
use crate::reward::{RewardComponent, RewardKind, RewardSpec};
use crate::semantic::{SemanticBackend, ENDPOINT_ENV};
use crate::train::{mix_seed, SftConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples per target for the mean pixel reward.
    pub samples: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// Candidates per target for best-of-n selection.
    pub best_of: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            temperature: 0.5,
            top_p: 0.9,
            best_of: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Standard deviation of the random initial parameters.
    pub init_scale: f64,
    /// Fixed synthetic targets used for GRPO and evaluation.
    pub targets: usize,
    pub sft: SftConfig,
    pub eval: EvalConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            init_scale: 0.01,
            targets: 20,
            sft: SftConfig {
                lr: 0.1,
                dataset_size: 4000,
                ..SftConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every random stream of a run is derived from this.
    pub seed: u64,
    pub render: RenderSpec,
    pub rewards: RewardSpec,
    pub grpo: TrainConfig,
    pub policy: PolicyConfig,
    pub curation: CurationCriteria,
    pub semantic: SemanticBackend,
}

/// Independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    SftData = 2,
    Sft = 3,
    Targets = 4,
    Grpo = 5,
    Eval = 6,
    Curation = 7,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            render: RenderSpec::default(),
            rewards: RewardSpec::new(vec![
                RewardComponent {
                    kind: RewardKind::L2,
                    weight: 1.0,
                },
                RewardComponent {
                    kind: RewardKind::Length,
                    weight: 0.1,
                },
            ])
            .expect("valid spec"),
            grpo: TrainConfig {
                lr0: 8e-4,
                length_weight_end: 0.3,
                ..TrainConfig::default()
            },
            policy: PolicyConfig::default(),
            curation: CurationCriteria::default(),
            semantic: SemanticBackend::default(),
        }
    }
}

/// Recursively lays `over` onto `base`. Tables merge key by key, except
/// `rewards`, which a file replaces as a whole.
fn merge(base: &mut toml::Value, over: toml::Value, depth: usize) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if !(depth == 0 && k == "rewards") => merge(slot, v, depth + 1),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let over: toml::Value =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut base = toml::Value::try_from(RunConfig::default())
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut base, over, 0);
        let cfg: RunConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Switches the semantic backend to the remote service named by the
    /// environment, when that variable is set and non-empty.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(ENDPOINT_ENV) {
            if !url.trim().is_empty() {
                self.semantic = SemanticBackend {
                    timeout_ms: self.semantic.timeout_ms,
                    retries: self.semantic.retries,
                    ..SemanticBackend::remote(url.trim())
                };
            }
        }
    }

    pub fn seed_for(&self, stream: Stream) -> u64 {
        mix_seed(&[self.seed, stream as u64])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.render.validate().map_err(|e| invalid(e.to_string()))?;
        self.grpo.validate().map_err(|e| invalid(e.to_string()))?;
        self.policy
            .sft
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.curation
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.semantic
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        let p = &self.policy;
        if !(p.init_scale >= 0.0 && p.init_scale.is_finite()) {
            return Err(invalid(
                "policy.init_scale must be finite and non-negative".into(),
            ));
        }
        if p.targets == 0 || p.eval.samples == 0 || p.eval.best_of == 0 {
            return Err(invalid(
                "policy.targets, eval.samples and eval.best_of must be positive".into(),
            ));
        }
        if !(p.eval.temperature > 0.0) || !(p.eval.top_p > 0.0 && p.eval.top_p <= 1.0) {
            return Err(invalid(
                "eval sampling needs temperature > 0 and top_p in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}
