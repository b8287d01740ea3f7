//! The single JSON run configuration. Unknown keys are rejected and every
//! default is echoed back into the persisted copy, which is authoritative
//! for reproduction.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use eqvar_core::datagen::GenerationConfig;
use eqvar_core::losses::Method;
use eqvar_core::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_master_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub generation: GenerationConfig,
    pub train_count: usize,
    pub validation_count: usize,
    pub test_count: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            generation: GenerationConfig::default(),
            train_count: 64,
            validation_count: 8,
            test_count: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub methods: Vec<Method>,
    pub n_sessions: usize,
    pub total_iterations: usize,
    pub checkpoint_every: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_l1: f64,
    pub lambda_div: f64,
    pub atan_scale: f64,
    pub atan_weight: f64,
    pub sigmoid_sharpness: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let loss = eqvar_core::losses::LossConfig::for_method(Method::Baseline);
        Self {
            methods: Method::ALL.to_vec(),
            n_sessions: 16,
            total_iterations: 4_000,
            checkpoint_every: 200,
            batch_size: 4,
            learning_rate: 2e-4,
            lambda_l1: loss.lambda_l1,
            lambda_div: loss.lambda_div,
            atan_scale: loss.atan_scale,
            atan_weight: loss.atan_weight,
            sigmoid_sharpness: loss.sigmoid_sharpness,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub resamples: usize,
    pub epsilon_fraction: f64,
    pub window: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let d = eqvar_core::variability::AnalysisConfig::default();
        Self {
            resamples: d.resamples,
            epsilon_fraction: d.epsilon_fraction,
            window: d.window,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub master_seed: u64,
    pub dataset: DatasetSection,
    pub training: TrainingSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: default_version(),
            master_seed: default_master_seed(),
            dataset: DatasetSection::default(),
            training: TrainingSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl RunConfig {
    /// Load from file (or defaults when `path` is `None`), then apply the
    /// `EQVL_SEED` environment override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: p.display().to_string(),
                    reason: e.to_string(),
                })?
            }
            None => RunConfig::default(),
        };
        if config.version != CONFIG_VERSION {
            return Err(Error::Usage(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                config.version
            )));
        }
        if let Ok(seed) = std::env::var("EQVL_SEED") {
            config.master_seed = seed.parse().map_err(|_| {
                Error::Usage(format!("EQVL_SEED must be an integer, got {seed:?}"))
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.training.methods.is_empty() {
            return Err(Error::Usage("training.methods must be non-empty".into()));
        }
        if self.training.n_sessions < 2 {
            return Err(Error::Usage("training.n_sessions must be >= 2".into()));
        }
        if self.dataset.train_count == 0 || self.dataset.test_count == 0 {
            return Err(Error::Usage("dataset counts must be positive".into()));
        }
        self.loss_config(self.training.methods[0]).validate()?;
        self.train_config(self.training.methods[0], 0).validate()?;
        Ok(())
    }

    pub fn loss_config(&self, method: Method) -> eqvar_core::losses::LossConfig {
        eqvar_core::losses::LossConfig {
            method,
            lambda_l1: self.training.lambda_l1,
            lambda_div: self.training.lambda_div,
            atan_scale: self.training.atan_scale,
            atan_weight: self.training.atan_weight,
            sigmoid_sharpness: self.training.sigmoid_sharpness,
        }
    }

    pub fn train_config(&self, method: Method, session_seed: u64) -> eqvar_core::trainer::TrainConfig {
        eqvar_core::trainer::TrainConfig {
            loss: self.loss_config(method),
            total_iterations: self.training.total_iterations,
            checkpoint_every: self.training.checkpoint_every,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            session_seed,
        }
    }

    pub fn analysis_config(&self) -> eqvar_core::variability::AnalysisConfig {
        eqvar_core::variability::AnalysisConfig {
            resamples: self.analysis.resamples,
            epsilon_fraction: self.analysis.epsilon_fraction,
            window: self.analysis.window,
            bootstrap_seed: eqvar_core::datagen::mix_seed(self.master_seed, 2),
            ..eqvar_core::variability::AnalysisConfig::default()
        }
    }

    /// Seed for dataset generation.
    pub fn generation_seed(&self) -> u64 {
        eqvar_core::datagen::mix_seed(self.master_seed, 1)
    }

    /// Per-session seed stream, shared across methods so method
    /// comparisons see the same draws.
    pub fn session_seeds(&self, n: usize) -> Vec<u64> {
        (0..n)
            .map(|i| eqvar_core::datagen::mix_seed(self.master_seed, 1000 + i as u64))
            .collect()
    }

    /// Persist the fully-resolved config (defaults included).
    pub fn echo_to(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        fs::write(path, bytes)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_echo_all_fields() {
        let config = RunConfig::default();
        let text = serde_json::to_string_pretty(&config).unwrap();
        for key in [
            "master_seed",
            "train_count",
            "n_sessions",
            "epsilon_fraction",
            "sigmoid_sharpness",
        ] {
            assert!(text.contains(key), "{key} missing from echo");
        }
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.master_seed, config.master_seed);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"bogus_key": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let config: RunConfig =
            serde_json::from_str(r#"{"master_seed": 7, "training": {"n_sessions": 4}}"#).unwrap();
        assert_eq!(config.master_seed, 7);
        assert_eq!(config.training.n_sessions, 4);
        assert_eq!(config.training.total_iterations, 4_000);
    }

    #[test]
    fn session_seeds_are_distinct_and_stable() {
        let config = RunConfig::default();
        let seeds = config.session_seeds(16);
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), 16);
        assert_eq!(seeds, config.session_seeds(16));
    }
}
