//! Layered configuration: flag > environment > TOML file > default.
//!
//! Environment variables use the `SECURELINK_` prefix and are resolved by
//! clap together with the flags, so [`Overrides`] already holds the winner
//! of those two layers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use securelink_core::harness::eval::RoundSpec;
use securelink_core::harness::{ExperimentConfig, SynthSpec};
use securelink_core::metric::{MsLossConfig, TrainConfig};
use securelink_core::ocsvm::OcSvmConfig;
use securelink_core::signal::{PreprocessConfig, TelemetryField, DEFAULT_TOF_SENTINEL};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub eta: f64,
    pub sample_len: usize,
    /// Valid `[min, max]` per telemetry field key.
    pub ranges: BTreeMap<String, [f64; 2]>,
    /// Saturation values per telemetry field key.
    pub sentinels: BTreeMap<String, Vec<f64>>,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        let core = PreprocessConfig::default();
        PreprocessSection {
            eta: core.eta,
            sample_len: core.sample_len,
            ranges: BTreeMap::new(),
            sentinels: BTreeMap::from([(TelemetryField::Tof.key().to_string(), vec![DEFAULT_TOF_SENTINEL])]),
        }
    }
}

impl PreprocessSection {
    pub fn to_core(&self) -> Result<PreprocessConfig> {
        let field = |key: &str| {
            TelemetryField::from_key(key)
                .ok_or_else(|| CliError::Usage(format!("unknown telemetry field `{key}` in preprocess config")))
        };
        let mut cfg = PreprocessConfig {
            eta: self.eta,
            sample_len: self.sample_len,
            saturation_sentinels: Default::default(),
            ..PreprocessConfig::default()
        };
        for (key, [lo, hi]) in &self.ranges {
            cfg.field_ranges[field(key)?.index()] = (*lo, *hi);
        }
        for (key, values) in &self.sentinels {
            cfg.saturation_sentinels[field(key)?.index()] = values.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum World {
    #[default]
    Closed,
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub world: World,
    pub rounds: usize,
    pub impostors_per_round: usize,
    /// Explicit rounds; when empty, rounds are drawn from the fleet.
    pub plan: Vec<RoundSpec>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            world: World::Closed,
            rounds: 6,
            impostors_per_round: 2,
            plan: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub registry: Option<PathBuf>,
}

/// The merged configuration; echoed into every output artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub preprocess: PreprocessSection,
    pub train: TrainConfig,
    pub loss: MsLossConfig,
    pub ocsvm: OcSvmConfig,
    pub synth: SynthSpec,
    pub experiment: ExperimentSection,
    pub paths: PathsSection,
}

/// Flags that override the configuration file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true, env = "SECURELINK_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "SECURELINK_SEED")]
    pub seed: Option<u64>,
    /// Phase-gradient variance threshold.
    #[arg(long, global = true, env = "SECURELINK_ETA")]
    pub eta: Option<f64>,
    /// Frames per sample.
    #[arg(long, global = true, env = "SECURELINK_SAMPLE_LEN")]
    pub sample_len: Option<usize>,
    #[arg(long, global = true, env = "SECURELINK_ALPHA")]
    pub alpha: Option<f64>,
    #[arg(long, global = true, env = "SECURELINK_BETA")]
    pub beta: Option<f64>,
    #[arg(long, global = true, env = "SECURELINK_MARGIN")]
    pub margin: Option<f64>,
    #[arg(long, global = true, env = "SECURELINK_TAU")]
    pub tau: Option<f64>,
    #[arg(long, global = true, env = "SECURELINK_GAMMA")]
    pub gamma: Option<f64>,
    #[arg(long, global = true, env = "SECURELINK_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, global = true, env = "SECURELINK_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, global = true, env = "SECURELINK_LEARNING_RATE")]
    pub learning_rate: Option<f64>,
    /// Number of open-world rounds.
    #[arg(long, global = true, env = "SECURELINK_ROUNDS")]
    pub rounds: Option<usize>,
}

impl CliConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("{}: {e}", origin.display())))
    }

    /// Reads the file named by `overrides.config` (if any) and applies the overrides.
    pub fn load(overrides: &Overrides) -> Result<Self> {
        let mut cfg = match &overrides.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                Self::from_toml(&text, path)?
            }
            None => CliConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Copy>(slot: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *slot = v;
            }
        }
        set(&mut self.seed, o.seed);
        set(&mut self.preprocess.eta, o.eta);
        set(&mut self.preprocess.sample_len, o.sample_len);
        set(&mut self.loss.alpha, o.alpha);
        set(&mut self.loss.beta, o.beta);
        set(&mut self.loss.margin, o.margin);
        set(&mut self.ocsvm.tau, o.tau);
        set(&mut self.ocsvm.gamma, o.gamma);
        set(&mut self.train.epochs, o.epochs);
        set(&mut self.train.batch_size, o.batch_size);
        set(&mut self.train.learning_rate, o.learning_rate);
        set(&mut self.experiment.rounds, o.rounds);
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.to_core()?;
        self.experiment_config().validate()?;
        self.synth.fleet.validate()?;
        if self.experiment.rounds == 0 {
            return Err(CliError::Usage("experiment.rounds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn preprocess_config(&self) -> Result<PreprocessConfig> {
        self.preprocess.to_core()
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: self.train.clone(),
            loss: self.loss,
            ocsvm: self.ocsvm,
            seed: self.seed,
        }
    }

    /// JSON form embedded in artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }
}
