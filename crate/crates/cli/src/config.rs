use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use bustr::eval::Variant;
use bustr::model::ModelConfig;
use bustr::shingler::{ShinglerConfig, WeekAssignment};
use bustr::synthworld::{WorldSpec, FEED_ID};
use bustr::trainer::TrainConfig;

/// Everything a pipeline run needs. Omitted keys take their defaults; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds world generation, shingling and training.
    pub seed: u64,
    pub inputs: Inputs,
    pub weeks: WeekAssignment,
    pub shingler: ShinglerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Variant trained by `train`.
    pub variant: Variant,
    pub ablate: AblateConfig,
    pub world: WorldSpec,
}

/// Raw inputs. Unset paths point into the `world/` directory that
/// `synth-gen` writes under the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub gtfs: Option<PathBuf>,
    pub positions: Option<PathBuf>,
    pub traffic: Option<PathBuf>,
    pub feed_id: String,
    pub traffic_bucket_min: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    pub trials: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            inputs: Inputs::default(),
            weeks: WeekAssignment {
                train: vec!["2024-W01".parse().expect("valid week")],
                validation: vec!["2024-W02".parse().expect("valid week")],
                test: vec!["2024-W03".parse().expect("valid week")],
            },
            shingler: ShinglerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            variant: Variant::Full,
            ablate: AblateConfig::default(),
            world: WorldSpec::default(),
        }
    }
}

impl Default for Inputs {
    fn default() -> Self {
        Inputs {
            gtfs: None,
            positions: None,
            traffic: None,
            feed_id: FEED_ID.to_string(),
            traffic_bucket_min: 30,
        }
    }
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: Variant::ALL.to_vec(),
            trials: 3,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("read config {}", path.display()))?;
        let config: PipelineConfig = toml::from_str(&text).map_err(ConfigError)?;
        Ok(config)
    }

    /// Applies the command-line seed and propagates the seed to each stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.world.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.world.validate()?;
        if self.ablate.trials == 0 {
            return Err(ConfigError(ConfigError::msg("ablate.trials must be positive")).into());
        }
        Ok(())
    }

    pub fn gtfs(&self, out: &Path) -> PathBuf {
        self.inputs
            .gtfs
            .clone()
            .unwrap_or_else(|| out.join("world").join("gtfs"))
    }

    pub fn positions(&self, out: &Path) -> PathBuf {
        self.inputs
            .positions
            .clone()
            .unwrap_or_else(|| out.join("world").join("vehicle_positions.jsonl"))
    }

    pub fn traffic(&self, out: &Path) -> PathBuf {
        self.inputs
            .traffic
            .clone()
            .unwrap_or_else(|| out.join("world").join("traffic.csv"))
    }
}

/// A configuration file that failed to parse or validate.
#[derive(Debug)]
pub struct ConfigError(pub toml::de::Error);

impl ConfigError {
    fn msg(m: &str) -> toml::de::Error {
        serde::de::Error::custom(m)
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config: {}", self.0.message())
    }
}

impl std::error::Error for ConfigError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: PipelineConfig = toml::from_str("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.train.batch, 200);
        assert_eq!(c.train.learning_rate, 0.1);
        assert_eq!(c.model.hidden, 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<PipelineConfig>("sede = 3").is_err());
        assert!(toml::from_str::<PipelineConfig>("[train]\nstep = 3").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c: PipelineConfig =
            toml::from_str("seed = 4\n[train]\nsteps = 50\n[ablate]\nvariants = [\"full\", \"no-sia\"]").unwrap();
        assert_eq!(c.train.steps, 50);
        assert_eq!(c.train.batch, 200);
        assert_eq!(c.ablate.variants, vec![Variant::Full, Variant::NoSia]);
        let c = c.with_seed(None);
        assert_eq!((c.world.seed, c.train.seed), (4, 4));
    }
}
