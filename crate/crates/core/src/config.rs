//! Run configuration: one TOML file holding every stage's parameters.

use crate::doe::{derive_seed, DoeSpec};
use crate::harness::{PseudoRealSpec, ShotGrid};
use crate::learner::{PreprocessSpec, TrainConfig};
use crate::scene::{Scene, SceneConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// The configuration shipped with the tool.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../configs/default.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {0} not found")]
    Missing(PathBuf),
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("schema_version {found} is not supported (expected {expected})")]
    Schema { found: u32, expected: u32 },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Generation threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    /// Fraction of each class held out as the validation split.
    pub val_fraction: f64,
    /// Optional directory of background photographs; procedural textures otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_dir: Option<PathBuf>,
    pub doe: DoeSpec,
    #[serde(default)]
    pub pseudo_real: PseudoRealSpec,
    #[serde(default)]
    pub preprocess: PreprocessSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grid: ShotGrid,
    #[serde(default)]
    pub scene: SceneConfig,
}

/// Seeds of the independent random streams, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StreamSeeds {
    pub backgrounds: u64,
    pub split: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_config_str(DEFAULT_CONFIG_TOML).expect("shipped default config is valid")
    }
}

impl RunConfig {
    /// Copies the master seed into every nested stage.
    pub fn resolve_seeds(&mut self) {
        let m = self.master_seed;
        self.doe.master_seed = m;
        self.pseudo_real.seed = derive_seed(m, &[1]);
        self.train.seed = derive_seed(m, &[2]);
        self.grid.base_seed = derive_seed(m, &[3]);
    }

    pub fn stream_seeds(&self) -> StreamSeeds {
        StreamSeeds {
            backgrounds: derive_seed(self.master_seed, &[4]),
            split: derive_seed(self.master_seed, &[5]),
        }
    }

    pub fn set_master_seed(&mut self, seed: u64) {
        self.master_seed = seed;
        self.resolve_seeds();
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.doe.validate().map_err(|e| invalid(&e))?;
        self.pseudo_real.validate(&self.doe).map_err(|e| invalid(&e))?;
        self.preprocess.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.grid.validate().map_err(|e| invalid(&e))?;
        Scene::new(self.scene.clone()).map_err(|e| invalid(&e))?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(ConfigError::Invalid(format!("val_fraction {} must be in [0, 1)", self.val_fraction)));
        }
        let max_fail = self.grid.fail_shots.iter().max().copied().unwrap_or(0);
        let max_pass = self.grid.pass_shots.iter().max().copied().unwrap_or(0);
        if max_fail >= self.pseudo_real.fail_count || max_pass >= self.pseudo_real.pass_count {
            return Err(ConfigError::Invalid(format!(
                "shot counts up to {max_pass} pass / {max_fail} fail leave no held-out pseudo-real images of some class \
                 (pool has {} pass / {} fail)",
                self.pseudo_real.pass_count, self.pseudo_real.fail_count
            )));
        }
        Ok(())
    }

    /// Shrinks every stage to a smoke-test size: 20 training images, 12 pseudo-real
    /// images and a single grid cell.
    pub fn micro(mut self) -> Self {
        self.doe.pass_angles.truncate(1);
        self.doe.fail_angles.truncate(1);
        self.doe.roughness_levels.truncate(1);
        self.doe.power_levels.truncate(1);
        self.doe.background_ids.truncate(1);
        let keep = self.doe.exposure_levels.len() / 2;
        self.doe.exposure_levels = vec![self.doe.exposure_levels[keep]];
        self.doe.images_per_config = 10;
        self.pseudo_real.pass_count = 8;
        self.pseudo_real.fail_count = 4;
        self.grid.pass_shots = vec![2];
        self.grid.fail_shots = vec![2];
        self.grid.repetitions = 2;
        self.train.epochs = 3;
        self
    }

    /// SHA-256 over the canonical JSON form (seeds resolved).
    pub fn hash(&self) -> String {
        let mut resolved = self.clone();
        resolved.resolve_seeds();
        let json = serde_json::to_vec(&resolved).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Parses and validates configuration text. Unknown keys and type errors are reported
/// with their line and column.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    #[derive(Deserialize)]
    struct Version {
        schema_version: Option<u32>,
    }
    let version: Version = toml::from_str::<toml::Table>(text)
        .map_err(|e| ConfigError::Parse(e.to_string()))
        .and_then(|t| {
            t.try_into::<Version>()
                .map_err(|e| ConfigError::Parse(e.to_string()))
        })?;
    match version.schema_version {
        Some(SCHEMA_VERSION) => {}
        Some(found) => {
            return Err(ConfigError::Schema {
                found,
                expected: SCHEMA_VERSION,
            })
        }
        None => return Err(ConfigError::Parse("missing required key `schema_version`".into())),
    }
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.resolve_seeds();
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    if !path.is_file() {
        return Err(ConfigError::Missing(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text).map_err(|e| match e {
        ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doe::{enumerate_composite_plans, enumerate_part_configs};

    #[test]
    fn shipped_default_expands_to_full_dataset() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.schema_version, SCHEMA_VERSION);
        let configs = enumerate_part_configs(&cfg.doe);
        assert_eq!(configs.len(), 72);
        assert_eq!(enumerate_composite_plans(&cfg.doe, &configs).len(), 12_960);
        assert_eq!(cfg.doe, DoeSpec { master_seed: cfg.master_seed, ..DoeSpec::default() });
        assert_eq!(cfg.pseudo_real.holdout_angles, PseudoRealSpec::default().holdout_angles);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.scene, SceneConfig::default());
    }

    #[test]
    fn round_trip_through_toml() {
        let cfg = RunConfig::default();
        let again = parse_config_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        let micro = cfg.clone().micro();
        assert_eq!(parse_config_str(&micro.to_toml()).unwrap(), micro);
    }

    #[test]
    fn micro_config_is_twenty_images() {
        let cfg = RunConfig::default().micro();
        cfg.validate().unwrap();
        let configs = enumerate_part_configs(&cfg.doe);
        assert_eq!(enumerate_composite_plans(&cfg.doe, &configs).len(), 20);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = DEFAULT_CONFIG_TOML.replace("[doe]", "[doe]\nbend_speed = 3");
        let line = text.lines().position(|l| l.starts_with("bend_speed")).unwrap() + 1;
        match parse_config_str(&text) {
            Err(ConfigError::Parse(msg)) => {
                assert!(msg.contains("bend_speed"), "{msg}");
                assert!(msg.contains(&format!("line {line}")), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn schema_and_validation_errors_are_distinct() {
        let text = DEFAULT_CONFIG_TOML.replace("schema_version = 1", "schema_version = 9");
        assert!(matches!(parse_config_str(&text), Err(ConfigError::Schema { found: 9, .. })));
        let text = DEFAULT_CONFIG_TOML.replace("fail_angles = [-5.0, 0.0, 5.0, 10.0]", "fail_angles = [-5.0, 0.0, 5.0, 20.0]");
        assert_ne!(text, DEFAULT_CONFIG_TOML);
        match parse_config_str(&text) {
            Err(ConfigError::Invalid(msg)) => assert!(msg.contains("20"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
        assert!(matches!(parse_config(Path::new("/nonexistent/run.toml")), Err(ConfigError::Missing(_))));
    }

    #[test]
    fn seeds_follow_master_seed() {
        let mut a = RunConfig::default();
        let b = a.clone();
        a.set_master_seed(a.master_seed + 1);
        assert_ne!(a.doe.master_seed, b.doe.master_seed);
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.stream_seeds(), b.stream_seeds());
    }
}
