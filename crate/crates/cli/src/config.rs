//! Run configuration file (TOML). Every key is optional and defaults to
//! the desk preset; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cotseg::inference::SlidingWindowConfig;
use cotseg::losses::LossConfig;
use cotseg::preprocess::Modality;
use cotseg::trainer::TrainConfig;
use cotseg::unet::UNetConfig;

use crate::exit::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of `<case>/<case>_{flair,t1,t1ce,t2,seg}.nii.gz` cases; empty for none.
    pub dir: String,
    /// Number of generated cases used when `dir` is empty.
    pub synthetic: usize,
    pub synthetic_extent: [usize; 3],
    pub synthetic_seed: u64,
    /// Cross-validation folds; 1 trains on every case.
    pub folds: usize,
    pub keep: Vec<Modality>,
    /// Filled in by `train` with the held-out fold; if given on input it must match.
    pub validation_cases: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: String::new(),
            synthetic: 0,
            synthetic_extent: [32; 3],
            synthetic_seed: 0,
            folds: 3,
            keep: Modality::ALL.to_vec(),
            validation_cases: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tag: String,
    pub precision: Precision,
    pub model: UNetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub inference: SlidingWindowConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tag: "desk".into(),
            precision: Precision::F32,
            model: UNetConfig::desk(),
            loss: LossConfig::default(),
            train: TrainConfig::desk(),
            inference: SlidingWindowConfig::desk(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    /// Parses a run file. Keys missing from a partial section take the desk
    /// preset value rather than the section type's own default.
    pub fn parse(text: &str) -> CliResult<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("run config serializes");
        merge(&mut merged, user);
        merged.try_into().map_err(|e: toml::de::Error| CliError::config(e.to_string()))
    }

    pub fn load_or_default(path: Option<&PathBuf>) -> CliResult<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), |p| RunConfig::load(p))
    }

    pub fn validate(&self) -> CliResult<()> {
        let section = |name: &str, r: cotseg::Result<()>| r.map_err(|e| CliError::config(format!("[{name}] {e}")));
        section("model", self.model.validate())?;
        section("loss", self.loss.validate())?;
        section("train", self.train.validate())?;
        section("inference", self.inference.validate(self.model.divisor()))?;
        if self.train.patch.iter().any(|p| p % self.model.divisor() != 0) {
            return Err(CliError::config(format!(
                "[train] patch {:?} must be divisible by {} for model depth {}",
                self.train.patch,
                self.model.divisor(),
                self.model.depth
            )));
        }
        if self.data.folds == 0 {
            return Err(CliError::config("[data] folds must be >= 1"));
        }
        if self.data.keep.is_empty() {
            return Err(CliError::config("[data] keep must list at least one modality"));
        }
        if self.tag.is_empty() || self.tag.contains(['/', '\\']) {
            return Err(CliError::config(format!("tag {:?} must be a non-empty file-name fragment", self.tag)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_dump_reparses() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[loss]\nalpah = 0.3\n").is_err());
        assert!(RunConfig::parse("bogus = 1\n").is_err());
        assert!(RunConfig::parse("[data]\nkeep = [\"adc\"]\n").is_err());
    }

    #[test]
    fn partial_section_keeps_desk_values() {
        let cfg = RunConfig::parse("[train]\nepochs = 1\n").unwrap();
        assert_eq!(cfg.train.epochs, 1);
        assert_eq!(cfg.train.patch, RunConfig::default().train.patch);
    }

    #[test]
    fn bad_alpha_names_key() {
        let cfg = RunConfig::parse("[loss]\nalpha = 1.5\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.message.contains("alpha"), "{}", err.message);
        assert_eq!(err.code, 1);
    }
}
