//! Run configuration: profile defaults, a plain-text key=value file, and
//! flag overrides layered on top. The effective configuration is echoed
//! into every report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
    pub folds: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub sfa_residual_global: bool,
    pub sfa_residual_local: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: "desk".to_string(),
            seed: 42,
            data_root: None,
            checkpoint_dir: None,
            report_dir: None,
            folds: 5,
            iterations: 1000,
            batch_size: 4,
            base_lr: 1e-4,
            weight_decay: 0.01,
            sfa_residual_global: false,
            sfa_residual_local: true,
        }
    }
}

impl RunConfig {
    /// Apply `key=value` lines; '#' starts a comment, blank lines ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "{}:{}: expected key=value, got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim()).map_err(|e| {
                Error::config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "profile" => {
                if value != "desk" && value != "paper" {
                    return Err(Error::config(format!("unknown profile '{value}'")));
                }
                self.profile = value.to_string();
            }
            "seed" => self.seed = parse(key, value)?,
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(value)),
            "report_dir" => self.report_dir = Some(PathBuf::from(value)),
            "folds" => self.folds = parse(key, value)?,
            "train.iterations" => self.iterations = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.base_lr" => self.base_lr = parse(key, value)?,
            "train.weight_decay" => self.weight_decay = parse(key, value)?,
            "sfa.residual_global" => self.sfa_residual_global = parse(key, value)?,
            "sfa.residual_local" => self.sfa_residual_local = parse(key, value)?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match self.profile.as_str() {
            "desk" => ModelConfig::desk(),
            "paper" => ModelConfig::paper(),
            other => return Err(Error::config(format!("unknown profile '{other}'"))),
        };
        cfg.sfa_residual_global = self.sfa_residual_global;
        cfg.sfa_residual_local = self.sfa_residual_local;
        Ok(cfg)
    }

    pub fn train_config(&self, fold: usize) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            weight_decay: self.weight_decay,
            seed: self.seed.wrapping_add(fold as u64),
        }
    }

    /// Flat key/value view for report echoing.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("profile".into(), self.profile.clone());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("folds".into(), self.folds.to_string());
        m.insert("train.iterations".into(), self.iterations.to_string());
        m.insert("train.batch_size".into(), self.batch_size.to_string());
        m.insert("train.base_lr".into(), format!("{}", self.base_lr));
        m.insert("train.weight_decay".into(), format!("{}", self.weight_decay));
        m.insert("sfa.residual_global".into(), self.sfa_residual_global.to_string());
        m.insert("sfa.residual_local".into(), self.sfa_residual_local.to_string());
        if let Some(p) = &self.data_root {
            m.insert("data_root".into(), p.display().to_string());
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flag_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nseed=7\ntrain.iterations=50 # inline\n\nprofile=desk\n")
            .unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.iterations, 50);
        cfg.set("seed", "9").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("train.iterations", "abc").is_err());
        assert!(cfg.set("profile", "gpu").is_err());
    }

    #[test]
    fn profiles_map_to_model_configs() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.model_config().unwrap().image_size, 64);
        cfg.set("profile", "paper").unwrap();
        assert_eq!(cfg.model_config().unwrap().image_size, 352);
    }
}
