//! Run configuration for the command-line driver: the build parameters,
//! the membership parameters, the maximizer settings, and the suite
//! selection, in one JSON document referenced by content digest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, UdsError};
use crate::maximizer::MaximizerParams;
use crate::tubes::BuildConfig;
use crate::verification::SUITE_NAMES;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub build: BuildConfig,
    /// Membership parameters the suites and pipelines run at.
    pub lambdas: Vec<f64>,
    pub maximizer: MaximizerParams,
    /// Corpus function driving `maximize` (one of the built-in names).
    pub corpus_function: String,
    /// Suites `verify` runs; empty selects none (with a warning).
    pub suites: Vec<String>,
    pub seed: u64,
    /// Worker threads for suite parallelism (1 = sequential).
    pub workers: usize,
    /// Output directory for artifacts.
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            build: BuildConfig::default(),
            lambdas: vec![0.25, 0.5],
            maximizer: MaximizerParams::default(),
            corpus_function: "l1".into(),
            suites: SUITE_NAMES.iter().map(|s| s.to_string()).collect(),
            seed: 2026,
            workers: 1,
            out_dir: "out".into(),
        }
    }
}

/// Built-in corpus function names `maximize` accepts.
pub const CORPUS_FUNCTIONS: &[&str] =
    &["linear", "l1", "dist-to-wedge", "max-affine", "dist-to-control"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.build.validate()?;
        if self.lambdas.is_empty() {
            return Err(UdsError::invalid_input("lambdas must be non-empty"));
        }
        for &l in &self.lambdas {
            if !(l > 0.0 && l <= 1.0) {
                return Err(UdsError::invalid_input(format!(
                    "lambda {l} outside (0, 1]"
                )));
            }
        }
        if self.maximizer.steps == 0 || self.maximizer.pool == 0 {
            return Err(UdsError::invalid_input(
                "maximizer steps and pool must be positive",
            ));
        }
        if self.workers == 0 {
            return Err(UdsError::invalid_input("workers must be positive"));
        }
        if !CORPUS_FUNCTIONS.contains(&self.corpus_function.as_str()) {
            return Err(UdsError::invalid_input(format!(
                "unknown corpus function {:?} (expected one of {CORPUS_FUNCTIONS:?})",
                self.corpus_function
            )));
        }
        for s in &self.suites {
            if !SUITE_NAMES.contains(&s.as_str()) {
                return Err(UdsError::invalid_input(format!(
                    "unknown suite {s:?} (expected one of {SUITE_NAMES:?})"
                )));
            }
        }
        Ok(())
    }

    /// Content digest referencing this exact configuration in reports.
    /// Only result-affecting fields count: the output directory and the
    /// worker count are excluded so replays into different locations stay
    /// bit-identical.
    pub fn digest(&self) -> String {
        let mut semantic = self.clone();
        semantic.out_dir = String::new();
        semantic.workers = 1;
        let canon = serde_json::to_vec(&semantic).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&canon);
        format!("{:x}", h.finalize())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_fields() {
        let mut c = RunConfig::default();
        c.lambdas = vec![1.5];
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let mut c = RunConfig::default();
        c.build.rho = 1.5;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let mut c = RunConfig::default();
        c.corpus_function = "nope".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.suites = vec!["bogus".into()];
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_changes_with_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), RunConfig::default().digest());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        let a = RunConfig::default();
        a.save(&p).unwrap();
        let b = RunConfig::load(&p).unwrap();
        assert_eq!(a.digest(), b.digest());
    }
}
