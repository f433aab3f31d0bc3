use std::path::{Path, PathBuf};

use hydronet::hpo::{SearchSpace, TpeSettings};
use hydronet::longterm::LongtermConfig;
use hydronet::models::ArchitectureConfig;
use hydronet::oracle::OracleConfig;
use hydronet::seed::derive_seed;
use hydronet::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoConfig {
    pub trials: usize,
    /// Training iterations per trial.
    pub iterations: usize,
    pub seed: u64,
    pub tpe: TpeSettings,
    pub space: SearchSpace,
}

impl Default for HpoConfig {
    fn default() -> Self {
        Self { trials: 20, iterations: 400, seed: 3, tpe: TpeSettings::default(), space: SearchSpace::desk_default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    /// Defaults to `<out_dir>/<arch>_<target>.swmd`.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Continuous flow/concentration record for `longterm`.
    pub record: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { dataset: "hydronet.swds".into(), checkpoint: None, out_dir: ".".into(), record: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; when present it replaces the oracle, training and hpo seeds
    /// by fixed derivations.
    pub seed: Option<u64>,
    pub oracle: OracleConfig,
    pub architecture: ArchitectureConfig,
    pub training: TrainConfig,
    pub hpo: HpoConfig,
    pub longterm: LongtermConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(root) = cfg.seed {
            cfg.oracle.seed = derive_seed(root, 0);
            cfg.training.seed = derive_seed(root, 1);
            cfg.hpo.seed = derive_seed(root, 2);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Built-in defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => {
                let cfg = Self::default();
                cfg.validate()?;
                Ok(cfg)
            }
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let config = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.oracle.validate().map_err(|e| config(&e))?;
        self.architecture.validate().map_err(|e| config(&e))?;
        self.training.validate().map_err(|e| config(&e))?;
        self.hpo.space.validate().map_err(|e| config(&e))?;
        if self.hpo.trials == 0 || self.hpo.iterations == 0 {
            return Err(CliError::Config("hpo.trials and hpo.iterations must be at least 1".into()));
        }
        let lt = &self.longterm;
        if !(lt.q_off > 0.0 && lt.q_off <= lt.q_on) || !(lt.min_gap >= 0.0) || lt.classes.is_empty() {
            return Err(CliError::Config("longterm: need 0 < q_off <= q_on, min_gap >= 0 and a class".into()));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| {
            self.paths.out_dir.join(format!("{}_{}.swmd", self.architecture.kind.name(), self.training.target.name()))
        })
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.paths.out_dir.join(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_everywhere() {
        for doc in ["colour = 1", "[oracle]\ncolour = 1", "[training]\nlearning_rate = 0.1", "[paths]\nfoo = 'x'"] {
            assert!(matches!(RunConfig::parse(doc), Err(CliError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn sections_and_root_seed() {
        let doc = r#"
seed = 11
[oracle]
cases = 12
times = 6
points = 16
[architecture]
kind = "mionet"
hidden = 8
[training]
iterations = 5
target = "velocity"
[[hpo.space]]
name = "lr"
domain = { type = "float", lo = 1e-4, hi = 1e-2, log = true }
[longterm]
min_gap = 600.0
"#;
        let cfg = RunConfig::parse(doc).unwrap();
        assert_eq!(cfg.oracle.cases, 12);
        assert_eq!(cfg.oracle.seed, derive_seed(11, 0));
        assert_eq!(cfg.training.seed, derive_seed(11, 1));
        assert_eq!(cfg.hpo.space.params.len(), 1);
        assert_eq!(cfg.longterm.min_gap, 600.0);
        assert!(cfg.checkpoint_path().ends_with("mionet_velocity.swmd"));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(RunConfig::parse("[oracle]\nclasses = 1"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("[architecture]\nhidden = 0"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("[longterm]\nq_on = 1e-7"), Err(CliError::Config(_))));
    }
}
