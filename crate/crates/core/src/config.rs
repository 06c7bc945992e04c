//! Experiment configuration.
//!
//! One TOML document configures every stage. Unknown keys are rejected and
//! every section falls back to its defaults, which form the reference
//! desk-scale run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyConfig;
use crate::data::ToyDistribution;
use crate::distill::Stage2Config;
use crate::error::{io_err, Error, Result};
use crate::flowmap::Stage1Config;
use crate::metrics::EvalConfig;
use crate::nets::NetConfig;
use crate::optim::AdamWConfig;
use crate::teacher::TeacherConfig;

/// Extra runs and probes behind the verdicts file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksConfig {
    pub composition_triples: usize,
    /// Euler budget of the teacher reference.
    pub teacher_reference_nfe: usize,
    /// Train the zero-init conditioning variant for the embedding-norm check.
    pub conditioning: bool,
    /// Training seeds per loss-weight variant; 0 skips the check.
    pub w_t_seeds: usize,
    pub drift_steps: Vec<usize>,
    pub drift_samples: usize,
    pub drift_substeps: usize,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        Self {
            composition_triples: 1000,
            teacher_reference_nfe: 50,
            conditioning: true,
            w_t_seeds: 3,
            drift_steps: vec![1, 2, 4, 8, 16, 32],
            drift_samples: 1000,
            drift_substeps: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: ToyDistribution,
    pub net: NetConfig,
    pub teacher: TeacherConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub consistency: ConsistencyConfig,
    pub eval: EvalConfig,
    pub checks: ChecksConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "ring".into(),
            seed: 0,
            dataset: ToyDistribution::default_ring(),
            net: NetConfig {
                hidden: vec![128; 3],
                freq_max: 30.0,
                ..NetConfig::default()
            },
            teacher: TeacherConfig {
                steps: 5000,
                ..TeacherConfig::default()
            },
            stage1: Stage1Config {
                steps: 3000,
                optim: AdamWConfig::default().with_lr(2e-4),
                ..Stage1Config::default()
            },
            stage2: Stage2Config::default(),
            consistency: ConsistencyConfig::default(),
            eval: EvalConfig::default(),
            checks: ChecksConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// A seconds-scale configuration for smoke tests and determinism checks.
    pub fn tiny() -> Self {
        let base = Self::default();
        Self {
            name: "tiny".into(),
            net: NetConfig {
                hidden: vec![32; 2],
                time_features: 16,
                time_hidden: 32,
                time_embed_dim: 16,
                class_embed_dim: 4,
                ..base.net.clone()
            },
            teacher: TeacherConfig {
                steps: 60,
                batch: 64,
                log_every: 20,
                val_batch: 128,
                ..base.teacher.clone()
            },
            stage1: Stage1Config {
                steps: 40,
                batch: 64,
                log_every: 10,
                ..base.stage1.clone()
            },
            stage2: Stage2Config {
                steps: 20,
                rollout_batch: 32,
                fake_warmup: 5,
                log_every: 5,
                ..base.stage2.clone()
            },
            consistency: ConsistencyConfig {
                pool_size: 128,
                pool_steps: 8,
                init_steps: 30,
                init_batch: 64,
                sim_steps: 10,
                rollout_batch: 32,
                fake_warmup: 5,
                log_every: 10,
                ..base.consistency.clone()
            },
            eval: EvalConfig {
                n_samples: 400,
                n_proj: 16,
                seeds: 2,
                kernel_subsample: 100,
                nfes: vec![1, 2, 4, 32],
                ..base.eval.clone()
            },
            checks: ChecksConfig {
                composition_triples: 100,
                w_t_seeds: 1,
                drift_steps: vec![1, 4],
                drift_samples: 50,
                drift_substeps: 2,
                ..base.checks.clone()
            },
            ..base
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(io_err(&path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.as_ref().display())),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_toml()?).map_err(io_err(path))
    }

    pub fn validate(&self) -> Result<()> {
        let config_err = |e: Error| Error::Config(e.to_string());
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Config(format!("seed {} does not fit a TOML integer", self.seed)));
        }
        self.dataset.validate().map_err(config_err)?;
        self.net.validate().map_err(config_err)?;
        if self.net.data_dim != self.dataset.dim() {
            return Err(Error::Config(format!(
                "net.data_dim = {} but the dataset is {}-dimensional",
                self.net.data_dim,
                self.dataset.dim()
            )));
        }
        if self.net.class_count != self.dataset.class_count {
            return Err(Error::Config(format!(
                "net.class_count = {} but the dataset has {} classes",
                self.net.class_count, self.dataset.class_count
            )));
        }
        self.stage1.validate().map_err(config_err)?;
        self.stage2.validate().map_err(config_err)?;
        self.consistency.validate().map_err(config_err)?;
        if self.eval.nfes.is_empty() || self.eval.seeds == 0 || self.eval.n_samples == 0 {
            return Err(Error::Config("eval needs budgets, seeds and samples".into()));
        }
        if self.eval.nfes.contains(&0) || self.checks.drift_steps.contains(&0) {
            return Err(Error::Config("step budgets must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for config in [ExperimentConfig::default(), ExperimentConfig::tiny()] {
            let text = config.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), config);
        }
    }

    #[test]
    fn missing_sections_take_defaults() {
        let config = ExperimentConfig::from_toml("seed = 7\n[stage2]\ns_max = 8\n").unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.stage2.s_max, 8);
        assert_eq!(config.stage1, ExperimentConfig::default().stage1);
    }

    #[test]
    fn rejects_unknown_and_inconsistent_settings() {
        for text in [
            "sed = 1\n",
            "[stage1]\nbatchsize = 3\n",
            "[net]\ndata_dim = 3\n",
            "[stage2]\nrenoise = [0.5, 0.1]\n",
            "[eval]\nnfes = []\n",
            "[checks]\ndrift_steps = [0]\n",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
        let config = ExperimentConfig {
            seed: u64::MAX,
            ..ExperimentConfig::tiny()
        };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }
}
