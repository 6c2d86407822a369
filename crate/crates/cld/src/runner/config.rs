//! JSON run configuration: strict parsing (unknown keys are errors),
//! documented defaults, and validation with key-named messages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::SpectralEnd;
use crate::contrast::ContrastConfig;
use crate::datagen::AugmentConfig;
use crate::encoder::Architecture;
use crate::error::{CldError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
    Step { milestones: Vec<usize>, factor: f64 },
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::default(),
        }
    }
}

/// How the run obtains its dataset: a CLD1 file path, CIFAR-10 batch
/// files, or a synthetic generator spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Path(String),
    Cifar10 { batches: Vec<String> },
    Mixture {
        classes: usize,
        per_class: usize,
        dim: usize,
        sep: f64,
        #[serde(default)]
        longtail_rho: Option<f64>,
        seed: u64,
    },
    Correlated {
        classes: usize,
        groups_per_class: usize,
        views_per_group: usize,
        dim: usize,
        sep: f64,
        corr_sigma: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    Kmeans,
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Dataset source; required for `train`, optional for in-process use.
    pub data: Option<DataSource>,
    pub arch: Architecture,
    pub contrast: ContrastConfig,
    pub augment: AugmentConfig,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Memory-bank momentum m in v <- normalize(m v + (1-m) f).
    pub bank_momentum: f64,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 means only after training.
    pub eval_every: usize,
    pub out_dir: Option<String>,
    pub clustering: ClusterMethod,
    pub spectral_end: SpectralEnd,
    /// kNN evaluation parameters.
    pub knn_k: usize,
    pub knn_temperature: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data: None,
            arch: Architecture::default(),
            contrast: ContrastConfig::default(),
            augment: AugmentConfig {
                noise_sigma: 0.5,
                ..AugmentConfig::default()
            },
            optim: OptimConfig::default(),
            batch_size: 128,
            epochs: 40,
            bank_momentum: 0.5,
            seed: 1,
            eval_every: 0,
            out_dir: None,
            clustering: ClusterMethod::Kmeans,
            spectral_end: SpectralEnd::Smallest,
            knn_k: crate::metrics::KNN_DEFAULT_K,
            knn_temperature: crate::metrics::KNN_DEFAULT_TEMPERATURE,
        }
    }
}

/// Parse a JSON config; unknown keys and constraint violations are errors
/// naming the offending key.
pub fn parse_config(text: &str) -> Result<Config> {
    let config: Config = serde_json::from_str(text).map_err(|e| CldError::InvalidConfig {
        key: "json".to_string(),
        msg: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config<P: AsRef<Path>>(path: P) -> Result<Config> {
    parse_config(&std::fs::read_to_string(path)?)
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(CldError::InvalidConfig {
                key: key.to_string(),
                msg: msg.to_string(),
            })
        };
        self.contrast.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if !(self.optim.lr > 0.0) {
            return bad("optim.lr", "must be > 0");
        }
        if !(0.0..=1.0).contains(&self.optim.momentum) {
            return bad("optim.momentum", "must be in [0, 1]");
        }
        if !(self.optim.weight_decay >= 0.0) {
            return bad("optim.weight_decay", "must be >= 0");
        }
        if let Schedule::Step { factor, .. } = self.optim.schedule {
            if !(factor > 0.0) {
                return bad("optim.schedule.factor", "must be > 0");
            }
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return bad("bank_momentum", "must be in [0, 1]");
        }
        if let Some(k) = self.contrast.k_groups {
            if k > self.batch_size {
                return bad("contrast.k_groups", "must be <= batch_size");
            }
        }
        if self.knn_k == 0 {
            return bad("knn_k", "must be >= 1");
        }
        if !(self.knn_temperature > 0.0) {
            return bad("knn_temperature", "must be > 0");
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gets_documented_defaults() {
        let c = parse_config("{}").unwrap();
        assert_eq!(c.contrast.lambda, 0.25);
        assert_eq!(c.contrast.t_i, 0.2);
        assert_eq!(c.contrast.t_g, 0.2);
        assert_eq!(c.bank_momentum, 0.5);
        assert_eq!(c.contrast.num_negatives, None);
        // clamp rule resolves against a concrete dataset size
        assert_eq!(c.contrast.resolved_negatives(512), 511);
        assert_eq!(c.contrast.resolved_negatives(10_000), 4096);
        assert_eq!(c.contrast.resolved_k_groups(c.batch_size), c.batch_size / 2);
    }

    #[test]
    fn negative_lambda_is_rejected_by_name() {
        let err = parse_config(r#"{"contrast": {"lambda": -1.0}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lambda"), "{msg}");
        assert!(msg.contains(">= 0"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(parse_config(r#"{"lamda": 0.5}"#).is_err());
        assert!(parse_config(r#"{"contrast": {"t_x": 0.1}}"#).is_err());
    }

    #[test]
    fn round_trip_preserves_equality() {
        let c = parse_config(
            r#"{
                "data": {"mixture": {"classes": 4, "per_class": 32, "dim": 16, "sep": 6.0, "seed": 5}},
                "contrast": {"lambda": 0.1, "num_negatives": 63},
                "optim": {"lr": 0.05, "schedule": {"step": {"milestones": [10, 20], "factor": 0.2}}},
                "batch_size": 64,
                "epochs": 3
            }"#,
        )
        .unwrap();
        let text = c.to_json_string();
        let reparsed = parse_config(&text).unwrap();
        assert_eq!(c, reparsed);
    }

    #[test]
    fn constraint_violations_name_keys() {
        for (snippet, key) in [
            (r#"{"batch_size": 0}"#, "batch_size"),
            (r#"{"epochs": 0}"#, "epochs"),
            (r#"{"optim": {"lr": 0.0}}"#, "optim.lr"),
            (r#"{"contrast": {"t_i": -0.2}}"#, "t_i"),
            (r#"{"bank_momentum": 1.5}"#, "bank_momentum"),
            (r#"{"batch_size": 4, "contrast": {"k_groups": 8}}"#, "k_groups"),
        ] {
            let err = parse_config(snippet).unwrap_err();
            assert!(err.to_string().contains(key), "{snippet} -> {err}");
            assert_eq!(err.exit_code(), 1);
        }
    }
}
