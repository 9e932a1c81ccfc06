//! Training run configuration: one flat JSON file, unknown keys
//! rejected, every validation failure reported at once.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use capforge_core::encoder::EncoderDims;
use capforge_core::model::ModelConfig;
use capforge_core::reconstructor::PoolTag;
use capforge_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default = "d_checkpoint")]
    pub checkpoint: PathBuf,
    #[serde(default = "d_train_log")]
    pub train_log: PathBuf,
    /// Samples held out from the end of the dataset for validation.
    #[serde(default = "d_val_count")]
    pub val_count: usize,
    #[serde(default = "d_c1")]
    pub c1: usize,
    #[serde(default = "d_c2")]
    pub c2: usize,
    #[serde(default = "d_d_v")]
    pub d_v: usize,
    #[serde(default = "d_d_e")]
    pub d_e: usize,
    #[serde(default = "d_d_h")]
    pub d_h: usize,
    #[serde(default = "d_pooling")]
    pub pooling: PoolTag,
    #[serde(default = "d_vocab_min_count")]
    pub vocab_min_count: usize,
    #[serde(default = "d_vocab_max_size")]
    pub vocab_max_size: usize,
    #[serde(default = "d_lambda_recon")]
    pub lambda_recon: f64,
    #[serde(default = "d_k_similar")]
    pub k_similar: usize,
    #[serde(default = "d_attr_weight")]
    pub attr_weight: f64,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_max_caption_len")]
    pub max_caption_len: usize,
    #[serde(default)]
    pub first_caption_only: bool,
}

fn d_checkpoint() -> PathBuf {
    PathBuf::from("model.ckpt")
}
fn d_train_log() -> PathBuf {
    PathBuf::from("train_log.json")
}
fn d_val_count() -> usize {
    8
}
fn d_c1() -> usize {
    6
}
fn d_c2() -> usize {
    12
}
fn d_d_v() -> usize {
    48
}
fn d_d_e() -> usize {
    32
}
fn d_d_h() -> usize {
    64
}
fn d_pooling() -> PoolTag {
    PoolTag::Mean
}
fn d_vocab_min_count() -> usize {
    1
}
fn d_vocab_max_size() -> usize {
    1000
}
fn d_lambda_recon() -> f64 {
    1.0
}
fn d_k_similar() -> usize {
    5
}
fn d_attr_weight() -> f64 {
    1.0
}
fn d_learning_rate() -> f64 {
    2e-4
}
fn d_batch_size() -> usize {
    16
}
fn d_max_epochs() -> usize {
    30
}
fn d_patience() -> usize {
    5
}
fn d_seed() -> u64 {
    7
}
fn d_max_caption_len() -> usize {
    16
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&raw)
            .with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)
            .with_context(|| format!("writing config {}", path.display()))?;
        Ok(())
    }

    /// Every violated constraint, not just the first; empty means valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        if !(self.lambda_recon >= 0.0) || !self.lambda_recon.is_finite() {
            out.push("lambda_recon must be finite and >= 0".into());
        }
        if !(self.attr_weight >= 0.0) || !self.attr_weight.is_finite() {
            out.push("attr_weight must be finite and >= 0".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            out.push("learning_rate must be finite and >= 0".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            out.push("max_epochs must be >= 1".into());
        }
        if self.val_count == 0 {
            out.push("val_count must be >= 1".into());
        }
        for (name, v) in [
            ("c1", self.c1),
            ("c2", self.c2),
            ("d_v", self.d_v),
            ("d_e", self.d_e),
            ("d_h", self.d_h),
        ] {
            if v == 0 {
                out.push(format!("{name} must be >= 1"));
            }
        }
        if self.max_caption_len < 3 {
            out.push("max_caption_len must be >= 3 (room for BOS, a word, EOS)".into());
        }
        if self.vocab_max_size < 5 {
            out.push("vocab_max_size must be >= 5 (4 reserved ids + content)".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            return Ok(());
        }
        anyhow::bail!("invalid config:\n  - {}", problems.join("\n  - "));
    }

    /// Dims that come from the data (grid, d_a, vocab size) are supplied
    /// by the caller once the dataset has been read.
    pub fn train_config(&self, grid: usize, d_a: usize, vocab: usize) -> TrainConfig {
        let model = ModelConfig {
            encoder: EncoderDims {
                grid,
                c1: self.c1,
                c2: self.c2,
                d_v: self.d_v,
                d_a,
            },
            vocab,
            d_e: self.d_e,
            d_h: self.d_h,
            pooling: self.pooling,
        };
        let mut cfg = TrainConfig::new(model);
        cfg.lambda_recon = self.lambda_recon;
        cfg.k_similar = self.k_similar;
        cfg.attr_weight = self.attr_weight;
        cfg.learning_rate = self.learning_rate;
        cfg.batch_size = self.batch_size;
        cfg.max_epochs = self.max_epochs;
        cfg.patience = self.patience;
        cfg.seed = self.seed;
        cfg.first_caption_only = self.first_caption_only;
        cfg.max_caption_len = self.max_caption_len;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunConfig {
        serde_json::from_str(r#"{"dataset": "corpus.jsonl"}"#).unwrap()
    }

    #[test]
    fn defaults_fill_everything_but_the_dataset() {
        let cfg = minimal();
        assert_eq!(cfg.dataset, PathBuf::from("corpus.jsonl"));
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.max_epochs, 30);
        assert_eq!(cfg.lambda_recon, 1.0);
        assert_eq!(cfg.pooling, PoolTag::Mean);
        assert!(!cfg.first_caption_only);
        assert!(cfg.problems().is_empty());
    }

    #[test]
    fn file_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut cfg = minimal();
        cfg.lambda_recon = 0.5;
        cfg.pooling = PoolTag::Max;
        cfg.seed = 99;
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = serde_json::from_str::<RunConfig>(
            r#"{"dataset": "d.jsonl", "learning_rte": 0.1}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("learning_rte"), "{err}");
    }

    #[test]
    fn missing_dataset_is_an_error() {
        assert!(serde_json::from_str::<RunConfig>("{}").is_err());
    }

    #[test]
    fn all_violations_are_listed_at_once() {
        let mut cfg = minimal();
        cfg.lambda_recon = -1.0;
        cfg.batch_size = 0;
        cfg.d_h = 0;
        cfg.max_caption_len = 2;
        let problems = cfg.problems();
        assert_eq!(problems.len(), 4, "{problems:?}");
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("lambda_recon"), "{err}");
        assert!(err.contains("batch_size"), "{err}");
        assert!(err.contains("d_h"), "{err}");
        assert!(err.contains("max_caption_len"), "{err}");
    }

    #[test]
    fn train_config_carries_every_knob() {
        let mut cfg = minimal();
        cfg.lambda_recon = 2.0;
        cfg.k_similar = 3;
        cfg.learning_rate = 1e-3;
        cfg.patience = 2;
        cfg.seed = 5;
        cfg.first_caption_only = true;
        let t = cfg.train_config(16, 8, 31);
        assert_eq!(t.model.encoder.grid, 16);
        assert_eq!(t.model.encoder.d_a, 8);
        assert_eq!(t.model.vocab, 31);
        assert_eq!(t.lambda_recon, 2.0);
        assert_eq!(t.k_similar, 3);
        assert_eq!(t.learning_rate, 1e-3);
        assert_eq!(t.patience, 2);
        assert_eq!(t.seed, 5);
        assert!(t.first_caption_only);
        assert!(t.validate().is_ok());
    }
}
