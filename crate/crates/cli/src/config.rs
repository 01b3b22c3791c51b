//! TOML run configuration. Every key has a built-in default; flags override
//! file values, and `PDISTILL_SEED` overrides the master seed from the file.

use std::path::{Path, PathBuf};

use passage_distill::experiment::EncoderShape;
use passage_distill::index::Similarity;
use passage_distill::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "PDISTILL_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub eval: EvalConfig,
    pub latency: LatencyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub num_docs: usize,
    pub train_queries: usize,
    pub heldout_queries: usize,
    pub vocab_size: usize,
    pub doc_len: usize,
    pub query_len: usize,
    pub min_freq: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            num_docs: 2000,
            train_queries: 200,
            heldout_queries: 50,
            vocab_size: 400,
            doc_len: 8,
            query_len: 4,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dir: PathBuf,
    pub retriever: EncoderShape,
    pub ranker: EncoderShape,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("model"),
            retriever: EncoderShape::default(),
            ranker: EncoderShape::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub k: usize,
    pub similarity: Similarity,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k: 100,
            similarity: Similarity::Dot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec!["MRR@10".into(), "R@10".into(), "R@100".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub queries: usize,
    pub repetitions: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            queries: 100,
            repetitions: 5,
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            None => FileConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        }
        Ok(cfg)
    }
}
