//! Dense passage retrieval with a dual-encoder retriever distilled from a
//! jointly trained cross-encoder ranker.
//!
//! The ranker supplies two kinds of targets: a relevance distribution over
//! each query's candidates (sentence level) and its layer/head-averaged
//! query↔document attention (word level). Candidates the ranker scores above
//! the labelled positive are treated as false negatives and dropped from the
//! retriever's losses. At inference only the retriever is used: documents are
//! embedded once and searched exactly by dot product.

pub mod autograd;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod filter;
pub mod index;
pub mod losses;
pub mod text;
pub mod train;

pub use encoder::{init_encoder, Encoder, EncoderConfig, Role};
pub use error::{Error, Result};
pub use train::{fit, Mode, TrainConfig};
