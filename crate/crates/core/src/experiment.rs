//! End-to-end desk-scale runs on the synthetic corpus: generate, split,
//! tokenize, train one mode, report held-out MRR@10.

use serde::{Deserialize, Serialize};

use crate::encoder::{init_encoder, Encoder, EncoderConfig, Role};
use crate::error::Result;
use crate::text::{
    build_train_groups, build_vocab, gen_synthetic, tokenize, DocumentStore, QueryGroup, QuerySet, Qrels, SeqLens, SyntheticData,
    SyntheticSpec, Vocabulary,
};
use crate::train::{fit, FitOutput, HeldOut, Mode, TrainConfig};

/// Fixed offsets deriving per-stage seeds from one master seed.
pub mod seed_offset {
    pub const DATA: u64 = 0;
    pub const GROUPS: u64 = 1;
    pub const RETRIEVER: u64 = 2;
    pub const RANKER: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const LATENCY: u64 = 5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderShape {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderShape {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_layers: 1,
            num_heads: 2,
            feedforward_dim: 64,
            dropout_rate: 0.0,
        }
    }
}

impl EncoderShape {
    pub fn config(&self, vocab_size: usize, max_position: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            feedforward_dim: self.feedforward_dim,
            max_position,
            dropout_rate: self.dropout_rate,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskExperiment {
    pub num_docs: usize,
    pub train_queries: usize,
    pub heldout_queries: usize,
    pub vocab_size: usize,
    pub doc_len: usize,
    pub query_len: usize,
    pub retriever: EncoderShape,
    pub ranker: EncoderShape,
    pub train: TrainConfig,
}

impl Default for DeskExperiment {
    fn default() -> Self {
        let tiny = EncoderShape::default();
        Self {
            num_docs: 2000,
            train_queries: 200,
            heldout_queries: 50,
            vocab_size: 400,
            doc_len: 8,
            query_len: 4,
            retriever: tiny.clone(),
            ranker: tiny,
            train: TrainConfig::default(),
        }
    }
}

/// Everything a run needs, derived deterministically from the master seed.
pub struct Prepared {
    pub data: SyntheticData,
    pub vocab: Vocabulary,
    pub lens: SeqLens,
    pub train_groups: Vec<QueryGroup>,
    pub heldout: HeldOut,
}

impl DeskExperiment {
    pub fn lens(&self) -> SeqLens {
        SeqLens {
            query: self.query_len,
            doc: self.doc_len,
        }
    }

    pub fn prepare(&self, seed: u64) -> Result<Prepared> {
        let data = gen_synthetic(&SyntheticSpec {
            num_docs: self.num_docs,
            num_queries: self.train_queries + self.heldout_queries,
            vocab_size: self.vocab_size,
            doc_len: self.doc_len,
            query_len: self.query_len,
            seed: seed + seed_offset::DATA,
        })?;
        let ids: Vec<String> = data.queries.iter().map(|(q, _)| q.to_string()).collect();
        let (train_ids, held_ids) = ids.split_at(self.train_queries);
        let train_q = data.queries.subset(train_ids)?;
        let held_q = data.queries.subset(held_ids)?;
        // vocabulary from the corpus and training queries only
        let texts: Vec<&str> = train_q.iter().map(|(_, t)| t).collect();
        let vocab = build_vocab(&data.store, &texts, 1)?;
        let lens = self.lens();
        let train_groups = build_train_groups(
            &train_q,
            &data.qrels,
            &data.store,
            &vocab,
            lens,
            self.train.group_size,
            seed + seed_offset::GROUPS,
        )?;
        let heldout = heldout_set(&held_q, &data.qrels, &data.store, &vocab, lens);
        Ok(Prepared {
            data,
            vocab,
            lens,
            train_groups,
            heldout,
        })
    }

    pub fn run(&self, prepared: &Prepared, mode: Mode, seed: u64) -> Result<FitOutput> {
        let (retriever, ranker) = init_pair(&self.retriever, &self.ranker, prepared.vocab.size(), prepared.lens, seed)?;
        let config = TrainConfig {
            mode,
            seed: seed + seed_offset::TRAIN,
            ..self.train.clone()
        };
        fit(&config, retriever, ranker, &prepared.train_groups, Some(&prepared.heldout), None)
    }
}

/// Fresh retriever and ranker sized for `lens`, seeded by the master seed.
pub fn init_pair(retriever: &EncoderShape, ranker: &EncoderShape, vocab_size: usize, lens: SeqLens, seed: u64) -> Result<(Encoder, Encoder)> {
    let r = init_encoder(
        retriever.config(vocab_size, lens.query.max(lens.doc) + 2, seed + seed_offset::RETRIEVER),
        Role::Retriever,
    )?;
    let k = init_encoder(ranker.config(vocab_size, lens.query + lens.doc + 3, seed + seed_offset::RANKER), Role::Ranker)?;
    Ok((r, k))
}

/// Held-out queries ranked against the whole corpus.
pub fn heldout_set(queries: &QuerySet, qrels: &Qrels, store: &DocumentStore, vocab: &Vocabulary, lens: SeqLens) -> HeldOut {
    HeldOut {
        queries: queries.iter().map(|(q, t)| (q.to_string(), tokenize(t, vocab, lens.query))).collect(),
        qrels: qrels.clone(),
        doc_ids: store.doc_ids.clone(),
        docs: store.texts.iter().map(|t| tokenize(t, vocab, lens.doc)).collect(),
    }
}

/// `n` distinct indices out of `total`, in ascending order, chosen by `seed`.
pub fn select_indices(total: usize, n: usize, seed: u64) -> Vec<usize> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, total, n.min(total)).into_vec();
    picked.sort_unstable();
    picked
}
