//! Helpers shared by the integration tests: central differences, small
//! fixtures and brute-force reference implementations.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use passage_distill::autograd::Tape;
use passage_distill::encoder::{init_encoder, Encoder, EncoderConfig, Role};
use passage_distill::text::{QueryGroup, TokenSequence, CLS, PAD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let keep = x[i];
            x[i] = keep + h;
            let up = f(&x);
            x[i] = keep - h;
            let down = f(&x);
            x[i] = keep;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), with a floor so two near-zero vectors compare equal.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-7)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn seq(ids: &[u32], max_len: usize) -> TokenSequence {
    let mut v = ids.to_vec();
    let length = v.len();
    v.resize(max_len, PAD);
    TokenSequence { ids: v, length }
}

/// Random sequence of real ids in `[CLS + 2, vocab)` with length in `1..=max_len`.
pub fn random_seq(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> TokenSequence {
    let len = rng.random_range(1..=max_len);
    let ids: Vec<u32> = (0..len).map(|_| rng.random_range(CLS + 2..vocab as u32)).collect();
    seq(&ids, max_len)
}

pub fn tiny_config(vocab: usize, max_position: usize, seed: u64) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab,
        hidden_dim: 8,
        num_layers: 1,
        num_heads: 1,
        feedforward_dim: 8,
        max_position,
        dropout_rate: 0.0,
        seed,
    }
}

pub fn tiny_pair(vocab: usize, lens: (usize, usize), seed: u64) -> (Encoder, Encoder) {
    let (q, d) = lens;
    let r = init_encoder(tiny_config(vocab, q.max(d) + 2, seed), Role::Retriever).unwrap();
    let k = init_encoder(tiny_config(vocab, q + d + 3, seed + 1), Role::Ranker).unwrap();
    (r, k)
}

pub fn random_group(rng: &mut ChaCha8Rng, vocab: usize, lens: (usize, usize), n: usize) -> QueryGroup {
    QueryGroup {
        query_id: "Q".into(),
        query: random_seq(rng, vocab, lens.0),
        docs: (0..n).map(|_| random_seq(rng, vocab, lens.1)).collect(),
        doc_ids: (0..n).map(|i| format!("D{i}")).collect(),
        pos_idx: 0,
    }
}

/// Flattened parameters of an encoder.
pub fn flat_params(e: &Encoder) -> Vec<f64> {
    e.params().iter().flat_map(|p| p.value.iter().copied()).collect()
}

pub fn set_flat_params(e: &mut Encoder, x: &[f64]) {
    let mut it = x.iter();
    for p in e.params_mut() {
        p.value.iter_mut().for_each(|v| *v = *it.next().expect("enough values"));
    }
}

/// Scalar probe of an encoder: Σ hidden ⊙ W over every position, plus the
/// rank head for rankers. Returns value and analytic parameter gradient.
pub fn encoder_probe(e: &Encoder, ids: &[Vec<u32>], w: &Array2<f64>) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let params = e.bind(&mut tape, true);
    let fwd = e.forward(&mut tape, &params, ids, None).unwrap();
    let h = tape.value(fwd.hidden).clone();
    let hv = (&h * w).sum();
    let hnode = tape.scalar_fn(fwd.hidden, hv, w.clone());
    let root = if e.role() == Role::Ranker {
        let head = e.rank_head(&mut tape, &params, &fwd).unwrap();
        let hvals = tape.value(head).clone();
        let sv = hvals.sum();
        let s = tape.scalar_fn(head, sv, Array2::ones(hvals.dim()));
        tape.weighted_sum(vec![(hnode, 1.0), (s, 1.0)])
    } else {
        hnode
    };
    let value = tape.scalar(root);
    let grads = tape.backward(root);
    let g = params
        .vars
        .iter()
        .zip(e.params())
        .flat_map(|(&v, p)| match grads.get(v) {
            Some(g) => g.iter().copied().collect::<Vec<_>>(),
            None => vec![0.0; p.value.len()],
        })
        .collect();
    (value, g)
}

pub fn encoder_probe_value(e: &Encoder, ids: &[Vec<u32>], w: &Array2<f64>) -> f64 {
    encoder_probe(e, ids, w).0
}

/// Brute-force MRR@k: walk each ranked list, stop at the first relevant doc.
pub fn oracle_mrr(run: &BTreeMap<String, Vec<String>>, qrels: &BTreeMap<String, HashSet<String>>, k: usize) -> f64 {
    let mut total = 0.0;
    for (q, docs) in run {
        let rel = &qrels[q];
        for (rank, d) in docs.iter().enumerate() {
            if rank >= k {
                break;
            }
            if rel.contains(d) {
                total += 1.0 / (rank as f64 + 1.0);
                break;
            }
        }
    }
    total / run.len() as f64
}

/// Brute-force macro Recall@k.
pub fn oracle_recall(run: &BTreeMap<String, Vec<String>>, qrels: &BTreeMap<String, HashSet<String>>, k: usize) -> f64 {
    let mut total = 0.0;
    for (q, docs) in run {
        let rel = &qrels[q];
        let mut hit = 0usize;
        for d in docs.iter().take(k) {
            if rel.contains(d) {
                hit += 1;
            }
        }
        total += hit as f64 / rel.len() as f64;
    }
    total / run.len() as f64
}

/// Masked indices by direct comparison against the positive's raw score.
pub fn oracle_fn_mask(scores: &[f64], pos: usize) -> Vec<bool> {
    scores.iter().enumerate().map(|(i, &s)| i != pos && s > scores[pos]).collect()
}

/// Full-sort top-k with ascending-id tie-break.
pub fn oracle_top_k(scores: &[f64], ids: &[String], k: usize) -> Vec<String> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then_with(|| ids[a].cmp(&ids[b])));
    order.into_iter().take(k).map(|i| ids[i].clone()).collect()
}
