//! Pre-norm transformer encoder and its two wrappers: the dual-encoder
//! retriever (CLS pooling, dot-product scoring) and the cross-encoder ranker
//! (joint input, linear relevance head, attention export).
//!
//! Parameter count for `V` vocab, `P` positions, width `d`, feed-forward
//! width `f` and `L` layers:
//!
//! ```text
//! embeddings:  V·d + P·d
//! per layer:   4·d² + 4·d  (Q, K, V, O projections with bias)
//!            + 2·d·f + f + d  (feed-forward)
//!            + 4·d  (two layer norms)
//! final norm:  2·d
//! ranker head: d + 1
//! ```

use std::cell::Cell;
use std::ops::Range;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::text::{TokenSequence, CLS, PAD, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub max_position: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, width 64.
    pub fn small(vocab_size: usize, max_position: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            feedforward_dim: 128,
            max_position,
            dropout_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("feedforward_dim", self.feedforward_dim),
            ("max_position", self.max_position),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config("hidden_dim divisible by num_heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count (see module docs).
    pub fn parameter_count(&self, role: Role) -> usize {
        let (v, p, d, f, l) = (
            self.vocab_size,
            self.max_position,
            self.hidden_dim,
            self.feedforward_dim,
            self.num_layers,
        );
        let per_layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d;
        let head = match role {
            Role::Retriever => 0,
            Role::Ranker => d + 1,
        };
        v * d + p * d + l * per_layer + 2 * d + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Retriever,
    Ranker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

const PER_LAYER: usize = 16;

/// Parameter slots inside one layer, in storage order.
mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const BQ: usize = 3;
    pub const WK: usize = 4;
    pub const BK: usize = 5;
    pub const WV: usize = 6;
    pub const BV: usize = 7;
    pub const WO: usize = 8;
    pub const BO: usize = 9;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
    pub const W1: usize = 12;
    pub const B1: usize = 13;
    pub const W2: usize = 14;
    pub const B2: usize = 15;
}

/// Transformer encoder. All parameter values are kept exactly representable
/// as `f32` so checkpoints round-trip without loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    role: Role,
    config: EncoderConfig,
    params: Vec<Param>,
}

thread_local! {
    static RANKER_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of ranker forward passes made on the current thread.
pub fn ranker_invocations() -> u64 {
    RANKER_CALLS.with(Cell::get)
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn init_encoder(config: EncoderConfig, role: Role) -> Result<Encoder> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.hidden_dim;
    let f = config.feedforward_dim;
    let mut params = Vec::new();
    let mut normal = |name: String, rows: usize, cols: usize, std: f64, params: &mut Vec<Param>| {
        let dist = Normal::new(0.0, std).expect("positive std");
        let value = Array2::from_shape_simple_fn((rows, cols), || round_f32(dist.sample(&mut rng)));
        params.push(Param { name, value });
    };
    let constant = |name: String, cols: usize, v: f64, params: &mut Vec<Param>| {
        params.push(Param {
            name,
            value: Array2::from_elem((1, cols), v),
        });
    };
    normal("embed.token".into(), config.vocab_size, d, 1.0, &mut params);
    normal("embed.position".into(), config.max_position, d, 0.1, &mut params);
    let wstd = 1.0 / (d as f64).sqrt();
    for l in 0..config.num_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        constant(p("ln1.gamma"), d, 1.0, &mut params);
        constant(p("ln1.beta"), d, 0.0, &mut params);
        for w in ["q", "k", "v", "o"] {
            normal(p(&format!("attn.w{w}")), d, d, wstd, &mut params);
            constant(p(&format!("attn.b{w}")), d, 0.0, &mut params);
        }
        constant(p("ln2.gamma"), d, 1.0, &mut params);
        constant(p("ln2.beta"), d, 0.0, &mut params);
        normal(p("ffn.w1"), d, f, wstd, &mut params);
        constant(p("ffn.b1"), f, 0.0, &mut params);
        normal(p("ffn.w2"), f, d, 1.0 / (f as f64).sqrt(), &mut params);
        constant(p("ffn.b2"), d, 0.0, &mut params);
    }
    constant("final_ln.gamma".into(), d, 1.0, &mut params);
    constant("final_ln.beta".into(), d, 0.0, &mut params);
    if role == Role::Ranker {
        normal("head.weight".into(), d, 1, wstd, &mut params);
        constant("head.bias".into(), 1, 0.0, &mut params);
    }
    Ok(Encoder { role, config, params })
}

/// Encoder output for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Last-layer hidden states, `[seq_len × hidden_dim]`.
    pub hidden: Array2<f64>,
    /// `attentions[layer * num_heads + head]`, each `[seq_len × seq_len]`.
    pub attentions: Vec<Array2<f64>>,
    pub cls: Vec<f64>,
}


/// The concatenated `[CLS] q [SEP] d [SEP]` input of the ranker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossInput {
    pub ids: Vec<u32>,
    pub query_span: Range<usize>,
    pub doc_span: Range<usize>,
}

impl CrossInput {
    pub fn new(query: &TokenSequence, doc: &TokenSequence) -> Self {
        let padded = query.max_len() + doc.max_len() + 3;
        let mut ids = Vec::with_capacity(padded);
        ids.push(CLS);
        ids.extend_from_slice(query.real());
        ids.push(SEP);
        ids.extend_from_slice(doc.real());
        ids.push(SEP);
        let q0 = 1;
        let d0 = q0 + query.length + 1;
        ids.resize(padded, PAD);
        Self {
            ids,
            query_span: q0..q0 + query.length,
            doc_span: d0..d0 + doc.length,
        }
    }

    /// Real length including the three special tokens.
    pub fn real_len(&self) -> usize {
        self.doc_span.end + 1
    }
}

/// Layout of a retriever input: `[CLS] tokens [SEP]` then padding.
pub fn retriever_ids(seq: &TokenSequence) -> Vec<u32> {
    let mut ids = Vec::with_capacity(seq.max_len() + 2);
    ids.push(CLS);
    ids.extend_from_slice(seq.real());
    ids.push(SEP);
    ids.resize(seq.max_len() + 2, PAD);
    ids
}

/// Positions of real (non-special, non-PAD) tokens in a retriever input.
pub fn retriever_token_rows(seq: &TokenSequence) -> Range<usize> {
    1..1 + seq.length
}

/// Encoder parameters registered on a tape.
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Handle to a forward pass recorded on a tape.
pub struct Forward {
    /// Stacked hidden states, `[batch · seq_len × hidden_dim]`.
    pub hidden: Var,
    pub attention_nodes: Vec<Var>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Forward {
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq_len).collect()
    }
}

/// Dropout source for training-mode passes; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

impl Encoder {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn from_parts(role: Role, config: EncoderConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let expected = init_shapes(&config, role);
        if expected.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if name != &p.name || *shape != p.value.dim() {
                return Err(Error::Shape(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name,
                    p.value.dim()
                )));
            }
        }
        Ok(Self { role, config, params })
    }

    /// FNV-1a over the parameter bit patterns; a cheap identity check.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.value.iter() {
                for b in (*v as f32).to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    fn check_ids(&self, ids: &[Vec<u32>], seq_len: usize) -> Result<()> {
        if seq_len > self.config.max_position {
            return Err(Error::Invalid(format!(
                "sequence length {seq_len} exceeds max_position {}; truncate inputs upstream",
                self.config.max_position
            )));
        }
        for row in ids {
            if row.len() != seq_len {
                return Err(Error::Shape("all sequences in a batch must share max_len".into()));
            }
            if let Some(&bad) = row.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(Error::Invalid(format!(
                    "token id {bad} out of range for vocab_size {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Records a forward pass over equal-length id rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        ids: &[Vec<u32>],
        mut dropout: DropoutRng<'_>,
    ) -> Result<Forward> {
        let batch = ids.len();
        if batch == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let seq_len = ids[0].len();
        self.check_ids(ids, seq_len)?;
        let p = &params.vars;
        let flat: Vec<usize> = ids.iter().flatten().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq_len).collect();
        let key_valid: Vec<bool> = ids.iter().flatten().map(|&i| i != PAD).collect();

        let tok = tape.gather(p[0], flat);
        let pos = tape.gather(p[1], positions);
        let mut x = tape.add(tok, pos);
        x = self.maybe_dropout(tape, x, dropout.as_deref_mut());
        let mut attention_nodes = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let w = |s: usize| p[2 + l * PER_LAYER + s];
            let h = tape.layer_norm(x, w(slot::LN1_G), w(slot::LN1_B));
            let q = linear(tape, h, w(slot::WQ), w(slot::BQ));
            let k = linear(tape, h, w(slot::WK), w(slot::BK));
            let v = linear(tape, h, w(slot::WV), w(slot::BV));
            let layout = AttentionLayout {
                batch,
                seq_len,
                heads: self.config.num_heads,
                key_valid: key_valid.clone(),
            };
            let att = tape.attention(q, k, v, layout);
            attention_nodes.push(att);
            let o = linear(tape, att, w(slot::WO), w(slot::BO));
            let o = self.maybe_dropout(tape, o, dropout.as_deref_mut());
            x = tape.add(x, o);
            let h = tape.layer_norm(x, w(slot::LN2_G), w(slot::LN2_B));
            let f = linear(tape, h, w(slot::W1), w(slot::B1));
            let f = tape.gelu(f);
            let f = linear(tape, f, w(slot::W2), w(slot::B2));
            let f = self.maybe_dropout(tape, f, dropout.as_deref_mut());
            x = tape.add(x, f);
        }
        let base = 2 + self.config.num_layers * PER_LAYER;
        let hidden = tape.layer_norm(x, p[base], p[base + 1]);
        Ok(Forward {
            hidden,
            attention_nodes,
            batch,
            seq_len,
        })
    }

    fn maybe_dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
        let rate = self.config.dropout_rate;
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mask = tape
                    .value(x)
                    .mapv(|_| if rng.random::<f64>() < rate { 0.0 } else { keep });
                tape.dropout(x, mask)
            }
            _ => x,
        }
    }

    /// Relevance head over the CLS rows of a ranker forward pass, `[batch × 1]`.
    pub fn rank_head(&self, tape: &mut Tape, params: &BoundParams, fwd: &Forward) -> Result<Var> {
        if self.role != Role::Ranker {
            return Err(Error::Invalid("relevance head requested on a retriever".into()));
        }
        let base = 2 + self.config.num_layers * PER_LAYER + 2;
        let cls = tape.select_rows(fwd.hidden, fwd.cls_rows());
        Ok(linear(tape, cls, params.vars[base], params.vars[base + 1]))
    }

    /// Evaluation-mode encoding of retriever-layout sequences.
    pub fn encode(&self, batch: &[TokenSequence]) -> Result<Vec<EncoderOutput>> {
        let ids: Vec<Vec<u32>> = batch.iter().map(retriever_ids).collect();
        self.encode_ids(&ids)
    }

    /// Evaluation-mode encoding of already laid-out id rows.
    pub fn encode_ids(&self, ids: &[Vec<u32>]) -> Result<Vec<EncoderOutput>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &params, ids, None)?;
        Ok(collect_outputs(&tape, &fwd, self.config.num_heads))
    }

    /// CLS embeddings of retriever-layout sequences, evaluated in chunks.
    pub fn embed(&self, seqs: &[TokenSequence]) -> Result<Array2<f64>> {
        const CHUNK: usize = 128;
        let d = self.config.hidden_dim;
        let mut out = Array2::zeros((seqs.len(), d));
        for (c, chunk) in seqs.chunks(CHUNK).enumerate() {
            let ids: Vec<Vec<u32>> = chunk.iter().map(retriever_ids).collect();
            let mut tape = Tape::new();
            let params = self.bind(&mut tape, false);
            let fwd = self.forward(&mut tape, &params, &ids, None)?;
            let cls = tape.select_rows(fwd.hidden, fwd.cls_rows());
            out.slice_mut(ndarray::s![c * CHUNK..c * CHUNK + chunk.len(), ..])
                .assign(tape.value(cls));
        }
        Ok(out)
    }

    pub(crate) fn note_ranker_call(&self) {
        RANKER_CALLS.with(|c| c.set(c.get() + 1));
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_bias(y, b)
}

fn collect_outputs(tape: &Tape, fwd: &Forward, heads: usize) -> Vec<EncoderOutput> {
    let hidden = tape.value(fwd.hidden);
    (0..fwd.batch)
        .map(|b| {
            let rows = b * fwd.seq_len..(b + 1) * fwd.seq_len;
            let h = hidden.slice(ndarray::s![rows, ..]).to_owned();
            let mut attentions = Vec::new();
            for &node in &fwd.attention_nodes {
                let (_, probs) = tape.attention_probs(node).expect("attention node");
                for hd in 0..heads {
                    attentions.push(probs[b * heads + hd].clone());
                }
            }
            EncoderOutput {
                cls: h.row(0).to_vec(),
                hidden: h,
                attentions,
            }
        })
        .collect()
}

fn init_shapes(config: &EncoderConfig, role: Role) -> Vec<(String, (usize, usize))> {
    init_encoder(*config, role)
        .map(|e| e.params.into_iter().map(|p| (p.name, p.value.dim())).collect())
        .unwrap_or_default()
}

/// Raw per-layer, per-head attention of one ranker input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    /// `[layers · heads × seq_len × seq_len]`
    pub maps: Array3<f64>,
    pub layers: usize,
    pub heads: usize,
}

/// Mean teacher attention restricted to the real query and document tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub matrix: Array2<f64>,
    pub query_span: Range<usize>,
    pub doc_span: Range<usize>,
}

/// Ranker outputs for one query and its candidates.
#[derive(Debug, Clone)]
pub struct CrossScores {
    pub scores: Vec<f64>,
    pub stacks: Vec<AttentionStack>,
    pub inputs: Vec<CrossInput>,
}

/// Builds ranker inputs, failing if the padded concatenation overflows `max_position`.
pub fn cross_inputs(ranker: &Encoder, query: &TokenSequence, docs: &[TokenSequence]) -> Result<Vec<CrossInput>> {
    let inputs: Vec<CrossInput> = docs.iter().map(|d| CrossInput::new(query, d)).collect();
    if let Some(first) = inputs.first() {
        if inputs.iter().any(|i| i.ids.len() != first.ids.len()) {
            return Err(Error::Shape("all documents in a group must share max_len".into()));
        }
        if first.ids.len() > ranker.config.max_position {
            return Err(Error::Invalid(format!(
                "query + document + 3 specials = {} exceeds max_position {}; truncate inputs upstream",
                first.ids.len(),
                ranker.config.max_position
            )));
        }
    }
    Ok(inputs)
}

pub fn dual_scores(
    retriever: &Encoder,
    query: &TokenSequence,
    docs: &[TokenSequence],
) -> Result<(Vec<f64>, EncoderOutput, Vec<EncoderOutput>)> {
    if docs.is_empty() {
        return Err(Error::Invalid("empty document list".into()));
    }
    let q = retriever.encode(std::slice::from_ref(query))?.remove(0);
    let d = retriever.encode(docs)?;
    let scores = d
        .iter()
        .map(|o| o.cls.iter().zip(&q.cls).map(|(a, b)| a * b).sum())
        .collect();
    Ok((scores, q, d))
}

pub fn cross_scores(ranker: &Encoder, query: &TokenSequence, docs: &[TokenSequence]) -> Result<CrossScores> {
    if docs.is_empty() {
        return Err(Error::Invalid("empty document list".into()));
    }
    let inputs = cross_inputs(ranker, query, docs)?;
    ranker.note_ranker_call();
    let ids: Vec<Vec<u32>> = inputs.iter().map(|i| i.ids.clone()).collect();
    let mut tape = Tape::new();
    let params = ranker.bind(&mut tape, false);
    let fwd = ranker.forward(&mut tape, &params, &ids, None)?;
    let head = ranker.rank_head(&mut tape, &params, &fwd)?;
    let scores = tape.value(head).column(0).to_vec();
    let stacks = attention_stacks(&tape, &fwd, ranker.config.num_heads);
    Ok(CrossScores { scores, stacks, inputs })
}

/// Extracts per-sequence attention stacks from a recorded forward pass.
pub fn attention_stacks(tape: &Tape, fwd: &Forward, heads: usize) -> Vec<AttentionStack> {
    let layers = fwd.attention_nodes.len();
    let l = fwd.seq_len;
    (0..fwd.batch)
        .map(|b| {
            let mut maps = Array3::zeros((layers * heads, l, l));
            for (li, &node) in fwd.attention_nodes.iter().enumerate() {
                let (_, probs) = tape.attention_probs(node).expect("attention node");
                for h in 0..heads {
                    maps.index_axis_mut(ndarray::Axis(0), li * heads + h)
                        .assign(&probs[b * heads + h]);
                }
            }
            AttentionStack { maps, layers, heads }
        })
        .collect()
}

/// Mean over layers and heads, keeping only query-span then doc-span positions.
pub fn aggregate_attention(stack: &AttentionStack, input: &CrossInput) -> Result<AttentionMap> {
    let (count, rows, cols) = stack.maps.dim();
    if count != stack.layers * stack.heads || count == 0 {
        return Err(Error::Shape(format!(
            "stack holds {count} maps, expected {} layers × {} heads",
            stack.layers, stack.heads
        )));
    }
    if rows != cols || rows != input.ids.len() {
        return Err(Error::Shape(format!(
            "attention maps are {rows}×{cols} but the input has {} positions",
            input.ids.len()
        )));
    }
    if input.query_span.end > input.doc_span.start || input.doc_span.end > rows {
        return Err(Error::Shape("query/document spans inconsistent with the stack".into()));
    }
    let keep: Vec<usize> = input.query_span.clone().chain(input.doc_span.clone()).collect();
    let mean = stack.maps.mean_axis(ndarray::Axis(0)).expect("non-empty stack");
    let matrix = Array2::from_shape_fn((keep.len(), keep.len()), |(i, j)| mean[[keep[i], keep[j]]]);
    Ok(AttentionMap {
        matrix,
        query_span: input.query_span.clone(),
        doc_span: input.doc_span.clone(),
    })
}
