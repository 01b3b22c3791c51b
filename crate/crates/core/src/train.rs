//! Joint training of the ranker and the retriever.
//!
//! Every step the ranker scores each (query, candidate) pair and trains on
//! its own contrastive loss. Its scores and averaged attention then enter the
//! retriever's losses as constants, so the distillation terms never move the
//! ranker. The optional false-negative filter is derived from the same
//! ranker scores and applies to the retriever-side terms only.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::checkpoint;
use crate::encoder::{
    aggregate_attention, attention_stacks, cross_inputs, retriever_ids, retriever_token_rows, round_f32,
    BoundParams, Encoder, Forward, Role,
};
use crate::error::{Error, Result};
use crate::eval::{mrr_at_k, Run};
use crate::filter::false_negative_mask;
use crate::index::{build_index_from_tokens, Similarity};
use crate::losses::{
    build_pair_mask, contrastive_ce_grad, sentence_kl_grad, word_mse_grad, FnMask, LossBreakdown, ScoreOrigin,
    ScoreVector,
};
use crate::text::{Qrels, QueryGroup, SeqLens, TokenSequence};

/// Ablation modes. `basic` trains both towers on their contrastive losses only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "basic")]
    Basic,
    #[serde(rename = "sd")]
    Sd,
    #[serde(rename = "wd")]
    Wd,
    #[serde(rename = "fnf")]
    Fnf,
    #[serde(rename = "sd+wd")]
    SdWd,
    #[serde(rename = "full")]
    Full,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Basic, Mode::Sd, Mode::Wd, Mode::Fnf, Mode::SdWd, Mode::Full];

    pub fn sentence(self) -> bool {
        matches!(self, Mode::Sd | Mode::SdWd | Mode::Full)
    }

    pub fn word(self) -> bool {
        matches!(self, Mode::Wd | Mode::SdWd | Mode::Full)
    }

    pub fn filter(self) -> bool {
        matches!(self, Mode::Fnf | Mode::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Basic => "basic",
            Mode::Sd => "sd",
            Mode::Wd => "wd",
            Mode::Fnf => "fnf",
            Mode::SdWd => "sd+wd",
            Mode::Full => "full",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`; expected one of basic, sd, wd, fnf, sd+wd, full")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub de: f64,
    pub ce: f64,
    pub sent: f64,
    pub word: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { de: 1.0, ce: 1.0, sent: 1.0, word: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Query groups per optimizer step.
    pub batch_size: usize,
    pub group_size: usize,
    pub lr_retriever: f64,
    pub lr_ranker: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub teacher_renorm: bool,
    pub temperature: f64,
    pub weights: LossWeights,
    /// Save intermediate checkpoints every this many epochs.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            epochs: 10,
            batch_size: 8,
            group_size: 8,
            lr_retriever: 1e-3,
            lr_ranker: 1e-3,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            seed: 0,
            teacher_renorm: true,
            temperature: 1.0,
            weights: LossWeights::default(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1]".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.lr_retriever < 0.0 || self.lr_ranker < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warmup to 1 over `ceil(ratio · total)` steps, then constant.
pub fn warmup_scale(step: usize, total_steps: usize, ratio: f64) -> f64 {
    let warm = (ratio * total_steps as f64).ceil() as usize;
    if warm == 0 || step >= warm {
        1.0
    } else {
        step as f64 / warm as f64
    }
}

/// Adam with decoupled weight decay on matrix-shaped parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(encoder: &Encoder, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> = encoder.params().iter().map(|p| Array2::zeros(p.value.dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, encoder: &mut Encoder, grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in encoder.params_mut().iter_mut().enumerate() {
            let g = &grads[i];
            let decay = if p.value.nrows() > 1 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    *w = round_f32(*w - lr * (update + decay * *w));
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub masked_count: usize,
    pub grad_norm_retriever: f64,
    pub grad_norm_ranker: f64,
    pub duration_s: f64,
    /// Raw ranker scores per group, as used by the filter.
    pub teacher_scores: Vec<Vec<f64>>,
    pub pos_idx: Vec<usize>,
    pub learning_rate_scale: f64,
}

/// Loss nodes of one recorded step.
struct StepGraph {
    tape: Tape,
    retriever: BoundParams,
    ranker: BoundParams,
    l_de: Var,
    l_ce: Var,
    l_sent: Option<Var>,
    l_word: Option<Var>,
    total: Var,
    masked_count: usize,
    teacher_scores: Vec<Vec<f64>>,
}

fn batch_lens(batch: &[QueryGroup]) -> Result<(SeqLens, usize)> {
    let first = batch.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let lens = SeqLens {
        query: first.query.max_len(),
        doc: first.docs.first().map_or(0, TokenSequence::max_len),
    };
    let n = first.n();
    for g in batch {
        if g.n() != n || g.n() < 2 {
            return Err(Error::Invalid("all groups in a batch need the same size (at least 2)".into()));
        }
        if g.pos_idx >= g.n() {
            return Err(Error::Invalid(format!("group `{}` has pos_idx out of range", g.query_id)));
        }
        if g.query.max_len() != lens.query || g.docs.iter().any(|d| d.max_len() != lens.doc) {
            return Err(Error::Invalid("all groups in a batch need the same padded lengths".into()));
        }
    }
    Ok((lens, n))
}

/// `scalar_fn` over a score node whose values are laid out as a row or column.
fn score_loss(tape: &mut Tape, node: Var, value: f64, grad: &[f64], scale: f64) -> Var {
    let dim = tape.value(node).dim();
    let g = Array2::from_shape_vec(dim, grad.iter().map(|v| v * scale).collect()).expect("score shape");
    tape.scalar_fn(node, value, g)
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Var {
    let w = 1.0 / vars.len() as f64;
    tape.weighted_sum(vars.iter().map(|&v| (v, w)).collect())
}

fn build_step_graph(
    retriever: &Encoder,
    ranker: &Encoder,
    batch: &[QueryGroup],
    config: &TrainConfig,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<StepGraph> {
    let (lens, n) = batch_lens(batch)?;
    if retriever.role() != Role::Retriever || ranker.role() != Role::Ranker {
        return Err(Error::Invalid("expected (retriever, ranker)".into()));
    }
    let mode = config.mode;
    let temp = config.temperature;
    let mut tape = Tape::new();
    let rp = retriever.bind(&mut tape, true);
    let kp = ranker.bind(&mut tape, true);

    // ranker over every (query, candidate) pair of the batch
    let mut cross = Vec::with_capacity(batch.len() * n);
    for g in batch {
        cross.extend(cross_inputs(ranker, &g.query, &g.docs)?);
    }
    let cross_ids: Vec<Vec<u32>> = cross.iter().map(|c| c.ids.clone()).collect();
    ranker.note_ranker_call();
    let kf = ranker.forward(&mut tape, &kp, &cross_ids, dropout.as_deref_mut())?;
    let head = ranker.rank_head(&mut tape, &kp, &kf)?;

    // distillation targets always come from an evaluation-mode pass
    let train_mode_ranker = dropout.is_some() && ranker.config().dropout_rate > 0.0;
    let (teacher_flat, stacks) = if train_mode_ranker {
        let mut t2 = Tape::new();
        let p2 = ranker.bind(&mut t2, false);
        let f2 = ranker.forward(&mut t2, &p2, &cross_ids, None)?;
        let h2 = ranker.rank_head(&mut t2, &p2, &f2)?;
        let stacks = if mode.word() { attention_stacks(&t2, &f2, ranker.config().num_heads) } else { Vec::new() };
        (t2.value(h2).column(0).to_vec(), stacks)
    } else {
        let stacks = if mode.word() { attention_stacks(&tape, &kf, ranker.config().num_heads) } else { Vec::new() };
        (tape.value(head).column(0).to_vec(), stacks)
    };

    let q_ids: Vec<Vec<u32>> = batch.iter().map(|g| retriever_ids(&g.query)).collect();
    let d_ids: Vec<Vec<u32>> = batch.iter().flat_map(|g| g.docs.iter().map(retriever_ids)).collect();
    let qf: Forward = retriever.forward(&mut tape, &rp, &q_ids, dropout.as_deref_mut())?;
    let df: Forward = retriever.forward(&mut tape, &rp, &d_ids, dropout.as_deref_mut())?;
    let lq = lens.query + 2;
    let ld = lens.doc + 2;

    let (mut de, mut ce, mut sent, mut word) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut masked_count = 0;
    let mut teacher_scores = Vec::with_capacity(batch.len());
    for (gi, g) in batch.iter().enumerate() {
        let rows: Vec<usize> = (gi * n..(gi + 1) * n).collect();
        let ce_node = tape.select_rows(head, rows);
        let student_ce = ScoreVector::new(tape.value(ce_node).column(0).to_vec(), ScoreOrigin::Ranker);
        let scaled = |v: &ScoreVector| ScoreVector::new(v.values.iter().map(|x| x / temp).collect(), v.origin);
        let (v, grad) = contrastive_ce_grad(&scaled(&student_ce), g.pos_idx, None)?;
        ce.push(score_loss(&mut tape, ce_node, v, &grad, 1.0 / temp));

        let teacher = ScoreVector::new(teacher_flat[gi * n..(gi + 1) * n].to_vec(), ScoreOrigin::Ranker);
        let mask = if mode.filter() {
            false_negative_mask(&teacher, g.pos_idx)?
        } else {
            FnMask::zeros(n)
        };
        masked_count += mask.masked_count();

        let q_cls = tape.select_rows(qf.hidden, vec![gi * lq]);
        let d_cls = tape.select_rows(df.hidden, (0..n).map(|i| (gi * n + i) * ld).collect());
        let de_node = tape.matmul_bt(q_cls, d_cls);
        let student = ScoreVector::new(tape.value(de_node).row(0).to_vec(), ScoreOrigin::Retriever);
        let (v, grad) = contrastive_ce_grad(&scaled(&student), g.pos_idx, Some(&mask))?;
        de.push(score_loss(&mut tape, de_node, v, &grad, 1.0 / temp));

        if mode.sentence() {
            let (v, grad) = sentence_kl_grad(&scaled(&student), &scaled(&teacher), Some(&mask))?;
            sent.push(score_loss(&mut tape, de_node, v, &grad, 1.0 / temp));
        }

        if mode.word() {
            let q_rows: Vec<usize> = retriever_token_rows(&g.query).map(|r| gi * lq + r).collect();
            let mut pair_terms = Vec::new();
            for i in 0..n {
                let doc = &g.docs[i];
                if mask.is_masked(i) || g.query.length == 0 || doc.length == 0 {
                    continue;
                }
                let ci = gi * n + i;
                let att = aggregate_attention(&stacks[ci], &cross[ci])?;
                let qh = tape.select_rows(qf.hidden, q_rows.clone());
                let dh = tape.select_rows(df.hidden, retriever_token_rows(doc).map(|r| ci * ld + r).collect());
                let h = tape.concat_rows(vec![qh, dh]);
                let sim = tape.matmul_bt(h, h);
                let pmask = build_pair_mask(g.query.length, doc.length, g.query.length, doc.length)?;
                let (v, grad) = word_mse_grad(&att.matrix, tape.value(sim), &pmask, config.teacher_renorm)?;
                pair_terms.push(tape.scalar_fn(sim, v, grad));
            }
            let term = if pair_terms.is_empty() {
                tape.constant(Array2::zeros((1, 1)))
            } else {
                mean_of(&mut tape, &pair_terms)
            };
            word.push(term);
        }
        teacher_scores.push(teacher.values);
    }

    let l_de = mean_of(&mut tape, &de);
    let l_ce = mean_of(&mut tape, &ce);
    let l_sent = (!sent.is_empty()).then(|| mean_of(&mut tape, &sent));
    let l_word = (!word.is_empty()).then(|| mean_of(&mut tape, &word));
    let w = config.weights;
    let mut terms = vec![(l_de, w.de), (l_ce, w.ce)];
    if let Some(s) = l_sent {
        terms.push((s, w.sent));
    }
    if let Some(wd) = l_word {
        terms.push((wd, w.word));
    }
    let total = tape.weighted_sum(terms);
    Ok(StepGraph {
        tape,
        retriever: rp,
        ranker: kp,
        l_de,
        l_ce,
        l_sent,
        l_word,
        total,
        masked_count,
        teacher_scores,
    })
}

impl StepGraph {
    fn breakdown(&self) -> LossBreakdown {
        let s = |v: Option<Var>| v.map_or(0.0, |v| self.tape.scalar(v));
        LossBreakdown {
            l_de: self.tape.scalar(self.l_de),
            l_ce: self.tape.scalar(self.l_ce),
            l_sent: s(self.l_sent),
            l_word: s(self.l_word),
            total: self.tape.scalar(self.total),
        }
    }
}

fn collect_grads(grads: &mut Grads, bound: &BoundParams, encoder: &Encoder) -> Vec<Array2<f64>> {
    bound
        .vars
        .iter()
        .zip(encoder.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Array2::zeros(p.value.dim())))
        .collect()
}

fn norm(grads: &[Array2<f64>]) -> f64 {
    grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Owns both towers and their optimizers; the single writer during training.
pub struct Trainer {
    pub retriever: Encoder,
    pub ranker: Encoder,
    config: TrainConfig,
    opt_retriever: AdamW,
    opt_ranker: AdamW,
    step: usize,
    total_steps: usize,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(retriever: Encoder, ranker: Encoder, config: TrainConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        if retriever.role() != Role::Retriever || ranker.role() != Role::Ranker {
            return Err(Error::Invalid("expected (retriever, ranker)".into()));
        }
        Ok(Self {
            opt_retriever: AdamW::new(&retriever, config.weight_decay),
            opt_ranker: AdamW::new(&ranker, config.weight_decay),
            dropout_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d207),
            retriever,
            ranker,
            config,
            step: 0,
            total_steps,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn learning_rate_scale(&self) -> f64 {
        warmup_scale(self.step, self.total_steps, self.config.warmup_ratio)
    }

    pub fn train_step(&mut self, batch: &[QueryGroup]) -> Result<StepReport> {
        let start = Instant::now();
        let use_dropout = self.retriever.config().dropout_rate > 0.0 || self.ranker.config().dropout_rate > 0.0;
        let rng = use_dropout.then_some(&mut self.dropout_rng);
        let graph = build_step_graph(&self.retriever, &self.ranker, batch, &self.config, rng)?;
        let losses = graph.breakdown();
        if !losses.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss: {losses:?}")));
        }
        let mut grads = graph.tape.backward(graph.total);
        let gr = collect_grads(&mut grads, &graph.retriever, &self.retriever);
        let gk = collect_grads(&mut grads, &graph.ranker, &self.ranker);
        let scale = self.learning_rate_scale();
        self.opt_retriever.step(&mut self.retriever, &gr, self.config.lr_retriever * scale);
        self.opt_ranker.step(&mut self.ranker, &gk, self.config.lr_ranker * scale);
        self.step += 1;
        Ok(StepReport {
            losses,
            masked_count: graph.masked_count,
            grad_norm_retriever: norm(&gr),
            grad_norm_ranker: norm(&gk),
            duration_s: start.elapsed().as_secs_f64(),
            teacher_scores: graph.teacher_scores,
            pos_idx: batch.iter().map(|g| g.pos_idx).collect(),
            learning_rate_scale: scale,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentGradient {
    pub component: String,
    pub retriever_norm: f64,
    pub ranker_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradFlowReport {
    pub components: Vec<ComponentGradient>,
}

impl GradFlowReport {
    pub fn get(&self, name: &str) -> Option<&ComponentGradient> {
        self.components.iter().find(|c| c.component == name)
    }

    /// Distillation terms leave the ranker untouched and `l_ce` reaches it.
    pub fn ranker_frozen_under_distillation(&self) -> bool {
        let frozen = ["l_sent", "l_word"]
            .iter()
            .filter_map(|n| self.get(n))
            .all(|c| c.ranker_norm == 0.0);
        frozen && self.get("l_ce").is_some_and(|c| c.ranker_norm > 0.0)
    }

    /// Every active component sends gradient into the retriever (l_ce excepted).
    pub fn retriever_receives_all(&self) -> bool {
        self.components
            .iter()
            .filter(|c| c.component != "l_ce")
            .all(|c| c.retriever_norm > 0.0)
    }
}

/// Backpropagates each loss component separately and reports per-tower gradient norms.
pub fn grad_flow_check(retriever: &Encoder, ranker: &Encoder, group: &QueryGroup, config: &TrainConfig) -> Result<GradFlowReport> {
    let graph = build_step_graph(retriever, ranker, std::slice::from_ref(group), config, None)?;
    let mut named = vec![("l_de", graph.l_de), ("l_ce", graph.l_ce)];
    if let Some(v) = graph.l_sent {
        named.push(("l_sent", v));
    }
    if let Some(v) = graph.l_word {
        named.push(("l_word", v));
    }
    let components = named
        .into_iter()
        .map(|(name, var)| {
            let mut g = graph.tape.backward(var);
            let gr = collect_grads(&mut g, &graph.retriever, retriever);
            let gk = collect_grads(&mut g, &graph.ranker, ranker);
            ComponentGradient {
                component: name.to_string(),
                retriever_norm: norm(&gr),
                ranker_norm: norm(&gk),
            }
        })
        .collect();
    Ok(GradFlowReport { components })
}

/// Held-out queries ranked against a tokenized corpus during training.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub queries: Vec<(String, TokenSequence)>,
    pub qrels: Qrels,
    pub doc_ids: Vec<String>,
    pub docs: Vec<TokenSequence>,
}

impl HeldOut {
    /// MRR@k of the retriever alone over the full corpus.
    pub fn mrr(&self, retriever: &Encoder, k: usize) -> Result<f64> {
        let lens = SeqLens {
            query: self.queries.first().map_or(0, |q| q.1.max_len()),
            doc: self.docs.first().map_or(0, TokenSequence::max_len),
        };
        let index = build_index_from_tokens(retriever, &self.doc_ids, &self.docs, lens, Similarity::Dot)?;
        let seqs: Vec<TokenSequence> = self.queries.iter().map(|(_, s)| s.clone()).collect();
        let emb = retriever.embed(&seqs)?;
        let mut run = Run::default();
        for ((qid, _), row) in self.queries.iter().zip(emb.outer_iter()) {
            run.insert(qid, index.top_k(row.as_slice().expect("contiguous"), k)?)?;
        }
        mrr_at_k(&run, &self.qrels, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_de: f64,
    pub l_ce: f64,
    pub l_sent: f64,
    pub l_word: f64,
    pub total: f64,
    pub heldout_mrr10: Option<f64>,
    /// Masked candidates per scored candidate.
    pub masked_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub mode: Option<Mode>,
    pub initial_mrr10: Option<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_mrr10(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.heldout_mrr10).or(self.initial_mrr10)
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Where and how often `fit` writes checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub metadata: BTreeMap<String, String>,
}

pub struct FitOutput {
    pub retriever: Encoder,
    pub ranker: Encoder,
    pub history: History,
}

const DIVERGENCE_LOSS: f64 = 1e3;
const DIVERGENCE_PATIENCE: usize = 50;

pub fn steps_per_epoch(groups: usize, batch_size: usize) -> usize {
    groups.div_ceil(batch_size)
}

pub fn fit(
    config: &TrainConfig,
    retriever: Encoder,
    ranker: Encoder,
    train: &[QueryGroup],
    heldout: Option<&HeldOut>,
    sink: Option<&CheckpointSink>,
) -> Result<FitOutput> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training groups".into()));
    }
    let mut history = History {
        mode: Some(config.mode),
        initial_mrr10: heldout.map(|h| h.mrr(&retriever, 10)).transpose()?,
        epochs: Vec::new(),
    };
    let per_epoch = steps_per_epoch(train.len(), config.batch_size);
    let mut trainer = Trainer::new(retriever, ranker, config.clone(), per_epoch * config.epochs)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut over_threshold = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        let mut masked = 0;
        let mut scored = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<QueryGroup> = chunk.iter().map(|&i| train[i].clone()).collect();
            let report = match trainer.train_step(&batch) {
                Ok(r) => r,
                Err(Error::Numerical(m)) => {
                    return Err(Error::Diverged {
                        steps: trainer.steps_taken(),
                        message: m,
                        history: Box::new(history),
                    })
                }
                Err(e) => return Err(e),
            };
            let l = report.losses;
            sums.l_de += l.l_de;
            sums.l_ce += l.l_ce;
            sums.l_sent += l.l_sent;
            sums.l_word += l.l_word;
            sums.total += l.total;
            masked += report.masked_count;
            scored += batch.iter().map(QueryGroup::n).sum::<usize>();
            over_threshold = if l.total > DIVERGENCE_LOSS { over_threshold + 1 } else { 0 };
            if over_threshold >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    steps: trainer.steps_taken(),
                    message: format!("loss above {DIVERGENCE_LOSS} for {DIVERGENCE_PATIENCE} consecutive steps"),
                    history: Box::new(history),
                });
            }
        }
        let steps = per_epoch as f64;
        history.epochs.push(EpochRecord {
            epoch,
            l_de: sums.l_de / steps,
            l_ce: sums.l_ce / steps,
            l_sent: sums.l_sent / steps,
            l_word: sums.l_word / steps,
            total: sums.total / steps,
            heldout_mrr10: heldout.map(|h| h.mrr(&trainer.retriever, 10)).transpose()?,
            masked_rate: masked as f64 / scored.max(1) as f64,
        });
        if let (Some(sink), Some(every)) = (sink, config.checkpoint_every) {
            if every > 0 && epoch % every == 0 {
                save_pair(sink, &format!("epoch{epoch:03}"), &trainer.retriever, &trainer.ranker, config.mode, epoch)?;
            }
        }
    }
    Ok(FitOutput {
        retriever: trainer.retriever,
        ranker: trainer.ranker,
        history,
    })
}

/// Writes `<stem>.retriever` and `<stem>.ranker` under the sink directory.
pub fn save_pair(sink: &CheckpointSink, stem: &str, retriever: &Encoder, ranker: &Encoder, mode: Mode, epoch: usize) -> Result<(PathBuf, PathBuf)> {
    let mut meta = sink.metadata.clone();
    meta.insert("mode".into(), mode.to_string());
    meta.insert("epoch".into(), epoch.to_string());
    let rp = sink.dir.join(format!("{stem}.retriever"));
    let kp = sink.dir.join(format!("{stem}.ranker"));
    meta.insert("role".into(), "retriever".into());
    checkpoint::save(&rp, retriever, &meta)?;
    meta.insert("role".into(), "ranker".into());
    checkpoint::save(&kp, ranker, &meta)?;
    Ok((rp, kp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_parse_and_flag_components() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        let err = "nope".parse::<Mode>().unwrap_err().to_string();
        assert!(err.contains("basic, sd, wd, fnf, sd+wd, full"));
        assert!(Mode::Full.sentence() && Mode::Full.word() && Mode::Full.filter());
        assert!(!Mode::Basic.sentence() && !Mode::Basic.word() && !Mode::Basic.filter());
        assert!(Mode::SdWd.sentence() && Mode::SdWd.word() && !Mode::SdWd.filter());
    }

    #[test]
    fn warmup_reaches_full_rate_at_ceiling() {
        assert_eq!(warmup_scale(0, 95, 0.1), 0.0);
        // ceil(9.5) = 10
        assert!(warmup_scale(9, 95, 0.1) < 1.0);
        assert_eq!(warmup_scale(10, 95, 0.1), 1.0);
        assert_eq!(warmup_scale(50, 95, 0.1), 1.0);
        assert_eq!(warmup_scale(0, 95, 0.0), 1.0);
    }
}
