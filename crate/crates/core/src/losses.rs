//! Retriever/ranker contrastive losses, sentence- and word-level distillation
//! terms, and their combination.
//!
//! Each loss returns its value together with the analytic gradient with
//! respect to the student operand. Teacher operands are plain values, so no
//! gradient can reach them.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive stand-in for −∞; `exp` of it underflows to exactly 0.
pub const NEG_INF: f64 = f64::MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreOrigin {
    Retriever,
    Ranker,
}

/// Raw relevance logits over a group's candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub origin: ScoreOrigin,
}

impl ScoreVector {
    pub fn new(values: Vec<f64>, origin: ScoreOrigin) -> Self {
        Self { values, origin }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite {:?} score in {:?}", self.origin, self.values)))
        }
    }
}

/// Additive false-negative mask: 0 keeps a candidate, [`NEG_INF`] removes it.
#[derive(Debug, Clone, PartialEq)]
pub struct FnMask {
    pub values: Vec<f64>,
}

impl FnMask {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.values[i] != 0.0
    }

    pub fn masked_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Log-softmax of `logits + mask`; masked entries come back as `None`.
fn masked_log_softmax(logits: &[f64], mask: Option<&FnMask>) -> Vec<Option<f64>> {
    let keep = |i: usize| mask.is_none_or(|m| !m.is_masked(i));
    let max = (0..logits.len())
        .filter(|&i| keep(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + (0..logits.len())
            .filter(|&i| keep(i))
            .map(|i| (logits[i] - max).exp())
            .sum::<f64>()
            .ln();
    (0..logits.len())
        .map(|i| keep(i).then(|| logits[i] - lse))
        .collect()
}

fn check_mask(n: usize, pos_idx: usize, mask: Option<&FnMask>) -> Result<()> {
    if pos_idx >= n {
        return Err(Error::Invalid(format!("pos_idx {pos_idx} out of range for {n} candidates")));
    }
    if let Some(m) = mask {
        if m.values.len() != n {
            return Err(Error::Shape(format!("mask length {} vs {n} scores", m.values.len())));
        }
        if m.is_masked(pos_idx) {
            return Err(Error::Invalid("the positive candidate is masked".into()));
        }
    }
    Ok(())
}

/// `−log softmax(scores + mask)[pos_idx]` and its gradient w.r.t. `scores`.
pub fn contrastive_ce_grad(scores: &ScoreVector, pos_idx: usize, mask: Option<&FnMask>) -> Result<(f64, Vec<f64>)> {
    scores.check_finite()?;
    let n = scores.len();
    if n < 2 {
        return Err(Error::Invalid("contrastive loss needs at least 2 candidates".into()));
    }
    check_mask(n, pos_idx, mask)?;
    let ls = masked_log_softmax(&scores.values, mask);
    let loss = -ls[pos_idx].expect("positive is unmasked");
    let grad = ls
        .iter()
        .enumerate()
        .map(|(i, l)| l.map_or(0.0, f64::exp) - if i == pos_idx { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

pub fn contrastive_ce(scores: &ScoreVector, pos_idx: usize, mask: Option<&FnMask>) -> Result<f64> {
    contrastive_ce_grad(scores, pos_idx, mask).map(|(l, _)| l)
}

/// `KL(student ‖ teacher)` over the unmasked candidates, gradient w.r.t. the student logits.
pub fn sentence_kl_grad(student: &ScoreVector, teacher: &ScoreVector, mask: Option<&FnMask>) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!(
            "student has {} scores, teacher {}",
            student.len(),
            teacher.len()
        )));
    }
    student.check_finite()?;
    teacher.check_finite()?;
    if let Some(m) = mask {
        if m.values.len() != student.len() {
            return Err(Error::Shape("mask length differs from score length".into()));
        }
    }
    let ls = masked_log_softmax(&student.values, mask);
    let lt = masked_log_softmax(&teacher.values, mask);
    let mut kl = 0.0;
    for (s, t) in ls.iter().zip(&lt) {
        if let (Some(s), Some(t)) = (s, t) {
            kl += s.exp() * (s - t);
        }
    }
    let grad = ls
        .iter()
        .zip(&lt)
        .map(|(s, t)| match (s, t) {
            (Some(s), Some(t)) => s.exp() * (s - t - kl),
            _ => 0.0,
        })
        .collect();
    // rounding can push an exact zero just below it
    Ok((kl.max(0.0), grad))
}

pub fn sentence_kl(student: &ScoreVector, teacher: &ScoreVector, mask: Option<&FnMask>) -> Result<f64> {
    sentence_kl_grad(student, teacher, mask).map(|(l, _)| l)
}

/// Binary mask over the concatenated `[query; document]` positions selecting
/// the query×document and document×query quadrants.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMask {
    pub matrix: Array2<f64>,
    pub qlen: usize,
    pub dlen: usize,
}

impl PairMask {
    pub fn active_count(&self) -> f64 {
        self.matrix.sum()
    }
}

pub fn build_pair_mask(qlen: usize, dlen: usize, q_real_len: usize, d_real_len: usize) -> Result<PairMask> {
    if q_real_len > qlen || d_real_len > dlen {
        return Err(Error::Invalid("real length exceeds padded length".into()));
    }
    if q_real_len == 0 || d_real_len == 0 {
        return Err(Error::Invalid("pair mask needs at least one real token on each side".into()));
    }
    let n = qlen + dlen;
    let matrix = Array2::from_shape_fn((n, n), |(i, j)| {
        let real = |p: usize| if p < qlen { p < q_real_len } else { p - qlen < d_real_len };
        let cross = (i < qlen) != (j < qlen);
        if cross && real(i) && real(j) {
            1.0
        } else {
            0.0
        }
    });
    Ok(PairMask { matrix, qlen, dlen })
}

/// Raw dot products between every pair of rows of `[query_hidden; doc_hidden]`.
pub fn similarity_map(query_hidden: &Array2<f64>, doc_hidden: &Array2<f64>) -> Result<Array2<f64>> {
    if query_hidden.ncols() != doc_hidden.ncols() {
        return Err(Error::Shape("query and document hidden widths differ".into()));
    }
    let h = ndarray::concatenate(ndarray::Axis(0), &[query_hidden.view(), doc_hidden.view()])
        .expect("matching widths");
    Ok(h.dot(&h.t()))
}

/// Masked mean squared error between teacher attention and the row-softmax
/// of the student similarity map; gradient w.r.t. the similarity map.
///
/// Entries with mask 0 take no part in the softmax and get zero gradient.
/// Rows without any active entry are skipped. With `teacher_renorm`, each
/// teacher row is first rescaled to sum to 1 over its active entries.
pub fn word_mse_grad(
    att: &Array2<f64>,
    sim: &Array2<f64>,
    mask: &PairMask,
    teacher_renorm: bool,
) -> Result<(f64, Array2<f64>)> {
    if att.dim() != sim.dim() || sim.dim() != mask.matrix.dim() {
        return Err(Error::Shape(format!(
            "attention {:?}, similarity {:?}, mask {:?}",
            att.dim(),
            sim.dim(),
            mask.matrix.dim()
        )));
    }
    if sim.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite similarity entry".into()));
    }
    let (rows, cols) = sim.dim();
    let mut studs: Vec<Option<Vec<f64>>> = Vec::with_capacity(rows);
    let mut denom = 0.0;
    let mut sq = 0.0;
    let mut diffs = Array2::zeros((rows, cols));
    for r in 0..rows {
        let active: Vec<usize> = (0..cols).filter(|&c| mask.matrix[[r, c]] != 0.0).collect();
        if active.is_empty() {
            studs.push(None);
            continue;
        }
        let max = active.iter().map(|&c| sim[[r, c]]).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = active.iter().map(|&c| (sim[[r, c]] - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let tsum: f64 = active.iter().map(|&c| att[[r, c]]).sum();
        let mut p = vec![0.0; cols];
        for (&c, e) in active.iter().zip(&exps) {
            p[c] = e / z;
            let t = if teacher_renorm {
                if tsum > 0.0 {
                    att[[r, c]] / tsum
                } else {
                    1.0 / active.len() as f64
                }
            } else {
                att[[r, c]]
            };
            let d = p[c] - t;
            diffs[[r, c]] = d;
            sq += d * d;
        }
        denom += active.len() as f64;
        studs.push(Some(p));
    }
    if denom == 0.0 {
        return Err(Error::Invalid("pair mask has no active entries".into()));
    }
    let loss = sq / denom;
    let mut grad = Array2::zeros((rows, cols));
    for (r, p) in studs.iter().enumerate() {
        let Some(p) = p else { continue };
        // dL/dp = 2·diff/denom, then through the softmax Jacobian
        let gp: Vec<f64> = (0..cols).map(|c| 2.0 * diffs[[r, c]] / denom).collect();
        let inner: f64 = (0..cols).map(|c| p[c] * gp[c]).sum();
        for c in 0..cols {
            grad[[r, c]] = p[c] * (gp[c] - inner);
        }
    }
    Ok((loss, grad))
}

pub fn word_mse(att: &Array2<f64>, sim: &Array2<f64>, mask: &PairMask, teacher_renorm: bool) -> Result<f64> {
    word_mse_grad(att, sim, mask, teacher_renorm).map(|(l, _)| l)
}

/// Which loss components a training mode includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Sentence,
    Word,
    Full,
    /// Contrastive terms only.
    Basic,
}

/// Optional loss components fed to [`total_loss`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub l_de: f64,
    pub l_ce: f64,
    pub l_sent: Option<f64>,
    pub l_word: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_de: f64,
    pub l_ce: f64,
    pub l_sent: f64,
    pub l_word: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_de, self.l_ce, self.l_sent, self.l_word, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn total_loss(parts: LossParts, mode: LossMode) -> Result<LossBreakdown> {
    let (sent, word) = match mode {
        LossMode::Basic => (false, false),
        LossMode::Sentence => (true, false),
        LossMode::Word => (false, true),
        LossMode::Full => (true, true),
    };
    let need = |on: bool, v: Option<f64>, name: &str| -> Result<f64> {
        if on {
            v.ok_or_else(|| Error::Invalid(format!("{name} required by {mode:?} mode")))
        } else {
            Ok(0.0)
        }
    };
    let l_sent = need(sent, parts.l_sent, "l_sent")?;
    let l_word = need(word, parts.l_word, "l_word")?;
    Ok(LossBreakdown {
        l_de: parts.l_de,
        l_ce: parts.l_ce,
        l_sent,
        l_word,
        total: parts.l_de + parts.l_ce + l_sent + l_word,
    })
}
