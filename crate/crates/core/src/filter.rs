//! Dynamic false-negative filtering: any candidate the ranker scores strictly
//! above the labelled positive is removed from the student's losses.

use crate::error::{Error, Result};
use crate::losses::{FnMask, ScoreVector, NEG_INF};

/// Masks every `i != pos_idx` whose softmax-normalized teacher score exceeds the positive's.
/// Ties are kept. Recomputed from scratch on every call.
pub fn false_negative_mask(teacher: &ScoreVector, pos_idx: usize) -> Result<FnMask> {
    let n = teacher.len();
    if n < 2 {
        return Err(Error::Invalid("false-negative filtering needs at least 2 candidates".into()));
    }
    if pos_idx >= n {
        return Err(Error::Invalid(format!("pos_idx {pos_idx} out of range for {n} candidates")));
    }
    let probs = softmax(&teacher.values);
    let threshold = probs[pos_idx];
    let values = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if i != pos_idx && p > threshold { NEG_INF } else { 0.0 })
        .collect();
    Ok(FnMask { values })
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
