//! Match scores and the 95%-recall error rate.

use rayon::prelude::*;

use crate::data::{PatchPair, PATCH_PIXELS};
use crate::error::{Error, Result};
use crate::layers::{ParamStore, PATCH_SIZE};
use crate::model::Model;
use crate::tensor::{Graph, Tensor};

/// Recall at which the error rate is read, in percent.
pub const TARGET_RECALL_PCT: usize = 95;

/// Pairs scored per forward pass. Fixed so scores do not depend on the
/// number of threads.
pub const EVAL_CHUNK: usize = 32;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "TSNET_THREADS";

/// False-match percentage at the threshold admitting 95% of the positives.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_pos: usize,
    pub n_neg: usize,
    /// `(score, label)` for every pair, in input order.
    pub scores: Vec<(f64, u8)>,
    pub threshold: f64,
    pub err_rate_95: f64,
    /// `(TPR, FPR)` at every distinct score used as a threshold, by
    /// decreasing threshold.
    pub curve: Vec<(f64, f64)>,
}

/// `(t, rate)`: `t` is the ⌈0.95·n_pos⌉-th largest positive score and `rate`
/// the percentage of negatives scoring at least `t`.
pub fn err_rate_95(pos: &[f64], neg: &[f64]) -> Result<(f64, f64)> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract(format!(
            "error rate needs positives and negatives, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    let mut sorted = pos.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (TARGET_RECALL_PCT * pos.len()).div_ceil(100);
    let t = sorted[k - 1];
    let false_matches = neg.iter().filter(|&&s| s >= t).count();
    Ok((t, 100.0 * false_matches as f64 / neg.len() as f64))
}

/// ROC samples at every distinct score.
pub fn roc_curve(pos: &[f64], neg: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos.len().max(1) as f64, neg.len().max(1) as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((tp as f64 / np, fp as f64 / nn));
    }
    curve
}

impl EvalReport {
    pub fn from_scores(scores: Vec<(f64, u8)>) -> Result<Self> {
        let pos: Vec<f64> = scores.iter().filter(|s| s.1 == 1).map(|s| s.0).collect();
        let neg: Vec<f64> = scores.iter().filter(|s| s.1 == 0).map(|s| s.0).collect();
        let (threshold, err_rate_95) = err_rate_95(&pos, &neg)?;
        Ok(EvalReport {
            n_pos: pos.len(),
            n_neg: neg.len(),
            curve: roc_curve(&pos, &neg),
            scores,
            threshold,
            err_rate_95,
        })
    }
}

/// Evaluation thread count: `TSNET_THREADS` if set, otherwise all cores.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn patch_tensor(p: &[f32]) -> Tensor<f32> {
    debug_assert_eq!(p.len(), PATCH_PIXELS);
    Tensor::new(vec![1, PATCH_SIZE, PATCH_SIZE], p.to_vec()).expect("patch shape")
}

/// `softmax(logits_final)[1]` for each pair of one chunk.
fn score_chunk(model: &Model, store: &ParamStore<f32>, pairs: &[PatchPair]) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let x1: Vec<_> = pairs
        .iter()
        .map(|p| g.constant(patch_tensor(&p.patch_a)))
        .collect();
    let x2: Vec<_> = pairs
        .iter()
        .map(|p| g.constant(patch_tensor(&p.patch_b)))
        .collect();
    let out = model.forward(&mut g, store, &x1, &x2)?;
    (0..pairs.len())
        .map(|i| {
            let r = g.row(out.logits_final, i)?;
            let s = g.softmax2(r)?;
            Ok(g.value(s).data()[1] as f64)
        })
        .collect()
}

/// Scores every pair; chunks run on up to [`eval_threads`] threads.
pub fn score_pairs(
    model: &Model,
    store: &ParamStore<f32>,
    pairs: &[PatchPair],
) -> Result<Vec<f64>> {
    let chunks: Vec<&[PatchPair]> = pairs.chunks(EVAL_CHUNK).collect();
    let run = || -> Result<Vec<Vec<f64>>> {
        chunks
            .par_iter()
            .map(|c| score_chunk(model, store, c))
            .collect()
    };
    let threads = eval_threads();
    let parts = if threads <= 1 {
        chunks
            .iter()
            .map(|c| score_chunk(model, store, c))
            .collect::<Result<Vec<_>>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::contract(format!("cannot start evaluation threads: {e}")))?
            .install(run)?
    };
    Ok(parts.into_iter().flatten().collect())
}

pub fn evaluate(model: &Model, store: &ParamStore<f32>, pairs: &[PatchPair]) -> Result<EvalReport> {
    let scores = score_pairs(model, store, pairs)?;
    EvalReport::from_scores(
        scores
            .into_iter()
            .zip(pairs.iter().map(|p| p.label))
            .collect(),
    )
}
