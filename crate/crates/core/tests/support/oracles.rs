//! Independent reference computations shared by the test targets.

#![allow(dead_code)]

/// Exhaustive threshold sweep: the largest score `t` at which at least 95%
/// of the positives score `>= t`, and the percentage of negatives at `>= t`.
pub fn err_rate_sweep(pos: &[f64], neg: &[f64]) -> (f64, f64) {
    let mut best: Option<f64> = None;
    for &t in pos.iter().chain(neg) {
        let hits = pos.iter().filter(|&&s| s >= t).count();
        if 100 * hits >= 95 * pos.len() && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the smallest score admits every positive");
    let fp = neg.iter().filter(|&&s| s >= t).count();
    (t, 100.0 * fp as f64 / neg.len() as f64)
}

/// Contrastive loss written out directly from its definition.
pub fn contrastive_by_hand(y: u8, d: f64, q: f64) -> f64 {
    if y == 1 {
        2.0 / q * d * d
    } else {
        2.0 * q * (-2.77 * d / q).exp()
    }
}
