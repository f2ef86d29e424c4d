//! Cross-entropy, the feature-level contrastive loss and the combined
//! objective. Batch losses are means over the batch.

use crate::error::{Error, Result};
use crate::model::{ForwardOutputs, LossMode, ModelKind};
use crate::tensor::{Graph, NodeId, Real};

/// Lower/upper clamp applied to the positive-class probability.
pub const PROB_EPS: f64 = 1e-7;
/// Decay constant of the negative-pair contrastive term.
pub const CONTRASTIVE_DECAY: f64 = 2.77;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the Siamese contrastive term.
    pub lambda: f64,
    /// Weight of the Pseudo-Siamese contrastive term.
    pub beta: f64,
    /// Contrastive margin.
    pub q: f64,
    /// Measure distances between L2-normalized features.
    pub normalize_features: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1e-2,
            beta: 1e-2,
            q: 50.0,
            normalize_features: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(
                    None,
                    format!("{name} must lie in [0, 1], got {v}"),
                ));
            }
        }
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(Error::config(
                None,
                format!("Q must be positive, got {}", self.q),
            ));
        }
        Ok(())
    }
}

fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::contract(format!("label must be 0 or 1, got {y}")));
    }
    Ok(())
}

/// `−(y·log ŷ + (1−y)·log(1−ŷ))` with `ŷ = softmax2(logits)[1]` clamped to
/// `[1e-7, 1−1e-7]`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: NodeId, y: u8) -> Result<NodeId> {
    check_label(y)?;
    let p = g.softmax2(logits)?;
    let p1 = g.select(p, 1)?;
    let eps = T::from_f64_lossy(PROB_EPS);
    let p1 = g.clamp(p1, eps, T::one() - eps)?;
    let q = if y == 1 {
        p1
    } else {
        let neg = g.scale(p1, -T::one())?;
        g.add_scalar(neg, T::one())?
    };
    let ll = g.ln(q)?;
    g.scale(ll, -T::one())
}

/// Mean cross-entropy over the rows of `[B, 2]` logits.
pub fn cross_entropy_batch<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &[u8],
) -> Result<NodeId> {
    if g.shape(logits) != [labels.len(), 2] {
        return Err(Error::dim(
            "cross_entropy",
            g.shape(logits),
            &[labels.len(), 2],
        ));
    }
    let terms = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let r = g.row(logits, i)?;
            cross_entropy(g, r, y)
        })
        .collect::<Result<Vec<_>>>()?;
    batch_mean(g, &terms)
}

/// `y·(2/Q)·D² + (1−y)·2Q·exp(−2.77·D/Q)` with `D = ‖f1 − f2‖₂`.
pub fn contrastive<T: Real>(
    g: &mut Graph<T>,
    f1: NodeId,
    f2: NodeId,
    y: u8,
    q: f64,
    normalize: bool,
) -> Result<NodeId> {
    check_label(y)?;
    if q.is_nan() || q <= 0.0 {
        return Err(Error::contract(format!(
            "contrastive margin must be positive, got {q}"
        )));
    }
    let (f1, f2) = if normalize {
        (g.l2_normalize(f1)?, g.l2_normalize(f2)?)
    } else {
        (f1, f2)
    };
    let diff = g.sub(f1, f2)?;
    if y == 1 {
        let d2 = g.l2norm_sq(diff)?;
        g.scale(d2, T::from_f64_lossy(2.0 / q))
    } else {
        let d = g.norm2(diff)?;
        let a = g.scale(d, T::from_f64_lossy(-CONTRASTIVE_DECAY / q))?;
        let e = g.exp(a)?;
        g.scale(e, T::from_f64_lossy(2.0 * q))
    }
}

/// Mean contrastive loss over matching rows of two `[B, d]` feature batches.
pub fn contrastive_batch<T: Real>(
    g: &mut Graph<T>,
    f1: NodeId,
    f2: NodeId,
    labels: &[u8],
    q: f64,
    normalize: bool,
) -> Result<NodeId> {
    if g.shape(f1) != g.shape(f2) || g.shape(f1).first() != Some(&labels.len()) {
        return Err(Error::dim("contrastive", g.shape(f1), g.shape(f2)));
    }
    let terms = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let a = g.row(f1, i)?;
            let b = g.row(f2, i)?;
            contrastive(g, a, b, y, q, normalize)
        })
        .collect::<Result<Vec<_>>>()?;
    batch_mean(g, &terms)
}

fn batch_mean<T: Real>(g: &mut Graph<T>, terms: &[NodeId]) -> Result<NodeId> {
    let s = g.add_all(terms)?;
    g.scale(s, T::one() / T::from_usize(terms.len()).unwrap())
}

/// Values of the objective's components; absent terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub tsnet_en: Option<f64>,
    pub siam_en: Option<f64>,
    pub pseudo_en: Option<f64>,
    pub siam_con: Option<f64>,
    pub pseudo_con: Option<f64>,
}

impl LossBreakdown {
    /// `tsnet_en + siam_en + pseudo_en + λ·siam_con + β·pseudo_con`, absent terms 0.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        let v = |x: Option<f64>| x.unwrap_or(0.0);
        v(self.tsnet_en)
            + v(self.siam_en)
            + v(self.pseudo_en)
            + w.lambda * v(self.siam_con)
            + w.beta * v(self.pseudo_con)
    }

    /// Component values in log-column order.
    pub fn components(&self) -> [Option<f64>; 5] {
        [
            self.tsnet_en,
            self.siam_en,
            self.pseudo_en,
            self.siam_con,
            self.pseudo_con,
        ]
    }
}

/// The objective as a graph node plus its component values.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// Builds the objective for `kind`.
///
/// * TS-Net kinds, three entropies: all five terms.
/// * TS-Net kinds, one entropy: `tsnet_en` only.
/// * S / S*: `siam_en`, plus `siam_con` when `λ > 0`.
/// * PS: `pseudo_en`, plus `pseudo_con` when `β > 0`.
pub fn combined_loss<T: Real>(
    g: &mut Graph<T>,
    out: &ForwardOutputs,
    labels: &[u8],
    w: &LossWeights,
    kind: ModelKind,
    mode: LossMode,
) -> Result<Objective> {
    w.validate()?;
    let missing = |what: &str| Error::contract(format!("{kind} forward outputs lack {what}"));
    let mut terms: Vec<NodeId> = Vec::new();
    let mut b = LossBreakdown::default();
    let con = |g: &mut Graph<T>, f: Option<(NodeId, NodeId)>, name: &str| -> Result<NodeId> {
        let (f1, f2) = f.ok_or_else(|| missing(name))?;
        contrastive_batch(g, f1, f2, labels, w.q, w.normalize_features)
    };
    let value = |g: &Graph<T>, id: NodeId| g.value(id).item().as_f64();

    if kind.is_tsnet() {
        let en = cross_entropy_batch(g, out.logits_final, labels)?;
        b.tsnet_en = Some(value(g, en));
        terms.push(en);
        if mode == LossMode::ThreeEntropy {
            for (logits, slot, name) in [
                (out.logits_siam, &mut b.siam_en, "Siamese logits"),
                (out.logits_pseudo, &mut b.pseudo_en, "Pseudo-Siamese logits"),
            ] {
                let en = cross_entropy_batch(g, logits.ok_or_else(|| missing(name))?, labels)?;
                *slot = Some(value(g, en));
                terms.push(en);
            }
            for (feats, weight, slot, name) in [
                (out.feat_siam, w.lambda, &mut b.siam_con, "Siamese features"),
                (
                    out.feat_pseudo,
                    w.beta,
                    &mut b.pseudo_con,
                    "Pseudo-Siamese features",
                ),
            ] {
                let c = con(g, feats, name)?;
                *slot = Some(value(g, c));
                terms.push(g.scale(c, T::from_f64_lossy(weight))?);
            }
        }
    } else {
        let (logits, feats, weight, pseudo) = match kind {
            ModelKind::PS => (out.logits_pseudo, out.feat_pseudo, w.beta, true),
            _ => (out.logits_siam, out.feat_siam, w.lambda, false),
        };
        let en = cross_entropy_batch(g, logits.ok_or_else(|| missing("stream logits"))?, labels)?;
        let en_v = Some(value(g, en));
        terms.push(en);
        let con_v = if weight > 0.0 {
            let c = con(g, feats, "stream features")?;
            let v = value(g, c);
            terms.push(g.scale(c, T::from_f64_lossy(weight))?);
            Some(v)
        } else {
            None
        };
        if pseudo {
            (b.pseudo_en, b.pseudo_con) = (en_v, con_v);
        } else {
            (b.siam_en, b.siam_con) = (en_v, con_v);
        }
    }
    let total = g.add_all(&terms)?;
    b.total = value(g, total);
    Ok(Objective {
        total,
        breakdown: b,
    })
}
