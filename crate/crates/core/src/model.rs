//! Network variants: Siamese (S), Pseudo-Siamese (PS), the three-stream
//! TS-Net, the parameter-matched Siamese S*, and TS-Net with the two streams
//! fused earlier in the metric network.
//!
//! Every variant consumes the same `(x1, x2)` batch of patches, where `x1`
//! comes from modality A and `x2` from modality B, and returns
//! [`ForwardOutputs`] with `[B, 2]` logits.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{
    metric_param_count, FcLayer, FeatureTower, Module, ParamId, ParamStore, TowerShape,
    METRIC_HIDDEN,
};
use crate::tensor::{Graph, NodeId, Real};

/// Where the two TS-Net streams are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionPoint {
    /// Bottleneck outputs are subtracted; one full metric network follows.
    FeatureTower,
    /// Post-relu `fc1` activations are subtracted; `fc2`, `fc3` follow.
    Fc1,
    /// Post-relu `fc2` activations are subtracted; `fc3` follows.
    Fc2,
    /// Both streams' logits are concatenated into a 4→2 fusion layer.
    Fc3,
}

impl FusionPoint {
    pub const ALL: [FusionPoint; 4] = [
        FusionPoint::Fc3,
        FusionPoint::Fc2,
        FusionPoint::Fc1,
        FusionPoint::FeatureTower,
    ];

    /// Number of metric layers each stream runs before the merge.
    fn stage(self) -> usize {
        match self {
            FusionPoint::FeatureTower => 0,
            FusionPoint::Fc1 => 1,
            FusionPoint::Fc2 => 2,
            FusionPoint::Fc3 => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FusionPoint::FeatureTower => "FeatureTower",
            FusionPoint::Fc1 => "FC1",
            FusionPoint::Fc2 => "FC2",
            FusionPoint::Fc3 => "FC3",
        }
    }
}

impl FromStr for FusionPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "featuretower" | "feature_tower" | "tower" => Ok(FusionPoint::FeatureTower),
            "fc1" => Ok(FusionPoint::Fc1),
            "fc2" => Ok(FusionPoint::Fc2),
            "fc3" => Ok(FusionPoint::Fc3),
            _ => Err(Error::config(None, format!("unknown fusion point `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    S,
    PS,
    TSNet,
    SStar,
    /// TS-Net fused at a point other than the logits. `Fc3` is [`ModelKind::TSNet`].
    TSNetFusionAt(FusionPoint),
}

impl ModelKind {
    /// Maps `TSNetFusionAt(Fc3)` onto `TSNet`.
    pub fn canonical(self) -> Self {
        match self {
            ModelKind::TSNetFusionAt(FusionPoint::Fc3) => ModelKind::TSNet,
            k => k,
        }
    }

    pub fn fusion_point(self) -> Option<FusionPoint> {
        match self.canonical() {
            ModelKind::TSNet => Some(FusionPoint::Fc3),
            ModelKind::TSNetFusionAt(p) => Some(p),
            _ => None,
        }
    }

    pub fn is_tsnet(self) -> bool {
        self.fusion_point().is_some()
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.canonical() {
            ModelKind::S => write!(f, "S"),
            ModelKind::PS => write!(f, "PS"),
            ModelKind::TSNet => write!(f, "TSNet"),
            ModelKind::SStar => write!(f, "SStar"),
            ModelKind::TSNetFusionAt(p) => write!(f, "TSNetFusionAt({})", p.label()),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let kind = match t.to_ascii_lowercase().as_str() {
            "s" | "siamese" => ModelKind::S,
            "ps" | "pseudo" | "pseudosiamese" => ModelKind::PS,
            "tsnet" | "ts-net" => ModelKind::TSNet,
            "sstar" | "s*" => ModelKind::SStar,
            lower => {
                let inner = lower
                    .strip_prefix("tsnetfusionat(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::config(None, format!("unknown model kind `{t}`")))?;
                ModelKind::TSNetFusionAt(inner.parse()?)
            }
        };
        Ok(kind.canonical())
    }
}

/// Number of cross-entropy terms in a TS-Net objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossMode {
    /// Only the final (fused) prediction is supervised.
    OneEntropy,
    /// The fused prediction and each stream's own prediction are supervised.
    ThreeEntropy,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossMode::OneEntropy => write!(f, "OneEntropy"),
            LossMode::ThreeEntropy => write!(f, "ThreeEntropy"),
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "oneentropy" | "one" | "1" => Ok(LossMode::OneEntropy),
            "threeentropy" | "three" | "3" => Ok(LossMode::ThreeEntropy),
            _ => Err(Error::config(None, format!("unknown loss mode `{s}`"))),
        }
    }
}

/// Everything needed to rebuild a variant's architecture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub loss_mode: LossMode,
    /// Tower shape of every stream. For S* this is the base shape that the
    /// widened tower is matched against.
    pub tower: TowerShape,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, loss_mode: LossMode) -> Self {
        ModelSpec {
            kind: kind.canonical(),
            loss_mode,
            tower: TowerShape::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.fusion_point() == Some(FusionPoint::FeatureTower)
            && self.loss_mode == LossMode::ThreeEntropy
        {
            return Err(Error::config(
                None,
                "ThreeEntropy is undefined for fusion at the feature tower: \
                 the streams have no heads of their own",
            ));
        }
        if !(self.tower.width_multiplier > 0.0 && self.tower.bottleneck_multiplier > 0.0) {
            return Err(Error::config(None, "tower multipliers must be positive"));
        }
        Ok(())
    }

    /// Whether per-stream logits exist (and hence per-stream cross-entropy).
    pub fn has_stream_heads(&self) -> bool {
        match self.kind.fusion_point() {
            None | Some(FusionPoint::Fc3) => true,
            Some(_) => self.loss_mode == LossMode::ThreeEntropy,
        }
    }

    /// Tower shape actually instantiated.
    pub fn resolved_tower(&self) -> TowerShape {
        match self.kind {
            ModelKind::SStar => sstar_shape(self.tower),
            _ => self.tower,
        }
    }

    /// Scalar parameter count of the variant, computed from the architecture.
    pub fn param_count(&self) -> usize {
        let tower = self.resolved_tower();
        let t = tower.param_count();
        let d = tower.bottleneck_dim();
        match self.kind.canonical() {
            ModelKind::S | ModelKind::SStar => t + metric_param_count(d),
            ModelKind::PS => 2 * t + metric_param_count(d),
            ModelKind::TSNet => 3 * t + 2 * metric_param_count(d) + (4 * 2 + 2),
            ModelKind::TSNetFusionAt(p) => {
                let k = p.stage();
                let dims = metric_dims(d);
                let seg = |from: usize, to: usize| -> usize {
                    (from..to)
                        .map(|i| dims[i] * dims[i + 1] + dims[i + 1])
                        .sum()
                };
                let per_stream = if self.loss_mode == LossMode::ThreeEntropy {
                    seg(0, 3)
                } else {
                    seg(0, k)
                };
                3 * t + 2 * per_stream + seg(k, 3)
            }
        }
    }
}

fn metric_dims(input: usize) -> [usize; 4] {
    [input, METRIC_HIDDEN, METRIC_HIDDEN, 2]
}

/// Nominal S* widening factor for the tower channels.
pub const SSTAR_WIDTH_FACTOR: f64 = 1.45;
/// S* widening factor for the bottleneck.
pub const SSTAR_BOTTLENECK_FACTOR: f64 = 2.0;
/// Allowed relative mismatch between S* and TS-Net parameter counts.
pub const SSTAR_TOLERANCE: f64 = 0.02;

/// Tower shape for S* matched to a TS-Net built on `base`.
///
/// The bottleneck is doubled. The channel multiplier starts at 1.45× the base;
/// if that misses TS-Net's parameter count by more than 2%, it is replaced by
/// the smallest multiplier (on a 1e-4 grid) whose count reaches TS-Net's.
pub fn sstar_shape(base: TowerShape) -> TowerShape {
    let target = ModelSpec {
        kind: ModelKind::TSNet,
        loss_mode: LossMode::ThreeEntropy,
        tower: base,
    }
    .param_count() as f64;
    let bottleneck_multiplier = base.bottleneck_multiplier * SSTAR_BOTTLENECK_FACTOR;
    let count = |w: f64| {
        let shape = TowerShape {
            width_multiplier: w,
            bottleneck_multiplier,
        };
        (shape.param_count() + metric_param_count(shape.bottleneck_dim())) as f64
    };
    let nominal = base.width_multiplier * SSTAR_WIDTH_FACTOR;
    let ratio = count(nominal) / target;
    if (ratio - 1.0).abs() <= SSTAR_TOLERANCE {
        return TowerShape {
            width_multiplier: nominal,
            bottleneck_multiplier,
        };
    }
    const STEP: f64 = 1e-4;
    let mut steps = 1u64;
    let tuned = loop {
        let w = steps as f64 * STEP;
        if count(w) >= target || w > 16.0 * base.width_multiplier {
            break w;
        }
        steps += 1;
    };
    log::info!(
        "S*: width x{nominal:.4} gives {:.4} of TS-Net's parameters; tuned to x{tuned:.4} ({:.4})",
        ratio,
        count(tuned) / target
    );
    TowerShape {
        width_multiplier: tuned,
        bottleneck_multiplier,
    }
}

/// Consecutive metric-network layers starting at stage `start`
/// (0 = `fc1`, 1 = `fc2`, 2 = `fc3`). Relu follows `fc1` and `fc2`.
#[derive(Debug, Clone)]
pub struct MetricSegment {
    pub start: usize,
    pub layers: Vec<FcLayer>,
}

impl MetricSegment {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        from: usize,
        to: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dims = metric_dims(input_dim);
        let layers = (from..to)
            .map(|i| {
                FcLayer::new(
                    store,
                    &format!("{name}.fc{}", i + 1),
                    dims[i],
                    dims[i + 1],
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(MetricSegment {
            start: from,
            layers,
        })
    }

    pub fn end(&self) -> usize {
        self.start + self.layers.len()
    }

    /// Runs the segment, returning the activation after each layer.
    fn run<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<Vec<NodeId>> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if self.start + i < 2 {
                h = g.relu(h)?;
            }
            acts.push(h);
        }
        Ok(acts)
    }
}

impl Module for MetricSegment {
    fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }
}

/// A pair of towers (one shared tower for a Siamese stream) and the stream's
/// part of a metric network.
#[derive(Debug, Clone)]
pub struct Stream {
    pub tower_a: FeatureTower,
    /// `None` when both branches use `tower_a`.
    pub tower_b: Option<FeatureTower>,
    pub metric: MetricSegment,
}

impl Stream {
    pub fn is_shared(&self) -> bool {
        self.tower_b.is_none()
    }

    pub fn branch_a(&self) -> &FeatureTower {
        &self.tower_a
    }

    pub fn branch_b(&self) -> &FeatureTower {
        self.tower_b.as_ref().unwrap_or(&self.tower_a)
    }
}

impl Module for Stream {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.tower_a.param_ids();
        if let Some(b) = &self.tower_b {
            ids.extend(b.param_ids());
        }
        ids.extend(self.metric.param_ids());
        ids
    }
}

/// What a stream produced for a batch.
struct StreamOut {
    feats: (NodeId, NodeId),
    /// Activation at each metric stage: index 0 is the tower difference.
    stages: Vec<NodeId>,
}

impl StreamOut {
    fn logits(&self) -> Option<NodeId> {
        (self.stages.len() == 4).then(|| self.stages[3])
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    /// The single stream's own logits are final.
    Identity,
    /// Concatenated stream logits → 2 logits.
    Concat(FcLayer),
    /// Subtracted stream activations → remaining metric layers.
    Tail(MetricSegment),
}

/// Outputs of a forward pass on a batch of `B` pairs.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutputs {
    /// `[B, 2]` logits scored by the evaluator.
    pub logits_final: NodeId,
    /// `[B, 2]` Siamese-stream logits, when that stream has a head.
    pub logits_siam: Option<NodeId>,
    pub logits_pseudo: Option<NodeId>,
    /// `[B, d]` bottleneck features of the two Siamese branches.
    pub feat_siam: Option<(NodeId, NodeId)>,
    pub feat_pseudo: Option<(NodeId, NodeId)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub siam: Option<Stream>,
    pub pseudo: Option<Stream>,
    pub head: Head,
}

impl Model {
    /// Builds the variant, registering its parameters in `store`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        spec: ModelSpec,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let spec = ModelSpec {
            kind: spec.kind.canonical(),
            ..spec
        };
        let shape = spec.resolved_tower();
        let d = shape.bottleneck_dim();
        let stream = |store: &mut ParamStore<T>,
                      rng: &mut R,
                      name: &str,
                      shared: bool,
                      metric_end: usize|
         -> Result<Stream> {
            let (tower_a, tower_b) = if shared {
                (
                    FeatureTower::new(store, &format!("{name}.tower"), shape, rng)?,
                    None,
                )
            } else {
                (
                    FeatureTower::new(store, &format!("{name}.tower_a"), shape, rng)?,
                    Some(FeatureTower::new(
                        store,
                        &format!("{name}.tower_b"),
                        shape,
                        rng,
                    )?),
                )
            };
            let metric =
                MetricSegment::new(store, &format!("{name}.metric"), d, 0, metric_end, rng)?;
            Ok(Stream {
                tower_a,
                tower_b,
                metric,
            })
        };
        let model = match spec.kind {
            ModelKind::S | ModelKind::SStar => Model {
                spec,
                siam: Some(stream(store, rng, "siam", true, 3)?),
                pseudo: None,
                head: Head::Identity,
            },
            ModelKind::PS => Model {
                spec,
                siam: None,
                pseudo: Some(stream(store, rng, "pseudo", false, 3)?),
                head: Head::Identity,
            },
            ModelKind::TSNet => {
                let siam = stream(store, rng, "siam", true, 3)?;
                let pseudo = stream(store, rng, "pseudo", false, 3)?;
                let fusion = FcLayer::new(store, "fusion", 4, 2, rng)?;
                Model {
                    spec,
                    siam: Some(siam),
                    pseudo: Some(pseudo),
                    head: Head::Concat(fusion),
                }
            }
            ModelKind::TSNetFusionAt(p) => {
                let k = p.stage();
                let end = if spec.loss_mode == LossMode::ThreeEntropy {
                    3
                } else {
                    k
                };
                let siam = stream(store, rng, "siam", true, end)?;
                let pseudo = stream(store, rng, "pseudo", false, end)?;
                let tail = MetricSegment::new(store, "fused.metric", d, k, 3, rng)?;
                Model {
                    spec,
                    siam: Some(siam),
                    pseudo: Some(pseudo),
                    head: Head::Tail(tail),
                }
            }
        };
        Ok(model)
    }

    /// Forward pass on a batch: `x1[i]` and `x2[i]` are `1×64×64` patches.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x1: &[NodeId],
        x2: &[NodeId],
    ) -> Result<ForwardOutputs> {
        if x1.len() != x2.len() || x1.is_empty() {
            return Err(Error::contract(format!(
                "forward needs two equally sized non-empty batches, got {} and {}",
                x1.len(),
                x2.len()
            )));
        }
        let siam = self
            .siam
            .as_ref()
            .map(|s| run_stream(s, g, store, x1, x2))
            .transpose()?;
        let pseudo = self
            .pseudo
            .as_ref()
            .map(|s| run_stream(s, g, store, x1, x2))
            .transpose()?;
        let logits_siam = siam.as_ref().and_then(StreamOut::logits);
        let logits_pseudo = pseudo.as_ref().and_then(StreamOut::logits);
        let logits_final = match &self.head {
            Head::Identity => logits_siam
                .or(logits_pseudo)
                .ok_or_else(|| Error::contract("single-stream model without logits"))?,
            Head::Concat(fc) => {
                let (ls, lp) = logits_siam
                    .zip(logits_pseudo)
                    .ok_or_else(|| Error::contract("logit fusion needs both stream heads"))?;
                let cat = g.concat(ls, lp, 1)?;
                fc.forward(g, store, cat)?
            }
            Head::Tail(tail) => {
                let (s, p) = siam
                    .as_ref()
                    .zip(pseudo.as_ref())
                    .ok_or_else(|| Error::contract("mid-network fusion needs both streams"))?;
                let k = tail.start;
                let fused = g.sub(s.stages[k], p.stages[k])?;
                *tail
                    .run(g, store, fused)?
                    .last()
                    .ok_or_else(|| Error::contract("empty fused tail"))?
            }
        };
        Ok(ForwardOutputs {
            logits_final,
            logits_siam,
            logits_pseudo,
            feat_siam: siam.map(|s| s.feats),
            feat_pseudo: pseudo.map(|s| s.feats),
        })
    }

    /// Parameters read by each branch's tower, for every stream: `(A, B)`.
    pub fn branch_params(&self) -> Vec<(Vec<ParamId>, Vec<ParamId>)> {
        [&self.siam, &self.pseudo]
            .into_iter()
            .flatten()
            .map(|s| (s.branch_a().param_ids(), s.branch_b().param_ids()))
            .collect()
    }
}

impl Module for Model {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in [&self.siam, &self.pseudo].into_iter().flatten() {
            ids.extend(s.param_ids());
        }
        match &self.head {
            Head::Identity => {}
            Head::Concat(fc) => ids.extend(fc.param_ids()),
            Head::Tail(t) => ids.extend(t.param_ids()),
        }
        let mut seen = HashSet::new();
        ids.retain(|id| seen.insert(*id));
        ids
    }
}

fn run_stream<T: Real>(
    s: &Stream,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x1: &[NodeId],
    x2: &[NodeId],
) -> Result<StreamOut> {
    let mut fa = Vec::with_capacity(x1.len());
    let mut fb = Vec::with_capacity(x2.len());
    for (&a, &b) in x1.iter().zip(x2) {
        fa.push(s.branch_a().forward(g, store, a)?);
        fb.push(s.branch_b().forward(g, store, b)?);
    }
    let fa = g.stack(&fa)?;
    let fb = g.stack(&fb)?;
    let diff = g.sub(fa, fb)?;
    let mut stages = vec![diff];
    stages.extend(s.metric.run(g, store, diff)?);
    Ok(StreamOut {
        feats: (fa, fb),
        stages,
    })
}
