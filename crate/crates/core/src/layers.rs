//! Parameterized layers: convolution, fully connected, the feature tower and
//! the metric network.
//!
//! Layers only hold [`ParamId`]s; the weights themselves live in a
//! [`ParamStore`]. Two models sharing a tower therefore share storage, and a
//! forward pass records each parameter once on the graph.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Real, Tensor};

/// Patch side length expected by every tower.
pub const PATCH_SIZE: usize = 64;
/// Bottleneck width before any multiplier.
pub const BOTTLENECK_DIM: usize = 128;
/// Hidden widths of the metric network.
pub const METRIC_HIDDEN: usize = 512;
/// Initial value of every bias.
pub const BIAS_INIT: f64 = 0.1;
/// Standard deviation of the fully connected weight init.
pub const FC_INIT_STDDEV: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Flat, ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Records parameter `id` on `g` (once per graph).
    pub fn node(&self, g: &mut Graph<T>, id: ParamId) -> NodeId {
        g.param(id.0, &self.params[id.0].value)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `scale ·` the parameter gradients recorded on `g` into `grad`.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, scale: T) {
        for (key, grad) in g.param_grads() {
            let p = &mut self.params[key];
            match &mut p.grad {
                Some(acc) => {
                    for (a, &v) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a = *a + scale * v;
                    }
                }
                slot @ None => *slot = Some(grad.map(|v| scale * v)),
            }
        }
    }

    /// Copies the store into another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }
}

/// Anything owning parameters.
pub trait Module {
    fn param_ids(&self) -> Vec<ParamId>;
}

/// Exact number of scalar parameters (weights and biases) of `module`.
/// Parameters referenced more than once are counted once.
pub fn count_parameters<T: Real>(store: &ParamStore<T>, module: &dyn Module) -> usize {
    let mut ids = module.param_ids();
    ids.sort();
    ids.dedup();
    ids.iter().map(|&id| store.get(id).value.numel()).sum()
}

/// Uniform Glorot init in `±sqrt(6 / (fan_in + fan_out))`; trailing extents
/// beyond the first two count as receptive field.
pub fn init_xavier<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    if shape.len() < 2 {
        return Err(Error::contract(format!(
            "xavier init needs at least two extents, got {shape:?}"
        )));
    }
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Normal draws with samples beyond two standard deviations redrawn.
pub fn init_truncated_normal<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    stddev: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let dist = Normal::new(0.0, stddev).map_err(|e| Error::contract(e.to_string()))?;
    let data = (0..shape.iter().product::<usize>())
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * stddev {
                break T::from_f64_lossy(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = init_xavier(&[out_channels, in_channels, kernel, kernel], rng)?;
        let b = Tensor::full(vec![out_channels], T::from_f64_lossy(BIAS_INIT));
        Ok(ConvLayer {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = store.node(g, self.weight);
        let b = store.node(g, self.bias);
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl Module for ConvLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct FcLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl FcLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = init_truncated_normal(&[out_features, in_features], FC_INIT_STDDEV, rng)?;
        let b = Tensor::full(vec![out_features], T::from_f64_lossy(BIAS_INIT));
        Ok(FcLayer {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_features,
            out_features,
        })
    }

    /// `W·x + b` for a vector `[in]` or each row of a batch `[B, in]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        if g.shape(x).last() != Some(&self.in_features) {
            return Err(Error::dim("fc", g.shape(x), &[self.in_features]));
        }
        let w = store.node(g, self.weight);
        let b = store.node(g, self.bias);
        g.linear(x, w, b)
    }
}

impl Module for FcLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// One convolution of the tower plan.
#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    kernel: usize,
    channels: usize,
    padding: usize,
    pool_after: bool,
}

/// MatchNet-style tower: three 2× poolings take 64×64 down to 8×8.
const TOWER_PLAN: [ConvSpec; 5] = [
    ConvSpec {
        kernel: 7,
        channels: 24,
        padding: 3,
        pool_after: true,
    },
    ConvSpec {
        kernel: 5,
        channels: 64,
        padding: 2,
        pool_after: true,
    },
    ConvSpec {
        kernel: 3,
        channels: 96,
        padding: 1,
        pool_after: false,
    },
    ConvSpec {
        kernel: 3,
        channels: 96,
        padding: 1,
        pool_after: false,
    },
    ConvSpec {
        kernel: 3,
        channels: 64,
        padding: 1,
        pool_after: true,
    },
];

/// Width knobs of a [`FeatureTower`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TowerShape {
    /// Scales every convolution's channel count (rounded, at least 1).
    pub width_multiplier: f64,
    /// Scales the bottleneck dimension.
    pub bottleneck_multiplier: f64,
}

impl Default for TowerShape {
    fn default() -> Self {
        TowerShape {
            width_multiplier: 1.0,
            bottleneck_multiplier: 1.0,
        }
    }
}

impl TowerShape {
    pub fn channels(&self) -> Vec<usize> {
        TOWER_PLAN
            .iter()
            .map(|s| scale_width(s.channels, self.width_multiplier))
            .collect()
    }

    pub fn bottleneck_dim(&self) -> usize {
        scale_width(BOTTLENECK_DIM, self.bottleneck_multiplier)
    }

    /// Scalar parameter count of a tower of this shape, without building it.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let (mut in_ch, mut side) = (1, PATCH_SIZE);
        for (spec, ch) in TOWER_PLAN.iter().zip(self.channels()) {
            total += ch * in_ch * spec.kernel * spec.kernel + ch;
            in_ch = ch;
            if spec.pool_after {
                side /= 2;
            }
        }
        let bd = self.bottleneck_dim();
        total + in_ch * side * side * bd + bd
    }
}

/// Scalar parameter count of a [`MetricNetwork`] with the given input width.
pub fn metric_param_count(input_dim: usize) -> usize {
    let h = METRIC_HIDDEN;
    (input_dim * h + h) + (h * h + h) + (h * 2 + 2)
}

fn scale_width(base: usize, m: f64) -> usize {
    ((base as f64 * m).round() as usize).max(1)
}

/// Convolution/pooling stack ending in a linear bottleneck.
#[derive(Debug, Clone)]
pub struct FeatureTower {
    pub convs: Vec<(ConvLayer, bool)>,
    pub bottleneck: FcLayer,
    pub shape: TowerShape,
}

impl FeatureTower {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: TowerShape,
        rng: &mut R,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(TOWER_PLAN.len());
        let mut in_ch = 1;
        let mut side = PATCH_SIZE;
        for (i, (spec, ch)) in TOWER_PLAN.iter().zip(shape.channels()).enumerate() {
            let layer = ConvLayer::new(
                store,
                &format!("{name}.conv{}", i + 1),
                in_ch,
                ch,
                spec.kernel,
                1,
                spec.padding,
                rng,
            )?;
            convs.push((layer, spec.pool_after));
            in_ch = ch;
            if spec.pool_after {
                side /= 2;
            }
        }
        let flat = in_ch * side * side;
        let bottleneck = FcLayer::new(
            store,
            &format!("{name}.bottleneck"),
            flat,
            shape.bottleneck_dim(),
            rng,
        )?;
        Ok(FeatureTower {
            convs,
            bottleneck,
            shape,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.bottleneck.out_features
    }

    /// Maps a `1×64×64` patch to its bottleneck descriptor.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patch: NodeId,
    ) -> Result<NodeId> {
        let expected = [1, PATCH_SIZE, PATCH_SIZE];
        if g.shape(patch) != expected {
            return Err(Error::dim("tower input", g.shape(patch), &expected));
        }
        let mut h = patch;
        for (conv, pool) in &self.convs {
            h = conv.forward(g, store, h)?;
            h = g.relu(h)?;
            if *pool {
                h = g.maxpool2(h)?;
            }
        }
        let n = g.value(h).numel();
        let flat = g.reshape(h, &[n])?;
        self.bottleneck.forward(g, store, flat)
    }
}

impl Module for FeatureTower {
    fn param_ids(&self) -> Vec<ParamId> {
        self.convs
            .iter()
            .flat_map(|(c, _)| c.param_ids())
            .chain(self.bottleneck.param_ids())
            .collect()
    }
}

/// Three fully connected layers ending in two logits.
#[derive(Debug, Clone)]
pub struct MetricNetwork {
    pub fc1: FcLayer,
    pub fc2: FcLayer,
    pub fc3: FcLayer,
}

/// Metric-network stage after which an intermediate activation is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricStage {
    Input,
    Fc1,
    Fc2,
}

impl MetricNetwork {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(MetricNetwork {
            fc1: FcLayer::new(store, &format!("{name}.fc1"), input_dim, METRIC_HIDDEN, rng)?,
            fc2: FcLayer::new(
                store,
                &format!("{name}.fc2"),
                METRIC_HIDDEN,
                METRIC_HIDDEN,
                rng,
            )?,
            fc3: FcLayer::new(store, &format!("{name}.fc3"), METRIC_HIDDEN, 2, rng)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.in_features
    }

    /// Raw two-logit output.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v: NodeId,
    ) -> Result<NodeId> {
        self.forward_from(g, store, v, MetricStage::Input)
    }

    /// Activation after `fc1` (post-relu).
    pub fn fc1_activation<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v: NodeId,
    ) -> Result<NodeId> {
        let h = self.fc1.forward(g, store, v)?;
        g.relu(h)
    }

    /// Activation after `fc2` (post-relu), given the `fc1` activation.
    pub fn fc2_activation<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h1: NodeId,
    ) -> Result<NodeId> {
        let h = self.fc2.forward(g, store, h1)?;
        g.relu(h)
    }

    /// Runs the layers remaining after `stage`, with `v` the activation there.
    pub fn forward_from<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v: NodeId,
        stage: MetricStage,
    ) -> Result<NodeId> {
        let mut h = v;
        if stage == MetricStage::Input {
            h = self.fc1_activation(g, store, h)?;
        }
        if stage != MetricStage::Fc2 {
            h = self.fc2_activation(g, store, h)?;
        }
        self.fc3.forward(g, store, h)
    }
}

impl Module for MetricNetwork {
    fn param_ids(&self) -> Vec<ParamId> {
        [&self.fc1, &self.fc2, &self.fc3]
            .into_iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }
}

impl Module for [&dyn Module] {
    fn param_ids(&self) -> Vec<ParamId> {
        self.iter().flat_map(|m| m.param_ids()).collect()
    }
}
