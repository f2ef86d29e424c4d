//! Finite-difference gradient checks shared by the gradient and acceptance
//! test targets.
//!
//! Every case builds a scalar (or reduced) output from its input tensors.
//! Reverse-mode gradients in `f32` and `f64` are compared against central
//! differences of the `f64` forward pass, evaluated at the same f32-rounded
//! point. Error is norm-wise relative over the probed coordinates.

#![allow(dead_code)]

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsnet_core::layers::{ConvLayer, FcLayer, FeatureTower, MetricNetwork, ParamStore, TowerShape};
use tsnet_core::losses::{combined_loss, contrastive, cross_entropy, LossWeights};
use tsnet_core::model::{FusionPoint, LossMode, Model, ModelKind, ModelSpec};
use tsnet_core::{Graph, NodeId, Real, Result, Tensor};

pub const TOL_F32: f64 = 1e-3;
pub const TOL_F64: f64 = 1e-5;
pub const INSTANCES: usize = 20;
const STEP: f64 = 1e-6;
const KINK_ABS: f64 = 1e-7;
const KINK_REL: f64 = 1e-5;
/// Largest tolerated fraction of kink-skipped coordinates per case.
pub const MAX_SKIPPED: f64 = 0.1;

pub trait Build {
    /// Output node and the node standing for each input tensor.
    fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        inputs: &[Tensor<T>],
    ) -> Result<(NodeId, Vec<NodeId>)>;
}

#[derive(Debug, Clone)]
pub struct Report {
    pub name: &'static str,
    /// Instances the case was asked to run.
    pub required: usize,
    pub instances: usize,
    pub max_err_f32: f64,
    pub max_err_f64: f64,
    pub probed: usize,
    pub skipped: usize,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.instances >= self.required
            && self.max_err_f32 < TOL_F32
            && self.max_err_f64 < TOL_F64
            && (self.skipped as f64) <= MAX_SKIPPED * self.probed as f64
    }
}

fn leaves<T: Real>(g: &mut Graph<T>, inputs: &[Tensor<T>]) -> Vec<NodeId> {
    inputs.iter().map(|t| g.leaf(t.clone(), true)).collect()
}

fn cast<U: Real>(ts: &[Tensor<f64>]) -> Vec<Tensor<U>> {
    ts.iter().map(|t| t.cast()).collect()
}

/// `sum(out ⊙ r)` for a fixed random `r`, or `out` itself when scalar.
fn reduced<T: Real, B: Build>(
    b: &B,
    g: &mut Graph<T>,
    inputs: &[Tensor<T>],
    r: &Option<Tensor<f64>>,
) -> (NodeId, Vec<NodeId>) {
    let (out, nodes) = b.build(g, inputs).expect("case builds");
    let loss = match r {
        None => out,
        Some(r) => {
            let c = g.constant(r.cast());
            let m = g.mul(out, c).unwrap();
            g.sum(m).unwrap()
        }
    };
    (loss, nodes)
}

fn analytic<T: Real, B: Build>(b: &B, x: &[Tensor<f64>], r: &Option<Tensor<f64>>) -> Vec<Vec<f64>> {
    let mut g = Graph::<T>::new();
    let (loss, nodes) = reduced(b, &mut g, &cast::<T>(x), r);
    g.backward(loss).unwrap();
    nodes
        .iter()
        .zip(x)
        .map(|(&n, t)| match g.grad(n) {
            Some(gr) => gr.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect()
}

fn loss_f64<B: Build>(b: &B, x: &[Tensor<f64>], r: &Option<Tensor<f64>>) -> f64 {
    let mut g = Graph::<f64>::inference();
    let (loss, _) = reduced(b, &mut g, x, r);
    g.value(loss).item()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub struct Probe {
    pub err_f32: f64,
    pub err_f64: f64,
    pub probed: usize,
    /// Coordinates dropped for straddling a kink.
    pub skipped: usize,
}

struct Point {
    x: Vec<Tensor<f64>>,
    r: Option<Tensor<f64>>,
    a32: Vec<Vec<f64>>,
    a64: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

/// Rounds `inputs` to f32 and computes both analytic gradients there.
fn prepare<B: Build>(b: &B, inputs: Vec<Tensor<f64>>, seed: u64) -> Point {
    let x: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| t.cast::<f32>().cast::<f64>())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let out_shape = {
        let mut g = Graph::<f64>::inference();
        let (o, _) = b.build(&mut g, &x).unwrap();
        g.shape(o).to_vec()
    };
    let r = (!out_shape.is_empty()).then(|| {
        let n = out_shape.iter().product::<usize>();
        Tensor::new(
            out_shape.clone(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    });
    let a32 = analytic::<f32, _>(b, &x, &r);
    let a64 = analytic::<f64, _>(b, &x, &r);
    Point {
        x,
        r,
        a32,
        a64,
        rng,
    }
}

/// Compares gradients on up to `probes` coordinates of every input.
pub fn check_instance<B: Build>(
    b: &B,
    inputs: Vec<Tensor<f64>>,
    probes: usize,
    seed: u64,
) -> Probe {
    let Point {
        x,
        r,
        a32,
        a64,
        mut rng,
    } = prepare(b, inputs, seed);
    let (mut v32, mut v64, mut vn) = (Vec::new(), Vec::new(), Vec::new());
    let mut skipped = 0;
    for (k, t) in x.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= probes {
            (0..n).collect()
        } else {
            sample(&mut rng, n, probes).into_vec()
        };
        for i in coords {
            let central = |h: f64| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k].data_mut()[i] += h;
                xm[k].data_mut()[i] -= h;
                (loss_f64(b, &xp, &r) - loss_f64(b, &xm, &r)) / (2.0 * h)
            };
            let n1 = central(STEP);
            let tol = KINK_ABS + KINK_REL * n1.abs();
            // On a mismatch, a disagreeing half step means a relu/maxpool
            // kink lies within the stencil; such points are skipped.
            if (a64[k][i] - n1).abs() > tol && (n1 - central(0.5 * STEP)).abs() > tol {
                skipped += 1;
                continue;
            }
            vn.push(n1);
            v32.push(a32[k][i]);
            v64.push(a64[k][i]);
        }
    }
    Probe {
        err_f32: rel_err(&v32, &vn),
        err_f64: rel_err(&v64, &vn),
        probed: vn.len() + skipped,
        skipped,
    }
}

/// Compares directional derivatives along `directions` random unit
/// directions spanning every input at once. Suited to cases with many
/// parameter tensors, where per-coordinate probing is too slow.
///
/// Each direction follows the sign pattern of the f64 gradient with random
/// magnitudes, so the derivative along it sums without cancellation and
/// relative errors are not inflated by a near-zero reference.
pub fn check_directions<B: Build>(
    b: &B,
    inputs: Vec<Tensor<f64>>,
    directions: usize,
    seed: u64,
) -> Probe {
    let Point {
        x,
        r,
        a32,
        a64,
        mut rng,
    } = prepare(b, inputs, seed);
    let (mut v32, mut v64, mut vn) = (Vec::new(), Vec::new(), Vec::new());
    let mut skipped = 0;
    for _ in 0..directions {
        let mut d: Vec<Vec<f64>> = a64
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&v| rng.gen_range(0.5..1.0) * if v < 0.0 { -1.0 } else { 1.0 })
                    .collect()
            })
            .collect();
        let norm = d.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().flatten().for_each(|v| *v /= norm);
        let dot = |a: &[Vec<f64>]| {
            a.iter()
                .zip(&d)
                .map(|(g, d)| g.iter().zip(d).map(|(g, d)| g * d).sum::<f64>())
                .sum::<f64>()
        };
        let central = |h: f64| {
            let shifted = |sign: f64| -> Vec<Tensor<f64>> {
                x.iter()
                    .zip(&d)
                    .map(|(t, d)| {
                        let mut t = t.clone();
                        for (v, dv) in t.data_mut().iter_mut().zip(d) {
                            *v += sign * h * dv;
                        }
                        t
                    })
                    .collect()
            };
            (loss_f64(b, &shifted(1.0), &r) - loss_f64(b, &shifted(-1.0), &r)) / (2.0 * h)
        };
        let (g32, g64) = (dot(&a32), dot(&a64));
        let n1 = central(STEP);
        let tol = KINK_ABS + KINK_REL * n1.abs();
        if (g64 - n1).abs() > tol && (n1 - central(0.5 * STEP)).abs() > tol {
            skipped += 1;
            continue;
        }
        vn.push(n1);
        v32.push(g32);
        v64.push(g64);
    }
    Probe {
        err_f32: rel_err(&v32, &vn),
        err_f64: rel_err(&v64, &vn),
        probed: vn.len() + skipped,
        skipped,
    }
}

pub fn run_case<B: Build>(
    name: &'static str,
    instances: usize,
    probes: usize,
    make: impl FnMut(&mut ChaCha8Rng) -> (B, Vec<Tensor<f64>>),
) -> Report {
    run_with(name, instances, make, |b, x, s| check_instance(b, x, probes, s))
}

pub fn run_directional<B: Build>(
    name: &'static str,
    instances: usize,
    directions: usize,
    make: impl FnMut(&mut ChaCha8Rng) -> (B, Vec<Tensor<f64>>),
) -> Report {
    run_with(name, instances, make, |b, x, s| {
        check_directions(b, x, directions, s)
    })
}

fn run_with<B: Build>(
    name: &'static str,
    instances: usize,
    mut make: impl FnMut(&mut ChaCha8Rng) -> (B, Vec<Tensor<f64>>),
    check: impl Fn(&B, Vec<Tensor<f64>>, u64) -> Probe,
) -> Report {
    let mut rep = Report {
        name,
        required: instances,
        instances: 0,
        max_err_f32: 0.0,
        max_err_f64: 0.0,
        probed: 0,
        skipped: 0,
    };
    for s in 0..instances as u64 {
        let mut rng =
            ChaCha8Rng::seed_from_u64(s.wrapping_mul(7919).wrapping_add(name.len() as u64));
        let (b, x) = make(&mut rng);
        let p = check(&b, x, s);
        rep.max_err_f32 = rep.max_err_f32.max(p.err_f32);
        rep.max_err_f64 = rep.max_err_f64.max(p.err_f64);
        rep.probed += p.probed;
        rep.skipped += p.skipped;
        rep.instances += 1;
    }
    rep
}

// ---- input generators ---------------------------------------------------

fn map_mut(t: &Tensor<f64>, mut f: impl FnMut(f64) -> f64) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Entries with `|v| ∈ [margin, 1]`, random sign: clear of a kink at 0.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A shuffled grid with spacing 0.05: no two entries are close.
pub fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ---- cases ---------------------------------------------------------------

macro_rules! op_case {
    ($name:ident, |$g:ident, $v:ident| $body:expr) => {
        pub struct $name;
        impl Build for $name {
            fn build<T: Real>(
                &self,
                $g: &mut Graph<T>,
                inputs: &[Tensor<T>],
            ) -> Result<(NodeId, Vec<NodeId>)> {
                let $v = leaves($g, inputs);
                let out = $body?;
                Ok((out, $v))
            }
        }
    };
}

op_case!(MatMul, |g, v| g.matmul(v[0], v[1]));
op_case!(Linear, |g, v| g.linear(v[0], v[1], v[2]));
op_case!(MaxPool, |g, v| g.maxpool2(v[0]));
op_case!(Relu, |g, v| g.relu(v[0]));
op_case!(Softmax, |g, v| g.softmax2(v[0]));
op_case!(Add, |g, v| g.add(v[0], v[1]));
op_case!(Sub, |g, v| g.sub(v[0], v[1]));
op_case!(Mul, |g, v| g.mul(v[0], v[1]));
op_case!(Scale, |g, v| g.scale(v[0], T::from_f64_lossy(-1.7)));
op_case!(AddScalar, |g, v| g.add_scalar(v[0], T::from_f64_lossy(0.3)));
op_case!(ConcatRows, |g, v| g.concat(v[0], v[1], 0));
op_case!(ConcatCols, |g, v| g.concat(v[0], v[1], 1));
op_case!(Reshape, |g, v| {
    let n = g.value(v[0]).numel();
    g.reshape(v[0], &[n])
});
op_case!(Select, |g, v| g.select(v[0], 1));
op_case!(Row, |g, v| g.row(v[0], 1));
op_case!(Stack, |g, v| g.stack(&v));
op_case!(Sum, |g, v| g.sum(v[0]));
op_case!(Mean, |g, v| g.mean(v[0]));
op_case!(L2NormSq, |g, v| g.l2norm_sq(v[0]));
op_case!(Norm2, |g, v| g.norm2(v[0]));
op_case!(L2Normalize, |g, v| g.l2_normalize(v[0]));
op_case!(Exp, |g, v| g.exp(v[0]));
op_case!(Ln, |g, v| g.ln(v[0]));
op_case!(Clamp, |g, v| g.clamp(
    v[0],
    T::from_f64_lossy(-0.5),
    T::from_f64_lossy(0.5)
));
op_case!(AddAll, |g, v| g.add_all(&v));

pub struct Conv2d {
    pub stride: usize,
    pub padding: usize,
}

impl Build for Conv2d {
    fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        inputs: &[Tensor<T>],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let v = leaves(g, inputs);
        let out = g.conv2d(v[0], v[1], v[2], self.stride, self.padding)?;
        Ok((out, v))
    }
}

/// Writes `values` into the store in iteration order and returns the
/// parameter nodes, creating them if the forward pass did not.
fn load_store<T: Real>(store: &mut ParamStore<T>, values: &[Tensor<T>]) {
    assert_eq!(store.len(), values.len(), "parameter tensor count");
    for (p, v) in store.iter_mut().zip(values) {
        assert_eq!(p.value.shape(), v.shape());
        p.value = v.clone();
    }
}

fn param_nodes<T: Real>(store: &ParamStore<T>, g: &mut Graph<T>) -> Vec<NodeId> {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    ids.into_iter().map(|id| store.node(g, id)).collect()
}

pub struct ConvLayerCase {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Build for ConvLayerCase {
    fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        inputs: &[Tensor<T>],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let mut store = ParamStore::new();
        let layer = ConvLayer::new(
            &mut store,
            "conv",
            self.c_in,
            self.c_out,
            self.kernel,
            self.stride,
            self.padding,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        load_store(&mut store, &inputs[1..]);
        let x = g.leaf(inputs[0].clone(), true);
        let out = layer.forward(g, &store, x)?;
        let mut nodes = vec![x];
        nodes.extend(param_nodes(&store, g));
        Ok((out, nodes))
    }
}

pub struct FcLayerCase {
    pub n_in: usize,
    pub n_out: usize,
}

impl Build for FcLayerCase {
    fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        inputs: &[Tensor<T>],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let mut store = ParamStore::new();
        let layer = FcLayer::new(
            &mut store,
            "fc",
            self.n_in,
            self.n_out,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        load_store(&mut store, &inputs[1..]);
        let x = g.leaf(inputs[0].clone(), true);
        let out = layer.forward(g, &store, x)?;
        let mut nodes = vec![x];
        nodes.extend(param_nodes(&store, g));
        Ok((out, nodes))
    }
}

pub const SMALL_TOWER: TowerShape = TowerShape {
    width_multiplier: 0.1,
    bottleneck_multiplier: 0.25,
};

pub struct TowerCase;

impl Build for TowerCase {
    fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        inputs: &[Tensor<T>],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let mut store = ParamStore::new();
        let tower = FeatureTower::new(
            &mut store,
            "tower",
            SMALL_TOWER,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        load_store(&mut store, &inputs[1..]);
        let x = g.leaf(inputs[0].clone(), true);
        let out = tower.forward(g, &store, x)?;
        let mut nodes = vec![x];
        nodes.extend(param_nodes(&store, g));
        Ok((out, nodes))
    }
}

pub struct MetricCase {
    pub input_dim: usize,
}

impl Build for MetricCase {
    fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        inputs: &[Tensor<T>],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let mut store = ParamStore::new();
        let net = MetricNetwork::new(
            &mut store,
            "metric",
            self.input_dim,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        load_store(&mut store, &inputs[1..]);
        let x = g.leaf(inputs[0].clone(), true);
        let out = net.forward(g, &store, x)?;
        let mut nodes = vec![x];
        nodes.extend(param_nodes(&store, g));
        Ok((out, nodes))
    }
}

pub struct CrossEntropyCase {
    pub label: u8,
}

impl Build for CrossEntropyCase {
    fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        inputs: &[Tensor<T>],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let v = leaves(g, inputs);
        Ok((cross_entropy(g, v[0], self.label)?, v))
    }
}

pub struct ContrastiveCase {
    pub label: u8,
    pub q: f64,
    pub normalize: bool,
}

impl Build for ContrastiveCase {
    fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        inputs: &[Tensor<T>],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let v = leaves(g, inputs);
        Ok((
            contrastive(g, v[0], v[1], self.label, self.q, self.normalize)?,
            v,
        ))
    }
}

/// Full objective of a small model on a two-pair batch.
pub struct ModelCase {
    pub spec: ModelSpec,
    pub labels: Vec<u8>,
    pub weights: LossWeights,
}

impl Build for ModelCase {
    fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        inputs: &[Tensor<T>],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let b = self.labels.len();
        let mut store = ParamStore::new();
        let model = Model::new(self.spec, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        load_store(&mut store, &inputs[2 * b..]);
        let x = leaves(g, &inputs[..2 * b]);
        let out = model.forward(g, &store, &x[..b], &x[b..])?;
        let obj = combined_loss(
            g,
            &out,
            &self.labels,
            &self.weights,
            self.spec.kind,
            self.spec.loss_mode,
        )?;
        let mut nodes = x;
        nodes.extend(param_nodes(&store, g));
        Ok((obj.total, nodes))
    }
}

/// Initial parameters of `build_store`, jittered so biases differ.
fn jittered_params(store: ParamStore<f64>, rng: &mut impl Rng, jitter: f64) -> Vec<Tensor<f64>> {
    store
        .iter()
        .map(|(_, p)| map_mut(&p.value, |v| v + rng.gen_range(-jitter..jitter)))
        .collect()
}

fn patch(rng: &mut impl Rng) -> Tensor<f64> {
    uniform(rng, &[1, 64, 64], -1.0, 1.0)
}

// ---- the suite -----------------------------------------------------------

fn small_dims(rng: &mut impl Rng) -> (usize, usize, usize) {
    (
        rng.gen_range(1..5),
        rng.gen_range(1..6),
        rng.gen_range(1..5),
    )
}

/// Graph operations.
pub fn op_reports(instances: usize) -> Vec<Report> {
    let mut r = Vec::new();
    r.push(run_case("matmul", instances, 64, |rng| {
        let (m, k, n) = small_dims(rng);
        (
            MatMul,
            vec![
                uniform(rng, &[m, k], -1.0, 1.0),
                uniform(rng, &[k, n], -1.0, 1.0),
            ],
        )
    }));
    r.push(run_case("linear", instances, 64, |rng| {
        let (b, i, o) = small_dims(rng);
        let x = if rng.gen_bool(0.5) {
            uniform(rng, &[i], -1.0, 1.0)
        } else {
            uniform(rng, &[b, i], -1.0, 1.0)
        };
        (
            Linear,
            vec![
                x,
                uniform(rng, &[o, i], -1.0, 1.0),
                uniform(rng, &[o], -1.0, 1.0),
            ],
        )
    }));
    r.push(run_case("conv2d", instances, 48, |rng| {
        let c_in = rng.gen_range(1..4);
        let c_out = rng.gen_range(1..4);
        let k = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..3);
        let h = rng.gen_range(k.max(3)..8);
        let w = rng.gen_range(k.max(3)..8);
        (
            Conv2d { stride, padding },
            vec![
                uniform(rng, &[c_in, h, w], -1.0, 1.0),
                uniform(rng, &[c_out, c_in, k, k], -1.0, 1.0),
                uniform(rng, &[c_out], -1.0, 1.0),
            ],
        )
    }));
    r.push(run_case("maxpool2", instances, 64, |rng| {
        let c = rng.gen_range(1..4);
        let (h, w) = (2 * rng.gen_range(1..4), 2 * rng.gen_range(1..4));
        (MaxPool, vec![distinct(rng, &[c, h, w])])
    }));
    r.push(run_case("relu", instances, 64, |rng| {
        let n = rng.gen_range(1..30);
        (Relu, vec![away_from_zero(rng, &[n], 0.05)])
    }));
    r.push(run_case("softmax2", instances, 2, |rng| {
        (Softmax, vec![uniform(rng, &[2], -4.0, 4.0)])
    }));
    fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let (a, b, _) = small_dims(rng);
        vec![
            uniform(rng, &[a, b], -1.0, 1.0),
            uniform(rng, &[a, b], -1.0, 1.0),
        ]
    }
    r.push(run_case("add", instances, 32, |rng| (Add, pair(rng))));
    r.push(run_case("sub", instances, 32, |rng| (Sub, pair(rng))));
    r.push(run_case("mul", instances, 32, |rng| (Mul, pair(rng))));
    r.push(run_case("scale", instances, 32, |rng| {
        (Scale, vec![uniform(rng, &[7], -2.0, 2.0)])
    }));
    r.push(run_case("add_scalar", instances, 32, |rng| {
        (AddScalar, vec![uniform(rng, &[5], -2.0, 2.0)])
    }));
    r.push(run_case("concat axis 0", instances, 32, |rng| {
        let (a, b, c) = small_dims(rng);
        (
            ConcatRows,
            vec![
                uniform(rng, &[a, c], -1.0, 1.0),
                uniform(rng, &[b, c], -1.0, 1.0),
            ],
        )
    }));
    r.push(run_case("concat axis 1", instances, 32, |rng| {
        let (a, b, c) = small_dims(rng);
        (
            ConcatCols,
            vec![
                uniform(rng, &[c, a], -1.0, 1.0),
                uniform(rng, &[c, b], -1.0, 1.0),
            ],
        )
    }));
    r.push(run_case("reshape", instances, 32, |rng| {
        let (a, b, _) = small_dims(rng);
        (Reshape, vec![uniform(rng, &[a, b + 1], -1.0, 1.0)])
    }));
    r.push(run_case("select", instances, 32, |rng| {
        (
            Select,
            vec![{
                let n = rng.gen_range(2..9);
                uniform(rng, &[n], -1.0, 1.0)
            }],
        )
    }));
    r.push(run_case("row", instances, 32, |rng| {
        let (a, b, _) = small_dims(rng);
        (Row, vec![uniform(rng, &[a + 1, b, 2], -1.0, 1.0)])
    }));
    r.push(run_case("stack", instances, 32, |rng| {
        let (n, d, _) = small_dims(rng);
        (
            Stack,
            (0..n).map(|_| uniform(rng, &[d], -1.0, 1.0)).collect(),
        )
    }));
    r.push(run_case("sum", instances, 32, |rng| {
        (
            Sum,
            vec![{
                let n = rng.gen_range(1..6);
                uniform(rng, &[3, n], -1.0, 1.0)
            }],
        )
    }));
    r.push(run_case("mean", instances, 32, |rng| {
        (
            Mean,
            vec![{
                let n = rng.gen_range(1..12);
                uniform(rng, &[n], -1.0, 1.0)
            }],
        )
    }));
    r.push(run_case("l2norm_sq", instances, 32, |rng| {
        (
            L2NormSq,
            vec![{
                let n = rng.gen_range(1..12);
                uniform(rng, &[n], -1.0, 1.0)
            }],
        )
    }));
    r.push(run_case("norm2", instances, 32, |rng| {
        (
            Norm2,
            vec![{
                let n = rng.gen_range(1..12);
                away_from_zero(rng, &[n], 0.1)
            }],
        )
    }));
    r.push(run_case("l2_normalize", instances, 32, |rng| {
        (
            L2Normalize,
            vec![{
                let n = rng.gen_range(1..12);
                away_from_zero(rng, &[n], 0.1)
            }],
        )
    }));
    r.push(run_case("exp", instances, 32, |rng| {
        (Exp, vec![uniform(rng, &[6], -2.0, 2.0)])
    }));
    r.push(run_case("ln", instances, 32, |rng| {
        (Ln, vec![uniform(rng, &[6], 0.2, 3.0)])
    }));
    r.push(run_case("clamp", instances, 32, |rng| {
        // Entries stay clear of both bounds.
        let data = (0..12)
            .map(|_| match rng.gen_range(0..3) {
                0 => rng.gen_range(-1.0..-0.6),
                1 => rng.gen_range(-0.4..0.4),
                _ => rng.gen_range(0.6..1.0),
            })
            .collect();
        let t = Tensor::new(vec![12], data).unwrap();
        (Clamp, vec![t])
    }));
    r.push(run_case("add_all", instances, 8, |rng| {
        (
            AddAll,
            (0..rng.gen_range(1..6))
                .map(|_| uniform(rng, &[], -1.0, 1.0))
                .collect(),
        )
    }));
    r
}

/// Layers and sub-networks with their parameters.
pub fn layer_reports(instances: usize) -> Vec<Report> {
    let mut r = Vec::new();
    r.push(run_case("ConvLayer", instances, 32, |rng| {
        let case = ConvLayerCase {
            c_in: rng.gen_range(1..4),
            c_out: rng.gen_range(1..4),
            kernel: [1, 3, 5][rng.gen_range(0..3)],
            stride: rng.gen_range(1..3),
            padding: rng.gen_range(0..3),
        };
        let side = rng.gen_range(case.kernel.max(4)..9);
        let x = vec![
            uniform(rng, &[case.c_in, side, side], -1.0, 1.0),
            uniform(
                rng,
                &[case.c_out, case.c_in, case.kernel, case.kernel],
                -1.0,
                1.0,
            ),
            uniform(rng, &[case.c_out], -1.0, 1.0),
        ];
        (case, x)
    }));
    r.push(run_case("FcLayer", instances, 32, |rng| {
        let case = FcLayerCase {
            n_in: rng.gen_range(1..20),
            n_out: rng.gen_range(1..10),
        };
        let batch = rng.gen_range(1..4);
        let x = vec![
            uniform(rng, &[batch, case.n_in], -1.0, 1.0),
            uniform(rng, &[case.n_out, case.n_in], -1.0, 1.0),
            uniform(rng, &[case.n_out], -1.0, 1.0),
        ];
        (case, x)
    }));
    r.push(run_case("FeatureTower", instances, 10, |rng| {
        let mut store = ParamStore::<f64>::new();
        FeatureTower::new(&mut store, "tower", SMALL_TOWER, rng).unwrap();
        let mut x = vec![patch(rng)];
        x.extend(jittered_params(store, rng, 0.02));
        (TowerCase, x)
    }));
    r.push(run_case("MetricNetwork", instances, 10, |rng| {
        let d = rng.gen_range(4..40);
        let mut store = ParamStore::<f64>::new();
        // Larger weights than the initializer so the signal reaches the logits.
        MetricNetwork::new(&mut store, "metric", d, rng).unwrap();
        let mut x = vec![{
            let n = rng.gen_range(1..3);
            uniform(rng, &[n, d], -1.0, 1.0)
        }];
        x.extend(
            store
                .iter()
                .map(|(_, p)| map_mut(&p.value, |_| rng.gen_range(-0.15..0.15)))
                .collect::<Vec<_>>(),
        );
        (MetricCase { input_dim: d }, x)
    }));
    r
}

/// Both losses, and the combined objective of each model family.
pub fn loss_reports(instances: usize) -> Vec<Report> {
    let mut r = Vec::new();
    r.push(run_case("cross_entropy", instances, 2, |rng| {
        let label = rng.gen_range(0..2u8);
        (
            CrossEntropyCase { label },
            vec![uniform(rng, &[2], -3.0, 3.0)],
        )
    }));
    r.push(run_case("contrastive", instances, 32, |rng| {
        let d = rng.gen_range(2..16);
        let case = ContrastiveCase {
            label: rng.gen_range(0..2u8),
            q: [1.0, 5.0, 50.0][rng.gen_range(0..3)],
            normalize: rng.gen_bool(0.3),
        };
        let f1 = uniform(rng, &[d], -1.0, 1.0);
        // Keep the pair apart: D = 0 is a kink of the negative term.
        let f2 = map_mut(&f1, |v| v + if rng.gen_bool(0.5) { 0.3 } else { -0.3 });
        (case, vec![f1, f2])
    }));
    r
}

/// Combined objective of each model family, along random directions.
pub fn objective_reports(instances: usize) -> Vec<Report> {
    let mut r = Vec::new();
    let specs = [
        ("objective S", ModelKind::S, LossMode::ThreeEntropy),
        ("objective PS", ModelKind::PS, LossMode::ThreeEntropy),
        ("objective TS-Net", ModelKind::TSNet, LossMode::ThreeEntropy),
        (
            "objective TS-Net fused at FC1",
            ModelKind::TSNetFusionAt(FusionPoint::Fc1),
            LossMode::ThreeEntropy,
        ),
        (
            "objective TS-Net fused at the tower",
            ModelKind::TSNetFusionAt(FusionPoint::FeatureTower),
            LossMode::OneEntropy,
        ),
    ];
    for (name, kind, mode) in specs {
        r.push(run_directional(name, instances, 4, |rng| {
            let spec = ModelSpec {
                kind,
                loss_mode: mode,
                tower: SMALL_TOWER,
            };
            let mut store = ParamStore::<f64>::new();
            Model::new(spec, &mut store, rng).unwrap();
            let labels = vec![1, 0];
            let mut x: Vec<Tensor<f64>> = (0..4).map(|_| patch(rng)).collect();
            x.extend(jittered_params(store, rng, 0.02));
            let weights = LossWeights {
                lambda: 0.01,
                beta: 0.01,
                q: 5.0,
                normalize_features: false,
            };
            (
                ModelCase {
                    spec,
                    labels,
                    weights,
                },
                x,
            )
        }));
    }
    r
}

pub fn all_reports(instances: usize) -> Vec<Report> {
    let mut r = op_reports(instances);
    r.extend(layer_reports(instances));
    r.extend(loss_reports(instances));
    r.extend(objective_reports(instances));
    r
}
