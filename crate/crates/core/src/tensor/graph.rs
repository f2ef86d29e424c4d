use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Linear,
    Conv2d,
    MaxPool2,
    Relu,
    Softmax2,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Concat,
    Stack,
    Row,
    Reshape,
    Select,
    Sum,
    Mean,
    L2NormSq,
    Norm2,
    L2Normalize,
    Exp,
    Ln,
    Clamp,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        rows: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
        // unfolded input, reused by backward as the input-gradient buffer
        col: Vec<T>,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Relu(NodeId),
    Softmax2(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Concat {
        a: NodeId,
        b: NodeId,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Stack(Vec<NodeId>),
    Row(NodeId, usize),
    Reshape(NodeId),
    Select(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    L2NormSq(NodeId),
    Norm2(NodeId),
    L2Normalize(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Clamp {
        x: NodeId,
        lo: T,
        hi: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax2(_) => OpKind::Softmax2,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Concat { .. } => OpKind::Concat,
            Op::Stack(_) => OpKind::Stack,
            Op::Row(..) => OpKind::Row,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Select(..) => OpKind::Select,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::L2NormSq(_) => OpKind::L2NormSq,
            Op::Norm2(_) => OpKind::Norm2,
            Op::L2Normalize(_) => OpKind::L2Normalize,
            Op::Exp(_) => OpKind::Exp,
            Op::Ln(_) => OpKind::Ln,
            Op::Clamp { .. } => OpKind::Clamp,
        }
    }
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Denominator floor used wherever a Euclidean norm is differentiated.
pub const NORM_EPS: f64 = 1e-12;

/// A tape of tensor operations recorded in execution order.
///
/// Nodes are appended by each op, so the node list is already topologically
/// sorted; [`Graph::backward`] walks it once in reverse.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, NodeId>,
    grads: Vec<Option<Tensor<T>>>,
    track_params: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            track_params: true,
        }
    }

    /// A graph whose parameters never require gradients. Forward values are
    /// identical to [`Graph::new`]; no backward buffers are retained.
    pub fn inference() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Records a leaf holding `value`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// Records the parameter identified by `key`, or returns the node it was
    /// already recorded under. Every consumer of a shared parameter therefore
    /// reads one leaf, and backward sums their contributions there.
    pub fn param(&mut self, key: usize, value: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        let id = self.leaf(value.clone(), self.track_params);
        self.params.insert(key, id);
        id
    }

    pub fn param_node(&self, key: usize) -> Option<NodeId> {
        self.params.get(&key).copied()
    }

    /// Gradients of every recorded parameter, keyed as passed to [`Graph::param`].
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|(&key, &id)| self.grad(id).map(|g| (key, g)))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[NodeId],
    ) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: NodeId,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        let value = self.value(x).map(f);
        self.push_op(name, value, op, &[x])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            T::zero(),
        );
        self.push_op(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// Affine map `x·wᵀ + b` with `w` of shape `out×in`.
    ///
    /// `x` is either a vector `[in]` (giving `[out]`) or a batch `[B, in]`
    /// (giving `[B, out]`, the bias added to every row).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let (rows, inner, batched) = match *sx {
            [n] => (1, n, false),
            [r, n] => (r, n, true),
            _ => return Err(Error::dim("linear", sx, sw)),
        };
        if sw.len() != 2 || sw[1] != inner {
            return Err(Error::dim("linear", sx, sw));
        }
        let out_f = sw[0];
        if sb != [out_f] {
            return Err(Error::dim("linear bias", sb, &sw[..1]));
        }
        let mut out = Vec::with_capacity(rows * out_f);
        for _ in 0..rows {
            out.extend_from_slice(self.value(b).data());
        }
        kernels::gemm(
            rows,
            inner,
            out_f,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            T::one(),
        );
        let shape = if batched {
            vec![rows, out_f]
        } else {
            vec![out_f]
        };
        self.push_op(
            "linear",
            Tensor::from_parts(shape, out),
            Op::Linear { x, w, b, rows },
            &[x, w, b],
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = items
            .split_first()
            .ok_or_else(|| Error::contract("stack needs at least one tensor"))?;
        let inner = self.shape(first).to_vec();
        for &it in rest {
            if self.shape(it) != inner.as_slice() {
                return Err(Error::dim("stack", &inner, self.shape(it)));
            }
        }
        let mut data = Vec::with_capacity(items.len() * self.value(first).numel());
        for &it in items {
            data.extend_from_slice(self.value(it).data());
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        self.push_op(
            "stack",
            Tensor::from_parts(shape, data),
            Op::Stack(items.to_vec()),
            items,
        )
    }

    /// Row `i` of a tensor with a leading batch axis.
    pub fn row(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() < 2 || i >= sx[0] {
            return Err(Error::dim("row", sx, &[i]));
        }
        let inner: Vec<usize> = sx[1..].to_vec();
        let n: usize = inner.iter().product();
        let data = self.value(x).data()[i * n..(i + 1) * n].to_vec();
        self.push_op("row", Tensor::from_parts(inner, data), Op::Row(x, i), &[x])
    }

    /// Cross-correlation of `x` (`C_in×H×W`) with `w` (`C_out×C_in×kh×kw`) plus bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(Error::dim("conv2d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(Error::dim("conv2d bias", sb, &sw[..1]));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        let (hp, wp) = (h + 2 * padding, wd + 2 * padding);
        if kh > hp || kw > wp {
            return Err(Error::dim("conv2d output extent", sx, sw));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            h_out: (hp - kh) / stride + 1,
            w_out: (wp - kw) / stride + 1,
        };
        let col = kernels::im2col(self.value(x).data(), &geom);
        let hw = geom.col_cols();
        let mut out = Vec::with_capacity(c_out * hw);
        for &bias in self.value(b).data() {
            out.extend(std::iter::repeat_n(bias, hw));
        }
        kernels::gemm(
            c_out,
            geom.col_rows(),
            hw,
            self.value(w).data(),
            false,
            &col,
            false,
            &mut out,
            T::one(),
        );
        let value = Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out);
        let keep = self.nodes[w.0].requires_grad || self.nodes[x.0].requires_grad;
        let col = if keep { col } else { Vec::new() };
        self.push_op(
            "conv2d",
            value,
            Op::Conv2d { x, w, b, geom, col },
            &[x, w, b],
        )
    }

    /// 2×2 window, stride 2. Gradient goes to the first maximal element.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 3 || !sx[1].is_multiple_of(2) || !sx[2].is_multiple_of(2) {
            return Err(Error::dim("maxpool2", sx, &[2, 2]));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (out, argmax) = kernels::maxpool2(self.value(x).data(), c, h, w);
        let value = Tensor::from_parts(vec![c, h / 2, w / 2], out);
        self.push_op("maxpool2", value, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(
            "relu",
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(x),
        )
    }

    /// Numerically stable softmax of a length-2 vector.
    pub fn softmax2(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.iter().product::<usize>() != 2 {
            return Err(Error::dim("softmax2", sx, &[2]));
        }
        let d = self.value(x).data();
        let m = d[0].max(d[1]);
        let (e0, e1) = ((d[0] - m).exp(), (d[1] - m).exp());
        let z = e0 + e1;
        let value = Tensor::from_parts(sx.to_vec(), vec![e0 / z, e1 / z]);
        self.push_op("softmax2", value, Op::Softmax2(x), &[x])
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push_op(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::dim("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let tail: usize = sa[axis + 1..].iter().product();
        let (a_inner, b_inner) = (sa[axis] * tail, sb[axis] * tail);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            data.extend_from_slice(&da[o * a_inner..(o + 1) * a_inner]);
            data.extend_from_slice(&db[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let op = Op::Concat {
            a,
            b,
            outer,
            a_inner,
            b_inner,
        };
        self.push_op("concat", Tensor::from_parts(shape, data), op, &[a, b])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push_op("reshape", value, Op::Reshape(x), &[x])
    }

    /// Flat element `index` of `x` as a scalar.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let n = self.value(x).numel();
        if index >= n {
            return Err(Error::dim("select", &[index], &[n]));
        }
        let v = self.value(x).data()[index];
        self.push_op("select", Tensor::scalar(v), Op::Select(x, index), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).sum();
        self.push_op("sum", Tensor::scalar(v), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let v = t.sum() / T::from_usize(t.numel()).unwrap();
        self.push_op("mean", Tensor::scalar(v), Op::Mean(x), &[x])
    }

    /// Sum of squares.
    pub fn l2norm_sq(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).data().iter().map(|&e| e * e).sum();
        self.push_op("l2norm_sq", Tensor::scalar(v), Op::L2NormSq(x), &[x])
    }

    /// Euclidean norm; its gradient divides by `max(‖x‖, NORM_EPS)`.
    pub fn norm2(&mut self, x: NodeId) -> Result<NodeId> {
        let v: T = self
            .value(x)
            .data()
            .iter()
            .map(|&e| e * e)
            .sum::<T>()
            .sqrt();
        self.push_op("norm2", Tensor::scalar(v), Op::Norm2(x), &[x])
    }

    /// `x / max(‖x‖, NORM_EPS)`.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let n = t.data().iter().map(|&e| e * e).sum::<T>().sqrt();
        let d = n.max(T::from_f64_lossy(NORM_EPS));
        let value = t.map(|e| e / d);
        self.push_op("l2_normalize", value, Op::L2Normalize(x), &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("ln", x, |v| v.ln(), Op::Ln(x))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> Result<NodeId> {
        self.unary("clamp", x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Sum of several scalar nodes.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::contract("add_all needs at least one term"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse pass from the scalar `loss`.
    ///
    /// Afterwards every `requires_grad` leaf has a gradient (zero when the
    /// loss does not depend on it). Earlier gradients are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(idx);
            propagate(before, &mut rest[0], &g, &mut grads);
            grads[idx] = Some(g);
        }

        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::from_parts(shape, data),
                    None => Tensor::zeros(shape),
                })
            })
            .collect();
        Ok(())
    }
}

/// Pushes the output gradient `g` of `node` into the slots of its inputs,
/// all of which live in `nodes` (everything recorded before it).
fn propagate<T: Real>(
    nodes: &[Node<T>],
    node: &mut Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let out = node.value.data();
    let wants = |id: NodeId| nodes[id.0].requires_grad;

    // Adds `f(i)` into the gradient slot of `id`.
    fn acc<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize, f: impl Fn(usize) -> T) {
        let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); len]);
        for (i, s) in slot.iter_mut().enumerate() {
            *s = *s + f(i);
        }
    }
    fn acc_slice<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, src: &[T]) {
        match &mut grads[id.0] {
            Some(slot) => {
                for (s, &v) in slot.iter_mut().zip(src) {
                    *s = *s + v;
                }
            }
            empty => *empty = Some(src.to_vec()),
        }
    }

    let len = |id: NodeId| nodes[id.0].value.numel();
    let val = |id: NodeId| nodes[id.0].value.data();

    let mut conv_col = match &mut node.op {
        Op::Conv2d { col, .. } => std::mem::take(col),
        _ => Vec::new(),
    };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if wants(*a) {
                let mut da = vec![T::zero(); m * k];
                kernels::gemm(m, n, k, g, false, val(*b), true, &mut da, T::zero());
                acc_slice(grads, *a, &da);
            }
            if wants(*b) {
                let mut db = vec![T::zero(); k * n];
                kernels::gemm(k, m, n, val(*a), true, g, false, &mut db, T::zero());
                acc_slice(grads, *b, &db);
            }
        }
        Op::Linear { x, w, b, rows } => {
            let (out_f, inner) = (nodes[w.0].value.shape()[0], nodes[w.0].value.shape()[1]);
            if wants(*b) {
                let mut db = vec![T::zero(); out_f];
                for r in g.chunks(out_f) {
                    kernels::axpy(T::one(), r, &mut db);
                }
                acc_slice(grads, *b, &db);
            }
            if wants(*w) {
                let slot = grads[w.0].get_or_insert_with(|| vec![T::zero(); out_f * inner]);
                kernels::gemm(out_f, *rows, inner, g, true, val(*x), false, slot, T::one());
            }
            if wants(*x) {
                let slot = grads[x.0].get_or_insert_with(|| vec![T::zero(); rows * inner]);
                kernels::gemm(
                    *rows,
                    out_f,
                    inner,
                    g,
                    false,
                    val(*w),
                    false,
                    slot,
                    T::one(),
                );
            }
        }
        Op::Stack(items) => {
            let n = g.len() / items.len();
            for (k, &it) in items.iter().enumerate() {
                if wants(it) {
                    acc_slice(grads, it, &g[k * n..(k + 1) * n]);
                }
            }
        }
        Op::Row(x, i) => {
            let n = g.len();
            let slot = grads[x.0].get_or_insert_with(|| vec![T::zero(); len(*x)]);
            kernels::axpy(T::one(), g, &mut slot[i * n..(i + 1) * n]);
        }
        Op::Conv2d { x, w, b, geom, .. } => {
            let c_out = nodes[w.0].value.shape()[0];
            let hw = geom.col_cols();
            let rows = geom.col_rows();
            if wants(*b) {
                let db: Vec<T> = g.chunks(hw).map(|c| c.iter().copied().sum()).collect();
                acc_slice(grads, *b, &db);
            }
            // a second backward over the same graph finds the buffer consumed
            let mut buf = std::mem::take(&mut conv_col);
            if buf.is_empty() {
                buf = kernels::im2col(val(*x), geom);
            }
            if wants(*w) {
                let slot = grads[w.0].get_or_insert_with(|| vec![T::zero(); c_out * rows]);
                kernels::gemm(c_out, hw, rows, g, false, &buf, true, slot, T::one());
            }
            if wants(*x) {
                kernels::gemm(
                    rows,
                    c_out,
                    hw,
                    val(*w),
                    true,
                    g,
                    false,
                    &mut buf,
                    T::zero(),
                );
                let slot = grads[x.0].get_or_insert_with(|| vec![T::zero(); len(*x)]);
                kernels::col2im(&buf, geom, slot);
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let slot = grads[x.0].get_or_insert_with(|| vec![T::zero(); len(*x)]);
            for (&gi, &ix) in g.iter().zip(argmax) {
                slot[ix as usize] = slot[ix as usize] + gi;
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            acc(grads, *x, xv.len(), |i| {
                if xv[i] > T::zero() {
                    g[i]
                } else {
                    T::zero()
                }
            });
        }
        Op::Softmax2(x) => {
            // dL/dx_i = s_i (g_i - Σ_j g_j s_j)
            let dot = g[0] * out[0] + g[1] * out[1];
            acc(grads, *x, 2, |i| out[i] * (g[i] - dot));
        }
        Op::Add(a, b) => {
            if wants(*a) {
                acc_slice(grads, *a, g);
            }
            if wants(*b) {
                acc_slice(grads, *b, g);
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                acc_slice(grads, *a, g);
            }
            if wants(*b) {
                acc(grads, *b, g.len(), |i| -g[i]);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if wants(*a) {
                acc(grads, *a, g.len(), |i| g[i] * vb[i]);
            }
            if wants(*b) {
                acc(grads, *b, g.len(), |i| g[i] * va[i]);
            }
        }
        Op::Scale(x, c) => acc(grads, *x, g.len(), |i| g[i] * *c),
        Op::AddScalar(x) | Op::Reshape(x) => acc_slice(grads, *x, g),
        Op::Concat {
            a,
            b,
            outer,
            a_inner,
            b_inner,
        } => {
            let stride = a_inner + b_inner;
            if wants(*a) {
                let (ai, st) = (*a_inner, stride);
                acc(grads, *a, outer * ai, |i| g[(i / ai) * st + i % ai]);
            }
            if wants(*b) {
                let (ai, bi, st) = (*a_inner, *b_inner, stride);
                acc(grads, *b, outer * bi, |i| g[(i / bi) * st + ai + i % bi]);
            }
        }
        Op::Select(x, index) => {
            let slot = grads[x.0].get_or_insert_with(|| vec![T::zero(); len(*x)]);
            slot[*index] = slot[*index] + g[0];
        }
        Op::Sum(x) => acc(grads, *x, len(*x), |_| g[0]),
        Op::Mean(x) => {
            let n = len(*x);
            let s = g[0] / T::from_usize(n).unwrap();
            acc(grads, *x, n, |_| s);
        }
        Op::L2NormSq(x) => {
            let xv = val(*x);
            let two = T::from_f64_lossy(2.0);
            acc(grads, *x, xv.len(), |i| two * xv[i] * g[0]);
        }
        Op::Norm2(x) => {
            let xv = val(*x);
            let d = out[0].max(T::from_f64_lossy(NORM_EPS));
            acc(grads, *x, xv.len(), |i| xv[i] / d * g[0]);
        }
        Op::L2Normalize(x) => {
            let xv = val(*x);
            let n = xv.iter().map(|&e| e * e).sum::<T>().sqrt();
            let d = n.max(T::from_f64_lossy(NORM_EPS));
            if n > T::from_f64_lossy(NORM_EPS) {
                let dot: T = out.iter().zip(g).map(|(&y, &gi)| y * gi).sum();
                acc(grads, *x, xv.len(), |i| (g[i] - out[i] * dot) / d);
            } else {
                acc(grads, *x, xv.len(), |i| g[i] / d);
            }
        }
        Op::Exp(x) => acc(grads, *x, g.len(), |i| g[i] * out[i]),
        Op::Ln(x) => {
            let xv = val(*x);
            acc(grads, *x, g.len(), |i| g[i] / xv[i]);
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            acc(grads, *x, g.len(), |i| {
                if xv[i] < *lo || xv[i] > *hi {
                    T::zero()
                } else {
                    g[i]
                }
            });
        }
    }
}
