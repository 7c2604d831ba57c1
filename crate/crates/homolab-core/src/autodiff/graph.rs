//! Define-by-run reverse-mode tape. Gradients are built as graph nodes
//! themselves, so differentiating a gradient expression (as the critic's
//! gradient penalty requires) is just a second `backward` call.

use ndarray::{ArrayD, Axis, IxDyn};

use super::kernels::{self, ConvSpec};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var, T),
    MulScalar(Var, T),
    Recip(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Clamp(Var, T, T),
    /// Broadcast add/mul: second operand has size-1 dims where shapes differ.
    BAdd(Var, Var),
    BMul(Var, Var),
    ReduceSumAxes(Var, Vec<usize>),
    BroadcastTo(Var, Vec<usize>),
    SumAll(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose2(Var),
    SwapLast2(Var),
    Reshape(Var, Vec<usize>),
    PermuteAxes(Var, Vec<usize>),
    SliceAxis(Var, usize, usize, usize),
    PadZerosAxis(Var, usize, usize, usize),
    Concat(Vec<Var>, usize),
    Softmax(Var),
    Conv2d { x: Var, w: Var, spec: ConvSpec },
    ConvInputGrad { gy: Var, w: Var, spec: ConvSpec, in_hw: (usize, usize) },
    ConvWeightGrad { x: Var, gy: Var, spec: ConvSpec, k_hw: (usize, usize) },
    AvgPool2d(Var, usize),
    UpsampleNearest(Var, usize),
    Warp { x: Var, flow: Var },
    WarpSplat { gy: Var, flow: Var },
    WarpFlowGrad { x: Var, flow: Var, gy: Var },
    GradReverse(Var),
}

pub(crate) struct Node<T: Scalar> {
    pub value: ArrayD<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Growable arena of tensors; node indices are already in topological order.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(1024) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Extract the scalar held by a 0-d or single-element tensor.
    pub fn scalar_value(&self, v: Var) -> T {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "expected a scalar tensor");
        *a.iter().next().unwrap()
    }

    pub(crate) fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().to_owned() };
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().to_owned() };
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let g = self.ng(a);
        self.push(v, Op::Neg(a), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a, c), g)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let g = self.ng(a);
        self.push(v, Op::MulScalar(a, c), g)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.recip());
        let g = self.ng(a);
        self.push(v, Op::Recip(a), g)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        let g = self.ng(a);
        self.push(v, Op::Sqrt(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.exp());
        let g = self.ng(a);
        self.push(v, Op::Exp(a), g)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        let g = self.ng(a);
        self.push(v, Op::Ln(a), g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        let g = self.ng(a);
        self.push(v, Op::Abs(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > T::zero() { x } else { T::zero() });
        let g = self.ng(a);
        self.push(v, Op::Relu(a), g)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > T::zero() { x } else { slope * x });
        let g = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu_fwd);
        let g = self.ng(a);
        self.push(v, Op::Gelu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| T::one() / (T::one() + (-x).exp()));
        let g = self.ng(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(lo).min(hi));
        let g = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), g)
    }

    // ---- broadcasting / reductions ----

    fn check_broadcast(&self, a: Var, b: Var) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa.len(), sb.len(), "broadcast op: rank mismatch {sa:?} vs {sb:?}");
        for (da, db) in sa.iter().zip(sb) {
            assert!(db == da || *db == 1, "broadcast op: {sb:?} not broadcastable to {sa:?}");
        }
    }

    /// a + broadcast(b); b may have size-1 axes.
    pub fn badd(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        let bv = self.nodes[b.0].value.broadcast(self.shape(a)).unwrap().to_owned();
        let v = &self.nodes[a.0].value + &bv;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::BAdd(a, b), g)
    }

    /// a * broadcast(b); b may have size-1 axes.
    pub fn bmul(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        let bv = self.nodes[b.0].value.broadcast(self.shape(a)).unwrap().to_owned();
        let v = &self.nodes[a.0].value * &bv;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::BMul(a, b), g)
    }

    pub fn bsub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.badd(a, nb)
    }

    pub fn bdiv(&mut self, a: Var, b: Var) -> Var {
        let rb = self.recip(b);
        self.bmul(a, rb)
    }

    /// Sum over `axes`, keeping reduced dims with size 1.
    pub fn reduce_sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in sorted.iter().rev() {
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let v = v.as_standard_layout().to_owned();
        let g = self.ng(a);
        self.push(v, Op::ReduceSumAxes(a, sorted), g)
    }

    pub fn reduce_mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&ax| self.shape(a)[ax]).product();
        let s = self.reduce_sum_axes(a, axes);
        self.mul_scalar(s, T::from_usize(count).recip())
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0].value.broadcast(IxDyn(shape)).expect("broadcast_to").to_owned();
        let g = self.ng(a);
        self.push(v, Op::BroadcastTo(a, shape.to_vec()), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let g = self.ng(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.mul_scalar(s, T::from_usize(n).recip())
    }

    // ---- linear algebra / shape ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("matmul lhs 2-d");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("matmul rhs 2-d");
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul: inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// [B,M,K] x [B,K,N] -> [B,M,N]
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<ndarray::Ix3>().expect("bmm lhs 3-d");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix3>().expect("bmm rhs 3-d");
        let (ba, m, ka) = av.dim();
        let (bb, kb, n) = bv.dim();
        assert!(ba == bb && ka == kb, "bmm: shape mismatch");
        let mut out = ndarray::Array3::<T>::zeros((ba, m, n));
        for i in 0..ba {
            ndarray::linalg::general_mat_mul(
                T::one(),
                &av.index_axis(Axis(0), i),
                &bv.index_axis(Axis(0), i),
                T::zero(),
                &mut out.index_axis_mut(Axis(0), i),
            );
        }
        let g = self.ng(a) || self.ng(b);
        self.push(out.into_dyn(), Op::BatchMatMul(a, b), g)
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("transpose2 2-d");
        let v = v.t().as_standard_layout().to_owned().into_dyn();
        let g = self.ng(a);
        self.push(v, Op::Transpose2(a), g)
    }

    pub fn swap_last2(&mut self, a: Var) -> Var {
        let nd = self.nodes[a.0].value.ndim();
        assert!(nd >= 2);
        let mut v = self.nodes[a.0].value.clone();
        v.swap_axes(nd - 2, nd - 1);
        let v = v.as_standard_layout().to_owned();
        let g = self.ng(a);
        self.push(v, Op::SwapLast2(a), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let g = self.ng(a);
        self.push(v, Op::Reshape(a, shape.to_vec()), g)
    }

    pub fn permute_axes(&mut self, a: Var, perm: &[usize]) -> Var {
        let v = self.nodes[a.0].value.clone().permuted_axes(IxDyn(perm));
        let v = v.as_standard_layout().to_owned();
        let g = self.ng(a);
        self.push(v, Op::PermuteAxes(a, perm.to_vec()), g)
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let g = self.ng(a);
        self.push(v, Op::SliceAxis(a, axis, start, len), g)
    }

    pub fn pad_zeros_axis(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Var {
        let mut shape = self.shape(a).to_vec();
        shape[axis] += before + after;
        let mut v = ArrayD::<T>::zeros(IxDyn(&shape));
        let len = self.shape(a)[axis];
        v.slice_axis_mut(Axis(axis), ndarray::Slice::from(before..before + len))
            .assign(&self.nodes[a.0].value);
        let g = self.ng(a);
        self.push(v, Op::PadZerosAxis(a, axis, before, after), g)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let v = v.as_standard_layout().to_owned();
        let g = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::Concat(parts.to_vec(), axis), g)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = kernels::softmax_last(&self.nodes[a.0].value);
        let g = self.ng(a);
        self.push(v, Op::Softmax(a), g)
    }

    // ---- structured ops ----

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let v = kernels::conv2d_fwd(&self.nodes[x.0].value, &self.nodes[w.0].value, &spec);
        let g = self.ng(x) || self.ng(w);
        self.push(v, Op::Conv2d { x, w, spec }, g)
    }

    pub fn conv_input_grad(&mut self, gy: Var, w: Var, spec: ConvSpec, in_hw: (usize, usize)) -> Var {
        let v = kernels::conv2d_input_grad(&self.nodes[gy.0].value, &self.nodes[w.0].value, &spec, in_hw);
        let g = self.ng(gy) || self.ng(w);
        self.push(v, Op::ConvInputGrad { gy, w, spec, in_hw }, g)
    }

    pub fn conv_weight_grad(&mut self, x: Var, gy: Var, spec: ConvSpec, k_hw: (usize, usize)) -> Var {
        let v = kernels::conv2d_weight_grad(&self.nodes[x.0].value, &self.nodes[gy.0].value, &spec, k_hw);
        let g = self.ng(x) || self.ng(gy);
        self.push(v, Op::ConvWeightGrad { x, gy, spec, k_hw }, g)
    }

    /// Backward bilinear warp with zero padding; `flow` is [N,2,H,W] (u, v).
    pub fn warp(&mut self, x: Var, flow: Var) -> Var {
        let v = kernels::warp_fwd(&self.nodes[x.0].value, &self.nodes[flow.0].value);
        let g = self.ng(x) || self.ng(flow);
        self.push(v, Op::Warp { x, flow }, g)
    }

    pub fn warp_splat(&mut self, gy: Var, flow: Var) -> Var {
        let v = kernels::warp_splat(&self.nodes[gy.0].value, &self.nodes[flow.0].value);
        let g = self.ng(gy) || self.ng(flow);
        self.push(v, Op::WarpSplat { gy, flow }, g)
    }

    pub fn warp_flow_grad(&mut self, x: Var, flow: Var, gy: Var) -> Var {
        let v = kernels::warp_flow_grad(
            &self.nodes[x.0].value,
            &self.nodes[flow.0].value,
            &self.nodes[gy.0].value,
        );
        let g = self.ng(x) || self.ng(flow) || self.ng(gy);
        self.push(v, Op::WarpFlowGrad { x, flow, gy }, g)
    }

    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Var {
        let v = kernels::avg_pool2d(&self.nodes[a.0].value, k);
        let g = self.ng(a);
        self.push(v, Op::AvgPool2d(a, k), g)
    }

    pub fn upsample_nearest(&mut self, a: Var, k: usize) -> Var {
        let v = kernels::upsample_nearest(&self.nodes[a.0].value, k);
        let g = self.ng(a);
        self.push(v, Op::UpsampleNearest(a, k), g)
    }

    /// Forward identity whose backward multiplies the gradient by -1.
    pub fn grad_reverse(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        let g = self.ng(a);
        self.push(v, Op::GradReverse(a), g)
    }

    /// Cut the gradient path: value copy that is a constant.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.push(v, Op::Leaf, false)
    }
}

pub(crate) fn gelu_fwd<T: Scalar>(x: T) -> T {
    // tanh approximation
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + T::from_f64(3.0) * k * x * x)
}
