//! Reverse-mode sweep. Every vjp is expressed with graph ops, so gradient
//! nodes are differentiable again wherever the op set is closed (the conv
//! family, elementwise arithmetic, reductions); this is what the critic's
//! gradient penalty relies on.

use ndarray::{ArrayD, IxDyn};

use super::graph::{Graph, Node, Op, Var};
use super::graph::gelu_deriv;
use crate::scalar::Scalar;

/// Gradients of one scalar with respect to graph nodes.
pub struct GradMap {
    grads: Vec<Option<Var>>,
}

impl GradMap {
    /// Gradient var of `v`, if `v` influenced the differentiated scalar.
    pub fn get(&self, v: Var) -> Option<Var> {
        self.grads.get(v.0).copied().flatten()
    }
}

impl<T: Scalar> Graph<T> {
    fn parents(op: &Op<T>) -> Vec<Var> {
        use Op::*;
        match op {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | BAdd(a, b) | BMul(a, b) | MatMul(a, b)
            | BatchMatMul(a, b) => vec![*a, *b],
            Neg(a) | AddScalar(a, _) | MulScalar(a, _) | Recip(a) | Sqrt(a) | Exp(a) | Ln(a)
            | Abs(a) | Relu(a) | LeakyRelu(a, _) | Gelu(a) | Sigmoid(a) | Clamp(a, _, _)
            | ReduceSumAxes(a, _) | BroadcastTo(a, _) | SumAll(a) | Transpose2(a)
            | SwapLast2(a) | Reshape(a, _) | PermuteAxes(a, _) | SliceAxis(a, _, _, _)
            | PadZerosAxis(a, _, _, _) | Softmax(a) | AvgPool2d(a, _) | UpsampleNearest(a, _)
            | GradReverse(a) => vec![*a],
            Concat(parts, _) => parts.clone(),
            Conv2d { x, w, .. } => vec![*x, *w],
            ConvInputGrad { gy, w, .. } => vec![*gy, *w],
            ConvWeightGrad { x, gy, .. } => vec![*x, *gy],
            Warp { x, flow } => vec![*x, *flow],
            WarpSplat { gy, flow } => vec![*gy, *flow],
            WarpFlowGrad { x, flow, gy } => vec![*x, *flow, *gy],
        }
    }

    fn accum(&mut self, grads: &mut [Option<Var>], target: Var, contrib: Var) {
        grads[target.0] = Some(match grads[target.0] {
            Some(prev) => self.add(prev, contrib),
            None => contrib,
        });
    }

    fn const_mask(&mut self, src: Var, f: impl Fn(T) -> T) -> Var {
        let m = self.value(src).mapv(f);
        self.constant(m)
    }

    /// Reverse sweep from scalar `y`. Returns a map holding gradient vars
    /// for every node that both requires grad and influences `y`.
    pub fn backward(&mut self, y: Var) -> GradMap {
        assert_eq!(self.value(y).len(), 1, "backward target must be scalar");
        let n = self.nodes.len();

        // ancestors of y that carry gradient
        let mut active = vec![false; n];
        if self.nodes[y.0].needs_grad {
            let mut stack = vec![y];
            active[y.0] = true;
            while let Some(v) = stack.pop() {
                for p in Self::parents(&self.nodes[v.0].op) {
                    if self.nodes[p.0].needs_grad && !active[p.0] {
                        active[p.0] = true;
                        stack.push(p);
                    }
                }
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        if !active[y.0] {
            return GradMap { grads };
        }
        let seed = self.constant(ArrayD::from_elem(IxDyn(self.shape(y)), T::one()));
        grads[y.0] = Some(seed);

        for idx in (0..=y.0).rev() {
            if !active[idx] {
                continue;
            }
            let g = match grads[idx] {
                Some(g) => g,
                None => continue,
            };
            let node_var = Var(idx);
            let op = self.nodes[idx].op.clone();
            use Op::*;
            match op {
                Leaf => {}
                Add(a, b) => {
                    if self.needs(a) {
                        self.accum(&mut grads, a, g);
                    }
                    if self.needs(b) {
                        self.accum(&mut grads, b, g);
                    }
                }
                Sub(a, b) => {
                    if self.needs(a) {
                        self.accum(&mut grads, a, g);
                    }
                    if self.needs(b) {
                        let ng = self.neg(g);
                        self.accum(&mut grads, b, ng);
                    }
                }
                Mul(a, b) => {
                    if self.needs(a) {
                        let c = self.mul(g, b);
                        self.accum(&mut grads, a, c);
                    }
                    if self.needs(b) {
                        let c = self.mul(g, a);
                        self.accum(&mut grads, b, c);
                    }
                }
                Neg(a) => {
                    if self.needs(a) {
                        let c = self.neg(g);
                        self.accum(&mut grads, a, c);
                    }
                }
                AddScalar(a, _) => {
                    if self.needs(a) {
                        self.accum(&mut grads, a, g);
                    }
                }
                MulScalar(a, c) => {
                    if self.needs(a) {
                        let gc = self.mul_scalar(g, c);
                        self.accum(&mut grads, a, gc);
                    }
                }
                Recip(a) => {
                    if self.needs(a) {
                        let y2 = self.mul(node_var, node_var);
                        let gy2 = self.mul(g, y2);
                        let c = self.neg(gy2);
                        self.accum(&mut grads, a, c);
                    }
                }
                Sqrt(a) => {
                    if self.needs(a) {
                        let two_y = self.mul_scalar(node_var, T::from_f64(2.0));
                        let inv = self.recip(two_y);
                        let c = self.mul(g, inv);
                        self.accum(&mut grads, a, c);
                    }
                }
                Exp(a) => {
                    if self.needs(a) {
                        let c = self.mul(g, node_var);
                        self.accum(&mut grads, a, c);
                    }
                }
                Ln(a) => {
                    if self.needs(a) {
                        let inv = self.recip(a);
                        let c = self.mul(g, inv);
                        self.accum(&mut grads, a, c);
                    }
                }
                Abs(a) => {
                    if self.needs(a) {
                        let mask = self.const_mask(a, |x| {
                            if x > T::zero() {
                                T::one()
                            } else if x < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        });
                        let c = self.mul(g, mask);
                        self.accum(&mut grads, a, c);
                    }
                }
                Relu(a) => {
                    if self.needs(a) {
                        let mask = self.const_mask(a, |x| if x > T::zero() { T::one() } else { T::zero() });
                        let c = self.mul(g, mask);
                        self.accum(&mut grads, a, c);
                    }
                }
                LeakyRelu(a, s) => {
                    if self.needs(a) {
                        let mask = self.const_mask(a, |x| if x > T::zero() { T::one() } else { s });
                        let c = self.mul(g, mask);
                        self.accum(&mut grads, a, c);
                    }
                }
                Gelu(a) => {
                    if self.needs(a) {
                        let mask = self.const_mask(a, gelu_deriv);
                        let c = self.mul(g, mask);
                        self.accum(&mut grads, a, c);
                    }
                }
                Sigmoid(a) => {
                    if self.needs(a) {
                        let ny = self.neg(node_var);
                        let om = self.add_scalar(ny, T::one());
                        let d = self.mul(node_var, om);
                        let c = self.mul(g, d);
                        self.accum(&mut grads, a, c);
                    }
                }
                Clamp(a, lo, hi) => {
                    if self.needs(a) {
                        let mask =
                            self.const_mask(a, |x| if x > lo && x < hi { T::one() } else { T::zero() });
                        let c = self.mul(g, mask);
                        self.accum(&mut grads, a, c);
                    }
                }
                BAdd(a, b) => {
                    if self.needs(a) {
                        self.accum(&mut grads, a, g);
                    }
                    if self.needs(b) {
                        let c = self.reduce_to_shape(g, b);
                        self.accum(&mut grads, b, c);
                    }
                }
                BMul(a, b) => {
                    if self.needs(a) {
                        let c = self.bmul(g, b);
                        self.accum(&mut grads, a, c);
                    }
                    if self.needs(b) {
                        let ga = self.mul(g, a);
                        let c = self.reduce_to_shape(ga, b);
                        self.accum(&mut grads, b, c);
                    }
                }
                ReduceSumAxes(a, _) => {
                    if self.needs(a) {
                        let shape = self.shape(a).to_vec();
                        let c = self.broadcast_to(g, &shape);
                        self.accum(&mut grads, a, c);
                    }
                }
                BroadcastTo(a, _) => {
                    if self.needs(a) {
                        let c = self.reduce_to_shape(g, a);
                        self.accum(&mut grads, a, c);
                    }
                }
                SumAll(a) => {
                    if self.needs(a) {
                        let shape = self.shape(a).to_vec();
                        let c = self.broadcast_to(g, &shape);
                        self.accum(&mut grads, a, c);
                    }
                }
                MatMul(a, b) => {
                    if self.needs(a) {
                        let bt = self.transpose2(b);
                        let c = self.matmul(g, bt);
                        self.accum(&mut grads, a, c);
                    }
                    if self.needs(b) {
                        let at = self.transpose2(a);
                        let c = self.matmul(at, g);
                        self.accum(&mut grads, b, c);
                    }
                }
                BatchMatMul(a, b) => {
                    if self.needs(a) {
                        let bt = self.swap_last2(b);
                        let c = self.batch_matmul(g, bt);
                        self.accum(&mut grads, a, c);
                    }
                    if self.needs(b) {
                        let at = self.swap_last2(a);
                        let c = self.batch_matmul(at, g);
                        self.accum(&mut grads, b, c);
                    }
                }
                Transpose2(a) => {
                    if self.needs(a) {
                        let c = self.transpose2(g);
                        self.accum(&mut grads, a, c);
                    }
                }
                SwapLast2(a) => {
                    if self.needs(a) {
                        let c = self.swap_last2(g);
                        self.accum(&mut grads, a, c);
                    }
                }
                Reshape(a, _) => {
                    if self.needs(a) {
                        let shape = self.shape(a).to_vec();
                        let c = self.reshape(g, &shape);
                        self.accum(&mut grads, a, c);
                    }
                }
                PermuteAxes(a, perm) => {
                    if self.needs(a) {
                        let mut inv = vec![0usize; perm.len()];
                        for (i, &p) in perm.iter().enumerate() {
                            inv[p] = i;
                        }
                        let c = self.permute_axes(g, &inv);
                        self.accum(&mut grads, a, c);
                    }
                }
                SliceAxis(a, axis, start, len) => {
                    if self.needs(a) {
                        let total = self.shape(a)[axis];
                        let c = self.pad_zeros_axis(g, axis, start, total - start - len);
                        self.accum(&mut grads, a, c);
                    }
                }
                PadZerosAxis(a, axis, before, _) => {
                    if self.needs(a) {
                        let len = self.shape(a)[axis];
                        let c = self.slice_axis(g, axis, before, len);
                        self.accum(&mut grads, a, c);
                    }
                }
                Concat(parts, axis) => {
                    let mut offset = 0usize;
                    for p in parts {
                        let len = self.shape(p)[axis];
                        if self.needs(p) {
                            let c = self.slice_axis(g, axis, offset, len);
                            self.accum(&mut grads, p, c);
                        }
                        offset += len;
                    }
                }
                Softmax(a) => {
                    if self.needs(a) {
                        let last = self.shape(a).len() - 1;
                        let gy = self.mul(g, node_var);
                        let s = self.reduce_sum_axes(gy, &[last]);
                        let centered = self.bsub(g, s);
                        let c = self.mul(node_var, centered);
                        self.accum(&mut grads, a, c);
                    }
                }
                Conv2d { x, w, spec } => {
                    if self.needs(x) {
                        let hw = (self.shape(x)[2], self.shape(x)[3]);
                        let c = self.conv_input_grad(g, w, spec, hw);
                        self.accum(&mut grads, x, c);
                    }
                    if self.needs(w) {
                        let k_hw = (self.shape(w)[2], self.shape(w)[3]);
                        let c = self.conv_weight_grad(x, g, spec, k_hw);
                        self.accum(&mut grads, w, c);
                    }
                }
                ConvInputGrad { gy, w, spec, .. } => {
                    // node = conv_transpose(gy, w); incoming g is input-shaped
                    if self.needs(gy) {
                        let c = self.conv2d(g, w, spec);
                        self.accum(&mut grads, gy, c);
                    }
                    if self.needs(w) {
                        let k_hw = (self.shape(w)[2], self.shape(w)[3]);
                        let c = self.conv_weight_grad(g, gy, spec, k_hw);
                        self.accum(&mut grads, w, c);
                    }
                }
                ConvWeightGrad { x, gy, spec, .. } => {
                    // node = corr(x, gy); incoming g is kernel-shaped
                    if self.needs(x) {
                        let hw = (self.shape(x)[2], self.shape(x)[3]);
                        let c = self.conv_input_grad(gy, g, spec, hw);
                        self.accum(&mut grads, x, c);
                    }
                    if self.needs(gy) {
                        let c = self.conv2d(x, g, spec);
                        self.accum(&mut grads, gy, c);
                    }
                }
                AvgPool2d(a, k) => {
                    if self.needs(a) {
                        let up = self.upsample_nearest(g, k);
                        let c = self.mul_scalar(up, T::from_usize(k * k).recip());
                        self.accum(&mut grads, a, c);
                    }
                }
                UpsampleNearest(a, k) => {
                    if self.needs(a) {
                        let dn = self.avg_pool2d(g, k);
                        let c = self.mul_scalar(dn, T::from_usize(k * k));
                        self.accum(&mut grads, a, c);
                    }
                }
                Warp { x, flow } => {
                    if self.needs(x) {
                        let c = self.warp_splat(g, flow);
                        self.accum(&mut grads, x, c);
                    }
                    if self.needs(flow) {
                        let c = self.warp_flow_grad(x, flow, g);
                        self.accum(&mut grads, flow, c);
                    }
                }
                WarpSplat { gy, flow } => {
                    if self.needs(gy) {
                        let c = self.warp(g, flow);
                        self.accum(&mut grads, gy, c);
                    }
                    if self.needs(flow) {
                        panic!("second-order gradients through warp flow are not supported");
                    }
                }
                WarpFlowGrad { .. } => {
                    panic!("second-order gradients through warp flow are not supported");
                }
                GradReverse(a) => {
                    if self.needs(a) {
                        let c = self.neg(g);
                        self.accum(&mut grads, a, c);
                    }
                }
            }
        }
        GradMap { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reduce `g` so it matches the shape of `target` (inverse of a broadcast).
    fn reduce_to_shape(&mut self, g: Var, target: Var) -> Var {
        let ts = self.shape(target).to_vec();
        let gs = self.shape(g).to_vec();
        if ts == gs {
            return g;
        }
        let offset = gs.len() - ts.len();
        let mut axes = Vec::new();
        for (i, &gd) in gs.iter().enumerate() {
            let td = if i < offset { 1 } else { ts[i - offset] };
            if td == 1 && gd != 1 {
                axes.push(i);
            }
        }
        let mut out = if axes.is_empty() { g } else { self.reduce_sum_axes(g, &axes) };
        if self.shape(out) != ts.as_slice() {
            out = self.reshape(out, &ts);
        }
        out
    }

    /// Gradient of `y` w.r.t. each of `wrt`, materialized as arrays
    /// (zeros where unconnected).
    pub fn grad_arrays(&mut self, y: Var, wrt: &[Var]) -> Vec<ArrayD<T>> {
        let gm = self.backward(y);
        wrt.iter()
            .map(|v| match gm.get(*v) {
                Some(g) => self.value(g).clone(),
                None => ArrayD::zeros(IxDyn(self.shape(*v))),
            })
            .collect()
    }
}

impl<T: Scalar> Clone for Node<T> {
    fn clone(&self) -> Self {
        Node { value: self.value.clone(), op: self.op.clone(), needs_grad: self.needs_grad }
    }
}
