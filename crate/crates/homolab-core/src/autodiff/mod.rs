//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! Gradients are themselves graph nodes, which makes the tape twice
//! differentiable for the op families where that is needed (convolutions,
//! pooling, elementwise arithmetic) — the Wasserstein gradient penalty
//! differentiates a gradient norm with respect to critic parameters.

mod backward;
mod graph;
pub mod gradcheck;
pub mod kernels;

pub use backward::GradMap;
pub use graph::{Graph, Var};
pub use kernels::ConvSpec;

#[cfg(test)]
mod tests {
    use super::gradcheck::check_gradients;
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn elementwise_chain_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]).mapv(|v| v + 2.5); // keep positive for ln/sqrt
        let rep = check_gradients(&[a, b], 1e-6, |g, vs| {
            let s = g.mul(vs[0], vs[0]);
            let e = g.exp(vs[0]);
            let l = g.ln(vs[1]);
            let q = g.sqrt(vs[1]);
            let t1 = g.add(s, e);
            let t2 = g.sub(l, q);
            let m = g.mul(t1, t2);
            let sg = g.sigmoid(m);
            let gl = g.gelu(sg);
            g.sum_all(gl)
        });
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn broadcast_and_reduce_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[1, 3, 1]);
        let rep = check_gradients(&[a, b], 1e-6, |g, vs| {
            let x = g.badd(vs[0], vs[1]);
            let y = g.bmul(x, vs[1]);
            let m = g.reduce_mean_axes(y, &[0, 2]);
            let z = g.bsub(y, m);
            g.mean_all(z)
        });
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn matmul_softmax_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5, 4]);
        let rep = check_gradients(&[a, b], 1e-6, |g, vs| {
            let m = g.matmul(vs[0], vs[1]);
            let s = g.softmax_last(m);
            let w = g.mul(s, s);
            g.sum_all(w)
        });
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn batch_matmul_permute_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[2, 4, 5]);
        let rep = check_gradients(&[a, b], 1e-6, |g, vs| {
            let m = g.batch_matmul(vs[0], vs[1]); // [2,3,5]
            let p = g.permute_axes(m, &[1, 0, 2]);
            let r = g.reshape(p, &[3, 10]);
            let sl = g.slice_axis(r, 1, 2, 6);
            g.mean_all(sl)
        });
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn conv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 3, 6, 7]);
        let w = randn(&mut rng, &[4, 3, 3, 3]);
        let spec = ConvSpec { stride: (2, 1), pad: (1, 1), dilation: (1, 1) };
        let rep = check_gradients(&[x, w], 1e-6, |g, vs| {
            let y = g.conv2d(vs[0], vs[1], spec);
            let y = g.leaky_relu(y, 0.2);
            let s = g.mul(y, y);
            g.sum_all(s)
        });
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn pool_upsample_concat_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[1, 2, 4, 4]);
        let y = randn(&mut rng, &[1, 2, 4, 4]);
        let rep = check_gradients(&[x, y], 1e-6, |g, vs| {
            let p = g.avg_pool2d(vs[0], 2);
            let u = g.upsample_nearest(p, 2);
            let c = g.concat(&[u, vs[1]], 1);
            let r = g.relu(c);
            g.mean_all(r)
        });
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn warp_gradcheck_both_args() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[1, 2, 8, 8]);
        // flows away from integer crossings so central differences are valid
        let f = ArrayD::from_shape_fn(IxDyn(&[1, 2, 8, 8]), |_| {
            let v: f64 = rng.gen::<f64>() * 2.0 - 1.0;
            let fr = v.fract().abs();
            if fr < 0.05 || fr > 0.95 {
                v + 0.3
            } else {
                v
            }
        });
        let rep = check_gradients(&[x, f], 1e-4, |g, vs| {
            let w = g.warp(vs[0], vs[1]);
            let s = g.mul(w, w);
            g.sum_all(s)
        });
        assert!(rep.max_rel_err < 1e-3, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn grad_reverse_negates_exactly() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let r = g.grad_reverse(x);
        let y = g.mul(r, r);
        let s = g.sum_all(y);
        let grads = g.grad_arrays(s, &[x]);
        assert_eq!(grads[0][[0]], -6.0);

        // double reversal restores the sign
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let r1 = g.grad_reverse(x);
        let r2 = g.grad_reverse(r1);
        let y = g.mul(r2, r2);
        let s = g.sum_all(y);
        let grads = g.grad_arrays(s, &[x]);
        assert_eq!(grads[0][[0]], 6.0);
    }

    #[test]
    fn grad_reverse_forward_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[4, 5]);
        let mut g = Graph::<f64>::new();
        let v = g.leaf(x.clone());
        let r = g.grad_reverse(v);
        assert_eq!(g.value(r), &x);
    }

    #[test]
    fn second_order_through_conv_critic() {
        // d/dw of ||grad_x D(x)||^2 for D(x) = sum(conv(x, w)) has a closed
        // form: grad_x D = conv_input_grad(ones, w), linear in w.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[1, 1, 4, 4]);
        let w = randn(&mut rng, &[1, 1, 3, 3]);
        let rep = check_gradients(&[x, w], 1e-6, |g, vs| {
            let spec = ConvSpec { stride: (1, 1), pad: (1, 1), dilation: (1, 1) };
            let y = g.conv2d(vs[0], vs[1], spec);
            let s = g.sum_all(y);
            let gm = g.backward(s);
            let gx = gm.get(vs[0]).unwrap();
            let sq = g.mul(gx, gx);
            g.sum_all(sq)
        });
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn unconnected_grad_is_none() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::zeros(IxDyn(&[2])));
        let z = g.leaf(ArrayD::zeros(IxDyn(&[2])));
        let y = g.sum_all(x);
        let gm = g.backward(y);
        assert!(gm.get(x).is_some());
        assert!(gm.get(z).is_none());
    }
}
