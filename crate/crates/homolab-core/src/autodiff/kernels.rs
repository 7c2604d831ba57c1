//! Raw array kernels backing the graph ops. Pure functions over ndarray
//! buffers; the `Graph` wraps them with tape bookkeeping.

use ndarray::{Array2, Array4, ArrayD, ArrayView4, Ix4};
use rayon::prelude::*;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvSpec {
    pub fn unit() -> Self {
        ConvSpec { stride: (1, 1), pad: (0, 0), dilation: (1, 1) }
    }

    pub fn out_hw(&self, in_hw: (usize, usize), k_hw: (usize, usize)) -> (usize, usize) {
        let eff = |k: usize, d: usize| d * (k - 1) + 1;
        let oh = (in_hw.0 + 2 * self.pad.0).checked_sub(eff(k_hw.0, self.dilation.0));
        let ow = (in_hw.1 + 2 * self.pad.1).checked_sub(eff(k_hw.1, self.dilation.1));
        match (oh, ow) {
            (Some(oh), Some(ow)) => (oh / self.stride.0 + 1, ow / self.stride.1 + 1),
            _ => panic!("conv kernel larger than padded input"),
        }
    }
}

fn as4<T: Scalar>(x: &ArrayD<T>) -> ArrayView4<'_, T> {
    x.view().into_dimensionality::<Ix4>().expect("expected a 4-d tensor")
}

/// im2col over a batch range [n0, n1): columns of receptive-field patches.
/// Output layout: [C*KH*KW, (n1-n0)*Ho*Wo].
fn im2col<T: Scalar>(
    x: &ArrayView4<'_, T>,
    n0: usize,
    n1: usize,
    k_hw: (usize, usize),
    spec: &ConvSpec,
    out_hw: (usize, usize),
) -> Array2<T> {
    let (_, c, h, w) = x.dim();
    let (kh, kw) = k_hw;
    let (ho, wo) = out_hw;
    let nn = n1 - n0;
    let mut cols = Array2::<T>::zeros((c * kh * kw, nn * ho * wo));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().unwrap();
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let (dh, dw) = spec.dilation;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let rbase = row * nn * ho * wo;
                for n in 0..nn {
                    let xbase = ((n0 + n) * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * sh + ki * dh) as isize - ph as isize;
                        let obase = rbase + (n * ho + oh) * wo;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = xbase + ih as usize * w;
                        for ow in 0..wo {
                            let iw = (ow * sw + kj * dw) as isize - pw as isize;
                            if iw >= 0 && iw < w as isize {
                                cs[obase + ow] = xs[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// col2im: scatter-add columns back onto the input grid over [n0, n1).
fn col2im<T: Scalar>(
    cols: &Array2<T>,
    gx: &mut Array4<T>,
    n0: usize,
    n1: usize,
    k_hw: (usize, usize),
    spec: &ConvSpec,
    out_hw: (usize, usize),
) {
    let (_, c, h, w) = gx.dim();
    let (kh, kw) = k_hw;
    let (ho, wo) = out_hw;
    let nn = n1 - n0;
    let cs = cols.as_slice().expect("standard layout");
    let gs = gx.as_slice_mut().unwrap();
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let (dh, dw) = spec.dilation;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let rbase = row * nn * ho * wo;
                for n in 0..nn {
                    let xbase = ((n0 + n) * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * sh + ki * dh) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let obase = rbase + (n * ho + oh) * wo;
                        let xrow = xbase + ih as usize * w;
                        for ow in 0..wo {
                            let iw = (ow * sw + kj * dw) as isize - pw as isize;
                            if iw >= 0 && iw < w as isize {
                                gs[xrow + iw as usize] += cs[obase + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

const CONV_CHUNK: usize = 4;

/// y[n,o,:,:] = w * x[n] (cross-correlation).
pub fn conv2d_fwd<T: Scalar>(x: &ArrayD<T>, w: &ArrayD<T>, spec: &ConvSpec) -> ArrayD<T> {
    let xv = as4(x);
    let wv = as4(w);
    let (n, c, h, wd) = xv.dim();
    let (o, wc, kh, kw) = wv.dim();
    assert_eq!(c, wc, "conv2d: channel mismatch");
    let (ho, wo) = spec.out_hw((h, wd), (kh, kw));
    let w2 = wv.into_shape((o, c * kh * kw)).unwrap();
    let mut y = Array4::<T>::zeros((n, o, ho, wo));
    for n0 in (0..n).step_by(CONV_CHUNK) {
        let n1 = (n0 + CONV_CHUNK).min(n);
        let cols = im2col(&xv, n0, n1, (kh, kw), spec, (ho, wo));
        let out = w2.dot(&cols); // [O, nn*Ho*Wo]
        let nn = n1 - n0;
        let out = out.into_shape((o, nn, ho, wo)).unwrap();
        for (ni, mut dst) in y.slice_mut(ndarray::s![n0..n1, .., .., ..]).outer_iter_mut().enumerate() {
            dst.assign(&out.index_axis(ndarray::Axis(1), ni));
        }
    }
    y.into_dyn()
}

/// Adjoint of conv2d w.r.t. its input: gx = conv_transpose(gy, w).
pub fn conv2d_input_grad<T: Scalar>(
    gy: &ArrayD<T>,
    w: &ArrayD<T>,
    spec: &ConvSpec,
    in_hw: (usize, usize),
) -> ArrayD<T> {
    let gv = as4(gy);
    let wv = as4(w);
    let (n, o, ho, wo) = gv.dim();
    let (ow, c, kh, kw) = wv.dim();
    assert_eq!(o, ow, "conv2d_input_grad: out-channel mismatch");
    let w2 = wv.into_shape((o, c * kh * kw)).unwrap();
    let mut gx = Array4::<T>::zeros((n, c, in_hw.0, in_hw.1));
    for n0 in (0..n).step_by(CONV_CHUNK) {
        let n1 = (n0 + CONV_CHUNK).min(n);
        let nn = n1 - n0;
        // [O, nn*Ho*Wo] view of gy chunk
        let mut g2 = Array2::<T>::zeros((o, nn * ho * wo));
        for ni in 0..nn {
            for oi in 0..o {
                let src = gv.slice(ndarray::s![n0 + ni, oi, .., ..]);
                let mut dst = g2.row_mut(oi);
                let dst = &mut dst.as_slice_mut().unwrap()[ni * ho * wo..(ni + 1) * ho * wo];
                dst.copy_from_slice(src.to_slice().expect("standard layout"));
            }
        }
        let gcols = w2.t().dot(&g2); // [C*KH*KW, nn*Ho*Wo]
        col2im(&gcols, &mut gx, n0, n1, (kh, kw), spec, (ho, wo));
    }
    gx.into_dyn()
}

/// Adjoint of conv2d w.r.t. the kernel: gw = corr(x, gy).
pub fn conv2d_weight_grad<T: Scalar>(
    x: &ArrayD<T>,
    gy: &ArrayD<T>,
    spec: &ConvSpec,
    k_hw: (usize, usize),
) -> ArrayD<T> {
    let xv = as4(x);
    let gv = as4(gy);
    let (n, c, _, _) = xv.dim();
    let (gn, o, ho, wo) = gv.dim();
    assert_eq!(n, gn, "conv2d_weight_grad: batch mismatch");
    let (kh, kw) = k_hw;
    let mut gw2 = Array2::<T>::zeros((o, c * kh * kw));
    for n0 in (0..n).step_by(CONV_CHUNK) {
        let n1 = (n0 + CONV_CHUNK).min(n);
        let nn = n1 - n0;
        let cols = im2col(&xv, n0, n1, (kh, kw), spec, (ho, wo));
        let mut g2 = Array2::<T>::zeros((o, nn * ho * wo));
        for ni in 0..nn {
            for oi in 0..o {
                let src = gv.slice(ndarray::s![n0 + ni, oi, .., ..]);
                let mut dst = g2.row_mut(oi);
                let dst = &mut dst.as_slice_mut().unwrap()[ni * ho * wo..(ni + 1) * ho * wo];
                dst.copy_from_slice(src.to_slice().expect("standard layout"));
            }
        }
        gw2 = gw2 + g2.dot(&cols.t());
    }
    gw2.into_shape((o, c, kh, kw)).unwrap().into_dyn()
}

/// Backward bilinear warp with zero padding: y[n,c,i,j] = x[n,c](i+v, j+u).
/// Flow layout: channel 0 = u (x displacement), channel 1 = v (y displacement).
pub fn warp_fwd<T: Scalar>(x: &ArrayD<T>, flow: &ArrayD<T>) -> ArrayD<T> {
    let xv = as4(x);
    let fv = as4(flow);
    let (n, c, h, w) = xv.dim();
    let (fn_, fc, fh, fw) = fv.dim();
    assert!(fn_ == n && fc == 2 && fh == h && fw == w, "warp: flow shape mismatch");
    let mut y = Array4::<T>::zeros((n, c, h, w));
    let xs = xv.as_slice().expect("standard layout");
    let fs = fv.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().unwrap();
    let plane = h * w;
    ys.par_chunks_mut(c * plane).enumerate().for_each(|(ni, yn)| {
        let fbase = ni * 2 * plane;
        let xbase = ni * c * plane;
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let sx = T::from_usize(j) + fs[fbase + p];
                let sy = T::from_usize(i) + fs[fbase + plane + p];
                let x0 = sx.floor();
                let y0 = sy.floor();
                let ax = sx - x0;
                let ay = sy - y0;
                let x0i = x0.to_f64x() as isize;
                let y0i = y0.to_f64x() as isize;
                let one = T::one();
                for (dy, dx, wgt) in [
                    (0isize, 0isize, (one - ax) * (one - ay)),
                    (0, 1, ax * (one - ay)),
                    (1, 0, (one - ax) * ay),
                    (1, 1, ax * ay),
                ] {
                    let yy = y0i + dy;
                    let xx = x0i + dx;
                    if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                        let src = yy as usize * w + xx as usize;
                        for ci in 0..c {
                            yn[ci * plane + p] += wgt * xs[xbase + ci * plane + src];
                        }
                    }
                }
            }
        }
    });
    y.into_dyn()
}

/// Adjoint of `warp_fwd` w.r.t. the sampled map (scatter of the grad).
pub fn warp_splat<T: Scalar>(gy: &ArrayD<T>, flow: &ArrayD<T>) -> ArrayD<T> {
    let gv = as4(gy);
    let fv = as4(flow);
    let (n, c, h, w) = gv.dim();
    let mut gx = Array4::<T>::zeros((n, c, h, w));
    let gs = gv.as_slice().expect("standard layout");
    let fs = fv.as_slice().expect("standard layout");
    let os = gx.as_slice_mut().unwrap();
    let plane = h * w;
    os.par_chunks_mut(c * plane).enumerate().for_each(|(ni, on)| {
        let fbase = ni * 2 * plane;
        let gbase = ni * c * plane;
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let sx = T::from_usize(j) + fs[fbase + p];
                let sy = T::from_usize(i) + fs[fbase + plane + p];
                let x0 = sx.floor();
                let y0 = sy.floor();
                let ax = sx - x0;
                let ay = sy - y0;
                let x0i = x0.to_f64x() as isize;
                let y0i = y0.to_f64x() as isize;
                let one = T::one();
                for (dy, dx, wgt) in [
                    (0isize, 0isize, (one - ax) * (one - ay)),
                    (0, 1, ax * (one - ay)),
                    (1, 0, (one - ax) * ay),
                    (1, 1, ax * ay),
                ] {
                    let yy = y0i + dy;
                    let xx = x0i + dx;
                    if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                        let dst = yy as usize * w + xx as usize;
                        for ci in 0..c {
                            on[ci * plane + dst] += wgt * gs[gbase + ci * plane + p];
                        }
                    }
                }
            }
        }
    });
    gx.into_dyn()
}

/// Adjoint of `warp_fwd` w.r.t. the flow field.
pub fn warp_flow_grad<T: Scalar>(x: &ArrayD<T>, flow: &ArrayD<T>, gy: &ArrayD<T>) -> ArrayD<T> {
    let xv = as4(x);
    let fv = as4(flow);
    let gv = as4(gy);
    let (n, c, h, w) = xv.dim();
    let mut gf = Array4::<T>::zeros((n, 2, h, w));
    let xs = xv.as_slice().expect("standard layout");
    let fs = fv.as_slice().expect("standard layout");
    let gs = gv.as_slice().expect("standard layout");
    let os = gf.as_slice_mut().unwrap();
    let plane = h * w;
    os.par_chunks_mut(2 * plane).enumerate().for_each(|(ni, on)| {
        let fbase = ni * 2 * plane;
        let xbase = ni * c * plane;
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let sx = T::from_usize(j) + fs[fbase + p];
                let sy = T::from_usize(i) + fs[fbase + plane + p];
                let x0 = sx.floor();
                let y0 = sy.floor();
                let ax = sx - x0;
                let ay = sy - y0;
                let x0i = x0.to_f64x() as isize;
                let y0i = y0.to_f64x() as isize;
                let one = T::one();
                // d(weight)/d(ax), d(weight)/d(ay) per tap
                let taps = [
                    (0isize, 0isize, -(one - ay), -(one - ax)),
                    (0, 1, one - ay, -ax),
                    (1, 0, -ay, one - ax),
                    (1, 1, ay, ax),
                ];
                let mut du = T::zero();
                let mut dv = T::zero();
                for (dy, dx, wu, wv) in taps {
                    let yy = y0i + dy;
                    let xx = x0i + dx;
                    if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                        let src = yy as usize * w + xx as usize;
                        for ci in 0..c {
                            let gval = gs[xbase + ci * plane + p] * xs[xbase + ci * plane + src];
                            du += wu * gval;
                            dv += wv * gval;
                        }
                    }
                }
                on[p] = du;
                on[plane + p] = dv;
            }
        }
    });
    gf.into_dyn()
}

/// Average pooling with square window k and stride k.
pub fn avg_pool2d<T: Scalar>(x: &ArrayD<T>, k: usize) -> ArrayD<T> {
    let xv = as4(x);
    let (n, c, h, w) = xv.dim();
    assert!(h % k == 0 && w % k == 0, "avg_pool2d: size not divisible by {k}");
    let (ho, wo) = (h / k, w / k);
    let inv = T::from_usize(k * k).recip();
    let mut y = Array4::<T>::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = T::zero();
                    for di in 0..k {
                        for dj in 0..k {
                            s += xv[(ni, ci, i * k + di, j * k + dj)];
                        }
                    }
                    y[(ni, ci, i, j)] = s * inv;
                }
            }
        }
    }
    y.into_dyn()
}

/// Nearest-neighbour upsampling by an integer factor k.
pub fn upsample_nearest<T: Scalar>(x: &ArrayD<T>, k: usize) -> ArrayD<T> {
    let xv = as4(x);
    let (n, c, h, w) = xv.dim();
    let mut y = Array4::<T>::zeros((n, c, h * k, w * k));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h * k {
                for j in 0..w * k {
                    y[(ni, ci, i, j)] = xv[(ni, ci, i / k, j / k)];
                }
            }
        }
    }
    y.into_dyn()
}

/// Numerically-stable softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let mut y = x.to_owned();
    let last = y.ndim() - 1;
    let d = y.shape()[last];
    let ys = y.as_slice_mut().expect("standard layout");
    ys.par_chunks_mut(d).for_each(|row| {
        let mut m = row[0];
        for v in row.iter() {
            if *v > m {
                m = *v;
            }
        }
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = s.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
    });
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn conv_identity_kernel() {
        let x = ndarray::Array::linspace(0.0f64, 1.0, 2 * 3 * 4 * 5)
            .into_shape((2, 3, 4, 5))
            .unwrap()
            .into_dyn();
        let mut w = Array4::<f64>::zeros((3, 3, 1, 1));
        for c in 0..3 {
            w[(c, c, 0, 0)] = 1.0;
        }
        let y = conv2d_fwd(&x, &w.into_dyn(), &ConvSpec::unit());
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = 17u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 3, 7, 6]), |_| next());
        let w = ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 3, 3, 3]), |_| next());
        let spec = ConvSpec { stride: (2, 1), pad: (1, 1), dilation: (1, 1) };
        let y = conv2d_fwd(&x, &w, &spec);
        let (ho, wo) = spec.out_hw((7, 6), (3, 3));
        assert_eq!(y.shape(), &[2, 4, ho, wo]);
        for n in 0..2 {
            for o in 0..4 {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ih = (oh * 2 + ki) as isize - 1;
                                    let iw = (ow + kj) as isize - 1;
                                    if ih >= 0 && ih < 7 && iw >= 0 && iw < 6 {
                                        acc += x[[n, c, ih as usize, iw as usize]]
                                            * w[[o, c, ki, kj]];
                                    }
                                }
                            }
                        }
                        assert!((y[[n, o, oh, ow]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_adjoint_identities() {
        // <gy, conv(x,w)> == <conv_input_grad(gy,w), x> == <conv_weight_grad(x,gy), w>
        let mut rng = 99u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 2, 6, 5]), |_| next());
        let w = ArrayD::from_shape_fn(ndarray::IxDyn(&[3, 2, 3, 2]), |_| next());
        let spec = ConvSpec { stride: (2, 1), pad: (1, 0), dilation: (1, 2) };
        let y = conv2d_fwd(&x, &w, &spec);
        let gy = ArrayD::from_shape_fn(ndarray::IxDyn(y.shape()), |_| next());
        let lhs: f64 = (&gy * &y).sum();
        let gx = conv2d_input_grad(&gy, &w, &spec, (6, 5));
        let mid: f64 = (&gx * &x).sum();
        let gw = conv2d_weight_grad(&x, &gy, &spec, (3, 2));
        let rhs: f64 = (&gw * &w).sum();
        assert!((lhs - mid).abs() < 1e-10, "{lhs} vs {mid}");
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let x = ndarray::Array::linspace(0.0f64, 1.0, 1 * 2 * 4 * 4)
            .into_shape((1, 2, 4, 4))
            .unwrap()
            .into_dyn();
        let f = ArrayD::zeros(ndarray::IxDyn(&[1, 2, 4, 4]));
        assert_eq!(warp_fwd(&x, &f), x);
    }

    #[test]
    fn warp_splat_is_adjoint() {
        let mut rng = 3u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 3, 5, 6]), |_| next());
        let f = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 2, 5, 6]), |_| next() * 2.0);
        let y = warp_fwd(&x, &f);
        let gy = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 3, 5, 6]), |_| next());
        let gx = warp_splat(&gy, &f);
        let lhs: f64 = (&gy * &y).sum();
        let rhs: f64 = (&gx * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = arr2(&[[0.0f64, 1.0, 2.0], [5.0, 5.0, 5.0]]).into_dyn();
        let y = softmax_last(&x);
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((y[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }
}
