//! 2-D convolution layers: dense conv via im2col + GEMM, and depthwise conv
//! with dilation (direct loops; kernels are small).

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

use super::init::{he_std, normal_array4};
use super::{GradStore, Params, Scalar};

/// Output spatial size for a conv with the given geometry.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    (input + 2 * pad - dilation * (k - 1) - 1) / stride + 1
}

/// Unfolds (C,H,W) into a (C*K*K, Hout*Wout) patch matrix.
pub fn im2col<F: Scalar>(
    x: &Array3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let ho = conv_out_dim(h, k, stride, pad, dilation);
    let wo = conv_out_dim(w, k, stride, pad, dilation);
    let mut cols = Array2::<F>::zeros((c * k * k, ho * wo));
    let xs = x.as_slice().expect("im2col: standard layout");
    let cs = cols.as_slice_mut().expect("col buffer");
    for ci in 0..c {
        let xplane = &xs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let out = &mut cs[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &xplane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        // contiguous run once ix is in range
                        for ox in 0..wo {
                            let ix = (ox + kj * dilation) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ox] = src_row[ix as usize];
                            }
                        }
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * stride + kj * dilation) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a (C*K*K, Hout*Wout) gradient matrix back onto the input (scatter-add).
pub fn col2im<F: Scalar>(
    gcols: &Array2<F>,
    dim: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Array3<F> {
    let (c, h, w) = dim;
    let ho = conv_out_dim(h, k, stride, pad, dilation);
    let wo = conv_out_dim(w, k, stride, pad, dilation);
    let mut gx = Array3::<F>::zeros(dim);
    let gs = gcols.as_slice().expect("gcols layout");
    let out = gx.as_slice_mut().expect("gx layout");
    for ci in 0..c {
        let gplane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &gs[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj * dilation) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            gplane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Dense 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    /// (Cout, Cin, K, K)
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = he_std(cin * k * k);
        Self {
            w: normal_array4(rng, (cout, cin, k, k), std),
            b: Array1::zeros(cout),
            stride,
            pad,
            dilation: 1,
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().2
    }

    pub fn out_channels(&self) -> usize {
        self.w.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.w.dim().1
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (cin, h, w) = x.dim();
        debug_assert_eq!(cin, self.in_channels(), "conv input channels");
        let k = self.kernel();
        let ho = conv_out_dim(h, k, self.stride, self.pad, self.dilation);
        let wo = conv_out_dim(w, k, self.stride, self.pad, self.dilation);
        let cols = im2col(x, k, self.stride, self.pad, self.dilation);
        let wmat = super::as_matrix(&self.w);
        // dot may hand back a reversed-axes result; normalize before reshaping
        let mut y = wmat.dot(&cols).as_standard_layout().into_owned();
        for (co, mut row) in y.outer_iter_mut().enumerate() {
            let b = self.b[co];
            row.mapv_inplace(|v| v + b);
        }
        y.into_shape_with_order((self.out_channels(), ho, wo))
            .expect("conv output reshape")
    }

    /// Backward pass; recomputes im2col from the cached input.
    pub fn backward(
        &self,
        x: &Array3<F>,
        gy: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let k = self.kernel();
        let (co, ho, wo) = gy.dim();
        debug_assert_eq!(co, self.out_channels());
        let gy2 = gy
            .view()
            .into_shape_with_order((co, ho * wo))
            .expect("gy reshape");
        let cols = im2col(x, k, self.stride, self.pad, self.dilation);
        let gw = gy2.dot(&cols.t()).as_standard_layout().into_owned();
        let gb = gy2.sum_axis(ndarray::Axis(1));
        let (o, i, kh, kw) = self.w.dim();
        gs.add(
            &format!("{path}.w"),
            &gw.into_shape_with_order((o, i, kh, kw)).expect("gw reshape"),
        );
        gs.add(&format!("{path}.b"), &gb);
        let wmat = super::as_matrix(&self.w);
        let gcols = wmat.t().dot(&gy2).as_standard_layout().into_owned();
        col2im(&gcols, x.dim(), k, self.stride, self.pad, self.dilation)
    }
}

impl<F: Scalar> Params<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&format!("{prefix}.w"), self.w.view().into_dyn());
        f(&format!("{prefix}.b"), self.b.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&format!("{prefix}.w"), self.w.view_mut().into_dyn());
        f(&format!("{prefix}.b"), self.b.view_mut().into_dyn());
    }
}

/// Applies a depthwise convolution with an externally supplied kernel
/// (one K×K filter per channel), zero padding chosen to preserve dims.
///
/// The kernel is a (C, K*K) matrix; the layer itself is stateless, which is
/// what the dynamic-filter decoder needs (its kernels are synthesized per
/// sample).
pub fn depthwise_forward<F: Scalar>(
    x: &Array3<F>,
    kernel: &Array2<F>,
    k: usize,
    dilation: usize,
) -> Array3<F> {
    let (c, h, w) = x.dim();
    debug_assert_eq!(kernel.dim(), (c, k * k));
    let pad = dilation * (k / 2);
    let mut y = Array3::<F>::zeros((c, h, w));
    let xs = x.as_slice().expect("dw input layout");
    let ks = kernel.as_slice().expect("dw kernel layout");
    let ys = y.as_slice_mut().expect("dw output layout");
    for ci in 0..c {
        let xp = &xs[ci * h * w..(ci + 1) * h * w];
        let kp = &ks[ci * k * k..(ci + 1) * k * k];
        let yp = &mut ys[ci * h * w..(ci + 1) * h * w];
        for oy in 0..h {
            for ki in 0..k {
                let iy = (oy + ki * dilation) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src = &xp[iy as usize * w..(iy as usize + 1) * w];
                let dst = &mut yp[oy * w..(oy + 1) * w];
                for kj in 0..k {
                    let kval = kp[ki * k + kj];
                    let off = (kj * dilation) as isize - pad as isize;
                    let (x0, x1) = clip_range(off, w);
                    for ox in x0..x1 {
                        dst[ox] += kval * src[(ox as isize + off) as usize];
                    }
                }
            }
        }
    }
    y
}

/// Backward of [`depthwise_forward`]; returns the input gradient and writes
/// the kernel gradient into `gkernel`.
pub fn depthwise_backward<F: Scalar>(
    x: &Array3<F>,
    gy: &Array3<F>,
    kernel: &Array2<F>,
    k: usize,
    dilation: usize,
    gkernel: &mut Array2<F>,
) -> Array3<F> {
    let (c, h, w) = x.dim();
    let pad = dilation * (k / 2);
    let mut gx = Array3::<F>::zeros((c, h, w));
    let xs = x.as_slice().unwrap();
    let gys = gy.as_slice().unwrap();
    let ks = kernel.as_slice().unwrap();
    let gks = gkernel.as_slice_mut().unwrap();
    let gxs = gx.as_slice_mut().unwrap();
    for ci in 0..c {
        let xp = &xs[ci * h * w..(ci + 1) * h * w];
        let gyp = &gys[ci * h * w..(ci + 1) * h * w];
        let kp = &ks[ci * k * k..(ci + 1) * k * k];
        let gkp = &mut gks[ci * k * k..(ci + 1) * k * k];
        let gxp = &mut gxs[ci * h * w..(ci + 1) * h * w];
        for oy in 0..h {
            for ki in 0..k {
                let iy = (oy + ki * dilation) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src = &xp[iy as usize * w..(iy as usize + 1) * w];
                let gsrc = &gyp[oy * w..(oy + 1) * w];
                let gdst = &mut gxp[iy as usize * w..(iy as usize + 1) * w];
                for kj in 0..k {
                    let off = (kj * dilation) as isize - pad as isize;
                    let (x0, x1) = clip_range(off, w);
                    let mut acc = F::zero();
                    let kval = kp[ki * k + kj];
                    for ox in x0..x1 {
                        let ix = (ox as isize + off) as usize;
                        acc += gsrc[ox] * src[ix];
                        gdst[ix] += gsrc[ox] * kval;
                    }
                    gkp[ki * k + kj] += acc;
                }
            }
        }
    }
    gx
}

/// Valid output-index range such that `ox + off` stays inside `[0, w)`.
/// May be empty (lo >= hi) when the offset exceeds the map width.
fn clip_range(off: isize, w: usize) -> (usize, usize) {
    let lo = if off < 0 { (-off) as usize } else { 0 };
    let hi = if off > 0 { w.saturating_sub(off as usize) } else { w };
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Textbook direct convolution used as an oracle.
    fn conv_naive(
        x: &Array3<f64>,
        w: &Array4<f64>,
        b: &Array1<f64>,
        stride: usize,
        pad: usize,
    ) -> Array3<f64> {
        let (cin, h, wd) = x.dim();
        let (cout, _, k, _) = w.dim();
        let ho = conv_out_dim(h, k, stride, pad, 1);
        let wo = conv_out_dim(wd, k, stride, pad, 1);
        let mut y = Array3::zeros((cout, ho, wo));
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += x[[ci, iy as usize, ix as usize]]
                                        * w[[co, ci, ki as usize, kj as usize]];
                                }
                            }
                        }
                    }
                    y[[co, oy, ox]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let conv = Conv2d::<f64>::new(&mut rng, 3, 4, 3, stride, pad);
            let x = crate::nn::init::normal_array3(&mut rng, (3, 7, 6), 1.0);
            let y = conv.forward(&x);
            let y2 = conv_naive(&x, &conv.w, &conv.b, stride, pad);
            assert_eq!(y.dim(), y2.dim());
            for (a, b) in y.iter().zip(y2.iter()) {
                assert!((a - b).abs() < 1e-10, "stride={stride} pad={pad}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new(&mut rng, 2, 3, 3, 2, 1);
        let x = crate::nn::init::normal_array3(&mut rng, (2, 6, 6), 1.0);
        // scalar loss: weighted sum of outputs
        let wsum = crate::nn::init::normal_array3(&mut rng, (3, 3, 3), 1.0);
        let loss = |c: &Conv2d<f64>, xin: &Array3<f64>| (c.forward(xin) * &wsum).sum();

        let mut gs = GradStore::new();
        let gx = conv.backward(&x, &wsum, "c", &mut gs);

        let eps = 1e-6;
        // weight grads
        let gw = gs.get("c.w").unwrap().clone();
        for idx in [[0, 0, 0, 0], [2, 1, 2, 1], [1, 0, 1, 2]] {
            let orig = conv.w[idx];
            conv.w[idx] = orig + eps;
            let lp = loss(&conv, &x);
            conv.w[idx] = orig - eps;
            let lm = loss(&conv, &x);
            conv.w[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - gw[idx.as_slice()]).abs() < 1e-6, "w{idx:?}");
        }
        // input grads
        let mut xm = x.clone();
        for idx in [[0, 0, 0], [1, 3, 2], [0, 5, 5]] {
            let orig = xm[idx];
            xm[idx] = orig + eps;
            let lp = loss(&conv, &xm);
            xm[idx] = orig - eps;
            let lm = loss(&conv, &xm);
            xm[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - gx[idx]).abs() < 1e-6, "x{idx:?}");
        }
        // bias grad equals sum over spatial positions of gy
        let gb = gs.get("c.b").unwrap();
        let expect = wsum.sum_axis(ndarray::Axis(2)).sum_axis(ndarray::Axis(1));
        for (a, b) in gb.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn depthwise_preserves_dims_and_grads_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = crate::nn::init::normal_array3(&mut rng, (3, 5, 5), 1.0);
        let kernel = crate::nn::init::normal_array2(&mut rng, (3, 9), 1.0);
        for &dil in &[1usize, 2] {
            let y = depthwise_forward(&x, &kernel, 3, dil);
            assert_eq!(y.dim(), x.dim());
            let gy = crate::nn::init::normal_array3(&mut rng, (3, 5, 5), 1.0);
            let mut gk = Array2::zeros((3, 9));
            let gx = depthwise_backward(&x, &gy, &kernel, 3, dil, &mut gk);
            let loss = |xin: &Array3<f64>, ker: &Array2<f64>| {
                (depthwise_forward(xin, ker, 3, dil) * &gy).sum()
            };
            let eps = 1e-6;
            let mut xm = x.clone();
            let orig = xm[[1, 2, 3]];
            xm[[1, 2, 3]] = orig + eps;
            let lp = loss(&xm, &kernel);
            xm[[1, 2, 3]] = orig - eps;
            let lm = loss(&xm, &kernel);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - gx[[1, 2, 3]]).abs() < 1e-6, "dil={dil}");

            let mut km = kernel.clone();
            let orig = km[[2, 4]];
            km[[2, 4]] = orig + eps;
            let lp = loss(&x, &km);
            km[[2, 4]] = orig - eps;
            let lm = loss(&x, &km);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - gk[[2, 4]]).abs() < 1e-6, "dil={dil}");
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), M> == <x, col2im(M)> for any M: the two maps are adjoint.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = crate::nn::init::normal_array3::<f64>(&mut rng, (2, 5, 4), 1.0);
        let cols = im2col(&x, 3, 2, 1, 1);
        let m = crate::nn::init::normal_array2::<f64>(&mut rng, cols.dim(), 1.0);
        let lhs = (&cols * &m).sum();
        let back = col2im(&m, x.dim(), 3, 2, 1, 1);
        let rhs = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
