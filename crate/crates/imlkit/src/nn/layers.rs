//! Non-convolutional layers and shape ops: linear, group norm, embedding,
//! activations, pooling and resampling, each with an explicit backward.

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;

use super::init::{normal_array2, xavier_std};
use super::{GradStore, Params, Scalar};

/// Fully connected layer, vector in / vector out.
#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    /// (out, in)
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: normal_array2(rng, (fan_out, fan_in), xavier_std(fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    /// All-zero weights; used where the mixer must start from a neutral state.
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Array2::zeros((fan_out, fan_in)), b: Array1::zeros(fan_out) }
    }

    pub fn forward(&self, x: &Array1<F>) -> Array1<F> {
        self.w.dot(x) + &self.b
    }

    pub fn backward(
        &self,
        x: &Array1<F>,
        gy: &Array1<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Array1<F> {
        let gw = gy
            .view()
            .insert_axis(Axis(1))
            .dot(&x.view().insert_axis(Axis(0)));
        gs.add(&format!("{path}.w"), &gw);
        gs.add(&format!("{path}.b"), gy);
        self.w.t().dot(gy)
    }
}

impl<F: Scalar> Params<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&format!("{prefix}.w"), self.w.view().into_dyn());
        f(&format!("{prefix}.b"), self.b.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&format!("{prefix}.w"), self.w.view_mut().into_dyn());
        f(&format!("{prefix}.b"), self.b.view_mut().into_dyn());
    }
}

/// Group normalization over (C/G, H, W) slabs with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub groups: usize,
    pub eps: f64,
}

/// Per-group statistics cached by the forward pass.
#[derive(Debug, Clone)]
pub struct GnCache<F> {
    mean: Vec<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> GroupNorm<F> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, GnCache<F>) {
        let (c, h, w) = x.dim();
        let per = c / self.groups;
        let n = F::from_f64((per * h * w) as f64);
        let mut y = Array3::zeros((c, h, w));
        let mut mean = Vec::with_capacity(self.groups);
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let slab = x.slice(ndarray::s![g * per..(g + 1) * per, .., ..]);
            let mu = slab.sum() / n;
            let var = slab.iter().map(|&v| (v - mu) * (v - mu)).fold(F::zero(), |a, b| a + b) / n;
            let istd = F::one() / (var + F::from_f64(self.eps)).sqrt();
            mean.push(mu);
            inv_std.push(istd);
            for ci in g * per..(g + 1) * per {
                let gam = self.gamma[ci];
                let bet = self.beta[ci];
                let xs = x.index_axis(Axis(0), ci);
                let mut ys = y.index_axis_mut(Axis(0), ci);
                ndarray::Zip::from(&mut ys).and(&xs).for_each(|yo, &xi| {
                    *yo = gam * (xi - mu) * istd + bet;
                });
            }
        }
        (y, GnCache { mean, inv_std })
    }

    pub fn backward(
        &self,
        x: &Array3<F>,
        cache: &GnCache<F>,
        gy: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let (c, h, w) = x.dim();
        let per = c / self.groups;
        let n = F::from_f64((per * h * w) as f64);
        let mut gx = Array3::zeros((c, h, w));
        let mut ggamma = Array1::<F>::zeros(c);
        let mut gbeta = Array1::<F>::zeros(c);
        for g in 0..self.groups {
            let mu = cache.mean[g];
            let istd = cache.inv_std[g];
            // accumulate the two group-level reductions over ghat = gy * gamma
            let mut sum_ghat = F::zero();
            let mut sum_ghat_xhat = F::zero();
            for ci in g * per..(g + 1) * per {
                let gam = self.gamma[ci];
                let xs = x.index_axis(Axis(0), ci);
                let gys = gy.index_axis(Axis(0), ci);
                let mut gg = F::zero();
                let mut gb = F::zero();
                ndarray::Zip::from(&gys).and(&xs).for_each(|&gyv, &xv| {
                    let xhat = (xv - mu) * istd;
                    gg += gyv * xhat;
                    gb += gyv;
                    sum_ghat += gyv * gam;
                    sum_ghat_xhat += gyv * gam * xhat;
                });
                ggamma[ci] = gg;
                gbeta[ci] = gb;
            }
            let mean_ghat = sum_ghat / n;
            let mean_ghat_xhat = sum_ghat_xhat / n;
            for ci in g * per..(g + 1) * per {
                let gam = self.gamma[ci];
                let xs = x.index_axis(Axis(0), ci);
                let gys = gy.index_axis(Axis(0), ci);
                let mut gxs = gx.index_axis_mut(Axis(0), ci);
                ndarray::Zip::from(&mut gxs)
                    .and(&gys)
                    .and(&xs)
                    .for_each(|gxv, &gyv, &xv| {
                        let xhat = (xv - mu) * istd;
                        *gxv = istd * (gyv * gam - mean_ghat - xhat * mean_ghat_xhat);
                    });
            }
        }
        gs.add(&format!("{path}.gamma"), &ggamma);
        gs.add(&format!("{path}.beta"), &gbeta);
        gx
    }
}

impl<F: Scalar> Params<F> for GroupNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&format!("{prefix}.gamma"), self.gamma.view().into_dyn());
        f(&format!("{prefix}.beta"), self.beta.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn());
        f(&format!("{prefix}.beta"), self.beta.view_mut().into_dyn());
    }
}

/// Token/bin embedding table.
#[derive(Debug, Clone)]
pub struct Embedding<F: Scalar> {
    /// (vocab, dim)
    pub table: Array2<F>,
}

impl<F: Scalar> Embedding<F> {
    pub fn new(rng: &mut ChaCha8Rng, vocab: usize, dim: usize, std: f64) -> Self {
        Self { table: normal_array2(rng, (vocab, dim), std) }
    }

    /// Looks up each id; output row i is `table[ids[i]]`.
    pub fn forward(&self, ids: &[usize]) -> Array2<F> {
        let dim = self.table.dim().1;
        let mut out = Array2::zeros((ids.len(), dim));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&self.table.row(id));
        }
        out
    }

    pub fn backward(&self, ids: &[usize], gy: &Array2<F>, path: &str, gs: &mut GradStore<F>) {
        let mut gt = Array2::<F>::zeros(self.table.dim());
        for (i, &id) in ids.iter().enumerate() {
            let mut row = gt.row_mut(id);
            row += &gy.row(i);
        }
        gs.add(&format!("{path}.table"), &gt);
    }
}

impl<F: Scalar> Params<F> for Embedding<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&format!("{prefix}.table"), self.table.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&format!("{prefix}.table"), self.table.view_mut().into_dyn());
    }
}

pub fn relu<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Backward masked by the forward *input* sign.
pub fn relu_backward<F: Scalar>(x: &Array3<F>, gy: &Array3<F>) -> Array3<F> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &xv| {
        if xv <= F::zero() {
            *g = F::zero();
        }
    });
    gx
}

pub fn relu_vec<F: Scalar>(x: &Array1<F>) -> Array1<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_vec_backward<F: Scalar>(x: &Array1<F>, gy: &Array1<F>) -> Array1<F> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &xv| {
        if xv <= F::zero() {
            *g = F::zero();
        }
    });
    gx
}

pub fn sigmoid_scalar<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

pub fn sigmoid_vec<F: Scalar>(x: &Array1<F>) -> Array1<F> {
    x.mapv(sigmoid_scalar)
}

pub fn sigmoid_map<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    x.mapv(sigmoid_scalar)
}

/// d(sigmoid)/dz given the forward output `s`.
pub fn sigmoid_grad<F: Scalar>(s: F) -> F {
    s * (F::one() - s)
}

/// Nearest-neighbour resize to an explicit output size (floor index map).
pub fn nearest_resize<F: Scalar>(x: &Array3<F>, oh: usize, ow: usize) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, oh, ow));
    for oy in 0..oh {
        let iy = (oy * h) / oh;
        for ox in 0..ow {
            let ix = (ox * w) / ow;
            for ci in 0..c {
                y[[ci, oy, ox]] = x[[ci, iy, ix]];
            }
        }
    }
    y
}

/// Backward of [`nearest_resize`] (scatter-add onto the source cells).
pub fn nearest_resize_backward<F: Scalar>(
    gy: &Array3<F>,
    ih: usize,
    iw: usize,
) -> Array3<F> {
    let (c, oh, ow) = gy.dim();
    let mut gx = Array3::zeros((c, ih, iw));
    for oy in 0..oh {
        let iy = (oy * ih) / oh;
        for ox in 0..ow {
            let ix = (ox * iw) / ow;
            for ci in 0..c {
                gx[[ci, iy, ix]] += gy[[ci, oy, ox]];
            }
        }
    }
    gx
}

/// Bilinear interpolation weights for one output coordinate
/// (align_corners = false convention).
fn bilerp_coords(o: usize, scale: f64, limit: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) * scale - 0.5;
    let src = src.max(0.0);
    let i0 = (src.floor() as usize).min(limit - 1);
    let i1 = (i0 + 1).min(limit - 1);
    let t = (src - i0 as f64).clamp(0.0, 1.0);
    (i0, i1, t)
}

/// Bilinear upsample by an integer factor.
pub fn bilinear_upsample<F: Scalar>(x: &Array3<F>, factor: usize) -> Array3<F> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h * factor, w * factor);
    let scale = 1.0 / factor as f64;
    let mut y = Array3::zeros((c, oh, ow));
    for oy in 0..oh {
        let (y0, y1, ty) = bilerp_coords(oy, scale, h);
        for ox in 0..ow {
            let (x0, x1, tx) = bilerp_coords(ox, scale, w);
            let (w00, w01, w10, w11) = (
                F::from_f64((1.0 - ty) * (1.0 - tx)),
                F::from_f64((1.0 - ty) * tx),
                F::from_f64(ty * (1.0 - tx)),
                F::from_f64(ty * tx),
            );
            for ci in 0..c {
                y[[ci, oy, ox]] = x[[ci, y0, x0]] * w00
                    + x[[ci, y0, x1]] * w01
                    + x[[ci, y1, x0]] * w10
                    + x[[ci, y1, x1]] * w11;
            }
        }
    }
    y
}

/// Backward of [`bilinear_upsample`].
pub fn bilinear_upsample_backward<F: Scalar>(gy: &Array3<F>, factor: usize) -> Array3<F> {
    let (c, oh, ow) = gy.dim();
    let (h, w) = (oh / factor, ow / factor);
    let scale = 1.0 / factor as f64;
    let mut gx = Array3::zeros((c, h, w));
    for oy in 0..oh {
        let (y0, y1, ty) = bilerp_coords(oy, scale, h);
        for ox in 0..ow {
            let (x0, x1, tx) = bilerp_coords(ox, scale, w);
            let (w00, w01, w10, w11) = (
                F::from_f64((1.0 - ty) * (1.0 - tx)),
                F::from_f64((1.0 - ty) * tx),
                F::from_f64(ty * (1.0 - tx)),
                F::from_f64(ty * tx),
            );
            for ci in 0..c {
                let g = gy[[ci, oy, ox]];
                gx[[ci, y0, x0]] += g * w00;
                gx[[ci, y0, x1]] += g * w01;
                gx[[ci, y1, x0]] += g * w10;
                gx[[ci, y1, x1]] += g * w11;
            }
        }
    }
    gx
}

/// Adaptive average pooling to (oh, ow), PyTorch bin convention.
pub fn adaptive_avg_pool<F: Scalar>(x: &Array3<F>, oh: usize, ow: usize) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, oh, ow));
    for oy in 0..oh {
        let y0 = (oy * h) / oh;
        let y1 = ((oy + 1) * h).div_ceil(oh);
        for ox in 0..ow {
            let x0 = (ox * w) / ow;
            let x1 = ((ox + 1) * w).div_ceil(ow);
            let area = F::from_f64(((y1 - y0) * (x1 - x0)) as f64);
            for ci in 0..c {
                let mut acc = F::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += x[[ci, iy, ix]];
                    }
                }
                y[[ci, oy, ox]] = acc / area;
            }
        }
    }
    y
}

/// Backward of [`adaptive_avg_pool`].
pub fn adaptive_avg_pool_backward<F: Scalar>(
    gy: &Array3<F>,
    ih: usize,
    iw: usize,
) -> Array3<F> {
    let (c, oh, ow) = gy.dim();
    let mut gx = Array3::zeros((c, ih, iw));
    for oy in 0..oh {
        let y0 = (oy * ih) / oh;
        let y1 = ((oy + 1) * ih).div_ceil(oh);
        for ox in 0..ow {
            let x0 = (ox * iw) / ow;
            let x1 = ((ox + 1) * iw).div_ceil(ow);
            let area = F::from_f64(((y1 - y0) * (x1 - x0)) as f64);
            for ci in 0..c {
                let g = gy[[ci, oy, ox]] / area;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        gx[[ci, iy, ix]] += g;
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::<f64>::new(&mut rng, 4, 3);
        let x = crate::nn::init::normal_array1(&mut rng, 4, 1.0);
        let gy = crate::nn::init::normal_array1(&mut rng, 3, 1.0);
        let mut gs = GradStore::new();
        let gx = lin.backward(&x, &gy, "l", &mut gs);
        let loss = |l: &Linear<f64>, xin: &Array1<f64>| (l.forward(xin) * &gy).sum();
        let eps = 1e-6;
        let gw = gs.get("l.w").unwrap().clone();
        let orig = lin.w[[1, 2]];
        lin.w[[1, 2]] = orig + eps;
        let lp = loss(&lin, &x);
        lin.w[[1, 2]] = orig - eps;
        let lm = loss(&lin, &x);
        lin.w[[1, 2]] = orig;
        assert!(((lp - lm) / (2.0 * eps) - gw[[1, 2]]).abs() < 1e-8);
        let mut xm = x.clone();
        let orig = xm[2];
        xm[2] = orig + eps;
        let lp = loss(&lin, &xm);
        xm[2] = orig - eps;
        let lm = loss(&lin, &xm);
        assert!(((lp - lm) / (2.0 * eps) - gx[2]).abs() < 1e-8);
    }

    #[test]
    fn groupnorm_normalizes_and_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gn = GroupNorm::<f64>::new(4, 2);
        gn.gamma = crate::nn::init::normal_array1(&mut rng, 4, 1.0);
        gn.beta = crate::nn::init::normal_array1(&mut rng, 4, 1.0);
        let x = crate::nn::init::normal_array3(&mut rng, (4, 3, 3), 2.0);
        let (y, cache) = gn.forward(&x);
        // group mean/var of normalized output (pre-affine) are 0/1
        let per = 2;
        for g in 0..2 {
            let mut vals = Vec::new();
            for ci in g * per..(g + 1) * per {
                for v in x.index_axis(Axis(0), ci).iter() {
                    vals.push((*v - cache.mean[g]) * cache.inv_std[g]);
                }
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9);
        }
        assert_eq!(y.dim(), x.dim());

        let gy = crate::nn::init::normal_array3(&mut rng, (4, 3, 3), 1.0);
        let mut gs = GradStore::new();
        let gx = gn.backward(&x, &cache, &gy, "gn", &mut gs);
        let loss = |g: &GroupNorm<f64>, xin: &Array3<f64>| (g.forward(xin).0 * &gy).sum();
        let eps = 1e-6;
        for idx in [[0usize, 0, 0], [2, 1, 2], [3, 2, 2]] {
            let mut xm = x.clone();
            let orig = xm[idx];
            xm[idx] = orig + eps;
            let lp = loss(&gn, &xm);
            xm[idx] = orig - eps;
            let lm = loss(&gn, &xm);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - gx[idx]).abs() < 1e-6, "gx at {idx:?}: fd={fd} an={}", gx[idx]);
        }
        let gg = gs.get("gn.gamma").unwrap().clone();
        let orig = gn.gamma[1];
        gn.gamma[1] = orig + eps;
        let lp = loss(&gn, &x);
        gn.gamma[1] = orig - eps;
        let lm = loss(&gn, &x);
        gn.gamma[1] = orig;
        assert!(((lp - lm) / (2.0 * eps) - gg[[1]]).abs() < 1e-6);
    }

    #[test]
    fn embedding_lookup_and_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let emb = Embedding::<f64>::new(&mut rng, 5, 3, 1.0);
        let ids = [1usize, 4, 1];
        let out = emb.forward(&ids);
        assert_eq!(out.row(0), emb.table.row(1));
        assert_eq!(out.row(2), emb.table.row(1));
        let gy = Array2::ones((3, 3));
        let mut gs = GradStore::new();
        emb.backward(&ids, &gy, "e", &mut gs);
        let gt = gs.get("e.table").unwrap();
        assert_eq!(gt[[1, 0]].into_f64(), 2.0); // id 1 used twice
        assert_eq!(gt[[4, 0]].into_f64(), 1.0);
        assert_eq!(gt[[0, 0]].into_f64(), 0.0);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = crate::nn::init::normal_array3::<f64>(&mut rng, (2, 3, 4), 1.0);
        let gy = crate::nn::init::normal_array3::<f64>(&mut rng, (2, 12, 16), 1.0);
        let lhs = (&bilinear_upsample(&x, 4) * &gy).sum();
        let rhs = (&x * &bilinear_upsample_backward(&gy, 4)).sum();
        assert!((lhs - rhs).abs() < 1e-9);

        let gy2 = crate::nn::init::normal_array3::<f64>(&mut rng, (2, 6, 8), 1.0);
        let lhs = (&nearest_resize(&x, 6, 8) * &gy2).sum();
        let rhs = (&x * &nearest_resize_backward(&gy2, 3, 4)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn adaptive_pool_constant_and_adjoint() {
        // constant input stays constant through pooling, even when output > input
        let x = Array3::from_elem((1, 2, 2), 3.5f64);
        for &(oh, ow) in &[(1usize, 1usize), (3, 3), (6, 6), (2, 2)] {
            let y = adaptive_avg_pool(&x, oh, ow);
            assert!(y.iter().all(|v| (v - 3.5).abs() < 1e-12), "{oh}x{ow}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = crate::nn::init::normal_array3::<f64>(&mut rng, (2, 5, 5), 1.0);
        let gy = crate::nn::init::normal_array3::<f64>(&mut rng, (2, 3, 3), 1.0);
        let lhs = (&adaptive_avg_pool(&x, 3, 3) * &gy).sum();
        let rhs = (&x * &adaptive_avg_pool_backward(&gy, 5, 5)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn relu_and_sigmoid_behave() {
        let x = ndarray::array![[-1.0f64, 2.0], [0.0, 3.0]]
            .into_shape_with_order((1, 2, 2))
            .unwrap();
        let y = relu(&x);
        assert_eq!(y[[0, 0, 0]], 0.0);
        assert_eq!(y[[0, 0, 1]], 2.0);
        assert!((sigmoid_scalar(0.0f64) - 0.5).abs() < 1e-12);
        assert!(sigmoid_scalar(-800.0f64) >= 0.0);
        assert!(sigmoid_scalar(800.0f64) <= 1.0);
    }
}
