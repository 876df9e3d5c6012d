//! Dynamic Weight Decoder: PPM + FPN feature fusion and dynamic-weight
//! filters whose depthwise kernels are mixed per sample from four base
//! kernels, conditioned on the current feature vector and a global image
//! vector.

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

use crate::error::{ImlError, Result};
use crate::nn::conv::{depthwise_backward, depthwise_forward, Conv2d};
use crate::nn::layers::{
    bilinear_upsample, bilinear_upsample_backward, adaptive_avg_pool, adaptive_avg_pool_backward,
    nearest_resize, nearest_resize_backward, relu, relu_backward, sigmoid_grad, sigmoid_vec,
    Linear,
};
use crate::nn::{
    concat_channels, global_avg_pool, global_avg_pool_backward, split_channels, GradStore, Params,
    Scalar, TensorGrid,
};

/// Decoder working width.
pub const DECODER_CHANNELS: usize = 128;
/// Dilation rates of the four parallel DWFs.
pub const DWF_DILATIONS: [usize; 4] = [1, 2, 4, 8];
/// PPM pooling grid sizes.
pub const PPM_POOLS: [usize; 4] = [1, 2, 3, 6];
/// Depthwise kernel size.
pub const DWF_KERNEL: usize = 3;
/// Number of base filters mixed into D_opt.
pub const DWF_BASES: usize = 4;

/// Frozen attention value used when dynamic mixing is disabled.
pub const FROZEN_ATTENTION: f64 = 0.5;

/// Four base depthwise kernels plus the attention mixer and pointwise conv.
#[derive(Debug, Clone)]
pub struct DynamicFilterBank<F: Scalar> {
    /// (4, C, K*K)
    pub base: Array3<F>,
    /// (4, 2C) + bias: logits for the sigmoid attention over base filters.
    pub mixer: Linear<F>,
    pub pointwise: Conv2d<F>,
    pub dilation: usize,
}

pub struct DwfCache<F: Scalar> {
    f: Array3<F>,
    mixer_in: Array1<F>,
    attention: Array1<F>,
    d_opt: Array2<F>,
    h: Array3<F>,
    dynamic: bool,
}

impl<F: Scalar> DwfCache<F> {
    pub fn attention(&self) -> &Array1<F> {
        &self.attention
    }
}

impl<F: Scalar> DynamicFilterBank<F> {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, dilation: usize) -> Self {
        // the four bases sum through sigmoid(0) = 0.5 weights at init, so
        // scale each down to keep D_opt near unit-variance
        let std = (2.0 / (DWF_KERNEL * DWF_KERNEL) as f64).sqrt() / 2.0;
        Self {
            base: crate::nn::init::normal_array3(
                rng,
                (DWF_BASES, channels, DWF_KERNEL * DWF_KERNEL),
                std,
            ),
            mixer: Linear::zeros(2 * channels, DWF_BASES),
            pointwise: Conv2d::new(rng, channels, channels, 1, 1, 0),

            dilation,
        }
    }

    pub fn channels(&self) -> usize {
        self.base.dim().1
    }

    /// Mixes the base kernels under the given attention weights.
    pub fn mix_kernel(&self, attention: &Array1<F>) -> Array2<F> {
        let (n, c, kk) = self.base.dim();
        let mut d_opt = Array2::<F>::zeros((c, kk));
        for i in 0..n {
            let a = attention[i];
            ndarray::Zip::from(&mut d_opt)
                .and(&self.base.index_axis(ndarray::Axis(0), i))
                .for_each(|d, &w| *d += a * w);
        }
        d_opt
    }

    /// `dynamic = false` freezes the attention at 0.5 per base (the "frozen
    /// weights" ablation); the mixer then receives no gradient.
    pub fn forward(
        &self,
        f: &Array3<F>,
        v_g: &Array1<F>,
        dynamic: bool,
    ) -> Result<(Array3<F>, DwfCache<F>)> {
        let (c, _, _) = f.dim();
        if c != self.channels() {
            return Err(ImlError::ShapeMismatch {
                expected: format!("{} channels", self.channels()),
                got: format!("{c} channels"),
            });
        }
        let v_c = global_avg_pool(f);
        let mut mixer_in = Array1::zeros(2 * c);
        mixer_in.slice_mut(ndarray::s![..c]).assign(&v_c);
        mixer_in.slice_mut(ndarray::s![c..]).assign(v_g);
        let attention = if dynamic {
            sigmoid_vec(&self.mixer.forward(&mixer_in))
        } else {
            Array1::from_elem(DWF_BASES, F::from_f64(FROZEN_ATTENTION))
        };
        let d_opt = self.mix_kernel(&attention);
        let h = depthwise_forward(f, &d_opt, DWF_KERNEL, self.dilation);
        let y = self.pointwise.forward(&h);
        let _ = v_c;
        Ok((y, DwfCache { f: f.clone(), mixer_in, attention, d_opt, h, dynamic }))
    }

    /// Returns (g_f, g_v_g).
    pub fn backward(
        &self,
        cache: &DwfCache<F>,
        gy: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> (Array3<F>, Array1<F>) {
        let c = self.channels();
        let (_, h, w) = cache.f.dim();
        let g_h = self.pointwise.backward(&cache.h, gy, &format!("{path}.pointwise"), gs);
        let mut g_d_opt = Array2::<F>::zeros(cache.d_opt.dim());
        let g_f_conv =
            depthwise_backward(&cache.f, &g_h, &cache.d_opt, DWF_KERNEL, self.dilation, &mut g_d_opt);

        // base-filter grads: dL/dW_i = a_i * dL/dD_opt
        let mut g_base = Array3::<F>::zeros(self.base.dim());
        for i in 0..DWF_BASES {
            let a = cache.attention[i];
            ndarray::Zip::from(&mut g_base.index_axis_mut(ndarray::Axis(0), i))
                .and(&g_d_opt)
                .for_each(|g, &d| *g = a * d);
        }
        gs.add(&format!("{path}.base"), &g_base);

        let mut g_f = g_f_conv;
        let mut g_v_g = Array1::<F>::zeros(c);
        if cache.dynamic {
            // attention grads: dL/da_i = <dL/dD_opt, W_i>
            let mut g_att = Array1::<F>::zeros(DWF_BASES);
            for i in 0..DWF_BASES {
                let mut acc = F::zero();
                ndarray::Zip::from(&g_d_opt)
                    .and(&self.base.index_axis(ndarray::Axis(0), i))
                    .for_each(|&d, &wv| acc += d * wv);
                g_att[i] = acc;
            }
            let g_logits = ndarray::Zip::from(&g_att)
                .and(&cache.attention)
                .map_collect(|&g, &a| g * sigmoid_grad(a));
            let g_mixer_in =
                self.mixer.backward(&cache.mixer_in, &g_logits, &format!("{path}.mixer"), gs);
            let g_v_c = g_mixer_in.slice(ndarray::s![..c]).to_owned();
            g_v_g += &g_mixer_in.slice(ndarray::s![c..]);
            g_f += &global_avg_pool_backward(&g_v_c, h, w);
        }
        (g_f, g_v_g)
    }
}

impl<F: Scalar> Params<F> for DynamicFilterBank<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&format!("{prefix}.base"), self.base.view().into_dyn());
        self.mixer.visit(&format!("{prefix}.mixer"), f);
        self.pointwise.visit(&format!("{prefix}.pointwise"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&format!("{prefix}.base"), self.base.view_mut().into_dyn());
        self.mixer.visit_mut(&format!("{prefix}.mixer"), f);
        self.pointwise.visit_mut(&format!("{prefix}.pointwise"), f);
    }
}

/// PPM over F4 plus an FPN top-down pass producing D1..D4 at 128 channels,
/// and the global vector v_g = GAP(D1).
#[derive(Debug, Clone)]
pub struct PpmFpn<F: Scalar> {
    pub ppm_convs: Vec<Conv2d<F>>,
    pub ppm_fuse: Conv2d<F>,
    pub laterals: Vec<Conv2d<F>>,
    pub smooths: Vec<Conv2d<F>>,
}

pub struct PpmFpnCache<F: Scalar> {
    f4: Array3<F>,
    pooled: Vec<Array3<F>>,
    branch_pre: Vec<Array3<F>>,
    ppm_cat: Array3<F>,
    ppm_pre: Array3<F>,
    laterals_in: Vec<Array3<F>>,
    tops: Vec<Array3<F>>,
    pub d: Vec<Array3<F>>,
}

impl<F: Scalar> PpmFpn<F> {
    pub fn new(rng: &mut ChaCha8Rng, widths: &[usize; 4]) -> Self {
        let branch = DECODER_CHANNELS / 2 / PPM_POOLS.len() * 2; // 64
        let ppm_convs =
            PPM_POOLS.iter().map(|_| Conv2d::new(rng, widths[3], branch, 1, 1, 0)).collect();
        let ppm_fuse =
            Conv2d::new(rng, widths[3] + branch * PPM_POOLS.len(), DECODER_CHANNELS, 3, 1, 1);
        let laterals =
            widths[..3].iter().map(|&w| Conv2d::new(rng, w, DECODER_CHANNELS, 1, 1, 0)).collect();
        let smooths = (0..3)
            .map(|_| Conv2d::new(rng, DECODER_CHANNELS, DECODER_CHANNELS, 3, 1, 1))
            .collect();
        Self { ppm_convs, ppm_fuse, laterals, smooths }
    }

    /// features = [F1, F2', F3', F4] -> (D1..D4, v_g).
    pub fn forward(
        &self,
        features: &[TensorGrid<F>],
    ) -> (Vec<TensorGrid<F>>, Array1<F>, PpmFpnCache<F>) {
        let f4 = &features[3].values;
        let (_, h4, w4) = f4.dim();
        let mut branches = Vec::new();
        let mut pooled_cache = Vec::new();
        let mut branch_pre = Vec::new();
        for (conv, &size) in self.ppm_convs.iter().zip(PPM_POOLS.iter()) {
            let pooled = adaptive_avg_pool(f4, size, size);
            let pre = conv.forward(&pooled);
            let act = relu(&pre);
            branches.push(nearest_resize(&act, h4, w4));
            pooled_cache.push(pooled);
            branch_pre.push(pre);
        }
        let mut cat_parts: Vec<&Array3<F>> = vec![f4];
        cat_parts.extend(branches.iter());
        let ppm_cat = concat_channels(&cat_parts);
        let ppm_pre = self.ppm_fuse.forward(&ppm_cat);
        let p4 = relu(&ppm_pre);

        // top-down
        let mut d = vec![Array3::zeros((1, 1, 1)); 4];
        let mut tops = vec![Array3::zeros((1, 1, 1)); 3];
        let mut laterals_in = Vec::new();
        d[3] = p4;
        for i in (0..3).rev() {
            let fi = &features[i].values;
            let (_, hi, wi) = fi.dim();
            let lat = self.laterals[i].forward(fi);
            let top = lat + &nearest_resize(&d[i + 1], hi, wi);
            d[i] = self.smooths[i].forward(&top);
            tops[i] = top;
            laterals_in.push(fi.clone());
        }
        laterals_in.reverse(); // index by level again

        let v_g = global_avg_pool(&d[0]);
        let grids = d
            .iter()
            .enumerate()
            .map(|(i, v)| TensorGrid { values: v.clone(), stride: 4 << i })
            .collect();
        (
            grids,
            v_g,
            PpmFpnCache {
                f4: f4.clone(),
                pooled: pooled_cache,
                branch_pre,
                ppm_cat,
                ppm_pre,
                laterals_in,
                tops,
                d,
            },
        )
    }

    /// `g_d` are gradients for D1..D4; `g_v_g` flows into GAP(D1).
    /// Returns gradients for the four input features.
    pub fn backward(
        &self,
        cache: &PpmFpnCache<F>,
        g_d: &mut [Array3<F>],
        g_v_g: &Array1<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Vec<Array3<F>> {
        let (_, h1, w1) = cache.d[0].dim();
        g_d[0] += &global_avg_pool_backward(g_v_g, h1, w1);

        let mut g_features = vec![Array3::zeros((1, 1, 1)); 4];
        let mut carry = Array3::<F>::zeros(cache.d[3].dim());
        for i in 0..3 {
            let g_di = &g_d[i];
            let g_top = self.smooths[i].backward(&cache.tops[i], g_di, &format!("{path}.smooth{i}"), gs);
            let g_lat =
                self.laterals[i].backward(&cache.laterals_in[i], &g_top, &format!("{path}.lat{i}"), gs);
            g_features[i] = g_lat;
            // the upsampled top-down contribution flows to the next level up
            let (_, hn, wn) = cache.d[i + 1].dim();
            let up_grad = nearest_resize_backward(&g_top, hn, wn);
            if i + 1 == 3 {
                carry = up_grad;
            } else {
                g_d[i + 1] += &up_grad;
            }
        }
        let g_p4 = carry + &g_d[3];
        let g_ppm_pre = relu_backward(&cache.ppm_pre, &g_p4);
        let g_cat = self.ppm_fuse.backward(&cache.ppm_cat, &g_ppm_pre, &format!("{path}.ppm_fuse"), gs);
        let branch = self.ppm_convs[0].out_channels();
        let mut widths = vec![cache.f4.dim().0];
        widths.extend(std::iter::repeat_n(branch, PPM_POOLS.len()));
        let mut parts = split_channels(&g_cat, &widths);
        let mut g_f4 = parts.remove(0);
        let (_, h4, w4) = cache.f4.dim();
        for ((g_branch, conv), (&size, (pooled, pre))) in parts
            .into_iter()
            .zip(self.ppm_convs.iter())
            .zip(PPM_POOLS.iter().zip(cache.pooled.iter().zip(cache.branch_pre.iter())))
        {
            let g_act = nearest_resize_backward(&g_branch, size, size);
            let g_pre = relu_backward(pre, &g_act);
            let g_pooled = conv.backward(pooled, &g_pre, &format!("{path}.ppm{size}"), gs);
            g_f4 += &adaptive_avg_pool_backward(&g_pooled, h4, w4);
        }
        g_features[3] = g_f4;
        g_features
    }
}

impl<F: Scalar> Params<F> for PpmFpn<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        for (conv, size) in self.ppm_convs.iter().zip(PPM_POOLS.iter()) {
            conv.visit(&format!("{prefix}.ppm{size}"), f);
        }
        self.ppm_fuse.visit(&format!("{prefix}.ppm_fuse"), f);
        for (i, l) in self.laterals.iter().enumerate() {
            l.visit(&format!("{prefix}.lat{i}"), f);
        }
        for (i, s) in self.smooths.iter().enumerate() {
            s.visit(&format!("{prefix}.smooth{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        for (conv, size) in self.ppm_convs.iter_mut().zip(PPM_POOLS.iter()) {
            conv.visit_mut(&format!("{prefix}.ppm{size}"), f);
        }
        self.ppm_fuse.visit_mut(&format!("{prefix}.ppm_fuse"), f);
        for (i, l) in self.laterals.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.lat{i}"), f);
        }
        for (i, s) in self.smooths.iter_mut().enumerate() {
            s.visit_mut(&format!("{prefix}.smooth{i}"), f);
        }
    }
}

/// The full dynamic-weight decoder.
#[derive(Debug, Clone)]
pub struct DwdDecoder<F: Scalar> {
    pub neck: PpmFpn<F>,
    pub reduce: Vec<Conv2d<F>>,
    pub dwfs: Vec<DynamicFilterBank<F>>,
    pub concat_reduce: Conv2d<F>,
    pub head_dwfs: Vec<DynamicFilterBank<F>>,
    pub classifier: Conv2d<F>,
}

pub struct DwdCache<F: Scalar> {
    neck: PpmFpnCache<F>,
    ups: Vec<Array3<F>>,
    sum: Array3<F>,
    dwf_caches: Vec<DwfCache<F>>,
    branch_cat: Array3<F>,
    red_pre: Array3<F>,
    h1_pre: Array3<F>,
    head_caches: Vec<DwfCache<F>>,
    h2: Array3<F>,
    pub v_g: Array1<F>,
}

impl<F: Scalar> DwdCache<F> {
    /// Attention vectors of every DWF instance, in application order.
    pub fn attentions(&self) -> Vec<Vec<f64>> {
        self.dwf_caches
            .iter()
            .chain(self.head_caches.iter())
            .map(|c| c.attention().iter().map(|a| a.into_f64()).collect())
            .collect()
    }
}

impl<F: Scalar> DwdDecoder<F> {
    pub fn new(rng: &mut ChaCha8Rng, widths: &[usize; 4]) -> Self {
        let c = DECODER_CHANNELS;
        Self {
            neck: PpmFpn::new(rng, widths),
            reduce: (0..3).map(|_| Conv2d::new(rng, c, c, 1, 1, 0)).collect(),
            dwfs: DWF_DILATIONS.iter().map(|&d| DynamicFilterBank::new(rng, c, d)).collect(),
            concat_reduce: Conv2d::new(rng, 4 * c, c, 1, 1, 0),
            head_dwfs: (0..2).map(|_| DynamicFilterBank::new(rng, c, 1)).collect(),
            classifier: Conv2d::new(rng, c, 2, 1, 1, 0),
        }
    }

    /// features = [F1, F2', F3', F4] -> 2-class logits at input resolution.
    pub fn forward(
        &self,
        features: &[TensorGrid<F>],
        dynamic: bool,
    ) -> Result<(Array3<F>, DwdCache<F>)> {
        let (d, v_g, neck_cache) = self.neck.forward(features);
        let (_, h1s, w1s) = d[0].values.dim();
        // upsample D2..D4 to stride 4, 1x1 reduce, and sum onto D1
        let mut sum = d[0].values.clone();
        let mut ups = Vec::new();
        for (i, rconv) in self.reduce.iter().enumerate() {
            let up = nearest_resize(&d[i + 1].values, h1s, w1s);
            sum += &rconv.forward(&up);
            ups.push(up);
        }
        // four dilated DWFs in parallel
        let mut branch_outs = Vec::new();
        let mut dwf_caches = Vec::new();
        for bank in &self.dwfs {
            let (y, c) = bank.forward(&sum, &v_g, dynamic)?;
            branch_outs.push(y);
            dwf_caches.push(c);
        }
        let branch_cat = concat_channels(&branch_outs.iter().collect::<Vec<_>>());
        let red_pre = self.concat_reduce.forward(&branch_cat);
        let red = relu(&red_pre);
        // two head DWFs
        let (h1_pre, hc1) = self.head_dwfs[0].forward(&red, &v_g, dynamic)?;
        let h1 = relu(&h1_pre);
        let (h2, hc2) = self.head_dwfs[1].forward(&h1, &v_g, dynamic)?;
        let logits_s4 = self.classifier.forward(&h2);
        let logits = bilinear_upsample(&logits_s4, 4);
        Ok((
            logits,
            DwdCache {
                neck: neck_cache,
                ups,
                sum,
                dwf_caches,
                branch_cat,
                red_pre,
                h1_pre,
                head_caches: vec![hc1, hc2],
                h2,
                v_g,
            },
        ))
    }

    /// Returns gradients for the four encoder features.
    pub fn backward(
        &self,
        cache: &DwdCache<F>,
        g_logits: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Vec<Array3<F>> {
        let g_s4 = bilinear_upsample_backward(g_logits, 4);
        let g_h2 = self.classifier.backward(&cache.h2, &g_s4, &format!("{path}.classifier"), gs);
        let (g_h1_act, mut g_v_g) =
            self.head_dwfs[1].backward(&cache.head_caches[1], &g_h2, &format!("{path}.hdwf1"), gs);
        let g_h1_pre = relu_backward(&cache.h1_pre, &g_h1_act);
        let (g_red_act, gv) =
            self.head_dwfs[0].backward(&cache.head_caches[0], &g_h1_pre, &format!("{path}.hdwf0"), gs);
        g_v_g += &gv;
        let g_red_pre = relu_backward(&cache.red_pre, &g_red_act);
        let g_cat =
            self.concat_reduce.backward(&cache.branch_cat, &g_red_pre, &format!("{path}.concat_reduce"), gs);
        let widths = vec![DECODER_CHANNELS; 4];
        let g_branches = split_channels(&g_cat, &widths);
        let mut g_sum = Array3::<F>::zeros(cache.sum.dim());
        for ((bank, bc), gb) in self.dwfs.iter().zip(cache.dwf_caches.iter()).zip(g_branches.iter())
        {
            let dil = bank.dilation;
            let (gf, gv) = bank.backward(bc, gb, &format!("{path}.dwf{dil}"), gs);
            g_sum += &gf;
            g_v_g += &gv;
        }
        // sum = D1 + sum_i reduce_i(up(D_{i+1}))
        let mut g_d: Vec<Array3<F>> = cache.neck.d.iter().map(|d| Array3::zeros(d.dim())).collect();
        g_d[0] += &g_sum;
        for (i, rconv) in self.reduce.iter().enumerate() {
            let g_up = rconv.backward(&cache.ups[i], &g_sum, &format!("{path}.reduce{i}"), gs);
            let (_, hi, wi) = cache.neck.d[i + 1].dim();
            g_d[i + 1] += &nearest_resize_backward(&g_up, hi, wi);
        }
        self.neck.backward(&cache.neck, &mut g_d, &g_v_g, &format!("{path}.neck"), gs)
    }
}

impl<F: Scalar> Params<F> for DwdDecoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.neck.visit(&format!("{prefix}.neck"), f);
        for (i, r) in self.reduce.iter().enumerate() {
            r.visit(&format!("{prefix}.reduce{i}"), f);
        }
        for bank in &self.dwfs {
            bank.visit(&format!("{prefix}.dwf{}", bank.dilation), f);
        }
        self.concat_reduce.visit(&format!("{prefix}.concat_reduce"), f);
        for (i, bank) in self.head_dwfs.iter().enumerate() {
            bank.visit(&format!("{prefix}.hdwf{i}"), f);
        }
        self.classifier.visit(&format!("{prefix}.classifier"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.neck.visit_mut(&format!("{prefix}.neck"), f);
        for (i, r) in self.reduce.iter_mut().enumerate() {
            r.visit_mut(&format!("{prefix}.reduce{i}"), f);
        }
        for bank in &mut self.dwfs {
            let d = bank.dilation;
            bank.visit_mut(&format!("{prefix}.dwf{d}"), f);
        }
        self.concat_reduce.visit_mut(&format!("{prefix}.concat_reduce"), f);
        for (i, bank) in self.head_dwfs.iter_mut().enumerate() {
            bank.visit_mut(&format!("{prefix}.hdwf{i}"), f);
        }
        self.classifier.visit_mut(&format!("{prefix}.classifier"), f);
    }
}

/// Ablation decoder: plain FPN (1x1 laterals, top-down, 3x3 smoothing) with a
/// 1x1 classification head on the stride-4 map.
#[derive(Debug, Clone)]
pub struct PlainDecoder<F: Scalar> {
    pub laterals: Vec<Conv2d<F>>,
    pub smooths: Vec<Conv2d<F>>,
    pub classifier: Conv2d<F>,
}

pub struct PlainCache<F: Scalar> {
    inputs: Vec<Array3<F>>,
    tops: Vec<Array3<F>>,
    d: Vec<Array3<F>>,
}

impl<F: Scalar> PlainDecoder<F> {
    pub fn new(rng: &mut ChaCha8Rng, widths: &[usize; 4]) -> Self {
        Self {
            laterals: widths
                .iter()
                .map(|&w| Conv2d::new(rng, w, DECODER_CHANNELS, 1, 1, 0))
                .collect(),
            smooths: (0..3)
                .map(|_| Conv2d::new(rng, DECODER_CHANNELS, DECODER_CHANNELS, 3, 1, 1))
                .collect(),
            classifier: Conv2d::new(rng, DECODER_CHANNELS, 2, 1, 1, 0),
        }
    }

    pub fn forward(&self, features: &[TensorGrid<F>]) -> (Array3<F>, PlainCache<F>) {
        let inputs: Vec<Array3<F>> = features.iter().map(|f| f.values.clone()).collect();
        let mut d = vec![Array3::zeros((1, 1, 1)); 4];
        let mut tops = vec![Array3::zeros((1, 1, 1)); 3];
        d[3] = self.laterals[3].forward(&inputs[3]);
        for i in (0..3).rev() {
            let (_, hi, wi) = inputs[i].dim();
            let top = self.laterals[i].forward(&inputs[i]) + &nearest_resize(&d[i + 1], hi, wi);
            d[i] = self.smooths[i].forward(&top);
            tops[i] = top;
        }
        let logits = bilinear_upsample(&self.classifier.forward(&d[0]), 4);
        (logits, PlainCache { inputs, tops, d })
    }

    pub fn backward(
        &self,
        cache: &PlainCache<F>,
        g_logits: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Vec<Array3<F>> {
        let g_s4 = bilinear_upsample_backward(g_logits, 4);
        let mut g_d: Vec<Array3<F>> = cache.d.iter().map(|d| Array3::zeros(d.dim())).collect();
        g_d[0] = self.classifier.backward(&cache.d[0], &g_s4, &format!("{path}.classifier"), gs);
        let mut g_features = vec![Array3::zeros((1, 1, 1)); 4];
        for i in 0..3 {
            let g_top = self.smooths[i].backward(&cache.tops[i], &g_d[i], &format!("{path}.smooth{i}"), gs);
            g_features[i] =
                self.laterals[i].backward(&cache.inputs[i], &g_top, &format!("{path}.lat{i}"), gs);
            let (_, hn, wn) = cache.d[i + 1].dim();
            g_d[i + 1] += &nearest_resize_backward(&g_top, hn, wn);
        }
        g_features[3] =
            self.laterals[3].backward(&cache.inputs[3], &g_d[3], &format!("{path}.lat3"), gs);
        g_features
    }
}

impl<F: Scalar> Params<F> for PlainDecoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        for (i, l) in self.laterals.iter().enumerate() {
            l.visit(&format!("{prefix}.lat{i}"), f);
        }
        for (i, s) in self.smooths.iter().enumerate() {
            s.visit(&format!("{prefix}.smooth{i}"), f);
        }
        self.classifier.visit(&format!("{prefix}.classifier"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        for (i, l) in self.laterals.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.lat{i}"), f);
        }
        for (i, s) in self.smooths.iter_mut().enumerate() {
            s.visit_mut(&format!("{prefix}.smooth{i}"), f);
        }
        self.classifier.visit_mut(&format!("{prefix}.classifier"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::STAGE_WIDTHS;
    use rand::SeedableRng;

    fn toy_bank(seed: u64, c: usize, dilation: usize) -> DynamicFilterBank<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = DynamicFilterBank::new(&mut rng, c, dilation);
        // generic mixer weights instead of the neutral zero init
        bank.mixer = Linear::new(&mut rng, 2 * c, DWF_BASES);
        bank
    }

    fn toy_features(seed: u64, h: usize, w: usize) -> Vec<TensorGrid<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        STAGE_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                TensorGrid::new(
                    crate::nn::init::normal_array3(&mut rng, (c, h >> i, w >> i), 1.0),
                    4 << i,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn dwf_endpoint_attention_selects_single_base() {
        let mut bank = toy_bank(1, 4, 1);
        // saturate mixer so attention ~ (1, 0, 0, 0)
        bank.mixer.w.fill(0.0);
        bank.mixer.b = ndarray::array![30.0, -30.0, -30.0, -30.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = crate::nn::init::normal_array3::<f64>(&mut rng, (4, 8, 8), 1.0);
        let v_g = crate::nn::init::normal_array1::<f64>(&mut rng, 4, 1.0);
        let (y, _) = bank.forward(&f, &v_g, true).unwrap();
        // reference: plain depthwise with W1 then pointwise
        let w1 = bank.base.index_axis(ndarray::Axis(0), 0).to_owned();
        let h = depthwise_forward(&f, &w1, DWF_KERNEL, 1);
        let y_ref = bank.pointwise.forward(&h);
        for (a, b) in y.iter().zip(y_ref.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dwf_identical_bases_ignore_mixer_patterns() {
        let mut bank = toy_bank(3, 4, 1);
        let w = bank.base.index_axis(ndarray::Axis(0), 0).to_owned();
        for i in 1..DWF_BASES {
            bank.base.index_axis_mut(ndarray::Axis(0), i).assign(&w);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = crate::nn::init::normal_array3::<f64>(&mut rng, (4, 6, 6), 1.0);
        let v_g = crate::nn::init::normal_array1::<f64>(&mut rng, 4, 1.0);
        let (y1, c1) = bank.forward(&f, &v_g, true).unwrap();
        // with all bases equal, output equals pointwise(depthwise(f, (sum A_i) W))
        let a_sum: f64 = c1.attention().iter().sum();
        let scaled = w.mapv(|v| v * a_sum);
        let y_ref = bank.pointwise.forward(&depthwise_forward(&f, &scaled, DWF_KERNEL, 1));
        for (a, b) in y1.iter().zip(y_ref.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // changing mixer parameters only rescales through sum A_i; structure is unchanged
        let mut bank2 = bank.clone();
        bank2.mixer.b.fill(0.7);
        let (y2, c2) = bank2.forward(&f, &v_g, true).unwrap();
        let s2: f64 = c2.attention().iter().sum();
        for (a, b) in y1.iter().zip(y2.iter()) {
            assert!((a / a_sum - b / s2).abs() < 1e-9);
        }
    }

    #[test]
    fn dwf_kernel_space_linearity_in_attention() {
        let bank = toy_bank(5, 4, 2);
        let a1 = ndarray::array![0.3f64, 0.9, 0.1, 0.5];
        let a2 = ndarray::array![0.6f64, 0.2, 0.8, 0.4];
        let alpha = 0.37;
        let blend = a1.mapv(|v| v * alpha) + a2.mapv(|v| v * (1.0 - alpha));
        let k1 = bank.mix_kernel(&a1);
        let k2 = bank.mix_kernel(&a2);
        let kb = bank.mix_kernel(&blend);
        let manual = k1.mapv(|v| v * alpha) + k2.mapv(|v| v * (1.0 - alpha));
        for (a, b) in kb.iter().zip(manual.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dwf_gradcheck_f64_toy() {
        // 8x8, C=4 toy, f64, central differences at 1e-6
        let bank = toy_bank(7, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = crate::nn::init::normal_array3::<f64>(&mut rng, (4, 8, 8), 1.0);
        let v_g = crate::nn::init::normal_array1::<f64>(&mut rng, 4, 1.0);
        let wsum = crate::nn::init::normal_array3::<f64>(&mut rng, (4, 8, 8), 1.0);
        let (_, cache) = bank.forward(&f, &v_g, true).unwrap();
        let mut gs = GradStore::new();
        let (g_f, g_v_g) = bank.backward(&cache, &wsum, "d", &mut gs);
        let loss = |b: &DynamicFilterBank<f64>, fv: &Array3<f64>, vg: &Array1<f64>| -> f64 {
            (b.forward(fv, vg, true).unwrap().0 * &wsum).sum()
        };
        let eps = 1e-6;
        // base filters
        let g_base = gs.get("d.base").unwrap().clone();
        let mut b = bank.clone();
        let mut worst = 0.0f64;
        for idx in [[0usize, 0, 0], [1, 2, 3], [3, 3, 8], [2, 1, 4]] {
            let orig = b.base[idx];
            b.base[idx] = orig + eps;
            let lp = loss(&b, &f, &v_g);
            b.base[idx] = orig - eps;
            let lm = loss(&b, &f, &v_g);
            b.base[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            worst = worst.max(crate::nn::gradcheck::rel_err(fd, g_base[idx.as_slice()], 1e-8));
        }
        // mixer
        let g_mixer = gs.get("d.mixer.w").unwrap().clone();
        for idx in [[0usize, 0], [3, 7], [2, 4]] {
            let orig = b.mixer.w[idx];
            b.mixer.w[idx] = orig + eps;
            let lp = loss(&b, &f, &v_g);
            b.mixer.w[idx] = orig - eps;
            let lm = loss(&b, &f, &v_g);
            b.mixer.w[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            worst = worst.max(crate::nn::gradcheck::rel_err(fd, g_mixer[idx.as_slice()], 1e-8));
        }
        // input feature and v_g
        let mut fm = f.clone();
        let orig = fm[[2, 4, 4]];
        fm[[2, 4, 4]] = orig + eps;
        let lp = loss(&bank, &fm, &v_g);
        fm[[2, 4, 4]] = orig - eps;
        let lm = loss(&bank, &fm, &v_g);
        let fd = (lp - lm) / (2.0 * eps);
        worst = worst.max(crate::nn::gradcheck::rel_err(fd, g_f[[2, 4, 4]], 1e-8));
        let mut vm = v_g.clone();
        let orig = vm[1];
        vm[1] = orig + eps;
        let lp = loss(&bank, &f, &vm);
        vm[1] = orig - eps;
        let lm = loss(&bank, &f, &vm);
        let fd = (lp - lm) / (2.0 * eps);
        worst = worst.max(crate::nn::gradcheck::rel_err(fd, g_v_g[1], 1e-8));
        assert!(worst <= 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn frozen_attention_blocks_mixer_grads() {
        let bank = toy_bank(9, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = crate::nn::init::normal_array3::<f64>(&mut rng, (4, 6, 6), 1.0);
        let v_g = crate::nn::init::normal_array1::<f64>(&mut rng, 4, 1.0);
        let (_, cache) = bank.forward(&f, &v_g, false).unwrap();
        assert!(cache.attention().iter().all(|&a| a == FROZEN_ATTENTION));
        let gy = Array3::ones((4, 6, 6));
        let mut gs = GradStore::new();
        let (_, g_v_g) = bank.backward(&cache, &gy, "d", &mut gs);
        assert!(gs.get("d.mixer.w").is_none());
        assert!(g_v_g.iter().all(|&v| v == 0.0));
        // channel mismatch is an error
        let bad = Array3::<f64>::zeros((3, 6, 6));
        assert!(bank.forward(&bad, &v_g, true).is_err());
    }

    #[test]
    fn neck_contract_and_decoder_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dec = DwdDecoder::<f64>::new(&mut rng, &STAGE_WIDTHS);
        let feats = toy_features(12, 16, 16);
        let (d, v_g, _) = dec.neck.forward(&feats);
        assert_eq!(v_g.len(), DECODER_CHANNELS);
        for (i, di) in d.iter().enumerate() {
            assert_eq!(di.channels(), DECODER_CHANNELS);
            assert_eq!(di.stride, 4 << i);
        }
        let (logits, _) = dec.forward(&feats, true).unwrap();
        assert_eq!(logits.dim(), (2, 64, 64));
        let sm = crate::nn::loss::softmax_map(&logits);
        for y in [0usize, 31, 63] {
            for x in [0usize, 17, 63] {
                assert!((sm[[0, y, x]] + sm[[1, y, x]] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decoder_depends_on_global_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut dec = DwdDecoder::<f64>::new(&mut rng, &STAGE_WIDTHS);
        for bank in dec.dwfs.iter_mut().chain(dec.head_dwfs.iter_mut()) {
            bank.mixer = Linear::new(&mut rng, 2 * DECODER_CHANNELS, DWF_BASES);
        }
        let feats = toy_features(14, 16, 16);
        let c = DECODER_CHANNELS;
        let v1 = crate::nn::init::normal_array1::<f64>(&mut rng, c, 1.0);
        let v2 = crate::nn::init::normal_array1::<f64>(&mut rng, c, 1.0);
        // probe a single DWF with two different global vectors
        let (d, _, _) = dec.neck.forward(&feats);
        let (y1, _) = dec.dwfs[0].forward(&d[0].values, &v1, true).unwrap();
        let (y2, _) = dec.dwfs[0].forward(&d[0].values, &v2, true).unwrap();
        assert!(y1.iter().zip(y2.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn full_decoder_gradcheck_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut dec = DwdDecoder::<f64>::new(&mut rng, &STAGE_WIDTHS);
        for bank in dec.dwfs.iter_mut().chain(dec.head_dwfs.iter_mut()) {
            bank.mixer = Linear::new(&mut rng, 2 * DECODER_CHANNELS, DWF_BASES);
        }
        let feats = toy_features(16, 16, 16);
        let wsum = crate::nn::init::normal_array3::<f64>(&mut rng, (2, 64, 64), 0.1);
        let (_, cache) = dec.forward(&feats, true).unwrap();
        let mut gs = GradStore::new();
        let g_feats = dec.backward(&cache, &wsum, "dec", &mut gs);
        let loss = |fs: &[TensorGrid<f64>]| -> f64 {
            (dec.forward(fs, true).unwrap().0 * &wsum).sum()
        };
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for (level, idx) in [(0usize, [3usize, 2, 2]), (2, [100, 1, 1]), (3, [255, 0, 0])] {
            let mut fs = feats.clone();
            let orig = fs[level].values[idx];
            fs[level].values[idx] = orig + eps;
            let lp = loss(&fs);
            fs[level].values[idx] = orig - eps;
            let lm = loss(&fs);
            let fd = (lp - lm) / (2.0 * eps);
            worst = worst.max(crate::nn::gradcheck::rel_err(fd, g_feats[level][idx], 1e-6));
        }
        assert!(worst <= 1e-4, "worst rel err {worst}");
        // a parameter deep in the PPM path also checks out
        let g = gs.get("dec.neck.ppm_fuse.w").unwrap().clone();
        let mut dm = dec.clone();
        let idx = [5usize, 100, 1, 1];
        let orig = dm.neck.ppm_fuse.w[idx];
        let lossp = |d: &DwdDecoder<f64>| (d.forward(&feats, true).unwrap().0 * &wsum).sum();
        dm.neck.ppm_fuse.w[idx] = orig + eps;
        let lp = lossp(&dm);
        dm.neck.ppm_fuse.w[idx] = orig - eps;
        let lm = lossp(&dm);
        let fd = (lp - lm) / (2.0 * eps);
        let err = crate::nn::gradcheck::rel_err(fd, g[idx.as_slice()], 1e-6);
        assert!(err <= 1e-4, "ppm err {err}");
    }

    #[test]
    fn plain_decoder_shapes_and_grads_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dec = PlainDecoder::<f32>::new(&mut rng, &STAGE_WIDTHS);
        let feats: Vec<TensorGrid<f32>> = {
            let mut r = ChaCha8Rng::seed_from_u64(18);
            STAGE_WIDTHS
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    TensorGrid::new(
                        crate::nn::init::normal_array3(&mut r, (c, 8 >> i, 8 >> i), 1.0),
                        4 << i,
                    )
                    .unwrap()
                })
                .collect()
        };
        let (logits, cache) = dec.forward(&feats);
        assert_eq!(logits.dim(), (2, 32, 32));
        let gy = Array3::ones((2, 32, 32));
        let mut gs = GradStore::new();
        let g_feats = dec.backward(&cache, &gy, "p", &mut gs);
        for g in &g_feats {
            assert!(g.iter().any(|&v| v != 0.0));
        }
    }
}
