//! Modality-gated encoder: vision/frequency perception heads, coarse
//! predictions, the modal gate, and the multi-scale backbone.

use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

use crate::error::{ImlError, Result};
use crate::freq::{image_to_tokens, FreqCache, FrequencyHead, FREQ_CHANNELS};
use crate::nn::conv::Conv2d;
use crate::nn::layers::{
    relu, relu_backward, sigmoid_scalar, GnCache, GroupNorm, Linear,
};
use crate::nn::loss::softmax_ce_map;
use crate::nn::{
    concat_channels, global_avg_pool, global_avg_pool_backward, split_channels, GradStore, Params,
    Scalar, TensorGrid,
};
use crate::types::{BinaryMask, Image};

/// Stride-4 feature width shared by both perception heads.
pub const HEAD_CHANNELS: usize = 32;
/// Backbone stage widths; stage i has stride 4 * 2^i.
pub const STAGE_WIDTHS: [usize; 4] = [32, 64, 128, 256];

/// Which branch feeds the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Fused,
    VisionOnly,
}

/// Hard modality selection plus the gate's probability of choosing Fused.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub choice: Route,
    pub probability: f32,
}

impl GateDecision {
    /// choice = Fused iff probability >= 0.5.
    pub fn from_probability(probability: f32) -> Self {
        let choice = if probability >= 0.5 { Route::Fused } else { Route::VisionOnly };
        Self { choice, probability }
    }
}

/// Normalizes 8-bit pixels to [-1, 1] as (C,H,W).
pub fn normalize_image<F: Scalar>(image: &Image) -> Array3<F> {
    let (h, w) = (image.height(), image.width());
    let mut x = Array3::zeros((3, h, w));
    for y in 0..h {
        for xx in 0..w {
            let px = image.get(y, xx);
            for c in 0..3 {
                x[[c, y, xx]] = F::from_f64(px[c] as f64 / 127.5 - 1.0);
            }
        }
    }
    x
}

/// Vision Perception Head: three 3x3 convs, downsampling twice to stride 4.
#[derive(Debug, Clone)]
pub struct VisionHead<F: Scalar> {
    pub c1: Conv2d<F>,
    pub c2: Conv2d<F>,
    pub c3: Conv2d<F>,
}

pub struct VisionCache<F: Scalar> {
    x: Array3<F>,
    h1: Array3<F>,
    a1: Array3<F>,
    h2: Array3<F>,
    a2: Array3<F>,
}

impl<F: Scalar> VisionHead<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::new(rng, 3, 16, 3, 2, 1),
            c2: Conv2d::new(rng, 16, HEAD_CHANNELS, 3, 2, 1),
            c3: Conv2d::new(rng, HEAD_CHANNELS, HEAD_CHANNELS, 3, 1, 1),
        }
    }

    pub fn forward(&self, x: Array3<F>) -> (TensorGrid<F>, VisionCache<F>) {
        let h1 = self.c1.forward(&x);
        let a1 = relu(&h1);
        let h2 = self.c2.forward(&a1);
        let a2 = relu(&h2);
        let y = self.c3.forward(&a2);
        let grid = TensorGrid { values: y, stride: 4 };
        (grid, VisionCache { x, h1, a1, h2, a2 })
    }

    pub fn backward(
        &self,
        cache: &VisionCache<F>,
        gy: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let g_a2 = self.c3.backward(&cache.a2, gy, &format!("{path}.c3"), gs);
        let g_h2 = relu_backward(&cache.h2, &g_a2);
        let g_a1 = self.c2.backward(&cache.a1, &g_h2, &format!("{path}.c2"), gs);
        let g_h1 = relu_backward(&cache.h1, &g_a1);
        self.c1.backward(&cache.x, &g_h1, &format!("{path}.c1"), gs)
    }
}

impl<F: Scalar> Params<F> for VisionHead<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.c1.visit(&format!("{prefix}.c1"), f);
        self.c2.visit(&format!("{prefix}.c2"), f);
        self.c3.visit(&format!("{prefix}.c3"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.c1.visit_mut(&format!("{prefix}.c1"), f);
        self.c2.visit_mut(&format!("{prefix}.c2"), f);
        self.c3.visit_mut(&format!("{prefix}.c3"), f);
    }
}

/// Channel-concat of F_rgb and F_freq followed by one 3x3 conv back to 32ch.
#[derive(Debug, Clone)]
pub struct FuseConv<F: Scalar> {
    pub conv: Conv2d<F>,
}

impl<F: Scalar> FuseConv<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        Self { conv: Conv2d::new(rng, HEAD_CHANNELS + FREQ_CHANNELS, HEAD_CHANNELS, 3, 1, 1) }
    }

    pub fn forward(
        &self,
        f_rgb: &TensorGrid<F>,
        f_freq: &TensorGrid<F>,
    ) -> Result<(TensorGrid<F>, Array3<F>)> {
        if f_rgb.spatial() != f_freq.spatial() || f_rgb.stride != f_freq.stride {
            return Err(ImlError::ShapeMismatch {
                expected: format!("{:?} at stride {}", f_rgb.spatial(), f_rgb.stride),
                got: format!("{:?} at stride {}", f_freq.spatial(), f_freq.stride),
            });
        }
        let cat = concat_channels(&[&f_rgb.values, &f_freq.values]);
        let y = self.conv.forward(&cat);
        Ok((TensorGrid { values: y, stride: 4 }, cat))
    }

    /// Returns (g_rgb, g_freq).
    pub fn backward(
        &self,
        cat: &Array3<F>,
        gy: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> (Array3<F>, Array3<F>) {
        let gcat = self.conv.backward(cat, gy, &format!("{path}.conv"), gs);
        let mut parts = split_channels(&gcat, &[HEAD_CHANNELS, FREQ_CHANNELS]);
        let g_freq = parts.pop().unwrap();
        let g_rgb = parts.pop().unwrap();
        (g_rgb, g_freq)
    }
}

impl<F: Scalar> Params<F> for FuseConv<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
    }
}

/// 1x1 conv to 2-class logits (the coarse mask predictions).
#[derive(Debug, Clone)]
pub struct CoarseHead<F: Scalar> {
    pub conv: Conv2d<F>,
}

impl<F: Scalar> CoarseHead<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        Self { conv: Conv2d::new(rng, HEAD_CHANNELS, 2, 1, 1, 0) }
    }

    pub fn forward(&self, f: &TensorGrid<F>) -> Array3<F> {
        self.conv.forward(&f.values)
    }

    pub fn backward(
        &self,
        f: &TensorGrid<F>,
        gy: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        self.conv.backward(&f.values, gy, &format!("{path}.conv"), gs)
    }
}

impl<F: Scalar> Params<F> for CoarseHead<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
    }
}

/// Binary classifier over the concatenated heads' features and coarse
/// predictions: two stride-2 convs, global pooling and one logit.
#[derive(Debug, Clone)]
pub struct ModalGate<F: Scalar> {
    pub g1: Conv2d<F>,
    pub g2: Conv2d<F>,
    pub fc: Linear<F>,
}

pub struct GateCache<F: Scalar> {
    cat: Array3<F>,
    h1: Array3<F>,
    a1: Array3<F>,
    h2: Array3<F>,
    a2: Array3<F>,
    pooled: ndarray::Array1<F>,
    pub logit: F,
}

impl<F: Scalar> ModalGate<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let cin = HEAD_CHANNELS + FREQ_CHANNELS + 2 + 2;
        Self {
            g1: Conv2d::new(rng, cin, 32, 3, 2, 1),
            g2: Conv2d::new(rng, 32, 32, 3, 2, 1),
            fc: Linear::new(rng, 32, 1),
        }
    }

    /// Returns the decision plus a cache for gate-loss backprop.
    pub fn forward(
        &self,
        f_rgb: &TensorGrid<F>,
        f_fused: &TensorGrid<F>,
        p_rgb: &Array3<F>,
        p_fused: &Array3<F>,
    ) -> (GateDecision, GateCache<F>) {
        let cat = concat_channels(&[&f_rgb.values, &f_fused.values, p_rgb, p_fused]);
        let h1 = self.g1.forward(&cat);
        let a1 = relu(&h1);
        let h2 = self.g2.forward(&a1);
        let a2 = relu(&h2);
        let (_, hh, ww) = a2.dim();
        let pooled = global_avg_pool(&a2);
        let logit = self.fc.forward(&pooled)[0];
        let probability = sigmoid_scalar(logit).into_f64() as f32;
        let _ = (hh, ww);
        (
            GateDecision::from_probability(probability),
            GateCache { cat, h1, a1, h2, a2, pooled, logit },
        )
    }

    /// Backprop `g_logit` through the gate; returns gradients for the four
    /// concatenated inputs.
    pub fn backward(
        &self,
        cache: &GateCache<F>,
        g_logit: F,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> (Array3<F>, Array3<F>, Array3<F>, Array3<F>) {
        let gvec = ndarray::Array1::from_elem(1, g_logit);
        let g_pooled = self.fc.backward(&cache.pooled, &gvec, &format!("{path}.fc"), gs);
        let (_, h, w) = cache.a2.dim();
        let g_a2 = global_avg_pool_backward(&g_pooled, h, w);
        let g_h2 = relu_backward(&cache.h2, &g_a2);
        let g_a1 = self.g2.backward(&cache.a1, &g_h2, &format!("{path}.g2"), gs);
        let g_h1 = relu_backward(&cache.h1, &g_a1);
        let g_cat = self.g1.backward(&cache.cat, &g_h1, &format!("{path}.g1"), gs);
        let mut parts = split_channels(&g_cat, &[HEAD_CHANNELS, FREQ_CHANNELS, 2, 2]);
        let g_pf = parts.pop().unwrap();
        let g_pr = parts.pop().unwrap();
        let g_ff = parts.pop().unwrap();
        let g_fr = parts.pop().unwrap();
        (g_fr, g_ff, g_pr, g_pf)
    }
}

impl<F: Scalar> Params<F> for ModalGate<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.g1.visit(&format!("{prefix}.g1"), f);
        self.g2.visit(&format!("{prefix}.g2"), f);
        self.fc.visit(&format!("{prefix}.fc"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.g1.visit_mut(&format!("{prefix}.g1"), f);
        self.g2.visit_mut(&format!("{prefix}.g2"), f);
        self.fc.visit_mut(&format!("{prefix}.fc"), f);
    }
}

/// Teacher label for gate supervision: 1 (Fused) iff the fused coarse
/// prediction has strictly lower cross-entropy; ties resolve to 0.
pub fn gate_teacher_label<F: Scalar>(
    p_rgb: &Array3<F>,
    p_fused: &Array3<F>,
    gt_stride4: &BinaryMask,
) -> u8 {
    let target: Array2<u8> = gt_stride4.bits().clone();
    let (ce_rgb, _) = softmax_ce_map(p_rgb, &target);
    let (ce_fused, _) = softmax_ce_map(p_fused, &target);
    u8::from(ce_fused < ce_rgb)
}

/// One pre-activation-free residual block: conv-GN-ReLU-conv-GN, skip, ReLU.
#[derive(Debug, Clone)]
pub struct ResidualBlock<F: Scalar> {
    pub c1: Conv2d<F>,
    pub n1: GroupNorm<F>,
    pub c2: Conv2d<F>,
    pub n2: GroupNorm<F>,
}

pub struct ResBlockCache<F: Scalar> {
    x: Array3<F>,
    h1: Array3<F>,
    n1: Array3<F>,
    n1c: GnCache<F>,
    a1: Array3<F>,
    h2: Array3<F>,
    n2c: GnCache<F>,
    pre: Array3<F>,
}

impl<F: Scalar> ResidualBlock<F> {
    pub fn new(rng: &mut ChaCha8Rng, ch: usize) -> Self {
        Self {
            c1: Conv2d::new(rng, ch, ch, 3, 1, 1),
            n1: GroupNorm::new(ch, 8),
            c2: Conv2d::new(rng, ch, ch, 3, 1, 1),
            n2: GroupNorm::new(ch, 8),
        }
    }

    pub fn forward(&self, x: Array3<F>) -> (Array3<F>, ResBlockCache<F>) {
        let h1 = self.c1.forward(&x);
        let (n1, n1c) = self.n1.forward(&h1);
        let a1 = relu(&n1);
        let h2 = self.c2.forward(&a1);
        let (n2, n2c) = self.n2.forward(&h2);
        let pre = n2 + &x;
        let y = relu(&pre);
        (y, ResBlockCache { x, h1, n1, n1c, a1, h2, n2c, pre })
    }

    pub fn backward(
        &self,
        cache: &ResBlockCache<F>,
        gy: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let g_pre = relu_backward(&cache.pre, gy);
        let g_n2 = g_pre.clone();
        let g_h2 = self.n2.backward(&cache.h2, &cache.n2c, &g_n2, &format!("{path}.n2"), gs);
        let g_a1 = self.c2.backward(&cache.a1, &g_h2, &format!("{path}.c2"), gs);
        let g_n1 = relu_backward(&cache.n1, &g_a1);
        let g_h1 = self.n1.backward(&cache.h1, &cache.n1c, &g_n1, &format!("{path}.n1"), gs);
        let g_x = self.c1.backward(&cache.x, &g_h1, &format!("{path}.c1"), gs);
        g_x + &g_pre
    }
}

impl<F: Scalar> Params<F> for ResidualBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.c1.visit(&format!("{prefix}.c1"), f);
        self.n1.visit(&format!("{prefix}.n1"), f);
        self.c2.visit(&format!("{prefix}.c2"), f);
        self.n2.visit(&format!("{prefix}.n2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.c1.visit_mut(&format!("{prefix}.c1"), f);
        self.n1.visit_mut(&format!("{prefix}.n1"), f);
        self.c2.visit_mut(&format!("{prefix}.c2"), f);
        self.n2.visit_mut(&format!("{prefix}.n2"), f);
    }
}

/// Stride-2 stage entry: conv + GN + ReLU.
#[derive(Debug, Clone)]
pub struct StageEntry<F: Scalar> {
    pub conv: Conv2d<F>,
    pub norm: GroupNorm<F>,
}

pub struct StageEntryCache<F: Scalar> {
    x: Array3<F>,
    h: Array3<F>,
    nc: GnCache<F>,
    n: Array3<F>,
}

impl<F: Scalar> StageEntry<F> {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        Self { conv: Conv2d::new(rng, cin, cout, 3, 2, 1), norm: GroupNorm::new(cout, 8) }
    }

    pub fn forward(&self, x: Array3<F>) -> (Array3<F>, StageEntryCache<F>) {
        let h = self.conv.forward(&x);
        let (n, nc) = self.norm.forward(&h);
        let y = relu(&n);
        (y, StageEntryCache { x, h, nc, n })
    }

    pub fn backward(
        &self,
        cache: &StageEntryCache<F>,
        gy: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let g_n = relu_backward(&cache.n, gy);
        let g_h = self.norm.backward(&cache.h, &cache.nc, &g_n, &format!("{path}.norm"), gs);
        self.conv.backward(&cache.x, &g_h, &format!("{path}.conv"), gs)
    }
}

impl<F: Scalar> Params<F> for StageEntry<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.norm.visit(&format!("{prefix}.norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
    }
}

/// 4-stage residual backbone over the routed stride-4 features.
#[derive(Debug, Clone)]
pub struct Backbone<F: Scalar> {
    pub entries: Vec<StageEntry<F>>, // stages 2..4
    pub blocks: Vec<[ResidualBlock<F>; 2]>,
}

pub struct BackboneCache<F: Scalar> {
    entry_caches: Vec<StageEntryCache<F>>,
    block_caches: Vec<[ResBlockCache<F>; 2]>,
}

impl<F: Scalar> Backbone<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut entries = Vec::new();
        let mut blocks = Vec::new();
        for (i, &w) in STAGE_WIDTHS.iter().enumerate() {
            if i > 0 {
                entries.push(StageEntry::new(rng, STAGE_WIDTHS[i - 1], w));
            }
            blocks.push([ResidualBlock::new(rng, w), ResidualBlock::new(rng, w)]);
        }
        Self { entries, blocks }
    }

    /// Produces the four pyramid levels F1..F4 at strides 4/8/16/32.
    pub fn forward(&self, x: Array3<F>) -> (Vec<TensorGrid<F>>, BackboneCache<F>) {
        let mut features = Vec::with_capacity(4);
        let mut entry_caches = Vec::new();
        let mut block_caches = Vec::new();
        let mut cur = x;
        for (i, block_pair) in self.blocks.iter().enumerate() {
            if i > 0 {
                let (y, ec) = self.entries[i - 1].forward(cur);
                entry_caches.push(ec);
                cur = y;
            }
            let (y0, c0) = block_pair[0].forward(cur);
            let (y1, c1) = block_pair[1].forward(y0);
            block_caches.push([c0, c1]);
            cur = y1;
            features.push(TensorGrid { values: cur.clone(), stride: 4 << i });
        }
        (features, BackboneCache { entry_caches, block_caches })
    }

    /// `gys` are gradients for F1..F4 (any may be zero); returns grad wrt input.
    pub fn backward(
        &self,
        cache: &BackboneCache<F>,
        gys: &[Array3<F>],
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let mut g = gys[3].clone();
        for i in (0..4).rev() {
            let pair = &self.blocks[i];
            let g1 = pair[1].backward(&cache.block_caches[i][1], &g, &format!("{path}.s{i}b1"), gs);
            let g0 = pair[0].backward(&cache.block_caches[i][0], &g1, &format!("{path}.s{i}b0"), gs);
            if i > 0 {
                let ge = self.entries[i - 1].backward(
                    &cache.entry_caches[i - 1],
                    &g0,
                    &format!("{path}.e{i}"),
                    gs,
                );
                g = ge + &gys[i - 1];
            } else {
                g = g0;
            }
        }
        g
    }
}

impl<F: Scalar> Params<F> for Backbone<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        for (i, e) in self.entries.iter().enumerate() {
            e.visit(&format!("{prefix}.e{}", i + 1), f);
        }
        for (i, pair) in self.blocks.iter().enumerate() {
            pair[0].visit(&format!("{prefix}.s{i}b0"), f);
            pair[1].visit(&format!("{prefix}.s{i}b1"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.e{}", i + 1), f);
        }
        for (i, pair) in self.blocks.iter_mut().enumerate() {
            pair[0].visit_mut(&format!("{prefix}.s{i}b0"), f);
            pair[1].visit_mut(&format!("{prefix}.s{i}b1"), f);
        }
    }
}

/// The complete modal-gate encoder.
#[derive(Debug, Clone)]
pub struct MgEncoder<F: Scalar> {
    pub vision: VisionHead<F>,
    pub freq: FrequencyHead<F>,
    pub fuse: FuseConv<F>,
    pub coarse_rgb: CoarseHead<F>,
    pub coarse_fused: CoarseHead<F>,
    pub gate: ModalGate<F>,
    pub backbone: Backbone<F>,
}

/// Multi-scale features plus the gate decision and both coarse predictions.
pub struct EncoderOutput<F: Scalar> {
    pub features: Vec<TensorGrid<F>>,
    pub gate: GateDecision,
    pub p_rgb: Array3<F>,
    /// Absent when the frequency branch was pruned (vision-only forced routing).
    pub p_fused: Option<Array3<F>>,
}

/// Everything the training backward pass needs from the encoder forward.
pub struct EncoderCache<F: Scalar> {
    pub vision: VisionCache<F>,
    pub f_rgb: TensorGrid<F>,
    pub freq: Option<FreqCache<F>>,
    pub f_freq: Option<TensorGrid<F>>,
    pub fuse_cat: Option<Array3<F>>,
    pub f_fused: Option<TensorGrid<F>>,
    pub gate: Option<GateCache<F>>,
    pub backbone: BackboneCache<F>,
    pub route: Route,
}

impl<F: Scalar> MgEncoder<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            vision: VisionHead::new(rng),
            freq: FrequencyHead::new(rng),
            fuse: FuseConv::new(rng),
            coarse_rgb: CoarseHead::new(rng),
            coarse_fused: CoarseHead::new(rng),
            gate: ModalGate::new(rng),
            backbone: Backbone::new(rng),
        }
    }

    /// Full forward. `routing_override` forces the backbone input during
    /// training (teacher forcing) or ablations; `with_freq_branch = false`
    /// prunes the frequency path entirely (vision-only models).
    pub fn forward(
        &self,
        image: &Image,
        routing_override: Option<Route>,
        with_freq_branch: bool,
    ) -> Result<(EncoderOutput<F>, EncoderCache<F>)> {
        self.forward_impl(image, routing_override, with_freq_branch, None)
    }

    /// Teacher-forced forward: the routing override is computed from the two
    /// coarse predictions once both heads have run.
    pub fn forward_with_teacher(
        &self,
        image: &Image,
        teacher: impl Fn(&Array3<F>, &Array3<F>) -> u8,
    ) -> Result<(EncoderOutput<F>, EncoderCache<F>)> {
        self.forward_impl(image, None, true, Some(&teacher))
    }

    fn forward_impl(
        &self,
        image: &Image,
        routing_override: Option<Route>,
        with_freq_branch: bool,
        teacher: Option<&dyn Fn(&Array3<F>, &Array3<F>) -> u8>,
    ) -> Result<(EncoderOutput<F>, EncoderCache<F>)> {
        let x = normalize_image::<F>(image);
        let (f_rgb, vision_cache) = self.vision.forward(x);
        let p_rgb = self.coarse_rgb.forward(&f_rgb);

        let mut freq_cache = None;
        let mut f_freq = None;
        let mut fuse_cat = None;
        let mut f_fused = None;
        let mut p_fused = None;
        let mut gate_cache = None;

        let decision = if with_freq_branch {
            let tokens = image_to_tokens(image);
            let (ff, fc) = self.freq.forward(&tokens, (image.height(), image.width()))?;
            let (fu, cat) = self.fuse.forward(&f_rgb, &ff)?;
            let pf = self.coarse_fused.forward(&fu);
            let (decision, gc) = self.gate.forward(&f_rgb, &fu, &p_rgb, &pf);
            freq_cache = Some(fc);
            f_freq = Some(ff);
            fuse_cat = Some(cat);
            f_fused = Some(fu);
            p_fused = Some(pf);
            gate_cache = Some(gc);
            decision
        } else {
            GateDecision { choice: Route::VisionOnly, probability: 0.0 }
        };

        let route = match teacher {
            Some(rule) => {
                let pf = p_fused.as_ref().expect("teacher routing requires the fused branch");
                if rule(&p_rgb, pf) == 1 {
                    Route::Fused
                } else {
                    Route::VisionOnly
                }
            }
            None => routing_override.unwrap_or(decision.choice),
        };
        let backbone_input = match route {
            Route::Fused => f_fused
                .as_ref()
                .ok_or_else(|| {
                    ImlError::InvalidInput("fused routing requires the frequency branch".into())
                })?
                .values
                .clone(),
            Route::VisionOnly => f_rgb.values.clone(),
        };
        let (features, backbone_cache) = self.backbone.forward(backbone_input);

        Ok((
            EncoderOutput { features, gate: decision, p_rgb, p_fused },
            EncoderCache {
                vision: vision_cache,
                f_rgb,
                freq: freq_cache,
                f_freq,
                fuse_cat,
                f_fused,
                gate: gate_cache,
                backbone: backbone_cache,
                route,
            },
        ))
    }

    pub fn gate_logit(cache: &EncoderCache<F>) -> Option<F> {
        cache.gate.as_ref().map(|g| g.logit)
    }

    /// Backward pass. Gradient sources:
    /// - `g_features`: per-level grads flowing back from decoder/AE,
    /// - `g_p_rgb` / `g_p_fused`: auxiliary coarse-prediction losses,
    /// - `g_gate_logit`: gate BCE.
    pub fn backward(
        &self,
        cache: &EncoderCache<F>,
        g_features: &[Array3<F>],
        g_p_rgb: Option<&Array3<F>>,
        g_p_fused: Option<&Array3<F>>,
        g_gate_logit: Option<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) {
        let g_backbone_in = self.backbone.backward(&cache.backbone, g_features, &format!("{path}.backbone"), gs);

        // accumulate gradients flowing into the two head feature maps
        let dim_rgb = cache.f_rgb.values.dim();
        let mut g_f_rgb = Array3::<F>::zeros(dim_rgb);
        let mut g_f_fused = cache.f_fused.as_ref().map(|f| Array3::<F>::zeros(f.values.dim()));

        match cache.route {
            Route::Fused => {
                if let Some(g) = g_f_fused.as_mut() {
                    *g += &g_backbone_in;
                }
            }
            Route::VisionOnly => g_f_rgb += &g_backbone_in,
        }

        // gate loss feeds all four concatenated inputs
        let mut g_p_rgb_total = g_p_rgb.cloned();
        let mut g_p_fused_total = g_p_fused.cloned();
        if let (Some(gl), Some(gc)) = (g_gate_logit, cache.gate.as_ref()) {
            let (g_fr, g_ff, g_pr, g_pf) = self.gate.backward(gc, gl, &format!("{path}.gate"), gs);
            g_f_rgb += &g_fr;
            if let Some(g) = g_f_fused.as_mut() {
                *g += &g_ff;
            }
            match g_p_rgb_total.as_mut() {
                Some(t) => *t += &g_pr,
                None => g_p_rgb_total = Some(g_pr),
            }
            match g_p_fused_total.as_mut() {
                Some(t) => *t += &g_pf,
                None => g_p_fused_total = Some(g_pf),
            }
        }

        // coarse heads
        if let Some(gpr) = g_p_rgb_total.as_ref() {
            g_f_rgb += &self.coarse_rgb.backward(&cache.f_rgb, gpr, &format!("{path}.coarse_rgb"), gs);
        }
        if let (Some(gpf), Some(ff)) = (g_p_fused_total.as_ref(), cache.f_fused.as_ref()) {
            if let Some(g) = g_f_fused.as_mut() {
                *g += &self.coarse_fused.backward(ff, gpf, &format!("{path}.coarse_fused"), gs);
            }
        }

        // fuse conv splits into rgb and freq parts
        if let (Some(gff), Some(cat)) = (g_f_fused.as_ref(), cache.fuse_cat.as_ref()) {
            let (g_rgb_part, g_freq_part) = self.fuse.backward(cat, gff, &format!("{path}.fuse"), gs);
            g_f_rgb += &g_rgb_part;
            if let Some(fc) = cache.freq.as_ref() {
                self.freq.backward(fc, &g_freq_part, &format!("{path}.freq"), gs);
            }
        }

        self.vision.backward(&cache.vision, &g_f_rgb, &format!("{path}.vision"), gs);
    }
}

impl<F: Scalar> Params<F> for MgEncoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.vision.visit(&format!("{prefix}.vision"), f);
        self.freq.visit(&format!("{prefix}.freq"), f);
        self.fuse.visit(&format!("{prefix}.fuse"), f);
        self.coarse_rgb.visit(&format!("{prefix}.coarse_rgb"), f);
        self.coarse_fused.visit(&format!("{prefix}.coarse_fused"), f);
        self.gate.visit(&format!("{prefix}.gate"), f);
        self.backbone.visit(&format!("{prefix}.backbone"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.vision.visit_mut(&format!("{prefix}.vision"), f);
        self.freq.visit_mut(&format!("{prefix}.freq"), f);
        self.fuse.visit_mut(&format!("{prefix}.fuse"), f);
        self.coarse_rgb.visit_mut(&format!("{prefix}.coarse_rgb"), f);
        self.coarse_fused.visit_mut(&format!("{prefix}.coarse_fused"), f);
        self.gate.visit_mut(&format!("{prefix}.gate"), f);
        self.backbone.visit_mut(&format!("{prefix}.backbone"), f);
    }
}
