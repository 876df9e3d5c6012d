//! Anomaly Enhancement: a training-only detection branch (two cascaded FPNs,
//! an RPN and a box head under the four Faster-R-CNN-style losses) fed by
//! attention-decoupled features, which are added back onto F2/F3 so the
//! segmentation path inherits the box-supervised contrast.

use ndarray::{Array1, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::nn::conv::Conv2d;
use crate::nn::layers::{
    nearest_resize, nearest_resize_backward, relu, relu_backward, relu_vec, relu_vec_backward,
    sigmoid_grad, sigmoid_scalar, sigmoid_vec, Linear,
};
use crate::nn::loss::{bce_with_logit, smooth_l1};
use crate::nn::{
    concat_channels, global_avg_pool, global_avg_pool_backward, GradStore, Params, Scalar,
    TensorGrid,
};
use crate::types::BoundingBox;

/// FPN/RPN working width.
pub const AE_CHANNELS: usize = 64;
/// Anchor side lengths per pyramid level (stride 8, stride 16).
pub const ANCHOR_SIDES: [[f32; 2]; 2] = [[32.0, 64.0], [64.0, 128.0]];
pub const RPN_POS_IOU: f32 = 0.7;
pub const RPN_NEG_IOU: f32 = 0.3;
pub const RPN_SAMPLES: usize = 32;
pub const BOX_PROPOSALS: usize = 16;
pub const BOX_POS_IOU: f32 = 0.5;

/// The four detection losses.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DetectionLosses {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub box_cls: f64,
    pub box_reg: f64,
}

impl DetectionLosses {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.box_cls + self.box_reg
    }
}

/// IoU of two half-open pixel boxes.
pub fn iou_box(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max)).saturating_sub(a.x_min.max(b.x_min));
    let iy = (a.y_max.min(b.y_max)).saturating_sub(a.y_min.max(b.y_min));
    let inter = (ix * iy) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Float box (x0, y0, x1, y1), half-open.
#[derive(Debug, Clone, Copy)]
pub struct FBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl FBox {
    pub fn from_bbox(b: &BoundingBox) -> Self {
        Self { x0: b.x_min as f32, y0: b.y_min as f32, x1: b.x_max as f32, y1: b.y_max as f32 }
    }

    pub fn area(&self) -> f32 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn iou(&self, other: &FBox) -> f32 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn cxcywh(&self) -> (f32, f32, f32, f32) {
        let w = self.x1 - self.x0;
        let h = self.y1 - self.y0;
        (self.x0 + 0.5 * w, self.y0 + 0.5 * h, w, h)
    }

    /// Standard box-delta encoding of `target` relative to `self`.
    pub fn encode(&self, target: &FBox) -> [f32; 4] {
        let (ax, ay, aw, ah) = self.cxcywh();
        let (tx, ty, tw, th) = target.cxcywh();
        [(tx - ax) / aw, (ty - ay) / ah, (tw / aw).ln(), (th / ah).ln()]
    }

    /// Applies predicted deltas to this anchor.
    pub fn decode(&self, d: [f32; 4]) -> FBox {
        let (ax, ay, aw, ah) = self.cxcywh();
        let cx = ax + d[0] * aw;
        let cy = ay + d[1] * ah;
        // clamp before exp so garbage regressions cannot overflow
        let w = aw * d[2].clamp(-8.0, 8.0).exp();
        let h = ah * d[3].clamp(-8.0, 8.0).exp();
        FBox { x0: cx - 0.5 * w, y0: cy - 0.5 * h, x1: cx + 0.5 * w, y1: cy + 0.5 * h }
    }

    pub fn clip(&self, h: usize, w: usize) -> FBox {
        FBox {
            x0: self.x0.clamp(0.0, w as f32),
            y0: self.y0.clamp(0.0, h as f32),
            x1: self.x1.clamp(0.0, w as f32),
            y1: self.y1.clamp(0.0, h as f32),
        }
    }
}

/// Anchor grid for one level: 2 anchors per cell, aspect ratio 1:1.
pub fn level_anchors(hc: usize, wc: usize, stride: usize, sides: [f32; 2]) -> Vec<FBox> {
    let mut anchors = Vec::with_capacity(hc * wc * 2);
    for y in 0..hc {
        for x in 0..wc {
            let cx = (x as f32 + 0.5) * stride as f32;
            let cy = (y as f32 + 0.5) * stride as f32;
            for s in sides {
                anchors.push(FBox {
                    x0: cx - 0.5 * s,
                    y0: cy - 0.5 * s,
                    x1: cx + 0.5 * s,
                    y1: cy + 0.5 * s,
                });
            }
        }
    }
    anchors
}

/// Channel attention followed by spatial attention, applied multiplicatively.
#[derive(Debug, Clone)]
pub struct AttentionLayer<F: Scalar> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub spatial: Conv2d<F>,
}

pub struct AttentionCache<F: Scalar> {
    x: Array3<F>,
    pooled: Array1<F>,
    h_pre: Array1<F>,
    h: Array1<F>,
    s_chan: Array1<F>,
    xc: Array3<F>,
    cat: Array3<F>,
    s_spat: Array3<F>,
    max_idx: ndarray::Array2<usize>,
}

impl<F: Scalar> AttentionLayer<F> {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let mid = (channels / 4).max(4);
        Self {
            fc1: Linear::new(rng, channels, mid),
            fc2: Linear::new(rng, mid, channels),
            spatial: Conv2d::new(rng, 2, 1, 7, 1, 3),
        }
    }

    pub fn forward(&self, x: Array3<F>) -> (Array3<F>, AttentionCache<F>) {
        let (c, h, w) = x.dim();
        // channel attention
        let pooled = global_avg_pool(&x);
        let h_pre = self.fc1.forward(&pooled);
        let hv = relu_vec(&h_pre);
        let s_chan = sigmoid_vec(&self.fc2.forward(&hv));
        let mut xc = x.clone();
        for (ci, mut plane) in xc.outer_iter_mut().enumerate() {
            let s = s_chan[ci];
            plane.mapv_inplace(|v| v * s);
        }
        // spatial attention over channel mean + max
        let mut mean = Array3::zeros((1, h, w));
        let mut maxm = Array3::zeros((1, h, w));
        let mut max_idx = ndarray::Array2::<usize>::zeros((h, w));
        let cn = F::from_f64(c as f64);
        for iy in 0..h {
            for ix in 0..w {
                let mut acc = F::zero();
                let mut best = xc[[0, iy, ix]];
                let mut best_c = 0;
                for ci in 0..c {
                    let v = xc[[ci, iy, ix]];
                    acc += v;
                    if v > best {
                        best = v;
                        best_c = ci;
                    }
                }
                mean[[0, iy, ix]] = acc / cn;
                maxm[[0, iy, ix]] = best;
                max_idx[[iy, ix]] = best_c;
            }
        }
        let cat = concat_channels(&[&mean, &maxm]);
        let z = self.spatial.forward(&cat);
        let s_spat = z.mapv(sigmoid_scalar);
        let mut y = xc.clone();
        for mut plane in y.outer_iter_mut() {
            ndarray::Zip::from(&mut plane)
                .and(&s_spat.index_axis(Axis(0), 0))
                .for_each(|v, &s| *v = *v * s);
        }
        let _ = z;
        (y, AttentionCache { x, pooled, h_pre, h: hv, s_chan, xc, cat, s_spat, max_idx })
    }

    pub fn backward(
        &self,
        cache: &AttentionCache<F>,
        gy: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let (c, h, w) = cache.x.dim();
        // y = xc * s_spat
        let mut g_xc = gy.clone();
        for mut plane in g_xc.outer_iter_mut() {
            ndarray::Zip::from(&mut plane)
                .and(&cache.s_spat.index_axis(Axis(0), 0))
                .for_each(|v, &s| *v = *v * s);
        }
        let mut g_s_spat = Array3::<F>::zeros((1, h, w));
        for ci in 0..c {
            ndarray::Zip::from(&mut g_s_spat.index_axis_mut(Axis(0), 0))
                .and(&gy.index_axis(Axis(0), ci))
                .and(&cache.xc.index_axis(Axis(0), ci))
                .for_each(|g, &gv, &xv| *g += gv * xv);
        }
        let mut g_z = g_s_spat;
        ndarray::Zip::from(&mut g_z.index_axis_mut(Axis(0), 0))
            .and(&cache.s_spat.index_axis(Axis(0), 0))
            .for_each(|g, &s| *g = *g * sigmoid_grad(s));
        let g_cat = self.spatial.backward(&cache.cat, &g_z, &format!("{path}.spatial"), gs);
        // mean/max pooling backward into xc
        let cn = F::from_f64(c as f64);
        for iy in 0..h {
            for ix in 0..w {
                let gm = g_cat[[0, iy, ix]] / cn;
                for ci in 0..c {
                    g_xc[[ci, iy, ix]] += gm;
                }
                g_xc[[cache.max_idx[[iy, ix]], iy, ix]] += g_cat[[1, iy, ix]];
            }
        }
        // xc = x * s_chan
        let mut g_x = g_xc.clone();
        let mut g_s_chan = Array1::<F>::zeros(c);
        for ci in 0..c {
            let s = cache.s_chan[ci];
            let mut acc = F::zero();
            ndarray::Zip::from(&mut g_x.index_axis_mut(Axis(0), ci))
                .and(&cache.x.index_axis(Axis(0), ci))
                .for_each(|g, &xv| {
                    acc += *g * xv;
                    *g = *g * s;
                });
            g_s_chan[ci] = acc;
        }
        let g_fc2_out = ndarray::Zip::from(&g_s_chan)
            .and(&cache.s_chan)
            .map_collect(|&g, &s| g * sigmoid_grad(s));
        let g_h = self.fc2.backward(&cache.h, &g_fc2_out, &format!("{path}.fc2"), gs);
        let g_h_pre = relu_vec_backward(&cache.h_pre, &g_h);
        let g_pooled = self.fc1.backward(&cache.pooled, &g_h_pre, &format!("{path}.fc1"), gs);
        g_x + &global_avg_pool_backward(&g_pooled, h, w)
    }
}

impl<F: Scalar> Params<F> for AttentionLayer<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
        self.spatial.visit(&format!("{prefix}.spatial"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
        self.spatial.visit_mut(&format!("{prefix}.spatial"), f);
    }
}

/// Two-level FPN with 1x1 laterals, top-down nearest upsampling and 3x3 smoothing.
#[derive(Debug, Clone)]
pub struct Fpn2<F: Scalar> {
    pub lat_a: Conv2d<F>,
    pub lat_b: Conv2d<F>,
    pub smooth_a: Conv2d<F>,
    pub smooth_b: Conv2d<F>,
}

pub struct Fpn2Cache<F: Scalar> {
    f_a: Array3<F>,
    f_b: Array3<F>,
    tb: Array3<F>,
    ta: Array3<F>,
}

impl<F: Scalar> Fpn2<F> {
    pub fn new(rng: &mut ChaCha8Rng, ca: usize, cb: usize) -> Self {
        Self {
            lat_a: Conv2d::new(rng, ca, AE_CHANNELS, 1, 1, 0),
            lat_b: Conv2d::new(rng, cb, AE_CHANNELS, 1, 1, 0),
            smooth_a: Conv2d::new(rng, AE_CHANNELS, AE_CHANNELS, 3, 1, 1),
            smooth_b: Conv2d::new(rng, AE_CHANNELS, AE_CHANNELS, 3, 1, 1),
        }
    }

    pub fn forward(&self, f_a: Array3<F>, f_b: Array3<F>) -> (Array3<F>, Array3<F>, Fpn2Cache<F>) {
        let (_, ha, wa) = f_a.dim();
        let tb = self.lat_b.forward(&f_b);
        let ta = self.lat_a.forward(&f_a) + &nearest_resize(&tb, ha, wa);
        let out_a = self.smooth_a.forward(&ta);
        let out_b = self.smooth_b.forward(&tb);
        (out_a, out_b, Fpn2Cache { f_a, f_b, tb, ta })
    }

    pub fn backward(
        &self,
        cache: &Fpn2Cache<F>,
        g_out_a: &Array3<F>,
        g_out_b: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> (Array3<F>, Array3<F>) {
        let (_, hb, wb) = cache.tb.dim();
        let g_ta = self.smooth_a.backward(&cache.ta, g_out_a, &format!("{path}.smooth_a"), gs);
        let mut g_tb = self.smooth_b.backward(&cache.tb, g_out_b, &format!("{path}.smooth_b"), gs);
        g_tb += &nearest_resize_backward(&g_ta, hb, wb);
        let g_f_a = self.lat_a.backward(&cache.f_a, &g_ta, &format!("{path}.lat_a"), gs);
        let g_f_b = self.lat_b.backward(&cache.f_b, &g_tb, &format!("{path}.lat_b"), gs);
        (g_f_a, g_f_b)
    }
}

impl<F: Scalar> Params<F> for Fpn2<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.lat_a.visit(&format!("{prefix}.lat_a"), f);
        self.lat_b.visit(&format!("{prefix}.lat_b"), f);
        self.smooth_a.visit(&format!("{prefix}.smooth_a"), f);
        self.smooth_b.visit(&format!("{prefix}.smooth_b"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.lat_a.visit_mut(&format!("{prefix}.lat_a"), f);
        self.lat_b.visit_mut(&format!("{prefix}.lat_b"), f);
        self.smooth_a.visit_mut(&format!("{prefix}.smooth_a"), f);
        self.smooth_b.visit_mut(&format!("{prefix}.smooth_b"), f);
    }
}

/// RPN shared across levels: 3x3 conv + 1x1 objectness/delta heads (2 anchors).
#[derive(Debug, Clone)]
pub struct Rpn<F: Scalar> {
    pub conv: Conv2d<F>,
    pub cls: Conv2d<F>,
    pub reg: Conv2d<F>,
}

pub struct RpnLevelCache<F: Scalar> {
    input: Array3<F>,
    h: Array3<F>,
    a: Array3<F>,
    pub cls_map: Array3<F>,
    pub reg_map: Array3<F>,
}

impl<F: Scalar> Rpn<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(rng, AE_CHANNELS, AE_CHANNELS, 3, 1, 1),
            cls: Conv2d::new(rng, AE_CHANNELS, 2, 1, 1, 0),
            reg: Conv2d::new(rng, AE_CHANNELS, 8, 1, 1, 0),
        }
    }

    pub fn forward(&self, input: Array3<F>) -> RpnLevelCache<F> {
        let h = self.conv.forward(&input);
        let a = relu(&h);
        let cls_map = self.cls.forward(&a);
        let reg_map = self.reg.forward(&a);
        RpnLevelCache { input, h, a, cls_map, reg_map }
    }

    pub fn backward(
        &self,
        cache: &RpnLevelCache<F>,
        g_cls: &Array3<F>,
        g_reg: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let mut g_a = self.cls.backward(&cache.a, g_cls, &format!("{path}.cls"), gs);
        g_a += &self.reg.backward(&cache.a, g_reg, &format!("{path}.reg"), gs);
        let g_h = relu_backward(&cache.h, &g_a);
        self.conv.backward(&cache.input, &g_h, &format!("{path}.conv"), gs)
    }
}

impl<F: Scalar> Params<F> for Rpn<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.cls.visit(&format!("{prefix}.cls"), f);
        self.reg.visit(&format!("{prefix}.reg"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
        self.cls.visit_mut(&format!("{prefix}.cls"), f);
        self.reg.visit_mut(&format!("{prefix}.reg"), f);
    }
}

/// Two-layer MLP over 7x7 pooled regions with class and delta heads.
#[derive(Debug, Clone)]
pub struct BoxHead<F: Scalar> {
    pub fc1: Linear<F>,
    pub cls: Linear<F>,
    pub reg: Linear<F>,
}

impl<F: Scalar> BoxHead<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(rng, AE_CHANNELS * 49, 128),
            cls: Linear::new(rng, 128, 2),
            reg: Linear::new(rng, 128, 4),
        }
    }
}

impl<F: Scalar> Params<F> for BoxHead<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.cls.visit(&format!("{prefix}.cls"), f);
        self.reg.visit(&format!("{prefix}.reg"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.cls.visit_mut(&format!("{prefix}.cls"), f);
        self.reg.visit_mut(&format!("{prefix}.reg"), f);
    }
}

/// 7x7 average RoI pooling over feature cells; returns pooled tensor and the
/// covered cell ranges per bin for the backward scatter.
fn roi_pool<F: Scalar>(
    feat: &Array3<F>,
    fbox: &FBox,
    stride: usize,
) -> (Array3<F>, Vec<(usize, usize, usize, usize)>) {
    let (c, h, w) = feat.dim();
    let x0 = (fbox.x0 / stride as f32).max(0.0);
    let y0 = (fbox.y0 / stride as f32).max(0.0);
    let x1 = (fbox.x1 / stride as f32).min(w as f32);
    let y1 = (fbox.y1 / stride as f32).min(h as f32);
    let bw = ((x1 - x0) / 7.0).max(0.0);
    let bh = ((y1 - y0) / 7.0).max(0.0);
    let mut out = Array3::zeros((c, 7, 7));
    let mut bins = Vec::with_capacity(49);
    for by in 0..7 {
        for bx in 0..7 {
            let cy0 = ((y0 + bh * by as f32).floor() as usize).min(h.saturating_sub(1));
            let cy1 = (((y0 + bh * (by as f32 + 1.0)).ceil() as usize).max(cy0 + 1)).min(h);
            let cx0 = ((x0 + bw * bx as f32).floor() as usize).min(w.saturating_sub(1));
            let cx1 = (((x0 + bw * (bx as f32 + 1.0)).ceil() as usize).max(cx0 + 1)).min(w);
            let area = F::from_f64(((cy1 - cy0) * (cx1 - cx0)) as f64);
            for ci in 0..c {
                let mut acc = F::zero();
                for iy in cy0..cy1 {
                    for ix in cx0..cx1 {
                        acc += feat[[ci, iy, ix]];
                    }
                }
                out[[ci, by, bx]] = acc / area;
            }
            bins.push((cy0, cy1, cx0, cx1));
        }
    }
    (out, bins)
}

fn roi_pool_backward<F: Scalar>(
    g_pooled: &Array3<F>,
    bins: &[(usize, usize, usize, usize)],
    g_feat: &mut Array3<F>,
) {
    let c = g_pooled.dim().0;
    for by in 0..7 {
        for bx in 0..7 {
            let (cy0, cy1, cx0, cx1) = bins[by * 7 + bx];
            let area = F::from_f64(((cy1 - cy0) * (cx1 - cx0)) as f64);
            for ci in 0..c {
                let g = g_pooled[[ci, by, bx]] / area;
                for iy in cy0..cy1 {
                    for ix in cx0..cx1 {
                        g_feat[[ci, iy, ix]] += g;
                    }
                }
            }
        }
    }
}

/// Sampled anchor with its label and (for positives) regression target.
struct AnchorSampleInfo {
    level: usize,
    /// flat anchor index within the level = (y * wc + x) * 2 + a
    index: usize,
    label: f32,
    target: Option<[f32; 4]>,
}


/// Everything needed to backprop the detection losses.
pub struct DetectionCache<F: Scalar> {
    rpn_caches: Vec<RpnLevelCache<F>>,
    fpn1: Fpn2Cache<F>,
    fpn2: Fpn2Cache<F>,
    fpn2_outs: (Array3<F>, Array3<F>),
    samples: Vec<AnchorSampleInfo>,
    proposals: Vec<(FBox, usize, usize, Option<[f32; 4]>, Vec<(usize, usize, usize, usize)>)>,
    prop_feats: Vec<Array3<F>>,
    prop_fc: Vec<(Array1<F>, Array1<F>, Array1<F>)>, // (flat, h_pre, h)
    prop_cls_logits: Vec<Array1<F>>,
    prop_reg_out: Vec<Array1<F>>,
    n_pos_anchors: usize,
    n_pos_props: usize,
}

/// The full anomaly-enhancement module.
#[derive(Debug, Clone)]
pub struct AnomalyEnhancer<F: Scalar> {
    pub attn2: AttentionLayer<F>,
    pub attn3: AttentionLayer<F>,
    pub fpn1: Fpn2<F>,
    pub fpn2: Fpn2<F>,
    pub rpn: Rpn<F>,
    pub box_head: BoxHead<F>,
    pub fuse2: Conv2d<F>,
    pub fuse3: Conv2d<F>,
}

pub struct AeCache<F: Scalar> {
    pub attn2: AttentionCache<F>,
    pub attn3: AttentionCache<F>,
    pub f_a: Array3<F>,
    pub f_b: Array3<F>,
    pub sum2: Array3<F>,
    pub sum3: Array3<F>,
    pub detection: Option<DetectionCache<F>>,
}

impl<F: Scalar> AnomalyEnhancer<F> {
    pub fn new(rng: &mut ChaCha8Rng, c2: usize, c3: usize) -> Self {
        Self {
            attn2: AttentionLayer::new(rng, c2),
            attn3: AttentionLayer::new(rng, c3),
            fpn1: Fpn2::new(rng, c2, c3),
            fpn2: Fpn2::new(rng, AE_CHANNELS, AE_CHANNELS),
            rpn: Rpn::new(rng),
            box_head: BoxHead::new(rng),
            fuse2: Conv2d::new(rng, c2, c2, 3, 1, 1),
            fuse3: Conv2d::new(rng, c3, c3, 3, 1, 1),
        }
    }

    /// Attention decoupling: F2/F3 -> task-agnostic f_a/f_b.
    pub fn ae_attention(
        &self,
        f2: &TensorGrid<F>,
        f3: &TensorGrid<F>,
    ) -> (Array3<F>, Array3<F>, AttentionCache<F>, AttentionCache<F>) {
        let (f_a, c2) = self.attn2.forward(f2.values.clone());
        let (f_b, c3) = self.attn3.forward(f3.values.clone());
        (f_a, f_b, c2, c3)
    }

    /// Fusion back onto the trunk: f2' = conv(f2 + f_a), f3' = conv(f3 + f_b).
    pub fn ae_fuse(
        &self,
        f2: &TensorGrid<F>,
        f3: &TensorGrid<F>,
        f_a: &Array3<F>,
        f_b: &Array3<F>,
    ) -> (TensorGrid<F>, TensorGrid<F>, Array3<F>, Array3<F>) {
        let sum2 = &f2.values + f_a;
        let sum3 = &f3.values + f_b;
        let f2p = self.fuse2.forward(&sum2);
        let f3p = self.fuse3.forward(&sum3);
        (
            TensorGrid { values: f2p, stride: f2.stride },
            TensorGrid { values: f3p, stride: f3.stride },
            sum2,
            sum3,
        )
    }

    /// Inference path: attention + fuse only; FPN/RPN/box-head parameters are
    /// never touched.
    pub fn forward_infer(
        &self,
        f2: &TensorGrid<F>,
        f3: &TensorGrid<F>,
    ) -> (TensorGrid<F>, TensorGrid<F>) {
        let (f_a, f_b, _, _) = self.ae_attention(f2, f3);
        let (f2p, f3p, _, _) = self.ae_fuse(f2, f3, &f_a, &f_b);
        (f2p, f3p)
    }

    /// Training path: detection losses plus the fused features.
    pub fn forward_train(
        &self,
        f2: &TensorGrid<F>,
        f3: &TensorGrid<F>,
        gt_boxes: &[BoundingBox],
        image_dims: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> (TensorGrid<F>, TensorGrid<F>, DetectionLosses, AeCache<F>) {
        let (f_a, f_b, ac2, ac3) = self.ae_attention(f2, f3);
        let (f2p, f3p, sum2, sum3) = self.ae_fuse(f2, f3, &f_a, &f_b);

        // detection over the cascaded FPNs
        let (a1, b1, fpn1_cache) = self.fpn1.forward(f_a.clone(), f_b.clone());
        let (a2, b2, fpn2_cache) = self.fpn2.forward(a1, b1);
        let rpn_a = self.rpn.forward(a2.clone());
        let rpn_b = self.rpn.forward(b2.clone());

        let strides = [f2.stride, f3.stride];
        let gt: Vec<FBox> = gt_boxes.iter().map(FBox::from_bbox).collect();
        let anchors: Vec<Vec<FBox>> = [&rpn_a, &rpn_b]
            .iter()
            .zip(strides)
            .zip(ANCHOR_SIDES)
            .map(|((cache, stride), sides)| {
                let (_, hc, wc) = cache.cls_map.dim();
                level_anchors(hc, wc, stride, sides)
            })
            .collect();

        let samples = assign_and_sample(&anchors, &gt, image_dims, rng);
        let n_pos_anchors = samples.iter().filter(|s| s.label > 0.5).count();

        // RPN losses
        let mut rpn_cls = 0.0f64;
        let mut rpn_reg = 0.0f64;
        let caches = [&rpn_a, &rpn_b];
        for s in &samples {
            let cache = caches[s.level];
            let (_, _, wc) = cache.cls_map.dim();
            let (cy, cx, ai) = unflatten_anchor(s.index, wc);
            let logit = cache.cls_map[[ai, cy, cx]].into_f64();
            let (l, _) = bce_with_logit(logit, s.label as f64);
            rpn_cls += l;
            if let Some(t) = s.target {
                for k in 0..4 {
                    let pred = cache.reg_map[[ai * 4 + k, cy, cx]].into_f64();
                    let (l, _) = smooth_l1(pred, t[k] as f64);
                    rpn_reg += l;
                }
            }
        }
        rpn_cls /= samples.len().max(1) as f64;
        rpn_reg /= (4 * n_pos_anchors.max(1)) as f64;

        // proposals: decode all anchors, clip, take top-K by objectness
        let proposals = top_proposals(&anchors, &caches, image_dims);
        let feats = [&a2, &b2];
        let mut prop_infos = Vec::new();
        let mut prop_feats = Vec::new();
        let mut prop_fc = Vec::new();
        let mut prop_cls_logits = Vec::new();
        let mut prop_reg_out = Vec::new();
        let mut box_cls = 0.0f64;
        let mut box_reg = 0.0f64;
        let mut n_pos_props = 0usize;
        for fbox in proposals {
            // level by box size: small boxes pool from the stride-8 level
            let level = usize::from(fbox.area().sqrt() >= 64.0);
            let (label, target) = match_proposal(&fbox, &gt);
            if label == 1 {
                n_pos_props += 1;
            }
            let (pooled, bins) = roi_pool(feats[level], &fbox, strides[level]);
            let flat = crate::nn::flatten(&pooled);
            let h_pre = self.box_head.fc1.forward(&flat);
            let h = relu_vec(&h_pre);
            let cls_logits = self.box_head.cls.forward(&h);
            let reg_out = self.box_head.reg.forward(&h);
            // 2-class CE
            let m = cls_logits[0].max(cls_logits[1]);
            let lse = m + ((cls_logits[0] - m).exp() + (cls_logits[1] - m).exp()).ln();
            box_cls += (lse - cls_logits[label]).into_f64();
            if let Some(t) = target {
                for k in 0..4 {
                    let (l, _) = smooth_l1(reg_out[k].into_f64(), t[k] as f64);
                    box_reg += l;
                }
            }
            prop_infos.push((fbox, level, label, target, bins));
            prop_feats.push(pooled);
            prop_fc.push((flat, h_pre, h));
            prop_cls_logits.push(cls_logits);
            prop_reg_out.push(reg_out);
        }
        let n_props = prop_infos.len().max(1);
        box_cls /= n_props as f64;
        box_reg /= (4 * n_pos_props.max(1)) as f64;

        let losses = DetectionLosses { rpn_cls, rpn_reg, box_cls, box_reg };
        let detection = DetectionCache {
            rpn_caches: vec![rpn_a, rpn_b],
            fpn1: fpn1_cache,
            fpn2: fpn2_cache,
            fpn2_outs: (a2, b2),
            samples,
            proposals: prop_infos,
            prop_feats,
            prop_fc,
            prop_cls_logits,
            prop_reg_out,
            n_pos_anchors,
            n_pos_props,
        };
        (
            f2p,
            f3p,
            losses,
            AeCache { attn2: ac2, attn3: ac3, f_a, f_b, sum2, sum3, detection: Some(detection) },
        )
    }

    /// Backward for the whole module.
    ///
    /// `g_f2p`/`g_f3p` flow back from the decoder through the fused features;
    /// `det_scale` seeds the four detection losses (lambda_det, already divided
    /// by the batch size by the caller). Returns (g_f2, g_f3).
    pub fn backward(
        &self,
        cache: &AeCache<F>,
        g_f2p: &Array3<F>,
        g_f3p: &Array3<F>,
        det_scale: F,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> (Array3<F>, Array3<F>) {
        // fuse convs: f2' = conv(f2 + f_a)
        let g_sum2 = self.fuse2.backward(&cache.sum2, g_f2p, &format!("{path}.fuse2"), gs);
        let g_sum3 = self.fuse3.backward(&cache.sum3, g_f3p, &format!("{path}.fuse3"), gs);
        let mut g_f_a = g_sum2.clone();
        let mut g_f_b = g_sum3.clone();
        let mut g_f2 = g_sum2;
        let mut g_f3 = g_sum3;

        if let Some(det) = cache.detection.as_ref() {
            if det_scale != F::zero() {
                let (g_da, g_db) = self.detection_backward(det, det_scale, path, gs);
                let (g_a, g_b) =
                    self.fpn1.backward(&det.fpn1, &g_da, &g_db, &format!("{path}.fpn1"), gs);
                g_f_a += &g_a;
                g_f_b += &g_b;
            }
        }

        g_f2 += &self.attn2.backward(&cache.attn2, &g_f_a, &format!("{path}.attn2"), gs);
        g_f3 += &self.attn3.backward(&cache.attn3, &g_f_b, &format!("{path}.attn3"), gs);
        (g_f2, g_f3)
    }

    /// Seeds the four detection-loss gradients and backprops them to the
    /// first FPN's inputs.
    fn detection_backward(
        &self,
        det: &DetectionCache<F>,
        scale: F,
        path: &str,
        gs: &mut GradStore<F>,
    ) -> (Array3<F>, Array3<F>) {
        let caches = &det.rpn_caches;
        let mut g_cls: Vec<Array3<F>> =
            caches.iter().map(|c| Array3::zeros(c.cls_map.dim())).collect();
        let mut g_reg: Vec<Array3<F>> =
            caches.iter().map(|c| Array3::zeros(c.reg_map.dim())).collect();

        // rpn_cls + rpn_reg seeds
        let n_samp = F::from_f64(det.samples.len().max(1) as f64);
        let n_pos = F::from_f64((4 * det.n_pos_anchors.max(1)) as f64);
        for s in &det.samples {
            let cache = &caches[s.level];
            let (_, _, wc) = cache.cls_map.dim();
            let (cy, cx, ai) = unflatten_anchor(s.index, wc);
            let logit = cache.cls_map[[ai, cy, cx]];
            let (_, g) = bce_with_logit(logit, F::from_f64(s.label as f64));
            g_cls[s.level][[ai, cy, cx]] += scale * g / n_samp;
            if let Some(t) = s.target {
                for k in 0..4 {
                    let pred = cache.reg_map[[ai * 4 + k, cy, cx]];
                    let (_, g) = smooth_l1(pred, F::from_f64(t[k] as f64));
                    g_reg[s.level][[ai * 4 + k, cy, cx]] += scale * g / n_pos;
                }
            }
        }

        // box head seeds -> pooled features -> fpn2 outputs
        let mut g_feats = [
            Array3::<F>::zeros(det.fpn2_outs.0.dim()),
            Array3::<F>::zeros(det.fpn2_outs.1.dim()),
        ];
        let n_props = F::from_f64(det.proposals.len().max(1) as f64);
        let n_pos_p = F::from_f64((4 * det.n_pos_props.max(1)) as f64);
        for (i, (_, level, label, target, bins)) in det.proposals.iter().enumerate() {
            let cls_logits = &det.prop_cls_logits[i];
            let m = cls_logits[0].max(cls_logits[1]);
            let e0 = (cls_logits[0] - m).exp();
            let e1 = (cls_logits[1] - m).exp();
            let z = e0 + e1;
            let mut g_cls_vec = Array1::from_vec(vec![e0 / z, e1 / z]);
            g_cls_vec[*label] -= F::one();
            g_cls_vec.mapv_inplace(|v| v * scale / n_props);
            let mut g_reg_vec = Array1::zeros(4);
            if let Some(t) = target {
                for k in 0..4 {
                    let (_, g) = smooth_l1(det.prop_reg_out[i][k], F::from_f64(t[k] as f64));
                    g_reg_vec[k] = scale * g / n_pos_p;
                }
            }
            let (flat, h_pre, h) = &det.prop_fc[i];
            let mut g_h = self.box_head.cls.backward(h, &g_cls_vec, &format!("{path}.box.cls"), gs);
            g_h += &self.box_head.reg.backward(h, &g_reg_vec, &format!("{path}.box.reg"), gs);
            let g_h_pre = relu_vec_backward(h_pre, &g_h);
            let g_flat = self.box_head.fc1.backward(flat, &g_h_pre, &format!("{path}.box.fc1"), gs);
            let g_pooled = crate::nn::unflatten(&g_flat, det.prop_feats[i].dim());
            roi_pool_backward(&g_pooled, bins, &mut g_feats[*level]);
        }

        // RPN backward per level adds onto the pooled-feature grads
        let g_a2 = {
            let mut g = self.rpn.backward(&caches[0], &g_cls[0], &g_reg[0], &format!("{path}.rpn"), gs);
            g += &g_feats[0];
            g
        };
        let g_b2 = {
            let mut g = self.rpn.backward(&caches[1], &g_cls[1], &g_reg[1], &format!("{path}.rpn"), gs);
            g += &g_feats[1];
            g
        };
        self.fpn2.backward(&det.fpn2, &g_a2, &g_b2, &format!("{path}.fpn2"), gs)
    }
}

impl<F: Scalar> Params<F> for AnomalyEnhancer<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.attn2.visit(&format!("{prefix}.attn2"), f);
        self.attn3.visit(&format!("{prefix}.attn3"), f);
        self.fpn1.visit(&format!("{prefix}.fpn1"), f);
        self.fpn2.visit(&format!("{prefix}.fpn2"), f);
        self.rpn.visit(&format!("{prefix}.rpn"), f);
        self.box_head.visit(&format!("{prefix}.box"), f);
        self.fuse2.visit(&format!("{prefix}.fuse2"), f);
        self.fuse3.visit(&format!("{prefix}.fuse3"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.attn2.visit_mut(&format!("{prefix}.attn2"), f);
        self.attn3.visit_mut(&format!("{prefix}.attn3"), f);
        self.fpn1.visit_mut(&format!("{prefix}.fpn1"), f);
        self.fpn2.visit_mut(&format!("{prefix}.fpn2"), f);
        self.rpn.visit_mut(&format!("{prefix}.rpn"), f);
        self.box_head.visit_mut(&format!("{prefix}.box"), f);
        self.fuse2.visit_mut(&format!("{prefix}.fuse2"), f);
        self.fuse3.visit_mut(&format!("{prefix}.fuse3"), f);
    }
}

fn unflatten_anchor(index: usize, wc: usize) -> (usize, usize, usize) {
    let ai = index % 2;
    let cell = index / 2;
    (cell / wc, cell % wc, ai)
}

/// IoU-based anchor assignment (0.7 positive / 0.3 negative, argmax fallback
/// per gt) followed by sampling 32 anchors with at most half positives.
fn assign_and_sample(
    anchors: &[Vec<FBox>],
    gt: &[FBox],
    image_dims: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Vec<AnchorSampleInfo> {
    let (ih, iw) = image_dims;
    let mut positives: Vec<(usize, usize, [f32; 4])> = Vec::new();
    let mut negatives: Vec<(usize, usize)> = Vec::new();
    let mut best_per_gt: Vec<(f32, usize, usize)> = vec![(-1.0, 0, 0); gt.len()];
    for (level, level_anchors) in anchors.iter().enumerate() {
        for (ai, anchor) in level_anchors.iter().enumerate() {
            // clip to image bounds for assignment only
            let clipped = anchor.clip(ih, iw);
            let mut best = 0.0f32;
            let mut best_gt = None;
            for (gi, g) in gt.iter().enumerate() {
                let iou = clipped.iou(g);
                if iou > best {
                    best = iou;
                    best_gt = Some(gi);
                }
                if iou > best_per_gt[gi].0 {
                    best_per_gt[gi] = (iou, level, ai);
                }
            }
            if best >= RPN_POS_IOU {
                let g = &gt[best_gt.unwrap()];
                positives.push((level, ai, anchor.encode(g)));
            } else if best <= RPN_NEG_IOU {
                negatives.push((level, ai));
            }
        }
    }
    // argmax fallback: every gt gets its best anchor as positive
    for (gi, &(iou, level, ai)) in best_per_gt.iter().enumerate() {
        if iou > 0.0 && !positives.iter().any(|&(l, a, _)| l == level && a == ai) {
            positives.push((level, ai, anchors[level][ai].encode(&gt[gi])));
        }
    }
    positives.sort_by_key(|&(l, a, _)| (l, a));
    positives.dedup_by_key(|&mut (l, a, _)| (l, a));
    negatives.retain(|&(l, a)| !positives.iter().any(|&(pl, pa, _)| pl == l && pa == a));

    let n_pos = positives.len().min(RPN_SAMPLES / 2);
    let mut out = Vec::with_capacity(RPN_SAMPLES);
    let mut pos_sel = positives;
    pos_sel.shuffle(rng);
    for &(l, a, t) in pos_sel.iter().take(n_pos) {
        out.push(AnchorSampleInfo { level: l, index: a, label: 1.0, target: Some(t) });
    }
    let n_neg = (RPN_SAMPLES - out.len()).min(negatives.len());
    let mut neg_sel = negatives;
    neg_sel.shuffle(rng);
    for &(l, a) in neg_sel.iter().take(n_neg) {
        out.push(AnchorSampleInfo { level: l, index: a, label: 0.0, target: None });
    }
    out
}

/// Decodes every anchor with its predicted deltas and keeps the top-K by
/// objectness logit (deterministic: ties break on lower flat index).
fn top_proposals<F: Scalar>(
    anchors: &[Vec<FBox>],
    caches: &[&RpnLevelCache<F>; 2],
    image_dims: (usize, usize),
) -> Vec<FBox> {
    let (ih, iw) = image_dims;
    let mut scored: Vec<(f64, usize, usize)> = Vec::new();
    for (level, cache) in caches.iter().enumerate() {
        let (_, _, wc) = cache.cls_map.dim();
        for ai_flat in 0..anchors[level].len() {
            let (cy, cx, ai) = unflatten_anchor(ai_flat, wc);
            scored.push((cache.cls_map[[ai, cy, cx]].into_f64(), level, ai_flat));
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
    scored
        .into_iter()
        .take(BOX_PROPOSALS)
        .map(|(_, level, ai_flat)| {
            let cache = caches[level];
            let (_, _, wc) = cache.cls_map.dim();
            let (cy, cx, ai) = unflatten_anchor(ai_flat, wc);
            let deltas = [
                cache.reg_map[[ai * 4, cy, cx]].into_f64() as f32,
                cache.reg_map[[ai * 4 + 1, cy, cx]].into_f64() as f32,
                cache.reg_map[[ai * 4 + 2, cy, cx]].into_f64() as f32,
                cache.reg_map[[ai * 4 + 3, cy, cx]].into_f64() as f32,
            ];
            anchors[level][ai_flat].decode(deltas).clip(ih, iw)
        })
        .filter(|b| b.area() > 1.0)
        .collect()
}

/// Proposal label (1 = tampered when IoU >= 0.5 with some gt) and target deltas.
fn match_proposal(fbox: &FBox, gt: &[FBox]) -> (usize, Option<[f32; 4]>) {
    let mut best = 0.0f32;
    let mut best_gt = None;
    for g in gt {
        let iou = fbox.iou(g);
        if iou > best {
            best = iou;
            best_gt = Some(g);
        }
    }
    if best >= BOX_POS_IOU {
        (1, Some(fbox.encode(best_gt.unwrap())))
    } else {
        (0, None)
    }
}

/// Anchor sampling RNG derived from the training seed, step and sample index.
pub fn detection_rng(seed: u64, step: u64, sample_idx: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(sample_idx.wrapping_mul(0x94D0_49BB_1331_11EB));
    ChaCha8Rng::seed_from_u64(mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn iou_box_examples() {
        let a = BoundingBox::new(0, 0, 4, 4).unwrap();
        assert_eq!(iou_box(&a, &a), 1.0);
        let b = BoundingBox::new(10, 10, 12, 12).unwrap();
        assert_eq!(iou_box(&a, &b), 0.0);
        // (0,0,4,4) vs (2,0,6,4): inter 8, union 24 -> 1/3
        let c = BoundingBox::new(2, 0, 6, 4).unwrap();
        assert!((iou_box(&a, &c) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn anchor_identical_to_gt_has_zero_deltas() {
        let gt = FBox { x0: 8.0, y0: 8.0, x1: 40.0, y1: 40.0 };
        let deltas = gt.encode(&gt);
        for d in deltas {
            assert!(d.abs() < 1e-6);
        }
        let (l, _) = smooth_l1(0.0f64, 0.0);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let anchor = FBox { x0: 0.0, y0: 0.0, x1: 32.0, y1: 32.0 };
        let target = FBox { x0: 5.0, y0: 9.0, x1: 45.0, y1: 37.0 };
        let d = anchor.encode(&target);
        let back = anchor.decode(d);
        assert!((back.x0 - target.x0).abs() < 1e-4);
        assert!((back.y1 - target.y1).abs() < 1e-4);
    }

    #[test]
    fn assignment_finds_the_single_high_iou_anchor() {
        // 64x64 image: stride-8 level 8x8 cells, stride-16 level 4x4 cells.
        // gt box near-identical to one 32px anchor -> exactly 1 positive whose
        // IoU >= 0.7; everything else is far away.
        let anchors =
            vec![level_anchors(8, 8, 8, ANCHOR_SIDES[0]), level_anchors(4, 4, 16, ANCHOR_SIDES[1])];
        // anchor at cell (4,4), side 32 -> center (36,36): box (20,20,52,52);
        // interior so border clipping cannot promote a second anchor
        let gt = vec![FBox { x0: 20.0, y0: 20.0, x1: 52.0, y1: 52.0 }];
        // brute-force: count anchors with IoU >= 0.7
        let mut brute = 0;
        for level in &anchors {
            for a in level {
                if a.clip(64, 64).iou(&gt[0]) >= RPN_POS_IOU {
                    brute += 1;
                }
            }
        }
        assert_eq!(brute, 1, "test setup: exactly one high-IoU anchor");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = assign_and_sample(&anchors, &gt, (64, 64), &mut rng);
        let pos: Vec<_> = samples.iter().filter(|s| s.label > 0.5).collect();
        assert_eq!(pos.len(), 1);
        assert!(samples.len() <= RPN_SAMPLES);
    }

    #[test]
    fn attention_identity_when_saturated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut attn = AttentionLayer::<f32>::new(&mut rng, 8);
        // saturate both sigmoids via huge biases and zero weights
        attn.fc2.w.fill(0.0);
        attn.fc2.b.fill(30.0);
        attn.spatial.w.fill(0.0);
        attn.spatial.b.fill(30.0);
        let x = crate::nn::init::normal_array3::<f32>(&mut rng, (8, 6, 6), 1.0);
        let (y, _) = attn.forward(x.clone());
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        // zero input stays zero regardless of attention state
        let z = Array3::<f32>::zeros((8, 6, 6));
        let (y, _) = attn.forward(z);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_gradcheck_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn = AttentionLayer::<f64>::new(&mut rng, 8);
        let x = crate::nn::init::normal_array3::<f64>(&mut rng, (8, 8, 8), 1.0);
        let wsum = crate::nn::init::normal_array3::<f64>(&mut rng, (8, 8, 8), 1.0);
        let (_, cache) = attn.forward(x.clone());
        let mut gs = GradStore::new();
        let gx = attn.backward(&cache, &wsum, "a", &mut gs);
        let eval = |xin: &Array3<f64>| -> f64 { (attn.forward(xin.clone()).0 * &wsum).sum() };
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for idx in [[0usize, 0, 0], [3, 4, 5], [7, 7, 7], [2, 1, 6]] {
            let mut xm = x.clone();
            let orig = xm[idx];
            xm[idx] = orig + eps;
            let lp = eval(&xm);
            xm[idx] = orig - eps;
            let lm = eval(&xm);
            let fd = (lp - lm) / (2.0 * eps);
            worst = worst.max(crate::nn::gradcheck::rel_err(fd, gx[idx], 1e-8));
        }
        assert!(worst <= 1e-3, "worst {worst}");
        // parameter grads for fc1
        let g = gs.get("a.fc1.w").unwrap().clone();
        let mut attn_m = attn.clone();
        let orig = attn_m.fc1.w[[1, 2]];
        let evalp = |a: &AttentionLayer<f64>| -> f64 { (a.forward(x.clone()).0 * &wsum).sum() };
        attn_m.fc1.w[[1, 2]] = orig + eps;
        let lp = evalp(&attn_m);
        attn_m.fc1.w[[1, 2]] = orig - eps;
        let lm = evalp(&attn_m);
        let fd = (lp - lm) / (2.0 * eps);
        assert!(crate::nn::gradcheck::rel_err(fd, g[[1, 2]], 1e-8) <= 1e-3);
    }

    #[test]
    fn detection_losses_nonneg_and_empty_gt_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ae = AnomalyEnhancer::<f32>::new(&mut rng, 64, 128);
        let f2 = TensorGrid::new(
            crate::nn::init::normal_array3::<f32>(&mut rng, (64, 8, 8), 1.0),
            8,
        )
        .unwrap();
        let f3 = TensorGrid::new(
            crate::nn::init::normal_array3::<f32>(&mut rng, (128, 4, 4), 1.0),
            16,
        )
        .unwrap();
        let mut det_rng = detection_rng(7, 0, 0);
        // authentic sample: no boxes -> reg losses are exactly zero
        let (f2p, f3p, losses, _) = ae.forward_train(&f2, &f3, &[], (64, 64), &mut det_rng);
        assert_eq!(losses.rpn_reg, 0.0);
        assert_eq!(losses.box_reg, 0.0);
        assert!(losses.rpn_cls >= 0.0 && losses.rpn_cls.is_finite());
        assert!(losses.box_cls >= 0.0 && losses.box_cls.is_finite());
        assert_eq!(f2p.values.dim(), f2.values.dim());
        assert_eq!(f3p.values.dim(), f3.values.dim());

        // with a gt box everything stays finite and non-negative
        let gt = vec![BoundingBox::new(8, 8, 40, 40).unwrap()];
        let mut det_rng = detection_rng(7, 0, 1);
        let (_, _, losses, _) = ae.forward_train(&f2, &f3, &gt, (64, 64), &mut det_rng);
        assert!(losses.total().is_finite());
        assert!(losses.rpn_reg >= 0.0 && losses.box_reg >= 0.0);
    }

    #[test]
    fn ae_fuse_identity_when_branch_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ae = AnomalyEnhancer::<f32>::new(&mut rng, 8, 16);
        // identity-init fuse conv: center tap = delta
        ae.fuse2.w.fill(0.0);
        ae.fuse2.b.fill(0.0);
        for c in 0..8 {
            ae.fuse2.w[[c, c, 1, 1]] = 1.0;
        }
        let f2 = TensorGrid::new(
            crate::nn::init::normal_array3::<f32>(&mut rng, (8, 6, 6), 1.0),
            8,
        )
        .unwrap();
        let f3 = TensorGrid::new(
            crate::nn::init::normal_array3::<f32>(&mut rng, (16, 3, 3), 1.0),
            16,
        )
        .unwrap();
        let zero_a = Array3::zeros((8, 6, 6));
        let zero_b = Array3::zeros((16, 3, 3));
        let (f2p, _, _, _) = ae.ae_fuse(&f2, &f3, &zero_a, &zero_b);
        for (a, b) in f2p.values.iter().zip(f2.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn full_ae_gradcheck_f64() {
        // end-to-end check: detection + fusion gradients wrt an attention parameter
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ae = AnomalyEnhancer::<f64>::new(&mut rng, 16, 32);
        let f2 = TensorGrid::new(
            crate::nn::init::normal_array3::<f64>(&mut rng, (16, 8, 8), 1.0),
            8,
        )
        .unwrap();
        let f3 = TensorGrid::new(
            crate::nn::init::normal_array3::<f64>(&mut rng, (32, 4, 4), 1.0),
            16,
        )
        .unwrap();
        let gt = vec![BoundingBox::new(8, 8, 40, 40).unwrap()];
        let w2 = crate::nn::init::normal_array3::<f64>(&mut rng, (16, 8, 8), 1.0);
        let w3 = crate::nn::init::normal_array3::<f64>(&mut rng, (32, 4, 4), 1.0);
        let loss = |m: &AnomalyEnhancer<f64>| -> f64 {
            let mut det_rng = detection_rng(1, 2, 3);
            let (f2p, f3p, losses, _) = m.forward_train(&f2, &f3, &gt, (64, 64), &mut det_rng);
            (f2p.values * &w2).sum() + (f3p.values * &w3).sum() + losses.total()
        };
        let mut det_rng = detection_rng(1, 2, 3);
        let (_, _, losses32, cache) = ae.forward_train(&f2, &f3, &gt, (64, 64), &mut det_rng);
        assert!(losses32.total().is_finite());
        let mut gs = GradStore::new();
        ae.backward(&cache, &w2, &w3, 1.0, "ae", &mut gs);

        let mut m = ae.clone();
        let eps = 1e-6;
        for (param, idx) in [("ae.attn2.fc1.w", [1usize, 2]), ("ae.attn2.fc2.w", [3, 1])] {
            let g = gs.get(param).unwrap().clone();
            let slot: &mut f64 = match param {
                "ae.attn2.fc1.w" => &mut m.attn2.fc1.w[[idx[0], idx[1]]],
                _ => &mut m.attn2.fc2.w[[idx[0], idx[1]]],
            };
            let orig = *slot;
            *slot = orig + eps;
            let lp = loss(&m);
            let slot: &mut f64 = match param {
                "ae.attn2.fc1.w" => &mut m.attn2.fc1.w[[idx[0], idx[1]]],
                _ => &mut m.attn2.fc2.w[[idx[0], idx[1]]],
            };
            *slot = orig - eps;
            let lm = loss(&m);
            let slot: &mut f64 = match param {
                "ae.attn2.fc1.w" => &mut m.attn2.fc1.w[[idx[0], idx[1]]],
                _ => &mut m.attn2.fc2.w[[idx[0], idx[1]]],
            };
            *slot = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = g[idx.as_slice()];
            let err = crate::nn::gradcheck::rel_err(fd, an, 1e-6);
            assert!(err <= 1e-4, "{param}: fd={fd} an={an} err={err}");
        }
    }

    #[test]
    fn inference_ignores_detection_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ae = AnomalyEnhancer::<f32>::new(&mut rng, 16, 32);
        let f2 = TensorGrid::new(
            crate::nn::init::normal_array3::<f32>(&mut rng, (16, 8, 8), 1.0),
            8,
        )
        .unwrap();
        let f3 = TensorGrid::new(
            crate::nn::init::normal_array3::<f32>(&mut rng, (32, 4, 4), 1.0),
            16,
        )
        .unwrap();
        let (a, b) = ae.forward_infer(&f2, &f3);
        let mut noisy = ae.clone();
        noisy.rpn.conv.w.fill(123.0);
        noisy.box_head.fc1.w.fill(-9.0);
        noisy.fpn1.lat_a.w.fill(7.0);
        noisy.fpn2.smooth_b.w.fill(0.5);
        let (a2, b2) = noisy.forward_infer(&f2, &f3);
        assert_eq!(a.values, a2.values);
        assert_eq!(b.values, b2.values);
    }
}
