//! Block-DCT frequency features and the Frequency Perception Head.
//!
//! Luma is padded to 8x8 blocks by edge replication, transformed with the
//! orthonormal 2-D DCT-II, laid out in zigzag order, quantized into a small
//! bin vocabulary, embedded per coefficient and refined by two conv layers
//! into a stride-4 feature map.

use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

use crate::error::{ImlError, Result};
use crate::nn::conv::Conv2d;
use crate::nn::layers::{nearest_resize, nearest_resize_backward, relu, relu_backward, Embedding};
use crate::nn::{GradStore, Params, Scalar, TensorGrid};
use crate::types::Image;

/// Quantization vocabulary size; bins are `min(floor(|coeff|), B-1)`.
pub const DCT_BINS: usize = 21;
/// Embedding width per coefficient.
pub const DCT_EMBED_DIM: usize = 16;
/// Output channels of the frequency head (matches the vision head for fusion).
pub const FREQ_CHANNELS: usize = 32;

/// Per-block DCT coefficients in zigzag order: (H/8, W/8, 64).
#[derive(Debug, Clone)]
pub struct DctGrid {
    pub coeffs: Array3<f32>,
}

/// Quantized coefficient bins, same layout as [`DctGrid`].
#[derive(Debug, Clone)]
pub struct QuantizedDct {
    pub bins: Array3<u8>,
}

impl QuantizedDct {
    pub fn block_dims(&self) -> (usize, usize) {
        let (hb, wb, _) = self.bins.dim();
        (hb, wb)
    }
}

/// BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B.
pub fn luma(image: &Image) -> Array2<f32> {
    let (h, w) = (image.height(), image.width());
    let mut y = Array2::zeros((h, w));
    for iy in 0..h {
        for ix in 0..w {
            let [r, g, b] = image.get(iy, ix);
            y[[iy, ix]] = 0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32;
        }
    }
    y
}

/// The zigzag scan order of an 8x8 block as (row, col) pairs.
pub fn zigzag_order() -> [(usize, usize); 64] {
    let mut order = [(0usize, 0usize); 64];
    let mut idx = 0;
    for s in 0..15 {
        if s % 2 == 0 {
            // even diagonals run bottom-left to top-right
            let mut i = s.min(7) as isize;
            while i >= 0 && (s as isize - i) <= 7 {
                order[idx] = (i as usize, s - i as usize);
                idx += 1;
                i -= 1;
            }
        } else {
            let mut j = s.min(7) as isize;
            while j >= 0 && (s as isize - j) <= 7 {
                order[idx] = (s - j as usize, j as usize);
                idx += 1;
                j -= 1;
            }
        }
    }
    debug_assert_eq!(idx, 64);
    order
}

/// Orthonormal DCT-II basis matrix T[u][x] = a_u cos((2x+1) u pi / 16).
fn dct_basis() -> [[f64; 8]; 8] {
    let mut t = [[0.0f64; 8]; 8];
    for u in 0..8 {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for x in 0..8 {
            t[u][x] = a * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    t
}

/// Pads to multiples of 8 by edge replication.
pub fn pad_to_blocks(luma: &Array2<f32>) -> Array2<f32> {
    let (h, w) = luma.dim();
    let (hp, wp) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    if (hp, wp) == (h, w) {
        return luma.clone();
    }
    let mut out = Array2::zeros((hp, wp));
    for y in 0..hp {
        for x in 0..wp {
            out[[y, x]] = luma[[y.min(h - 1), x.min(w - 1)]];
        }
    }
    out
}

/// Per-block orthonormal 2-D DCT-II (C = T X T^t), zigzag layout.
pub fn block_dct(luma: &Array2<f32>) -> DctGrid {
    let padded = pad_to_blocks(luma);
    let (h, w) = padded.dim();
    let (hb, wb) = (h / 8, w / 8);
    let t = dct_basis();
    let zz = zigzag_order();
    let mut coeffs = Array3::zeros((hb, wb, 64));
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    let mut out = [[0.0f64; 8]; 8];
    for by in 0..hb {
        for bx in 0..wb {
            for y in 0..8 {
                for x in 0..8 {
                    block[y][x] = padded[[by * 8 + y, bx * 8 + x]] as f64;
                }
            }
            // tmp = T * block
            for u in 0..8 {
                for x in 0..8 {
                    let mut acc = 0.0;
                    for k in 0..8 {
                        acc += t[u][k] * block[k][x];
                    }
                    tmp[u][x] = acc;
                }
            }
            // out = tmp * T^t
            for u in 0..8 {
                for v in 0..8 {
                    let mut acc = 0.0;
                    for k in 0..8 {
                        acc += tmp[u][k] * t[v][k];
                    }
                    out[u][v] = acc;
                }
            }
            for (i, &(r, c)) in zz.iter().enumerate() {
                coeffs[[by, bx, i]] = out[r][c] as f32;
            }
        }
    }
    DctGrid { coeffs }
}

/// Inverse of [`block_dct`] (X = T^t C T), returning the padded plane.
pub fn block_idct(grid: &DctGrid) -> Array2<f32> {
    let (hb, wb, _) = grid.coeffs.dim();
    let t = dct_basis();
    let zz = zigzag_order();
    let mut plane = Array2::zeros((hb * 8, wb * 8));
    let mut coeff = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for by in 0..hb {
        for bx in 0..wb {
            for (i, &(r, c)) in zz.iter().enumerate() {
                coeff[r][c] = grid.coeffs[[by, bx, i]] as f64;
            }
            // tmp = T^t * coeff
            for x in 0..8 {
                for v in 0..8 {
                    let mut acc = 0.0;
                    for k in 0..8 {
                        acc += t[k][x] * coeff[k][v];
                    }
                    tmp[x][v] = acc;
                }
            }
            // plane = tmp * T
            for x in 0..8 {
                for y in 0..8 {
                    let mut acc = 0.0;
                    for k in 0..8 {
                        acc += tmp[x][k] * t[k][y];
                    }
                    plane[[by * 8 + x, bx * 8 + y]] = acc as f32;
                }
            }
        }
    }
    plane
}

/// bin = min(floor(|coeff|), B-1).
pub fn quantize_dct(grid: &DctGrid) -> QuantizedDct {
    let bins = grid.coeffs.mapv(|c| (c.abs().floor() as usize).min(DCT_BINS - 1) as u8);
    QuantizedDct { bins }
}

/// Frequency Perception Head: per-coefficient embedding lookup, two 3x3 convs
/// and nearest 2x upsampling to stride 4.
#[derive(Debug, Clone)]
pub struct FrequencyHead<F: Scalar> {
    pub embed: Embedding<F>,
    pub c1: Conv2d<F>,
    pub c2: Conv2d<F>,
}

/// Forward cache for [`FrequencyHead::forward`].
pub struct FreqCache<F: Scalar> {
    ids: Vec<usize>,
    x_embed: Array3<F>,
    h1: Array3<F>,
    a1: Array3<F>,
}

impl<F: Scalar> FrequencyHead<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let embed = Embedding::new(rng, DCT_BINS, DCT_EMBED_DIM, 0.5);
        let c1 = Conv2d::new(rng, 64 * DCT_EMBED_DIM, FREQ_CHANNELS, 3, 1, 1);
        let c2 = Conv2d::new(rng, FREQ_CHANNELS, FREQ_CHANNELS, 3, 1, 1);
        Self { embed, c1, c2 }
    }

    /// `image_dims` is the (H, W) of the paired image; a mismatch against the
    /// quantized grid is an error.
    pub fn forward(
        &self,
        q: &QuantizedDct,
        image_dims: (usize, usize),
    ) -> Result<(TensorGrid<F>, FreqCache<F>)> {
        let (hb, wb) = q.block_dims();
        let (h, w) = image_dims;
        if (h.div_ceil(8), w.div_ceil(8)) != (hb, wb) {
            return Err(ImlError::ShapeMismatch {
                expected: format!("{}x{} blocks", h.div_ceil(8), w.div_ceil(8)),
                got: format!("{hb}x{wb} blocks"),
            });
        }
        // embedding lookup, laid out as (64*E, Hb, Wb)
        let ids: Vec<usize> =
            q.bins.iter().map(|&b| b as usize).collect();
        let rows = self.embed.forward(&ids); // (Hb*Wb*64, E)
        let c = 64 * DCT_EMBED_DIM;
        let mut x = Array3::zeros((c, hb, wb));
        for by in 0..hb {
            for bx in 0..wb {
                let base = (by * wb + bx) * 64;
                for k in 0..64 {
                    let row = rows.row(base + k);
                    for e in 0..DCT_EMBED_DIM {
                        x[[k * DCT_EMBED_DIM + e, by, bx]] = row[e];
                    }
                }
            }
        }
        let h1 = self.c1.forward(&x);
        let a1 = relu(&h1);
        let h2 = self.c2.forward(&a1);
        let up = nearest_resize(&h2, hb * 2, wb * 2);
        let grid = TensorGrid::new(up, 4)?;
        Ok((grid, FreqCache { ids, x_embed: x, h1, a1 }))
    }

    pub fn backward(
        &self,
        cache: &FreqCache<F>,
        gy: &Array3<F>,
        path: &str,
        gs: &mut GradStore<F>,
    ) {
        let (_, hb, wb) = cache.h1.dim();
        let g_h2 = nearest_resize_backward(gy, hb, wb);
        let g_a1 = self.c2.backward(&cache.a1, &g_h2, &format!("{path}.c2"), gs);
        let g_h1 = relu_backward(&cache.h1, &g_a1);
        let g_x = self.c1.backward(&cache.x_embed, &g_h1, &format!("{path}.c1"), gs);
        // scatter embedding grads back to table rows
        let n = cache.ids.len();
        let mut g_rows = Array2::zeros((n, DCT_EMBED_DIM));
        for by in 0..hb {
            for bx in 0..wb {
                let base = (by * wb + bx) * 64;
                for k in 0..64 {
                    for e in 0..DCT_EMBED_DIM {
                        g_rows[[base + k, e]] = g_x[[k * DCT_EMBED_DIM + e, by, bx]];
                    }
                }
            }
        }
        self.embed.backward(&cache.ids, &g_rows, &format!("{path}.embed"), gs);
    }
}

impl<F: Scalar> Params<F> for FrequencyHead<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.embed.visit(&format!("{prefix}.embed"), f);
        self.c1.visit(&format!("{prefix}.c1"), f);
        self.c2.visit(&format!("{prefix}.c2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.embed.visit_mut(&format!("{prefix}.embed"), f);
        self.c1.visit_mut(&format!("{prefix}.c1"), f);
        self.c2.visit_mut(&format!("{prefix}.c2"), f);
    }
}

/// Convenience: image -> quantized DCT tokens.
pub fn image_to_tokens(image: &Image) -> QuantizedDct {
    quantize_dct(&block_dct(&luma(image)))
}
