//! Deterministic synthetic tampered/authentic image generator for the four
//! task families.
//!
//! Every sample is built as an authentic image plus an optional tamper edit;
//! the ground-truth mask is the exact pixel diff between the two, so mask
//! exactness holds by construction. Two properties are engineered into the
//! data so the modal gate has a genuine signal to learn:
//!
//! - document pages get one 8x8 block-quantization pass (simulated
//!   recompression) before the tamper edit is pasted, so tampered glyphs are
//!   nearly invisible in RGB but break the block-spectrum fingerprint;
//! - natural images carry per-image sensor-style noise, which makes the
//!   frequency tokens noisy and favors the pure-vision route.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ImlError, Result};
use crate::freq::{block_dct, block_idct, DctGrid};
use crate::types::{BinaryMask, Image, Sample, TaskKind};

/// Quantization step of the document recompression pass.
const DOC_QUANT_STEP: f32 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperKind {
    CopyMove,
    Splice,
    Erase,
}

impl TamperKind {
    pub const ALL: [TamperKind; 3] = [TamperKind::CopyMove, TamperKind::Splice, TamperKind::Erase];
}

/// Generation request for one task family.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenSpec {
    pub task: TaskKind,
    pub n: usize,
    pub size: (usize, usize),
    pub tamper_kinds: Vec<TamperKind>,
    /// (min, max) tampered-area fraction for tampered samples.
    pub area_frac: (f64, f64),
    pub authentic_ratio: f64,
    pub seed: u64,
}

impl GenSpec {
    pub fn new(task: TaskKind, n: usize, size: (usize, usize), seed: u64) -> Self {
        Self {
            task,
            n,
            size,
            tamper_kinds: TamperKind::ALL.to_vec(),
            area_frac: (0.005, 0.15),
            authentic_ratio: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_frac;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(ImlError::InvalidInput(format!(
                "area_frac must satisfy 0 < min <= max < 1, got ({lo}, {hi})"
            )));
        }
        if self.n == 0 {
            return Err(ImlError::InvalidInput("n must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.authentic_ratio) {
            return Err(ImlError::InvalidInput("authentic_ratio must be in [0,1]".into()));
        }
        if self.size.0 < 64 || self.size.1 < 64 || self.size.0 % 32 != 0 || self.size.1 % 32 != 0 {
            return Err(ImlError::InvalidInput(
                "size must be multiples of 32, at least 64x64".into(),
            ));
        }
        if self.tamper_kinds.is_empty() && self.authentic_ratio < 1.0 {
            return Err(ImlError::InvalidInput("no tamper kinds for tampered samples".into()));
        }
        Ok(())
    }
}

fn sample_rng(spec: &GenSpec, index: usize) -> ChaCha8Rng {
    let mixed = spec
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((spec.task as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93))
        .wrapping_add((index as u64).wrapping_mul(0xCA5A_8263_95F1_29D5));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Generates the full set; deterministic per (spec, index).
pub fn generate(spec: &GenSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let n_auth = (spec.n as f64 * spec.authentic_ratio).round() as usize;
    (0..spec.n)
        .map(|i| {
            let authentic = i < n_auth;
            let (_, sample) = generate_one(spec, i, authentic)?;
            Ok(sample)
        })
        .collect()
}

/// Generates one sample plus its untampered twin (for mask-exactness checks).
pub fn generate_one(spec: &GenSpec, index: usize, authentic: bool) -> Result<(Image, Sample)> {
    let mut rng = sample_rng(spec, index);
    for _attempt in 0..12 {
        let base = paint_authentic(spec, &mut rng)?;
        if authentic {
            let mask = BinaryMask::zeros(spec.size.0, spec.size.1);
            let sample = Sample::from_parts(base.clone(), mask, spec.task)?;
            return Ok((base, sample));
        }
        let tampered = apply_tamper(spec, &base, &mut rng)?;
        let mask = diff_mask(&base, &tampered);
        let frac = mask.count_ones() as f64 / (spec.size.0 * spec.size.1) as f64;
        if frac >= spec.area_frac.0 && frac <= spec.area_frac.1 {
            let sample = Sample::from_parts(tampered, mask, spec.task)?;
            return Ok((base, sample));
        }
        // resample with fresh randomness; the loop is deterministic because
        // the rng state carries over
    }
    Err(ImlError::InvalidInput(format!(
        "could not satisfy area_frac {:?} for {:?} sample {index}",
        spec.area_frac, spec.task
    )))
}

/// Exact pixel diff (any channel differs -> tampered).
pub fn diff_mask(a: &Image, b: &Image) -> BinaryMask {
    let (h, w) = (a.height(), a.width());
    let mut bits = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if a.get(y, x) != b.get(y, x) {
                bits[[y, x]] = 1;
            }
        }
    }
    BinaryMask::new(bits).expect("diff mask is binary")
}

// --- authentic painters -----------------------------------------------------

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

fn waves(rng: &mut ChaCha8Rng, count: usize, min_period: f64, max_period: f64, amp: f64) -> Vec<Wave> {
    (0..count)
        .map(|_| {
            let period = rng.gen_range(min_period..max_period);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            Wave {
                fy: angle.sin() / period,
                fx: angle.cos() / period,
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: rng.gen_range(amp * 0.5..amp),
            }
        })
        .collect()
}

fn wave_value(waves: &[Wave], y: usize, x: usize) -> f64 {
    waves
        .iter()
        .map(|w| w.amp * (std::f64::consts::TAU * (w.fy * y as f64 + w.fx * x as f64) + w.phase).sin())
        .sum()
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn paint_authentic(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    match spec.task {
        TaskKind::Natural => paint_natural(spec, rng),
        TaskKind::Document => paint_document(spec, rng),
        TaskKind::Face => paint_face(spec, rng),
        TaskKind::SceneText => paint_scene_text(spec, rng),
    }
}

fn paint_natural(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    let (h, w) = spec.size;
    let base: [f64; 3] =
        [rng.gen_range(60.0..180.0), rng.gen_range(60.0..180.0), rng.gen_range(60.0..180.0)];
    let texture: Vec<Vec<Wave>> = (0..3).map(|_| waves(rng, 3, 24.0, 90.0, 28.0)).collect();
    let noise_sigma = rng.gen_range(5.0..9.0);
    let mut img = Image::filled(h, w, [0, 0, 0])?;
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = base[c] + wave_value(&texture[c], y, x) + gauss(rng) * noise_sigma;
                px[c] = clamp_u8(v);
            }
            img.set(y, x, px);
        }
    }
    Ok(img)
}

/// Box-Muller normal sample.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Glyph cell geometry for document/scene-text pages.
#[derive(Debug, Clone, Copy)]
pub struct GlyphGrid {
    pub cell_h: usize,
    pub cell_w: usize,
    pub rows: usize,
    pub cols: usize,
    pub y0: usize,
    pub x0: usize,
    pub row_gap: usize,
    pub col_gap: usize,
}

impl GlyphGrid {
    fn for_page(h: usize, w: usize) -> Self {
        let cell_h = 12;
        let cell_w = 16;
        let row_gap = 6;
        let col_gap = 4;
        let rows = (h - 16) / (cell_h + row_gap);
        let cols = (w - 16) / (cell_w + col_gap);
        Self { cell_h, cell_w, rows, cols, y0: 8, x0: 8, row_gap, col_gap }
    }

    pub fn cell_origin(&self, row: usize, col: usize) -> (usize, usize) {
        (
            self.y0 + row * (self.cell_h + self.row_gap),
            self.x0 + col * (self.cell_w + self.col_gap),
        )
    }
}

/// Draws one pseudo-glyph (random 4x5 dot matrix upscaled to the cell) onto
/// the page. Every pixel of the cell is touched: background tone first, ink
/// on top.
fn draw_glyph(
    img: &mut Image,
    grid: &GlyphGrid,
    row: usize,
    col: usize,
    ink: [u8; 3],
    bg: [u8; 3],
    rng: &mut ChaCha8Rng,
) {
    let (y0, x0) = grid.cell_origin(row, col);
    let pattern: Vec<bool> = (0..20).map(|_| rng.gen_bool(0.45)).collect();
    for dy in 0..grid.cell_h {
        for dx in 0..grid.cell_w {
            let py = dy * 4 / grid.cell_h;
            let px = dx * 5 / grid.cell_w;
            let on = pattern[py * 5 + px];
            img.set(y0 + dy, x0 + dx, if on { ink } else { bg });
        }
    }
}

/// One block-quantization pass over all three channels (simulated
/// recompression): DCT-quantize-inverse per 8x8 block.
pub fn block_quantize_image(img: &Image, step: f32) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for c in 0..3 {
        let plane = Array2::from_shape_fn((h, w), |(y, x)| img.get(y, x)[c] as f32);
        let mut grid = block_dct(&plane);
        quantize_grid(&mut grid, step);
        let back = block_idct(&grid);
        for y in 0..h {
            for x in 0..w {
                let mut px = out.get(y, x);
                px[c] = clamp_u8(back[[y, x]] as f64);
                out.set(y, x, px);
            }
        }
    }
    out
}

fn quantize_grid(grid: &mut DctGrid, step: f32) {
    grid.coeffs.mapv_inplace(|c| (c / step).round() * step);
}

fn paint_document(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    let (h, w) = spec.size;
    let page: u8 = rng.gen_range(238..=250);
    let mut img = Image::filled(h, w, [page, page, page])?;
    let grid = GlyphGrid::for_page(h, w);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            if rng.gen_bool(0.12) {
                continue; // whitespace
            }
            let g: u8 = rng.gen_range(45..95);
            let tone = (page as i16 + rng.gen_range(-3i16..=3)).clamp(0, 255) as u8;
            draw_glyph(&mut img, &grid, row, col, [g, g, g], [tone, tone, tone], rng);
        }
    }
    // recompression fingerprint over the whole authentic page
    Ok(block_quantize_image(&img, DOC_QUANT_STEP))
}

fn paint_face(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    let (h, w) = spec.size;
    let skin: [f64; 3] = [
        rng.gen_range(170.0..220.0),
        rng.gen_range(120.0..170.0),
        rng.gen_range(95.0..140.0),
    ];
    let bg: [f64; 3] =
        [rng.gen_range(30.0..90.0), rng.gen_range(30.0..90.0), rng.gen_range(40.0..110.0)];
    let texture: Vec<Vec<Wave>> = (0..3).map(|_| waves(rng, 2, 18.0, 60.0, 9.0)).collect();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (ry, rx) = (h as f64 * 0.38, w as f64 * 0.30);
    let mut img = Image::filled(h, w, [0, 0, 0])?;
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = if d <= 1.0 {
                    // radial shading plus mild texture
                    skin[c] * (1.0 - 0.25 * d) + wave_value(&texture[c], y, x)
                } else {
                    bg[c] + wave_value(&texture[c], y, x) * 0.5
                };
                px[c] = clamp_u8(v + gauss(rng) * 2.0);
            }
            img.set(y, x, px);
        }
    }
    // eye blobs and a mouth line give patch swaps something to displace
    let eye_r = (h / 16).max(2);
    for (ey, ex) in [
        (cy - ry * 0.35, cx - rx * 0.45),
        (cy - ry * 0.35, cx + rx * 0.45),
    ] {
        paint_ellipse(&mut img, ey, ex, eye_r as f64, eye_r as f64 * 1.4, [40, 30, 30]);
    }
    paint_ellipse(&mut img, cy + ry * 0.45, cx, (h / 40).max(1) as f64, rx * 0.4, [120, 50, 50]);
    Ok(img)
}

fn paint_ellipse(img: &mut Image, cy: f64, cx: f64, ry: f64, rx: f64, color: [u8; 3]) {
    let (h, w) = (img.height(), img.width());
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
            if d <= 1.0 {
                img.set(y, x, color);
            }
        }
    }
}

fn paint_scene_text(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    let (h, w) = spec.size;
    let texture: Vec<Vec<Wave>> = (0..3).map(|_| waves(rng, 4, 6.0, 40.0, 32.0)).collect();
    let base: [f64; 3] =
        [rng.gen_range(70.0..170.0), rng.gen_range(70.0..170.0), rng.gen_range(70.0..170.0)];
    let mut img = Image::filled(h, w, [0, 0, 0])?;
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = clamp_u8(base[c] + wave_value(&texture[c], y, x) + gauss(rng) * 2.0);
            }
            img.set(y, x, px);
        }
    }
    // one or two text strips over the clutter
    let grid = GlyphGrid::for_page(h, w);
    let strips = 1 + usize::from(grid.rows > 4 && rng.gen_bool(0.5));
    let ink_light = rng.gen_bool(0.5);
    for s in 0..strips {
        let row = rng.gen_range(0..grid.rows.max(1));
        let _ = s;
        let ink: [u8; 3] = if ink_light { [245, 245, 240] } else { [15, 15, 25] };
        let plate: [u8; 3] = if ink_light { [40, 45, 60] } else { [210, 205, 190] };
        for col in 0..grid.cols {
            if rng.gen_bool(0.15) {
                continue;
            }
            draw_glyph(&mut img, &grid, row, col, ink, jitter_color(plate, rng, 6), rng);
        }
    }
    Ok(img)
}

fn jitter_color(c: [u8; 3], rng: &mut ChaCha8Rng, amp: i16) -> [u8; 3] {
    let mut out = [0u8; 3];
    for i in 0..3 {
        out[i] = (c[i] as i16 + rng.gen_range(-amp..=amp)).clamp(0, 255) as u8;
    }
    out
}

// --- tamper edits ------------------------------------------------------------

fn apply_tamper(spec: &GenSpec, base: &Image, rng: &mut ChaCha8Rng) -> Result<Image> {
    let kind = spec.tamper_kinds[rng.gen_range(0..spec.tamper_kinds.len())];
    match spec.task {
        TaskKind::Document => tamper_glyphs(spec, base, rng, true),
        TaskKind::SceneText => tamper_glyphs(spec, base, rng, false),
        TaskKind::Natural | TaskKind::Face => tamper_region(spec, base, rng, kind),
    }
}

/// Replaces runs of glyph cells. For documents the replacement glyphs look
/// like every other glyph in RGB (same ink/tone statistics) but are written
/// after the recompression pass, so their blocks lack the quantization
/// fingerprint.
fn tamper_glyphs(
    spec: &GenSpec,
    base: &Image,
    rng: &mut ChaCha8Rng,
    is_document: bool,
) -> Result<Image> {
    let (h, w) = spec.size;
    let grid = GlyphGrid::for_page(h, w);
    let mut img = base.clone();
    let instances = 1 + usize::from(rng.gen_bool(0.5)) + usize::from(rng.gen_bool(0.25));
    for _ in 0..instances {
        let row = rng.gen_range(0..grid.rows);
        let run = 1 + usize::from(rng.gen_bool(0.6));
        let col0 = rng.gen_range(0..grid.cols.saturating_sub(run).max(1));
        for col in col0..(col0 + run).min(grid.cols) {
            if is_document {
                // fresh glyph drawn from the authentic distribution; force the
                // cell tone to differ so the whole cell enters the mask
                let (y0, x0) = grid.cell_origin(row, col);
                let old_tone = base.get(y0, x0)[0] as i16;
                let mut tone = old_tone + rng.gen_range(2i16..=4) * if rng.gen_bool(0.5) { 1 } else { -1 };
                tone = tone.clamp(0, 255);
                if tone == old_tone {
                    tone = (old_tone - 3).clamp(0, 255);
                }
                let g: u8 = rng.gen_range(45..95);
                draw_glyph(&mut img, &grid, row, col, [g, g, g], [tone as u8, tone as u8, tone as u8], rng);
            } else {
                let (y0, x0) = grid.cell_origin(row, col);
                let old = base.get(y0 + grid.cell_h / 2, x0);
                let shift: i16 = if old[0] > 128 { -rng.gen_range(15..30) } else { rng.gen_range(15..30) };
                let plate = [
                    (old[0] as i16 + shift).clamp(0, 255) as u8,
                    (old[1] as i16 + shift).clamp(0, 255) as u8,
                    (old[2] as i16 + shift).clamp(0, 255) as u8,
                ];
                let ink = if old[0] > 128 { [20, 20, 30] } else { [240, 240, 235] };
                draw_glyph(&mut img, &grid, row, col, ink, plate, rng);
            }
        }
    }
    Ok(img)
}

/// Elliptical copy-move / splice / erase for natural and face images.
fn tamper_region(
    spec: &GenSpec,
    base: &Image,
    rng: &mut ChaCha8Rng,
    kind: TamperKind,
) -> Result<Image> {
    let (h, w) = spec.size;
    let total = (h * w) as f64;
    let (lo, hi) = spec.area_frac;
    // region painters target the blobby mid-range; the realized diff mask is
    // still validated against the requested bounds by the caller
    let lo = lo.clamp(0.02, 0.12);
    let hi = hi.clamp(lo + 1e-6, 0.13);
    let instances = 1 + usize::from(rng.gen_bool(0.4));
    let mut img = base.clone();
    for _ in 0..instances {
        let frac = rng.gen_range(lo..hi) / instances as f64;
        // ellipse area = pi * ry * rx with mild eccentricity
        let r = (frac * total / std::f64::consts::PI).sqrt();
        let ecc = rng.gen_range(0.7..1.4);
        let (ry, rx) = (r * ecc, r / ecc);
        let cy = rng.gen_range(ry..(h as f64 - ry));
        let cx = rng.gen_range(rx..(w as f64 - rx));
        let shift: f64 = rng.gen_range(10.0..24.0);
        // shift away from saturation
        let probe = base.get(cy as usize, cx as usize);
        let sign = if probe[0] as f64 + probe[1] as f64 + probe[2] as f64 > 384.0 { -1.0 } else { 1.0 };
        let noise_sigma = rng.gen_range(4.0..8.0);
        let foreign: [f64; 3] =
            [rng.gen_range(50.0..200.0), rng.gen_range(50.0..200.0), rng.gen_range(50.0..200.0)];
        let (sy, sx) = (
            rng.gen_range(ry..(h as f64 - ry)),
            rng.gen_range(rx..(w as f64 - rx)),
        );
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                if d > 1.0 {
                    continue;
                }
                let px = match kind {
                    TamperKind::CopyMove => {
                        let yy = (y as f64 - cy + sy).clamp(0.0, h as f64 - 1.0) as usize;
                        let xx = (x as f64 - cx + sx).clamp(0.0, w as f64 - 1.0) as usize;
                        let src = base.get(yy, xx);
                        [
                            clamp_u8(src[0] as f64 + sign * shift),
                            clamp_u8(src[1] as f64 + sign * shift),
                            clamp_u8(src[2] as f64 + sign * shift),
                        ]
                    }
                    TamperKind::Splice => [
                        clamp_u8(foreign[0] + gauss(rng) * noise_sigma),
                        clamp_u8(foreign[1] + gauss(rng) * noise_sigma),
                        clamp_u8(foreign[2] + gauss(rng) * noise_sigma),
                    ],
                    TamperKind::Erase => {
                        let cur = base.get(y, x);
                        [
                            clamp_u8(cur[0] as f64 + sign * shift + gauss(rng) * 2.0),
                            clamp_u8(cur[1] as f64 + sign * shift + gauss(rng) * 2.0),
                            clamp_u8(cur[2] as f64 + sign * shift + gauss(rng) * 2.0),
                        ]
                    }
                };
                img.set(y, x, px);
            }
        }
    }
    Ok(img)
}

/// Generates a balanced multi-task dataset: `per_task` samples per family.
pub fn generate_mixed(
    per_task: usize,
    size: (usize, usize),
    authentic_ratio: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(per_task * 4);
    for (i, task) in TaskKind::ALL.iter().enumerate() {
        let mut spec = GenSpec::new(*task, per_task, size, seed.wrapping_add(i as u64 * 1013));
        spec.authentic_ratio = authentic_ratio;
        out.extend(generate(&spec)?);
    }
    Ok(out)
}

/// Writes samples + JSONL manifest (delegates to the I/O module).
pub fn write_manifest(samples: &[Sample], dir: &std::path::Path) -> Result<std::path::PathBuf> {
    crate::io::write_manifest(samples, dir)
}
