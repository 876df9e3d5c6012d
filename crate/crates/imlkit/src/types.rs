//! Shared domain types: images, binary masks, bounding boxes, samples, and
//! connected-component utilities.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{ImlError, Result};

/// Minimum supported image side length.
pub const MIN_IMAGE_SIDE: usize = 16;

/// 8-bit RGB image, stored as (H, W, 3).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pixels: Array3<u8>,
}

impl Image {
    pub fn new(pixels: Array3<u8>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(ImlError::InvalidInput(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(ImlError::InvalidInput(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {h}x{w}"
            )));
        }
        Ok(Self { pixels })
    }

    /// Solid-color image (useful for tests and synthesis).
    pub fn filled(h: usize, w: usize, rgb: [u8; 3]) -> Result<Self> {
        let mut px = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    px[[y, x, c]] = rgb[c];
                }
            }
        }
        Self::new(px)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<u8> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<u8> {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        [self.pixels[[y, x, 0]], self.pixels[[y, x, 1]], self.pixels[[y, x, 2]]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        for c in 0..3 {
            self.pixels[[y, x, c]] = rgb[c];
        }
    }
}

/// Per-pixel {0,1} mask paired with an image of the same dimensions.
/// Serialized PNGs use {0,255}; in memory the values are strictly {0,1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    bits: Array2<u8>,
}

impl BinaryMask {
    pub fn new(bits: Array2<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(ImlError::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { bits: Array2::zeros((h, w)) }
    }

    pub fn height(&self) -> usize {
        self.bits.dim().0
    }

    pub fn width(&self) -> usize {
        self.bits.dim().1
    }

    pub fn bits(&self) -> &Array2<u8> {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut Array2<u8> {
        &mut self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.bits[[y, x]]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        debug_assert!(v <= 1);
        self.bits[[y, x]] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// Max-pool downsample by `factor` (a cell is 1 if any covered pixel is 1).
    pub fn max_pool(&self, factor: usize) -> BinaryMask {
        let (h, w) = self.bits.dim();
        let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
        let mut out = Array2::zeros((oh, ow));
        for y in 0..h {
            for x in 0..w {
                if self.bits[[y, x]] == 1 {
                    out[[y / factor, x / factor]] = 1;
                }
            }
        }
        BinaryMask { bits: out }
    }
}

/// Half-open pixel box: `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(ImlError::InvalidInput(format!(
                "degenerate box ({x_min},{y_min},{x_max},{y_max})"
            )));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

/// The four joint-training task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Natural,
    Document,
    Face,
    SceneText,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] =
        [TaskKind::Natural, TaskKind::Document, TaskKind::Face, TaskKind::SceneText];

    /// Tasks whose tampered content is text (OCR replaces recognition queries).
    pub fn is_text(self) -> bool {
        matches!(self, TaskKind::Document | TaskKind::SceneText)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Natural => "natural",
            TaskKind::Document => "document",
            TaskKind::Face => "face",
            TaskKind::SceneText => "scene_text",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "natural" => Ok(TaskKind::Natural),
            "document" => Ok(TaskKind::Document),
            "face" => Ok(TaskKind::Face),
            "scene_text" | "scenetext" | "scene-text" => Ok(TaskKind::SceneText),
            other => Err(ImlError::InvalidInput(format!("unknown task '{other}'"))),
        }
    }
}

/// One training/eval unit: image, ground-truth mask, task tag and the boxes
/// derived from the mask's connected components.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub mask: BinaryMask,
    pub task: TaskKind,
    pub boxes: Vec<BoundingBox>,
    pub authentic: bool,
}

impl Sample {
    /// Builds a sample, deriving `boxes` and `authentic` from the mask.
    pub fn from_parts(image: Image, mask: BinaryMask, task: TaskKind) -> Result<Self> {
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(ImlError::ShapeMismatch {
                expected: format!("{}x{}", image.height(), image.width()),
                got: format!("{}x{}", mask.height(), mask.width()),
            });
        }
        let boxes = boxes_from_mask(&mask);
        let authentic = boxes.is_empty();
        Ok(Self { image, mask, task, boxes, authentic })
    }
}

/// Connected components of a mask's foreground: count plus per-component
/// pixel sets and tight boxes.
#[derive(Debug, Clone)]
pub struct InstanceSet {
    pub components: Vec<(Vec<(usize, usize)>, BoundingBox)>,
}

impl InstanceSet {
    pub fn count(&self) -> usize {
        self.components.len()
    }

    /// A mask containing only instance `n` (1-based).
    pub fn instance_mask(&self, n: usize, h: usize, w: usize) -> Result<BinaryMask> {
        if n == 0 || n > self.count() {
            return Err(ImlError::InvalidInput(format!(
                "instance index {n} out of range 1..={}",
                self.count()
            )));
        }
        let mut mask = BinaryMask::zeros(h, w);
        for &(y, x) in &self.components[n - 1].0 {
            mask.set(y, x, 1);
        }
        Ok(mask)
    }
}

/// 8-connectivity connected components of the foreground, ordered by the
/// row-major position of each component's top-left-most pixel. Deterministic.
pub fn connected_components(mask: &BinaryMask) -> InstanceSet {
    let (h, w) = mask.bits().dim();
    let mut seen = Array2::<u8>::zeros((h, w));
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if mask.get(sy, sx) == 0 || seen[[sy, sx]] == 1 {
                continue;
            }
            // flood fill with 8-connectivity
            let mut pixels = Vec::new();
            stack.push((sy, sx));
            seen[[sy, sx]] = 1;
            let (mut x0, mut y0, mut x1, mut y1) = (sx, sy, sx, sy);
            while let Some((y, x)) = stack.pop() {
                pixels.push((y, x));
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask.get(ny, nx) == 1 && seen[[ny, nx]] == 0 {
                            seen[[ny, nx]] = 1;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            pixels.sort_unstable();
            let bbox = BoundingBox::new(x0, y0, x1 + 1, y1 + 1).expect("nonempty component box");
            components.push((pixels, bbox));
        }
    }
    // order by row-major position of the top-left-most pixel (the first pixel
    // after sorting); scan order already yields this, but make it explicit
    components.sort_by_key(|(pixels, _)| pixels[0]);
    InstanceSet { components }
}

/// Tight half-open boxes of [`connected_components`], same ordering.
pub fn boxes_from_mask(mask: &BinaryMask) -> Vec<BoundingBox> {
    connected_components(mask).components.into_iter().map(|(_, b)| b).collect()
}

/// Thresholds a probability map: bit = 1 iff prob >= threshold.
pub fn binarize(prob: &Array2<f32>, threshold: f32) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ImlError::InvalidInput(format!("threshold {threshold} outside (0,1)")));
    }
    if prob.iter().any(|p| !p.is_finite()) {
        return Err(ImlError::NonFinite("probability map".into()));
    }
    let bits = prob.mapv(|p| u8::from(p >= threshold));
    Ok(BinaryMask { bits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(points: &[(usize, usize)], h: usize, w: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for &(y, x) in points {
            m.set(y, x, 1);
        }
        m
    }

    /// Brute-force flood fill oracle, 8-connectivity, recomputed independently
    /// with a BFS queue over a boolean grid.
    fn cc_oracle(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
        let (h, w) = mask.bits().dim();
        let mut label = vec![vec![usize::MAX; w]; h];
        let mut comps: Vec<Vec<(usize, usize)>> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) == 1 && label[y][x] == usize::MAX {
                    let id = comps.len();
                    let mut q = std::collections::VecDeque::new();
                    q.push_back((y, x));
                    label[y][x] = id;
                    let mut pix = vec![];
                    while let Some((cy, cx)) = q.pop_front() {
                        pix.push((cy, cx));
                        for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                            for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                                if mask.get(ny, nx) == 1 && label[ny][nx] == usize::MAX {
                                    label[ny][nx] = id;
                                    q.push_back((ny, nx));
                                }
                            }
                        }
                    }
                    pix.sort_unstable();
                    comps.push(pix);
                }
            }
        }
        comps.sort_by_key(|p| p[0]);
        comps
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = BinaryMask::zeros(16, 16);
        let cc = connected_components(&m);
        assert_eq!(cc.count(), 0);
        assert!(boxes_from_mask(&m).is_empty());
    }

    #[test]
    fn two_known_components() {
        // foreground {(2,2),(2,3)} and {(10,10)}: boxes (2,2,4,3) and (10,10,11,11)
        let m = mask_from(&[(2, 2), (2, 3), (10, 10)], 16, 16);
        let cc = connected_components(&m);
        assert_eq!(cc.count(), 2);
        assert_eq!(cc.components[0].1, BoundingBox::new(2, 2, 4, 3).unwrap());
        assert_eq!(cc.components[1].1, BoundingBox::new(10, 10, 11, 11).unwrap());
    }

    #[test]
    fn full_mask_is_one_component() {
        let m = BinaryMask::new(Array2::ones((16, 16))).unwrap();
        let cc = connected_components(&m);
        assert_eq!(cc.count(), 1);
        assert_eq!(cc.components[0].1, BoundingBox::new(0, 0, 16, 16).unwrap());
    }

    #[test]
    fn single_blob_box_matches_minmax() {
        // 3x3 blob at rows 5..=7, cols 5..=7 -> (5,5,8,8)
        let mut pts = vec![];
        for y in 5..8 {
            for x in 5..8 {
                pts.push((y, x));
            }
        }
        let m = mask_from(&pts, 16, 16);
        assert_eq!(boxes_from_mask(&m), vec![BoundingBox::new(5, 5, 8, 8).unwrap()]);
    }

    #[test]
    fn diagonal_pixels_join_under_8_connectivity() {
        let m = mask_from(&[(3, 3), (4, 4)], 16, 16);
        let boxes = boxes_from_mask(&m);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0], BoundingBox::new(3, 3, 5, 5).unwrap());
    }

    #[test]
    fn components_match_bfs_oracle_and_partition_foreground() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..25 {
            let mut m = BinaryMask::zeros(24, 24);
            for y in 0..24 {
                for x in 0..24 {
                    if rng.gen_bool(0.3) {
                        m.set(y, x, 1);
                    }
                }
            }
            let ours = connected_components(&m);
            let oracle = cc_oracle(&m);
            assert_eq!(ours.count(), oracle.len());
            let mut total = 0;
            for (i, (pix, bbox)) in ours.components.iter().enumerate() {
                assert_eq!(pix, &oracle[i]);
                total += pix.len();
                // tightness: the box touches the component on all four sides
                assert!(pix.iter().any(|&(_, x)| x == bbox.x_min));
                assert!(pix.iter().any(|&(_, x)| x + 1 == bbox.x_max));
                assert!(pix.iter().any(|&(y, _)| y == bbox.y_min));
                assert!(pix.iter().any(|&(y, _)| y + 1 == bbox.y_max));
                assert!(pix.iter().all(|&(y, x)| bbox.contains(y, x)));
            }
            assert_eq!(total, m.count_ones());
            // determinism
            let again = connected_components(&m);
            assert_eq!(again.count(), ours.count());
            for (a, b) in again.components.iter().zip(ours.components.iter()) {
                assert_eq!(a.0, b.0);
            }
        }
    }

    #[test]
    fn binarize_follows_ge_convention() {
        let prob = ndarray::array![[0.5f32, 0.49], [0.51, 0.0]];
        let m = binarize(&prob, 0.5).unwrap();
        assert_eq!(m.get(0, 0), 1); // exactly 0.5 -> 1
        assert_eq!(m.get(0, 1), 0);
        assert_eq!(m.get(1, 0), 1);
        assert_eq!(m.get(1, 1), 0);
        let zeros = Array2::<f32>::zeros((4, 4));
        assert!(binarize(&zeros, 0.5).unwrap().is_empty());
        let bad = ndarray::array![[f32::NAN]];
        assert!(binarize(&bad, 0.5).is_err());
        assert!(binarize(&prob, 0.0).is_err());
    }

    #[test]
    fn sample_invariants() {
        let img = Image::filled(16, 16, [10, 20, 30]).unwrap();
        let m = BinaryMask::zeros(16, 16);
        let s = Sample::from_parts(img.clone(), m, TaskKind::Natural).unwrap();
        assert!(s.authentic);
        assert!(s.boxes.is_empty());
        let m2 = mask_from(&[(1, 1)], 16, 16);
        let s2 = Sample::from_parts(img, m2, TaskKind::Face).unwrap();
        assert!(!s2.authentic);
        assert_eq!(s2.boxes.len(), 1);
    }

    #[test]
    fn max_pool_is_logical_or() {
        let m = mask_from(&[(0, 0), (5, 5)], 16, 16);
        let p = m.max_pool(4);
        assert_eq!(p.bits().dim(), (4, 4));
        assert_eq!(p.get(0, 0), 1);
        assert_eq!(p.get(1, 1), 1);
        assert_eq!(p.get(2, 2), 0);
    }
}
