//! Localization metrics (pixel IoU, binary F1) and interpretation metrics
//! (ROUGE-L/ROUGE-2, BLEU, MRB, OCR accuracy, choice accuracy, embedding
//! cosine similarity).

use std::collections::{BTreeSet, HashMap};

use crate::error::{ImlError, Result};
use crate::types::BinaryMask;

/// Confusion counts for one mask pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl PixelCounts {
    pub fn from_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(ImlError::ShapeMismatch {
                expected: format!("{}x{}", gt.height(), gt.width()),
                got: format!("{}x{}", pred.height(), pred.width()),
            });
        }
        let mut c = PixelCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
        for (p, g) in pred.bits().iter().zip(gt.bits().iter()) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// tp/(tp+fp+fn); defined as 1.0 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    /// 2tp/(2tp+fp+fn); 1.0 when both masks are empty.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

pub fn pixel_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(PixelCounts::from_masks(pred, gt)?.iou())
}

pub fn binary_f1(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(PixelCounts::from_masks(pred, gt)?.f1())
}

/// Shared tokenization: lowercase, split on non-alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// ROUGE-L F1 over [`tokenize`]d text: P = LCS/|cand|, R = LCS/|ref|.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&cand, &refr) as f64;
    let p = lcs / cand.len() as f64;
    let r = lcs / refr.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Bigram-overlap F1 (ROUGE-2), reported alongside ROUGE-L.
pub fn rouge_2(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.len() < 2 || refr.len() < 2 {
        return 0.0;
    }
    let cc = ngram_counts(&cand, 2);
    let rc = ngram_counts(&refr, 2);
    let overlap: usize = cc
        .iter()
        .map(|(gram, &c)| c.min(rc.get(gram).copied().unwrap_or(0)))
        .sum();
    let p = overlap as f64 / (cand.len() - 1) as f64;
    let r = overlap as f64 / (refr.len() - 1) as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Sentence BLEU: n-grams up to 4, uniform weights, brevity penalty, and
/// add-one smoothing applied to zero-match n-gram precisions. Orders with no
/// candidate n-grams contribute a precision of 1 (vacuous).
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0f64;
    for n in 1..=4 {
        let cc = ngram_counts(&cand, n);
        let rc = ngram_counts(&refr, n);
        let total: usize = cc.values().sum();
        let matched: usize = cc
            .iter()
            .map(|(gram, &c)| c.min(rc.get(gram).copied().unwrap_or(0)))
            .sum();
        let p = if total == 0 {
            1.0
        } else if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += 0.25 * p.ln();
    }
    let bp = if cand.len() >= refr.len() {
        1.0
    } else {
        (1.0 - refr.len() as f64 / cand.len() as f64).exp()
    };
    bp * log_sum.exp()
}

/// Mean of ROUGE-L and BLEU.
pub fn mrb(candidate: &str, reference: &str) -> f64 {
    0.5 * (rouge_l(candidate, reference) + bleu(candidate, reference))
}

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut dp: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut prev = dp[0];
        dp[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if ca == cb {
                prev
            } else {
                1 + prev.min(dp[j]).min(dp[j + 1])
            };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// max(0, 1 - edit_distance / max(|gt|, 1)), character level.
pub fn ocr_accuracy(pred: &str, gt: &str) -> f64 {
    let d = levenshtein(pred, gt) as f64;
    let denom = gt.chars().count().max(1) as f64;
    (1.0 - d / denom).max(0.0)
}

/// Matching mode for [`choice_accuracy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChoiceMode {
    /// Exact match after case-folding and trimming.
    Single,
    /// Per-sample Jaccard similarity over comma-separated sets.
    Multi,
    /// Strict set equality (1.0 or 0.0 per sample).
    MultiStrict,
}

fn normalize_choice(s: &str) -> String {
    s.trim().to_lowercase()
}

fn choice_set(s: &str) -> BTreeSet<String> {
    s.split(',').map(normalize_choice).filter(|t| !t.is_empty()).collect()
}

/// Accuracy over aligned prediction/reference lists.
pub fn choice_accuracy(preds: &[&str], gts: &[&str], mode: ChoiceMode) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(ImlError::InvalidInput(format!(
            "length mismatch: {} predictions vs {} references",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(ImlError::InvalidInput("empty choice lists".into()));
    }
    let score: f64 = preds
        .iter()
        .zip(gts.iter())
        .map(|(p, g)| match mode {
            ChoiceMode::Single => f64::from(normalize_choice(p) == normalize_choice(g)),
            ChoiceMode::Multi => {
                let ps = choice_set(p);
                let gs = choice_set(g);
                let union = ps.union(&gs).count();
                if union == 0 {
                    1.0
                } else {
                    ps.intersection(&gs).count() as f64 / union as f64
                }
            }
            ChoiceMode::MultiStrict => f64::from(choice_set(p) == choice_set(g)),
        })
        .sum();
    Ok(score / preds.len() as f64)
}

/// Maps tokens to fixed-length vectors; must be deterministic.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, token: &str) -> Vec<f64>;
}

/// Deterministic hash-seeded embedder used when no word-vector file is given.
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 32 }
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed(&self, token: &str) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut h = 0xcbf29ce484222325u64;
        for b in token.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(h);
        (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }
}

/// Cosine similarity of mean token embeddings, mapped to [0,1] via
/// (1+cos)/2. Degenerate (zero) mean vectors score 0.5.
pub fn cosine_sim(text_a: &str, text_b: &str, embedder: &dyn Embedder) -> f64 {
    let mean_of = |text: &str| -> Vec<f64> {
        let tokens = tokenize(text);
        let mut acc = vec![0.0; embedder.dim()];
        if tokens.is_empty() {
            return acc;
        }
        for t in &tokens {
            for (slot, v) in acc.iter_mut().zip(embedder.embed(t)) {
                *slot += v;
            }
        }
        for slot in acc.iter_mut() {
            *slot /= tokens.len() as f64;
        }
        acc
    };
    let a = mean_of(text_a);
    let b = mean_of(text_b);
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.5;
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    (1.0 + cos) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BinaryMask;

    fn mask_of(points: &[(usize, usize)], h: usize, w: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for &(y, x) in points {
            m.set(y, x, 1);
        }
        m
    }

    #[test]
    fn iou_f1_worked_examples() {
        // pred 2x2 block, gt overlapping 2x2 block sharing 2 px
        let pred = mask_of(&[(0, 0), (0, 1), (1, 0), (1, 1)], 4, 4);
        let gt = mask_of(&[(0, 1), (0, 2), (1, 1), (1, 2)], 4, 4);
        let c = PixelCounts::from_masks(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (2, 2, 2));
        assert!((c.iou() - 2.0 / 6.0).abs() < 1e-12);
        assert!((c.f1() - 0.5).abs() < 1e-12);
        // identical nonempty -> 1.0; disjoint -> 0.0; both empty -> 1.0
        assert_eq!(pixel_iou(&pred, &pred).unwrap(), 1.0);
        let far = mask_of(&[(3, 3)], 4, 4);
        assert_eq!(pixel_iou(&pred, &far).unwrap(), 0.0);
        let empty = BinaryMask::zeros(4, 4);
        assert_eq!(pixel_iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(binary_f1(&empty, &empty).unwrap(), 1.0);
        // dim mismatch errors
        assert!(pixel_iou(&pred, &BinaryMask::zeros(5, 4)).is_err());
    }

    #[test]
    fn f1_iou_identity_on_random_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mut p = BinaryMask::zeros(12, 12);
            let mut g = BinaryMask::zeros(12, 12);
            for y in 0..12 {
                for x in 0..12 {
                    if rng.gen_bool(0.4) {
                        p.set(y, x, 1);
                    }
                    if rng.gen_bool(0.4) {
                        g.set(y, x, 1);
                    }
                }
            }
            let iou = pixel_iou(&p, &g).unwrap();
            let f1 = binary_f1(&p, &g).unwrap();
            assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        }
    }

    #[test]
    fn rouge_l_worked_example() {
        assert!((rouge_l("the cat", "the cat sat") - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l("same text here", "same text here"), 1.0);
        assert_eq!(rouge_l("alpha beta", "gamma delta"), 0.0);
        assert_eq!(rouge_l("", "reference"), 0.0);
    }

    #[test]
    fn bleu_worked_examples() {
        assert!((bleu("a b c d", "a b c d") - 1.0).abs() < 1e-12);
        assert_eq!(bleu("", "a b"), 0.0);
        // frozen value: p1 = 3/4 (3 of 4 unigrams), p2 = 2/3 (2 of 3 bigrams),
        // p3 = 1/2 (1 of 2 trigrams), p4 = 0/1 smoothed to 1/2; BP = 1
        let expect = (0.75f64 * (2.0 / 3.0) * 0.5 * 0.5).powf(0.25);
        assert!((bleu("a b c d", "a b c e") - expect).abs() < 1e-12);
    }

    #[test]
    fn mrb_mean_and_monotonicity() {
        assert_eq!(mrb("x y z w", "x y z w"), 1.0);
        // adding a matching token to the candidate cannot decrease MRB
        let base = mrb("a b", "a b c d");
        let better = mrb("a b c", "a b c d");
        assert!(better >= base);
    }

    #[test]
    fn ocr_accuracy_worked_examples() {
        assert_eq!(ocr_accuracy("match", "match"), 1.0);
        assert!((ocr_accuracy("abcd", "abce") - 0.75).abs() < 1e-12);
        assert_eq!(ocr_accuracy("zzzzzzzzzzzz", "ab"), 0.0); // clamped
    }

    #[test]
    fn choice_accuracy_modes() {
        assert_eq!(
            choice_accuracy(&["Top left", "bottom right"], &["top left", "Bottom right"], ChoiceMode::Single)
                .unwrap(),
            1.0
        );
        assert_eq!(
            choice_accuracy(&["a", "b", "c", "d"], &["a", "x", "y", "z"], ChoiceMode::Single).unwrap(),
            0.25
        );
        // multi: {A,B} vs {B,C} -> 1/3
        assert!(
            (choice_accuracy(&["A,B"], &["B,C"], ChoiceMode::Multi).unwrap() - 1.0 / 3.0).abs()
                < 1e-12
        );
        assert_eq!(choice_accuracy(&["A,B"], &["B,C"], ChoiceMode::MultiStrict).unwrap(), 0.0);
        assert_eq!(choice_accuracy(&[""], &[""], ChoiceMode::Multi).unwrap(), 1.0);
        assert!(choice_accuracy(&["a"], &["a", "b"], ChoiceMode::Single).is_err());
    }

    #[test]
    fn cosine_similarity_range_and_cases() {
        let emb = HashEmbedder::default();
        assert!((cosine_sim("red apple", "red apple", &emb) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim("", "anything", &emb), 0.5);
        // constructed opposite embeddings map to 0
        struct Sign;
        impl Embedder for Sign {
            fn dim(&self) -> usize {
                1
            }
            fn embed(&self, token: &str) -> Vec<f64> {
                vec![if token.starts_with('n') { -1.0 } else { 1.0 }]
            }
        }
        assert_eq!(cosine_sim("yes", "no", &Sign), 0.0);
        // orthogonal mean vectors -> 0.5
        struct Axis;
        impl Embedder for Axis {
            fn dim(&self) -> usize {
                2
            }
            fn embed(&self, token: &str) -> Vec<f64> {
                if token.starts_with('a') {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                }
            }
        }
        assert_eq!(cosine_sim("alpha", "beta", &Axis), 0.5);
    }

    #[test]
    fn rouge_2_bigram_overlap() {
        assert_eq!(rouge_2("a b c", "a b c"), 1.0);
        assert_eq!(rouge_2("a", "a"), 0.0); // too short for bigrams
        let v = rouge_2("a b c d", "a b x d");
        assert!(v > 0.0 && v < 1.0);
    }
}
