//! Loss functions with analytic gradients.

use ndarray::{Array2, Array3};

use super::layers::sigmoid_scalar;
use super::Scalar;

/// Per-pixel softmax over the channel axis (numerically stable).
pub fn softmax_map<F: Scalar>(logits: &Array3<F>) -> Array3<F> {
    let (c, h, w) = logits.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut maxv = logits[[0, y, x]];
            for ci in 1..c {
                if logits[[ci, y, x]] > maxv {
                    maxv = logits[[ci, y, x]];
                }
            }
            let mut denom = F::zero();
            for ci in 0..c {
                let e = (logits[[ci, y, x]] - maxv).exp();
                out[[ci, y, x]] = e;
                denom += e;
            }
            for ci in 0..c {
                out[[ci, y, x]] = out[[ci, y, x]] / denom;
            }
        }
    }
    out
}

/// Mean per-pixel cross-entropy of 2-class logits against a {0,1} target map.
/// Returns (loss, dLoss/dlogits).
pub fn softmax_ce_map<F: Scalar>(logits: &Array3<F>, target: &Array2<u8>) -> (F, Array3<F>) {
    let (c, h, w) = logits.dim();
    debug_assert_eq!(c, 2);
    debug_assert_eq!((h, w), target.dim());
    let n = F::from_f64((h * w) as f64);
    let probs = softmax_map(logits);
    let mut loss = F::zero();
    let mut grad = probs.clone();
    for y in 0..h {
        for x in 0..w {
            let t = target[[y, x]] as usize;
            let p = probs[[t, y, x]];
            // clamp to avoid -inf on saturated predictions
            let p = if p < F::from_f64(1e-30) { F::from_f64(1e-30) } else { p };
            loss -= p.ln();
            grad[[t, y, x]] -= F::one();
        }
    }
    grad.mapv_inplace(|v| v / n);
    (loss / n, grad)
}

/// Binary cross-entropy on a single logit. Returns (loss, dLoss/dlogit).
pub fn bce_with_logit<F: Scalar>(logit: F, target: F) -> (F, F) {
    // max(z,0) - z*y + ln(1 + exp(-|z|))
    let z = logit;
    let pos = if z > F::zero() { z } else { F::zero() };
    let loss = pos - z * target + (F::one() + (-z.abs()).exp()).ln();
    let grad = sigmoid_scalar(z) - target;
    (loss, grad)
}

/// Smooth-L1 (Huber, beta = 1) on one residual. Returns (loss, dLoss/dpred).
pub fn smooth_l1<F: Scalar>(pred: F, target: F) -> (F, F) {
    let d = pred - target;
    let one = F::one();
    if d.abs() < one {
        (F::from_f64(0.5) * d * d, d)
    } else {
        (d.abs() - F::from_f64(0.5), if d > F::zero() { one } else { -one })
    }
}
