//! AdamW: adaptive moments with decoupled weight decay.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::{GradStore, Params, Scalar};

#[derive(Debug, Clone)]
pub struct AdamW<F: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: HashMap<String, ArrayD<F>>,
    v: HashMap<String, ArrayD<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    /// Parameters without gradients (frozen branches) are left untouched.
    pub fn step<P: Params<F>>(&mut self, model: &mut P, grads: &GradStore<F>, lr: f64) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let bc1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::from_f64(lr);
        let eps = F::from_f64(self.eps);
        let wd = F::from_f64(self.weight_decay);
        let one = F::one();
        let m = &mut self.m;
        let v = &mut self.v;
        model.visit_mut("", &mut |name, mut p| {
            let Some(g) = grads.get(name) else { return };
            let mslot = m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let vslot = v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut p)
                .and(mslot)
                .and(vslot)
                .and(g)
                .for_each(|pv, mv, vv, &gv| {
                    *mv = b1 * *mv + (one - b1) * gv;
                    *vv = b2 * *vv + (one - b2) * gv * gv;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv = *pv - lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adamw_reduces_quadratic_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::<f32>::new(&mut rng, 3, 2);
        let target = ndarray::array![0.3f32, -0.7];
        let x = ndarray::array![1.0f32, 2.0, -1.0];
        let mut opt = AdamW::new(0.9, 0.999, 0.0);
        let loss_at = |l: &Linear<f32>| {
            let y = l.forward(&x);
            let d = &y - &target;
            (&d * &d).sum()
        };
        let initial = loss_at(&lin);
        for _ in 0..200 {
            let y = lin.forward(&x);
            let gy = (&y - &target) * 2.0;
            let mut gs = GradStore::new();
            lin.backward(&x, &gy, "", &mut gs);
            opt.step(&mut lin, &gs, 1e-2);
        }
        let fin = loss_at(&lin);
        assert!(fin < initial * 0.01, "initial {initial} final {fin}");
    }

    #[test]
    fn frozen_params_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::<f32>::new(&mut rng, 2, 2);
        let before = lin.w.clone();
        let gs = GradStore::new(); // empty: nothing trained
        let mut opt = AdamW::new(0.9, 0.999, 0.01);
        opt.step(&mut lin, &gs, 1e-3);
        assert_eq!(lin.w, before);
    }
}
