//! Deterministic, seeded parameter initialization.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Scalar;

/// Standard-normal sample via Box-Muller (avoids distribution-crate version
/// coupling; two uniform draws per sample keeps the stream deterministic).
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal_array1<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Array1<F> {
    Array1::from_iter((0..n).map(|_| F::from_f64(normal(rng) * std)))
}

pub fn normal_array2<F: Scalar>(rng: &mut ChaCha8Rng, dim: (usize, usize), std: f64) -> Array2<F> {
    let len = dim.0 * dim.1;
    Array2::from_shape_vec(dim, (0..len).map(|_| F::from_f64(normal(rng) * std)).collect())
        .expect("shape")
}

pub fn normal_array3<F: Scalar>(
    rng: &mut ChaCha8Rng,
    dim: (usize, usize, usize),
    std: f64,
) -> Array3<F> {
    let len = dim.0 * dim.1 * dim.2;
    Array3::from_shape_vec(dim, (0..len).map(|_| F::from_f64(normal(rng) * std)).collect())
        .expect("shape")
}

pub fn normal_array4<F: Scalar>(
    rng: &mut ChaCha8Rng,
    dim: (usize, usize, usize, usize),
    std: f64,
) -> Array4<F> {
    let len = dim.0 * dim.1 * dim.2 * dim.3;
    Array4::from_shape_vec(dim, (0..len).map(|_| F::from_f64(normal(rng) * std)).collect())
        .expect("shape")
}

/// He (Kaiming) standard deviation for ReLU fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Xavier standard deviation for linear heads.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn seeded_init_is_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let x: Array2<f32> = normal_array2(&mut a, (4, 5), 0.1);
        let y: Array2<f32> = normal_array2(&mut b, (4, 5), 0.1);
        assert_eq!(x, y);
    }

    #[test]
    fn normal_has_plausible_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..20000).map(|_| normal(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
