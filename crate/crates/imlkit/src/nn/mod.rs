//! Minimal CPU neural-network substrate: typed layers with explicit
//! forward/backward passes, named parameters, and a gradient store.
//!
//! Every layer is a plain struct holding its parameter arrays. Forward passes
//! are pure (`&self`), so a frozen model can be shared across threads; a
//! backward pass takes the cached forward inputs plus the output gradient and
//! accumulates parameter gradients into a [`GradStore`] keyed by dotted
//! parameter paths (`"enc.vision.c1.w"`). The same paths drive the optimizer
//! and the checkpoint format.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayViewD, ArrayViewMutD, Axis};

use crate::error::{ImlError, Result};

pub mod adamw;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod loss;

/// Floating-point element type for all tensors (`f32` for training, `f64`
/// for high-precision gradient verification).
pub trait Scalar: ndarray::NdFloat + Send + Sync {
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// A C×H×W feature map tagged with its downsampling factor relative to the
/// input image.
#[derive(Debug, Clone)]
pub struct TensorGrid<F: Scalar> {
    pub values: Array3<F>,
    pub stride: usize,
}

impl<F: Scalar> TensorGrid<F> {
    /// Wraps a feature map, checking the basic well-formedness rules.
    pub fn new(values: Array3<F>, stride: usize) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(ImlError::InvalidInput(format!(
                "TensorGrid dimensions must be positive, got {c}x{h}x{w}"
            )));
        }
        if !stride.is_power_of_two() {
            return Err(ImlError::InvalidInput(format!(
                "TensorGrid stride must be a power of two, got {stride}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ImlError::NonFinite("TensorGrid".into()));
        }
        Ok(Self { values, stride })
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }
}

/// Accumulator for parameter gradients keyed by dotted parameter path.
#[derive(Debug, Clone, Default)]
pub struct GradStore<F: Scalar> {
    map: HashMap<String, ArrayD<F>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn new() -> Self {
        Self { map: HashMap::new() }
    }

    /// Adds `g` to the gradient accumulated under `path`.
    pub fn add<S, D>(&mut self, path: &str, g: &ndarray::ArrayBase<S, D>)
    where
        S: ndarray::Data<Elem = F>,
        D: ndarray::Dimension,
    {
        match self.map.get_mut(path) {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape(), "gradient shape for {path}");
                acc.zip_mut_with(&g.view().into_dyn(), |a, &b| *a += b);
            }
            None => {
                self.map.insert(path.to_string(), g.to_owned().into_dyn());
            }
        }
    }

    pub fn get(&self, path: &str) -> Option<&ArrayD<F>> {
        self.map.get(path)
    }

    /// Folds another store into this one (summing shared paths).
    pub fn merge(&mut self, other: GradStore<F>) {
        for (k, v) in other.map {
            match self.map.get_mut(&k) {
                Some(acc) => acc.zip_mut_with(&v, |a, &b| *a += b),
                None => {
                    self.map.insert(k, v);
                }
            }
        }
    }

    /// Multiplies every stored gradient by `s` (batch averaging).
    pub fn scale(&mut self, s: F) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// True if any stored gradient contains a non-finite value.
    pub fn any_non_finite(&self) -> bool {
        self.map.values().any(|g| g.iter().any(|v| !v.is_finite()))
    }
}

/// Named-parameter traversal, used by the optimizer and the checkpoint codec.
///
/// Implementations must visit parameters in a deterministic order and use the
/// same paths that their backward passes feed into [`GradStore`].
pub trait Params<F: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>));
}

/// Snapshots every parameter as f64, keyed by path (lossless for f32).
pub fn export_params<F: Scalar, P: Params<F>>(model: &P) -> HashMap<String, ArrayD<f64>> {
    let mut out = HashMap::new();
    model.visit("", &mut |name, view| {
        out.insert(name.to_string(), view.mapv(|v| v.into_f64()));
    });
    out
}

/// Writes a parameter snapshot back into a model (shape-checked).
pub fn import_params<F: Scalar, P: Params<F>>(
    model: &mut P,
    params: &HashMap<String, ArrayD<f64>>,
) -> Result<()> {
    let mut missing = Vec::new();
    model.visit_mut("", &mut |name, mut view| {
        match params.get(name) {
            Some(src) if src.shape() == view.shape() => {
                view.zip_mut_with(src, |dst, &s| *dst = F::from_f64(s));
            }
            Some(_) => missing.push(format!("{name} (shape mismatch)")),
            None => missing.push(name.to_string()),
        }
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(ImlError::Checkpoint(format!("unmatched parameters: {}", missing.join(", "))))
    }
}

/// Concatenates feature maps along the channel axis.
pub fn concat_channels<F: Scalar>(parts: &[&Array3<F>]) -> Array3<F> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("channel concat: spatial dims must match")
}

/// Splits a channel gradient back into per-input slices sized like `channels`.
pub fn split_channels<F: Scalar>(g: &Array3<F>, channels: &[usize]) -> Vec<Array3<F>> {
    let mut out = Vec::with_capacity(channels.len());
    let mut start = 0;
    for &c in channels {
        out.push(g.slice(ndarray::s![start..start + c, .., ..]).to_owned());
        start += c;
    }
    debug_assert_eq!(start, g.dim().0);
    out
}

/// Mean over the spatial axes: (C,H,W) -> (C,).
pub fn global_avg_pool<F: Scalar>(x: &Array3<F>) -> Array1<F> {
    let (_, h, w) = x.dim();
    let n = F::from_f64((h * w) as f64);
    let mut out = Array1::zeros(x.dim().0);
    for (c, plane) in x.outer_iter().enumerate() {
        out[c] = plane.sum() / n;
    }
    out
}

/// Backward of [`global_avg_pool`]: broadcasts `gy/HW` over the plane.
pub fn global_avg_pool_backward<F: Scalar>(gy: &Array1<F>, h: usize, w: usize) -> Array3<F> {
    let n = F::from_f64((h * w) as f64);
    let mut gx = Array3::zeros((gy.len(), h, w));
    for (c, mut plane) in gx.outer_iter_mut().enumerate() {
        plane.fill(gy[c] / n);
    }
    gx
}

/// Flattens (C,H,W) to a vector in C-major order.
pub fn flatten<F: Scalar>(x: &Array3<F>) -> Array1<F> {
    Array1::from_iter(x.iter().copied())
}

/// Inverse of [`flatten`].
pub fn unflatten<F: Scalar>(v: &Array1<F>, dim: (usize, usize, usize)) -> Array3<F> {
    Array3::from_shape_vec(dim, v.to_vec()).expect("unflatten: size mismatch")
}

/// Reshapes a (Cout, Cin*K*K) matrix view of conv weights.
pub(crate) fn as_matrix<F: Scalar>(w: &ndarray::Array4<F>) -> Array2<F> {
    let (o, i, kh, kw) = w.dim();
    w.view()
        .into_shape_with_order((o, i * kh * kw))
        .expect("conv weight reshape")
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn grad_store_accumulates() {
        let mut gs = GradStore::<f64>::new();
        gs.add("a.w", &array![1.0, 2.0]);
        gs.add("a.w", &array![0.5, 0.5]);
        let g = gs.get("a.w").unwrap();
        assert_eq!(g.as_slice().unwrap(), &[1.5, 2.5]);
    }

    #[test]
    fn grad_store_merge_and_scale() {
        let mut a = GradStore::<f64>::new();
        a.add("x", &array![1.0]);
        let mut b = GradStore::<f64>::new();
        b.add("x", &array![3.0]);
        b.add("y", &array![2.0]);
        a.merge(b);
        a.scale(0.5);
        assert_eq!(a.get("x").unwrap().as_slice().unwrap(), &[2.0]);
        assert_eq!(a.get("y").unwrap().as_slice().unwrap(), &[1.0]);
    }

    #[test]
    fn tensor_grid_rejects_bad_values() {
        let bad = Array3::from_elem((1, 2, 2), f32::NAN);
        assert!(TensorGrid::new(bad, 4).is_err());
        let ok = Array3::from_elem((1, 2, 2), 1.0f32);
        assert!(TensorGrid::new(ok.clone(), 3).is_err());
        assert!(TensorGrid::new(ok, 4).is_ok());
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c * 9 + y * 3 + x) as f64);
        let b = Array3::from_shape_fn((1, 3, 3), |(_, y, x)| -((y * 3 + x) as f64));
        let cat = concat_channels(&[&a, &b]);
        assert_eq!(cat.dim(), (3, 3, 3));
        let parts = split_channels(&cat, &[2, 1]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn gap_matches_mean() {
        let x = Array3::from_shape_fn((2, 2, 2), |(c, y, xw)| (c + y + xw) as f64);
        let g = global_avg_pool(&x);
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert!((g[1] - 2.0).abs() < 1e-12);
        let gx = global_avg_pool_backward(&g, 2, 2);
        assert!((gx[[0, 0, 0]] - 0.25).abs() < 1e-12);
    }
}
