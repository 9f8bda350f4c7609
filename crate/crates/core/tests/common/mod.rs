#![allow(dead_code)]

pub mod reference;

use duda_core::autograd::{ParamId, ParamStore};
use duda_core::boxes::BoundingBox;
use duda_core::corruption::CorruptionRecord;
use duda_core::scenegen::{generate_image, CorruptionConfig, Domain, GenConfig, LabeledImage, Split};
use duda_core::{PixelGrid, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Step for smooth functions: the fourth-order stencil keeps truncation and
/// rounding error near 1e-12, well below the 1e-4 relative tolerance even for
/// gradient entries around 1e-7.
pub const SMOOTH_STEP: f64 = 1e-4;
/// Step for ReLU networks, small enough not to cross a kink in practice.
pub const KINK_STEP: f64 = 1e-6;

pub fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
    numeric_grad_step(f, x, SMOOTH_STEP)
}

/// Five-point central differences of `f` around `x` with step `h`.
pub fn numeric_grad_step(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let at = |d: f64| {
                let mut p = x.clone();
                p.data_mut()[i] += d;
                f(&p)
            };
            (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
        })
        .collect()
}

/// Numeric gradient of `f` with respect to one parameter tensor.
pub fn numeric_param_grad(store: &ParamStore, id: ParamId, f: impl Fn(&ParamStore) -> f64) -> Vec<f64> {
    numeric_param_grad_step(store, id, f, SMOOTH_STEP)
}

pub fn numeric_param_grad_step(store: &ParamStore, id: ParamId, f: impl Fn(&ParamStore) -> f64, h: f64) -> Vec<f64> {
    numeric_grad_step(
        |t| {
            let mut s = store.clone();
            *s.get_mut(id) = t.clone();
            f(&s)
        },
        store.get(id),
        h,
    )
}

/// Largest elementwise relative error, with an absolute floor for entries
/// that are zero in both.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-7))
        .fold(0.0, f64::max)
}

pub fn images(split: Split, n: usize, seed: u64) -> Vec<LabeledImage> {
    let (g, c) = (GenConfig::default(), CorruptionConfig::default());
    (0..n)
        .map(|i| generate_image(&g, &c, split, i, seed).unwrap())
        .collect()
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> PixelGrid {
    PixelGrid::from_vec(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect())
}

pub fn labeled(pixels: PixelGrid, boxes: Vec<BoundingBox>) -> LabeledImage {
    LabeledImage {
        pixels,
        boxes,
        domain: Domain::SourceClear,
        corruption: None::<CorruptionRecord>,
    }
}

/// Random valid box with integer corners inside `size x size`.
pub fn random_box(rng: &mut impl Rng, size: f64, class_id: usize) -> BoundingBox {
    let x0 = rng.random_range(0.0..size - 2.0).floor();
    let y0 = rng.random_range(0.0..size - 2.0).floor();
    let x1 = rng.random_range(x0 + 1.0..size).ceil();
    let y1 = rng.random_range(y0 + 1.0..size).ceil();
    BoundingBox::new(x0, y0, x1, y1, class_id)
}
