//! Fixtures shared by the benchmarks.

use duda_core::detector::Detection;
use duda_core::scenegen::{generate_image, CorruptionConfig, GenConfig, LabeledImage, Split};
use duda_core::BoundingBox;

pub fn images(split: Split, n: usize) -> Vec<LabeledImage> {
    let (g, k) = (GenConfig::default(), CorruptionConfig::default());
    (0..n)
        .map(|i| generate_image(&g, &k, split, i, 11).expect("default configs are valid"))
        .collect()
}

/// `n` overlapping detections on a jittered lattice, scores spread over (0, 1).
pub fn detections(n: usize) -> Vec<Detection> {
    (0..n)
        .map(|i| {
            let x = (i * 7 % 48) as f64;
            let y = (i * 13 % 48) as f64;
            Detection {
                bbox: BoundingBox::new(x, y, x + 12.0 + (i % 5) as f64, y + 14.0, i % 3),
                score: ((i * 37 % 101) as f64 + 0.5) / 101.0,
                class_id: i % 3,
            }
        })
        .collect()
}

/// Ranked TP/FP flags with a precision that decays down the list.
pub fn scored(n: usize) -> Vec<(f64, bool)> {
    (0..n)
        .map(|i| (1.0 - i as f64 / n as f64, i % 3 != 2 || i < n / 10))
        .collect()
}
