//! Gaussian-mixture classification data.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Class-conditional isotropic Gaussians with unit variance.
///
/// Class means are `separation / sqrt(2)` times an orthonormal set of random
/// directions, so every pair of means is exactly `separation` apart (when
/// `input_dim >= num_classes`; otherwise directions are independent random
/// unit vectors and the distance holds only approximately). Samples are laid
/// out class-major: rows `c * per_class .. (c + 1) * per_class` carry label
/// `c`. Values are then divided by `radius + 3` and clamped to `[0, 1]`,
/// which gives pixel-like inputs: a zero background with a class-specific
/// bright pattern and sparse positive noise.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    separation: f64,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    if num_classes < 2 || per_class == 0 || input_dim == 0 {
        return Err(Error::invalid("synthetic data needs >= 2 classes, per_class > 0, input_dim > 0"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::invalid(format!("separation must be finite and >= 0, got {separation}")));
    }

    let directions = random_directions(num_classes, input_dim, rng);
    let radius = separation / std::f64::consts::SQRT_2;
    let n = num_classes * per_class;
    let mut x = Array2::<f64>::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for i in 0..per_class {
            let mut row = x.row_mut(c * per_class + i);
            for (v, d) in row.iter_mut().zip(&directions[c]) {
                let z: f64 = StandardNormal.sample(rng);
                *v = radius * d + z;
            }
            labels.push(c);
        }
    }

    let span = radius + 3.0;
    x.mapv_inplace(|v| (v / span).clamp(0.0, 1.0));
    Dataset::new(x, labels, num_classes)
}

fn random_directions(k: usize, dim: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if k <= dim {
            for u in &out {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= proj * ui;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}
