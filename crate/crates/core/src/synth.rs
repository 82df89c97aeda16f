//! Synthetic datasets used by tests, examples and the desk-scale experiments.

use crate::error::{bail, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::vec::Vec;
use core::f64::consts::PI;

/// Mixture of an oriented sinusoid, a checkerboard and Gaussian noise,
/// mapped into the unit range.
pub fn texture(rng: &mut Rng, channels: usize, size: usize) -> Result<ImageTensor> {
    if size < 2 || size % 2 != 0 {
        bail!(Argument, "texture size must be even and >= 2, got {}", size);
    }
    let freq = rng.uniform_in(1.0, size as f64 / 4.0);
    let angle = rng.uniform_in(0.0, PI);
    let (fx, fy) = (freq * libm::cos(angle) / size as f64, freq * libm::sin(angle) / size as f64);
    let period = [2usize, 4, 8][rng.below(3)].min(size);
    let w_sin = rng.uniform_in(0.1, 0.35);
    let w_chk = rng.uniform_in(0.05, 0.25);
    let noise = rng.uniform_in(0.0, 0.06);
    let mut data = Vec::with_capacity(channels * size * size);
    for _ in 0..channels {
        let phase = rng.uniform_in(0.0, 2.0 * PI);
        let base = rng.uniform_in(0.35, 0.65);
        let tint = rng.uniform_in(0.6, 1.0);
        for y in 0..size {
            for x in 0..size {
                let s = libm::sin(2.0 * PI * (fx * x as f64 + fy * y as f64) + phase);
                let c = if (x / period + y / period) % 2 == 0 { 1.0 } else { -1.0 };
                let v = base + tint * (w_sin * s + w_chk * c) + noise * rng.normal();
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageTensor::from_vec([channels, size, size], data, ValueRange::Unit)
}

pub fn texture_set(seed: u64, n: usize, channels: usize, size: usize) -> Result<Vec<ImageTensor>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| texture(&mut rng, channels, size)).collect()
}

/// Uniform random image in the given range.
pub fn random_image(rng: &mut Rng, shape: [usize; 3], range: ValueRange) -> Result<ImageTensor> {
    let (lo, hi) = range.bounds();
    ImageTensor::new(rng.uniform_tensor(&shape, lo as f64, hi as f64), range)
}

/// A labelled paired set where class `k` has reconstruction noise of
/// standard deviation `scales[k]`, added to images kept away from the
/// range limits so clamping stays rare.
pub struct PlantedSet {
    pub pairs: Vec<(ImageTensor, ImageTensor)>,
    pub labels: Vec<usize>,
}

pub fn planted_noise_set(rng: &mut Rng, classes: &[(usize, f64)], per_class: usize, shape: [usize; 3]) -> Result<PlantedSet> {
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for &(class, sigma) in classes {
        for _ in 0..per_class {
            let x: Tensor<f32> = rng.uniform_tensor(&shape, 0.3, 0.7);
            let n: Tensor<f32> = rng.normal_tensor(&shape);
            let noisy = x.zip_map(&n, |v, e| v + sigma as f32 * e)?;
            let x = ImageTensor::new(x, ValueRange::Unit)?;
            let xhat = ImageTensor::clamped(noisy, ValueRange::Unit)?;
            pairs.push((x, xhat));
            labels.push(class);
        }
    }
    Ok(PlantedSet { pairs, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_valid_and_varied() {
        let set = texture_set(1, 4, 3, 32).unwrap();
        assert_eq!(set[0].shape(), [3, 32, 32]);
        assert_ne!(set[0], set[1]);
        assert_eq!(set, texture_set(1, 4, 3, 32).unwrap());
        assert!(texture(&mut Rng::new(0), 1, 7).is_err());
    }
}
