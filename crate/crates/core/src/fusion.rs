//! Channel concatenation of the low and high latents, and the per-channel
//! standardization applied before diffusion.

use crate::error::{bail, Result};
use crate::favae::{FaVaeModel, Layout};
use crate::image::ImageTensor;
use crate::tensor::Tensor;
use alloc::vec::Vec;

/// `[z_L, z_H]` stacked along channels; `(c_L + c_H, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedLatent {
    pub data: Tensor<f32>,
    pub split_index: usize,
}

pub fn fuse(z_low: &Tensor<f32>, z_high: &Tensor<f32>) -> Result<FusedLatent> {
    if z_low.rank() != 3 || z_high.rank() != 3 || z_low.shape()[1..] != z_high.shape()[1..] {
        bail!(Dimension, "latents must be (c, h, w) on the same grid, got {:?} and {:?}", z_low.shape(), z_high.shape());
    }
    let (cl, ch) = (z_low.shape()[0], z_high.shape()[0]);
    let mut data = Vec::with_capacity(z_low.len() + z_high.len());
    data.extend_from_slice(z_low.data());
    data.extend_from_slice(z_high.data());
    Ok(FusedLatent { data: Tensor::from_vec(&[cl + ch, z_low.shape()[1], z_low.shape()[2]], data), split_index: cl })
}

impl FusedLatent {
    pub fn split(&self) -> (Tensor<f32>, Tensor<f32>) {
        let s = self.data.shape();
        let cut = self.split_index * s[1] * s[2];
        let d = self.data.data();
        (Tensor::from_vec(&[self.split_index, s[1], s[2]], d[..cut].to_vec()), Tensor::from_vec(&[s[0] - self.split_index, s[1], s[2]], d[cut..].to_vec()))
    }
}

/// Per-channel affine map to zero mean and unit standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

const MIN_STD: f64 = 1e-6;

impl Standardizer {
    /// Fit over every position of every `(C, h, w)` latent.
    pub fn fit(latents: &[Tensor<f32>]) -> Result<Self> {
        let Some(first) = latents.first() else {
            bail!(Data, "cannot standardize an empty latent set");
        };
        let c = first.shape()[0];
        if latents.iter().any(|z| z.shape() != first.shape()) {
            bail!(Dimension, "latents differ in shape");
        }
        let per = first.len() / c;
        let count = (per * latents.len()) as f64;
        let mut mean = alloc::vec![0.0f64; c];
        let mut sq = alloc::vec![0.0f64; c];
        for z in latents {
            for ch in 0..c {
                for &v in &z.data()[ch * per..(ch + 1) * per] {
                    mean[ch] += v as f64;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for z in latents {
            for ch in 0..c {
                for &v in &z.data()[ch * per..(ch + 1) * per] {
                    let d = v as f64 - mean[ch];
                    sq[ch] += d * d;
                }
            }
        }
        let std = sq.iter().map(|s| libm::sqrt(s / count).max(MIN_STD) as f32).collect();
        Ok(Self { mean: mean.into_iter().map(|m| m as f32).collect(), std })
    }

    fn map(&self, z: &Tensor<f32>, f: impl Fn(f32, f32, f32) -> f32) -> Result<Tensor<f32>> {
        let c = self.mean.len();
        if z.rank() != 3 || z.shape()[0] != c {
            bail!(Dimension, "standardizer has {} channels, latent is {:?}", c, z.shape());
        }
        let per = z.len() / c;
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i / per;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        Ok(out)
    }

    pub fn apply(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.map(z, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.map(z, |v, m, s| v * s + m)
    }
}

/// Standardized fused latents of a dataset and the map that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    pub latents: Vec<FusedLatent>,
    pub standardizer: Standardizer,
}

/// Posterior means of both branches, fused and standardized.
pub fn extract_latents(model: &FaVaeModel, dataset: &[ImageTensor]) -> Result<LatentSet> {
    if model.config.layout != Layout::Decoupled {
        bail!(Config, "latent fusion needs a two-branch model");
    }
    if dataset.is_empty() {
        bail!(Data, "no images to encode");
    }
    let z = model.encode_latents(dataset)?;
    let fused: Vec<FusedLatent> = (0..dataset.len()).map(|i| fuse(&z[0].index0(i), &z[1].index0(i))).collect::<Result<_>>()?;
    let raw: Vec<Tensor<f32>> = fused.iter().map(|f| f.data.clone()).collect();
    let standardizer = Standardizer::fit(&raw)?;
    let latents = fused
        .into_iter()
        .map(|f| Ok(FusedLatent { data: standardizer.apply(&f.data)?, split_index: f.split_index }))
        .collect::<Result<_>>()?;
    Ok(LatentSet { latents, standardizer })
}

/// De-standardize, split and decode fused latents into images.
pub fn decode_fused(model: &FaVaeModel, standardizer: &Standardizer, latents: &[FusedLatent]) -> Result<Vec<ImageTensor>> {
    if latents.is_empty() {
        return Ok(Vec::new());
    }
    let (mut lows, mut highs) = (Vec::new(), Vec::new());
    for f in latents {
        let raw = FusedLatent { data: standardizer.invert(&f.data)?, split_index: f.split_index };
        let (a, b) = raw.split();
        lows.push(a);
        highs.push(b);
    }
    model.decode_latents(&[Tensor::stack(&lows)?, Tensor::stack(&highs)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::favae::FaVaeConfig;
    use crate::rng::Rng;
    use crate::synth::texture_set;

    #[test]
    fn fuse_split_exact() {
        let mut rng = Rng::new(1);
        let a = rng.normal_tensor::<f32>(&[8, 4, 4]);
        let b = rng.normal_tensor::<f32>(&[8, 4, 4]);
        let f = fuse(&a, &b).unwrap();
        assert_eq!(f.data.shape(), &[16, 4, 4]);
        assert_eq!(f.split(), (a.clone(), b));
        let err = fuse(&a, &Tensor::zeros(&[8, 2, 4])).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[8, 4, 4]") && msg.contains("[8, 2, 4]"), "{msg}");
    }

    #[test]
    fn standardized_statistics() {
        let model = FaVaeModel::new(FaVaeConfig::tiny(3), 2).unwrap();
        let data = texture_set(4, 20, 3, 16).unwrap();
        let set = extract_latents(&model, &data).unwrap();
        assert_eq!(set.latents.len(), 20);
        let c = set.latents[0].data.shape()[0];
        let per = set.latents[0].data.len() / c;
        for ch in 0..c {
            let vals: Vec<f64> = set.latents.iter().flat_map(|z| z.data.data()[ch * per..(ch + 1) * per].iter().map(|&v| v as f64)).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let s = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(m.abs() < 0.05 && (s - 1.0).abs() < 0.05, "channel {ch}: {m} {s}");
        }
        assert_eq!(set, extract_latents(&model, &data).unwrap());
        let back = decode_fused(&model, &set.standardizer, &set.latents).unwrap();
        let direct = model.reconstruct_batch(&data).unwrap();
        for (a, b) in back.iter().zip(&direct) {
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-4));
        }
        assert!(extract_latents(&model, &[]).is_err());
    }
}
