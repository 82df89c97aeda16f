//! A small denoising diffusion model over fused latents: linear noise
//! schedule, a convolutional U-shaped noise predictor with sinusoidal
//! timestep embedding, and ancestral sampling.

use crate::error::{bail, Error, Result};
use crate::favae::FaVaeModel;
use crate::fusion::{decode_fused, FusedLatent, Standardizer};
use crate::image::ImageTensor;
use crate::nn::{AdamConfig, AdamState, Bound, Conv2d, Graph, GroupNorm, Linear, NodeId, Padding, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            bail!(Config, "diffusion needs at least 2 steps, got {}", steps);
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            bail!(Config, "betas must satisfy 0 < start <= end < 1, got {} and {}", beta_start, beta_end);
        }
        let betas: Vec<f64> = (0..steps).map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64).collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) eps`.
    pub fn q_sample(&self, z0: &Tensor<f32>, t: usize, eps: &Tensor<f32>) -> Result<Tensor<f32>> {
        let ab = self.alpha_bars[t];
        let (a, b) = (libm::sqrt(ab) as f32, libm::sqrt(1.0 - ab) as f32);
        z0.zip_map(eps, |z, e| a * z + b * e)
    }

    /// Variance of `q(z_{t-1} | z_t, z_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub width: usize,
    pub time_dim: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { timesteps: 200, beta_start: 1e-4, beta_end: 0.02, width: 32, time_dim: 32 }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Sinusoidal embedding of integer timesteps, `(N, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half.max(1) as f64);
            let a = t as f64 * freq;
            out.push(if i < half { libm::sin(a) } else { libm::cos(a) } as f32);
        }
    }
    Tensor::from_vec(&[ts.len(), dim], out)
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv2d,
    norm: GroupNorm,
    temb: Linear,
}

impl Stage {
    fn new(ps: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, stride: usize, time: usize, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, cout, 3, stride, Padding::Same, rng),
            norm: GroupNorm::new(ps, &format!("{name}.norm"), cout),
            temb: Linear::new(ps, &format!("{name}.temb"), time, cout, rng),
        }
    }

    fn forward(&self, g: &mut Graph<f32>, p: &Bound<'_, f32>, x: NodeId, emb: NodeId) -> Result<NodeId> {
        let h = self.conv.forward(g, p, x)?;
        let e = self.temb.forward(g, p, emb)?;
        let h = g.add_vec_bcast(h, e)?;
        let h = self.norm.forward(g, p, h)?;
        Ok(g.swish(h))
    }
}

/// Noise predictor: input stage, stride-2 stage, upsampling stage and a
/// skip-merging stage, each conditioned on the timestep embedding, then a
/// small-gain output conv.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DiffusionConfig,
    pub channels: usize,
    pub params: ParamStore<f32>,
    time_in: Linear,
    stages: [Stage; 4],
    out: Conv2d,
}

const OUT_GAIN: f64 = 0.1;

impl Denoiser {
    pub fn new(config: DiffusionConfig, channels: usize, seed: u64) -> Result<Self> {
        if config.width == 0 || config.time_dim < 2 || channels == 0 {
            bail!(Config, "denoiser width, time embedding size and channels must be positive");
        }
        let mut rng = Rng::new(seed);
        let mut ps = ParamStore::new();
        let (w, td) = (config.width, config.time_dim);
        let time_in = Linear::new(&mut ps, "time_in", td, td, &mut rng);
        let stages = [
            Stage::new(&mut ps, "in", channels, w, 1, td, &mut rng),
            Stage::new(&mut ps, "down", w, 2 * w, 2, td, &mut rng),
            Stage::new(&mut ps, "up", 2 * w, w, 1, td, &mut rng),
            Stage::new(&mut ps, "merge", 2 * w, w, 1, td, &mut rng),
        ];
        let out = Conv2d::with_gain(&mut ps, "out", w, channels, 3, OUT_GAIN, &mut rng);
        Ok(Self { config, channels, params: ps, time_in, stages, out })
    }

    /// Predicted noise for `z: (N, C, h, w)` at timesteps `ts`.
    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound<'_, f32>, z: NodeId, ts: &[usize]) -> Result<NodeId> {
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.channels || s[0] != ts.len() {
            bail!(Dimension, "denoiser expects ({}, {}, h, w), got {:?}", ts.len(), self.channels, s);
        }
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            bail!(Dimension, "denoiser needs an even latent grid, got {}x{}", s[2], s[3]);
        }
        let e = g.input(timestep_embedding(ts, self.config.time_dim));
        let e = self.time_in.forward(g, p, e)?;
        let e = g.swish(e);
        let h0 = self.stages[0].forward(g, p, z, e)?;
        let h1 = self.stages[1].forward(g, p, h0, e)?;
        let u = g.upsample2x(h1)?;
        let h2 = self.stages[2].forward(g, p, u, e)?;
        let cat = g.concat_channels(h2, h0)?;
        let h3 = self.stages[3].forward(g, p, cat, e)?;
        self.out.forward(g, p, h3)
    }

    pub fn predict(&self, z: &Tensor<f32>, ts: &[usize]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = Bound::frozen(&self.params, 0);
        let zi = g.input(z.clone());
        let out = self.forward(&mut g, &p, zi, ts)?;
        Ok(g.value(out).clone())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.iter().map(|(n, t)| (format!("diffusion.{n}"), t.clone())).collect()
    }

    pub fn load_named(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let full = format!("diffusion.{}", self.params.name(id));
            let Some((_, t)) = tensors.iter().find(|(n, _)| *n == full) else {
                bail!(Data, "checkpoint is missing tensor {}", full);
            };
            if t.shape() != self.params.get(id).shape() {
                bail!(Data, "tensor {} has shape {:?}, model expects {:?}", full, t.shape(), self.params.get(id).shape());
            }
            *self.params.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 16, lr: 1e-3, seed: 0 }
    }
}

/// Random timesteps and noise for a batch of clean latents.
fn noisy_batch(schedule: &NoiseSchedule, z0: &Tensor<f32>, rng: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>, Vec<usize>)> {
    let n = z0.shape()[0];
    let ts: Vec<usize> = (0..n).map(|_| rng.below(schedule.len())).collect();
    let eps: Tensor<f32> = rng.normal_tensor(z0.shape());
    let per = z0.len() / n;
    let mut zt = Vec::with_capacity(z0.len());
    for (i, &t) in ts.iter().enumerate() {
        let a = Tensor::from_vec(&[per], z0.data()[i * per..(i + 1) * per].to_vec());
        let e = Tensor::from_vec(&[per], eps.data()[i * per..(i + 1) * per].to_vec());
        zt.extend(schedule.q_sample(&a, t, &e)?.into_vec());
    }
    Ok((Tensor::from_vec(z0.shape(), zt), eps, ts))
}

/// Mean squared noise-prediction error on one random batch, without training.
pub fn eval_loss(denoiser: &Denoiser, schedule: &NoiseSchedule, latents: &[FusedLatent], seed: u64) -> Result<f64> {
    let z0 = Tensor::stack(&latents.iter().map(|l| l.data.clone()).collect::<Vec<_>>())?;
    let (zt, eps, ts) = noisy_batch(schedule, &z0, &mut Rng::new(seed))?;
    let pred = denoiser.predict(&zt, &ts)?;
    let d: f64 = pred.data().iter().zip(eps.data()).map(|(&a, &b)| ((a - b) as f64) * ((a - b) as f64)).sum();
    Ok(d / pred.len() as f64)
}

/// Train the noise predictor on standardized latents. Returns the model
/// and the per-step loss.
pub fn diffusion_train(latents: &[FusedLatent], config: DiffusionConfig, tc: DiffusionTrainConfig) -> Result<(Denoiser, Vec<f64>)> {
    let Some(first) = latents.first() else {
        bail!(Data, "no latents to train on");
    };
    if tc.batch == 0 || !(tc.lr > 0.0) {
        bail!(Config, "batch and learning rate must be positive");
    }
    let schedule = config.schedule()?;
    let mut rng = Rng::new(tc.seed);
    let mut denoiser = Denoiser::new(config, first.data.shape()[0], rng.next_u64())?;
    let mut adam = AdamState::new(&denoiser.params, AdamConfig { lr: tc.lr, ..AdamConfig::default() });
    let mut losses = Vec::with_capacity(tc.steps);
    let all: Vec<Tensor<f32>> = latents.iter().map(|l| l.data.clone()).collect();
    for step in 0..tc.steps {
        let idx: Vec<usize> = (0..tc.batch).map(|_| rng.below(all.len())).collect();
        let z0 = Tensor::stack(&idx.iter().map(|&i| all[i].clone()).collect::<Vec<_>>())?;
        let (zt, eps, ts) = noisy_batch(&schedule, &z0, &mut rng)?;
        let mut g = Graph::new();
        let grads = {
            let p = Bound::trainable(&denoiser.params, 0);
            let zi = g.input(zt);
            let pred = denoiser.forward(&mut g, &p, zi, &ts)?;
            let target = g.input(eps);
            let loss = g.mse(pred, target)?;
            let v = g.scalar(loss);
            if !v.is_finite() {
                return Err(Error::NonFinite { step, what: String::from("diffusion loss") });
            }
            losses.push(v as f64);
            g.backward(loss).for_store(0, &denoiser.params)
        };
        drop(g);
        adam.step(&mut denoiser.params, &grads)?;
    }
    Ok((denoiser, losses))
}

/// Ancestral sampling of `n` standardized latents of shape `(C, h, w)`.
pub fn diffusion_sample(denoiser: &Denoiser, n: usize, grid: (usize, usize), split_index: usize, seed: u64) -> Result<Vec<FusedLatent>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let schedule = denoiser.config.schedule()?;
    let mut rng = Rng::new(seed);
    let shape = [n, denoiser.channels, grid.0, grid.1];
    let mut z: Tensor<f32> = rng.normal_tensor(&shape);
    for t in (0..schedule.len()).rev() {
        let eps = denoiser.predict(&z, &alloc::vec![t; n])?;
        let (a, ab, b) = (schedule.alphas[t], schedule.alpha_bars[t], schedule.betas[t]);
        let c1 = (1.0 / libm::sqrt(a)) as f32;
        let c2 = (b / libm::sqrt(1.0 - ab)) as f32;
        let mut next = z.zip_map(&eps, |zv, ev| c1 * (zv - c2 * ev))?;
        if t > 0 {
            let sigma = libm::sqrt(schedule.posterior_variance(t)) as f32;
            let noise: Tensor<f32> = rng.normal_tensor(&shape);
            next = next.zip_map(&noise, |m, e| m + sigma * e)?;
        }
        if !next.all_finite() {
            return Err(Error::NonFinite { step: t, what: String::from("diffusion sample") });
        }
        z = next;
    }
    Ok((0..n).map(|i| FusedLatent { data: z.index0(i), split_index }).collect())
}

/// Sample fused latents and decode them into images.
pub fn generate_images(denoiser: &Denoiser, model: &FaVaeModel, standardizer: &Standardizer, n: usize, grid: (usize, usize), seed: u64) -> Result<Vec<ImageTensor>> {
    let split = model.config.low.latent_channels;
    if split + model.config.high.latent_channels != denoiser.channels {
        bail!(Config, "denoiser works on {} channels, model latents have {} + {}", denoiser.channels, split, model.config.high.latent_channels);
    }
    let z = diffusion_sample(denoiser, n, grid, split, seed)?;
    decode_fused(model, standardizer, &z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_properties() {
        let s = DiffusionConfig::default().schedule().unwrap();
        assert_eq!(s.len(), 200);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!((s.alpha_bars[0] - 0.9999).abs() < 1e-12);
        let mut rng = Rng::new(1);
        let z0: Tensor<f32> = rng.normal_tensor(&[4, 8, 8]);
        let eps: Tensor<f32> = rng.normal_tensor(&[4, 8, 8]);
        let zt = s.q_sample(&z0, 0, &eps).unwrap();
        let rms = (zt.zip_map(&z0, |a, b| (a - b) * (a - b)).unwrap().mean() as f64).sqrt();
        assert!(rms < 0.02, "{rms}");
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
    }

    #[test]
    fn forward_process_reaches_noise() {
        let s = DiffusionConfig::default().schedule().unwrap();
        let mut rng = Rng::new(2);
        // standardized but far from Gaussian: every value is +1 or -1
        let z0 = rng.normal_tensor::<f32>(&[2, 64, 64]).map(|v| if v > 0.0 { 1.0 } else { -1.0 });
        let eps = rng.normal_tensor::<f32>(&[2, 64, 64]);
        let zt = s.q_sample(&z0, s.len() - 1, &eps).unwrap();
        for ch in 0..2 {
            let v: Vec<f64> = zt.data()[ch * 4096..(ch + 1) * 4096].iter().map(|&x| x as f64).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
            assert!(m.abs() < 0.1 && (sd - 1.0).abs() < 0.1, "{m} {sd}");
        }
    }

    #[test]
    fn embedding_and_shapes() {
        let e = timestep_embedding(&[0, 5], 8);
        assert_eq!(e.shape(), &[2, 8]);
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_eq!(&e.data()[4..8], &[1.0; 4]);
        let d = Denoiser::new(DiffusionConfig { width: 8, time_dim: 8, ..Default::default() }, 4, 0).unwrap();
        let z = Tensor::zeros(&[3, 4, 4, 4]);
        assert_eq!(d.predict(&z, &[0, 1, 2]).unwrap().shape(), z.shape());
        assert!(d.predict(&Tensor::zeros(&[1, 4, 3, 3]), &[0]).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = Denoiser::new(DiffusionConfig { timesteps: 20, width: 8, time_dim: 8, ..Default::default() }, 4, 0).unwrap();
        let a = diffusion_sample(&d, 2, (2, 2), 2, 9).unwrap();
        assert_eq!(a, diffusion_sample(&d, 2, (2, 2), 2, 9).unwrap());
        assert_ne!(a, diffusion_sample(&d, 2, (2, 2), 2, 10).unwrap());
        assert!(a.iter().all(|z| z.data.all_finite()));
    }
}
