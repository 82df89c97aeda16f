//! Frequency-aware VAE: a low-frequency branch over the `ll` subband and a
//! high-frequency branch over the packed detail subbands, each with its own
//! parameters, optimizer and discriminator. The image is rebuilt from the
//! two decoded parts with the inverse wavelet transform.
//!
//! The same machinery also builds the coupled baseline, a single branch
//! over all four subbands stacked along channels.

mod config;
mod losses;
mod net;
mod train;

pub use config::{BranchConfig, FaVaeConfig, Layout, TrainConfig, VfConfig};
pub use losses::{gan_losses, vf_alignment_loss, BranchKind, LossBreakdown, LossWeights};
pub use net::{Decoder, Discriminator, Encoder};
pub use train::{train, GradMask, NoObserver, TrainObserver, Trainer};

use crate::error::{bail, Result};
use crate::features::RandomFeatureStack;
use crate::image::ImageTensor;
use crate::nn::{Bound, Conv2d, DiagGaussianLatent, Graph, NodeId, Padding, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::wavelet::{denormalize_subbands, dwt2_haar, from_parts, idwt2_haar, normalize_with, pack_high, NormParams};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub(crate) const GEN_TAG: usize = 0;
pub(crate) const DISC_TAG: usize = 1;
const INFER_CHUNK: usize = 16;

/// One encoder/decoder pair with its discriminator and optional
/// feature projection.
#[derive(Clone, Debug)]
pub struct Branch {
    pub kind: BranchKind,
    pub config: BranchConfig,
    /// Encoder, decoder and projection weights.
    pub params: ParamStore<f32>,
    pub disc_params: ParamStore<f32>,
    encoder: Encoder,
    decoder: Decoder,
    vf_proj: Option<Conv2d>,
    disc: Discriminator,
}

impl Branch {
    pub fn new(kind: BranchKind, config: BranchConfig, feature_channels: usize, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, "enc", &config, rng);
        let decoder = Decoder::new(&mut params, "dec", &config, rng);
        let vf_proj = (config.lambda_vf > 0.0).then(|| Conv2d::new(&mut params, "vf_proj", feature_channels, config.latent_channels, 1, 1, Padding::Same, rng));
        let mut disc_params = ParamStore::new();
        let disc = Discriminator::new(&mut disc_params, "disc", config.in_channels, config.disc_width, rng);
        Self { kind, config, params, disc_params, encoder, decoder, vf_proj, disc }
    }

    /// Parameters of the encoder, decoder and projection (not the discriminator).
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.config.factor();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            bail!(Dimension, "{} branch expects (N, {}, h, w), got {:?}", self.kind.name(), self.config.in_channels, shape);
        }
        if shape[2] % f != 0 || shape[3] % f != 0 {
            bail!(Dimension, "{} branch input {}x{} is not divisible by {}", self.kind.name(), shape[2], shape[3], f);
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph<f32>, p: &Bound<'_, f32>, x: NodeId) -> Result<DiagGaussianLatent<f32>> {
        self.check_input(g.shape(x))?;
        let m = self.encoder.forward(g, p, x)?;
        DiagGaussianLatent::from_moments(g, m, self.config.latent_channels)
    }

    pub fn decode(&self, g: &mut Graph<f32>, p: &Bound<'_, f32>, z: NodeId) -> Result<NodeId> {
        let s = g.shape(z);
        if s.len() != 4 || s[1] != self.config.latent_channels {
            bail!(Dimension, "{} branch decoder expects (N, {}, h, w), got {:?}", self.kind.name(), self.config.latent_channels, s);
        }
        self.decoder.forward(g, p, z)
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub(crate) fn project_features(&self, g: &mut Graph<f32>, p: &Bound<'_, f32>, f: NodeId) -> Result<Option<NodeId>> {
        match &self.vf_proj {
            Some(c) => Ok(Some(c.forward(g, p, f)?)),
            None => Ok(None),
        }
    }

    /// Posterior means for a batch `(N, C', h, w)`.
    pub fn encode_mean(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = Bound::frozen(&self.params, GEN_TAG);
        let xi = g.input(x.clone());
        let lat = self.encode(&mut g, &p, xi)?;
        Ok(g.value(lat.mean).clone())
    }

    pub fn decode_tensor(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = Bound::frozen(&self.params, GEN_TAG);
        let zi = g.input(z.clone());
        let out = self.decode(&mut g, &p, zi)?;
        Ok(g.value(out).clone())
    }

    /// Decode of the posterior mean.
    pub fn reconstruct_tensor(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.decode_tensor(&self.encode_mean(x)?)
    }
}

#[derive(Clone, Debug)]
pub struct FaVaeModel {
    pub config: FaVaeConfig,
    pub branches: Vec<Branch>,
    /// Frozen stack behind the perceptual proxy and the default alignment targets.
    pub features: RandomFeatureStack,
    pub norm: NormParams,
}

impl FaVaeModel {
    pub fn new(config: FaVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let fc = config.vf.feature_channels;
        let branches = match config.layout {
            Layout::Decoupled => {
                let mut lr = rng.fork(1);
                let mut hr = rng.fork(2);
                alloc::vec![Branch::new(BranchKind::Low, config.low, fc, &mut lr), Branch::new(BranchKind::High, config.high, fc, &mut hr)]
            }
            Layout::Coupled => alloc::vec![Branch::new(BranchKind::Coupled, config.low, fc, &mut rng.fork(3))],
        };
        Ok(Self {
            features: RandomFeatureStack::new(config.channels, config.feature_seed),
            norm: NormParams::for_scheme(config.norm, config.range),
            config,
            branches,
        })
    }

    pub fn branch(&self, kind: BranchKind) -> Option<&Branch> {
        self.branches.iter().find(|b| b.kind == kind)
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(Branch::param_count).sum()
    }

    /// Latent grid `(h, w)` for images of the given size.
    pub fn latent_grid(&self, height: usize, width: usize) -> (usize, usize) {
        let f = self.config.image_factor();
        (height / f, width / f)
    }

    fn check_image(&self, x: &ImageTensor) -> Result<()> {
        if x.range() != Some(self.config.range) {
            bail!(Data, "model expects {} range images, got {:?}", self.config.range.name(), x.range().map(|r| r.name()));
        }
        if x.channels() != self.config.channels {
            bail!(Dimension, "model expects {} channels, got {}", self.config.channels, x.channels());
        }
        self.config.check_image(x.height(), x.width())
    }

    /// Normalized branch inputs `(C', h, w)` for one image, in branch order.
    pub fn branch_inputs(&self, x: &ImageTensor) -> Result<Vec<Tensor<f32>>> {
        self.check_image(x)?;
        branch_inputs_with(x, self.config.layout, self.norm)
    }

    /// Reconstruction through posterior means.
    pub fn reconstruct(&self, x: &ImageTensor) -> Result<ImageTensor> {
        Ok(self.reconstruct_batch(core::slice::from_ref(x))?.remove(0))
    }

    pub fn reconstruct_batch(&self, xs: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
        let latents = self.encode_latents(xs)?;
        self.decode_latents(&latents)
    }

    /// Posterior means, one batch tensor `(N, c, h, w)` per branch.
    pub fn encode_latents(&self, xs: &[ImageTensor]) -> Result<Vec<Tensor<f32>>> {
        if xs.is_empty() {
            bail!(Data, "no images to encode");
        }
        let inputs: Vec<Vec<Tensor<f32>>> = xs.iter().map(|x| self.branch_inputs(x)).collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(self.branches.len());
        for (k, b) in self.branches.iter().enumerate() {
            let mut parts = Vec::new();
            for chunk in inputs.chunks(INFER_CHUNK) {
                let items: Vec<Tensor<f32>> = chunk.iter().map(|v| v[k].clone()).collect();
                let m = b.encode_mean(&Tensor::stack(&items)?)?;
                parts.extend((0..m.shape()[0]).map(|i| m.index0(i)));
            }
            out.push(Tensor::stack(&parts)?);
        }
        Ok(out)
    }

    /// Decode per-branch latent batches into clamped images.
    pub fn decode_latents(&self, latents: &[Tensor<f32>]) -> Result<Vec<ImageTensor>> {
        if latents.len() != self.branches.len() {
            bail!(Dimension, "expected {} latent tensors, got {}", self.branches.len(), latents.len());
        }
        let n = latents[0].shape()[0];
        if latents.iter().any(|z| z.rank() != 4 || z.shape()[0] != n) {
            bail!(Dimension, "latent batches disagree: {:?}", latents.iter().map(|z| z.shape().to_vec()).collect::<Vec<_>>());
        }
        let mut decoded: Vec<Vec<Tensor<f32>>> = alloc::vec![Vec::with_capacity(n); self.branches.len()];
        for (k, b) in self.branches.iter().enumerate() {
            for start in (0..n).step_by(INFER_CHUNK) {
                let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
                let y = b.decode_tensor(&latents[k].gather_batch(&idx))?;
                decoded[k].extend((0..idx.len()).map(|i| y.index0(i)));
            }
        }
        (0..n)
            .map(|i| {
                let outs: Vec<Tensor<f32>> = decoded.iter().map(|d| d[i].clone()).collect();
                assemble(&outs, self.config.layout, self.norm, self.config.range)
            })
            .collect()
    }

    /// Every parameter as `(name, tensor)`, prefixed by branch name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for b in &self.branches {
            for store in [&b.params, &b.disc_params] {
                for (name, t) in store.iter() {
                    out.push((format!("{}.{}", b.kind.name(), name), t.clone()));
                }
            }
        }
        out
    }

    /// Overwrite parameters from named tensors; every parameter must be
    /// present with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        for b in &mut self.branches {
            let kind = b.kind.name();
            for store in [&mut b.params, &mut b.disc_params] {
                let ids: Vec<_> = store.ids().collect();
                for id in ids {
                    let full = format!("{}.{}", kind, store.name(id));
                    let Some((_, t)) = tensors.iter().find(|(n, _)| *n == full) else {
                        bail!(Data, "checkpoint is missing tensor {}", full);
                    };
                    if t.shape() != store.get(id).shape() {
                        bail!(Data, "tensor {} has shape {:?}, model expects {:?}", full, t.shape(), store.get(id).shape());
                    }
                    *store.get_mut(id) = t.clone();
                }
            }
        }
        Ok(())
    }
}

/// DWT, normalize and split into per-branch inputs.
fn branch_inputs_with(x: &ImageTensor, layout: Layout, norm: NormParams) -> Result<Vec<Tensor<f32>>> {
    let s = normalize_with(&dwt2_haar(x)?, norm)?;
    let high = pack_high(&s);
    Ok(match layout {
        Layout::Decoupled => alloc::vec![s.ll, high],
        Layout::Coupled => {
            let [c, h, w] = s.band_shape();
            let mut data = s.ll.into_vec();
            data.extend_from_slice(high.data());
            alloc::vec![Tensor::from_vec(&[4 * c, h, w], data)]
        }
    })
}

/// Inverse of [`branch_inputs_with`]: denormalize, inverse DWT, clamp.
fn assemble(outs: &[Tensor<f32>], layout: Layout, norm: NormParams, range: crate::image::ValueRange) -> Result<ImageTensor> {
    let (ll, high) = match layout {
        Layout::Decoupled => (outs[0].clone(), outs[1].clone()),
        Layout::Coupled => {
            let (c4, h, w) = (outs[0].shape()[0], outs[0].shape()[1], outs[0].shape()[2]);
            let split = c4 / 4 * h * w;
            let d = outs[0].data();
            (Tensor::from_vec(&[c4 / 4, h, w], d[..split].to_vec()), Tensor::from_vec(&[3 * c4 / 4, h, w], d[split..].to_vec()))
        }
    };
    let s = denormalize_subbands(&from_parts(ll, &high, Some(norm))?)?;
    ImageTensor::clamped(idwt2_haar(&s)?.into_tensor(), range)
}

/// The reconstruction pipeline with the branch networks replaced by
/// `branch(k, input)`, which maps each normalized branch input `(C', h, w)`
/// to an output of the same shape.
pub fn reconstruct_with(model: &FaVaeModel, x: &ImageTensor, mut branch: impl FnMut(usize, &Tensor<f32>) -> Result<Tensor<f32>>) -> Result<ImageTensor> {
    let inputs = model.branch_inputs(x)?;
    let outs = inputs
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let y = branch(k, t)?;
            if y.shape() != t.shape() {
                bail!(Dimension, "branch {} returned {:?} for input {:?}", k, y.shape(), t.shape());
            }
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(&outs, model.config.layout, model.norm, model.config.range)
}

/// A coupled single-branch config with the same losses as `base` and the
/// base width whose generator parameter count is closest to the
/// decoupled model's.
pub fn coupled_config(base: &FaVaeConfig) -> Result<FaVaeConfig> {
    let target = FaVaeModel::new(*base, 0)?.param_count();
    let mut best: Option<(usize, FaVaeConfig)> = None;
    for width in 1..=4 * base.low.base_width.max(base.high.base_width) {
        let mut cfg = *base;
        cfg.layout = Layout::Coupled;
        cfg.low.in_channels = 4 * base.channels;
        cfg.low.latent_channels = base.low.latent_channels + base.high.latent_channels;
        cfg.low.base_width = width;
        cfg.low.disc_width = base.low.disc_width;
        cfg.high = cfg.low;
        let count = FaVaeModel::new(cfg, 0)?.param_count();
        let diff = count.abs_diff(target);
        if best.as_ref().is_none_or(|(d, _)| diff < *d) {
            best = Some((diff, cfg));
        }
    }
    Ok(best.expect("width range is non-empty").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ValueRange;
    use crate::synth::{random_image, texture_set};

    #[test]
    fn latent_shapes() {
        let mut cfg = FaVaeConfig::tiny(3);
        cfg.low.latent_channels = 8;
        cfg.high.latent_channels = 8;
        let m = FaVaeModel::new(cfg, 0).unwrap();
        let mut rng = Rng::new(0);
        let x = rng.uniform_tensor::<f32>(&[1, 3, 32, 32], -0.5, 0.5);
        assert_eq!(m.branches[0].encode_mean(&x).unwrap().shape(), &[1, 8, 8, 8]);
        let xh = rng.uniform_tensor::<f32>(&[1, 9, 32, 32], -0.5, 0.5);
        assert_eq!(m.branches[1].encode_mean(&xh).unwrap().shape(), &[1, 8, 8, 8]);
        assert_eq!(m.branches[1].reconstruct_tensor(&xh).unwrap().shape(), xh.shape());
        let zeros = m.branches[0].decode_tensor(&Tensor::zeros(&[1, 8, 8, 8])).unwrap();
        assert!(zeros.all_finite());
        let bad = rng.uniform_tensor::<f32>(&[1, 3, 30, 30], -0.5, 0.5);
        assert!(matches!(m.branches[0].encode_mean(&bad), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn f16c32_latent_configuration() {
        let cfg = FaVaeConfig::f16c32(3);
        assert_eq!(cfg.image_factor(), 16);
        assert_eq!(cfg.low.latent_channels, 32);
        // 256 px image -> 128 px subbands -> 16x16 latent
        assert_eq!(256 / cfg.image_factor(), 16);
    }

    #[test]
    fn identity_branches_reproduce_the_image() {
        let m = FaVaeModel::new(FaVaeConfig::tiny(3), 1).unwrap();
        let x = random_image(&mut Rng::new(4), [3, 16, 16], ValueRange::Unit).unwrap();
        let y = reconstruct_with(&m, &x, |_, t| Ok(t.clone())).unwrap();
        let err = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-5, "{err}");
        let mc = FaVaeModel::new(coupled_config(&FaVaeConfig::tiny(3)).unwrap(), 1).unwrap();
        let y = reconstruct_with(&mc, &x, |_, t| Ok(t.clone())).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn reconstruct_is_deterministic_and_not_identity() {
        let m = FaVaeModel::new(FaVaeConfig::tiny(3), 2).unwrap();
        let xs = texture_set(3, 2, 3, 16).unwrap();
        let a = m.reconstruct_batch(&xs).unwrap();
        let b = m.reconstruct_batch(&xs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].shape(), xs[0].shape());
        assert!(a[0].data().iter().zip(xs[0].data()).map(|(p, q)| (p - q) * (p - q)).sum::<f32>() > 0.0);
        assert!(a.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn checkpoint_names_round_trip() {
        let a = FaVaeModel::new(FaVaeConfig::tiny(1), 5).unwrap();
        let mut b = FaVaeModel::new(FaVaeConfig::tiny(1), 6).unwrap();
        b.load_named(&a.named_tensors()).unwrap();
        assert_eq!(a.named_tensors(), b.named_tensors());
        let mut short = a.named_tensors();
        short.pop();
        assert!(b.load_named(&short).is_err());
    }

    #[test]
    fn coupled_budget_is_close() {
        let base = FaVaeConfig::tiny(3);
        let c = coupled_config(&base).unwrap();
        let (pa, pb) = (FaVaeModel::new(base, 0).unwrap().param_count(), FaVaeModel::new(c, 0).unwrap().param_count());
        assert!((pa as f64 - pb as f64).abs() / (pa as f64) < 0.1, "{pa} vs {pb}");
        assert_eq!(c.low.in_channels, 12);
    }
}
