//! Pluggable feature providers for the perceptual proxy, the
//! vision-feature alignment target and the feature Fréchet distance.
//!
//! The built-in provider is a frozen, seeded stack of strided convolutions.
//! Externally computed features (for example from a pretrained vision
//! model) plug in through [`ExternalFeatures`].

use crate::error::{bail, Result};
use crate::image::ImageTensor;
use crate::nn::{Bound, Conv2d, Graph, NodeId, Padding, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::vec::Vec;

pub const DEFAULT_FEATURE_SEED: u64 = 0x5EED_F00D;
pub const STACK_WIDTHS: [usize; 3] = [8, 16, 32];
const FEATURE_TAG: usize = 900;
const UNIT_EPS: f64 = 1e-10;

pub trait FeatureProvider {
    /// Per-stage feature maps `(C_s, h_s, w_s)` for image number `index`.
    fn stages(&self, image: &ImageTensor, index: usize) -> Result<Vec<Tensor<f32>>>;
}

/// Three stride-2 3x3 convolutions with leaky ReLU, weights fixed by seed.
#[derive(Clone, Debug)]
pub struct RandomFeatureStack {
    params: ParamStore<f32>,
    convs: Vec<Conv2d>,
    in_channels: usize,
}

impl RandomFeatureStack {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let mut cin = in_channels;
        let convs = STACK_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(&mut params, &alloc::format!("features.{i}"), cin, w, 3, 2, Padding::Same, &mut rng);
                cin = w;
                c
            })
            .collect();
        Self { params, convs, in_channels }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        STACK_WIDTHS[STACK_WIDTHS.len() - 1]
    }

    /// Forward inside a graph with frozen weights; gradients reach `x`.
    pub fn forward(&self, g: &mut Graph<f32>, x: NodeId) -> Result<Vec<NodeId>> {
        let c = g.shape(x)[1];
        if c != self.in_channels {
            bail!(Data, "feature stack expects {} channels, got {}", self.in_channels, c);
        }
        let p = Bound::frozen(&self.params, FEATURE_TAG);
        let mut h = x;
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = conv.forward(g, &p, h)?;
            h = g.leaky_relu(h, 0.2);
            out.push(h);
        }
        Ok(out)
    }

    /// Stage outputs for a batch `(N, C, H, W)`, without gradients.
    pub fn batch_stages(&self, x: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let ids = self.forward(&mut g, xi)?;
        Ok(ids.into_iter().map(|i| g.value(i).clone()).collect())
    }
}

impl FeatureProvider for RandomFeatureStack {
    fn stages(&self, image: &ImageTensor, _index: usize) -> Result<Vec<Tensor<f32>>> {
        let [c, h, w] = image.shape();
        let x = image.tensor().clone().reshape(&[1, c, h, w])?;
        Ok(self.batch_stages(&x)?.into_iter().map(|t| t.index0(0)).collect())
    }
}

/// Precomputed features, one list of stage maps per image index.
#[derive(Clone, Debug, Default)]
pub struct ExternalFeatures {
    pub per_image: Vec<Vec<Tensor<f32>>>,
}

impl FeatureProvider for ExternalFeatures {
    fn stages(&self, _image: &ImageTensor, index: usize) -> Result<Vec<Tensor<f32>>> {
        match self.per_image.get(index) {
            Some(s) => Ok(s.clone()),
            None => bail!(Data, "no external features for image {} ({} available)", index, self.per_image.len()),
        }
    }
}

/// Global average pool of every stage, concatenated into one vector.
pub fn pooled(stages: &[Tensor<f32>]) -> Vec<f64> {
    let mut v = Vec::new();
    for s in stages {
        let c = s.shape()[0];
        let per = s.len() / c.max(1);
        for ch in 0..c {
            let sum: f64 = s.data()[ch * per..(ch + 1) * per].iter().map(|&x| x as f64).sum();
            v.push(sum / per.max(1) as f64);
        }
    }
    v
}

/// Mean over positions of the squared distance between channel-unit-normalized
/// features, averaged over stages. Maps are `(C, h, w)`.
pub fn perceptual_distance(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        bail!(Data, "feature stage count mismatch: {} vs {}", a.len(), b.len());
    }
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        if fa.shape() != fb.shape() || fa.rank() != 3 {
            bail!(Data, "feature shape mismatch: {:?} vs {:?}", fa.shape(), fb.shape());
        }
        let (c, p) = (fa.shape()[0], fa.shape()[1] * fa.shape()[2]);
        let mut acc = 0.0;
        for i in 0..p {
            let na = libm::sqrt((0..c).map(|ch| sq(fa.data()[ch * p + i] as f64)).sum::<f64>() + UNIT_EPS);
            let nb = libm::sqrt((0..c).map(|ch| sq(fb.data()[ch * p + i] as f64)).sum::<f64>() + UNIT_EPS);
            acc += (0..c).map(|ch| sq(fa.data()[ch * p + i] as f64 / na - fb.data()[ch * p + i] as f64 / nb)).sum::<f64>();
        }
        total += acc / p as f64;
    }
    Ok(total / a.len() as f64)
}

fn sq(v: f64) -> f64 {
    v * v
}

/// Divide each position's channel vector by its norm.
pub fn unit_normalize(g: &mut Graph<f32>, x: NodeId) -> Result<NodeId> {
    let sq = g.square(x);
    let s = g.sum_channels(sq)?;
    let s = g.add_scalar(s, UNIT_EPS);
    let norm = g.sqrt(s);
    let ones = g.input(Tensor::full(g.shape(norm), 1.0));
    let inv = g.div(ones, norm)?;
    g.mul_bcast_channels(x, inv)
}

/// Differentiable perceptual proxy between batches `x` and `xhat`.
pub fn perceptual_proxy(g: &mut Graph<f32>, stack: &RandomFeatureStack, x: NodeId, xhat: NodeId) -> Result<NodeId> {
    if g.shape(x) != g.shape(xhat) {
        bail!(Dimension, "perceptual proxy: shapes {:?} vs {:?}", g.shape(x), g.shape(xhat));
    }
    let fx = stack.forward(g, x)?;
    let fy = stack.forward(g, xhat)?;
    let mut acc: Option<NodeId> = None;
    for (a, b) in fx.into_iter().zip(fy) {
        let a = g.detach(a);
        let ua = unit_normalize(g, a)?;
        let ub = unit_normalize(g, b)?;
        let d = g.sub(ua, ub)?;
        let d2 = g.square(d);
        let per_pos = g.sum_channels(d2)?;
        let m = g.mean(per_pos);
        acc = Some(match acc {
            None => m,
            Some(prev) => g.add(prev, m)?,
        });
    }
    let total = acc.expect("stack has stages");
    Ok(g.scale(total, 1.0 / STACK_WIDTHS.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ValueRange;

    #[test]
    fn graph_and_scalar_proxy_agree() {
        let mut rng = Rng::new(3);
        let stack = RandomFeatureStack::new(3, DEFAULT_FEATURE_SEED);
        let x = rng.uniform_tensor::<f32>(&[1, 3, 16, 16], 0.0, 1.0);
        let y = rng.uniform_tensor::<f32>(&[1, 3, 16, 16], 0.0, 1.0);
        let mut g = Graph::new();
        let (xi, yi) = (g.input(x.clone()), g.input(y.clone()));
        let p = perceptual_proxy(&mut g, &stack, xi, yi).unwrap();
        let same = perceptual_proxy(&mut g, &stack, xi, xi).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let ix = ImageTensor::new(x.index0(0), ValueRange::Unit).unwrap();
        let iy = ImageTensor::new(y.index0(0), ValueRange::Unit).unwrap();
        let d = perceptual_distance(&stack.stages(&ix, 0).unwrap(), &stack.stages(&iy, 0).unwrap()).unwrap();
        assert!((g.scalar(p) as f64 - d).abs() < 1e-4 * d.max(1e-3), "{} vs {}", g.scalar(p), d);
        assert!(d > 0.0);
    }

    #[test]
    fn contrast_change_is_detected() {
        let mut rng = Rng::new(4);
        let stack = RandomFeatureStack::new(3, DEFAULT_FEATURE_SEED);
        let x = ImageTensor::new(rng.uniform_tensor(&[3, 16, 16], 0.0, 1.0), ValueRange::Unit).unwrap();
        let doubled = ImageTensor::clamped(x.tensor().map(|v| 0.5 + 2.0 * (v - 0.5)), ValueRange::Unit).unwrap();
        let fx = stack.stages(&x, 0).unwrap();
        assert_eq!(perceptual_distance(&fx, &fx).unwrap(), 0.0);
        assert!(perceptual_distance(&fx, &stack.stages(&doubled, 0).unwrap()).unwrap() > 0.0);
    }

    #[test]
    fn external_features_and_errors() {
        let ext = ExternalFeatures { per_image: alloc::vec![alloc::vec![Tensor::full(&[2, 1, 1], 1.0)]] };
        let img = ImageTensor::new(Tensor::zeros(&[1, 2, 2]), ValueRange::Unit).unwrap();
        assert_eq!(pooled(&ext.stages(&img, 0).unwrap()), alloc::vec![1.0, 1.0]);
        assert!(ext.stages(&img, 1).is_err());
        let a = alloc::vec![Tensor::zeros(&[2, 1, 1])];
        let b = alloc::vec![Tensor::zeros(&[3, 1, 1])];
        assert!(matches!(perceptual_distance(&a, &b), Err(crate::Error::Data(_))));
    }
}
