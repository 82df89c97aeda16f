use super::graph::{Graph, NodeId};
use crate::error::Result;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Diagonal Gaussian posterior `q(z|x)` inside a graph; `mean` and `logvar`
/// are `(N, D, h, w)`, `logvar` already clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
#[derive(Clone, Debug)]
pub struct DiagGaussianLatent<T: Real = f32> {
    pub mean: NodeId,
    pub logvar: NodeId,
    /// Noise used by the last reparameterization, kept for replay.
    pub eps: Option<Tensor<T>>,
    pub sample: Option<NodeId>,
}

impl<T: Real> DiagGaussianLatent<T> {
    /// Split encoder moments `(N, 2D, h, w)` into mean and clamped log-variance.
    pub fn from_moments(g: &mut Graph<T>, moments: NodeId, latent_channels: usize) -> Result<Self> {
        let mean = g.slice_channels(moments, 0, latent_channels)?;
        let raw = g.slice_channels(moments, latent_channels, latent_channels)?;
        let logvar = g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
        Ok(Self { mean, logvar, eps: None, sample: None })
    }

    pub fn from_parts(g: &mut Graph<T>, mean: NodeId, logvar: NodeId) -> Self {
        let logvar = g.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
        Self { mean, logvar, eps: None, sample: None }
    }
}

/// `mean + exp(logvar / 2) * eps` with `eps ~ N(0, I)` drawn from `rng`.
/// Gradients reach `mean` and `logvar`; `eps` is a constant.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, lat: &mut DiagGaussianLatent<T>, rng: &mut Rng) -> Result<NodeId> {
    let eps: Tensor<T> = rng.normal_tensor(g.shape(lat.mean));
    let half = g.scale(lat.logvar, 0.5);
    let std = g.exp(half);
    let e = g.input(eps.clone());
    let noise = g.mul(std, e)?;
    let z = g.add(lat.mean, noise)?;
    lat.eps = Some(eps);
    lat.sample = Some(z);
    Ok(z)
}

/// `0.5 Σ (μ² + exp(logvar) - 1 - logvar)` divided by the batch size.
pub fn kl_diag_gaussian<T: Real>(g: &mut Graph<T>, lat: &DiagGaussianLatent<T>) -> Result<NodeId> {
    let batch = g.shape(lat.mean)[0].max(1);
    let m2 = g.square(lat.mean);
    let ev = g.exp(lat.logvar);
    let a = g.add(m2, ev)?;
    let b = g.sub(a, lat.logvar)?;
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    Ok(g.scale(s, 0.5 / batch as f64))
}
