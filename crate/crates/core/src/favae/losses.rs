use super::net::Discriminator;
use crate::error::{bail, Result};
use crate::features::unit_normalize;
use crate::nn::{Bound, Graph, NodeId};

/// Which part of the subband stack a branch models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchKind {
    Low,
    High,
    Coupled,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Low => "low",
            BranchKind::High => "high",
            BranchKind::Coupled => "coupled",
        }
    }
}

/// Weights actually applied at a step (adversarial weight is zero during warm-up).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub vf: f64,
    pub gan: f64,
    pub lpips: f64,
}

/// Loss components of one branch at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub step: usize,
    pub branch: BranchKind,
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
    pub vf: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub lpips_proxy: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Weighted sum of the generator-side components.
    pub fn recomputed_total(&self) -> f64 {
        let w = &self.weights;
        self.rec + w.beta * self.kl + w.vf * self.vf + w.gan * self.gan_g + w.lpips * self.lpips_proxy
    }
}

fn hinge(g: &mut Graph<f32>, x: NodeId, sign: f64, margin: f64) -> NodeId {
    let s = g.scale(x, sign);
    let s = g.add_scalar(s, margin);
    g.relu(s)
}

/// Feature alignment between latent `z` and projected features `f`, both
/// `(N, c, h, w)`:
///
/// `mean_i relu(1 - m1 - cos(z_i, f_i)) + w_hyper * mean_ij relu(|cos(z_i, z_j) - cos(f_i, f_j)| - m2)`
///
/// The pairwise term runs over all ordered pairs of `positions` (every
/// position when `None`).
pub fn vf_alignment_loss(g: &mut Graph<f32>, z: NodeId, f: NodeId, m1: f64, m2: f64, w_hyper: f64, positions: Option<&[usize]>) -> Result<NodeId> {
    if g.shape(z) != g.shape(f) {
        bail!(Dimension, "latent {:?} and projected features {:?} differ", g.shape(z), g.shape(f));
    }
    let uz = unit_normalize(g, z)?;
    let uf = unit_normalize(g, f)?;
    let prod = g.mul(uz, uf)?;
    let cos = g.sum_channels(prod)?;
    let h1 = hinge(g, cos, -1.0, 1.0 - m1);
    let t1 = g.mean(h1);
    let (sz, sf) = match positions {
        Some(idx) => (g.gather_positions(uz, idx)?, g.gather_positions(uf, idx)?),
        None => (uz, uf),
    };
    let gz = g.position_gram(sz)?;
    let gf = g.position_gram(sf)?;
    let d = g.sub(gz, gf)?;
    let d = g.abs(d);
    let h2 = hinge(g, d, 1.0, -m2);
    let t2 = g.mean(h2);
    let t2 = g.scale(t2, w_hyper);
    g.add(t1, t2)
}

/// Hinge adversarial losses `(gan_g, gan_d)`.
///
/// `gan_d = mean relu(1 - D(real)) + mean relu(1 + D(fake))` with `fake`
/// detached, `gan_g = -mean D(fake)`. Take discriminator gradients from
/// `gan_d` and generator gradients from `gan_g`.
pub fn gan_losses(g: &mut Graph<f32>, disc: &Discriminator, p: &Bound<'_, f32>, real: NodeId, fake: NodeId) -> Result<(NodeId, NodeId)> {
    if g.shape(real) != g.shape(fake) {
        bail!(Dimension, "real {:?} and fake {:?} differ", g.shape(real), g.shape(fake));
    }
    let d_fake = disc.forward(g, p, fake)?;
    let m = g.mean(d_fake);
    let gan_g = g.scale(m, -1.0);
    let d_real = disc.forward(g, p, real)?;
    let fake_c = g.detach(fake);
    let d_fake_c = disc.forward(g, p, fake_c)?;
    let a = hinge(g, d_real, -1.0, 1.0);
    let a = g.mean(a);
    let b = hinge(g, d_fake_c, 1.0, 1.0);
    let b = g.mean(b);
    let gan_d = g.add(a, b)?;
    Ok((gan_g, gan_d))
}
