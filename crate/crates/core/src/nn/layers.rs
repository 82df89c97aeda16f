use super::graph::{Graph, NodeId, Padding};
use super::params::{Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::format;

/// `min(8, channels)`, reduced until it divides `channels`.
pub fn group_count(channels: usize) -> usize {
    let mut g = channels.clamp(1, 8);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

const NORM_EPS: f64 = 1e-5;

fn kaiming_uniform<T: Real>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = libm::sqrt(3.0 / fan_in as f64);
    rng.uniform_tensor(shape, -bound, bound)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: Padding, rng: &mut Rng) -> Self {
        let weight = ps.add(format!("{name}.weight"), kaiming_uniform(rng, &[cout, cin, k, k], cin * k * k));
        let bias = Some(ps.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, stride, padding }
    }

    /// Like [`Conv2d::new`] with weights scaled by `gain` (e.g. small output heads).
    pub fn with_gain<T: Real>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, gain: f64, rng: &mut Rng) -> Self {
        let c = Self::new(ps, name, cin, cout, k, 1, Padding::Same, rng);
        let w = ps.get_mut(c.weight);
        *w = w.map(|v| v * T::of(gain));
        c
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(p, self.weight);
        let b = self.bias.map(|b| g.param(p, b));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let weight = ps.add(format!("{name}.weight"), kaiming_uniform(rng, &[dout, din], din));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(p, self.weight);
        let b = g.param(p, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups: group_count(channels) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: NodeId) -> Result<NodeId> {
        let ga = g.param(p, self.gamma);
        let be = g.param(p, self.beta);
        g.group_norm(x, ga, be, self.groups, NORM_EPS)
    }
}

/// `x + conv(swish(norm(conv(swish(norm(x))))))`, with a 1x1 projection on
/// the skip path when the width changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin),
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, Padding::Same, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout),
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, Padding::Same, rng),
            skip: (cin != cout).then(|| Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, Padding::Same, rng)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.norm1.forward(g, p, x)?;
        let h = g.swish(h);
        let h = self.conv1.forward(g, p, h)?;
        let h = self.norm2.forward(g, p, h)?;
        let h = g.swish(h);
        let h = self.conv2.forward(g, p, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        g.add(s, h)
    }
}
