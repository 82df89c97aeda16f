//! Convolutional encoder, decoder and patch discriminator.

use super::config::BranchConfig;
use crate::error::Result;
use crate::nn::{Bound, Conv2d, Graph, GroupNorm, NodeId, Padding, ParamStore, ResBlock};
use crate::rng::Rng;
use alloc::format;
use alloc::vec::Vec;

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<ResBlock>,
    resample: Conv2d,
}

/// `conv_in`, per stage residual blocks then a stride-2 conv, a middle
/// block, and a norm/swish/conv head producing `2c` moment channels.
#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv2d,
    stages: Vec<Stage>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore<f32>, prefix: &str, cfg: &BranchConfig, rng: &mut Rng) -> Self {
        let conv_in = Conv2d::new(ps, &format!("{prefix}.conv_in"), cfg.in_channels, cfg.base_width, 3, 1, Padding::Same, rng);
        let mut cur = cfg.base_width;
        let mut stages = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            let w = cfg.width(s);
            let blocks = (0..cfg.res_blocks)
                .map(|b| {
                    let blk = ResBlock::new(ps, &format!("{prefix}.down{s}.block{b}"), cur, w, rng);
                    cur = w;
                    blk
                })
                .collect();
            let resample = Conv2d::new(ps, &format!("{prefix}.down{s}.conv"), cur, w, 3, 2, Padding::Same, rng);
            cur = w;
            stages.push(Stage { blocks, resample });
        }
        let mid = ResBlock::new(ps, &format!("{prefix}.mid"), cur, cur, rng);
        let norm_out = GroupNorm::new(ps, &format!("{prefix}.norm_out"), cur);
        let conv_out = Conv2d::new(ps, &format!("{prefix}.conv_out"), cur, 2 * cfg.latent_channels, 3, 1, Padding::Same, rng);
        Self { conv_in, stages, mid, norm_out, conv_out }
    }

    /// Moments `(N, 2c, h/f, w/f)`.
    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound<'_, f32>, x: NodeId) -> Result<NodeId> {
        let mut h = self.conv_in.forward(g, p, x)?;
        for st in &self.stages {
            for b in &st.blocks {
                h = b.forward(g, p, h)?;
            }
            h = st.resample.forward(g, p, h)?;
        }
        h = self.mid.forward(g, p, h)?;
        h = self.norm_out.forward(g, p, h)?;
        h = g.swish(h);
        self.conv_out.forward(g, p, h)
    }
}

/// Mirror of [`Encoder`]: nearest upsampling followed by a conv at every
/// stage, ending in `tanh`.
#[derive(Clone, Debug)]
pub struct Decoder {
    conv_in: Conv2d,
    mid: ResBlock,
    stages: Vec<Stage>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    pub fn new(ps: &mut ParamStore<f32>, prefix: &str, cfg: &BranchConfig, rng: &mut Rng) -> Self {
        let top = cfg.width(cfg.stages.saturating_sub(1));
        let conv_in = Conv2d::new(ps, &format!("{prefix}.conv_in"), cfg.latent_channels, top, 3, 1, Padding::Same, rng);
        let mid = ResBlock::new(ps, &format!("{prefix}.mid"), top, top, rng);
        let mut cur = top;
        let mut stages = Vec::with_capacity(cfg.stages);
        for s in (0..cfg.stages).rev() {
            let w = cfg.width(s);
            let resample = Conv2d::new(ps, &format!("{prefix}.up{s}.conv"), cur, w, 3, 1, Padding::Same, rng);
            cur = w;
            let blocks = (0..cfg.res_blocks).map(|b| ResBlock::new(ps, &format!("{prefix}.up{s}.block{b}"), w, w, rng)).collect();
            stages.push(Stage { blocks, resample });
        }
        let norm_out = GroupNorm::new(ps, &format!("{prefix}.norm_out"), cur);
        let conv_out = Conv2d::new(ps, &format!("{prefix}.conv_out"), cur, cfg.in_channels, 3, 1, Padding::Same, rng);
        Self { conv_in, mid, stages, norm_out, conv_out }
    }

    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound<'_, f32>, z: NodeId) -> Result<NodeId> {
        let mut h = self.conv_in.forward(g, p, z)?;
        h = self.mid.forward(g, p, h)?;
        for st in &self.stages {
            h = g.upsample2x(h)?;
            h = st.resample.forward(g, p, h)?;
            for b in &st.blocks {
                h = b.forward(g, p, h)?;
            }
        }
        h = self.norm_out.forward(g, p, h)?;
        h = g.swish(h);
        h = self.conv_out.forward(g, p, h)?;
        Ok(g.tanh(h))
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// Four 3x3 convs (stride 2, 2, 1, 1) with leaky ReLU between them,
/// producing a one-channel logit map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(ps: &mut ParamStore<f32>, prefix: &str, in_channels: usize, width: usize, rng: &mut Rng) -> Self {
        let plan = [(in_channels, width, 2), (width, 2 * width, 2), (2 * width, 4 * width, 1), (4 * width, 1, 1)];
        let convs = plan.iter().enumerate().map(|(i, &(ci, co, s))| Conv2d::new(ps, &format!("{prefix}.conv{i}"), ci, co, 3, s, Padding::Same, rng)).collect();
        Self { convs }
    }

    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound<'_, f32>, x: NodeId) -> Result<NodeId> {
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, p, h)?;
            if i < last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }
}
