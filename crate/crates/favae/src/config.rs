//! Model and training settings: a TOML file (`--config`) overlaid by
//! command-line flags. The resolved settings are saved next to a trained
//! model as `model.cfg` so later commands can rebuild the same network.

use anyhow::{bail, Context};
use clap::Args;
use favae_core::favae::{coupled_config, FaVaeConfig, Layout, TrainConfig};
use favae_core::ValueRange;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Every field is optional; unset fields fall back to the preset.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Architecture preset: desk, tiny or f16c32 [default: desk]
    #[arg(long)]
    pub preset: Option<String>,
    /// decoupled (two branches) or coupled (one branch over all subbands) [default: decoupled]
    #[arg(long)]
    pub layout: Option<String>,
    /// Image channels [default: 3]
    #[arg(long)]
    pub channels: Option<usize>,
    /// Base width of the low branch (and of the high branch unless overridden)
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub base_width_high: Option<usize>,
    /// Width of the coupled branch. When unset it is searched to match the
    /// decoupled parameter count and the latent count is low plus high; when
    /// set, `latent_channels` is the coupled latent count.
    #[arg(long)]
    pub coupled_width: Option<usize>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub res_blocks: Option<usize>,
    #[arg(long)]
    pub latent_channels: Option<usize>,
    #[arg(long)]
    pub latent_channels_high: Option<usize>,
    /// KL weight [default: 1e-6]
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub beta_high: Option<f64>,
    /// Feature alignment weight of the low branch [default: 0.1]
    #[arg(long)]
    pub lambda_vf: Option<f64>,
    /// Adversarial weight of the low branch [default: 0.5]
    #[arg(long)]
    pub lambda_gan: Option<f64>,
    /// Adversarial weight of the high branch [default: 1.0]
    #[arg(long)]
    pub lambda_gan_high: Option<f64>,
    /// Perceptual proxy weight of the low branch [default: 1.0]
    #[arg(long)]
    pub lambda_lpips: Option<f64>,
    #[arg(long)]
    pub disc_width: Option<usize>,
    /// Pixel range: unit or symmetric [default: unit]
    #[arg(long)]
    pub range: Option<String>,
    #[arg(long)]
    pub feature_seed: Option<u64>,
    /// Cosine margin [default: 0.5]
    #[arg(long)]
    pub vf_m1: Option<f64>,
    /// Distance-matrix margin [default: 0.25]
    #[arg(long)]
    pub vf_m2: Option<f64>,
    /// Weight of the distance-matrix term [default: 0.1]
    #[arg(long)]
    pub vf_w_hyper: Option<f64>,
    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 8]
    #[arg(long)]
    pub batch: Option<usize>,
    /// [default: 500]
    #[arg(long)]
    pub steps: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of steps before the adversarial terms start [default: 0.25]
    #[arg(long)]
    pub gan_warmup: Option<f64>,
    /// Checkpoint interval in steps, 0 for none [default: 0]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

pub fn parse_range(s: &str) -> anyhow::Result<ValueRange> {
    ValueRange::parse(s).with_context(|| format!("unknown range {s:?}; use unit or symmetric"))
}

impl Settings {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings always serialize")
    }

    /// `self` with every field set in `top` replaced.
    pub fn overlay(mut self, top: &Settings) -> Self {
        overlay!(
            self, top, preset, layout, channels, base_width, base_width_high, coupled_width, stages, res_blocks, latent_channels,
            latent_channels_high, beta, beta_high, lambda_vf, lambda_gan, lambda_gan_high, lambda_lpips, disc_width, range,
            feature_seed, vf_m1, vf_m2, vf_w_hyper, lr, batch, steps, seed, gan_warmup, checkpoint_every
        );
        self
    }

    pub fn resolve(&self) -> anyhow::Result<(FaVaeConfig, TrainConfig)> {
        let channels = self.channels.unwrap_or(3);
        let mut m = match self.preset.as_deref().unwrap_or("desk") {
            "desk" => FaVaeConfig::desk(channels),
            "tiny" => FaVaeConfig::tiny(channels),
            "f16c32" => FaVaeConfig::f16c32(channels),
            other => bail!("unknown preset {other:?}; use desk, tiny or f16c32"),
        };
        if let Some(w) = self.base_width {
            m.low.base_width = w;
            m.high.base_width = w;
            m.low.disc_width = w;
            m.high.disc_width = w;
        }
        if let Some(w) = self.base_width_high {
            m.high.base_width = w;
        }
        if let Some(s) = self.stages {
            m.low.stages = s;
            m.high.stages = s;
        }
        if let Some(r) = self.res_blocks {
            m.low.res_blocks = r;
            m.high.res_blocks = r;
        }
        if let Some(c) = self.latent_channels {
            m.low.latent_channels = c;
            m.high.latent_channels = c;
        }
        if let Some(c) = self.latent_channels_high {
            m.high.latent_channels = c;
        }
        if let Some(b) = self.beta {
            m.low.beta = b;
            m.high.beta = b;
        }
        if let Some(b) = self.beta_high {
            m.high.beta = b;
        }
        if let Some(v) = self.lambda_vf {
            m.low.lambda_vf = v;
        }
        if let Some(v) = self.lambda_gan {
            m.low.lambda_gan = v;
        }
        if let Some(v) = self.lambda_gan_high {
            m.high.lambda_gan = v;
        }
        if let Some(v) = self.lambda_lpips {
            m.low.lambda_lpips = v;
        }
        if let Some(w) = self.disc_width {
            m.low.disc_width = w;
            m.high.disc_width = w;
        }
        if let Some(r) = &self.range {
            m.range = parse_range(r)?;
        }
        if let Some(s) = self.feature_seed {
            m.feature_seed = s;
        }
        if let Some(v) = self.vf_m1 {
            m.vf.m1 = v;
        }
        if let Some(v) = self.vf_m2 {
            m.vf.m2 = v;
        }
        if let Some(v) = self.vf_w_hyper {
            m.vf.w_hyper = v;
        }
        m.validate()?;
        match self.layout.as_deref().unwrap_or("decoupled") {
            "decoupled" => {}
            "coupled" => {
                if let Some(w) = self.coupled_width {
                    m.layout = Layout::Coupled;
                    m.low.in_channels = 4 * m.channels;
                    m.low.base_width = w;
                    m.high = m.low;
                } else {
                    m = coupled_config(&m)?;
                }
            }
            other => bail!("unknown layout {other:?}; use decoupled or coupled"),
        }
        m.validate()?;
        let d = TrainConfig::default();
        let t = TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            batch: self.batch.unwrap_or(d.batch),
            steps: self.steps.unwrap_or(d.steps),
            seed: self.seed.unwrap_or(d.seed),
            gan_warmup: self.gan_warmup.unwrap_or(d.gan_warmup),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
        };
        t.validate()?;
        Ok((m, t))
    }

    /// Fully specified settings that resolve to `(m, t)`.
    pub fn from_resolved(m: &FaVaeConfig, t: &TrainConfig) -> Self {
        let coupled = m.layout == Layout::Coupled;
        Settings {
            preset: Some("desk".into()),
            layout: Some(if coupled { "coupled" } else { "decoupled" }.into()),
            channels: Some(m.channels),
            base_width: Some(m.low.base_width),
            base_width_high: (!coupled).then_some(m.high.base_width),
            coupled_width: coupled.then_some(m.low.base_width),
            stages: Some(m.low.stages),
            res_blocks: Some(m.low.res_blocks),
            latent_channels: Some(m.low.latent_channels),
            latent_channels_high: (!coupled).then_some(m.high.latent_channels),
            beta: Some(m.low.beta),
            beta_high: (!coupled).then_some(m.high.beta),
            lambda_vf: Some(m.low.lambda_vf),
            lambda_gan: Some(m.low.lambda_gan),
            lambda_gan_high: (!coupled).then_some(m.high.lambda_gan),
            lambda_lpips: Some(m.low.lambda_lpips),
            disc_width: Some(m.low.disc_width),
            range: Some(m.range.name().into()),
            feature_seed: Some(m.feature_seed),
            vf_m1: Some(m.vf.m1),
            vf_m2: Some(m.vf.m2),
            vf_w_hyper: Some(m.vf.w_hyper),
            lr: Some(t.lr),
            batch: Some(t.batch),
            steps: Some(t.steps),
            seed: Some(t.seed),
            gan_warmup: Some(t.gan_warmup),
            checkpoint_every: Some(t.checkpoint_every),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let file = Settings::parse("preset = \"tiny\"\nsteps = 10\n# comment\nlr = 0.001\n").unwrap();
        let flags = Settings { steps: Some(20), ..Default::default() };
        let (m, t) = file.overlay(&flags).resolve().unwrap();
        assert_eq!(m, FaVaeConfig::tiny(3));
        assert_eq!((t.steps, t.lr), (20, 0.001));
    }

    #[test]
    fn unknown_keys_and_values_are_rejected() {
        assert!(Settings::parse("stepz = 3").is_err());
        assert!(Settings { preset: Some("huge".into()), ..Default::default() }.resolve().is_err());
        assert!(Settings { range: Some("bytes".into()), ..Default::default() }.resolve().is_err());
        assert!(Settings { lr: Some(-1.0), ..Default::default() }.resolve().is_err());
    }

    #[test]
    fn resolved_settings_round_trip() {
        for layout in ["decoupled", "coupled"] {
            let s = Settings {
                preset: Some("tiny".into()),
                layout: Some(layout.into()),
                latent_channels_high: Some(6),
                lambda_gan: Some(0.0),
                ..Default::default()
            };
            let (m, t) = s.resolve().unwrap();
            let saved = Settings::from_resolved(&m, &t).to_toml();
            let (m2, t2) = Settings::parse(&saved).unwrap().resolve().unwrap();
            assert_eq!((m, t), (m2, t2), "{layout}");
        }
    }
}
