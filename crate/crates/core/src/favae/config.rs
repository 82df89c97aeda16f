use crate::error::{bail, Result};
use crate::image::ValueRange;
use crate::wavelet::NormScheme;

/// Architecture and loss weights of one encoder/decoder branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 stages; the latent grid is the input grid over `2^stages`.
    pub stages: usize,
    pub res_blocks: usize,
    pub latent_channels: usize,
    pub beta: f64,
    pub lambda_vf: f64,
    pub lambda_gan: f64,
    pub lambda_lpips: f64,
    pub disc_width: usize,
}

impl BranchConfig {
    pub fn factor(&self) -> usize {
        1 << self.stages
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.latent_channels == 0 || self.disc_width == 0 {
            bail!(Config, "{what}: channel counts and widths must be positive");
        }
        for (name, v) in [("beta", self.beta), ("lambda_vf", self.lambda_vf), ("lambda_gan", self.lambda_gan), ("lambda_lpips", self.lambda_lpips)] {
            if !(v >= 0.0 && v.is_finite()) {
                bail!(Config, "{what}: {name} must be a finite non-negative number, got {v}");
            }
        }
        Ok(())
    }
}

/// Margins and weight of the feature alignment loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VfConfig {
    pub m1: f64,
    pub m2: f64,
    pub w_hyper: f64,
    /// Channel count of the provider features fed to the projection.
    pub feature_channels: usize,
    /// Positions kept for the pairwise term.
    pub max_positions: usize,
}

impl Default for VfConfig {
    fn default() -> Self {
        Self { m1: 0.5, m2: 0.25, w_hyper: 0.1, feature_channels: crate::features::STACK_WIDTHS[2], max_positions: 64 }
    }
}

/// Whether low and high frequencies get separate branches or share one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Decoupled,
    /// One branch over `[ll, lh, hl, hh]` stacked along channels.
    Coupled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaVaeConfig {
    pub layout: Layout,
    /// Pixel channel count `C`.
    pub channels: usize,
    pub low: BranchConfig,
    pub high: BranchConfig,
    pub vf: VfConfig,
    pub range: ValueRange,
    pub norm: NormScheme,
    pub feature_seed: u64,
}

impl FaVaeConfig {
    fn with_arch(channels: usize, base: usize, stages: usize, res_blocks: usize, latent: usize) -> Self {
        let low = BranchConfig {
            in_channels: channels,
            base_width: base,
            stages,
            res_blocks,
            latent_channels: latent,
            beta: 1e-6,
            lambda_vf: 0.1,
            lambda_gan: 0.5,
            lambda_lpips: 1.0,
            disc_width: base,
        };
        let high = BranchConfig { in_channels: 3 * channels, lambda_vf: 0.0, lambda_gan: 1.0, lambda_lpips: 0.0, ..low };
        Self {
            layout: Layout::Decoupled,
            channels,
            low,
            high,
            vf: VfConfig::default(),
            range: ValueRange::Unit,
            norm: NormScheme::AffinePerSubband,
            feature_seed: crate::features::DEFAULT_FEATURE_SEED,
        }
    }

    /// Default for 32 to 64 pixel inputs: width 32, three stages, two
    /// residual blocks per stage, 8 latent channels.
    pub fn desk(channels: usize) -> Self {
        Self::with_arch(channels, 32, 3, 2, 8)
    }

    /// Small network for tests and quick experiments on one CPU core.
    pub fn tiny(channels: usize) -> Self {
        Self::with_arch(channels, 8, 2, 1, 4)
    }

    /// 256-pixel images with a 16x16x32 latent grid (the subband grid is
    /// 128, so three stages).
    pub fn f16c32(channels: usize) -> Self {
        Self::with_arch(channels, 128, 3, 2, 32)
    }

    /// Same config with adversarial terms off in both branches.
    pub fn without_adversary(mut self) -> Self {
        self.low.lambda_gan = 0.0;
        self.high.lambda_gan = 0.0;
        self
    }

    /// Spatial factor between an image and its latent grid.
    pub fn image_factor(&self) -> usize {
        2 * self.low.factor()
    }

    pub fn validate(&self) -> Result<()> {
        self.low.validate("low branch")?;
        match self.layout {
            Layout::Decoupled => {
                if self.low.in_channels != self.channels {
                    bail!(Config, "low branch takes {} channels but images have {}", self.low.in_channels, self.channels);
                }
                self.high.validate("high branch")?;
                if self.high.in_channels != 3 * self.channels {
                    bail!(Config, "high branch must take 3 x {} packed detail channels, got {}", self.channels, self.high.in_channels);
                }
                if self.high.stages != self.low.stages {
                    bail!(Config, "both branches need the same number of stages so their latent grids align ({} vs {})", self.low.stages, self.high.stages);
                }
            }
            Layout::Coupled => {
                if self.low.in_channels != 4 * self.channels {
                    bail!(Config, "coupled branch must take 4 x {} subband channels, got {}", self.channels, self.low.in_channels);
                }
            }
        }
        if self.vf.feature_channels == 0 || self.vf.max_positions == 0 {
            bail!(Config, "feature channels and max positions must be positive");
        }
        Ok(())
    }

    /// Check that an image size is usable: divisible by `2 * 2^stages`.
    pub fn check_image(&self, height: usize, width: usize) -> Result<()> {
        let f = self.image_factor();
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            bail!(Dimension, "image {}x{} is not divisible by {} (wavelet level times 2^stages)", height, width, f);
        }
        Ok(())
    }
}

/// Optimizer and schedule settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Fraction of steps before adversarial terms switch on.
    pub gan_warmup: f64,
    /// Steps between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, batch: 8, steps: 500, seed: 0, gan_warmup: 0.25, checkpoint_every: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if self.batch == 0 {
            bail!(Config, "batch size must be positive");
        }
        if !(0.0..=1.0).contains(&self.gan_warmup) {
            bail!(Config, "gan warm-up fraction must lie in [0, 1], got {}", self.gan_warmup);
        }
        Ok(())
    }

    /// Whether adversarial terms are active at `step`.
    pub fn gan_active(&self, step: usize) -> bool {
        (step as f64) >= self.gan_warmup * self.steps as f64
    }
}
