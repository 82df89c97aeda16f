//! Power spectra of reconstruction residuals.
//!
//! Convention: unnormalized forward DFT, `psd = |F|² / (H W)` averaged over
//! channels, so `Σ psd = Σ residual² / C`. Grids are stored with DC at
//! `(H/2, W/2)`.

use crate::error::{bail, Result};
use crate::fft::{fft2_real, is_power_of_two};
use crate::image::ImageTensor;
use alloc::vec::Vec;

pub const DEFAULT_LOG_EPSILON: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width`, DC-centered.
    pub psd: Vec<f64>,
    pub log_scaled: bool,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialBin {
    /// Bin center as a fraction of the corner distance.
    pub radius: f64,
    pub mean_power: f64,
    pub population: usize,
}

impl SpectrumGrid {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.psd[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.psd.iter().sum()
    }

    /// Distance of `(y, x)` from DC, scaled so the Nyquist corner is 1.
    pub fn radius(&self, y: usize, x: usize) -> f64 {
        let dy = (y as f64 - (self.height / 2) as f64) / (self.height as f64 / 2.0);
        let dx = (x as f64 - (self.width / 2) as f64) / (self.width as f64 / 2.0);
        libm::sqrt((dy * dy + dx * dx) / 2.0)
    }
}

/// Power spectrum of one residual. `H` and `W` must be powers of two.
pub fn power_spectrum(residual: &ImageTensor) -> Result<SpectrumGrid> {
    let [c, h, w] = residual.shape();
    for (axis, n) in [("height", h), ("width", w)] {
        if !is_power_of_two(n) {
            bail!(Dimension, "{} {} is not a power of two; center-crop to {} first", axis, n, crate::fft::floor_power_of_two(n));
        }
    }
    let norm = (h * w) as f64;
    let mut acc = alloc::vec![0.0f64; h * w];
    for ch in 0..c {
        let plane: Vec<f64> = residual.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).collect();
        let (re, im) = fft2_real(&plane, h, w);
        for y in 0..h {
            let sy = (y + h / 2) % h;
            for x in 0..w {
                let sx = (x + w / 2) % w;
                let i = y * w + x;
                acc[sy * w + sx] += (re[i] * re[i] + im[i] * im[i]) / norm;
            }
        }
    }
    for v in &mut acc {
        *v /= c as f64;
    }
    Ok(SpectrumGrid { height: h, width: w, psd: acc, log_scaled: false, count: 1 })
}

/// Mean of the residual spectra `x - x̂` over all pairs, summed in input order.
pub fn average_spectra(pairs: &[(ImageTensor, ImageTensor)]) -> Result<SpectrumGrid> {
    let Some((first, _)) = pairs.first() else {
        bail!(Argument, "average_spectra needs at least one pair");
    };
    let shape = first.shape();
    let mut acc: Option<SpectrumGrid> = None;
    for (i, (x, xhat)) in pairs.iter().enumerate() {
        if x.shape() != shape || xhat.shape() != shape {
            bail!(Dimension, "pair {} has shapes {:?}/{:?}, expected {:?}", i, x.shape(), xhat.shape(), shape);
        }
        let g = power_spectrum(&x.sub(xhat)?)?;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                for (s, v) in a.psd.iter_mut().zip(&g.psd) {
                    *s += v;
                }
            }
        }
    }
    let mut out = acc.expect("non-empty");
    let n = pairs.len() as f64;
    for v in &mut out.psd {
        *v /= n;
    }
    out.count = pairs.len();
    Ok(out)
}

/// Mean of precomputed grids with equal shape, weighting each by its count.
pub fn merge_spectra(grids: &[SpectrumGrid]) -> Result<SpectrumGrid> {
    let Some(first) = grids.first() else {
        bail!(Argument, "merge_spectra needs at least one grid");
    };
    let mut out = first.clone();
    out.psd.iter_mut().for_each(|v| *v = 0.0);
    out.count = 0;
    for g in grids {
        if (g.height, g.width) != (first.height, first.width) || g.log_scaled {
            bail!(Dimension, "cannot merge spectra of different shapes or log-scaled grids");
        }
        for (s, v) in out.psd.iter_mut().zip(&g.psd) {
            *s += v * g.count as f64;
        }
        out.count += g.count;
    }
    let n = out.count.max(1) as f64;
    out.psd.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

pub fn log_view(g: &SpectrumGrid, epsilon: f64) -> Result<SpectrumGrid> {
    if g.log_scaled {
        bail!(State, "spectrum is already log-scaled");
    }
    if !(epsilon > 0.0) {
        bail!(Argument, "log epsilon must be positive, got {}", epsilon);
    }
    Ok(SpectrumGrid { psd: g.psd.iter().map(|&v| libm::log10(v + epsilon)).collect(), log_scaled: true, ..g.clone() })
}

fn bin_of(r: f64, n_bins: usize) -> usize {
    ((r * n_bins as f64) as usize).min(n_bins - 1)
}

pub fn radial_profile(g: &SpectrumGrid, n_bins: usize) -> Result<Vec<RadialBin>> {
    if n_bins < 2 {
        bail!(Argument, "radial_profile needs at least 2 bins, got {}", n_bins);
    }
    let mut sum = alloc::vec![0.0f64; n_bins];
    let mut pop = alloc::vec![0usize; n_bins];
    for y in 0..g.height {
        for x in 0..g.width {
            let b = bin_of(g.radius(y, x), n_bins);
            sum[b] += g.at(y, x);
            pop[b] += 1;
        }
    }
    Ok((0..n_bins)
        .map(|b| RadialBin {
            radius: (b as f64 + 0.5) / n_bins as f64,
            mean_power: if pop[b] > 0 { sum[b] / pop[b] as f64 } else { 0.0 },
            population: pop[b],
        })
        .collect())
}

/// Energy at normalized radius `<= cutoff` and above it.
pub fn band_energy(g: &SpectrumGrid, cutoff: f64) -> Result<(f64, f64)> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        bail!(Argument, "cutoff must lie in (0, 1), got {}", cutoff);
    }
    if g.log_scaled {
        bail!(State, "band_energy needs a linear (not log-scaled) spectrum");
    }
    let (mut low, mut high) = (0.0, 0.0);
    for y in 0..g.height {
        for x in 0..g.width {
            if g.radius(y, x) <= cutoff {
                low += g.at(y, x);
            } else {
                high += g.at(y, x);
            }
        }
    }
    Ok((low, high))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn res(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> ImageTensor {
        let mut d = Vec::new();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    d.push(f(ch, y, x));
                }
            }
        }
        ImageTensor::residual(Tensor::from_vec(&[c, h, w], d)).unwrap()
    }

    #[test]
    fn zero_and_constant() {
        let g = power_spectrum(&res(2, 8, 8, |_, _, _| 0.0)).unwrap();
        assert!(g.psd.iter().all(|&v| v == 0.0));
        let c = 0.5;
        let g = power_spectrum(&res(1, 8, 16, |_, _, _| c as f32)).unwrap();
        let dc = (c * 128.0f64).powi(2) / 128.0;
        assert!((g.at(4, 8) - dc).abs() < 1e-9);
        assert!((g.total() - dc).abs() < 1e-9);
        let (low, high) = band_energy(&g, 0.3).unwrap();
        assert!((low - dc).abs() < 1e-9 && high == 0.0);
        let prof = radial_profile(&g, 4).unwrap();
        assert!(prof[0].mean_power > 0.0 && prof[1..].iter().all(|b| b.mean_power == 0.0));
    }

    #[test]
    fn non_power_of_two_rejected() {
        let e = power_spectrum(&res(1, 6, 8, |_, _, _| 0.0)).unwrap_err();
        assert!(matches!(e, crate::Error::Dimension(ref m) if m.contains("center-crop")));
    }

    #[test]
    fn log_view_rules() {
        let g = power_spectrum(&res(1, 4, 4, |_, y, x| (y * 4 + x) as f32)).unwrap();
        let l = log_view(&g, DEFAULT_LOG_EPSILON).unwrap();
        assert!(matches!(log_view(&l, 1e-12), Err(crate::Error::State(_))));
        assert!(log_view(&g, 0.0).is_err());
        let z = SpectrumGrid { psd: alloc::vec![0.0, 1.0], height: 1, width: 2, log_scaled: false, count: 1 };
        let lz = log_view(&z, 1e-12).unwrap();
        assert!((lz.psd[0] + 12.0).abs() < 1e-12 && lz.psd[1].abs() < 1e-9);
        assert!(band_energy(&l, 0.5).is_err());
    }

    #[test]
    fn argument_checks() {
        let g = power_spectrum(&res(1, 4, 4, |_, _, _| 1.0)).unwrap();
        assert!(radial_profile(&g, 1).is_err());
        assert!(band_energy(&g, 0.0).is_err());
        assert!(band_energy(&g, 1.0).is_err());
        assert!(average_spectra(&[]).is_err());
    }
}
