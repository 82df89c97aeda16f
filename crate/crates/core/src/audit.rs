//! Dataset-level reconstruction audit: pixel and subband losses, a
//! perceptual proxy, a feature-space Fréchet distance and per-class NMSE.

use crate::error::{bail, Result};
use crate::features::{perceptual_distance, pooled, FeatureProvider};
use crate::image::ImageTensor;
use crate::linalg::{matrix_sqrt_psd, Matrix};
use crate::wavelet::frequency_losses;
use alloc::vec;
use alloc::vec::Vec;

/// Added to covariance diagonals when there are fewer samples than dimensions.
pub const COV_RIDGE: f64 = 1e-6;
const NEGATIVE_CLAMP: f64 = -1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReconMetrics {
    pub rec: f64,
    pub low: f64,
    pub high: f64,
}

fn check_pairs(pairs: &[(ImageTensor, ImageTensor)]) -> Result<()> {
    if pairs.is_empty() {
        bail!(Argument, "no image pairs to audit");
    }
    let shape = pairs[0].0.shape();
    for (i, (x, y)) in pairs.iter().enumerate() {
        if x.shape() != shape || y.shape() != shape {
            bail!(Dimension, "pair {} has shapes {:?} / {:?}, expected {:?}", i, x.shape(), y.shape(), shape);
        }
    }
    Ok(())
}

fn pixel_mse(x: &ImageTensor, y: &ImageTensor) -> f64 {
    let s: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| {
        let d = a as f64 - b as f64;
        d * d
    }).sum();
    s / x.data().len() as f64
}

/// Means over pairs of pixel MSE and the low/high subband losses.
pub fn recon_metrics(pairs: &[(ImageTensor, ImageTensor)]) -> Result<ReconMetrics> {
    check_pairs(pairs)?;
    let mut m = ReconMetrics::default();
    for (x, y) in pairs {
        let (lo, hi) = frequency_losses(x, y)?;
        m.rec += pixel_mse(x, y);
        m.low += lo;
        m.high += hi;
    }
    let n = pairs.len() as f64;
    Ok(ReconMetrics { rec: m.rec / n, low: m.low / n, high: m.high / n })
}

/// Sample mean and unbiased covariance of a set of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn feature_stats(features: &[Vec<f64>]) -> Result<FeatureStats> {
    if features.len() < 2 {
        bail!(Argument, "feature statistics need at least 2 samples, got {}", features.len());
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        bail!(Dimension, "feature vectors of length {} and {}", d, bad.len());
    }
    let n = features.len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d);
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in i..d {
                cov.data[i * d + j] += di * (f[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.at(i, j) / (n - 1) as f64;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok(FeatureStats { mean, cov, n })
}

fn regularized(s: &FeatureStats) -> Matrix {
    if s.n < s.dim() {
        s.cov.add_scaled(&Matrix::identity(s.dim()), COV_RIDGE)
    } else {
        s.cov.clone()
    }
}

/// `|μa - μb|² + Tr Σa + Tr Σb - 2 Tr sqrt(Σa^½ Σb Σa^½)`, clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        bail!(Dimension, "feature dimensions differ: {} vs {}", a.dim(), b.dim());
    }
    if a == b {
        return Ok(0.0);
    }
    let (ca, cb) = (regularized(a), regularized(b));
    let mu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let ra = matrix_sqrt_psd(&ca)?;
    let inner = ra.matmul(&cb).matmul(&ra).symmetrized();
    let cross = matrix_sqrt_psd(&inner)?.trace();
    let d = mu + ca.trace() + cb.trace() - 2.0 * cross;
    if d < NEGATIVE_CLAMP {
        bail!(Data, "Fréchet distance came out negative ({:e})", d);
    }
    Ok(d.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassNmse {
    pub class: usize,
    pub nmse: f64,
    pub count: usize,
}

/// Per-class `Σ|x - x̂|² / Σ|x|²`, sorted by class id.
pub fn per_class_nmse(pairs: &[(ImageTensor, ImageTensor)], labels: &[Option<usize>]) -> Result<Vec<ClassNmse>> {
    check_pairs(pairs)?;
    if labels.len() != pairs.len() {
        bail!(Argument, "{} labels for {} pairs", labels.len(), pairs.len());
    }
    let mut acc: Vec<(usize, f64, f64, usize)> = Vec::new();
    for (i, ((x, y), label)) in pairs.iter().zip(labels).enumerate() {
        let Some(class) = *label else {
            bail!(Argument, "pair {} has no class label", i);
        };
        let err: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64)).sum();
        let energy: f64 = x.data().iter().map(|&a| a as f64 * a as f64).sum();
        match acc.binary_search_by_key(&class, |e| e.0) {
            Ok(k) => {
                acc[k].1 += err;
                acc[k].2 += energy;
                acc[k].3 += 1;
            }
            Err(k) => acc.insert(k, (class, err, energy, 1)),
        }
    }
    acc.into_iter()
        .map(|(class, err, energy, count)| {
            if energy == 0.0 {
                bail!(Data, "class {} has zero signal energy, NMSE undefined", class);
            }
            Ok(ClassNmse { class, nmse: err / energy, count })
        })
        .collect()
}

/// The `k` classes with the largest NMSE, descending, ties by class id.
pub fn top_k(classes: &[ClassNmse], k: usize) -> Result<Vec<ClassNmse>> {
    if k > classes.len() {
        bail!(Argument, "top-{} requested but only {} classes", k, classes.len());
    }
    let mut v = classes.to_vec();
    v.sort_by(|a, b| b.nmse.total_cmp(&a.nmse).then(a.class.cmp(&b.class)));
    v.truncate(k);
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub rec_loss: f64,
    pub low_freq_loss: f64,
    pub high_freq_loss: f64,
    pub perceptual_proxy: f64,
    pub feature_frechet: f64,
    pub per_class: Vec<ClassNmse>,
    pub pair_count: usize,
}

/// Full audit. Originals take features from `orig`, reconstructions from
/// `recon`; both are indexed by pair position. Per-class results are
/// produced when every pair carries a label and skipped when none do.
pub fn audit_report(
    pairs: &[(ImageTensor, ImageTensor)],
    labels: &[Option<usize>],
    orig: &dyn FeatureProvider,
    recon: &dyn FeatureProvider,
) -> Result<AuditReport> {
    let m = recon_metrics(pairs)?;
    let mut lp = 0.0;
    let (mut fa, mut fb) = (Vec::with_capacity(pairs.len()), Vec::with_capacity(pairs.len()));
    for (i, (x, y)) in pairs.iter().enumerate() {
        let sa = orig.stages(x, i)?;
        let sb = recon.stages(y, i)?;
        lp += perceptual_distance(&sa, &sb)?;
        fa.push(pooled(&sa));
        fb.push(pooled(&sb));
    }
    let feature_frechet = if pairs.len() >= 2 { frechet_distance(&feature_stats(&fa)?, &feature_stats(&fb)?)? } else { 0.0 };
    let per_class = if labels.iter().all(Option::is_none) { Vec::new() } else { per_class_nmse(pairs, labels)? };
    Ok(AuditReport {
        rec_loss: m.rec,
        low_freq_loss: m.low,
        high_freq_loss: m.high,
        perceptual_proxy: lp / pairs.len() as f64,
        feature_frechet,
        per_class,
        pair_count: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{RandomFeatureStack, DEFAULT_FEATURE_SEED};
    use crate::image::ValueRange;
    use crate::rng::Rng;
    use crate::synth::random_image;
    use crate::wavelet::dwt2_haar;

    fn stats(mean: &[f64], cov: Matrix) -> FeatureStats {
        FeatureStats { mean: mean.to_vec(), cov, n: 100 }
    }

    #[test]
    fn closed_form_cases() {
        let a = stats(&[0.0], Matrix::diag(&[1.0]));
        let b = stats(&[1.0], Matrix::diag(&[1.0]));
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-6);
        let a = stats(&[1.0, 0.0], Matrix::diag(&[1.0, 4.0]));
        let b = stats(&[0.0, 0.0], Matrix::diag(&[4.0, 1.0]));
        assert!((frechet_distance(&a, &b).unwrap() - 3.0).abs() < 1e-6);
        assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
        let c = stats(&[0.0], Matrix::diag(&[1.0]));
        assert!(matches!(frechet_distance(&a, &c), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn two_point_covariance() {
        let v = [0.5, -2.0, 1.5];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let s = feature_stats(&[v.to_vec(), neg]).unwrap();
        // mean 0; unbiased covariance of {v, -v} is (v vᵀ + v vᵀ) / 1
        for i in 0..3 {
            assert_eq!(s.mean[i], 0.0);
            for j in 0..3 {
                assert!((s.cov.at(i, j) - 2.0 * v[i] * v[j]).abs() < 1e-12);
            }
        }
        let same = feature_stats(&[v.to_vec(), v.to_vec(), v.to_vec()]).unwrap();
        assert!(same.cov.data.iter().all(|&c| c == 0.0));
        let shifted: Vec<Vec<f64>> = [v.to_vec(), neg_of(&v)].iter().map(|f| f.iter().map(|x| x + 3.0).collect()).collect();
        assert!(feature_stats(&shifted).unwrap().mean.iter().all(|&m| (m - 3.0).abs() < 1e-12));
        assert!(feature_stats(&[v.to_vec()]).is_err());
    }

    fn neg_of(v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| -x).collect()
    }

    #[test]
    fn recon_metrics_match_loop() {
        let mut rng = Rng::new(2);
        let pairs: Vec<_> = (0..5)
            .map(|_| (random_image(&mut rng, [2, 4, 6], ValueRange::Unit).unwrap(), random_image(&mut rng, [2, 4, 6], ValueRange::Unit).unwrap()))
            .collect();
        let m = recon_metrics(&pairs).unwrap();
        let (mut rec, mut lo, mut hi) = (0.0, 0.0, 0.0);
        for (x, y) in &pairs {
            let mut s = 0.0;
            for i in 0..x.data().len() {
                s += ((x.data()[i] - y.data()[i]) as f64).powi(2);
            }
            rec += s / x.data().len() as f64;
            let (a, b) = (dwt2_haar(x).unwrap(), dwt2_haar(y).unwrap());
            let band = |p: &crate::Tensor<f32>, q: &crate::Tensor<f32>| p.data().iter().zip(q.data()).map(|(u, v)| ((u - v) as f64).powi(2)).sum::<f64>();
            lo += band(&a.ll, &b.ll) / a.ll.len() as f64;
            hi += (band(&a.lh, &b.lh) + band(&a.hl, &b.hl) + band(&a.hh, &b.hh)) / (3 * a.ll.len()) as f64;
        }
        assert!((m.rec - rec / 5.0).abs() < 1e-6);
        assert!((m.low - lo / 5.0).abs() < 1e-6);
        assert!((m.high - hi / 5.0).abs() < 1e-6);
        let same: Vec<_> = pairs.iter().map(|(x, _)| (x.clone(), x.clone())).collect();
        assert_eq!(recon_metrics(&same).unwrap(), ReconMetrics::default());
        assert!(recon_metrics(&[]).is_err());
    }

    #[test]
    fn nmse_definition_and_ranking() {
        let mut rng = Rng::new(5);
        let x = random_image(&mut rng, [1, 2, 2], ValueRange::Unit).unwrap();
        let zero = ImageTensor::new(crate::Tensor::zeros(&[1, 2, 2]), ValueRange::Unit).unwrap();
        let pairs = vec![(x.clone(), zero), (x.clone(), x.clone())];
        let r = per_class_nmse(&pairs, &[Some(4), Some(1)]).unwrap();
        assert_eq!(r, vec![ClassNmse { class: 1, nmse: 0.0, count: 1 }, ClassNmse { class: 4, nmse: 1.0, count: 1 }]);
        assert_eq!(top_k(&r, 1).unwrap()[0].class, 4);
        assert!(top_k(&r, 3).is_err());
        assert!(per_class_nmse(&pairs, &[Some(1), None]).is_err());
        let tied = [ClassNmse { class: 9, nmse: 0.5, count: 1 }, ClassNmse { class: 2, nmse: 0.5, count: 1 }];
        assert_eq!(top_k(&tied, 2).unwrap()[0].class, 2);
    }

    #[test]
    fn identical_audit_is_zero() {
        let mut rng = Rng::new(6);
        let imgs: Vec<_> = (0..3).map(|_| random_image(&mut rng, [3, 16, 16], ValueRange::Unit).unwrap()).collect();
        let pairs: Vec<_> = imgs.iter().map(|x| (x.clone(), x.clone())).collect();
        let stack = RandomFeatureStack::new(3, DEFAULT_FEATURE_SEED);
        let r = audit_report(&pairs, &[None, None, None], &stack, &stack).unwrap();
        assert_eq!((r.rec_loss, r.low_freq_loss, r.high_freq_loss, r.perceptual_proxy, r.feature_frechet), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(r.per_class.is_empty());
    }
}
