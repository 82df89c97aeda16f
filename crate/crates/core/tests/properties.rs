use favae_core::audit::{feature_stats, frechet_distance, per_class_nmse, top_k, FeatureStats};
use favae_core::linalg::Matrix;
use favae_core::rng::Rng;
use favae_core::spectrum::{average_spectra, band_energy, power_spectrum, radial_profile};
use favae_core::synth::random_image;
use favae_core::wavelet::*;
use favae_core::{ImageTensor, ValueRange};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn image_strategy(max_half: usize) -> impl Strategy<Value = ImageTensor> {
    (1usize..=3, 1..=max_half, 1..=max_half, any::<u64>()).prop_map(|(c, hh, hw, seed)| {
        random_image(&mut Rng::new(seed), [c, 2 * hh, 2 * hw], ValueRange::Unit).unwrap()
    })
}

fn energy(x: &ImageTensor) -> f64 {
    x.data().iter().map(|&v| v as f64 * v as f64).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perfect_reconstruction_and_parseval(x in image_strategy(16)) {
        let s = dwt2_haar(&x).unwrap();
        let back = idwt2_haar(&s).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
        let e = energy(&x);
        prop_assert!((s.energy() - e).abs() <= 1e-4 * e.max(1e-12));
    }

    #[test]
    fn linearity(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut rng = Rng::new(seed);
        let x = random_image(&mut rng, [2, 6, 8], ValueRange::Unit).unwrap();
        let y = random_image(&mut rng, [2, 6, 8], ValueRange::Unit).unwrap();
        let mix = ImageTensor::residual(x.tensor().zip_map(y.tensor(), |p, q| a * p + b * q).unwrap()).unwrap();
        let (sx, sy, sm) = (dwt2_haar(&x).unwrap(), dwt2_haar(&y).unwrap(), dwt2_haar(&mix).unwrap());
        for k in 0..4 {
            for ((p, q), m) in sx.bands()[k].data().iter().zip(sy.bands()[k].data()).zip(sm.bands()[k].data()) {
                prop_assert!((a * p + b * q - m).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normalization_and_packing_invert(x in image_strategy(8), symmetric in any::<bool>()) {
        let range = if symmetric { ValueRange::Symmetric } else { ValueRange::Unit };
        let x = ImageTensor::new(x.tensor().map(|v| if symmetric { 2.0 * v - 1.0 } else { v }), range).unwrap();
        let s = dwt2_haar(&x).unwrap();
        let n = normalize_subbands(&s, NormScheme::AffinePerSubband).unwrap();
        for b in n.bands() {
            prop_assert!(b.data().iter().all(|v| v.abs() <= 0.5 + 1e-6));
        }
        let back = denormalize_subbands(&n).unwrap();
        for k in 0..4 {
            for (p, q) in s.bands()[k].data().iter().zip(back.bands()[k].data()) {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }
        let packed = pack_high(&n);
        let re = from_parts(n.ll.clone(), &packed, n.norm_state).unwrap();
        prop_assert_eq!(re.bands(), n.bands());
        prop_assert_eq!(re.norm_state, n.norm_state);
    }

    #[test]
    fn frequency_losses_nonnegative(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = random_image(&mut rng, [3, 8, 8], ValueRange::Unit).unwrap();
        let y = random_image(&mut rng, [3, 8, 8], ValueRange::Unit).unwrap();
        prop_assert_eq!(frequency_losses(&x, &x).unwrap(), (0.0, 0.0));
        let (l, h) = frequency_losses(&x, &y).unwrap();
        prop_assert!(l >= 0.0 && h >= 0.0);
    }

    #[test]
    fn spectrum_symmetry_and_accounting(seed in any::<u64>(), cutoff in 0.05f64..0.95) {
        let mut rng = Rng::new(seed);
        let r = ImageTensor::residual(rng.normal_tensor(&[2, 16, 8])).unwrap();
        let g = power_spectrum(&r).unwrap();
        let (h, w) = (16, 8);
        let total = g.total();
        for y in 1..h {
            for x in 1..w {
                let a = g.at(y, x);
                let b = g.at(h - y, w - x);
                prop_assert!((a - b).abs() <= 1e-5 * total.max(1e-12));
            }
        }
        let e = energy(&r) / 2.0;
        prop_assert!((total - e).abs() <= 1e-4 * e);
        let (lo, hi) = band_energy(&g, cutoff).unwrap();
        prop_assert!((lo + hi - total).abs() <= 1e-6 * total);
        let prof = radial_profile(&g, 7).unwrap();
        let acc: f64 = prof.iter().map(|b| b.mean_power * b.population as f64).sum();
        prop_assert!((acc - total).abs() <= 1e-4 * total);
    }

    #[test]
    fn average_spectra_is_order_free(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut pairs: Vec<_> = (0..4).map(|_| (random_image(&mut rng, [1, 8, 8], ValueRange::Unit).unwrap(), random_image(&mut rng, [1, 8, 8], ValueRange::Unit).unwrap())).collect();
        let a = average_spectra(&pairs).unwrap();
        pairs.reverse();
        let b = average_spectra(&pairs).unwrap();
        for (p, q) in a.psd.iter().zip(&b.psd) {
            prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }
}

fn random_stats(rng: &mut Rng, d: usize) -> FeatureStats {
    let n = 3 * d + 2;
    let mix: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
    let feats: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let g: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            (0..d).map(|i| (0..d).map(|j| mix[i * d + j] * g[j]).sum::<f64>() + rng.uniform()).collect()
        })
        .collect();
    feature_stats(&feats).unwrap()
}

/// The literal `Tr((Σa Σb)^½)` via the eigenvalues of the non-symmetric product.
fn literal_frechet(a: &FeatureStats, b: &FeatureStats) -> f64 {
    let d = a.mean.len();
    let ma = DMatrix::from_row_slice(d, d, &a.cov.data);
    let mb = DMatrix::from_row_slice(d, d, &b.cov.data);
    let prod = &ma * &mb;
    let tr_sqrt: f64 = prod.complex_eigenvalues().iter().map(|z| z.sqrt().re).sum();
    let mu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    mu + ma.trace() + mb.trace() - 2.0 * tr_sqrt
}

#[test]
fn frechet_symmetric_form_matches_literal_form() {
    let mut rng = Rng::new(77);
    for d in 1..=3 {
        for _ in 0..50 {
            let (a, b) = (random_stats(&mut rng, d), random_stats(&mut rng, d));
            let f = frechet_distance(&a, &b).unwrap();
            let r = frechet_distance(&b, &a).unwrap();
            let lit = literal_frechet(&a, &b);
            assert!(f >= 0.0);
            assert!((f - r).abs() < 1e-6, "{f} vs {r}");
            assert!((f - lit).abs() < 1e-5, "d={d}: {f} vs {lit}");
        }
    }
}

#[test]
fn frechet_with_fewer_samples_than_dimensions() {
    let mut rng = Rng::new(5);
    let feats: Vec<Vec<f64>> = (0..4).map(|_| (0..10).map(|_| rng.normal()).collect()).collect();
    let other: Vec<Vec<f64>> = (0..4).map(|_| (0..10).map(|_| rng.normal()).collect()).collect();
    let d = frechet_distance(&feature_stats(&feats).unwrap(), &feature_stats(&other).unwrap()).unwrap();
    assert!(d.is_finite() && d > 0.0);
}

#[test]
fn diagonal_identity_check() {
    let a = FeatureStats { mean: vec![0.0, 0.0], cov: Matrix::identity(2), n: 10 };
    assert_eq!(frechet_distance(&a, &a.clone()).unwrap(), 0.0);
}

#[test]
fn class_ranking_ignores_pair_order() {
    let mut rng = Rng::new(3);
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for k in 0..12 {
        let x = random_image(&mut rng, [1, 4, 4], ValueRange::Unit).unwrap();
        let y = ImageTensor::clamped(x.tensor().map(|v| v * (1.0 - 0.05 * (k % 4) as f32)), ValueRange::Unit).unwrap();
        pairs.push((x, y));
        labels.push(Some(k % 4));
    }
    let a = top_k(&per_class_nmse(&pairs, &labels).unwrap(), 4).unwrap();
    let perm = Rng::new(9).permutation(pairs.len());
    let pp: Vec<_> = perm.iter().map(|&i| pairs[i].clone()).collect();
    let lp: Vec<_> = perm.iter().map(|&i| labels[i]).collect();
    let b = top_k(&per_class_nmse(&pp, &lp).unwrap(), 4).unwrap();
    assert_eq!(a.iter().map(|c| c.class).collect::<Vec<_>>(), vec![3, 2, 1, 0]);
    assert_eq!(a.iter().map(|c| c.class).collect::<Vec<_>>(), b.iter().map(|c| c.class).collect::<Vec<_>>());
    for (p, q) in a.iter().zip(&b) {
        assert!((p.nmse - q.nmse).abs() < 1e-12);
    }
}
