//! Radix-2 complex FFT on `(re, im)` pairs in 64-bit.

use alloc::vec::Vec;

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// Largest power of two `<= n` (`n >= 1`).
pub fn floor_power_of_two(n: usize) -> usize {
    debug_assert!(n > 0);
    1 << (usize::BITS - 1 - n.leading_zeros())
}

/// In-place unnormalized forward transform `X_k = Σ x_n e^{-2πi kn/N}`.
/// `re.len()` must be a power of two.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert!(is_power_of_two(n) && im.len() == n, "fft length {n} must be a power of two");
    let bits = n.trailing_zeros();
    if bits == 0 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let ang = -2.0 * core::f64::consts::PI / len as f64;
        // twiddles computed directly per index to avoid drift from repeated products
        let tw: Vec<(f64, f64)> = (0..half).map(|k| (libm::cos(ang * k as f64), libm::sin(ang * k as f64))).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (wr, wi) = tw[k];
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// 2-D forward transform of a real `h x w` plane, row-major; returns `(re, im)`.
pub fn fft2_real(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = plane.to_vec();
    let mut im = alloc::vec![0.0; h * w];
    for y in 0..h {
        fft_in_place(&mut re[y * w..(y + 1) * w], &mut im[y * w..(y + 1) * w]);
    }
    let mut cr = alloc::vec![0.0; h];
    let mut ci = alloc::vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            cr[y] = re[y * w + x];
            ci[y] = im[y * w + x];
        }
        fft_in_place(&mut cr, &mut ci);
        for y in 0..h {
            re[y * w + x] = cr[y];
            im[y * w + x] = ci[y];
        }
    }
    (re, im)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dft(re: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = re.len();
        let mut or = alloc::vec![0.0; n];
        let mut oi = alloc::vec![0.0; n];
        for k in 0..n {
            for (j, &x) in re.iter().enumerate() {
                let a = -2.0 * core::f64::consts::PI * (k * j) as f64 / n as f64;
                or[k] += x * a.cos();
                oi[k] += x * a.sin();
            }
        }
        (or, oi)
    }

    #[test]
    fn matches_direct_dft() {
        let x: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64) - 1.3).collect();
        let (er, ei) = dft(&x);
        let mut re = x.clone();
        let mut im = alloc::vec![0.0; 16];
        fft_in_place(&mut re, &mut im);
        for k in 0..16 {
            assert!((re[k] - er[k]).abs() < 1e-9 && (im[k] - ei[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn powers_of_two() {
        assert!(is_power_of_two(1) && is_power_of_two(64) && !is_power_of_two(48) && !is_power_of_two(0));
        assert_eq!(floor_power_of_two(48), 32);
        assert_eq!(floor_power_of_two(64), 64);
        assert_eq!(floor_power_of_two(1), 1);
    }
}
