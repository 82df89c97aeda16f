//! Small dense symmetric linear algebra in 64-bit.

use crate::error::{bail, Result};
use alloc::vec;
use alloc::vec::Vec;

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            assert_eq!(r.len(), n, "matrix must be square");
            data.extend_from_slice(r);
        }
        Self { n, data }
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.data[i * d.len() + i] = v;
        }
        m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.set(j, i, self.at(i, j));
            }
        }
        out
    }

    pub fn add_scaled(&self, other: &Matrix, s: f64) -> Matrix {
        Matrix { n: self.n, data: self.data.iter().zip(&other.data).map(|(a, b)| a + s * b).collect() }
    }

    /// `(A + Aᵀ) / 2`
    pub fn symmetrized(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.n {
            for j in 0..i {
                let v = 0.5 * (self.at(i, j) + self.at(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.n {
            for j in 0..i {
                m = m.max(libm::fabs(self.at(i, j) - self.at(j, i)));
            }
        }
        m
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matrix whose columns are eigenvectors.
pub fn sym_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.n;
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m.at(i, j) * m.at(i, j)).sum();
        if libm::sqrt(off) <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 { 1.0 / (theta + libm::sqrt(1.0 + theta * theta)) } else { -1.0 / (-theta + libm::sqrt(1.0 + theta * theta)) };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    ((0..n).map(|i| m.at(i, i)).collect(), v)
}

pub const SYMMETRY_TOL: f64 = 1e-8;
pub const NEGATIVE_EIGEN_TOL: f64 = -1e-6;

/// Principal square root of a symmetric positive semidefinite matrix.
/// Eigenvalues in `[-1e-6, 0)` are treated as zero.
pub fn matrix_sqrt_psd(a: &Matrix) -> Result<Matrix> {
    let asym = a.max_asymmetry();
    if asym > SYMMETRY_TOL {
        bail!(Argument, "matrix is not symmetric (max |a_ij - a_ji| = {:e})", asym);
    }
    let (vals, vecs) = sym_eigen(a);
    if let Some(&bad) = vals.iter().find(|&&l| l < NEGATIVE_EIGEN_TOL) {
        bail!(Argument, "matrix is not positive semidefinite (eigenvalue {:e})", bad);
    }
    let n = a.n;
    let roots: Vec<f64> = vals.iter().map(|&l| libm::sqrt(l.max(0.0))).collect();
    let mut out = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..n).map(|k| vecs.at(i, k) * roots[k] * vecs.at(j, k)).sum();
            out.set(i, j, s);
        }
    }
    Ok(out.symmetrized())
}
