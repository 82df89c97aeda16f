//! Dense row-major arrays.

use crate::error::{bail, Result};
use crate::real::Real;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// Panics if `data.len()` does not match the shape; callers construct
    /// data and shape together.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn try_from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            bail!(Dimension, "shape {:?} needs {} elements, got {}", shape, shape.iter().product::<usize>(), data.len());
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// `(N, C, H, W)` view of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            bail!(Dimension, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            bail!(Dimension, "shape mismatch {:?} vs {:?}", self.shape, other.shape);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| U::of(v.as_f64())).collect() }
    }

    /// Select batch items `idx` of a tensor whose first axis is the batch.
    pub fn gather_batch(&self, idx: &[usize]) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(per * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let Some(first) = items.first() else {
            bail!(Argument, "cannot stack an empty list");
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                bail!(Dimension, "cannot stack {:?} with {:?}", first.shape, t.shape);
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Item `i` along the leading axis.
    pub fn index0(&self, i: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        Self { shape: self.shape[1..].to_vec(), data: self.data[i * per..(i + 1) * per].to_vec() }
    }

    /// Channels `start..start+len` of an `(N, C, H, W)` tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4();
        if start + len > c {
            bail!(Dimension, "channel slice {}..{} out of range for {:?}", start, start + len, self.shape);
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Self { shape: vec![n, len, h, w], data })
    }

    /// Concatenate `(N, Ca, H, W)` and `(N, Cb, H, W)` along channels.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.rank() != 4 || b.rank() != 4 {
            bail!(Dimension, "concat needs rank-4 tensors, got {:?} and {:?}", a.shape, b.shape);
        }
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        if (n, h, w) != (nb, hb, wb) {
            bail!(Dimension, "cannot concatenate {:?} with {:?}", a.shape, b.shape);
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&a.data[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&b.data[i * cb * plane..(i + 1) * cb * plane]);
        }
        Ok(Self { shape: vec![n, ca + cb, h, w], data })
    }

    /// Nearest-neighbour resampling of `(N, C, H, W)` to `(N, C, oh, ow)`.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &self.data[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                let sy = (y * h) / oh;
                for x in 0..ow {
                    data.push(plane[sy * w + (x * w) / ow]);
                }
            }
        }
        Self { shape: vec![n, c, oh, ow], data }
    }
}
