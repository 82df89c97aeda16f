use crate::error::{bail, Result};
use crate::tensor::Tensor;
use alloc::vec::Vec;

/// Declared pixel interval of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Symmetric,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
        }
    }

    pub fn clamp(self, v: f32) -> f32 {
        let (lo, hi) = self.bounds();
        v.clamp(lo, hi)
    }

    pub fn name(self) -> &'static str {
        match self {
            ValueRange::Unit => "unit",
            ValueRange::Symmetric => "symmetric",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unit" => Some(ValueRange::Unit),
            "symmetric" => Some(ValueRange::Symmetric),
            _ => None,
        }
    }
}

/// A `(C, H, W)` image with even `H` and `W`.
///
/// Pixel-domain images carry a [`ValueRange`] and every element lies inside
/// it. Residuals (`x - x̂`) carry no range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor<f32>,
    range: Option<ValueRange>,
}

const RANGE_SLACK: f32 = 1e-6;

fn check_shape(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        bail!(Dimension, "image must be (C, H, W), got {:?}", t.shape());
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if c == 0 {
        bail!(Dimension, "image has zero channels");
    }
    if h < 2 || h % 2 != 0 {
        bail!(Dimension, "height {} must be even and >= 2", h);
    }
    if w < 2 || w % 2 != 0 {
        bail!(Dimension, "width {} must be even and >= 2", w);
    }
    Ok((c, h, w))
}

impl ImageTensor {
    pub fn new(data: Tensor<f32>, range: ValueRange) -> Result<Self> {
        check_shape(&data)?;
        let (lo, hi) = range.bounds();
        if let Some(v) = data.data().iter().find(|&&v| !(v >= lo - RANGE_SLACK && v <= hi + RANGE_SLACK)) {
            bail!(Data, "pixel value {} outside declared {} range [{}, {}]", v, range.name(), lo, hi);
        }
        Ok(Self { data, range: Some(range) })
    }

    /// Builds a pixel-domain image, clamping into `range`.
    pub fn clamped(mut data: Tensor<f32>, range: ValueRange) -> Result<Self> {
        check_shape(&data)?;
        for v in data.data_mut() {
            *v = range.clamp(*v);
        }
        Ok(Self { data, range: Some(range) })
    }

    /// A range-free array such as a residual.
    pub fn residual(data: Tensor<f32>) -> Result<Self> {
        check_shape(&data)?;
        Ok(Self { data, range: None })
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f32>, range: ValueRange) -> Result<Self> {
        Self::new(Tensor::try_from_vec(&shape, data)?, range)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.height(), self.width()]
    }

    pub fn range(&self) -> Option<ValueRange> {
        self.range
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn data(&self) -> &[f32] {
        self.data.data()
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    /// `self - other`, as a residual.
    pub fn sub(&self, other: &ImageTensor) -> Result<ImageTensor> {
        if self.shape() != other.shape() {
            bail!(Dimension, "image shapes differ: {:?} vs {:?}", self.shape(), other.shape());
        }
        Ok(ImageTensor { data: self.data.zip_map(&other.data, |a, b| a - b)?, range: None })
    }

    /// Centered crop to `h x w` (both even).
    pub fn center_crop(&self, h: usize, w: usize) -> Result<ImageTensor> {
        let [c, sh, sw] = self.shape();
        if h > sh || w > sw {
            bail!(Dimension, "crop {}x{} larger than image {}x{}", h, w, sh, sw);
        }
        let (y0, x0) = ((sh - h) / 2, (sw - w) / 2);
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let row = (ch * sh + y0 + y) * sw + x0;
                out.extend_from_slice(&self.data.data()[row..row + w]);
            }
        }
        let t = Tensor::try_from_vec(&[c, h, w], out)?;
        check_shape(&t)?;
        Ok(ImageTensor { data: t, range: self.range })
    }
}
