//! Level-1 orthonormal Haar transform on `(C, H, W)` images.
//!
//! For every 2x2 block `[[a, b], [c, d]]` the subbands are
//!
//! ```text
//! ll = (a + b + c + d) / 2     lh = (a - b + c - d) / 2
//! hl = (a + b - c - d) / 2     hh = (a - b - c + d) / 2
//! ```
//!
//! which is the row filter pair `(1, 1)/√2`, `(1, -1)/√2` followed by the
//! same pair along columns. `lh` is the vertical low-pass of the row
//! details, `hl` the vertical detail of the row low-pass. The transform is
//! orthonormal, so subband energy equals pixel energy.

use crate::error::{bail, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::tensor::Tensor;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormScheme {
    None,
    AffinePerSubband,
}

/// Affine map `v -> (v - offset) / scale`, one pair per subband in the order
/// `[ll, lh, hl, hh]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormParams {
    pub scheme: NormScheme,
    pub scale: [f32; 4],
    pub offset: [f32; 4],
}

impl NormParams {
    pub fn identity() -> Self {
        Self { scheme: NormScheme::None, scale: [1.0; 4], offset: [0.0; 4] }
    }

    /// Parameters for images in `range`.
    ///
    /// `ll` spans `[2 lo, 2 hi]`; it is centered on its midpoint `lo + hi` and
    /// divided by `2 (hi - lo)`. Detail bands keep offset 0 and share the
    /// same scale. For unit-range input this is scale 2 everywhere, offset 1
    /// on `ll`, and every subband lands inside `[-0.5, 0.5]`.
    pub fn affine_for(range: ValueRange) -> Self {
        let (lo, hi) = range.bounds();
        let s = 2.0 * (hi - lo);
        Self { scheme: NormScheme::AffinePerSubband, scale: [s; 4], offset: [lo + hi, 0.0, 0.0, 0.0] }
    }

    pub fn for_scheme(scheme: NormScheme, range: ValueRange) -> Self {
        match scheme {
            NormScheme::None => Self::identity(),
            NormScheme::AffinePerSubband => Self::affine_for(range),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|&s| !(s > 0.0)) {
            bail!(Argument, "normalization scales must be strictly positive: {:?}", self.scale);
        }
        Ok(())
    }

    pub fn forward(&self, band: usize, v: f32) -> f32 {
        (v - self.offset[band]) / self.scale[band]
    }

    pub fn inverse(&self, band: usize, v: f32) -> f32 {
        v * self.scale[band] + self.offset[band]
    }
}

/// The four level-1 subbands, each `(C, H/2, W/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub ll: Tensor<f32>,
    pub lh: Tensor<f32>,
    pub hl: Tensor<f32>,
    pub hh: Tensor<f32>,
    /// Present once the bands have been normalized.
    pub norm_state: Option<NormParams>,
    /// Range of the image the bands came from, when known.
    pub source_range: Option<ValueRange>,
}

impl SubbandSet {
    pub fn new(ll: Tensor<f32>, lh: Tensor<f32>, hl: Tensor<f32>, hh: Tensor<f32>) -> Result<Self> {
        let s = Self { ll, lh, hl, hh, norm_state: None, source_range: None };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.ll.rank() != 3 {
            bail!(Dimension, "subbands must be (C, h, w), ll is {:?}", self.ll.shape());
        }
        for (name, b) in [("lh", &self.lh), ("hl", &self.hl), ("hh", &self.hh)] {
            if b.shape() != self.ll.shape() {
                bail!(Dimension, "subband {} has shape {:?}, ll has {:?}", name, b.shape(), self.ll.shape());
            }
        }
        Ok(())
    }

    pub fn bands(&self) -> [&Tensor<f32>; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    fn bands_mut(&mut self) -> [&mut Tensor<f32>; 4] {
        [&mut self.ll, &mut self.lh, &mut self.hl, &mut self.hh]
    }

    /// `(C, h, w)` of each band.
    pub fn band_shape(&self) -> [usize; 3] {
        let s = self.ll.shape();
        [s[0], s[1], s[2]]
    }

    pub fn energy(&self) -> f64 {
        self.bands().iter().map(|b| b.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sum()
    }
}

/// Forward transform. Fails when `H` or `W` is odd.
pub fn dwt2_haar(x: &ImageTensor) -> Result<SubbandSet> {
    let [c, h, w] = x.shape();
    let s = dwt2_raw(x.tensor(), c, h, w)?;
    Ok(SubbandSet { source_range: x.range(), ..s })
}

fn dwt2_raw(t: &Tensor<f32>, c: usize, h: usize, w: usize) -> Result<SubbandSet> {
    if h % 2 != 0 {
        bail!(Dimension, "height {} is odd; level-1 Haar needs even height", h);
    }
    if w % 2 != 0 {
        bail!(Dimension, "width {} is odd; level-1 Haar needs even width", w);
    }
    let (hh2, ww2) = (h / 2, w / 2);
    let n = c * hh2 * ww2;
    let (mut ll, mut lh, mut hl, mut hh) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let px = t.data();
    for ch in 0..c {
        let plane = &px[ch * h * w..(ch + 1) * h * w];
        for y in 0..hh2 {
            let r0 = &plane[2 * y * w..2 * y * w + w];
            let r1 = &plane[(2 * y + 1) * w..(2 * y + 1) * w + w];
            for x in 0..ww2 {
                let (a, b, cc, d) = (r0[2 * x], r0[2 * x + 1], r1[2 * x], r1[2 * x + 1]);
                ll.push(0.5 * (a + b + cc + d));
                lh.push(0.5 * (a - b + cc - d));
                hl.push(0.5 * (a + b - cc - d));
                hh.push(0.5 * (a - b - cc + d));
            }
        }
    }
    let shape = [c, hh2, ww2];
    Ok(SubbandSet {
        ll: Tensor::from_vec(&shape, ll),
        lh: Tensor::from_vec(&shape, lh),
        hl: Tensor::from_vec(&shape, hl),
        hh: Tensor::from_vec(&shape, hh),
        norm_state: None,
        source_range: None,
    })
}

/// Raw inverse transform to a `(C, H, W)` tensor.
pub fn idwt2_tensor(s: &SubbandSet) -> Result<Tensor<f32>> {
    s.check()?;
    if s.norm_state.is_some() {
        bail!(State, "subbands are normalized; denormalize before the inverse transform");
    }
    let [c, hh2, ww2] = s.band_shape();
    let (h, w) = (2 * hh2, 2 * ww2);
    let mut out = alloc::vec![0.0f32; c * h * w];
    let (ll, lh, hl, hh) = (s.ll.data(), s.lh.data(), s.hl.data(), s.hh.data());
    for ch in 0..c {
        for y in 0..hh2 {
            for x in 0..ww2 {
                let i = (ch * hh2 + y) * ww2 + x;
                let (a0, a1, a2, a3) = (ll[i], lh[i], hl[i], hh[i]);
                let o = ch * h * w + 2 * y * w + 2 * x;
                out[o] = 0.5 * (a0 + a1 + a2 + a3);
                out[o + 1] = 0.5 * (a0 - a1 + a2 - a3);
                out[o + w] = 0.5 * (a0 + a1 - a2 - a3);
                out[o + w + 1] = 0.5 * (a0 - a1 - a2 + a3);
            }
        }
    }
    Ok(Tensor::from_vec(&[c, h, w], out))
}

/// Inverse transform. The result carries the source range tag when known,
/// without clamping (use [`ImageTensor::clamped`] for that).
pub fn idwt2_haar(s: &SubbandSet) -> Result<ImageTensor> {
    let t = idwt2_tensor(s)?;
    ImageTensor::residual(t)
}

pub fn normalize_subbands(s: &SubbandSet, scheme: NormScheme) -> Result<SubbandSet> {
    if s.norm_state.is_some() {
        bail!(State, "subbands are already normalized");
    }
    let params = match scheme {
        NormScheme::None => NormParams::identity(),
        NormScheme::AffinePerSubband => {
            let Some(range) = s.source_range else {
                bail!(Argument, "affine normalization needs the source value range");
            };
            NormParams::affine_for(range)
        }
    };
    normalize_with(s, params)
}

/// Normalize with explicit parameters.
pub fn normalize_with(s: &SubbandSet, params: NormParams) -> Result<SubbandSet> {
    if s.norm_state.is_some() {
        bail!(State, "subbands are already normalized");
    }
    params.validate()?;
    let mut out = s.clone();
    for (k, band) in out.bands_mut().into_iter().enumerate() {
        for v in band.data_mut() {
            *v = params.forward(k, *v);
        }
    }
    out.norm_state = Some(params);
    Ok(out)
}

pub fn denormalize_subbands(s: &SubbandSet) -> Result<SubbandSet> {
    let Some(params) = s.norm_state else {
        bail!(State, "subbands are not normalized");
    };
    let mut out = s.clone();
    for (k, band) in out.bands_mut().into_iter().enumerate() {
        for v in band.data_mut() {
            *v = params.inverse(k, *v);
        }
    }
    out.norm_state = None;
    Ok(out)
}

/// Stack the detail bands as `(3C, h, w)`: `[lh(0..C), hl(0..C), hh(0..C)]`.
pub fn pack_high(s: &SubbandSet) -> Tensor<f32> {
    let [c, h, w] = s.band_shape();
    let mut data = Vec::with_capacity(3 * c * h * w);
    data.extend_from_slice(s.lh.data());
    data.extend_from_slice(s.hl.data());
    data.extend_from_slice(s.hh.data());
    Tensor::from_vec(&[3 * c, h, w], data)
}

/// Inverse of [`pack_high`]; returns `(lh, hl, hh)`.
pub fn unpack_high(packed: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    if packed.rank() != 3 || packed.shape()[0] % 3 != 0 {
        bail!(Dimension, "packed detail tensor must be (3C, h, w), got {:?}", packed.shape());
    }
    let (c3, h, w) = (packed.shape()[0], packed.shape()[1], packed.shape()[2]);
    let c = c3 / 3;
    let n = c * h * w;
    let d = packed.data();
    let part = |k: usize| Tensor::from_vec(&[c, h, w], d[k * n..(k + 1) * n].to_vec());
    Ok((part(0), part(1), part(2)))
}

/// Reassemble a subband set from `ll` and packed details.
pub fn from_parts(ll: Tensor<f32>, packed_high: &Tensor<f32>, norm_state: Option<NormParams>) -> Result<SubbandSet> {
    let (lh, hl, hh) = unpack_high(packed_high)?;
    let mut s = SubbandSet::new(ll, lh, hl, hh)?;
    s.norm_state = norm_state;
    Ok(s)
}

/// Mean squared error between the `ll` bands and between the concatenated
/// detail bands of two images, on unnormalized subbands.
pub fn frequency_losses(x: &ImageTensor, xhat: &ImageTensor) -> Result<(f64, f64)> {
    if x.shape() != xhat.shape() {
        bail!(Dimension, "frequency_losses: shapes differ {:?} vs {:?}", x.shape(), xhat.shape());
    }
    let a = dwt2_haar(x)?;
    let b = dwt2_haar(xhat)?;
    let sq = |p: &Tensor<f32>, q: &Tensor<f32>| -> f64 {
        p.data().iter().zip(q.data()).map(|(&u, &v)| {
            let d = u as f64 - v as f64;
            d * d
        }).sum()
    };
    let n = a.ll.len() as f64;
    let low = sq(&a.ll, &b.ll) / n;
    let high = (sq(&a.lh, &b.lh) + sq(&a.hl, &b.hl) + sq(&a.hh, &b.hh)) / (3.0 * n);
    Ok((low, high))
}
