//! Binary PGM (P5) and PPM (P6) reading and 8-bit writing.

use favae_core::{ImageTensor, Tensor, ValueRange};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PnmError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a binary PGM/PPM file (magic {0:?}); only P5 and P6 are supported")]
    Magic(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("cannot write {0} channels; PGM needs 1 and PPM needs 3")]
    Channels(usize),
}

/// Decoded pixels scaled to `[0, 1]`, channel-planar `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PnmImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl PnmImage {
    /// Keep the central `h x w` window.
    pub fn center_crop(&self, h: usize, w: usize) -> PnmImage {
        let (y0, x0) = ((self.height - h) / 2, (self.width - w) / 2);
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in 0..h {
                let row = (c * self.height + y0 + y) * self.width + x0;
                data.extend_from_slice(&self.data[row..row + w]);
            }
        }
        PnmImage { channels: self.channels, height: h, width: w, data }
    }

    /// Convert to an image in `range` (unit values are mapped affinely).
    pub fn into_image(self, range: ValueRange) -> favae_core::Result<ImageTensor> {
        let (lo, hi) = range.bounds();
        let data = self.data.into_iter().map(|v| lo + v * (hi - lo)).collect();
        ImageTensor::from_vec([self.channels, self.height, self.width], data, range)
    }
}

fn header_fields(bytes: &[u8]) -> Result<([usize; 3], usize), PnmError> {
    let mut fields = [0usize; 3];
    let mut pos = 2;
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(PnmError::Header("unexpected end of header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PnmError::Header(format!("expected a number at byte {start}")));
        }
        *f = std::str::from_utf8(&bytes[start..pos]).unwrap().parse().map_err(|_| PnmError::Header("number too large".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((fields, pos + 1)),
        _ => Err(PnmError::Header("missing whitespace after maxval".into())),
    }
}

pub fn decode(bytes: &[u8]) -> Result<PnmImage, PnmError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        other => return Err(PnmError::Magic(String::from_utf8_lossy(other.unwrap_or(bytes)).into_owned())),
    };
    let ([width, height, maxval], start) = header_fields(bytes)?;
    if width == 0 || height == 0 || !(1..=65535).contains(&maxval) {
        return Err(PnmError::Header(format!("invalid size {width}x{height} or maxval {maxval}")));
    }
    let sample = if maxval < 256 { 1 } else { 2 };
    let expected = width * height * channels * sample;
    let body = &bytes[start..];
    if body.len() < expected {
        return Err(PnmError::Truncated { expected, found: body.len() });
    }
    let mut data = vec![0.0f32; channels * height * width];
    let scale = 1.0 / maxval as f32;
    for i in 0..height * width {
        for c in 0..channels {
            let k = (i * channels + c) * sample;
            let v = if sample == 1 { body[k] as u32 } else { u16::from_be_bytes([body[k], body[k + 1]]) as u32 };
            data[c * height * width + i] = (v.min(maxval as u32)) as f32 * scale;
        }
    }
    Ok(PnmImage { channels, height, width, data })
}

pub fn read(path: &Path) -> Result<PnmImage, PnmError> {
    let bytes = std::fs::read(path).map_err(|source| PnmError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}

fn to_byte(v: f32, range: Option<ValueRange>) -> u8 {
    let (lo, hi) = range.unwrap_or(ValueRange::Unit).bounds();
    let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (u * 255.0).round() as u8
}

/// 8-bit P5 (one channel) or P6 (three channels).
pub fn encode(img: &ImageTensor) -> Result<Vec<u8>, PnmError> {
    let [c, h, w] = img.shape();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(PnmError::Channels(c)),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            out.push(to_byte(img.data()[ch * h * w + i], img.range()));
        }
    }
    Ok(out)
}

pub fn write(path: &Path, img: &ImageTensor) -> Result<(), PnmError> {
    crate::fsutil::atomic_write(path, &encode(img)?).map_err(|source| PnmError::Io { path: path.display().to_string(), source })
}

/// Min/max-stretched 8-bit grayscale of a `(h, w)` plane.
pub fn heatmap(plane: &[f64], h: usize, w: usize) -> Vec<u8> {
    let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

/// Channel mean of a `(C, h, w)` tensor as a heatmap.
pub fn tensor_heatmap(t: &Tensor<f32>) -> Vec<u8> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut plane = vec![0.0f64; h * w];
    for ch in 0..c {
        for (p, &v) in plane.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
            *p += v as f64 / c as f64;
        }
    }
    heatmap(&plane, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_and_comments() {
        let bytes = b"P6\n# comment\n2 2\n255\n\x00\x10\x20\x30\x40\x50\x60\x70\x80\x90\xa0\xff".to_vec();
        let img = decode(&bytes).unwrap();
        assert_eq!((img.channels, img.height, img.width), (3, 2, 2));
        assert_eq!(img.data[0], 0.0);
        assert_eq!(img.data[2 * 4 + 3], 1.0);
        let t = img.into_image(ValueRange::Unit).unwrap();
        let enc = encode(&t).unwrap();
        assert_eq!(&enc[enc.len() - 12..], &bytes[bytes.len() - 12..]);
    }

    #[test]
    fn sixteen_bit_pgm_and_errors() {
        let img = decode(b"P5 2 1 65535\n\xff\xff\x00\x00").unwrap();
        assert_eq!(img.data, vec![1.0, 0.0]);
        assert!(matches!(decode(b"P3\n1 1\n255\n0 0 0"), Err(PnmError::Magic(_))));
        assert!(matches!(decode(b"P5\n2 2\n255\n\x00"), Err(PnmError::Truncated { .. })));
        assert!(matches!(decode(b"P5\n2"), Err(PnmError::Header(_))));
    }

    #[test]
    fn crop_takes_center() {
        let img = PnmImage { channels: 1, height: 3, width: 3, data: (0..9).map(|v| v as f32).collect() };
        assert_eq!(img.center_crop(2, 2).data, vec![0.0, 1.0, 3.0, 4.0]);
    }
}
