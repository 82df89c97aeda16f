//! Named-tensor container: the magic `FAVAE1`, a `u32` tensor count, then
//! per tensor a `u32` name length, the UTF-8 name, a `u32` rank, `u32`
//! dims and raw `f32` values. Everything is little-endian.

use favae_core::Tensor;
use std::path::Path;

pub const MAGIC: &[u8; 6] = b"FAVAE1";

#[derive(Debug, thiserror::Error)]
pub enum TensorFileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a tensor file (bad magic)")]
    Magic,
    #[error("tensor file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor name is not UTF-8")]
    Name,
    #[error("tensor {name}: {detail}")]
    Shape { name: String, detail: String },
}

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], TensorFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(TensorFileError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, TensorFileError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors, TensorFileError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(TensorFileError::Magic);
    }
    let mut c = Cursor { buf: bytes, pos: MAGIC.len() };
    let count = c.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?).map_err(|_| TensorFileError::Name)?.to_owned();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u32("dims")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| TensorFileError::Shape { name: name.clone(), detail: format!("element count of {shape:?} overflows") })?;
        let raw = c.take(n.checked_mul(4).ok_or(TensorFileError::Truncated("values"))?, "values")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::try_from_vec(&shape, data).map_err(|e| TensorFileError::Shape { name: name.clone(), detail: e.to_string() })?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<NamedTensors, TensorFileError> {
    let bytes = std::fs::read(path).map_err(|source| TensorFileError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}

pub fn write(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<(), TensorFileError> {
    crate::fsutil::atomic_write(path, &encode(tensors)).map_err(|source| TensorFileError::Io { path: path.display().to_string(), source })
}

/// Look up a tensor by name.
pub fn get<'a>(tensors: &'a [(String, Tensor<f32>)], name: &str) -> Option<&'a Tensor<f32>> {
    tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t = vec![
            ("a".to_string(), Tensor::from_vec(&[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e10, f32::NAN, 7.0])),
            ("ünï".to_string(), Tensor::scalar(2.0)),
        ];
        let bytes = encode(&t);
        assert_eq!(&bytes[..6], b"FAVAE1");
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, a), (n2, b)) in t.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(TensorFileError::Truncated(_))));
        assert!(matches!(decode(b"nope"), Err(TensorFileError::Magic)));
    }
}
