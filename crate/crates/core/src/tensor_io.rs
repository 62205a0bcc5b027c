use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MSFT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::MalformedHeader { path: path.into(), detail: format!("header ends before {what}") })
}

/// Parses a TensorFile image; `path` is used only for error messages.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let version = read_u32(bytes, 4, path, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { path: path.into(), version });
    }
    let dtype = read_u32(bytes, 8, path, "dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype { path: path.into(), dtype });
    }
    let ndim = read_u32(bytes, 12, path, "ndim")? as usize;
    if ndim == 0 {
        return Err(Error::MalformedHeader { path: path.into(), detail: "ndim is 0".into() });
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let d = read_u32(bytes, 16 + 4 * i, path, "dims")? as usize;
        if d == 0 {
            return Err(Error::MalformedHeader { path: path.into(), detail: format!("dim {i} is 0") });
        }
        dims.push(d);
    }
    let start = 16 + 4 * ndim;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::MalformedHeader { path: path.into(), detail: "dims overflow".into() })?;
    let payload = &bytes[start..];
    if payload.len() < count {
        return Err(Error::TruncatedPayload { path: path.into(), expected: count, found: payload.len() });
    }
    if payload.len() > count {
        return Err(Error::MalformedHeader {
            path: path.into(),
            detail: format!("{} trailing bytes after payload", payload.len() - count),
        });
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"MSFT");
        assert_eq!(&b[4..20], &[1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn distinct_errors() {
        let t = Tensor::full(&[3, 4, 5], 0.5);
        let good = encode_tensor(&t);
        let p = Path::new("x.msft");

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad, p), Err(Error::BadMagic { .. })));

        let short = &good[..good.len() - 4];
        assert!(matches!(
            decode_tensor(short, p),
            Err(Error::TruncatedPayload { expected: 240, found: 236, .. })
        ));

        let mut dt = good.clone();
        dt[8] = 1;
        assert!(matches!(decode_tensor(&dt, p), Err(Error::UnsupportedDtype { dtype: 1, .. })));

        let mut ver = good;
        ver[4] = 2;
        assert!(matches!(decode_tensor(&ver, p), Err(Error::UnsupportedVersion { version: 2, .. })));
        assert!(matches!(decode_tensor(b"MSFT\x01\0", p), Err(Error::MalformedHeader { .. })));
    }
}
