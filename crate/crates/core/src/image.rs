use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit raster with 1 (PGM) or 3 (PPM) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("Raster::new", format!("channels must be 1 or 3, got {channels}")));
        }
        if width == 0 || height == 0 || pixels.len() != width * height * channels {
            return Err(Error::invalid(
                "Raster::new",
                format!("{width}x{height}x{channels} does not match {} bytes", pixels.len()),
            ));
        }
        Ok(Raster { width, height, channels, pixels })
    }

    /// Planar [C,H,W] tensor scaled to [0,1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            f32::from(self.pixels[p * c + ch]) / 255.0
        })
    }

    /// Inverse of `to_tensor`; values are clamped to [0,1] and rounded.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        let mut pixels = vec![0u8; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                let v = t.data()[ch * h * w + p].clamp(0.0, 1.0);
                pixels[p * c + ch] = (v * 255.0).round() as u8;
            }
        }
        Raster::new(w, h, c, pixels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |detail: &str| Error::Image { path: path.into(), detail: detail.into() };
        let channels = match bytes.get(..2) {
            Some(b"P6") => 3,
            Some(b"P5") => 1,
            _ => return Err(err("only binary PPM (P6) and PGM (P5) are supported")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err(err("header ends early")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("expected a decimal header field"))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(err("missing whitespace after maxval"));
        }
        if fields[2] != 255 {
            return Err(err("only maxval 255 is supported"));
        }
        let body = &bytes[pos + 1..];
        let expected = fields[0] * fields[1] * channels;
        if body.len() != expected {
            return Err(err(&format!("expected {expected} pixel bytes, found {}", body.len())));
        }
        Raster::new(fields[0], fields[1], channels, body.to_vec())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Raster::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comment() {
        let r = Raster::new(2, 1, 3, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let enc = r.encode();
        assert_eq!(&enc[..11], b"P6\n2 1\n255\n");
        assert_eq!(Raster::decode(&enc, Path::new("a")).unwrap(), r);
        let commented = b"P5 # gray\n2 2\n# max\n255\n\x00\x10\x20\x30";
        let g = Raster::decode(commented, Path::new("b")).unwrap();
        assert_eq!((g.width, g.height, g.channels), (2, 2, 1));
        assert_eq!(g.pixels, vec![0, 16, 32, 48]);
    }

    #[test]
    fn tensor_conversion_is_planar() {
        let r = Raster::new(2, 1, 3, vec![0, 51, 255, 255, 0, 0]).unwrap();
        let t = r.to_tensor();
        assert_eq!(t.dims(), &[3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.0, 1.0, 0.0]);
        assert_eq!(Raster::from_tensor(&t).unwrap(), r);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(Raster::decode(b"P3\n1 1\n255\n0 0 0", Path::new("c")).is_err());
        assert!(Raster::decode(b"P5\n2 2\n255\n\x00", Path::new("d")).is_err());
    }
}
