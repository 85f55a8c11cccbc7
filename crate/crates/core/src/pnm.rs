//! Binary PPM (P6) and PGM (P5) image files, 8-bit with maxval 255 only.
//! Bytes map to reals by /255 on read and round(v·255) on write; mask reads
//! binarize at the conventional threshold of 128.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Whitespace-and-comment-aware tokenizer over a PNM header.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Header<'a> {
    fn skip_filler(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if is_space(b) {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_filler();
        let start = self.pos;
        while self.pos < self.bytes.len()
            && !is_space(self.bytes[self.pos])
            && self.bytes[self.pos] != b'#'
        {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::format(self.path, "header ended early"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(self.path, "non-ASCII header token"))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::format(self.path, format!("{what} is not a number: {tok:?}")))
    }

    /// Exactly one whitespace byte separates the maxval from the payload.
    fn payload(self) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() || !is_space(self.bytes[self.pos]) {
            return Err(Error::format(self.path, "missing separator before payload"));
        }
        Ok(&self.bytes[self.pos + 1..])
    }
}

fn parse(path: &Path, magic: &str, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut header = Header {
        bytes,
        pos: 0,
        path,
    };
    let found = header.token()?;
    if found != magic {
        return Err(Error::format(
            path,
            format!("expected {magic} file, found magic {found:?}"),
        ));
    }
    let width = header.number("width")?;
    let height = header.number("height")?;
    let maxval = header.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("only maxval 255 is supported, found {maxval}"),
        ));
    }
    let channels = if magic == "P6" { 3 } else { 1 };
    let want = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format(path, "image dimensions overflow"))?;
    let payload = header.payload()?;
    if payload.len() < want {
        return Err(Error::format(
            path,
            format!("payload truncated: {} bytes, need {want}", payload.len()),
        ));
    }
    if payload.len() > want {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after payload", payload.len() - want),
        ));
    }
    Ok((width, height, payload.to_vec()))
}

/// Read a P6 color image into `[3,H,W]` with values in [0,1].
pub fn read_ppm<F: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, payload) = parse(path, "P6", &bytes)?;
    let mut data = vec![F::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = F::of_f64(payload[(y * w + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Read a P5 grayscale image into `[1,H,W]` with values in [0,1].
pub fn read_pgm<F: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, payload) = parse(path, "P5", &bytes)?;
    let data = payload
        .iter()
        .map(|&b| F::of_f64(b as f64 / 255.0))
        .collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Read a P5 file as a binary mask: bytes ≥ 128 become 1, the rest 0.
pub fn read_pgm_mask<F: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, payload) = parse(path, "P5", &bytes)?;
    let data = payload
        .iter()
        .map(|&b| if b >= 128 { F::one() } else { F::zero() })
        .collect();
    Tensor::from_vec(&[1, h, w], data)
}

fn quantize<F: Scalar>(v: F) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write `[3,H,W]` values in [0,1] as a P6 file (atomically).
pub fn write_ppm<F: Scalar>(path: impl AsRef<Path>, image: &Tensor<F>) -> Result<()> {
    let path = path.as_ref();
    let dims = image.dims();
    if dims.len() != 3 || dims[0] != 3 {
        return Err(Error::shape(format!(
            "P6 writer wants [3,H,W], got {dims:?}"
        )));
    }
    let (h, w) = (dims[1], dims[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(quantize(data[(c * h + y) * w + x]));
            }
        }
    }
    atomic_write(path, &bytes)
}

/// Write `[1,H,W]` values in [0,1] as a P5 file (atomically). Binary masks
/// land on exactly 0 and 255.
pub fn write_pgm<F: Scalar>(path: impl AsRef<Path>, image: &Tensor<F>) -> Result<()> {
    let path = path.as_ref();
    let dims = image.dims();
    if dims.len() != 3 || dims[0] != 1 {
        return Err(Error::shape(format!(
            "P5 writer wants [1,H,W], got {dims:?}"
        )));
    }
    let (h, w) = (dims[1], dims[2]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| quantize(v)));
    atomic_write(path, &bytes)
}
