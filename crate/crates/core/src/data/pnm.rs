//! Binary Netpbm images: `P6` colour pixmaps and `P5` grey maps, 8 bits per
//! sample.
//!
//! The header is `magic`, width, height and maxval, each pair separated by
//! exactly one whitespace byte, followed by exactly one whitespace byte and
//! the raw payload. Comments are not accepted and maxval must be 255. The
//! writer always emits `"P6\n{w} {h}\n255\n"` (or `P5`), which is also the only
//! form for which `write ∘ read` is the identity on bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAXVAL: usize = 255;

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// 8-bit single channel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument {
                op: "RgbImage",
                detail: format!("{} bytes for {width}×{height}×3", data.len()),
            });
        }
        Ok(Self { width, height, data })
    }

    /// `[3,H,W]` tensor with values `v / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn([3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            f64::from(self.data[p * 3 + c]) / 255.0
        })
    }

    /// Inverse of [`to_tensor`](Self::to_tensor): values are clamped to
    /// `[0, 1]` and rounded to the nearest of 256 levels.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3("RgbImage::from_tensor")?;
        if c != 3 {
            return Err(Error::Shape {
                op: "RgbImage::from_tensor",
                detail: format!("expected 3 channels, got {c}"),
            });
        }
        let src = t.data();
        let mut data = vec![0u8; h * w * 3];
        for ch in 0..3 {
            for p in 0..h * w {
                data[p * 3 + ch] = quantize(src[ch * h * w + p]);
            }
        }
        Ok(Self { width: w, height: h, data })
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument {
                op: "GrayImage",
                detail: format!("{} bytes for {width}×{height}", data.len()),
            });
        }
        Ok(Self { width, height, data })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n{MAXVAL}\n").into_bytes()
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = header("P6", img.width, img.height);
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = header("P5", img.width, img.height);
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, start) = parse_header(bytes, b"P6", "ppm")?;
    let data = payload(bytes, start, width * height * 3, "ppm")?;
    Ok(RgbImage { width, height, data })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (width, height, start) = parse_header(bytes, b"P5", "pgm")?;
    let data = payload(bytes, start, width * height, "pgm")?;
    Ok(GrayImage { width, height, data })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(img))?)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(img))?)
}

fn format_err<T>(what: &'static str, offset: usize, detail: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        what,
        offset,
        detail: detail.into(),
    })
}

fn payload(bytes: &[u8], start: usize, len: usize, what: &'static str) -> Result<Vec<u8>> {
    let rest = &bytes[start..];
    if rest.len() < len {
        return format_err(what, bytes.len(), format!("payload truncated: {} of {len} bytes", rest.len()));
    }
    if rest.len() > len {
        return format_err(what, start + len, format!("{} trailing bytes after payload", rest.len() - len));
    }
    Ok(rest.to_vec())
}

/// Returns `(width, height, payload offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2], what: &'static str) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return format_err(
            what,
            0,
            format!("expected magic {:?}", std::str::from_utf8(magic).unwrap_or("?")),
        );
    }
    let mut pos = 2;
    let mut fields = [(0usize, 0usize); 3];
    for (i, field) in fields.iter_mut().enumerate() {
        separator(bytes, &mut pos, what)?;
        *field = (pos, number(bytes, &mut pos, what, ["width", "height", "maxval"][i])?);
    }
    let [(w_at, width), (_, height), (m_at, maxval)] = fields;
    if width == 0 || height == 0 {
        return format_err(what, w_at, format!("empty image {width}×{height}"));
    }
    if maxval != MAXVAL {
        return format_err(what, m_at, format!("maxval {maxval} unsupported, expected 255"));
    }
    separator(bytes, &mut pos, what)?;
    Ok((width, height, pos))
}

fn separator(bytes: &[u8], pos: &mut usize, what: &'static str) -> Result<()> {
    match bytes.get(*pos) {
        Some(b) if b.is_ascii_whitespace() => {
            *pos += 1;
            Ok(())
        }
        Some(b) => format_err(what, *pos, format!("expected whitespace, found byte 0x{b:02x}")),
        None => format_err(what, *pos, "header truncated"),
    }
}

fn number(bytes: &[u8], pos: &mut usize, what: &'static str, name: &str) -> Result<usize> {
    let start = *pos;
    let digits = bytes[start..].iter().take_while(|b| b.is_ascii_digit()).count();
    if digits == 0 {
        return match bytes.get(start) {
            None => format_err(what, start, "header truncated"),
            Some(b) => format_err(what, start, format!("expected {name} digits, found byte 0x{b:02x}")),
        };
    }
    if digits > 1 && bytes[start] == b'0' {
        return format_err(what, start, format!("{name} has a leading zero"));
    }
    *pos += digits;
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .map_or_else(|| format_err(what, start, format!("{name} out of range")), Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_pgm_layout() {
        let img = GrayImage::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        let mut want = b"P5\n2 2\n255\n".to_vec();
        want.extend_from_slice(&[0, 1, 2, 0]);
        assert_eq!(encode_pgm(&img), want);
        assert_eq!(decode_pgm(&want).unwrap(), img);
    }

    #[test]
    fn rejects_bad_headers_with_offsets() {
        let err = |b: &[u8]| match decode_pgm(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(err(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0"), 7);
        assert_eq!(err(b"P6\n2 2\n255\n\0\0\0\0"), 0);
        assert_eq!(err(b"P5\n2  2\n255\n\0\0\0\0"), 5);
        assert_eq!(err(b"P5\n2 2\n255\n\0\0\0"), 14);
        assert_eq!(err(b"P5\n2 2\n255\n\0\0\0\0\0"), 15);
        assert_eq!(err(b"P5\n# c\n2 2\n255\n\0\0\0\0"), 3);
        assert_eq!(err(b"P5\n2 2\n255"), 10);
    }

    #[test]
    fn tensor_roundtrip_is_exact_on_levels() {
        let img = RgbImage::new(3, 2, (0..18).map(|i| (i * 14) as u8).collect()).unwrap();
        assert_eq!(RgbImage::from_tensor(&img.to_tensor()).unwrap(), img);
    }
}
