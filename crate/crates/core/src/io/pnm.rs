//! Binary netpbm: P6 (RGB, read) and P5 (grayscale, read and write), maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, one byte per pixel.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Malformed("missing netpbm magic".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n') | Some(b'\r')) {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Malformed(format!(
                "header field {} is not a number",
                i + 1
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Malformed(format!("header field {} overflows", i + 1)))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Malformed(
            "header must end with one whitespace byte".into(),
        ));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Malformed(format!(
            "zero image extent {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(Error::Unsupported(format!(
            "maxval {maxval} (only 255 is supported)"
        )));
    }
    Ok(Header {
        magic,
        width,
        height,
        data_start: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let data = &bytes[h.data_start.min(bytes.len())..];
    if data.len() < need {
        return Err(Error::Malformed(format!(
            "truncated payload: {} of {need} bytes",
            data.len()
        )));
    }
    Ok(&data[..need])
}

/// Decodes a binary P6 image into a `(1, 3, H, W)` tensor scaled to `[0, 1]`.
pub fn decode_ppm<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let h = parse_magic(bytes, *b"P6")?;
    let data = payload(bytes, &h, 3)?;
    let shape = Shape::new(1, 3, h.height, h.width);
    let mut t = Tensor::zeros(shape);
    let scale = T::from_f64(1.0 / 255.0);
    for (i, px) in data.chunks_exact(3).enumerate() {
        let (row, col) = (i / h.width, i % h.width);
        for (c, &v) in px.iter().enumerate() {
            t.set(0, c, row, col, T::from_f64(v as f64) * scale);
        }
    }
    Ok(t)
}

fn parse_magic(bytes: &[u8], want: [u8; 2]) -> Result<Header> {
    if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1] != want[1] {
        return Err(Error::Unsupported(format!(
            "netpbm type P{} (expected P{})",
            bytes[1] as char, want[1] as char
        )));
    }
    let h = parse_header(bytes)?;
    debug_assert_eq!(h.magic, want);
    Ok(h)
}

pub fn read_ppm<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_magic(bytes, *b"P5")?;
    let data = payload(bytes, &h, 1)?;
    GrayImage::new(h.width, h.height, data.to_vec())
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_ppm_is_ones() {
        let mut bytes = b"P6\n# comment\n2 2\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        let t = decode_ppm::<f64>(&bytes).unwrap();
        assert_eq!(t, Tensor::ones([1, 3, 2, 2]));
    }

    #[test]
    fn channel_order_is_rgb() {
        let mut bytes = b"P6 1 1 255 ".to_vec();
        bytes.extend([255u8, 0, 51]);
        let t = decode_ppm::<f64>(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            decode_ppm::<f32>(b"P3\n1 1\n255\n0 0 0\n"),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            decode_ppm::<f32>(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            decode_ppm::<f32>(b"P6\n2 2\n255\n\0\0\0"),
            Err(Error::Malformed(_))
        ));
        assert!(matches!(
            decode_ppm::<f32>(b"P6\nx"),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 128, 254, 255]).unwrap();
        let bytes = encode_pgm(&img);
        assert_eq!(bytes.len(), b"P5\n3 2\n255\n".len() + 6);
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }
}
