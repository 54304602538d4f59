//! Binary PPM (P6). 8-bit files hold gamma-encoded images, 16-bit files
//! (big-endian samples) hold linear ones.

use std::path::Path;

use crate::colorops::{ColorSpace, Image};
use crate::error::{Error, Result};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            format: "PPM",
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{what} out of range")))
    }
}

/// Parses P6 bytes. `path` is used only for error messages.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut c = Cursor { bytes, pos: 0, path };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(c.err("missing P6 magic"));
    }
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(c.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(c.err(format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected single whitespace after maxval")),
    }
    let wide = maxval > 255;
    let samples = width * height * 3;
    let need = samples * if wide { 2 } else { 1 };
    let payload = &bytes[c.pos..];
    if payload.len() < need {
        return Err(c.err(format!("truncated payload: need {need} bytes, found {}", payload.len())));
    }
    if payload.len() > need {
        c.pos += need;
        return Err(c.err(format!("{} trailing bytes after payload", payload.len() - need)));
    }
    let max = maxval as f64;
    let pixels: Vec<f64> = if wide {
        payload.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / max).collect()
    } else {
        payload.iter().map(|&b| b as f64 / max).collect()
    };
    if pixels.iter().any(|&v| v > 1.0) {
        return Err(c.err("sample exceeds maxval"));
    }
    let space = if wide { ColorSpace::Linear } else { ColorSpace::GammaEncoded };
    Image::new(width, height, pixels, space)
}

/// Serializes at the bit depth implied by the image's color space. Values are
/// clamped to `[0, 1]` and rounded to the nearest code.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let maxval: u32 = match img.space() {
        ColorSpace::GammaEncoded => 255,
        ColorSpace::Linear => 65535,
    };
    let mut out = format!("P6\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    let quant = |v: f64| (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
    if maxval == 255 {
        out.extend(img.pixels().iter().map(|&v| quant(v) as u8));
    } else {
        for &v in img.pixels() {
            out.extend_from_slice(&(quant(v) as u16).to_be_bytes());
        }
    }
    out
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem.ppm")
    }

    #[test]
    fn single_red_pixel() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\x00\x00", p()).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.space(), ColorSpace::GammaEncoded);
    }

    #[test]
    fn sixteen_bit_half_gray() {
        let mut bytes = b"P6 1 1 65535\n".to_vec();
        for _ in 0..3 {
            bytes.extend_from_slice(&32768u16.to_be_bytes());
        }
        let img = decode_ppm(&bytes, p()).unwrap();
        assert_eq!(img.space(), ColorSpace::Linear);
        assert!((img.pixel(0, 0)[0] - 32768.0 / 65535.0).abs() < 1e-15);
        assert!((img.pixel(0, 0)[0] - 0.50000763).abs() < 1e-8);
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_ppm(b"P6\n# made by hand\n2 1 # dims\n255\n\x01\x02\x03\x04\x05\x06", p()).unwrap();
        assert_eq!(img.width(), 2);
    }

    #[test]
    fn malformed_inputs_report_position() {
        let err = decode_ppm(b"P5\n1 1\n255\n\x00", p()).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        let err = decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00", p()).unwrap_err();
        match err {
            Error::Format { offset, detail, .. } => {
                assert_eq!(offset, 11);
                assert!(detail.contains("truncated"), "{detail}");
            }
            e => panic!("{e}"),
        }
        assert!(decode_ppm(b"P6\n1 x\n255\n", p()).is_err());
        assert!(decode_ppm(b"P6\n1 1\n70000\n", p()).is_err());
        assert!(decode_ppm(b"P6\n1 1\n255\n\x00\x00\x00\x00", p()).is_err());
        assert!(decode_ppm(b"P6\n1 1\n100\n\x00\xff\x00", p()).is_err());
    }

    proptest! {
        #[test]
        fn eight_bit_files_roundtrip_bytewise(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let mut s = seed;
            let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
            for _ in 0..w * h * 3 {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                bytes.push((s >> 56) as u8);
            }
            let img = decode_ppm(&bytes, p()).unwrap();
            prop_assert_eq!(encode_ppm(&img), bytes);
        }

        #[test]
        fn sixteen_bit_images_roundtrip(codes in proptest::collection::vec(0u16..=65535, 12)) {
            let vals: Vec<f64> = codes.iter().map(|&c| c as f64 / 65535.0).collect();
            let img = Image::new(2, 2, vals, ColorSpace::Linear).unwrap();
            let back = decode_ppm(&encode_ppm(&img), p()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
