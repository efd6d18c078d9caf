//! Binary NetPBM: P5 grayscale and P6 color, maxval 255 only.
//!
//! Maps are `[H,W]`/`[1,H,W]` (gray) or `[3,H,W]` (color) tensors in `[0,1]`.

use std::path::Path;

use crate::metrics::quantize;
use crate::tensorlab::Tensor;
use crate::{DcfmError, Result};

/// Header plus payload of a P5 file.
pub fn encode_pgm(map: &Tensor) -> Vec<u8> {
    let (h, w) = plane_dims(map);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    out
}

/// Header plus interleaved RGB payload of a P6 file.
pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let [3, h, w] = *image.shape() else { panic!("color image must be [3,H,W], got {:?}", image.shape()) };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize(image.data()[c * plane + p]));
        }
    }
    out
}

fn plane_dims(map: &Tensor) -> (usize, usize) {
    match *map.shape() {
        [h, w] | [1, h, w] => (h, w),
        ref s => panic!("grayscale map must be [H,W] or [1,H,W], got {s:?}"),
    }
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(map)).map_err(|e| DcfmError::io(path, e))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)).map_err(|e| DcfmError::io(path, e))
}

/// Decode a P5 (to `[1,H,W]`) or P6 (to `[3,H,W]`) buffer.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            let shown = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
            return Err(DcfmError::format(path, format!("bad magic number {shown:?}, expected P5 or P6")));
        }
    };
    cur.pos = 2;
    let w = cur.number(path, "width")?;
    let h = cur.number(path, "height")?;
    let maxval = cur.number(path, "maxval")?;
    if maxval != 255 {
        return Err(DcfmError::format(path, format!("maxval {maxval} unsupported, expected 255")));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(DcfmError::format(path, "missing whitespace after maxval")),
    }
    let plane = w * h;
    let need = plane * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(DcfmError::format(
            path,
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    let data = if channels == 1 {
        payload[..need].iter().map(|&b| b as f64 / 255.0).collect()
    } else {
        (0..need).map(|i| payload[(i % plane) * 3 + i / plane] as f64 / 255.0).collect()
    };
    Ok(Tensor::new(&[channels, h, w], data)?)
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| DcfmError::io(path, e))?;
    decode(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, path: &Path, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(DcfmError::format(path, format!("truncated header: missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DcfmError::format(path, format!("unreadable {what}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_bit_exact() {
        let bytes = encode_pgm(&Tensor::zeros(&[64, 64]));
        let header = b"P5\n64 64\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 4096);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn color_roundtrip() {
        let img = Tensor::from_fn(&[3, 2, 3], |i| i as f64 / 17.0);
        let back = decode(&encode_ppm(&img), Path::new("mem")).unwrap();
        assert_eq!(back.shape(), &[3, 2, 3]);
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        assert_eq!(decode(&bytes, Path::new("mem")).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn errors_name_the_offense() {
        let p = Path::new("x.pgm");
        let e = decode(b"P2\n1 1\n255\n\0", p).unwrap_err().to_string();
        assert!(e.contains("magic"), "{e}");
        let e = decode(b"P5\n4 4\n255\n\0\0", p).unwrap_err().to_string();
        assert!(e.contains("truncated"), "{e}");
        let e = decode(b"P5\n1 1\n65535\n\0\0", p).unwrap_err().to_string();
        assert!(e.contains("maxval"), "{e}");
        let e = decode(b"P5\n1", p).unwrap_err().to_string();
        assert!(e.contains("truncated header"), "{e}");
    }
}
