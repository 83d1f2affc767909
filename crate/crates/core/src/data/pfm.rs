//! Portable float map (grayscale `Pf`) disparity files.
//!
//! Written files are little-endian (scale `-1.0`) with rows stored bottom
//! to top. Values are stored as `f32`; fields whose values are exactly
//! representable in `f32` round-trip bit-exactly.

use std::fs;
use std::path::Path;

use super::types::DisparityField;
use crate::diffcore::{Array, Shape};
use crate::error::{Error, Result};

pub fn encode_pfm(field: &DisparityField) -> Vec<u8> {
    let (w, h) = (field.width(), field.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(field.get(y, x) as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(field: &DisparityField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(field)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<DisparityField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes).map_err(|(offset, reason)| Error::Parse {
        path: path.to_path_buf(),
        offset,
        reason,
    })
}

type ParseResult<T> = std::result::Result<T, (usize, String)>;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self, what: &str) -> ParseResult<&str> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err((start, format!("expected {what}, found end of file")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| (start, format!("expected {what}, found non-ASCII bytes")))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> ParseResult<T> {
        let start = {
            self.skip_ws();
            self.pos
        };
        let tok = self.token(what)?;
        tok.parse()
            .map_err(|_| (start, format!("expected {what}, found {tok:?}")))
    }
}

/// Parses a PFM byte stream; errors carry the byte offset of the problem.
pub fn decode_pfm(bytes: &[u8]) -> ParseResult<DisparityField> {
    let mut cur = Cursor { bytes, pos: 0 };
    match cur.token("PFM magic")? {
        "Pf" => {}
        "PF" => return Err((0, "color PFM is not a disparity field".into())),
        other => return Err((0, format!("bad magic {other:?}"))),
    }
    let w: usize = cur.number("width")?;
    let h: usize = cur.number("height")?;
    if w == 0 || h == 0 {
        return Err((cur.pos, format!("empty dimensions {w}x{h}")));
    }
    let scale_at = {
        cur.skip_ws();
        cur.pos
    };
    let scale: f64 = cur.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err((scale_at, format!("invalid scale {scale}")));
    }
    let little = scale < 0.0;
    // exactly one whitespace byte separates the header from the payload
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err((cur.pos, "missing separator after scale".into()));
    }
    let payload_start = cur.pos + 1;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .ok_or((payload_start, "dimensions overflow".to_string()))?;
    let have = bytes.len() - payload_start;
    if have < need {
        return Err((
            bytes.len(),
            format!("truncated payload: expected {need} bytes, found {have}"),
        ));
    }
    let mut data = vec![0.0; w * h];
    for (i, chunk) in bytes[payload_start..payload_start + need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        if !v.is_finite() {
            return Err((payload_start + 4 * i, format!("non-finite value {v}")));
        }
        let (row_from_bottom, x) = (i / w, i % w);
        data[(h - 1 - row_from_bottom) * w + x] = v as f64;
    }
    let array = Array::new(Shape::plane(h, w), data).map_err(|e| (payload_start, e.to_string()))?;
    DisparityField::new(array).map_err(|e| (payload_start, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_defines_dimensions() {
        let mut bytes = b"Pf\n3 2\n-1.0\n".to_vec();
        for v in [0.0f32, 1.0, 2.0, 0.5, 1.5, 2.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let f = decode_pfm(&bytes).unwrap();
        assert_eq!((f.width(), f.height()), (3, 2));
        // first stored row is the bottom row
        assert_eq!(f.get(1, 0), 0.0);
        assert_eq!(f.get(0, 2), 2.5);
    }

    #[test]
    fn big_endian_scale_is_byte_swapped() {
        // hand-built vector: 2x1, scale +1.0, values 1.5 and 0.25 big-endian
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&[0x3f, 0xc0, 0x00, 0x00]);
        bytes.extend_from_slice(&[0x3e, 0x80, 0x00, 0x00]);
        let f = decode_pfm(&bytes).unwrap();
        assert_eq!(f.get(0, 0), 1.5);
        assert_eq!(f.get(0, 1), 0.25);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let (off, _) = decode_pfm(b"P5\n3 2\n-1.0\n").unwrap_err();
        assert_eq!(off, 0);
        let (off, msg) = decode_pfm(b"Pf\n3 x\n-1.0\n").unwrap_err();
        assert_eq!(off, 5);
        assert!(msg.contains("height"));
        let mut bytes = b"Pf\n3 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&[0u8; 20]);
        let (off, msg) = decode_pfm(&bytes).unwrap_err();
        assert_eq!(off, bytes.len());
        assert!(msg.contains("truncated"));
    }

    #[test]
    fn color_pfm_rejected() {
        assert!(decode_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").is_err());
    }
}
