//! Binary PGM (P5) fixtures for floor masks and depth maps.
//!
//! Masks are 8-bit (255 = floor, 0 = non-floor); depth maps are 16-bit
//! big-endian with `value / 65535` as closeness. Both are row-major, top row first.

use crate::error::{Error, Result};
use crate::grid::{DepthMap, FloorMask};

/// Decoded P5 raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
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
            return Err(Error::Pgm(format!("missing {what}")));
        }
        // at most 9 digits keeps every header value well inside usize
        if self.pos - start > 9 {
            return Err(Error::Pgm(format!("{what} too large")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        s.parse().map_err(|_| Error::Pgm(format!("bad {what}")))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Pgm("not a binary PGM (missing P5 magic)".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Pgm("zero dimension".into()));
    }
    if maxval == 0 || maxval > u16::MAX as usize {
        return Err(Error::Pgm(format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(Error::Pgm("missing whitespace before raster".into())),
    }
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let count = width
        .checked_mul(height)
        .ok_or_else(|| Error::Pgm("dimensions overflow".into()))?;
    let needed = count
        .checked_mul(bytes_per_sample)
        .ok_or_else(|| Error::Pgm("dimensions overflow".into()))?;
    let raster = &bytes[h.pos..];
    if raster.len() < needed {
        return Err(Error::Pgm(format!(
            "raster truncated: {} bytes, expected {needed}",
            raster.len()
        )));
    }
    let samples: Vec<u16> = if bytes_per_sample == 1 {
        raster[..needed].iter().map(|&b| b as u16).collect()
    } else {
        raster[..needed]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if let Some(&s) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(Error::Pgm(format!("sample {s} exceeds maxval {maxval}")));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

/// Samples above half of maxval count as floor.
pub fn mask_from_pgm(bytes: &[u8]) -> Result<FloorMask> {
    let p = parse_pgm(bytes)?;
    let half = p.maxval / 2;
    let bits = p.samples.iter().map(|&s| s > half).collect();
    FloorMask::new(p.width, p.height, bits)
}

pub fn depth_from_pgm(bytes: &[u8]) -> Result<DepthMap> {
    let p = parse_pgm(bytes)?;
    let scale = p.maxval as f64;
    let values = p.samples.iter().map(|&s| s as f64 / scale).collect();
    DepthMap::new(p.width, p.height, values)
}

fn header(width: usize, height: usize, maxval: u16) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

pub fn mask_to_pgm(mask: &FloorMask) -> Vec<u8> {
    let mut out = header(mask.width(), mask.height(), 255);
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Closeness is quantized to the nearest 1/65535.
pub fn depth_to_pgm(depth: &DepthMap) -> Vec<u8> {
    let mut out = header(depth.width(), depth.height(), u16::MAX);
    for &v in depth.values() {
        let q = (v * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}
