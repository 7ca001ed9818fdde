//! Binary greymap (P5) files with maxval 255.

use std::path::Path;

use super::{Grid, Mask};
use crate::error::{Result, XblError};
use crate::io::{read_file, write_atomic};

/// Quantizes [0, 1] values to bytes with `round(v * 255)`.
pub fn encode_pgm(grid: &Grid<f32>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(
        grid.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> XblError {
        XblError::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
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
            .ok_or_else(|| XblError::Parse {
                offset: start,
                msg: format!("{what} does not fit"),
            })
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Grid<f32>> {
    let mut h = Header { bytes, pos: 0 };
    if !bytes.starts_with(b"P5") {
        return Err(h.err("missing P5 magic"));
    }
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(h.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(h.err(format!("unsupported maxval {maxval}")));
    }
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(h.err("expected a single whitespace before the raster"));
    }
    h.pos += 1;
    let body = &bytes[h.pos..];
    if body.len() != width * height {
        return Err(h.err(format!(
            "raster has {} bytes, expected {}",
            body.len(),
            width * height
        )));
    }
    let scale = maxval as f32;
    Grid::new(height, width, body.iter().map(|&b| b as f32 / scale).collect())
}

pub fn write_pgm(grid: &Grid<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_pgm(grid))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Grid<f32>> {
    decode_pgm(&read_file(path)?)
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_pgm(&mask.to_f32(), path)
}

/// Reads a mask; every pixel must be 0 or maxval.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let g = read_pgm(path)?;
    if g.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(XblError::Dataset(format!(
            "{} is not a binary mask",
            path.display()
        )));
    }
    Ok(g.to_mask())
}
