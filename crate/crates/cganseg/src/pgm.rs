//! Binary PGM (P5) image I/O.
//!
//! Readers accept 8-bit and 16-bit rasters (16-bit samples are
//! big-endian per the format) and `#` comments in the header. Writers
//! emit a minimal fixed header, so identical pixels always produce
//! identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image as stored on disk, before any preprocessing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// Maximum sample value declared by the header (1..=65535).
    pub maxval: u16,
    /// Row-major samples, one per pixel.
    pub pixels: Vec<u16>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, maxval: u16, pixels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if maxval == 0 {
            return Err(Error::InvalidArgument(
                "maxval must be at least 1".into(),
            ));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(&bad) = pixels.iter().find(|&&p| p > maxval) {
            return Err(Error::InvalidArgument(format!(
                "sample {bad} exceeds maxval {maxval}"
            )));
        }
        Ok(Self {
            width,
            height,
            maxval,
            pixels,
        })
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space_and_comments(&mut self) -> Result<()> {
        loop {
            while self.pos < self.bytes.len()
                && self.bytes[self.pos].is_ascii_whitespace()
            {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return Ok(());
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Format(format!("missing {what} in PGM header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("unreadable {what} in PGM header")))
    }
}

/// Parses a binary (P5) PGM file.
pub fn read_pgm(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> Result<RawImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format(
            "not a binary PGM (expected magic 'P5')".into(),
        ));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!(
            "maxval must be in 1..=65535, got {maxval}"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::Format(
            "missing whitespace before raster data".into(),
        ));
    }
    cur.pos += 1;

    let npix = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let wide = maxval > 255;
    let expected = npix * if wide { 2 } else { 1 };
    let raster = &bytes[cur.pos..];
    if raster.len() < expected {
        return Err(Error::Format(format!(
            "truncated raster: {} bytes, expected {expected}",
            raster.len()
        )));
    }
    if raster.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after raster",
            raster.len() - expected
        )));
    }
    let pixels: Vec<u16> = if wide {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        raster.iter().map(|&b| u16::from(b)).collect()
    };
    RawImage::new(width, height, maxval as u16, pixels)
}

/// Writes an 8-bit binary PGM (maxval 255).
pub fn write_pgm8(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "image dimensions must be positive, got {width}x{height}"
        )));
    }
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Writes a 16-bit binary PGM (maxval 65535, big-endian samples).
pub fn write_pgm16(path: &Path, width: usize, height: usize, pixels: &[u16]) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "image dimensions must be positive, got {width}x{height}"
        )));
    }
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &p in pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
