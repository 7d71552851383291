//! Minimal binary PGM (P5) reader/writer for masks and label maps.
//!
//! Masks are written with 0/255 samples; reading thresholds at 127. Label
//! maps store the class id directly in the sample byte.

use std::fs;
use std::path::Path;

use crate::partition::BinaryMask;
use crate::{Error, Result};

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let samples: Vec<u8> = mask
        .bits()
        .iter()
        .map(|&b| if b == 1 { 255 } else { 0 })
        .collect();
    write_gray(path, mask.width(), mask.height(), &samples)
}

/// Pixels brighter than 127 become foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let (width, height, samples) = read_gray(path)?;
    let bits = samples.iter().map(|&b| (b > 127) as u8).collect();
    BinaryMask::from_bits(height, width, bits)
}

pub fn write_gray(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    samples: &[u8],
) -> Result<()> {
    if samples.len() != width * height {
        return Err(Error::shape(format!(
            "{} samples for a {width}x{height} image",
            samples.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(samples);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_gray(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(
            0,
            "not a binary PGM (P5 magic missing)".to_string(),
        ));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in &mut fields {
        *field = read_header_int(&bytes, &mut pos)?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            pos as u64,
            format!("maxval {maxval} outside 1..=255"),
        ));
    }
    // exactly one whitespace byte separates the header from the samples
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(
            pos as u64,
            "missing whitespace before samples".to_string(),
        ));
    }
    pos += 1;
    let expected = width * height;
    if bytes.len() - pos < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated: {} of {expected} samples present",
                bytes.len() - pos
            ),
        ));
    }
    Ok((width, height, bytes[pos..pos + expected].to_vec()))
}

fn read_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // skip whitespace and '#' comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(
            start as u64,
            "expected an ASCII integer".to_string(),
        ));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(start as u64, "unparseable header integer".to_string()))
}
