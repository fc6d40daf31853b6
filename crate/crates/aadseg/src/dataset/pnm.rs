//! Binary PGM ("P5", maxval 255) reading and writing.
//!
//! Images quantize as `round(255·v)` with half away from zero; masks use
//! exactly {0, 255}. Only this variant is accepted — 16-bit maxvals, ASCII
//! PGMs, and comment lines are rejected as format errors.

use super::raster::{Mask, Raster};
use crate::error::{Error, Result};
use std::path::Path;

pub fn write_image_pgm(path: &Path, img: &Raster) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    write_p5(path, img.width, img.height, &bytes)
}

pub fn write_mask_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    write_p5(path, mask.width, mask.height, &bytes)
}

fn write_p5(path: &Path, width: usize, height: usize, payload: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_image_pgm(path: &Path) -> Result<Raster> {
    let (width, height, payload) = read_p5(path)?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Raster { width, height, data })
}

pub fn read_mask_pgm(path: &Path) -> Result<Mask> {
    let (width, height, payload) = read_p5(path)?;
    let mut data = Vec::with_capacity(payload.len());
    for &b in &payload {
        match b {
            0 => data.push(0u8),
            255 => data.push(1u8),
            other => {
                return Err(Error::format(
                    path,
                    format!("mask pixel value {other} is neither 0 nor 255"),
                ))
            }
        }
    }
    Ok(Mask { width, height, data })
}

fn read_p5(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(path, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in &mut fields {
        // skip whitespace
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text.parse().map_err(|_| Error::format(path, "malformed header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero-sized raster"));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "malformed header"));
    }
    pos += 1;
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {expected}", payload.len()),
        ));
    }
    Ok((width, height, payload.to_vec()))
}
