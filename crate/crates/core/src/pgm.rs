//! Binary 8-bit PGM (`P5`) images.

use std::fs;
use std::path::Path;

use crate::error::{format_err, Result};
use crate::tensor::Grid;

pub fn encode_pgm(img: &Grid<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Grid<u8>> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(format_err("PGM", "expected P5 magic"));
    }
    let width = parse_num(next_token(bytes, &mut pos)?)?;
    let height = parse_num(next_token(bytes, &mut pos)?)?;
    let maxval = parse_num(next_token(bytes, &mut pos)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err("PGM", format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err("PGM", "missing raster separator"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| format_err("PGM", "image too large"))?;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format_err("PGM", format!("raster truncated: need {n} bytes")))?;
    if pos + n != bytes.len() {
        return Err(format_err("PGM", "trailing bytes after raster"));
    }
    Grid::new(height, width, raster.to_vec()).map_err(|e| format_err("PGM", e.to_string()))
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err(format_err("PGM", "truncated header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_num(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err("PGM", format!("bad header number {:?}", String::from_utf8_lossy(tok))))
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Grid<u8>) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Grid<u8>> {
    decode_pgm(&fs::read(path)?)
}

/// `round(255·v)` for values in `[0, 1]`.
pub fn to_u8_image(values: &Grid<f64>) -> Grid<u8> {
    values.map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
}

pub fn to_unit_image(img: &Grid<u8>) -> Grid<f64> {
    img.map(|&v| f64::from(v) / 255.0)
}
