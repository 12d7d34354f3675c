//! Binary 8-bit PGM (`P5`) images.

use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::grid::Grid2D;

/// Quantizes values in [0, 1] to 8 bits (round to nearest).
pub fn encode_pgm(img: &Grid2D) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.values().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Grid2D> {
    let bad = |reason: &str| Error::format(path, reason);
    let mut pos = 0;
    let mut next_token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header truncated"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_token()? != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let mut num = || -> Result<usize> { next_token()?.parse().map_err(|_| bad("bad header number")) };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let raster = bytes.get(start..).unwrap_or(&[]);
    if raster.len() != w * h {
        return Err(bad("raster size does not match header"));
    }
    let vals = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
    Grid2D::new(h, w, vals).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_pgm(path: &Path, img: &Grid2D) -> Result<()> {
    write_file(path, &encode_pgm(img))
}

pub fn read_pgm(path: &Path) -> Result<Grid2D> {
    decode_pgm(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_header_and_rounds() {
        let img = Grid2D::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(encode_pgm(&img), b"P5\n3 1\n255\n\x00\x80\xff".to_vec());
    }

    #[test]
    fn decode_with_comment() {
        let b = b"P5 # hi\n2 1\n# c\n255\n\x00\xff";
        let g = decode_pgm(b, Path::new("m")).unwrap();
        assert_eq!(g.values(), &[0.0, 1.0]);
        assert!(decode_pgm(b"P2\n1 1\n255\n0", Path::new("m")).is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00", Path::new("m")).is_err());
    }

    #[test]
    fn round_trip_is_within_half_a_level() {
        let img = Grid2D::from_fn(5, 6, |r, c| (r as f64 * 0.17 + c as f64 * 0.031).fract());
        let back = decode_pgm(&encode_pgm(&img), Path::new("m")).unwrap();
        for (a, b) in img.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }
}
