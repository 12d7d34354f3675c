//! On-disk formats: raw tensor files, 8-bit PGM images, dataset manifests
//! and `key = value` configuration text.

mod manifest;
mod pgm;
mod tensor;

pub use manifest::{Manifest, ManifestEntry, Role};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use tensor::{decode_tensor, encode_tensor, read_tensor, write_tensor, Dtype};

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid2D;

/// Loads a single-channel image from a `.vt` tensor file or a `.pgm`.
pub fn read_image(path: &Path) -> Result<Grid2D> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path),
        _ => {
            let t = read_tensor(path)?;
            Grid2D::from_tensor(&t).map_err(|e| Error::format(path, e.to_string()))
        }
    }
}

/// Writes `img` in the format implied by the extension (`.pgm`, else raw f32).
pub fn write_image(path: &Path, img: &Grid2D) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => write_pgm(path, img),
        _ => write_tensor(path, &img.to_tensor(), Dtype::F32),
    }
}

/// Splits `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values() {
        let kv = parse_key_values("# c\nlambda1 = 30\n\n  seed=7  # trailing\n").unwrap();
        assert_eq!(kv, vec![("lambda1".into(), "30".into()), ("seed".into(), "7".into())]);
        assert!(parse_key_values("lambda1 30").is_err());
        assert!(parse_key_values("= 3").is_err());
    }

    #[test]
    fn pgm_and_raw_agree_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Grid2D::from_fn(7, 9, |r, c| ((r * 9 + c) as f64 * 0.0137).fract());
        let (p, t) = (dir.path().join("a.pgm"), dir.path().join("a.vt"));
        write_image(&p, &img).unwrap();
        write_image(&t, &img).unwrap();
        let (a, b) = (read_image(&p).unwrap(), read_image(&t).unwrap());
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }
}
