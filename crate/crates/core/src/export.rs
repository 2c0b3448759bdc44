//! Heatmap export as binary PGM or JSON.

use std::path::Path;

use crate::error::{Error, Result};

/// P5 greyscale image, min-max normalised to 0..=255. A constant map is
/// written as all zeros.
pub fn to_pgm(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    check_len(values, width, height)?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Row-major nested arrays, `height` rows of `width` values.
pub fn to_json_rows(values: &[f64], width: usize, height: usize) -> Result<serde_json::Value> {
    check_len(values, width, height)?;
    Ok(values.chunks_exact(width.max(1)).map(|r| r.to_vec()).collect::<Vec<_>>().into())
}

fn check_len(values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height || values.is_empty() {
        return Err(Error::InvalidArgument {
            field: "heatmap",
            message: format!("{} values for a {width}x{height} map", values.len()),
        });
    }
    Ok(())
}

/// Writes `.pgm` as an image and anything else as JSON.
pub fn write_heatmap(path: impl AsRef<Path>, values: &[f64], width: usize, height: usize) -> Result<()> {
    let path = path.as_ref();
    let bytes = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        to_pgm(values, width, height)?
    } else {
        serde_json::to_vec(&to_json_rows(values, width, height)?).expect("json")
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let out = to_pgm(&[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&out[..header.len()], header);
        assert_eq!(&out[header.len()..], &[0, 128, 255, 64]);
    }

    #[test]
    fn constant_map_is_black() {
        let out = to_pgm(&[0.7; 3], 3, 1).unwrap();
        assert!(out.ends_with(&[0, 0, 0]));
    }

    #[test]
    fn json_rows() {
        let v = to_json_rows(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2).unwrap();
        assert_eq!(v, serde_json::json!([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]));
        assert!(to_json_rows(&[1.0], 2, 1).is_err());
    }
}
