//! PFM float maps. The header is a magic line ("Pf" grayscale, "PF"
//! color), a width/height line, and a scale whose sign encodes byte
//! order (negative means little-endian). Rows follow bottom to top as
//! 32-bit floats. Depth maps store zero at invalid pixels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::DepthMap;

/// Decoded PFM payload, rows top to bottom, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmData {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

/// Writes a 1- or 3-channel float map, little-endian, at f32 precision.
pub fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, values: &[f64]) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!("pfm supports 1 or 3 channels, got {channels}")));
    }
    if values.len() != width * height * channels {
        return Err(Error::DimensionMismatch(format!(
            "pfm {}x{}x{} needs {} values, got {}",
            width,
            height,
            channels,
            width * height * channels,
            values.len()
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("pfm values must be finite, got {bad}")));
    }
    let magic = if channels == 1 { "Pf" } else { "PF" };
    let mut out = Vec::with_capacity(32 + values.len() * 4);
    out.extend_from_slice(format!("{magic}\n{width} {height}\n-1.0\n").as_bytes());
    for row in (0..height).rev() {
        let start = row * width * channels;
        for &v in &values[start..start + width * channels] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(Error::Io)
}

/// Reads a PFM file, accepting either byte order.
pub fn read_pfm(path: &Path) -> Result<PfmData> {
    let bytes = fs::read(path).map_err(Error::Io)?;
    let mut cursor = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while cursor < bytes.len() && bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        let start = cursor;
        while cursor < bytes.len() && !bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if start == cursor {
            return Err(Error::Parse("pfm header ended early".into()));
        }
        String::from_utf8(bytes[start..cursor].to_vec())
            .map_err(|_| Error::Parse("pfm header is not ascii".into()))
    };
    let magic = token(&bytes)?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::Parse(format!("bad pfm magic {other:?}"))),
    };
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::Parse("bad pfm width".into()))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::Parse("bad pfm height".into()))?;
    let scale: f64 = token(&bytes)?
        .parse()
        .map_err(|_| Error::Parse("bad pfm scale".into()))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Parse("pfm scale must be finite and nonzero".into()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cursor >= bytes.len() || !bytes[cursor].is_ascii_whitespace() {
        return Err(Error::Parse("pfm header not terminated".into()));
    }
    cursor += 1;
    let count = width * height * channels;
    let payload = &bytes[cursor..];
    if payload.len() != count * 4 {
        return Err(Error::Parse(format!(
            "pfm payload holds {} bytes, expected {}",
            payload.len(),
            count * 4
        )));
    }
    let little = scale < 0.0;
    let mut values = vec![0.0f64; count];
    let row_len = width * channels;
    for file_row in 0..height {
        let image_row = height - 1 - file_row;
        for i in 0..row_len {
            let at = (file_row * row_len + i) * 4;
            let raw: [u8; 4] = payload[at..at + 4].try_into().unwrap();
            let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            values[image_row * row_len + i] = v as f64;
        }
    }
    Ok(PfmData { width, height, channels, values })
}

/// Writes a depth map; invalid pixels become zero.
pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let values: Vec<f64> = depth
        .values()
        .iter()
        .zip(depth.valid_mask())
        .map(|(&v, &ok)| if ok { v } else { 0.0 })
        .collect();
    write_pfm(path, depth.width, depth.height, 1, &values)
}

/// Reads a grayscale PFM as a depth map; nonpositive pixels are invalid.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let data = read_pfm(path)?;
    if data.channels != 1 {
        return Err(Error::Parse(format!(
            "depth maps are single channel, {} has {}",
            path.display(),
            data.channels
        )));
    }
    DepthMap::from_values(data.width, data.height, data.values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_round_trip_preserves_values_and_holes() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = DepthMap::new_invalid(3, 2);
        d.set(0, 0, 1.25);
        d.set(2, 0, 0.5);
        d.set(1, 1, 3.0);
        let path = dir.path().join("depth.pfm");
        write_depth(&path, &d).unwrap();
        let back = read_depth(&path).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn rows_are_stored_bottom_to_top() {
        let dir = tempfile::tempdir().unwrap();
        let d = DepthMap::from_values(1, 2, vec![1.0, 2.0]).unwrap();
        let path = dir.path().join("order.pfm");
        write_depth(&path, &d).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"Pf\n1 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        let payload = &bytes[header.len()..];
        // Bottom row (value 2.0) comes first in the file.
        assert_eq!(&payload[0..4], &2.0f32.to_le_bytes());
        assert_eq!(&payload[4..8], &1.0f32.to_le_bytes());
    }

    #[test]
    fn values_are_stored_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let d = DepthMap::from_values(1, 1, vec![0.1]).unwrap();
        let path = dir.path().join("prec.pfm");
        write_depth(&path, &d).unwrap();
        let back = read_depth(&path).unwrap();
        assert_eq!(back.get(0, 0).unwrap(), 0.1f32 as f64);
    }

    #[test]
    fn big_endian_payloads_are_understood() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        let path = dir.path().join("be.pfm");
        std::fs::write(&path, bytes).unwrap();
        let data = read_pfm(&path).unwrap();
        assert_eq!(data.values, vec![1.5, 2.5]);
    }

    #[test]
    fn color_maps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f64> = (0..2 * 2 * 3).map(|i| i as f64 * 0.25).collect();
        let path = dir.path().join("color.pfm");
        write_pfm(&path, 2, 2, 3, &values).unwrap();
        let data = read_pfm(&path).unwrap();
        assert_eq!(data.channels, 3);
        assert_eq!(data.values, values);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.pfm");
        std::fs::write(&bad, b"Px\n1 1\n-1.0\n\0\0\0\0").unwrap();
        assert!(read_pfm(&bad).is_err());
        let short = dir.path().join("short.pfm");
        std::fs::write(&short, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
        assert!(read_pfm(&short).is_err());
    }
}
