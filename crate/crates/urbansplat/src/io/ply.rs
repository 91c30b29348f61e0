//! Minimal ASCII PLY point clouds: xyz floats, RGB bytes, and an
//! optional per-vertex opacity column for Gaussian exports. Floats are
//! printed at nine significant digits, enough to reproduce any f32
//! exactly on read.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::splat::GaussianSet;

/// Point cloud as stored in a PLY file. Colors live in [0, 1] but are
/// quantized to bytes on disk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Option<Vec<f64>>,
}

impl PlyCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.colors.len() != self.positions.len() {
            return Err(Error::DimensionMismatch("ply colors disagree with positions".into()));
        }
        if let Some(op) = &self.opacities {
            if op.len() != self.positions.len() {
                return Err(Error::DimensionMismatch("ply opacities disagree with positions".into()));
            }
        }
        Ok(())
    }
}

fn byte_of(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the cloud as ASCII PLY. Adds the opacity column only when present.
pub fn write_ply(path: &Path, cloud: &PlyCloud) -> Result<()> {
    cloud.validate()?;
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    if cloud.opacities.is_some() {
        out.push_str("property float opacity\n");
    }
    out.push_str("end_header\n");
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let c = cloud.colors[i];
        out.push_str(&format!(
            "{:.8e} {:.8e} {:.8e} {} {} {}",
            p.x as f32, p.y as f32, p.z as f32, byte_of(c[0]), byte_of(c[1]), byte_of(c[2])
        ));
        if let Some(op) = &cloud.opacities {
            out.push_str(&format!(" {:.8e}", op[i] as f32));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(Error::Io)
}

/// Reads an ASCII PLY written by [`write_ply`] (same property layout).
pub fn read_ply(path: &Path) -> Result<PlyCloud> {
    let text = fs::read_to_string(path).map_err(Error::Io)?;
    let mut lines = text.lines();
    let mut expect = |want: &str| -> Result<()> {
        match lines.next() {
            Some(got) if got.trim() == want => Ok(()),
            other => Err(Error::Parse(format!("ply: expected {want:?}, got {other:?}"))),
        }
    };
    expect("ply")?;
    expect("format ascii 1.0")?;
    let count_line = lines
        .next()
        .ok_or_else(|| Error::Parse("ply header ended early".into()))?;
    let count: usize = count_line
        .trim()
        .strip_prefix("element vertex ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Parse(format!("ply: bad element line {count_line:?}")))?;
    let mut properties = Vec::new();
    for line in lines.by_ref() {
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        match line.split_whitespace().collect::<Vec<_>>()[..] {
            ["property", _ty, name] => properties.push(name.to_string()),
            ["comment", ..] => {}
            _ => return Err(Error::Parse(format!("ply: unexpected header line {line:?}"))),
        }
    }
    let base = ["x", "y", "z", "red", "green", "blue"];
    let with_opacity = match properties.len() {
        6 => false,
        7 if properties[6] == "opacity" => true,
        _ => return Err(Error::Parse(format!("ply: unsupported property set {properties:?}"))),
    };
    if properties[..6] != base {
        return Err(Error::Parse(format!("ply: unsupported property order {properties:?}")));
    }
    let mut cloud = PlyCloud {
        opacities: with_opacity.then(Vec::new),
        ..Default::default()
    };
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse("ply data ended early".into()))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != properties.len() {
            return Err(Error::Parse(format!("ply: bad vertex line {line:?}")));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f32>()
                .map(|v| v as f64)
                .map_err(|_| Error::Parse(format!("ply: bad float {:?}", fields[i])))
        };
        let b = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<u8>()
                .map(|v| v as f64 / 255.0)
                .map_err(|_| Error::Parse(format!("ply: bad byte {:?}", fields[i])))
        };
        cloud.positions.push(Vector3::new(f(0)?, f(1)?, f(2)?));
        cloud.colors.push([b(3)?, b(4)?, b(5)?]);
        if let Some(op) = &mut cloud.opacities {
            op.push(f(6)?);
        }
    }
    Ok(cloud)
}

/// Cloud view of a Gaussian set: centers, colors, activated opacities.
pub fn cloud_from_gaussians(set: &GaussianSet) -> PlyCloud {
    PlyCloud {
        positions: set.centers.clone(),
        colors: set.colors.clone(),
        opacities: Some((0..set.len()).map(|i| set.opacity(i)).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_cloud_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let mut cloud = PlyCloud { opacities: Some(Vec::new()), ..Default::default() };
        for _ in 0..100 {
            // Values generated as f32 so the on-disk precision is exact.
            let p: [f32; 3] = [
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
            ];
            cloud.positions.push(Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64));
            // Byte-quantized colors so equality is exact after the trip.
            let k: [u8; 3] = rng.gen();
            cloud.colors.push([k[0] as f64 / 255.0, k[1] as f64 / 255.0, k[2] as f64 / 255.0]);
            cloud.opacities.as_mut().unwrap().push(rng.gen_range(0.0f32..1.0) as f64);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        write_ply(&path, &cloud).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back, cloud);
    }

    #[test]
    fn color_endpoints_map_to_byte_endpoints() {
        let cloud = PlyCloud {
            positions: vec![Vector3::zeros()],
            colors: vec![[1.0, 0.0, 0.5]],
            opacities: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        write_ply(&path, &cloud).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let data_line = text.lines().last().unwrap();
        let fields: Vec<&str> = data_line.split_whitespace().collect();
        assert_eq!(&fields[3..6], &["255", "0", "128"]);
    }

    #[test]
    fn empty_cloud_is_a_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        write_ply(&path, &PlyCloud::default()).unwrap();
        let back = read_ply(&path).unwrap();
        assert!(back.is_empty());
        assert!(back.opacities.is_none());
    }

    #[test]
    fn gaussian_export_carries_activated_opacity() {
        let mut set = GaussianSet::new();
        set.push(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::zeros(),
            nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0),
            0.0,
            [0.2, 0.4, 0.6],
        );
        let cloud = cloud_from_gaussians(&set);
        assert_eq!(cloud.opacities.as_ref().unwrap()[0], 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ply");
        write_ply(&path, &cloud).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.positions[0], Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(back.opacities.unwrap()[0], 0.5);
    }

    #[test]
    fn binary_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bin.ply");
        std::fs::write(&path, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(read_ply(&path).is_err());
    }
}
