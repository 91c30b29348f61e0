//! File handshake for out-of-process refinement. A bundle directory holds
//! one view's inputs: rendered and pooled depths as PFM, the image as PNG,
//! cameras as JSON, and one PFM per neighbor. Any program that reads these
//! and writes `refined.pfm` back can stand in for the built-in enhancer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Camera, DepthMap, Image};
use crate::io::pfm::{read_depth, write_depth};
use crate::io::png::{read_image, write_image};

use super::{enhance, EnhanceOutcome, EnhanceStatus, EnhancerConfig};

/// Everything one refinement needs, in memory.
#[derive(Debug, Clone)]
pub struct DepthBundle {
    pub camera: Camera,
    pub image: Image,
    /// Depth rendered from the scene in its current state.
    pub rendered: DepthMap,
    /// The pool entry the confidence gate compares against.
    pub previous: DepthMap,
    pub neighbors: Vec<(DepthMap, Camera)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleCameras {
    camera: Camera,
    neighbor_cameras: Vec<Camera>,
}

/// How a bundle refinement went, in a form that serializes cleanly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleOutcome {
    pub status: EnhanceStatus,
    pub steps_total: usize,
    pub steps_accepted: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl BundleOutcome {
    fn from_outcome(out: &EnhanceOutcome) -> Self {
        BundleOutcome {
            status: out.status,
            steps_total: out.steps_total,
            steps_accepted: out.steps_accepted,
            initial_loss: out.initial_loss,
            final_loss: out.final_loss,
        }
    }
}

/// Writes the bundle's input files into `dir` (created if absent).
pub fn write_bundle(dir: &Path, bundle: &DepthBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cams = BundleCameras {
        camera: bundle.camera.clone(),
        neighbor_cameras: bundle.neighbors.iter().map(|(_, c)| c.clone()).collect(),
    };
    let text = serde_json::to_string_pretty(&cams)
        .map_err(|e| Error::Parse(format!("bundle cameras serialize: {e}")))?;
    std::fs::write(dir.join("cameras.json"), text)?;
    write_image(&dir.join("image.png"), &bundle.image)?;
    write_depth(&dir.join("rendered.pfm"), &bundle.rendered)?;
    write_depth(&dir.join("previous.pfm"), &bundle.previous)?;
    for (i, (depth, _)) in bundle.neighbors.iter().enumerate() {
        write_depth(&dir.join(format!("neighbor{i}.pfm")), depth)?;
    }
    Ok(())
}

/// Reads a bundle's input files back from `dir`.
pub fn read_bundle(dir: &Path) -> Result<DepthBundle> {
    let text = std::fs::read_to_string(dir.join("cameras.json"))?;
    let cams: BundleCameras =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("bundle cameras: {e}")))?;
    let image = read_image(&dir.join("image.png"))?;
    let rendered = read_depth(&dir.join("rendered.pfm"))?;
    let previous = read_depth(&dir.join("previous.pfm"))?;
    let mut neighbors = Vec::with_capacity(cams.neighbor_cameras.len());
    for (i, cam) in cams.neighbor_cameras.into_iter().enumerate() {
        let depth = read_depth(&dir.join(format!("neighbor{i}.pfm")))?;
        neighbors.push((depth, cam));
    }
    Ok(DepthBundle { camera: cams.camera, image, rendered, previous, neighbors })
}

/// Runs the built-in enhancer on the bundle in `dir` and writes
/// `refined.pfm` plus `outcome.json` next to the inputs.
pub fn refine_bundle(dir: &Path, config: &EnhancerConfig) -> Result<BundleOutcome> {
    let bundle = read_bundle(dir)?;
    let refs: Vec<(&DepthMap, &Camera)> =
        bundle.neighbors.iter().map(|(d, c)| (d, c)).collect();
    let out = enhance(
        &bundle.camera,
        &bundle.image,
        &bundle.rendered,
        &bundle.previous,
        &refs,
        config,
    )?;
    write_depth(&dir.join("refined.pfm"), &out.depth)?;
    let report = BundleOutcome::from_outcome(&out);
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Parse(format!("outcome serialize: {e}")))?;
    std::fs::write(dir.join("outcome.json"), text)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(offset: f64) -> Camera {
        let pose = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(offset, 0.0, 0.0)).unwrap();
        Camera::new(20.0, 20.0, 8.0, 6.0, 16, 12, pose).unwrap()
    }

    fn bundle(seed: u64) -> DepthBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 16 * 12;
        let depths: Vec<f64> = (0..n).map(|_| rng.gen_range(3.0..6.0)).collect();
        // Quantized to the 8-bit grid so the PNG round trip is exact.
        let pixels: Vec<f64> =
            (0..n * 3).map(|_| rng.gen_range(0..=255u32) as f64 / 255.0).collect();
        let image = Image::from_data(16, 12, 3, pixels).unwrap();
        let rendered = DepthMap::from_values(16, 12, depths.clone()).unwrap();
        let previous = DepthMap::from_values(16, 12, depths.iter().map(|d| d * 1.02).collect())
            .unwrap();
        let neighbor = DepthMap::from_values(16, 12, depths.iter().map(|d| d + 0.1).collect())
            .unwrap();
        DepthBundle {
            camera: camera(0.0),
            image,
            rendered,
            previous,
            neighbors: vec![(neighbor, camera(0.3))],
        }
    }

    #[test]
    fn bundles_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle(61);
        write_bundle(dir.path(), &b).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.camera, b.camera);
        assert_eq!(back.neighbors.len(), 1);
        assert_eq!(back.neighbors[0].1, b.neighbors[0].1);
        // Depths survive through f32, images through 8-bit quantization.
        for (a, e) in back.rendered.values().iter().zip(b.rendered.values()) {
            assert_eq!(*a, *e as f32 as f64);
        }
        for (a, e) in back.image.data().iter().zip(b.image.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn refining_a_bundle_writes_the_refined_depth_and_outcome() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &bundle(62)).unwrap();
        let config = EnhancerConfig { max_steps: 5, ..EnhancerConfig::default() };
        let report = refine_bundle(dir.path(), &config).unwrap();
        assert!(report.final_loss <= report.initial_loss);
        let refined = read_depth(&dir.path().join("refined.pfm")).unwrap();
        assert_eq!((refined.width, refined.height), (16, 12));
        let text = std::fs::read_to_string(dir.path().join("outcome.json")).unwrap();
        let parsed: BundleOutcome = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.steps_total, report.steps_total);
    }

    #[test]
    fn missing_inputs_are_reported_as_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::Io(_))));
    }
}
