//! Posed multi-camera datasets and their on-disk layout: a TOML
//! manifest at the root, one directory per physical camera, 8-bit PNG
//! images and masks, and PFM depth maps. Poses in the manifest are
//! camera-to-world with row-major rotations.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Camera, DepthMap, Image, MaskSet, Pose};
use crate::io::{pfm, png};

/// One posed frame from one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    /// Which physical camera captured this view.
    pub cam_id: usize,
    pub frame: usize,
    pub timestamp: f64,
    pub image: Image,
    /// Estimated (noisy) depth used for initialization and the pool.
    pub depth: DepthMap,
    pub masks: MaskSet,
    /// Ground-truth depth when the source provides it.
    pub gt_depth: Option<DepthMap>,
    /// Pixels covered by moving objects, if any exist in the scene.
    pub dynamic: Option<Vec<bool>>,
}

/// Rigid object trajectory: a size hint plus one pose per frame where
/// the object is visible.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub id: usize,
    /// Object-frame bounding box half extents.
    pub half_size: Vector3<f64>,
    /// (frame, object-to-world pose), sorted by frame.
    pub poses: Vec<(usize, Pose)>,
}

impl ObjectTrack {
    pub fn pose_at(&self, frame: usize) -> Option<&Pose> {
        self.poses.iter().find(|(f, _)| *f == frame).map(|(_, p)| p)
    }
}

/// A full capture: views over frames and cameras, plus object tracks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub views: Vec<View>,
    pub objects: Vec<ObjectTrack>,
}

impl Dataset {
    /// Checks that every view matches the dataset resolution and that
    /// per-pixel buffers agree with it.
    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.views.iter().enumerate() {
            let ok = v.camera.width == self.width
                && v.camera.height == self.height
                && v.image.width == self.width
                && v.image.height == self.height
                && v.depth.width == self.width
                && v.depth.height == self.height
                && v.masks.width == self.width
                && v.masks.height == self.height
                && v.gt_depth.as_ref().map_or(true, |d| d.width == self.width && d.height == self.height)
                && v.dynamic.as_ref().map_or(true, |m| m.len() == self.width * self.height);
            if !ok {
                return Err(Error::DimensionMismatch(format!(
                    "view {i} disagrees with dataset resolution {}x{}",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }

    /// View indices used for optimization: frames outside the holdout.
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| !is_holdout_frame(self.views[i].frame)).collect()
    }

    /// View indices of the held-out frames (every fourth frame).
    pub fn holdout_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| is_holdout_frame(self.views[i].frame)).collect()
    }

    /// Saves the dataset under `dir`, creating per-camera directories.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(Error::Io)?;
        let mut manifest = Manifest {
            width: self.width,
            height: self.height,
            cameras: Vec::new(),
            views: Vec::new(),
            objects: Vec::new(),
        };
        let mut cam_ids: BTreeSet<usize> = BTreeSet::new();
        for v in &self.views {
            cam_ids.insert(v.cam_id);
        }
        for &id in &cam_ids {
            let v = self
                .views
                .iter()
                .find(|v| v.cam_id == id)
                .expect("cam id came from the view list");
            manifest.cameras.push(ManifestCamera {
                id,
                fx: v.camera.fx,
                fy: v.camera.fy,
                cx: v.camera.cx,
                cy: v.camera.cy,
            });
            fs::create_dir_all(dir.join(format!("cam{id}"))).map_err(Error::Io)?;
        }
        for v in &self.views {
            let stem = format!("cam{}/frame{:04}", v.cam_id, v.frame);
            let entry = ManifestView {
                camera: v.cam_id,
                frame: v.frame,
                timestamp: v.timestamp,
                rotation: row_major(&v.camera.pose.rotation),
                translation: [
                    v.camera.pose.translation.x,
                    v.camera.pose.translation.y,
                    v.camera.pose.translation.z,
                ],
                image: format!("{stem}.png"),
                depth: format!("{stem}_depth.pfm"),
                sky: format!("{stem}_sky.png"),
                road: format!("{stem}_road.png"),
                gt_depth: v.gt_depth.as_ref().map(|_| format!("{stem}_gt.pfm")),
                dynamic: v.dynamic.as_ref().map(|_| format!("{stem}_dyn.png")),
            };
            png::write_image(&dir.join(&entry.image), &v.image)?;
            pfm::write_depth(&dir.join(&entry.depth), &v.depth)?;
            png::write_mask(&dir.join(&entry.sky), self.width, self.height, v.masks.sky())?;
            png::write_mask(&dir.join(&entry.road), self.width, self.height, v.masks.road())?;
            if let (Some(gt), Some(path)) = (&v.gt_depth, &entry.gt_depth) {
                pfm::write_depth(&dir.join(path), gt)?;
            }
            if let (Some(dynamic), Some(path)) = (&v.dynamic, &entry.dynamic) {
                png::write_mask(&dir.join(path), self.width, self.height, dynamic)?;
            }
            manifest.views.push(entry);
        }
        for obj in &self.objects {
            manifest.objects.push(ManifestObject {
                id: obj.id,
                half_size: [obj.half_size.x, obj.half_size.y, obj.half_size.z],
                poses: obj
                    .poses
                    .iter()
                    .map(|(frame, pose)| ManifestPose {
                        frame: *frame,
                        rotation: row_major(&pose.rotation),
                        translation: [pose.translation.x, pose.translation.y, pose.translation.z],
                    })
                    .collect(),
            });
        }
        let text = toml::to_string_pretty(&manifest)
            .map_err(|e| Error::Parse(format!("manifest serialize: {e}")))?;
        fs::write(dir.join("manifest.toml"), text).map_err(Error::Io)
    }

    /// Loads a dataset previously written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(dir.join("manifest.toml")).map_err(Error::Io)?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Parse(format!("manifest parse: {e}")))?;
        let mut out = Dataset {
            width: manifest.width,
            height: manifest.height,
            ..Default::default()
        };
        for entry in &manifest.views {
            let cam = manifest
                .cameras
                .iter()
                .find(|c| c.id == entry.camera)
                .ok_or_else(|| Error::Parse(format!("view references unknown camera {}", entry.camera)))?;
            let pose = Pose::new(from_row_major(&entry.rotation), Vector3::from(entry.translation))?;
            let camera = Camera::new(
                cam.fx,
                cam.fy,
                cam.cx,
                cam.cy,
                manifest.width,
                manifest.height,
                pose,
            )?;
            let image = png::read_image(&dir.join(&entry.image))?;
            let depth = pfm::read_depth(&dir.join(&entry.depth))?;
            let (_, _, sky) = png::read_mask(&dir.join(&entry.sky))?;
            let (_, _, road) = png::read_mask(&dir.join(&entry.road))?;
            let masks = MaskSet::new(manifest.width, manifest.height, sky, road)?;
            let gt_depth = match &entry.gt_depth {
                Some(p) => Some(pfm::read_depth(&dir.join(p))?),
                None => None,
            };
            let dynamic = match &entry.dynamic {
                Some(p) => Some(png::read_mask(&dir.join(p))?.2),
                None => None,
            };
            out.views.push(View {
                camera,
                cam_id: entry.camera,
                frame: entry.frame,
                timestamp: entry.timestamp,
                image,
                depth,
                masks,
                gt_depth,
                dynamic,
            });
        }
        for obj in &manifest.objects {
            let mut poses = Vec::new();
            for p in &obj.poses {
                poses.push((p.frame, Pose::new(from_row_major(&p.rotation), Vector3::from(p.translation))?));
            }
            poses.sort_by_key(|(f, _)| *f);
            out.objects.push(ObjectTrack {
                id: obj.id,
                half_size: Vector3::from(obj.half_size),
                poses,
            });
        }
        out.validate()?;
        Ok(out)
    }
}

/// Every fourth frame is held out of training for evaluation.
pub fn is_holdout_frame(frame: usize) -> bool {
    frame % 4 == 3
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

fn from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_iterator(v.iter().copied()).transpose()
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    width: usize,
    height: usize,
    cameras: Vec<ManifestCamera>,
    views: Vec<ManifestView>,
    #[serde(default)]
    objects: Vec<ManifestObject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestCamera {
    id: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestView {
    camera: usize,
    frame: usize,
    timestamp: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
    image: String,
    depth: String,
    sky: String,
    road: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dynamic: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestObject {
    id: usize,
    half_size: [f64; 3],
    poses: Vec<ManifestPose>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestPose {
    frame: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
}
