//! Synthetic desk-scale street scenes via analytic ray casting. A
//! scene is a checkerboard ground plane at z = 0, a set of axis-aligned
//! boxes, and at most one box sliding along a linear track. Cameras
//! ride a straight path at roughly eye height. The estimated-depth
//! channel corrupts ground truth with low-frequency scale drift,
//! per-pixel additive noise, and dropout patches.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ObjectTrack, View};
use crate::error::{Error, Result};
use crate::geom::{Camera, DepthMap, Image, MaskSet, Pose};

/// Checkerboard ground plane at z = 0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GroundSpec {
    /// Half extent in meters; the plane covers [-extent, extent]^2.
    pub extent: f64,
    /// Checker tile side in meters.
    pub tile: f64,
    pub albedo_a: [f64; 3],
    pub albedo_b: [f64; 3],
}

impl Default for GroundSpec {
    fn default() -> Self {
        Self {
            extent: 40.0,
            tile: 2.0,
            albedo_a: [0.45, 0.45, 0.47],
            albedo_b: [0.32, 0.32, 0.35],
        }
    }
}

/// Static axis-aligned box.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoxSpec {
    pub center: [f64; 3],
    /// Full side lengths, not half extents.
    pub size: [f64; 3],
    pub albedo: [f64; 3],
}

/// One rigid box translating at constant velocity.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MoverSpec {
    pub size: [f64; 3],
    pub albedo: [f64; 3],
    /// Center position at time zero.
    pub start: [f64; 3],
    /// Meters per second.
    pub velocity: [f64; 3],
}

/// Corruption applied to ground-truth depth to fake an estimator.
/// Every amplitude at zero leaves the values untouched bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NoiseSpec {
    /// Relative sigma of the low-frequency multiplicative field.
    pub scale_drift: f64,
    /// Coarse grid (columns, rows) the drift field is sampled on.
    pub drift_cells: (usize, usize),
    /// Sigma of per-pixel additive noise in meters.
    pub additive: f64,
    /// Number of rectangular dropout holes per view.
    pub dropout_patches: usize,
    /// Maximum dropout patch side in pixels.
    pub dropout_size: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            scale_drift: 0.0,
            drift_cells: (4, 3),
            additive: 0.0,
            dropout_patches: 0,
            dropout_size: 6,
        }
    }
}

impl NoiseSpec {
    /// A moderately messy estimator: visible drift, some speckle, a
    /// few holes.
    pub fn moderate() -> Self {
        Self {
            scale_drift: 0.12,
            additive: 0.05,
            dropout_patches: 3,
            dropout_size: 6,
            ..Self::default()
        }
    }
}

/// Camera rig and path. Cameras share intrinsics and are spread along
/// the rig's lateral axis; the whole rig slides by `step` every frame.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CameraSpec {
    /// Number of physical cameras in the rig.
    pub count: usize,
    /// Lateral spacing between neighboring cameras in meters.
    pub spacing: f64,
    pub horizontal_fov_deg: f64,
    /// Rig reference position at frame 0.
    pub start: [f64; 3],
    /// Rig translation per frame.
    pub step: [f64; 3],
    /// Viewing direction, shared by all cameras and frames.
    pub look: [f64; 3],
    pub frames: usize,
    /// Seconds between frames.
    pub frame_dt: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            count: 1,
            spacing: 0.5,
            horizontal_fov_deg: 60.0,
            start: [0.0, 0.0, 1.5],
            step: [0.35, 0.0, 0.0],
            look: [1.0, 0.0, -0.08],
            frames: 12,
            frame_dt: 0.1,
        }
    }
}

/// Complete description of a synthetic capture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub sky_color: [f64; 3],
    pub ground: Option<GroundSpec>,
    pub boxes: Vec<BoxSpec>,
    pub mover: Option<MoverSpec>,
    pub cameras: CameraSpec,
    pub noise: NoiseSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 64,
            sky_color: [0.62, 0.74, 0.92],
            ground: Some(GroundSpec::default()),
            boxes: vec![
                BoxSpec {
                    center: [9.0, 3.2, 1.5],
                    size: [4.0, 2.4, 3.0],
                    albedo: [0.65, 0.42, 0.35],
                },
                BoxSpec {
                    center: [11.5, -3.4, 1.1],
                    size: [3.0, 2.8, 2.2],
                    albedo: [0.38, 0.5, 0.62],
                },
                BoxSpec {
                    center: [16.0, 0.8, 2.0],
                    size: [2.5, 2.5, 4.0],
                    albedo: [0.55, 0.55, 0.5],
                },
            ],
            mover: None,
            cameras: CameraSpec::default(),
            noise: NoiseSpec::default(),
        }
    }
}

impl SceneSpec {
    /// Default scene plus a small box driving across the street.
    pub fn with_mover() -> Self {
        Self {
            mover: Some(MoverSpec {
                size: [1.2, 0.8, 0.8],
                albedo: [0.75, 0.2, 0.2],
                start: [7.0, -1.2, 0.4],
                velocity: [1.5, 0.6, 0.0],
            }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidArgument("scene images must be at least 2x2".into()));
        }
        if self.cameras.count == 0 || self.cameras.frames == 0 {
            return Err(Error::InvalidArgument("need at least one camera and one frame".into()));
        }
        if !(self.cameras.horizontal_fov_deg > 1.0 && self.cameras.horizontal_fov_deg < 179.0) {
            return Err(Error::InvalidArgument("fov must lie in (1, 179) degrees".into()));
        }
        if self.noise.drift_cells.0 < 2 || self.noise.drift_cells.1 < 2 {
            return Err(Error::InvalidArgument("drift grid needs at least 2x2 cells".into()));
        }
        Ok(())
    }
}

/// What a ray hit first.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Hit {
    Ground,
    Box(usize),
    Mover,
}

struct RayHit {
    t: f64,
    hit: Hit,
    normal: Vector3<f64>,
    point: Vector3<f64>,
}

/// Slab intersection with an axis-aligned box; returns entry distance
/// and entry-face normal for rays starting outside.
fn intersect_box(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut axis = 0usize;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut t0, mut t1) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            axis = a;
        }
        t_exit = t_exit.min(t1);
        if t_enter > t_exit {
            return None;
        }
    }
    if t_enter <= 1e-9 {
        return None;
    }
    let mut normal = Vector3::zeros();
    normal[axis] = -dir[axis].signum();
    Some((t_enter, normal))
}

struct SceneGeometry<'a> {
    spec: &'a SceneSpec,
    /// Mover center at the frame being rendered, if present.
    mover_center: Option<Vector3<f64>>,
}

impl SceneGeometry<'_> {
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        let mut consider = |t: f64, hit: Hit, normal: Vector3<f64>| {
            if best.as_ref().map_or(true, |b| t < b.t) {
                best = Some(RayHit { t, hit, normal, point: origin + dir * t });
            }
        };
        if let Some(ground) = &self.spec.ground {
            if dir.z.abs() > 1e-15 {
                let t = -origin.z / dir.z;
                if t > 1e-9 {
                    let p = origin + dir * t;
                    if p.x.abs() <= ground.extent && p.y.abs() <= ground.extent {
                        consider(t, Hit::Ground, Vector3::new(0.0, 0.0, 1.0));
                    }
                }
            }
        }
        for (i, b) in self.spec.boxes.iter().enumerate() {
            let c = Vector3::from(b.center);
            let half = Vector3::from(b.size) * 0.5;
            if let Some((t, n)) = intersect_box(origin, dir, &(c - half), &(c + half)) {
                consider(t, Hit::Box(i), n);
            }
        }
        if let (Some(mover), Some(center)) = (&self.spec.mover, &self.mover_center) {
            let half = Vector3::from(mover.size) * 0.5;
            if let Some((t, n)) = intersect_box(origin, dir, &(center - half), &(center + half)) {
                consider(t, Hit::Mover, n);
            }
        }
        best
    }

    fn shade(&self, hit: &RayHit) -> [f64; 3] {
        let albedo = match hit.hit {
            Hit::Ground => {
                let g = self.spec.ground.as_ref().expect("ground hit implies ground spec");
                let parity = (hit.point.x / g.tile).floor() + (hit.point.y / g.tile).floor();
                if (parity as i64).rem_euclid(2) == 0 {
                    g.albedo_a
                } else {
                    g.albedo_b
                }
            }
            Hit::Box(i) => self.spec.boxes[i].albedo,
            Hit::Mover => self.spec.mover.as_ref().expect("mover hit implies mover spec").albedo,
        };
        let light = Vector3::new(0.35, -0.25, 0.9).normalize();
        let lambert = hit.normal.dot(&light).max(0.0);
        let shade = 0.35 + 0.65 * lambert;
        [
            (albedo[0] * shade).clamp(0.0, 1.0),
            (albedo[1] * shade).clamp(0.0, 1.0),
            (albedo[2] * shade).clamp(0.0, 1.0),
        ]
    }
}

/// Rendered ground truth for one camera at one frame.
struct RenderedView {
    image: Image,
    depth: DepthMap,
    masks: MaskSet,
    dynamic: Vec<bool>,
}

fn render_view(spec: &SceneSpec, camera: &Camera, mover_center: Option<Vector3<f64>>) -> Result<RenderedView> {
    let geometry = SceneGeometry { spec, mover_center };
    let (w, h) = (spec.width, spec.height);
    let mut image = Image::new(w, h, 3)?;
    let mut depth = DepthMap::new_invalid(w, h);
    let mut sky = vec![false; w * h];
    let mut road = vec![false; w * h];
    let mut dynamic = vec![false; w * h];
    let origin = camera.pose.translation;
    for row in 0..h {
        for col in 0..w {
            let px = Camera::pixel_center(col, row);
            // Unit z in the camera frame, so the hit parameter is the
            // planar depth directly.
            let dir_cam = Vector3::new((px.x - camera.cx) / camera.fx, (px.y - camera.cy) / camera.fy, 1.0);
            let dir = camera.pose.rotation * dir_cam;
            match geometry.cast(&origin, &dir) {
                Some(hit) => {
                    let c = geometry.shade(&hit);
                    for ch in 0..3 {
                        image.set(col, row, ch, c[ch]);
                    }
                    depth.set(col, row, hit.t);
                    match hit.hit {
                        Hit::Ground => road[row * w + col] = true,
                        Hit::Mover => dynamic[row * w + col] = true,
                        Hit::Box(_) => {}
                    }
                }
                None => {
                    for ch in 0..3 {
                        image.set(col, row, ch, spec.sky_color[ch]);
                    }
                    sky[row * w + col] = true;
                }
            }
        }
    }
    let masks = MaskSet::new(w, h, sky, road)?;
    Ok(RenderedView { image, depth, masks, dynamic })
}

/// Standard-normal draw via Box-Muller, deterministic given the rng.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Applies the noise model to a ground-truth depth map. Stages whose
/// amplitude is zero are skipped entirely, which keeps the untouched
/// case bit-exact.
fn corrupt_depth(gt: &DepthMap, noise: &NoiseSpec, rng: &mut ChaCha8Rng) -> DepthMap {
    let (w, h) = (gt.width, gt.height);
    let mut out = gt.clone();
    if noise.scale_drift > 0.0 {
        let (gx, gy) = noise.drift_cells;
        let field: Vec<f64> = (0..gx * gy).map(|_| 1.0 + noise.scale_drift * normal(rng)).collect();
        for row in 0..h {
            for col in 0..w {
                if let Some(v) = out.get(col, row) {
                    // Bilinear sample of the coarse grid over the image.
                    let fx = if w > 1 { col as f64 / (w - 1) as f64 } else { 0.0 } * (gx - 1) as f64;
                    let fy = if h > 1 { row as f64 / (h - 1) as f64 } else { 0.0 } * (gy - 1) as f64;
                    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(gx - 1), (y0 + 1).min(gy - 1));
                    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                    let top = field[y0 * gx + x0] * (1.0 - ax) + field[y0 * gx + x1] * ax;
                    let bot = field[y1 * gx + x0] * (1.0 - ax) + field[y1 * gx + x1] * ax;
                    let scale = top * (1.0 - ay) + bot * ay;
                    out.set(col, row, v * scale.max(0.05));
                }
            }
        }
    }
    if noise.additive > 0.0 {
        for row in 0..h {
            for col in 0..w {
                if let Some(v) = out.get(col, row) {
                    out.set(col, row, v + noise.additive * normal(rng));
                }
            }
        }
    }
    for _ in 0..noise.dropout_patches {
        let side = noise.dropout_size.max(1);
        let x0 = rng.gen_range(0..w);
        let y0 = rng.gen_range(0..h);
        let sx = rng.gen_range(1..=side);
        let sy = rng.gen_range(1..=side);
        for row in y0..(y0 + sy).min(h) {
            for col in x0..(x0 + sx).min(w) {
                out.set(col, row, 0.0);
            }
        }
    }
    out
}

/// Renders the capture described by `spec`. The seed drives only the
/// depth-noise model; geometry and images are deterministic functions
/// of the spec.
pub fn synth_scene(spec: &SceneSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let cams = &spec.cameras;
    let fov = cams.horizontal_fov_deg.to_radians();
    let fx = spec.width as f64 * 0.5 / (fov * 0.5).tan();
    let (cx, cy) = (spec.width as f64 * 0.5, spec.height as f64 * 0.5);
    let up = Vector3::new(0.0, 0.0, 1.0);
    let look = Vector3::from(cams.look);
    if look.norm() < 1e-12 {
        return Err(Error::InvalidArgument("camera look direction is zero".into()));
    }
    // Rig lateral axis: horizontal direction orthogonal to the view.
    let mut right = look.cross(&up);
    if right.norm() < 1e-9 {
        right = Vector3::new(0.0, 1.0, 0.0);
    }
    let right = right.normalize();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dataset = Dataset {
        width: spec.width,
        height: spec.height,
        ..Default::default()
    };
    let has_mover = spec.mover.is_some();
    for frame in 0..cams.frames {
        let time = frame as f64 * cams.frame_dt;
        let rig = Vector3::from(cams.start) + Vector3::from(cams.step) * frame as f64;
        let mover_center = spec
            .mover
            .as_ref()
            .map(|m| Vector3::from(m.start) + Vector3::from(m.velocity) * time);
        for cam_id in 0..cams.count {
            let offset = cam_id as f64 - (cams.count as f64 - 1.0) * 0.5;
            let eye = rig + right * (offset * cams.spacing);
            let pose = Pose::look_at(eye, eye + look, up)?;
            let camera = Camera::new(fx, fx, cx, cy, spec.width, spec.height, pose)?;
            let rendered = render_view(spec, &camera, mover_center)?;
            let est = corrupt_depth(&rendered.depth, &spec.noise, &mut rng);
            dataset.views.push(View {
                camera,
                cam_id,
                frame,
                timestamp: time,
                image: rendered.image,
                depth: est,
                masks: rendered.masks,
                gt_depth: Some(rendered.depth),
                dynamic: has_mover.then_some(rendered.dynamic),
            });
        }
    }
    if let Some(mover) = &spec.mover {
        let poses = (0..cams.frames)
            .map(|f| {
                let t = Vector3::from(mover.start) + Vector3::from(mover.velocity) * (f as f64 * cams.frame_dt);
                Ok((f, Pose::new(nalgebra::Matrix3::identity(), t)?))
            })
            .collect::<Result<Vec<_>>>()?;
        dataset.objects.push(ObjectTrack {
            id: 0,
            half_size: Vector3::from(mover.size) * 0.5,
            poses,
        });
    }
    dataset.validate()?;
    Ok(dataset)
}
