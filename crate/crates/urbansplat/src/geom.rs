//! Cameras, poses, depth maps, images and masks.
//!
//! Conventions used everywhere in this crate:
//! - camera frame: x right, y down, z forward (depth = camera z)
//! - poses store camera-to-world (or object-to-world) transforms
//! - pixel (col, row) covers [col, col+1) x [row, row+1); its center is
//!   (col + 0.5, row + 0.5), and that is where grids are sampled
//! - quaternions are (w, x, y, z), kept as raw 4-vectors and normalized
//!   wherever a rotation is evaluated

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points with camera z below this count as behind the camera.
pub const NEAR_EPS: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rigid transform: `world = rotation * local + translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1 (checked to 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if !residual.is_finite() || residual > ORTHONORMAL_TOL {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (residual {residual:.2e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidArgument(
                "rotation determinant is not +1".into(),
            ));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("translation is not finite".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Camera at `eye` looking at `target`, image y pointing away from `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidArgument("look_at: eye equals target".into()));
        }
        let z = forward.normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(0.0, 1.0, 0.0));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Pose::new(Matrix3::from_columns(&[x, y, z]), eye)
    }

    /// local -> world
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// world -> local
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// self applied after `other` (maps other's local frame to self's world).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }
}

/// Pinhole camera with pose; no distortion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: Pose,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        pose: Pose,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("camera size must be nonzero".into()));
        }
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(Error::InvalidArgument(
                "principal point must lie strictly inside the image".into(),
            ));
        }
        Ok(Self { fx, fy, cx, cy, width, height, pose })
    }

    /// World point -> camera-frame coordinates.
    pub fn world_to_cam(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.inverse_transform_point(p)
    }

    pub fn cam_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.transform_point(p)
    }

    /// Projects a world point to (pixel, depth). `None` means the point is
    /// behind the camera; pixels outside the image bounds are still returned.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let c = self.world_to_cam(p);
        if c.z <= NEAR_EPS {
            return None;
        }
        let u = self.fx * c.x / c.z + self.cx;
        let v = self.fy * c.y / c.z + self.cy;
        Some((Vector2::new(u, v), c.z))
    }

    /// Lifts a pixel at the given depth back to a world point.
    pub fn unproject(&self, pixel: Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth.is_finite() && depth > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "unproject needs a positive finite depth, got {depth}"
            )));
        }
        let x = (pixel.x - self.cx) / self.fx * depth;
        let y = (pixel.y - self.cy) / self.fy * depth;
        Ok(self.cam_to_world(&Vector3::new(x, y, depth)))
    }

    /// Center of pixel (col, row) in continuous image coordinates.
    pub fn pixel_center(col: usize, row: usize) -> Vector2<f64> {
        Vector2::new(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Does a continuous image coordinate fall inside the image?
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.x < self.width as f64 && pixel.y >= 0.0 && pixel.y < self.height as f64
    }

    /// Same camera resampled to a new resolution (intrinsics scaled along).
    pub fn scaled(&self, width: usize, height: usize) -> Result<Camera> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera::new(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            width,
            height,
            self.pose.clone(),
        )
    }
}

/// Per-pixel depth with an explicit validity mask.
///
/// Invariant: wherever `valid` is true the stored value is finite and > 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// All pixels invalid, values zeroed.
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Marks every nonpositive or non-finite entry invalid instead of failing.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth map {}x{} needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            )));
        }
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Ok(Self { width, height, values, valid })
    }

    /// Takes an explicit mask; rejects valid-flagged entries that break the
    /// positivity invariant.
    pub fn from_parts(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != values.len() {
            return Err(Error::DimensionMismatch("depth map buffers disagree in size".into()));
        }
        for (i, (&v, &ok)) in values.iter().zip(&valid).enumerate() {
            if ok && !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "pixel {i} flagged valid but holds {v}"
                )));
            }
        }
        Ok(Self { width, height, values, valid })
    }

    #[inline]
    pub fn idx(&self, col: usize, row: usize) -> usize {
        debug_assert!(col < self.width && row < self.height);
        row * self.width + col
    }

    /// Depth at a pixel, `None` if invalid.
    #[inline]
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        let i = self.idx(col, row);
        self.valid[i].then(|| self.values[i])
    }

    #[inline]
    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.valid[self.idx(col, row)]
    }

    /// Writes a depth; nonpositive or non-finite values invalidate the pixel.
    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: f64) {
        let i = self.idx(col, row);
        if value.is_finite() && value > 0.0 {
            self.values[i] = value;
            self.valid[i] = true;
        } else {
            self.values[i] = 0.0;
            self.valid[i] = false;
        }
    }

    #[inline]
    pub fn invalidate(&mut self, col: usize, row: usize) {
        let i = self.idx(col, row);
        self.values[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Mean over valid pixels; `None` when nothing is valid.
    pub fn mean_valid(&self) -> Option<f64> {
        let n = self.valid_count();
        if n == 0 {
            return None;
        }
        let sum: f64 = self
            .values
            .iter()
            .zip(&self.valid)
            .filter(|(_, ok)| **ok)
            .map(|(v, _)| *v)
            .sum();
        Some(sum / n as f64)
    }

    /// (col, row, depth) over valid pixels, row-major order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let w = self.width;
        self.values
            .iter()
            .zip(&self.valid)
            .enumerate()
            .filter(|(_, (_, ok))| **ok)
            .map(move |(i, (v, _))| (i % w, i / w, *v))
    }

    /// Box-filter downsample; a target pixel is valid when at least half of
    /// its source footprint is, and averages only the valid part.
    pub fn downsample(&self, width: usize, height: usize) -> Result<DepthMap> {
        let mut out = DepthMap::new_invalid(width, height);
        let plan = BoxFilter::new(self.width, self.height, width, height)?;
        for row in 0..height {
            for col in 0..width {
                let mut sum = 0.0;
                let mut wsum = 0.0;
                let mut cover = 0.0;
                plan.for_each_source(col, row, |sc, sr, w| {
                    cover += w;
                    if self.valid[sr * self.width + sc] {
                        sum += w * self.values[sr * self.width + sc];
                        wsum += w;
                    }
                });
                if wsum >= 0.5 * cover && wsum > 0.0 {
                    out.set(col, row, sum / wsum);
                }
            }
        }
        Ok(out)
    }
}

/// Row-major interleaved image, 1 or 3 channels, values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images are 1- or 3-channel, got {channels}"
            )));
        }
        Ok(Self { width, height, channels, data: vec![0.0; width * height * channels] })
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images are 1- or 3-channel, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{}x{} needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "image values must lie in [0,1], got {bad}"
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Like `from_data` but clamps into [0,1] (non-finite still rejected).
    pub fn from_data_clamped(
        width: usize,
        height: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("image contains non-finite values".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::from_data(width, height, channels, data)
    }

    #[inline]
    pub fn idx(&self, col: usize, row: usize, ch: usize) -> usize {
        debug_assert!(col < self.width && row < self.height && ch < self.channels);
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize, ch: usize) -> f64 {
        self.data[self.idx(col, row, ch)]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, ch: usize, value: f64) {
        let i = self.idx(col, row, ch);
        self.data[i] = value.clamp(0.0, 1.0);
    }

    /// RGB triple at a pixel (gray images replicate their channel).
    #[inline]
    pub fn pixel3(&self, col: usize, row: usize) -> [f64; 3] {
        if self.channels == 3 {
            let i = self.idx(col, row, 0);
            [self.data[i], self.data[i + 1], self.data[i + 2]]
        } else {
            let v = self.get(col, row, 0);
            [v, v, v]
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Per-channel mean of |a - b|.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.width != other.width || self.height != other.height || self.channels != other.channels {
            return Err(Error::DimensionMismatch("images differ in shape".into()));
        }
        let n = self.data.len() as f64;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
    }

    /// Box-filter downsample (area average).
    pub fn downsample(&self, width: usize, height: usize) -> Result<Image> {
        let plan = BoxFilter::new(self.width, self.height, width, height)?;
        let mut out = Image::new(width, height, self.channels)?;
        for row in 0..height {
            for col in 0..width {
                for ch in 0..self.channels {
                    let mut sum = 0.0;
                    let mut wsum = 0.0;
                    plan.for_each_source(col, row, |sc, sr, w| {
                        sum += w * self.data[(sr * self.width + sc) * self.channels + ch];
                        wsum += w;
                    });
                    out.set(col, row, ch, sum / wsum);
                }
            }
        }
        Ok(out)
    }
}

/// Sky and road masks for one view. A pixel is never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub width: usize,
    pub height: usize,
    sky: Vec<bool>,
    road: Vec<bool>,
}

impl MaskSet {
    pub fn new(width: usize, height: usize, sky: Vec<bool>, road: Vec<bool>) -> Result<Self> {
        if sky.len() != width * height || road.len() != width * height {
            return Err(Error::DimensionMismatch("mask buffers disagree in size".into()));
        }
        if let Some(i) = sky.iter().zip(&road).position(|(s, r)| *s && *r) {
            return Err(Error::InvalidArgument(format!(
                "pixel {i} is flagged both sky and road"
            )));
        }
        Ok(Self { width, height, sky, road })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            sky: vec![false; width * height],
            road: vec![false; width * height],
        }
    }

    #[inline]
    pub fn sky_at(&self, col: usize, row: usize) -> bool {
        self.sky[row * self.width + col]
    }

    #[inline]
    pub fn road_at(&self, col: usize, row: usize) -> bool {
        self.road[row * self.width + col]
    }

    pub fn sky(&self) -> &[bool] {
        &self.sky
    }

    pub fn road(&self) -> &[bool] {
        &self.road
    }

    pub fn road_fraction(&self) -> f64 {
        self.road.iter().filter(|v| **v).count() as f64 / (self.width * self.height) as f64
    }

    /// Area-averaged soft masks at a lower resolution: (sky, road) in [0,1].
    pub fn soft_downsample(&self, width: usize, height: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let plan = BoxFilter::new(self.width, self.height, width, height)?;
        let mut sky = vec![0.0; width * height];
        let mut road = vec![0.0; width * height];
        for row in 0..height {
            for col in 0..width {
                let mut s = 0.0;
                let mut r = 0.0;
                let mut wsum = 0.0;
                plan.for_each_source(col, row, |sc, sr, w| {
                    let i = sr * self.width + sc;
                    if self.sky[i] {
                        s += w;
                    }
                    if self.road[i] {
                        r += w;
                    }
                    wsum += w;
                });
                sky[row * width + col] = s / wsum;
                road[row * width + col] = r / wsum;
            }
        }
        Ok((sky, road))
    }
}

/// Fractional box filter between two grid resolutions.
struct BoxFilter {
    sx: f64,
    sy: f64,
    src_w: usize,
    src_h: usize,
}

impl BoxFilter {
    fn new(src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Result<Self> {
        if dst_w == 0 || dst_h == 0 || dst_w > src_w || dst_h > src_h {
            return Err(Error::InvalidArgument(format!(
                "can only downsample: {src_w}x{src_h} -> {dst_w}x{dst_h}"
            )));
        }
        Ok(Self {
            sx: src_w as f64 / dst_w as f64,
            sy: src_h as f64 / dst_h as f64,
            src_w,
            src_h,
        })
    }

    /// Calls `f(src_col, src_row, weight)` for every source pixel overlapping
    /// the destination pixel, weights being overlap areas.
    fn for_each_source(&self, col: usize, row: usize, mut f: impl FnMut(usize, usize, f64)) {
        let x0 = col as f64 * self.sx;
        let x1 = (col + 1) as f64 * self.sx;
        let y0 = row as f64 * self.sy;
        let y1 = (row + 1) as f64 * self.sy;
        let c0 = x0.floor() as usize;
        let c1 = (x1.ceil() as usize).min(self.src_w);
        let r0 = y0.floor() as usize;
        let r1 = (y1.ceil() as usize).min(self.src_h);
        for sr in r0..r1 {
            let hy = (y1.min(sr as f64 + 1.0) - y0.max(sr as f64)).max(0.0);
            if hy == 0.0 {
                continue;
            }
            for sc in c0..c1 {
                let hx = (x1.min(sc as f64 + 1.0) - x0.max(sc as f64)).max(0.0);
                if hx > 0.0 {
                    f(sc, sr, hx * hy);
                }
            }
        }
    }
}

/// Rotation matrix of a (not necessarily unit) quaternion (w, x, y, z).
pub fn rotation_from_quaternion(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm().max(1e-12);
    let (w, x, y, z) = (q.x / n, q.y / n, q.z / n, q.w / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// d(rotation)/d(raw quaternion), normalization chain included.
pub fn rotation_quaternion_jacobian(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let n = q.norm().max(1e-12);
    let u = q / n;
    let (w, x, y, z) = (u.x, u.y, u.z, u.w);
    // derivatives with respect to the unit quaternion first
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    let unit = [dw, dx, dy, dz];
    // chain through u = q / |q|: du_j/dq_i = (delta_ij - u_i u_j) / n
    let mut out = [Matrix3::zeros(); 4];
    for i in 0..4 {
        let mut m = Matrix3::zeros();
        for (j, dj) in unit.iter().enumerate() {
            let coeff = (if i == j { 1.0 } else { 0.0 } - u[i] * u[j]) / n;
            m += dj * coeff;
        }
        out[i] = m;
    }
    out
}

/// Hamilton product of two (w, x, y, z) quaternions.
pub fn quaternion_multiply(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    let (aw, ax, ay, az) = (a.x, a.y, a.z, a.w);
    let (bw, bx, by, bz) = (b.x, b.y, b.z, b.w);
    Vector4::new(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )
}

/// Quaternion (w, x, y, z) of a rotation matrix (assumed orthonormal).
pub fn quaternion_from_rotation(r: &Matrix3<f64>) -> Vector4<f64> {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        Vector4::new(
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Vector4::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    };
    q.normalize()
}
