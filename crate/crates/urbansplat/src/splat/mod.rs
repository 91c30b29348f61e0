//! Anisotropic 3D Gaussians and their differentiable renderer.
//!
//! A Gaussian carries a center, per-axis log scales, a raw quaternion, an
//! opacity logit and an RGB color. Parameters live in their unconstrained
//! form; activations (exp, sigmoid, quaternion normalization) happen at
//! render time so gradients can flow through them analytically.

mod backward;
mod render;

pub use backward::render_backward;
pub use render::render;

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{rotation_from_quaternion, DepthMap, Image};

/// Pixels with accumulated alpha below this have no usable depth.
pub const ALPHA_MIN: f64 = 0.2;

/// Screen-space eigenvalue floor in px^2, keeps footprints at least a pixel-ish.
pub const EIGEN_FLOOR: f64 = 0.3;

/// Mahalanobis^2 cutoff of the footprint (3 sigma).
pub const Q_CUT: f64 = 9.0;

/// Rasterizer near plane in meters. Gaussians closer than this to the
/// camera plane are culled; without it, a point grazing the plane gets a
/// footprint of thousands of pixels and fogs the whole image.
pub const NEAR_CLIP: f64 = 0.2;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Columnar set of Gaussians. All vectors share the same length.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    pub centers: Vec<Vector3<f64>>,
    /// Per-axis log of the standard deviation in meters.
    pub log_scales: Vec<Vector3<f64>>,
    /// Raw (w, x, y, z) quaternions, normalized when a rotation is needed.
    pub rotations: Vec<Vector4<f64>>,
    pub opacity_logits: Vec<f64>,
    /// Plain RGB in [0, 1], no spherical harmonics.
    pub colors: Vec<[f64; 3]>,
}

impl GaussianSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn push(
        &mut self,
        center: Vector3<f64>,
        log_scale: Vector3<f64>,
        rotation: Vector4<f64>,
        opacity_logit: f64,
        color: [f64; 3],
    ) {
        self.centers.push(center);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.opacity_logits.push(opacity_logit);
        self.colors.push(color);
    }

    /// Activated opacity of Gaussian `i`.
    #[inline]
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    /// Activated per-axis scales of Gaussian `i`.
    #[inline]
    pub fn scales(&self, i: usize) -> Vector3<f64> {
        self.log_scales[i].map(f64::exp)
    }

    /// Normalized rotation matrix of Gaussian `i`.
    #[inline]
    pub fn rotation(&self, i: usize) -> Matrix3<f64> {
        rotation_from_quaternion(&self.rotations[i])
    }

    /// Checks lengths, finiteness, color range and quaternion norms.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.colors.len() != n
        {
            return Err(Error::DimensionMismatch("gaussian columns disagree in length".into()));
        }
        for i in 0..n {
            let finite = self.centers[i].iter().all(|v| v.is_finite())
                && self.log_scales[i].iter().all(|v| v.is_finite())
                && self.rotations[i].iter().all(|v| v.is_finite())
                && self.opacity_logits[i].is_finite()
                && self.colors[i].iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Numerical(format!("gaussian {i} has non-finite parameters")));
            }
            if self.rotations[i].norm() < 1e-6 {
                return Err(Error::Numerical(format!("gaussian {i} has a near-zero quaternion")));
            }
            if self.colors[i].iter().any(|c| *c < 0.0 || *c > 1.0) {
                return Err(Error::InvalidArgument(format!("gaussian {i} color out of [0,1]")));
            }
        }
        Ok(())
    }

    /// New set holding the Gaussians at the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> GaussianSet {
        let mut out = GaussianSet::new();
        for &i in indices {
            out.push(
                self.centers[i],
                self.log_scales[i],
                self.rotations[i],
                self.opacity_logits[i],
                self.colors[i],
            );
        }
        out
    }

    /// Appends all Gaussians of `other`.
    pub fn extend(&mut self, other: &GaussianSet) {
        self.centers.extend_from_slice(&other.centers);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
        self.colors.extend_from_slice(&other.colors);
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.norm();
            if n > 1e-12 {
                *q /= n;
            } else {
                *q = Vector4::new(1.0, 0.0, 0.0, 0.0);
            }
        }
    }
}

/// Unit normal of a Gaussian: the rotated axis with the smallest activated
/// scale (lowest index on ties), flipped so its world z is nonnegative.
pub fn smallest_axis_normal(set: &GaussianSet, i: usize) -> Vector3<f64> {
    smallest_axis(set, i).0
}

/// Normal plus which local axis was chosen and the sign of the flip.
pub(crate) fn smallest_axis(set: &GaussianSet, i: usize) -> (Vector3<f64>, usize, f64) {
    let s = set.scales(i);
    let mut axis = 0;
    for k in 1..3 {
        if s[k] < s[axis] {
            axis = k;
        }
    }
    let r = set.rotation(i);
    let col = r.column(axis).into_owned();
    let sign = if col.z > 0.0 {
        1.0
    } else if col.z < 0.0 {
        -1.0
    } else {
        // degenerate horizontal normal: orient by the dominant component
        let k = if col.x.abs() >= col.y.abs() { 0 } else { 1 };
        if col[k] >= 0.0 {
            1.0
        } else {
            -1.0
        }
    };
    (col * sign, axis, sign)
}

/// Everything the renderer produces for one camera.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    /// Alpha-normalized depth, invalid where coverage is below [`ALPHA_MIN`].
    pub depth: DepthMap,
    /// Accumulated opacity per pixel, row-major, in [0, 1].
    pub alpha: Vec<f64>,
}

/// Upstream gradients for [`render_backward`], one entry per pixel.
///
/// `d_depth` is ignored at pixels whose rendered depth was invalid.
#[derive(Debug, Clone)]
pub struct RenderGrads {
    pub width: usize,
    pub height: usize,
    pub d_color: Vec<[f64; 3]>,
    pub d_depth: Vec<f64>,
    pub d_alpha: Vec<f64>,
}

impl RenderGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            d_color: vec![[0.0; 3]; width * height],
            d_depth: vec![0.0; width * height],
            d_alpha: vec![0.0; width * height],
        }
    }
}

/// Parameter gradients, same columnar layout as [`GaussianSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub centers: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Vector4<f64>>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            centers: vec![Vector3::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            rotations: vec![Vector4::zeros(); n],
            opacity_logits: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// self += k * other
    pub fn add_scaled(&mut self, other: &GaussianGrads, k: f64) {
        assert_eq!(self.len(), other.len(), "gradient sizes disagree");
        for i in 0..self.len() {
            self.centers[i] += other.centers[i] * k;
            self.log_scales[i] += other.log_scales[i] * k;
            self.rotations[i] += other.rotations[i] * k;
            self.opacity_logits[i] += other.opacity_logits[i] * k;
            for c in 0..3 {
                self.colors[i][c] += other.colors[i][c] * k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.centers.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scales.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotations.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logits.iter().all(|x| x.is_finite())
            && self.colors.iter().all(|c| c.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_logit_inverse() {
        for p in [0.01, 0.1, 0.5, 0.9, 0.999] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn smallest_axis_picks_min_scale_and_flips_up() {
        let mut set = GaussianSet::new();
        set.push(
            Vector3::zeros(),
            Vector3::new(0.4f64.ln(), 0.3f64.ln(), 0.1f64.ln()),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            0.0,
            [0.5; 3],
        );
        let n = smallest_axis_normal(&set, 0);
        assert!((n - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);

        // rotate 90 degrees about x: the normal goes horizontal, only its
        // upward orientation is promised
        let a = std::f64::consts::FRAC_PI_4;
        set.rotations[0] = Vector4::new(a.cos(), a.sin(), 0.0, 0.0);
        let n = smallest_axis_normal(&set, 0);
        assert!(n.z.abs() < 1e-12 && n.z >= 0.0);
        assert!((n.y.abs() - 1.0).abs() < 1e-12, "got {n:?}");

        // exactly horizontal: 180 degrees about z maps local x to (-1, 0, 0)
        // and the dominant-component rule flips it back
        set.log_scales[0] = Vector3::new(0.1f64.ln(), 0.3f64.ln(), 0.4f64.ln());
        set.rotations[0] = Vector4::new(0.0, 0.0, 0.0, 1.0);
        let n = smallest_axis_normal(&set, 0);
        assert_eq!((n.x, n.y, n.z), (1.0, 0.0, 0.0));

        // tie on scales resolves to the lowest index
        set.rotations[0] = Vector4::new(1.0, 0.0, 0.0, 0.0);
        set.log_scales[0] = Vector3::new(0.2f64.ln(), 0.2f64.ln(), 0.5f64.ln());
        let (_, axis, _) = smallest_axis(&set, 0);
        assert_eq!(axis, 0);
    }

    #[test]
    fn validate_catches_bad_sets() {
        let mut set = GaussianSet::new();
        set.push(
            Vector3::zeros(),
            Vector3::zeros(),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            0.0,
            [0.5; 3],
        );
        assert!(set.validate().is_ok());
        set.colors[0] = [1.5, 0.0, 0.0];
        assert!(set.validate().is_err());
        set.colors[0] = [0.5; 3];
        set.opacity_logits[0] = f64::NAN;
        assert!(set.validate().is_err());
        set.opacity_logits[0] = 0.0;
        set.rotations[0] = Vector4::zeros();
        assert!(set.validate().is_err());
    }

    #[test]
    fn subset_and_extend_keep_order() {
        let mut set = GaussianSet::new();
        for i in 0..5 {
            set.push(
                Vector3::new(i as f64, 0.0, 0.0),
                Vector3::zeros(),
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                i as f64,
                [0.1 * i as f64; 3],
            );
        }
        let sub = set.subset(&[4, 0, 2]);
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.centers[0].x, 4.0);
        assert_eq!(sub.centers[1].x, 0.0);
        assert_eq!(sub.centers[2].x, 2.0);
        let mut joined = sub.clone();
        joined.extend(&set.subset(&[1]));
        assert_eq!(joined.len(), 4);
        assert_eq!(joined.centers[3].x, 1.0);
    }
}
