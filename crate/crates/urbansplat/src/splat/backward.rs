//! Analytic backward pass of the renderer. No autodiff anywhere: the
//! compositing chain is recomputed per pixel and gradients flow through
//! footprint weights, the eigenvalue floor, the projection Jacobian
//! (including its dependence on the camera-space mean), scale and opacity
//! activations, and quaternion normalization.

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{rotation_quaternion_jacobian, Camera};

use super::render::{prepare, rasterize_band, weight_cut, ScreenSplat, BAND_ROWS};
use super::render::floor_covariance_backward;
use super::{GaussianGrads, GaussianSet, RenderGrads, ALPHA_MIN, Q_CUT};

/// Per-splat gradients in screen terms, accumulated over pixels.
struct SlotGrads {
    d_mean: Vec<Vector2<f64>>,
    d_cov_inv: Vec<Matrix2<f64>>,
    /// With respect to the activated opacity.
    d_opacity: Vec<f64>,
    d_color: Vec<[f64; 3]>,
    /// With respect to the camera-frame z entering the depth channel.
    d_zcam: Vec<f64>,
}

impl SlotGrads {
    fn zeros(n: usize) -> Self {
        Self {
            d_mean: vec![Vector2::zeros(); n],
            d_cov_inv: vec![Matrix2::zeros(); n],
            d_opacity: vec![0.0; n],
            d_color: vec![[0.0; 3]; n],
            d_zcam: vec![0.0; n],
        }
    }

    fn merge(&mut self, other: &SlotGrads) {
        for i in 0..self.d_mean.len() {
            self.d_mean[i] += other.d_mean[i];
            self.d_cov_inv[i] += other.d_cov_inv[i];
            self.d_opacity[i] += other.d_opacity[i];
            for c in 0..3 {
                self.d_color[i][c] += other.d_color[i][c];
            }
            self.d_zcam[i] += other.d_zcam[i];
        }
    }
}

struct Contribution {
    slot: u32,
    alpha: f64,
    weight: f64,
    /// exp(-q/2) at this pixel.
    eq: f64,
    offset: Vector2<f64>,
    /// Transmittance in front of this contributor.
    trans: f64,
}

/// Gradients of a scalar loss with respect to every Gaussian parameter,
/// given upstream gradients on the rendered color, depth and alpha.
///
/// `upstream.d_depth` is read only at pixels where the forward pass produced
/// a valid depth; anything stored elsewhere is treated as zero.
pub fn render_backward(
    set: &GaussianSet,
    camera: &Camera,
    upstream: &RenderGrads,
) -> Result<GaussianGrads> {
    let (w, h) = (camera.width, camera.height);
    if upstream.width != w || upstream.height != h {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradients are {}x{}, camera renders {}x{}",
            upstream.width, upstream.height, w, h
        )));
    }
    let n_px = w * h;
    if upstream.d_color.len() != n_px || upstream.d_depth.len() != n_px || upstream.d_alpha.len() != n_px
    {
        return Err(Error::DimensionMismatch("upstream gradient buffers disagree in size".into()));
    }

    let splats = prepare(set, camera)?;
    let mut grads = GaussianGrads::zeros(set.len());
    if splats.is_empty() {
        return Ok(grads);
    }
    let w_cut = weight_cut();

    let bands: Vec<usize> = (0..h).step_by(BAND_ROWS).collect();
    let mut band_grads: Vec<SlotGrads> = bands
        .par_iter()
        .map(|&row0| {
            let row1 = (row0 + BAND_ROWS).min(h);
            let (offsets, flat) = rasterize_band(&splats, w, row0, row1);
            let mut sg = SlotGrads::zeros(splats.len());
            let mut chain: Vec<Contribution> = Vec::new();
            for p in 0..(row1 - row0) * w {
                let list = &flat[offsets[p] as usize..offsets[p + 1] as usize];
                if list.is_empty() {
                    continue;
                }
                let (col, row) = (p % w, p / w + row0);
                let center = Camera::pixel_center(col, row);
                let px = row * w + col;

                // forward chain replay
                chain.clear();
                let mut trans = 1.0;
                let mut acc_alpha = 0.0;
                let mut acc_zalpha = 0.0;
                for &slot in list {
                    let s = &splats[slot as usize];
                    let offset = center - s.mean_px;
                    let q = (s.cov_inv * offset).dot(&offset);
                    if q >= Q_CUT {
                        continue;
                    }
                    let eq = (-0.5 * q).exp();
                    let weight = (eq - w_cut) / (1.0 - w_cut);
                    let alpha = s.opacity * weight;
                    chain.push(Contribution { slot, alpha, weight, eq, offset, trans });
                    acc_alpha += alpha * trans;
                    acc_zalpha += s.x_cam.z * alpha * trans;
                    trans *= 1.0 - alpha;
                }
                if chain.is_empty() {
                    continue;
                }

                let g_color = upstream.d_color[px];
                let depth_valid = acc_alpha >= ALPHA_MIN;
                let g_depth = if depth_valid { upstream.d_depth[px] } else { 0.0 };
                // depth = accz / acc, alpha output = acc
                let d_accz = if depth_valid { g_depth / acc_alpha } else { 0.0 };
                let d_acc = upstream.d_alpha[px]
                    + if depth_valid {
                        -g_depth * acc_zalpha / (acc_alpha * acc_alpha)
                    } else {
                        0.0
                    };

                // reverse scan with suffix sums of everything behind k
                let mut suffix_color = [0.0f64; 3];
                let mut suffix_acc = 0.0;
                let mut suffix_z = 0.0;
                for k in (0..chain.len()).rev() {
                    let ctr = &chain[k];
                    let s = &splats[ctr.slot as usize];
                    let contrib = ctr.alpha * ctr.trans;
                    let keep = 1.0 - ctr.alpha;

                    let mut d_alpha_k = 0.0;
                    for ch in 0..3 {
                        d_alpha_k += g_color[ch] * (s.color[ch] * ctr.trans - suffix_color[ch] / keep);
                        sg.d_color[ctr.slot as usize][ch] += g_color[ch] * contrib;
                    }
                    d_alpha_k += d_acc * (ctr.trans - suffix_acc / keep);
                    d_alpha_k += d_accz * (s.x_cam.z * ctr.trans - suffix_z / keep);
                    sg.d_zcam[ctr.slot as usize] += d_accz * contrib;

                    for ch in 0..3 {
                        suffix_color[ch] += s.color[ch] * contrib;
                    }
                    suffix_acc += contrib;
                    suffix_z += s.x_cam.z * contrib;

                    // alpha = opacity * weight(q)
                    sg.d_opacity[ctr.slot as usize] += d_alpha_k * ctr.weight;
                    let d_q = d_alpha_k * s.opacity * (-ctr.eq / (2.0 * (1.0 - w_cut)));
                    let md = s.cov_inv * ctr.offset;
                    sg.d_mean[ctr.slot as usize] += -2.0 * d_q * md;
                    sg.d_cov_inv[ctr.slot as usize] += d_q * ctr.offset * ctr.offset.transpose();
                }
            }
            sg
        })
        .collect();

    // fold bands in order, then walk splats once to reach the parameters
    let mut total = band_grads.remove(0);
    for bg in &band_grads {
        total.merge(bg);
    }

    let w_inv_t = camera.pose.rotation;
    for (slot, s) in splats.iter().enumerate() {
        accumulate_splat(
            s,
            camera,
            &w_inv_t,
            &total.d_mean[slot],
            &total.d_cov_inv[slot],
            total.d_opacity[slot],
            &total.d_color[slot],
            total.d_zcam[slot],
            set,
            &mut grads,
        );
    }
    if !grads.is_finite() {
        return Err(Error::Numerical("render backward produced non-finite gradients".into()));
    }
    Ok(grads)
}

/// Chains one splat's screen-space gradients down to its parameters.
#[allow(clippy::too_many_arguments)]
fn accumulate_splat(
    s: &ScreenSplat,
    camera: &Camera,
    cam_rot: &nalgebra::Matrix3<f64>,
    d_mean: &Vector2<f64>,
    d_cov_inv: &Matrix2<f64>,
    d_opacity: f64,
    d_color: &[f64; 3],
    d_zcam: f64,
    set: &GaussianSet,
    grads: &mut GaussianGrads,
) {
    let i = s.gauss_idx;

    // through the inverse: d(cov) = -cov_inv^T dM cov_inv^T, all symmetric
    let g_floored = -(s.cov_inv * d_cov_inv * s.cov_inv);
    let g_raw = floor_covariance_backward(&s.raw_cov, &g_floored);
    let g2 = 0.5 * (g_raw + g_raw.transpose());

    // raw = JW V JW^T
    let d_jw = 2.0 * g2 * s.jw * s.vworld;
    let g_v = s.jw.transpose() * g2 * s.jw;

    // JW = J * R_cam^T, so dL/dJ = dL/dJW * R_cam
    let d_j = d_jw * cam_rot;

    // The Jacobian was built at the frustum-clamped point (tx, ty). Where
    // a coordinate was clamped it no longer depends on the true x or y,
    // and tx = lim * z makes J02 = -fx * lim / z, so the z term loses
    // half its usual 2 fx tx / z^3.
    let (x, y, z) = (s.x_cam.x, s.x_cam.y, s.x_cam.z);
    let (tx, ty) = (s.tj.x, s.tj.y);
    let (kx, ky) = (
        if s.tj_clamped[0] { (0.0, 1.0) } else { (1.0, 2.0) },
        if s.tj_clamped[1] { (0.0, 1.0) } else { (1.0, 2.0) },
    );
    let (fx, fy) = (camera.fx, camera.fy);
    let z2 = z * z;
    let mut d_xcam = Vector3::new(
        kx.0 * d_j[(0, 2)] * (-fx / z2),
        ky.0 * d_j[(1, 2)] * (-fy / z2),
        d_j[(0, 0)] * (-fx / z2)
            + d_j[(1, 1)] * (-fy / z2)
            + d_j[(0, 2)] * (kx.1 * fx * tx / (z2 * z))
            + d_j[(1, 2)] * (ky.1 * fy * ty / (z2 * z)),
    );

    // projected mean (fx x/z + cx, fy y/z + cy)
    d_xcam.x += d_mean.x * fx / z;
    d_xcam.y += d_mean.y * fy / z;
    d_xcam.z += -d_mean.x * fx * x / z2 - d_mean.y * fy * y / z2;

    d_xcam.z += d_zcam;

    // x_cam = R_cam^T (mu - t)
    grads.centers[i] += cam_rot * d_xcam;

    // V = R S^2 R^T
    let s2 = nalgebra::Matrix3::from_diagonal(&s.scales.map(|v| v * v));
    let d_rot = 2.0 * g_v * s.rot * s2;
    let rt_gv_r = s.rot.transpose() * g_v * s.rot;
    for a in 0..3 {
        grads.log_scales[i][a] += 2.0 * s.scales[a] * s.scales[a] * rt_gv_r[(a, a)];
    }
    let jac = rotation_quaternion_jacobian(&set.rotations[i]);
    for (k, jk) in jac.iter().enumerate() {
        grads.rotations[i][k] += d_rot.component_mul(jk).sum();
    }

    let o = s.opacity;
    grads.opacity_logits[i] += d_opacity * o * (1.0 - o);
    for c in 0..3 {
        grads.colors[i][c] += d_color[c];
    }
}
