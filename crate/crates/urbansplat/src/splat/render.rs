//! Forward rasterization: project, build screen footprints, composite.
//!
//! Footprints use a renormalized truncated Gaussian weight
//! w(q) = (exp(-q/2) - exp(-Q_CUT/2)) / (1 - exp(-Q_CUT/2)) for q < Q_CUT,
//! zero beyond. The weight is continuous at the cutoff and hits 1 at the
//! center, so alpha never exceeds the activated opacity and footprint
//! truncation never introduces jumps into the loss surface.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{Camera, DepthMap, Image};

use super::{GaussianSet, RenderOutput, ALPHA_MIN, EIGEN_FLOOR, NEAR_CLIP, Q_CUT};

pub(crate) const BAND_ROWS: usize = 8;

/// exp(-Q_CUT / 2), the weight level the footprint is renormalized against.
pub(crate) fn weight_cut() -> f64 {
    (-Q_CUT / 2.0).exp()
}

/// One Gaussian prepared for rasterization, everything the backward pass
/// wants cached alongside.
pub(crate) struct ScreenSplat {
    pub gauss_idx: usize,
    pub x_cam: Vector3<f64>,
    pub mean_px: Vector2<f64>,
    /// Inverse of the floored screen covariance.
    pub cov_inv: Matrix2<f64>,
    /// Screen covariance before the eigenvalue floor.
    pub raw_cov: Matrix2<f64>,
    /// J * R_cam^T, the 2x3 map from world offsets to screen offsets.
    pub jw: Matrix2x3<f64>,
    /// Camera-space point the Jacobian was built at; x and y are pulled
    /// back toward the frustum when the true point sits far outside it.
    pub tj: Vector2<f64>,
    /// Which of tj.x / tj.y were clamped.
    pub tj_clamped: [bool; 2],
    /// World-frame covariance R S^2 R^T.
    pub vworld: Matrix3<f64>,
    pub rot: Matrix3<f64>,
    pub scales: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Covered pixel columns [x0, x1) and rows [y0, y1).
    pub bbox: [usize; 4],
}

/// Projects every Gaussian, keeps the visible ones sorted by camera z
/// (index breaks ties), with footprint bounding boxes clamped to the image.
pub(crate) fn prepare(set: &GaussianSet, camera: &Camera) -> Result<Vec<ScreenSplat>> {
    set.validate()?;
    let w_inv = camera.pose.rotation.transpose();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(set.len());
    let mut cams: Vec<Vector3<f64>> = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let x_cam = camera.world_to_cam(&set.centers[i]);
        cams.push(x_cam);
        if x_cam.z > NEAR_CLIP {
            order.push((x_cam.z, i));
        }
    }
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    let mut splats = Vec::with_capacity(order.len());
    for &(_, i) in &order {
        let x_cam = cams[i];
        let (x, y, z) = (x_cam.x, x_cam.y, x_cam.z);
        let mean_px = Vector2::new(camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy);

        // The footprint comes from a local affine fit of the projection,
        // which degenerates for points far outside the view frustum (the
        // fitted slope blows up and a tiny off-screen Gaussian smears over
        // the whole image). Build the fit at a point pulled back to 1.3x
        // the frustum half-angles instead; the mean keeps its exact
        // projection, so clamped Gaussians land off-screen with a sane
        // footprint and get culled by the bounding-box test.
        let lim_x = 1.3 * 0.5 * camera.width as f64 / camera.fx;
        let lim_y = 1.3 * 0.5 * camera.height as f64 / camera.fy;
        let (clamp_x, clamp_y) = ((x / z).abs() > lim_x, (y / z).abs() > lim_y);
        let tx = if clamp_x { (x / z).clamp(-lim_x, lim_x) * z } else { x };
        let ty = if clamp_y { (y / z).clamp(-lim_y, lim_y) * z } else { y };

        let j = Matrix2x3::new(
            camera.fx / z,
            0.0,
            -camera.fx * tx / (z * z),
            0.0,
            camera.fy / z,
            -camera.fy * ty / (z * z),
        );
        let jw = j * w_inv;
        let rot = set.rotation(i);
        let scales = set.scales(i);
        let vworld = rot * Matrix3::from_diagonal(&scales.map(|s| s * s)) * rot.transpose();
        let raw_cov = jw * vworld * jw.transpose();
        if !raw_cov.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("gaussian {i} has a non-finite footprint")));
        }
        let cov = floor_covariance(&raw_cov);
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        let cov_inv = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;

        // pixels whose center can see q < Q_CUT: the ellipse AABB is
        // mean +- 3 sqrt(diag)
        let rx = (Q_CUT * cov[(0, 0)]).sqrt();
        let ry = (Q_CUT * cov[(1, 1)]).sqrt();
        let x0 = (mean_px.x - rx - 0.5).ceil().max(0.0) as i64;
        let x1 = (mean_px.x + rx - 0.5).floor().min(camera.width as f64 - 1.0) as i64;
        let y0 = (mean_px.y - ry - 0.5).ceil().max(0.0) as i64;
        let y1 = (mean_px.y + ry - 0.5).floor().min(camera.height as f64 - 1.0) as i64;
        if x0 > x1 || y0 > y1 || (mean_px.x - rx) >= camera.width as f64 || (mean_px.x + rx) < 0.0
        {
            continue;
        }

        splats.push(ScreenSplat {
            gauss_idx: i,
            x_cam,
            mean_px,
            cov_inv,
            raw_cov,
            jw,
            tj: Vector2::new(tx, ty),
            tj_clamped: [clamp_x, clamp_y],
            vworld,
            rot,
            scales,
            opacity: set.opacity(i),
            color: set.colors[i],
            bbox: [x0 as usize, x1 as usize + 1, y0 as usize, y1 as usize + 1],
        });
    }
    Ok(splats)
}

/// Eigenvalues (l1 >= l2) and the unit eigenvector of l1.
pub(crate) fn eigen2(m: &Matrix2<f64>) -> (f64, f64, Vector2<f64>) {
    let a = m[(0, 0)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let c = m[(1, 1)];
    let half_tr = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let l1 = half_tr + disc;
    let l2 = half_tr - disc;
    let cand1 = Vector2::new(l1 - c, b);
    let cand2 = Vector2::new(b, l1 - a);
    let v = if cand1.norm() >= cand2.norm() { cand1 } else { cand2 };
    let v1 = if v.norm() > 1e-300 { v.normalize() } else { Vector2::new(1.0, 0.0) };
    (l1, l2, v1)
}

/// Clamps the eigenvalues of a symmetric 2x2 at [`EIGEN_FLOOR`]. Returns the
/// input untouched when the floor is inactive.
pub(crate) fn floor_covariance(raw: &Matrix2<f64>) -> Matrix2<f64> {
    let (l1, l2, v1) = eigen2(raw);
    if l2 >= EIGEN_FLOOR {
        return *raw;
    }
    let f1 = l1.max(EIGEN_FLOOR);
    let f2 = l2.max(EIGEN_FLOOR);
    let v2 = Vector2::new(-v1.y, v1.x);
    f1 * v1 * v1.transpose() + f2 * v2 * v2.transpose()
}

/// Backward of [`floor_covariance`]: pushes a gradient on the floored matrix
/// back to the raw one via the spectral-function rule.
pub(crate) fn floor_covariance_backward(raw: &Matrix2<f64>, g: &Matrix2<f64>) -> Matrix2<f64> {
    let (l1, l2, v1) = eigen2(raw);
    if l2 >= EIGEN_FLOOR {
        return *g;
    }
    let v2 = Vector2::new(-v1.y, v1.x);
    let q = Matrix2::from_columns(&[v1, v2]);
    let gq = q.transpose() * g * q;
    let d1 = if l1 > EIGEN_FLOOR { 1.0 } else { 0.0 };
    let d2 = if l2 > EIGEN_FLOOR { 1.0 } else { 0.0 };
    let off = if (l1 - l2).abs() > 1e-12 {
        (l1.max(EIGEN_FLOOR) - l2.max(EIGEN_FLOOR)) / (l1 - l2)
    } else {
        d1
    };
    let inner = Matrix2::new(
        gq[(0, 0)] * d1,
        gq[(0, 1)] * off,
        gq[(1, 0)] * off,
        gq[(1, 1)] * d2,
    );
    q * inner * q.transpose()
}

/// Flat per-pixel contributor lists for a band of rows, each list ordered by
/// compositing rank (the splat slice is already z-sorted).
pub(crate) fn rasterize_band(
    splats: &[ScreenSplat],
    width: usize,
    row0: usize,
    row1: usize,
) -> (Vec<u32>, Vec<u32>) {
    let pixels = (row1 - row0) * width;
    let mut counts = vec![0u32; pixels + 1];
    for s in splats {
        let r0 = s.bbox[2].max(row0);
        let r1 = s.bbox[3].min(row1);
        for r in r0..r1 {
            let base = (r - row0) * width;
            for c in s.bbox[0]..s.bbox[1] {
                counts[base + c + 1] += 1;
            }
        }
    }
    for i in 1..counts.len() {
        counts[i] += counts[i - 1];
    }
    let mut flat = vec![0u32; counts[pixels] as usize];
    let mut cursor = counts.clone();
    for (slot, s) in splats.iter().enumerate() {
        let r0 = s.bbox[2].max(row0);
        let r1 = s.bbox[3].min(row1);
        for r in r0..r1 {
            let base = (r - row0) * width;
            for c in s.bbox[0]..s.bbox[1] {
                let p = base + c;
                flat[cursor[p] as usize] = slot as u32;
                cursor[p] += 1;
            }
        }
    }
    (counts, flat)
}

struct BandOutput {
    row0: usize,
    color: Vec<f64>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    depth_valid: Vec<bool>,
}

/// Renders the set through a camera: composited color, alpha-normalized
/// depth (invalid under [`ALPHA_MIN`] coverage) and accumulated alpha.
pub fn render(set: &GaussianSet, camera: &Camera) -> Result<RenderOutput> {
    let splats = prepare(set, camera)?;
    let (w, h) = (camera.width, camera.height);
    let w_cut = weight_cut();

    let bands: Vec<usize> = (0..h).step_by(BAND_ROWS).collect();
    let outputs: Vec<BandOutput> = bands
        .par_iter()
        .map(|&row0| {
            let row1 = (row0 + BAND_ROWS).min(h);
            let (offsets, flat) = rasterize_band(&splats, w, row0, row1);
            let rows = row1 - row0;
            let mut out = BandOutput {
                row0,
                color: vec![0.0; rows * w * 3],
                alpha: vec![0.0; rows * w],
                depth: vec![0.0; rows * w],
                depth_valid: vec![false; rows * w],
            };
            for p in 0..rows * w {
                let list = &flat[offsets[p] as usize..offsets[p + 1] as usize];
                if list.is_empty() {
                    continue;
                }
                let (col, row) = (p % w, p / w + row0);
                let center = Camera::pixel_center(col, row);
                let mut transmittance = 1.0;
                let mut rgb = [0.0f64; 3];
                let mut acc_alpha = 0.0;
                let mut acc_zalpha = 0.0;
                for &slot in list {
                    let s = &splats[slot as usize];
                    let d = center - s.mean_px;
                    let q = (s.cov_inv * d).dot(&d);
                    if q >= Q_CUT {
                        continue;
                    }
                    let weight = ((-0.5 * q).exp() - w_cut) / (1.0 - w_cut);
                    let alpha = s.opacity * weight;
                    let contrib = alpha * transmittance;
                    for ch in 0..3 {
                        rgb[ch] += s.color[ch] * contrib;
                    }
                    acc_alpha += contrib;
                    acc_zalpha += s.x_cam.z * contrib;
                    transmittance *= 1.0 - alpha;
                }
                for ch in 0..3 {
                    out.color[p * 3 + ch] = rgb[ch];
                }
                out.alpha[p] = acc_alpha.min(1.0);
                if acc_alpha >= ALPHA_MIN {
                    out.depth[p] = acc_zalpha / acc_alpha;
                    out.depth_valid[p] = true;
                }
            }
            out
        })
        .collect();

    let mut color = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut depth = DepthMap::new_invalid(w, h);
    for band in outputs {
        let rows = band.alpha.len() / w;
        for r in 0..rows {
            let row = band.row0 + r;
            for c in 0..w {
                let src = r * w + c;
                let dst = row * w + c;
                color[dst * 3..dst * 3 + 3].copy_from_slice(&band.color[src * 3..src * 3 + 3]);
                alpha[dst] = band.alpha[src];
                if band.depth_valid[src] {
                    depth.set(c, row, band.depth[src]);
                }
            }
        }
    }
    Ok(RenderOutput {
        color: Image::from_data_clamped(w, h, 3, color)?,
        depth,
        alpha,
    })
}
