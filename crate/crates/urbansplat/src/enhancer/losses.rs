//! The depth-refinement objective, term by term. Every loss returns its
//! value together with the gradient with respect to the refined depth map,
//! as a row-major per-pixel buffer.

use crate::error::{Error, Result};
use crate::geom::{Camera, DepthMap, Image, NEAR_EPS};

/// Sign with sgn(0) = 0, so |x| has a zero subgradient at the kink and
/// exact agreement stays a fixed point of descent.
#[inline]
pub(crate) fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Binary per-pixel gate: 1 where two depth maps agree within a ratio bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
}

impl ConfidenceMap {
    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

/// Marks a pixel confident when max(cur/prev, prev/cur) stays strictly below
/// `lambda_c`. Pixels invalid in either map are never confident.
pub fn confidence(current: &DepthMap, previous: &DepthMap, lambda_c: f64) -> Result<ConfidenceMap> {
    if current.width != previous.width || current.height != previous.height {
        return Err(Error::DimensionMismatch("confidence inputs disagree in size".into()));
    }
    if !(lambda_c.is_finite() && lambda_c > 0.0) {
        return Err(Error::InvalidArgument(format!("confidence ratio bound {lambda_c} is invalid")));
    }
    let mut values = vec![0.0; current.width * current.height];
    for (i, v) in values.iter_mut().enumerate() {
        let (c, r) = (i % current.width, i / current.width);
        if let (Some(cur), Some(prev)) = (current.get(c, r), previous.get(c, r)) {
            let ratio = (cur / prev).max(prev / cur);
            if ratio < lambda_c {
                *v = 1.0;
            }
        }
    }
    Ok(ConfidenceMap { width: current.width, height: current.height, values })
}

/// Patch-pooled agreement with a reference depth, gated by confidence.
///
/// Both maps are average-pooled over `patch` x `patch` tiles (only mutually
/// valid pixels enter the averages; the confidence gate pools over the whole
/// tile), each tile contributes conf * (|d| + d^2), and the result is the
/// mean over all tiles.
pub fn loss_ref(
    d_hat: &DepthMap,
    d_ref: &DepthMap,
    conf: &ConfidenceMap,
    patch: usize,
) -> Result<(f64, Vec<f64>)> {
    if d_hat.width != d_ref.width
        || d_hat.height != d_ref.height
        || conf.width != d_hat.width
        || conf.height != d_hat.height
    {
        return Err(Error::DimensionMismatch("reference loss inputs disagree in size".into()));
    }
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    Ok(loss_ref_core(
        d_hat.values(),
        d_hat.valid_mask(),
        d_ref.values(),
        d_ref.valid_mask(),
        conf.values(),
        d_hat.width,
        d_hat.height,
        patch,
    ))
}

pub(crate) fn loss_ref_core(
    dh: &[f64],
    dh_ok: &[bool],
    dr: &[f64],
    dr_ok: &[bool],
    conf: &[f64],
    width: usize,
    height: usize,
    patch: usize,
) -> (f64, Vec<f64>) {
    let tiles_x = width.div_ceil(patch);
    let tiles_y = height.div_ceil(patch);
    let n_tiles = (tiles_x * tiles_y) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; width * height];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let c0 = tx * patch;
            let c1 = (c0 + patch).min(width);
            let r0 = ty * patch;
            let r1 = (r0 + patch).min(height);
            let mut sum_h = 0.0;
            let mut sum_r = 0.0;
            let mut support = 0usize;
            let mut conf_sum = 0.0;
            let mut area = 0usize;
            for r in r0..r1 {
                for c in c0..c1 {
                    let i = r * width + c;
                    conf_sum += conf[i];
                    area += 1;
                    if dh_ok[i] && dr_ok[i] {
                        sum_h += dh[i];
                        sum_r += dr[i];
                        support += 1;
                    }
                }
            }
            if support == 0 {
                continue;
            }
            let tile_conf = conf_sum / area as f64;
            let delta = (sum_h - sum_r) / support as f64;
            loss += tile_conf * (delta.abs() + delta * delta) / n_tiles;
            let d_delta = tile_conf * (sgn(delta) + 2.0 * delta) / n_tiles / support as f64;
            for r in r0..r1 {
                for c in c0..c1 {
                    let i = r * width + c;
                    if dh_ok[i] && dr_ok[i] {
                        grad[i] += d_delta;
                    }
                }
            }
        }
    }
    (loss, grad)
}

/// Edge-aware first-order smoothness: mean |forward depth difference| damped
/// by exp(-|image gradient|), both axes, normalized by pixel count.
pub fn loss_smooth(d_hat: &DepthMap, image: &Image) -> Result<(f64, Vec<f64>)> {
    if d_hat.width != image.width || d_hat.height != image.height {
        return Err(Error::DimensionMismatch("smoothness inputs disagree in size".into()));
    }
    Ok(loss_smooth_core(d_hat.values(), d_hat.valid_mask(), image))
}

pub(crate) fn loss_smooth_core(d: &[f64], ok: &[bool], image: &Image) -> (f64, Vec<f64>) {
    let (w, h) = (image.width, image.height);
    let n = (w * h) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; w * h];
    let img_weight = |ca: usize, ra: usize, cb: usize, rb: usize| -> f64 {
        let pa = image.pixel3(ca, ra);
        let pb = image.pixel3(cb, rb);
        let mag = (0..3).map(|ch| (pa[ch] - pb[ch]).abs()).sum::<f64>() / 3.0;
        (-mag).exp()
    };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !ok[i] {
                continue;
            }
            if c + 1 < w && ok[i + 1] {
                let wgt = img_weight(c, r, c + 1, r);
                let diff = d[i + 1] - d[i];
                loss += diff.abs() * wgt / n;
                let g = sgn(diff) * wgt / n;
                grad[i + 1] += g;
                grad[i] -= g;
            }
            if r + 1 < h && ok[i + w] {
                let wgt = img_weight(c, r, c, r + 1);
                let diff = d[i + w] - d[i];
                loss += diff.abs() * wgt / n;
                let g = sgn(diff) * wgt / n;
                grad[i + w] += g;
                grad[i] -= g;
            }
        }
    }
    (loss, grad)
}

/// Reprojects a source depth map into a destination camera with nearest-pixel
/// splatting and a z-buffer. Destination pixels nothing lands on stay invalid.
pub fn warp(d_src: &DepthMap, cam_src: &Camera, cam_dst: &Camera) -> Result<DepthMap> {
    if d_src.width != cam_src.width || d_src.height != cam_src.height {
        return Err(Error::DimensionMismatch("source depth does not match its camera".into()));
    }
    let mut out = DepthMap::new_invalid(cam_dst.width, cam_dst.height);
    for (c, r, depth) in d_src.iter_valid() {
        let world = cam_src.unproject(Camera::pixel_center(c, r), depth)?;
        let Some((px, z)) = cam_dst.project(&world) else {
            continue;
        };
        if z <= NEAR_EPS || !cam_dst.contains(&px) {
            continue;
        }
        let (tc, tr) = (px.x.floor() as usize, px.y.floor() as usize);
        match out.get(tc, tr) {
            Some(existing) if existing <= z => {}
            _ => out.set(tc, tr, z),
        }
    }
    Ok(out)
}

/// Multi-view consistency: each neighbor's depth is warped into `camera` and
/// compared to `d_hat` with a per-pixel mean absolute difference; neighbor
/// terms are summed. The gradient flows to `d_hat` only.
pub fn loss_warp(
    d_hat: &DepthMap,
    neighbors: &[(&DepthMap, &Camera)],
    camera: &Camera,
) -> Result<(f64, Vec<f64>)> {
    let mut warped = Vec::with_capacity(neighbors.len());
    for (depth, cam) in neighbors {
        warped.push(warp(depth, cam, camera)?);
    }
    Ok(loss_warp_core(d_hat.values(), d_hat.valid_mask(), &warped))
}

pub(crate) fn loss_warp_core(dh: &[f64], ok: &[bool], warped: &[DepthMap]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; dh.len()];
    for wmap in warped {
        let mut term = 0.0;
        let mut count = 0usize;
        for (i, (wv, wok)) in wmap.values().iter().zip(wmap.valid_mask()).enumerate() {
            if *wok && ok[i] {
                term += (wv - dh[i]).abs();
                count += 1;
            }
        }
        if count == 0 {
            continue;
        }
        loss += term / count as f64;
        let inv = 1.0 / count as f64;
        for (i, (wv, wok)) in wmap.values().iter().zip(wmap.valid_mask()).enumerate() {
            if *wok && ok[i] {
                grad[i] += -sgn(wv - dh[i]) * inv;
            }
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_camera(w: usize, h: usize, fx: f64) -> Camera {
        Camera::new(fx, fx, w as f64 / 2.0, h as f64 / 2.0, w, h, Pose::identity()).unwrap()
    }

    #[test]
    fn confidence_threshold_is_strict() {
        let prev = DepthMap::from_values(4, 1, vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let eps = 1e-9;
        let cur = DepthMap::from_values(4, 1, vec![3.0, 4.0 - eps, 4.0, 5.0]).unwrap();
        let conf = confidence(&cur, &prev, 2.0).unwrap();
        assert_eq!(conf.values(), &[1.0, 1.0, 0.0, 0.0], "ratio 2.0 must not pass a strict bound");

        // inverse ratios behave the same
        let cur_inv = DepthMap::from_values(4, 1, vec![1.5, 1.0 + eps, 1.0, 0.5]).unwrap();
        let conf = confidence(&cur_inv, &prev, 2.0).unwrap();
        assert_eq!(conf.values(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn confidence_needs_both_pixels_valid() {
        let mut prev = DepthMap::from_values(2, 1, vec![2.0, 2.0]).unwrap();
        prev.invalidate(1, 0);
        let cur = DepthMap::from_values(2, 1, vec![2.0, 2.0]).unwrap();
        let conf = confidence(&cur, &prev, 2.0).unwrap();
        assert_eq!(conf.values(), &[1.0, 0.0]);
    }

    #[test]
    fn loss_ref_single_patch_frozen() {
        // one 2x2 tile, pooled difference 0.5, full confidence
        let d_hat = DepthMap::from_values(2, 2, vec![2.5, 2.5, 2.5, 2.5]).unwrap();
        let d_ref = DepthMap::from_values(2, 2, vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let conf = confidence(&d_ref, &d_ref, 2.0).unwrap();
        let (loss, grad) = loss_ref(&d_hat, &d_ref, &conf, 2).unwrap();
        assert!((loss - 0.75).abs() < 1e-15, "|0.5| + 0.25 = 0.75, got {loss}");
        // d(0.75)/d(pixel) = (1 + 2*0.5) / 4
        for g in grad {
            assert!((g - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_ref_pools_over_valid_support_only() {
        // one pixel of the reference is invalid; averages run over the other 3
        let d_hat = DepthMap::from_values(2, 2, vec![3.0, 3.0, 3.0, 3.0]).unwrap();
        let mut d_ref = DepthMap::from_values(2, 2, vec![2.0, 2.0, 2.0, 9.9]).unwrap();
        d_ref.invalidate(1, 1);
        let conf_vals = DepthMap::from_values(2, 2, vec![1.0; 4]).unwrap();
        let conf = confidence(&conf_vals, &conf_vals, 2.0).unwrap();
        let (loss, grad) = loss_ref(&d_hat, &d_ref, &conf, 2).unwrap();
        let delta: f64 = 1.0;
        assert!((loss - (delta.abs() + delta * delta)).abs() < 1e-12);
        assert_eq!(grad[3], 0.0, "invalid pixels take no gradient");
        assert!((grad[0] - (1.0 + 2.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn loss_ref_zero_confidence_kills_everything() {
        let d_hat = DepthMap::from_values(4, 4, vec![5.0; 16]).unwrap();
        let d_ref = DepthMap::from_values(4, 4, vec![1.0; 16]).unwrap();
        // ratio 5 >= 2 so no pixel is confident
        let conf = confidence(&d_hat, &d_ref, 2.0).unwrap();
        let (loss, grad) = loss_ref(&d_hat, &d_ref, &conf, 2).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn loss_ref_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (w, h) = (9, 7);
        let vals: Vec<f64> = (0..w * h).map(|_| rng.gen_range(1.0..6.0)).collect();
        let refs: Vec<f64> = (0..w * h).map(|_| rng.gen_range(1.0..6.0)).collect();
        let d_hat = DepthMap::from_values(w, h, vals.clone()).unwrap();
        let d_ref = DepthMap::from_values(w, h, refs).unwrap();
        let conf = confidence(&d_ref, &d_ref, 2.0).unwrap();
        let (_, grad) = loss_ref(&d_hat, &d_ref, &conf, 3).unwrap();
        let hstep = 1e-6;
        for _ in 0..25 {
            let i = rng.gen_range(0..w * h);
            let mut vp = vals.clone();
            vp[i] += hstep;
            let mut vm = vals.clone();
            vm[i] -= hstep;
            let lp = loss_ref(&DepthMap::from_values(w, h, vp).unwrap(), &d_ref, &conf, 3).unwrap().0;
            let lm = loss_ref(&DepthMap::from_values(w, h, vm).unwrap(), &d_ref, &conf, 3).unwrap().0;
            let fd = (lp - lm) / (2.0 * hstep);
            assert!((fd - grad[i]).abs() < 1e-8, "pixel {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn loss_smooth_ramp_frozen() {
        let (w, h) = (8, 5);
        let slope = 0.25;
        let vals: Vec<f64> = (0..w * h).map(|i| 1.0 + slope * (i % w) as f64).collect();
        let d = DepthMap::from_values(w, h, vals).unwrap();
        let img = Image::new(w, h, 3).unwrap();
        let (loss, _) = loss_smooth(&d, &img).unwrap();
        // constant image leaves weights at 1; only x-differences contribute
        let expect = slope * ((w - 1) * h) as f64 / (w * h) as f64;
        assert!((loss - expect).abs() < 1e-12, "got {loss}, want {expect}");
    }

    #[test]
    fn loss_smooth_edges_damp_the_penalty() {
        let (w, h) = (6, 6);
        let vals: Vec<f64> = (0..w * h).map(|i| if i % w < 3 { 2.0 } else { 4.0 }).collect();
        let d = DepthMap::from_values(w, h, vals).unwrap();
        let flat = Image::new(w, h, 3).unwrap();
        let mut edge_data = vec![0.0; w * h * 3];
        for r in 0..h {
            for c in 3..w {
                for ch in 0..3 {
                    edge_data[(r * w + c) * 3 + ch] = 1.0;
                }
            }
        }
        let edgy = Image::from_data(w, h, 3, edge_data).unwrap();
        let (l_flat, _) = loss_smooth(&d, &flat).unwrap();
        let (l_edgy, _) = loss_smooth(&d, &edgy).unwrap();
        assert!(l_edgy < l_flat, "image edge must forgive the depth jump");
    }

    #[test]
    fn loss_smooth_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let (w, h) = (7, 6);
        let vals: Vec<f64> = (0..w * h).map(|_| rng.gen_range(1.0..5.0)).collect();
        let img_data: Vec<f64> = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::from_data(w, h, 3, img_data).unwrap();
        let d = DepthMap::from_values(w, h, vals.clone()).unwrap();
        let (_, grad) = loss_smooth(&d, &img).unwrap();
        let hstep = 1e-7;
        for i in 0..w * h {
            let mut vp = vals.clone();
            vp[i] += hstep;
            let mut vm = vals.clone();
            vm[i] -= hstep;
            let lp = loss_smooth(&DepthMap::from_values(w, h, vp).unwrap(), &img).unwrap().0;
            let lm = loss_smooth(&DepthMap::from_values(w, h, vm).unwrap(), &img).unwrap().0;
            let fd = (lp - lm) / (2.0 * hstep);
            assert!((fd - grad[i]).abs() < 1e-7, "pixel {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn warp_same_camera_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let cam = flat_camera(12, 9, 40.0);
        let vals: Vec<f64> = (0..12 * 9).map(|_| rng.gen_range(1.0..8.0)).collect();
        let mut d = DepthMap::from_values(12, 9, vals).unwrap();
        d.invalidate(3, 4);
        let out = warp(&d, &cam, &cam).unwrap();
        for r in 0..9 {
            for c in 0..12 {
                assert_eq!(out.get(c, r), d.get(c, r), "pixel ({c},{r})");
            }
        }
    }

    #[test]
    fn warp_lateral_baseline_shifts_by_disparity() {
        // fx 64, baseline 0.5 m, depth 4 m: disparity exactly 8 px
        let (w, h) = (24, 10);
        let src = flat_camera(w, h, 64.0);
        let mut dst = src.clone();
        dst.pose.translation = Vector3::new(0.5, 0.0, 0.0);
        let depth = 4.0;
        let d = DepthMap::from_values(w, h, vec![depth; w * h]).unwrap();
        let out = warp(&d, &src, &dst).unwrap();
        let disparity = 64.0 * 0.5 / depth;
        assert_eq!(disparity, 8.0);
        for r in 0..h {
            for c in 0..w {
                if c + 8 < w {
                    // source pixel c+8 lands here
                    assert_eq!(out.get(c, r), Some(depth), "pixel ({c},{r})");
                } else {
                    assert_eq!(out.get(c, r), None);
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_recovers_the_plane() {
        let (w, h) = (20, 14);
        let src = flat_camera(w, h, 50.0);
        let mut dst = src.clone();
        dst.pose.translation = Vector3::new(0.4, 0.1, 0.0);
        let depth = 3.5;
        let d = DepthMap::from_values(w, h, vec![depth; w * h]).unwrap();
        let forth = warp(&d, &src, &dst).unwrap();
        let back = warp(&forth, &dst, &src).unwrap();
        assert!(back.valid_count() > 0, "round trip must keep some pixels");
        for (_, _, v) in back.iter_valid() {
            assert!((v - depth).abs() < 1e-3, "depth drifted to {v}");
        }
    }

    #[test]
    fn warp_z_buffer_keeps_the_nearest() {
        // two source pixels collapse onto one destination pixel
        let src = Camera::new(50.0, 50.0, 1.0, 0.5, 2, 1, Pose::identity()).unwrap();
        let dst = Camera::new(25.0, 25.0, 0.5, 0.5, 1, 1, Pose::identity()).unwrap();
        let d = DepthMap::from_values(2, 1, vec![3.0, 2.0]).unwrap();
        let out = warp(&d, &src, &dst).unwrap();
        assert_eq!(out.get(0, 0), Some(2.0));
    }

    #[test]
    fn loss_warp_uniform_bias_frozen() {
        let cam = flat_camera(10, 8, 30.0);
        let d_hat = DepthMap::from_values(10, 8, vec![4.0; 80]).unwrap();
        let neighbor = DepthMap::from_values(10, 8, vec![4.1; 80]).unwrap();
        let (loss, grad) = loss_warp(&d_hat, &[(&neighbor, &cam)], &cam).unwrap();
        assert!((loss - 0.1).abs() < 1e-12, "uniform 0.1 bias gives L = 0.1, got {loss}");
        // neighbor is deeper, so the gradient pushes d_hat up (negative sign)
        assert!(grad.iter().all(|g| (*g - (-1.0 / 80.0)).abs() < 1e-15));
    }

    #[test]
    fn loss_warp_sums_over_neighbors() {
        let cam = flat_camera(6, 6, 30.0);
        let d_hat = DepthMap::from_values(6, 6, vec![4.0; 36]).unwrap();
        let n1 = DepthMap::from_values(6, 6, vec![4.2; 36]).unwrap();
        let n2 = DepthMap::from_values(6, 6, vec![3.9; 36]).unwrap();
        let (loss, _) = loss_warp(&d_hat, &[(&n1, &cam), (&n2, &cam)], &cam).unwrap();
        assert!((loss - 0.3).abs() < 1e-12);
        // an empty neighbor contributes nothing
        let empty = DepthMap::new_invalid(6, 6);
        let (loss2, _) = loss_warp(&d_hat, &[(&n1, &cam), (&empty, &cam)], &cam).unwrap();
        assert!((loss2 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn loss_warp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let cam = flat_camera(8, 6, 30.0);
        let mut side = cam.clone();
        side.pose.translation = Vector3::new(0.3, 0.0, 0.0);
        let vals: Vec<f64> = (0..48).map(|_| rng.gen_range(2.0..6.0)).collect();
        let nvals: Vec<f64> = (0..48).map(|_| rng.gen_range(2.0..6.0)).collect();
        let d_hat = DepthMap::from_values(8, 6, vals.clone()).unwrap();
        let neighbor = DepthMap::from_values(8, 6, nvals).unwrap();
        let (_, grad) = loss_warp(&d_hat, &[(&neighbor, &side)], &cam).unwrap();
        let h = 1e-6;
        for i in 0..48 {
            let mut vp = vals.clone();
            vp[i] += h;
            let mut vm = vals.clone();
            vm[i] -= h;
            let lp = loss_warp(&DepthMap::from_values(8, 6, vp).unwrap(), &[(&neighbor, &side)], &cam)
                .unwrap()
                .0;
            let lm = loss_warp(&DepthMap::from_values(8, 6, vm).unwrap(), &[(&neighbor, &side)], &cam)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8, "pixel {i}: fd {fd} vs {}", grad[i]);
        }
    }
}
