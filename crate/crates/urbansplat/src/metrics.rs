//! Depth and image quality metrics, plus the photometric training losses.
//!
//! Depth metrics run over mutually valid pixels. PSNR assumes [0,1] images
//! (the Image type enforces that) and is capped at 99 dB. SSIM is the
//! standard 11x11 Gaussian-window variant (sigma 1.5, C1 = 0.01^2,
//! C2 = 0.03^2), valid convolution only, averaged over channels, and comes
//! with an analytic gradient so it can drive training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{DepthMap, Image};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Ground-truth depths below this are excluded from Abs.Rel.
pub const ABS_REL_MIN_GT: f64 = 1e-6;

/// Depth agreement over mutually valid pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthEval {
    pub l1: f64,
    /// Mean |pred - gt| / gt, skipping gt below [`ABS_REL_MIN_GT`].
    pub abs_rel: f64,
    pub rmse: f64,
    /// Fraction of pixels with max(pred/gt, gt/pred) < 1.25.
    pub delta_125: f64,
    /// How many pixels all of the above averaged over.
    pub valid_pixels: usize,
}

/// Compares a predicted depth map against ground truth.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<DepthEval> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::DimensionMismatch(format!(
            "depth maps disagree: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut n = 0usize;
    let mut l1 = 0.0;
    let mut sq = 0.0;
    let mut delta = 0usize;
    let mut rel = 0.0;
    let mut rel_n = 0usize;
    for ((pv, pok), (gv, gok)) in pred
        .values()
        .iter()
        .zip(pred.valid_mask())
        .zip(gt.values().iter().zip(gt.valid_mask()))
    {
        if !(*pok && *gok) {
            continue;
        }
        n += 1;
        let diff = (pv - gv).abs();
        l1 += diff;
        sq += diff * diff;
        if (pv / gv).max(gv / pv) < 1.25 {
            delta += 1;
        }
        if *gv >= ABS_REL_MIN_GT {
            rel += diff / gv;
            rel_n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no mutually valid depth pixels".into()));
    }
    Ok(DepthEval {
        l1: l1 / n as f64,
        abs_rel: if rel_n > 0 { rel / rel_n as f64 } else { 0.0 },
        rmse: (sq / n as f64).sqrt(),
        delta_125: delta as f64 / n as f64,
        valid_pixels: n,
    })
}

/// Peak signal-to-noise ratio in dB against a unit peak, capped at 99.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = mse(a, b)?;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::DimensionMismatch("images disagree in shape".into()));
    }
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Mean absolute photometric error and its gradient with respect to `pred`.
pub fn l1_loss(pred: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    if pred.width != target.width || pred.height != target.height || pred.channels != target.channels
    {
        return Err(Error::DimensionMismatch("images disagree in shape".into()));
    }
    let n = pred.data().len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.data().len()];
    for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = p - t;
        loss += d.abs();
        grad[i] = d.signum() * if d == 0.0 { 0.0 } else { 1.0 } / n;
    }
    Ok((loss / n, grad))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid convolution with the SSIM window.
fn conv_valid(field: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * field[r * w + c + t];
            }
            horiz[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * horiz[(r + t) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

fn channel_plane(img: &Image, ch: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.width * img.height];
    for r in 0..img.height {
        for c in 0..img.width {
            out[r * img.width + c] = img.get(c, r, ch);
        }
    }
    out
}

/// Mean SSIM between two images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_forward(a, b, false)?.0)
}

/// Mean SSIM plus d(SSIM)/d(a) as an interleaved image-shaped buffer.
pub fn ssim_backward(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    let (value, grad) = ssim_forward(a, b, true)?;
    Ok((value, grad.unwrap()))
}

fn ssim_forward(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::DimensionMismatch("images disagree in shape".into()));
    }
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {w}x{h}"
        )));
    }
    let k = gaussian_kernel();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let positions = (ow * oh) as f64;
    let norm = positions * a.channels as f64;

    let mut total = 0.0;
    let mut grad = if want_grad { Some(vec![0.0; a.data().len()]) } else { None };

    for ch in 0..a.channels {
        let x = channel_plane(a, ch);
        let y = channel_plane(b, ch);
        let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
        let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = conv_valid(&x, w, h, &k);
        let mu_y = conv_valid(&y, w, h, &k);
        let m_x2 = conv_valid(&x2, w, h, &k);
        let m_y2 = conv_valid(&y2, w, h, &k);
        let m_xy = conv_valid(&xy, w, h, &k);

        for p in 0..ow * oh {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let var_x = m_x2[p] - mx * mx;
            let var_y = m_y2[p] - my * my;
            let cov = m_xy[p] - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = var_x + var_y + SSIM_C2;
            let d = b1 * b2;
            let s = a1 * a2 / d;
            total += s;

            if let Some(g) = grad.as_mut() {
                // dS/dx_i = 2 w_pi (A2 my + A1 (y_i - my) - S (B2 mx + B1 (x_i - mx))) / D
                let (pc, pr) = (p % ow, p / ow);
                let c_const = (a2 * my - a1 * my - s * (b2 * mx - b1 * mx)) / d;
                let c_y = a1 / d;
                let c_x = -s * b1 / d;
                for dr in 0..SSIM_WINDOW {
                    for dc in 0..SSIM_WINDOW {
                        let i = (pr + dr) * w + (pc + dc);
                        let wgt = k[dr] * k[dc];
                        let term = c_const + c_y * y[i] + c_x * x[i];
                        g[(i * a.channels) + ch] += 2.0 * wgt * term / norm;
                    }
                }
            }
        }
    }
    Ok((total / norm, grad))
}
