//! Per-view depth refinement. Each view keeps a working depth map in a
//! pool; refinement descends on a weighted sum of rendered-depth agreement,
//! edge-aware smoothness, and cross-view warp consistency, with a global
//! scale and shift riding on top of the per-pixel grid. Pool update
//! scheduling (every N steps for the current view, or sweeping all views
//! every N*V steps) lives here too.

pub mod bundle;
mod losses;

pub use losses::{confidence, loss_ref, loss_smooth, loss_warp, warp, ConfidenceMap};

use crate::error::{Error, Result};
use crate::geom::{Camera, DepthMap, Image};
use serde::{Deserialize, Serialize};

/// Refined maps never report a depth below this.
pub const MIN_DEPTH: f64 = 1e-3;

/// Knobs for one refinement run and for pool scheduling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhancerConfig {
    /// Ratio bound for the confidence gate.
    pub lambda_c: f64,
    /// Weight of the pooled rendered-depth term.
    pub lambda_ref: f64,
    /// Weight of the edge-aware smoothness term.
    pub lambda_smooth: f64,
    /// Weight of the cross-view warp term.
    pub lambda_warp: f64,
    /// Candidate-step budget per refinement run.
    pub max_steps: usize,
    /// Consecutive smoothness rises tolerated before stopping; 0 disables.
    pub patience: usize,
    /// Base descent step, adaptively halved on rejected candidates.
    pub step_size: f64,
    /// Pooling tile edge; defaults to height / 8 when unset.
    pub patch: Option<usize>,
    /// Cross-view neighbors per refinement.
    pub neighbor_count: usize,
    /// Refinement cadence in optimizer steps.
    pub update_period: usize,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        EnhancerConfig {
            lambda_c: 2.0,
            lambda_ref: 1.0,
            lambda_smooth: 0.125,
            lambda_warp: 0.0625,
            max_steps: 80,
            patience: 8,
            step_size: 0.05,
            patch: None,
            neighbor_count: 6,
            update_period: 20,
        }
    }
}

impl EnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c.is_finite() && self.lambda_c > 0.0) {
            return Err(Error::Config(format!("confidence bound {} must be positive", self.lambda_c)));
        }
        for (name, v) in [
            ("lambda_ref", self.lambda_ref),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_warp", self.lambda_warp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config(format!("step size {} must be positive", self.step_size)));
        }
        if self.patch == Some(0) {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if self.update_period == 0 {
            return Err(Error::Config("update period must be positive".into()));
        }
        Ok(())
    }

    fn patch_for(&self, height: usize) -> usize {
        self.patch.unwrap_or((height / 8).max(1))
    }
}

/// Stops a run after `patience` consecutive rises of a monitored value.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    patience: usize,
    last: Option<f64>,
    rises: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop { patience, last: None, rises: 0 }
    }

    /// Feeds the next value; returns true once the rise streak hits the
    /// patience. A patience of 0 never triggers.
    pub fn observe(&mut self, value: f64) -> bool {
        if let Some(prev) = self.last {
            if value > prev {
                self.rises += 1;
            } else {
                self.rises = 0;
            }
        }
        self.last = Some(value);
        self.patience > 0 && self.rises >= self.patience
    }

    pub fn reset(&mut self) {
        self.last = None;
        self.rises = 0;
    }
}

/// How a refinement run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnhanceStatus {
    /// Consumed its step budget (or stalled with a collapsed step).
    Completed,
    /// The smoothness monitor tripped.
    EarlyStopped,
    /// A non-finite objective appeared; the input depth was returned.
    Abandoned,
}

/// Result of refining one view.
#[derive(Debug, Clone)]
pub struct EnhanceOutcome {
    /// Dense refined depth, clamped to at least MIN_DEPTH.
    pub depth: DepthMap,
    pub status: EnhanceStatus,
    /// Candidate steps evaluated.
    pub steps_total: usize,
    /// Candidates that lowered the objective and were kept.
    pub steps_accepted: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Objective after the start and after every accepted step.
    pub loss_trace: Vec<f64>,
}

/// Anything that can refine a view's depth map.
pub trait DepthEnhancer {
    fn enhance(
        &self,
        camera: &Camera,
        image: &Image,
        rendered: &DepthMap,
        previous: &DepthMap,
        neighbors: &[(&DepthMap, &Camera)],
    ) -> Result<EnhanceOutcome>;
}

/// First-order descent on the per-pixel grid plus a global scale and shift.
#[derive(Debug, Clone, Default)]
pub struct GradientDescentEnhancer {
    pub config: EnhancerConfig,
}

impl GradientDescentEnhancer {
    pub fn new(config: EnhancerConfig) -> Self {
        GradientDescentEnhancer { config }
    }
}

impl DepthEnhancer for GradientDescentEnhancer {
    fn enhance(
        &self,
        camera: &Camera,
        image: &Image,
        rendered: &DepthMap,
        previous: &DepthMap,
        neighbors: &[(&DepthMap, &Camera)],
    ) -> Result<EnhanceOutcome> {
        enhance(camera, image, rendered, previous, neighbors, &self.config)
    }
}

/// Refines the current rendered depth. The estimate is d = a * grid + b
/// with the grid seeded from `rendered` (holes mean-filled); the pooled
/// reference term anchors it to the render where the render agrees with the
/// pool entry `previous` (the confidence gate), while smoothness under
/// `image` and consistency with warped neighbor depths pull elsewhere.
/// Candidate steps that raise the objective are rejected and retried at
/// half the step.
pub fn enhance(
    camera: &Camera,
    image: &Image,
    rendered: &DepthMap,
    previous: &DepthMap,
    neighbors: &[(&DepthMap, &Camera)],
    config: &EnhancerConfig,
) -> Result<EnhanceOutcome> {
    config.validate()?;
    let (w, h) = (camera.width, camera.height);
    if image.width != w
        || image.height != h
        || rendered.width != w
        || rendered.height != h
        || previous.width != w
        || previous.height != h
    {
        return Err(Error::DimensionMismatch("refinement inputs disagree with the camera".into()));
    }
    let hw = (w * h) as f64;
    let patch = config.patch_for(h);

    let fill = rendered.mean_valid().or_else(|| previous.mean_valid()).unwrap_or(1.0);
    let seed: Vec<f64> = rendered
        .values()
        .iter()
        .zip(rendered.valid_mask())
        .map(|(v, ok)| if *ok { *v } else { fill })
        .collect();

    let conf = confidence(rendered, previous, config.lambda_c)?;
    let mut warped = Vec::with_capacity(neighbors.len());
    for (depth, cam) in neighbors {
        warped.push(warp(depth, cam, camera)?);
    }
    let all_ok = vec![true; w * h];
    let gated: Vec<bool> = conf.values().iter().map(|v| *v == 0.0).collect();
    let gated_count = gated.iter().filter(|g| **g).count();
    let gated_is_proper = gated_count > 0 && gated_count < w * h;

    let eval = |d: &[f64]| -> (f64, f64, Vec<f64>) {
        let mut total = 0.0;
        let mut grad = vec![0.0; w * h];
        if config.lambda_ref != 0.0 {
            let (l, g) = losses::loss_ref_core(
                d,
                &all_ok,
                rendered.values(),
                rendered.valid_mask(),
                conf.values(),
                w,
                h,
                patch,
            );
            total += config.lambda_ref * l;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += config.lambda_ref * gi;
            }
        }
        // smoothness is always evaluated so the monitor sees it even at weight 0
        let (l_smooth, g_smooth) = losses::loss_smooth_core(d, &all_ok, image);
        if config.lambda_smooth != 0.0 {
            total += config.lambda_smooth * l_smooth;
            for (acc, gi) in grad.iter_mut().zip(&g_smooth) {
                *acc += config.lambda_smooth * gi;
            }
        }
        if config.lambda_warp != 0.0 && !warped.is_empty() {
            let (l, g) = losses::loss_warp_core(d, &all_ok, &warped);
            total += config.lambda_warp * l;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += config.lambda_warp * gi;
            }
        }
        (total, l_smooth, grad)
    };

    let compose = |grid: &[f64], a: f64, b: f64| -> Vec<f64> {
        grid.iter().map(|v| a * v + b).collect()
    };
    let finish = |d: &[f64]| -> DepthMap {
        let vals: Vec<f64> = d.iter().map(|v| v.max(MIN_DEPTH)).collect();
        DepthMap::from_values(w, h, vals).expect("clamped depth is valid")
    };

    let mut grid = seed.clone();
    let mut a = 1.0;
    let mut b = 0.0;

    let (mut cur_loss, mut cur_smooth, mut cur_grad) = eval(&compose(&grid, a, b));
    if !cur_loss.is_finite() {
        return Ok(EnhanceOutcome {
            depth: finish(&seed),
            status: EnhanceStatus::Abandoned,
            steps_total: 0,
            steps_accepted: 0,
            initial_loss: cur_loss,
            final_loss: cur_loss,
            loss_trace: vec![cur_loss],
        });
    }
    let initial_loss = cur_loss;
    let mut trace = vec![cur_loss];
    let mut monitor = EarlyStop::new(config.patience);
    monitor.observe(cur_smooth);

    let mut status = EnhanceStatus::Completed;
    let mut eta = config.step_size;
    let mut steps_total = 0;
    let mut steps_accepted = 0;

    'outer: while steps_total < config.max_steps {
        let mean_sq = grid.iter().map(|v| v * v).sum::<f64>() / hw;
        let grad_a: f64 = cur_grad.iter().zip(&grid).map(|(g, v)| g * v).sum();
        let grad_b: f64 = cur_grad.iter().sum();
        if !(grad_a.is_finite() && grad_b.is_finite()) {
            return Ok(EnhanceOutcome {
                depth: finish(&seed),
                status: EnhanceStatus::Abandoned,
                steps_total,
                steps_accepted,
                initial_loss,
                final_loss: cur_loss,
                loss_trace: trace,
            });
        }
        // the mean loss puts O(1/HW) on each grid pixel, so scale its step
        // back up; the scale gets damped by the mean squared depth so all
        // three parameter groups move the estimate at a comparable rate.
        // The L1 terms put kinks in the objective where the combined step
        // is rejected even though a descent direction exists, so the round
        // tries three nested candidates before the step shrinks: the full
        // move, the grid alone, and the grid restricted to pixels the
        // confidence gate left free.
        let cand_grid: Vec<f64> =
            grid.iter().zip(&cur_grad).map(|(v, g)| v - eta * hw * a * g).collect();
        let cand_a = a - eta * grad_a / (1.0 + mean_sq);
        let cand_b = b - eta * grad_b;
        let with_scale_shift = grad_a != 0.0 || grad_b != 0.0;
        let mut accepted = false;
        for kind in 0..3 {
            match kind {
                0 if !with_scale_shift => continue,
                2 if !gated_is_proper => continue,
                _ => {}
            }
            if steps_total >= config.max_steps {
                break;
            }
            steps_total += 1;
            let (cg, ca, cb): (Vec<f64>, f64, f64) = match kind {
                0 => (cand_grid.clone(), cand_a, cand_b),
                1 => (cand_grid.clone(), a, b),
                _ => {
                    let masked = grid
                        .iter()
                        .zip(&cand_grid)
                        .zip(&gated)
                        .map(|((g0, g1), m)| if *m { *g1 } else { *g0 })
                        .collect();
                    (masked, a, b)
                }
            };
            let cand = compose(&cg, ca, cb);
            let (l, l_smooth, g) = eval(&cand);
            if l.is_finite() && l <= cur_loss {
                grid = cg;
                a = ca;
                b = cb;
                cur_loss = l;
                cur_smooth = l_smooth;
                cur_grad = g;
                steps_accepted += 1;
                trace.push(l);
                eta = (eta * 2.0).min(config.step_size);
                if monitor.observe(cur_smooth) {
                    status = EnhanceStatus::EarlyStopped;
                    break 'outer;
                }
                accepted = true;
                break;
            }
        }
        if !accepted {
            eta *= 0.5;
            if eta < 1e-12 {
                break;
            }
        }
    }
    let _ = cur_smooth;

    Ok(EnhanceOutcome {
        depth: finish(&compose(&grid, a, b)),
        status,
        steps_total,
        steps_accepted,
        initial_loss,
        final_loss: cur_loss,
        loss_trace: trace,
    })
}

/// Working depth maps for every view, with update bookkeeping.
#[derive(Debug, Clone)]
pub struct DepthPool {
    entries: Vec<DepthMap>,
    updated_at: Vec<Option<u64>>,
    update_counts: Vec<u64>,
}

impl DepthPool {
    pub fn new(initial: Vec<DepthMap>) -> Self {
        let n = initial.len();
        DepthPool { entries: initial, updated_at: vec![None; n], update_counts: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn depth(&self, view: usize) -> &DepthMap {
        &self.entries[view]
    }

    pub fn set(&mut self, view: usize, depth: DepthMap, step: u64) -> Result<()> {
        let old = &self.entries[view];
        if depth.width != old.width || depth.height != old.height {
            return Err(Error::DimensionMismatch("pool entry size cannot change".into()));
        }
        self.entries[view] = depth;
        self.updated_at[view] = Some(step);
        self.update_counts[view] += 1;
        Ok(())
    }

    pub fn updated_at(&self, view: usize) -> Option<u64> {
        self.updated_at[view]
    }

    pub fn update_counts(&self) -> &[u64] {
        &self.update_counts
    }
}

/// When the pool refreshes during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolStrategy {
    /// Refine the view being optimized every `update_period` steps.
    RealTime,
    /// Refine every view, all at once, every `update_period * views` steps.
    Periodic,
}

/// Per-view inputs the pool scheduler needs.
pub struct PoolViews<'a> {
    pub cameras: &'a [Camera],
    pub images: &'a [Image],
    /// Physical camera id per view, for neighbor selection.
    pub cam_ids: &'a [usize],
    pub timestamps: &'a [f64],
}

/// Picks up to `k` views sharing `view`'s camera id, nearest in time first
/// (ties go to the lower index). `view` itself is excluded.
pub fn select_neighbors(cam_ids: &[usize], timestamps: &[f64], view: usize, k: usize) -> Vec<usize> {
    let t0 = timestamps[view];
    let mut cands: Vec<usize> = (0..cam_ids.len())
        .filter(|&j| j != view && cam_ids[j] == cam_ids[view])
        .collect();
    cands.sort_by(|&p, &q| {
        let dp = (timestamps[p] - t0).abs();
        let dq = (timestamps[q] - t0).abs();
        dp.partial_cmp(&dq).unwrap().then(p.cmp(&q))
    });
    cands.truncate(k);
    cands
}

/// Runs the pool schedule for one optimizer step. Returns the views that
/// were refined (usually none). `step` is 1-based within the phase.
pub fn update_pool(
    pool: &mut DepthPool,
    strategy: PoolStrategy,
    step: u64,
    current_view: usize,
    views: &PoolViews,
    render_depth: &mut dyn FnMut(usize) -> Result<DepthMap>,
    enhancer: &dyn DepthEnhancer,
    config: &EnhancerConfig,
) -> Result<Vec<usize>> {
    let n = pool.len();
    if views.cameras.len() != n
        || views.images.len() != n
        || views.cam_ids.len() != n
        || views.timestamps.len() != n
    {
        return Err(Error::DimensionMismatch("pool and view tables disagree in length".into()));
    }
    let period = config.update_period as u64;
    let refine = |pool_src: &DepthPool,
                  v: usize,
                  render_depth: &mut dyn FnMut(usize) -> Result<DepthMap>|
     -> Result<EnhanceOutcome> {
        let rendered = render_depth(v)?;
        let idx = select_neighbors(views.cam_ids, views.timestamps, v, config.neighbor_count);
        let ndepths: Vec<DepthMap> = idx.iter().map(|&j| pool_src.depth(j).clone()).collect();
        let pairs: Vec<(&DepthMap, &Camera)> =
            idx.iter().zip(&ndepths).map(|(&j, d)| (d, &views.cameras[j])).collect();
        enhancer.enhance(&views.cameras[v], &views.images[v], &rendered, pool_src.depth(v), &pairs)
    };
    match strategy {
        PoolStrategy::RealTime => {
            if step % period != 0 {
                return Ok(Vec::new());
            }
            let outcome = refine(pool, current_view, render_depth)?;
            pool.set(current_view, outcome.depth, step)?;
            Ok(vec![current_view])
        }
        PoolStrategy::Periodic => {
            if step % (period * n as u64) != 0 {
                return Ok(Vec::new());
            }
            // every view refines against the same pre-sweep snapshot
            let snapshot = pool.clone();
            let mut updated = Vec::with_capacity(n);
            for v in 0..n {
                let outcome = refine(&snapshot, v, render_depth)?;
                pool.set(v, outcome.depth, step)?;
                updated.push(v);
            }
            Ok(updated)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn camera(w: usize, h: usize, fx: f64) -> Camera {
        Camera::new(fx, fx, w as f64 / 2.0, h as f64 / 2.0, w, h, Pose::identity()).unwrap()
    }

    fn constant_depth(w: usize, h: usize, v: f64) -> DepthMap {
        DepthMap::from_values(w, h, vec![v; w * h]).unwrap()
    }

    #[test]
    fn early_stop_needs_the_full_streak() {
        let mut stop = EarlyStop::new(3);
        assert!(!stop.observe(1.0));
        assert!(!stop.observe(1.1));
        assert!(!stop.observe(1.2));
        assert!(stop.observe(1.3), "third consecutive rise trips it");

        let mut stop = EarlyStop::new(3);
        stop.observe(1.0);
        stop.observe(1.1);
        stop.observe(1.2);
        assert!(!stop.observe(0.5), "a drop resets the streak");
        assert!(!stop.observe(0.6));
        assert!(!stop.observe(0.7));
        assert!(stop.observe(0.8));

        let mut never = EarlyStop::new(0);
        for i in 0..50 {
            assert!(!never.observe(i as f64));
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = EnhancerConfig::default();
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.lambda_ref = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.step_size = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.patch = Some(0);
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.update_period = 0;
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.lambda_c = f64::NAN;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn enhance_leaves_a_consistent_scene_untouched() {
        let cam = camera(16, 12, 30.0);
        let img = Image::new(16, 12, 3).unwrap();
        let depth = constant_depth(16, 12, 4.0);
        let out = enhance(&cam, &img, &depth, &depth, &[(&depth, &cam)], &EnhancerConfig::default())
            .unwrap();
        assert_eq!(out.status, EnhanceStatus::Completed);
        assert!(out.depth.values().iter().all(|v| *v == 4.0), "fixed point must not move");
        assert_eq!(out.final_loss, 0.0);
    }

    #[test]
    fn enhance_descends_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let (w, h) = (24, 16);
        let cam = camera(w, h, 30.0);
        let img = Image::new(w, h, 3).unwrap();
        let noisy: Vec<f64> = (0..w * h).map(|_| 5.0 + rng.gen_range(-0.8..0.8)).collect();
        let rendered = DepthMap::from_values(w, h, noisy).unwrap();
        let previous = constant_depth(w, h, 5.0);
        let out =
            enhance(&cam, &img, &rendered, &previous, &[], &EnhancerConfig::default()).unwrap();
        assert!(out.final_loss < out.initial_loss, "noise must be reduced");
        for pair in out.loss_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15, "accepted losses must never rise");
        }
        assert!(out.steps_accepted > 0);
    }

    #[test]
    fn enhance_improves_a_low_confidence_corruption() {
        // the render is wrong in a block; the pool disagrees there (ratio
        // >= 2 kills the confidence), so only the warp and smoothness terms
        // act on the block while the clean region stays anchored
        let (w, h) = (32, 24);
        let cam = camera(w, h, 40.0);
        let img = Image::new(w, h, 3).unwrap();
        let gt = 5.0;
        let previous = constant_depth(w, h, gt);
        let mut vals = vec![gt; w * h];
        // aligned to the 3x3 pooling tiles so corrupt tiles gate cleanly
        let corrupt =
            |c: usize, r: usize| -> bool { (9..21).contains(&c) && (9..15).contains(&r) };
        for r in 0..h {
            for c in 0..w {
                if corrupt(c, r) {
                    vals[r * w + c] = gt * 2.5;
                }
            }
        }
        let rendered = DepthMap::from_values(w, h, vals).unwrap();
        let mut left = cam.clone();
        left.pose.translation = Vector3::new(-0.5, 0.0, 0.0);
        let mut right = cam.clone();
        right.pose.translation = Vector3::new(0.5, 0.0, 0.0);
        let nd = constant_depth(w, h, gt);
        let config = EnhancerConfig { max_steps: 160, ..EnhancerConfig::default() };
        let out = enhance(
            &cam,
            &img,
            &rendered,
            &previous,
            &[(&nd, &left), (&nd, &right)],
            &config,
        )
        .unwrap();

        let region_abs_rel = |d: &DepthMap| -> f64 {
            let mut sum = 0.0;
            let mut n = 0;
            for r in 0..h {
                for c in 0..w {
                    if corrupt(c, r) {
                        sum += (d.get(c, r).unwrap() - gt).abs() / gt;
                        n += 1;
                    }
                }
            }
            sum / n as f64
        };
        let before = region_abs_rel(&rendered);
        let after = region_abs_rel(&out.depth);
        assert!(
            after < before - 0.02,
            "corrupted region must strictly improve: {before} -> {after}"
        );
        // the confident region is anchored to the (correct) render
        let mut clean_err: f64 = 0.0;
        for r in 0..h {
            for c in 0..w {
                if !corrupt(c, r) {
                    clean_err = clean_err.max((out.depth.get(c, r).unwrap() - gt).abs());
                }
            }
        }
        assert!(clean_err < 0.2, "clean region drifted by {clean_err}");
    }

    #[test]
    fn enhance_with_zero_weights_is_identity_and_fills_holes() {
        let (w, h) = (10, 8);
        let cam = camera(w, h, 30.0);
        let img = Image::new(w, h, 3).unwrap();
        let mut rendered = constant_depth(w, h, 3.0);
        rendered.set(4, 4, 9.0);
        rendered.invalidate(2, 2);
        rendered.invalidate(7, 1);
        let previous = constant_depth(w, h, 3.0);
        let config = EnhancerConfig {
            lambda_ref: 0.0,
            lambda_smooth: 0.0,
            lambda_warp: 0.0,
            ..EnhancerConfig::default()
        };
        let out = enhance(&cam, &img, &rendered, &previous, &[], &config).unwrap();
        assert_eq!(out.depth.valid_count(), w * h, "output must be dense");
        let fill = rendered.mean_valid().unwrap();
        for r in 0..h {
            for c in 0..w {
                let got = out.depth.get(c, r).unwrap();
                match rendered.get(c, r) {
                    Some(v) => assert_eq!(got, v, "the rendered depth seeds the estimate"),
                    None => assert_eq!(got, fill, "holes take the mean"),
                }
            }
        }
        assert_eq!(out.steps_accepted, out.steps_total);
    }

    #[test]
    fn enhance_recovers_from_an_oversized_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let (w, h) = (16, 12);
        let cam = camera(w, h, 30.0);
        let img = Image::new(w, h, 3).unwrap();
        let noisy: Vec<f64> = (0..w * h).map(|_| 4.0 + rng.gen_range(-0.5..0.5)).collect();
        let rendered = DepthMap::from_values(w, h, noisy).unwrap();
        let previous = constant_depth(w, h, 4.0);
        let config =
            EnhancerConfig { step_size: 50.0, patch: Some(4), ..EnhancerConfig::default() };
        let out = enhance(&cam, &img, &rendered, &previous, &[], &config).unwrap();
        assert!(out.steps_accepted > 0, "halving must eventually find an acceptable step");
        assert!(out.steps_accepted < out.steps_total, "the huge first step must be rejected");
        assert!(out.final_loss < out.initial_loss);
        assert!(out.depth.values().iter().all(|v| *v >= MIN_DEPTH));
    }

    #[test]
    fn select_neighbors_prefers_same_camera_and_close_times() {
        let cam_ids = [0, 1, 0, 1, 0, 0];
        let times = [0.0, 0.0, 1.0, 1.0, 2.0, 3.0];
        assert_eq!(select_neighbors(&cam_ids, &times, 2, 2), vec![0, 4]);
        assert_eq!(select_neighbors(&cam_ids, &times, 2, 10), vec![0, 4, 5]);
        assert_eq!(select_neighbors(&cam_ids, &times, 1, 1), vec![3]);
        assert_eq!(select_neighbors(&cam_ids, &times, 2, 0), Vec::<usize>::new());
    }

    fn pool_fixture(n: usize) -> (Vec<Camera>, Vec<Image>, Vec<usize>, Vec<f64>, DepthPool) {
        let (w, h) = (8, 6);
        let cams: Vec<Camera> = (0..n).map(|_| camera(w, h, 20.0)).collect();
        let imgs: Vec<Image> = (0..n).map(|_| Image::new(w, h, 3).unwrap()).collect();
        let ids = vec![0usize; n];
        let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let pool = DepthPool::new((0..n).map(|_| constant_depth(w, h, 2.0)).collect());
        (cams, imgs, ids, times, pool)
    }

    fn noop_enhancer() -> GradientDescentEnhancer {
        GradientDescentEnhancer::new(EnhancerConfig {
            lambda_ref: 0.0,
            lambda_smooth: 0.0,
            lambda_warp: 0.0,
            max_steps: 0,
            ..EnhancerConfig::default()
        })
    }

    #[test]
    fn real_time_schedule_updates_the_current_view() {
        let (cams, imgs, ids, times, mut pool) = pool_fixture(3);
        let views =
            PoolViews { cameras: &cams, images: &imgs, cam_ids: &ids, timestamps: &times };
        let enhancer = noop_enhancer();
        let config = EnhancerConfig { update_period: 2, ..EnhancerConfig::default() };
        let mut render = |_: usize| Ok(constant_depth(8, 6, 2.0));
        let mut seen = Vec::new();
        for step in 1..=6u64 {
            let view = ((step - 1) % 3) as usize;
            let updated = update_pool(
                &mut pool,
                PoolStrategy::RealTime,
                step,
                view,
                &views,
                &mut render,
                &enhancer,
                &config,
            )
            .unwrap();
            seen.push(updated);
        }
        let empty: Vec<usize> = Vec::new();
        assert_eq!(
            seen,
            vec![empty.clone(), vec![1], empty.clone(), vec![0], empty, vec![2]]
        );
        assert_eq!(pool.update_counts(), &[1, 1, 1]);
        assert_eq!(pool.updated_at(1), Some(2));
        assert_eq!(pool.updated_at(0), Some(4));
        assert_eq!(pool.updated_at(2), Some(6));
    }

    #[test]
    fn periodic_schedule_sweeps_all_views_at_once() {
        let (cams, imgs, ids, times, mut pool) = pool_fixture(3);
        let views =
            PoolViews { cameras: &cams, images: &imgs, cam_ids: &ids, timestamps: &times };
        let enhancer = noop_enhancer();
        let config = EnhancerConfig { update_period: 2, ..EnhancerConfig::default() };
        let render_calls = std::cell::Cell::new(0usize);
        let mut render = |_: usize| {
            render_calls.set(render_calls.get() + 1);
            Ok(constant_depth(8, 6, 2.0))
        };
        for step in 1..=5u64 {
            let updated = update_pool(
                &mut pool,
                PoolStrategy::Periodic,
                step,
                (step as usize - 1) % 3,
                &views,
                &mut render,
                &enhancer,
                &config,
            )
            .unwrap();
            assert!(updated.is_empty(), "period 2 * 3 views means nothing before step 6");
        }
        assert_eq!(render_calls.get(), 0);
        let updated = update_pool(
            &mut pool,
            PoolStrategy::Periodic,
            6,
            2,
            &views,
            &mut render,
            &enhancer,
            &config,
        )
        .unwrap();
        assert_eq!(updated, vec![0, 1, 2]);
        assert_eq!(render_calls.get(), 3);
        assert_eq!(pool.update_counts(), &[1, 1, 1]);
        assert!(pool.updated_at(0) == Some(6) && pool.updated_at(2) == Some(6));
    }

    #[test]
    fn pool_rejects_resized_entries() {
        let mut pool = DepthPool::new(vec![constant_depth(4, 4, 1.0)]);
        let err = pool.set(0, constant_depth(5, 4, 1.0), 1);
        assert!(err.is_err());
        assert_eq!(pool.update_counts(), &[0]);
    }
}
