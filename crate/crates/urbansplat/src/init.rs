//! Scene initialization: unproject per-view depth into a colored point
//! cloud, turn it into Gaussians with kNN-derived scales, and shrink it
//! over several train-then-prune rounds until it fits a size budget.

use crate::error::{Error, Result};
use crate::geom::{Camera, DepthMap, Image, MaskSet};
use crate::splat::{logit, GaussianSet};
use nalgebra::{Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Scales assigned at initialization stay inside this range, meters.
pub const SCALE_MIN: f64 = 1e-3;
pub const SCALE_MAX: f64 = 1.0;

/// Default neighbor count for scale estimation.
pub const DEFAULT_NEIGHBOR_K: usize = 3;

/// Points unprojected from the input views, with road tags and the view
/// each point came from.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub is_road: Vec<bool>,
    pub view_idx: Vec<usize>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Splits into (everything else, road-tagged points).
    pub fn partition_road(&self) -> (PointCloud, PointCloud) {
        let mut rest = PointCloud::default();
        let mut road = PointCloud::default();
        for i in 0..self.len() {
            let dst = if self.is_road[i] { &mut road } else { &mut rest };
            dst.positions.push(self.positions[i]);
            dst.colors.push(self.colors[i]);
            dst.is_road.push(self.is_road[i]);
            dst.view_idx.push(self.view_idx[i]);
        }
        (rest, road)
    }
}

/// One input view for point-cloud construction.
pub type ViewRefs<'a> = (&'a Camera, &'a DepthMap, &'a Image, &'a MaskSet);

/// Unprojects every valid, non-sky pixel (on a `stride` grid) of every view
/// into a single colored point cloud. Road-mask pixels are tagged.
pub fn build_point_cloud(views: &[ViewRefs], stride: usize) -> Result<PointCloud> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("need at least one view".into()));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    for (cam, depth, image, masks) in views {
        if depth.width != cam.width
            || depth.height != cam.height
            || image.width != cam.width
            || image.height != cam.height
            || masks.width != cam.width
            || masks.height != cam.height
        {
            return Err(Error::DimensionMismatch("view buffers disagree with the camera".into()));
        }
    }
    let per_view: Vec<PointCloud> = views
        .par_iter()
        .enumerate()
        .map(|(vi, (cam, depth, image, masks))| {
            let mut out = PointCloud::default();
            let mut r = 0;
            while r < cam.height {
                let mut c = 0;
                while c < cam.width {
                    if !masks.sky_at(c, r) {
                        if let Some(d) = depth.get(c, r) {
                            let p = cam
                                .unproject(Camera::pixel_center(c, r), d)
                                .expect("valid depth unprojects");
                            out.positions.push(p);
                            out.colors.push(image.pixel3(c, r));
                            out.is_road.push(masks.road_at(c, r));
                            out.view_idx.push(vi);
                        }
                    }
                    c += stride;
                }
                r += stride;
            }
            out
        })
        .collect();
    let mut cloud = PointCloud::default();
    for mut part in per_view {
        cloud.positions.append(&mut part.positions);
        cloud.colors.append(&mut part.colors);
        cloud.is_road.append(&mut part.is_road);
        cloud.view_idx.append(&mut part.view_idx);
    }
    Ok(cloud)
}

/// Mean distance from each point to its `k` nearest neighbors, via a uniform
/// grid with ring search. The k smallest squared distances are sorted before
/// the square roots are summed, so the result does not depend on visit order.
pub fn knn_mean_distances(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    let n = points.len();
    if n <= 1 {
        return vec![0.0; n];
    }
    let k = k.clamp(1, n - 1);
    let mut bmin = points[0];
    let mut bmax = points[0];
    for p in points {
        bmin = bmin.inf(p);
        bmax = bmax.sup(p);
    }
    let extent = (bmax - bmin).amax();
    let cell = (extent / (n as f64).cbrt().ceil()).max(1e-9);
    let cell_of = |p: &Vector3<f64>| -> (i64, i64, i64) {
        (
            ((p.x - bmin.x) / cell).floor() as i64,
            ((p.y - bmin.y) / cell).floor() as i64,
            ((p.z - bmin.z) / cell).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell_of(p)).or_default().push(i as u32);
    }
    let max_span = ((extent / cell).ceil() as i64 + 1).max(1);

    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (cx, cy, cz) = cell_of(p);
            let mut d2: Vec<f64> = Vec::with_capacity(4 * k);
            let mut ring = 0i64;
            loop {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            if let Some(ids) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                                for &j in ids {
                                    if j as usize != i {
                                        d2.push((points[j as usize] - p).norm_squared());
                                    }
                                }
                            }
                        }
                    }
                }
                d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d2.truncate(4 * k.max(8));
                let bound = ring as f64 * cell;
                if d2.len() >= k && d2[k - 1] <= bound * bound {
                    break;
                }
                ring += 1;
                if ring > max_span {
                    break;
                }
            }
            let take = k.min(d2.len());
            d2[..take].iter().map(|v| v.sqrt()).sum::<f64>() / take.max(1) as f64
        })
        .collect()
}

/// Builds a trainable set from a point cloud: centers at the points,
/// isotropic scales from the mean kNN distance (clamped), identity
/// rotations, opacity 0.1, colors from the pixels.
pub fn init_gaussians(cloud: &PointCloud, neighbor_k: usize) -> Result<GaussianSet> {
    let mut set = GaussianSet::new();
    if cloud.is_empty() {
        return Ok(set);
    }
    let dists = knn_mean_distances(&cloud.positions, neighbor_k.max(1));
    let opacity_logit = logit(0.1);
    for i in 0..cloud.len() {
        let scale = dists[i].clamp(SCALE_MIN, SCALE_MAX);
        set.push(
            cloud.positions[i],
            Vector3::repeat(scale.ln()),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit,
            cloud.colors[i],
        );
    }
    Ok(set)
}

/// How each pruning round selects survivors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Keep a per-round top-opacity fraction derived from the size budget,
    /// landing exactly on `target_count` after the last round.
    KeepFraction,
    /// Keep Gaussians with activated opacity >= tau, capping at
    /// `target_count` after the last round.
    Threshold(f64),
}

/// Settings for the train-then-prune initialization loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub rounds: usize,
    pub iters_per_round: usize,
    /// Rendering resolution for the per-round photometric training.
    pub low_res: (usize, usize),
    pub mode: PruneMode,
    pub reset_opacity_logit: f64,
    /// Upper bound on the surviving count after the final round.
    pub target_count: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            rounds: 3,
            iters_per_round: 300,
            low_res: (60, 40),
            mode: PruneMode::KeepFraction,
            reset_opacity_logit: logit(0.1),
            target_count: 20_000,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("prune rounds must be at least 1".into()));
        }
        if self.target_count == 0 {
            return Err(Error::Config("target count must be at least 1".into()));
        }
        if self.low_res.0 == 0 || self.low_res.1 == 0 {
            return Err(Error::Config("low-res size must be positive".into()));
        }
        if let PruneMode::Threshold(tau) = self.mode {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::Config(format!("opacity threshold {tau} must be in (0,1)")));
            }
        }
        if !self.reset_opacity_logit.is_finite() {
            return Err(Error::Config("reset opacity logit must be finite".into()));
        }
        Ok(())
    }
}

/// Keeps Gaussians with activated opacity >= tau, then resets every
/// surviving opacity logit. Returns the survivors' original indices.
pub fn prune_round(set: &GaussianSet, tau: f64, reset_logit: f64) -> (GaussianSet, Vec<usize>) {
    let kept: Vec<usize> = (0..set.len()).filter(|&i| set.opacity(i) >= tau).collect();
    let mut out = set.subset(&kept);
    reset_opacities(&mut out, reset_logit);
    (out, kept)
}

/// Keeps the `count` highest-opacity Gaussians (ties favor lower indices),
/// preserving storage order, then resets surviving opacity logits.
pub fn prune_keep_count(
    set: &GaussianSet,
    count: usize,
    reset_logit: f64,
) -> (GaussianSet, Vec<usize>) {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        set.opacity(b).partial_cmp(&set.opacity(a)).unwrap().then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(count).collect();
    kept.sort_unstable();
    let mut out = set.subset(&kept);
    reset_opacities(&mut out, reset_logit);
    (out, kept)
}

/// Overwrites every opacity logit.
pub fn reset_opacities(set: &mut GaussianSet, logit_value: f64) {
    for o in &mut set.opacity_logits {
        *o = logit_value;
    }
}

/// Per-round survivor counts for the keep-fraction mode: a geometric
/// interpolation from `n0` down to `target`, landing on `target` exactly.
pub fn prune_schedule(n0: usize, target: usize, rounds: usize) -> Vec<usize> {
    if rounds == 0 {
        return Vec::new();
    }
    let target = target.min(n0);
    if n0 == 0 || target == n0 {
        return vec![target.min(n0); rounds];
    }
    let ratio = target as f64 / n0 as f64;
    let mut out = Vec::with_capacity(rounds);
    let mut prev = n0;
    for r in 1..=rounds {
        let ideal = (n0 as f64 * ratio.powf(r as f64 / rounds as f64)).round() as usize;
        let n = if r == rounds { target } else { ideal.clamp(target, prev) };
        out.push(n);
        prev = n;
    }
    out
}

/// What one pruning round did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneRoundLog {
    pub round: usize,
    pub before: usize,
    pub after: usize,
}

/// Runs `rounds` cycles of {train via the supplied callback, prune, opacity
/// reset}. The callback receives the set to optimize in place and the
/// 0-based round index; the caller decides what training means (typically a
/// short low-resolution photometric run). Ends with at most `target_count`
/// Gaussians; pruning everything is a fatal error.
pub fn progressive_prune(
    set: GaussianSet,
    config: &PruneConfig,
    mut train_round: impl FnMut(&mut GaussianSet, usize) -> Result<()>,
) -> Result<(GaussianSet, Vec<PruneRoundLog>)> {
    config.validate()?;
    let schedule = prune_schedule(set.len(), config.target_count, config.rounds);
    let mut current = set;
    let mut logs = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        train_round(&mut current, round)?;
        let before = current.len();
        let (pruned, _) = match config.mode {
            PruneMode::KeepFraction => {
                prune_keep_count(&current, schedule[round], config.reset_opacity_logit)
            }
            PruneMode::Threshold(tau) => {
                let (mut p, kept) = prune_round(&current, tau, config.reset_opacity_logit);
                // the budget still applies after the final threshold round
                if round + 1 == config.rounds && p.len() > config.target_count {
                    let capped = prune_keep_count(&p, config.target_count, config.reset_opacity_logit);
                    p = capped.0;
                }
                (p, kept)
            }
        };
        if pruned.is_empty() {
            return Err(Error::Numerical(format!(
                "pruning round {round} removed every gaussian (threshold too aggressive)"
            )));
        }
        logs.push(PruneRoundLog { round, before, after: pruned.len() });
        current = pruned;
    }
    Ok((current, logs))
}
