//! Scene graph: a static background node, a road node kept separate so it
//! can be regularized toward the ground plane, and rigid dynamic objects
//! with one pose per frame. Composition flattens everything into a single
//! world-frame Gaussian set for the renderer, and the backward pass routes
//! world-frame gradients to each node's own parameters.

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{
    quaternion_from_rotation, quaternion_multiply, rotation_quaternion_jacobian, Pose,
};
use crate::splat::{smallest_axis, GaussianGrads, GaussianSet};

/// Rigid object with its Gaussians in the object frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: usize,
    pub gaussians: GaussianSet,
    /// Object-to-world pose for every frame, fixed inputs (not optimized).
    pub poses: Vec<Pose>,
}

/// Flat height prior for the road surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPrior {
    /// Mean world z of the road points the scene was initialized from.
    pub height: f64,
}

/// Mean height of the given road points.
pub fn fit_ground_prior(points: &[Vector3<f64>]) -> Result<GroundPrior> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("ground prior needs at least one road point".into()));
    }
    let height = points.iter().map(|p| p.z).sum::<f64>() / points.len() as f64;
    if !height.is_finite() {
        return Err(Error::Numerical("ground prior height is not finite".into()));
    }
    Ok(GroundPrior { height })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub background: GaussianSet,
    pub road: GaussianSet,
    pub objects: Vec<ObjectNode>,
    pub ground: Option<GroundPrior>,
}

/// Where each node landed inside a composed set.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposeLayout {
    pub background: std::ops::Range<usize>,
    pub road: std::ops::Range<usize>,
    pub objects: Vec<std::ops::Range<usize>>,
}

/// Per-node gradients produced by [`compose_backward`].
#[derive(Debug, Clone)]
pub struct SceneGrads {
    pub background: GaussianGrads,
    pub road: GaussianGrads,
    pub objects: Vec<GaussianGrads>,
}

impl SceneGraph {
    pub fn total_gaussians(&self) -> usize {
        self.background.len()
            + self.road.len()
            + self.objects.iter().map(|o| o.gaussians.len()).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        self.background.validate()?;
        self.road.validate()?;
        for o in &self.objects {
            o.gaussians.validate()?;
        }
        Ok(())
    }

    /// Frames all object nodes carry poses for.
    pub fn frame_count(&self) -> Option<usize> {
        self.objects.iter().map(|o| o.poses.len()).min()
    }
}

/// Flattens the graph into world-frame Gaussians for one frame: background,
/// road, then objects in order, each object moved by its pose.
pub fn compose(graph: &SceneGraph, frame: usize) -> Result<(GaussianSet, ComposeLayout)> {
    let mut set = graph.background.clone();
    let nb = set.len();
    set.extend(&graph.road);
    let nr = set.len();
    let mut object_ranges = Vec::with_capacity(graph.objects.len());
    for obj in &graph.objects {
        let pose = obj.poses.get(frame).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "object {} has {} poses, frame {frame} requested",
                obj.id,
                obj.poses.len()
            ))
        })?;
        let q_pose = quaternion_from_rotation(&pose.rotation);
        let start = set.len();
        for i in 0..obj.gaussians.len() {
            set.push(
                pose.transform_point(&obj.gaussians.centers[i]),
                obj.gaussians.log_scales[i],
                quaternion_multiply(&q_pose, &obj.gaussians.rotations[i]),
                obj.gaussians.opacity_logits[i],
                obj.gaussians.colors[i],
            );
        }
        object_ranges.push(start..set.len());
    }
    Ok((
        set,
        ComposeLayout { background: 0..nb, road: nb..nr, objects: object_ranges },
    ))
}

/// Routes gradients on the composed world-frame set back to the nodes.
pub fn compose_backward(
    graph: &SceneGraph,
    frame: usize,
    world: &GaussianGrads,
) -> Result<SceneGrads> {
    let expected = graph.total_gaussians();
    if world.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "world gradients hold {} gaussians, graph composes {expected}",
            world.len()
        )));
    }
    let slice = |range: std::ops::Range<usize>| -> GaussianGrads {
        GaussianGrads {
            centers: world.centers[range.clone()].to_vec(),
            log_scales: world.log_scales[range.clone()].to_vec(),
            rotations: world.rotations[range.clone()].to_vec(),
            opacity_logits: world.opacity_logits[range.clone()].to_vec(),
            colors: world.colors[range].to_vec(),
        }
    };

    let nb = graph.background.len();
    let nr = nb + graph.road.len();
    let background = slice(0..nb);
    let road = slice(nb..nr);

    let mut objects = Vec::with_capacity(graph.objects.len());
    let mut offset = nr;
    for obj in &graph.objects {
        let pose = obj.poses.get(frame).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "object {} has {} poses, frame {frame} requested",
                obj.id,
                obj.poses.len()
            ))
        })?;
        let mut g = slice(offset..offset + obj.gaussians.len());
        let q_pose = quaternion_from_rotation(&pose.rotation);
        for i in 0..g.len() {
            // center_world = R c + t
            g.centers[i] = pose.rotation.transpose() * g.centers[i];
            // q_world = q_pose (x) q_obj is linear in q_obj; transpose of the
            // left-multiplication matrix pulls the gradient back
            let (a, b, c, d) = (q_pose.x, q_pose.y, q_pose.z, q_pose.w);
            let gw = g.rotations[i];
            g.rotations[i] = Vector4::new(
                a * gw.x + b * gw.y + c * gw.z + d * gw.w,
                -b * gw.x + a * gw.y + d * gw.z - c * gw.w,
                -c * gw.x - d * gw.y + a * gw.z + b * gw.w,
                -d * gw.x + c * gw.y - b * gw.z + a * gw.w,
            );
        }
        objects.push(g);
        offset += obj.gaussians.len();
    }
    Ok(SceneGrads { background, road, objects })
}

/// Weights of the two road shape terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadLossWeights {
    /// Pulls the smallest-axis normal toward world up.
    pub lambda_normal: f64,
    /// Shrinks the smallest activated scale toward a flat disc.
    pub lambda_flat: f64,
}

impl Default for RoadLossWeights {
    fn default() -> Self {
        Self { lambda_normal: 10.0, lambda_flat: 1.0 }
    }
}

/// Road regularizer value and gradients.
#[derive(Debug, Clone)]
pub struct RoadLossOutput {
    pub total: f64,
    /// Mean squared height deviation from the ground prior.
    pub plane: f64,
    /// Mean normal-alignment plus flatness penalty.
    pub shape: f64,
    pub grads: GaussianGrads,
}

/// Planar regularizer on the road node: squared height deviation from the
/// prior plus a shape term aligning each Gaussian's smallest axis with world
/// up and flattening that axis.
pub fn road_loss(road: &GaussianSet, prior: &GroundPrior, weights: &RoadLossWeights) -> RoadLossOutput {
    let n = road.len();
    let mut grads = GaussianGrads::zeros(n);
    if n == 0 {
        return RoadLossOutput { total: 0.0, plane: 0.0, shape: 0.0, grads };
    }
    let inv_n = 1.0 / n as f64;
    let up = Vector3::new(0.0, 0.0, 1.0);
    let mut plane = 0.0;
    let mut shape = 0.0;
    for i in 0..n {
        let dz = road.centers[i].z - prior.height;
        plane += dz * dz * inv_n;
        grads.centers[i].z += 2.0 * dz * inv_n;

        let (normal, axis, sign) = smallest_axis(road, i);
        let diff = normal - up;
        // epsilon-regularized norm so the gradient exists at perfect alignment
        let dist = (diff.norm_squared() + 1e-12).sqrt();
        let s_min = road.scales(i)[axis];
        shape += (weights.lambda_normal * dist + weights.lambda_flat * s_min) * inv_n;

        // d dist / d normal, then normal = sign * R(q) e_axis
        let d_normal = diff * (weights.lambda_normal * inv_n / dist);
        let jac = rotation_quaternion_jacobian(&road.rotations[i]);
        for (k, jk) in jac.iter().enumerate() {
            let col = jk.column(axis);
            grads.rotations[i][k] += sign * d_normal.dot(&col.into_owned());
        }
        // d s_min / d log_scale_axis = s_min
        grads.log_scales[i][axis] += weights.lambda_flat * s_min * inv_n;
    }
    RoadLossOutput { total: plane + shape, plane, shape, grads }
}
