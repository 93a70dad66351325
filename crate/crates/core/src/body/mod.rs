//! Loadable kinematic body model: a differentiable map from joint
//! rotations + root translation to 3D joint/keypoint positions, with an
//! optional skinned low-poly mesh for vertex metrics.

pub mod diff;
mod model_file;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geom::{self, Rot6D};

pub use model_file::{load_model, model_to_json, save_model};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BodyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("model has no mesh")]
    NoMesh,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Geometry(#[from] geom::GeomError),
}

/// Sparse row-major linear map from J inputs to `rows` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRegressor {
    pub rows: usize,
    /// (row, column, weight) triplets; weights are nonnegative.
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseRegressor {
    /// Select single inputs one-to-one: row i reads input `selection[i]`.
    pub fn selection(selection: &[usize]) -> Self {
        SparseRegressor {
            rows: selection.len(),
            entries: selection
                .iter()
                .enumerate()
                .map(|(r, &j)| (r, j, 1.0))
                .collect(),
        }
    }

    pub fn apply(&self, inputs: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let mut out = vec![Vector3::zeros(); self.rows];
        for &(r, c, w) in &self.entries {
            out[r] += inputs[c] * w;
        }
        out
    }

    pub fn to_dense(&self, cols: usize) -> Vec<f64> {
        let mut dense = vec![0.0; self.rows * cols];
        for &(r, c, w) in &self.entries {
            dense[r * cols + c] += w;
        }
        dense
    }
}

/// Low-poly skinned mesh; stands in for a full statistical body mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyMesh {
    pub vertices: Vec<Vector3<f64>>,
    /// Per-vertex (joint, weight) pairs; each vertex's weights sum to 1.
    pub skinning: Vec<Vec<(usize, f64)>>,
    pub vertex_regressor: Option<SparseRegressor>,
}

/// Kinematic tree with rest offsets and a keypoint regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub joints: usize,
    /// parent[0] is None; indices form a tree rooted at joint 0.
    pub parents: Vec<Option<usize>>,
    /// Offset of each joint from its parent in the rest pose, meters.
    pub rest_offsets: Vec<Vector3<f64>>,
    pub keypoint_regressor: SparseRegressor,
    pub mesh: Option<BodyMesh>,
    /// Parent-before-child traversal order, computed at construction.
    order: Vec<usize>,
}

impl BodyModel {
    pub fn new(
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vector3<f64>>,
        keypoint_regressor: SparseRegressor,
        mesh: Option<BodyMesh>,
    ) -> Result<Self, BodyError> {
        let joints = parents.len();
        if joints == 0 {
            return Err(BodyError::InvalidModel("no joints".into()));
        }
        if rest_offsets.len() != joints {
            return Err(BodyError::InvalidModel(format!(
                "rest_offsets has {} entries for {} joints",
                rest_offsets.len(),
                joints
            )));
        }
        if parents[0].is_some() {
            return Err(BodyError::InvalidModel("joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                None => {
                    return Err(BodyError::InvalidModel(format!(
                        "joint {j} has no parent; only joint 0 is the root"
                    )))
                }
                Some(p) if *p >= joints => {
                    return Err(BodyError::InvalidModel(format!(
                        "joint {j} has out-of-range parent {p}"
                    )))
                }
                _ => {}
            }
        }
        let order = traversal_order(&parents)
            .ok_or_else(|| BodyError::InvalidModel("parent links contain a cycle".into()))?;
        for &(r, c, w) in &keypoint_regressor.entries {
            if r >= keypoint_regressor.rows || c >= joints {
                return Err(BodyError::InvalidModel(format!(
                    "regressor entry ({r},{c}) out of range"
                )));
            }
            if w < 0.0 {
                return Err(BodyError::InvalidModel(
                    "regressor weights must be nonnegative".into(),
                ));
            }
        }
        if let Some(mesh) = &mesh {
            if mesh.vertices.len() != mesh.skinning.len() {
                return Err(BodyError::InvalidModel(
                    "skinning rows do not match vertex count".into(),
                ));
            }
            for (vi, weights) in mesh.skinning.iter().enumerate() {
                let total: f64 = weights.iter().map(|(_, w)| w).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(BodyError::InvalidModel(format!(
                        "skinning weights of vertex {vi} sum to {total}"
                    )));
                }
                if weights.iter().any(|&(j, _)| j >= joints) {
                    return Err(BodyError::InvalidModel(format!(
                        "vertex {vi} references an out-of-range joint"
                    )));
                }
            }
        }
        Ok(BodyModel {
            joints,
            parents,
            rest_offsets,
            keypoint_regressor,
            mesh,
            order,
        })
    }

    pub fn traversal(&self) -> &[usize] {
        &self.order
    }

    pub fn keypoint_count(&self) -> usize {
        self.keypoint_regressor.rows
    }

    /// Joint positions in the rest pose (identity rotations, zero root).
    pub fn rest_joint_positions(&self) -> Vec<Vector3<f64>> {
        let mut pos = vec![Vector3::zeros(); self.joints];
        for &j in &self.order {
            if let Some(p) = self.parents[j] {
                pos[j] = pos[p] + self.rest_offsets[j];
            }
        }
        pos
    }
}

fn traversal_order(parents: &[Option<usize>]) -> Option<Vec<usize>> {
    let n = parents.len();
    let mut order = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    placed[0] = true;
    order.push(0);
    // repeatedly emit joints whose parent is already placed
    loop {
        let before = order.len();
        for j in 1..n {
            if !placed[j] && placed[parents[j].unwrap()] {
                placed[j] = true;
                order.push(j);
            }
        }
        if order.len() == n {
            return Some(order);
        }
        if order.len() == before {
            return None;
        }
    }
}

/// Joint rotations and root translation for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub root_orient: Rot6D,
    pub joint_rot: Vec<Rot6D>,
    pub root_trans: Vector3<f64>,
}

impl Pose {
    pub fn rest(joints: usize) -> Self {
        Pose {
            root_orient: Rot6D::IDENTITY,
            joint_rot: vec![Rot6D::IDENTITY; joints - 1],
            root_trans: Vector3::zeros(),
        }
    }

    pub fn joints(&self) -> usize {
        self.joint_rot.len() + 1
    }

    /// Flat layout [root 6D, joint 6Ds..., root translation]; the same
    /// order the motion field emits.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.joints() * 6 + 3);
        flat.extend_from_slice(&self.root_orient.to_array());
        for r in &self.joint_rot {
            flat.extend_from_slice(&r.to_array());
        }
        flat.extend_from_slice(self.root_trans.as_slice());
        flat
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self, BodyError> {
        if flat.len() < 9 || (flat.len() - 3) % 6 != 0 {
            return Err(BodyError::DimensionMismatch(format!(
                "flat pose of length {} is not J*6+3",
                flat.len()
            )));
        }
        let joints = (flat.len() - 3) / 6;
        let root_orient = Rot6D::from_slice(&flat[0..6]);
        let joint_rot = (1..joints)
            .map(|j| Rot6D::from_slice(&flat[j * 6..j * 6 + 6]))
            .collect();
        let t = &flat[joints * 6..];
        Ok(Pose {
            root_orient,
            joint_rot,
            root_trans: Vector3::new(t[0], t[1], t[2]),
        })
    }

    /// Rotation of joint j in the kinematic tree (root is j = 0).
    pub fn rotation(&self, j: usize) -> &Rot6D {
        if j == 0 {
            &self.root_orient
        } else {
            &self.joint_rot[j - 1]
        }
    }
}

/// Per-frame poses for one motion instance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MotionSequence {
    pub poses: Vec<Pose>,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn joint_positions(&self, model: &BodyModel) -> Result<Vec<Vec<Vector3<f64>>>, BodyError> {
        self.poses
            .iter()
            .map(|p| forward_kinematics(model, p))
            .collect()
    }
}

/// World-frame joint positions for a pose:
/// `pos[j] = pos[parent] + G[parent] * offset[j]`, `G[j] = G[parent] * L[j]`.
pub fn forward_kinematics(
    model: &BodyModel,
    pose: &Pose,
) -> Result<Vec<Vector3<f64>>, BodyError> {
    Ok(forward_kinematics_full(model, pose)?.0)
}

/// Joint positions plus per-joint global rotations (needed for skinning
/// and for root-aligned metrics).
pub fn forward_kinematics_full(
    model: &BodyModel,
    pose: &Pose,
) -> Result<(Vec<Vector3<f64>>, Vec<Matrix3<f64>>), BodyError> {
    if pose.joints() != model.joints {
        return Err(BodyError::DimensionMismatch(format!(
            "pose has {} joints, model has {}",
            pose.joints(),
            model.joints
        )));
    }
    let mut pos = vec![Vector3::zeros(); model.joints];
    let mut rot = vec![Matrix3::identity(); model.joints];
    for &j in &model.order {
        let local = geom::rot6d_to_matrix(pose.rotation(j))?;
        match model.parents[j] {
            None => {
                rot[j] = local;
                pos[j] = pose.root_trans;
            }
            Some(p) => {
                rot[j] = rot[p] * local;
                pos[j] = pos[p] + rot[p] * model.rest_offsets[j];
            }
        }
    }
    Ok((pos, rot))
}

/// Keypoints as linear combinations of joints.
pub fn regress_keypoints(
    model: &BodyModel,
    joints: &[Vector3<f64>],
) -> Result<Vec<Vector3<f64>>, BodyError> {
    if joints.len() != model.joints {
        return Err(BodyError::DimensionMismatch(format!(
            "{} joint positions for a {}-joint model",
            joints.len(),
            model.joints
        )));
    }
    Ok(model.keypoint_regressor.apply(joints))
}

/// Linear blend skinning of the model mesh:
/// `v_i = sum_j w_ij (G_j (rest_v_i - rest_joint_j) + fk_joint_j)`.
pub fn skin_vertices(model: &BodyModel, pose: &Pose) -> Result<Vec<Vector3<f64>>, BodyError> {
    let mesh = model.mesh.as_ref().ok_or(BodyError::NoMesh)?;
    let (fk_pos, fk_rot) = forward_kinematics_full(model, pose)?;
    let rest = model.rest_joint_positions();
    let mut out = Vec::with_capacity(mesh.vertices.len());
    for (v, weights) in mesh.vertices.iter().zip(&mesh.skinning) {
        let mut skinned = Vector3::zeros();
        for &(j, w) in weights {
            skinned += (fk_rot[j] * (v - rest[j]) + fk_pos[j]) * w;
        }
        out.push(skinned);
    }
    Ok(out)
}

/// The default 24-joint humanoid with anthropometric bone lengths, the
/// 13-keypoint regressor (head, shoulders, elbows, wrists, hips, knees,
/// ankles) and a 120-vertex single-weight mesh.
pub fn default_humanoid() -> BodyModel {
    // joint index, parent, rest offset (x = subject's left, y up, z forward)
    const SPEC: [(usize, i32, [f64; 3]); 24] = [
        (0, -1, [0.0, 0.0, 0.0]),      // pelvis
        (1, 0, [0.09, -0.06, 0.0]),    // left hip
        (2, 0, [-0.09, -0.06, 0.0]),   // right hip
        (3, 0, [0.0, 0.11, 0.0]),      // spine1
        (4, 1, [0.0, -0.42, 0.0]),     // left knee
        (5, 2, [0.0, -0.42, 0.0]),     // right knee
        (6, 3, [0.0, 0.13, 0.0]),      // spine2
        (7, 4, [0.0, -0.42, 0.0]),     // left ankle
        (8, 5, [0.0, -0.42, 0.0]),     // right ankle
        (9, 6, [0.0, 0.12, 0.0]),      // spine3
        (10, 7, [0.0, -0.06, 0.12]),   // left foot
        (11, 8, [0.0, -0.06, 0.12]),   // right foot
        (12, 9, [0.0, 0.10, 0.0]),     // neck
        (13, 9, [0.08, 0.05, 0.0]),    // left collar
        (14, 9, [-0.08, 0.05, 0.0]),   // right collar
        (15, 12, [0.0, 0.12, 0.0]),    // head
        (16, 13, [0.11, 0.02, 0.0]),   // left shoulder
        (17, 14, [-0.11, 0.02, 0.0]),  // right shoulder
        (18, 16, [0.26, 0.0, 0.0]),    // left elbow
        (19, 17, [-0.26, 0.0, 0.0]),   // right elbow
        (20, 18, [0.25, 0.0, 0.0]),    // left wrist
        (21, 19, [-0.25, 0.0, 0.0]),   // right wrist
        (22, 20, [0.08, 0.0, 0.0]),    // left hand
        (23, 21, [-0.08, 0.0, 0.0]),   // right hand
    ];
    let parents = SPEC
        .iter()
        .map(|&(_, p, _)| if p < 0 { None } else { Some(p as usize) })
        .collect::<Vec<_>>();
    let offsets = SPEC
        .iter()
        .map(|&(_, _, o)| Vector3::new(o[0], o[1], o[2]))
        .collect::<Vec<_>>();

    // penn-action style 13 keypoints
    let keypoints = SparseRegressor::selection(&[
        15, // head
        16, 17, // shoulders
        18, 19, // elbows
        20, 21, // wrists
        1, 2, // hips
        4, 5, // knees
        7, 8, // ankles
    ]);

    let model = BodyModel::new(parents, offsets, keypoints, None).expect("default model");
    let rest = model.rest_joint_positions();

    // five single-weight vertices around each joint: a chunky 120-vertex shell
    let w = 0.05;
    let mut vertices = Vec::with_capacity(24 * 5);
    let mut skinning = Vec::with_capacity(24 * 5);
    for j in 0..24 {
        let c = rest[j];
        let toward_parent = match model.parents[j] {
            Some(p) => (rest[p] - c) * 0.5,
            None => Vector3::new(0.0, w, 0.0),
        };
        for v in [
            c + Vector3::new(w, 0.0, 0.0),
            c + Vector3::new(-w, 0.0, 0.0),
            c + Vector3::new(0.0, 0.0, w),
            c + Vector3::new(0.0, 0.0, -w),
            c + toward_parent,
        ] {
            vertices.push(v);
            skinning.push(vec![(j, 1.0)]);
        }
    }
    let mesh = BodyMesh {
        vertices,
        skinning,
        vertex_regressor: None,
    };
    BodyModel::new(
        model.parents.clone(),
        model.rest_offsets.clone(),
        model.keypoint_regressor.clone(),
        Some(mesh),
    )
    .expect("default model with mesh")
}

/// A straight chain of `joints` joints with unit-ish offsets; handy for
/// small-scale tests and gradient checks.
pub fn chain_model(joints: usize, keypoints: usize) -> BodyModel {
    assert!(joints >= 2 && keypoints <= joints);
    let parents = (0..joints)
        .map(|j| if j == 0 { None } else { Some(j - 1) })
        .collect();
    let offsets = (0..joints)
        .map(|j| {
            if j == 0 {
                Vector3::zeros()
            } else {
                Vector3::new(0.02 * j as f64, 0.25, 0.0)
            }
        })
        .collect();
    // keypoints read the distal joints, where pose errors show up most
    let selection: Vec<usize> = (joints - keypoints..joints).collect();
    BodyModel::new(
        parents,
        offsets,
        SparseRegressor::selection(&selection),
        None,
    )
    .expect("chain model")
}
