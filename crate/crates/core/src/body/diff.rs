//! Forward kinematics on the autodiff tape.
//!
//! Rotations follow the transposed row-vector convention of
//! [`crate::geom::diff`]: each per-joint node holds R^T and global
//! orientations compose as `M_G = matmul(M_L, M_G_parent)`.

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::geom::diff::rot_rows_from_6d;
use crate::geom::GeomError;

use super::BodyModel;

/// Differentiable FK for one frame.
///
/// `rot6d_row` is a [1, J*6] node (identity template already applied),
/// `trans_row` a [1, 3] node. Returns the [J, 3] world joint positions.
pub fn fk_joints(
    tape: &mut Tape,
    model: &BodyModel,
    rot6d_row: NodeId,
    trans_row: NodeId,
) -> Result<NodeId, GeomError> {
    assert_eq!(
        tape.value(rot6d_row).shape(),
        (1, model.joints * 6),
        "fk_joints: rotation block shape"
    );
    assert_eq!(tape.value(trans_row).shape(), (1, 3), "fk_joints: translation shape");

    let mut global_rot: Vec<Option<NodeId>> = vec![None; model.joints];
    let mut position: Vec<Option<NodeId>> = vec![None; model.joints];

    for &j in model.traversal() {
        let r6 = tape.slice(rot6d_row, 1, j * 6, 6);
        let local = rot_rows_from_6d(tape, r6)?;
        match model.parents[j] {
            None => {
                global_rot[j] = Some(local);
                position[j] = Some(trans_row);
            }
            Some(p) => {
                let parent_rot = global_rot[p].expect("traversal places parents first");
                let parent_pos = position[p].expect("traversal places parents first");
                global_rot[j] = Some(tape.matmul(local, parent_rot));
                let off = model.rest_offsets[j];
                let off_row = tape.constant(Tensor::row(&[off.x, off.y, off.z]));
                let rotated = tape.matmul(off_row, parent_rot);
                position[j] = Some(tape.add(parent_pos, rotated));
            }
        }
    }

    let rows: Vec<NodeId> = position.into_iter().map(|p| p.unwrap()).collect();
    Ok(tape.concat(0, &rows))
}

/// Keypoints as a [K, 3] node: `regressor * joints`.
pub fn regress_keypoints(tape: &mut Tape, model: &BodyModel, joints: NodeId) -> NodeId {
    let dense = model.keypoint_regressor.to_dense(model.joints);
    let reg = tape.constant(Tensor::from_vec(
        model.keypoint_regressor.rows,
        model.joints,
        dense,
    ));
    tape.matmul(reg, joints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{self, chain_model, default_humanoid, Pose};
    use crate::diffcore::{finite_diff_check, DiffError, ParamStore};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn pose_rows(pose: &Pose) -> (Tensor, Tensor) {
        let flat = pose.to_flat();
        let j6 = flat.len() - 3;
        (
            Tensor::row(&flat[..j6]),
            Tensor::row(&flat[j6..]),
        )
    }

    #[test]
    fn tape_fk_matches_pure_fk() {
        let model = default_humanoid();
        let mut rng = StdRng::seed_from_u64(61);
        for _ in 0..20 {
            let mut pose = Pose::rest(24);
            pose.root_trans = nalgebra::Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            for j in 0..23 {
                let mut v = pose.joint_rot[j].to_array();
                for x in v.iter_mut() {
                    *x += rng.gen_range(-0.3..0.3);
                }
                pose.joint_rot[j] = crate::geom::Rot6D::from_slice(&v);
            }
            let mut v = pose.root_orient.to_array();
            for x in v.iter_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
            pose.root_orient = crate::geom::Rot6D::from_slice(&v);

            let pure = body::forward_kinematics(&model, &pose).unwrap();
            let (rot_row, trans_row) = pose_rows(&pose);
            let mut tape = Tape::new();
            let r = tape.constant(rot_row);
            let t = tape.constant(trans_row);
            let joints = fk_joints(&mut tape, &model, r, t).unwrap();
            let v = tape.value(joints);
            for (j, p) in pure.iter().enumerate() {
                for c in 0..3 {
                    assert!(
                        (v.get(j, c) - p[c]).abs() < 1e-12,
                        "joint {j} coord {c}: {} vs {}",
                        v.get(j, c),
                        p[c]
                    );
                }
            }
        }
    }

    #[test]
    fn fk_gradients_match_finite_differences() {
        let model = chain_model(6, 4);
        let mut rng = StdRng::seed_from_u64(62);
        for trial in 0..10 {
            let mut store = ParamStore::new();
            let mut rot = vec![0.0; 6 * 6];
            for j in 0..6 {
                rot[j * 6] = 1.0 + rng.gen_range(-0.3..0.3);
                rot[j * 6 + 4] = 1.0 + rng.gen_range(-0.3..0.3);
                for k in [1, 2, 3, 5] {
                    rot[j * 6 + k] = rng.gen_range(-0.3..0.3);
                }
            }
            store.insert("rot", Tensor::row(&rot), true);
            store.insert(
                "trans",
                Tensor::row(&[
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ]),
                true,
            );
            let model_ref = &model;
            let mut build = move |s: &ParamStore, t: &mut Tape| {
                let r = t.param(s, "rot");
                let tr = t.param(s, "trans");
                let joints = fk_joints(t, model_ref, r, tr)
                    .map_err(|_| DiffError::DegenerateNormalize { norm: 0.0 })?;
                let kps = regress_keypoints(t, model_ref, joints);
                let sq = t.mul(kps, kps);
                Ok(t.sum(sq, None))
            };
            let mut rng2 = StdRng::seed_from_u64(700 + trial);
            let err =
                finite_diff_check(&mut build, &mut store, 1e-5, usize::MAX, &mut rng2).unwrap();
            assert!(err < 1e-6, "trial {trial}: fk gradient error {err}");
        }
    }
}
