//! Tape builders for the geometry that sits inside the fitting objective.
//!
//! Convention: points are row vectors and rotations are stored transposed,
//! so applying a rotation R to the rows of P is `matmul(P, M)` with
//! `M = R^T`. Composition `G = G_parent * L` becomes
//! `M_G = matmul(M_L, M_G_parent)`. This keeps the whole pipeline inside
//! the closed tape primitive set with no transpose operation.

use super::{CameraIntrinsics, GeomError, DEPTH_EPS, ROT6D_EPS};
use crate::diffcore::{DiffError, NodeId, Tape};

impl From<DiffError> for GeomError {
    fn from(e: DiffError) -> Self {
        match e {
            DiffError::DegenerateNormalize { .. } => GeomError::DegenerateRotation,
            other => panic!("unexpected diff error in geometry builder: {other}"),
        }
    }
}

/// Gram-Schmidt a [1,6] node into the transposed rotation [3,3] whose rows
/// are the orthonormal columns (b1, b2, b3).
pub fn rot_rows_from_6d(tape: &mut Tape, r6: NodeId) -> Result<NodeId, GeomError> {
    let a1 = tape.slice(r6, 1, 0, 3);
    let a2 = tape.slice(r6, 1, 3, 3);
    let b1 = tape.normalize(a1, ROT6D_EPS)?;
    let d = tape.dot(b1, a2);
    let db = tape.broadcast(d, 1, 3);
    let proj = tape.mul(db, b1);
    let a2p = tape.sub(a2, proj);
    let b2 = tape.normalize(a2p, ROT6D_EPS)?;
    let b3 = tape.cross(b1, b2);
    Ok(tape.concat(0, &[b1, b2, b3]))
}

/// Perspective projection of [M,3] camera-frame rows to [M,2] pixels.
/// Forward depths are checked here so the backward pass never sees a
/// division by a vanishing z.
pub fn project_points(
    tape: &mut Tape,
    points: NodeId,
    k: &CameraIntrinsics,
) -> Result<NodeId, GeomError> {
    let z = tape.slice(points, 1, 2, 1);
    for &depth in tape.value(z).data() {
        if depth <= DEPTH_EPS {
            return Err(GeomError::BehindCamera { depth });
        }
    }
    let x = tape.slice(points, 1, 0, 1);
    let y = tape.slice(points, 1, 1, 1);
    let xz = tape.div(x, z);
    let yz = tape.div(y, z);
    let u = tape.scale(xz, k.fx);
    let u = tape.offset(u, k.cx);
    let v = tape.scale(yz, k.fy);
    let v = tape.offset(v, k.cy);
    Ok(tape.concat(1, &[u, v]))
}

/// Geman-McClure penalty per row of a [K,2] residual block: [K,1] node with
/// entries sigma^2 |e_k|^2 / (sigma^2 + |e_k|^2).
pub fn geman_mcclure_rows(tape: &mut Tape, residuals: NodeId, sigma: f64) -> NodeId {
    let s2 = sigma * sigma;
    let sq = tape.mul(residuals, residuals);
    let e2 = tape.sum(sq, Some(1));
    let num = tape.scale(e2, s2);
    let den = tape.offset(e2, s2);
    tape.div(num, den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, ParamStore, Tensor};
    use crate::geom::{self, Rot6D};
    use nalgebra::{Vector2, Vector3};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rot_rows_matches_pure_converter() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let r6 = Rot6D::from_slice(&raw);
            let pure = match geom::rot6d_to_matrix(&r6) {
                Ok(m) => m,
                Err(_) => continue,
            };
            let mut tape = Tape::new();
            let leaf = tape.constant(Tensor::row(&raw));
            let rows = rot_rows_from_6d(&mut tape, leaf).unwrap();
            let v = tape.value(rows);
            for i in 0..3 {
                for j in 0..3 {
                    // rows of the tape output are columns of the pure matrix
                    assert!((v.get(i, j) - pure[(j, i)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn projection_matches_pure_and_rejects_bad_depth() {
        let k = geom::CameraIntrinsics::new(900.0, 1100.0, 480.0, 520.0);
        let mut tape = Tape::new();
        let pts = tape.constant(Tensor::from_vec(
            2,
            3,
            vec![0.3, -0.2, 2.5, -1.0, 0.7, 4.0],
        ));
        let px = project_points(&mut tape, pts, &k).unwrap();
        let p0 = geom::perspective_project(&Vector3::new(0.3, -0.2, 2.5), &k).unwrap();
        let p1 = geom::perspective_project(&Vector3::new(-1.0, 0.7, 4.0), &k).unwrap();
        let v = tape.value(px);
        assert!((v.get(0, 0) - p0.x).abs() < 1e-12);
        assert!((v.get(0, 1) - p0.y).abs() < 1e-12);
        assert!((v.get(1, 0) - p1.x).abs() < 1e-12);
        assert!((v.get(1, 1) - p1.y).abs() < 1e-12);

        let mut tape = Tape::new();
        let pts = tape.constant(Tensor::from_vec(1, 3, vec![0.0, 0.0, -1.0]));
        assert!(matches!(
            project_points(&mut tape, pts, &k),
            Err(GeomError::BehindCamera { .. })
        ));
    }

    #[test]
    fn geman_mcclure_rows_matches_pure() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..100 {
            let sigma = rng.gen_range(5.0..150.0);
            let e: Vec<f64> = (0..8).map(|_| rng.gen_range(-80.0..80.0)).collect();
            let mut tape = Tape::new();
            let node = tape.constant(Tensor::from_vec(4, 2, e.clone()));
            let rho = geman_mcclure_rows(&mut tape, node, sigma);
            for k in 0..4 {
                let pure =
                    geom::geman_mcclure(&Vector2::new(e[2 * k], e[2 * k + 1]), sigma);
                assert!((tape.value(rho).get(k, 0) - pure).abs() < 1e-10);
            }
        }
    }

    /// Analytic derivatives of the geometry ops match central differences
    /// at random points.
    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(43);
        let k = geom::CameraIntrinsics::new(1000.0, 1000.0, 500.0, 500.0);
        for trial in 0..100 {
            let mut store = ParamStore::new();
            let r6: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // keep away from the degenerate set
            let r6 = if Rot6D::from_slice(&r6).a1.norm() < 0.3 {
                vec![1.0, 0.1, 0.2, 0.1, 1.0, 0.3]
            } else {
                r6
            };
            store.insert("r6", Tensor::row(&r6), true);
            store.insert(
                "pt",
                Tensor::row(&[
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(0.5..1.0),
                ]),
                true,
            );
            store.insert(
                "res",
                Tensor::row(&[rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)]),
                true,
            );

            let mut build = |s: &ParamStore, t: &mut Tape| {
                let r6 = t.param(s, "r6");
                let rows = rot_rows_from_6d(t, r6).map_err(|_| {
                    DiffError::DegenerateNormalize { norm: 0.0 }
                })?;
                let pt = t.param(s, "pt");
                let rotated = t.matmul(pt, rows);
                // push the rotated point well in front of the camera so the
                // depth stays positive for any rotation draw
                let ahead = t.constant(Tensor::row(&[0.0, 0.0, 8.0]));
                let placed = t.add(rotated, ahead);
                let px = project_points(t, placed, &k)
                    .map_err(|_| DiffError::DegenerateNormalize { norm: 0.0 })?;
                // residual against the principal point keeps the robust
                // penalty out of its flat saturated tail
                let center = t.constant(Tensor::row(&[500.0, 500.0]));
                let err = t.sub(px, center);
                let res = t.param(s, "res");
                let shifted = t.add(err, res);
                let rho = geman_mcclure_rows(t, shifted, 30.0);
                Ok(t.mean(rho, None))
            };
            // projection contributes values ~1e2; probe all 11 coordinates
            let mut rng2 = StdRng::seed_from_u64(500 + trial);
            let err =
                finite_diff_check(&mut build, &mut store, 1e-5, usize::MAX, &mut rng2).unwrap();
            assert!(err < 1e-6, "trial {trial}: derivative mismatch {err}");
        }
    }
}
