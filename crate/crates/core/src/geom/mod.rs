//! Rotation representations, rigid transforms, perspective projection,
//! robust error functions and rigid point-cloud alignment.
//!
//! Everything here is pure `f64` math on nalgebra types. Differentiable
//! twins of the operations that appear inside the fitting objective live
//! in [`diff`](self::diff) and are built on the [`crate::diffcore`] tape.

pub mod diff;

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Guard below which a 6D rotation input is considered degenerate.
pub const ROT6D_EPS: f64 = 1e-8;
/// Minimum camera-frame depth accepted by the projection.
pub const DEPTH_EPS: f64 = 1e-6;
/// Default Geman-McClure scale in pixels.
pub const DEFAULT_GM_SIGMA: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("degenerate 6D rotation input (norm <= {ROT6D_EPS})")]
    DegenerateRotation,
    #[error("point behind camera (depth {depth} <= {DEPTH_EPS})")]
    BehindCamera { depth: f64 },
    #[error("degenerate point configuration for rigid alignment")]
    DegenerateConfiguration,
}

/// Two un-normalized 3-vectors: the first two columns of a rotation
/// matrix before Gram-Schmidt orthonormalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D {
    pub a1: Vector3<f64>,
    pub a2: Vector3<f64>,
}

impl Rot6D {
    /// The 6D identity template (1,0,0, 0,1,0).
    pub const IDENTITY: Rot6D = Rot6D {
        a1: Vector3::new(1.0, 0.0, 0.0),
        a2: Vector3::new(0.0, 1.0, 0.0),
    };

    pub fn new(a1: Vector3<f64>, a2: Vector3<f64>) -> Self {
        Rot6D { a1, a2 }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Rot6D {
            a1: Vector3::new(v[0], v[1], v[2]),
            a2: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [
            self.a1.x, self.a1.y, self.a1.z, self.a2.x, self.a2.y, self.a2.z,
        ]
    }
}

/// Pinhole intrinsics in pixels. Fixed during optimization.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        CameraIntrinsics { fx, fy, cx, cy }
    }
}

/// Gram-Schmidt orthonormalization of a 6D rotation into a proper
/// rotation matrix: b1 = norm(a1), b2 = norm(a2 - (b1.a2) b1),
/// b3 = b1 x b2, columns [b1 b2 b3].
pub fn rot6d_to_matrix(r: &Rot6D) -> Result<Matrix3<f64>, GeomError> {
    let n1 = r.a1.norm();
    if n1 <= ROT6D_EPS {
        return Err(GeomError::DegenerateRotation);
    }
    let b1 = r.a1 / n1;
    let proj = b1.dot(&r.a2);
    let a2p = r.a2 - b1 * proj;
    let n2 = a2p.norm();
    if n2 <= ROT6D_EPS {
        return Err(GeomError::DegenerateRotation);
    }
    let b2 = a2p / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Inverse mapping: first two columns of a rotation matrix.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Rot6D {
    Rot6D {
        a1: m.column(0).into(),
        a2: m.column(1).into(),
    }
}

/// Perspective projection of a camera-frame point to pixels.
pub fn perspective_project(
    point: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, GeomError> {
    if point.z <= DEPTH_EPS {
        return Err(GeomError::BehindCamera { depth: point.z });
    }
    Ok(Vector2::new(
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
    ))
}

/// Geman-McClure robust penalty: sigma^2 |e|^2 / (sigma^2 + |e|^2).
///
/// Bounded by sigma^2, quadratic near zero, saturating for outliers.
pub fn geman_mcclure(residual: &Vector2<f64>, sigma: f64) -> f64 {
    assert!(sigma > 0.0, "geman_mcclure: sigma must be positive");
    let s2 = sigma * sigma;
    let e2 = residual.norm_squared();
    s2 * e2 / (s2 + e2)
}

/// Least-squares rigid alignment (Kabsch, no scaling): returns (R, t)
/// minimizing sum |R s_i + t - t_i|^2 with det(R) = +1.
pub fn rigid_align(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
) -> Result<(Matrix3<f64>, Vector3<f64>), GeomError> {
    assert_eq!(source.len(), target.len(), "rigid_align: length mismatch");
    let n = source.len();
    if n < 3 {
        return Err(GeomError::DegenerateConfiguration);
    }
    let inv_n = 1.0 / n as f64;
    let cs: Vector3<f64> = source.iter().sum::<Vector3<f64>>() * inv_n;
    let ct: Vector3<f64> = target.iter().sum::<Vector3<f64>>() * inv_n;

    // cross-covariance H = sum (t_i - ct)(s_i - cs)^T so that R = U diag(1,1,d) V^T
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target.iter()) {
        h += (t - ct) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or(GeomError::DegenerateConfiguration)?;
    let v_t = svd.v_t.ok_or(GeomError::DegenerateConfiguration)?;

    // rank < 2 (all points collinear) leaves the rotation underdetermined
    let mut sv = [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]];
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let scale = sv[0].max(1.0);
    if sv[1] <= 1e-12 * scale {
        return Err(GeomError::DegenerateConfiguration);
    }

    let d = (u * v_t).determinant();
    let sign = if d < 0.0 { -1.0 } else { 1.0 };
    let corr = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = u * corr * v_t;
    let t = ct - r * cs;
    Ok((r, t))
}

/// Mean squared residual of a rigid transform on a point pairing.
pub fn alignment_residual(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
) -> f64 {
    let n = source.len().max(1) as f64;
    source
        .iter()
        .zip(target.iter())
        .map(|(s, tg)| (r * s + t - tg).norm_squared())
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix3, Vector2, Vector3};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        // QR of a random matrix with positive-diagonal sign fix
        let m = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let qr = m.qr();
        let mut q = qr.q();
        let r = qr.r();
        for i in 0..3 {
            if r[(i, i)] < 0.0 {
                for j in 0..3 {
                    q[(j, i)] = -q[(j, i)];
                }
            }
        }
        if q.determinant() < 0.0 {
            for j in 0..3 {
                q[(j, 2)] = -q[(j, 2)];
            }
        }
        q
    }

    fn orthonormality_defect(m: &Matrix3<f64>) -> f64 {
        let d = m.transpose() * m - Matrix3::identity();
        d.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    #[test]
    fn rot6d_identity() {
        let r = rot6d_to_matrix(&Rot6D::IDENTITY).unwrap();
        assert_abs_diff_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn rot6d_axis_permutation() {
        // columns (e2, e3) orthonormalize to themselves; b3 = e2 x e3 = e1
        let r = rot6d_to_matrix(&Rot6D::from_slice(&[0.0, 1.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        let expect = Matrix3::from_columns(&[
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 0.0, 0.0),
        ]);
        assert_abs_diff_eq!(r, expect, epsilon = 1e-15);
    }

    #[test]
    fn rot6d_scale_invariance() {
        let r = rot6d_to_matrix(&Rot6D::from_slice(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0])).unwrap();
        assert_abs_diff_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn rot6d_degenerate_inputs() {
        let zero_a1 = Rot6D::from_slice(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(rot6d_to_matrix(&zero_a1), Err(GeomError::DegenerateRotation));
        // a2 parallel to a1: the rejection vanishes
        let parallel = Rot6D::from_slice(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert_eq!(rot6d_to_matrix(&parallel), Err(GeomError::DegenerateRotation));
    }

    #[test]
    fn rot6d_orthonormality_and_det_bulk() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..10_000 {
            let r6 = Rot6D::from_slice(&std::array::from_fn::<f64, 6, _>(|_| {
                rng.gen_range(-2.0..2.0)
            }));
            if r6.a1.norm() < 1e-3 {
                continue;
            }
            match rot6d_to_matrix(&r6) {
                Ok(m) => {
                    assert!(orthonormality_defect(&m) < 1e-9);
                    assert!((m.determinant() - 1.0).abs() < 1e-9);
                }
                Err(GeomError::DegenerateRotation) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn rot6d_gram_schmidt_invariance() {
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..1000 {
            let a1 = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0f64) + 1.5);
            let a2 = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0f64) - 1.5);
            let s1: f64 = rng.gen_range(0.1..3.0);
            let s2: f64 = rng.gen_range(0.1..3.0);
            let s3: f64 = rng.gen_range(-2.0..2.0);
            let base = rot6d_to_matrix(&Rot6D::new(a1, a2));
            let sheared = rot6d_to_matrix(&Rot6D::new(a1 * s1, a2 * s2 + a1 * s3));
            match (base, sheared) {
                (Ok(b), Ok(s)) => {
                    let diff = (b - s).iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
                    assert!(diff < 1e-9, "invariance violated: {diff}");
                }
                _ => {} // degenerate draws are skipped
            }
        }
    }

    #[test]
    fn matrix_to_rot6d_known_and_roundtrip() {
        let id6 = matrix_to_rot6d(&Matrix3::identity());
        assert_eq!(id6.to_array(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

        // 90 degrees about z: columns (0,1,0) and (-1,0,0)
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let r6 = matrix_to_rot6d(&rz);
        assert_abs_diff_eq!(r6.a1, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(r6.a2, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);

        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..1000 {
            let m = random_rotation(&mut rng);
            let back = rot6d_to_matrix(&matrix_to_rot6d(&m)).unwrap();
            let diff = (m - back).iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
            assert!(diff < 1e-9);
        }
    }

    #[test]
    fn projection_cases() {
        let k = CameraIntrinsics::new(1000.0, 1000.0, 500.0, 500.0);
        let p = perspective_project(&Vector3::new(0.0, 0.0, 2.0), &k).unwrap();
        assert_abs_diff_eq!(p, Vector2::new(500.0, 500.0), epsilon = 1e-12);

        let p = perspective_project(&Vector3::new(1.0, 1.0, 2.0), &k).unwrap();
        assert_abs_diff_eq!(p, Vector2::new(1000.0, 1000.0), epsilon = 1e-12);

        assert!(matches!(
            perspective_project(&Vector3::new(0.0, 0.0, -1.0), &k),
            Err(GeomError::BehindCamera { .. })
        ));
    }

    #[test]
    fn geman_mcclure_values() {
        let sigma = 100.0;
        assert_eq!(geman_mcclure(&Vector2::new(0.0, 0.0), sigma), 0.0);
        // |e| = sigma -> sigma^2 / 2
        let e = Vector2::new(sigma / 2f64.sqrt(), sigma / 2f64.sqrt());
        assert_abs_diff_eq!(geman_mcclure(&e, sigma), sigma * sigma / 2.0, epsilon = 1e-6);
        // |e| = 10 sigma -> sigma^2 * 100/101
        let e = Vector2::new(10.0 * sigma, 0.0);
        assert_abs_diff_eq!(
            geman_mcclure(&e, sigma),
            sigma * sigma * 100.0 / 101.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn geman_mcclure_bounds() {
        let mut rng = StdRng::seed_from_u64(14);
        for _ in 0..1000 {
            let e = Vector2::new(rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0));
            let sigma = rng.gen_range(1.0..200.0);
            let rho = geman_mcclure(&e, sigma);
            assert!(rho >= 0.0);
            assert!(rho <= e.norm_squared().min(sigma * sigma) + 1e-12);
        }
    }

    #[test]
    fn rigid_align_identity_and_translation() {
        let mut rng = StdRng::seed_from_u64(15);
        let pts: Vec<Vector3<f64>> = (0..10)
            .map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let (r, t) = rigid_align(&pts, &pts).unwrap();
        assert_abs_diff_eq!(r, Matrix3::identity(), epsilon = 1e-9);
        assert_abs_diff_eq!(t, Vector3::zeros(), epsilon = 1e-9);

        let shift = Vector3::new(1.0, 2.0, 3.0);
        let moved: Vec<_> = pts.iter().map(|p| p + shift).collect();
        let (r, t) = rigid_align(&pts, &moved).unwrap();
        assert_abs_diff_eq!(r, Matrix3::identity(), epsilon = 1e-9);
        assert_abs_diff_eq!(t, shift, epsilon = 1e-9);
    }

    #[test]
    fn rigid_align_recovers_constructed_transform() {
        let mut rng = StdRng::seed_from_u64(16);
        let pts: Vec<Vector3<f64>> = (0..10)
            .map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let ang = 30.0f64.to_radians();
        let rz = Matrix3::new(
            ang.cos(), -ang.sin(), 0.0,
            ang.sin(), ang.cos(), 0.0,
            0.0, 0.0, 1.0,
        );
        let t0 = Vector3::new(0.5, -0.25, 2.0);
        let target: Vec<_> = pts.iter().map(|p| rz * p + t0).collect();
        let (r, t) = rigid_align(&pts, &target).unwrap();
        assert_abs_diff_eq!(r, rz, epsilon = 1e-6);
        assert_abs_diff_eq!(t, t0, epsilon = 1e-6);
        assert!(alignment_residual(&r, &t, &pts, &target) < 1e-12);
    }

    #[test]
    fn rigid_align_never_worse_than_identity() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..200 {
            let pts: Vec<Vector3<f64>> = (0..6)
                .map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let tgt: Vec<Vector3<f64>> = (0..6)
                .map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let (r, t) = rigid_align(&pts, &tgt).unwrap();
            let fitted = alignment_residual(&r, &t, &pts, &tgt);
            let ident = alignment_residual(&Matrix3::identity(), &Vector3::zeros(), &pts, &tgt);
            assert!(fitted <= ident + 1e-12);
        }
    }

    #[test]
    fn rigid_align_degenerate_collinear() {
        let pts: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let tgt = pts.clone();
        assert_eq!(
            rigid_align(&pts, &tgt),
            Err(GeomError::DegenerateConfiguration)
        );
    }

    #[test]
    fn rigid_align_reflection_corrected() {
        // a target that is a mirrored copy must still yield det(R) = +1
        let mut rng = StdRng::seed_from_u64(18);
        let pts: Vec<Vector3<f64>> = (0..8)
            .map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let mirrored: Vec<_> = pts
            .iter()
            .map(|p| Vector3::new(-p.x, p.y, p.z))
            .collect();
        let (r, _) = rigid_align(&pts, &mirrored).unwrap();
        assert!((r.determinant() - 1.0).abs() < 1e-9);
    }
}
