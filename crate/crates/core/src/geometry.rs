//! Rigid transforms, the planar pose parameterization and the rectified
//! stereo camera model.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disparities at or below this many pixels are rejected as observations.
pub const MIN_DISPARITY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    /// Stereo baseline in metres.
    pub b: f64,
}

impl CameraIntrinsics {
    pub fn new(fu: f64, fv: f64, cu: f64, cv: f64, b: f64) -> Result<Self> {
        if !(fu > 0.0 && fv > 0.0 && b > 0.0) {
            return Err(Error::Config(format!(
                "intrinsics need positive focal lengths and baseline, got fu={fu} fv={fv} b={b}"
            )));
        }
        Ok(Self { fu, fv, cu, cv, b })
    }
}

/// Left-image pixel plus disparity `d = u_l - u_r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoObservation {
    pub u_l: f64,
    pub v_l: f64,
    pub d: f64,
}

impl StereoObservation {
    pub fn new(u_l: f64, v_l: f64, d: f64) -> Self {
        Self { u_l, v_l, d }
    }

    pub fn is_valid(&self) -> bool {
        self.d > MIN_DISPARITY && self.u_l.is_finite() && self.v_l.is_finite()
    }
}

/// Maps a camera-frame point to its left-image coordinates and disparity.
pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<StereoObservation> {
    if !(p.z > 0.0) {
        return Err(Error::DegenerateDepth(p.z));
    }
    let inv_z = 1.0 / p.z;
    Ok(StereoObservation {
        u_l: k.fu * p.x * inv_z + k.cu,
        v_l: k.fv * p.y * inv_z + k.cv,
        d: k.fu * k.b * inv_z,
    })
}

/// Inverse stereo model: lifts an observation back to a camera-frame point.
pub fn backproject(y: &StereoObservation, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(y.d > MIN_DISPARITY) {
        return Err(Error::InvalidDisparity(y.d));
    }
    let s = k.b / y.d;
    Ok(Vector3::new(
        s * (y.u_l - k.cu),
        s * (k.fu / k.fv) * (y.v_l - k.cv),
        s * k.fu,
    ))
}

/// Jacobian of [`backproject`] with respect to `(u_l, v_l, d)`.
pub fn backproject_jacobian(y: &StereoObservation, k: &CameraIntrinsics) -> Result<Matrix3<f64>> {
    let p = backproject(y, k)?;
    let s = k.b / y.d;
    Ok(Matrix3::new(
        s,
        0.0,
        -p.x / y.d,
        0.0,
        s * k.fu / k.fv,
        -p.y / y.d,
        0.0,
        0.0,
        -p.z / y.d,
    ))
}

/// Rotation about the z axis.
pub fn rot_z(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a - 2.0 * PI
    } else {
        a
    }
}

/// Rigid transform `p -> C p + r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> SE3Pose {
        let ct = self.rotation.transpose();
        SE3Pose::new(ct, -(ct * self.translation))
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Orthonormality and determinant check.
    pub fn is_valid(&self, tol: f64) -> bool {
        let orth = (self.rotation * self.rotation.transpose() - Matrix3::identity()).amax();
        orth <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Projects onto the planar parameterization: `(r_x, r_y, yaw)`.
    pub fn to_planar(&self) -> PlanarPose {
        PlanarPose::new(
            self.translation.x,
            self.translation.y,
            self.rotation[(1, 0)].atan2(self.rotation[(0, 0)]),
        )
    }

    /// Row-major rotation followed by translation, the layout used on the tape.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.rotation[(r, c)];
            }
            out[9 + r] = self.translation[r];
        }
        out
    }

    pub fn from_array(a: &[f64]) -> SE3Pose {
        SE3Pose::new(
            Matrix3::from_row_slice(&a[..9]),
            Vector3::new(a[9], a[10], a[11]),
        )
    }

    pub fn max_abs_diff(&self, other: &SE3Pose) -> f64 {
        (self.rotation - other.rotation)
            .amax()
            .max((self.translation - other.translation).amax())
    }
}

/// Three-DOF motion in the camera's x-y plane: longitudinal offset,
/// lateral offset and heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl PlanarPose {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma: wrap_angle(gamma),
        }
    }

    pub fn to_se3(&self) -> SE3Pose {
        planar_to_se3(self)
    }
}

/// Embeds a planar pose as `C = Rz(gamma)`, `r = (alpha, beta, 0)`.
pub fn planar_to_se3(pp: &PlanarPose) -> SE3Pose {
    SE3Pose::new(rot_z(pp.gamma), Vector3::new(pp.alpha, pp.beta, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 0.1).unwrap()
    }

    #[test]
    fn project_examples() {
        let y = project(&Vector3::new(0.0, 0.0, 1.0), &k()).unwrap();
        assert_eq!((y.u_l, y.v_l, y.d), (0.0, 0.0, 10.0));
        let y = project(&Vector3::new(0.5, 0.0, 1.0), &k()).unwrap();
        assert_eq!((y.u_l, y.v_l, y.d), (50.0, 0.0, 10.0));
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, 0.0), &k()),
            Err(Error::DegenerateDepth(_))
        ));
    }

    #[test]
    fn backproject_examples() {
        let p = backproject(&StereoObservation::new(0.0, 0.0, 10.0), &k()).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 1.0));
        for d in [0.0, 1e-7, -3.0] {
            assert!(matches!(
                backproject(&StereoObservation::new(0.0, 0.0, d), &k()),
                Err(Error::InvalidDisparity(_))
            ));
        }
    }

    #[test]
    fn roundtrip_random_points() {
        let k = CameraIntrinsics::new(412.5, 398.0, 320.2, 241.7, 0.24).unwrap();
        let mut rng = crate::seed::rng(11);
        for _ in 0..1000 {
            let p = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.5..10.0),
            );
            let back = backproject(&project(&p, &k).unwrap(), &k).unwrap();
            assert!((back - p).amax() <= 1e-12, "{p:?} -> {back:?}");
        }
    }

    #[test]
    fn backproject_jacobian_matches_central_differences() {
        let k = CameraIntrinsics::new(40.0, 38.0, 31.5, 23.5, 0.2).unwrap();
        let y = StereoObservation::new(12.3, 30.1, 4.7);
        let jac = backproject_jacobian(&y, &k).unwrap();
        let h = 1e-6;
        for col in 0..3 {
            let mut lo = [y.u_l, y.v_l, y.d];
            let mut hi = lo;
            lo[col] -= h;
            hi[col] += h;
            let plo = backproject(&StereoObservation::new(lo[0], lo[1], lo[2]), &k).unwrap();
            let phi = backproject(&StereoObservation::new(hi[0], hi[1], hi[2]), &k).unwrap();
            let fd = (phi - plo) / (2.0 * h);
            for row in 0..3 {
                let a = jac[(row, col)];
                assert!(
                    (a - fd[row]).abs() <= 1e-6 * a.abs().max(1.0),
                    "J[{row},{col}] = {a} vs {}",
                    fd[row]
                );
            }
        }
    }

    #[test]
    fn planar_examples() {
        let t = planar_to_se3(&PlanarPose::new(0.0, 0.0, 0.0));
        assert_eq!(t, SE3Pose::identity());
        let t = planar_to_se3(&PlanarPose::new(1.0, 2.0, PI / 2.0));
        assert_relative_eq!(t.rotation, rot_z(PI / 2.0));
        assert_relative_eq!(t.rotation[(1, 0)], 1.0, epsilon = 1e-15);
        assert_eq!(t.translation, Vector3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn gamma_wraps_into_half_open_interval() {
        assert_eq!(PlanarPose::new(0.0, 0.0, -PI).gamma, PI);
        assert_eq!(PlanarPose::new(0.0, 0.0, PI).gamma, PI);
        assert_relative_eq!(PlanarPose::new(0.0, 0.0, 3.0 * PI / 2.0).gamma, -PI / 2.0);
    }

    fn random_pose(rng: &mut impl Rng) -> SE3Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let rot = nalgebra::Rotation3::new(axis * rng.random_range(0.0..3.0));
        SE3Pose::new(
            *rot.matrix(),
            Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ),
        )
    }

    #[test]
    fn group_axioms() {
        let mut rng = crate::seed::rng(3);
        let p = Vector3::new(0.3, -1.2, 4.0);
        assert_eq!(SE3Pose::identity().apply(&p), p);
        for _ in 0..100 {
            let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            assert!(a.compose(&a.inverse()).max_abs_diff(&SE3Pose::identity()) <= 1e-12);
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            assert!(left.max_abs_diff(&right) <= 1e-10);
            assert_relative_eq!(
                a.compose(&b).apply(&p),
                a.apply(&b.apply(&p)),
                epsilon = 1e-10
            );
        }
    }

    proptest! {
        #[test]
        fn planar_embedding_is_a_valid_z_preserving_transform(
            alpha in -10.0..10.0f64, beta in -10.0..10.0f64, gamma in -20.0..20.0f64
        ) {
            let pp = PlanarPose::new(alpha, beta, gamma);
            prop_assert!(pp.gamma > -PI && pp.gamma <= PI);
            let t = planar_to_se3(&pp);
            prop_assert!(t.is_valid(1e-9));
            prop_assert_eq!(t.translation.z, 0.0);
            prop_assert_eq!(t.rotation * Vector3::z(), Vector3::z());
            prop_assert!(t.compose(&t.inverse()).max_abs_diff(&SE3Pose::identity()) <= 1e-12);
            let back = t.to_planar();
            prop_assert!((back.alpha - alpha).abs() < 1e-12 && (back.beta - beta).abs() < 1e-12);
            prop_assert!(wrap_angle(back.gamma - pp.gamma).abs() < 1e-12);
        }
    }
}
