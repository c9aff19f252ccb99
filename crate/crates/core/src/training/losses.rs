use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{planar_to_se3, PlanarPose};
use crate::matching::DEFAULT_TAU;

/// Loss weighting and match-gating settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Rotation term weight inside the pose loss.
    pub lambda: f64,
    /// Weight of the keypoint loss relative to the pose loss.
    pub keypoint_weight: f64,
    /// Planar error above which a match is dropped before alignment.
    pub gate_threshold: f64,
    pub tau: f64,
    /// Target pixel stride for dense matching.
    pub stride: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            keypoint_weight: 1.0,
            gate_threshold: 0.5,
            tau: DEFAULT_TAU,
            stride: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda > 0.0
            && self.keypoint_weight >= 0.0
            && self.gate_threshold > 0.0
            && self.tau > 0.0
            && self.stride >= 1;
        if !ok {
            return Err(Error::Config(format!("invalid loss configuration {self:?}")));
        }
        Ok(())
    }
}

/// Sum of squared planar residuals between ground-truth-transformed source
/// points and matched target points; z is ignored.
pub fn keypoint_loss(source: &[Vector3<f64>], target: &[Vector3<f64>], gt: &PlanarPose) -> f64 {
    assert_eq!(source.len(), target.len(), "keypoint loss needs paired points");
    let t = planar_to_se3(gt);
    source
        .iter()
        .zip(target)
        .map(|(s, p)| {
            let e = t.apply(s) - p;
            e.x * e.x + e.y * e.y
        })
        .sum()
}

/// Translation error plus `lambda` times the squared Frobenius distance of
/// the relative rotation from identity, on the planar embeddings.
pub fn pose_loss(est: &PlanarPose, gt: &PlanarPose, lambda: f64) -> f64 {
    let (a, b) = (planar_to_se3(est), planar_to_se3(gt));
    let rot: Matrix3<f64> = a.rotation * b.rotation.transpose() - Matrix3::identity();
    (a.translation - b.translation).norm_squared() + lambda * rot.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn keypoint_loss_examples() {
        let gt = PlanarPose::new(0.3, -0.1, 0.2);
        let t = planar_to_se3(&gt);
        let src = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, 0.5, 2.0)];
        let mut tgt: Vec<_> = src.iter().map(|p| t.apply(p)).collect();
        assert!(keypoint_loss(&src, &tgt, &gt) < 1e-24);
        tgt[1].x += 1.0;
        assert!((keypoint_loss(&src, &tgt, &gt) - 1.0).abs() < 1e-12);
        tgt[1].x -= 1.0;
        tgt[0].z += 5.0;
        assert!(keypoint_loss(&src, &tgt, &gt) < 1e-24);
    }

    #[test]
    fn pose_loss_examples() {
        let gt = PlanarPose::new(0.5, 0.2, 0.1);
        assert_eq!(pose_loss(&gt, &gt, 1.0), 0.0);
        let shifted = PlanarPose::new(1.5, 0.2, 0.1);
        assert!((pose_loss(&shifted, &gt, 1.0) - 1.0).abs() < 1e-12);
        let turned = PlanarPose::new(0.5, 0.2, 0.1 + FRAC_PI_2);
        assert!((pose_loss(&turned, &gt, 1.0) - 4.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rotation_term_depends_only_on_heading_difference(a in -3.1f64..3.1, b in -3.1f64..3.1, shift in -3.0f64..3.0) {
            let l1 = pose_loss(&PlanarPose::new(0.0, 0.0, a), &PlanarPose::new(0.0, 0.0, b), 1.0);
            let l2 = pose_loss(&PlanarPose::new(0.0, 0.0, a + shift), &PlanarPose::new(0.0, 0.0, b + shift), 1.0);
            prop_assert!((l1 - l2).abs() < 1e-12);
            prop_assert!((l1 - 4.0 * (1.0 - (a - b).cos())).abs() < 1e-12);
            prop_assert!(l1 >= 0.0);
        }
    }
}
