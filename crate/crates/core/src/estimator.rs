//! Weighted rigid alignment of matched 3D points, ground-truth outlier
//! gating for training and RANSAC for inference.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SE3Pose;

/// Relative tolerance on the pairwise sums of signed singular values below
/// which the alignment (and its derivative) is considered degenerate.
pub const DEGENERACY_TOL: f64 = 1e-8;

/// Matched point pairs `p_s -> p_t` with per-pair weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignmentProblem {
    pub source: Vec<Vector3<f64>>,
    pub target: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

impl AlignmentProblem {
    pub fn new(
        source: Vec<Vector3<f64>>,
        target: Vec<Vector3<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let p = Self {
            source,
            target,
            weights,
        };
        if p.source.len() != p.target.len() || p.source.len() != p.weights.len() {
            return Err(Error::Shape(format!(
                "alignment lengths {} / {} / {}",
                p.source.len(),
                p.target.len(),
                p.weights.len()
            )));
        }
        Ok(p)
    }

    pub fn unit_weights(source: Vec<Vector3<f64>>, target: Vec<Vector3<f64>>) -> Result<Self> {
        let n = source.len();
        Self::new(source, target, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Weighted sum of squared residuals under `pose`.
    pub fn cost(&self, pose: &SE3Pose) -> f64 {
        self.source
            .iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((s, t), w)| w * (pose.apply(s) - t).norm_squared())
            .sum()
    }
}

/// Closed-form solution together with the factors its derivative needs.
#[derive(Debug, Clone)]
pub struct AlignmentSolution {
    pub pose: SE3Pose,
    pub source_centroid: Vector3<f64>,
    pub target_centroid: Vector3<f64>,
    pub weight_sum: f64,
    /// Right singular vectors of the cross-covariance (columns).
    pub v: Matrix3<f64>,
    /// Singular values with the reflection sign folded into the last one.
    pub signed_singular: Vector3<f64>,
}

/// Solves `min sum_i w_i |C p_s + r - p_t|^2` by weighted centroid
/// subtraction and an SVD of the weighted cross-covariance.
pub fn solve_alignment(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    weights: &[f64],
) -> Result<AlignmentSolution> {
    if source.len() != target.len() || source.len() != weights.len() {
        return Err(Error::Shape(format!(
            "alignment lengths {} / {} / {}",
            source.len(),
            target.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::DegenerateGeometry(
            "weights must be finite and non-negative".into(),
        ));
    }
    let active = weights.iter().filter(|&&w| w > 0.0).count();
    if active < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{active} pairs with positive weight, need 3"
        )));
    }

    let mut weight_sum = 0.0;
    let mut cs = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for ((s, t), &w) in source.iter().zip(target).zip(weights) {
        weight_sum += w;
        cs += w * s;
        ct += w * t;
    }
    cs /= weight_sum;
    ct /= weight_sum;

    let mut m = Matrix3::zeros();
    for ((s, t), &w) in source.iter().zip(target).zip(weights) {
        m += w * (t - ct) * (s - cs).transpose();
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateGeometry("non-finite cross-covariance".into()));
    }

    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateGeometry("SVD did not converge".into())),
    };
    // Sort singular triplets descending so the reflection fix lands on the smallest.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma = Vector3::from_fn(|i, _| svd.singular_values[order[i]]);
    let u = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    let v = v_t.transpose();
    let v = Matrix3::from_columns(&[v.column(order[0]), v.column(order[1]), v.column(order[2])]);

    let sign = if (u * v.transpose()).determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let signed = Vector3::new(sigma[0], sigma[1], sign * sigma[2]);
    let scale = sigma[0];
    let min_pair = (signed[0] + signed[1])
        .min(signed[0] + signed[2])
        .min(signed[1] + signed[2]);
    if !(scale > 0.0) || min_pair <= DEGENERACY_TOL * scale {
        return Err(Error::DegenerateGeometry(format!(
            "singular spectrum {sigma:?} (reflection sign {sign}) does not fix a unique rotation"
        )));
    }

    let rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * v.transpose();
    let translation = ct - rotation * cs;
    Ok(AlignmentSolution {
        pose: SE3Pose::new(rotation, translation),
        source_centroid: cs,
        target_centroid: ct,
        weight_sum,
        v,
        signed_singular: signed,
    })
}

pub fn weighted_alignment(prob: &AlignmentProblem) -> Result<SE3Pose> {
    solve_alignment(&prob.source, &prob.target, &prob.weights).map(|s| s.pose)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub iterations: usize,
    /// 3D residual below which a pair counts as an inlier.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_threshold: 0.1,
            min_inliers: 6,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.inlier_threshold > 0.0) {
            return Err(Error::Config(format!(
                "RANSAC needs iterations >= 1 and a positive threshold, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub pose: SE3Pose,
    pub inliers: Vec<bool>,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn consensus(prob: &AlignmentProblem, pose: &SE3Pose, threshold: f64) -> Vec<bool> {
    prob.source
        .iter()
        .zip(&prob.target)
        .map(|(s, t)| (pose.apply(s) - t).norm() < threshold)
        .collect()
}

/// Hypothesize-and-verify with 3-point minimal sets, then one weighted
/// alignment over the largest consensus set.
pub fn ransac_pose(prob: &AlignmentProblem, params: &RansacParams) -> Result<RansacResult> {
    params.validate()?;
    let n = prob.len();
    if n < 3 {
        return Err(Error::InsufficientMatches(n));
    }
    let mut rng = crate::seed::rng(params.seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..params.iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        for taken in [i.min(j), i.max(j)] {
            if k >= taken {
                k += 1;
            }
        }
        let src = [prob.source[i], prob.source[j], prob.source[k]];
        let tgt = [prob.target[i], prob.target[j], prob.target[k]];
        let Ok(hyp) = solve_alignment(&src, &tgt, &[1.0; 3]) else {
            continue;
        };
        let mask = consensus(prob, &hyp.pose, params.inlier_threshold);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, mask));
            if count == n {
                break;
            }
        }
    }
    let (count, mask) = best.unwrap_or((0, vec![false; n]));
    if count < params.min_inliers.max(3) {
        return Err(Error::LocalizationFailure {
            inliers: count,
            required: params.min_inliers.max(3),
        });
    }
    let pick = |v: &[Vector3<f64>]| -> Vec<Vector3<f64>> {
        v.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect()
    };
    let src = pick(&prob.source);
    let tgt = pick(&prob.target);
    let w: Vec<f64> = prob
        .weights
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(w, _)| *w)
        .collect();
    let pose = match solve_alignment(&src, &tgt, &w) {
        Ok(s) => s.pose,
        // Scores may vanish on the consensus set; geometry alone still fixes the pose.
        Err(_) => solve_alignment(&src, &tgt, &vec![1.0; src.len()])?.pose,
    };
    Ok(RansacResult {
        pose,
        inliers: mask,
    })
}

/// Indices of pairs whose planar (x, y) error under the ground-truth pose is
/// within `threshold`.
pub fn gt_outlier_gate(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    gt: &SE3Pose,
    threshold: f64,
) -> Vec<usize> {
    source
        .iter()
        .zip(target)
        .enumerate()
        .filter(|(_, (s, t))| {
            let e = gt.apply(s) - *t;
            e.x.hypot(e.y) <= threshold
        })
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_z, PlanarPose};
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(1.0..4.0),
                )
            })
            .collect()
    }

    #[test]
    fn identical_sets_give_identity() {
        let mut rng = crate::seed::rng(1);
        let pts = random_points(&mut rng, 6);
        let pose = weighted_alignment(&AlignmentProblem::unit_weights(pts.clone(), pts).unwrap())
            .unwrap();
        assert!(pose.max_abs_diff(&SE3Pose::identity()) <= 1e-12);
    }

    #[test]
    fn recovers_constructed_pose() {
        let mut rng = crate::seed::rng(2);
        let truth = SE3Pose::new(rot_z(FRAC_PI_2), Vector3::new(1.0, 2.0, 0.0));
        let src = random_points(&mut rng, 5);
        let tgt = src.iter().map(|p| truth.apply(p)).collect();
        let pose = weighted_alignment(&AlignmentProblem::unit_weights(src, tgt).unwrap()).unwrap();
        assert!((pose.rotation - truth.rotation).norm() <= 1e-9);
        assert!((pose.translation - truth.translation).norm() <= 1e-9);
    }

    #[test]
    fn zero_weight_pair_is_bitwise_irrelevant() {
        let mut rng = crate::seed::rng(3);
        let truth = PlanarPose::new(0.3, -0.1, 0.2).to_se3();
        let src = random_points(&mut rng, 7);
        let tgt: Vec<_> = src
            .iter()
            .map(|p| truth.apply(p) + Vector3::new(0.01, -0.02, 0.005))
            .collect();
        let w: Vec<f64> = (0..7).map(|_| rng.random_range(0.1..1.0)).collect();
        let base = AlignmentProblem::new(src.clone(), tgt.clone(), w.clone()).unwrap();
        let mut bad = base.clone();
        bad.source.push(Vector3::new(9.0, -7.0, 3.0));
        bad.target.push(Vector3::new(-40.0, 12.0, 100.0));
        bad.weights.push(0.0);
        assert_eq!(weighted_alignment(&base).unwrap(), weighted_alignment(&bad).unwrap());
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let src: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 1.0)).collect();
        let err = weighted_alignment(&AlignmentProblem::unit_weights(src.clone(), src).unwrap());
        assert!(matches!(err, Err(Error::DegenerateGeometry(_))));
        let two = vec![Vector3::x(), Vector3::y(), Vector3::z()];
        let err = weighted_alignment(&AlignmentProblem::new(two.clone(), two, vec![1.0, 1.0, 0.0]).unwrap());
        assert!(matches!(err, Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn reflection_optimum_still_returns_rotation() {
        // Target is the mirror image of the source; the best orthogonal map is a
        // reflection, which must be corrected to a proper rotation.
        let mut rng = crate::seed::rng(4);
        let src = random_points(&mut rng, 8);
        let tgt: Vec<_> = src.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let pose = weighted_alignment(&AlignmentProblem::unit_weights(src, tgt).unwrap()).unwrap();
        assert!(pose.is_valid(1e-9));
    }

    proptest! {
        #[test]
        fn output_is_rotation_and_locally_optimal(seed in 0u64..500, scale in 0.01..100.0f64) {
            let mut rng = crate::seed::rng(seed);
            let src = random_points(&mut rng, 8);
            let tgt: Vec<_> = random_points(&mut rng, 8);
            let w: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..1.0)).collect();
            let prob = AlignmentProblem::new(src.clone(), tgt.clone(), w.clone()).unwrap();
            let Ok(pose) = weighted_alignment(&prob) else { return Ok(()) };
            prop_assert!(pose.is_valid(1e-9));
            let scaled = AlignmentProblem::new(src, tgt, w.iter().map(|x| x * scale).collect()).unwrap();
            let pose2 = weighted_alignment(&scaled).unwrap();
            prop_assert!(pose.max_abs_diff(&pose2) <= 1e-12 * (1.0 + pose.translation.amax()));
            let best = prob.cost(&pose);
            prop_assert!(best <= prob.cost(&SE3Pose::identity()) + 1e-12);
            for _ in 0..100 {
                let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let d = nalgebra::Rotation3::new(axis * 0.05);
                let dt = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
                let perturbed = SE3Pose::new(d.matrix() * pose.rotation, pose.translation + dt);
                prop_assert!(best <= prob.cost(&perturbed) + 1e-12);
            }
        }
    }

    fn outlier_instance(seed: u64, n: usize) -> (AlignmentProblem, SE3Pose, Vec<bool>) {
        let mut rng = crate::seed::rng(seed);
        let truth = PlanarPose::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.17..0.17),
        )
        .to_se3();
        let src = random_points(&mut rng, n);
        let mut tgt = Vec::with_capacity(n);
        let mut is_inlier = Vec::with_capacity(n);
        for (i, p) in src.iter().enumerate() {
            let mut t = truth.apply(p);
            if i % 10 < 3 {
                let dir = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                t += 5.0 * dir;
                is_inlier.push(false);
            } else {
                is_inlier.push(true);
            }
            tgt.push(t);
        }
        (AlignmentProblem::unit_weights(src, tgt).unwrap(), truth, is_inlier)
    }

    #[test]
    fn ransac_outlier_free() {
        let mut rng = crate::seed::rng(9);
        let truth = PlanarPose::new(0.2, 0.1, -0.05).to_se3();
        let src = random_points(&mut rng, 12);
        let tgt = src.iter().map(|p| truth.apply(p)).collect();
        let w = (0..12).map(|i| 0.2 + 0.05 * i as f64).collect();
        let prob = AlignmentProblem::new(src, tgt, w).unwrap();
        let res = ransac_pose(&prob, &RansacParams::default()).unwrap();
        assert!(res.inliers.iter().all(|&b| b));
        assert_eq!(res.pose, weighted_alignment(&prob).unwrap());
    }

    #[test]
    fn ransac_rejects_gross_outliers() {
        let (prob, truth, is_inlier) = outlier_instance(21, 20);
        assert_eq!(is_inlier.iter().filter(|&&b| !b).count(), 6);
        let params = RansacParams {
            iterations: 500,
            ..Default::default()
        };
        let res = ransac_pose(&prob, &params).unwrap();
        assert_eq!(res.inliers, is_inlier);
        assert!(res.pose.max_abs_diff(&truth) <= 1e-6);
        assert_eq!(res, ransac_pose(&prob, &params).unwrap());
    }

    #[test]
    fn ransac_errors() {
        let p = vec![Vector3::x(), Vector3::y()];
        let prob = AlignmentProblem::unit_weights(p.clone(), p).unwrap();
        assert!(matches!(
            ransac_pose(&prob, &RansacParams::default()),
            Err(Error::InsufficientMatches(2))
        ));
        let mut rng = crate::seed::rng(5);
        let src = random_points(&mut rng, 10);
        let tgt = random_points(&mut rng, 10);
        let prob = AlignmentProblem::unit_weights(src, tgt).unwrap();
        assert!(matches!(
            ransac_pose(&prob, &RansacParams { min_inliers: 8, ..Default::default() }),
            Err(Error::LocalizationFailure { .. })
        ));
    }

    #[test]
    fn gate_examples() {
        let mut rng = crate::seed::rng(6);
        let gt = PlanarPose::new(0.1, 0.2, 0.1).to_se3();
        let src = random_points(&mut rng, 10);
        let mut tgt: Vec<_> = src.iter().map(|p| gt.apply(p)).collect();
        assert_eq!(gt_outlier_gate(&src, &tgt, &gt, 0.5), (0..10).collect::<Vec<_>>());
        tgt[4].x += 1.0;
        assert_eq!(gt_outlier_gate(&src, &tgt, &gt, 0.5).len(), 9);
        assert!(!gt_outlier_gate(&src, &tgt, &gt, 0.5).contains(&4));
        // z errors are ignored.
        tgt[2].z += 10.0;
        assert!(gt_outlier_gate(&src, &tgt, &gt, 0.5).contains(&2));
    }

    proptest! {
        #[test]
        fn gate_is_monotone_in_threshold(seed in 0u64..200, t1 in 0.01..1.0f64, dt in 0.0..1.0f64) {
            let mut rng = crate::seed::rng(seed);
            let gt = PlanarPose::new(0.1, 0.2, 0.1).to_se3();
            let src = random_points(&mut rng, 15);
            let tgt = random_points(&mut rng, 15);
            let a = gt_outlier_gate(&src, &tgt, &gt, t1);
            let b = gt_outlier_gate(&src, &tgt, &gt, t1 + dt);
            prop_assert!(a.iter().all(|i| b.contains(i)));
        }
    }
}
