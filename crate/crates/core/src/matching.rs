//! Dense soft matching of source keypoints against every target pixel and
//! the per-match confidence weights.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{bilinear_sample, DenseFeatureMap, KeypointSet};

pub const DEFAULT_TAU: f64 = 50.0;
const STD_FLOOR: f64 = 1e-12;

/// Zero-normalised cross correlation with population statistics. A
/// zero-variance operand yields 0.
pub fn zncc(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "zncc operands differ in length");
    let (Some(na), Some(nb)) = (normalize(a), normalize(b)) else {
        return 0.0;
    };
    dot(&na, &nb) / a.len() as f64
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    (std > STD_FLOOR).then(|| v.iter().map(|x| (x - mean) / std).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Confidence of a match from its descriptor similarity and both scores.
pub fn match_weight(zncc: f64, source_score: f64, target_score: f64) -> f64 {
    0.5 * (zncc + 1.0) * source_score * target_score
}

/// Zero-normalised candidate descriptors of a target map, pixel-major.
struct Candidates {
    dim: usize,
    coords: Vec<[f64; 2]>,
    normalized: Vec<f64>,
}

impl Candidates {
    fn new(target: &DenseFeatureMap, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("match stride must be positive".into()));
        }
        let (w, h, d) = (target.width, target.height, target.dim);
        let plane = w * h;
        let mut coords = Vec::new();
        let mut normalized = Vec::new();
        let mut desc = vec![0.0; d];
        for y in (0..h).step_by(stride) {
            for x in (0..w).step_by(stride) {
                for (c, v) in desc.iter_mut().enumerate() {
                    *v = target.descriptors[c * plane + y * w + x];
                }
                coords.push([x as f64, y as f64]);
                normalized.extend(normalize(&desc).unwrap_or_else(|| vec![0.0; d]));
            }
        }
        Ok(Self {
            dim: d,
            coords,
            normalized,
        })
    }

    /// Softmax over `tau * zncc` against every candidate.
    fn probabilities(&self, descriptor: &[f64], tau: f64) -> Vec<f64> {
        let d = self.dim;
        let mut p: Vec<f64> = match normalize(descriptor) {
            Some(a) => self.normalized.chunks(d).map(|b| tau * dot(&a, b) / d as f64).collect(),
            None => vec![0.0; self.coords.len()],
        };
        let max = p.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut total = 0.0;
        for v in &mut p {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in &mut p {
            *v /= total;
        }
        p
    }

    fn expected_point(&self, probabilities: &[f64]) -> [f64; 2] {
        let (mut u, mut v) = (0.0, 0.0);
        for (p, q) in probabilities.iter().zip(&self.coords) {
            u += p * q[0];
            v += p * q[1];
        }
        [u, v]
    }
}

/// Soft match of a single descriptor: the expected target point and the
/// descriptor and score interpolated there.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMatch {
    pub point: [f64; 2],
    pub descriptor: Vec<f64>,
    pub score: f64,
}

fn check_inputs(descriptor_dim: usize, target: &DenseFeatureMap, tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if descriptor_dim != target.dim {
        return Err(Error::Shape(format!(
            "descriptor length {descriptor_dim} against {}-channel target",
            target.dim
        )));
    }
    Ok(())
}

fn sample_target(target: &DenseFeatureMap, point: [f64; 2]) -> Result<(Vec<f64>, f64)> {
    let (w, h) = (target.width, target.height);
    let descriptor = bilinear_sample(&target.descriptors, target.dim, h, w, point)?;
    let score = bilinear_sample(&target.scores, 1, h, w, point)?[0];
    Ok((descriptor, score))
}

pub fn soft_match(descriptor: &[f64], target: &DenseFeatureMap, tau: f64, stride: usize) -> Result<SoftMatch> {
    check_inputs(descriptor.len(), target, tau)?;
    let cand = Candidates::new(target, stride)?;
    let point = cand.expected_point(&cand.probabilities(descriptor, tau));
    let (descriptor, score) = sample_target(target, point)?;
    Ok(SoftMatch {
        point,
        descriptor,
        score,
    })
}

/// The softmax weights a descriptor places on each candidate pixel,
/// row-major over the strided grid.
pub fn match_probabilities(descriptor: &[f64], target: &DenseFeatureMap, tau: f64, stride: usize) -> Result<Vec<f64>> {
    check_inputs(descriptor.len(), target, tau)?;
    Ok(Candidates::new(target, stride)?.probabilities(descriptor, tau))
}

/// Soft matches of every source keypoint, in keypoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub source: KeypointSet,
    pub target_points: Vec<[f64; 2]>,
    /// Row-major `[N, D]`.
    pub target_descriptors: Vec<f64>,
    pub target_scores: Vec<f64>,
    pub zncc: Vec<f64>,
    pub weights: Vec<f64>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.target_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_points.is_empty()
    }
}

pub fn match_all(source: &KeypointSet, target: &DenseFeatureMap, tau: f64, stride: usize) -> Result<MatchSet> {
    check_inputs(source.dim, target, tau)?;
    let cand = Candidates::new(target, stride)?;
    let matches = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let d = source.descriptor(i);
            let point = cand.expected_point(&cand.probabilities(d, tau));
            let (descriptor, score) = sample_target(target, point)?;
            let z = zncc(d, &descriptor);
            Ok((point, descriptor, score, z))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = MatchSet {
        source: source.clone(),
        target_points: Vec::with_capacity(matches.len()),
        target_descriptors: Vec::with_capacity(matches.len() * source.dim),
        target_scores: Vec::with_capacity(matches.len()),
        zncc: Vec::with_capacity(matches.len()),
        weights: Vec::with_capacity(matches.len()),
    };
    for (i, (point, descriptor, score, z)) in matches.into_iter().enumerate() {
        set.target_points.push(point);
        set.target_descriptors.extend(descriptor);
        set.target_scores.push(score);
        set.zncc.push(z);
        set.weights.push(match_weight(z, source.scores[i], score));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::analytic_features;
    use crate::image::Image;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    fn random_map(seed: u64, w: usize, h: usize, d: usize) -> DenseFeatureMap {
        let mut rng = crate::seed::rng(seed);
        let plane = w * h;
        DenseFeatureMap::new(
            w,
            h,
            d,
            (0..d * plane).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..plane).map(|_| rng.random_range(0.0..1.0)).collect(),
            vec![0.0; plane],
        )
        .unwrap()
    }

    #[test]
    fn zncc_identities() {
        let d = [0.3, -1.0, 2.0, 0.5];
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        let affine: Vec<f64> = d.iter().map(|v| 2.0 * v + 5.0).collect();
        let other = [1.0, 0.2, -0.7, 0.4];
        assert!((zncc(&d, &d) - 1.0).abs() < 1e-12);
        assert!((zncc(&d, &neg) + 1.0).abs() < 1e-12);
        assert!((zncc(&other, &affine) - zncc(&other, &d)).abs() < 1e-12);
        assert_eq!(zncc(&d, &[1.0; 4]), 0.0);
    }

    #[test]
    fn weights_follow_score_product() {
        assert_eq!(match_weight(1.0, 1.0, 1.0), 1.0);
        assert_eq!(match_weight(-1.0, 0.7, 0.9), 0.0);
        assert_eq!(match_weight(0.4, 0.0, 0.9), 0.0);
        assert_eq!(match_weight(0.4, 0.8, 0.0), 0.0);
    }

    #[test]
    fn identical_descriptors_match_to_centroid() {
        let (w, h) = (6, 4);
        let mut map = random_map(1, w, h, 3);
        for c in 0..3 {
            for j in 0..w * h {
                map.descriptors[c * w * h + j] = c as f64;
            }
        }
        let m = soft_match(&[0.0, 1.0, 5.0], &map, 50.0, 1).unwrap();
        assert!((m.point[0] - 2.5).abs() < 1e-12 && (m.point[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn two_pixel_target_prefers_the_correlated_pixel() {
        let map = DenseFeatureMap::new(2, 1, 2, vec![1.0, -1.0, -1.0, 1.0], vec![1.0, 1.0], vec![0.0; 2]).unwrap();
        let m = soft_match(&[1.0, -1.0], &map, 20.0, 1).unwrap();
        // exp(-40) / (1 + exp(-40))
        let expected_u = (-40.0_f64).exp() / (1.0 + (-40.0_f64).exp());
        assert!((m.point[0] - expected_u).abs() < 1e-15);
        assert!(m.point[0] < 1e-8 && m.point[1] == 0.0);
    }

    #[test]
    fn self_matching_recovers_keypoints() {
        let mut rng = crate::seed::rng(4);
        let waves: Vec<[f32; 3]> = (0..6)
            .map(|_| [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(0.0..6.3)])
            .collect();
        let data = (0..32 * 24)
            .map(|j| {
                let (x, y) = ((j % 32) as f32, (j / 32) as f32);
                waves.iter().map(|w| (w[0] * x + w[1] * y + w[2]).sin()).sum::<f32>()
            })
            .collect();
        let img = Image::new(32, 24, data).unwrap();
        let f = analytic_features(&img).unwrap();
        let kp = f.keypoints(8).unwrap();
        let m = match_all(&kp, &f, 1e3, 1).unwrap();
        assert_eq!(m.len(), kp.len());
        for (q, p) in kp.coords.iter().zip(&m.target_points) {
            assert!((q[0] - p[0]).abs() <= 0.5 && (q[1] - p[1]).abs() <= 0.5, "{q:?} vs {p:?}");
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let map = random_map(2, 4, 4, 3);
        assert!(matches!(soft_match(&[1.0, 2.0], &map, 50.0, 1), Err(Error::Shape(_))));
        assert!(soft_match(&[1.0, 2.0, 3.0], &map, 0.0, 1).is_err());
    }

    #[test]
    fn stride_subsamples_candidates() {
        let map = random_map(3, 8, 6, 4);
        let p = match_probabilities(&[0.1, 0.5, -0.3, 0.9], &map, 50.0, 2).unwrap();
        assert_eq!(p.len(), 12);
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one_and_point_stays_inside(seed in 0u64..500) {
            let map = random_map(seed, 16, 12, 5);
            let mut rng = crate::seed::rng(seed + 1);
            let d: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = match_probabilities(&d, &map, 50.0, 1).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let m = soft_match(&d, &map, 50.0, 1).unwrap();
            prop_assert!(m.point[0] >= 0.0 && m.point[0] <= 15.0 && m.point[1] >= 0.0 && m.point[1] <= 11.0);
        }

        #[test]
        fn high_temperature_approaches_hard_argmax(seed in 0u64..500) {
            let map = random_map(seed, 16, 12, 6);
            let mut rng = crate::seed::rng(seed + 7);
            let d: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut scores: Vec<(f64, usize)> = (0..16 * 12)
                .map(|j| (zncc(&d, &map.descriptor_at(j % 16, j / 16)), j))
                .collect();
            scores.sort_by(|a, b| b.0.total_cmp(&a.0));
            if scores[0].0 - scores[1].0 >= 0.05 {
                let m = soft_match(&d, &map, 1e3, 1).unwrap();
                let best = scores[0].1;
                prop_assert!((m.point[0] - (best % 16) as f64).abs() < 1e-6);
                prop_assert!((m.point[1] - (best / 16) as f64).abs() < 1e-6);
            }
        }
    }
}
