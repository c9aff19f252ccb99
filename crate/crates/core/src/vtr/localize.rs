use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{ransac_pose, AlignmentProblem, RansacParams};
use crate::features::{DenseFeatureMap, FeatureExtractor, KeypointSet};
use crate::geometry::{backproject, CameraIntrinsics, SE3Pose, StereoObservation, MIN_DISPARITY};
use crate::image::Image;
use crate::matching::{match_all, match_weight, zncc, DEFAULT_TAU};
use crate::synth::{block_match_disparity, StereoFrame};

/// Localization fails below this many RANSAC inliers.
pub const DEFAULT_FAILURE_THRESHOLD: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Soft matching of map keypoints against every live pixel.
    Dense,
    /// Mutual best ZNCC between map keypoints and live keypoints.
    Sparse,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "sparse" => Ok(Self::Sparse),
            other => Err(Error::Config(format!("unknown match mode {other:?}"))),
        }
    }
}

/// Where keypoint disparities come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisparitySource {
    /// Renderer ground truth carried by the frame.
    GroundTruth,
    /// SAD block matching on the stereo pair.
    BlockMatch { window: usize, max_disparity: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizeParams {
    pub mode: MatchMode,
    pub tau: f64,
    pub stride: usize,
    pub ransac: RansacParams,
    pub failure_threshold: usize,
    pub disparity: DisparitySource,
}

impl Default for LocalizeParams {
    fn default() -> Self {
        Self {
            mode: MatchMode::Dense,
            tau: DEFAULT_TAU,
            stride: 1,
            ransac: RansacParams::default(),
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            disparity: DisparitySource::GroundTruth,
        }
    }
}

/// Keyframe of the taught map. Lifts are in the vertex camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MapVertex {
    pub id: usize,
    pub keypoints: KeypointSet,
    pub points: Vec<Vector3<f64>>,
    /// Dense features of the taught left image, matched against in dense mode.
    pub features: DenseFeatureMap,
    /// Disparity of the taught left image; non-positive where unknown.
    pub disparity: Image,
    /// Ground-truth camera-to-world pose along the taught path.
    pub pose: SE3Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub vertex: usize,
    /// Maps live camera coordinates to vertex camera coordinates.
    pub pose: SE3Pose,
    pub inliers: usize,
    pub failure: bool,
    pub seconds: f64,
}

/// Disparity image for a frame; pixels without a reliable estimate are zero.
pub fn frame_disparity(frame: &StereoFrame, source: &DisparitySource) -> Result<Image> {
    match source {
        DisparitySource::GroundTruth => frame
            .disparity
            .clone()
            .ok_or_else(|| Error::Config("frame carries no ground-truth disparity".into())),
        DisparitySource::BlockMatch { window, max_disparity } => {
            let est = block_match_disparity(&frame.left, &frame.right, *window, *max_disparity);
            let data = est
                .disparity
                .data
                .iter()
                .zip(&est.valid)
                .map(|(&d, &ok)| if ok { d } else { 0.0 })
                .collect();
            Image::new(frame.left.width, frame.left.height, data)
        }
    }
}

/// Camera-frame point under `q`, if every pixel the interpolation touches
/// has a valid disparity.
pub fn lift(q: [f64; 2], disparity: &Image, k: &CameraIntrinsics) -> Option<Vector3<f64>> {
    let (w, h) = (disparity.width, disparity.height);
    if !(q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= (w - 1) as f64 && q[1] <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (q[0].floor() as usize, q[1].floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let ok = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
        .iter()
        .all(|&(x, y)| f64::from(disparity.get(x, y)) > MIN_DISPARITY);
    if !ok {
        return None;
    }
    let (fx, fy) = (q[0] - x0 as f64, q[1] - y0 as f64);
    let d = |x, y| f64::from(disparity.get(x, y));
    let value = (1.0 - fy) * ((1.0 - fx) * d(x0, y0) + fx * d(x1, y0)) + fy * ((1.0 - fx) * d(x0, y1) + fx * d(x1, y1));
    backproject(&StereoObservation::new(q[0], q[1], value), k).ok()
}

/// Keypoints of `features` with their stereo lifts; unliftable keypoints are dropped.
pub fn lifted_keypoints(
    features: &DenseFeatureMap,
    window: usize,
    disparity: &Image,
    k: &CameraIntrinsics,
) -> Result<(KeypointSet, Vec<Vector3<f64>>)> {
    let all = features.keypoints(window)?;
    let mut kept = KeypointSet {
        dim: all.dim,
        coords: Vec::new(),
        descriptors: Vec::new(),
        scores: Vec::new(),
    };
    let mut points = Vec::new();
    for (i, q) in all.coords.iter().enumerate() {
        if let Some(p) = lift(*q, disparity, k) {
            kept.coords.push(*q);
            kept.descriptors.extend_from_slice(all.descriptor(i));
            kept.scores.push(all.scores[i]);
            points.push(p);
        }
    }
    Ok((kept, points))
}

/// Live-to-vertex point pairs with match weights.
#[derive(Default)]
struct Correspondences {
    source: Vec<Vector3<f64>>,
    target: Vec<Vector3<f64>>,
    weights: Vec<f64>,
}

fn dense_correspondences(
    live: &KeypointSet,
    live_points: &[Vector3<f64>],
    vertex: &MapVertex,
    k: &CameraIntrinsics,
    params: &LocalizeParams,
) -> Result<Correspondences> {
    let m = match_all(live, &vertex.features, params.tau, params.stride)?;
    let mut c = Correspondences::default();
    for (i, q) in m.target_points.iter().enumerate() {
        if let Some(p) = lift(*q, &vertex.disparity, k) {
            c.source.push(live_points[i]);
            c.target.push(p);
            c.weights.push(m.weights[i]);
        }
    }
    Ok(c)
}

fn best(scores: impl Iterator<Item = f64>) -> Option<usize> {
    scores
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (j, s)| match acc {
            Some((_, b)) if b >= s => acc,
            _ => Some((j, s)),
        })
        .map(|(j, _)| j)
}

fn sparse_correspondences(live: &KeypointSet, live_points: &[Vector3<f64>], vertex: &MapVertex) -> Correspondences {
    let map = &vertex.keypoints;
    let (n, m) = (live.len(), map.len());
    let scores: Vec<f64> = (0..n * m)
        .map(|ij| zncc(live.descriptor(ij / m), map.descriptor(ij % m)))
        .collect();
    let mut c = Correspondences::default();
    for i in 0..n {
        let Some(j) = best((0..m).map(|j| scores[i * m + j])) else {
            continue;
        };
        if best((0..n).map(|r| scores[r * m + j])) != Some(i) {
            continue;
        }
        c.source.push(live_points[i]);
        c.target.push(vertex.points[j]);
        c.weights.push(match_weight(scores[i * m + j], live.scores[i], map.scores[j]));
    }
    c
}

/// Localizes a live frame against one map vertex. Matching or RANSAC
/// breakdowns are reported through the failure flag, not as errors.
pub fn localize(
    frame: &StereoFrame,
    vertex: &MapVertex,
    extractor: &dyn FeatureExtractor,
    k: &CameraIntrinsics,
    params: &LocalizeParams,
) -> Result<LocalizationResult> {
    let start = Instant::now();
    let features = extractor.extract(&frame.left)?;
    if features.dim != vertex.keypoints.dim {
        return Err(Error::Shape(format!(
            "live descriptors have {} channels, map has {}",
            features.dim, vertex.keypoints.dim
        )));
    }
    let disparity = frame_disparity(frame, &params.disparity)?;
    let (live, live_points) = lifted_keypoints(&features, extractor.window(), &disparity, k)?;
    let c = match params.mode {
        MatchMode::Dense => dense_correspondences(&live, &live_points, vertex, k, params)?,
        MatchMode::Sparse => sparse_correspondences(&live, &live_points, vertex),
    };
    let estimate = AlignmentProblem::new(c.source, c.target, c.weights).and_then(|p| ransac_pose(&p, &params.ransac));
    let (pose, inliers) = match estimate {
        Ok(r) => (r.pose, r.inlier_count()),
        Err(Error::LocalizationFailure { .. } | Error::InsufficientMatches(_) | Error::DegenerateGeometry(_)) => {
            (SE3Pose::identity(), 0)
        }
        Err(e) => return Err(e),
    };
    Ok(LocalizationResult {
        vertex: vertex.id,
        pose,
        inliers,
        failure: inliers < params.failure_threshold,
        seconds: start.elapsed().as_secs_f64(),
    })
}
