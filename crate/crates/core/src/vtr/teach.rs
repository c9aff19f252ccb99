use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::geometry::{CameraIntrinsics, SE3Pose};
use crate::synth::StereoFrame;

use super::localize::{frame_disparity, lifted_keypoints, localize, DisparitySource, LocalizeParams, MapVertex};

/// Fewest liftable keypoints a taught frame may have.
pub const MIN_TEACH_KEYPOINTS: usize = 3;

/// Map built from a taught sequence. Immutable once taught.
#[derive(Debug, Clone, PartialEq)]
pub struct VtrMap {
    /// Lighting condition of the taught sequence, when known.
    pub condition: Option<String>,
    pub extractor: String,
    pub window: usize,
    pub intrinsics: CameraIntrinsics,
    pub vertices: Vec<MapVertex>,
}

impl VtrMap {
    /// Vertex whose ground-truth position is closest in the ground plane.
    pub fn nearest_vertex(&self, pose: &SE3Pose) -> Option<&MapVertex> {
        let d2 = |v: &MapVertex| (v.pose.translation - pose.translation).xy().norm_squared();
        self.vertices.iter().min_by(|a, b| d2(a).total_cmp(&d2(b)))
    }
}

fn require_pose(frame: &StereoFrame, index: usize) -> Result<SE3Pose> {
    frame
        .pose
        .ok_or_else(|| Error::Config(format!("frame {index} carries no ground-truth pose")))
}

/// Builds one vertex per frame: features, keypoints and their stereo lifts.
pub fn teach(
    frames: &[StereoFrame],
    extractor: &dyn FeatureExtractor,
    k: &CameraIntrinsics,
    disparity: &DisparitySource,
) -> Result<VtrMap> {
    if frames.is_empty() {
        return Err(Error::Config("teach sequence is empty".into()));
    }
    let vertices = frames
        .par_iter()
        .enumerate()
        .map(|(id, frame)| {
            let pose = require_pose(frame, id)?;
            let features = extractor.extract(&frame.left)?;
            let disparity = frame_disparity(frame, disparity)?;
            let (keypoints, points) = lifted_keypoints(&features, extractor.window(), &disparity, k)?;
            if keypoints.len() < MIN_TEACH_KEYPOINTS {
                return Err(Error::TeachFailure {
                    frame: id,
                    reason: format!("{} liftable keypoints, need {MIN_TEACH_KEYPOINTS}", keypoints.len()),
                });
            }
            Ok(MapVertex {
                id,
                keypoints,
                points,
                features,
                disparity,
                pose,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VtrMap {
        condition: None,
        extractor: extractor.name().into(),
        window: extractor.window(),
        intrinsics: *k,
        vertices,
    })
}

/// Per-frame outcome of a repeat. `pose_error` is NaN on failed frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub vertex: usize,
    pub inliers: usize,
    pub failure: bool,
    pub pose_error: f64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub condition: String,
    pub frames: Vec<FrameRecord>,
    pub mean_inliers: f64,
    pub failures: usize,
    pub failure_fraction: f64,
    /// Over successful frames; NaN when every frame failed.
    pub planar_rmse: f64,
}

impl RunReport {
    pub fn from_frames(condition: impl Into<String>, frames: Vec<FrameRecord>) -> Self {
        let n = frames.len().max(1) as f64;
        let failures = frames.iter().filter(|f| f.failure).count();
        let ok: Vec<f64> = frames.iter().filter(|f| !f.failure).map(|f| f.pose_error).collect();
        let planar_rmse = if ok.is_empty() {
            f64::NAN
        } else {
            (ok.iter().map(|e| e * e).sum::<f64>() / ok.len() as f64).sqrt()
        };
        Self {
            condition: condition.into(),
            mean_inliers: frames.iter().map(|f| f.inliers as f64).sum::<f64>() / n,
            failures,
            failure_fraction: failures as f64 / n,
            planar_rmse,
            frames,
        }
    }
}

/// Ground-plane translation error of `estimate` against the true live-to-vertex motion.
pub fn planar_error(estimate: &SE3Pose, vertex_pose: &SE3Pose, live_pose: &SE3Pose) -> f64 {
    let truth = vertex_pose.inverse().compose(live_pose).to_planar();
    let est = estimate.to_planar();
    (est.alpha - truth.alpha).hypot(est.beta - truth.beta)
}

/// Localizes every frame against its nearest vertex by ground-truth position.
pub fn repeat(
    condition: &str,
    frames: &[StereoFrame],
    map: &VtrMap,
    extractor: &dyn FeatureExtractor,
    params: &LocalizeParams,
) -> Result<RunReport> {
    if extractor.window() != map.window || extractor.name() != map.extractor {
        return Err(Error::Config(format!(
            "map was taught with {} (window {}), repeat uses {} (window {})",
            map.extractor,
            map.window,
            extractor.name(),
            extractor.window()
        )));
    }
    let records = frames
        .par_iter()
        .enumerate()
        .map(|(i, frame)| {
            let live_pose = require_pose(frame, i)?;
            let vertex = map
                .nearest_vertex(&live_pose)
                .ok_or_else(|| Error::Config("map has no vertices".into()))?;
            let r = localize(frame, vertex, extractor, &map.intrinsics, params)?;
            Ok(FrameRecord {
                frame: i,
                vertex: r.vertex,
                inliers: r.inliers,
                failure: r.failure,
                pose_error: if r.failure {
                    f64::NAN
                } else {
                    planar_error(&r.pose, &vertex.pose, &live_pose)
                },
                seconds: r.seconds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport::from_frames(condition, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::AnalyticExtractor;
    use crate::geometry::project;
    use crate::vtr::{render_sequence, repeat_path, teach_path, MatchMode, PathConfig, Sequence};

    const EXTRACTOR: AnalyticExtractor = AnalyticExtractor { window: 8 };

    fn path(frames: usize) -> PathConfig {
        PathConfig {
            seed: 4,
            frames,
            ..PathConfig::default()
        }
    }

    fn taught(cfg: &PathConfig, condition: &str) -> Sequence {
        render_sequence(&cfg.scene(), &cfg.camera(), &teach_path(cfg).unwrap(), condition, 1).unwrap()
    }

    fn sparse() -> LocalizeParams {
        LocalizeParams {
            mode: MatchMode::Sparse,
            ..LocalizeParams::default()
        }
    }

    #[test]
    fn one_vertex_per_frame() {
        let cfg = path(50);
        let seq = taught(&cfg, "noon");
        let map = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        assert_eq!(map.vertices.len(), 50);
        assert!(map.vertices.iter().enumerate().all(|(i, v)| v.id == i));
    }

    #[test]
    fn teaching_is_deterministic() {
        let cfg = path(4);
        let seq = taught(&cfg, "dusk");
        let a = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        let b = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lifts_reproject_onto_keypoints() {
        let cfg = path(5);
        let seq = taught(&cfg, "noon");
        let map = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        for v in &map.vertices {
            assert!(v.points.iter().all(|p| p.iter().all(|c| c.is_finite())));
            for (p, q) in v.points.iter().zip(&v.keypoints.coords) {
                let y = project(p, &seq.intrinsics).unwrap();
                assert!((y.u_l - q[0]).hypot(y.v_l - q[1]) < 0.5);
            }
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let k = PathConfig::default().camera().intrinsics;
        assert!(matches!(
            teach(&[], &EXTRACTOR, &k, &DisparitySource::GroundTruth),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn featureless_frame_fails_to_teach() {
        let cfg = path(2);
        let mut seq = taught(&cfg, "noon");
        seq.frames[1].disparity = Some(crate::image::Image::filled(cfg.width, cfg.height, 0.0));
        let err = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth);
        assert!(matches!(err, Err(Error::TeachFailure { frame: 1, .. })));
    }

    #[test]
    fn self_localization_recovers_identity_with_every_keypoint() {
        let cfg = path(6);
        let seq = taught(&cfg, "noon");
        let map = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        for (frame, v) in seq.frames.iter().zip(&map.vertices) {
            let r = localize(frame, v, &EXTRACTOR, &seq.intrinsics, &sparse()).unwrap();
            assert_eq!(r.inliers, v.keypoints.len());
            assert!(!r.failure);
            assert!(r.pose.max_abs_diff(&SE3Pose::identity()) < 1e-6);
        }
    }

    #[test]
    fn sharp_dense_self_localization_keeps_every_keypoint() {
        let sharp = LocalizeParams {
            tau: 1e4,
            ..LocalizeParams::default()
        };
        let cfg = path(3);
        let seq = taught(&cfg, "noon");
        let map = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        for (frame, v) in seq.frames.iter().zip(&map.vertices) {
            let r = localize(frame, v, &EXTRACTOR, &seq.intrinsics, &sharp).unwrap();
            assert_eq!(r.inliers, v.keypoints.len());
            assert!(r.pose.max_abs_diff(&SE3Pose::identity()) < 0.05);
        }
    }

    #[test]
    fn distant_vertex_fails() {
        let cfg = path(50);
        let seq = taught(&cfg, "noon");
        let map = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        for mode in [MatchMode::Dense, MatchMode::Sparse] {
            let params = LocalizeParams {
                mode,
                ..LocalizeParams::default()
            };
            let r = localize(&seq.frames[0], &map.vertices[49], &EXTRACTOR, &seq.intrinsics, &params).unwrap();
            assert!(r.failure, "{mode:?}: {} inliers", r.inliers);
        }
    }

    #[test]
    fn failure_flag_follows_the_threshold() {
        let cfg = path(3);
        let seq = taught(&cfg, "noon");
        let map = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        let n = map.vertices[1].keypoints.len();
        for (threshold, failure) in [(n, false), (n + 1, true)] {
            let params = LocalizeParams {
                failure_threshold: threshold,
                ..sparse()
            };
            let r = localize(&seq.frames[1], &map.vertices[1], &EXTRACTOR, &seq.intrinsics, &params).unwrap();
            assert_eq!(r.failure, failure);
        }
    }

    #[test]
    fn mismatched_descriptor_width_is_an_error() {
        let cfg = path(1);
        let seq = taught(&cfg, "noon");
        let mut map = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        map.vertices[0].keypoints.dim += 1;
        let r = localize(&seq.frames[0], &map.vertices[0], &EXTRACTOR, &seq.intrinsics, &sparse());
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn unperturbed_repeat_is_exact() {
        let cfg = path(10);
        let seq = taught(&cfg, "noon");
        let map = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        let r = repeat("noon", &seq.frames, &map, &EXTRACTOR, &sparse()).unwrap();
        assert_eq!(r.failure_fraction, 0.0);
        assert!(r.planar_rmse < 1e-3);
        assert!(r.frames.iter().all(|f| f.vertex == f.frame));
    }

    #[test]
    fn concurrent_repeats_share_the_map() {
        let cfg = path(8);
        let seq = taught(&cfg, "noon");
        let map = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        let poses = repeat_path(&cfg).unwrap();
        let live = render_sequence(&cfg.scene(), &cfg.camera(), &poses, "overcast", 2).unwrap();
        let params = LocalizeParams::default();
        let (a, b) = rayon::join(
            || repeat("overcast", &live.frames, &map, &EXTRACTOR, &params).unwrap(),
            || repeat("overcast", &live.frames, &map, &EXTRACTOR, &params).unwrap(),
        );
        let strip = |r: &RunReport| r.frames.iter().map(|f| (f.vertex, f.inliers, f.failure, f.pose_error.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn repeat_rejects_a_different_extractor() {
        let cfg = path(2);
        let seq = taught(&cfg, "noon");
        let map = teach(&seq.frames, &EXTRACTOR, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        let other = AnalyticExtractor { window: 4 };
        assert!(repeat("noon", &seq.frames, &map, &other, &sparse()).is_err());
    }

    #[test]
    fn aggregates_follow_the_records() {
        let rec = |frame, inliers, failure, pose_error| FrameRecord {
            frame,
            vertex: frame,
            inliers,
            failure,
            pose_error,
            seconds: 0.0,
        };
        let r = RunReport::from_frames("x", vec![rec(0, 30, false, 0.3), rec(1, 10, true, f64::NAN), rec(2, 20, false, 0.4)]);
        assert_eq!(r.mean_inliers, 20.0);
        assert_eq!(r.failures, 1);
        assert!((r.failure_fraction - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.planar_rmse - (0.125f64).sqrt()).abs() < 1e-15);
    }
}
