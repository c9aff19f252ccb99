use nalgebra::Vector3;
use rayon::prelude::*;

use crate::diff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::estimator::gt_outlier_gate;
use crate::features::ExtractorWeights;
use crate::geometry::{CameraIntrinsics, PlanarPose, SE3Pose};
use crate::image::Image;
use crate::synth::{Sample, StereoFrame};

use super::losses::LossConfig;

/// Fewer gated matches than this and a sample is skipped.
pub const MIN_GATED_MATCHES: usize = 4;

/// Loss terms of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOutcome {
    pub loss: f64,
    pub pose_loss: f64,
    pub keypoint_loss: f64,
    pub estimate: PlanarPose,
    pub gated: usize,
}

impl SampleOutcome {
    /// Planar translation error of the estimate.
    pub fn translation_error(&self, gt: &PlanarPose) -> f64 {
        (self.estimate.alpha - gt.alpha).hypot(self.estimate.beta - gt.beta)
    }
}

/// Batch mean of the per-sample objective over samples that were not skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub loss: f64,
    pub pose_loss: f64,
    pub keypoint_loss: f64,
    pub pose_error: f64,
    pub used: usize,
    pub skipped: usize,
    /// Gradient of `loss` in the flattened parameter order, when requested.
    pub grads: Option<Vec<f64>>,
}

fn disparity_of(frame: &StereoFrame) -> Result<&Image> {
    frame
        .disparity
        .as_ref()
        .ok_or_else(|| Error::Shape("training frames need ground-truth disparity".into()))
}

fn to_points(v: &[f64]) -> Vec<Vector3<f64>> {
    v.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

/// Window soft-argmax of a `[1, H, W]` logit node, giving `[N, 2]` points.
pub fn keypoints_on_tape(tape: &mut Tape, logits: NodeId, window: usize) -> NodeId {
    let shape = tape.shape(logits).to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let tiles = tape.window_unfold(logits, window);
    let probs = tape.softmax_rows(tiles, 1.0);
    let local: Vec<f64> = (0..window * window)
        .flat_map(|k| [(k % window) as f64, (k / window) as f64])
        .collect();
    let local = tape.constant(local, &[window * window, 2]);
    let within = tape.matmul(probs, local);
    let (nx, ny) = (w / window, h / window);
    let offsets: Vec<f64> = (0..nx * ny)
        .flat_map(|t| [((t % nx) * window) as f64, ((t / nx) * window) as f64])
        .collect();
    let offsets = tape.constant(offsets, &[nx * ny, 2]);
    tape.add(within, offsets)
}

/// Soft match of `[N, D]` descriptors against a `[D, H, W]` map; returns the
/// `[N, 2]` expected target points.
pub fn soft_match_on_tape(tape: &mut Tape, descriptors: NodeId, target: NodeId, tau: f64, stride: usize) -> NodeId {
    let candidates = if stride > 1 {
        tape.subsample(target, stride)
    } else {
        target
    };
    let s = tape.shape(candidates).to_vec();
    let (h, w) = (s[1], s[2]);
    let z = tape.zncc_matrix(descriptors, candidates);
    let probs = tape.softmax_rows(z, tau);
    let coords: Vec<f64> = (0..h * w)
        .flat_map(|j| [((j % w) * stride) as f64, ((j / w) * stride) as f64])
        .collect();
    let coords = tape.constant(coords, &[h * w, 2]);
    tape.matmul(probs, coords)
}

struct SampleGraph {
    total: NodeId,
    pose_loss: NodeId,
    keypoint_loss: NodeId,
    pose: NodeId,
    gated: usize,
}

/// Records the full objective of one sample. `Ok(None)` marks a skipped
/// sample: too few gated matches or a degenerate alignment.
fn build_graph(
    tape: &mut Tape,
    weights: &ExtractorWeights,
    params: &[NodeId],
    sample: &Sample,
    k: &CameraIntrinsics,
    cfg: &LossConfig,
) -> Result<Option<SampleGraph>> {
    let src = weights.forward_on_tape(tape, params, &sample.source.left)?;
    let tgt = weights.forward_on_tape(tape, params, &sample.target.left)?;
    let (w, h) = (sample.source.left.width, sample.source.left.height);

    let q_s = keypoints_on_tape(tape, src.logits, weights.config.window);
    let d_s = tape.bilinear_sample(src.descriptors, q_s)?;
    let s_s = tape.bilinear_sample(src.scores, q_s)?;
    let disp_s = tape.constant(disparity_of(&sample.source)?.to_f64(), &[1, h, w]);
    let disp_s = tape.bilinear_sample(disp_s, q_s)?;
    let p_s = tape.backproject(q_s, disp_s, k)?;

    let q_t = soft_match_on_tape(tape, d_s, tgt.descriptors, cfg.tau, cfg.stride);
    let d_t = tape.bilinear_sample(tgt.descriptors, q_t)?;
    let s_t = tape.bilinear_sample(tgt.scores, q_t)?;
    let disp_t = tape.constant(disparity_of(&sample.target)?.to_f64(), &[1, h, w]);
    let disp_t = tape.bilinear_sample(disp_t, q_t)?;
    let p_t = tape.backproject(q_t, disp_t, k)?;

    let n = tape.shape(q_s)[0];
    let similarity = tape.zncc_rows(d_s, d_t);
    let agreement = tape.affine(similarity, 0.5, 0.5);
    let s_s = tape.reshape(s_s, &[n]);
    let s_t = tape.reshape(s_t, &[n]);
    let scores = tape.mul(s_s, s_t);
    let weights_node = tape.mul(agreement, scores);

    let gt = sample.pose.to_se3();
    let keep = gt_outlier_gate(&to_points(tape.value(p_s)), &to_points(tape.value(p_t)), &gt, cfg.gate_threshold);
    if keep.len() < MIN_GATED_MATCHES {
        return Ok(None);
    }
    let p_s = tape.gather_rows(p_s, &keep);
    let p_t = tape.gather_rows(p_t, &keep);
    let w_g = tape.gather_rows(weights_node, &keep);

    let keypoint_loss = tape.planar_keypoint_loss(p_s, p_t, &gt);
    let pose = match tape.rigid_align(p_s, p_t, w_g) {
        Ok(pose) => pose,
        Err(Error::DegenerateGeometry(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let pose_loss = tape.planar_pose_loss(pose, &sample.pose, cfg.lambda);
    let weighted = tape.affine(keypoint_loss, cfg.keypoint_weight, 0.0);
    let total = tape.add(weighted, pose_loss);
    Ok(Some(SampleGraph {
        total,
        pose_loss,
        keypoint_loss,
        pose,
        gated: keep.len(),
    }))
}

/// Objective of one sample and, optionally, its flattened weight gradient.
pub fn sample_loss(
    weights: &ExtractorWeights,
    sample: &Sample,
    k: &CameraIntrinsics,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<Option<(SampleOutcome, Option<Vec<f64>>)>> {
    let mut tape = Tape::new();
    let params = weights.register(&mut tape, with_grad);
    let Some(g) = build_graph(&mut tape, weights, &params, sample, k, cfg)? else {
        return Ok(None);
    };
    let outcome = SampleOutcome {
        loss: tape.scalar(g.total),
        pose_loss: tape.scalar(g.pose_loss),
        keypoint_loss: tape.scalar(g.keypoint_loss),
        estimate: SE3Pose::from_array(tape.value(g.pose)).to_planar(),
        gated: g.gated,
    };
    let grads = if with_grad {
        let map = tape.backward(g.total)?;
        let mut flat = Vec::with_capacity(weights.param_count());
        for p in &params {
            flat.extend_from_slice(map.get(*p).expect("every parameter has a gradient entry"));
        }
        Some(flat)
    } else {
        None
    };
    Ok(Some((outcome, grads)))
}

/// Mean objective over a batch. Samples are evaluated in parallel and
/// reduced in index order, so results do not depend on scheduling.
pub fn total_loss(
    weights: &ExtractorWeights,
    samples: &[&Sample],
    k: &CameraIntrinsics,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<BatchOutcome> {
    cfg.validate()?;
    let results = samples
        .par_iter()
        .map(|s| sample_loss(weights, s, k, cfg, with_grad))
        .collect::<Result<Vec<_>>>()?;
    let mut out = BatchOutcome {
        loss: 0.0,
        pose_loss: 0.0,
        keypoint_loss: 0.0,
        pose_error: 0.0,
        used: 0,
        skipped: 0,
        grads: with_grad.then(|| vec![0.0; weights.param_count()]),
    };
    for (sample, r) in samples.iter().zip(results) {
        let Some((o, g)) = r else {
            out.skipped += 1;
            continue;
        };
        out.used += 1;
        out.loss += o.loss;
        out.pose_loss += o.pose_loss;
        out.keypoint_loss += o.keypoint_loss;
        out.pose_error += o.translation_error(&sample.pose);
        if let (Some(acc), Some(g)) = (out.grads.as_mut(), g) {
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    if out.used > 0 {
        let n = out.used as f64;
        out.loss /= n;
        out.pose_loss /= n;
        out.keypoint_loss /= n;
        out.pose_error /= n;
        if let Some(acc) = out.grads.as_mut() {
            acc.iter_mut().for_each(|a| *a /= n);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::NetworkConfig;
    use crate::synth::{make_dataset, DatasetConfig};

    fn data() -> crate::synth::Dataset {
        make_dataset(&DatasetConfig {
            seed: 3,
            train_count: 3,
            val_count: 1,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_keypoint_weight_leaves_pose_loss() {
        let d = data();
        let net = ExtractorWeights::init(NetworkConfig::default()).unwrap();
        let cfg = LossConfig {
            keypoint_weight: 0.0,
            ..LossConfig::default()
        };
        let (o, _) = sample_loss(&net, &d.train[0], &d.intrinsics, &cfg, false).unwrap().unwrap();
        assert_eq!(o.loss, o.pose_loss);
    }

    #[test]
    fn batch_is_deterministic() {
        let d = data();
        let net = ExtractorWeights::init(NetworkConfig::default()).unwrap();
        let refs: Vec<&Sample> = d.train.iter().collect();
        let a = total_loss(&net, &refs, &d.intrinsics, &LossConfig::default(), true).unwrap();
        let b = total_loss(&net, &refs, &d.intrinsics, &LossConfig::default(), true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.used + a.skipped, 3);
    }

    #[test]
    fn tape_soft_match_agrees_with_direct_matching() {
        let d = data();
        let net = ExtractorWeights::init(NetworkConfig::default()).unwrap();
        let s = &d.train[0];
        let fs = net.forward(&s.source.left).unwrap();
        let ft = net.forward(&s.target.left).unwrap();
        let kp = fs.keypoints(8).unwrap();
        let direct = crate::matching::match_all(&kp, &ft, 50.0, 1).unwrap();

        let mut tape = Tape::new();
        let params = net.register(&mut tape, false);
        let src = net.forward_on_tape(&mut tape, &params, &s.source.left).unwrap();
        let tgt = net.forward_on_tape(&mut tape, &params, &s.target.left).unwrap();
        let q_s = keypoints_on_tape(&mut tape, src.logits, 8);
        let d_s = tape.bilinear_sample(src.descriptors, q_s).unwrap();
        let q_t = soft_match_on_tape(&mut tape, d_s, tgt.descriptors, 50.0, 1);
        for (i, q) in kp.coords.iter().enumerate() {
            assert!((tape.value(q_s)[2 * i] - q[0]).abs() < 1e-10);
            assert!((tape.value(q_s)[2 * i + 1] - q[1]).abs() < 1e-10);
            let p = direct.target_points[i];
            assert!((tape.value(q_t)[2 * i] - p[0]).abs() < 1e-9);
            assert!((tape.value(q_t)[2 * i + 1] - p[1]).abs() < 1e-9);
        }
    }
}
