use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, SE3Pose};
use crate::image::Image;
use crate::synth::{condition, generate_scene, nadir_pose, render_stereo, Scene, SceneParams, StereoCamera, StereoFrame, CAMERA_HEIGHT};

/// Layout of a taught path and its perturbed repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub seed: u64,
    pub frames: usize,
    /// Distance between consecutive taught frames.
    pub spacing: f64,
    /// Bound on the repeat's sideways offset from the taught path.
    pub lateral_offset: f64,
    /// Bound on the repeat's heading offset, radians.
    pub heading_offset: f64,
    pub width: usize,
    pub height: usize,
    pub scene: SceneParams,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 50,
            spacing: 0.1,
            lateral_offset: 0.1,
            heading_offset: 3f64.to_radians(),
            width: 64,
            height: 48,
            scene: SceneParams::default(),
        }
    }
}

impl PathConfig {
    pub fn camera(&self) -> StereoCamera {
        StereoCamera::centred(self.width, self.height)
    }

    pub fn scene(&self) -> Scene {
        generate_scene(crate::seed::derive(self.seed, "path-scene", 0), &self.scene)
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || !(self.spacing > 0.0) || self.lateral_offset < 0.0 || self.heading_offset < 0.0 {
            return Err(Error::Config(format!("invalid path configuration {self:?}")));
        }
        Ok(())
    }
}

/// Gently curving taught path centred on the scene origin.
pub fn teach_path(cfg: &PathConfig) -> Result<Vec<SE3Pose>> {
    cfg.validate()?;
    let heading = |i: usize| 0.4 * (i as f64 / 8.0).sin();
    let mut xy = [-0.5 * cfg.spacing * (cfg.frames - 1) as f64, 0.0];
    let mut poses = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let h = heading(i);
        poses.push(nadir_pose(xy[0], xy[1], h, CAMERA_HEIGHT));
        xy[0] += cfg.spacing * h.cos();
        xy[1] += cfg.spacing * h.sin();
    }
    Ok(poses)
}

/// Taught path with bounded per-frame offsets along, across and about the heading.
pub fn repeat_path(cfg: &PathConfig) -> Result<Vec<SE3Pose>> {
    let taught = teach_path(cfg)?;
    Ok(taught
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut rng = crate::seed::rng(crate::seed::derive(cfg.seed, "repeat-offset", i as u64));
            let along = rng.random_range(-0.5..=0.5) * cfg.spacing;
            let across = rng.random_range(-1.0..=1.0) * cfg.lateral_offset;
            let turn = rng.random_range(-1.0..=1.0) * cfg.heading_offset;
            let heading = pose.rotation[(1, 0)].atan2(pose.rotation[(0, 0)]);
            let (s, c) = heading.sin_cos();
            let t = pose.translation;
            nadir_pose(t.x + along * c - across * s, t.y + along * s + across * c, heading + turn, CAMERA_HEIGHT)
        })
        .collect())
}

/// Rendered frames under one lighting condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub condition: String,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<StereoFrame>,
}

pub fn render_sequence(
    scene: &Scene,
    camera: &StereoCamera,
    poses: &[SE3Pose],
    condition_name: &str,
    seed: u64,
) -> Result<Sequence> {
    let photo = condition(condition_name)?;
    let frames = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| render_stereo(scene, camera, pose, &photo, crate::seed::derive(seed, condition_name, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence {
        condition: condition_name.into(),
        intrinsics: camera.intrinsics,
        frames,
    })
}

const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "vtr-sequence-1";

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    file: String,
    pose: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    /// Each blob holds three `width * height` little-endian f32 planes:
    /// left, right, disparity.
    layout: Vec<String>,
    condition: String,
    width: usize,
    height: usize,
    intrinsics: CameraIntrinsics,
    frames: Vec<FrameEntry>,
}

pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    let first = seq
        .frames
        .first()
        .ok_or_else(|| Error::Config("cannot write an empty sequence".into()))?;
    let (w, h) = (first.left.width, first.left.height);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, f) in seq.frames.iter().enumerate() {
        let disparity = f
            .disparity
            .as_ref()
            .ok_or_else(|| Error::Shape("sequence frames need ground-truth disparity".into()))?;
        let file = format!("frame_{i:05}.f32");
        let mut bytes = Vec::with_capacity(3 * 4 * w * h);
        for img in [&f.left, &f.right, disparity] {
            if (img.width, img.height) != (w, h) {
                return Err(Error::Shape(format!("{file}: frame size differs from sequence size")));
            }
            bytes.extend(img.data.iter().flat_map(|v| v.to_le_bytes()));
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(FrameEntry {
            file,
            pose: f.pose.map(|p| p.to_array().to_vec()).unwrap_or_default(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        layout: ["left", "right", "disparity"].iter().map(|s| s.to_string()).collect(),
        condition: seq.condition.clone(),
        width: w,
        height: h,
        intrinsics: seq.intrinsics,
        frames: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::data(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::data(&path, format!("unknown format {}", m.format)));
    }
    let plane = m.width * m.height;
    let frames = m
        .frames
        .iter()
        .map(|e| {
            let blob = dir.join(&e.file);
            let bytes = fs::read(&blob).map_err(|err| Error::io(&blob, err))?;
            if bytes.len() != 3 * 4 * plane {
                return Err(Error::data(&blob, format!("{} bytes, expected {}", bytes.len(), 12 * plane)));
            }
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let img = |k: usize| Image::new(m.width, m.height, values[k * plane..(k + 1) * plane].to_vec());
            let pose = match e.pose.len() {
                0 => None,
                12 => Some(SE3Pose::from_array(&e.pose)),
                n => return Err(Error::data(&path, format!("pose record with {n} values"))),
            };
            Ok(StereoFrame {
                left: img(0)?,
                right: img(1)?,
                disparity: Some(img(2)?),
                pose,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence {
        condition: m.condition,
        intrinsics: m.intrinsics,
        frames,
    })
}
