use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PlanarPose, SE3Pose};
use crate::image::Image;

use super::photometric::{condition, condition_names};
use super::render::{nadir_pose, render_stereo, StereoCamera, StereoFrame, CAMERA_HEIGHT};
use super::scene::{generate_scene, Scene, SceneParams};

/// Bounds on the sampled relative motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionBounds {
    pub alpha: f64,
    pub beta: f64,
    /// Radians.
    pub gamma: f64,
}

impl Default for MotionBounds {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.2,
            gamma: 10f64.to_radians(),
        }
    }
}

impl MotionBounds {
    pub fn contains(&self, p: &PlanarPose) -> bool {
        p.alpha.abs() <= self.alpha && p.beta.abs() <= self.beta && p.gamma.abs() <= self.gamma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub width: usize,
    pub height: usize,
    pub scene: SceneParams,
    pub bounds: MotionBounds,
    /// Lighting conditions drawn independently for each image of a pair.
    pub conditions: Vec<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_count: 200,
            val_count: 50,
            width: 32,
            height: 24,
            scene: SceneParams::default(),
            bounds: MotionBounds::default(),
            conditions: condition_names().map(String::from).collect(),
        }
    }
}

/// Source and target frames related by `pose`, which maps source camera
/// coordinates to target camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub source: StereoFrame,
    pub target: StereoFrame,
    pub pose: PlanarPose,
    pub conditions: [String; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Scene used for one split; splits never share a scene.
pub fn split_scene(cfg: &DatasetConfig, split: &str) -> Scene {
    generate_scene(crate::seed::derive(cfg.seed, split, 0), &cfg.scene)
}

/// Draws `count` pairs of nadir views related by bounded planar motion.
pub fn make_samples(scene: &Scene, camera: &StereoCamera, cfg: &DatasetConfig, count: usize, seed: u64) -> Result<Vec<Sample>> {
    if cfg.conditions.is_empty() {
        return Err(Error::Config("photometric schedule is empty".into()));
    }
    let lighting = cfg
        .conditions
        .iter()
        .map(|c| condition(c).map(|p| (c.clone(), p)))
        .collect::<Result<Vec<_>>>()?;
    let margin = (scene.params.extent - 2.0).max(0.5);
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::seed::rng(crate::seed::derive(seed, "sample", i as u64));
            let b = cfg.bounds;
            let source_pose = nadir_pose(
                rng.random_range(-margin..margin),
                rng.random_range(-margin..margin),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                CAMERA_HEIGHT,
            );
            let rel = PlanarPose::new(
                rng.random_range(-b.alpha..=b.alpha),
                rng.random_range(-b.beta..=b.beta),
                rng.random_range(-b.gamma..=b.gamma),
            );
            let target_pose = source_pose.compose(&rel.to_se3().inverse());
            let (cs, ps) = &lighting[rng.random_range(0..lighting.len())];
            let (ct, pt) = &lighting[rng.random_range(0..lighting.len())];
            let noise = crate::seed::derive(seed, "noise", i as u64);
            Ok(Sample {
                source: render_stereo(scene, camera, &source_pose, ps, crate::seed::derive(noise, "source", 0))?,
                target: render_stereo(scene, camera, &target_pose, pt, crate::seed::derive(noise, "target", 0))?,
                pose: rel,
                conditions: [cs.clone(), ct.clone()],
            })
        })
        .collect()
}

pub fn make_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.train_count == 0 {
        return Err(Error::Config("training split must contain at least one sample".into()));
    }
    let camera = StereoCamera::centred(cfg.width, cfg.height);
    let train = make_samples(&split_scene(cfg, "train"), &camera, cfg, cfg.train_count, crate::seed::derive(cfg.seed, "train", 1))?;
    let val = make_samples(&split_scene(cfg, "val"), &camera, cfg, cfg.val_count, crate::seed::derive(cfg.seed, "val", 1))?;
    Ok(Dataset {
        intrinsics: camera.intrinsics,
        width: cfg.width,
        height: cfg.height,
        train,
        val,
    })
}

const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "vtr-dataset-1";

#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    file: String,
    split: String,
    alpha: f64,
    beta: f64,
    gamma: f64,
    conditions: [String; 2],
    source_pose: Vec<f64>,
    target_pose: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    /// Each blob holds six `width * height` little-endian f32 planes:
    /// source left, source right, source disparity, target left, target
    /// right, target disparity.
    layout: Vec<String>,
    width: usize,
    height: usize,
    intrinsics: CameraIntrinsics,
    samples: Vec<SampleEntry>,
}

const LAYOUT: [&str; 6] = [
    "source_left",
    "source_right",
    "source_disparity",
    "target_left",
    "target_right",
    "target_disparity",
];

fn planes(s: &Sample) -> Result<[&Image; 6]> {
    let missing = || Error::Shape("dataset frames need ground-truth disparity".into());
    Ok([
        &s.source.left,
        &s.source.right,
        s.source.disparity.as_ref().ok_or_else(missing)?,
        &s.target.left,
        &s.target.right,
        s.target.disparity.as_ref().ok_or_else(missing)?,
    ])
}

fn pose_of(frame: &StereoFrame) -> Vec<f64> {
    frame.pose.map(|p| p.to_array().to_vec()).unwrap_or_default()
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (split, samples) in [("train", &data.train), ("val", &data.val)] {
        for (i, s) in samples.iter().enumerate() {
            let file = format!("{split}_{i:05}.f32");
            let mut bytes = Vec::with_capacity(6 * 4 * data.width * data.height);
            for img in planes(s)? {
                if (img.width, img.height) != (data.width, data.height) {
                    return Err(Error::Shape(format!("{file}: frame size differs from dataset size")));
                }
                bytes.extend(img.data.iter().flat_map(|v| v.to_le_bytes()));
            }
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(SampleEntry {
                file,
                split: split.into(),
                alpha: s.pose.alpha,
                beta: s.pose.beta,
                gamma: s.pose.gamma,
                conditions: s.conditions.clone(),
                source_pose: pose_of(&s.source),
                target_pose: pose_of(&s.target),
            });
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        layout: LAYOUT.iter().map(|s| s.to_string()).collect(),
        width: data.width,
        height: data.height,
        intrinsics: data.intrinsics,
        samples: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::data(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn parse_pose(path: &Path, v: &[f64]) -> Result<Option<SE3Pose>> {
    match v.len() {
        0 => Ok(None),
        12 => Ok(Some(SE3Pose::from_array(v))),
        n => Err(Error::data(path, format!("pose record with {n} values"))),
    }
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::data(&path, format!("unknown format {}", m.format)));
    }
    let plane = m.width * m.height;
    let mut data = Dataset {
        intrinsics: m.intrinsics,
        width: m.width,
        height: m.height,
        train: Vec::new(),
        val: Vec::new(),
    };
    for e in m.samples {
        let blob = dir.join(&e.file);
        let bytes = fs::read(&blob).map_err(|err| Error::io(&blob, err))?;
        if bytes.len() != 6 * 4 * plane {
            return Err(Error::data(&blob, format!("{} bytes, expected {}", bytes.len(), 24 * plane)));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let img = |k: usize| Image::new(m.width, m.height, values[k * plane..(k + 1) * plane].to_vec());
        let sample = Sample {
            source: StereoFrame {
                left: img(0)?,
                right: img(1)?,
                disparity: Some(img(2)?),
                pose: parse_pose(&path, &e.source_pose)?,
            },
            target: StereoFrame {
                left: img(3)?,
                right: img(4)?,
                disparity: Some(img(5)?),
                pose: parse_pose(&path, &e.target_pose)?,
            },
            pose: PlanarPose {
                alpha: e.alpha,
                beta: e.beta,
                gamma: e.gamma,
            },
            conditions: e.conditions,
        };
        match e.split.as_str() {
            "train" => data.train.push(sample),
            "val" => data.val.push(sample),
            other => return Err(Error::data(&path, format!("unknown split {other:?}"))),
        }
    }
    Ok(data)
}
