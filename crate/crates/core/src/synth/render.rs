use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, SE3Pose};
use crate::image::Image;

use super::photometric::{apply_photometric, PhotometricParams};
use super::scene::Scene;

/// Rectified stereo pair with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoFrame {
    pub left: Image,
    pub right: Image,
    /// Left-image disparity in pixels.
    pub disparity: Option<Image>,
    /// Camera-to-world pose of the left camera.
    pub pose: Option<SE3Pose>,
}

/// Stereo camera with its image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoCamera {
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
}

/// Height of the camera above the ground plane.
pub const CAMERA_HEIGHT: f64 = 2.0;
const FOCAL: f64 = 40.0;
const BASELINE: f64 = 0.2;

impl StereoCamera {
    /// Centred camera with the desk focal length and baseline.
    pub fn centred(width: usize, height: usize) -> Self {
        let intrinsics = CameraIntrinsics {
            fu: FOCAL,
            fv: FOCAL,
            cu: 0.5 * (width as f64 - 1.0),
            cv: 0.5 * (height as f64 - 1.0),
            b: BASELINE,
        };
        Self {
            intrinsics,
            width,
            height,
        }
    }

    /// The 64x48 harness camera.
    pub fn desk() -> Self {
        Self::centred(64, 48)
    }
}

/// Downward-looking camera at `(x, y, height)`. The camera x axis points
/// along `heading`; its z axis points at the ground.
pub fn nadir_pose(x: f64, y: f64, heading: f64, height: f64) -> SE3Pose {
    let (s, c) = heading.sin_cos();
    let rotation = Matrix3::new(c, s, 0.0, s, -c, 0.0, 0.0, 0.0, -1.0);
    SE3Pose::new(rotation, Vector3::new(x, y, height))
}

/// World-frame ray through the continuous pixel `(u, v)` of the left
/// (`right = false`) or right camera.
pub fn pixel_ray(pose: &SE3Pose, k: &CameraIntrinsics, u: f64, v: f64, right: bool) -> (Vector3<f64>, Vector3<f64>) {
    let offset = if right { k.b } else { 0.0 };
    let origin = pose.apply(&Vector3::new(offset, 0.0, 0.0));
    let dir = pose.rotation * Vector3::new((u - k.cu) / k.fu, (v - k.cv) / k.fv, 1.0);
    (origin, dir)
}

/// Reflectance images of both cameras and the left ground-truth disparity.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryView {
    pub left: Image,
    pub right: Image,
    pub disparity: Image,
}

fn check_viewpoint(scene: &Scene, pose: &SE3Pose) -> Result<()> {
    let c = pose.translation;
    let down = pose.rotation * Vector3::new(0.0, 0.0, 1.0);
    if c.z <= scene.height_at(c.x, c.y) {
        return Err(Error::InvalidViewpoint(format!(
            "camera at ({:.3}, {:.3}, {:.3}) is not above the surface",
            c.x, c.y, c.z
        )));
    }
    if down.z >= 0.0 {
        return Err(Error::InvalidViewpoint("camera does not look at the ground".into()));
    }
    Ok(())
}

pub fn render_geometry(scene: &Scene, camera: &StereoCamera, pose: &SE3Pose) -> Result<GeometryView> {
    check_viewpoint(scene, pose)?;
    let (w, h) = (camera.width, camera.height);
    let k = camera.intrinsics;
    let to_camera = pose.inverse();
    let pixels: Vec<(f32, f32, f32)> = (0..w * h)
        .into_par_iter()
        .map(|j| {
            let (u, v) = ((j % w) as f64, (j / w) as f64);
            let (origin, dir) = pixel_ray(pose, &k, u, v, false);
            let (left, disparity) = match scene.intersect(&origin, &dir) {
                Some(hit) => {
                    let depth = to_camera.apply(&hit.point).z;
                    (scene.albedo(&hit.point), k.fu * k.b / depth)
                }
                None => (0.0, 0.0),
            };
            let (ro, rd) = pixel_ray(pose, &k, u, v, true);
            (left as f32, scene.radiance(&ro, &rd) as f32, disparity as f32)
        })
        .collect();
    Ok(GeometryView {
        left: Image::new(w, h, pixels.iter().map(|p| p.0).collect())?,
        right: Image::new(w, h, pixels.iter().map(|p| p.1).collect())?,
        disparity: Image::new(w, h, pixels.iter().map(|p| p.2).collect())?,
    })
}

/// Renders a stereo frame and applies the lighting model to both images
/// with independent noise streams derived from `noise_seed`.
pub fn render_stereo(
    scene: &Scene,
    camera: &StereoCamera,
    pose: &SE3Pose,
    photo: &PhotometricParams,
    noise_seed: u64,
) -> Result<StereoFrame> {
    let view = render_geometry(scene, camera, pose)?;
    Ok(StereoFrame {
        left: apply_photometric(&view.left, photo, crate::seed::derive(noise_seed, "left", 0))?,
        right: apply_photometric(&view.right, photo, crate::seed::derive(noise_seed, "right", 0))?,
        disparity: Some(view.disparity),
        pose: Some(*pose),
    })
}
