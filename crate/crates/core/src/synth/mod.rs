//! Deterministic synthetic stereo data: a textured block world, a
//! ray-cast stereo renderer with exact disparity, a lighting model with a
//! named day schedule, paired-sample datasets and a block-matching
//! disparity fallback.

mod block_match;
mod dataset;
mod photometric;
mod render;
mod scene;

pub use block_match::{block_match_disparity, DisparityEstimate, TEXTURE_FLOOR};
pub use dataset::{
    make_dataset, make_samples, read_dataset, split_scene, write_dataset, Dataset, DatasetConfig, MotionBounds, Sample,
};
pub use photometric::{apply_photometric, condition, condition_names, PhotometricParams, SCHEDULE};
pub use render::{
    nadir_pose, pixel_ray, render_geometry, render_stereo, GeometryView, StereoCamera, StereoFrame, CAMERA_HEIGHT,
};
pub use scene::{generate_scene, Block, Hit, Scene, SceneParams};
