//! Dense descriptors, scores and sub-pixel keypoints.
//!
//! Two extractors produce a [`DenseFeatureMap`]: the learnable
//! encoder-decoder in [`network`] and the hand-crafted [`AnalyticExtractor`].
//! Keypoints are the score-independent soft-argmax of the logit map inside
//! each `window x window` tile.

mod analytic;
mod checkpoint;
mod network;

pub use analytic::{analytic_features, AnalyticExtractor};
pub use checkpoint::{load_checkpoint, save_checkpoint, ACTIVATION};
pub use network::{ExtractorWeights, NetworkConfig, TapeFeatures, Tensor};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

/// Per-pixel outputs of an extractor. Descriptors are channel-major `[D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub descriptors: Vec<f64>,
    pub scores: Vec<f64>,
    pub logits: Vec<f64>,
}

impl DenseFeatureMap {
    pub fn new(
        width: usize,
        height: usize,
        dim: usize,
        descriptors: Vec<f64>,
        scores: Vec<f64>,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let plane = width * height;
        if descriptors.len() != dim * plane || scores.len() != plane || logits.len() != plane {
            return Err(Error::Shape(format!(
                "feature map buffers ({}, {}, {}) for {dim} channels over {width}x{height}",
                descriptors.len(),
                scores.len(),
                logits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            dim,
            descriptors,
            scores,
            logits,
        })
    }

    /// Descriptor of pixel `(x, y)`.
    pub fn descriptor_at(&self, x: usize, y: usize) -> Vec<f64> {
        let plane = self.width * self.height;
        let j = y * self.width + x;
        (0..self.dim).map(|c| self.descriptors[c * plane + j]).collect()
    }

    /// Soft-argmax keypoints with bilinearly sampled descriptors and scores.
    pub fn keypoints(&self, window: usize) -> Result<KeypointSet> {
        let coords = detect_keypoints(&self.logits, self.width, self.height, window)?;
        let mut descriptors = Vec::with_capacity(coords.len() * self.dim);
        let mut scores = Vec::with_capacity(coords.len());
        for q in &coords {
            descriptors.extend(bilinear_sample(&self.descriptors, self.dim, self.height, self.width, *q)?);
            scores.push(bilinear_sample(&self.scores, 1, self.height, self.width, *q)?[0]);
        }
        Ok(KeypointSet {
            dim: self.dim,
            coords,
            descriptors,
            scores,
        })
    }

    /// Checks the shape, score range and finiteness contracts.
    pub fn validate(&self) -> Result<()> {
        if self.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Shape("score outside [0, 1]".into()));
        }
        if self.descriptors.iter().chain(&self.logits).any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite feature value".into()));
        }
        Ok(())
    }
}

/// Sub-pixel keypoints `(u, v)` with row-major `[N, D]` descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub dim: usize,
    pub coords: Vec<[f64; 2]>,
    pub descriptors: Vec<f64>,
    pub scores: Vec<f64>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Anything that turns an intensity image into dense features.
pub trait FeatureExtractor: Sync {
    fn extract(&self, image: &Image) -> Result<DenseFeatureMap>;
    fn window(&self) -> usize;
    fn name(&self) -> &str;
}

impl FeatureExtractor for ExtractorWeights {
    fn extract(&self, image: &Image) -> Result<DenseFeatureMap> {
        self.forward(image)
    }

    fn window(&self) -> usize {
        self.config.window
    }

    fn name(&self) -> &str {
        "learned"
    }
}

/// Softmax-weighted mean of pixel coordinates inside each window of a
/// row-major `height x width` logit map. Windows are ordered row-major.
pub fn detect_keypoints(logits: &[f64], width: usize, height: usize, window: usize) -> Result<Vec<[f64; 2]>> {
    if window == 0 || !width.is_multiple_of(window) || !height.is_multiple_of(window) {
        return Err(Error::Shape(format!("window {window} does not tile {width}x{height}")));
    }
    if logits.len() != width * height {
        return Err(Error::Shape(format!("logit map of {} values for {width}x{height}", logits.len())));
    }
    let (nx, ny) = (width / window, height / window);
    Ok((0..nx * ny)
        .into_par_iter()
        .map(|t| {
            let (x0, y0) = ((t % nx) * window, (t / nx) * window);
            let mut max = f64::NEG_INFINITY;
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    max = max.max(logits[y * width + x]);
                }
            }
            let (mut total, mut su, mut sv) = (0.0, 0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    let e = (logits[y * width + x] - max).exp();
                    total += e;
                    su += e * (x - x0) as f64;
                    sv += e * (y - y0) as f64;
                }
            }
            [x0 as f64 + su / total, y0 as f64 + sv / total]
        })
        .collect())
}

/// Bilinear interpolation of every channel of a `[C, H, W]` map at `q = (u, v)`.
pub fn bilinear_sample(map: &[f64], channels: usize, height: usize, width: usize, q: [f64; 2]) -> Result<Vec<f64>> {
    let [u, v] = q;
    let slack = 1e-9;
    let inside = |c: f64, len: usize| c >= -slack && c <= (len - 1) as f64 + slack;
    if !(inside(u, width) && inside(v, height)) {
        return Err(Error::OutOfBounds {
            x: u,
            y: v,
            width,
            height,
        });
    }
    let u = u.clamp(0.0, (width - 1) as f64);
    let v = v.clamp(0.0, (height - 1) as f64);
    let x0 = (u.floor() as usize).min(width.saturating_sub(2));
    let y0 = (v.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let (tx, ty) = (u - x0 as f64, v - y0 as f64);
    let plane = width * height;
    Ok((0..channels)
        .map(|c| {
            let p = &map[c * plane..(c + 1) * plane];
            (1.0 - ty) * ((1.0 - tx) * p[y0 * width + x0] + tx * p[y0 * width + x1])
                + ty * ((1.0 - tx) * p[y1 * width + x0] + tx * p[y1 * width + x1])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    #[test]
    fn uniform_logits_give_window_centres() {
        let kp = detect_keypoints(&vec![0.0; 64 * 48], 64, 48, 16).unwrap();
        assert_eq!(kp.len(), 12);
        assert!((kp[0][0] - 7.5).abs() < 1e-12 && (kp[0][1] - 7.5).abs() < 1e-12);
        assert!((kp[5][0] - 23.5).abs() < 1e-12 && (kp[5][1] - 23.5).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_pins_keypoint() {
        let mut logits = vec![0.0; 16 * 16];
        logits[4 * 16 + 3] = 50.0;
        let kp = detect_keypoints(&logits, 16, 16, 16).unwrap();
        assert!((kp[0][0] - 3.0).abs() < 1e-3 && (kp[0][1] - 4.0).abs() < 1e-3);
    }

    #[test]
    fn window_must_tile_image() {
        assert!(matches!(detect_keypoints(&[0.0; 30], 6, 5, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn bilinear_grid_points_and_midpoints() {
        let map: Vec<f64> = (0..12).map(|v| v as f64 * 1.5).collect();
        assert_eq!(bilinear_sample(&map, 1, 3, 4, [2.0, 1.0]).unwrap(), vec![map[6]]);
        let mid = bilinear_sample(&map, 1, 3, 4, [1.5, 2.0]).unwrap()[0];
        assert!((mid - 0.5 * (map[9] + map[10])).abs() < 1e-15);
        assert!(matches!(
            bilinear_sample(&map, 1, 3, 4, [3.01, 0.0]),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn bilinear_matches_four_neighbour_sum() {
        let mut rng = crate::seed::rng(5);
        let (c, h, w) = (3, 7, 9);
        let map: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..500 {
            let u: f64 = rng.random_range(0.0..(w - 1) as f64);
            let v: f64 = rng.random_range(0.0..(h - 1) as f64);
            let got = bilinear_sample(&map, c, h, w, [u, v]).unwrap();
            for ch in 0..c {
                let mut want = 0.0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (x, y) = (u.floor() as usize + dx, v.floor() as usize + dy);
                    let wx = 1.0 - (u - x as f64).abs();
                    let wy = 1.0 - (v - y as f64).abs();
                    want += wx * wy * map[ch * h * w + y * w + x];
                }
                assert!((got[ch] - want).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn keypoints_stay_in_their_window(seed in 0u64..1000) {
            let mut rng = crate::seed::rng(seed);
            let logits: Vec<f64> = (0..32 * 24).map(|_| rng.random_range(-20.0..20.0)).collect();
            let kp = detect_keypoints(&logits, 32, 24, 8).unwrap();
            prop_assert_eq!(kp.len(), 12);
            for (i, q) in kp.iter().enumerate() {
                let (x0, y0) = ((i % 4 * 8) as f64, (i / 4 * 8) as f64);
                prop_assert!(q[0] >= x0 && q[0] <= x0 + 7.0 && q[1] >= y0 && q[1] <= y0 + 7.0);
            }
        }

        #[test]
        fn shifting_logits_by_a_window_shifts_keypoints(seed in 0u64..1000) {
            let mut rng = crate::seed::rng(seed);
            let tile: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut a = vec![0.0; 16 * 8];
            let mut b = vec![0.0; 16 * 8];
            for y in 0..8 {
                for x in 0..8 {
                    a[y * 16 + x] = tile[y * 8 + x];
                    b[y * 16 + x + 8] = tile[y * 8 + x];
                }
            }
            let ka = detect_keypoints(&a, 16, 8, 8).unwrap();
            let kb = detect_keypoints(&b, 16, 8, 8).unwrap();
            prop_assert_eq!(kb[1][0], ka[0][0] + 8.0);
            prop_assert_eq!(kb[1][1], ka[0][1]);
        }
    }
}
