use crate::error::Result;
use crate::image::Image;

use super::{DenseFeatureMap, FeatureExtractor};

/// Sampling radii of the three descriptor scales.
const SCALES: [usize; 3] = [1, 2, 4];
const HARRIS_K: f64 = 0.04;
/// Peak logit magnitude after normalising the corner response.
const LOGIT_SCALE: f64 = 50.0;
const STD_FLOOR: f64 = 1e-12;

/// Non-learned extractor, useful as a baseline and for tests that need
/// features without a trained network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalyticExtractor {
    pub window: usize,
}

impl FeatureExtractor for AnalyticExtractor {
    fn extract(&self, image: &Image) -> Result<DenseFeatureMap> {
        analytic_features(image)
    }

    fn window(&self) -> usize {
        self.window
    }

    fn name(&self) -> &str {
        "analytic"
    }
}

fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Mean over a `(2r + 1)^2` box with edge clamping.
fn box_blur(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let r = r as isize;
    let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut total = 0.0;
            for dy in -r..=r {
                let yy = clamp_index(y as isize + dy, h);
                for dx in -r..=r {
                    total += src[yy * w + clamp_index(x as isize + dx, w)];
                }
            }
            out[y * w + x] = total / norm;
        }
    }
    out
}

/// Descriptors from zero-normalised 3x3 sample grids of box-filtered
/// intensities at three scales (D = 27), gradient-magnitude scores and a
/// Harris corner response as keypoint logits.
pub fn analytic_features(image: &Image) -> Result<DenseFeatureMap> {
    let (w, h) = (image.width, image.height);
    let plane = w * h;
    let src = image.to_f64();
    let dim = 9 * SCALES.len();
    let mut descriptors = vec![0.0; dim * plane];
    for (si, &s) in SCALES.iter().enumerate() {
        let blurred = box_blur(&src, w, h, s);
        let s = s as isize;
        let mut patch = [0.0; 9];
        for y in 0..h {
            for x in 0..w {
                for (k, p) in patch.iter_mut().enumerate() {
                    let dx = (k % 3) as isize - 1;
                    let dy = (k / 3) as isize - 1;
                    let xx = clamp_index(x as isize + dx * s, w);
                    let yy = clamp_index(y as isize + dy * s, h);
                    *p = blurred[yy * w + xx];
                }
                let mean = patch.iter().sum::<f64>() / 9.0;
                let std = (patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
                if std > STD_FLOOR {
                    for (k, p) in patch.iter().enumerate() {
                        descriptors[(9 * si + k) * plane + y * w + x] = (p - mean) / std;
                    }
                }
            }
        }
    }

    let mut gx = vec![0.0; plane];
    let mut gy = vec![0.0; plane];
    for y in 0..h {
        for x in 0..w {
            let at = |xx: isize, yy: isize| src[clamp_index(yy, h) * w + clamp_index(xx, w)];
            let (xi, yi) = (x as isize, y as isize);
            gx[y * w + x] = 0.5 * (at(xi + 1, yi) - at(xi - 1, yi));
            gy[y * w + x] = 0.5 * (at(xi, yi + 1) - at(xi, yi - 1));
        }
    }
    let magnitude: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let peak = magnitude.iter().fold(0.0_f64, |m, v| m.max(*v));
    let scores = if peak > 0.0 {
        magnitude.iter().map(|m| (m / peak).min(1.0)).collect()
    } else {
        vec![0.0; plane]
    };

    let xx: Vec<f64> = gx.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = gy.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a * b).collect();
    let (sxx, syy, sxy) = (box_blur(&xx, w, h, 1), box_blur(&yy, w, h, 1), box_blur(&xy, w, h, 1));
    let response: Vec<f64> = (0..plane)
        .map(|i| sxx[i] * syy[i] - sxy[i] * sxy[i] - HARRIS_K * (sxx[i] + syy[i]).powi(2))
        .collect();
    let peak = response.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let logits = if peak > 0.0 {
        response.iter().map(|r| LOGIT_SCALE * r / peak).collect()
    } else {
        vec![0.0; plane]
    };
    DenseFeatureMap::new(w, h, dim, descriptors, scores, logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Values on a 1/1024 grid so `2 I + 5` is exact in f32.
    fn quantized_image(seed: u64) -> Image {
        let mut rng = crate::seed::rng(seed);
        Image::new(32, 24, (0..32 * 24).map(|_| rng.random_range(0..1024) as f32 / 1024.0).collect()).unwrap()
    }

    #[test]
    fn deterministic_and_well_formed() {
        let img = quantized_image(1);
        let a = analytic_features(&img).unwrap();
        assert_eq!(a, analytic_features(&img).unwrap());
        assert_eq!(a.dim, 27);
        a.validate().unwrap();
    }

    #[test]
    fn descriptors_ignore_gain_and_bias() {
        let img = quantized_image(2);
        let brighter = img.map(|v| 2.0 * v + 5.0);
        let a = analytic_features(&img).unwrap();
        let b = analytic_features(&brighter).unwrap();
        let worst = a
            .descriptors
            .iter()
            .zip(&b.descriptors)
            .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(worst < 1e-9, "max descriptor change {worst}");
    }

    #[test]
    fn constant_image_has_zero_features() {
        let f = analytic_features(&Image::filled(16, 16, 0.3)).unwrap();
        assert!(f.descriptors.iter().chain(&f.scores).chain(&f.logits).all(|&v| v == 0.0));
    }
}
