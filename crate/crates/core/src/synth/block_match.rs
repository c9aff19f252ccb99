use crate::image::Image;

/// Integer disparity estimate with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityEstimate {
    pub disparity: Image,
    pub valid: Vec<bool>,
}

/// Left windows whose intensity variance falls below this are unmatchable.
pub const TEXTURE_FLOOR: f64 = 1e-5;

/// Sum-of-absolute-differences block matching on a rectified pair. A pixel
/// is valid when its `window x window` block and every candidate shift up to
/// `max_disparity` fit inside the image and the block carries texture.
pub fn block_match_disparity(left: &Image, right: &Image, window: usize, max_disparity: usize) -> DisparityEstimate {
    assert_eq!((left.width, left.height), (right.width, right.height), "stereo pair sizes differ");
    assert!(window % 2 == 1, "block window must be odd");
    let (w, h) = (left.width, left.height);
    let r = window / 2;
    let mut disparity = Image::filled(w, h, 0.0);
    let mut valid = vec![false; w * h];
    let (mut reference, mut candidate) = (Vec::new(), Vec::new());
    for y in r..h.saturating_sub(r) {
        for x in (r + max_disparity)..w.saturating_sub(r) {
            block(left, x, y, r, 0, &mut reference);
            let n = reference.len() as f64;
            let mean = reference.iter().sum::<f64>() / n;
            let var = reference.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var < TEXTURE_FLOOR {
                continue;
            }
            let mut best = (f64::INFINITY, 0);
            for d in 0..=max_disparity {
                block(right, x, y, r, d, &mut candidate);
                let sad: f64 = reference.iter().zip(&candidate).map(|(a, b)| (a - b).abs()).sum();
                if sad < best.0 {
                    best = (sad, d);
                }
            }
            disparity.set(x, y, best.1 as f32);
            valid[y * w + x] = true;
        }
    }
    DisparityEstimate { disparity, valid }
}

/// Copies the block centred on `(x - dx, y)` into `out`.
fn block(img: &Image, x: usize, y: usize, r: usize, dx: usize, out: &mut Vec<f64>) {
    out.clear();
    for yy in y - r..=y + r {
        for xx in x - r..=x + r {
            out.push(f64::from(img.get(xx - dx, yy)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::render::{nadir_pose, render_geometry, StereoCamera, CAMERA_HEIGHT};
    use crate::synth::scene::{generate_scene, SceneParams};
    use rand::Rng;

    #[test]
    fn identical_images_give_zero_disparity() {
        let mut rng = crate::seed::rng(1);
        let img = Image::new(20, 12, (0..240).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let est = block_match_disparity(&img, &img, 5, 4);
        assert!(est.valid.iter().any(|&v| v));
        for (d, v) in est.disparity.data.iter().zip(&est.valid) {
            if *v {
                assert_eq!(*d, 0.0);
            }
        }
    }

    #[test]
    fn flat_patch_is_invalid_not_zero() {
        let img = Image::filled(20, 12, 0.5);
        let est = block_match_disparity(&img, &img, 5, 4);
        assert!(est.valid.iter().all(|&v| !v));
    }

    #[test]
    fn rendered_pairs_are_within_a_pixel() {
        let scene = generate_scene(4, &SceneParams::default());
        let cam = StereoCamera::desk();
        let view = render_geometry(&scene, &cam, &nadir_pose(1.0, 0.5, 0.2, CAMERA_HEIGHT)).unwrap();
        let est = block_match_disparity(&view.left, &view.right, 5, 8);
        let mut errors: Vec<f64> = est
            .valid
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(j, _)| (f64::from(est.disparity.data[j]) - f64::from(view.disparity.data[j])).abs())
            .collect();
        assert!(errors.len() > 1000);
        errors.sort_by(f64::total_cmp);
        assert!(errors[errors.len() / 2] <= 1.0);
    }
}
