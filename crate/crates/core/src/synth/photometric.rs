use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Lighting model `gain * I^gamma * (1 - vignette * r^2 / r_max^2) + bias + N(0, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub gain: f64,
    pub bias: f64,
    pub gamma: f64,
    pub vignette: f64,
    pub sigma: f64,
}

impl PhotometricParams {
    pub const IDENTITY: Self = Self {
        gain: 1.0,
        bias: 0.0,
        gamma: 1.0,
        vignette: 0.0,
        sigma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gamma > 0.0 && self.sigma >= 0.0) {
            return Err(Error::Config(format!("invalid photometric parameters {self:?}")));
        }
        Ok(())
    }
}

const fn params(gain: f64, bias: f64, gamma: f64, vignette: f64, sigma: f64) -> PhotometricParams {
    PhotometricParams {
        gain,
        bias,
        gamma,
        vignette,
        sigma,
    }
}

/// Named lighting conditions over a day, brightest first.
pub const SCHEDULE: [(&str, PhotometricParams); 8] = [
    ("noon", params(1.0, 0.0, 1.0, 0.0, 0.01)),
    ("afternoon", params(0.85, 0.03, 1.1, 0.1, 0.012)),
    ("morning", params(0.75, 0.05, 0.9, 0.15, 0.015)),
    ("overcast", params(0.6, 0.1, 0.8, 0.1, 0.015)),
    ("evening", params(0.55, 0.02, 1.25, 0.25, 0.02)),
    ("dusk", params(0.35, 0.0, 1.4, 0.4, 0.03)),
    ("dawn", params(0.3, 0.02, 1.5, 0.45, 0.035)),
    ("night", params(0.15, 0.0, 1.0, 0.6, 0.05)),
];

pub fn condition(name: &str) -> Result<PhotometricParams> {
    SCHEDULE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, p)| *p)
        .ok_or_else(|| Error::Config(format!("unknown lighting condition {name:?}")))
}

pub fn condition_names() -> impl Iterator<Item = &'static str> {
    SCHEDULE.iter().map(|(n, _)| *n)
}

/// Applies the lighting model to a reflectance image. Noise is drawn from
/// a stream seeded by `noise_seed`.
pub fn apply_photometric(image: &Image, p: &PhotometricParams, noise_seed: u64) -> Result<Image> {
    p.validate()?;
    let (w, h) = (image.width, image.height);
    let (cx, cy) = (0.5 * (w as f64 - 1.0), 0.5 * (h as f64 - 1.0));
    let r_max2 = (cx * cx + cy * cy).max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, p.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = f64::from(image.get(x, y));
            let shaped = if p.gamma == 1.0 { i } else { i.max(0.0).powf(p.gamma) };
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let mut v = p.gain * shaped * (1.0 - p.vignette * r2 / r_max2) + p.bias;
            if p.sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            out.push(v as f32);
        }
    }
    Image::new(w, h, out)
}
