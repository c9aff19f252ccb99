use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::mix64;

/// Layout parameters of a procedural scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Blocks are placed inside `[-extent, extent]^2`.
    pub extent: f64,
    pub blocks: usize,
    pub min_block_size: f64,
    pub max_block_size: f64,
    pub min_block_height: f64,
    pub max_block_height: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            extent: 8.0,
            blocks: 120,
            min_block_size: 0.15,
            max_block_size: 0.5,
            min_block_height: 0.1,
            max_block_height: 0.4,
        }
    }
}

/// Axis-aligned raised block standing on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub height: f64,
}

/// Textured ground plane `z = 0` with raised blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub params: SceneParams,
    pub blocks: Vec<Block>,
}

/// Wavelengths and amplitudes of the value-noise octaves.
const OCTAVES: [(f64, f64); 3] = [(0.6, 0.5), (0.3, 0.3), (0.15, 0.2)];

/// A ray hit: distance along the ray and the surface point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
}

pub fn generate_scene(seed: u64, params: &SceneParams) -> Scene {
    let mut rng = crate::seed::rng(crate::seed::derive(seed, "blocks", 0));
    let blocks = (0..params.blocks)
        .map(|_| {
            let sx = rng.random_range(params.min_block_size..=params.max_block_size);
            let sy = rng.random_range(params.min_block_size..=params.max_block_size);
            let cx = rng.random_range(-params.extent..params.extent);
            let cy = rng.random_range(-params.extent..params.extent);
            Block {
                min: [cx - 0.5 * sx, cy - 0.5 * sy],
                max: [cx + 0.5 * sx, cy + 0.5 * sy],
                height: rng.random_range(params.min_block_height..=params.max_block_height),
            }
        })
        .collect();
    Scene {
        seed,
        params: params.clone(),
        blocks,
    }
}

fn lattice(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let h = mix64(seed ^ mix64(octave.wrapping_add(mix64(ix as u64 ^ mix64(iy as u64)))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl Scene {
    /// Surface reflectance in `[0, 1]` at a world point. Vertical offsets
    /// shear the lookup so block tops and sides do not repeat the ground.
    pub fn albedo(&self, p: &Vector3<f64>) -> f64 {
        let (x, y) = (p.x + 0.7 * p.z, p.y - 0.4 * p.z);
        let mut value = 0.0;
        for (k, &(wavelength, amplitude)) in OCTAVES.iter().enumerate() {
            let (gx, gy) = (x / wavelength, y / wavelength);
            let (fx, fy) = (gx.floor(), gy.floor());
            let (ix, iy) = (fx as i64, fy as i64);
            let (tx, ty) = (smooth(gx - fx), smooth(gy - fy));
            let at = |dx: i64, dy: i64| lattice(self.seed, k as u64, ix + dx, iy + dy);
            let top = at(0, 0) * (1.0 - tx) + at(1, 0) * tx;
            let bot = at(0, 1) * (1.0 - tx) + at(1, 1) * tx;
            value += amplitude * (top * (1.0 - ty) + bot * ty);
        }
        // stretch the noise (mean 0.5, narrow spread) to use the full range
        (0.5 + 2.2 * (value - 0.5)).clamp(0.0, 1.0)
    }

    /// Height of the surface below `(x, y)`.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        self.blocks
            .iter()
            .filter(|b| x >= b.min[0] && x <= b.max[0] && y >= b.min[1] && y <= b.max[1])
            .fold(0.0, |m, b| m.max(b.height))
    }

    /// Nearest intersection of the ray `origin + t dir`, `t > 0`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best = if dir.z < 0.0 && origin.z > 0.0 {
            Some(-origin.z / dir.z)
        } else {
            None
        };
        for b in &self.blocks {
            let lo = [b.min[0], b.min[1], 0.0];
            let hi = [b.max[0], b.max[1], b.height];
            let (mut t0, mut t1) = (0.0_f64, f64::INFINITY);
            let mut hit = true;
            for a in 0..3 {
                if dir[a] == 0.0 {
                    if origin[a] < lo[a] || origin[a] > hi[a] {
                        hit = false;
                        break;
                    }
                    continue;
                }
                let ta = (lo[a] - origin[a]) / dir[a];
                let tb = (hi[a] - origin[a]) / dir[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
                if t0 > t1 {
                    hit = false;
                    break;
                }
            }
            if hit && t0 > 0.0 && best.is_none_or(|t| t0 < t) {
                best = Some(t0);
            }
        }
        best.map(|t| Hit {
            t,
            point: origin + dir * t,
        })
    }

    /// Reflectance seen along a ray, or 0 if it escapes.
    pub fn radiance(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        self.intersect(origin, dir).map_or(0.0, |h| self.albedo(&h.point))
    }
}
