use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DenseFeatureMap, KeypointSet};
use crate::geometry::{CameraIntrinsics, SE3Pose};
use crate::image::Image;

use super::localize::MapVertex;
use super::teach::VtrMap;

const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "vtr-map-1";

#[derive(Debug, Serialize, Deserialize)]
struct VertexEntry {
    id: usize,
    keypoints: usize,
    /// Little-endian f64: coords `[N, 2]`, descriptors `[N, D]`, scores `[N]`, lifts `[N, 3]`.
    sparse_file: String,
    /// Little-endian f32: descriptors `[D, H, W]`, scores, logits, disparity.
    dense_file: String,
    pose: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    #[serde(default)]
    condition: Option<String>,
    extractor: String,
    window: usize,
    descriptor_dim: usize,
    width: usize,
    height: usize,
    intrinsics: CameraIntrinsics,
    vertices: Vec<VertexEntry>,
}

fn write_blob<T: Copy, const N: usize>(path: &Path, values: impl Iterator<Item = T>, to_le: fn(T) -> [u8; N]) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(to_le).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob<T, const N: usize>(path: &Path, len: usize, from_le: fn([u8; N]) -> T) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != N * len {
        return Err(Error::data(path, format!("{} bytes, expected {}", bytes.len(), N * len)));
    }
    Ok(bytes
        .chunks_exact(N)
        .map(|c| from_le(c.try_into().expect("chunk length")))
        .collect())
}

pub fn save_map(dir: &Path, map: &VtrMap) -> Result<()> {
    let first = map
        .vertices
        .first()
        .ok_or_else(|| Error::Config("cannot save an empty map".into()))?;
    let (dim, w, h) = (first.features.dim, first.features.width, first.features.height);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for v in &map.vertices {
        if (v.features.dim, v.features.width, v.features.height) != (dim, w, h) {
            return Err(Error::Shape(format!("vertex {} differs in feature shape", v.id)));
        }
        let sparse_file = format!("vertex_{:05}.f64", v.id);
        let dense_file = format!("vertex_{:05}.f32", v.id);
        let kp = &v.keypoints;
        let sparse = kp
            .coords
            .iter()
            .flatten()
            .chain(&kp.descriptors)
            .chain(&kp.scores)
            .copied()
            .chain(v.points.iter().flat_map(|p| [p.x, p.y, p.z]));
        write_blob(&dir.join(&sparse_file), sparse, f64::to_le_bytes)?;
        let f = &v.features;
        let dense = f
            .descriptors
            .iter()
            .chain(&f.scores)
            .chain(&f.logits)
            .map(|&x| x as f32)
            .chain(v.disparity.data.iter().copied());
        write_blob(&dir.join(&dense_file), dense, f32::to_le_bytes)?;
        entries.push(VertexEntry {
            id: v.id,
            keypoints: kp.len(),
            sparse_file,
            dense_file,
            pose: v.pose.to_array().to_vec(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        condition: map.condition.clone(),
        extractor: map.extractor.clone(),
        window: map.window,
        descriptor_dim: dim,
        width: w,
        height: h,
        intrinsics: map.intrinsics,
        vertices: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::data(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_map(dir: &Path) -> Result<VtrMap> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::data(&path, format!("unknown format {}", m.format)));
    }
    let (d, plane) = (m.descriptor_dim, m.width * m.height);
    let vertices = m
        .vertices
        .iter()
        .map(|e| {
            let n = e.keypoints;
            let s = read_blob(&dir.join(&e.sparse_file), n * (2 + d + 1 + 3), f64::from_le_bytes)?;
            let (coords, rest) = s.split_at(2 * n);
            let (descriptors, rest) = rest.split_at(n * d);
            let (scores, lifts) = rest.split_at(n);
            let dense: Vec<f32> = read_blob(&dir.join(&e.dense_file), (d + 3) * plane, f32::from_le_bytes)?;
            let wide = |r: std::ops::Range<usize>| dense[r].iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
            let features = DenseFeatureMap::new(
                m.width,
                m.height,
                d,
                wide(0..d * plane),
                wide(d * plane..(d + 1) * plane),
                wide((d + 1) * plane..(d + 2) * plane),
            )?;
            if e.pose.len() != 12 {
                return Err(Error::data(&path, format!("vertex {} pose has {} values", e.id, e.pose.len())));
            }
            Ok(MapVertex {
                id: e.id,
                keypoints: KeypointSet {
                    dim: d,
                    coords: coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
                    descriptors: descriptors.to_vec(),
                    scores: scores.to_vec(),
                },
                points: lifts.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
                features,
                disparity: Image::new(m.width, m.height, dense[(d + 2) * plane..].to_vec())?,
                pose: SE3Pose::from_array(&e.pose),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VtrMap {
        condition: m.condition,
        extractor: m.extractor,
        window: m.window,
        intrinsics: m.intrinsics,
        vertices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::AnalyticExtractor;
    use crate::vtr::{localize, render_sequence, teach, teach_path, DisparitySource, LocalizeParams, MatchMode, PathConfig};

    #[test]
    fn roundtrip_preserves_sparse_data_and_localization() {
        let cfg = PathConfig {
            frames: 3,
            ..PathConfig::default()
        };
        let seq = render_sequence(&cfg.scene(), &cfg.camera(), &teach_path(&cfg).unwrap(), "noon", 1).unwrap();
        let ext = AnalyticExtractor { window: 8 };
        let mut map = teach(&seq.frames, &ext, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        map.condition = Some("noon".into());
        let dir = tempfile::tempdir().unwrap();
        save_map(dir.path(), &map).unwrap();
        let back = load_map(dir.path()).unwrap();
        assert_eq!(back.condition.as_deref(), Some("noon"));
        assert_eq!((back.extractor.as_str(), back.window, back.intrinsics), ("analytic", 8, map.intrinsics));
        for (a, b) in map.vertices.iter().zip(&back.vertices) {
            assert_eq!((a.id, &a.keypoints, &a.points, a.pose), (b.id, &b.keypoints, &b.points, b.pose));
            assert_eq!(a.disparity, b.disparity);
            let worst = a
                .features
                .descriptors
                .iter()
                .zip(&b.features.descriptors)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-6);
        }
        let params = LocalizeParams {
            mode: MatchMode::Sparse,
            ..LocalizeParams::default()
        };
        let a = localize(&seq.frames[1], &map.vertices[1], &ext, &seq.intrinsics, &params).unwrap();
        let b = localize(&seq.frames[1], &back.vertices[1], &ext, &seq.intrinsics, &params).unwrap();
        assert_eq!((a.pose, a.inliers), (b.pose, b.inliers));
    }

    #[test]
    fn truncated_blob_is_reported_with_its_path() {
        let cfg = PathConfig {
            frames: 1,
            ..PathConfig::default()
        };
        let seq = render_sequence(&cfg.scene(), &cfg.camera(), &teach_path(&cfg).unwrap(), "noon", 1).unwrap();
        let map = teach(&seq.frames, &AnalyticExtractor { window: 8 }, &seq.intrinsics, &DisparitySource::GroundTruth).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_map(dir.path(), &map).unwrap();
        let blob = dir.path().join("vertex_00000.f64");
        fs::write(&blob, [0u8; 7]).unwrap();
        match load_map(dir.path()) {
            Err(Error::Data { path, .. }) => assert_eq!(path, blob),
            other => panic!("expected a data error, got {other:?}"),
        }
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_map(dir.path()), Err(Error::Io { .. })));
    }
}
