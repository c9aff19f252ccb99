use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use vtr_core::error::{Error, Result};
use vtr_core::estimator::RansacParams;
use vtr_core::features::NetworkConfig;
use vtr_core::synth::DatasetConfig;
use vtr_core::training::{LossConfig, TrainConfig};
use vtr_core::vtr::{DisparitySource, LocalizeParams, MatchMode, PathConfig, DEFAULT_FAILURE_THRESHOLD, HARNESS_WINDOW};


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub count: usize,
    pub val_count: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSection {
    pub frames: usize,
    pub spacing: f64,
    pub lateral_offset: f64,
    pub heading_offset_deg: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub channels: [usize; 3],
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda: f64,
    pub keypoint_weight: f64,
    pub gate_threshold: f64,
    pub tau: f64,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacSection {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub min_inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VtrSection {
    pub mode: String,
    pub window: usize,
    pub failure_threshold: usize,
    /// `ground_truth` or `block_match`.
    pub disparity: String,
    pub block_window: usize,
    pub max_disparity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradSection {
    pub channels: [usize; 3],
    pub tolerance: f64,
    pub step: f64,
    /// Number of weights probed; 0 checks all of them.
    pub probes: usize,
}

/// Fully resolved settings. Precedence, lowest first: built-in defaults,
/// the `--config` file, `--set key=value` pairs, then dedicated flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    /// Lighting condition used when rendering a sequence.
    pub condition: String,
    pub data: DataSection,
    pub path: PathSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub ransac: RansacSection,
    pub vtr: VtrSection,
    pub grad: GradSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        let path = PathConfig::default();
        let net = NetworkConfig::default();
        let train = TrainConfig::default();
        let loss = LossConfig::default();
        let ransac = RansacParams::default();
        Self {
            seed: 0,
            condition: "noon".into(),
            data: DataSection {
                count: data.train_count,
                val_count: data.val_count,
                width: data.width,
                height: data.height,
            },
            path: PathSection {
                frames: path.frames,
                spacing: path.spacing,
                lateral_offset: path.lateral_offset,
                heading_offset_deg: path.heading_offset.to_degrees(),
                width: path.width,
                height: path.height,
            },
            network: NetworkSection {
                channels: net.channels,
                window: net.window,
            },
            train: TrainSection {
                lr: train.learning_rate,
                batch: train.batch_size,
                epochs: train.max_epochs,
                patience: train.patience,
            },
            loss: LossSection {
                lambda: loss.lambda,
                keypoint_weight: loss.keypoint_weight,
                gate_threshold: loss.gate_threshold,
                tau: loss.tau,
                stride: loss.stride,
            },
            ransac: RansacSection {
                iterations: ransac.iterations,
                inlier_threshold: ransac.inlier_threshold,
                min_inliers: ransac.min_inliers,
            },
            vtr: VtrSection {
                mode: "dense".into(),
                window: HARNESS_WINDOW,
                failure_threshold: DEFAULT_FAILURE_THRESHOLD,
                disparity: "ground_truth".into(),
                block_window: 5,
                max_disparity: 16,
            },
            grad: GradSection {
                channels: [4, 8, 16],
                tolerance: 1e-4,
                step: 1e-6,
                probes: 0,
            },
        }
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut t = &mut root;
        for p in parts {
            t = t
                .entry(p)
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("section keys hold tables");
        }
        t.insert(last.into(), v.clone());
    }
    root
}

/// Parses a command-line value as TOML, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.into()))
}

/// Flat view of the settings: dotted key to value.
#[derive(Debug, Clone)]
pub struct Layers {
    flat: BTreeMap<String, Value>,
}

impl Layers {
    pub fn defaults() -> Self {
        let table = Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        Self { flat }
    }

    fn set(&mut self, key: &str, value: Value, origin: &str) -> Result<()> {
        let slot = self
            .flat
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown setting {key:?} in {origin}")))?;
        // Integers are accepted where floats are expected.
        *slot = match (&*slot, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (_, v) => v,
        };
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Data {
            path: path.into(),
            reason: e.message().to_string(),
        })?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        let origin = path.display().to_string();
        for (k, v) in flat {
            self.set(&k, v, &origin)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), parse_value(v.trim()), "--set")
    }

    pub fn apply(&mut self, key: &str, value: impl Into<Value>) -> Result<()> {
        self.set(key, value.into(), "flags")
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        Value::Table(unflatten(&self.flat))
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }
}

impl RunConfig {
    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            train_count: self.data.count,
            val_count: self.data.val_count,
            width: self.data.width,
            height: self.data.height,
            ..DatasetConfig::default()
        }
    }

    pub fn path(&self) -> PathConfig {
        PathConfig {
            seed: self.seed,
            frames: self.path.frames,
            spacing: self.path.spacing,
            lateral_offset: self.path.lateral_offset,
            heading_offset: self.path.heading_offset_deg.to_radians(),
            width: self.path.width,
            height: self.path.height,
            ..PathConfig::default()
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            channels: self.network.channels,
            window: self.network.window,
            seed: self.seed,
            tau: self.loss.tau,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.lr,
            batch_size: self.train.batch,
            max_epochs: self.train.epochs,
            patience: self.train.patience,
            seed: self.seed,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.loss.lambda,
            keypoint_weight: self.loss.keypoint_weight,
            gate_threshold: self.loss.gate_threshold,
            tau: self.loss.tau,
            stride: self.loss.stride,
        }
    }

    pub fn ransac(&self) -> RansacParams {
        RansacParams {
            iterations: self.ransac.iterations,
            inlier_threshold: self.ransac.inlier_threshold,
            min_inliers: self.ransac.min_inliers,
            seed: self.seed,
        }
    }

    pub fn disparity(&self) -> Result<DisparitySource> {
        match self.vtr.disparity.as_str() {
            "ground_truth" => Ok(DisparitySource::GroundTruth),
            "block_match" => Ok(DisparitySource::BlockMatch {
                window: self.vtr.block_window,
                max_disparity: self.vtr.max_disparity,
            }),
            other => Err(Error::Config(format!("unknown disparity source {other:?}"))),
        }
    }

    pub fn localize(&self) -> Result<LocalizeParams> {
        let params = LocalizeParams {
            mode: self.vtr.mode.parse::<MatchMode>()?,
            tau: self.loss.tau,
            stride: self.loss.stride,
            ransac: self.ransac(),
            failure_threshold: self.vtr.failure_threshold,
            disparity: self.disparity()?,
        };
        params.ransac.validate()?;
        Ok(params)
    }
}
