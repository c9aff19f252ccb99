use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::image::Image;

use super::DenseFeatureMap;

/// Layer widths and keypoint settings of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Output channels of the three encoder blocks.
    pub channels: [usize; 3],
    pub window: usize,
    pub seed: u64,
    /// Matching temperature the weights were trained with.
    pub tau: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: [8, 16, 32],
            window: 8,
            seed: 0,
            tau: 50.0,
        }
    }
}

impl NetworkConfig {
    pub fn descriptor_dim(&self) -> usize {
        self.channels.iter().sum()
    }

    /// Names and shapes of every tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let [c0, c1, c2] = self.channels;
        let mut layers = vec![
            ("enc0".to_string(), 1, c0),
            ("enc1".to_string(), c0, c1),
            ("enc2".to_string(), c1, c2),
            ("bottleneck".to_string(), c2, c2),
        ];
        for head in ["keypoint", "score"] {
            layers.push((format!("{head}.up1"), c2 + c1, c1));
            layers.push((format!("{head}.up0"), c1 + c0, c0));
            layers.push((format!("{head}.out"), c0, 1));
        }
        layers
            .into_iter()
            .flat_map(|(name, cin, cout)| {
                [
                    (format!("{name}.weight"), vec![cout, cin, 3, 3]),
                    (format!("{name}.bias"), vec![cout]),
                ]
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Learnable extractor: three conv/tanh/avg-pool encoder blocks, a
/// bottleneck, and keypoint and score decoders with nearest upsampling and
/// skip connections from the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorWeights {
    pub config: NetworkConfig,
    pub tensors: Vec<Tensor>,
}

/// Tape nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapeFeatures {
    /// `[D, H, W]`
    pub descriptors: NodeId,
    /// `[1, H, W]`, in (0, 1)
    pub scores: NodeId,
    /// `[1, H, W]`
    pub logits: NodeId,
}

const STD_FLOOR: f64 = 1e-12;

impl ExtractorWeights {
    /// Uniform initialisation in `+-sqrt(1 / fan_in)`.
    pub fn init(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::seed::rng(config.seed);
        let mut fan_in = 1;
        let mut out = Vec::new();
        for (name, shape) in config.layout() {
            // a bias follows its kernel and shares its fan-in
            if shape.len() == 4 {
                fan_in = shape[1] * 9;
            }
            let bound = (1.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            out.push(Tensor { name, shape, data });
        }
        Ok(Self { config, tensors: out })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| Tensor {
                data: vec![0.0; shape.iter().product()],
                name,
                shape,
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// All parameters concatenated in storage order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Checks tensor names and shapes against the configured layout.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layout = self.config.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor {} does not match layout entry {name} {shape:?}", t.name)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("tensor {} has non-finite values", t.name)));
            }
        }
        Ok(())
    }

    /// Places every tensor on the tape, as parameters when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.data.clone(), &t.shape)
                } else {
                    tape.constant(t.data.clone(), &t.shape)
                }
            })
            .collect()
    }

    /// Records a forward pass on `tape` using previously registered `params`.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[NodeId], image: &Image) -> Result<TapeFeatures> {
        let (h, w) = (image.height, image.width);
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("image {w}x{h} is not divisible by 8")));
        }
        if params.len() != self.tensors.len() {
            return Err(Error::Shape("parameter nodes do not match the layout".into()));
        }
        let (mean, std) = image.mean_and_std();
        let scale = if std > STD_FLOOR { 1.0 / std } else { 1.0 };
        let input: Vec<f64> = image.data.iter().map(|&v| (f64::from(v) - mean) * scale).collect();
        let x = tape.constant(input, &[1, h, w]);

        let layer = |i: usize| (params[2 * i], params[2 * i + 1]);
        let conv_act = |tape: &mut Tape, x: NodeId, i: usize| {
            let (wt, b) = layer(i);
            let c = tape.conv3x3(x, wt, b);
            tape.tanh(c)
        };

        let e0 = {
            let a = conv_act(tape, x, 0);
            tape.avg_pool2(a)
        };
        let e1 = {
            let a = conv_act(tape, e0, 1);
            tape.avg_pool2(a)
        };
        let e2 = {
            let a = conv_act(tape, e1, 2);
            tape.avg_pool2(a)
        };
        let bottleneck = conv_act(tape, e2, 3);

        let decode = |tape: &mut Tape, first: usize| {
            let u1 = tape.upsample_nearest2(bottleneck);
            let u1 = tape.concat_channels(&[u1, e1]);
            let d1 = conv_act(tape, u1, first);
            let u0 = tape.upsample_nearest2(d1);
            let u0 = tape.concat_channels(&[u0, e0]);
            let d0 = conv_act(tape, u0, first + 1);
            let full = tape.upsample_nearest2(d0);
            let (wt, b) = layer(first + 2);
            tape.conv3x3(full, wt, b)
        };
        let logits = decode(tape, 4);
        let score_raw = decode(tape, 7);
        let scores = tape.sigmoid(score_raw);

        let r0 = tape.resize_bilinear(e0, h, w);
        let r1 = tape.resize_bilinear(e1, h, w);
        let r2 = tape.resize_bilinear(e2, h, w);
        let descriptors = tape.concat_channels(&[r0, r1, r2]);
        Ok(TapeFeatures {
            descriptors,
            scores,
            logits,
        })
    }

    pub fn forward(&self, image: &Image) -> Result<DenseFeatureMap> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let f = self.forward_on_tape(&mut tape, &params, image)?;
        DenseFeatureMap::new(
            image.width,
            image.height,
            self.config.descriptor_dim(),
            tape.value(f.descriptors).to_vec(),
            tape.value(f.scores).to_vec(),
            tape.value(f.logits).to_vec(),
        )
    }
}
