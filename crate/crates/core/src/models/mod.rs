//! Model architectures, parameter initialization and forward passes.
//!
//! Tensor shapes are per example and channel-major: `[C, H, W]` for images,
//! `[C, L]` for 1-D signals and `[F]` for flat feature vectors.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{engine, Layout, ParameterVector};
use crate::{seeded_rng, Error, Result};

/// Epsilon added to the batch variance inside batch-norm.
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Zero padding of `(kernel - 1) / 2` per side; spatial size preserved.
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    },
    /// Normalizes with current-batch statistics; per channel for spatial
    /// inputs, per feature for flat inputs.
    BatchNorm {
        channels: usize,
    },
    Relu,
    Tanh,
    MaxPool2d {
        size: usize,
    },
    MaxPool1d {
        size: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

impl Layer {
    /// Parameter tensors owned by this layer as `(suffix, shape)` pairs.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel]),
                ("bias", vec![out_channels]),
            ],
            Layer::BatchNorm { channels } => {
                vec![("scale", vec![channels]), ("shift", vec![channels])]
            }
            Layer::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features]),
                ("bias", vec![out_features]),
            ],
            _ => Vec::new(),
        }
    }

    fn output_shape(&self, input: &[usize], class_count: usize) -> Result<Vec<usize>> {
        let bad = |why: &str| Err(Error::Spec(format!("{self:?} on input {input:?}: {why}")));
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let &[c, h, w] = input else {
                    return bad("expected a [C, H, W] input");
                };
                if c != in_channels || kernel == 0 || out_channels == 0 {
                    return bad("channel or kernel mismatch");
                }
                match padding {
                    Padding::Same if kernel % 2 == 1 => Ok(vec![out_channels, h, w]),
                    Padding::Same => bad("same padding needs an odd kernel"),
                    Padding::Valid if h >= kernel && w >= kernel => {
                        Ok(vec![out_channels, h - kernel + 1, w - kernel + 1])
                    }
                    Padding::Valid => bad("kernel larger than input"),
                }
            }
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let &[c, l] = input else {
                    return bad("expected a [C, L] input");
                };
                if c != in_channels || kernel == 0 || out_channels == 0 {
                    return bad("channel or kernel mismatch");
                }
                match padding {
                    Padding::Same if kernel % 2 == 1 => Ok(vec![out_channels, l]),
                    Padding::Same => bad("same padding needs an odd kernel"),
                    Padding::Valid if l >= kernel => Ok(vec![out_channels, l - kernel + 1]),
                    Padding::Valid => bad("kernel larger than input"),
                }
            }
            Layer::BatchNorm { channels } => {
                if input.first() != Some(&channels) {
                    return bad("channel count mismatch");
                }
                Ok(input.to_vec())
            }
            Layer::Relu | Layer::Tanh => Ok(input.to_vec()),
            Layer::MaxPool2d { size } => {
                let &[c, h, w] = input else {
                    return bad("expected a [C, H, W] input");
                };
                if size == 0 || h < size || w < size {
                    return bad("pool larger than input");
                }
                Ok(vec![c, h / size, w / size])
            }
            Layer::MaxPool1d { size } => {
                let &[c, l] = input else {
                    return bad("expected a [C, L] input");
                };
                if size == 0 || l < size {
                    return bad("pool larger than input");
                }
                Ok(vec![c, l / size])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Linear {
                in_features,
                out_features,
            } => {
                if input != [in_features] || out_features == 0 {
                    return bad("expected a flat input of matching width");
                }
                Ok(vec![out_features])
            }
            Layer::Softmax => {
                if input != [class_count] {
                    return bad("softmax width must equal the class count");
                }
                Ok(input.to_vec())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub layer: Layer,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

/// Architecture description, independent of parameter values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Propagates shapes through `layers` and validates the result.
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        class_count: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::Spec(format!(
                "class_count must be at least 2, got {class_count}"
            )));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Spec(format!("invalid input shape {input_shape:?}")));
        }
        let mut shape = input_shape.clone();
        let mut specs = Vec::with_capacity(layers.len());
        for layer in layers {
            let out = layer.output_shape(&shape, class_count)?;
            specs.push(LayerSpec {
                layer,
                input_shape: shape,
                output_shape: out.clone(),
            });
            shape = out;
        }
        let spec = Self {
            name: name.into(),
            input_shape,
            class_count,
            layers: specs,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that declared shapes chain and agree with propagation.
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Spec("class_count must be at least 2".into()));
        }
        let mut shape = self.input_shape.clone();
        for (i, l) in self.layers.iter().enumerate() {
            if l.input_shape != shape {
                return Err(Error::Spec(format!(
                    "layer {i} declares input {:?} but receives {shape:?}",
                    l.input_shape
                )));
            }
            let out = l.layer.output_shape(&shape, self.class_count)?;
            if out != l.output_shape {
                return Err(Error::Spec(format!(
                    "layer {i} declares output {:?} but produces {out:?}",
                    l.output_shape
                )));
            }
            if matches!(l.layer, Layer::Softmax) && i + 1 != self.layers.len() {
                return Err(Error::Spec("softmax must be the final layer".into()));
            }
            shape = out;
        }
        match self.layers.last() {
            Some(LayerSpec {
                layer: Layer::Softmax,
                ..
            }) => Ok(()),
            _ => Err(Error::Spec("final layer must be softmax".into())),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Flat parameter layout, in layer order.
    pub fn layout(&self) -> Layout {
        let mut slots = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, shape) in l.layer.parameter_shapes() {
                slots.push((format!("layers.{i}.{suffix}"), shape));
            }
        }
        Layout::new(slots)
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().len()
    }

    /// Width of the flat feature vector entering the first linear layer.
    pub fn flattened_len(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l.layer {
            Layer::Linear { in_features, .. } => Some(in_features),
            _ => None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)
            .map_err(|e| Error::Spec(format!("unreadable model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn architecture_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("model spec serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// Four `[conv 3×3 (same) → batch-norm → ReLU → max-pool 2×2]` blocks on
/// 3×28×28 RGB input, then flatten, linear and softmax.
pub fn build_rainbow_cnn(class_count: usize) -> Result<ModelSpec> {
    let mut layers = Vec::new();
    let mut in_channels = 3;
    for _ in 0..4 {
        layers.push(Layer::Conv2d {
            in_channels,
            out_channels: 32,
            kernel: 3,
            padding: Padding::Same,
        });
        layers.push(Layer::BatchNorm { channels: 32 });
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2d { size: 2 });
        in_channels = 32;
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Linear {
        in_features: 32,
        out_features: class_count,
    });
    layers.push(Layer::Softmax);
    ModelSpec::new("rainbow-cnn", vec![3, 28, 28], class_count, layers)
}

/// Three `[conv1d 5 (valid) → max-pool 2 → ReLU]` blocks on 1×256 spectra,
/// then flatten, linear and softmax.
pub fn build_pump_cnn(class_count: usize) -> Result<ModelSpec> {
    let mut layers = Vec::new();
    let mut in_channels = 1;
    let mut len = 256;
    for _ in 0..3 {
        layers.push(Layer::Conv1d {
            in_channels,
            out_channels: 32,
            kernel: 5,
            padding: Padding::Valid,
        });
        layers.push(Layer::MaxPool1d { size: 2 });
        layers.push(Layer::Relu);
        in_channels = 32;
        len = (len - 4) / 2;
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Linear {
        in_features: 32 * len,
        out_features: class_count,
    });
    layers.push(Layer::Softmax);
    ModelSpec::new("pump-cnn", vec![1, 256], class_count, layers)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Fully connected network on flat inputs.
pub fn build_mlp(
    input_features: usize,
    hidden: &[usize],
    activation: Activation,
    class_count: usize,
) -> Result<ModelSpec> {
    let mut layers = Vec::new();
    let mut width = input_features;
    for &h in hidden {
        layers.push(Layer::Linear {
            in_features: width,
            out_features: h,
        });
        layers.push(match activation {
            Activation::Relu => Layer::Relu,
            Activation::Tanh => Layer::Tanh,
        });
        width = h;
    }
    layers.push(Layer::Linear {
        in_features: width,
        out_features: class_count,
    });
    layers.push(Layer::Softmax);
    ModelSpec::new("mlp", vec![input_features], class_count, layers)
}

/// Weights uniform in `±sqrt(6 / fan_in)`, biases and shifts zero, scales one.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let layout = Arc::new(spec.layout());
    let mut values = vec![0.0; layout.len()];
    let mut rng = seeded_rng(seed);
    let mut offset = 0;
    for l in &spec.layers {
        for (suffix, shape) in l.layer.parameter_shapes() {
            let len: usize = shape.iter().product();
            let slot = &mut values[offset..offset + len];
            match suffix {
                "weight" => {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    for w in slot.iter_mut() {
                        *w = rng.random_range(-bound..bound);
                    }
                }
                "scale" => slot.fill(1.0),
                _ => {}
            }
            offset += len;
        }
    }
    ParameterVector::new(layout, values).expect("layout length matches")
}

/// Row-stochastic class probabilities, one row per example.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    pub probabilities: Vec<f64>,
    pub rows: usize,
    pub classes: usize,
}

impl PredictionBatch {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.probabilities[i * self.classes..(i + 1) * self.classes]
    }

    /// Predicted class per row; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows).map(|i| argmax_first(self.row(i))).collect()
    }
}

pub(crate) fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = j;
        }
    }
    best
}

/// Forward pass with batch-norm on current-batch statistics.
pub fn forward(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &[&[f64]],
) -> Result<PredictionBatch> {
    let logits = engine::logits(spec, params, batch)?;
    let classes = spec.class_count;
    let rows = batch.len();
    let mut probabilities = logits;
    for row in probabilities.chunks_mut(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in row.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    Ok(PredictionBatch {
        probabilities,
        rows,
        classes,
    })
}

#[cfg(test)]
mod tests;
