//! Feedforward network used as the learned vehicle model.
//!
//! The network maps a normalized `(state, control)` 6-vector to a normalized
//! 4-vector state derivative. Normalization statistics live in the model so a
//! loaded file is self-contained.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INPUT_DIM: usize = 6;
pub const OUTPUT_DIM: usize = 4;
pub const FORMAT_VERSION: u32 = 1;

/// `tanh` through `exp`, about twice as fast as `f64::tanh` and within a few
/// ulps of it. Small arguments use the library routine to avoid cancellation.
#[inline]
fn tanh(z: f64) -> f64 {
    let a = z.abs();
    if a < 0.25 {
        z.tanh()
    } else if a > 19.0 {
        1f64.copysign(z)
    } else {
        (1.0 - 2.0 / ((2.0 * a).exp() + 1.0)).copysign(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(z),
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed in terms of the activation output `a = apply(z)`.
    #[inline]
    pub fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `rows = output dim`, `cols = input dim`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            weights: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Affine normalization `normalized = (raw - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// z-score statistics of the columns of `samples` (one sample per column).
    /// Components with (near) zero spread keep a unit scale.
    pub fn fit(samples: &DMatrix<f64>) -> Self {
        let n = samples.ncols().max(1) as f64;
        let mut offset = Vec::with_capacity(samples.nrows());
        let mut scale = Vec::with_capacity(samples.nrows());
        for row in samples.row_iter() {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            offset.push(mean);
            scale.push(if std > 1e-12 { std } else { 1.0 });
        }
        Normalization { offset, scale }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn normalize_batch(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = raw.clone();
        for (r, mut row) in out.row_iter_mut().enumerate() {
            let (o, s) = (self.offset[r], self.scale[r]);
            for v in row.iter_mut() {
                *v = (*v - o) / s;
            }
        }
        out
    }

    pub fn denormalize_batch(&self, normalized: &mut DMatrix<f64>) {
        for (r, mut row) in normalized.row_iter_mut().enumerate() {
            let (o, s) = (self.offset[r], self.scale[r]);
            for v in row.iter_mut() {
                *v = *v * s + o;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
    /// One entry per hidden layer; the output layer is always linear.
    pub activations: Vec<Activation>,
    pub input_norm: Normalization,
    pub output_norm: Normalization,
}

/// Per-layer activations recorded during a forward pass, used by backprop.
pub(crate) struct ForwardCache {
    /// `outputs[0]` is the normalized input, `outputs[l + 1]` the output of layer `l`.
    pub outputs: Vec<DMatrix<f64>>,
}

/// Parameter gradients, laid out like the model's layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            weights: model
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.outputs(), l.inputs()))
                .collect(),
            bias: model
                .layers
                .iter()
                .map(|l| DVector::zeros(l.outputs()))
                .collect(),
        }
    }
}

impl MlpModel {
    /// Builds a network with `hidden` layer widths and Glorot-style normal initialization.
    pub fn new_random<R: Rng + ?Sized>(
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![INPUT_DIM];
        dims.extend_from_slice(hidden);
        dims.push(OUTPUT_DIM);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                DenseLayer {
                    weights: DMatrix::from_fn(fan_out, fan_in, |_, _| normal.sample(rng)),
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        MlpModel {
            layers,
            activations: vec![activation; hidden.len()],
            input_norm: Normalization::identity(INPUT_DIM),
            output_norm: Normalization::identity(OUTPUT_DIM),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("layers", "network has no layers"));
        }
        if self.activations.len() + 1 != self.layers.len() {
            return Err(Error::dimension(
                "activation list",
                self.layers.len() - 1,
                self.activations.len(),
            ));
        }
        if self.layers[0].inputs() != INPUT_DIM {
            return Err(Error::dimension("network input", INPUT_DIM, self.layers[0].inputs()));
        }
        let last = self.layers.last().expect("nonempty");
        if last.outputs() != OUTPUT_DIM {
            return Err(Error::dimension("network output", OUTPUT_DIM, last.outputs()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::dimension(
                    format!("layer {} input", i + 1),
                    pair[0].outputs(),
                    pair[1].inputs(),
                ));
            }
        }
        for layer in &self.layers {
            if layer.bias.len() != layer.outputs() {
                return Err(Error::dimension("bias", layer.outputs(), layer.bias.len()));
            }
        }
        if self.input_norm.dim() != INPUT_DIM || self.input_norm.scale.len() != INPUT_DIM {
            return Err(Error::dimension("input normalization", INPUT_DIM, self.input_norm.dim()));
        }
        if self.output_norm.dim() != OUTPUT_DIM || self.output_norm.scale.len() != OUTPUT_DIM {
            return Err(Error::dimension(
                "output normalization",
                OUTPUT_DIM,
                self.output_norm.dim(),
            ));
        }
        if !self.parameters_finite() {
            return Err(Error::InvalidState("non-finite network parameter".into()));
        }
        Ok(())
    }

    fn parameters_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
            && self
                .input_norm
                .offset
                .iter()
                .chain(&self.input_norm.scale)
                .chain(&self.output_norm.offset)
                .chain(&self.output_norm.scale)
                .all(|v| v.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Runs the network on normalized inputs (one sample per column) and returns
    /// normalized outputs.
    pub fn forward_normalized(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut act = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * &act;
            let activation = self.activations.get(i).copied().unwrap_or(Activation::Linear);
            for mut col in z.column_iter_mut() {
                for (v, b) in col.iter_mut().zip(layer.bias.iter()) {
                    *v = activation.apply(*v + b);
                }
            }
            act = z;
        }
        act
    }

    pub(crate) fn forward_cached(&self, inputs: &DMatrix<f64>) -> ForwardCache {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(inputs.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * outputs.last().expect("nonempty");
            let activation = self.activations.get(i).copied().unwrap_or(Activation::Linear);
            for mut col in z.column_iter_mut() {
                for (v, b) in col.iter_mut().zip(layer.bias.iter()) {
                    *v = activation.apply(*v + b);
                }
            }
            outputs.push(z);
        }
        ForwardCache { outputs }
    }

    /// Backpropagates `d loss / d output` (normalized space, one column per
    /// sample) and accumulates summed parameter gradients into `grads`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: DMatrix<f64>,
        grads: &mut Gradients,
    ) {
        let mut delta = output_grad;
        for l in (0..self.layers.len()).rev() {
            let activation = self.activations.get(l).copied().unwrap_or(Activation::Linear);
            let out = &cache.outputs[l + 1];
            if activation != Activation::Linear {
                for (d, a) in delta.iter_mut().zip(out.iter()) {
                    *d *= activation.derivative_from_output(*a);
                }
            }
            let input = &cache.outputs[l];
            grads.weights[l].gemm(1.0, &delta, &input.transpose(), 1.0);
            grads.bias[l] += delta.column_sum();
            if l > 0 {
                delta = self.layers[l].weights.transpose() * &delta;
            }
        }
    }

    /// Raw state derivative for a batch: rows 0..4 of `inputs` are states,
    /// rows 4..6 controls, one sample per column.
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if inputs.nrows() != INPUT_DIM {
            return Err(Error::dimension("network batch input", INPUT_DIM, inputs.nrows()));
        }
        if self.layers.first().map(|l| l.inputs()) != Some(INPUT_DIM) {
            return Err(Error::dimension(
                "network input",
                INPUT_DIM,
                self.layers.first().map_or(0, |l| l.inputs()),
            ));
        }
        let normalized = self.input_norm.normalize_batch(inputs);
        let mut out = self.forward_normalized(&normalized);
        if out.nrows() != OUTPUT_DIM {
            return Err(Error::dimension("network output", OUTPUT_DIM, out.nrows()));
        }
        self.output_norm.denormalize_batch(&mut out);
        Ok(out)
    }

    pub fn to_file_format(&self) -> MlpFile {
        MlpFile {
            format_version: FORMAT_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.outputs(),
                    cols: l.inputs(),
                    // nalgebra is column-major; the file is row-major
                    weights: l.weights.transpose().as_slice().to_vec(),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
            activations: self.activations.clone(),
            input_offset: self.input_norm.offset.clone(),
            input_scale: self.input_norm.scale.clone(),
            output_offset: self.output_norm.offset.clone(),
            output_scale: self.output_norm.scale.clone(),
        }
    }

    pub fn from_file_format(file: MlpFile) -> Result<Self> {
        if file.format_version != FORMAT_VERSION {
            return Err(Error::config(
                "format_version",
                format!("unsupported version {}", file.format_version),
            ));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.into_iter().enumerate() {
            if l.weights.len() != l.rows * l.cols {
                return Err(Error::dimension(
                    format!("layers[{i}].weights"),
                    l.rows * l.cols,
                    l.weights.len(),
                ));
            }
            if l.bias.len() != l.rows {
                return Err(Error::dimension(format!("layers[{i}].bias"), l.rows, l.bias.len()));
            }
            layers.push(DenseLayer {
                weights: DMatrix::from_row_slice(l.rows, l.cols, &l.weights),
                bias: DVector::from_vec(l.bias),
            });
        }
        let model = MlpModel {
            layers,
            activations: file.activations,
            input_norm: Normalization {
                offset: file.input_offset,
                scale: file.input_scale,
            },
            output_norm: Normalization {
                offset: file.output_offset,
                scale: file.output_scale,
            },
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file_format())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file_format(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk JSON layout of [`MlpModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpFile {
    pub format_version: u32,
    pub layers: Vec<LayerFile>,
    pub activations: Vec<Activation>,
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_offset: Vec<f64>,
    pub output_scale: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFile {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}
