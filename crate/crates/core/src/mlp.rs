//! Fully connected head network: architecture, point weights, forward and
//! backward passes.
//!
//! Hidden layers use a rectifier; the last layer is affine and produces
//! logits. Softmax is left to callers.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Layer widths from input to output, e.g. `[512, 256, 128, 2]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MlpArchitecture {
    dims: Vec<usize>,
}

impl MlpArchitecture {
    pub fn new(dims: Vec<usize>) -> Result<Self, ModelError> {
        if dims.len() < 2 {
            return Err(ModelError::Architecture(format!(
                "need at least 2 layer widths, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(ModelError::Architecture(
                "layer widths must be positive".into(),
            ));
        }
        Ok(MlpArchitecture { dims })
    }

    /// The head used in the reference setup: 512-d features, two hidden
    /// layers, two classes.
    pub fn default_head() -> Self {
        MlpArchitecture {
            dims: vec![512, 256, 128, 2],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    /// `(in, out)` for each affine layer.
    pub fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dims.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().map(|(i, o)| i * o + o).sum()
    }
}

impl TryFrom<Vec<usize>> for MlpArchitecture {
    type Error = ModelError;

    fn try_from(dims: Vec<usize>) -> Result<Self, Self::Error> {
        MlpArchitecture::new(dims)
    }
}

impl From<MlpArchitecture> for Vec<usize> {
    fn from(arch: MlpArchitecture) -> Self {
        arch.dims
    }
}

impl std::fmt::Display for MlpArchitecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// One affine layer. `weights` is row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(
            |(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b,
        ));
    }
}

/// A single deterministic weight assignment for an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct PointNetwork {
    pub architecture: MlpArchitecture,
    pub layers: Vec<Linear>,
}

impl PointNetwork {
    pub fn zeros(architecture: &MlpArchitecture) -> Self {
        let layers = architecture
            .layer_shapes()
            .map(|(i, o)| Linear::zeros(i, o))
            .collect();
        PointNetwork {
            architecture: architecture.clone(),
            layers,
        }
    }

    /// Builds a network from explicit layers, checking every shape.
    pub fn from_layers(
        architecture: MlpArchitecture,
        layers: Vec<Linear>,
    ) -> Result<Self, ModelError> {
        if layers.len() != architecture.layer_count() {
            return Err(ModelError::Shape {
                expected: architecture.layer_count(),
                actual: layers.len(),
            });
        }
        for ((i, o), layer) in architecture.layer_shapes().zip(&layers) {
            if layer.inputs != i || layer.outputs != o {
                return Err(ModelError::Architecture(format!(
                    "layer is {}x{}, architecture wants {}x{}",
                    layer.outputs, layer.inputs, o, i
                )));
            }
            if layer.weights.len() != i * o {
                return Err(ModelError::Shape {
                    expected: i * o,
                    actual: layer.weights.len(),
                });
            }
            if layer.bias.len() != o {
                return Err(ModelError::Shape {
                    expected: o,
                    actual: layer.bias.len(),
                });
            }
        }
        Ok(PointNetwork {
            architecture,
            layers,
        })
    }

    /// Number of allocated weight and bias entries.
    pub fn allocated_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(features)?;
        let mut x = features.to_vec();
        let mut y = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.apply(&x, &mut y);
            if k != last {
                relu_in_place(&mut y);
            }
            std::mem::swap(&mut x, &mut y);
        }
        Ok(x)
    }

    pub fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(softmax(&self.forward(features)?))
    }

    fn check_input(&self, features: &[f64]) -> Result<(), ModelError> {
        if features.len() != self.architecture.input_dim() {
            return Err(ModelError::Shape {
                expected: self.architecture.input_dim(),
                actual: features.len(),
            });
        }
        Ok(())
    }

    /// Negative log-likelihood of `label` for one example, accumulating its
    /// gradient with respect to every weight and bias into `grads`.
    pub(crate) fn nll_backward(
        &self,
        features: &[f64],
        label: usize,
        grads: &mut [Linear],
    ) -> Result<f64, ModelError> {
        self.check_input(features)?;
        let classes = self.architecture.class_count();
        if label >= classes {
            return Err(ModelError::Index {
                index: label,
                len: classes,
            });
        }
        // activations[k] is the input to layer k (post-rectifier).
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        activations.push(features.to_vec());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut y = Vec::new();
            layer.apply(&activations[k], &mut y);
            if k != last {
                relu_in_place(&mut y);
            }
            activations.push(y);
        }
        let logits = activations.pop().unwrap();
        let log_probs = log_softmax(&logits);
        let loss = -log_probs[label];

        // dL/dlogits = softmax - onehot
        let mut delta: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        delta[label] -= 1.0;

        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &activations[k];
            let g = &mut grads[k];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] += d;
                if *d != 0.0 {
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, x) in row.iter_mut().zip(input) {
                        *gw += d * x;
                    }
                }
            }
            if k == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // rectifier derivative, taken as 0 at exactly 0
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        Ok(loss)
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// `ln(1 + e^x)`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], i.e. the logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}
