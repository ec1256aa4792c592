//! Feed-forward networks recorded on the autodiff tape.
//!
//! Two architectures are used by the experiment models: small sigmoid MLPs
//! for the manifold surrogates and wider ReLU MLPs for the network closures.
//! Initialization is Glorot-uniform with zero biases, deterministic per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, TapeError, Value};
use crate::data::{Checkpoint, TensorData};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid MLP config: {0}")]
    InvalidConfig(String),
    #[error("input has dimension {got}, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("checkpoint tensor {name}: {message}")]
    BadCheckpoint { name: String, message: String },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Linear,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input dimension first, output dimension last.
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: OutputActivation,
    pub seed: u64,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_sizes.len() < 2 {
            return Err(NnError::InvalidConfig(format!(
                "need at least input and output sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if let Some(bad) = self.layer_sizes.iter().position(|&s| s == 0) {
            return Err(NnError::InvalidConfig(format!(
                "layer {bad} has size 0"
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total trainable entries: sum of n_i*n_{i+1} + n_{i+1}.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    w: Value,
    b: Value,
    in_dim: usize,
    out_dim: usize,
}

/// MLP weights and biases registered as trainable tape parameters.
#[derive(Clone, Debug)]
pub struct MlpParams {
    layers: Vec<DenseLayer>,
    config: MlpConfig,
}

/// Registers Glorot-uniform weights and zero biases on the tape.
/// Two calls with the same config produce bit-identical parameters.
pub fn mlp_init(tape: &mut Tape, config: &MlpConfig) -> Result<MlpParams, NnError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layers = Vec::with_capacity(config.layer_sizes.len() - 1);
    for pair in config.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        let w = tape.param(fan_out, fan_in, &weights)?;
        let b = tape.param_vector(&vec![0.0; fan_out])?;
        layers.push(DenseLayer {
            w,
            b,
            in_dim: fan_in,
            out_dim: fan_out,
        });
    }
    Ok(MlpParams {
        layers,
        config: config.clone(),
    })
}

impl MlpParams {
    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum()
    }

    /// Tensor handles as (name, value) pairs: w0, b0, w1, b1, ...
    pub fn tensors(&self) -> Vec<(String, Value)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("w{i}"), l.w));
            out.push((format!("b{i}"), l.b));
        }
        out
    }

    /// Copies this network's tensors into a checkpoint under `prefix.`.
    pub fn store(&self, tape: &Tape, prefix: &str, ck: &mut Checkpoint) {
        for (name, v) in self.tensors() {
            let shape = tape.shape(v);
            ck.tensors.insert(
                format!("{prefix}.{name}"),
                TensorData {
                    rows: shape.rows,
                    cols: shape.cols,
                    data: tape.value(v).to_vec(),
                },
            );
        }
    }

    /// Loads tensors stored by [`MlpParams::store`] back into the tape.
    pub fn restore(&self, tape: &mut Tape, prefix: &str, ck: &Checkpoint) -> Result<(), NnError> {
        for (name, v) in self.tensors() {
            let key = format!("{prefix}.{name}");
            let t = ck
                .tensors
                .get(&key)
                .ok_or_else(|| NnError::BadCheckpoint {
                    name: key.clone(),
                    message: "missing from checkpoint".into(),
                })?;
            let shape = tape.shape(v);
            if t.rows != shape.rows || t.cols != shape.cols || t.data.len() != shape.len() {
                return Err(NnError::BadCheckpoint {
                    name: key,
                    message: format!(
                        "shape {}x{} does not match model {}",
                        t.rows, t.cols, shape
                    ),
                });
            }
            tape.set_param(v, &t.data)?;
        }
        Ok(())
    }
}

/// Forward pass. The input must be a vector node of the configured input
/// dimension; the result is a vector node of the output dimension.
pub fn mlp_forward(tape: &mut Tape, params: &MlpParams, input: Value) -> Result<Value, NnError> {
    let shape = tape.shape(input);
    if shape.cols != 1 || shape.rows != params.config.input_dim() {
        return Err(NnError::DimensionMismatch {
            expected: params.config.input_dim(),
            got: shape.len(),
        });
    }
    let n_layers = params.layers.len();
    let mut h = input;
    for (i, layer) in params.layers.iter().enumerate() {
        let a = tape.affine(layer.w, h, layer.b)?;
        let last = i + 1 == n_layers;
        h = if last {
            match params.config.output_activation {
                OutputActivation::Linear => a,
                OutputActivation::Sigmoid => tape.sigmoid(a)?,
            }
        } else {
            match params.config.hidden_activation {
                Activation::Sigmoid => tape.sigmoid(a)?,
                Activation::Relu => tape.relu(a)?,
            }
        };
    }
    Ok(h)
}
