//! Local training: softmax MLP forward pass, mean cross-entropy, analytic
//! gradients, and seeded minibatch SGD.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::dataset::Dataset;
use crate::params::{Address, LayerShape, ModelConfig, ModelUpdate, ParameterVector, ParamsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("parameter vector has {actual} entries, model expects {expected}")]
    ParamDim { expected: usize, actual: usize },
    #[error("input has {actual} features, model expects {expected}")]
    InputDim { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} output classes")]
    Label { label: usize, classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training spec: {0}")]
    Spec(String),
    #[error("training diverged: {0}")]
    Params(#[from] ParamsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    /// Local epochs per federated round.
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainSpec {
    pub fn validate(&self, n_samples: usize) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Spec("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > n_samples {
            return Err(TrainError::Spec(format!(
                "batch_size {} must be in 1..={n_samples}",
                self.batch_size
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::Spec(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.u32(self.epochs)
            .u32(self.batch_size as u32)
            .f64(self.learning_rate)
            .u64(self.seed);
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(TrainSpec {
            epochs: r.u32()?,
            batch_size: r.u32()? as usize,
            learning_rate: r.f64()?,
            seed: r.u64()?,
        })
    }
}

/// Xavier-uniform weights, zero biases, drawn from `config.seed`.
pub fn init_params(config: &ModelConfig) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed());
    let mut values = vec![0.0; config.param_count()];
    for layer in config.layers() {
        let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
        for w in &mut values[layer.offset..layer.bias_offset()] {
            *w = rng.random_range(-bound..bound);
        }
    }
    ParameterVector::new(values).expect("uniform draws are finite")
}

fn check_params(config: &ModelConfig, p: &ParameterVector) -> Result<(), TrainError> {
    if p.dim() != config.param_count() {
        return Err(TrainError::ParamDim {
            expected: config.param_count(),
            actual: p.dim(),
        });
    }
    Ok(())
}

fn check_data(config: &ModelConfig, data: &Dataset) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if data.input_dim() != config.input_dim() {
        return Err(TrainError::InputDim {
            expected: config.input_dim(),
            actual: data.input_dim(),
        });
    }
    let classes = config.output_dim();
    if let Some(&label) = data.labels().iter().find(|&&l| l >= classes) {
        return Err(TrainError::Label { label, classes });
    }
    Ok(())
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Reusable per-sample buffers: `acts[0]` is the input, `acts[l]` the output
/// of layer `l`. The last entry holds raw logits until softmax is applied.
struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    logits: Vec<f64>,
    shapes: Vec<LayerShape>,
}

impl Workspace {
    fn new(config: &ModelConfig) -> Self {
        let acts = config.layer_sizes().iter().map(|&w| vec![0.0; w]).collect();
        let deltas = config.layer_sizes().iter().map(|&w| vec![0.0; w]).collect();
        Workspace {
            acts,
            deltas,
            logits: vec![0.0; config.output_dim()],
            shapes: config.layers().collect(),
        }
    }

    /// Runs the network on `x`; returns the log-sum-exp of the output logits
    /// and leaves softmax probabilities in the last activation buffer.
    fn forward(&mut self, config: &ModelConfig, p: &[f64], x: &[f64]) -> f64 {
        self.acts[0].copy_from_slice(x);
        let last = config.layer_sizes().len() - 2;
        for (l, layer) in config.layers().enumerate() {
            let (before, after) = self.acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            let weights = &p[layer.offset..layer.bias_offset()];
            let biases = &p[layer.bias_offset()..layer.end()];
            for (o, slot) in out.iter_mut().enumerate() {
                let row = &weights[o * layer.inputs..(o + 1) * layer.inputs];
                let mut z = biases[o];
                for (w, a) in row.iter().zip(input) {
                    z += w * a;
                }
                *slot = if l == last { z } else { config.activation().apply(z) };
            }
        }
        let out = self.acts.last_mut().expect("at least two layers");
        self.logits.copy_from_slice(out);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + out.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        softmax_in_place(out);
        lse
    }

    /// Back-propagates the cross-entropy of the last forward pass and adds
    /// `scale · ∂loss/∂p` into `grad`.
    fn backward(&mut self, config: &ModelConfig, p: &[f64], label: usize, scale: f64, grad: &mut [f64]) {
        let n_layers = config.layer_sizes().len();
        {
            let probs = &self.acts[n_layers - 1];
            let delta = &mut self.deltas[n_layers - 1];
            for (k, (d, &pk)) in delta.iter_mut().zip(probs).enumerate() {
                *d = pk - if k == label { 1.0 } else { 0.0 };
            }
        }
        for (l, layer) in self.shapes.iter().enumerate().rev() {
            let (d_before, d_after) = self.deltas.split_at_mut(l + 1);
            let delta = &d_after[0];
            let input = &self.acts[l];
            let gw = &mut grad[layer.offset..layer.bias_offset()];
            for (o, &d) in delta.iter().enumerate() {
                let sd = scale * d;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += sd * a;
                }
            }
            let gb = &mut grad[layer.bias_offset()..layer.end()];
            for (g, &d) in gb.iter_mut().zip(delta) {
                *g += scale * d;
            }
            if l > 0 {
                let weights = &p[layer.offset..layer.bias_offset()];
                let prev = &mut d_before[l];
                for (i, slot) in prev.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (o, &d) in delta.iter().enumerate() {
                        s += weights[o * layer.inputs + i] * d;
                    }
                    *slot = s * config.activation().derivative_from_output(input[i]);
                }
            }
        }
    }
}

/// Class probabilities for one input row.
pub fn forward(config: &ModelConfig, p: &ParameterVector, x: &[f64]) -> Result<Vec<f64>, TrainError> {
    check_params(config, p)?;
    if x.len() != config.input_dim() {
        return Err(TrainError::InputDim {
            expected: config.input_dim(),
            actual: x.len(),
        });
    }
    let mut ws = Workspace::new(config);
    ws.forward(config, p.as_slice(), x);
    Ok(ws.acts.pop().expect("output layer"))
}

/// Mean cross-entropy over `data`.
pub fn loss(config: &ModelConfig, p: &ParameterVector, data: &Dataset) -> Result<f64, TrainError> {
    check_params(config, p)?;
    check_data(config, data)?;
    let mut ws = Workspace::new(config);
    let mut total = 0.0;
    for i in 0..data.n_samples() {
        let lse = ws.forward(config, p.as_slice(), data.row(i));
        total += lse - ws.logits[data.label(i)];
    }
    Ok(total / data.n_samples() as f64)
}

fn accumulate(
    config: &ModelConfig,
    p: &[f64],
    data: &Dataset,
    indices: &[usize],
    ws: &mut Workspace,
    grad: &mut [f64],
) {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let scale = 1.0 / indices.len() as f64;
    for &i in indices {
        ws.forward(config, p, data.row(i));
        ws.backward(config, p, data.label(i), scale, grad);
    }
}

/// Exact gradient of the mean batch loss.
pub fn gradient(config: &ModelConfig, p: &ParameterVector, batch: &Dataset) -> Result<ParameterVector, TrainError> {
    check_params(config, p)?;
    check_data(config, batch)?;
    let mut ws = Workspace::new(config);
    let mut grad = vec![0.0; p.dim()];
    let indices: Vec<usize> = (0..batch.n_samples()).collect();
    accumulate(config, p.as_slice(), batch, &indices, &mut ws, &mut grad);
    Ok(ParameterVector::new(grad)?)
}

/// Sample order for `epoch`: a Fisher-Yates shuffle driven by ChaCha stream `epoch`.
fn epoch_order(seed: u64, epoch: u32, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(epoch));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs `epochs × ⌈n / batch_size⌉` SGD steps from `start`.
pub fn train_params(
    config: &ModelConfig,
    start: &ParameterVector,
    data: &Dataset,
    spec: &TrainSpec,
) -> Result<ParameterVector, TrainError> {
    check_params(config, start)?;
    check_data(config, data)?;
    spec.validate(data.n_samples())?;

    let mut params = start.as_slice().to_vec();
    let mut grad = vec![0.0; params.len()];
    let mut ws = Workspace::new(config);
    for epoch in 0..spec.epochs {
        let order = epoch_order(spec.seed, epoch, data.n_samples());
        for batch in order.chunks(spec.batch_size) {
            accumulate(config, &params, data, batch, &mut ws, &mut grad);
            for (w, g) in params.iter_mut().zip(&grad) {
                *w -= spec.learning_rate * g;
            }
        }
    }
    Ok(ParameterVector::new(params)?)
}

/// Trains from `start` and packages the result as this client's update.
pub fn train_local(
    config: &ModelConfig,
    start: &ParameterVector,
    data: &Dataset,
    spec: &TrainSpec,
    client_id: Address,
    round: u64,
) -> Result<ModelUpdate, TrainError> {
    let params = train_params(config, start, data, spec)?;
    Ok(ModelUpdate::new(client_id, data.n_samples() as u64, params, round)?)
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate(config: &ModelConfig, p: &ParameterVector, data: &Dataset) -> Result<f64, TrainError> {
    check_params(config, p)?;
    check_data(config, data)?;
    let mut ws = Workspace::new(config);
    let mut correct = 0usize;
    for i in 0..data.n_samples() {
        ws.forward(config, p.as_slice(), data.row(i));
        let probs = ws.acts.last().expect("output layer");
        let mut best = 0;
        for (k, &v) in probs.iter().enumerate() {
            if v > probs[best] {
                best = k;
            }
        }
        correct += usize::from(best == data.label(i));
    }
    Ok(correct as f64 / data.n_samples() as f64)
}
