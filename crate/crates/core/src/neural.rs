//! Small feed-forward networks with exact backpropagation, Adam and
//! per-layer freezing.
//!
//! Inputs are processed in row-major batches (`batch × features`). Weight
//! matrices are stored `out × in`.
//!
//! # Weight file layout
//!
//! All integers and floats little-endian:
//!
//! ```text
//! magic     8 bytes   b"SNMLP\0\0\0"
//! version   u32       currently 1
//! head      u8        0 = softmax policy, 1 = scalar value
//! n_layers  u32
//! n_layers × { in: u32, out: u32, activation: u8 (0 tanh, 1 identity), frozen: u8 }
//! n_layers × { weights: out*in f64 row-major, biases: out f64 }
//! ```

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const WEIGHTS_MAGIC: [u8; 8] = *b"SNMLP\0\0\0";
pub const WEIGHTS_VERSION: u32 = 1;

/// Hidden width of the default policy and value networks.
pub const HIDDEN_WIDTH: usize = 64;
pub const HIDDEN_LAYERS: usize = 3;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("input has non-finite component at index {0}")]
    NonFiniteInput(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("cannot freeze {requested} layers: network has {hidden} hidden layers")]
    InvalidFreeze { requested: usize, hidden: usize },
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0} (expected {WEIGHTS_VERSION})")]
    UnsupportedVersion(u32),
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    SoftmaxPolicy,
    ScalarValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
    pub frozen: bool,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNetwork {
    layers: Vec<Layer>,
    head: Head,
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    /// Post-activation output of every layer; the last entry holds logits.
    activations: Vec<Array2<f64>>,
    head: Head,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    /// Final-layer outputs before the softmax (`batch × outputs`).
    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.activations.last().expect("network has layers").view()
    }

    /// Softmax probabilities for policy heads, the raw scalar for value heads.
    pub fn outputs(&self) -> Array2<f64> {
        let logits = self.logits();
        match self.head {
            Head::ScalarValue => logits.to_owned(),
            Head::SoftmaxPolicy => {
                let mut out = logits.to_owned();
                for mut row in out.rows_mut() {
                    let p = softmax(row.as_slice().expect("standard layout"));
                    row.assign(&ArrayView1::from(&p));
                }
                out
            }
        }
    }
}

/// Parameter-shaped gradient or moment buffer for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl LayerGrad {
    fn zeros_like(layer: &Layer) -> Self {
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            biases: Array1::zeros(layer.biases.raw_dim()),
        }
    }
}

pub type Gradients = Vec<LayerGrad>;

impl MlpNetwork {
    /// Tanh hidden layers and a linear output layer. Weights are drawn
    /// uniformly with variance `gain² / fan_in`: gain √2 for hidden layers,
    /// 0.01 for a policy output and 1 for a value output. Biases start at 0.
    pub fn new(sizes: &[usize], head: Head, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let last = i + 1 == n;
                let gain = match (last, head) {
                    (false, _) => std::f64::consts::SQRT_2,
                    (true, Head::SoftmaxPolicy) => 0.01,
                    (true, Head::ScalarValue) => 1.0,
                };
                let limit = gain * (3.0 / fan_in as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-limit..=limit)),
                    biases: Array1::zeros(fan_out),
                    activation: if last { Activation::Identity } else { Activation::Tanh },
                    frozen: false,
                }
            })
            .collect();
        Self { layers, head }
    }

    /// `inputs → 64 → 64 → 64 → n_actions`, softmax head.
    pub fn policy(inputs: usize, n_actions: usize, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![inputs];
        sizes.extend([HIDDEN_WIDTH; HIDDEN_LAYERS]);
        sizes.push(n_actions);
        Self::new(&sizes, Head::SoftmaxPolicy, rng)
    }

    /// `inputs → 64 → 64 → 64 → 1`, scalar head.
    pub fn value(inputs: usize, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![inputs];
        sizes.extend([HIDDEN_WIDTH; HIDDEN_LAYERS]);
        sizes.push(1);
        Self::new(&sizes, Head::ScalarValue, rng)
    }

    /// Builds a network from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<Layer>, head: Head) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(NeuralError::ShapeMismatch {
                expected: "at least one layer".into(),
                got: "none".into(),
            });
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(NeuralError::ShapeMismatch {
                    expected: format!("layer {} to take {} inputs", i + 1, pair[0].outputs()),
                    got: pair[1].inputs().to_string(),
                });
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.biases.len() != l.outputs() {
                return Err(NeuralError::ShapeMismatch {
                    expected: format!("layer {i} bias length {}", l.outputs()),
                    got: l.biases.len().to_string(),
                });
            }
        }
        if head == Head::ScalarValue && layers.last().is_some_and(|l| l.outputs() != 1) {
            return Err(NeuralError::ShapeMismatch {
                expected: "value head with 1 output".into(),
                got: layers.last().map_or(0, Layer::outputs).to_string(),
            });
        }
        Ok(Self { layers, head })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Direct parameter access; shapes must be preserved by the caller.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    /// Layer sizes from input to output.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::outputs))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Batched forward pass over `batch × input_dim` rows.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache, NeuralError> {
        if inputs.ncols() != self.input_dim() {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("{} input columns", self.input_dim()),
                got: inputs.ncols().to_string(),
            });
        }
        if let Some(i) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(NeuralError::NonFiniteInput(i % self.input_dim()));
        }
        let mut activations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let prev = activations.last().map_or(inputs.view(), |a: &Array2<f64>| a.view());
            let mut z = prev.dot(&layer.weights.t());
            z += &layer.biases;
            if layer.activation == Activation::Tanh {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(z);
        }
        Ok(ForwardCache {
            input: inputs.to_owned(),
            activations,
            head: self.head,
        })
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<ForwardCache, NeuralError> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("contiguous slice");
        self.forward_batch(view)
    }

    /// Final-layer outputs for one input, before any softmax.
    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        Ok(self.forward(input)?.logits().row(0).to_vec())
    }

    /// Reverse-mode gradients of `Σ_b Σ_k grad_logits[b,k] · logits[b,k]`
    /// with respect to every parameter. Frozen layers get zero blocks.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: ArrayView2<'_, f64>,
    ) -> Result<Gradients, NeuralError> {
        let expected = (cache.batch_size(), self.output_dim());
        if grad_logits.dim() != expected || cache.activations.len() != self.layers.len() {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("{expected:?} output gradient"),
                got: format!("{:?}", grad_logits.dim()),
            });
        }
        let mut grads: Gradients = self.layers.iter().map(LayerGrad::zeros_like).collect();
        // nothing below the lowest trainable layer needs a delta
        let Some(lowest_trainable) = self.layers.iter().position(|l| !l.frozen) else {
            return Ok(grads);
        };
        let mut delta = grad_logits.to_owned();
        for i in (lowest_trainable..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i + 1 < self.layers.len() && layer.activation == Activation::Tanh {
                Zip::from(&mut delta)
                    .and(&cache.activations[i])
                    .for_each(|d, &a| *d *= 1.0 - a * a);
            }
            let below = if i == 0 {
                cache.input.view()
            } else {
                cache.activations[i - 1].view()
            };
            if !layer.frozen {
                grads[i].weights = delta.t().dot(&below);
                grads[i].biases = delta.sum_axis(Axis(0));
            }
            if i > lowest_trainable {
                delta = delta.dot(&layer.weights);
            }
        }
        Ok(grads)
    }

    /// Marks the first `k` hidden layers frozen and the rest trainable.
    pub fn freeze_layers(&mut self, k: usize) -> Result<(), NeuralError> {
        let hidden = self.hidden_layers();
        if k > hidden {
            return Err(NeuralError::InvalidFreeze { requested: k, hidden });
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.frozen = i < k && i < hidden;
        }
        Ok(())
    }

    pub fn frozen_mask(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.frozen).collect()
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<(), NeuralError> {
        let mut buf = Vec::with_capacity(64 + 8 * self.parameter_count());
        self.write_weights(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_weights(path: impl AsRef<Path>) -> Result<Self, NeuralError> {
        let bytes = std::fs::read(path)?;
        Self::read_weights(&mut bytes.as_slice())
    }

    pub fn write_weights(&self, w: &mut impl Write) -> Result<(), NeuralError> {
        w.write_all(&WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        w.write_all(&[match self.head {
            Head::SoftmaxPolicy => 0,
            Head::ScalarValue => 1,
        }])?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.inputs() as u32).to_le_bytes())?;
            w.write_all(&(l.outputs() as u32).to_le_bytes())?;
            w.write_all(&[
                match l.activation {
                    Activation::Tanh => 0,
                    Activation::Identity => 1,
                },
                l.frozen as u8,
            ])?;
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(l.biases.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_weights(r: &mut impl Read) -> Result<Self, NeuralError> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if magic != WEIGHTS_MAGIC {
            return Err(NeuralError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != WEIGHTS_VERSION {
            return Err(NeuralError::UnsupportedVersion(version));
        }
        let head = match read_u8(r)? {
            0 => Head::SoftmaxPolicy,
            1 => Head::ScalarValue,
            h => return Err(NeuralError::Corrupt(format!("unknown head tag {h}"))),
        };
        let n_layers = read_u32(r)? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(NeuralError::Corrupt(format!("implausible layer count {n_layers}")));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let inputs = read_u32(r)? as usize;
            let outputs = read_u32(r)? as usize;
            if inputs == 0 || outputs == 0 || inputs > 1 << 20 || outputs > 1 << 20 {
                return Err(NeuralError::Corrupt(format!("layer {i} has shape {outputs}x{inputs}")));
            }
            let activation = match read_u8(r)? {
                0 => Activation::Tanh,
                1 => Activation::Identity,
                a => return Err(NeuralError::Corrupt(format!("layer {i} activation tag {a}"))),
            };
            let frozen = match read_u8(r)? {
                0 => false,
                1 => true,
                f => return Err(NeuralError::Corrupt(format!("layer {i} frozen flag {f}"))),
            };
            shapes.push((inputs, outputs, activation, frozen));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (inputs, outputs, activation, frozen) in shapes {
            let weights = (0..inputs * outputs)
                .map(|_| read_f64(r))
                .collect::<Result<Vec<_>, _>>()?;
            let biases = (0..outputs).map(|_| read_f64(r)).collect::<Result<Vec<_>, _>>()?;
            layers.push(Layer {
                weights: Array2::from_shape_vec((outputs, inputs), weights).expect("sized above"),
                biases: Array1::from(biases),
                activation,
                frozen,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(NeuralError::Corrupt("trailing bytes after parameters".into()));
        }
        Self::from_layers(layers, head)
    }

    /// Errors unless the network has exactly these layer sizes and head.
    pub fn expect_shape(&self, sizes: &[usize], head: Head) -> Result<(), NeuralError> {
        if self.sizes() != sizes || self.head != head {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("{head:?} {sizes:?}"),
                got: format!("{:?} {:?}", self.head, self.sizes()),
            });
        }
        Ok(())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), NeuralError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NeuralError::Corrupt("file truncated".into()),
        _ => NeuralError::Io(e),
    })
}

fn read_u8(r: &mut impl Read) -> Result<u8, NeuralError> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32, NeuralError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, NeuralError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<LayerGrad>,
    second: Vec<LayerGrad>,
}

impl AdamState {
    pub fn new(net: &MlpNetwork, lr: f64) -> Self {
        let zeros: Vec<LayerGrad> = net.layers.iter().map(LayerGrad::zeros_like).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Zeroes both moment estimates of one layer.
    pub fn reset_layer(&mut self, layer: usize) {
        for m in [&mut self.first[layer], &mut self.second[layer]] {
            m.weights.fill(0.0);
            m.biases.fill(0.0);
        }
    }

    pub fn first_moments(&self) -> &[LayerGrad] {
        &self.first
    }

    pub fn second_moments(&self) -> &[LayerGrad] {
        &self.second
    }
}

/// One Adam update of every trainable layer.
pub fn adam_step(net: &mut MlpNetwork, grads: &[LayerGrad], state: &mut AdamState) -> Result<(), NeuralError> {
    if grads.len() != net.layers.len() || state.first.len() != net.layers.len() {
        return Err(NeuralError::ShapeMismatch {
            expected: format!("{} gradient blocks", net.layers.len()),
            got: grads.len().to_string(),
        });
    }
    for (g, l) in grads.iter().zip(&net.layers) {
        if g.weights.raw_dim() != l.weights.raw_dim() || g.biases.raw_dim() != l.biases.raw_dim() {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("{:?}", l.weights.dim()),
                got: format!("{:?}", g.weights.dim()),
            });
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let t = state.step as i32;
    let lr_t = state.lr / (1.0 - b1.powi(t));
    let v_corr = 1.0 - b2.powi(t);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr_t * *m / ((*v / v_corr).sqrt() + eps);
    };
    for (i, layer) in net.layers.iter_mut().enumerate() {
        if layer.frozen {
            continue;
        }
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        Zip::from(&mut layer.weights)
            .and(&grads[i].weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        Zip::from(&mut layer.biases)
            .and(&grads[i].biases)
            .and(&mut m.biases)
            .and(&mut v.biases)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}
