//! Fully-connected value network trained by mini-batch momentum SGD.
//!
//! Everything is `f64`. Weights are stored row-major per layer
//! (`weights[o * inputs + i]`), biases per output unit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("input has {got} values, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid trainer options: {0}")]
    InvalidOptions(String),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Linear,
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
    ];

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDef {
    pub width: usize,
    pub activation: Activation,
}

impl LayerDef {
    pub fn new(width: usize, activation: Activation) -> Self {
        Self { width, activation }
    }
}

/// Layer widths from input to output. The first entry's activation is unused;
/// the last must be linear (regression head).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerSpec(pub Vec<LayerDef>);

impl LayerSpec {
    pub fn new(input: usize, hidden: &[LayerDef], output: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 2);
        layers.push(LayerDef::new(input, Activation::Linear));
        layers.extend_from_slice(hidden);
        layers.push(LayerDef::new(output, Activation::Linear));
        Self(layers)
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.0.len() < 2 {
            return Err(NeuralError::InvalidSpec("need at least an input and an output layer".into()));
        }
        if let Some(pos) = self.0.iter().position(|l| l.width == 0) {
            return Err(NeuralError::InvalidSpec(format!("layer {pos} has zero width")));
        }
        if self.0.last().map(|l| l.activation) != Some(Activation::Linear) {
            return Err(NeuralError::InvalidSpec("output layer must be linear".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.0[0].width
    }

    pub fn output_width(&self) -> usize {
        self.0[self.0.len() - 1].width
    }

    /// Weights plus biases over all layers.
    pub fn parameter_count(&self) -> usize {
        self.0.windows(2).map(|w| w[0].width * w[1].width + w[1].width).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Dense {
    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.activation.apply(dot(row, input) + self.biases[o]));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    spec: LayerSpec,
    layers: Vec<Dense>,
}

impl QNetwork {
    /// Glorot-uniform weights, zero biases.
    pub fn new(spec: LayerSpec, seed: u64) -> Result<Self, NeuralError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .0
            .windows(2)
            .map(|pair| {
                let (inputs, outputs) = (pair[0].width, pair[1].width);
                let limit = (6.0 / (inputs + outputs) as f64).sqrt();
                Dense {
                    inputs,
                    outputs,
                    activation: pair[1].activation,
                    weights: (0..inputs * outputs).map(|_| rng.gen_range(-limit..limit)).collect(),
                    biases: vec![0.0; outputs],
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let mut scratch = ForwardScratch::default();
        self.forward_with(input, &mut scratch).map(|o| o.to_vec())
    }

    /// Allocation-free forward pass; the returned slice lives in `scratch`.
    pub fn forward_with<'s>(
        &self,
        input: &[f64],
        scratch: &'s mut ForwardScratch,
    ) -> Result<&'s [f64], NeuralError> {
        self.check_input(input)?;
        let (a, b) = (&mut scratch.a, &mut scratch.b);
        self.layers[0].forward_into(input, a);
        for layer in &self.layers[1..] {
            layer.forward_into(a, b);
            std::mem::swap(a, b);
        }
        Ok(&scratch.a)
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NeuralError> {
        if input.len() != self.input_width() {
            return Err(NeuralError::DimensionMismatch {
                expected: self.input_width(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// All parameters flattened: per layer, weights then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        if flat.len() != self.parameter_count() {
            return Err(NeuralError::DimensionMismatch {
                expected: self.parameter_count(),
                got: flat.len(),
            });
        }
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|x| x.is_finite()))
    }

    /// Weight matrices (row-major) and bias vectors, for inspection.
    pub fn layer_params(&self, layer: usize) -> (&[f64], &[f64]) {
        let l = &self.layers[layer];
        (&l.weights, &l.biases)
    }

    pub fn to_checkpoint(&self) -> NetworkCheckpoint {
        NetworkCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layers: self.spec.clone(),
            weights: self.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: self.layers.iter().map(|l| l.biases.clone()).collect(),
        }
    }

    pub fn from_checkpoint(ck: &NetworkCheckpoint) -> Result<Self, NeuralError> {
        let bad = |m: String| NeuralError::InvalidCheckpoint(m);
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format {} v{}", ck.format, ck.version)));
        }
        ck.layers.validate()?;
        let n = ck.layers.0.len() - 1;
        if ck.weights.len() != n || ck.biases.len() != n {
            return Err(bad(format!("expected {n} weight and bias arrays")));
        }
        let mut layers = Vec::with_capacity(n);
        for (k, pair) in ck.layers.0.windows(2).enumerate() {
            let (inputs, outputs) = (pair[0].width, pair[1].width);
            if ck.weights[k].len() != inputs * outputs || ck.biases[k].len() != outputs {
                return Err(bad(format!("layer {k} has the wrong number of parameters")));
            }
            if !ck.weights[k].iter().chain(&ck.biases[k]).all(|x| x.is_finite()) {
                return Err(bad(format!("layer {k} has non-finite parameters")));
            }
            layers.push(Dense {
                inputs,
                outputs,
                activation: pair[1].activation,
                weights: ck.weights[k].clone(),
                biases: ck.biases[k].clone(),
            });
        }
        Ok(Self {
            spec: ck.layers.clone(),
            layers,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "traffic-qnet";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: layer spec plus one flat weight and bias array per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkCheckpoint {
    pub format: String,
    pub version: u32,
    pub layers: LayerSpec,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl NetworkCheckpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NeuralError> {
        serde_json::from_str(text).map_err(|e| NeuralError::InvalidCheckpoint(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerOpts {
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainerOpts {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            l2_decay: 0.0001,
            batch_size: 32,
        }
    }
}

impl TrainerOpts {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::InvalidOptions(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.l2_decay.is_finite() && self.l2_decay >= 0.0) {
            return bad("l2_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// One regression example: only output `action` is pulled toward `target`.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub action: usize,
    pub target: f64,
}

/// Gradients of the mean masked loss, laid out like [`QNetwork::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub flat: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerBuffers {
    grad_w: Vec<f64>,
    grad_b: Vec<f64>,
    vel_w: Vec<f64>,
    vel_b: Vec<f64>,
}

/// Momentum SGD state for one network.
#[derive(Debug, Clone)]
pub struct Trainer {
    opts: TrainerOpts,
    buffers: Vec<LayerBuffers>,
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(opts: TrainerOpts, net: &QNetwork) -> Result<Self, NeuralError> {
        opts.validate()?;
        let buffers = net
            .layers
            .iter()
            .map(|l| LayerBuffers {
                grad_w: vec![0.0; l.weights.len()],
                grad_b: vec![0.0; l.biases.len()],
                vel_w: vec![0.0; l.weights.len()],
                vel_b: vec![0.0; l.biases.len()],
            })
            .collect();
        Ok(Self {
            opts,
            buffers,
            acts: vec![Vec::new(); net.layers.len() + 1],
            deltas: vec![Vec::new(); net.layers.len()],
        })
    }

    pub fn opts(&self) -> &TrainerOpts {
        &self.opts
    }

    /// Accumulate summed gradients of ½(target − Q_a)² into the buffers and
    /// return the summed loss.
    fn accumulate(&mut self, net: &QNetwork, batch: &[Sample<'_>]) -> Result<f64, NeuralError> {
        for b in &mut self.buffers {
            b.grad_w.iter_mut().for_each(|g| *g = 0.0);
            b.grad_b.iter_mut().for_each(|g| *g = 0.0);
        }
        let nl = net.layers.len();
        let mut loss = 0.0;
        for sample in batch {
            net.check_input(sample.input)?;
            if sample.action >= net.output_width() {
                return Err(NeuralError::DimensionMismatch {
                    expected: net.output_width(),
                    got: sample.action,
                });
            }
            self.acts[0].clear();
            self.acts[0].extend_from_slice(sample.input);
            for (l, layer) in net.layers.iter().enumerate() {
                let (prev, next) = self.acts.split_at_mut(l + 1);
                layer.forward_into(&prev[l], &mut next[0]);
            }
            let q = self.acts[nl][sample.action];
            let err = q - sample.target;
            loss += 0.5 * err * err;

            let out_act = net.layers[nl - 1].activation;
            let delta = &mut self.deltas[nl - 1];
            delta.clear();
            delta.resize(net.layers[nl - 1].outputs, 0.0);
            delta[sample.action] = err * out_act.derivative_from_output(q);

            for l in (0..nl).rev() {
                let layer = &net.layers[l];
                let input = &self.acts[l];
                let buf = &mut self.buffers[l];
                let (lower, upper) = self.deltas.split_at_mut(l);
                let delta = &upper[0];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    buf.grad_b[o] += d;
                    let row = &mut buf.grad_w[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, &x) in row.iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
                if l > 0 {
                    let below = &mut lower[l - 1];
                    below.clear();
                    below.resize(layer.inputs, 0.0);
                    for (o, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (acc, &w) in below.iter_mut().zip(row) {
                            *acc += w * d;
                        }
                    }
                    let act = net.layers[l - 1].activation;
                    for (acc, &a) in below.iter_mut().zip(input) {
                        *acc *= act.derivative_from_output(a);
                    }
                }
            }
        }
        Ok(loss)
    }

    /// Mean masked loss and its gradient, without the L2 term and without
    /// touching the network.
    pub fn gradients(&mut self, net: &QNetwork, batch: &[Sample<'_>]) -> Result<Gradients, NeuralError> {
        if batch.is_empty() {
            return Err(NeuralError::InvalidOptions("empty batch".into()));
        }
        let n = batch.len() as f64;
        let loss = self.accumulate(net, batch)? / n;
        let mut flat = Vec::with_capacity(net.parameter_count());
        for b in &self.buffers {
            flat.extend(b.grad_w.iter().map(|g| g / n));
            flat.extend(b.grad_b.iter().map(|g| g / n));
        }
        Ok(Gradients { loss, flat })
    }

    /// One momentum-SGD step on the batch. Returns the mean loss measured
    /// before the step. A non-finite loss or gradient leaves the network as it
    /// was and reports divergence.
    pub fn train_batch(&mut self, net: &mut QNetwork, batch: &[Sample<'_>]) -> Result<f64, NeuralError> {
        if batch.is_empty() {
            return Err(NeuralError::InvalidOptions("empty batch".into()));
        }
        let n = batch.len() as f64;
        let loss = self.accumulate(net, batch)? / n;
        if !loss.is_finite() {
            return Err(NeuralError::Diverged(format!("loss is {loss}")));
        }
        let finite = self
            .buffers
            .iter()
            .all(|b| b.grad_w.iter().chain(&b.grad_b).all(|g| g.is_finite()));
        if !finite {
            return Err(NeuralError::Diverged("non-finite gradient".into()));
        }
        let TrainerOpts {
            learning_rate: lr,
            momentum: mu,
            l2_decay: l2,
            ..
        } = self.opts;
        for (layer, buf) in net.layers.iter_mut().zip(&mut self.buffers) {
            for ((w, v), g) in layer.weights.iter_mut().zip(&mut buf.vel_w).zip(&buf.grad_w) {
                let grad = g / n + l2 * *w;
                *v = mu * *v - lr * grad;
                *w += *v;
            }
            for ((b, v), g) in layer.biases.iter_mut().zip(&mut buf.vel_b).zip(&buf.grad_b) {
                *v = mu * *v - lr * (g / n);
                *b += *v;
            }
        }
        if !net.is_finite() {
            return Err(NeuralError::Diverged("weights became non-finite".into()));
        }
        Ok(loss)
    }
}
