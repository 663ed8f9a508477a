//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! A [`SmoothNet`] is a stack of affine layers. Every layer but the last is
//! followed by an [`Activation`]; the last layer produces logits (or a scalar
//! prediction) consumed by the [`Head`].
//!
//! Gradients are available with respect to the parameters
//! ([`SmoothNet::grad_theta`]) and the input features
//! ([`SmoothNet::grad_input`]). The flat parameter order is fixed: layer by
//! layer, weights row-major (`out x in`) followed by the bias.
//!
//! ReLU is differentiated with the zero branch at a pre-activation of exactly
//! 0. Certified guarantees need a smooth loss, so ReLU models are supported for
//! comparison only.
//!
//! # Checkpoint schema
//!
//! Models are stored as JSON (`serde_json`, pretty printed, UTF-8):
//!
//! ```text
//! {
//!   "format": "wrm-smoothnet",
//!   "version": 1,
//!   "head": {"kind": "softmax_cross_entropy", "classes": K} | {"kind": "squared_error"},
//!   "activations": ["elu" | "relu" | "sigmoid", ...],   // one per hidden layer
//!   "layers": [{"in": n, "out": m, "weights": [m*n floats, row-major], "bias": [m floats]}, ...]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is lossless.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "wrm-smoothnet";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Label of a data point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    /// Unsupervised point: the whole sample is the feature vector.
    None,
    Class(usize),
    Value(f64),
}

/// A data point `z = (x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Label,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: Label) -> Self {
        Self { x, y }
    }

    pub fn class(x: Vec<f64>, class: usize) -> Self {
        Self::new(x, Label::Class(class))
    }

    pub fn value(x: Vec<f64>, value: f64) -> Self {
        Self::new(x, Label::Value(value))
    }

    pub fn unlabeled(x: Vec<f64>) -> Self {
        Self::new(x, Label::None)
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Same label, new features.
    pub fn with_x(&self, x: Vec<f64>) -> Self {
        Self {
            x,
            y: self.y.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Exponential linear unit with scale 1.
    Elu,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Elu => {
                if v > 0.0 {
                    v
                } else {
                    v.exp_m1()
                }
            }
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Elu => {
                if v > 0.0 {
                    1.0
                } else {
                    v.exp()
                }
            }
            // zero branch at exactly 0
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
        }
    }

    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu" => Ok(Activation::Elu),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    SoftmaxCrossEntropy { classes: usize },
    /// `0.5 * (prediction - y)^2` on a single output.
    SquaredError,
}

impl Head {
    fn output_dim(self) -> usize {
        match self {
            Head::SoftmaxCrossEntropy { classes } => classes,
            Head::SquaredError => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    #[serde(rename = "in")]
    pub in_dim: usize,
    #[serde(rename = "out")]
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != in_dim * out_dim {
            return Err(Error::DimensionMismatch {
                context: "layer weights",
                expected: in_dim * out_dim,
                got: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                context: "layer bias",
                expected: out_dim,
                got: bias.len(),
            });
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.in_dim.max(1))) {
            *o += row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    head: Head,
    activations: Vec<Activation>,
    layers: Vec<DenseLayer>,
}

/// Dense feed-forward network with a smooth (or ReLU) activation per hidden
/// layer and a loss head.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothNet {
    layers: Vec<DenseLayer>,
    activations: Vec<Activation>,
    head: Head,
}

/// Cached forward pass: `inputs[i]` feeds layer `i`, `pre[i]` is its affine output.
struct ForwardTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl SmoothNet {
    pub fn new(layers: Vec<DenseLayer>, activations: Vec<Activation>, head: Head) -> Result<Self> {
        let net = Self {
            layers,
            activations,
            head,
        };
        net.validate()?;
        Ok(net)
    }

    /// Network with layer sizes `dims` (input first), all parameters zero.
    pub fn zeros(dims: &[usize], activation: Activation, head: Head) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidModel {
                message: "need at least input and output dimensions".into(),
            });
        }
        let layers = dims.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect();
        Self::new(layers, vec![activation; dims.len() - 2], head)
    }

    /// Uniform initialization on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` from a
    /// xoshiro256++ stream keyed by `seed`.
    pub fn init(dims: &[usize], activation: Activation, head: Head, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims, activation, head)?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.in_dim as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |message: String| Err(Error::InvalidModel { message });
        if self.layers.is_empty() {
            return invalid("no layers".into());
        }
        if self.activations.len() + 1 != self.layers.len() {
            return invalid(format!(
                "{} layers need {} activations, got {}",
                self.layers.len(),
                self.layers.len() - 1,
                self.activations.len()
            ));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return invalid(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                ));
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.len() != layer.in_dim * layer.out_dim || layer.bias.len() != layer.out_dim {
                return invalid(format!("layer {i} has inconsistent parameter lengths"));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return invalid(format!("layer {i} has non-finite parameters"));
            }
        }
        let out = self.layers.last().map(|l| l.out_dim).unwrap_or(0);
        if let Head::SoftmaxCrossEntropy { classes } = self.head {
            if classes < 2 {
                return invalid("softmax head needs at least 2 classes".into());
            }
        }
        if out != self.head.output_dim() {
            return invalid(format!(
                "head expects {} outputs, last layer has {out}",
                self.head.output_dim()
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    /// True when every activation is smooth (no ReLU).
    pub fn is_smooth(&self) -> bool {
        self.activations.iter().all(|a| a.is_smooth())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    /// Flat parameter vector in canonical order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// `theta <- theta - step * direction`.
    pub fn descend(&mut self, direction: &[f64], step: f64) -> Result<()> {
        let mut params = self.params();
        if direction.len() != params.len() {
            return Err(Error::DimensionMismatch {
                context: "update direction",
                expected: params.len(),
                got: direction.len(),
            });
        }
        for (p, d) in params.iter_mut().zip(direction) {
            *p -= step * d;
        }
        self.set_params(&params)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "sample features",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "sample features" });
        }
        Ok(())
    }

    fn check_label(&self, y: &Label) -> Result<()> {
        match (self.head, y) {
            (Head::SoftmaxCrossEntropy { classes }, Label::Class(k)) if *k < classes => Ok(()),
            (Head::SquaredError, Label::Value(v)) if v.is_finite() => Ok(()),
            (head, y) => Err(Error::InvalidLabel {
                message: format!("{y:?} is not valid for {head:?}"),
            }),
        }
    }

    fn forward_trace(&self, x: &[f64]) -> ForwardTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&current);
            let next = match self.activations.get(i) {
                Some(act) => z.iter().map(|&v| act.apply(v)).collect(),
                None => z.clone(),
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre.push(z);
        }
        ForwardTrace { inputs, pre }
    }

    /// Raw network outputs (logits or the scalar prediction).
    pub fn outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.forward_trace(x);
        let out = trace.pre.last().cloned().unwrap_or_default();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "forward pass" });
        }
        Ok(out)
    }

    /// Predicted class (argmax of logits, lowest index on ties).
    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        let out = self.outputs(x)?;
        Ok(argmax(&out))
    }

    /// Whether the model misclassifies `z`; regression samples never count.
    pub fn misclassified(&self, z: &Sample) -> Result<bool> {
        match z.y {
            Label::Class(k) => Ok(self.predict_class(&z.x)? != k),
            _ => Ok(false),
        }
    }

    /// Loss value and gradient of the loss with respect to the final outputs.
    fn head_loss(&self, out: &[f64], y: &Label) -> (f64, Vec<f64>) {
        match (self.head, y) {
            (Head::SoftmaxCrossEntropy { .. }, Label::Class(k)) => {
                let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = out.iter().map(|o| (o - max).exp()).sum();
                let lse = max + sum.ln();
                let grad = out
                    .iter()
                    .enumerate()
                    .map(|(i, o)| (o - lse).exp() - if i == *k { 1.0 } else { 0.0 })
                    .collect();
                (lse - out[*k], grad)
            }
            (Head::SquaredError, Label::Value(target)) => {
                let r = out[0] - target;
                (0.5 * r * r, vec![r])
            }
            _ => unreachable!("label checked before evaluation"),
        }
    }

    pub fn loss(&self, z: &Sample) -> Result<f64> {
        self.check_input(&z.x)?;
        self.check_label(&z.y)?;
        let trace = self.forward_trace(&z.x);
        let (loss, _) = self.head_loss(trace.pre.last().unwrap(), &z.y);
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: "loss" });
        }
        Ok(loss)
    }

    /// Loss plus optional parameter and input gradients in one reverse sweep.
    pub fn loss_and_grads(
        &self,
        z: &Sample,
        want_theta: bool,
        want_input: bool,
    ) -> Result<(f64, Option<Vec<f64>>, Option<Vec<f64>>)> {
        self.check_input(&z.x)?;
        self.check_label(&z.y)?;
        let trace = self.forward_trace(&z.x);
        let (loss, mut delta) = self.head_loss(trace.pre.last().unwrap(), &z.y);
        if !loss.is_finite() || delta.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite { context: "loss" });
        }

        let mut theta_grad = want_theta.then(|| vec![0.0; self.num_params()]);
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.num_params();
                Some(start)
            })
            .collect();

        let mut input_grad = None;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &trace.inputs[i];
            if let Some(g) = theta_grad.as_mut() {
                let base = offsets[i];
                for (o, d) in delta.iter().enumerate() {
                    let row = &mut g[base + o * layer.in_dim..base + (o + 1) * layer.in_dim];
                    for (gw, v) in row.iter_mut().zip(input) {
                        *gw = d * v;
                    }
                }
                let bias_base = base + layer.weights.len();
                g[bias_base..bias_base + layer.out_dim].copy_from_slice(&delta);
            }
            if i == 0 && !want_input {
                break;
            }
            let mut back = vec![0.0; layer.in_dim];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            if i == 0 {
                input_grad = Some(back);
            } else {
                let act = self.activations[i - 1];
                for (b, z) in back.iter_mut().zip(&trace.pre[i - 1]) {
                    *b *= act.derivative(*z);
                }
                delta = back;
            }
        }
        Ok((loss, theta_grad, input_grad))
    }

    pub fn grad_theta(&self, z: &Sample) -> Result<Vec<f64>> {
        Ok(self.loss_and_grads(z, true, false)?.1.unwrap())
    }

    pub fn grad_input(&self, z: &Sample) -> Result<Vec<f64>> {
        Ok(self.loss_and_grads(z, false, true)?.2.unwrap())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            head: self.head,
            activations: self.activations.clone(),
            layers: self.layers.clone(),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidModel {
                message: format!(
                    "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                    ck.format, ck.version
                ),
            });
        }
        Self::new(ck.layers, ck.activations, ck.head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
