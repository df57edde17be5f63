//! Dense MLP encoder/classifier over a flat parameter vector.
//!
//! Each layer computes `h = act(W h_prev + b)`; the last layer emits logits
//! that feed a softmax cross-entropy loss. Training is plain mini-batch SGD
//! so results are a pure function of the seed.

mod dataset;
mod params;

pub use dataset::Dataset;
pub use params::{Block, LayerBlocks, Layout, ParamVector};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_from_seed;

pub type ClientId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
            Activation::Identity => 1.0,
        }
    }
}

/// Layer widths `[input, hidden..., classes]` and one activation per hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { layer_dims: vec![20, 32, 4], activations: vec![Activation::Relu] }
    }
}

impl EncoderConfig {
    pub fn new(layer_dims: Vec<usize>, activations: Vec<Activation>) -> Result<EncoderConfig> {
        let cfg = EncoderConfig { layer_dims, activations };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(invalid("layer_dims needs at least an input and an output width"));
        }
        if self.layer_dims.contains(&0) {
            return Err(invalid("layer widths must be at least 1"));
        }
        if self.activations.len() != self.layer_dims.len() - 2 {
            return Err(invalid(format!(
                "{} hidden layers need {} activations, got {}",
                self.layer_dims.len() - 2,
                self.layer_dims.len() - 2,
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn layout(&self) -> Layout {
        Layout::for_dims(&self.layer_dims)
    }

    fn activation(&self, layer: usize) -> Activation {
        self.activations.get(layer).copied().unwrap_or(Activation::Identity)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let layout = self.layout();
        let mut params = ParamVector::zeros(layout.clone());
        let mut rng = rng_from_seed(seed);
        for layer in layout.layers() {
            let w = layer.weight;
            let limit = (6.0 / (w.rows + w.cols) as f64).sqrt();
            for v in &mut params.values_mut()[w.range()] {
                *v = rng.random_range(-limit..limit);
            }
        }
        params
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if *params.layout() != self.layout() {
            return Err(Error::Shape(format!(
                "parameters ({}) do not match encoder layout ({})",
                params.len(),
                self.layout().total()
            )));
        }
        Ok(())
    }
}

fn affine(params: &ParamVector, layer: usize, input: &[f64], out: &mut Vec<f64>) {
    let blocks = params.layout().layers()[layer];
    let w = params.weight(layer);
    let b = params.bias(layer);
    let cols = blocks.weight.cols;
    out.clear();
    out.extend((0..blocks.weight.rows).map(|r| {
        let row = &w[r * cols..(r + 1) * cols];
        row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>() + b[r]
    }));
}

fn forward_unchecked(x: &[f64], params: &ParamVector, cfg: &EncoderConfig) -> Vec<Vec<f64>> {
    let layers = cfg.num_layers();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers);
    for l in 0..layers {
        let input = if l == 0 { x } else { acts[l - 1].as_slice() };
        let mut h = Vec::new();
        affine(params, l, input, &mut h);
        if l + 1 < layers {
            let act = cfg.activation(l);
            h.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        acts.push(h);
    }
    acts
}

/// Per-layer activations `h^(1..L)`; the last entry holds the logits.
pub fn forward_encode(x: &[f64], params: &ParamVector, cfg: &EncoderConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    cfg.check_params(params)?;
    if x.len() != cfg.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, encoder expects {}",
            x.len(),
            cfg.input_dim()
        )));
    }
    Ok(forward_unchecked(x, params, cfg))
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn check_data(cfg: &EncoderConfig, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.dim() != cfg.input_dim() {
        return Err(Error::Shape(format!(
            "dataset has {} features, encoder expects {}",
            data.dim(),
            cfg.input_dim()
        )));
    }
    if data.classes() > cfg.classes() {
        return Err(Error::Shape(format!(
            "dataset has {} classes, encoder outputs {}",
            data.classes(),
            cfg.classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy over the given rows.
pub fn loss(params: &ParamVector, cfg: &EncoderConfig, data: &Dataset) -> Result<f64> {
    cfg.check_params(params)?;
    check_data(cfg, data)?;
    let total: f64 = (0..data.len())
        .map(|i| {
            let acts = forward_unchecked(data.row(i), params, cfg);
            cross_entropy(acts.last().unwrap(), data.label(i))
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Mean loss and its analytic gradient over `rows` of `data`.
fn loss_and_grad_rows(
    params: &ParamVector,
    cfg: &EncoderConfig,
    data: &Dataset,
    rows: &[usize],
    grad: &mut ParamVector,
) -> f64 {
    grad.values_mut().iter_mut().for_each(|g| *g = 0.0);
    let layout = params.layout().clone();
    let layers = cfg.num_layers();
    let mut total = 0.0;
    let mut delta: Vec<f64> = Vec::new();
    let mut next: Vec<f64> = Vec::new();

    for &i in rows {
        let x = data.row(i);
        let acts = forward_unchecked(x, params, cfg);
        let logits = acts.last().unwrap();
        let label = data.label(i);
        let lse = log_sum_exp(logits);
        total += lse - logits[label];

        // dL/dz at the output: softmax - onehot
        delta.clear();
        delta.extend(logits.iter().map(|z| (z - lse).exp()));
        delta[label] -= 1.0;

        for l in (0..layers).rev() {
            let blocks = layout.layers()[l];
            let input = if l == 0 { x } else { acts[l - 1].as_slice() };
            let cols = blocks.weight.cols;
            {
                let g = grad.values_mut();
                for (r, d) in delta.iter().enumerate() {
                    let row = &mut g[blocks.weight.offset + r * cols..blocks.weight.offset + (r + 1) * cols];
                    for (gw, xin) in row.iter_mut().zip(input) {
                        *gw += d * xin;
                    }
                    g[blocks.bias.offset + r] += d;
                }
            }
            if l > 0 {
                let w = params.weight(l);
                let act = cfg.activation(l - 1);
                next.clear();
                next.resize(cols, 0.0);
                for (r, d) in delta.iter().enumerate() {
                    let row = &w[r * cols..(r + 1) * cols];
                    for (n, wv) in next.iter_mut().zip(row) {
                        *n += d * wv;
                    }
                }
                for (n, h) in next.iter_mut().zip(&acts[l - 1]) {
                    *n *= act.derivative_from_output(*h);
                }
                std::mem::swap(&mut delta, &mut next);
            }
        }
    }
    let scale = 1.0 / rows.len() as f64;
    grad.scale(scale);
    total * scale
}

/// Mean loss and analytic gradient over the whole dataset.
pub fn loss_and_grad(params: &ParamVector, cfg: &EncoderConfig, data: &Dataset) -> Result<(f64, ParamVector)> {
    cfg.check_params(params)?;
    check_data(cfg, data)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut grad = ParamVector::zeros(params.layout().clone());
    let l = loss_and_grad_rows(params, cfg, data, &rows, &mut grad);
    Ok((l, grad))
}

/// Local SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// L2 bound applied to the whole round delta.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 5, batch: 32, lr: 0.02, clip: Some(2.0) }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(invalid("batch must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be finite and non-negative"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid("clip must be positive"));
            }
        }
        Ok(())
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: ClientId,
    pub delta: ParamVector,
    pub sample_count: usize,
    /// Post-training minus pre-training loss on the client's own data.
    pub loss_delta: f64,
    pub staleness: u32,
}

/// Rescales `delta` in place so that its L2 norm is at most `bound`.
pub fn clip_to_norm(delta: &mut ParamVector, bound: f64) {
    let norm = delta.norm_l2();
    if norm > bound {
        delta.scale(bound / norm);
        // rounding can leave the norm a hair above the bound
        while delta.norm_l2() > bound {
            delta.scale(1.0 - f64::EPSILON);
        }
    }
}

/// Runs mini-batch SGD from `start` and returns the resulting delta.
pub fn local_train(
    data: &Dataset,
    start: &ParamVector,
    cfg: &EncoderConfig,
    train: &TrainConfig,
    seed: u64,
    client_id: ClientId,
) -> Result<ClientUpdate> {
    train.validate()?;
    cfg.check_params(start)?;
    check_data(cfg, data)?;

    let before = loss(start, cfg, data)?;
    if !before.is_finite() {
        return Err(Error::NonFinite("local loss"));
    }

    let mut params = start.clone();
    let mut grad = ParamVector::zeros(start.layout().clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng_from_seed(seed);

    if train.lr > 0.0 {
        for _ in 0..train.epochs {
            order.shuffle(&mut rng);
            for rows in order.chunks(train.batch) {
                let l = loss_and_grad_rows(&params, cfg, data, rows, &mut grad);
                if !l.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                params.add_scaled(&grad, -train.lr)?;
            }
        }
    }

    let after = loss(&params, cfg, data)?;
    if !after.is_finite() || !params.is_finite() {
        return Err(Error::NonFinite("trained parameters"));
    }
    let mut delta = params.sub(start)?;
    if let Some(c) = train.clip {
        clip_to_norm(&mut delta, c);
    }
    Ok(ClientUpdate {
        client_id,
        delta,
        sample_count: data.len(),
        loss_delta: after - before,
        staleness: 0,
    })
}

/// Top-1 accuracy and mean cross-entropy.
pub fn evaluate(params: &ParamVector, cfg: &EncoderConfig, data: &Dataset) -> Result<(f64, f64)> {
    cfg.check_params(params)?;
    check_data(cfg, data)?;
    let mut correct = 0usize;
    let mut total_loss = 0.0;
    for i in 0..data.len() {
        let acts = forward_unchecked(data.row(i), params, cfg);
        let logits = acts.last().unwrap();
        if argmax(logits) == data.label(i) {
            correct += 1;
        }
        total_loss += cross_entropy(logits, data.label(i));
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, total_loss / n))
}
