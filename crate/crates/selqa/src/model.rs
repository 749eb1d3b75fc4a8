//! Model specification, parameter storage and the forward pass.
//!
//! A model is a chain of body layers (linear / relu / dropout) followed by
//! one or more linear heads read off the last body width. Multi-head
//! models serve extractive span scoring (start and end heads); single-head
//! models serve classification and next-token prediction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// One body layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear { inputs: usize, outputs: usize },
    Relu,
    Dropout { rate: f64 },
}

/// Architecture description: input width, body layers, head widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub head_dims: Vec<usize>,
}

impl ModelSpec {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>, head_dims: Vec<usize>) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            layers,
            head_dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks dimension chaining and per-layer constraints.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.head_dims.is_empty() {
            return Err(Error::InvalidSpec("at least one head required".into()));
        }
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Linear { inputs, outputs } => {
                    if *inputs != width {
                        return Err(Error::shape(
                            format!("layer {i}"),
                            format!("inputs = {width}"),
                            format!("inputs = {inputs}"),
                        ));
                    }
                    if *outputs == 0 {
                        return Err(Error::InvalidSpec(format!("layer {i}: zero outputs")));
                    }
                    width = *outputs;
                }
                LayerSpec::Relu => {}
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: dropout rate {rate} outside [0, 1)"
                        )));
                    }
                }
            }
        }
        if self.head_dims.iter().any(|d| *d == 0) {
            return Err(Error::InvalidSpec("zero-width head".into()));
        }
        Ok(())
    }

    /// Width feeding the heads (input width if the body is empty).
    pub fn body_output_dim(&self) -> usize {
        let mut width = self.input_dim;
        for layer in &self.layers {
            if let LayerSpec::Linear { outputs, .. } = layer {
                width = *outputs;
            }
        }
        width
    }

    /// Exact parameter count: `(in + 1) * out` per linear layer, heads
    /// included.
    pub fn param_count(&self) -> usize {
        let body: usize = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Linear { inputs, outputs } => (inputs + 1) * outputs,
                _ => 0,
            })
            .sum();
        let hidden = self.body_output_dim();
        let heads: usize = self.head_dims.iter().map(|d| (hidden + 1) * d).sum();
        body + heads
    }

    /// Index of the first dropout layer, if any.
    pub fn first_dropout(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Dropout { .. }))
    }
}

/// Named parameter tensors with matching gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidSpec(format!("duplicate parameter {name}")));
        }
        let (r, c) = value.shape();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: Tensor::zeros(r, c),
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|i| &self.params[*i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|i| &self.params[*i].grad)
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown parameter {name}")))?;
        if grad.shape() != self.params[i].value.shape() {
            return Err(Error::shape(
                format!("gradient of {name}"),
                format!("{:?}", self.params[i].value.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        self.params[i].grad = grad;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            let (r, c) = p.value.shape();
            p.grad = Tensor::zeros(r, c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Glorot-uniform bound for a linear layer.
fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    inputs: usize,
    outputs: usize,
    seed: u64,
    layer_tag: u64,
) -> Result<()> {
    let bound = glorot_bound(inputs, outputs);
    let mut rng = RngStream::keyed(seed, &[0x1217, layer_tag]);
    let mut w = Tensor::zeros(inputs, outputs);
    for v in w.data_mut() {
        *v = rng.uniform(-bound, bound);
    }
    store.insert(format!("{prefix}.weight"), w)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(1, outputs))?;
    Ok(())
}

/// Fresh Glorot-initialized parameters for a spec. Each linear layer's
/// draw is keyed by the master seed and its layer index.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut store = ParamStore::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::Linear { inputs, outputs } = layer {
            init_linear(&mut store, &format!("layer{i}"), *inputs, *outputs, seed, i as u64)?;
        }
    }
    let hidden = spec.body_output_dim();
    for (j, dim) in spec.head_dims.iter().enumerate() {
        init_linear(
            &mut store,
            &format!("head{j}"),
            hidden,
            *dim,
            seed,
            1000 + j as u64,
        )?;
    }
    Ok(store)
}

/// Tape handles for every parameter, in store order.
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidSpec(format!("unbound parameter {name}")))
    }
}

/// Inserts every parameter as a tape leaf.
pub fn bind_params(tape: &mut Tape, store: &ParamStore) -> Bindings {
    let mut vars = HashMap::new();
    for p in store.iter() {
        vars.insert(p.name.clone(), tape.leaf(p.value.clone()));
    }
    Bindings { vars }
}

/// Copies tape gradients back into the store after `backward`.
pub fn collect_grads(tape: &Tape, bindings: &Bindings, store: &mut ParamStore) -> Result<()> {
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let var = bindings.get(&name)?;
        store.set_grad(&name, tape.grad(var).clone())?;
    }
    Ok(())
}

/// Bernoulli keep-mask with survivors scaled by `1 / (1 - rate)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut RngStream) -> Tensor {
    let keep_scale = 1.0 / (1.0 - rate);
    let mut mask = Tensor::zeros(rows, cols);
    for v in mask.data_mut() {
        *v = if rng.next_f64() < rate { 0.0 } else { keep_scale };
    }
    mask
}

/// Inverted dropout on a plain tensor. Identity when `training` is false
/// or the rate is zero.
pub fn dropout_forward(x: &Tensor, rate: f64, rng: &mut RngStream, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidSpec(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.rows(), x.cols(), rate, rng);
    x.hadamard(&mask)
}

/// Reparameterized Gaussian sample `mu + sigma * eps`, `eps ~ N(0, 1)`.
/// The differentiable variant lives on the tape via `mul_const`/`add`
/// with the same noise tensor.
pub fn gaussian_sample(mu: &Tensor, sigma: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
    if mu.shape() != sigma.shape() {
        return Err(Error::shape(
            "gaussian_sample",
            format!("{:?}", mu.shape()),
            format!("{:?}", sigma.shape()),
        ));
    }
    if sigma.data().iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidSpec("negative sigma element".into()));
    }
    let noise = standard_normal(mu.rows(), mu.cols(), rng);
    mu.add(&sigma.hadamard(&noise)?)
}

/// Tensor of i.i.d. standard normal draws.
pub fn standard_normal(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.normal();
    }
    t
}

/// Runs body layers `start..end` on the tape from activation `h`.
/// Dropout layers draw their masks from `rng` in layer order and apply
/// only when `training` is set; a zero rate is skipped entirely.
pub fn body_forward_range(
    tape: &mut Tape,
    spec: &ModelSpec,
    bindings: &Bindings,
    start: usize,
    end: usize,
    mut h: Var,
    training: bool,
    rng: &mut RngStream,
) -> Result<Var> {
    for (i, layer) in spec.layers.iter().enumerate().take(end).skip(start) {
        match layer {
            LayerSpec::Linear { .. } => {
                let w = bindings.get(&format!("layer{i}.weight"))?;
                let b = bindings.get(&format!("layer{i}.bias"))?;
                let z = tape.matmul(h, w)?;
                h = tape.add_bias(z, b)?;
            }
            LayerSpec::Relu => {
                h = tape.relu(h);
            }
            LayerSpec::Dropout { rate } => {
                if training && *rate > 0.0 {
                    let (r, c) = tape.value(h).shape();
                    let mask = dropout_mask(r, c, *rate, rng);
                    h = tape.mul_const(h, &mask)?;
                }
            }
        }
    }
    Ok(h)
}

/// Body layers `start..` from activation `h`.
pub fn body_forward_from(
    tape: &mut Tape,
    spec: &ModelSpec,
    bindings: &Bindings,
    start: usize,
    h: Var,
    training: bool,
    rng: &mut RngStream,
) -> Result<Var> {
    body_forward_range(tape, spec, bindings, start, spec.layers.len(), h, training, rng)
}

/// Full body from the input activation.
pub fn body_forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    bindings: &Bindings,
    x: Var,
    training: bool,
    rng: &mut RngStream,
) -> Result<Var> {
    body_forward_from(tape, spec, bindings, 0, x, training, rng)
}

/// Applies one named linear head to the body output.
pub fn apply_head(
    tape: &mut Tape,
    bindings: &Bindings,
    prefix: &str,
    h: Var,
) -> Result<Var> {
    let w = bindings.get(&format!("{prefix}.weight"))?;
    let b = bindings.get(&format!("{prefix}.bias"))?;
    let z = tape.matmul(h, w)?;
    tape.add_bias(z, b)
}

/// Body plus all declared heads; returns one logits node per head.
pub fn forward_heads(
    tape: &mut Tape,
    spec: &ModelSpec,
    bindings: &Bindings,
    x: Var,
    training: bool,
    rng: &mut RngStream,
) -> Result<Vec<Var>> {
    let h = body_forward(tape, spec, bindings, x, training, rng)?;
    (0..spec.head_dims.len())
        .map(|j| apply_head(tape, bindings, &format!("head{j}"), h))
        .collect()
}

/// Plain inference: one logits tensor per head. Dropout is active only
/// when `training` is set; results are deterministic given the stream.
pub fn model_forward(
    params: &ParamStore,
    spec: &ModelSpec,
    x: &Tensor,
    training: bool,
    rng: &mut RngStream,
) -> Result<Vec<Tensor>> {
    if x.cols() != spec.input_dim {
        return Err(Error::shape(
            "model_forward",
            format!("{} input columns", spec.input_dim),
            format!("{} columns", x.cols()),
        ));
    }
    let mut tape = Tape::new();
    let bindings = bind_params(&mut tape, params);
    let xv = tape.leaf(x.clone());
    let heads = forward_heads(&mut tape, spec, &bindings, xv, training, rng)?;
    heads
        .into_iter()
        .map(|h| {
            let t = tape.value(h).clone();
            t.check_finite("model_forward output")?;
            Ok(t)
        })
        .collect()
}
