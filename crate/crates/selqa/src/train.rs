//! Adam optimizer and the deterministic training loop.
//!
//! Training is bit-reproducible: shuffles and dropout masks are keyed by
//! `(seed, epoch, batch)` streams, so reruns with the same config, data
//! and seed produce identical parameters.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::model::{bind_params, collect_grads, forward_heads, Bindings, ModelSpec, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// One training example: a feature matrix and one label per head.
///
/// Single-row features with a `k`-wide head are ordinary classification.
/// Multi-row features with a 1-wide head score positions; the label then
/// indexes a row (extractive start/end).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Decoupled weight decay applied to sigma-head weight matrices only.
    /// Anchors the deviation field at `exp(bias)` wherever the data gives
    /// no signal, so it cannot drift in never-trained input directions.
    #[serde(default = "default_sigma_decay")]
    pub sigma_weight_decay: f64,
}

pub(crate) fn default_sigma_decay() -> f64 {
    0.01
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            sigma_weight_decay: default_sigma_decay(),
        }
    }
}

/// Adam with bias correction; moments are keyed by parameter name.
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    sigma_weight_decay: f64,
    step: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            sigma_weight_decay: 0.0,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn with_sigma_weight_decay(mut self, decay: f64) -> Self {
        self.sigma_weight_decay = decay;
        self
    }

    /// Applies one update from the gradients stored alongside each
    /// parameter.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in store.iter_mut() {
            let (r, c) = p.value.shape();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(r, c));
            let v = self.v.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(r, c));
            let decay = if p.name.starts_with("sigma_head") && p.name.ends_with(".weight") {
                self.learning_rate * self.sigma_weight_decay
            } else {
                0.0
            };
            for i in 0..p.value.len() {
                let g = p.grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let w = p.value.data_mut();
                w[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                w[i] -= decay * w[i];
            }
            p.value.check_finite(&format!("adam update of {}", p.name))?;
        }
        Ok(())
    }
}

/// Builds a scalar batch loss on the tape. Implementations decide how
/// logits turn into a loss (plain cross-entropy, sampled MVE loss, ...).
pub trait LossFn {
    fn batch_loss(
        &self,
        tape: &mut Tape,
        spec: &ModelSpec,
        bindings: &Bindings,
        batch: &[&TrainExample],
        rng: &mut RngStream,
    ) -> Result<Var>;
}

/// Standard softmax cross-entropy over every head.
pub struct CrossEntropyLoss;

/// Turns a head output into a `1 x n` logit row: multi-row single-column
/// outputs score positions and are transposed.
pub fn logits_row(tape: &mut Tape, head_out: Var) -> Var {
    let (r, c) = tape.value(head_out).shape();
    if r > 1 && c == 1 {
        tape.transpose(head_out)
    } else {
        head_out
    }
}

impl LossFn for CrossEntropyLoss {
    fn batch_loss(
        &self,
        tape: &mut Tape,
        spec: &ModelSpec,
        bindings: &Bindings,
        batch: &[&TrainExample],
        rng: &mut RngStream,
    ) -> Result<Var> {
        let single_row = batch.iter().all(|e| e.features.rows() == 1);
        if single_row && spec.head_dims.len() == 1 {
            // Stacked fast path: one forward over the whole batch.
            let mut x = Tensor::zeros(batch.len(), spec.input_dim);
            let mut labels = Vec::with_capacity(batch.len());
            for (i, e) in batch.iter().enumerate() {
                if e.features.cols() != spec.input_dim {
                    return Err(Error::shape(
                        format!("example {i}"),
                        format!("{} features", spec.input_dim),
                        format!("{}", e.features.cols()),
                    ));
                }
                for c in 0..spec.input_dim {
                    x.set(i, c, e.features.get(0, c));
                }
                labels.push(e.labels[0]);
            }
            let xv = tape.leaf(x);
            let heads = forward_heads(tape, spec, bindings, xv, true, rng)?;
            let xent = tape.softmax_xent_rows(heads[0], &labels)?;
            return Ok(tape.mean_all(xent));
        }

        let mut per_example = Vec::with_capacity(batch.len());
        for e in batch {
            let xv = tape.leaf(e.features.clone());
            let heads = forward_heads(tape, spec, bindings, xv, true, rng)?;
            if heads.len() != e.labels.len() {
                return Err(Error::shape(
                    "labels per head",
                    format!("{}", heads.len()),
                    format!("{}", e.labels.len()),
                ));
            }
            let mut head_losses = Vec::with_capacity(heads.len());
            for (head, &label) in heads.into_iter().zip(&e.labels) {
                let row = logits_row(tape, head);
                let xent = tape.softmax_xent_rows(row, &[label])?;
                head_losses.push(tape.mean_all(xent));
            }
            per_example.push(tape.mean_vars(&head_losses)?);
        }
        tape.mean_vars(&per_example)
    }
}

/// Runs the optimizer over `data`, mutating `params` in place. Returns
/// the mean training loss per epoch.
pub fn run_training(
    spec: &ModelSpec,
    params: &mut ParamStore,
    data: &[TrainExample],
    config: &TrainConfig,
    loss_fn: &dyn LossFn,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidSpec("empty training dataset".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidSpec("batch_size must be >= 1".into()));
    }
    for (i, e) in data.iter().enumerate() {
        if e.features.cols() != spec.input_dim {
            return Err(Error::shape(
                format!("example {i}"),
                format!("{} feature columns", spec.input_dim),
                format!("{}", e.features.cols()),
            ));
        }
    }

    let mut adam = Adam::new(config.learning_rate).with_sigma_weight_decay(config.sigma_weight_decay);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        RngStream::keyed(config.seed, &[0x5eedu64, epoch as u64]).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|i| &data[*i]).collect();
            let mut rng = RngStream::keyed(config.seed, &[0xd0, epoch as u64, batch_idx as u64]);
            let mut tape = Tape::new();
            let bindings = bind_params(&mut tape, params);
            let loss = loss_fn.batch_loss(&mut tape, spec, &bindings, &batch, &mut rng)?;
            let loss_value = tape.value(loss).get(0, 0);
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            tape.backward(loss)?;
            collect_grads(&tape, &bindings, params)?;
            adam.step(params)?;
            epoch_loss += loss_value;
            batches += 1.0;
        }
        epoch_losses.push(epoch_loss / batches);
    }
    Ok(epoch_losses)
}

/// Fresh parameters, trained with plain cross-entropy.
pub fn train(
    spec: &ModelSpec,
    data: &[TrainExample],
    config: &TrainConfig,
) -> Result<(ParamStore, Vec<f64>)> {
    let mut params = crate::model::init_params(spec, config.seed)?;
    let losses = run_training(spec, &mut params, data, config, &CrossEntropyLoss)?;
    Ok((params, losses))
}
