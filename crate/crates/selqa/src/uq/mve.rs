//! Sampled training loss for mean/variance estimation heads.
//!
//! Per example the model produces mean logits and a log-sigma head. `T`
//! reparameterized samples `z = mu + sigma * eps` are drawn, turned into
//! class probabilities, averaged, and scored with cross-entropy against
//! the label. Gradients flow through both the mean and sigma paths.
//!
//! Averaging the per-sample probabilities (rather than the logits) is
//! what lets the sigma head learn: where labels conflict, extra logit
//! noise flattens the averaged distribution and lowers the loss, so sigma
//! rises exactly in noisy regions; where labels are consistent, noise
//! only hurts and sigma decays.

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::model::{
    apply_head, bind_params, body_forward, collect_grads, standard_normal, Bindings, ModelSpec,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::train::{logits_row, LossFn, TrainExample};

use super::{ConvertedModel, UqMethod, SIGMA_CEIL, SIGMA_FLOOR};

/// Noise source for the reparameterized samples. `Zero` collapses every
/// sample onto the mean logits, reducing the loss to deterministic
/// cross-entropy; it exists for degenerate-reduction checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MveNoise {
    Gaussian,
    Zero,
}

/// Batch loss for MVE and composed variants.
pub struct MveLoss {
    pub samples: usize,
    pub noise: MveNoise,
}

impl MveLoss {
    pub fn new(samples: usize) -> Self {
        MveLoss {
            samples,
            noise: MveNoise::Gaussian,
        }
    }

    fn noise_tensor(&self, rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
        match self.noise {
            MveNoise::Gaussian => standard_normal(rows, cols, rng),
            MveNoise::Zero => Tensor::zeros(rows, cols),
        }
    }

    /// Averaged sample probabilities for one (mu, log-sigma) pair, scored
    /// against per-row labels. Returns the per-row loss column.
    fn sampled_xent(
        &self,
        tape: &mut Tape,
        mu: Var,
        log_sigma: Var,
        labels: &[usize],
        rng: &mut RngStream,
    ) -> Result<Var> {
        let sigma = tape.exp_clamp(log_sigma, SIGMA_FLOOR, SIGMA_CEIL);
        let (rows, cols) = tape.value(mu).shape();
        let mut probs = Vec::with_capacity(self.samples);
        for _ in 0..self.samples {
            let eps = self.noise_tensor(rows, cols, rng);
            let scaled = tape.mul_const(sigma, &eps)?;
            let z = tape.add(mu, scaled)?;
            probs.push(tape.softmax_rows(z));
        }
        let avg = tape.mean_vars(&probs)?;
        tape.neg_log_rows(avg, labels)
    }

    /// Builds the loss and returns (per-example column, batch mean).
    fn build(
        &self,
        tape: &mut Tape,
        spec: &ModelSpec,
        bindings: &Bindings,
        batch: &[&TrainExample],
        rng: &mut RngStream,
    ) -> Result<(Var, Var)> {
        if self.samples == 0 {
            return Err(Error::InvalidSpec("mve: samples must be >= 1".into()));
        }
        let single_row = batch.iter().all(|e| e.features.rows() == 1);
        if single_row && spec.head_dims.len() == 1 {
            let mut x = Tensor::zeros(batch.len(), spec.input_dim);
            let mut labels = Vec::with_capacity(batch.len());
            for (i, e) in batch.iter().enumerate() {
                for c in 0..spec.input_dim {
                    x.set(i, c, e.features.get(0, c));
                }
                labels.push(e.labels[0]);
            }
            let xv = tape.leaf(x);
            let h = body_forward(tape, spec, bindings, xv, true, rng)?;
            let mu = apply_head(tape, bindings, "head0", h)?;
            let log_sigma = apply_head(tape, bindings, "sigma_head0", h)?;
            let column = self.sampled_xent(tape, mu, log_sigma, &labels, rng)?;
            let loss = tape.mean_all(column);
            return Ok((column, loss));
        }

        let mut per_example = Vec::with_capacity(batch.len());
        for e in batch {
            let xv = tape.leaf(e.features.clone());
            let h = body_forward(tape, spec, bindings, xv, true, rng)?;
            let mut head_losses = Vec::with_capacity(spec.head_dims.len());
            for (j, &label) in e.labels.iter().enumerate() {
                let mu = apply_head(tape, bindings, &format!("head{j}"), h)?;
                let log_sigma = apply_head(tape, bindings, &format!("sigma_head{j}"), h)?;
                let mu_row = logits_row(tape, mu);
                let ls_row = logits_row(tape, log_sigma);
                let col = self.sampled_xent(tape, mu_row, ls_row, &[label], rng)?;
                head_losses.push(tape.mean_all(col));
            }
            per_example.push(tape.mean_vars(&head_losses)?);
        }
        // Stack per-example scalars into a column for finiteness reports.
        let column = tape.mean_vars(&per_example)?;
        Ok((column, column))
    }
}

impl LossFn for MveLoss {
    fn batch_loss(
        &self,
        tape: &mut Tape,
        spec: &ModelSpec,
        bindings: &Bindings,
        batch: &[&TrainExample],
        rng: &mut RngStream,
    ) -> Result<Var> {
        let (_, loss) = self.build(tape, spec, bindings, batch, rng)?;
        Ok(loss)
    }
}

/// One training step on an MVE-variant model: forward with sampled
/// logits, backprop through mean and sigma paths, gradients left in the
/// parameter store. Returns the batch-mean loss.
///
/// A non-finite loss aborts the step and names the offending example.
pub fn mve_train_step(
    model: &mut ConvertedModel,
    batch: &[&TrainExample],
    rng: &mut RngStream,
) -> Result<f64> {
    let samples = match model.method {
        UqMethod::Mve { samples } => samples,
        UqMethod::Composed { passes, .. } => passes,
        _ => {
            return Err(Error::InvalidSpec(format!(
                "mve_train_step on a {} model",
                model.method.name()
            )))
        }
    };
    let loss_fn = MveLoss::new(samples);
    let mut tape = Tape::new();
    let bindings = bind_params(&mut tape, &model.params);
    let (column, loss) = loss_fn.build(&mut tape, &model.spec, &bindings, batch, rng)?;
    let col_val = tape.value(column);
    for r in 0..col_val.rows() {
        if !col_val.get(r, 0).is_finite() {
            return Err(Error::NonFinite(format!("mve loss at example {r}")));
        }
    }
    let loss_value = tape.value(loss).get(0, 0);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("mve batch loss".into()));
    }
    tape.backward(loss)?;
    collect_grads(&tape, &bindings, &mut model.params)?;
    Ok(loss_value)
}
