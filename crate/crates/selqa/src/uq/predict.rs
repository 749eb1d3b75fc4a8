//! Prediction paths for every converted variant.
//!
//! All methods report moments in logit space so their scores live on a
//! shared scale and the composed z-sum stays coherent. Monte Carlo pass
//! streams are keyed by `(example_id, pass_index)`, never by thread, so
//! parallel evaluation reproduces sequential results bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::model::{
    apply_head, bind_params, body_forward_from, body_forward_range, ModelSpec, ParamStore,
};
use crate::rng::RngStream;
use crate::tensor::{softmax_slice, Tensor};

use super::{CalibrationStats, ConvertedModel, UqMethod, SIGMA_CEIL, SIGMA_FLOOR};

/// Stream tags for inference-time randomness.
const MC_PASS_TAG: u64 = 0xacc5;

/// Per-prediction uncertainty summary for one head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyOutput {
    /// Mean logits, `1 x K`.
    pub mu: Tensor,
    /// Per-class uncertainty: sigma-head deviations for MVE, population
    /// variance of sampled logits for MC and ensembles.
    pub sigma_vec: Tensor,
    /// `argmax(mu)`.
    pub predicted: usize,
    /// Scalar uncertainty. Nonnegative for every variant except
    /// `composed`, whose z-centered score may dip below zero.
    pub sigma: f64,
    /// Max softmax probability of the mean logits.
    pub confidence: f64,
}

/// How a per-class uncertainty vector collapses to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceMode {
    /// Component at the predicted class.
    PredictedClass,
    /// Sum over all classes. Used for Monte Carlo and ensemble variance
    /// vectors (overall prediction instability) and for per-step
    /// generative uncertainty (vocabulary sum).
    Sum,
    /// Arithmetic mean over all classes.
    Mean,
    /// Geometric mean: `exp(mean(ln sigma_k))`. Used for deviation-head
    /// vectors, where it aggregates per-class evidence without the
    /// convex blow-up a plain sum of exponentials shows far from the
    /// training data.
    LogMean,
}

/// Collapses a `1 x K` uncertainty vector to a scalar.
pub fn uncertainty_reduce(sigma_vec: &Tensor, predicted: usize, mode: ReduceMode) -> Result<f64> {
    if sigma_vec.is_empty() {
        return Err(Error::Degenerate("uncertainty_reduce on empty vector".into()));
    }
    match mode {
        ReduceMode::PredictedClass => {
            if predicted >= sigma_vec.len() {
                return Err(Error::InvalidSpec(format!(
                    "predicted class {predicted} out of range {}",
                    sigma_vec.len()
                )));
            }
            Ok(sigma_vec.data()[predicted])
        }
        ReduceMode::Sum => Ok(sigma_vec.sum()),
        ReduceMode::Mean => Ok(sigma_vec.mean()),
        ReduceMode::LogMean => {
            if sigma_vec.data().iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidSpec("log-mean of a negative component".into()));
            }
            let n = sigma_vec.len() as f64;
            let log_sum: f64 = sigma_vec.data().iter().map(|v| v.max(1e-300).ln()).sum();
            Ok((log_sum / n).exp())
        }
    }
}

/// A head output as a `1 x K` logits row; position-scoring heads
/// (`L x 1`) are transposed.
fn as_row(t: &Tensor) -> Tensor {
    if t.rows() > 1 && t.cols() == 1 {
        t.transpose()
    } else {
        t.clone()
    }
}

fn output_from_moments(mu: Tensor, sigma_vec: Tensor, reduce: ReduceMode) -> Result<UncertaintyOutput> {
    let predicted = mu.argmax_row(0);
    let sigma = uncertainty_reduce(&sigma_vec, predicted, reduce)?;
    let confidence = softmax_slice(mu.row_slice(0))
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(UncertaintyOutput {
        mu,
        sigma_vec,
        predicted,
        sigma,
        confidence,
    })
}

/// Deterministic forward returning the requested head rows.
fn deterministic_rows(
    spec: &ModelSpec,
    params: &ParamStore,
    x: &Tensor,
    head_prefix: &str,
) -> Result<Vec<Tensor>> {
    Ok(deterministic_multi(spec, params, x, &[head_prefix])?.remove(0))
}

/// One body pass feeding several head families (e.g. mean and sigma
/// heads share the trunk, which is what keeps the sigma head's inference
/// cost marginal).
fn deterministic_multi(
    spec: &ModelSpec,
    params: &ParamStore,
    x: &Tensor,
    head_prefixes: &[&str],
) -> Result<Vec<Vec<Tensor>>> {
    let mut tape = Tape::new();
    let bindings = bind_params(&mut tape, params);
    let xv = tape.leaf(x.clone());
    let mut rng = RngStream::new(0, 0); // unused: no dropout without training
    let h = body_forward_from(&mut tape, spec, &bindings, 0, xv, false, &mut rng)?;
    head_prefixes
        .iter()
        .map(|prefix| {
            (0..spec.head_dims.len())
                .map(|j| {
                    let out = apply_head(&mut tape, &bindings, &format!("{prefix}{j}"), h)?;
                    Ok(as_row(tape.value(out)))
                })
                .collect()
        })
        .collect()
}

/// `T` stochastic forward passes with dropout active, all recorded on a
/// single tape: parameters are bound once and the deterministic prefix
/// up to the first dropout layer is computed once, each pass rerunning
/// only the stochastic suffix. Returns `[pass][head]` rows.
///
/// When no dropout layer downstream of the split carries a positive
/// rate, every pass is identical; the exact moments (mean = the single
/// pass, variance = zero) come from returning that one pass.
fn stochastic_rows(
    spec: &ModelSpec,
    params: &ParamStore,
    x: &Tensor,
    head_prefix: &str,
    passes: usize,
    master_seed: u64,
    example_id: u64,
) -> Result<Vec<Vec<Tensor>>> {
    let split = spec.first_dropout().ok_or_else(|| {
        Error::InvalidSpec("stochastic passes need a dropout layer".into())
    })?;
    let stochastic = spec.layers[split..]
        .iter()
        .any(|l| matches!(l, crate::model::LayerSpec::Dropout { rate } if *rate > 0.0));
    let effective_passes = if stochastic { passes } else { 1 };

    let mut tape = Tape::new();
    let bindings = bind_params(&mut tape, params);
    let xv = tape.leaf(x.clone());
    let mut rng = RngStream::new(0, 0);
    let prefix = body_forward_range(&mut tape, spec, &bindings, 0, split, xv, false, &mut rng)?;

    let mut all = Vec::with_capacity(effective_passes);
    for pass in 0..effective_passes {
        let mut rng = RngStream::keyed(master_seed, &[MC_PASS_TAG, example_id, pass as u64]);
        let h = body_forward_from(&mut tape, spec, &bindings, split, prefix, true, &mut rng)?;
        let rows = (0..spec.head_dims.len())
            .map(|j| {
                let out = apply_head(&mut tape, &bindings, &format!("{head_prefix}{j}"), h)?;
                Ok(as_row(tape.value(out)))
            })
            .collect::<Result<Vec<_>>>()?;
        all.push(rows);
    }
    Ok(all)
}

/// Per-class mean and population variance across sampled rows.
fn moments(samples: &[&Tensor]) -> (Tensor, Tensor) {
    let n = samples.len() as f64;
    let cols = samples[0].cols();
    let mut mean = Tensor::zeros(1, cols);
    for s in samples {
        for c in 0..cols {
            mean.set(0, c, mean.get(0, c) + s.get(0, c));
        }
    }
    for c in 0..cols {
        mean.set(0, c, mean.get(0, c) / n);
    }
    let mut var = Tensor::zeros(1, cols);
    for s in samples {
        for c in 0..cols {
            let d = s.get(0, c) - mean.get(0, c);
            var.set(0, c, var.get(0, c) + d * d);
        }
    }
    for c in 0..cols {
        var.set(0, c, var.get(0, c) / n);
    }
    (mean, var)
}

/// Baseline: deterministic logits, zero uncertainty, max-softmax
/// confidence.
pub fn baseline_predict(model: &ConvertedModel, x: &Tensor) -> Result<Vec<UncertaintyOutput>> {
    let rows = deterministic_rows(&model.spec, &model.params, x, "head")?;
    rows.into_iter()
        .map(|mu| {
            let k = mu.cols();
            output_from_moments(mu, Tensor::zeros(1, k), ReduceMode::PredictedClass)
        })
        .collect()
}

/// MVE: deterministic mean logits plus the exponentiated sigma head. No
/// sampling happens at inference; sampling is a training-time device.
pub fn mve_predict(model: &ConvertedModel, x: &Tensor) -> Result<Vec<UncertaintyOutput>> {
    if !model.method.has_sigma_head() {
        return Err(Error::InvalidSpec(format!(
            "mve_predict on a {} model",
            model.method.name()
        )));
    }
    let mut families = deterministic_multi(&model.spec, &model.params, x, &["head", "sigma_head"])?;
    let ls_rows = families.pop().unwrap();
    let mu_rows = families.pop().unwrap();
    mu_rows
        .into_iter()
        .zip(ls_rows)
        .map(|(mu, ls)| {
            let sigma_vec = ls.map(|v| v.exp().clamp(SIGMA_FLOOR, SIGMA_CEIL));
            output_from_moments(mu, sigma_vec, ReduceMode::LogMean)
        })
        .collect()
}

/// Monte Carlo dropout: mean and population variance of `T` stochastic
/// passes. Fewer than two passes leave the variance undefined.
pub fn mc_predict(
    model: &ConvertedModel,
    x: &Tensor,
    master_seed: u64,
    example_id: u64,
) -> Result<Vec<UncertaintyOutput>> {
    let passes = match model.method {
        UqMethod::McDropout { passes, .. } => passes,
        _ => {
            return Err(Error::InvalidSpec(format!(
                "mc_predict on a {} model",
                model.method.name()
            )))
        }
    };
    if passes < 2 {
        return Err(Error::Degenerate(
            "mc_predict needs >= 2 passes for a variance".into(),
        ));
    }
    let sampled = stochastic_rows(
        &model.spec,
        &model.params,
        x,
        "head",
        passes,
        master_seed,
        example_id,
    )?;
    (0..model.spec.head_dims.len())
        .map(|j| {
            let rows: Vec<&Tensor> = sampled.iter().map(|pass| &pass[j]).collect();
            let (mu, var) = moments(&rows);
            output_from_moments(mu, var, ReduceMode::Sum)
        })
        .collect()
}

/// Ensemble: mean and population variance over deterministic member
/// predictions.
pub fn ensemble_predict(model: &ConvertedModel, x: &Tensor) -> Result<Vec<UncertaintyOutput>> {
    if !matches!(model.method, UqMethod::Ensemble { .. }) {
        return Err(Error::InvalidSpec(format!(
            "ensemble_predict on a {} model",
            model.method.name()
        )));
    }
    let member_rows: Vec<Vec<Tensor>> = model
        .members
        .iter()
        .map(|m| deterministic_rows(&model.spec, m, x, "head"))
        .collect::<Result<_>>()?;
    (0..model.spec.head_dims.len())
        .map(|j| {
            let rows: Vec<&Tensor> = member_rows.iter().map(|m| &m[j]).collect();
            let (mu, var) = moments(&rows);
            output_from_moments(mu, var, ReduceMode::Sum)
        })
        .collect()
}

/// Raw (aleatoric, epistemic) score pair per head for a composed model:
/// the geometric-mean sigma-head deviation and the summed Monte Carlo
/// variance. `reduce` overrides both for generative per-step scoring.
pub fn composed_scores(
    model: &ConvertedModel,
    x: &Tensor,
    master_seed: u64,
    example_id: u64,
    reduce: Option<ReduceMode>,
) -> Result<Vec<(f64, f64)>> {
    let passes = match model.method {
        UqMethod::Composed { passes, .. } => passes,
        _ => {
            return Err(Error::InvalidSpec(format!(
                "composed_scores on a {} model",
                model.method.name()
            )))
        }
    };
    let sampled = stochastic_rows(
        &model.spec,
        &model.params,
        x,
        "head",
        passes.max(2),
        master_seed,
        example_id,
    )?;
    let ls_rows = deterministic_rows(&model.spec, &model.params, x, "sigma_head")?;
    (0..model.spec.head_dims.len())
        .map(|j| {
            let rows: Vec<&Tensor> = sampled.iter().map(|pass| &pass[j]).collect();
            let (mu, var) = moments(&rows);
            let predicted = mu.argmax_row(0);
            let aleatoric_vec = ls_rows[j].map(|v| v.exp().clamp(SIGMA_FLOOR, SIGMA_CEIL));
            let aleatoric =
                uncertainty_reduce(&aleatoric_vec, predicted, reduce.unwrap_or(ReduceMode::LogMean))?;
            let epistemic = uncertainty_reduce(&var, predicted, reduce.unwrap_or(ReduceMode::Sum))?;
            Ok((aleatoric, epistemic))
        })
        .collect()
}

/// Composed prediction: MC moments plus the z-normalized sum of both
/// scores. Centering means the scalar can be negative; selection depends
/// only on ranks, so that is harmless.
pub fn composed_predict(
    model: &ConvertedModel,
    x: &Tensor,
    master_seed: u64,
    example_id: u64,
) -> Result<Vec<UncertaintyOutput>> {
    let calib = model
        .calibration
        .as_ref()
        .ok_or_else(|| Error::Degenerate("composed_predict without calibration stats".into()))?;
    let passes = match model.method {
        UqMethod::Composed { passes, .. } => passes,
        _ => {
            return Err(Error::InvalidSpec(format!(
                "composed_predict on a {} model",
                model.method.name()
            )))
        }
    };
    let sampled = stochastic_rows(
        &model.spec,
        &model.params,
        x,
        "head",
        passes.max(2),
        master_seed,
        example_id,
    )?;
    let ls_rows = deterministic_rows(&model.spec, &model.params, x, "sigma_head")?;
    (0..model.spec.head_dims.len())
        .map(|j| {
            let rows: Vec<&Tensor> = sampled.iter().map(|pass| &pass[j]).collect();
            let (mu, var) = moments(&rows);
            let predicted = mu.argmax_row(0);
            let aleatoric_vec = ls_rows[j].map(|v| v.exp().clamp(SIGMA_FLOOR, SIGMA_CEIL));
            let aleatoric = uncertainty_reduce(&aleatoric_vec, predicted, ReduceMode::LogMean)?;
            let epistemic = uncertainty_reduce(&var, predicted, ReduceMode::Sum)?;
            let sigma = calib.z_sum(aleatoric, epistemic);
            let confidence = softmax_slice(mu.row_slice(0))
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(UncertaintyOutput {
                mu,
                sigma_vec: var,
                predicted,
                sigma,
                confidence,
            })
        })
        .collect()
}

/// Dispatches to the variant's prediction path.
pub fn predict(
    model: &ConvertedModel,
    x: &Tensor,
    master_seed: u64,
    example_id: u64,
) -> Result<Vec<UncertaintyOutput>> {
    match model.method {
        UqMethod::Baseline => baseline_predict(model, x),
        UqMethod::Mve { .. } => mve_predict(model, x),
        UqMethod::McDropout { .. } => mc_predict(model, x, master_seed, example_id),
        UqMethod::Ensemble { .. } => ensemble_predict(model, x),
        UqMethod::Composed { .. } => composed_predict(model, x, master_seed, example_id),
    }
}

/// Centered score combination constants live in [`CalibrationStats`].
impl CalibrationStats {
    /// Sum of z-scores under these stats.
    pub fn z_sum(&self, aleatoric: f64, epistemic: f64) -> f64 {
        (aleatoric - self.aleatoric_mean) / self.aleatoric_std
            + (epistemic - self.epistemic_mean) / self.epistemic_std
    }
}
