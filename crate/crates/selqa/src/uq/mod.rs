//! Uncertainty-aware model conversion.
//!
//! `convert` wraps a base model into one of five variants, each producing
//! a `(predicted, sigma)` pair per prediction:
//!
//! * `baseline` — unchanged parameters; confidence is max softmax.
//! * `mve` — a parallel log-sigma head estimates per-class deviations
//!   (aleatoric uncertainty), trained through reparameterized logit
//!   samples.
//! * `mc_dropout` — dropout stays active at inference; the first and
//!   second moments of `T` stochastic passes give prediction and
//!   uncertainty (epistemic).
//! * `ensemble` — `N` independently initialized members; cross-member
//!   variance is the uncertainty (epistemic).
//! * `composed` — MVE head plus dropout; the score is the sum of
//!   z-normalized aleatoric and epistemic components.

mod calibrate;
mod mve;
mod predict;

pub use calibrate::{calibrate_stats, CalibrationStats};
pub use mve::{mve_train_step, MveLoss, MveNoise};
pub use predict::{
    baseline_predict, composed_predict, composed_scores, ensemble_predict, mc_predict,
    mve_predict, predict, uncertainty_reduce, ReduceMode, UncertaintyOutput,
};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, LayerSpec, ModelSpec, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::train::{run_training, CrossEntropyLoss, TrainConfig, TrainExample};

/// Sigma head outputs are exponentiated and clamped to this range.
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const SIGMA_CEIL: f64 = 1e3;

/// Default number of stochastic samples / passes.
pub const DEFAULT_SAMPLES: usize = 10;
/// Default ensemble size.
pub const DEFAULT_MEMBERS: usize = 5;

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}
fn default_members() -> usize {
    DEFAULT_MEMBERS
}
fn default_rate() -> f64 {
    0.25
}

/// Which uncertainty machinery a converted model carries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UqMethod {
    Baseline,
    Mve {
        #[serde(default = "default_samples")]
        samples: usize,
    },
    McDropout {
        #[serde(default = "default_samples")]
        passes: usize,
        #[serde(default = "default_rate")]
        rate: f64,
    },
    Ensemble {
        #[serde(default = "default_members")]
        members: usize,
    },
    Composed {
        #[serde(default = "default_samples")]
        passes: usize,
        #[serde(default = "default_rate")]
        rate: f64,
    },
}

impl UqMethod {
    /// User-facing config validation. Degenerate rates are still
    /// constructible directly for reduction tests; configs reject them.
    pub fn validate(&self) -> Result<()> {
        match self {
            UqMethod::Baseline => Ok(()),
            UqMethod::Mve { samples } => {
                if *samples == 0 {
                    Err(Error::InvalidSpec("mve: samples must be >= 1".into()))
                } else {
                    Ok(())
                }
            }
            UqMethod::McDropout { passes, rate } | UqMethod::Composed { passes, rate } => {
                if *passes == 0 {
                    return Err(Error::InvalidSpec("passes must be >= 1".into()));
                }
                if !(*rate > 0.0 && *rate < 1.0) {
                    return Err(Error::InvalidSpec(format!(
                        "dropout rate {rate} outside (0, 1)"
                    )));
                }
                Ok(())
            }
            UqMethod::Ensemble { members } => {
                if *members == 0 {
                    Err(Error::InvalidSpec("ensemble: members must be >= 1".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            UqMethod::Baseline => "baseline",
            UqMethod::Mve { .. } => "mve",
            UqMethod::McDropout { .. } => "mc_dropout",
            UqMethod::Ensemble { .. } => "ensemble",
            UqMethod::Composed { .. } => "composed",
        }
    }

    /// Whether predictions use the sigma head.
    pub fn has_sigma_head(&self) -> bool {
        matches!(self, UqMethod::Mve { .. } | UqMethod::Composed { .. })
    }

    /// Whether inference runs stochastic dropout passes.
    pub fn uses_dropout_passes(&self) -> bool {
        matches!(self, UqMethod::McDropout { .. } | UqMethod::Composed { .. })
    }
}

/// Conversion record persisted with each checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConversionManifest {
    pub method: UqMethod,
    pub injected_dropout: bool,
    pub conversion_seconds: f64,
}

/// A base model wrapped with uncertainty machinery.
#[derive(Debug, Clone)]
pub struct ConvertedModel {
    pub spec: ModelSpec,
    pub method: UqMethod,
    pub params: ParamStore,
    /// Ensemble members; empty for other variants.
    pub members: Vec<ParamStore>,
    pub calibration: Option<CalibrationStats>,
    pub manifest: ConversionManifest,
}

impl ConvertedModel {
    /// Exact parameter count, method-added parameters included. Ensemble
    /// counts its members.
    pub fn count_params(&self) -> usize {
        if self.members.is_empty() {
            self.params.param_count()
        } else {
            self.members.iter().map(|m| m.param_count()).sum()
        }
    }
}

/// Adds the parallel log-sigma heads, initialized so sigma starts near 1:
/// near-zero weights and a zero bias give `exp(w . h) ~ 1`.
fn add_sigma_heads(spec: &ModelSpec, params: &mut ParamStore, seed: u64) -> Result<()> {
    let hidden = spec.body_output_dim();
    for (j, dim) in spec.head_dims.iter().enumerate() {
        let mut rng = RngStream::keyed(seed, &[0x516, j as u64]);
        let bound = (6.0 / (hidden + dim) as f64).sqrt() * 0.01;
        let mut w = Tensor::zeros(hidden, *dim);
        for v in w.data_mut() {
            *v = rng.uniform(-bound, bound);
        }
        params.insert(format!("sigma_head{j}.weight"), w)?;
        params.insert(format!("sigma_head{j}.bias"), Tensor::zeros(1, *dim))?;
    }
    Ok(())
}

/// Wraps base parameters into an uncertainty-aware variant.
///
/// Baseline leaves parameters untouched. MVE adds sigma heads. Monte
/// Carlo dropout requires a dropout layer and injects one before the
/// heads when the spec has none (recorded in the manifest). Ensembles
/// reinitialize `N` member parameter sets from distinct seeds.
pub fn convert(
    spec: &ModelSpec,
    base: &ParamStore,
    method: UqMethod,
    seed: u64,
) -> Result<ConvertedModel> {
    spec.validate()?;
    match method {
        UqMethod::Mve { samples: 0 } => {
            return Err(Error::InvalidSpec("mve: samples must be >= 1".into()))
        }
        UqMethod::McDropout { passes: 0, .. } | UqMethod::Composed { passes: 0, .. } => {
            return Err(Error::InvalidSpec("passes must be >= 1".into()))
        }
        UqMethod::Ensemble { members: 0 } => {
            return Err(Error::InvalidSpec("ensemble: members must be >= 1".into()))
        }
        _ => {}
    }

    let start = Instant::now();
    let mut out_spec = spec.clone();
    let mut params = base.clone();
    let mut members = Vec::new();
    let mut injected = false;

    match method {
        UqMethod::Baseline => {}
        UqMethod::Mve { .. } => {
            add_sigma_heads(&out_spec, &mut params, seed)?;
        }
        UqMethod::McDropout { rate, .. } => {
            if out_spec.first_dropout().is_none() {
                out_spec.layers.push(LayerSpec::Dropout { rate });
                out_spec.validate()?;
                injected = true;
            }
        }
        UqMethod::Composed { rate, .. } => {
            if out_spec.first_dropout().is_none() {
                out_spec.layers.push(LayerSpec::Dropout { rate });
                out_spec.validate()?;
                injected = true;
            }
            add_sigma_heads(&out_spec, &mut params, seed)?;
        }
        UqMethod::Ensemble { members: n } => {
            for i in 0..n {
                let member_seed = crate::rng::stream_id(&[seed, 0xe75, i as u64]);
                members.push(init_params(&out_spec, member_seed)?);
            }
        }
    }

    Ok(ConvertedModel {
        spec: out_spec,
        method,
        params,
        members,
        calibration: None,
        manifest: ConversionManifest {
            method,
            injected_dropout: injected,
            conversion_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Trains a converted model in place with the loss its method calls for.
/// Returns per-epoch losses, one series per trained parameter set.
pub fn train_converted(
    model: &mut ConvertedModel,
    data: &[TrainExample],
    config: &TrainConfig,
) -> Result<Vec<Vec<f64>>> {
    match model.method {
        UqMethod::Baseline | UqMethod::McDropout { .. } => {
            let losses = run_training(&model.spec, &mut model.params, data, config, &CrossEntropyLoss)?;
            Ok(vec![losses])
        }
        UqMethod::Mve { samples } | UqMethod::Composed { passes: samples, .. } => {
            let loss = MveLoss::new(samples);
            let losses = run_training(&model.spec, &mut model.params, data, config, &loss)?;
            Ok(vec![losses])
        }
        UqMethod::Ensemble { .. } => {
            let mut all = Vec::new();
            for member in &mut model.members {
                let losses = run_training(&model.spec, member, data, config, &CrossEntropyLoss)?;
                all.push(losses);
            }
            Ok(all)
        }
    }
}
