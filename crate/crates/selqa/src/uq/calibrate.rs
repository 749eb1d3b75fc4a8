//! Normalization constants for the composed metric, fitted on a held-out
//! calibration split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::predict::composed_scores;
use super::ConvertedModel;

/// Minimum number of calibration examples accepted.
pub const MIN_CALIBRATION_EXAMPLES: usize = 10;

/// Mean and population standard deviation of the aleatoric and epistemic
/// scores on a calibration split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub aleatoric_mean: f64,
    pub aleatoric_std: f64,
    pub epistemic_mean: f64,
    pub epistemic_std: f64,
}

/// Population mean and standard deviation (divisor `n`, not `n - 1`).
pub fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl CalibrationStats {
    /// Fits stats from raw score pairs. Degenerate (zero-spread) scores
    /// are rejected: a constant score cannot be z-normalized.
    pub fn fit(aleatoric: &[f64], epistemic: &[f64]) -> Result<Self> {
        if aleatoric.len() < MIN_CALIBRATION_EXAMPLES {
            return Err(Error::Degenerate(format!(
                "calibration needs >= {MIN_CALIBRATION_EXAMPLES} examples, got {}",
                aleatoric.len()
            )));
        }
        let (am, astd) = mean_and_population_std(aleatoric);
        let (em, estd) = mean_and_population_std(epistemic);
        if astd <= 0.0 || estd <= 0.0 {
            return Err(Error::Degenerate(
                "calibration scores have zero spread".into(),
            ));
        }
        Ok(CalibrationStats {
            aleatoric_mean: am,
            aleatoric_std: astd,
            epistemic_mean: em,
            epistemic_std: estd,
        })
    }
}

/// Runs the composed scorer over a calibration split and fits the stats.
/// Uses head 0; the split must be disjoint from evaluation data (the
/// selective layer enforces that through split hashes).
pub fn calibrate_stats(
    model: &ConvertedModel,
    calibration: &[(u64, Tensor)],
    master_seed: u64,
) -> Result<CalibrationStats> {
    if calibration.len() < MIN_CALIBRATION_EXAMPLES {
        return Err(Error::Degenerate(format!(
            "calibration needs >= {MIN_CALIBRATION_EXAMPLES} examples, got {}",
            calibration.len()
        )));
    }
    let mut aleatoric = Vec::with_capacity(calibration.len());
    let mut epistemic = Vec::with_capacity(calibration.len());
    for (example_id, x) in calibration {
        let scores = composed_scores(model, x, master_seed, *example_id, None)?;
        aleatoric.push(scores[0].0);
        epistemic.push(scores[0].1);
    }
    CalibrationStats::fit(&aleatoric, &epistemic)
}
