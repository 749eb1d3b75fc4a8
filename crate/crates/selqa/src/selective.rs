//! Selective answering: fit a data-dependent threshold on calibration
//! scores, answer only when the score falls strictly below it, sweep
//! confidence percentiles, and summarize risk-coverage behaviour.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which scalar a prediction is selected by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// The method's uncertainty scalar.
    Sigma,
    /// `1 - max softmax probability`, the logit-probability baseline,
    /// oriented so smaller always means more confident.
    OneMinusConfidence,
}

/// The answer payload of a scored prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Answer {
    Class { label: usize },
    Span { start: usize, end: usize },
    Tokens { tokens: Vec<u32> },
}

/// One prediction with its selection scores and graded correctness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub example_id: u64,
    pub answer: Answer,
    pub sigma: f64,
    pub confidence: f64,
    pub correct: bool,
}

impl ScoredPrediction {
    pub fn score(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Sigma => self.sigma,
            ScoreKind::OneMinusConfidence => 1.0 - self.confidence,
        }
    }
}

/// A fitted selection threshold: predictions with score strictly below
/// `gamma` are answered, the rest abstain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    /// Confidence percentile: at `p`, the most confident `100 - p`
    /// percent of calibration items pass.
    pub percentile: f64,
    pub gamma: f64,
    /// Hash of the split the threshold was fitted on; selection rejects
    /// evaluation data with the same hash.
    pub fitted_on: String,
    pub score: ScoreKind,
    /// All calibration scores were identical; coverage collapsed to zero
    /// under the strict inequality.
    pub degenerate: bool,
}

/// Fits the nearest-rank threshold: `gamma` is chosen among the observed
/// score values (plus infinity) so that `score < gamma` keeps as close as
/// possible to `(100 - p)%` of the calibration items, ties broken toward
/// smaller coverage.
pub fn fit_threshold(
    calib_scores: &[f64],
    percentile: f64,
    score: ScoreKind,
    fitted_on: &str,
) -> Result<ThresholdPolicy> {
    if calib_scores.is_empty() {
        return Err(Error::Degenerate("fit_threshold on empty scores".into()));
    }
    if !(0.0..100.0).contains(&percentile) {
        return Err(Error::InvalidSpec(format!(
            "percentile {percentile} outside [0, 100)"
        )));
    }
    let n = calib_scores.len();
    let target = (100.0 - percentile) / 100.0 * n as f64;

    let mut sorted = calib_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Candidate gammas: each distinct score keeps exactly the items
    // strictly below it; infinity keeps everything.
    let mut best_gamma = f64::INFINITY;
    let mut best_kept = n;
    let mut best_err = (n as f64 - target).abs();
    let mut i = 0;
    while i < n {
        let kept = i; // items strictly below sorted[i]
        let err = (kept as f64 - target).abs();
        if err < best_err - 1e-12 || (err <= best_err + 1e-12 && kept < best_kept) {
            best_err = err;
            best_kept = kept;
            best_gamma = sorted[i];
        }
        // Skip the tie group.
        let v = sorted[i];
        while i < n && sorted[i] == v {
            i += 1;
        }
    }
    let degenerate = sorted[0] == sorted[n - 1] && percentile > 0.0;
    Ok(ThresholdPolicy {
        percentile,
        gamma: best_gamma,
        fitted_on: fitted_on.to_string(),
        score,
        degenerate,
    })
}

/// Applies a policy: the selected predictions in input order, plus the
/// abstained example ids. Fitting and evaluation splits must differ
/// (hash check), unless the policy was explicitly self-calibrated.
pub fn select<'a>(
    preds: &'a [ScoredPrediction],
    policy: &ThresholdPolicy,
    eval_hash: &str,
) -> Result<(Vec<&'a ScoredPrediction>, Vec<u64>)> {
    if policy.fitted_on == eval_hash && policy.fitted_on != SELF_CALIBRATED {
        return Err(Error::SplitLeakage {
            fitted_on: policy.fitted_on.clone(),
        });
    }
    let mut selected = Vec::new();
    let mut abstained = Vec::new();
    for p in preds {
        if p.score(policy.score) < policy.gamma {
            selected.push(p);
        } else {
            abstained.push(p.example_id);
        }
    }
    Ok((selected, abstained))
}

/// Marker hash for policies deliberately fitted on the evaluated set.
pub const SELF_CALIBRATED: &str = "self-calibrated";

/// Coverage and accuracy of a selected subset. Accuracy is `None` when
/// nothing was selected — never reported as zero.
pub fn coverage_accuracy(
    selected: &[&ScoredPrediction],
    total_count: usize,
) -> Result<(f64, Option<f64>)> {
    if total_count == 0 {
        return Err(Error::Degenerate("coverage over zero predictions".into()));
    }
    let coverage = selected.len() as f64 / total_count as f64;
    let accuracy = if selected.is_empty() {
        None
    } else {
        Some(selected.iter().filter(|p| p.correct).count() as f64 / selected.len() as f64)
    };
    Ok((coverage, accuracy))
}

/// Default percentile grid for sweeps.
pub fn default_grid() -> Vec<f64> {
    vec![
        0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 85.0, 90.0, 95.0, 98.0, 99.0, 99.9,
    ]
}

/// One sweep row: the percentile, the mean realized coverage across
/// methods, and each method's selective accuracy (`None` when a method
/// answered nothing at that level).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub percentile: f64,
    pub coverage: f64,
    pub accuracy: Vec<Option<f64>>,
}

/// Per-method inputs to a sweep: a name, the score kind, calibration
/// scores and the scored test predictions.
pub struct SweepMethod<'a> {
    pub name: String,
    pub score: ScoreKind,
    pub calib_scores: Vec<f64>,
    pub preds: &'a [ScoredPrediction],
    pub calib_hash: String,
}

/// Sweeps the percentile grid. Thresholds are fitted per method on its
/// own calibration scores and applied to the shared test set.
pub fn sweep(methods: &[SweepMethod<'_>], grid: &[f64], eval_hash: &str) -> Result<Vec<SweepRow>> {
    if methods.is_empty() {
        return Err(Error::InvalidSpec("sweep over no methods".into()));
    }
    let n = methods[0].preds.len();
    if methods.iter().any(|m| m.preds.len() != n) {
        return Err(Error::InvalidSpec(
            "sweep methods scored different example sets".into(),
        ));
    }
    if let Some(bad) = grid.iter().find(|p| !(0.0..100.0).contains(*p)) {
        return Err(Error::InvalidSpec(format!(
            "grid percentile {bad} outside [0, 100)"
        )));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &p in grid {
        let mut coverages = Vec::with_capacity(methods.len());
        let mut accuracies = Vec::with_capacity(methods.len());
        for m in methods {
            let policy = fit_threshold(&m.calib_scores, p, m.score, &m.calib_hash)?;
            let (selected, _) = select(m.preds, &policy, eval_hash)?;
            let (cov, acc) = coverage_accuracy(&selected, n)?;
            coverages.push(cov);
            accuracies.push(acc);
        }
        rows.push(SweepRow {
            percentile: p,
            coverage: coverages.iter().sum::<f64>() / coverages.len() as f64,
            accuracy: accuracies,
        });
    }
    Ok(rows)
}

/// Risk-coverage curve: predictions sorted by ascending score; each
/// prefix yields a `(coverage, risk)` point. Also returns the area under
/// the curve (the mean prefix risk).
pub fn risk_coverage_curve(
    preds: &[ScoredPrediction],
    score: ScoreKind,
) -> Result<(Vec<(f64, f64)>, f64)> {
    if preds.len() < 2 {
        return Err(Error::Degenerate("risk-coverage needs >= 2 predictions".into()));
    }
    let mut order: Vec<&ScoredPrediction> = preds.iter().collect();
    order.sort_by(|a, b| {
        a.score(score)
            .partial_cmp(&b.score(score))
            .unwrap()
            .then(a.example_id.cmp(&b.example_id))
    });
    let n = order.len();
    let mut points = Vec::with_capacity(n);
    let mut correct = 0usize;
    let mut risk_sum = 0.0;
    for (k, p) in order.iter().enumerate() {
        if p.correct {
            correct += 1;
        }
        let coverage = (k + 1) as f64 / n as f64;
        let risk = 1.0 - correct as f64 / (k + 1) as f64;
        risk_sum += risk;
        points.push((coverage, risk));
    }
    Ok((points, risk_sum / n as f64))
}
