//! Run configuration: one JSON document drives the whole pipeline.
//! Unknown keys are rejected, defaults fill everything else, and
//! constraint violations are reported all at once.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::selective::default_grid;
use crate::tasks::{hex_string, SplitRatios, TaskKind, TaskSpec};
use crate::uq::{UqMethod, DEFAULT_MEMBERS, DEFAULT_SAMPLES};

/// Body architecture knobs; input and head widths come from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden layer widths (ReLU after each). Empty means linear.
    pub hidden: Vec<usize>,
    /// Dropout rate before the heads; zero omits the layer.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![],
            dropout: 0.0,
        }
    }
}

/// Two-phase training: plain cross-entropy pretraining of the base,
/// then a shorter method-specific refinement after conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub refine_epochs: usize,
    pub refine_learning_rate: f64,
    pub sigma_weight_decay: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            refine_epochs: 15,
            refine_learning_rate: 0.01,
            sigma_weight_decay: 0.1,
        }
    }
}

/// Efficiency benchmark knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub batch_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repetitions: 7,
            batch_size: 64,
        }
    }
}

/// Token-trace knobs (generative tasks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    /// Method to trace; defaults to the first sigma-capable method.
    pub method: Option<String>,
    pub steps: usize,
    pub top_k: usize,
    /// Number of test prompts traced.
    pub prompts: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            method: None,
            steps: 4,
            top_k: 5,
            prompts: 3,
        }
    }
}

fn default_methods() -> Vec<UqMethod> {
    vec![
        UqMethod::Baseline,
        UqMethod::Mve { samples: DEFAULT_SAMPLES },
        UqMethod::McDropout { passes: DEFAULT_SAMPLES, rate: 0.25 },
        UqMethod::Ensemble { members: DEFAULT_MEMBERS },
        UqMethod::Composed { passes: DEFAULT_SAMPLES, rate: 0.25 },
    ]
}

fn default_task() -> TaskSpec {
    TaskSpec {
        task: TaskKind::Classification,
        n_examples: 5000,
        noise_rate: 0.25,
        ood_shift: 6.0,
        vocab_size: 16,
        context_len: 8,
        answer_len: 1,
        seed: 0,
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub methods: Vec<UqMethod>,
    pub training: TrainingConfig,
    pub split: SplitRatios,
    pub sweep_grid: Vec<f64>,
    pub seed: u64,
    pub out_dir: String,
    pub self_calibrate: bool,
    pub bench: BenchConfig,
    pub trace: TraceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: default_task(),
            model: ModelConfig::default(),
            methods: default_methods(),
            training: TrainingConfig::default(),
            split: SplitRatios::default(),
            sweep_grid: default_grid(),
            seed: 0,
            out_dir: "runs".into(),
            self_calibrate: false,
            bench: BenchConfig::default(),
            trace: TraceConfig::default(),
        }
    }
}

impl RunConfig {
    /// Checks every constraint, reporting all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::InvalidConfig(mut task_problems)) = self.task.validate() {
            for p in task_problems.drain(..) {
                problems.push(format!("task.{p}"));
            }
        }
        if self.methods.is_empty() {
            problems.push("methods: at least one required".into());
        }
        let mut names = std::collections::HashSet::new();
        for m in &self.methods {
            if let Err(e) = m.validate() {
                problems.push(format!("methods.{}: {e}", m.name()));
            }
            if !names.insert(m.name()) {
                problems.push(format!("methods: duplicate {}", m.name()));
            }
        }
        if self.training.batch_size == 0 {
            problems.push("training.batch_size: must be >= 1".into());
        }
        for (field, lr) in [
            ("training.learning_rate", self.training.learning_rate),
            ("training.refine_learning_rate", self.training.refine_learning_rate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                problems.push(format!("{field}: must be positive, got {lr}"));
            }
        }
        if self.training.sigma_weight_decay < 0.0 {
            problems.push("training.sigma_weight_decay: must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            problems.push(format!("model.dropout: {} outside [0, 1)", self.model.dropout));
        }
        if self.model.hidden.iter().any(|h| *h == 0) {
            problems.push("model.hidden: zero-width layer".into());
        }
        let ratio_sum = self.split.train + self.split.calib + self.split.test;
        if self.split.train <= 0.0
            || self.split.calib <= 0.0
            || self.split.test <= 0.0
            || (ratio_sum - 1.0).abs() > 1e-9
        {
            problems.push(format!(
                "split: ratios must be positive and sum to 1, got {:?}",
                self.split
            ));
        }
        for p in &self.sweep_grid {
            if !(0.0..100.0).contains(p) {
                problems.push(format!("sweep_grid: percentile {p} outside [0, 100)"));
            }
        }
        if self.bench.repetitions < 5 {
            problems.push("bench.repetitions: must be >= 5".into());
        }
        if self.bench.batch_size == 0 {
            problems.push("bench.batch_size: must be >= 1".into());
        }
        if self.trace.steps == 0 || self.trace.top_k == 0 {
            problems.push("trace: steps and top_k must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Hash of the configuration content, independent of where artifacts
    /// land.
    pub fn content_hash(&self) -> Result<String> {
        let mut normalized = self.clone();
        normalized.out_dir = String::new();
        let json = serde_json::to_string(&normalized)?;
        Ok(hex_string(&Sha256::digest(json.as_bytes())))
    }

    /// Short run identifier derived from the content hash.
    pub fn run_id(&self) -> Result<String> {
        Ok(self.content_hash()?[..12].to_string())
    }
}

/// Loads and validates a config file. The `SELQA_SEED` environment
/// variable, when set, overrides the configured seed; the override is
/// reported through the return value so callers can log it.
pub fn load_config(path: &Path) -> Result<(RunConfig, Option<u64>)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(vec![format!("parse: {e}")]))?;
    let mut override_seed = None;
    if let Ok(env_seed) = std::env::var("SELQA_SEED") {
        let seed: u64 = env_seed.parse().map_err(|_| {
            Error::InvalidConfig(vec![format!("SELQA_SEED: not an integer: {env_seed}")])
        })?;
        config.seed = seed;
        config.task.seed = seed;
        override_seed = Some(seed);
    }
    config.validate()?;
    Ok((config, override_seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_valid_defaults() {
        let config: RunConfig = serde_json::from_str("{}").unwrap();
        assert!(config.validate().is_ok());
        assert_eq!(config.methods.len(), 5);
        assert_eq!(config.sweep_grid, default_grid());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"tsak": {}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn high_noise_rate_rejected_with_field_name() {
        let mut config = RunConfig::default();
        config.task.noise_rate = 0.9;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("noise_rate"), "{err}");
    }

    #[test]
    fn all_violations_reported_at_once() {
        let mut config = RunConfig::default();
        config.task.noise_rate = 0.9;
        config.training.batch_size = 0;
        config.sweep_grid.push(120.0);
        match config.validate() {
            Err(Error::InvalidConfig(problems)) => {
                assert!(problems.len() >= 3, "{problems:?}");
            }
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_preserves_config() {
        let config = RunConfig::default();
        let json = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn hash_ignores_out_dir() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        let mut c = RunConfig::default();
        c.seed = 99;
        assert_ne!(a.content_hash().unwrap(), c.content_hash().unwrap());
    }

    #[test]
    fn method_defaults_fill_in() {
        let config: RunConfig =
            serde_json::from_str(r#"{"methods": [{"kind": "mve"}, {"kind": "ensemble"}]}"#)
                .unwrap();
        assert_eq!(config.methods[0], UqMethod::Mve { samples: 10 });
        assert_eq!(config.methods[1], UqMethod::Ensemble { members: 5 });
    }

    #[test]
    fn duplicate_methods_rejected() {
        let config: RunConfig = serde_json::from_str(
            r#"{"methods": [{"kind": "baseline"}, {"kind": "baseline"}]}"#,
        )
        .unwrap();
        assert!(config.validate().is_err());
    }
}
