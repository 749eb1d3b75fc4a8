//! End-to-end pipeline: generate data, train and convert models,
//! evaluate, sweep, benchmark, trace. Each command writes its artifacts
//! under `out_dir/<run-id>/<command>/`; reruns of a completed stage
//! require `force`. All randomness flows from the single configured
//! seed, so identical configs reproduce identical artifacts byte for
//! byte (wall-clock timings in benchmark output aside).

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_dir, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::generate::{decode, DecodeMode};
use crate::metrics::token_f1;
use crate::model::{LayerSpec, ModelSpec};
use crate::report::{
    accuracy_svg, efficiency_bench, efficiency_csv, risk_coverage_svg, sweep_csv, token_trace,
    EvalReport, NominalRow,
};
use crate::rng::stream_id;
use crate::selective::{
    risk_coverage_curve, sweep, Answer, ScoreKind, ScoredPrediction, SweepMethod, SELF_CALIBRATED,
};
use crate::tasks::{
    dataset_hash, extractive_feature_dim, extractive_train_example, featurize_classification,
    featurize_extractive, gen_classification, gen_extractive, gen_generative,
    generative_feature_dim, generative_train_examples, read_jsonl, split, write_jsonl,
    ClassificationExample, Dataset, DatasetHeader, Example, ExtractiveExample, GenerativeExample,
    TaskKind,
};
use crate::tensor::{softmax_slice, Tensor};
use crate::train::{run_training, train, CrossEntropyLoss, TrainConfig, TrainExample};
use crate::uq::{
    calibrate_stats, convert, predict, ConvertedModel, MveLoss, UqMethod,
};

/// Pipeline commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Evaluate,
    Sweep,
    Bench,
    Trace,
    All,
}

impl Command {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
            Command::Bench => "bench",
            Command::Trace => "trace",
            Command::All => "all",
        }
    }

    pub fn parse(name: &str) -> Option<Command> {
        match name {
            "gen-data" => Some(Command::GenData),
            "train" => Some(Command::Train),
            "evaluate" => Some(Command::Evaluate),
            "sweep" => Some(Command::Sweep),
            "bench" => Some(Command::Bench),
            "trace" => Some(Command::Trace),
            "all" => Some(Command::All),
            _ => None,
        }
    }
}

/// A configured pipeline bound to its run directory.
pub struct Pipeline {
    pub config: RunConfig,
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub workers: usize,
    pub force: bool,
    pub self_calibrate: bool,
}

/// Header line for prediction log files.
#[derive(Debug, Serialize, Deserialize)]
struct PredsHeader {
    method: String,
    split: String,
    split_hash: String,
    config_hash: String,
}

impl Pipeline {
    pub fn new(
        config: RunConfig,
        out_override: Option<&Path>,
        workers: usize,
        force: bool,
        self_calibrate_flag: bool,
    ) -> Result<Self> {
        config.validate()?;
        let config_hash = config.content_hash()?;
        let base = out_override
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(&config.out_dir));
        let run_dir = base.join(config.run_id()?);
        let self_calibrate = self_calibrate_flag || config.self_calibrate;
        Ok(Pipeline {
            config,
            run_dir,
            config_hash,
            workers,
            force,
            self_calibrate,
        })
    }

    /// Model architecture for the configured task: hidden ReLU stack from
    /// the model config, input and head widths from the task shape.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let task = &self.config.task;
        let (input_dim, head_dims) = match task.task {
            TaskKind::Classification => (2, vec![crate::tasks::NUM_CLUSTERS]),
            TaskKind::Extractive => (extractive_feature_dim(task.vocab_size), vec![1, 1]),
            TaskKind::Generative => (generative_feature_dim(task.vocab_size), vec![task.vocab_size]),
        };
        let mut layers = Vec::new();
        let mut width = input_dim;
        for h in &self.config.model.hidden {
            layers.push(LayerSpec::Linear { inputs: width, outputs: *h });
            layers.push(LayerSpec::Relu);
            width = *h;
        }
        if self.config.model.dropout > 0.0 {
            layers.push(LayerSpec::Dropout { rate: self.config.model.dropout });
        }
        ModelSpec::new(input_dim, layers, head_dims)
    }

    fn stage_dir(&self, cmd: Command) -> PathBuf {
        self.run_dir.join(cmd.dir_name())
    }

    fn prepare_stage(&self, cmd: Command) -> Result<PathBuf> {
        let dir = self.stage_dir(cmd);
        if dir.exists() {
            if !self.force {
                return Err(Error::InvalidSpec(format!(
                    "{} already exists; rerun with --force to overwrite",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(dir)
    }

    fn require(&self, path: PathBuf) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact(path.display().to_string()))
        }
    }

    /// Runs one command; `All` chains the full pipeline. On failure the
    /// stage directory is marked with a `.failed` file.
    pub fn run(&self, cmd: Command) -> Result<()> {
        match cmd {
            Command::All => {
                for stage in [
                    Command::GenData,
                    Command::Train,
                    Command::Evaluate,
                    Command::Sweep,
                    Command::Bench,
                ] {
                    self.run(stage)?;
                }
                Ok(())
            }
            single => {
                let result = self.dispatch(single);
                if result.is_err() {
                    let dir = self.stage_dir(single);
                    let _ = std::fs::create_dir_all(&dir);
                    let _ = std::fs::write(dir.join(".failed"), "stage aborted\n");
                }
                result
            }
        }
    }

    fn dispatch(&self, cmd: Command) -> Result<()> {
        // Write the resolved config once per run directory.
        std::fs::create_dir_all(&self.run_dir)
            .map_err(|e| Error::io(self.run_dir.display().to_string(), e))?;
        let config_path = self.run_dir.join("config.json");
        if !config_path.exists() {
            let json = format!("{}\n", serde_json::to_string_pretty(&self.config)?);
            std::fs::write(&config_path, json)
                .map_err(|e| Error::io(config_path.display().to_string(), e))?;
        }
        match cmd {
            Command::GenData => self.gen_data(),
            Command::Train => self.train_stage(),
            Command::Evaluate => self.evaluate(),
            Command::Sweep => self.sweep_stage(),
            Command::Bench => self.bench(),
            Command::Trace => self.trace(),
            Command::All => unreachable!("handled by run"),
        }
    }

    fn with_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        if self.workers == 0 {
            Ok(f())
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.workers)
                .build()
                .map_err(|e| Error::InvalidSpec(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }

    // ----- gen-data ------------------------------------------------------

    fn gen_data(&self) -> Result<()> {
        let dir = self.prepare_stage(Command::GenData)?;
        match self.config.task.task {
            TaskKind::Classification => {
                let data = gen_classification(&self.config.task)?;
                self.write_dataset(&dir, &data)
            }
            TaskKind::Extractive => {
                let data = gen_extractive(&self.config.task)?;
                self.write_dataset(&dir, &data)
            }
            TaskKind::Generative => {
                let data = gen_generative(&self.config.task)?;
                self.write_dataset(&dir, &data)
            }
        }
    }

    fn write_dataset<E: Example>(&self, dir: &Path, data: &Dataset<E>) -> Result<()> {
        let hash = dataset_hash(data)?;
        let header = DatasetHeader {
            task_spec: data.spec.clone(),
            split: None,
            parent_hash: Some(hash.clone()),
        };
        write_jsonl(&dir.join("dataset.jsonl"), &header, &data.examples)?;
        let (train_set, calib_set, test_set) = split(data, self.config.split, self.config.seed)?;
        for s in [&train_set, &calib_set, &test_set] {
            let header = DatasetHeader {
                task_spec: s.spec.clone(),
                split: Some(s.name.clone()),
                parent_hash: Some(s.parent_hash.clone()),
            };
            write_jsonl(&dir.join(format!("{}.jsonl", s.name)), &header, &s.examples)?;
        }
        Ok(())
    }

    fn split_path(&self, name: &str) -> Result<PathBuf> {
        self.require(self.stage_dir(Command::GenData).join(format!("{name}.jsonl")))
    }

    /// Content hash of a split file used by the leakage guard.
    fn split_hash(&self, name: &str) -> Result<String> {
        let path = self.split_path(name)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        use sha2::Digest;
        Ok(crate::tasks::hex_string(&sha2::Sha256::digest(&bytes)))
    }

    // ----- train ----------------------------------------------------------

    fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.config.training.epochs,
            batch_size: self.config.training.batch_size,
            learning_rate: self.config.training.learning_rate,
            seed: self.config.seed,
            sigma_weight_decay: self.config.training.sigma_weight_decay,
        }
    }

    fn refine_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.config.training.refine_epochs,
            batch_size: self.config.training.batch_size,
            learning_rate: self.config.training.refine_learning_rate,
            seed: stream_id(&[self.config.seed, 0x4ef1]),
            sigma_weight_decay: self.config.training.sigma_weight_decay,
        }
    }

    fn train_examples(&self, split_name: &str) -> Result<Vec<TrainExample>> {
        let task = &self.config.task;
        match task.task {
            TaskKind::Classification => {
                let examples: Vec<ClassificationExample> = self.read_split(split_name)?;
                Ok(examples
                    .iter()
                    .map(|e| TrainExample {
                        features: featurize_classification(e),
                        labels: vec![e.label],
                    })
                    .collect())
            }
            TaskKind::Extractive => {
                let examples: Vec<ExtractiveExample> = self.read_split(split_name)?;
                examples
                    .iter()
                    .map(|e| extractive_train_example(e, task.vocab_size))
                    .collect()
            }
            TaskKind::Generative => {
                let examples: Vec<GenerativeExample> = self.read_split(split_name)?;
                let mut out = Vec::new();
                for e in &examples {
                    out.extend(generative_train_examples(e, task.vocab_size)?);
                }
                Ok(out)
            }
        }
    }

    fn read_split<E: Example>(&self, name: &str) -> Result<Vec<E>> {
        let path = self.split_path(name)?;
        let (_, examples) = read_jsonl(&path)?;
        Ok(examples)
    }

    /// Pretrains the shared base, converts it per method, refines each
    /// variant with its own loss and checkpoints the results.
    fn train_stage(&self) -> Result<()> {
        let dir = self.prepare_stage(Command::Train)?;
        let spec = self.model_spec()?;
        let train_data = self.train_examples("train")?;
        let pretrain = self.pretrain_config();
        let refine = self.refine_config();

        let mut log_lines: Vec<String> = Vec::new();
        let (base, base_losses) = train(&spec, &train_data, &pretrain)?;
        for (epoch, loss) in base_losses.iter().enumerate() {
            log_lines.push(serde_json::to_string(&serde_json::json!({
                "phase": "pretrain", "epoch": epoch, "loss": loss,
                "config_hash": self.config_hash,
            }))?);
        }

        for method in &self.config.methods {
            let mut model = convert(&spec, &base, *method, self.config.seed)?;
            let losses: Vec<Vec<f64>> = match method {
                UqMethod::Baseline => vec![],
                UqMethod::Ensemble { .. } => {
                    let mut all = Vec::new();
                    for member in &mut model.members {
                        all.push(run_training(&model.spec, member, &train_data, &pretrain, &CrossEntropyLoss)?);
                    }
                    all
                }
                UqMethod::Mve { samples } | UqMethod::Composed { passes: samples, .. } => {
                    let loss = MveLoss::new(*samples);
                    vec![run_training(&model.spec, &mut model.params, &train_data, &refine, &loss)?]
                }
                UqMethod::McDropout { .. } => {
                    vec![run_training(&model.spec, &mut model.params, &train_data, &refine, &CrossEntropyLoss)?]
                }
            };
            for (series, epochs) in losses.iter().enumerate() {
                for (epoch, loss) in epochs.iter().enumerate() {
                    log_lines.push(serde_json::to_string(&serde_json::json!({
                        "phase": "refine", "method": method.name(), "series": series,
                        "epoch": epoch, "loss": loss, "config_hash": self.config_hash,
                    }))?);
                }
            }
            if matches!(method, UqMethod::Composed { .. }) {
                let calib_inputs = self.calibration_inputs()?;
                model.calibration = Some(calibrate_stats(&model, &calib_inputs, self.config.seed)?);
            }
            save_checkpoint(&checkpoint_dir(&dir, method.name()), &model, self.config.seed)?;
        }

        let log_path = dir.join("training_log.jsonl");
        std::fs::write(&log_path, format!("{}\n", log_lines.join("\n")))
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        Ok(())
    }

    /// Feature tensors of the calibration split, paired with example ids.
    fn calibration_inputs(&self) -> Result<Vec<(u64, Tensor)>> {
        let task = &self.config.task;
        match task.task {
            TaskKind::Classification => {
                let examples: Vec<ClassificationExample> = self.read_split("calib")?;
                Ok(examples.iter().map(|e| (e.id, featurize_classification(e))).collect())
            }
            TaskKind::Extractive => {
                let examples: Vec<ExtractiveExample> = self.read_split("calib")?;
                examples
                    .iter()
                    .map(|e| Ok((e.id, featurize_extractive(e, task.vocab_size)?)))
                    .collect()
            }
            TaskKind::Generative => {
                // Per-step calibration over the first continuation step.
                let examples: Vec<GenerativeExample> = self.read_split("calib")?;
                examples
                    .iter()
                    .map(|e| {
                        let a = e.prompt[e.prompt.len() - 2];
                        let b = e.prompt[e.prompt.len() - 1];
                        Ok((e.id, crate::tasks::featurize_generative_step(a, b, task.vocab_size)?))
                    })
                    .collect()
            }
        }
    }

    fn load_model(&self, method: &UqMethod) -> Result<ConvertedModel> {
        let dir = self.require(checkpoint_dir(&self.stage_dir(Command::Train), method.name()))?;
        Ok(load_checkpoint(&dir)?.0)
    }

    // ----- evaluate -------------------------------------------------------

    /// Scores the calibration and test splits with every method and logs
    /// the predictions plus nominal metrics.
    fn evaluate(&self) -> Result<()> {
        let dir = self.prepare_stage(Command::Evaluate)?;
        let mut nominal = Vec::new();
        for method in &self.config.methods {
            let model = self.load_model(method)?;
            for split_name in ["calib", "test"] {
                let (preds, extras) = self.score_split(&model, split_name)?;
                let header = PredsHeader {
                    method: method.name().to_string(),
                    split: split_name.to_string(),
                    split_hash: self.split_hash(split_name)?,
                    config_hash: self.config_hash.clone(),
                };
                let path = dir.join(format!("preds_{}_{}.jsonl", method.name(), split_name));
                let mut out = serde_json::to_string(&header)?;
                out.push('\n');
                for p in &preds {
                    out.push_str(&serde_json::to_string(p)?);
                    out.push('\n');
                }
                std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;

                if split_name == "test" {
                    let n = preds.len() as f64;
                    let accuracy = preds.iter().filter(|p| p.correct).count() as f64 / n;
                    nominal.push(NominalRow {
                        method: method.name().to_string(),
                        accuracy: match self.config.task.task {
                            TaskKind::Generative => extras.iter().sum::<f64>() / n,
                            _ => accuracy,
                        },
                        exact_match: match self.config.task.task {
                            TaskKind::Classification => None,
                            _ => Some(accuracy),
                        },
                        token_f1: match self.config.task.task {
                            TaskKind::Extractive => Some(extras.iter().sum::<f64>() / n),
                            _ => None,
                        },
                    });
                }
            }
        }
        let path = dir.join("nominal.json");
        let json = serde_json::to_string_pretty(&serde_json::json!({
            "config_hash": self.config_hash,
            "rows": nominal,
        }))?;
        std::fs::write(&path, format!("{json}\n"))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Scores one split. The extra per-example value is the token F1 for
    /// extractive tasks and the token accuracy for generative tasks.
    fn score_split(
        &self,
        model: &ConvertedModel,
        split_name: &str,
    ) -> Result<(Vec<ScoredPrediction>, Vec<f64>)> {
        let task = &self.config.task;
        let seed = self.config.seed;
        match task.task {
            TaskKind::Classification => {
                let examples: Vec<ClassificationExample> = self.read_split(split_name)?;
                let results: Vec<Result<ScoredPrediction>> = self.with_pool(|| {
                    examples
                        .par_iter()
                        .map(|e| {
                            let out = &predict(model, &featurize_classification(e), seed, e.id)?[0];
                            Ok(ScoredPrediction {
                                example_id: e.id,
                                answer: Answer::Class { label: out.predicted },
                                sigma: out.sigma,
                                confidence: out.confidence,
                                correct: out.predicted == e.label,
                            })
                        })
                        .collect()
                })?;
                let preds: Vec<ScoredPrediction> = results.into_iter().collect::<Result<_>>()?;
                let extras = vec![0.0; preds.len()];
                Ok((preds, extras))
            }
            TaskKind::Extractive => {
                let examples: Vec<ExtractiveExample> = self.read_split(split_name)?;
                let vocab = task.vocab_size;
                let max_span = task.answer_len + 2;
                let results: Vec<Result<(ScoredPrediction, f64)>> = self.with_pool(|| {
                    examples
                        .par_iter()
                        .map(|e| {
                            let x = featurize_extractive(e, vocab)?;
                            let outs = predict(model, &x, seed, e.id)?;
                            let span = best_span(
                                outs[0].mu.row_slice(0),
                                outs[1].mu.row_slice(0),
                                max_span,
                            )?;
                            let sigma = (outs[0].sigma + outs[1].sigma) / 2.0;
                            let confidence = span_confidence(
                                outs[0].mu.row_slice(0),
                                outs[1].mu.row_slice(0),
                                span,
                            );
                            let correct = span == e.gold_span;
                            let f1 = span_token_f1(&e.context, span, e.gold_span);
                            Ok((
                                ScoredPrediction {
                                    example_id: e.id,
                                    answer: Answer::Span { start: span.0, end: span.1 },
                                    sigma,
                                    confidence,
                                    correct,
                                },
                                f1,
                            ))
                        })
                        .collect()
                })?;
                let pairs: Vec<(ScoredPrediction, f64)> =
                    results.into_iter().collect::<Result<_>>()?;
                Ok(pairs.into_iter().unzip())
            }
            TaskKind::Generative => {
                let examples: Vec<GenerativeExample> = self.read_split(split_name)?;
                let vocab = task.vocab_size;
                let steps = task.answer_len;
                let results: Vec<Result<(ScoredPrediction, f64)>> = self.with_pool(|| {
                    examples
                        .par_iter()
                        .map(|e| {
                            let decoded = decode(
                                model,
                                &e.prompt,
                                steps,
                                vocab,
                                DecodeMode::Greedy,
                                seed,
                                e.id,
                                0,
                            )?;
                            let (token_acc, exact) =
                                crate::metrics::sequence_accuracy(&decoded.tokens, &e.target);
                            Ok((
                                ScoredPrediction {
                                    example_id: e.id,
                                    answer: Answer::Tokens { tokens: decoded.tokens.clone() },
                                    sigma: decoded.sigma,
                                    confidence: decoded.confidence,
                                    correct: exact,
                                },
                                token_acc,
                            ))
                        })
                        .collect()
                })?;
                let pairs: Vec<(ScoredPrediction, f64)> =
                    results.into_iter().collect::<Result<_>>()?;
                Ok(pairs.into_iter().unzip())
            }
        }
    }

    fn read_preds(&self, method: &str, split_name: &str) -> Result<(PredsHeader, Vec<ScoredPrediction>)> {
        let path = self.require(
            self.stage_dir(Command::Evaluate)
                .join(format!("preds_{method}_{split_name}.jsonl")),
        )?;
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = text.lines();
        let header: PredsHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::MissingArtifact(format!("{} is empty", path.display())))?,
        )?;
        let preds = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect::<Result<Vec<_>>>()?;
        Ok((header, preds))
    }

    // ----- sweep ----------------------------------------------------------

    fn method_score_kind(method: &UqMethod) -> ScoreKind {
        match method {
            UqMethod::Baseline => ScoreKind::OneMinusConfidence,
            _ => ScoreKind::Sigma,
        }
    }

    /// Fits per-method thresholds across the percentile grid and writes
    /// the sweep table, the accuracy plot and the risk-coverage plot.
    fn sweep_stage(&self) -> Result<()> {
        let dir = self.prepare_stage(Command::Sweep)?;
        let mut methods = Vec::new();
        let mut names = Vec::new();
        let mut all_test: Vec<Vec<ScoredPrediction>> = Vec::new();
        for method in &self.config.methods {
            let (_, test_preds) = self.read_preds(method.name(), "test")?;
            all_test.push(test_preds);
            names.push(method.name().to_string());
        }
        let test_hash = self.split_hash("test")?;
        for (method, test_preds) in self.config.methods.iter().zip(&all_test) {
            let kind = Self::method_score_kind(method);
            let (calib_scores, calib_hash) = if self.self_calibrate {
                (
                    test_preds.iter().map(|p| p.score(kind)).collect(),
                    SELF_CALIBRATED.to_string(),
                )
            } else {
                let (header, calib_preds) = self.read_preds(method.name(), "calib")?;
                (
                    calib_preds.iter().map(|p| p.score(kind)).collect(),
                    header.split_hash,
                )
            };
            methods.push(SweepMethod {
                name: method.name().to_string(),
                score: kind,
                calib_scores,
                preds: test_preds,
                calib_hash,
            });
        }
        let rows = sweep(&methods, &self.config.sweep_grid, &test_hash)?;

        let mut curves = Vec::new();
        for m in &methods {
            let (points, _aurc) = risk_coverage_curve(m.preds, m.score)?;
            curves.push(points);
        }

        let nominal_path = self.require(self.stage_dir(Command::Evaluate).join("nominal.json"))?;
        let nominal_text = std::fs::read_to_string(&nominal_path)
            .map_err(|e| Error::io(nominal_path.display().to_string(), e))?;
        let nominal: serde_json::Value = serde_json::from_str(&nominal_text)?;
        let nominal_rows: Vec<NominalRow> =
            serde_json::from_value(nominal["rows"].clone())?;

        let report = EvalReport {
            methods: names.clone(),
            nominal: nominal_rows,
            sweep: rows.clone(),
            efficiency: vec![],
            seeds: vec![self.config.seed],
            config_hash: self.config_hash.clone(),
        };
        let write = |name: &str, content: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))
        };
        write("sweep.csv", sweep_csv(&names, &rows))?;
        write(
            "accuracy_vs_percentile.svg",
            format!("<!-- config {} -->\n{}", self.config_hash, accuracy_svg(&names, &rows)),
        )?;
        write(
            "risk_coverage.svg",
            format!("<!-- config {} -->\n{}", self.config_hash, risk_coverage_svg(&names, &curves)),
        )?;
        write("report.json", format!("{}\n", serde_json::to_string_pretty(&report)?))?;
        Ok(())
    }

    // ----- bench ----------------------------------------------------------

    /// Times each trained variant on a shared feature batch.
    fn bench(&self) -> Result<()> {
        let dir = self.prepare_stage(Command::Bench)?;
        let mut models = Vec::new();
        for method in &self.config.methods {
            models.push((method.name().to_string(), self.load_model(method)?));
        }
        let model_refs: Vec<(String, &ConvertedModel)> =
            models.iter().map(|(n, m)| (n.clone(), m)).collect();
        let batch = self.bench_batch()?;
        let rows = efficiency_bench(
            &model_refs,
            &batch,
            self.config.bench.repetitions,
            self.config.seed,
        )?;
        let path = dir.join("efficiency.csv");
        std::fs::write(&path, efficiency_csv(&rows))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    fn bench_batch(&self) -> Result<Vec<Tensor>> {
        let task = &self.config.task;
        let n = self.config.bench.batch_size;
        match task.task {
            TaskKind::Classification => {
                let examples: Vec<ClassificationExample> = self.read_split("test")?;
                Ok(examples.iter().take(n).map(featurize_classification).collect())
            }
            TaskKind::Extractive => {
                let examples: Vec<ExtractiveExample> = self.read_split("test")?;
                examples
                    .iter()
                    .take(n)
                    .map(|e| featurize_extractive(e, task.vocab_size))
                    .collect()
            }
            TaskKind::Generative => {
                let examples: Vec<GenerativeExample> = self.read_split("test")?;
                examples
                    .iter()
                    .take(n)
                    .map(|e| {
                        let a = e.prompt[e.prompt.len() - 2];
                        let b = e.prompt[e.prompt.len() - 1];
                        crate::tasks::featurize_generative_step(a, b, task.vocab_size)
                    })
                    .collect()
            }
        }
    }

    // ----- trace ----------------------------------------------------------

    /// Token-level uncertainty traces over a few test prompts
    /// (generative tasks only).
    fn trace(&self) -> Result<()> {
        if self.config.task.task != TaskKind::Generative {
            return Err(Error::InvalidConfig(vec![
                "trace: requires a generative task".into(),
            ]));
        }
        let dir = self.prepare_stage(Command::Trace)?;
        let method = match &self.config.trace.method {
            Some(name) => self
                .config
                .methods
                .iter()
                .find(|m| m.name() == name)
                .ok_or_else(|| {
                    Error::InvalidConfig(vec![format!("trace.method: unknown method {name}")])
                })?,
            None => self
                .config
                .methods
                .iter()
                .find(|m| !matches!(m, UqMethod::Baseline))
                .ok_or_else(|| {
                    Error::InvalidConfig(vec!["trace: no uncertainty-aware method configured".into()])
                })?,
        };
        let model = self.load_model(method)?;
        let examples: Vec<GenerativeExample> = self.read_split("test")?;
        let path = dir.join("trace.jsonl");
        let mut out = serde_json::to_string(&serde_json::json!({
            "method": method.name(),
            "config_hash": self.config_hash,
        }))?;
        out.push('\n');
        for e in examples.iter().take(self.config.trace.prompts) {
            let records = token_trace(
                &model,
                &e.prompt,
                self.config.trace.steps,
                self.config.trace.top_k,
                self.config.task.vocab_size,
                self.config.seed,
                e.id,
            )?;
            for r in records {
                out.push_str(&serde_json::to_string(&serde_json::json!({
                    "example_id": e.id,
                    "record": r,
                }))?);
                out.push('\n');
            }
        }
        std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Best span by summed start/end scores over the admissible span set.
pub fn best_span(start_scores: &[f64], end_scores: &[f64], max_span_len: usize) -> Result<(usize, usize)> {
    let spans = crate::tasks::enumerate_spans(start_scores.len(), max_span_len)?;
    let mut best = (0usize, 0usize);
    let mut best_score = f64::NEG_INFINITY;
    for (s, e) in spans {
        let score = start_scores[s] + end_scores[e];
        if score > best_score {
            best_score = score;
            best = (s, e);
        }
    }
    Ok(best)
}

/// Joint probability of the chosen span under independent position
/// softmaxes.
fn span_confidence(start_scores: &[f64], end_scores: &[f64], span: (usize, usize)) -> f64 {
    let ps = softmax_slice(start_scores);
    let pe = softmax_slice(end_scores);
    ps[span.0] * pe[span.1]
}

fn span_token_f1(context: &[u32], pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let slice = |(s, e): (usize, usize)| -> Vec<u32> { context[s..=e].to_vec() };
    token_f1(&slice(pred), &slice(gold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_span_prefers_admissible_pairs() {
        // End before start is never admissible even if its scores win.
        let start = [0.0, 0.0, 10.0];
        let end = [10.0, 0.0, 0.0];
        let span = best_span(&start, &end, 3).unwrap();
        assert!(span.0 <= span.1);
    }

    #[test]
    fn best_span_matches_exhaustive_search() {
        let start = [0.1, 2.0, -1.0, 0.7];
        let end = [0.0, 0.5, 3.0, -2.0];
        let best = best_span(&start, &end, 2).unwrap();
        let mut expect = (0, 0);
        let mut score = f64::NEG_INFINITY;
        for s in 0..4 {
            for e in s..4.min(s + 2) {
                if start[s] + end[e] > score {
                    score = start[s] + end[e];
                    expect = (s, e);
                }
            }
        }
        assert_eq!(best, expect);
    }

    #[test]
    fn command_names_round_trip() {
        for cmd in [
            Command::GenData,
            Command::Train,
            Command::Evaluate,
            Command::Sweep,
            Command::Bench,
            Command::Trace,
            Command::All,
        ] {
            assert_eq!(Command::parse(cmd.dir_name()), Some(cmd));
        }
        assert_eq!(Command::parse("nope"), None);
    }
}
