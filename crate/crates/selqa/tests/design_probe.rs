//! Manual probe for the acceptance-task geometry. Run with
//! `cargo test --release --test design_probe -- --ignored --nocapture`.
//! Env knobs: PROBE_SUM (sum-reduce for mc/ensemble), PROBE_DECAY,
//! PROBE_REFINE_LR, PROBE_REFINE_EPOCHS.

use selqa::metrics::auroc;
use selqa::model::ModelSpec;
use selqa::tasks::{
    featurize_classification, gen_classification, split, ClassificationExample, Region,
    SplitRatios, TaskKind, TaskSpec,
};
use selqa::train::{train, TrainConfig, TrainExample};
use selqa::uq::{
    calibrate_stats, convert, predict, train_converted, ConvertedModel, UqMethod,
};
use selqa::Tensor;

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn task_spec(seed: u64) -> TaskSpec {
    TaskSpec {
        task: TaskKind::Classification,
        n_examples: 5000,
        noise_rate: 0.25,
        ood_shift: 6.0,
        vocab_size: 16,
        context_len: 8,
        answer_len: 1,
        seed,
    }
}

fn to_train(examples: &[ClassificationExample]) -> Vec<TrainExample> {
    examples
        .iter()
        .map(|e| TrainExample {
            features: featurize_classification(e),
            labels: vec![e.label],
        })
        .collect()
}

struct Scored {
    sigma: f64,
    sigma_sum: f64,
    confidence: f64,
    correct: bool,
    region: Region,
}

fn score_all(model: &ConvertedModel, examples: &[ClassificationExample], seed: u64) -> Vec<Scored> {
    examples
        .iter()
        .map(|e| {
            let x = featurize_classification(e);
            let out = &predict(model, &x, seed, e.id).unwrap()[0];
            Scored {
                sigma: out.sigma,
                sigma_sum: out.sigma_vec.sum(),
                confidence: out.confidence,
                correct: out.predicted == e.label,
                region: e.region,
            }
        })
        .collect()
}

#[test]
#[ignore]
fn probe_classification_design() {
    let decay = env_f64("PROBE_DECAY", 0.1);
    let refine_lr = env_f64("PROBE_REFINE_LR", 0.01);
    let refine_epochs = env_f64("PROBE_REFINE_EPOCHS", 15.0) as usize;
    let use_sum_env = std::env::var("PROBE_SUM").is_ok();
    println!("decay {decay} refine_lr {refine_lr} refine_epochs {refine_epochs} sum {use_sum_env}");

    for seed in [101u64, 202, 303, 404, 505] {
        let spec = task_spec(seed);
        let data = gen_classification(&spec).unwrap();
        let (train_set, calib_set, test_set) = split(&data, SplitRatios::default(), seed).unwrap();
        let train_data = to_train(&train_set.examples);

        let model_spec = ModelSpec::new(2, vec![], vec![4]).unwrap();
        let pretrain = TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            seed,
            sigma_weight_decay: decay,
        };
        let refine = TrainConfig {
            epochs: refine_epochs,
            batch_size: 64,
            learning_rate: refine_lr,
            seed: seed + 1,
            sigma_weight_decay: decay,
        };
        let (base, _) = train(&model_spec, &train_data, &pretrain).unwrap();

        let methods = [
            UqMethod::Baseline,
            UqMethod::Mve { samples: 10 },
            UqMethod::McDropout { passes: 10, rate: 0.25 },
            UqMethod::Ensemble { members: 5 },
            UqMethod::Composed { passes: 10, rate: 0.25 },
        ];

        println!("== seed {seed} ==");
        let mut defect_aurocs: Vec<(String, f64)> = Vec::new();
        for method in methods {
            let mut model = convert(&model_spec, &base, method, seed).unwrap();
            match method {
                UqMethod::Baseline => {}
                UqMethod::Ensemble { .. } => {
                    // Members are fresh inits: full pretraining each.
                    train_converted(&mut model, &train_data, &pretrain).unwrap();
                }
                _ => {
                    train_converted(&mut model, &train_data, &refine).unwrap();
                }
            }
            if matches!(method, UqMethod::Composed { .. }) {
                let calib_x: Vec<(u64, Tensor)> = calib_set
                    .examples
                    .iter()
                    .map(|e| (e.id, featurize_classification(e)))
                    .collect();
                model.calibration = Some(calibrate_stats(&model, &calib_x, seed).unwrap());
            }

            let test_scored = score_all(&model, &test_set.examples, seed);
            let calib_scored = score_all(&model, &calib_set.examples, seed);
            let overall =
                test_scored.iter().filter(|s| s.correct).count() as f64 / test_scored.len() as f64;

            let use_sum = use_sum_env && !matches!(method, UqMethod::Baseline);
            let score_of = |s: &Scored| {
                if matches!(method, UqMethod::Baseline) {
                    1.0 - s.confidence
                } else if use_sum {
                    s.sigma_sum
                } else {
                    s.sigma
                }
            };

            let mut calib_scores: Vec<f64> = calib_scored.iter().map(score_of).collect();
            calib_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let gamma = calib_scores[(calib_scores.len() as f64 * 0.2) as usize];
            let selected: Vec<&Scored> =
                test_scored.iter().filter(|s| score_of(s) < gamma).collect();
            let cov20 = selected.len() as f64 / test_scored.len() as f64;
            let acc20 = selected.iter().filter(|s| s.correct).count() as f64
                / selected.len().max(1) as f64;

            let collect = |pred: &dyn Fn(&Scored) -> bool| -> Vec<f64> {
                test_scored.iter().filter(|s| pred(s)).map(score_of).collect()
            };
            let noisy = collect(&|s: &Scored| s.region == Region::Noisy);
            let clean = collect(&|s: &Scored| s.region == Region::Clean);
            let ood = collect(&|s: &Scored| s.region == Region::Ood);
            let in_dist = collect(&|s: &Scored| s.region != Region::Ood);
            let defect = collect(&|s: &Scored| s.region != Region::Clean);
            let auroc_noise = auroc(&noisy, &clean);
            let auroc_ood = auroc(&ood, &in_dist);
            let auroc_defect = auroc(&defect, &clean);
            defect_aurocs.push((method.name().to_string(), auroc_defect));

            println!(
                "{:<10} overall {:.3} | cov20 {:.3} acc20 {:.3} gap {:+.1}pts | auroc noise {:.3} ood {:.3} defect {:.3}",
                method.name(), overall, cov20, acc20, (acc20 - overall) * 100.0,
                auroc_noise, auroc_ood, auroc_defect,
            );

            if matches!(method, UqMethod::Baseline) {
                let mut by_conf: Vec<&Scored> = test_scored.iter().collect();
                by_conf.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
                let k = (by_conf.len() as f64 * 0.02).ceil() as usize;
                let top = &by_conf[..k];
                let top_acc = top.iter().filter(|s| s.correct).count() as f64 / k as f64;
                let ood_share =
                    top.iter().filter(|s| s.region == Region::Ood).count() as f64 / k as f64;
                println!("           top2% acc {top_acc:.3} (ood share {ood_share:.2}) vs overall {overall:.3}");
            }
            if matches!(method, UqMethod::Mve { .. }) {
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                let mut sorted = in_dist.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut oods = ood.clone();
                oods.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let med = oods[oods.len() / 2];
                let rank =
                    sorted.iter().filter(|v| **v < med).count() as f64 / sorted.len() as f64;
                let s_noisy: Vec<f64> = test_scored.iter().filter(|s| s.region == Region::Noisy).map(|s| s.sigma_sum).collect();
                let s_clean: Vec<f64> = test_scored.iter().filter(|s| s.region == Region::Clean).map(|s| s.sigma_sum).collect();
                let s_ood: Vec<f64> = test_scored.iter().filter(|s| s.region == Region::Ood).map(|s| s.sigma_sum).collect();
                let s_in: Vec<f64> = test_scored.iter().filter(|s| s.region != Region::Ood).map(|s| s.sigma_sum).collect();
                println!(
                    "           mve sigma: noisy {:.4} clean {:.4} ood {:.4} | ood med pctile {:.2} | sum-reduce noise {:.3} ood {:.3}",
                    mean(&noisy), mean(&clean), mean(&ood), rank,
                    auroc(&s_noisy, &s_clean), auroc(&s_ood, &s_in),
                );
            }
        }
        let best_single = defect_aurocs
            .iter()
            .filter(|(n, _)| n == "mve" || n == "mc_dropout")
            .map(|(_, a)| *a)
            .fold(f64::NEG_INFINITY, f64::max);
        let composed = defect_aurocs.iter().find(|(n, _)| n == "composed").unwrap().1;
        println!(
            "composed defect auroc {:.3} vs best single {:.3} ({})",
            composed, best_single,
            if composed > best_single { "WIN" } else { "lose" }
        );
    }
}

#[test]
#[ignore]
fn probe_generative_retry() {
    use selqa::generate::{answer_until_confident, decode, ConfidentAnswer, DecodeMode};
    use selqa::metrics::sequence_accuracy;
    use selqa::selective::{fit_threshold, ScoreKind};
    use selqa::tasks::{gen_generative, generative_train_examples, GenerativeExample};

    let mut gaps = Vec::new();
    for seed in [11u64, 22, 33, 44, 55] {
        let spec = TaskSpec {
            task: TaskKind::Generative,
            n_examples: 3000,
            noise_rate: 0.1,
            ood_shift: 0.0,
            vocab_size: 12,
            context_len: 6,
            answer_len: 3,
            seed,
        };
        let data = gen_generative(&spec).unwrap();
        let (train_set, calib_set, test_set) = split(&data, SplitRatios::default(), seed).unwrap();
        let mut train_data = Vec::new();
        for e in &train_set.examples {
            train_data.extend(generative_train_examples(e, 12).unwrap());
        }

        let model_spec = ModelSpec::new(
            24,
            vec![
                selqa::model::LayerSpec::Linear { inputs: 24, outputs: 48 },
                selqa::model::LayerSpec::Relu,
            ],
            vec![12],
        )
        .unwrap();
        let pretrain = TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.02,
            seed,
            sigma_weight_decay: 0.1,
        };
        let refine = TrainConfig {
            epochs: 8,
            batch_size: 64,
            learning_rate: 0.005,
            seed: seed + 1,
            sigma_weight_decay: 0.1,
        };
        let (base, _) = train(&model_spec, &train_data, &pretrain).unwrap();
        let mut model =
            convert(&model_spec, &base, UqMethod::Composed { passes: 10, rate: 0.25 }, seed).unwrap();
        train_converted(&mut model, &train_data, &refine).unwrap();
        let calib_x: Vec<(u64, Tensor)> = calib_set
            .examples
            .iter()
            .map(|e| {
                let a = e.prompt[e.prompt.len() - 2];
                let b = e.prompt[e.prompt.len() - 1];
                (e.id, selqa::tasks::featurize_generative_step(a, b, 12).unwrap())
            })
            .collect();
        model.calibration = Some(calibrate_stats(&model, &calib_x, seed).unwrap());

        // Single-shot nominal accuracy (greedy) for context.
        let greedy_acc: f64 = test_set
            .examples
            .iter()
            .map(|e| {
                let d = decode(&model, &e.prompt, spec.answer_len, 12, DecodeMode::Greedy, seed, e.id, 0).unwrap();
                sequence_accuracy(&d.tokens, &e.target).0
            })
            .sum::<f64>()
            / test_set.examples.len() as f64;

        // Policy at p=99 fitted on sampled calibration answers.
        let calib_sigmas: Vec<f64> = calib_set
            .examples
            .iter()
            .map(|e| {
                decode(&model, &e.prompt, spec.answer_len, 12, DecodeMode::Sample { temperature: 6.0 }, seed, e.id, 0)
                    .unwrap()
                    .sigma
            })
            .collect();
        let policy = fit_threshold(&calib_sigmas, 99.0, ScoreKind::Sigma, "calib").unwrap();

        // Retry loop over test prompts; the single-shot comparison uses
        // the same candidate generator on the same answered questions.
        let mut accepted_accs = Vec::new();
        let mut single_accs_on_accepted = Vec::new();
        let mut total = 0usize;
        for e in test_set.examples.iter().take(250) {
            total += 1;
            match answer_until_confident(&model, &e.prompt, spec.answer_len, 12, &policy, 20, 6.0, seed, e.id).unwrap()
            {
                ConfidentAnswer::Answered { tokens, .. } => {
                    accepted_accs.push(sequence_accuracy(&tokens, &e.target).0);
                    let single = decode(&model, &e.prompt, spec.answer_len, 12, DecodeMode::Sample { temperature: 6.0 }, seed, e.id, 0).unwrap();
                    single_accs_on_accepted.push(sequence_accuracy(&single.tokens, &e.target).0);
                }
                ConfidentAnswer::Abstained { .. } => {}
            }
        }
        let coverage = accepted_accs.len() as f64 / total as f64;
        let retry_acc = accepted_accs.iter().sum::<f64>() / accepted_accs.len().max(1) as f64;
        let single_acc = single_accs_on_accepted.iter().sum::<f64>()
            / single_accs_on_accepted.len().max(1) as f64;

        let gap = (retry_acc - single_acc) * 100.0;
        gaps.push(gap);
        println!(
            "seed {seed}: greedy {greedy_acc:.3} | retry cov {coverage:.3} acc {retry_acc:.3} | single@matched {single_acc:.3} | gap {gap:+.1}pts"
        );
    }
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("median gap {:+.1}pts", gaps[2]);
}
