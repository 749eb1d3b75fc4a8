//! Stepwise decoding of generative models with per-step uncertainty,
//! plus the answer-until-confident retry loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_id, RngStream};
use crate::selective::ThresholdPolicy;
use crate::tasks::featurize_generative_step;
use crate::tensor::softmax_slice;
use crate::uq::{predict, uncertainty_reduce, ConvertedModel, ReduceMode, UncertaintyOutput};

/// One decoding step: the model output over the vocabulary and the
/// vocabulary-sum step uncertainty.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub output: UncertaintyOutput,
    /// Vocabulary-sum reduction of the per-class uncertainty vector.
    pub sigma_t: f64,
}

/// Predicts the next-token distribution from the last two tokens.
/// Stochastic passes are keyed by `(example_id, try, step)` so every
/// decode is order-independent and reproducible.
pub fn step_predict(
    model: &ConvertedModel,
    a: u32,
    b: u32,
    vocab_size: usize,
    master_seed: u64,
    example_id: u64,
    try_index: u64,
    step_index: u64,
) -> Result<StepOutput> {
    let x = featurize_generative_step(a, b, vocab_size)?;
    let step_key = stream_id(&[example_id, try_index, step_index]);
    let output = predict(model, &x, master_seed, step_key)?.remove(0);
    let sigma_t = uncertainty_reduce(&output.sigma_vec, output.predicted, ReduceMode::Sum)?;
    Ok(StepOutput { output, sigma_t })
}

/// How the next token is chosen while decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Ancestral sampling from the softmax of the mean logits divided by
    /// the temperature; higher temperatures diversify candidates.
    Sample { temperature: f64 },
}

/// A decoded continuation with its per-step outputs, the answer score,
/// and the length-normalized likelihood of the chosen tokens.
///
/// The answer score is the worst uncertainty among the decoding steps
/// plus one lookahead evaluation of the state the answer ends in: a
/// wrong final token would otherwise be invisible, since each step's
/// uncertainty is a function of the tokens before it.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub steps: Vec<StepOutput>,
    pub sigma: f64,
    pub confidence: f64,
}

/// Decodes `steps` tokens after the prompt.
pub fn decode(
    model: &ConvertedModel,
    prompt: &[u32],
    steps: usize,
    vocab_size: usize,
    mode: DecodeMode,
    master_seed: u64,
    example_id: u64,
    try_index: u64,
) -> Result<Decoded> {
    if prompt.len() < 2 {
        return Err(Error::InvalidSpec(
            "decoding needs a prompt of at least two tokens".into(),
        ));
    }
    let mut a = prompt[prompt.len() - 2];
    let mut b = prompt[prompt.len() - 1];
    let mut tokens = Vec::with_capacity(steps);
    let mut outputs = Vec::with_capacity(steps);
    let mut sigma_worst = f64::NEG_INFINITY;
    let mut log_prob_sum = 0.0;
    for step in 0..steps {
        let out = step_predict(
            model,
            a,
            b,
            vocab_size,
            master_seed,
            example_id,
            try_index,
            step as u64,
        )?;
        let probs = softmax_slice(out.output.mu.row_slice(0));
        let next = match mode {
            DecodeMode::Greedy => out.output.predicted as u32,
            DecodeMode::Sample { temperature } => {
                let scaled: Vec<f64> = out
                    .output
                    .mu
                    .row_slice(0)
                    .iter()
                    .map(|v| v / temperature.max(1e-6))
                    .collect();
                let sampling_probs = softmax_slice(&scaled);
                let mut rng = RngStream::keyed(
                    master_seed,
                    &[0x7a9, example_id, try_index, step as u64],
                );
                sample_index(&sampling_probs, &mut rng) as u32
            }
        };
        sigma_worst = sigma_worst.max(out.output.sigma);
        log_prob_sum += probs[next as usize].max(crate::tensor::PROB_FLOOR).ln();
        tokens.push(next);
        outputs.push(out);
        a = b;
        b = next;
    }
    if steps > 0 {
        let lookahead = step_predict(
            model,
            a,
            b,
            vocab_size,
            master_seed,
            example_id,
            try_index,
            steps as u64,
        )?;
        sigma_worst = sigma_worst.max(lookahead.output.sigma);
    }
    Ok(Decoded {
        sigma: if sigma_worst.is_finite() { sigma_worst } else { 0.0 },
        confidence: (log_prob_sum / steps.max(1) as f64).exp(),
        tokens,
        steps: outputs,
    })
}

fn sample_index(probs: &[f64], rng: &mut RngStream) -> usize {
    let draw = rng.next_f64();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Outcome of the retry loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ConfidentAnswer {
    Answered {
        tokens: Vec<u32>,
        sigma: f64,
        tries: usize,
    },
    Abstained {
        tries: usize,
    },
}

/// Samples candidate continuations until one scores below the fitted
/// threshold (distinct random streams per try), abstaining after
/// `max_tries`. The answer score is the worst step's uncertainty.
#[allow(clippy::too_many_arguments)]
pub fn answer_until_confident(
    model: &ConvertedModel,
    prompt: &[u32],
    steps: usize,
    vocab_size: usize,
    policy: &ThresholdPolicy,
    max_tries: usize,
    temperature: f64,
    master_seed: u64,
    example_id: u64,
) -> Result<ConfidentAnswer> {
    if max_tries < 1 {
        return Err(Error::InvalidSpec("max_tries must be >= 1".into()));
    }
    for try_index in 0..max_tries {
        let decoded = decode(
            model,
            prompt,
            steps,
            vocab_size,
            DecodeMode::Sample { temperature },
            master_seed,
            example_id,
            try_index as u64,
        )?;
        if decoded.sigma < policy.gamma {
            return Ok(ConfidentAnswer::Answered {
                tokens: decoded.tokens,
                sigma: decoded.sigma,
                tries: try_index + 1,
            });
        }
    }
    Ok(ConfidentAnswer::Abstained { tries: max_tries })
}
