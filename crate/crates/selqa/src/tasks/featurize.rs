//! Turning task examples into feature tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::TrainExample;

use super::{
    question_marker, ClassificationExample, ExtractiveExample, GenerativeExample,
};

/// Classification features pass through unchanged.
pub fn featurize_classification(e: &ClassificationExample) -> Tensor {
    Tensor::row(&e.features)
}

/// Feature width of one extractive position: the token's one-hot, four
/// neighbour one-hots (offsets -2..=2 without 0) and a marker-match flag.
pub fn extractive_feature_dim(vocab_size: usize) -> usize {
    5 * vocab_size + 1
}

/// Per-position feature rows for an extractive context. Each row encodes
/// the token at that position, a window of two neighbours on both sides,
/// and whether the token matches the question's marker. The resulting
/// `context_len x dim` matrix feeds the start and end heads, which score
/// positions.
pub fn featurize_extractive(e: &ExtractiveExample, vocab_size: usize) -> Result<Tensor> {
    let v = vocab_size;
    if let Some(bad) = e.context.iter().find(|t| **t as usize >= v) {
        return Err(Error::InvalidSpec(format!("token {bad} outside vocab {v}")));
    }
    let marker = question_marker(&e.question, v)
        .ok_or_else(|| Error::InvalidSpec("question carries no marker token".into()))?;
    let len = e.context.len();
    let dim = extractive_feature_dim(v);
    let mut features = Tensor::zeros(len, dim);
    for (pos, &token) in e.context.iter().enumerate() {
        let offsets = [0isize, -2, -1, 1, 2];
        for (slot, off) in offsets.iter().enumerate() {
            let neighbour = pos as isize + off;
            if neighbour < 0 || neighbour >= len as isize {
                continue;
            }
            let t = e.context[neighbour as usize] as usize;
            features.set(pos, slot * v + t, 1.0);
        }
        if token == marker {
            features.set(pos, 5 * v, 1.0);
        }
    }
    Ok(features)
}

/// Extractive training example: position features with start/end labels.
pub fn extractive_train_example(e: &ExtractiveExample, vocab_size: usize) -> Result<TrainExample> {
    Ok(TrainExample {
        features: featurize_extractive(e, vocab_size)?,
        labels: vec![e.gold_span.0, e.gold_span.1],
    })
}

/// Feature width of one generative step: two stacked one-hots.
pub fn generative_feature_dim(vocab_size: usize) -> usize {
    2 * vocab_size
}

/// One-hot encoding of the last two tokens `(a, b)` feeding the
/// vocabulary-sized head.
pub fn featurize_generative_step(a: u32, b: u32, vocab_size: usize) -> Result<Tensor> {
    let v = vocab_size;
    if a as usize >= v || b as usize >= v {
        return Err(Error::InvalidSpec(format!(
            "tokens ({a}, {b}) outside vocab {v}"
        )));
    }
    let mut t = Tensor::zeros(1, 2 * v);
    t.set(0, a as usize, 1.0);
    t.set(0, v + b as usize, 1.0);
    Ok(t)
}

/// Expands a generative example into per-step training examples: every
/// position from the third token onward predicts itself from the two
/// tokens before it (prompt interior included for extra signal).
pub fn generative_train_examples(
    e: &GenerativeExample,
    vocab_size: usize,
) -> Result<Vec<TrainExample>> {
    let tokens: Vec<u32> = e.prompt.iter().chain(e.target.iter()).copied().collect();
    let mut out = Vec::new();
    for idx in 2..tokens.len() {
        out.push(TrainExample {
            features: featurize_generative_step(tokens[idx - 2], tokens[idx - 1], vocab_size)?,
            labels: vec![tokens[idx] as usize],
        });
    }
    Ok(out)
}
