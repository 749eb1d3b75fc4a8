//! Synthetic extractive span task: a marker token planted in a random
//! context announces the answer span that follows it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

use super::{Dataset, Example, TaskSpec};

/// Token ids reserved for markers (the top of the vocabulary).
pub const RESERVED_MARKERS: u32 = 4;

/// One context/question pair with its gold answer span (inclusive).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractiveExample {
    pub id: u64,
    pub context: Vec<u32>,
    pub question: Vec<u32>,
    pub gold_span: (usize, usize),
    /// A decoy copy of the marker was planted elsewhere: two plausible
    /// answer sites, only one of which is gold.
    pub ambiguous: bool,
}

impl Example for ExtractiveExample {
    fn id(&self) -> u64 {
        self.id
    }
    fn is_ood(&self) -> bool {
        false
    }
}

/// First reserved-range token in a question.
pub fn question_marker(question: &[u32], vocab_size: usize) -> Option<u32> {
    let reserved_start = vocab_size as u32 - RESERVED_MARKERS;
    question.iter().copied().find(|t| *t >= reserved_start)
}

/// Generates the marker-span task.
///
/// Contexts hold uniform random non-reserved tokens. A marker from the
/// reserved range replaces one token; the following `answer_len` tokens
/// are the gold span, and the question embeds the same marker. With
/// probability `noise_rate` a second copy of the marker lands elsewhere
/// in the context, making the answer site ambiguous.
pub fn gen_extractive(spec: &TaskSpec) -> Result<Dataset<ExtractiveExample>> {
    spec.validate()?;
    if spec.context_len <= spec.answer_len + 2 {
        return Err(Error::InvalidSpec(format!(
            "context_len {} must exceed answer_len {} + 2",
            spec.context_len, spec.answer_len
        )));
    }
    if spec.vocab_size < 2 * RESERVED_MARKERS as usize {
        return Err(Error::InvalidSpec(format!(
            "vocab_size {} too small to reserve {RESERVED_MARKERS} marker tokens",
            spec.vocab_size
        )));
    }
    let normal_tokens = spec.vocab_size as u32 - RESERVED_MARKERS;
    let len = spec.context_len;

    let mut examples = Vec::with_capacity(spec.n_examples);
    for i in 0..spec.n_examples {
        let mut rng = RngStream::keyed(spec.seed, &[0xe87a, i as u64]);
        let mut context: Vec<u32> = (0..len).map(|_| rng.next_u64() as u32 % normal_tokens).collect();

        let marker = normal_tokens + rng.next_u64() as u32 % RESERVED_MARKERS;
        // Marker position leaves room for the answer after it.
        let marker_pos = rng.next_index(len - spec.answer_len);
        context[marker_pos] = marker;
        let gold_span = (marker_pos + 1, marker_pos + spec.answer_len);

        let mut ambiguous = false;
        if rng.next_f64() < spec.noise_rate {
            // Plant a decoy marker outside the gold neighbourhood.
            let forbidden = |p: usize| {
                p + spec.answer_len >= marker_pos && p <= gold_span.1
            };
            let candidates: Vec<usize> =
                (0..len - spec.answer_len).filter(|p| !forbidden(*p)).collect();
            if !candidates.is_empty() {
                let decoy_pos = candidates[rng.next_index(candidates.len())];
                context[decoy_pos] = marker;
                ambiguous = true;
            }
        }

        let question = vec![
            rng.next_u64() as u32 % normal_tokens,
            marker,
            rng.next_u64() as u32 % normal_tokens,
        ];
        examples.push(ExtractiveExample {
            id: i as u64,
            context,
            question,
            gold_span,
            ambiguous,
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskKind;

    fn spec(n: usize, noise: f64, answer_len: usize) -> TaskSpec {
        TaskSpec {
            task: TaskKind::Extractive,
            n_examples: n,
            noise_rate: noise,
            ood_shift: 0.0,
            vocab_size: 16,
            context_len: 12,
            answer_len,
            seed: 23,
        }
    }

    #[test]
    fn single_token_answers_have_degenerate_spans() {
        let data = gen_extractive(&spec(300, 0.0, 1)).unwrap();
        for e in &data.examples {
            assert_eq!(e.gold_span.0, e.gold_span.1);
            assert!(!e.ambiguous);
        }
    }

    #[test]
    fn gold_spans_stay_in_bounds() {
        let data = gen_extractive(&spec(500, 0.4, 3)).unwrap();
        for e in &data.examples {
            let (s, t) = e.gold_span;
            assert!(s <= t && t < e.context.len());
        }
    }

    #[test]
    fn ambiguity_fraction_tracks_noise_rate() {
        let data = gen_extractive(&spec(4000, 0.25, 2)).unwrap();
        let frac = data.examples.iter().filter(|e| e.ambiguous).count() as f64 / 4000.0;
        assert!((frac - 0.25).abs() < 0.03, "ambiguous fraction {frac}");
    }

    #[test]
    fn marker_scan_recovers_gold_span_when_unambiguous() {
        // Planted structure is recoverable by brute force.
        let data = gen_extractive(&spec(1000, 0.3, 2)).unwrap();
        for e in &data.examples {
            if e.ambiguous {
                continue;
            }
            let marker = question_marker(&e.question, 16).unwrap();
            let pos = e.context.iter().position(|t| *t == marker).unwrap();
            assert_eq!(e.gold_span, (pos + 1, pos + 2));
        }
    }

    #[test]
    fn tiny_vocab_rejected() {
        let mut s = spec(10, 0.0, 1);
        s.vocab_size = 6;
        assert!(gen_extractive(&s).is_err());
    }

    #[test]
    fn short_context_rejected() {
        let mut s = spec(10, 0.0, 4);
        s.context_len = 6;
        assert!(gen_extractive(&s).is_err());
    }
}
