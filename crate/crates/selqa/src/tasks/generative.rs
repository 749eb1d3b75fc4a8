//! Synthetic next-token task: sequences from a seeded order-2 Markov
//! chain. A fraction of state pairs is high-entropy (near-uniform next
//! token) — irreducible aleatoric uncertainty; test prompts may begin
//! with tokens never produced during training — epistemic uncertainty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_id, RngStream};

use super::{Dataset, Example, TaskSpec};

/// Token ids reserved for unseen-start prompts (top of the vocabulary).
pub const RESERVED_OOD_TOKENS: u32 = 2;
/// Fraction of examples that start at unseen pairs when `ood_shift > 0`.
const OOD_FRACTION: f64 = 0.1;

/// One prompt/continuation pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerativeExample {
    pub id: u64,
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
    pub ood: bool,
}

impl Example for GenerativeExample {
    fn id(&self) -> u64 {
        self.id
    }
    fn is_ood(&self) -> bool {
        self.ood
    }
}

/// Seeded order-2 transition structure. Each state pair is either
/// deterministic (one fixed successor) or high entropy (uniform over the
/// normal tokens); pairs touching reserved tokens are always uniform.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    pub vocab_size: usize,
    pub normal_tokens: u32,
    pub entropy_fraction: f64,
    pub seed: u64,
}

impl MarkovChain {
    pub fn new(vocab_size: usize, entropy_fraction: f64, seed: u64) -> Result<Self> {
        if vocab_size < 8 {
            return Err(Error::InvalidSpec(format!(
                "vocab_size {vocab_size} below the minimum of 8"
            )));
        }
        if !(0.0..=1.0).contains(&entropy_fraction) {
            return Err(Error::InvalidSpec(format!(
                "entropy fraction {entropy_fraction} outside [0, 1]"
            )));
        }
        Ok(MarkovChain {
            vocab_size,
            normal_tokens: vocab_size as u32 - RESERVED_OOD_TOKENS,
            entropy_fraction,
            seed,
        })
    }

    pub fn from_spec(spec: &TaskSpec) -> Result<Self> {
        MarkovChain::new(spec.vocab_size, spec.noise_rate, spec.seed)
    }

    fn touches_reserved(&self, a: u32, b: u32) -> bool {
        a >= self.normal_tokens || b >= self.normal_tokens
    }

    /// Whether the pair's next-token distribution is uniform.
    pub fn is_high_entropy(&self, a: u32, b: u32) -> bool {
        if self.touches_reserved(a, b) {
            return true;
        }
        let h = stream_id(&[self.seed, 0xe27, a as u64, b as u64]);
        (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64) < self.entropy_fraction
    }

    /// The fixed successor of a deterministic pair.
    pub fn deterministic_next(&self, a: u32, b: u32) -> u32 {
        (stream_id(&[self.seed, 0xde7, a as u64, b as u64]) % self.normal_tokens as u64) as u32
    }

    /// True next-token distribution of a pair, over the full vocabulary.
    pub fn transition_row(&self, a: u32, b: u32) -> Vec<f64> {
        let mut row = vec![0.0; self.vocab_size];
        if self.is_high_entropy(a, b) {
            let p = 1.0 / self.normal_tokens as f64;
            for slot in row.iter_mut().take(self.normal_tokens as usize) {
                *slot = p;
            }
        } else {
            row[self.deterministic_next(a, b) as usize] = 1.0;
        }
        row
    }

    /// Samples the next token.
    pub fn sample_next(&self, a: u32, b: u32, rng: &mut RngStream) -> u32 {
        if self.is_high_entropy(a, b) {
            rng.next_index(self.normal_tokens as usize) as u32
        } else {
            self.deterministic_next(a, b)
        }
    }

    /// Walks `len` tokens from the pair `(a, b)`.
    pub fn walk(&self, mut a: u32, mut b: u32, len: usize, rng: &mut RngStream) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let next = self.sample_next(a, b, rng);
            out.push(next);
            a = b;
            b = next;
        }
        out
    }
}

/// Generates prompt/continuation pairs by walking the chain. Prompts hold
/// `context_len` tokens, targets `answer_len`. When `ood_shift > 0`, the
/// last `OOD_FRACTION` of examples start from a reserved token that never
/// appears in ordinary walks.
pub fn gen_generative(spec: &TaskSpec) -> Result<Dataset<GenerativeExample>> {
    spec.validate()?;
    if spec.context_len < 2 {
        return Err(Error::InvalidSpec(
            "generative prompts need context_len >= 2".into(),
        ));
    }
    let chain = MarkovChain::from_spec(spec)?;
    let n_ood = if spec.ood_shift > 0.0 {
        ((spec.n_examples as f64) * OOD_FRACTION).round() as usize
    } else {
        0
    };
    let n_in = spec.n_examples.saturating_sub(n_ood);

    let mut examples = Vec::with_capacity(spec.n_examples);
    for i in 0..spec.n_examples {
        let mut rng = RngStream::keyed(spec.seed, &[0x6e7, i as u64]);
        let ood = i >= n_in;
        let (a, b) = if ood {
            (
                chain.normal_tokens + rng.next_index(RESERVED_OOD_TOKENS as usize) as u32,
                rng.next_index(chain.normal_tokens as usize) as u32,
            )
        } else {
            (
                rng.next_index(chain.normal_tokens as usize) as u32,
                rng.next_index(chain.normal_tokens as usize) as u32,
            )
        };
        let mut prompt = vec![a, b];
        prompt.extend(chain.walk(a, b, spec.context_len - 2, &mut rng));
        let (pa, pb) = (prompt[prompt.len() - 2], prompt[prompt.len() - 1]);
        let target = chain.walk(pa, pb, spec.answer_len, &mut rng);
        examples.push(GenerativeExample {
            id: i as u64,
            prompt,
            target,
            ood,
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

    fn spec(n: usize, noise: f64, shift: f64) -> TaskSpec {
        TaskSpec {
            task: TaskKind::Generative,
            n_examples: n,
            noise_rate: noise,
            ood_shift: shift,
            vocab_size: 12,
            context_len: 6,
            answer_len: 3,
            seed: 31,
        }
    }

    #[test]
    fn all_tokens_stay_under_vocab() {
        let data = gen_generative(&spec(500, 0.3, 2.0)).unwrap();
        for e in &data.examples {
            assert!(e.prompt.iter().all(|t| (*t as usize) < 12));
            assert!(e.target.iter().all(|t| (*t as usize) < 12));
            assert_eq!(e.prompt.len(), 6);
            assert_eq!(e.target.len(), 3);
        }
    }

    #[test]
    fn deterministic_chain_is_reproducible() {
        let chain = MarkovChain::new(12, 0.0, 5).unwrap();
        assert!(!chain.is_high_entropy(0, 1));
        assert_eq!(chain.deterministic_next(0, 1), chain.deterministic_next(0, 1));
        let row = chain.transition_row(0, 1);
        assert_eq!(row.iter().filter(|p| **p == 1.0).count(), 1);
    }

    #[test]
    fn reserved_tokens_never_appear_in_ordinary_walks() {
        let data = gen_generative(&spec(400, 0.4, 0.0)).unwrap();
        let reserved_start = 12 - RESERVED_OOD_TOKENS;
        for e in &data.examples {
            assert!(!e.ood);
            assert!(e.prompt.iter().all(|t| *t < reserved_start));
            assert!(e.target.iter().all(|t| *t < reserved_start));
        }
    }

    #[test]
    fn ood_prompts_start_with_reserved_tokens() {
        let data = gen_generative(&spec(400, 0.2, 1.0)).unwrap();
        let ood: Vec<_> = data.examples.iter().filter(|e| e.ood).collect();
        assert_eq!(ood.len(), 40);
        let reserved_start = 12 - RESERVED_OOD_TOKENS;
        for e in ood {
            assert!(e.prompt[0] >= reserved_start);
        }
    }

    #[test]
    fn entropy_fraction_selects_roughly_that_many_pairs() {
        let chain = MarkovChain::new(32, 0.3, 9).unwrap();
        let normal = chain.normal_tokens;
        let mut high = 0;
        let mut total = 0;
        for a in 0..normal {
            for b in 0..normal {
                total += 1;
                if chain.is_high_entropy(a, b) {
                    high += 1;
                }
            }
        }
        let frac = high as f64 / total as f64;
        assert!((frac - 0.3).abs() < 0.05, "high-entropy fraction {frac}");
    }

    #[test]
    fn vocab_below_eight_rejected() {
        assert!(MarkovChain::new(6, 0.1, 0).is_err());
    }

    #[test]
    fn fully_uniform_chain_has_flat_rows() {
        // Entropy fraction 1: every pair is uniform, so the best possible
        // next-token accuracy is one over the produced-token count.
        let chain = MarkovChain::new(12, 1.0, 3).unwrap();
        let row = chain.transition_row(4, 7);
        let active: Vec<f64> = row.iter().copied().filter(|p| *p > 0.0).collect();
        assert_eq!(active.len(), chain.normal_tokens as usize);
        for p in active {
            assert!((p - 0.1).abs() < 1e-12);
        }
    }
}
