//! Synthetic datasets with controllable noise and out-of-distribution
//! structure, plus featurization, splits and JSONL persistence.
//!
//! Every generator is a pure function of its spec: per-example draws are
//! keyed by `(seed, example index)`, so shard-parallel generation equals
//! sequential generation byte for byte.

mod classification;
mod extractive;
mod featurize;
mod generative;

pub use classification::{gen_classification, ClassificationExample, Region, CLUSTER_RADIUS, NUM_CLUSTERS};
pub use extractive::{gen_extractive, question_marker, ExtractiveExample};
pub use featurize::{
    extractive_feature_dim, extractive_train_example, featurize_classification,
    featurize_extractive, featurize_generative_step, generative_feature_dim,
    generative_train_examples,
};
pub use generative::{gen_generative, GenerativeExample, MarkovChain};

use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Which task shape a dataset holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Extractive,
    Generative,
}

/// Generator parameters. `noise_rate` drives aleatoric defects (label
/// flips, span ambiguity, high-entropy states); `ood_shift` drives
/// epistemic ones (displaced test-only inputs, unseen state pairs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub n_examples: usize,
    pub noise_rate: f64,
    pub ood_shift: f64,
    pub vocab_size: usize,
    pub context_len: usize,
    pub answer_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..0.5).contains(&self.noise_rate) {
            problems.push(format!("noise_rate {} outside [0, 0.5)", self.noise_rate));
        }
        if self.ood_shift < 0.0 {
            problems.push(format!("ood_shift {} negative", self.ood_shift));
        }
        if self.answer_len < 1 {
            problems.push("answer_len must be >= 1".into());
        }
        if self.context_len < self.answer_len {
            problems.push(format!(
                "context_len {} < answer_len {}",
                self.context_len, self.answer_len
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Common access for split routing and JSONL hashing.
pub trait Example: Clone + Serialize + DeserializeOwned {
    fn id(&self) -> u64;
    /// Out-of-distribution examples are routed to the test split only.
    fn is_ood(&self) -> bool;
}

/// A generated dataset: spec plus examples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset<E> {
    pub spec: TaskSpec,
    pub examples: Vec<E>,
}

/// One split of a dataset, tagged with its name and the hash of the
/// parent dataset for disjointness auditing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSet<E> {
    pub name: String,
    pub parent_hash: String,
    pub spec: TaskSpec,
    pub examples: Vec<E>,
}

/// Train/calibration/test fractions; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub calib: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            calib: 0.2,
            test: 0.2,
        }
    }
}

/// Canonical content hash of a dataset: SHA-256 over the serialized
/// example lines.
pub fn dataset_hash<E: Example>(dataset: &Dataset<E>) -> Result<String> {
    let mut hasher = Sha256::new();
    for e in &dataset.examples {
        hasher.update(serde_json::to_string(e)?.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex_string(&hasher.finalize()))
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Splits a dataset into disjoint, exhaustive, seed-deterministic parts.
/// Out-of-distribution examples go to the test split only; the ratios
/// apply to the rest (largest-remainder rounding).
pub fn split<E: Example>(
    dataset: &Dataset<E>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(SplitSet<E>, SplitSet<E>, SplitSet<E>)> {
    let sum = ratios.train + ratios.calib + ratios.test;
    if ratios.train <= 0.0 || ratios.calib <= 0.0 || ratios.test <= 0.0 || (sum - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidSpec(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let parent_hash = dataset_hash(dataset)?;

    let mut in_dist: Vec<usize> = Vec::new();
    let mut ood: Vec<usize> = Vec::new();
    for (i, e) in dataset.examples.iter().enumerate() {
        if e.is_ood() {
            ood.push(i);
        } else {
            in_dist.push(i);
        }
    }
    RngStream::keyed(seed, &[0x5871u64]).shuffle(&mut in_dist);

    let n = in_dist.len();
    let mut counts = [
        (ratios.train * n as f64).floor() as usize,
        (ratios.calib * n as f64).floor() as usize,
        (ratios.test * n as f64).floor() as usize,
    ];
    let remainders = [
        ratios.train * n as f64 - counts[0] as f64,
        ratios.calib * n as f64 - counts[1] as f64,
        ratios.test * n as f64 - counts[2] as f64,
    ];
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|a, b| remainders[*b].partial_cmp(&remainders[*a]).unwrap());
    for i in order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }

    let take = |ids: &[usize]| -> Vec<E> {
        let mut chosen: Vec<usize> = ids.to_vec();
        chosen.sort_unstable();
        chosen.iter().map(|i| dataset.examples[*i].clone()).collect()
    };
    let train_ids = &in_dist[..counts[0]];
    let calib_ids = &in_dist[counts[0]..counts[0] + counts[1]];
    let mut test_ids: Vec<usize> = in_dist[counts[0] + counts[1]..].to_vec();
    test_ids.extend(&ood);

    let (train, calib, test) = (take(train_ids), take(calib_ids), take(&test_ids));
    if train.is_empty() || calib.is_empty() || test.is_empty() {
        return Err(Error::Degenerate(
            "split would leave an empty train, calib or test set".into(),
        ));
    }
    let make = |name: &str, examples: Vec<E>| SplitSet {
        name: name.to_string(),
        parent_hash: parent_hash.clone(),
        spec: dataset.spec.clone(),
        examples,
    };
    Ok((make("train", train), make("calib", calib), make("test", test)))
}

/// All spans `(start, end)` with `0 <= start <= end < context_len` and
/// length at most `max_span_len`, in lexicographic order.
pub fn enumerate_spans(context_len: usize, max_span_len: usize) -> Result<Vec<(usize, usize)>> {
    if max_span_len < 1 {
        return Err(Error::InvalidSpec("max_span_len must be >= 1".into()));
    }
    let mut spans = Vec::new();
    for start in 0..context_len {
        let last = (start + max_span_len - 1).min(context_len.saturating_sub(1));
        for end in start..=last {
            spans.push((start, end));
        }
    }
    Ok(spans)
}

/// JSONL header: the task spec, plus split metadata on split files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub task_spec: TaskSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parent_hash: Option<String>,
}

/// Writes a header line followed by one example per line.
pub fn write_jsonl<E: Example>(path: &Path, header: &DatasetHeader, examples: &[E]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(header)?);
    out.push('\n');
    for e in examples {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads a header line and examples from JSONL.
pub fn read_jsonl<E: Example>(path: &Path) -> Result<(DatasetHeader, Vec<E>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::MissingArtifact(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    let mut examples = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(serde_json::from_str(&line)?);
    }
    Ok((header, examples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_spec(n: usize) -> TaskSpec {
        TaskSpec {
            task: TaskKind::Classification,
            n_examples: n,
            noise_rate: 0.0,
            ood_shift: 0.0,
            vocab_size: 16,
            context_len: 12,
            answer_len: 2,
            seed: 7,
        }
    }

    #[test]
    fn spec_rejects_high_noise() {
        let mut s = class_spec(10);
        s.noise_rate = 0.9;
        assert!(s.validate().is_err());
    }

    #[test]
    fn enumerate_spans_counts() {
        // n(n+1)/2 for unbounded length
        assert_eq!(enumerate_spans(3, 3).unwrap().len(), 6);
        assert_eq!(enumerate_spans(3, 1).unwrap().len(), 3);
        // brute-force double loop oracle
        let spans = enumerate_spans(10, 4).unwrap();
        let mut count = 0;
        for s in 0..10usize {
            for e in s..10usize {
                if e - s + 1 <= 4 {
                    count += 1;
                }
            }
        }
        assert_eq!(spans.len(), count);
        // lexicographic order
        let mut sorted = spans.clone();
        sorted.sort_unstable();
        assert_eq!(spans, sorted);
    }

    #[test]
    fn split_sizes_follow_ratios_exactly() {
        let spec = class_spec(1000);
        let data = gen_classification(&spec).unwrap();
        let ratios = SplitRatios {
            train: 0.8,
            calib: 0.1,
            test: 0.1,
        };
        let (tr, ca, te) = split(&data, ratios, 5).unwrap();
        assert_eq!(tr.examples.len(), 800);
        assert_eq!(ca.examples.len(), 100);
        assert_eq!(te.examples.len(), 100);
    }

    #[test]
    fn split_is_seed_deterministic_and_exhaustive() {
        let spec = class_spec(333);
        let data = gen_classification(&spec).unwrap();
        let (tr1, ca1, te1) = split(&data, SplitRatios::default(), 9).unwrap();
        let (tr2, ca2, te2) = split(&data, SplitRatios::default(), 9).unwrap();
        let ids = |s: &SplitSet<ClassificationExample>| -> Vec<u64> {
            s.examples.iter().map(|e| e.id()).collect()
        };
        assert_eq!(ids(&tr1), ids(&tr2));
        assert_eq!(ids(&ca1), ids(&ca2));
        assert_eq!(ids(&te1), ids(&te2));

        let mut all: Vec<u64> = ids(&tr1);
        all.extend(ids(&ca1));
        all.extend(ids(&te1));
        all.sort_unstable();
        let mut expected: Vec<u64> = data.examples.iter().map(|e| e.id()).collect();
        expected.sort_unstable();
        assert_eq!(all, expected);
    }

    #[test]
    fn ood_examples_route_to_test_only() {
        let mut spec = class_spec(500);
        spec.ood_shift = 6.0;
        let data = gen_classification(&spec).unwrap();
        assert!(data.examples.iter().any(|e| e.is_ood()));
        let (tr, ca, te) = split(&data, SplitRatios::default(), 3).unwrap();
        assert!(tr.examples.iter().all(|e| !e.is_ood()));
        assert!(ca.examples.iter().all(|e| !e.is_ood()));
        assert!(te.examples.iter().any(|e| e.is_ood()));
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let data = gen_classification(&class_spec(100)).unwrap();
        let bad = SplitRatios {
            train: 0.9,
            calib: 0.2,
            test: 0.1,
        };
        assert!(split(&data, bad, 0).is_err());
    }

    #[test]
    fn generators_are_pure_functions_of_their_spec() {
        let spec = class_spec(200);
        let a = gen_classification(&spec).unwrap();
        let b = gen_classification(&spec).unwrap();
        let ja = serde_json::to_string(&a.examples).unwrap();
        let jb = serde_json::to_string(&b.examples).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn jsonl_round_trip() {
        let spec = class_spec(50);
        let data = gen_classification(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let header = DatasetHeader {
            task_spec: spec.clone(),
            split: Some("test".into()),
            parent_hash: Some(dataset_hash(&data).unwrap()),
        };
        write_jsonl(&path, &header, &data.examples).unwrap();
        let (h2, examples2): (DatasetHeader, Vec<ClassificationExample>) =
            read_jsonl(&path).unwrap();
        assert_eq!(h2.task_spec, spec);
        assert_eq!(h2.split.as_deref(), Some("test"));
        assert_eq!(examples2.len(), data.examples.len());
        assert_eq!(
            serde_json::to_string(&examples2).unwrap(),
            serde_json::to_string(&data.examples).unwrap()
        );
    }
}
