//! Gaussian-cluster classification task with a designated noisy cluster
//! and a test-only out-of-distribution slab.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::RngStream;

use super::{Dataset, Example, TaskSpec};

/// Number of clusters.
pub const NUM_CLUSTERS: usize = 4;
/// Cluster centers sit on a circle of this radius.
pub const CLUSTER_RADIUS: f64 = 4.0;
/// All examples of this cluster form the designated noisy region. The
/// cluster sits on the second axis, orthogonal to the OOD displacement.
pub const NOISY_CLUSTER: usize = 1;
/// Fraction of `n_examples` generated as OOD when `ood_shift > 0`.
const OOD_FRACTION: f64 = 0.06;
/// Spread of the OOD slab along the first axis.
const OOD_SLAB_STD: f64 = 0.75;

/// Which part of the data an example came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Clean,
    Noisy,
    Ood,
}

/// One 2-d point with its (possibly flipped) label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
    pub region: Region,
    /// Label before noise was applied; equals `label` outside the noisy
    /// region. Retained so noise rates stay auditable.
    pub clean_label: usize,
}

impl Example for ClassificationExample {
    fn id(&self) -> u64 {
        self.id
    }
    fn is_ood(&self) -> bool {
        self.region == Region::Ood
    }
}

/// Center of cluster `k`: angle `k * 90` degrees on the cluster circle.
pub fn cluster_center(k: usize) -> (f64, f64) {
    let angle = std::f64::consts::FRAC_PI_2 * k as f64;
    (CLUSTER_RADIUS * angle.cos(), CLUSTER_RADIUS * angle.sin())
}

/// Generates the cluster task.
///
/// In-distribution points: a uniform cluster choice plus unit-covariance
/// Gaussian noise; labels inside the noisy cluster flip to a random other
/// class with probability `noise_rate`. When `ood_shift` is positive, a
/// test-only slab appears at `x0 ~ N(ood_shift, 0.75)` spanning the
/// cluster ring on the second axis, with uniformly random labels: the
/// model has no training signal there, so whatever it answers is a guess.
pub fn gen_classification(spec: &TaskSpec) -> Result<Dataset<ClassificationExample>> {
    spec.validate()?;
    let n_ood = if spec.ood_shift > 0.0 {
        ((spec.n_examples as f64) * OOD_FRACTION).round() as usize
    } else {
        0
    };
    let n_in = spec.n_examples.saturating_sub(n_ood);

    let mut examples = Vec::with_capacity(spec.n_examples);
    for i in 0..spec.n_examples {
        let mut rng = RngStream::keyed(spec.seed, &[0xc1a5, i as u64]);
        let example = if i < n_in {
            let k = rng.next_index(NUM_CLUSTERS);
            let (cx, cy) = cluster_center(k);
            let features = vec![cx + rng.normal(), cy + rng.normal()];
            let region = if k == NOISY_CLUSTER { Region::Noisy } else { Region::Clean };
            let mut label = k;
            if region == Region::Noisy && rng.next_f64() < spec.noise_rate {
                let shift = 1 + rng.next_index(NUM_CLUSTERS - 1);
                label = (k + shift) % NUM_CLUSTERS;
            }
            ClassificationExample {
                id: i as u64,
                features,
                label,
                region,
                clean_label: k,
            }
        } else {
            let x0 = spec.ood_shift + OOD_SLAB_STD * rng.normal();
            let x1 = rng.uniform(-CLUSTER_RADIUS / 2.0, CLUSTER_RADIUS / 2.0);
            let label = rng.next_index(NUM_CLUSTERS);
            ClassificationExample {
                id: i as u64,
                features: vec![x0, x1],
                label,
                region: Region::Ood,
                clean_label: label,
            }
        };
        examples.push(example);
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
            task: TaskKind::Classification,
            n_examples: n,
            noise_rate: noise,
            ood_shift: shift,
            vocab_size: 16,
            context_len: 8,
            answer_len: 1,
            seed: 13,
        }
    }

    #[test]
    fn zero_noise_zero_shift_is_all_clean_or_noisy_region() {
        let data = gen_classification(&spec(500, 0.0, 0.0)).unwrap();
        assert_eq!(data.examples.len(), 500);
        assert!(data.examples.iter().all(|e| e.region != Region::Ood));
        assert!(data.examples.iter().all(|e| e.label == e.clean_label));
    }

    #[test]
    fn empty_dataset_is_valid() {
        let data = gen_classification(&spec(0, 0.0, 0.0)).unwrap();
        assert!(data.examples.is_empty());
    }

    #[test]
    fn flip_fraction_converges_to_noise_rate() {
        // eta = 0.3 over >= 2000 examples: empirical flip fraction in the
        // noisy region within 0.3 +/- 0.03, counting against the retained
        // pre-noise labels.
        let data = gen_classification(&spec(4000, 0.3, 0.0)).unwrap();
        let noisy: Vec<_> = data
            .examples
            .iter()
            .filter(|e| e.region == Region::Noisy)
            .collect();
        assert!(noisy.len() > 500);
        let flipped = noisy.iter().filter(|e| e.label != e.clean_label).count();
        let rate = flipped as f64 / noisy.len() as f64;
        assert!((rate - 0.3).abs() < 0.03, "flip rate {rate}");
    }

    #[test]
    fn flips_stay_inside_the_noisy_region() {
        let data = gen_classification(&spec(3000, 0.4, 0.0)).unwrap();
        for e in &data.examples {
            if e.region == Region::Clean {
                assert_eq!(e.label, e.clean_label);
            }
        }
    }

    #[test]
    fn ood_slab_sits_at_the_shift_on_the_first_axis() {
        let data = gen_classification(&spec(2000, 0.0, 6.0)).unwrap();
        let ood: Vec<_> = data.examples.iter().filter(|e| e.is_ood()).collect();
        assert_eq!(ood.len(), 120); // 6% of 2000
        let mean_x0 = ood.iter().map(|e| e.features[0]).sum::<f64>() / ood.len() as f64;
        assert!((mean_x0 - 6.0).abs() < 0.5, "slab mean {mean_x0}");
    }

    #[test]
    fn noisy_region_is_the_designated_cluster() {
        let data = gen_classification(&spec(2000, 0.2, 0.0)).unwrap();
        for e in &data.examples {
            let expected = e.clean_label == NOISY_CLUSTER;
            assert_eq!(e.region == Region::Noisy, expected);
        }
    }
}
