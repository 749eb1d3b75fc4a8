//! Correctness metrics: exact match, multiset token F1, sequence
//! accuracy, and rank statistics (AUROC).

/// 1 if both span endpoints match, else 0.
pub fn exact_match(pred: (usize, usize), gold: (usize, usize)) -> u8 {
    u8::from(pred == gold)
}

/// Multiset-overlap F1 between token sequences: precision is overlap over
/// prediction size, recall overlap over gold size. Both empty scores 1,
/// one empty scores 0.
pub fn token_f1(pred: &[u32], gold: &[u32]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for t in gold {
        *counts.entry(*t).or_insert(0usize) += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Per-token match fraction over a same-length window, plus an
/// exact-sequence flag.
pub fn sequence_accuracy(generated: &[u32], target: &[u32]) -> (f64, bool) {
    let n = generated.len().min(target.len());
    if n == 0 {
        return (0.0, generated.is_empty() && target.is_empty());
    }
    let matches = generated
        .iter()
        .zip(target)
        .filter(|(a, b)| a == b)
        .count();
    let frac = matches as f64 / n as f64;
    (frac, generated == target)
}

/// Area under the ROC curve via midranks (Mann-Whitney): probability that
/// a positive outscores a random negative, ties counted half.
pub fn auroc(positive: &[f64], negative: &[f64]) -> f64 {
    assert!(
        !positive.is_empty() && !negative.is_empty(),
        "auroc needs both classes"
    );
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|s| (*s, true))
        .chain(negative.iter().map(|s| (*s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Midrank assignment over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for item in all.iter().take(j + 1).skip(i) {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let np = positive.len() as f64;
    let nn = negative.len() as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match((2, 4), (2, 4)), 1);
        assert_eq!(exact_match((2, 4), (2, 5)), 0);
    }

    #[test]
    fn dataset_level_em_is_the_mean() {
        // Hand-counted fixtures: 6 of 10 match.
        let pairs = [
            ((0, 1), (0, 1)),
            ((1, 1), (1, 1)),
            ((2, 3), (2, 3)),
            ((4, 4), (4, 4)),
            ((5, 6), (5, 6)),
            ((7, 7), (7, 7)),
            ((0, 2), (0, 1)),
            ((3, 3), (3, 4)),
            ((2, 2), (1, 2)),
            ((6, 7), (6, 6)),
        ];
        let em: f64 =
            pairs.iter().map(|(p, g)| exact_match(*p, *g) as f64).sum::<f64>() / pairs.len() as f64;
        assert!((em - 0.6).abs() < 1e-12);
    }

    #[test]
    fn token_f1_simple_overlap() {
        // pred {a,b}, gold {b,c}: P = R = 0.5, F1 = 0.5
        assert!((token_f1(&[0, 1], &[1, 2]) - 0.5).abs() < 1e-12);
        assert_eq!(token_f1(&[3, 4], &[3, 4]), 1.0);
    }

    #[test]
    fn token_f1_multiset_overlap() {
        // pred {a,a,b}, gold {a,b,b}: overlap 2, F1 = 2/3 by the
        // multiset-overlap oracle.
        let f1 = token_f1(&[0, 0, 1], &[0, 1, 1]);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn token_f1_empty_sides() {
        assert_eq!(token_f1(&[], &[]), 1.0);
        assert_eq!(token_f1(&[1], &[]), 0.0);
        assert_eq!(token_f1(&[], &[1]), 0.0);
    }

    #[test]
    fn sequence_accuracy_cases() {
        assert_eq!(sequence_accuracy(&[1, 2, 3], &[1, 2, 3]), (1.0, true));
        assert_eq!(sequence_accuracy(&[1, 2], &[3, 4]).0, 0.0);
        let ten_with_one_miss: Vec<u32> = (0..10).collect();
        let mut target = ten_with_one_miss.clone();
        target[4] = 99;
        assert!((sequence_accuracy(&ten_with_one_miss, &target).0 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn auroc_perfect_and_random() {
        let pos = [2.0, 3.0, 4.0];
        let neg = [0.0, 0.5, 1.0];
        assert_eq!(auroc(&pos, &neg), 1.0);
        assert_eq!(auroc(&neg, &pos), 0.0);
        let same = [1.0, 1.0];
        assert_eq!(auroc(&same, &same), 0.5);
    }

    #[test]
    fn auroc_matches_pair_counting() {
        // Brute-force pair-count oracle.
        let pos = [0.9, 0.4, 0.7, 0.4];
        let neg = [0.1, 0.4, 0.5];
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        let expected = wins / (pos.len() * neg.len()) as f64;
        assert!((auroc(&pos, &neg) - expected).abs() < 1e-12);
    }
}
