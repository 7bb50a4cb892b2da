//! Word error rate over token sequences.

use crate::error::{Error, Result};

/// Minimum number of substitutions, deletions and insertions turning
/// `reference` into `hypothesis`. Two-row Levenshtein, unit costs.
pub fn edit_distance(reference: &[u32], hypothesis: &[u32]) -> usize {
    let (m, n) = (reference.len(), hypothesis.len());
    if m == 0 {
        return n;
    }
    if n == 0 {
        return m;
    }
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for i in 1..=m {
        cur[0] = i;
        for j in 1..=n {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// (S + D + I) / N against the reference length. Empty reference is
/// undefined; an empty hypothesis against a non-empty reference is 1.0.
/// Values above 1.0 are possible when the hypothesis is longer.
pub fn wer(reference: &[u32], hypothesis: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::UndefinedWer);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_have_zero_wer() {
        assert_eq!(wer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        assert_eq!(wer(&[1, 2, 3], &[]).unwrap(), 1.0);
    }

    #[test]
    fn empty_reference_is_undefined() {
        assert!(matches!(wer(&[], &[1]), Err(Error::UndefinedWer)));
    }

    #[test]
    fn wer_can_exceed_one_on_long_hypotheses() {
        let rate = wer(&[5], &[1, 2, 3]).unwrap();
        assert_eq!(rate, 3.0);
    }

    #[test]
    fn single_substitution_in_three_tokens() {
        let rate = wer(&[1, 2, 3], &[1, 9, 3]).unwrap();
        assert!((rate - 1.0 / 3.0).abs() < 1e-15);
    }

    /// Independent oracle: recursive edit distance with memoization over
    /// the full table, written without the rolling-row optimization.
    fn oracle(a: &[u32], b: &[u32]) -> usize {
        fn go(a: &[u32], b: &[u32], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
            if i == a.len() {
                return b.len() - j;
            }
            if j == b.len() {
                return a.len() - i;
            }
            if let Some(v) = memo[i][j] {
                return v;
            }
            let same = a[i] == b[j];
            let mut best = go(a, b, i + 1, j + 1, memo) + usize::from(!same);
            best = best.min(go(a, b, i + 1, j, memo) + 1);
            best = best.min(go(a, b, i, j + 1, memo) + 1);
            memo[i][j] = Some(best);
            best
        }
        let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
        go(a, b, 0, 0, &mut memo)
    }

    #[test]
    fn matches_recursive_oracle_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let la = rng.random_range(1..=8);
            let lb = rng.random_range(0..=8);
            let a: Vec<u32> = (0..la).map(|_| rng.random_range(0..3)).collect();
            let b: Vec<u32> = (0..lb).map(|_| rng.random_range(0..3)).collect();
            assert_eq!(edit_distance(&a, &b), oracle(&a, &b), "a={a:?} b={b:?}");
        }
    }
}
