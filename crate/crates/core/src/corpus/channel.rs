//! Token error channel standing in for an unsupervised speech recognizer.
//!
//! Each input token independently draws substitute / delete / insert / copy.
//! Inserted and substituted tokens are uniform over the vocabulary. After
//! emission, any token in the out-of-vocabulary set becomes `unk`: the
//! recognizer's lexicon simply does not contain those words, so they can
//! never appear in a transcript (they may still be deleted outright).

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorChannelConfig {
    pub sub_rate: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    pub vocab_size: u32,
    pub unk_id: u32,
    pub oov_ids: BTreeSet<u32>,
    pub seed: u64,
}

impl ErrorChannelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("sub_rate", self.sub_rate),
            ("del_rate", self.del_rate),
            ("ins_rate", self.ins_rate),
        ] {
            if !(0.0..=1.0).contains(&r) || !r.is_finite() {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1]")));
            }
        }
        let total = self.sub_rate + self.del_rate + self.ins_rate;
        if total > 1.0 {
            return Err(Error::Config(format!(
                "error rates sum to {total}, must be at most 1"
            )));
        }
        if self.vocab_size == 0 || self.unk_id >= self.vocab_size {
            return Err(Error::Config(format!(
                "unk id {} outside vocab of size {}",
                self.unk_id, self.vocab_size
            )));
        }
        if let Some(bad) = self.oov_ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Config(format!("oov id {bad} outside vocab")));
        }
        Ok(())
    }

    /// Same channel with all three rates multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        ErrorChannelConfig {
            sub_rate: self.sub_rate * factor,
            del_rate: self.del_rate * factor,
            ins_rate: self.ins_rate * factor,
            ..self.clone()
        }
    }

    /// Expected word error rate contributed by the per-token draws.
    pub fn nominal_rate(&self) -> f64 {
        self.sub_rate + self.del_rate + self.ins_rate
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub subs: usize,
    pub dels: usize,
    pub inss: usize,
    pub copies: usize,
}

/// Corrupt one transcript. `stream_seed` selects the per-utterance random
/// stream; the same (tokens, config, seed) triple always produces the same
/// output.
pub fn corrupt_transcript(
    tokens: &[u32],
    cfg: &ErrorChannelConfig,
    stream_seed: u64,
) -> (Vec<u32>, ChannelStats) {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let mut out = Vec::with_capacity(tokens.len() + 2);
    let mut stats = ChannelStats::default();
    let sub_to = cfg.sub_rate;
    let del_to = sub_to + cfg.del_rate;
    let ins_to = del_to + cfg.ins_rate;

    for &tok in tokens {
        let u: f64 = rng.random();
        if u < sub_to {
            stats.subs += 1;
            out.push(rng.random_range(0..cfg.vocab_size));
        } else if u < del_to {
            stats.dels += 1;
        } else if u < ins_to {
            stats.inss += 1;
            out.push(tok);
            out.push(rng.random_range(0..cfg.vocab_size));
        } else {
            stats.copies += 1;
            out.push(tok);
        }
    }

    for t in &mut out {
        if cfg.oov_ids.contains(t) {
            *t = cfg.unk_id;
        }
    }
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sub: f64, del: f64, ins: f64) -> ErrorChannelConfig {
        ErrorChannelConfig {
            sub_rate: sub,
            del_rate: del,
            ins_rate: ins,
            vocab_size: 100,
            unk_id: 0,
            oov_ids: BTreeSet::new(),
            seed: 0,
        }
    }

    #[test]
    fn zero_rates_without_oov_are_identity() {
        let tokens = vec![5, 6, 7, 8];
        let (out, stats) = corrupt_transcript(&tokens, &cfg(0.0, 0.0, 0.0), 1);
        assert_eq!(out, tokens);
        assert_eq!(stats.copies, 4);
    }

    #[test]
    fn oov_tokens_become_unk_regardless_of_draw() {
        let mut c = cfg(0.0, 0.0, 0.0);
        c.oov_ids.insert(7);
        let (out, _) = corrupt_transcript(&[5, 7, 8], &c, 1);
        assert_eq!(out, vec![5, 0, 8]);
    }

    #[test]
    fn full_deletion_empties_the_transcript() {
        let tokens = vec![1, 2, 3, 4, 5];
        let (out, stats) = corrupt_transcript(&tokens, &cfg(0.0, 1.0, 0.0), 1);
        assert!(out.is_empty());
        assert_eq!(stats.dels, 5);
        assert_eq!(crate::corpus::wer(&tokens, &out).unwrap(), 1.0);
    }

    #[test]
    fn same_seed_same_output_different_seed_differs() {
        let tokens: Vec<u32> = (1..40).collect();
        let c = cfg(0.2, 0.1, 0.1);
        let (a, _) = corrupt_transcript(&tokens, &c, 42);
        let (b, _) = corrupt_transcript(&tokens, &c, 42);
        let (other, _) = corrupt_transcript(&tokens, &c, 43);
        assert_eq!(a, b);
        assert_ne!(a, other);
    }

    #[test]
    fn empirical_rates_match_configuration() {
        let tokens: Vec<u32> = (0..10_000).map(|i| 1 + (i % 90) as u32).collect();
        let c = cfg(0.1, 0.05, 0.05);
        let (_, stats) = corrupt_transcript(&tokens, &c, 7);
        let n = tokens.len() as f64;
        assert!((stats.subs as f64 / n - 0.10).abs() < 0.01, "{stats:?}");
        assert!((stats.dels as f64 / n - 0.05).abs() < 0.01, "{stats:?}");
        assert!((stats.inss as f64 / n - 0.05).abs() < 0.01, "{stats:?}");
    }

    #[test]
    fn validation_rejects_bad_rates_and_ids() {
        assert!(cfg(-0.1, 0.0, 0.0).validate().is_err());
        assert!(cfg(0.6, 0.3, 0.2).validate().is_err());
        assert!(cfg(0.1, 0.1, 0.1).validate().is_ok());
        let mut c = cfg(0.0, 0.0, 0.0);
        c.unk_id = 100;
        assert!(c.validate().is_err());
        let mut c = cfg(0.0, 0.0, 0.0);
        c.oov_ids.insert(100);
        assert!(c.validate().is_err());
    }

    #[test]
    fn scaled_rates_multiply() {
        let c = cfg(0.12, 0.04, 0.04).scaled(0.5);
        assert!((c.sub_rate - 0.06).abs() < 1e-15);
        assert!((c.nominal_rate() - 0.1).abs() < 1e-15);
    }
}
