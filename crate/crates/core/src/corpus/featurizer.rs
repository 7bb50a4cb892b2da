//! Synthetic acoustic features. Every token is rendered as a fixed number
//! of frames around a token-specific prototype vector, shifted by a
//! per-speaker offset and perturbed by per-frame noise. The prototype table
//! is regenerated from the seed, so configs stay small on disk.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normal_tensor, Tensor};
use crate::seeding;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FeaturizerConfig {
    pub frames_per_token: usize,
    pub feature_dim: usize,
    /// Standard deviation of both the speaker offset and the frame noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_token == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "featurizer needs positive frames_per_token and feature_dim".into(),
            ));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "noise_std = {} must be finite and non-negative",
                self.noise_std
            )));
        }
        Ok(())
    }
}

pub struct Featurizer {
    cfg: FeaturizerConfig,
    prototypes: Tensor,
}

impl Featurizer {
    pub fn new(cfg: FeaturizerConfig, vocab_size: u32) -> Result<Featurizer> {
        cfg.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("featurizer needs a non-empty vocab".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, "prototypes"));
        let prototypes = normal_tensor(&mut rng, &[vocab_size as usize, cfg.feature_dim], 1.0);
        Ok(Featurizer { cfg, prototypes })
    }

    pub fn cfg(&self) -> &FeaturizerConfig {
        &self.cfg
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    /// Frames for one utterance: [tokens * frames_per_token, feature_dim].
    /// Deterministic in (tokens, speaker, utterance id).
    pub fn frames(&self, tokens: &[u32], speaker: u32, utterance: &str) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput(format!(
                "cannot featurize empty utterance {utterance}"
            )));
        }
        let vocab = self.prototypes.rows() as u32;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Dim(format!(
                "token {bad} in {utterance} outside vocab of size {vocab}"
            )));
        }

        let d = self.cfg.feature_dim;
        let speaker_offset = {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seeding::derive_n(self.cfg.seed, "speaker", speaker as u64));
            normal_tensor(&mut rng, &[d], self.cfg.noise_std)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(
            seeding::derive(self.cfg.seed, "utterance"),
            utterance,
        ));

        let t = tokens.len() * self.cfg.frames_per_token;
        let mut data = Vec::with_capacity(t * d);
        for &tok in tokens {
            let proto = self.prototypes.row(tok as usize);
            for _ in 0..self.cfg.frames_per_token {
                let noise = normal_tensor(&mut rng, &[d], self.cfg.noise_std);
                for ((p, s), n) in proto
                    .iter()
                    .zip(speaker_offset.data())
                    .zip(noise.data())
                {
                    data.push(p + s + n);
                }
            }
        }
        Tensor::matrix(t, d, data)
    }
}
