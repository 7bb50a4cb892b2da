//! Bi-encoder retrieval models.
//!
//! A retriever is two independent towers (question and passage, no weight
//! sharing) mapping an utterance to a d_model vector; relevance is the raw
//! inner product. Towers pair a modality front end (token embedding or
//! frame processor) with a CLS-pooled transformer encoder.

pub mod feature_processor;
pub mod sentence_encoder;
pub mod token_embedder;

pub use feature_processor::FeatureProcessor;
pub use sentence_encoder::SentenceEncoder;
pub use token_embedder::{TokenEmbedder, UNK_ID};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normal_tensor, ParamStore, Tape, Tensor, Var};
use crate::seeding;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modality {
    /// Transcript tokens; vocabulary id 0 is unk.
    Tokens { vocab_size: u32 },
    /// Acoustic frames of the given width.
    Frames { feature_dim: usize },
}

impl Modality {
    pub fn name(&self) -> &'static str {
        match self {
            Modality::Tokens { .. } => "tokens",
            Modality::Frames { .. } => "frames",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub modality: Modality,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub t_max: usize,
    /// Frame front end: conv channel width and (kernel, stride) pairs.
    pub conv_hidden: usize,
    pub conv1: (usize, usize),
    pub conv2: (usize, usize),
    pub eps: f64,
    pub init_seed: u64,
    /// Disabled only in diagnostics; without positions the CLS pooling is
    /// permutation-invariant.
    pub use_positions: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        if self.t_max < 2 {
            return Err(Error::Config("t_max must be at least 2".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        match self.modality {
            Modality::Tokens { vocab_size: 0 } => {
                Err(Error::Config("vocab_size must be positive".into()))
            }
            Modality::Frames { feature_dim: 0 } => {
                Err(Error::Config("feature_dim must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One utterance presented to an encoder.
#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a> {
    Tokens {
        tokens: &'a [u32],
        utterance: &'a str,
    },
    Frames {
        frames: &'a Tensor,
        utterance: &'a str,
    },
}

impl<'a> EncoderInput<'a> {
    pub fn utterance(&self) -> &'a str {
        match self {
            EncoderInput::Tokens { utterance, .. } => utterance,
            EncoderInput::Frames { utterance, .. } => utterance,
        }
    }
}

pub enum FrontEnd {
    Tokens(TokenEmbedder),
    Frames(FeatureProcessor),
}

pub struct Tower {
    pub front: FrontEnd,
    pub encoder: SentenceEncoder,
}

impl Tower {
    fn build<R: Rng>(
        store: &mut ParamStore,
        side: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Tower> {
        let (front, input_dim) = match cfg.modality {
            Modality::Tokens { vocab_size } => {
                let emb = TokenEmbedder::build(store, side, vocab_size, cfg.d_model, rng)?;
                (FrontEnd::Tokens(emb), cfg.d_model)
            }
            Modality::Frames { feature_dim } => {
                let fp = FeatureProcessor::build(
                    store,
                    side,
                    feature_dim,
                    cfg.conv_hidden,
                    cfg.conv1,
                    cfg.conv2,
                    cfg.eps,
                    rng,
                )?;
                let dim = fp.output_dim();
                (FrontEnd::Frames(fp), dim)
            }
        };
        let encoder = SentenceEncoder::build(
            store,
            side,
            input_dim,
            cfg.d_model,
            cfg.layers,
            cfg.heads,
            cfg.ffn_dim,
            cfg.t_max,
            cfg.eps,
            cfg.use_positions,
            rng,
        )?;
        Ok(Tower { front, encoder })
    }

    /// Sentence vector [d_model] on the given tape.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &EncoderInput,
    ) -> Result<Var> {
        let utterance = input.utterance();
        let rows = match (&self.front, input) {
            (FrontEnd::Tokens(emb), EncoderInput::Tokens { tokens, .. }) => {
                emb.embed(tape, store, tokens, utterance)?
            }
            (FrontEnd::Frames(fp), EncoderInput::Frames { frames, .. }) => {
                fp.process(tape, store, frames, utterance)?
            }
            (FrontEnd::Tokens(_), EncoderInput::Frames { .. }) => {
                return Err(Error::Config(format!(
                    "{utterance}: token model given frame input"
                )));
            }
            (FrontEnd::Frames(_), EncoderInput::Tokens { .. }) => {
                return Err(Error::Config(format!(
                    "{utterance}: frame model given token input"
                )));
            }
        };
        self.encoder.encode(tape, store, rows, utterance)
    }
}

/// Question tower, passage tower and their shared parameter store.
pub struct RetrieverModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub question: Tower,
    pub passage: Tower,
}

impl std::fmt::Debug for RetrieverModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetrieverModel")
            .field("config", &self.config)
            .field("parameters", &self.store.numel())
            .finish_non_exhaustive()
    }
}

impl RetrieverModel {
    pub fn new(config: ModelConfig) -> Result<RetrieverModel> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(config.init_seed, "init"));
        let question = Tower::build(&mut store, "question", &config, &mut rng)?;
        let passage = Tower::build(&mut store, "passage", &config, &mut rng)?;
        Ok(RetrieverModel {
            config,
            store,
            question,
            passage,
        })
    }

    pub fn encode_question(&self, tape: &mut Tape, input: &EncoderInput) -> Result<Var> {
        self.question.encode(tape, &self.store, input)
    }

    pub fn encode_passage(&self, tape: &mut Tape, input: &EncoderInput) -> Result<Var> {
        self.passage.encode(tape, &self.store, input)
    }

    /// Inference-only question vector on a throwaway tape.
    pub fn embed_question(&self, input: &EncoderInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.encode_question(&mut tape, input)?;
        tape.check_finite()?;
        Ok(tape.value(v).clone())
    }

    /// Inference-only passage vector on a throwaway tape.
    pub fn embed_passage(&self, input: &EncoderInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.encode_passage(&mut tape, input)?;
        tape.check_finite()?;
        Ok(tape.value(v).clone())
    }

    /// Hash over all weights; any training step changes it.
    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.iter().all(|(_, p)| p.frozen)
    }
}

pub(crate) fn xavier_init<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    normal_tensor(rng, &[rows, cols], std)
}

pub(crate) fn conv_init<R: Rng>(rng: &mut R, k: usize, d_in: usize, d_out: usize) -> Tensor {
    let std = (2.0 / (k * d_in + d_out) as f64).sqrt();
    normal_tensor(rng, &[k, d_in, d_out], std)
}

pub(crate) fn embed_init<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    normal_tensor(rng, &[rows, cols], 0.02)
}
