//! Run configuration for the CLI.
//!
//! A run starts from a built-in profile ("paper" hyperparameters, or the
//! laptop-scale "desk" variant layered on top of it) and is then adjusted
//! by `key = value` pairs from a config file and from the command line, in
//! that order. One master seed drives every random stream in the run; the
//! per-component seeds are derived from it by label.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::corpus::{ChannelRates, CorpusGenConfig, VocabLayout};
use crate::encoders::{Modality, ModelConfig};
use crate::error::{Error, Result};
use crate::seeding;
use crate::trainer::TrainConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "SOUNDER_CONFIG";

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunPaths {
    pub corpus: PathBuf,
    pub teacher: PathBuf,
    pub student: PathBuf,
    pub index: PathBuf,
    pub reports: PathBuf,
}

/// Encoder hyperparameters; the modality and seeds are filled in when a
/// concrete model is instantiated.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EncoderSettings {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub t_max: usize,
    pub conv_hidden: usize,
    pub conv1: (usize, usize),
    pub conv2: (usize, usize),
    pub eps: f64,
    pub use_positions: bool,
}

impl EncoderSettings {
    fn model_config(&self, modality: Modality, init_seed: u64) -> ModelConfig {
        ModelConfig {
            modality,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            t_max: self.t_max,
            conv_hidden: self.conv_hidden,
            conv1: self.conv1,
            conv2: self.conv2,
            eps: self.eps,
            init_seed,
            use_positions: self.use_positions,
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    /// Master seed; corpus, model init and batch shuffling all derive
    /// their own streams from it.
    pub seed: u64,
    /// Retrieval depth used by search, evaluation and tuning.
    pub k: usize,
    pub paths: RunPaths,
    pub corpus: CorpusGenConfig,
    pub teacher_encoder: EncoderSettings,
    pub student_encoder: EncoderSettings,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
}

impl RunConfig {
    /// Hyperparameters as published: full-scale corpus and training runs.
    pub fn paper() -> RunConfig {
        let encoder = EncoderSettings {
            d_model: 128,
            layers: 4,
            heads: 8,
            ffn_dim: 256,
            t_max: 192,
            conv_hidden: 64,
            conv1: (4, 4),
            conv2: (3, 3),
            eps: 1e-5,
            use_positions: true,
        };
        RunConfig {
            profile: "paper".into(),
            seed: 0,
            k: 20,
            paths: RunPaths {
                corpus: "runs/corpus".into(),
                teacher: "runs/teacher".into(),
                student: "runs/student".into(),
                index: "runs/index".into(),
                reports: "runs/reports".into(),
            },
            corpus: CorpusGenConfig {
                seed: 0,
                num_passages: 20_000,
                num_questions: [2000, 500, 500],
                content_vocab: 4000,
                entity_vocab: 2000,
                num_topics: 500,
                topic_core_size: 40,
                topic_core_weight: 0.8,
                passage_len: (40, 80),
                question_len: (8, 16),
                entities_per_passage: 3,
                question_entities: 2,
                duration_s: 60.0,
                passage_speakers: 200,
                question_speakers: [40, 10, 10],
                oov_entity_fraction: 0.15,
                channel: ChannelRates {
                    sub_rate: 0.12,
                    del_rate: 0.04,
                    ins_rate: 0.04,
                },
                question_rate_spread: None,
                frames_per_token: 12,
                feature_dim: 32,
                noise_std: 0.5,
            },
            teacher_encoder: encoder.clone(),
            student_encoder: encoder,
            teacher_train: TrainConfig::paper_teacher(),
            student_train: TrainConfig::paper_student(),
        }
    }

    /// The paper profile with everything shrunk to run on a laptop in
    /// minutes: smaller corpus, smaller encoders, shorter training.
    pub fn desk() -> RunConfig {
        let mut cfg = RunConfig::paper();
        cfg.profile = "desk".into();
        cfg.corpus = CorpusGenConfig {
            seed: 0,
            ..CorpusGenConfig::default()
        };
        let encoder = EncoderSettings {
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            t_max: 128,
            conv_hidden: 48,
            ..cfg.teacher_encoder
        };
        cfg.teacher_encoder = encoder.clone();
        cfg.student_encoder = encoder;
        cfg.teacher_train = TrainConfig::desk_teacher();
        cfg.student_train = TrainConfig::desk_student();
        cfg
    }

    pub fn builtin(name: &str) -> Result<RunConfig> {
        match name {
            "paper" => Ok(RunConfig::paper()),
            "desk" => Ok(RunConfig::desk()),
            other => Err(Error::Config(format!(
                "unknown profile {other}; built-ins are paper and desk"
            ))),
        }
    }

    /// Corpus generation settings with the master seed applied.
    pub fn corpus_config(&self) -> CorpusGenConfig {
        CorpusGenConfig {
            seed: seeding::derive(self.seed, "corpus"),
            ..self.corpus.clone()
        }
    }

    pub fn teacher_model(&self, vocab: &VocabLayout) -> ModelConfig {
        self.teacher_encoder.model_config(
            Modality::Tokens {
                vocab_size: vocab.size(),
            },
            seeding::derive(self.seed, "model:teacher"),
        )
    }

    pub fn student_model(&self, feature_dim: usize) -> ModelConfig {
        self.student_encoder.model_config(
            Modality::Frames { feature_dim },
            seeding::derive(self.seed, "model:student"),
        )
    }

    pub fn teacher_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: seeding::derive(self.seed, "train:teacher"),
            eval_k: self.k,
            ..self.teacher_train.clone()
        }
    }

    /// Student settings; with `distill` off the teacher terms are dropped.
    pub fn student_train_config(&self, distill: bool) -> TrainConfig {
        let mut cfg = TrainConfig {
            seed: seeding::derive(self.seed, "train:student"),
            eval_k: self.k,
            ..self.student_train.clone()
        };
        if !distill {
            cfg.alpha = 0.0;
            cfg.beta = 0.0;
        }
        cfg
    }

    /// Content hash of the whole configuration; recorded in run manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::trainer::sha256_hex(json.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.corpus_config().validate()?;
        let vocab = self.corpus.vocab();
        self.teacher_model(&vocab).validate()?;
        self.student_model(self.corpus.feature_dim).validate()?;
        self.teacher_train_config().validate()?;
        self.student_train_config(true).validate()?;
        Ok(())
    }

    /// Apply one `key = value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "profile" => {
                return Err(Error::Config(
                    "the profile is selected by the config file's profile key or --profile, \
                     not as an override"
                        .into(),
                ))
            }
            "seed" => self.seed = num(key, value)?,
            "k" => self.k = num(key, value)?,

            "paths.corpus" => self.paths.corpus = value.into(),
            "paths.teacher" => self.paths.teacher = value.into(),
            "paths.student" => self.paths.student = value.into(),
            "paths.index" => self.paths.index = value.into(),
            "paths.reports" => self.paths.reports = value.into(),

            "corpus.num_passages" => self.corpus.num_passages = num(key, value)?,
            "corpus.train_questions" => self.corpus.num_questions[0] = num(key, value)?,
            "corpus.dev_questions" => self.corpus.num_questions[1] = num(key, value)?,
            "corpus.test_questions" => self.corpus.num_questions[2] = num(key, value)?,
            "corpus.content_vocab" => self.corpus.content_vocab = num(key, value)?,
            "corpus.entity_vocab" => self.corpus.entity_vocab = num(key, value)?,
            "corpus.num_topics" => self.corpus.num_topics = num(key, value)?,
            "corpus.topic_core_size" => self.corpus.topic_core_size = num(key, value)?,
            "corpus.topic_core_weight" => self.corpus.topic_core_weight = num(key, value)?,
            "corpus.passage_len_min" => self.corpus.passage_len.0 = num(key, value)?,
            "corpus.passage_len_max" => self.corpus.passage_len.1 = num(key, value)?,
            "corpus.question_len_min" => self.corpus.question_len.0 = num(key, value)?,
            "corpus.question_len_max" => self.corpus.question_len.1 = num(key, value)?,
            "corpus.entities_per_passage" => {
                self.corpus.entities_per_passage = num(key, value)?
            }
            "corpus.question_entities" => self.corpus.question_entities = num(key, value)?,
            "corpus.duration_s" => self.corpus.duration_s = num(key, value)?,
            "corpus.passage_speakers" => self.corpus.passage_speakers = num(key, value)?,
            "corpus.train_speakers" => self.corpus.question_speakers[0] = num(key, value)?,
            "corpus.dev_speakers" => self.corpus.question_speakers[1] = num(key, value)?,
            "corpus.test_speakers" => self.corpus.question_speakers[2] = num(key, value)?,
            "corpus.oov_entity_fraction" => {
                self.corpus.oov_entity_fraction = num(key, value)?
            }
            "corpus.frames_per_token" => self.corpus.frames_per_token = num(key, value)?,
            "corpus.feature_dim" => self.corpus.feature_dim = num(key, value)?,
            "corpus.noise_std" => self.corpus.noise_std = num(key, value)?,

            "channel.sub_rate" => self.corpus.channel.sub_rate = num(key, value)?,
            "channel.del_rate" => self.corpus.channel.del_rate = num(key, value)?,
            "channel.ins_rate" => self.corpus.channel.ins_rate = num(key, value)?,
            "channel.question_rate_spread" => {
                self.corpus.question_rate_spread = parse_spread(key, value)?
            }

            _ => {
                if let Some(sub) = key.strip_prefix("teacher.") {
                    apply_encoder(&mut self.teacher_encoder, key, sub, value)?;
                } else if let Some(sub) = key.strip_prefix("student.") {
                    apply_encoder(&mut self.student_encoder, key, sub, value)?;
                } else if let Some(sub) = key.strip_prefix("train.teacher.") {
                    apply_train(&mut self.teacher_train, key, sub, value, false)?;
                } else if let Some(sub) = key.strip_prefix("train.student.") {
                    apply_train(&mut self.student_train, key, sub, value, true)?;
                } else {
                    return Err(Error::Config(format!("unknown config key {key}")));
                }
            }
        }
        Ok(())
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value for {key}: {e}")))
}

fn parse_spread(key: &str, value: &str) -> Result<Option<(f64, f64)>> {
    if value == "none" {
        return Ok(None);
    }
    let (lo, hi) = value.split_once("..").ok_or_else(|| {
        Error::Config(format!("bad value for {key}: expected lo..hi or none"))
    })?;
    Ok(Some((num(key, lo.trim())?, num(key, hi.trim())?)))
}

fn apply_encoder(enc: &mut EncoderSettings, key: &str, sub: &str, value: &str) -> Result<()> {
    match sub {
        "d_model" => enc.d_model = num(key, value)?,
        "layers" => enc.layers = num(key, value)?,
        "heads" => enc.heads = num(key, value)?,
        "ffn_dim" => enc.ffn_dim = num(key, value)?,
        "t_max" => enc.t_max = num(key, value)?,
        "conv_hidden" => enc.conv_hidden = num(key, value)?,
        "conv1_kernel" => enc.conv1.0 = num(key, value)?,
        "conv1_stride" => enc.conv1.1 = num(key, value)?,
        "conv2_kernel" => enc.conv2.0 = num(key, value)?,
        "conv2_stride" => enc.conv2.1 = num(key, value)?,
        "eps" => enc.eps = num(key, value)?,
        "use_positions" => enc.use_positions = num(key, value)?,
        _ => return Err(Error::Config(format!("unknown config key {key}"))),
    }
    Ok(())
}

fn apply_train(
    train: &mut TrainConfig,
    key: &str,
    sub: &str,
    value: &str,
    distills: bool,
) -> Result<()> {
    match sub {
        "batch_size" => train.batch_size = num(key, value)?,
        "learning_rate" => train.learning_rate = num(key, value)?,
        "warmup_steps" => train.warmup_steps = num(key, value)?,
        "epochs" => train.epochs = num(key, value)?,
        "eval_every" => train.eval_every = num(key, value)?,
        "clip_norm" => train.clip_norm = num(key, value)?,
        "decay_end" => {
            train.decay_end = if value == "none" {
                None
            } else {
                Some(num(key, value)?)
            }
        }
        "alpha" if distills => train.alpha = num(key, value)?,
        "beta" if distills => train.beta = num(key, value)?,
        _ => return Err(Error::Config(format!("unknown config key {key}"))),
    }
    Ok(())
}

/// Parse `key = value` lines; `#` starts a full-line comment.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::format(origin, format!("line {}: expected key = value", lineno + 1))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Assemble the effective configuration. Precedence, lowest to highest:
/// built-in profile, config file pairs, command-line overrides. The file
/// comes from `file`, falling back to `$SOUNDER_CONFIG`; the profile from
/// `profile`, falling back to the file's own `profile` key, then "desk".
pub fn load_config(
    file: Option<&Path>,
    profile: Option<&str>,
    overrides: &[(String, String)],
) -> Result<RunConfig> {
    let file: Option<PathBuf> = match file {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
    };
    let pairs = match &file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_pairs(&text, p)?
        }
        None => Vec::new(),
    };

    let file_profile = pairs
        .iter()
        .filter(|(k, _)| k == "profile")
        .map(|(_, v)| v.as_str())
        .next_back();
    let name = profile.or(file_profile).unwrap_or("desk");
    let mut cfg = RunConfig::builtin(name)?;

    for (k, v) in &pairs {
        if k == "profile" {
            continue;
        }
        cfg.apply(k, v)?;
    }
    for (k, v) in overrides {
        cfg.apply(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
