//! Synthetic spoken-archive corpus: passages and questions with clean token
//! sequences, error-channel transcripts and acoustic frame features.
//!
//! On disk a corpus is a directory:
//!   meta.json          generation, featurizer and channel configuration
//!   manifest.jsonl     one record per passage / question
//!   transcripts/<id>.json
//!   features/<id>.bin  matrix file, frames x feature_dim

pub mod channel;
pub mod featurizer;
pub mod generator;
pub mod wer;

pub use channel::{corrupt_transcript, ChannelStats, ErrorChannelConfig};
pub use featurizer::{Featurizer, FeaturizerConfig};
pub use generator::{generate_corpus, ChannelRates, CorpusGenConfig};
pub use wer::{edit_distance, wer};

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfile;
use crate::numerics::Tensor;
use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Passage {
    pub id: String,
    pub tokens: Vec<u32>,
    pub topic: u32,
    pub speaker: u32,
    pub duration_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Question {
    pub id: String,
    pub tokens: Vec<u32>,
    pub gold_passage_id: String,
    /// Entity tokens naming the answer; these also appear in the gold
    /// passage at the answer span.
    pub answer_tokens: Vec<u32>,
    /// Time span of the answer inside the gold passage, seconds.
    pub answer_span_s: (f64, f64),
    pub speaker: u32,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct VocabLayout {
    pub unk_id: u32,
    pub content_start: u32,
    pub content_count: u32,
    pub entity_start: u32,
    pub entity_count: u32,
}

impl VocabLayout {
    pub fn size(&self) -> u32 {
        1 + self.content_count + self.entity_count
    }

    pub fn is_entity(&self, token: u32) -> bool {
        token >= self.entity_start && token < self.entity_start + self.entity_count
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub format_version: u32,
    pub gen: CorpusGenConfig,
    pub vocab: VocabLayout,
    pub featurizer: FeaturizerConfig,
    pub channel: ErrorChannelConfig,
}

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Passage(Passage),
    Question(Question),
}

/// A fully generated corpus before it is written out. Frame features are
/// not materialized here; they are computed per utterance during `save`.
pub struct CorpusBuild {
    pub meta: CorpusMeta,
    pub passages: Vec<Passage>,
    pub questions: Vec<Question>,
    /// Corrupted transcripts, one per utterance id.
    pub transcripts: Vec<(String, Vec<u32>)>,
}

impl CorpusBuild {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest_path = dir.join("manifest.jsonl");
        if manifest_path.exists() {
            return Err(Error::Config(format!(
                "{} already contains a corpus",
                dir.display()
            )));
        }
        let transcripts_dir = dir.join("transcripts");
        let features_dir = dir.join("features");
        for d in [dir, &transcripts_dir, &features_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }

        let meta_path = dir.join("meta.json");
        let meta_json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::format(&meta_path, e.to_string()))?;
        fs::write(&meta_path, meta_json + "\n")
            .map_err(|e| Error::io(&meta_path, e))?;

        let mut manifest = Vec::new();
        for p in &self.passages {
            write_record(&mut manifest, &Record::Passage(p.clone()))?;
        }
        for q in &self.questions {
            write_record(&mut manifest, &Record::Question(q.clone()))?;
        }
        fs::write(&manifest_path, manifest)
            .map_err(|e| Error::io(&manifest_path, e))?;

        for (id, tokens) in &self.transcripts {
            let p = transcripts_dir.join(format!("{id}.json"));
            let body = serde_json::to_string(tokens)
                .map_err(|e| Error::format(&p, e.to_string()))?;
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }

        let featurizer = Featurizer::new(self.meta.featurizer.clone(), self.meta.vocab.size())?;
        let utterances: Vec<(&str, &[u32], u32)> = self
            .passages
            .iter()
            .map(|p| (p.id.as_str(), p.tokens.as_slice(), p.speaker))
            .chain(
                self.questions
                    .iter()
                    .map(|q| (q.id.as_str(), q.tokens.as_slice(), q.speaker)),
            )
            .collect();
        utterances
            .par_iter()
            .map(|(id, tokens, speaker)| {
                let frames = featurizer.frames(tokens, *speaker, id)?;
                matfile::write_matrix(&features_dir.join(format!("{id}.bin")), &frames)
            })
            .collect::<Result<Vec<()>>>()?;
        Ok(())
    }
}

fn write_record(buf: &mut Vec<u8>, record: &Record) -> Result<()> {
    let line = serde_json::to_string(record)
        .map_err(|e| Error::format("manifest.jsonl", e.to_string()))?;
    buf.extend_from_slice(line.as_bytes());
    buf.push(b'\n');
    Ok(())
}

/// A corpus directory opened for reading. Record metadata is held in
/// memory; transcripts and frame features are read per utterance.
pub struct Corpus {
    root: PathBuf,
    pub meta: CorpusMeta,
    pub passages: Vec<Passage>,
    pub questions: Vec<Question>,
    passage_index: HashMap<String, usize>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Corpus> {
        let meta_path = dir.join("meta.json");
        let meta_raw = fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(&meta_path, e))?;
        let meta: CorpusMeta = serde_json::from_str(&meta_raw)
            .map_err(|e| Error::format(&meta_path, e.to_string()))?;
        if meta.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::format(
                &meta_path,
                format!("unsupported corpus format version {}", meta.format_version),
            ));
        }
        meta.channel.validate()?;
        meta.featurizer.validate()?;

        let manifest_path = dir.join("manifest.jsonl");
        let file = fs::File::open(&manifest_path)
            .map_err(|e| Error::io(&manifest_path, e))?;
        let mut passages = Vec::new();
        let mut questions = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line).map_err(|e| {
                Error::format(
                    &manifest_path,
                    format!("line {}: {e}", lineno + 1),
                )
            })?;
            match record {
                Record::Passage(p) => passages.push(p),
                Record::Question(q) => questions.push(q),
            }
        }
        if passages.is_empty() {
            return Err(Error::EmptyInput(format!(
                "no passages in {}",
                manifest_path.display()
            )));
        }

        let mut passage_index = HashMap::new();
        for (i, p) in passages.iter().enumerate() {
            if passage_index.insert(p.id.clone(), i).is_some() {
                return Err(Error::format(
                    &manifest_path,
                    format!("duplicate passage id {}", p.id),
                ));
            }
        }

        let corpus = Corpus {
            root: dir.to_path_buf(),
            meta,
            passages,
            questions,
            passage_index,
        };
        corpus.check_coverage()?;
        Ok(corpus)
    }

    fn check_coverage(&self) -> Result<()> {
        let mut missing = Vec::new();
        for q in &self.questions {
            if !self.passage_index.contains_key(&q.gold_passage_id) {
                missing.push(format!("{} (gold of {})", q.gold_passage_id, q.id));
            }
        }
        for id in self.utterance_ids() {
            if !self.transcript_path(id).exists() {
                missing.push(format!("transcripts/{id}.json"));
            }
            if !self.features_path(id).exists() {
                missing.push(format!("features/{id}.bin"));
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            missing.sort();
            Err(Error::MissingIds {
                context: format!("corpus at {}", self.root.display()),
                missing,
            })
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn utterance_ids(&self) -> impl Iterator<Item = &str> {
        self.passages
            .iter()
            .map(|p| p.id.as_str())
            .chain(self.questions.iter().map(|q| q.id.as_str()))
    }

    pub fn passage(&self, id: &str) -> Result<&Passage> {
        self.passage_index
            .get(id)
            .map(|&i| &self.passages[i])
            .ok_or_else(|| Error::MissingIds {
                context: "passage lookup".into(),
                missing: vec![id.to_string()],
            })
    }

    pub fn questions_in(&self, split: Split) -> Vec<&Question> {
        self.questions.iter().filter(|q| q.split == split).collect()
    }

    pub fn question(&self, id: &str) -> Result<&Question> {
        self.questions
            .iter()
            .find(|q| q.id == id)
            .ok_or_else(|| Error::MissingIds {
                context: "question lookup".into(),
                missing: vec![id.to_string()],
            })
    }

    fn transcript_path(&self, id: &str) -> PathBuf {
        self.root.join("transcripts").join(format!("{id}.json"))
    }

    fn features_path(&self, id: &str) -> PathBuf {
        self.root.join("features").join(format!("{id}.bin"))
    }

    /// Error-channel transcript as stored; may be empty after deletions.
    pub fn transcript(&self, id: &str) -> Result<Vec<u32>> {
        let p = self.transcript_path(id);
        let raw = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::format(&p, e.to_string()))
    }

    /// Transcript with the empty case mapped to a single unk token, so
    /// token encoders always see at least one position.
    pub fn transcript_for_encoding(&self, id: &str) -> Result<Vec<u32>> {
        let t = self.transcript(id)?;
        Ok(non_empty_tokens(t, self.meta.channel.unk_id))
    }

    pub fn frames(&self, id: &str) -> Result<Tensor> {
        matfile::read_matrix(&self.features_path(id))
    }

    /// Stream seed the generator used for this utterance's transcript.
    pub fn channel_stream_seed(&self, id: &str) -> u64 {
        seeding::derive(self.meta.channel.seed, id)
    }
}

pub fn non_empty_tokens(tokens: Vec<u32>, unk_id: u32) -> Vec<u32> {
    if tokens.is_empty() {
        vec![unk_id]
    } else {
        tokens
    }
}

impl std::fmt::Debug for Corpus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Corpus")
            .field("root", &self.root)
            .field("passages", &self.passages.len())
            .field("questions", &self.questions.len())
            .finish()
    }
}
