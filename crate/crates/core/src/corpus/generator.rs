//! Corpus generation.
//!
//! Passages are mixtures over a topic's core vocabulary with one contiguous
//! run of entity tokens spliced in; that run is the answer. Questions sample
//! from the gold passage's topic and mention a subset of its entities, so
//! entity tokens carry the retrieval signal while topic tokens provide
//! context. A fraction of entity tokens is marked out-of-vocabulary for the
//! error channel, which can never transcribe them.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::channel::{corrupt_transcript, ErrorChannelConfig};
use crate::corpus::featurizer::FeaturizerConfig;
use crate::corpus::{
    CorpusBuild, CorpusMeta, Passage, Question, Split, VocabLayout, CORPUS_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChannelRates {
    pub sub_rate: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusGenConfig {
    pub seed: u64,
    pub num_passages: usize,
    /// train, dev, test question counts.
    pub num_questions: [usize; 3],
    pub content_vocab: u32,
    pub entity_vocab: u32,
    pub num_topics: usize,
    pub topic_core_size: usize,
    /// Probability a passage token comes from the topic core rather than
    /// the whole content vocabulary.
    pub topic_core_weight: f64,
    pub passage_len: (usize, usize),
    pub question_len: (usize, usize),
    /// Length of the contiguous entity run spliced into each passage.
    pub entities_per_passage: usize,
    /// How many of the gold passage's entities each question mentions.
    pub question_entities: usize,
    pub duration_s: f64,
    pub passage_speakers: u32,
    /// train, dev, test question speaker pool sizes; pools are disjoint
    /// from each other and from passage speakers.
    pub question_speakers: [u32; 3],
    /// Fraction of the entity vocabulary the channel cannot transcribe.
    pub oov_entity_fraction: f64,
    pub channel: ChannelRates,
    /// When set, each question's transcript is corrupted at its own rate:
    /// the three channel rates are rescaled so their sum is a uniform draw
    /// from this range. Passages keep the base rates.
    #[serde(default)]
    pub question_rate_spread: Option<(f64, f64)>,
    pub frames_per_token: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
}

impl Default for CorpusGenConfig {
    /// Desk-scale corpus.
    fn default() -> Self {
        CorpusGenConfig {
            seed: 0,
            num_passages: 2000,
            num_questions: [500, 100, 150],
            content_vocab: 400,
            entity_vocab: 300,
            num_topics: 100,
            topic_core_size: 30,
            topic_core_weight: 0.8,
            passage_len: (30, 50),
            question_len: (6, 12),
            entities_per_passage: 3,
            question_entities: 2,
            duration_s: 40.0,
            passage_speakers: 40,
            question_speakers: [10, 3, 4],
            oov_entity_fraction: 0.15,
            channel: ChannelRates {
                sub_rate: 0.12,
                del_rate: 0.04,
                ins_rate: 0.04,
            },
            question_rate_spread: None,
            frames_per_token: 12,
            feature_dim: 16,
            noise_std: 0.5,
        }
    }
}

impl CorpusGenConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        c(self.num_passages > 0, "num_passages must be positive")?;
        c(
            self.num_questions.iter().all(|&n| n > 0),
            "every split needs at least one question",
        )?;
        c(self.content_vocab > 0, "content_vocab must be positive")?;
        c(self.entity_vocab > 0, "entity_vocab must be positive")?;
        c(self.num_topics > 0, "num_topics must be positive")?;
        c(
            self.topic_core_size > 0 && self.topic_core_size as u32 <= self.content_vocab,
            "topic_core_size must fit in the content vocab",
        )?;
        c(
            (0.0..=1.0).contains(&self.topic_core_weight),
            "topic_core_weight must be in [0, 1]",
        )?;
        c(
            self.passage_len.0 <= self.passage_len.1,
            "passage_len range is reversed",
        )?;
        c(
            self.question_len.0 <= self.question_len.1,
            "question_len range is reversed",
        )?;
        c(
            self.entities_per_passage > 0
                && self.entities_per_passage as u32 <= self.entity_vocab
                && self.entities_per_passage < self.passage_len.0,
            "entities_per_passage must be positive and shorter than the shortest passage",
        )?;
        c(
            self.question_entities > 0
                && self.question_entities <= self.entities_per_passage
                && self.question_entities < self.question_len.0,
            "question_entities must fit in both the passage entity run and the shortest question",
        )?;
        c(
            self.duration_s > 0.0 && self.duration_s.is_finite(),
            "duration_s must be positive",
        )?;
        c(self.passage_speakers > 0, "passage_speakers must be positive")?;
        c(
            self.question_speakers.iter().all(|&n| n > 0),
            "every split needs at least one speaker",
        )?;
        c(
            (0.0..1.0).contains(&self.oov_entity_fraction),
            "oov_entity_fraction must be in [0, 1)",
        )?;
        if let Some((lo, hi)) = self.question_rate_spread {
            c(
                lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi <= 1.0,
                "question_rate_spread must satisfy 0 <= lo <= hi <= 1",
            )?;
            let base = self.channel.sub_rate + self.channel.del_rate + self.channel.ins_rate;
            c(
                base > 0.0,
                "question_rate_spread needs nonzero base channel rates to rescale",
            )?;
        }
        Ok(())
    }

    pub fn vocab(&self) -> VocabLayout {
        VocabLayout {
            unk_id: 0,
            content_start: 1,
            content_count: self.content_vocab,
            entity_start: 1 + self.content_vocab,
            entity_count: self.entity_vocab,
        }
    }
}

fn sample_distinct<R: Rng>(rng: &mut R, lo: u32, hi: u32, k: usize) -> Vec<u32> {
    debug_assert!((hi - lo) as usize >= k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let cand = rng.random_range(lo..hi);
        if !out.contains(&cand) {
            out.push(cand);
        }
    }
    out
}

pub fn generate_corpus(cfg: &CorpusGenConfig) -> Result<CorpusBuild> {
    cfg.validate()?;
    let vocab = cfg.vocab();

    let channel = ErrorChannelConfig {
        sub_rate: cfg.channel.sub_rate,
        del_rate: cfg.channel.del_rate,
        ins_rate: cfg.channel.ins_rate,
        vocab_size: vocab.size(),
        unk_id: vocab.unk_id,
        oov_ids: sample_oov(cfg, &vocab),
        seed: seeding::derive(cfg.seed, "channel"),
    };
    channel.validate()?;
    let featurizer = FeaturizerConfig {
        frames_per_token: cfg.frames_per_token,
        feature_dim: cfg.feature_dim,
        noise_std: cfg.noise_std,
        seed: seeding::derive(cfg.seed, "featurizer"),
    };
    featurizer.validate()?;

    let topics = sample_topics(cfg, &vocab);
    let (passages, answers) = sample_passages(cfg, &vocab, &topics);
    let questions = sample_questions(cfg, &topics, &passages, &answers);

    let mut transcripts = Vec::with_capacity(passages.len() + questions.len());
    for p in &passages {
        let stream = seeding::derive(channel.seed, &p.id);
        let (corrupted, _) = corrupt_transcript(&p.tokens, &channel, stream);
        transcripts.push((p.id.clone(), corrupted));
    }
    for q in &questions {
        let q_channel = match cfg.question_rate_spread {
            None => channel.clone(),
            Some((lo, hi)) => {
                let label = format!("rate:{}", q.id);
                let mut rate_rng =
                    ChaCha8Rng::seed_from_u64(seeding::derive(channel.seed, &label));
                let target = if hi > lo { rate_rng.random_range(lo..hi) } else { lo };
                channel.scaled(target / channel.nominal_rate())
            }
        };
        let stream = seeding::derive(channel.seed, &q.id);
        let (corrupted, _) = corrupt_transcript(&q.tokens, &q_channel, stream);
        transcripts.push((q.id.clone(), corrupted));
    }

    Ok(CorpusBuild {
        meta: CorpusMeta {
            format_version: CORPUS_FORMAT_VERSION,
            gen: cfg.clone(),
            vocab,
            featurizer,
            channel,
        },
        passages,
        questions,
        transcripts,
    })
}

fn sample_oov(cfg: &CorpusGenConfig, vocab: &VocabLayout) -> BTreeSet<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, "oov"));
    let k = (cfg.oov_entity_fraction * vocab.entity_count as f64).floor() as usize;
    sample_distinct(
        &mut rng,
        vocab.entity_start,
        vocab.entity_start + vocab.entity_count,
        k,
    )
    .into_iter()
    .collect()
}

fn sample_topics(cfg: &CorpusGenConfig, vocab: &VocabLayout) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, "topics"));
    (0..cfg.num_topics)
        .map(|_| {
            sample_distinct(
                &mut rng,
                vocab.content_start,
                vocab.content_start + vocab.content_count,
                cfg.topic_core_size,
            )
        })
        .collect()
}

fn topic_token<R: Rng>(rng: &mut R, cfg: &CorpusGenConfig, vocab: &VocabLayout, core: &[u32]) -> u32 {
    if rng.random::<f64>() < cfg.topic_core_weight {
        core[rng.random_range(0..core.len())]
    } else {
        rng.random_range(vocab.content_start..vocab.content_start + vocab.content_count)
    }
}

/// The answer inside each passage: token span and the entities in it.
struct Answer {
    start_token: usize,
    entities: Vec<u32>,
}

fn sample_passages(
    cfg: &CorpusGenConfig,
    vocab: &VocabLayout,
    topics: &[Vec<u32>],
) -> (Vec<Passage>, Vec<Answer>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, "passages"));
    let mut passages = Vec::with_capacity(cfg.num_passages);
    let mut answers = Vec::with_capacity(cfg.num_passages);
    for i in 0..cfg.num_passages {
        let topic = rng.random_range(0..topics.len());
        let core = &topics[topic];
        let len = rng.random_range(cfg.passage_len.0..=cfg.passage_len.1);
        let mut tokens: Vec<u32> = (0..len)
            .map(|_| topic_token(&mut rng, cfg, vocab, core))
            .collect();

        let entities = sample_distinct(
            &mut rng,
            vocab.entity_start,
            vocab.entity_start + vocab.entity_count,
            cfg.entities_per_passage,
        );
        let start_token = rng.random_range(0..=len - cfg.entities_per_passage);
        tokens[start_token..start_token + cfg.entities_per_passage].copy_from_slice(&entities);

        passages.push(Passage {
            id: format!("p-{i:04}"),
            tokens,
            topic: topic as u32,
            speaker: rng.random_range(0..cfg.passage_speakers),
            duration_s: cfg.duration_s,
        });
        answers.push(Answer {
            start_token,
            entities,
        });
    }
    (passages, answers)
}

fn sample_questions(
    cfg: &CorpusGenConfig,
    topics: &[Vec<u32>],
    passages: &[Passage],
    answers: &[Answer],
) -> Vec<Question> {
    let vocab = cfg.vocab();
    let mut questions = Vec::new();
    let mut speaker_base = cfg.passage_speakers;
    for (split_idx, split) in Split::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive_n(
            cfg.seed,
            "questions",
            split_idx as u64,
        ));
        let pool = cfg.question_speakers[split_idx];
        for i in 0..cfg.num_questions[split_idx] {
            let gold = rng.random_range(0..passages.len());
            let passage = &passages[gold];
            let answer = &answers[gold];
            let core = &topics[passage.topic as usize];

            let len = rng.random_range(cfg.question_len.0..=cfg.question_len.1);
            let mut tokens: Vec<u32> = (0..len)
                .map(|_| topic_token(&mut rng, cfg, &vocab, core))
                .collect();

            let mention: Vec<u32> = {
                let picks = sample_distinct(&mut rng, 0, answer.entities.len() as u32, cfg.question_entities);
                picks.iter().map(|&i| answer.entities[i as usize]).collect()
            };
            let positions = sample_distinct(&mut rng, 0, len as u32, cfg.question_entities);
            let mut placed: Vec<(u32, u32)> =
                positions.into_iter().zip(mention.iter().copied()).collect();
            placed.sort_unstable();
            for &(pos, ent) in &placed {
                tokens[pos as usize] = ent;
            }

            let token_s = passage.duration_s / passage.tokens.len() as f64;
            let span = (
                answer.start_token as f64 * token_s,
                (answer.start_token + cfg.entities_per_passage) as f64 * token_s,
            );

            questions.push(Question {
                id: format!("q-{}-{i:04}", split.name()),
                tokens,
                gold_passage_id: passage.id.clone(),
                answer_tokens: placed.iter().map(|&(_, e)| e).collect(),
                answer_span_s: span,
                speaker: speaker_base + rng.random_range(0..pool),
                split,
            });
        }
        speaker_base += pool;
    }
    questions
}

/// Seconds-scale corpus for tests elsewhere in the crate.
#[cfg(test)]
pub(crate) fn tiny_corpus_config(seed: u64) -> CorpusGenConfig {
    CorpusGenConfig {
        seed,
        num_passages: 40,
        num_questions: [24, 8, 8],
        content_vocab: 60,
        entity_vocab: 24,
        num_topics: 6,
        topic_core_size: 10,
        passage_len: (8, 14),
        question_len: (5, 8),
        frames_per_token: 3,
        feature_dim: 6,
        ..CorpusGenConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{wer, Corpus};

    use super::tiny_corpus_config as tiny_cfg;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&tiny_cfg(7)).unwrap();
        let b = generate_corpus(&tiny_cfg(7)).unwrap();
        assert_eq!(a.passages, b.passages);
        assert_eq!(a.questions, b.questions);
        assert_eq!(a.transcripts, b.transcripts);
        let c = generate_corpus(&tiny_cfg(8)).unwrap();
        assert_ne!(a.passages, c.passages);
    }

    #[test]
    fn structure_matches_configuration() {
        let cfg = tiny_cfg(3);
        let built = generate_corpus(&cfg).unwrap();
        let vocab = cfg.vocab();

        assert_eq!(built.passages.len(), cfg.num_passages);
        assert_eq!(built.questions.len(), cfg.num_questions.iter().sum::<usize>());
        assert_eq!(
            built.transcripts.len(),
            built.passages.len() + built.questions.len()
        );

        for p in &built.passages {
            assert!(p.tokens.len() >= cfg.passage_len.0 && p.tokens.len() <= cfg.passage_len.1);
            let entity_count = p.tokens.iter().filter(|&&t| vocab.is_entity(t)).count();
            assert!(entity_count >= cfg.entities_per_passage);
            assert!(p.tokens.iter().all(|&t| t != vocab.unk_id && t < vocab.size()));
        }

        for q in &built.questions {
            let gold = built
                .passages
                .iter()
                .find(|p| p.id == q.gold_passage_id)
                .expect("gold passage exists");
            assert_eq!(q.answer_tokens.len(), cfg.question_entities);
            for t in &q.answer_tokens {
                assert!(vocab.is_entity(*t));
                assert!(gold.tokens.contains(t), "answer token in gold passage");
                assert!(q.tokens.contains(t), "answer token mentioned in question");
            }
            assert!(q.answer_span_s.0 >= 0.0);
            assert!(q.answer_span_s.0 < q.answer_span_s.1);
            assert!(q.answer_span_s.1 <= gold.duration_s + 1e-9);
        }

        let oov = &built.meta.channel.oov_ids;
        assert_eq!(
            oov.len(),
            (cfg.oov_entity_fraction * cfg.entity_vocab as f64).floor() as usize
        );
        assert!(oov.iter().all(|&t| vocab.is_entity(t)));
    }

    #[test]
    fn split_speaker_pools_are_disjoint() {
        let built = generate_corpus(&tiny_cfg(5)).unwrap();
        let cfg = &built.meta.gen;
        let mut seen: Vec<BTreeSet<u32>> = Vec::new();
        for split in Split::ALL {
            let speakers: BTreeSet<u32> = built
                .questions
                .iter()
                .filter(|q| q.split == split)
                .map(|q| q.speaker)
                .collect();
            assert!(speakers.iter().all(|&s| s >= cfg.passage_speakers));
            for earlier in &seen {
                assert!(earlier.is_disjoint(&speakers));
            }
            seen.push(speakers);
        }
    }

    #[test]
    fn transcript_error_rate_tracks_the_nominal_rate() {
        let built = generate_corpus(&tiny_cfg(11)).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for p in &built.passages {
            let (id, transcript) = built
                .transcripts
                .iter()
                .find(|(id, _)| id == &p.id)
                .expect("transcript present");
            assert_eq!(id, &p.id);
            total += wer(&p.tokens, transcript).unwrap();
            n += 1;
        }
        let mean = total / n as f64;
        let nominal = built.meta.channel.nominal_rate();
        assert!(
            (mean - nominal).abs() < 0.08,
            "mean transcript wer {mean} vs nominal {nominal}"
        );
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let built = generate_corpus(&tiny_cfg(2)).unwrap();
        built.save(dir.path()).unwrap();

        let corpus = Corpus::load(dir.path()).unwrap();
        assert_eq!(corpus.passages, built.passages);
        assert_eq!(corpus.questions, built.questions);
        assert_eq!(corpus.questions_in(Split::Dev).len(), 8);

        let p0 = &corpus.passages[0];
        let frames = corpus.frames(&p0.id).unwrap();
        assert_eq!(
            frames.shape(),
            &[
                p0.tokens.len() * corpus.meta.featurizer.frames_per_token,
                corpus.meta.featurizer.feature_dim
            ]
        );
        let t = corpus.transcript(&p0.id).unwrap();
        let expected = &built
            .transcripts
            .iter()
            .find(|(id, _)| id == &p0.id)
            .unwrap()
            .1;
        assert_eq!(&t, expected);

        // Saving into the same directory again is refused.
        assert!(built.save(dir.path()).is_err());
    }

    #[test]
    fn missing_files_are_reported_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let built = generate_corpus(&tiny_cfg(2)).unwrap();
        built.save(dir.path()).unwrap();
        let victim = dir.path().join("features").join("p-0003.bin");
        std::fs::remove_file(&victim).unwrap();
        match Corpus::load(dir.path()) {
            Err(Error::MissingIds { missing, .. }) => {
                assert_eq!(missing, vec!["features/p-0003.bin".to_string()]);
            }
            other => panic!("expected MissingIds, got {other:?}"),
        }
    }

    #[test]
    fn question_rate_spread_varies_noise_per_question() {
        let mut cfg = tiny_cfg(9);
        cfg.num_questions = [48, 8, 8];
        let base = generate_corpus(&cfg).unwrap();
        cfg.question_rate_spread = Some((0.0, 0.8));
        let spread = generate_corpus(&cfg).unwrap();
        let again = generate_corpus(&cfg).unwrap();

        assert_eq!(spread.transcripts, again.transcripts);
        // Passage transcripts keep the base channel.
        let n = spread.passages.len();
        assert_eq!(spread.transcripts[..n], base.transcripts[..n]);

        let rates: Vec<f64> = spread
            .questions
            .iter()
            .map(|q| {
                let (_, t) = spread
                    .transcripts
                    .iter()
                    .find(|(id, _)| id == &q.id)
                    .unwrap();
                wer(&q.tokens, t).unwrap()
            })
            .collect();
        let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = rates.iter().copied().fold(0.0, f64::max);
        assert!(lo < 0.15, "calmest question still at WER {lo}");
        assert!(hi > 0.5, "noisiest question only at WER {hi}");
    }

    #[test]
    fn question_rate_spread_validation() {
        let mut cfg = tiny_cfg(1);
        cfg.question_rate_spread = Some((0.5, 0.3));
        assert!(cfg.validate().is_err());
        cfg.question_rate_spread = Some((0.0, 1.5));
        assert!(cfg.validate().is_err());
        cfg.question_rate_spread = Some((0.0, 0.8));
        assert!(cfg.validate().is_ok());
        cfg.channel = ChannelRates {
            sub_rate: 0.0,
            del_rate: 0.0,
            ins_rate: 0.0,
        };
        assert!(cfg.validate().is_err());
    }
}
