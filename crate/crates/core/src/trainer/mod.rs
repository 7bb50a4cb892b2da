//! Training loops for the transcript teacher and the frame student.
//!
//! Both models train on in-batch negatives over (question, gold passage)
//! pairs; the student additionally aligns its embeddings with a frozen
//! teacher's through the weighted cross-model NLL terms. Model selection is
//! by top-K retrieval accuracy on the dev split, evaluated against the full
//! passage archive.

pub mod adam;
pub mod checkpoint;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{
    load_checkpoint, log_path, manifest_path, params_path, save_checkpoint, sha256_hex,
    CheckpointManifest,
};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::encoders::{EncoderInput, Modality, ModelConfig, RetrieverModel};
use crate::error::{Error, Result};
use crate::losses::{total_loss_terms, DistillWeights, TeacherBatch};
use crate::numerics::{Tape, Tensor};
use crate::retrieval::PassageIndex;
use crate::seeding;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// At least 2: every other in-batch passage serves as a negative.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub epochs: u32,
    /// Weight of the student-question/teacher-passage loss term.
    pub alpha: f64,
    /// Weight of the teacher-question/student-passage loss term.
    pub beta: f64,
    /// Drives batch shuffling only; model init has its own seed.
    pub seed: u64,
    /// Steps between dev evaluations; 0 evaluates at each epoch end.
    pub eval_every: u64,
    /// Optional linear decay to zero ending at this step; constant rate
    /// after warmup otherwise.
    pub decay_end: Option<u64>,
    pub clip_norm: f64,
    /// Retrieval depth for dev model selection.
    pub eval_k: usize,
}

impl TrainConfig {
    /// Full-scale transcript-teacher settings.
    pub fn paper_teacher() -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            learning_rate: 4e-5,
            warmup_steps: 100,
            epochs: 100,
            alpha: 0.0,
            beta: 0.0,
            seed: 0,
            eval_every: 0,
            decay_end: None,
            clip_norm: 1.0,
            eval_k: 20,
        }
    }

    /// Full-scale student settings.
    pub fn paper_student() -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-4,
            warmup_steps: 500,
            alpha: 0.5,
            beta: 0.5,
            ..TrainConfig::paper_teacher()
        }
    }

    /// Desk-scale teacher settings; minutes on a laptop.
    pub fn desk_teacher() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_steps: 50,
            epochs: 30,
            ..TrainConfig::paper_teacher()
        }
    }

    /// Desk-scale student settings.
    pub fn desk_student() -> TrainConfig {
        TrainConfig {
            alpha: 0.5,
            beta: 0.5,
            ..TrainConfig::desk_teacher()
        }
    }

    pub fn weights(&self) -> DistillWeights {
        DistillWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 for in-batch negatives".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if self.eval_k == 0 {
            return Err(Error::Config("eval_k must be at least 1".into()));
        }
        if let Some(end) = self.decay_end {
            if end <= self.warmup_steps {
                return Err(Error::Config(format!(
                    "decay_end {end} must come after warmup_steps {}",
                    self.warmup_steps
                )));
            }
        }
        self.weights().validate()
    }
}

/// Learning rate at a given optimizer step: linear ramp from zero over the
/// warmup, then constant, with an optional linear decay to zero.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let lr = cfg.learning_rate;
    let warm = cfg.warmup_steps;
    let base = if step >= warm {
        lr
    } else {
        lr * step as f64 / warm as f64
    };
    match cfg.decay_end {
        Some(end) if step > warm => {
            if step >= end {
                0.0
            } else {
                base * (end - step) as f64 / (end - warm) as f64
            }
        }
        _ => base,
    }
}

/// One line of the training log; optimizer steps carry loss terms, dev
/// evaluations carry the metric.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd_sq_tp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd_tq_sp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_topk: Option<f64>,
}

#[derive(Debug)]
pub struct TrainRun {
    /// Parameters restored to the best dev checkpoint.
    pub model: RetrieverModel,
    pub best_step: u64,
    pub best_dev_topk: f64,
    pub final_step: u64,
    pub log: Vec<LogRecord>,
}

pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in log {
        let line =
            serde_json::to_string(rec).map_err(|e| Error::format(path, e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    #[derive(Serialize)]
    struct Pair<'a> {
        model: &'a ModelConfig,
        train: &'a TrainConfig,
    }
    let body = serde_json::to_string(&Pair { model, train }).expect("config serializes");
    sha256_hex(body.as_bytes())
}

/// Model input for one utterance, resolved once so the training loop does
/// no file IO.
enum PreparedInput {
    Tokens(Vec<u32>),
    Frames(Tensor),
}

impl PreparedInput {
    fn as_input<'a>(&'a self, utterance: &'a str) -> EncoderInput<'a> {
        match self {
            PreparedInput::Tokens(tokens) => EncoderInput::Tokens { tokens, utterance },
            PreparedInput::Frames(frames) => EncoderInput::Frames { frames, utterance },
        }
    }
}

fn prepare(corpus: &Corpus, modality: Modality, id: &str) -> Result<PreparedInput> {
    match modality {
        Modality::Tokens { .. } => Ok(PreparedInput::Tokens(
            corpus.transcript_for_encoding(id)?,
        )),
        Modality::Frames { .. } => Ok(PreparedInput::Frames(corpus.frames(id)?)),
    }
}

/// Embed every passage with the model's own modality (transcripts for
/// token models, frame features otherwise), in `corpus.passages` order.
pub fn embed_passages(
    model: &RetrieverModel,
    corpus: &Corpus,
) -> Result<Vec<(String, Tensor)>> {
    check_vocab(corpus, &model.config)?;
    corpus
        .passages
        .par_iter()
        .map(|p| {
            let input = prepare(corpus, model.config.modality, &p.id)?;
            Ok((p.id.clone(), model.embed_passage(&input.as_input(&p.id))?))
        })
        .collect()
}

/// Embed one question by id with the model's own modality.
pub fn embed_question(model: &RetrieverModel, corpus: &Corpus, id: &str) -> Result<Tensor> {
    check_vocab(corpus, &model.config)?;
    let q = corpus.question(id)?;
    let input = prepare(corpus, model.config.modality, &q.id)?;
    model.embed_question(&input.as_input(&q.id))
}

struct TrainItem {
    qid: String,
    question: PreparedInput,
    gold: usize,
}

struct DevItem {
    qid: String,
    question: PreparedInput,
    gold_id: String,
}

/// Top-K retrieval accuracy of `model` over the full prepared archive.
fn dev_accuracy(
    model: &RetrieverModel,
    archive: &[(String, PreparedInput)],
    dev: &[DevItem],
    k: usize,
) -> Result<f64> {
    let entries: Vec<(String, Tensor)> = archive
        .par_iter()
        .map(|(id, input)| Ok((id.clone(), model.embed_passage(&input.as_input(id))?)))
        .collect::<Result<_>>()?;
    let index = PassageIndex::build(&model.fingerprint(), entries)?;
    let hits: Vec<bool> = dev
        .par_iter()
        .map(|item| {
            let v = model.embed_question(&item.question.as_input(&item.qid))?;
            let found = index.search(&v, k)?.iter().any(|h| h.id == item.gold_id);
            Ok(found)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / dev.len() as f64)
}

fn stack_embeds(rows: &[&Tensor]) -> Result<Tensor> {
    let d = rows[0].numel();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.numel() != d {
            return Err(Error::Dim("teacher embeddings disagree on width".into()));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::matrix(rows.len(), d, data)
}

fn snapshot(model: &RetrieverModel) -> Vec<Tensor> {
    model.store.iter().map(|(_, p)| p.tensor.clone()).collect()
}

fn restore(model: &mut RetrieverModel, snap: &[Tensor]) {
    let ids: Vec<_> = model.store.ids();
    for (id, t) in ids.into_iter().zip(snap) {
        model.store.get_mut(id).tensor = t.clone();
    }
}

struct Task<'a> {
    model: RetrieverModel,
    cfg: &'a TrainConfig,
    weights: DistillWeights,
    archive: Vec<(String, PreparedInput)>,
    train: Vec<TrainItem>,
    dev: Vec<DevItem>,
    /// Per-train-item teacher embeddings (questions, gold passages).
    teacher: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

fn run_training(task: Task) -> Result<TrainRun> {
    let Task {
        mut model,
        cfg,
        weights,
        archive,
        train,
        dev,
        teacher,
    } = task;

    if train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training questions",
            cfg.batch_size,
            train.len()
        )));
    }
    if dev.is_empty() {
        return Err(Error::EmptyInput("dev questions for model selection".into()));
    }

    let mut opt = Adam::new();
    let mut log = Vec::new();
    let mut step: u64 = 0;
    let mut best: Option<(f64, u64, Vec<Tensor>)> = None;

    let evaluate = |model: &RetrieverModel,
                        step: u64,
                        log: &mut Vec<LogRecord>,
                        best: &mut Option<(f64, u64, Vec<Tensor>)>|
     -> Result<()> {
        let acc = dev_accuracy(model, &archive, &dev, cfg.eval_k)?;
        log.push(LogRecord {
            step,
            lr: None,
            loss: None,
            nll: None,
            kd_sq_tp: None,
            kd_tq_sp: None,
            dev_topk: Some(acc),
        });
        // Strict improvement required, so ties keep the earliest checkpoint.
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            *best = Some((acc, step, snapshot(model)));
        }
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeding::derive_n(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < cfg.batch_size {
                break;
            }
            step += 1;
            let lr = lr_schedule(step, cfg);

            let mut tape = Tape::new();
            let mut qv = Vec::with_capacity(batch.len());
            let mut pv = Vec::with_capacity(batch.len());
            for &i in batch {
                let item = &train[i];
                qv.push(
                    model.encode_question(&mut tape, &item.question.as_input(&item.qid))?,
                );
                let (pid, pinput) = &archive[item.gold];
                pv.push(model.encode_passage(&mut tape, &pinput.as_input(pid))?);
            }
            let q = tape.stack_rows(&qv)?;
            let p = tape.stack_rows(&pv)?;

            let teacher_batch = match &teacher {
                Some((tq, tp)) => Some(TeacherBatch {
                    questions: stack_embeds(
                        &batch.iter().map(|&i| &tq[i]).collect::<Vec<_>>(),
                    )?,
                    passages: stack_embeds(
                        &batch.iter().map(|&i| &tp[i]).collect::<Vec<_>>(),
                    )?,
                }),
                None => None,
            };

            let terms = total_loss_terms(&mut tape, q, p, teacher_batch.as_ref(), weights)?;
            let loss = tape.value(terms.total).item()?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }

            let mut grads = tape.backward(terms.total)?;
            if !grads.global_norm().is_finite() {
                return Err(Error::Diverged { step });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut model.store, &grads, lr);

            log.push(LogRecord {
                step,
                lr: Some(lr),
                loss: Some(loss),
                nll: Some(tape.value(terms.nll).item()?),
                kd_sq_tp: terms.sq_tp.map(|v| tape.value(v).item()).transpose()?,
                kd_tq_sp: terms.tq_sp.map(|v| tape.value(v).item()).transpose()?,
                dev_topk: None,
            });

            if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every) {
                evaluate(&model, step, &mut log, &mut best)?;
            }
        }

        if cfg.eval_every == 0 {
            evaluate(&model, step, &mut log, &mut best)?;
        }
    }

    if best.is_none() {
        evaluate(&model, step, &mut log, &mut best)?;
    }
    let (best_dev_topk, best_step, snap) = best.expect("at least one evaluation");
    restore(&mut model, &snap);

    Ok(TrainRun {
        model,
        best_step,
        best_dev_topk,
        final_step: step,
        log,
    })
}

fn check_vocab(corpus: &Corpus, model_cfg: &ModelConfig) -> Result<()> {
    if let Modality::Tokens { vocab_size } = model_cfg.modality {
        let need = corpus.meta.vocab.size();
        if vocab_size < need {
            return Err(Error::Config(format!(
                "model vocabulary {vocab_size} is smaller than the corpus vocabulary {need}"
            )));
        }
    }
    if let Modality::Frames { feature_dim } = model_cfg.modality {
        let have = corpus.meta.featurizer.feature_dim;
        if feature_dim != have {
            return Err(Error::Config(format!(
                "model expects {feature_dim}-dim frames, corpus provides {have}"
            )));
        }
    }
    Ok(())
}

fn prepare_archive(
    corpus: &Corpus,
    modality: Modality,
) -> Result<Vec<(String, PreparedInput)>> {
    corpus
        .passages
        .par_iter()
        .map(|p| Ok((p.id.clone(), prepare(corpus, modality, &p.id)?)))
        .collect()
}

fn prepare_questions(
    corpus: &Corpus,
    modality: Modality,
    split: Split,
    archive: &[(String, PreparedInput)],
) -> Result<Vec<TrainItem>> {
    let by_id: std::collections::HashMap<&str, usize> = archive
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.as_str(), i))
        .collect();
    corpus
        .questions_in(split)
        .par_iter()
        .map(|q| {
            let gold = *by_id.get(q.gold_passage_id.as_str()).ok_or_else(|| {
                Error::MissingIds {
                    context: format!("gold passage for {}", q.id),
                    missing: vec![q.gold_passage_id.clone()],
                }
            })?;
            Ok(TrainItem {
                qid: q.id.clone(),
                question: prepare(corpus, modality, &q.id)?,
                gold,
            })
        })
        .collect()
}

fn dev_items(corpus: &Corpus, modality: Modality) -> Result<Vec<DevItem>> {
    corpus
        .questions_in(Split::Dev)
        .par_iter()
        .map(|q| {
            Ok(DevItem {
                qid: q.id.clone(),
                question: prepare(corpus, modality, &q.id)?,
                gold_id: q.gold_passage_id.clone(),
            })
        })
        .collect()
}

/// Trains the transcript teacher: both towers read channel-corrupted
/// transcripts, loss is plain in-batch NLL.
pub fn train_teacher(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.alpha != 0.0 || cfg.beta != 0.0 {
        return Err(Error::Config(
            "teacher training does not distill; set alpha and beta to 0".into(),
        ));
    }
    if !matches!(model_cfg.modality, Modality::Tokens { .. }) {
        return Err(Error::Config(
            "the teacher reads transcripts; use the token modality".into(),
        ));
    }
    check_vocab(corpus, model_cfg)?;

    let model = RetrieverModel::new(model_cfg.clone())?;
    let archive = prepare_archive(corpus, model_cfg.modality)?;
    let train = prepare_questions(corpus, model_cfg.modality, Split::Train, &archive)?;
    let dev = dev_items(corpus, model_cfg.modality)?;
    run_training(Task {
        model,
        cfg,
        weights: DistillWeights::NONE,
        archive,
        train,
        dev,
        teacher: None,
    })
}

/// Trains a student with the distillation objective. The student usually
/// reads frames; a token-modality student reproduces the cascaded setup
/// where both models read corrupted transcripts. The teacher always reads
/// transcripts and must be frozen; with alpha = beta = 0 it is unused and
/// may be omitted.
pub fn train_student(
    corpus: &Corpus,
    teacher: Option<&RetrieverModel>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    check_vocab(corpus, model_cfg)?;
    let weights = cfg.weights();

    let teacher = if weights.uses_teacher() {
        let t = teacher.ok_or_else(|| {
            Error::Config(format!(
                "distillation weights alpha={} beta={} require a teacher model",
                cfg.alpha, cfg.beta
            ))
        })?;
        if !t.is_frozen() {
            return Err(Error::Config(
                "teacher must be frozen before distillation".into(),
            ));
        }
        if !matches!(t.config.modality, Modality::Tokens { .. }) {
            return Err(Error::Config(
                "the teacher must be a transcript model".into(),
            ));
        }
        if t.config.d_model != model_cfg.d_model {
            return Err(Error::Config(format!(
                "teacher width {} does not match student width {}",
                t.config.d_model, model_cfg.d_model
            )));
        }
        Some(t)
    } else {
        None
    };

    let model = RetrieverModel::new(model_cfg.clone())?;
    let archive = prepare_archive(corpus, model_cfg.modality)?;
    let train = prepare_questions(corpus, model_cfg.modality, Split::Train, &archive)?;
    let dev = dev_items(corpus, model_cfg.modality)?;

    // The teacher is frozen, so its embeddings are fixed for the whole run;
    // compute them once per training item.
    let teacher_embeds = match teacher {
        Some(t) => {
            let qs: Vec<Tensor> = train
                .par_iter()
                .map(|item| {
                    let tokens = corpus.transcript_for_encoding(&item.qid)?;
                    t.embed_question(&EncoderInput::Tokens {
                        tokens: &tokens,
                        utterance: &item.qid,
                    })
                })
                .collect::<Result<_>>()?;
            let ps: Vec<Tensor> = train
                .par_iter()
                .map(|item| {
                    let pid = &archive[item.gold].0;
                    let tokens = corpus.transcript_for_encoding(pid)?;
                    t.embed_passage(&EncoderInput::Tokens {
                        tokens: &tokens,
                        utterance: pid,
                    })
                })
                .collect::<Result<_>>()?;
            Some((qs, ps))
        }
        None => None,
    };

    run_training(Task {
        model,
        cfg,
        weights,
        archive,
        train,
        dev,
        teacher: teacher_embeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generator::{generate_corpus, tiny_corpus_config};

    fn tiny_token_model(seed: u64, vocab_size: u32) -> ModelConfig {
        ModelConfig {
            modality: Modality::Tokens { vocab_size },
            d_model: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 8,
            t_max: 64,
            conv_hidden: 6,
            conv1: (4, 4),
            conv2: (3, 3),
            eps: 1e-5,
            init_seed: seed,
            use_positions: true,
        }
    }

    fn tiny_frame_model(seed: u64, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            modality: Modality::Frames { feature_dim },
            ..tiny_token_model(seed, 0)
        }
    }

    fn tiny_train(epochs: u32) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: 2e-3,
            warmup_steps: 5,
            epochs,
            alpha: 0.0,
            beta: 0.0,
            seed: 7,
            eval_every: 0,
            decay_end: None,
            clip_norm: 1.0,
            eval_k: 2,
        }
    }

    fn loaded_tiny_corpus(dir: &Path) -> Corpus {
        let build = generate_corpus(&tiny_corpus_config(5)).unwrap();
        build.save(dir).unwrap();
        Corpus::load(dir).unwrap()
    }

    #[test]
    fn schedule_ramps_then_holds_then_optionally_decays() {
        let mut cfg = tiny_train(1);
        cfg.learning_rate = 1.0;
        cfg.warmup_steps = 10;
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(5, &cfg), 0.5);
        assert_eq!(lr_schedule(10, &cfg), 1.0);
        assert_eq!(lr_schedule(500, &cfg), 1.0);

        cfg.decay_end = Some(30);
        assert_eq!(lr_schedule(10, &cfg), 1.0);
        assert_eq!(lr_schedule(20, &cfg), 0.5);
        assert_eq!(lr_schedule(30, &cfg), 0.0);
        assert_eq!(lr_schedule(31, &cfg), 0.0);

        cfg.warmup_steps = 0;
        cfg.decay_end = None;
        assert_eq!(lr_schedule(1, &cfg), 1.0);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = tiny_train(1);
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_train(1);
        cfg.decay_end = Some(3);
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_train(1);
        cfg.alpha = -1.0;
        assert!(cfg.validate().is_err());

        assert!(tiny_train(1).validate().is_ok());
        assert!(TrainConfig::paper_teacher().validate().is_ok());
        assert!(TrainConfig::paper_student().validate().is_ok());
        assert!(TrainConfig::desk_teacher().validate().is_ok());
        assert!(TrainConfig::desk_student().validate().is_ok());
    }

    #[test]
    fn teacher_smoke_run_learns_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = loaded_tiny_corpus(dir.path());
        let vocab = corpus.meta.vocab.size();
        let model_cfg = tiny_token_model(1, vocab);

        let fresh = RetrieverModel::new(model_cfg.clone()).unwrap();
        let run = train_teacher(&corpus, &model_cfg, &tiny_train(2)).unwrap();

        assert_ne!(run.model.fingerprint(), fresh.fingerprint());
        assert!(run.final_step >= 2);
        assert!(run.best_dev_topk >= 0.0 && run.best_dev_topk <= 1.0);
        let losses: Vec<f64> = run.log.iter().filter_map(|r| r.loss).collect();
        assert_eq!(losses.len() as u64, run.final_step);
        assert!(losses.iter().all(|l| l.is_finite()));
        let evals: Vec<f64> = run.log.iter().filter_map(|r| r.dev_topk).collect();
        assert_eq!(evals.len(), 2);
        assert_eq!(
            run.best_dev_topk,
            evals.iter().cloned().fold(f64::MIN, f64::max)
        );

        let again = train_teacher(&corpus, &model_cfg, &tiny_train(2)).unwrap();
        assert_eq!(run.model.fingerprint(), again.model.fingerprint());
        assert_eq!(run.log, again.log);
    }

    #[test]
    fn teacher_rejects_distillation_weights_and_frame_modality() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = loaded_tiny_corpus(dir.path());
        let vocab = corpus.meta.vocab.size();

        let mut cfg = tiny_train(1);
        cfg.alpha = 0.5;
        assert!(matches!(
            train_teacher(&corpus, &tiny_token_model(1, vocab), &cfg),
            Err(Error::Config(_))
        ));

        assert!(matches!(
            train_teacher(&corpus, &tiny_frame_model(1, 6), &tiny_train(1)),
            Err(Error::Config(_))
        ));

        let small_vocab = tiny_token_model(1, vocab - 1);
        assert!(matches!(
            train_teacher(&corpus, &small_vocab, &tiny_train(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn student_distills_without_touching_the_teacher() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = loaded_tiny_corpus(dir.path());
        let vocab = corpus.meta.vocab.size();
        let dim = corpus.meta.featurizer.feature_dim;

        let mut teacher = train_teacher(&corpus, &tiny_token_model(1, vocab), &tiny_train(2))
            .unwrap()
            .model;

        // Unfrozen teacher is rejected up front.
        let mut cfg = tiny_train(1);
        cfg.alpha = 0.5;
        cfg.beta = 0.5;
        let student_cfg = tiny_frame_model(2, dim);
        assert!(matches!(
            train_student(&corpus, Some(&teacher), &student_cfg, &cfg),
            Err(Error::Config(_))
        ));

        teacher.freeze();
        let teacher_fp = teacher.fingerprint();
        let run = train_student(&corpus, Some(&teacher), &student_cfg, &cfg).unwrap();
        assert_eq!(teacher.fingerprint(), teacher_fp);

        let kd_terms: Vec<&LogRecord> =
            run.log.iter().filter(|r| r.kd_sq_tp.is_some()).collect();
        assert!(!kd_terms.is_empty());
        for r in kd_terms {
            assert!(r.kd_tq_sp.unwrap().is_finite());
            // Every NLL term is non-negative, so the weighted total cannot
            // fall below the plain in-batch term.
            assert!(r.loss.unwrap() >= r.nll.unwrap() - 1e-12);
        }

        // Missing teacher with nonzero weights is a config error.
        assert!(matches!(
            train_student(&corpus, None, &student_cfg, &cfg),
            Err(Error::Config(_))
        ));

        // Width mismatch is caught before any training.
        let mut wide = student_cfg.clone();
        wide.d_model = 16;
        wide.heads = 2;
        assert!(matches!(
            train_student(&corpus, Some(&teacher), &wide, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn student_without_distillation_needs_no_teacher() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = loaded_tiny_corpus(dir.path());
        let dim = corpus.meta.featurizer.feature_dim;
        let run =
            train_student(&corpus, None, &tiny_frame_model(2, dim), &tiny_train(1)).unwrap();
        assert!(run.log.iter().all(|r| r.kd_sq_tp.is_none()));
        assert!(run.log.iter().any(|r| r.loss.is_some()));
    }

    #[test]
    fn best_checkpoint_rule_restores_the_argmax() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = loaded_tiny_corpus(dir.path());
        let vocab = corpus.meta.vocab.size();
        let run = train_teacher(&corpus, &tiny_token_model(3, vocab), &tiny_train(3)).unwrap();

        let evals: Vec<(u64, f64)> = run
            .log
            .iter()
            .filter_map(|r| r.dev_topk.map(|d| (r.step, d)))
            .collect();
        let max = evals.iter().map(|(_, d)| *d).fold(f64::MIN, f64::max);
        assert_eq!(run.best_dev_topk, max);
        // Earliest step among the maxima wins.
        let earliest = evals.iter().find(|(_, d)| *d == max).unwrap().0;
        assert_eq!(run.best_step, earliest);
    }

    #[test]
    fn divergence_reports_the_failing_step() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = loaded_tiny_corpus(dir.path());
        let vocab = corpus.meta.vocab.size();
        let mut model_cfg = tiny_token_model(1, vocab);
        model_cfg.init_seed = 11;

        // A NaN planted in the CLS embedding reaches every question
        // forward, so the very first loss is non-finite.
        let archive = prepare_archive(&corpus, model_cfg.modality).unwrap();
        let train = prepare_questions(&corpus, model_cfg.modality, Split::Train, &archive)
            .unwrap();
        let dev = dev_items(&corpus, model_cfg.modality).unwrap();
        let mut model = RetrieverModel::new(model_cfg).unwrap();
        let id = model.store.lookup("question.cls").unwrap();
        model.store.get_mut(id).tensor.data_mut()[0] = f64::NAN;

        let cfg = tiny_train(1);
        let err = run_training(Task {
            model,
            cfg: &cfg,
            weights: DistillWeights::NONE,
            archive,
            train,
            dev,
            teacher: None,
        })
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1 }));
    }

    #[test]
    fn log_round_trips_through_jsonl() {
        let log = vec![
            LogRecord {
                step: 1,
                lr: Some(0.5),
                loss: Some(1.25),
                nll: Some(1.25),
                kd_sq_tp: None,
                kd_tq_sp: None,
                dev_topk: None,
            },
            LogRecord {
                step: 1,
                lr: None,
                loss: None,
                nll: None,
                kd_sq_tp: None,
                kd_tq_sp: None,
                dev_topk: Some(0.75),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_log(&path, &log).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains("kd_sq_tp"));
        let parsed: Vec<LogRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(parsed, log);
    }

    #[test]
    fn config_hash_tracks_every_field() {
        let m = tiny_token_model(1, 10);
        let t = tiny_train(1);
        let h = config_hash(&m, &t);
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash(&m, &t));

        let mut t2 = t.clone();
        t2.learning_rate *= 2.0;
        assert_ne!(h, config_hash(&m, &t2));

        let mut m2 = m.clone();
        m2.init_seed += 1;
        assert_ne!(h, config_hash(&m2, &t));
    }
}
