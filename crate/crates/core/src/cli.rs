//! The `sounder` command line.
//!
//! One subcommand per pipeline stage. Every artifact-producing subcommand
//! writes a run manifest (command, seed, config hash, tool version) next to
//! its outputs; the manifest's timestamp is the only thing that differs
//! between two runs with identical configuration.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{load_config, RunConfig};
use crate::corpus::{generate_corpus, wer, Corpus, Question, Split};
use crate::encoders::RetrieverModel;
use crate::error::{Error, Result};
use crate::eval::{
    answer_ff1, default_window, span_reader_stub, topk_accuracy, tune_answer_weights,
    wer_bucket_report, AnswerCandidate, AnswerExample, ScoreWeights, TimeSpan,
};
use crate::retrieval::{
    ensemble_scores, tune_ensemble_weights, EnsembleExample, EnsembleWeights, Hit,
    PassageIndex,
};
use crate::trainer::{
    embed_passages, embed_question, load_checkpoint, log_path, save_checkpoint, train_student,
    train_teacher, write_log,
};

/// Candidate spans kept per retrieved passage when reading answers.
const READER_CANDIDATES_PER_PASSAGE: usize = 3;

#[derive(Parser)]
#[command(
    name = "sounder",
    version,
    about = "Dense passage retrieval over spoken archives",
    disable_help_subcommand = true
)]
struct Cli {
    /// Config file; defaults to $SOUNDER_CONFIG when set.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Built-in profile to start from: paper or desk.
    #[arg(long, global = true, value_name = "NAME")]
    profile: Option<String>,

    /// Override one config key, e.g. --set train.student.epochs=5.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed (shorthand for --set seed=N).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic spoken corpus.
    GenCorpus,
    /// Train the transcript teacher and keep its best dev checkpoint.
    TrainTeacher,
    /// Train the frame student, distilling from the teacher by default.
    TrainStudent {
        /// Drop the teacher terms (alpha = beta = 0); no teacher needed.
        #[arg(long)]
        no_distill: bool,
        /// Output directory; defaults to paths.student.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Embed every passage with a trained model and build the exact index.
    Index {
        #[arg(long, value_enum)]
        model: Retriever,
        /// Checkpoint directory; defaults to the model's training dir.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
    /// Rank passages for one question and print the top hits.
    Search {
        #[arg(long, value_enum)]
        model: Retriever,
        /// Question id, e.g. q-test-0001.
        #[arg(long, value_name = "ID")]
        question: String,
        /// Retrieval depth; defaults to the configured k.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
    /// Retrieval accuracy and answer-span quality on one split.
    Eval {
        #[arg(long, value_enum)]
        model: Retriever,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
    /// Tune the teacher+student score interpolation on dev, report test.
    EnsembleTune,
    /// Per-WER-bucket accuracy: cascading teacher vs frame student.
    WerReport {
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Retriever {
    Teacher,
    Student,
}

impl Retriever {
    fn name(self) -> &'static str {
        match self {
            Retriever::Teacher => "teacher",
            Retriever::Student => "student",
        }
    }

    fn default_dir(self, cfg: &RunConfig) -> &Path {
        match self {
            Retriever::Teacher => &cfg.paths.teacher,
            Retriever::Student => &cfg.paths.student,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub profile: String,
    pub seed: u64,
    pub config_hash: String,
    pub tool_version: String,
    /// Seconds since the Unix epoch; the one non-reproducible field.
    pub unix_time: u64,
}

/// Parse argv (including the program name) and execute one subcommand.
/// Returns the text the binary prints on success.
pub fn run<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            return Ok(e.to_string());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };

    let mut overrides: Vec<(String, String)> = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {s}: expected KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let cfg = load_config(cli.config.as_deref(), cli.profile.as_deref(), &overrides)?;

    match cli.command {
        Cmd::GenCorpus => gen_corpus(&cfg),
        Cmd::TrainTeacher => run_train_teacher(&cfg),
        Cmd::TrainStudent { no_distill, out } => run_train_student(&cfg, no_distill, out),
        Cmd::Index { model, checkpoint } => build_index(&cfg, model, checkpoint),
        Cmd::Search {
            model,
            question,
            k,
            checkpoint,
        } => search(&cfg, model, &question, k, checkpoint),
        Cmd::Eval {
            model,
            split,
            checkpoint,
        } => eval(&cfg, model, split.split(), checkpoint),
        Cmd::EnsembleTune => ensemble_tune(&cfg),
        Cmd::WerReport { split } => wer_report(&cfg, split.split()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

fn write_run_manifest(dir: &Path, file: &str, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let unix_time = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = RunManifest {
        command: command.to_string(),
        profile: cfg.profile.clone(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        unix_time,
    };
    write_json(&dir.join(file), &manifest)
}

fn load_frozen_model(dir: &Path) -> Result<RetrieverModel> {
    let (mut model, _) = load_checkpoint(dir)?;
    model.freeze();
    Ok(model)
}

fn load_index_for(cfg: &RunConfig, model: &RetrieverModel, name: &str) -> Result<PassageIndex> {
    let index = PassageIndex::load(&cfg.paths.index, name)?;
    index.check_fingerprint(&model.fingerprint())?;
    Ok(index)
}

fn gen_corpus(cfg: &RunConfig) -> Result<String> {
    let built = generate_corpus(&cfg.corpus_config())?;
    built.save(&cfg.paths.corpus)?;
    write_run_manifest(&cfg.paths.corpus, "run-manifest.json", "gen-corpus", cfg)?;

    let transcripts: BTreeMap<&str, &Vec<u32>> = built
        .transcripts
        .iter()
        .map(|(id, t)| (id.as_str(), t))
        .collect();
    let mut total_wer = 0.0;
    for q in &built.questions {
        total_wer += wer(&q.tokens, transcripts[q.id.as_str()])?;
    }
    Ok(format!(
        "corpus written to {}\n{} passages, {} questions, mean question WER {:.3}",
        cfg.paths.corpus.display(),
        built.passages.len(),
        built.questions.len(),
        total_wer / built.questions.len() as f64
    ))
}

fn training_summary(kind: &str, dir: &Path, run: &crate::trainer::TrainRun) -> String {
    format!(
        "{kind} finished after {} steps; best dev top-k {:.4} at step {}\ncheckpoint written to {}",
        run.final_step,
        run.best_dev_topk,
        run.best_step,
        dir.display()
    )
}

fn run_train_teacher(cfg: &RunConfig) -> Result<String> {
    let corpus = Corpus::load(&cfg.paths.corpus)?;
    let model_cfg = cfg.teacher_model(&corpus.meta.vocab);
    let train_cfg = cfg.teacher_train_config();
    let run = train_teacher(&corpus, &model_cfg, &train_cfg)?;
    let dir = &cfg.paths.teacher;
    save_checkpoint(dir, &run.model, run.best_step, run.best_dev_topk, &cfg.hash())?;
    write_log(&log_path(dir), &run.log)?;
    write_run_manifest(dir, "run-manifest.json", "train-teacher", cfg)?;
    Ok(training_summary("teacher", dir, &run))
}

fn run_train_student(cfg: &RunConfig, no_distill: bool, out: Option<PathBuf>) -> Result<String> {
    let corpus = Corpus::load(&cfg.paths.corpus)?;
    let model_cfg = cfg.student_model(corpus.meta.featurizer.feature_dim);
    let train_cfg = cfg.student_train_config(!no_distill);
    let teacher = if train_cfg.weights().uses_teacher() {
        Some(load_frozen_model(&cfg.paths.teacher)?)
    } else {
        None
    };
    let run = train_student(&corpus, teacher.as_ref(), &model_cfg, &train_cfg)?;
    let dir = out.as_deref().unwrap_or(&cfg.paths.student);
    save_checkpoint(dir, &run.model, run.best_step, run.best_dev_topk, &cfg.hash())?;
    write_log(&log_path(dir), &run.log)?;
    write_run_manifest(dir, "run-manifest.json", "train-student", cfg)?;
    Ok(training_summary("student", dir, &run))
}

fn build_index(cfg: &RunConfig, kind: Retriever, checkpoint: Option<PathBuf>) -> Result<String> {
    let corpus = Corpus::load(&cfg.paths.corpus)?;
    let dir = checkpoint.as_deref().unwrap_or(kind.default_dir(cfg));
    let model = load_frozen_model(dir)?;
    let entries = embed_passages(&model, &corpus)?;
    let index = PassageIndex::build(&model.fingerprint(), entries)?;
    fs::create_dir_all(&cfg.paths.index).map_err(|e| Error::io(&cfg.paths.index, e))?;
    index.save(&cfg.paths.index, kind.name())?;
    write_run_manifest(
        &cfg.paths.index,
        &format!("{}.run.json", kind.name()),
        &format!("index --model {}", kind.name()),
        cfg,
    )?;
    Ok(format!(
        "{} index: {} passages, dimension {}, written to {}",
        kind.name(),
        index.len(),
        index.dim(),
        cfg.paths.index.display()
    ))
}

fn search(
    cfg: &RunConfig,
    kind: Retriever,
    question: &str,
    k: Option<usize>,
    checkpoint: Option<PathBuf>,
) -> Result<String> {
    let corpus = Corpus::load(&cfg.paths.corpus)?;
    let dir = checkpoint.as_deref().unwrap_or(kind.default_dir(cfg));
    let model = load_frozen_model(dir)?;
    let index = load_index_for(cfg, &model, kind.name())?;
    let gold = corpus.question(question)?.gold_passage_id.clone();

    let query = embed_question(&model, &corpus, question)?;
    let hits = index.search(&query, k.unwrap_or(cfg.k))?;
    let mut out = String::new();
    for (rank, hit) in hits.iter().enumerate() {
        let marker = if hit.id == gold { "  <- gold" } else { "" };
        out.push_str(&format!(
            "{:4}  {:>12.6}  {}{marker}\n",
            rank + 1,
            hit.score,
            hit.id
        ));
    }
    Ok(out.trim_end().to_string())
}

/// Ranked hits per question, paired with the answer-selection problem
/// assembled from those hits.
pub type SplitExamples = (Vec<(String, Vec<Hit>)>, Vec<AnswerExample>);

/// Retrieve for every question of a split and assemble each question's
/// answer-selection problem from the top hits' transcripts.
pub fn question_examples(
    corpus: &Corpus,
    model: &RetrieverModel,
    index: &PassageIndex,
    split: Split,
    k: usize,
) -> Result<SplitExamples> {
    let questions = corpus.questions_in(split);
    let vocab = corpus.meta.vocab;
    let per_question: Vec<((String, Vec<Hit>), AnswerExample)> = questions
        .par_iter()
        .map(|q| {
            let query = embed_question(model, corpus, &q.id)?;
            let hits = index.search(&query, k)?;

            let q_transcript = corpus.transcript(&q.id)?;
            let window = default_window(&q_transcript, &vocab);
            let mut candidates = Vec::new();
            for hit in &hits {
                let passage = corpus.passage(&hit.id)?;
                let transcript = corpus.transcript(&hit.id)?;
                for span in span_reader_stub(
                    &transcript,
                    passage.duration_s,
                    &q_transcript,
                    &vocab,
                    window,
                    READER_CANDIDATES_PER_PASSAGE,
                )? {
                    candidates.push(AnswerCandidate {
                        passage_id: hit.id.clone(),
                        span: span.span,
                        span_score: span.score,
                        retriever_score: hit.score,
                    });
                }
            }
            let example = AnswerExample {
                candidates,
                reference: TimeSpan::new(q.answer_span_s.0, q.answer_span_s.1)?,
                gold_passage_id: q.gold_passage_id.clone(),
            };
            Ok(((q.id.clone(), hits), example))
        })
        .collect::<Result<_>>()?;
    Ok(per_question.into_iter().unzip())
}

#[derive(Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: String,
    pub k: usize,
    pub questions: usize,
    pub top_k_accuracy: f64,
    pub span_only_ff1: f64,
    pub tuned_w_retriever: f64,
    pub tuned_w_span: f64,
    /// FF1 the tuned weights reached on dev (the tuning set).
    pub tuned_dev_ff1: f64,
    /// FF1 of the tuned weights on this split.
    pub tuned_ff1: f64,
    pub hits: BTreeMap<String, bool>,
}

fn eval(
    cfg: &RunConfig,
    kind: Retriever,
    split: Split,
    checkpoint: Option<PathBuf>,
) -> Result<String> {
    let corpus = Corpus::load(&cfg.paths.corpus)?;
    let dir = checkpoint.as_deref().unwrap_or(kind.default_dir(cfg));
    let model = load_frozen_model(dir)?;
    let index = load_index_for(cfg, &model, kind.name())?;

    let (results, examples) = question_examples(&corpus, &model, &index, split, cfg.k)?;
    let gold: BTreeMap<String, String> = corpus
        .questions_in(split)
        .iter()
        .map(|q| (q.id.clone(), q.gold_passage_id.clone()))
        .collect();
    let retrieval = topk_accuracy(&results, &gold, cfg.k)?;

    let span_only = answer_ff1(&examples, &ScoreWeights::SPAN_ONLY)?;
    let dev_examples = if split == Split::Dev {
        examples.clone()
    } else {
        question_examples(&corpus, &model, &index, Split::Dev, cfg.k)?.1
    };
    let (weights, tuned_dev) = tune_answer_weights(&dev_examples)?;
    let tuned = answer_ff1(&examples, &weights)?;

    let report = EvalReport {
        model: kind.name().to_string(),
        split: split.name().to_string(),
        k: cfg.k,
        questions: examples.len(),
        top_k_accuracy: retrieval.top_k_accuracy,
        span_only_ff1: span_only,
        tuned_w_retriever: weights.w_retriever,
        tuned_w_span: weights.w_span,
        tuned_dev_ff1: tuned_dev,
        tuned_ff1: tuned,
        hits: retrieval.hits,
    };
    let stem = format!("eval-{}-{}", kind.name(), split.name());
    fs::create_dir_all(&cfg.paths.reports).map_err(|e| Error::io(&cfg.paths.reports, e))?;
    write_json(&cfg.paths.reports.join(format!("{stem}.json")), &report)?;
    write_run_manifest(
        &cfg.paths.reports,
        &format!("{stem}.run.json"),
        &format!("eval --model {} --split {}", kind.name(), split.name()),
        cfg,
    )?;

    Ok(format!(
        "{} on {}: top-{} accuracy {:.4} over {} questions\n\
         answer FF1: span-only {:.4}, tuned ({:.2}, {:.2}) -> {:.4}",
        kind.name(),
        split.name(),
        cfg.k,
        report.top_k_accuracy,
        report.questions,
        report.span_only_ff1,
        report.tuned_w_retriever,
        report.tuned_w_span,
        report.tuned_ff1,
    ))
}

#[derive(Serialize, Deserialize)]
pub struct EnsembleReport {
    pub k: usize,
    pub w_teacher: f64,
    pub w_student: f64,
    pub dev_teacher: f64,
    pub dev_student: f64,
    pub dev_ensemble: f64,
    pub test_teacher: f64,
    pub test_student: f64,
    pub test_ensemble: f64,
}

/// Both models' whole-archive scores for every question of a split.
fn paired_scores(
    corpus: &Corpus,
    teacher: (&RetrieverModel, &PassageIndex),
    student: (&RetrieverModel, &PassageIndex),
    split: Split,
) -> Result<Vec<EnsembleExample>> {
    corpus
        .questions_in(split)
        .par_iter()
        .map(|q| {
            let tq = embed_question(teacher.0, corpus, &q.id)?;
            let sq = embed_question(student.0, corpus, &q.id)?;
            Ok(EnsembleExample {
                a: teacher.1.score_all(&tq)?,
                b: student.1.score_all(&sq)?,
                gold_id: q.gold_passage_id.clone(),
            })
        })
        .collect()
}

fn ensemble_accuracy(examples: &[EnsembleExample], w: EnsembleWeights, k: usize) -> Result<f64> {
    let mut hits = 0usize;
    for ex in examples {
        let combined = ensemble_scores(&ex.a, &ex.b, w)?;
        if combined.top_k(k)?.iter().any(|h| h.id == ex.gold_id) {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

fn ensemble_tune(cfg: &RunConfig) -> Result<String> {
    let corpus = Corpus::load(&cfg.paths.corpus)?;
    let teacher = load_frozen_model(&cfg.paths.teacher)?;
    let student = load_frozen_model(&cfg.paths.student)?;
    let t_index = load_index_for(cfg, &teacher, "teacher")?;
    let s_index = load_index_for(cfg, &student, "student")?;

    let dev = paired_scores(&corpus, (&teacher, &t_index), (&student, &s_index), Split::Dev)?;
    let test = paired_scores(
        &corpus,
        (&teacher, &t_index),
        (&student, &s_index),
        Split::Test,
    )?;
    let (weights, dev_ensemble) = tune_ensemble_weights(&dev, cfg.k)?;

    let teacher_only = EnsembleWeights { w_a: 1.0, w_b: 0.0 };
    let student_only = EnsembleWeights { w_a: 0.0, w_b: 1.0 };
    let report = EnsembleReport {
        k: cfg.k,
        w_teacher: weights.w_a,
        w_student: weights.w_b,
        dev_teacher: ensemble_accuracy(&dev, teacher_only, cfg.k)?,
        dev_student: ensemble_accuracy(&dev, student_only, cfg.k)?,
        dev_ensemble,
        test_teacher: ensemble_accuracy(&test, teacher_only, cfg.k)?,
        test_student: ensemble_accuracy(&test, student_only, cfg.k)?,
        test_ensemble: ensemble_accuracy(&test, weights, cfg.k)?,
    };
    fs::create_dir_all(&cfg.paths.reports).map_err(|e| Error::io(&cfg.paths.reports, e))?;
    write_json(&cfg.paths.reports.join("ensemble.json"), &report)?;
    write_run_manifest(&cfg.paths.reports, "ensemble.run.json", "ensemble-tune", cfg)?;

    Ok(format!(
        "interpolation weights (teacher, student) = ({:.2}, {:.2})\n\
         top-{} accuracy   teacher  student  ensemble\n\
         dev             {:>8.4} {:>8.4}  {:>8.4}\n\
         test            {:>8.4} {:>8.4}  {:>8.4}",
        report.w_teacher,
        report.w_student,
        report.k,
        report.dev_teacher,
        report.dev_student,
        report.dev_ensemble,
        report.test_teacher,
        report.test_student,
        report.test_ensemble,
    ))
}

fn wer_report(cfg: &RunConfig, split: Split) -> Result<String> {
    let corpus = Corpus::load(&cfg.paths.corpus)?;
    let teacher = load_frozen_model(&cfg.paths.teacher)?;
    let student = load_frozen_model(&cfg.paths.student)?;
    let t_index = load_index_for(cfg, &teacher, "teacher")?;
    let s_index = load_index_for(cfg, &student, "student")?;

    let hit_of = |model: &RetrieverModel, index: &PassageIndex, q: &Question| -> Result<bool> {
        let query = embed_question(model, &corpus, &q.id)?;
        Ok(index
            .search(&query, cfg.k)?
            .iter()
            .any(|h| h.id == q.gold_passage_id))
    };
    let rows: Vec<(f64, Vec<bool>)> = corpus
        .questions_in(split)
        .par_iter()
        .map(|q| {
            let rate = wer(&q.tokens, &corpus.transcript(&q.id)?)?;
            let cascading = hit_of(&teacher, &t_index, q)?;
            let end_to_end = hit_of(&student, &s_index, q)?;
            Ok((rate, vec![cascading, end_to_end]))
        })
        .collect::<Result<_>>()?;

    let report = wer_bucket_report(vec!["cascading".into(), "student".into()], &rows)?;
    fs::create_dir_all(&cfg.paths.reports).map_err(|e| Error::io(&cfg.paths.reports, e))?;
    let stem = format!("wer-report-{}", split.name());
    write_json(&cfg.paths.reports.join(format!("{stem}.json")), &report)?;
    for retriever in ["cascading", "student"] {
        let csv = report.to_csv(retriever)?;
        let path = cfg
            .paths
            .reports
            .join(format!("wer-{}-{}.csv", retriever, split.name()));
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    write_run_manifest(
        &cfg.paths.reports,
        &format!("{stem}.run.json"),
        &format!("wer-report --split {}", split.name()),
        cfg,
    )?;
    Ok(report.render().trim_end().to_string())
}
