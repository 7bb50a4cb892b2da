//! Retrieval and answer-span metrics.
//!
//! Retrieval quality is top-K accuracy against the single gold passage per
//! question. Answer quality is frame-level F1 over time spans, credited
//! only when the predicted span lies on the gold passage.

pub mod reader;
pub mod wer_report;

pub use reader::{default_window, span_reader_stub, SpanCandidate};
pub use wer_report::{wer_bucket_report, WerBucketReport, WerBucketRow, WER_BUCKETS};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::Hit;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalEvalReport {
    pub k: usize,
    pub top_k_accuracy: f64,
    /// Per question: whether the gold passage appeared in the top k.
    pub hits: BTreeMap<String, bool>,
}

/// Fraction of questions whose gold passage appears among the first k
/// results. Results deeper than k are ignored, so one deep search can be
/// scored at several depths.
pub fn topk_accuracy(
    results: &[(String, Vec<Hit>)],
    gold: &BTreeMap<String, String>,
    k: usize,
) -> Result<RetrievalEvalReport> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if results.is_empty() {
        return Err(Error::EmptyInput("no questions to score".into()));
    }
    let missing: Vec<String> = results
        .iter()
        .filter(|(qid, _)| !gold.contains_key(qid))
        .map(|(qid, _)| qid.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds {
            context: "gold passages".into(),
            missing,
        });
    }

    let mut hits = BTreeMap::new();
    for (qid, ranked) in results {
        let gold_id = &gold[qid];
        let hit = ranked.iter().take(k).any(|h| &h.id == gold_id);
        hits.insert(qid.clone(), hit);
    }
    let n_hit = hits.values().filter(|h| **h).count();
    Ok(RetrievalEvalReport {
        k,
        top_k_accuracy: n_hit as f64 / results.len() as f64,
        hits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start_s: f64,
    pub end_s: f64,
}

impl TimeSpan {
    pub fn new(start_s: f64, end_s: f64) -> Result<TimeSpan> {
        if !(start_s.is_finite() && end_s.is_finite() && 0.0 <= start_s && start_s <= end_s) {
            return Err(Error::Config(format!(
                "invalid time span [{start_s}, {end_s}]"
            )));
        }
        Ok(TimeSpan { start_s, end_s })
    }

    pub fn len_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn overlap_s(&self, other: &TimeSpan) -> f64 {
        (self.end_s.min(other.end_s) - self.start_s.max(other.start_s)).max(0.0)
    }
}

/// Frame-level F1 between a predicted and a reference time span.
///
/// Zero unless the prediction lies on the gold passage; precision is
/// overlap over the predicted length, recall is overlap over the reference
/// length, and degenerate (zero-length) spans score zero.
pub fn ff1(predicted: &TimeSpan, reference: &TimeSpan, on_gold_passage: bool) -> f64 {
    if !on_gold_passage {
        return 0.0;
    }
    let overlap = predicted.overlap_s(reference);
    if overlap <= 0.0 || predicted.len_s() <= 0.0 || reference.len_s() <= 0.0 {
        return 0.0;
    }
    let p = overlap / predicted.len_s();
    let r = overlap / reference.len_s();
    2.0 * p * r / (p + r)
}

/// An answer span found in one retrieved passage.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerCandidate {
    pub passage_id: String,
    pub span: TimeSpan,
    pub span_score: f64,
    pub retriever_score: f64,
}

/// Interpolation weights for answer selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub w_retriever: f64,
    pub w_span: f64,
}

impl ScoreWeights {
    pub const SPAN_ONLY: ScoreWeights = ScoreWeights {
        w_retriever: 0.0,
        w_span: 1.0,
    };

    pub fn convex(w_retriever: f64) -> ScoreWeights {
        ScoreWeights {
            w_retriever,
            w_span: 1.0 - w_retriever,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_retriever.is_finite() && self.w_span.is_finite()) {
            return Err(Error::Config(format!(
                "answer score weights must be finite, got ({}, {})",
                self.w_retriever, self.w_span
            )));
        }
        if self.w_retriever == 0.0 && self.w_span == 0.0 {
            return Err(Error::Config(
                "answer score weights must not both be zero".into(),
            ));
        }
        Ok(())
    }
}

pub fn answer_score(candidate: &AnswerCandidate, w: &ScoreWeights) -> f64 {
    w.w_retriever * candidate.retriever_score + w.w_span * candidate.span_score
}

/// Highest-scoring candidate; ties go to the lexicographically smaller
/// passage id, then the earlier start.
pub fn best_answer<'a>(
    candidates: &'a [AnswerCandidate],
    w: &ScoreWeights,
) -> Result<Option<&'a AnswerCandidate>> {
    w.validate()?;
    let mut best: Option<(&AnswerCandidate, f64)> = None;
    for c in candidates {
        let score = answer_score(c, w);
        let wins = match &best {
            None => true,
            Some((b, bs)) => {
                score > *bs
                    || (score == *bs
                        && (c.passage_id < b.passage_id
                            || (c.passage_id == b.passage_id
                                && c.span.start_s < b.span.start_s)))
            }
        };
        if wins {
            best = Some((c, score));
        }
    }
    Ok(best.map(|(c, _)| c))
}

/// One question's answer-selection problem: candidate spans from its
/// retrieved passages plus the ground truth to score against.
#[derive(Clone, Debug)]
pub struct AnswerExample {
    pub candidates: Vec<AnswerCandidate>,
    pub reference: TimeSpan,
    pub gold_passage_id: String,
}

/// Mean FF1 over questions under one weighting; a question with no
/// candidates counts as zero.
pub fn answer_ff1(examples: &[AnswerExample], w: &ScoreWeights) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("no questions to score answers for".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        if let Some(best) = best_answer(&ex.candidates, w)? {
            total += ff1(
                &best.span,
                &ex.reference,
                best.passage_id == ex.gold_passage_id,
            );
        }
    }
    Ok(total / examples.len() as f64)
}

/// Pick convex interpolation weights by grid search (step 0.05) maximizing
/// mean FF1. Ties prefer the smaller retriever weight, so the span-only
/// weighting wins unless interpolation strictly helps.
pub fn tune_answer_weights(examples: &[AnswerExample]) -> Result<(ScoreWeights, f64)> {
    let mut best: Option<(ScoreWeights, f64)> = None;
    for step in 0..=20 {
        let w = ScoreWeights::convex(step as f64 * 0.05);
        let score = answer_ff1(examples, &w)?;
        if best.as_ref().is_none_or(|(_, s)| score > *s + 1e-12) {
            best = Some((w, score));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dim(format!(
            "rank correlation needs matched samples, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput(
            "rank correlation needs at least two samples".into(),
        ));
    }
    for v in xs.iter().chain(ys) {
        if !v.is_finite() {
            return Err(Error::NonFinite("rank correlation input".into()));
        }
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Config(
            "rank correlation undefined for constant input".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}
