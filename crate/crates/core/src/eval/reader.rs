//! A deliberately simple span reader.
//!
//! Stands in for a trained question-answering head so the answer pipeline
//! can be exercised end to end. It slides a fixed-length window over a
//! passage transcript and scores each window by how many of its tokens are
//! answer-bearing question tokens (entity-range tokens; content words carry
//! no answer).

use std::collections::BTreeSet;

use crate::corpus::VocabLayout;
use crate::error::{Error, Result};
use crate::eval::TimeSpan;

#[derive(Clone, Debug, PartialEq)]
pub struct SpanCandidate {
    pub span: TimeSpan,
    pub score: f64,
    pub start_token: usize,
}

/// Window length matching the question's answer mention: its entity-token
/// count (with multiplicity), at least 1.
pub fn default_window(question_tokens: &[u32], vocab: &VocabLayout) -> usize {
    question_tokens
        .iter()
        .filter(|&&t| vocab.is_entity(t))
        .count()
        .max(1)
}

/// Score every window of `window` tokens over `transcript` and return the
/// nonzero-scoring ones, best first (ties: earlier start), capped at
/// `max_candidates`. Spans are on a uniform time grid of
/// `duration_s / transcript.len()` seconds per token. An empty transcript
/// yields an empty list.
pub fn span_reader_stub(
    transcript: &[u32],
    duration_s: f64,
    question_tokens: &[u32],
    vocab: &VocabLayout,
    window: usize,
    max_candidates: usize,
) -> Result<Vec<SpanCandidate>> {
    if window == 0 {
        return Err(Error::Config("reader window must be at least 1".into()));
    }
    if max_candidates == 0 {
        return Err(Error::Config(
            "reader must be allowed at least one candidate".into(),
        ));
    }
    if transcript.is_empty() {
        return Ok(Vec::new());
    }
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(Error::Config(format!(
            "utterance duration must be positive, got {duration_s}"
        )));
    }

    let probes: BTreeSet<u32> = question_tokens
        .iter()
        .copied()
        .filter(|&t| vocab.is_entity(t))
        .collect();
    let window = window.min(transcript.len());
    let dt = duration_s / transcript.len() as f64;

    let mut candidates: Vec<SpanCandidate> = Vec::new();
    for start in 0..=transcript.len() - window {
        let overlap = transcript[start..start + window]
            .iter()
            .filter(|t| probes.contains(t))
            .count();
        if overlap == 0 {
            continue;
        }
        candidates.push(SpanCandidate {
            span: TimeSpan::new(start as f64 * dt, (start + window) as f64 * dt)?,
            score: overlap as f64 / window as f64,
            start_token: start,
        });
    }
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.start_token.cmp(&b.start_token))
    });
    candidates.truncate(max_candidates);
    Ok(candidates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> VocabLayout {
        VocabLayout {
            unk_id: 0,
            content_start: 1,
            content_count: 10,
            entity_start: 11,
            entity_count: 5,
        }
    }

    #[test]
    fn verbatim_answer_is_top_one_with_full_score() {
        let v = vocab();
        // Entities 12 and 13 sit at tokens 3..5 of a 10-token transcript.
        let transcript = vec![1, 2, 3, 12, 13, 4, 5, 6, 7, 8];
        let question = vec![2, 12, 9, 13, 1];
        assert_eq!(default_window(&question, &v), 2);
        let out = span_reader_stub(&transcript, 20.0, &question, &v, 2, 10).unwrap();
        let top = &out[0];
        assert_eq!(top.start_token, 3);
        assert_eq!(top.score, 1.0);
        // 10 tokens over 20 s puts the window at [6 s, 10 s).
        assert_eq!((top.span.start_s, top.span.end_s), (6.0, 10.0));
        // Every other candidate overlaps at most one entity.
        assert!(out[1..].iter().all(|c| c.score <= 0.5));
    }

    #[test]
    fn deleted_answer_tokens_leave_no_candidates() {
        let v = vocab();
        let transcript = vec![1, 2, 3, 4, 5];
        let question = vec![2, 12, 13];
        let out = span_reader_stub(&transcript, 5.0, &question, &v, 2, 10).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn empty_transcript_yields_empty_list() {
        let v = vocab();
        let out = span_reader_stub(&[], 5.0, &[12], &v, 2, 10).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn ordering_breaks_score_ties_by_earlier_start() {
        let v = vocab();
        // Entity 11 at tokens 1 and 4: two windows score 0.5 each at
        // starts {0,1} and {3,4}.
        let transcript = vec![1, 11, 2, 3, 11, 5];
        let question = vec![11];
        let out = span_reader_stub(&transcript, 6.0, &question, &v, 2, 10).unwrap();
        let starts: Vec<usize> = out.iter().map(|c| c.start_token).collect();
        assert_eq!(starts, vec![0, 1, 3, 4]);
        assert!(out.iter().all(|c| c.score == 0.5));

        let capped = span_reader_stub(&transcript, 6.0, &question, &v, 2, 3).unwrap();
        assert_eq!(capped.len(), 3);
    }

    #[test]
    fn window_is_clamped_to_transcript_length() {
        let v = vocab();
        let transcript = vec![11, 12];
        let out = span_reader_stub(&transcript, 4.0, &[11, 12, 13], &v, 9, 10).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 1.0);
        assert_eq!((out[0].span.start_s, out[0].span.end_s), (0.0, 4.0));
    }

    #[test]
    fn rejects_degenerate_settings() {
        let v = vocab();
        assert!(span_reader_stub(&[11], 1.0, &[11], &v, 0, 10).is_err());
        assert!(span_reader_stub(&[11], 1.0, &[11], &v, 1, 0).is_err());
        assert!(span_reader_stub(&[11], 0.0, &[11], &v, 1, 10).is_err());
        assert!(span_reader_stub(&[11], f64::NAN, &[11], &v, 1, 10).is_err());
    }

    #[test]
    fn content_tokens_never_probe() {
        let v = vocab();
        // Question token 2 is a content word and appears in the transcript,
        // but only entity mentions count as answer-bearing.
        let transcript = vec![2, 2, 2];
        let question = vec![2, 2];
        let out = span_reader_stub(&transcript, 3.0, &question, &v, 1, 10).unwrap();
        assert!(out.is_empty());
    }
}
