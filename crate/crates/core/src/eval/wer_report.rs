//! Retrieval accuracy sliced by transcript noise.
//!
//! Questions are bucketed by the word error rate of their corrupted
//! transcript, then each retriever's top-K accuracy is reported per bucket.
//! Empty buckets stay empty (`None`), they never read as zero accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WER_BUCKETS: usize = 10;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WerBucketRow {
    pub lo: f64,
    pub hi: f64,
    pub midpoint: f64,
    pub n: usize,
    /// One entry per retriever, in report order; `None` when `n == 0`.
    pub accuracy: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WerBucketReport {
    pub retrievers: Vec<String>,
    pub rows: Vec<WerBucketRow>,
}

/// Bucket `rows` of per-question (WER, per-retriever hit) pairs into ten
/// WER ranges [0, 0.1), [0.1, 0.2), ... [0.9, 1.0]. Rates above 1.0
/// (insertion-heavy transcripts) land in the last bucket.
pub fn wer_bucket_report(
    retrievers: Vec<String>,
    rows: &[(f64, Vec<bool>)],
) -> Result<WerBucketReport> {
    if retrievers.is_empty() {
        return Err(Error::EmptyInput("no retrievers to report".into()));
    }
    for (i, name) in retrievers.iter().enumerate() {
        if retrievers[..i].contains(name) {
            return Err(Error::Config(format!("duplicate retriever name {name}")));
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("no questions to bucket".into()));
    }

    let mut counts = [0usize; WER_BUCKETS];
    let mut hits = vec![[0usize; WER_BUCKETS]; retrievers.len()];
    for (wer, row_hits) in rows {
        if !wer.is_finite() || *wer < 0.0 {
            return Err(Error::Config(format!("word error rate {wer} out of range")));
        }
        if row_hits.len() != retrievers.len() {
            return Err(Error::Dim(format!(
                "expected {} hit flags per question, got {}",
                retrievers.len(),
                row_hits.len()
            )));
        }
        let bucket = ((wer * WER_BUCKETS as f64).floor() as usize).min(WER_BUCKETS - 1);
        counts[bucket] += 1;
        for (r, hit) in row_hits.iter().enumerate() {
            if *hit {
                hits[r][bucket] += 1;
            }
        }
    }

    let rows = (0..WER_BUCKETS)
        .map(|b| WerBucketRow {
            lo: b as f64 / 10.0,
            hi: (b + 1) as f64 / 10.0,
            midpoint: (2 * b + 1) as f64 / 20.0,
            n: counts[b],
            accuracy: hits
                .iter()
                .map(|h| {
                    if counts[b] == 0 {
                        None
                    } else {
                        Some(h[b] as f64 / counts[b] as f64)
                    }
                })
                .collect(),
        })
        .collect();
    Ok(WerBucketReport { retrievers, rows })
}

impl WerBucketReport {
    pub fn total_questions(&self) -> usize {
        self.rows.iter().map(|r| r.n).sum()
    }

    fn retriever_index(&self, name: &str) -> Result<usize> {
        self.retrievers
            .iter()
            .position(|r| r == name)
            .ok_or_else(|| Error::MissingIds {
                context: "report retrievers".into(),
                missing: vec![name.to_string()],
            })
    }

    /// (bucket midpoint, accuracy) over populated buckets for one retriever.
    pub fn curve(&self, retriever: &str) -> Result<Vec<(f64, f64)>> {
        let idx = self.retriever_index(retriever)?;
        Ok(self
            .rows
            .iter()
            .filter_map(|r| r.accuracy[idx].map(|a| (r.midpoint, a)))
            .collect())
    }

    /// Two-column CSV of the populated buckets for one retriever.
    pub fn to_csv(&self, retriever: &str) -> Result<String> {
        let mut out = String::from("wer_midpoint,top_k_accuracy\n");
        for (mid, acc) in self.curve(retriever)? {
            out.push_str(&format!("{mid},{acc}\n"));
        }
        Ok(out)
    }

    /// Plain-text table with one line per bucket, all retrievers side by
    /// side; empty buckets print a dash.
    pub fn render(&self) -> String {
        let mut out = String::from("wer bucket       n");
        for name in &self.retrievers {
            out.push_str(&format!("  {name:>12}"));
        }
        out.push('\n');
        for (b, row) in self.rows.iter().enumerate() {
            let close = if b + 1 == WER_BUCKETS { ']' } else { ')' };
            out.push_str(&format!(
                "[{:.1}, {:.1}{close} {:>6}",
                row.lo, row.hi, row.n
            ));
            for acc in &row.accuracy {
                match acc {
                    Some(a) => out.push_str(&format!("  {a:>12.4}")),
                    None => out.push_str(&format!("  {:>12}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn buckets_hand_case() {
        let rows = vec![
            (0.05, vec![true, false]),
            (0.08, vec![true, true]),
            (0.15, vec![false, true]),
            (0.95, vec![false, true]),
            (1.0, vec![true, true]),
            (1.8, vec![false, false]),
        ];
        let report = wer_bucket_report(names(&["cascade", "student"]), &rows).unwrap();
        assert_eq!(report.rows.len(), WER_BUCKETS);
        assert_eq!(report.total_questions(), 6);

        let b0 = &report.rows[0];
        assert_eq!((b0.n, b0.midpoint), (2, 0.05));
        assert_eq!(b0.accuracy, vec![Some(1.0), Some(0.5)]);

        let b1 = &report.rows[1];
        assert_eq!(b1.n, 1);
        assert_eq!(b1.accuracy, vec![Some(0.0), Some(1.0)]);

        // 1.0 and 1.8 both clamp into the last bucket alongside 0.95.
        let b9 = &report.rows[9];
        assert_eq!(b9.n, 3);
        assert_eq!(b9.accuracy[0], Some(1.0 / 3.0));
        assert_eq!(b9.accuracy[1], Some(2.0 / 3.0));

        // Untouched buckets are empty, not zero.
        for b in 2..9 {
            assert_eq!(report.rows[b].n, 0);
            assert_eq!(report.rows[b].accuracy, vec![None, None]);
        }
    }

    #[test]
    fn counts_sum_to_question_total() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<(f64, Vec<bool>)> = (0..257)
            .map(|_| {
                (
                    rng.random_range(0.0..1.3),
                    vec![rng.random::<bool>(), rng.random::<bool>()],
                )
            })
            .collect();
        let report = wer_bucket_report(names(&["a", "b"]), &rows).unwrap();
        assert_eq!(report.total_questions(), 257);
        for row in &report.rows {
            for acc in row.accuracy.iter().flatten() {
                assert!((0.0..=1.0).contains(acc));
            }
        }
    }

    #[test]
    fn boundary_rates_land_in_the_right_bucket() {
        let rows = vec![
            (0.0, vec![true]),
            (0.1, vec![true]),
            (0.9, vec![true]),
            (0.8999999, vec![true]),
        ];
        let report = wer_bucket_report(names(&["r"]), &rows).unwrap();
        let ns: Vec<usize> = report.rows.iter().map(|r| r.n).collect();
        assert_eq!(ns, vec![1, 1, 0, 0, 0, 0, 0, 0, 1, 1]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            wer_bucket_report(vec![], &[(0.1, vec![])]),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            wer_bucket_report(names(&["a"]), &[]),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            wer_bucket_report(names(&["a", "a"]), &[(0.1, vec![true, true])]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            wer_bucket_report(names(&["a", "b"]), &[(0.1, vec![true])]),
            Err(Error::Dim(_))
        ));
        assert!(matches!(
            wer_bucket_report(names(&["a"]), &[(-0.1, vec![true])]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            wer_bucket_report(names(&["a"]), &[(f64::NAN, vec![true])]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_and_curve_skip_empty_buckets() {
        let rows = vec![
            (0.05, vec![true]),
            (0.05, vec![false]),
            (0.55, vec![true]),
        ];
        let report = wer_bucket_report(names(&["r"]), &rows).unwrap();
        assert_eq!(
            report.curve("r").unwrap(),
            vec![(0.05, 0.5), (0.55, 1.0)]
        );
        assert_eq!(
            report.to_csv("r").unwrap(),
            "wer_midpoint,top_k_accuracy\n0.05,0.5\n0.55,1\n"
        );
        assert!(matches!(
            report.to_csv("missing"),
            Err(Error::MissingIds { .. })
        ));
    }

    #[test]
    fn json_marks_empty_buckets_null() {
        let report =
            wer_bucket_report(names(&["r"]), &[(0.05, vec![true])]).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("[null]"), "{json}");
        let back: WerBucketReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows[0].accuracy, vec![Some(1.0)]);
        assert_eq!(back.rows[5].accuracy, vec![None]);

        let text = report.render();
        assert!(text.contains("[0.0, 0.1)"));
        assert!(text.contains("[0.9, 1.0]"));
        assert!(text.contains('-'));
    }
}
