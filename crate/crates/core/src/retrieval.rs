//! Exact top-K inner-product search over encoded passages, plus linear
//! score ensembling of two retrievers.
//!
//! The index is immutable after build. Vectors pass through f32 on the way
//! in, so build -> save -> load round-trips bitwise and scores do not
//! depend on whether the index came from memory or disk.

use std::collections::BinaryHeap;
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matfile;
use crate::numerics::Tensor;

pub struct PassageIndex {
    /// Sorted ascending, unique.
    ids: Arc<[String]>,
    /// [N, d], f32-quantized.
    vectors: Tensor,
    fingerprint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Inner-product scores for every passage in one archive, in index id order.
#[derive(Clone, Debug)]
pub struct ArchiveScores {
    pub ids: Arc<[String]>,
    pub scores: Vec<f64>,
}

impl ArchiveScores {
    /// Best k entries, equal scores ordered by ascending passage id.
    pub fn top_k(&self, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::Config("search depth must be at least 1".into()));
        }
        Ok(top_k(&self.ids, &self.scores, k))
    }
}

impl PassageIndex {
    /// Sorts entries by id and quantizes vectors to f32 precision.
    pub fn build(fingerprint: &str, mut entries: Vec<(String, Tensor)>) -> Result<PassageIndex> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("index build".into()));
        }
        let dim = entries[0].1.numel();
        if dim == 0 {
            return Err(Error::Dim("index vectors must be non-empty".into()));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut data = Vec::with_capacity(entries.len() * dim);
        let mut ids = Vec::with_capacity(entries.len());
        for (id, v) in &entries {
            if id.is_empty() || id.contains(['\n', '\r']) {
                return Err(Error::Config(format!("unusable passage id {id:?}")));
            }
            if ids.last() == Some(id) {
                return Err(Error::Config(format!("duplicate passage id {id:?}")));
            }
            if v.numel() != dim {
                return Err(Error::Dim(format!(
                    "vector for {id:?} has {} elements, index dimension is {dim}",
                    v.numel()
                )));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("vector for {id:?}")));
            }
            data.extend(v.data().iter().map(|x| *x as f32 as f64));
            ids.push(id.clone());
        }
        Ok(PassageIndex {
            ids: ids.into(),
            vectors: Tensor::matrix(entries.len(), dim, data)?,
            fingerprint: fingerprint.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    /// Errors unless the querying model produced this index.
    pub fn check_fingerprint(&self, model_fingerprint: &str) -> Result<()> {
        if self.fingerprint == model_fingerprint {
            Ok(())
        } else {
            Err(Error::FingerprintMismatch {
                index: self.fingerprint.clone(),
                model: model_fingerprint.to_string(),
            })
        }
    }

    pub fn vecs_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.vecs"))
    }

    pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.manifest"))
    }

    /// Writes `<name>.vecs` and `<name>.manifest` under `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        matfile::write_matrix(&Self::vecs_path(dir, name), &self.vectors)?;
        let manifest = Self::manifest_path(dir, name);
        let mut text = String::with_capacity(16 * self.ids.len());
        text.push_str("fingerprint ");
        text.push_str(&self.fingerprint);
        text.push('\n');
        for id in self.ids.iter() {
            text.push_str(id);
            text.push('\n');
        }
        fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))
    }

    pub fn load(dir: &Path, name: &str) -> Result<PassageIndex> {
        let vectors = matfile::read_matrix(&Self::vecs_path(dir, name))?;
        let manifest = Self::manifest_path(dir, name);
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut lines = text.lines();
        let fingerprint = match lines.next().and_then(|l| l.strip_prefix("fingerprint ")) {
            Some(fp) if !fp.is_empty() => fp.to_string(),
            _ => {
                return Err(Error::format(
                    &manifest,
                    "first line must be `fingerprint <hex>`",
                ))
            }
        };
        let ids: Vec<String> = lines.map(str::to_string).collect();
        if ids.len() != vectors.rows() {
            return Err(Error::format(
                &manifest,
                format!("{} ids for {} vectors", ids.len(), vectors.rows()),
            ));
        }
        for pair in ids.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::format(
                    &manifest,
                    format!("ids out of order near {:?}", pair[1]),
                ));
            }
        }
        if ids.iter().any(|id| id.is_empty()) {
            return Err(Error::format(&manifest, "empty passage id"));
        }
        Ok(PassageIndex {
            ids: ids.into(),
            vectors,
            fingerprint,
        })
    }

    /// Exact top-k by inner product; ties broken by ascending passage id.
    pub fn search(&self, query: &Tensor, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::Config("search depth must be at least 1".into()));
        }
        let scores = self.score_all(query)?;
        Ok(top_k(&self.ids, &scores.scores, k))
    }

    /// Scores the whole archive; input to ensembling.
    pub fn score_all(&self, query: &Tensor) -> Result<ArchiveScores> {
        if query.numel() != self.dim() {
            return Err(Error::Dim(format!(
                "query has {} elements, index dimension is {}",
                query.numel(),
                self.dim()
            )));
        }
        if !query.is_finite() {
            return Err(Error::NonFinite("query vector".into()));
        }
        let q = query.data();
        let scores = (0..self.len())
            .map(|i| {
                self.vectors
                    .row(i)
                    .iter()
                    .zip(q)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok(ArchiveScores {
            ids: self.ids.clone(),
            scores,
        })
    }
}

/// Heap entry ordered so the heap keeps the worst kept hit on top: lower
/// score is worse, and on equal scores a larger row (later id) is worse.
#[derive(PartialEq, Eq)]
struct Worst {
    bits: u64,
    row: usize,
}

impl Worst {
    fn new(score: f64, row: usize) -> Worst {
        Worst {
            bits: score.to_bits(),
            row,
        }
    }

    fn score(&self) -> f64 {
        f64::from_bits(self.bits)
    }
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .score()
            .total_cmp(&self.score())
            .then(self.row.cmp(&other.row))
    }
}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn top_k(ids: &[String], scores: &[f64], k: usize) -> Vec<Hit> {
    let k = k.min(ids.len());
    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
    for (row, &score) in scores.iter().enumerate() {
        let entry = Worst::new(score, row);
        if heap.len() < k {
            heap.push(entry);
        } else if entry < *heap.peek().expect("non-empty heap") {
            heap.pop();
            heap.push(entry);
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .map(|e| Hit {
            id: ids[e.row].clone(),
            score: e.score(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleWeights {
    pub w_a: f64,
    pub w_b: f64,
}

impl EnsembleWeights {
    pub fn convex(w_a: f64) -> EnsembleWeights {
        EnsembleWeights {
            w_a,
            w_b: 1.0 - w_a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_a.is_finite() && self.w_b.is_finite()) {
            return Err(Error::Config(format!(
                "ensemble weights must be finite, got ({}, {})",
                self.w_a, self.w_b
            )));
        }
        if self.w_a == 0.0 && self.w_b == 0.0 {
            return Err(Error::Config("ensemble weights must not both be zero".into()));
        }
        Ok(())
    }
}

/// out[id] = w_a * a[id] + w_b * b[id]. Both score sets must cover the same
/// archive.
pub fn ensemble_scores(
    a: &ArchiveScores,
    b: &ArchiveScores,
    w: EnsembleWeights,
) -> Result<ArchiveScores> {
    w.validate()?;
    if a.ids != b.ids {
        let sa: BTreeSet<&String> = a.ids.iter().collect();
        let sb: BTreeSet<&String> = b.ids.iter().collect();
        let missing: Vec<String> = sa
            .symmetric_difference(&sb)
            .map(|s| s.to_string())
            .collect();
        return Err(Error::MissingIds {
            context: "ensemble id coverage".into(),
            missing,
        });
    }
    let scores = a
        .scores
        .iter()
        .zip(&b.scores)
        .map(|(x, y)| w.w_a * x + w.w_b * y)
        .collect();
    Ok(ArchiveScores {
        ids: a.ids.clone(),
        scores,
    })
}

/// One tuning example: both retrievers' archive scores for a dev question
/// and the id of its gold passage.
pub struct EnsembleExample {
    pub a: ArchiveScores,
    pub b: ArchiveScores,
    pub gold_id: String,
}

fn gold_in_top_k(scores: &ArchiveScores, gold_id: &str, k: usize) -> bool {
    top_k(&scores.ids, &scores.scores, k)
        .iter()
        .any(|h| h.id == gold_id)
}

/// Grid-searches w_a over {0.0, 0.05, ..., 1.0} with w_b = 1 - w_a,
/// maximizing dev top-k accuracy. Ties prefer the weight closest to 0.5,
/// then the smaller one. Returns the weights and the accuracy they achieve.
pub fn tune_ensemble_weights(
    examples: &[EnsembleExample],
    k: usize,
) -> Result<(EnsembleWeights, f64)> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("ensemble tuning set".into()));
    }
    if k == 0 {
        return Err(Error::Config("search depth must be at least 1".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for step in 0..=20 {
        let w_a = step as f64 * 0.05;
        let w = EnsembleWeights::convex(w_a);
        let mut hits = 0usize;
        for ex in examples {
            let combined = ensemble_scores(&ex.a, &ex.b, w)?;
            if gold_in_top_k(&combined, &ex.gold_id, k) {
                hits += 1;
            }
        }
        let acc = hits as f64 / examples.len() as f64;
        let better = match best {
            None => true,
            Some((best_acc, best_w)) => {
                acc > best_acc
                    || (acc == best_acc
                        && (w_a - 0.5).abs() < (best_w - 0.5f64).abs() - 1e-12)
            }
        };
        if better {
            best = Some((acc, w_a));
        }
    }
    let (acc, w_a) = best.expect("non-empty grid");
    Ok((EnsembleWeights::convex(w_a), acc))
}
