//! Contrastive and distillation training objectives.
//!
//! Both losses consume a batch of question vectors Q and the batch of their
//! gold passage vectors P, so row i of the score matrix S = Q Pᵀ has its
//! positive on the diagonal and every other passage in the batch acts as a
//! negative.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Mixing weights for the two cross-model distillation terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillWeights {
    /// Weight of the student-question / teacher-passage term.
    pub alpha: f64,
    /// Weight of the teacher-question / student-passage term.
    pub beta: f64,
}

impl DistillWeights {
    pub const NONE: DistillWeights = DistillWeights {
        alpha: 0.0,
        beta: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }

    pub fn uses_teacher(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }
}

/// Teacher vectors for one batch. They carry no gradient: the tape stores
/// them as constants.
#[derive(Clone, Debug)]
pub struct TeacherBatch {
    pub questions: Tensor,
    pub passages: Tensor,
}

/// Mean over the batch of -log softmax(S)[i, i] with S = q pᵀ.
///
/// Accepts [B, d] question and passage batches with matching shapes. A
/// one-question batch has no negatives and scores exactly zero.
pub fn nll_in_batch(tape: &mut Tape, q: Var, p: Var) -> Result<Var> {
    let (sq, sp) = (tape.value(q).shape(), tape.value(p).shape());
    if sq.len() != 2 || sq != sp {
        return Err(Error::Dim(format!(
            "in-batch nll needs matching [B, d] batches, got {sq:?} and {sp:?}"
        )));
    }
    let pt = tape.transpose(p)?;
    let scores = tape.matmul(q, pt)?;
    let lse = tape.logsumexp_rows(scores)?;
    let diag = tape.take_diag(scores)?;
    let per_row = tape.sub(lse, diag)?;
    Ok(tape.mean_all(per_row))
}

/// The combined objective and its unweighted summands, for logging.
pub struct LossTerms {
    pub total: Var,
    pub nll: Var,
    /// Student questions scored against teacher passages.
    pub sq_tp: Option<Var>,
    /// Teacher questions scored against student passages.
    pub tq_sp: Option<Var>,
}

/// Full training objective: in-batch NLL on student scores plus the two
/// mixed student/teacher NLL terms weighted by alpha and beta.
///
/// With both weights zero this is byte-for-byte `nll_in_batch` and the
/// teacher batch may be omitted.
pub fn total_loss(
    tape: &mut Tape,
    student_q: Var,
    student_p: Var,
    teacher: Option<&TeacherBatch>,
    weights: DistillWeights,
) -> Result<Var> {
    total_loss_terms(tape, student_q, student_p, teacher, weights).map(|t| t.total)
}

/// As `total_loss`, but keeps the individual terms visible.
pub fn total_loss_terms(
    tape: &mut Tape,
    student_q: Var,
    student_p: Var,
    teacher: Option<&TeacherBatch>,
    weights: DistillWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    if !weights.uses_teacher() {
        let nll = nll_in_batch(tape, student_q, student_p)?;
        return Ok(LossTerms {
            total: nll,
            nll,
            sq_tp: None,
            tq_sp: None,
        });
    }
    let teacher = teacher.ok_or_else(|| {
        Error::Config(format!(
            "distillation weights alpha={} beta={} require teacher vectors",
            weights.alpha, weights.beta
        ))
    })?;
    let shape = tape.value(student_q).shape().to_vec();
    for (name, t) in [
        ("teacher questions", &teacher.questions),
        ("teacher passages", &teacher.passages),
    ] {
        if t.shape() != shape.as_slice() {
            return Err(Error::Dim(format!(
                "{name} shape {:?} does not match student batch {shape:?}",
                t.shape()
            )));
        }
    }

    let tq = tape.constant(teacher.questions.clone());
    let tp = tape.constant(teacher.passages.clone());

    let student = nll_in_batch(tape, student_q, student_p)?;
    let sq_tp = nll_in_batch(tape, student_q, tp)?;
    let tq_sp = nll_in_batch(tape, tq, student_p)?;

    let a = tape.scale(sq_tp, weights.alpha);
    let b = tape.scale(tq_sp, weights.beta);
    let partial = tape.add(student, a)?;
    let total = tape.add(partial, b)?;
    Ok(LossTerms {
        total,
        nll: student,
        sq_tp: Some(sq_tp),
        tq_sp: Some(tq_sp),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, normal_tensor, GradCheckOptions, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar reference: softmax cross entropy against the diagonal,
    /// computed with plain loops and no shared code with the tape.
    fn oracle_nll(q: &Tensor, p: &Tensor) -> f64 {
        let b = q.rows();
        let d = q.cols();
        let mut total = 0.0;
        for i in 0..b {
            let mut row = vec![0.0; b];
            for (j, s) in row.iter_mut().enumerate() {
                for k in 0..d {
                    *s += q.at2(i, k) * p.at2(j, k);
                }
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|s| (s - m).exp()).sum();
            total += m + z.ln() - row[i];
        }
        total / b as f64
    }

    fn eval_nll(q: Tensor, p: Tensor) -> f64 {
        let mut tape = Tape::new();
        let qv = tape.constant(q);
        let pv = tape.constant(p);
        let loss = nll_in_batch(&mut tape, qv, pv).unwrap();
        tape.value(loss).item().unwrap()
    }

    #[test]
    fn identity_scores_match_hand_computed_value() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        // Each row scores [1, 0] with the positive at 1:
        // loss = ln(e + 1) - 1.
        let expected = (1.0f64.exp() + 1.0).ln() - 1.0;
        let got = eval_nll(eye.clone(), eye);
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn matches_scalar_oracle_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = normal_tensor(&mut rng, &[5, 7], 1.3);
            let p = normal_tensor(&mut rng, &[5, 7], 1.3);
            let expected = oracle_nll(&q, &p);
            let got = eval_nll(q, p);
            assert!(
                (got - expected).abs() < 1e-12,
                "{got} vs oracle {expected}"
            );
        }
    }

    #[test]
    fn single_question_batch_scores_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = normal_tensor(&mut rng, &[1, 6], 2.0);
        let p = normal_tensor(&mut rng, &[1, 6], 2.0);
        assert_eq!(eval_nll(q, p), 0.0);
    }

    #[test]
    fn uniform_scores_give_log_batch_size() {
        // Identical passages make every column of S equal, so softmax is
        // uniform and the loss is ln B regardless of the questions.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = normal_tensor(&mut rng, &[4, 3], 1.0);
        let row = normal_tensor(&mut rng, &[1, 3], 1.0);
        let p = Tensor::matrix(4, 3, row.data().repeat(4)).unwrap();
        let got = eval_nll(q, p);
        assert!((got - 4.0f64.ln()).abs() < 1e-12, "{got}");
    }

    #[test]
    fn sharper_diagonal_lowers_the_loss() {
        let weak = Tensor::matrix(3, 3, {
            let mut d = vec![0.0; 9];
            for i in 0..3 {
                d[i * 3 + i] = 1.0;
            }
            d
        })
        .unwrap();
        let strong = Tensor::matrix(3, 3, {
            let mut d = vec![0.0; 9];
            for i in 0..3 {
                d[i * 3 + i] = 6.0;
            }
            d
        })
        .unwrap();
        let eye = weak.clone();
        let weak_loss = eval_nll(weak, eye.clone());
        let strong_loss = eval_nll(strong, eye);
        assert!(strong_loss < weak_loss);
        assert!(strong_loss > 0.0);
    }

    #[test]
    fn large_score_magnitudes_stay_finite() {
        let q = Tensor::matrix(2, 2, vec![900.0, 0.0, 0.0, 900.0]).unwrap();
        let p = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let got = eval_nll(q, p);
        assert!(got.is_finite());
        assert!(got.abs() < 1e-9, "diag at 900 vs off-diag 0: {got}");
    }

    #[test]
    fn mismatched_batches_are_rejected() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[3, 4]));
        let p = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(nll_in_batch(&mut tape, q, p), Err(Error::Dim(_))));
    }

    #[test]
    fn zero_weights_reduce_to_plain_nll_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = normal_tensor(&mut rng, &[4, 5], 1.0);
        let p = normal_tensor(&mut rng, &[4, 5], 1.0);

        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let pv = tape.constant(p.clone());
        let plain = nll_in_batch(&mut tape, qv, pv).unwrap();
        let total = total_loss(&mut tape, qv, pv, None, DistillWeights::NONE).unwrap();
        let a = tape.value(plain).item().unwrap();
        let b = tape.value(total).item().unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn self_distillation_at_half_weights_doubles_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = normal_tensor(&mut rng, &[4, 5], 1.0);
        let p = normal_tensor(&mut rng, &[4, 5], 1.0);
        let teacher = TeacherBatch {
            questions: q.clone(),
            passages: p.clone(),
        };

        let mut tape = Tape::new();
        let qv = tape.constant(q);
        let pv = tape.constant(p);
        let plain = nll_in_batch(&mut tape, qv, pv).unwrap();
        let total = total_loss(
            &mut tape,
            qv,
            pv,
            Some(&teacher),
            DistillWeights {
                alpha: 0.5,
                beta: 0.5,
            },
        )
        .unwrap();
        let single = tape.value(plain).item().unwrap();
        let both = tape.value(total).item().unwrap();
        assert!((both - 2.0 * single).abs() < 1e-12, "{both} vs {single}");
    }

    #[test]
    fn missing_or_misshapen_teacher_is_rejected() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[3, 4]));
        let p = tape.constant(Tensor::zeros(&[3, 4]));
        let w = DistillWeights {
            alpha: 0.5,
            beta: 0.0,
        };
        assert!(matches!(
            total_loss(&mut tape, q, p, None, w),
            Err(Error::Config(_))
        ));

        let bad = TeacherBatch {
            questions: Tensor::zeros(&[2, 4]),
            passages: Tensor::zeros(&[3, 4]),
        };
        assert!(matches!(
            total_loss(&mut tape, q, p, Some(&bad), w),
            Err(Error::Dim(_))
        ));

        assert!(matches!(
            total_loss(
                &mut tape,
                q,
                p,
                None,
                DistillWeights {
                    alpha: -0.1,
                    beta: 0.0
                }
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences_with_and_without_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let teacher = TeacherBatch {
            questions: normal_tensor(&mut rng, &[4, 5], 1.0),
            passages: normal_tensor(&mut rng, &[4, 5], 1.0),
        };

        for weights in [
            DistillWeights::NONE,
            DistillWeights {
                alpha: 0.5,
                beta: 0.5,
            },
            DistillWeights {
                alpha: 1.0,
                beta: 0.25,
            },
        ] {
            let mut store = ParamStore::new();
            store
                .add("q", normal_tensor(&mut rng, &[4, 5], 1.0))
                .unwrap();
            store
                .add("p", normal_tensor(&mut rng, &[4, 5], 1.0))
                .unwrap();
            let teacher = teacher.clone();
            let use_teacher = weights.uses_teacher();
            let report = grad_check(
                &mut store,
                move |tape, store| {
                    let q = tape.param(store, store.lookup("q").unwrap());
                    let p = tape.param(store, store.lookup("p").unwrap());
                    total_loss(
                        tape,
                        q,
                        p,
                        if use_teacher { Some(&teacher) } else { None },
                        weights,
                    )
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-6,
                "weights {weights:?}: rel err {}",
                report.max_rel_err
            );
        }
    }
}
