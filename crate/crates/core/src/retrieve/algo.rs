//! Retrieval algorithms over raw embeddings and a content × question matrix.
//!
//! Every entry point normalizes the query first, so rankings do not depend
//! on its scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Aggregation, RetrievalError, Weighting};
use crate::kb::AnswerabilityMatrix;
use crate::vector::{
    argsort_desc, norm, normalize, score_cmp, top_k, EmbeddingMatrix, OrthoBasis, ScoredIndex, DEPENDENT_NORM,
};

/// How a question with several candidate contents was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    None,
    Newer,
    MoreQuestions,
    Random,
}

/// One accepted content.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pick {
    pub content: usize,
    /// Matched question column, absent for vote-based strategies.
    pub question: Option<usize>,
    pub score: f64,
    pub tie_break: TieBreak,
}

/// Facts the vanilla tie-break consults.
#[derive(Debug, Clone)]
pub struct TieContext<'a> {
    pub matrix: &'a AnswerabilityMatrix,
    /// Per-content recency; larger is newer.
    pub created_at: &'a [i64],
    /// Per-content number of associated questions in `matrix`.
    pub row_counts: Vec<usize>,
}

impl<'a> TieContext<'a> {
    pub fn new(matrix: &'a AnswerabilityMatrix, created_at: &'a [i64]) -> Self {
        assert_eq!(matrix.m(), created_at.len(), "one timestamp per content");
        Self {
            matrix,
            created_at,
            row_counts: matrix.row_counts(),
        }
    }

    /// Choose among the unselected rows of column `j`. `None` when every
    /// candidate is already selected.
    fn choose(&self, j: usize, selected: &[bool], rng: &mut ChaCha8Rng) -> Option<(usize, TieBreak)> {
        let open: Vec<usize> = self
            .matrix
            .column_rows(j)
            .into_iter()
            .filter(|&i| !selected[i])
            .collect();
        match open.len() {
            0 => return None,
            1 => return Some((open[0], TieBreak::None)),
            _ => {}
        }
        let newest = open.iter().map(|&i| self.created_at[i]).max().expect("non-empty");
        let newer: Vec<usize> = open.into_iter().filter(|&i| self.created_at[i] == newest).collect();
        if newer.len() == 1 {
            return Some((newer[0], TieBreak::Newer));
        }
        let most = newer.iter().map(|&i| self.row_counts[i]).max().expect("non-empty");
        let busiest: Vec<usize> = newer.into_iter().filter(|&i| self.row_counts[i] == most).collect();
        if busiest.len() == 1 {
            return Some((busiest[0], TieBreak::MoreQuestions));
        }
        Some((busiest[rng.random_range(0..busiest.len())], TieBreak::Random))
    }
}

fn unit_query(q0: &[f64]) -> Result<Vec<f64>, RetrievalError> {
    Ok(normalize(q0)?.into_inner())
}

fn check_k(k: usize, m: usize) -> Result<(), RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if k > m {
        return Err(RetrievalError::KTooLarge { k, m });
    }
    Ok(())
}

/// Top-`k` contents by cosine to the query.
pub fn naive(contents: &EmbeddingMatrix, q0: &[f64], k: usize) -> Result<Vec<ScoredIndex>, RetrievalError> {
    check_k(k, contents.len())?;
    let q = unit_query(q0)?;
    Ok(top_k(&contents.similarities(&q)?, k)?)
}

/// Walk questions by descending `z`, mapping each to a content.
pub fn qb_vanilla(
    questions: &EmbeddingMatrix,
    q0: &[f64],
    ties: &TieContext<'_>,
    k: usize,
    seed: u64,
) -> Result<Vec<Pick>, RetrievalError> {
    check_k(k, ties.matrix.m())?;
    check_columns(questions, ties.matrix)?;
    let q = unit_query(q0)?;
    let z = questions.similarities(&q)?;
    Ok(vanilla_walk(&z, ties, k, seed))
}

fn check_columns(questions: &EmbeddingMatrix, matrix: &AnswerabilityMatrix) -> Result<(), RetrievalError> {
    if questions.len() != matrix.n() {
        return Err(RetrievalError::Shape(format!(
            "{} question embeddings but the matrix has {} columns",
            questions.len(),
            matrix.n()
        )));
    }
    Ok(())
}

/// The vanilla walk for precomputed question scores.
pub fn vanilla_walk(z: &[f64], ties: &TieContext<'_>, k: usize, seed: u64) -> Vec<Pick> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = vec![false; ties.matrix.m()];
    let mut picks = Vec::with_capacity(k);
    for j in argsort_desc(z) {
        if picks.len() == k {
            break;
        }
        if let Some((i, tie_break)) = ties.choose(j, &selected, &mut rng) {
            selected[i] = true;
            picks.push(Pick {
                content: i,
                question: Some(j),
                score: z[j],
                tie_break,
            });
        }
    }
    picks
}

/// Per-content importance `u`; `None` marks contents with no associated
/// question.
pub fn content_importance(
    z: &[f64],
    matrix: &AnswerabilityMatrix,
    weighting: Weighting,
    aggregation: Aggregation,
    temperature: f64,
) -> Vec<Option<f64>> {
    (0..matrix.m())
        .map(|i| {
            let terms: Vec<(f64, f64)> = (0..matrix.n())
                .filter_map(|j| {
                    let w = match weighting {
                        Weighting::Binary => f64::from(u8::from(matrix.is_set(i, j))),
                        Weighting::Probability => matrix.value(i, j),
                    };
                    (w > 0.0).then_some((w, z[j]))
                })
                .collect();
            if terms.is_empty() {
                return None;
            }
            let mass: f64 = terms.iter().map(|(w, _)| w).sum();
            let weighted: f64 = terms.iter().map(|(w, z)| w * z).sum();
            Some(match aggregation {
                Aggregation::Sum => weighted,
                Aggregation::Mean => weighted / mass,
                Aggregation::Softmax => {
                    let top = terms
                        .iter()
                        .map(|(_, z)| z / temperature)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let (num, den) = terms.iter().fold((0.0, 0.0), |(num, den), (w, z)| {
                        let e = w * (z / temperature - top).exp();
                        (num + e * z, den + e)
                    });
                    num / den
                }
            })
        })
        .collect()
}

/// Contents with the `k` largest importances; ties go to the lower row.
pub fn qb_weighted(
    questions: &EmbeddingMatrix,
    q0: &[f64],
    matrix: &AnswerabilityMatrix,
    weighting: Weighting,
    aggregation: Aggregation,
    temperature: f64,
    k: usize,
) -> Result<Vec<Pick>, RetrievalError> {
    check_k(k, matrix.m())?;
    check_columns(questions, matrix)?;
    let q = unit_query(q0)?;
    let z = questions.similarities(&q)?;
    let u = content_importance(&z, matrix, weighting, aggregation, temperature);
    let mut reachable: Vec<(usize, f64)> = u.iter().enumerate().filter_map(|(i, u)| u.map(|u| (i, u))).collect();
    reachable.sort_by(|a, b| score_cmp(b.1, a.1).then(a.0.cmp(&b.0)));
    Ok(reachable
        .into_iter()
        .take(k)
        .map(|(content, score)| Pick {
            content,
            question: None,
            score,
            tie_break: TieBreak::None,
        })
        .collect())
}

/// Iterative projection, with the query direction state after each pick.
#[derive(Debug, Clone)]
pub struct IterProjRun {
    pub picks: Vec<Pick>,
    /// `q̄` in effect right after each accepted pick.
    pub residuals: Vec<Vec<f64>>,
    /// Embeddings of the matched questions removed from the query, in order.
    pub removed: Vec<Vec<f64>>,
    /// Pick index from which the walk fell back to plain vanilla order.
    pub fallback_at: Option<usize>,
}

/// Pick the best question for the current residual query; after each new
/// content, remove its matched question's direction from the query.
pub fn qb_iterproj(
    questions: &EmbeddingMatrix,
    q0: &[f64],
    ties: &TieContext<'_>,
    k: usize,
    seed: u64,
) -> Result<IterProjRun, RetrievalError> {
    check_k(k, ties.matrix.m())?;
    check_columns(questions, ties.matrix)?;
    let q0 = unit_query(q0)?;
    let base_z = questions.similarities(&q0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = OrthoBasis::new(q0.len());
    let mut q_bar = q0.clone();
    let mut z = base_z.clone();
    let mut masked = vec![false; questions.len()];
    let mut selected = vec![false; ties.matrix.m()];
    let mut run = IterProjRun {
        picks: Vec::with_capacity(k),
        residuals: Vec::with_capacity(k),
        removed: Vec::with_capacity(k),
        fallback_at: None,
    };
    while run.picks.len() < k {
        let best = (0..z.len())
            .filter(|&j| !masked[j])
            .max_by(|&a, &b| score_cmp(z[a], z[b]).then(b.cmp(&a)));
        let Some(j) = best else { break };
        masked[j] = true;
        let Some((i, tie_break)) = ties.choose(j, &selected, &mut rng) else {
            continue;
        };
        selected[i] = true;
        run.picks.push(Pick {
            content: i,
            question: Some(j),
            score: z[j],
            tie_break,
        });
        if run.fallback_at.is_none() {
            let qj = questions.column(j);
            basis.push(qj)?;
            run.removed.push(qj.to_vec());
            q_bar = basis.residual(&q0)?;
            if norm(&q_bar) < DEPENDENT_NORM {
                run.fallback_at = Some(run.picks.len());
                z = base_z.clone();
            } else {
                z = questions.similarities(&q_bar)?;
            }
        }
        run.residuals.push(q_bar.clone());
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::MatrixKind;
    use crate::vector::{dot, EmbeddingVector};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::collections::BTreeSet;

    fn emat(cols: &[Vec<f64>]) -> EmbeddingMatrix {
        let d = cols[0].len();
        EmbeddingMatrix::from_columns(
            d,
            cols.iter()
                .enumerate()
                .map(|(j, c)| (format!("x{j}"), normalize(c).unwrap())),
        )
        .unwrap()
    }

    fn random_cols(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    fn identity(n: usize) -> AnswerabilityMatrix {
        AnswerabilityMatrix::observed(n, &(0..n).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn naive_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cols = random_cols(&mut rng, 5, 8);
        let c = emat(&cols);
        let q: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let got: Vec<usize> = naive(&c, &q, 5).unwrap().iter().map(|s| s.index).collect();
        let qn = normalize(&q).unwrap();
        let mut expected: Vec<(usize, f64)> = (0..5).map(|i| (i, dot(c.column(i), &qn))).collect();
        expected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        assert_eq!(got, expected.iter().map(|e| e.0).collect::<Vec<_>>());
        assert!(matches!(naive(&c, &q, 0), Err(RetrievalError::InvalidK)));
        assert!(matches!(naive(&c, &q, 6), Err(RetrievalError::KTooLarge { .. })));
    }

    #[test]
    fn identity_walk_follows_z_order() {
        let z = [0.1, 0.9, 0.5, 0.7];
        let a = identity(4);
        let created = [0; 4];
        let picks = vanilla_walk(&z, &TieContext::new(&a, &created), 3, 0);
        let got: Vec<usize> = picks.iter().map(|p| p.content).collect();
        assert_eq!(got, vec![1, 3, 2]);
        assert!(picks.iter().all(|p| p.tie_break == TieBreak::None));
    }

    #[test]
    fn duplicate_contents_collapse() {
        // questions 0 and 1 both come from content 0; question 2 from content 1
        let a = AnswerabilityMatrix::observed(3, &[0, 0, 1]).unwrap();
        let z = [0.9, 0.8, 0.3];
        let created = [0; 3];
        let picks = vanilla_walk(&z, &TieContext::new(&a, &created), 2, 0);
        assert_eq!(
            picks.iter().map(|p| (p.content, p.question)).collect::<Vec<_>>(),
            vec![(0, Some(0)), (1, Some(2))]
        );
    }

    fn oracle(m: usize, n: usize, ones: &[(usize, usize)]) -> AnswerabilityMatrix {
        AnswerabilityMatrix::binary(MatrixKind::Oracle, m, n, ones.iter().copied().collect()).unwrap()
    }

    #[test]
    fn newer_content_wins() {
        let a = oracle(2, 1, &[(0, 0), (1, 0)]);
        let created = [10, 20];
        let picks = vanilla_walk(&[1.0], &TieContext::new(&a, &created), 1, 0);
        assert_eq!((picks[0].content, picks[0].tie_break), (1, TieBreak::Newer));
    }

    #[test]
    fn then_more_questions_then_random() {
        // same age; row 1 answers two questions
        let a = oracle(2, 2, &[(0, 0), (1, 0), (1, 1)]);
        let created = [5, 5];
        let picks = vanilla_walk(&[1.0, 0.5], &TieContext::new(&a, &created), 1, 0);
        assert_eq!((picks[0].content, picks[0].tie_break), (1, TieBreak::MoreQuestions));

        let a = oracle(3, 1, &[(0, 0), (1, 0), (2, 0)]);
        let created = [5, 5, 5];
        let ctx = TieContext::new(&a, &created);
        let mut seen = BTreeSet::new();
        for seed in 0..40 {
            let p = vanilla_walk(&[1.0], &ctx, 1, seed);
            assert_eq!(p[0].tie_break, TieBreak::Random);
            seen.insert(p[0].content);
            assert_eq!(p, vanilla_walk(&[1.0], &ctx, 1, seed));
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn unreachable_contents_shorten_results() {
        let a = AnswerabilityMatrix::observed(3, &[0, 0]).unwrap();
        let created = [0; 3];
        assert_eq!(vanilla_walk(&[0.5, 0.4], &TieContext::new(&a, &created), 3, 0).len(), 1);
    }

    #[test]
    fn weighted_hand_computed() {
        // 3 contents × 5 questions
        let a = oracle(3, 5, &[(0, 0), (0, 1), (1, 1), (1, 2), (1, 3), (2, 4)]);
        let z = [0.5, 0.2, -0.1, 0.4, 0.3];
        let u = content_importance(&z, &a, Weighting::Binary, Aggregation::Sum, 0.1);
        let expected = [0.7, 0.5, 0.3];
        for (got, want) in u.iter().zip(expected) {
            assert!((got.unwrap() - want).abs() < 1e-12);
        }
        let mean = content_importance(&z, &a, Weighting::Binary, Aggregation::Mean, 0.1);
        assert!((mean[1].unwrap() - 0.5 / 3.0).abs() < 1e-12);
        let soft = content_importance(&z, &a, Weighting::Binary, Aggregation::Softmax, 0.1);
        let (e1, e2) = ((0.5f64 / 0.1).exp(), (0.2f64 / 0.1).exp());
        assert!((soft[0].unwrap() - (e1 * 0.5 + e2 * 0.2) / (e1 + e2)).abs() < 1e-12);
    }

    #[test]
    fn all_ones_ties_break_by_row() {
        let ones: Vec<(usize, usize)> = (0..4).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
        let a = oracle(4, 3, &ones);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = emat(&random_cols(&mut rng, 3, 6));
        let q0: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let picks = qb_weighted(&q, &q0, &a, Weighting::Binary, Aggregation::Sum, 0.1, 3).unwrap();
        assert_eq!(picks.iter().map(|p| p.content).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn probability_weighting_uses_raw_values() {
        let a = AnswerabilityMatrix::estimate(2, 2, vec![0.9, 0.0, 0.2, 0.6], 0.5).unwrap();
        let z = [1.0, 0.5];
        let u = content_importance(&z, &a, Weighting::Probability, Aggregation::Sum, 0.1);
        assert!((u[0].unwrap() - 0.9).abs() < 1e-12);
        assert!((u[1].unwrap() - 0.5).abs() < 1e-12);
        let b = content_importance(&z, &a, Weighting::Binary, Aggregation::Sum, 0.1);
        assert_eq!(b[1], Some(0.5));
    }

    #[test]
    fn iterproj_first_pick_matches_vanilla() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = emat(&random_cols(&mut rng, 12, 8));
        let gens: Vec<usize> = (0..12).map(|j| j % 5).collect();
        let a = AnswerabilityMatrix::observed(5, &gens).unwrap();
        let created = [0; 5];
        let ctx = TieContext::new(&a, &created);
        let q0: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let v = qb_vanilla(&q, &q0, &ctx, 1, 3).unwrap();
        let p = qb_iterproj(&q, &q0, &ctx, 1, 3).unwrap();
        assert_eq!(v, p.picks);
    }

    #[test]
    fn projection_diversifies_the_second_pick() {
        // q0 = e1. Questions 0 and 1 are near-duplicates close to q0 and map
        // to contents 0 and 1; question 2 is orthogonal to them and maps to content 2.
        let q = emat(&[vec![1.0, 0.05, 0.0], vec![1.0, -0.05, 0.0], vec![0.6, 0.0, 0.8]]);
        let a = AnswerabilityMatrix::observed(3, &[0, 1, 2]).unwrap();
        let created = [0; 3];
        let ctx = TieContext::new(&a, &created);
        let q0 = [1.0, 0.0, 0.1];
        let vanilla: Vec<usize> = qb_vanilla(&q, &q0, &ctx, 2, 0)
            .unwrap()
            .iter()
            .map(|p| p.content)
            .collect();
        assert_eq!(vanilla, vec![0, 1]);
        // After removing q̂0 ≈ e1 the residual points along e2 and e3; by hand
        // z(q1) < z(q2) for that residual.
        let run = qb_iterproj(&q, &q0, &ctx, 2, 0).unwrap();
        let picked: Vec<usize> = run.picks.iter().map(|p| p.content).collect();
        assert_eq!(picked, vec![0, 2]);
        let r = &run.residuals[0];
        assert!(dot(r, q.column(2)) > dot(r, q.column(1)));
    }

    #[test]
    fn spanned_query_falls_back_to_vanilla_order() {
        // q0 equals the first question, so one projection spans it.
        let q = emat(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.5, 0.0, 0.5],
            vec![0.0, 0.0, 1.0],
        ]);
        let a = identity(4);
        let created = [0; 4];
        let ctx = TieContext::new(&a, &created);
        let q0 = [2.0, 0.0, 0.0];
        let run = qb_iterproj(&q, &q0, &ctx, 4, 0).unwrap();
        assert_eq!(run.fallback_at, Some(1));
        let vanilla: Vec<usize> = qb_vanilla(&q, &q0, &ctx, 4, 0)
            .unwrap()
            .iter()
            .map(|p| p.content)
            .collect();
        assert_eq!(run.picks.iter().map(|p| p.content).collect::<Vec<_>>(), vanilla);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn vanilla_prefix_and_scale_invariance(seed in 0u64..10_000, k in 1usize..6, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 6;
            let n = 15;
            let q = emat(&random_cols(&mut rng, n, 8));
            let gens: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            let mut ones: BTreeSet<(usize, usize)> = gens.iter().enumerate().map(|(j, &i)| (i, j)).collect();
            for j in 0..n {
                if rng.random::<f64>() < 0.2 {
                    ones.insert((rng.random_range(0..m), j));
                }
            }
            let a = AnswerabilityMatrix::binary(MatrixKind::Oracle, m, n, ones).unwrap();
            let created: Vec<i64> = (0..m).map(|_| rng.random_range(0..2)).collect();
            let ctx = TieContext::new(&a, &created);
            let q0: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
            let scaled: Vec<f64> = q0.iter().map(|x| x * scale).collect();
            let small = qb_vanilla(&q, &q0, &ctx, k, seed).unwrap();
            let large = qb_vanilla(&q, &q0, &ctx, k + 1, seed).unwrap();
            prop_assert_eq!(&small[..], &large[..small.len()]);
            let contents = |p: &[Pick]| p.iter().map(|p| p.content).collect::<Vec<_>>();
            prop_assert_eq!(contents(&small), contents(&qb_vanilla(&q, &scaled, &ctx, k, seed).unwrap()));
            prop_assert_eq!(
                contents(&qb_iterproj(&q, &q0, &ctx, k, seed).unwrap().picks),
                contents(&qb_iterproj(&q, &scaled, &ctx, k, seed).unwrap().picks)
            );
            for agg in [Aggregation::Sum, Aggregation::Mean, Aggregation::Softmax] {
                prop_assert_eq!(
                    contents(&qb_weighted(&q, &q0, &a, Weighting::Binary, agg, 0.1, k).unwrap()),
                    contents(&qb_weighted(&q, &scaled, &a, Weighting::Binary, agg, 0.1, k).unwrap())
                );
            }
            let distinct: BTreeSet<usize> = contents(&large).into_iter().collect();
            prop_assert_eq!(distinct.len(), large.len());
        }

        #[test]
        fn residual_is_orthogonal_after_each_pick(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = emat(&random_cols(&mut rng, 20, 6));
            let gens: Vec<usize> = (0..20).map(|j| j % 8).collect();
            let a = AnswerabilityMatrix::observed(8, &gens).unwrap();
            let created = vec![0; 8];
            let ctx = TieContext::new(&a, &created);
            let q0 = EmbeddingVector::from_raw((0..6).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let run = qb_iterproj(&q, &q0, &ctx, 8, seed).unwrap();
            for (step, r) in run.residuals.iter().enumerate() {
                if run.fallback_at.is_some_and(|f| step + 1 >= f) {
                    break;
                }
                for u in &run.removed[..=step] {
                    prop_assert!(dot(r, u).abs() <= 1e-6);
                }
            }
        }
    }
}
