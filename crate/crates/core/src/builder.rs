//! Estimating the dense answerability matrix from the sparse observed one:
//! pick promising (content, question) pairs by embedding similarity, have the
//! judge label them, and fill in the rest by low-rank completion.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{bounded_map, TextGenerator};
use crate::kb::{AnswerabilityMatrix, KbError, KnowledgeBase};
use crate::pipeline::judge_answerability;
use crate::vector::dot;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("embeddings are missing or stale; embed the knowledge base first")]
    EmbeddingsMissing,
    #[error("percentile must lie in [0, 1], got {0}")]
    InvalidPercentile(f64),
    #[error("candidate selection is empty")]
    EmptySelection,
    #[error("no observations to complete from")]
    NoObservations,
    #[error("rank {rank} exceeds min({m}, {n})")]
    RankTooLarge { rank: usize, m: usize, n: usize },
    #[error("observation ({i}, {j}) = {value} is outside the {m}×{n} matrix or [0, 1]")]
    InvalidObservation {
        i: usize,
        j: usize,
        value: f64,
        m: usize,
        n: usize,
    },
    #[error("invalid completion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kb(#[from] KbError),
}

/// Pairs worth sending to the judge.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSelection {
    /// `(content row, question column)`, sorted.
    pub pairs: Vec<(usize, usize)>,
    /// Similarity cut-off; infinite when only observed pairs were kept.
    pub lambda: f64,
    pub percentile: f64,
}

/// Select from a row-major `m × n` similarity table. The top
/// `ceil(percentile * m * n)` values fix `lambda`; every pair at or above it
/// is kept, so ties at the boundary are all included.
pub fn select_from_similarities(
    sims: &[f64],
    m: usize,
    n: usize,
    percentile: f64,
    observed: Option<&AnswerabilityMatrix>,
) -> Result<CandidateSelection, BuildError> {
    if !(0.0..=1.0).contains(&percentile) {
        return Err(BuildError::InvalidPercentile(percentile));
    }
    assert_eq!(sims.len(), m * n, "similarity table shape");
    let count = ((percentile * (m * n) as f64).ceil() as usize).min(m * n);
    let lambda = if count == 0 {
        f64::INFINITY
    } else {
        let mut sorted = sims.to_vec();
        sorted.sort_unstable_by(|a, b| b.total_cmp(a));
        sorted[count - 1]
    };
    let mut pairs: Vec<(usize, usize)> = (0..m * n)
        .filter(|&p| sims[p] >= lambda)
        .map(|p| (p / n, p % n))
        .collect();
    if let Some(obs) = observed {
        for i in 0..m {
            for j in 0..n {
                if obs.is_set(i, j) {
                    pairs.push((i, j));
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
    }
    Ok(CandidateSelection {
        pairs,
        lambda,
        percentile,
    })
}

/// `C`ᵀ`Q` over the active questions, row-major by content.
pub fn similarity_table(kb: &KnowledgeBase) -> Result<(Vec<f64>, usize, usize), BuildError> {
    let (Some(c), Some(q)) = (kb.content_embeddings(), kb.question_embeddings()) else {
        return Err(BuildError::EmbeddingsMissing);
    };
    if !kb.embeddings_fresh() {
        return Err(BuildError::EmbeddingsMissing);
    }
    let q = q.select(&kb.active_positions());
    let (m, n) = (c.len(), q.len());
    let mut sims = Vec::with_capacity(m * n);
    for ci in c.columns() {
        sims.extend(q.columns().map(|qj| dot(ci, qj)));
    }
    Ok((sims, m, n))
}

pub fn select_candidates(
    kb: &KnowledgeBase,
    percentile: f64,
    include_observed: bool,
) -> Result<CandidateSelection, BuildError> {
    let (sims, m, n) = similarity_table(kb)?;
    let observed = include_observed.then(|| kb.observed_matrix());
    select_from_similarities(&sims, m, n, percentile, observed.as_ref())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeFailure {
    pub i: usize,
    pub j: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedCandidates {
    pub observations: Vec<Observation>,
    /// Pairs whose verdict could not be obtained; they stay unobserved.
    pub failures: Vec<JudgeFailure>,
    pub judge_calls: usize,
}

/// Label every selected pair. Observed pairs are 1 by construction and never
/// reach the judge; judge errors leave the pair unobserved.
pub fn evaluate_candidates(
    judge: &dyn TextGenerator,
    kb: &KnowledgeBase,
    selection: &CandidateSelection,
    max_parallel: usize,
) -> Result<EvaluatedCandidates, BuildError> {
    if selection.pairs.is_empty() {
        return Err(BuildError::EmptySelection);
    }
    let observed = kb.observed_matrix();
    let active = kb.active_positions();
    let to_judge: Vec<(usize, usize)> = selection
        .pairs
        .iter()
        .copied()
        .filter(|&(i, j)| !observed.is_set(i, j))
        .collect();
    let verdicts = bounded_map(&to_judge, max_parallel, |_, &(i, j)| {
        let question = &kb.questions()[active[j]].text;
        let content = &kb.contents()[i].text;
        judge_answerability(judge, question, content)
    });
    let mut labelled: BTreeMap<(usize, usize), f64> = selection
        .pairs
        .iter()
        .filter(|&&(i, j)| observed.is_set(i, j))
        .map(|&p| (p, 1.0))
        .collect();
    let mut failures = Vec::new();
    for (&(i, j), verdict) in to_judge.iter().zip(verdicts) {
        match verdict {
            Ok(v) => {
                labelled.insert((i, j), if v.answerable { 1.0 } else { 0.0 });
            }
            Err(e) => failures.push(JudgeFailure {
                i,
                j,
                error: e.to_string(),
            }),
        }
    }
    Ok(EvaluatedCandidates {
        observations: labelled
            .into_iter()
            .map(|((i, j), value)| Observation { i, j, value })
            .collect(),
        failures,
        judge_calls: to_judge.len(),
    })
}

pub fn write_failures(path: &Path, failures: &[JudgeFailure]) -> Result<(), BuildError> {
    let io = |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for f in failures {
        writeln!(w, "{}", serde_json::to_string(f).expect("failure serializes")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionConfig {
    pub rank: usize,
    pub regularization: f64,
    pub iterations: usize,
    pub binarize_threshold: f64,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            regularization: 1e-2,
            iterations: 50,
            binarize_threshold: 0.5,
            seed: 0,
        }
    }
}

impl CompletionConfig {
    /// Checks that need only the target shape, so callers can fail before
    /// spending any judge calls.
    pub fn validate(&self, m: usize, n: usize) -> Result<(), BuildError> {
        if self.rank == 0 || self.rank > m.min(n) {
            return Err(BuildError::RankTooLarge { rank: self.rank, m, n });
        }
        if !(self.regularization > 0.0 && self.regularization.is_finite()) {
            return Err(BuildError::InvalidConfig("regularization must be positive".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(BuildError::InvalidConfig(
                "binarize_threshold must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub estimate: AnswerabilityMatrix,
    /// Objective before the first sweep, then after each sweep.
    pub objective: Vec<f64>,
}

/// Ridge solve `(Σ f fᵀ + λI) x = Σ v f` over the given `(factor row, value)` pairs.
fn ridge_row(factors: &DMatrix<f64>, terms: &[(usize, f64)], reg: f64) -> DVector<f64> {
    let r = factors.ncols();
    let mut gram = DMatrix::<f64>::identity(r, r) * reg;
    let mut rhs = DVector::<f64>::zeros(r);
    for &(k, v) in terms {
        let f = factors.row(k).transpose();
        gram += &f * f.transpose();
        rhs += &f * v;
    }
    gram.cholesky().expect("ridge system is positive definite").solve(&rhs)
}

fn objective(p: &DMatrix<f64>, w: &DMatrix<f64>, obs: &[Observation], reg: f64) -> f64 {
    let fit: f64 = obs
        .iter()
        .map(|o| {
            let pred = p.row(o.i).dot(&w.row(o.j));
            (pred - o.value).powi(2)
        })
        .sum();
    fit + reg * (p.norm_squared() + w.norm_squared())
}

/// Factors from the truncated SVD of the zero-filled observations, rescaled
/// by the observed fraction, plus a small seeded jitter so that no factor
/// column starts exactly at zero.
fn spectral_init(obs: &[Observation], m: usize, n: usize, r: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let fraction = obs.len() as f64 / (m * n) as f64;
    let mut y = DMatrix::<f64>::zeros(m, n);
    for o in obs {
        y[(o.i, o.j)] = o.value / fraction;
    }
    let svd = y.svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let u = svd.u.expect("requested u");
    let v_t = svd.v_t.expect("requested v_t");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = || (rng.random::<f64>() - 0.5) * 1e-3;
    let mut p = DMatrix::<f64>::zeros(m, r);
    let mut w = DMatrix::<f64>::zeros(n, r);
    for (k, &c) in order.iter().take(r).enumerate() {
        let s = svd.singular_values[c].sqrt();
        for i in 0..m {
            p[(i, k)] = u[(i, c)] * s + jitter();
        }
        for j in 0..n {
            w[(j, k)] = v_t[(c, j)] * s + jitter();
        }
    }
    (p, w)
}

/// Alternating least squares on `P Wᵀ`, fitting only the observed entries.
/// The result is clamped to `[0, 1]` and observed entries are restored
/// exactly. Duplicate observations keep the last value.
pub fn complete_matrix(
    observations: &[Observation],
    m: usize,
    n: usize,
    cfg: &CompletionConfig,
) -> Result<Completion, BuildError> {
    if observations.is_empty() {
        return Err(BuildError::NoObservations);
    }
    cfg.validate(m, n)?;
    let mut dedup: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for o in observations {
        if o.i >= m || o.j >= n || !(0.0..=1.0).contains(&o.value) {
            return Err(BuildError::InvalidObservation {
                i: o.i,
                j: o.j,
                value: o.value,
                m,
                n,
            });
        }
        dedup.insert((o.i, o.j), o.value);
    }
    let obs: Vec<Observation> = dedup
        .iter()
        .map(|(&(i, j), &value)| Observation { i, j, value })
        .collect();
    let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for o in &obs {
        by_row[o.i].push((o.j, o.value));
        by_col[o.j].push((o.i, o.value));
    }

    let r = cfg.rank;
    let (mut p, mut w) = spectral_init(&obs, m, n, r, cfg.seed);
    let reg = cfg.regularization;

    let mut history = vec![objective(&p, &w, &obs, reg)];
    for _ in 0..cfg.iterations {
        for (i, terms) in by_row.iter().enumerate() {
            let x = ridge_row(&w, terms, reg);
            p.set_row(i, &x.transpose());
        }
        for (j, terms) in by_col.iter().enumerate() {
            let x = ridge_row(&p, terms, reg);
            w.set_row(j, &x.transpose());
        }
        history.push(objective(&p, &w, &obs, reg));
    }

    let product = &p * w.transpose();
    let mut probs = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            probs.push(product[(i, j)].clamp(0.0, 1.0));
        }
    }
    for o in &obs {
        probs[o.i * n + o.j] = o.value;
    }
    Ok(Completion {
        estimate: AnswerabilityMatrix::estimate(m, n, probs, cfg.binarize_threshold)?,
        objective: history,
    })
}
