//! Knowledge base: contents, generated questions, their embeddings and the
//! answerability matrices linking them.
//!
//! A [`KnowledgeBase`] is mutable while it is being built. Retrieval works
//! on a [`FrozenKb`], which checks that embeddings are current and caches the
//! retrieval view (questions not judged unanswerable, their embeddings and
//! the observed matrix over them).

mod matrix;
mod store;

use std::collections::{BTreeSet, HashMap};
use std::ops::Deref;
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, Embedder};
use crate::vector::{EmbeddingMatrix, VectorError};

pub use matrix::{AnswerabilityMatrix, MatrixEntries, MatrixKind};
pub use store::{
    load, read_qbem, save, write_qbem, CONTENTS_FILE, CONTENT_EMBEDDINGS_FILE, MATRIX_FILE, QUESTIONS_FILE,
    QUESTION_EMBEDDINGS_FILE,
};

#[derive(Debug, Error)]
pub enum KbError {
    #[error("content text is empty")]
    EmptyText,
    #[error("unknown content id {0:?}")]
    UnknownContent(String),
    #[error("target {target} exceeds current average of {current:.4} questions per content")]
    TargetTooHigh { target: f64, current: f64 },
    #[error("target average must be positive, got {0}")]
    InvalidTarget(f64),
    #[error("embeddings are stale; run an embedding pass first")]
    EmbeddingsStale,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {file} at {location}: {message}")]
    Format {
        file: String,
        location: String,
        message: String,
    },
    #[error("checksum mismatch in {file}: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { file: String, stored: u32, computed: u32 },
    #[error("invalid knowledge base: {0}")]
    Invalid(String),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("embedding failed: {0}")]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Content {
    pub id: String,
    pub text: String,
    pub created_at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Answerable {
    #[default]
    Unfiltered,
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub content_id: String,
    pub text: String,
    pub answerable: Answerable,
}

impl Question {
    /// Questions judged unanswerable stay in the store but are not retrievable.
    pub fn is_active(&self) -> bool {
        self.answerable != Answerable::No
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    contents: Vec<Content>,
    questions: Vec<Question>,
    content_index: HashMap<String, usize>,
    content_embeddings: Option<EmbeddingMatrix>,
    question_embeddings: Option<EmbeddingMatrix>,
    /// Oracle or estimate over the active questions; `None` means the
    /// observed matrix is the only one available.
    matrix: Option<AnswerabilityMatrix>,
    next_question: usize,
}

impl Default for KnowledgeBase {
    fn default() -> Self {
        Self::new()
    }
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self {
            contents: Vec::new(),
            questions: Vec::new(),
            content_index: HashMap::new(),
            content_embeddings: None,
            question_embeddings: None,
            matrix: None,
            next_question: 0,
        }
    }

    pub fn content_id(ordinal: usize) -> String {
        format!("c{ordinal:06}")
    }

    pub fn question_id(ordinal: usize) -> String {
        format!("q{ordinal:06}")
    }

    /// Append a content. Embeddings become stale until the next embedding pass.
    pub fn add_content(&mut self, text: &str, created_at: i64) -> Result<String, KbError> {
        if text.trim().is_empty() {
            return Err(KbError::EmptyText);
        }
        let id = Self::content_id(self.contents.len());
        self.content_index.insert(id.clone(), self.contents.len());
        self.contents.push(Content {
            id: id.clone(),
            text: text.to_string(),
            created_at,
        });
        self.matrix = None;
        Ok(id)
    }

    /// Append a question generated from `content_id`.
    pub fn attach_question(&mut self, content_id: &str, text: &str) -> Result<String, KbError> {
        if !self.content_index.contains_key(content_id) {
            return Err(KbError::UnknownContent(content_id.to_string()));
        }
        if text.trim().is_empty() {
            return Err(KbError::EmptyText);
        }
        let id = Self::question_id(self.next_question);
        self.next_question += 1;
        self.questions.push(Question {
            id: id.clone(),
            content_id: content_id.to_string(),
            text: text.to_string(),
            answerable: Answerable::Unfiltered,
        });
        self.matrix = None;
        Ok(id)
    }

    /// Drop every question (and the question embeddings and any estimate).
    pub fn clear_questions(&mut self) {
        self.questions.clear();
        self.question_embeddings = None;
        self.matrix = None;
        self.next_question = 0;
    }

    pub fn set_answerable(&mut self, position: usize, verdict: Answerable) {
        if self.questions[position].answerable != verdict {
            self.questions[position].answerable = verdict;
            self.matrix = None;
        }
    }

    pub fn contents(&self) -> &[Content] {
        &self.contents
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn content(&self, id: &str) -> Option<&Content> {
        self.content_position(id).map(|i| &self.contents[i])
    }

    pub fn content_position(&self, id: &str) -> Option<usize> {
        self.content_index.get(id).copied()
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    /// Positions (into [`questions`](Self::questions)) of retrievable questions.
    pub fn active_positions(&self) -> Vec<usize> {
        (0..self.questions.len())
            .filter(|&j| self.questions[j].is_active())
            .collect()
    }

    /// Average retrievable questions per content (`m̄`).
    pub fn mean_questions_per_content(&self) -> f64 {
        if self.contents.is_empty() {
            return 0.0;
        }
        self.active_positions().len() as f64 / self.contents.len() as f64
    }

    /// Observed `A` over the active questions.
    pub fn observed_matrix(&self) -> AnswerabilityMatrix {
        let generators: Vec<usize> = self
            .active_positions()
            .iter()
            .map(|&j| self.content_index[&self.questions[j].content_id])
            .collect();
        AnswerabilityMatrix::observed(self.contents.len(), &generators)
            .expect("question content ids are validated on insert")
    }

    /// Contents without any retrievable question.
    pub fn uncovered_contents(&self) -> Vec<String> {
        let mut covered = vec![false; self.contents.len()];
        for q in self.questions.iter().filter(|q| q.is_active()) {
            covered[self.content_index[&q.content_id]] = true;
        }
        self.contents
            .iter()
            .zip(covered)
            .filter(|(_, c)| !c)
            .map(|(c, _)| c.id.clone())
            .collect()
    }

    pub fn matrix(&self) -> Option<&AnswerabilityMatrix> {
        self.matrix.as_ref()
    }

    /// Install an oracle or estimate matrix over the active questions.
    pub fn set_matrix(&mut self, matrix: AnswerabilityMatrix) -> Result<(), KbError> {
        let n = self.active_positions().len();
        if matrix.m() != self.contents.len() || matrix.n() != n {
            return Err(KbError::Invalid(format!(
                "matrix is {}×{}, knowledge base is {}×{n}",
                matrix.m(),
                matrix.n(),
                self.contents.len()
            )));
        }
        self.matrix = match matrix.kind() {
            MatrixKind::Observed => None,
            _ => Some(matrix),
        };
        Ok(())
    }

    pub fn content_embeddings(&self) -> Option<&EmbeddingMatrix> {
        self.content_embeddings.as_ref()
    }

    pub fn question_embeddings(&self) -> Option<&EmbeddingMatrix> {
        self.question_embeddings.as_ref()
    }

    pub fn embeddings_fresh(&self) -> bool {
        let aligned = |m: &Option<EmbeddingMatrix>, ids: Vec<&str>| match m {
            Some(m) => m.ids().iter().map(String::as_str).eq(ids),
            None => ids.is_empty(),
        };
        aligned(
            &self.content_embeddings,
            self.contents.iter().map(|c| c.id.as_str()).collect(),
        ) && aligned(
            &self.question_embeddings,
            self.questions.iter().map(|q| q.id.as_str()).collect(),
        ) && self.embedding_dim_consistent()
    }

    fn embedding_dim_consistent(&self) -> bool {
        match (&self.content_embeddings, &self.question_embeddings) {
            (Some(c), Some(q)) => c.dim() == q.dim(),
            _ => true,
        }
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.content_embeddings
            .as_ref()
            .or(self.question_embeddings.as_ref())
            .map(|m| m.dim())
    }

    /// Replace the content embeddings; ids must align with the contents.
    pub fn set_content_embeddings(&mut self, mat: EmbeddingMatrix) -> Result<(), KbError> {
        if !mat.ids().iter().eq(self.contents.iter().map(|c| &c.id)) {
            return Err(KbError::Invalid(
                "content embedding ids do not align with contents".into(),
            ));
        }
        self.content_embeddings = Some(mat);
        Ok(())
    }

    /// Replace the question embeddings; ids must align with the questions.
    pub fn set_question_embeddings(&mut self, mat: EmbeddingMatrix) -> Result<(), KbError> {
        if !mat.ids().iter().eq(self.questions.iter().map(|q| &q.id)) {
            return Err(KbError::Invalid(
                "question embedding ids do not align with questions".into(),
            ));
        }
        self.question_embeddings = Some(mat);
        Ok(())
    }

    /// Embed every content and question whose embedding is missing.
    pub fn embed_pending(&mut self, embedder: &dyn Embedder) -> Result<(), KbError> {
        let dim = embedder.dim();
        let contents = pending(
            self.content_embeddings.take(),
            dim,
            self.contents.iter().map(|c| (&c.id, &c.text)),
            embedder,
        )?;
        self.content_embeddings = Some(contents);
        let questions = pending(
            self.question_embeddings.take(),
            dim,
            self.questions.iter().map(|q| (&q.id, &q.text)),
            embedder,
        )?;
        self.question_embeddings = Some(questions);
        Ok(())
    }

    /// Subsample retrievable questions so the mean per content is about
    /// `target_mbar`. Each content keeps `round(count · target / current)`
    /// questions, at least one. Questions judged unanswerable are kept for audit.
    pub fn downsample_questions(&self, target_mbar: f64, seed: u64) -> Result<KnowledgeBase, KbError> {
        if target_mbar.is_nan() || target_mbar <= 0.0 {
            return Err(KbError::InvalidTarget(target_mbar));
        }
        let current = self.mean_questions_per_content();
        if target_mbar > current + 1e-9 {
            return Err(KbError::TargetTooHigh {
                target: target_mbar,
                current,
            });
        }
        let ratio = target_mbar / current;
        let mut per_content: Vec<Vec<usize>> = vec![Vec::new(); self.contents.len()];
        for j in self.active_positions() {
            per_content[self.content_index[&self.questions[j].content_id]].push(j);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = BTreeSet::new();
        for positions in &per_content {
            if positions.is_empty() {
                continue;
            }
            let n = positions.len();
            let target = ((n as f64 * ratio).round() as usize).clamp(1, n);
            keep.extend(sample(&mut rng, n, target).into_iter().map(|p| positions[p]));
        }
        let retained: Vec<usize> = (0..self.questions.len())
            .filter(|&j| !self.questions[j].is_active() || keep.contains(&j))
            .collect();

        let mut out = self.clone();
        out.questions = retained.iter().map(|&j| self.questions[j].clone()).collect();
        if let Some(q) = &self.question_embeddings {
            if q.len() == self.questions.len() {
                out.question_embeddings = Some(q.select(&retained));
            } else {
                out.question_embeddings = None;
            }
        }
        if let Some(matrix) = &self.matrix {
            let active_before = self.active_positions();
            let columns: Vec<usize> = active_before
                .iter()
                .enumerate()
                .filter(|(_, j)| keep.contains(j))
                .map(|(col, _)| col)
                .collect();
            out.matrix = Some(matrix.select_columns(&columns)?);
        }
        Ok(out)
    }

    /// Validate embeddings and build the read-only retrieval view.
    pub fn freeze(self) -> Result<FrozenKb, KbError> {
        if !self.embeddings_fresh() || self.content_embeddings.is_none() {
            return Err(KbError::EmbeddingsStale);
        }
        let active = self.active_positions();
        let dim = self.embedding_dim().expect("content embeddings present");
        let active_embeddings = match &self.question_embeddings {
            Some(q) => q.select(&active),
            None => EmbeddingMatrix::new(dim),
        };
        let observed = self.observed_matrix();
        Ok(FrozenKb {
            kb: self,
            active,
            active_embeddings,
            observed,
        })
    }

    fn from_parts(
        contents: Vec<Content>,
        questions: Vec<Question>,
        content_embeddings: Option<EmbeddingMatrix>,
        question_embeddings: Option<EmbeddingMatrix>,
    ) -> Result<Self, KbError> {
        let mut kb = KnowledgeBase::new();
        for c in contents {
            if c.text.trim().is_empty() {
                return Err(KbError::EmptyText);
            }
            if kb.content_index.insert(c.id.clone(), kb.contents.len()).is_some() {
                return Err(KbError::Invalid(format!("duplicate content id {:?}", c.id)));
            }
            kb.contents.push(c);
        }
        let mut seen = std::collections::HashSet::new();
        for q in &questions {
            if !kb.content_index.contains_key(&q.content_id) {
                return Err(KbError::UnknownContent(q.content_id.clone()));
            }
            if !seen.insert(q.id.clone()) {
                return Err(KbError::Invalid(format!("duplicate question id {:?}", q.id)));
            }
        }
        kb.next_question = questions
            .iter()
            .filter_map(|q| q.id.strip_prefix('q').and_then(|n| n.parse::<usize>().ok()))
            .map(|n| n + 1)
            .max()
            .unwrap_or(0)
            .max(questions.len());
        kb.questions = questions;
        if let Some(c) = content_embeddings {
            kb.set_content_embeddings(c)?;
        }
        if let Some(q) = question_embeddings {
            kb.set_question_embeddings(q)?;
        }
        Ok(kb)
    }
}

fn pending<'a>(
    existing: Option<EmbeddingMatrix>,
    dim: usize,
    items: impl Iterator<Item = (&'a String, &'a String)>,
    embedder: &dyn Embedder,
) -> Result<EmbeddingMatrix, KbError> {
    let items: Vec<_> = items.collect();
    let mut mat = match existing {
        Some(m)
            if m.dim() == dim && m.ids().iter().zip(&items).all(|(a, (b, _))| a == *b) && m.len() <= items.len() =>
        {
            m
        }
        _ => EmbeddingMatrix::new(dim),
    };
    let missing = &items[mat.len()..];
    if missing.is_empty() {
        return Ok(mat);
    }
    let texts: Vec<String> = missing.iter().map(|(_, t)| (*t).clone()).collect();
    let vectors = embedder.embed(&texts)?;
    for ((id, _), v) in missing.iter().zip(vectors) {
        mat.push((*id).clone(), v)?;
    }
    Ok(mat)
}

/// Immutable knowledge base with its retrieval view precomputed.
#[derive(Debug, Clone)]
pub struct FrozenKb {
    kb: KnowledgeBase,
    active: Vec<usize>,
    active_embeddings: EmbeddingMatrix,
    observed: AnswerabilityMatrix,
}

impl FrozenKb {
    /// Positions (into `questions()`) of each retrieval column.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// `Q` restricted to retrievable questions; column `j` is retrieval column `j`.
    pub fn active_question_embeddings(&self) -> &EmbeddingMatrix {
        &self.active_embeddings
    }

    /// `C`.
    pub fn content_matrix(&self) -> &EmbeddingMatrix {
        self.kb.content_embeddings.as_ref().expect("checked at freeze")
    }

    pub fn observed(&self) -> &AnswerabilityMatrix {
        &self.observed
    }

    pub fn active_question(&self, column: usize) -> &Question {
        &self.kb.questions[self.active[column]]
    }

    pub fn thaw(self) -> KnowledgeBase {
        self.kb
    }
}

impl Deref for FrozenKb {
    type Target = KnowledgeBase;

    fn deref(&self) -> &KnowledgeBase {
        &self.kb
    }
}
