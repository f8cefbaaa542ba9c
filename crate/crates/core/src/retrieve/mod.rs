//! The six retrieval strategies behind one call:
//! [`Retriever::retrieve`] takes a query and `k` and returns an ordered,
//! duplicate-free list of contents with a trace.

pub mod algo;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, Clients, TextGenRequest};
use crate::kb::{AnswerabilityMatrix, FrozenKb, MatrixKind};
use crate::prompts;
use crate::vector::{ScoredIndex, VectorError};

pub use algo::{IterProjRun, Pick, TieBreak, TieContext};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("k = {k} exceeds the {m} available contents")]
    KTooLarge { k: usize, m: usize },
    #[error("no {0} matrix is available")]
    MatrixMissing(MatrixSource),
    #[error("invalid strategy config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Vector(VectorError),
}

impl From<VectorError> for RetrievalError {
    fn from(e: VectorError) -> Self {
        match e {
            VectorError::InvalidK => RetrievalError::InvalidK,
            VectorError::KTooLarge { k, len } => RetrievalError::KTooLarge { k, m: len },
            other => RetrievalError::Vector(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Naive,
    Hyde,
    Qarag,
    QbVanilla,
    QbWeighted,
    QbIterproj,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Naive,
        Strategy::Hyde,
        Strategy::Qarag,
        Strategy::QbVanilla,
        Strategy::QbWeighted,
        Strategy::QbIterproj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Hyde => "hyde",
            Strategy::Qarag => "qarag",
            Strategy::QbVanilla => "qb_vanilla",
            Strategy::QbWeighted => "qb_weighted",
            Strategy::QbIterproj => "qb_iterproj",
        }
    }

    /// Whether the strategy goes through the question base.
    pub fn uses_matrix(self) -> bool {
        matches!(self, Strategy::QbVanilla | Strategy::QbWeighted | Strategy::QbIterproj)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown strategy {given:?}; expected one of naive, hyde, qarag, qb_vanilla, qb_weighted, qb_iterproj")]
pub struct UnknownStrategy {
    pub given: String,
}

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| UnknownStrategy { given: s.to_string() })
    }
}

/// Which answerability matrix the question-based strategies use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatrixSource {
    /// `A`, derived from which content generated each question.
    #[default]
    Observed,
    /// `Â` produced by the matrix builder.
    Estimate,
    /// Whatever matrix is installed in the knowledge base (an oracle `A*`
    /// or an estimate).
    Provided,
}

impl fmt::Display for MatrixSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatrixSource::Observed => "observed",
            MatrixSource::Estimate => "estimate",
            MatrixSource::Provided => "provided",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Matrix entries binarized (estimates at their stored threshold).
    #[default]
    Binary,
    /// Raw estimate probabilities as weights.
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `u = A z`.
    #[default]
    Sum,
    /// `u` divided by the row's total weight.
    Mean,
    /// Softmax-weighted mean of the row's question scores.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub matrix_source: MatrixSource,
    pub weighting: Weighting,
    pub aggregation: Aggregation,
    /// Temperature of the softmax aggregation.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::QbVanilla,
            matrix_source: MatrixSource::Observed,
            weighting: Weighting::Binary,
            aggregation: Aggregation::Sum,
            temperature: 0.1,
            seed: 0,
        }
    }
}

impl StrategyConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.weighting == Weighting::Probability && self.matrix_source != MatrixSource::Estimate {
            return Err(RetrievalError::InvalidConfig(
                "probability weighting needs matrix_source = estimate".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(RetrievalError::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub content_id: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub matched_question_id: Option<String>,
    pub tie_break: TieBreak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub strategy: Strategy,
    pub k_requested: usize,
    pub items: Vec<RetrievedItem>,
    /// Generated text embedded in place of the query (HyDE, QA-RAG).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rewrite: Option<String>,
    pub config: StrategyConfig,
}

impl RetrievalResult {
    pub fn content_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.content_id.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("retrieval result serializes")
    }
}

/// Read-only retrieval over a frozen knowledge base.
pub struct Retriever<'a> {
    kb: &'a FrozenKb,
    clients: &'a Clients,
    created_at: Vec<i64>,
}

impl<'a> Retriever<'a> {
    pub fn new(kb: &'a FrozenKb, clients: &'a Clients) -> Self {
        let created_at = kb.contents().iter().map(|c| c.created_at).collect();
        Self {
            kb,
            clients,
            created_at,
        }
    }

    pub fn matrix(&self, source: MatrixSource) -> Result<&'a AnswerabilityMatrix, RetrievalError> {
        let installed = self.kb.matrix();
        match source {
            MatrixSource::Observed => Ok(self.kb.observed()),
            MatrixSource::Estimate => installed
                .filter(|m| m.kind() == MatrixKind::Estimate)
                .ok_or(RetrievalError::MatrixMissing(source)),
            MatrixSource::Provided => installed.ok_or(RetrievalError::MatrixMissing(source)),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        Ok(self.clients.embedder.embed_one(text)?.into_inner())
    }

    fn rewrite(&self, prompt: String) -> Result<String, RetrievalError> {
        let text = self.clients.generator.generate(&TextGenRequest::new(prompt))?;
        if text.trim().is_empty() {
            return Err(ClientError::BadResponse("empty rewrite".into()).into());
        }
        Ok(text)
    }

    pub fn retrieve(&self, query: &str, k: usize, cfg: &StrategyConfig) -> Result<RetrievalResult, RetrievalError> {
        cfg.validate()?;
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let m = self.kb.contents().len();
        if k > m {
            return Err(RetrievalError::KTooLarge { k, m });
        }
        if query.trim().is_empty() {
            return Err(ClientError::EmptyInput.into());
        }
        let matrix = if cfg.strategy.uses_matrix() {
            Some(self.matrix(cfg.matrix_source)?)
        } else {
            None
        };
        let mut rewrite = None;
        let picks = match cfg.strategy {
            Strategy::Naive => naive_picks(algo::naive(self.kb.content_matrix(), &self.embed(query)?, k)?),
            Strategy::Hyde | Strategy::Qarag => {
                let prompt = if cfg.strategy == Strategy::Hyde {
                    prompts::hyde(query)
                } else {
                    prompts::pseudo_answer(query)
                };
                let text = self.rewrite(prompt)?;
                let q = self.embed(&text)?;
                rewrite = Some(text);
                naive_picks(algo::naive(self.kb.content_matrix(), &q, k)?)
            }
            Strategy::QbVanilla => {
                let ties = TieContext::new(matrix.expect("matrix strategy"), &self.created_at);
                algo::qb_vanilla(
                    self.kb.active_question_embeddings(),
                    &self.embed(query)?,
                    &ties,
                    k,
                    cfg.seed,
                )?
            }
            Strategy::QbWeighted => algo::qb_weighted(
                self.kb.active_question_embeddings(),
                &self.embed(query)?,
                matrix.expect("matrix strategy"),
                cfg.weighting,
                cfg.aggregation,
                cfg.temperature,
                k,
            )?,
            Strategy::QbIterproj => {
                let ties = TieContext::new(matrix.expect("matrix strategy"), &self.created_at);
                algo::qb_iterproj(
                    self.kb.active_question_embeddings(),
                    &self.embed(query)?,
                    &ties,
                    k,
                    cfg.seed,
                )?
                .picks
            }
        };
        let items = picks
            .into_iter()
            .map(|p| RetrievedItem {
                content_id: self.kb.contents()[p.content].id.clone(),
                score: p.score,
                matched_question_id: p.question.map(|j| self.kb.active_question(j).id.clone()),
                tie_break: p.tie_break,
            })
            .collect();
        Ok(RetrievalResult {
            query: query.to_string(),
            strategy: cfg.strategy,
            k_requested: k,
            items,
            rewrite,
            config: cfg.clone(),
        })
    }
}

fn naive_picks(scored: Vec<ScoredIndex>) -> Vec<Pick> {
    scored
        .into_iter()
        .map(|s| Pick {
            content: s.index,
            question: None,
            score: s.score,
            tie_break: TieBreak::None,
        })
        .collect()
}
