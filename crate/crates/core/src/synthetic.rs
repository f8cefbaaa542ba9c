//! Planted-vector corpora where contents and questions live in shifted
//! regions of the embedding space, so question-to-question matching has an
//! advantage over question-to-content matching.
//!
//! Each content is a random unit vector `c`. Its questions, and the hidden
//! questions that seed test queries, are
//! `normalize((1 − α)·c + α·n + o)` with `o` one offset shared by every
//! question. The noise `n` is drawn from a small per-content pool of random
//! unit directions, so a content's questions cover a few distinct facets and
//! sparse question sets leave some facets unmatched. A test query is
//! `normalize(q + β·n')` for a fresh hidden question `q` and random unit `n'`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::clients::{ClientError, Embedder};
use crate::eval::{Origin, TestCase};
use crate::kb::{Answerable, KbError, KnowledgeBase};
use crate::vector::{normalize, EmbeddingMatrix, EmbeddingVector};

#[derive(Debug, Clone, PartialEq)]
pub struct MisalignmentConfig {
    pub dim: usize,
    pub contents: usize,
    pub questions_per_content: usize,
    pub queries: usize,
    /// Weight of per-question noise.
    pub alpha: f64,
    /// Length of the offset shared by all questions and queries.
    pub offset: f64,
    /// Weight of the noise separating a query from its hidden question.
    pub query_noise: f64,
    /// Size of each content's pool of question noise directions; 0 draws
    /// every question's noise independently.
    pub facets: usize,
    pub seed: u64,
}

impl Default for MisalignmentConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            contents: 50,
            questions_per_content: 8,
            queries: 200,
            alpha: 0.4,
            offset: 0.6,
            query_noise: 1.2,
            facets: 3,
            seed: 1,
        }
    }
}

/// Embedder that returns planted vectors for known texts.
#[derive(Debug, Clone)]
pub struct PlantedEmbedder {
    dim: usize,
    vectors: HashMap<String, EmbeddingVector>,
}

impl PlantedEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, text: impl Into<String>, v: EmbeddingVector) {
        self.vectors.insert(text.into(), v);
    }
}

impl Embedder for PlantedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        texts
            .iter()
            .map(|t| {
                self.vectors
                    .get(t)
                    .cloned()
                    .ok_or_else(|| ClientError::BadResponse(format!("no planted vector for {t:?}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    /// Every question is marked answerable and all vectors are installed.
    pub kb: KnowledgeBase,
    pub cases: Vec<TestCase>,
    /// Knows the vector of every query text.
    pub embedder: PlantedEmbedder,
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&raw).expect("gaussian draw is nonzero").into_inner()
}

fn mix(parts: &[(f64, &[f64])]) -> EmbeddingVector {
    let dim = parts[0].1.len();
    let mut out = vec![0.0; dim];
    for (w, v) in parts {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    normalize(&out).expect("mixture is nonzero")
}

pub fn misalignment_corpus(cfg: &MisalignmentConfig) -> Result<SyntheticCorpus, KbError> {
    if cfg.dim == 0 || cfg.contents == 0 || cfg.questions_per_content == 0 {
        return Err(KbError::Invalid("synthetic corpus needs a positive size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let offset: Vec<f64> = unit(&mut rng, cfg.dim).into_iter().map(|x| x * cfg.offset).collect();
    let contents: Vec<Vec<f64>> = (0..cfg.contents).map(|_| unit(&mut rng, cfg.dim)).collect();
    let facets: Vec<Vec<Vec<f64>>> = (0..cfg.contents)
        .map(|_| (0..cfg.facets).map(|_| unit(&mut rng, cfg.dim)).collect())
        .collect();
    let question = |rng: &mut ChaCha8Rng, i: usize| {
        let n = if cfg.facets == 0 {
            unit(rng, cfg.dim)
        } else {
            facets[i][rng.random_range(0..cfg.facets)].clone()
        };
        mix(&[(1.0 - cfg.alpha, &contents[i]), (cfg.alpha, &n), (1.0, &offset)])
    };

    let mut kb = KnowledgeBase::new();
    let mut content_vecs = Vec::new();
    let mut question_vecs = Vec::new();
    for (i, c) in contents.iter().enumerate() {
        let id = kb.add_content(&format!("synthetic content {i}"), i as i64)?;
        content_vecs.push((id.clone(), normalize(c).expect("unit")));
        for j in 0..cfg.questions_per_content {
            let qid = kb.attach_question(&id, &format!("synthetic question {i}.{j}"))?;
            question_vecs.push((qid, question(&mut rng, i)));
        }
    }
    for p in 0..question_vecs.len() {
        kb.set_answerable(p, Answerable::Yes);
    }
    let vec_err = |e: crate::vector::VectorError| KbError::Invalid(e.to_string());
    kb.set_content_embeddings(EmbeddingMatrix::from_columns(cfg.dim, content_vecs).map_err(vec_err)?)?;
    kb.set_question_embeddings(EmbeddingMatrix::from_columns(cfg.dim, question_vecs).map_err(vec_err)?)?;

    let mut embedder = PlantedEmbedder::new(cfg.dim);
    let mut cases = Vec::with_capacity(cfg.queries);
    for t in 0..cfg.queries {
        let i = rng.random_range(0..cfg.contents);
        let hidden = question(&mut rng, i).into_inner();
        let n = unit(&mut rng, cfg.dim);
        let text = format!("synthetic query {t}");
        embedder.insert(text.clone(), mix(&[(1.0, &hidden), (cfg.query_noise, &n)]));
        cases.push(TestCase {
            id: format!("s{t:05}"),
            question: text,
            golden_content_id: kb.contents()[i].id.clone(),
            origin: Origin::Rephrase,
        });
    }
    Ok(SyntheticCorpus { kb, cases, embedder })
}
