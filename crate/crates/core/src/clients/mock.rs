//! Deterministic stand-ins for the model services.
//!
//! * [`MockEmbedder`] hashes character 3-grams and projects the count vector
//!   through a seeded Gaussian matrix, so identical texts get identical
//!   vectors and near-duplicates land close together.
//! * [`MockGenerator`] recognizes each bundled prompt template and answers
//!   with a rule keyed on mock-embedding cosine. Answerability prompts obey
//!   the sentinels `REL:YES` / `REL:NO` when either appears in the question
//!   or content.
//! * [`MockScorer`] maps mock cosine through a logit.
//!
//! All three are pure functions of their inputs and seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ClientError, Embedder, PairScorer, TextGenRequest, TextGenerator};
use crate::prompts::{PromptKind, DECLINE_CANNOT_DETERMINE, DECLINE_DO_NOT_KNOW};
use crate::vector::{dot, normalize, EmbeddingVector};

pub const DEFAULT_DIM: usize = 64;
/// Cosine at or above which the mock judge calls a pair answerable.
pub const JUDGE_THRESHOLD: f64 = 0.5;
/// Below this best-sentence cosine the mock answerer declines.
pub const ANSWER_THRESHOLD: f64 = 0.3;
pub const SENTINEL_YES: &str = "REL:YES";
pub const SENTINEL_NO: &str = "REL:NO";

const LOGIT_CLAMP: f64 = 1e-9;

/// 64-bit FNV-1a.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, ClientError> {
        if text.is_empty() {
            return Err(ClientError::EmptyInput);
        }
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let mut counts: BTreeMap<u64, f64> = BTreeMap::new();
        if chars.len() < 3 {
            let gram: String = chars.iter().collect();
            *counts.entry(fnv1a(gram.as_bytes())).or_default() += 1.0;
        } else {
            let mut buf = String::with_capacity(12);
            for w in chars.windows(3) {
                buf.clear();
                buf.extend(w);
                *counts.entry(fnv1a(buf.as_bytes())).or_default() += 1.0;
            }
        }
        let mut acc = vec![0.0; self.dim];
        let mix = self.seed.rotate_left(29) ^ 0x9e37_79b9_7f4a_7c15;
        for (hash, count) in counts {
            let mut rng = ChaCha8Rng::seed_from_u64(hash ^ mix);
            for a in acc.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *a += count * g;
            }
        }
        normalize(&acc).map_err(ClientError::from)
    }

    /// Cosine between the mock embeddings of two texts.
    pub fn cosine(&self, a: &str, b: &str) -> Result<f64, ClientError> {
        Ok(dot(&self.embed_text(a)?, &self.embed_text(b)?))
    }
}

impl Embedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        if texts.is_empty() {
            return Err(ClientError::EmptyInput);
        }
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

/// Logit of the mock cosine rescaled to `(0, 1)`.
#[derive(Debug, Clone)]
pub struct MockScorer {
    embedder: MockEmbedder,
}

impl MockScorer {
    pub fn new(embedder: MockEmbedder) -> Self {
        Self { embedder }
    }
}

pub fn cosine_logit(cosine: f64) -> f64 {
    let p = ((cosine + 1.0) / 2.0).clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
    (p / (1.0 - p)).ln()
}

impl PairScorer for MockScorer {
    fn score_pair(&self, query: &str, document: &str) -> Result<f64, ClientError> {
        if query.is_empty() || document.is_empty() {
            return Err(ClientError::EmptyInput);
        }
        Ok(cosine_logit(self.embedder.cosine(query, document)?))
    }
}

/// Rule-based generator that understands every bundled prompt template.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    seed: u64,
    embedder: MockEmbedder,
}

const QUESTION_FORMS: [&str; 4] = [
    "Can you explain why {}?",
    "What does it mean that {}?",
    "How do I know {}?",
    "Is it true that {}?",
];

fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        cur.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            let s = cur.trim().to_string();
            if !s.is_empty() {
                out.push(s);
            }
            cur.clear();
        }
    }
    let s = cur.trim().to_string();
    if !s.is_empty() {
        out.push(s);
    }
    out
}

fn phrase(sentence: &str) -> String {
    let trimmed = sentence.trim_end_matches(['.', '!', '?']).trim();
    let words: Vec<&str> = trimmed.split_whitespace().take(16).collect();
    let mut p = words.join(" ");
    if let Some(first) = p.chars().next() {
        if first.is_uppercase() && !p.chars().nth(1).is_some_and(|c| c.is_uppercase()) {
            p = first.to_lowercase().chain(p.chars().skip(1)).collect();
        }
    }
    p
}

fn is_declined(answer: &str) -> bool {
    answer.contains(DECLINE_CANNOT_DETERMINE) || answer.contains(DECLINE_DO_NOT_KNOW)
}

impl MockGenerator {
    pub fn new(seed: u64, embedder: MockEmbedder) -> Self {
        Self { seed, embedder }
    }

    fn cos(&self, a: &str, b: &str) -> f64 {
        if a.trim().is_empty() || b.trim().is_empty() {
            return 0.0;
        }
        self.embedder.cosine(a, b).unwrap_or(0.0)
    }

    fn field(kind: PromptKind, prompt: &str, name: &str) -> Result<String, ClientError> {
        kind.field(prompt, name)
            .ok_or_else(|| ClientError::BadResponse(format!("mock could not parse {kind:?} prompt")))
    }

    /// Best sentence of `text` for `query` and its cosine.
    fn best_sentence(&self, query: &str, text: &str) -> Option<(usize, Vec<String>, f64)> {
        let sents = sentences(text);
        let (idx, score) = sents
            .iter()
            .enumerate()
            .map(|(i, s)| (i, self.cos(query, s)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))?;
        Some((idx, sents, score))
    }

    fn questions(&self, prompt: &str) -> Result<String, ClientError> {
        let kind = PromptKind::QuestionGeneration;
        let content = Self::field(kind, prompt, "cc_text")?;
        let n: usize = Self::field(kind, prompt, "num_questions")?.trim().parse().unwrap_or(1);
        let sents = sentences(&content);
        if sents.is_empty() {
            return Ok(r#"{"questions": []}"#.to_string());
        }
        let rot = (fnv1a(prompt.as_bytes()) ^ self.seed) as usize % QUESTION_FORMS.len();
        let questions: Vec<String> = (0..n)
            .map(|q| {
                let s = &sents[q % sents.len()];
                let form = QUESTION_FORMS[(q / sents.len() + rot) % QUESTION_FORMS.len()];
                form.replace("{}", &phrase(s))
            })
            .collect();
        Ok(serde_json::json!({ "questions": questions }).to_string())
    }

    fn judge(&self, prompt: &str) -> Result<String, ClientError> {
        let kind = PromptKind::Answerability;
        let question = Self::field(kind, prompt, "question")?;
        let content = Self::field(kind, prompt, "content")?;
        let has = |s: &str| question.contains(s) || content.contains(s);
        let (verdict, why) = if has(SENTINEL_NO) {
            ("No", "A sentinel marks this pair as unanswerable.".to_string())
        } else if has(SENTINEL_YES) {
            ("Yes", "A sentinel marks this pair as answerable.".to_string())
        } else {
            let c = self.cos(&question, &content);
            let verdict = if c >= JUDGE_THRESHOLD { "Yes" } else { "No" };
            (
                verdict,
                format!("The content overlaps the query with similarity {c:.3}."),
            )
        };
        Ok(serde_json::json!({ "Explanation": why, "Source relevant": verdict }).to_string())
    }

    fn answer(&self, prompt: &str) -> Result<String, ClientError> {
        let kind = PromptKind::AnswerGeneration;
        let contexts = Self::field(kind, prompt, "contexts")?;
        let question = Self::field(kind, prompt, "question")?;
        if contexts.trim().is_empty() {
            return Ok(DECLINE_DO_NOT_KNOW.to_string());
        }
        let best = contexts
            .split("\n\n")
            .filter_map(|c| self.best_sentence(&question, c))
            .max_by(|a, b| a.2.total_cmp(&b.2));
        match best {
            Some((idx, sents, score)) if score >= ANSWER_THRESHOLD => {
                let mut out = sents[idx].clone();
                if let Some(next) = sents.get(idx + 1) {
                    out.push(' ');
                    out.push_str(next);
                }
                Ok(out)
            }
            _ => Ok(DECLINE_CANNOT_DETERMINE.to_string()),
        }
    }

    fn new_question(&self, prompt: &str) -> Result<String, ClientError> {
        let kind = PromptKind::NewQuestion;
        let content = Self::field(kind, prompt, "content")?;
        let existing: Vec<String> = Self::field(kind, prompt, "existing")?
            .lines()
            .map(|l| l.trim_start_matches("- ").trim().to_lowercase())
            .collect();
        for s in sentences(&content).iter().rev() {
            let candidate = format!("What should I do given that {}?", phrase(s));
            if !existing.contains(&candidate.to_lowercase()) {
                return Ok(candidate);
            }
        }
        Ok("Could you tell me more about this topic?".to_string())
    }

    fn faithful(&self, prompt: &str) -> Result<String, ClientError> {
        let kind = PromptKind::Faithfulness;
        let contexts = Self::field(kind, prompt, "contexts")?;
        let answer = Self::field(kind, prompt, "answer")?;
        if is_declined(&answer) {
            return Ok("NO".into());
        }
        let supported = contexts.split("\n\n").any(|c| self.cos(&answer, c) >= JUDGE_THRESHOLD);
        Ok(if supported { "YES" } else { "NO" }.into())
    }

    fn golden(&self, prompt: &str) -> Result<String, ClientError> {
        let kind = PromptKind::GoldenAnswer;
        let content = Self::field(kind, prompt, "content")?;
        let question = Self::field(kind, prompt, "question")?;
        Ok(match self.best_sentence(&question, &content) {
            Some((idx, sents, _)) => sents[idx..sents.len().min(idx + 2)].join(" "),
            None => content,
        })
    }

    fn adherence(&self, prompt: &str) -> Result<String, ClientError> {
        let kind = PromptKind::Adherence;
        let guideline = Self::field(kind, prompt, "guideline")?;
        let answer = Self::field(kind, prompt, "answer")?;
        let points: Vec<&str> = guideline.lines().filter_map(|l| l.trim().strip_prefix("- ")).collect();
        if points.is_empty() || is_declined(&answer) {
            return Ok("0".into());
        }
        let covered = points
            .iter()
            .filter(|p| answer.contains(**p) || self.cos(p, &answer) >= JUDGE_THRESHOLD)
            .count();
        Ok(format!("{:.2}", covered as f64 / points.len() as f64))
    }
}

impl TextGenerator for MockGenerator {
    fn generate(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        let prompt = request.prompt.as_str();
        if prompt.is_empty() {
            return Err(ClientError::EmptyInput);
        }
        let out = match PromptKind::detect(prompt) {
            Some(PromptKind::QuestionGeneration) => self.questions(prompt)?,
            Some(PromptKind::Answerability) => self.judge(prompt)?,
            Some(PromptKind::AnswerGeneration) => self.answer(prompt)?,
            Some(kind @ (PromptKind::Hyde | PromptKind::PseudoAnswer)) => Self::field(kind, prompt, "question")?,
            Some(PromptKind::Rephrase) => {
                let q = Self::field(PromptKind::Rephrase, prompt, "question")?;
                format!("I'd like to know: {q}")
            }
            Some(PromptKind::NewQuestion) => self.new_question(prompt)?,
            Some(PromptKind::AnswerRelevancy) => {
                let answer = Self::field(PromptKind::AnswerRelevancy, prompt, "answer")?;
                if answer.trim().is_empty() || is_declined(&answer) {
                    "NO"
                } else {
                    "YES"
                }
                .to_string()
            }
            Some(PromptKind::Faithfulness) => self.faithful(prompt)?,
            Some(PromptKind::GoldenAnswer) => self.golden(prompt)?,
            Some(PromptKind::Guideline) => {
                let golden = Self::field(PromptKind::Guideline, prompt, "golden")?;
                sentences(&golden)
                    .iter()
                    .map(|s| format!("- {s}"))
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            Some(PromptKind::Adherence) => self.adherence(prompt)?,
            None => format!("mock-{:016x}", fnv1a(prompt.as_bytes()) ^ self.seed),
        };
        Ok(out.chars().take(request.max_output_chars).collect())
    }
}
