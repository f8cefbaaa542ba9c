//! Offline construction of the question base: generate questions per
//! content, keep the ones the judge deems answerable, and curate preference
//! pairs for tuning a question generator.

pub mod parse;
mod preferences;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clients::{bounded_map, ClientError, Embedder, TextGenRequest, TextGenerator};
use crate::kb::{Answerable, KbError, KnowledgeBase};
use crate::prompts::{self, RETRY_SUFFIX};
use crate::vector::dot;

pub use preferences::{
    curate_preferences, high_reward_examples, write_preferences, PreferenceConfig, PreferenceExample, Preferred,
};

const OUTPUT_EXCERPT: usize = 200;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("could not parse model output: {output}")]
    ParseFailure { output: String },
    #[error("generation failed: {0}")]
    GenerationFailed(#[from] ClientError),
    #[error("content {content_id}: {source}")]
    Content {
        content_id: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("content {content_id}, question {question_id}: {source}")]
    Pair {
        content_id: String,
        question_id: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("content {content_id} has too few questions and no generator is available")]
    InsufficientQuestions { content_id: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kb(#[from] KbError),
}

fn parse_failure(output: &str) -> PipelineError {
    PipelineError::ParseFailure {
        output: output.chars().take(OUTPUT_EXCERPT).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    /// Questions requested per content.
    pub num_questions: usize,
    /// Recorded with the run; generation itself runs at temperature 0.
    pub seed: u64,
    /// Accept at most `max_accept_factor * num_questions` parsed questions.
    pub max_accept_factor: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_questions: 20,
            seed: 0,
            max_accept_factor: 1.5,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.num_questions == 0 {
            return Err(PipelineError::InvalidConfig("num_questions must be at least 1".into()));
        }
        if !(self.max_accept_factor >= 1.0 && self.max_accept_factor.is_finite()) {
            return Err(PipelineError::InvalidConfig(
                "max_accept_factor must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn cap(&self) -> usize {
        ((self.max_accept_factor * self.num_questions as f64).floor() as usize).max(1)
    }
}

/// Call the model, parse with `decode`, and retry once with an explicit
/// JSON-only instruction when parsing fails.
fn generate_parsed<T>(
    client: &dyn TextGenerator,
    prompt: String,
    decode: impl Fn(&str) -> Option<T>,
) -> Result<T, PipelineError> {
    let first = client.generate(&TextGenRequest::new(prompt.clone()))?;
    if let Some(v) = decode(&first) {
        return Ok(v);
    }
    log::debug!("unparseable output, retrying once");
    let second = client.generate(&TextGenRequest::new(prompt + RETRY_SUFFIX))?;
    decode(&second).ok_or_else(|| parse_failure(&second))
}

fn decode_questions(output: &str, cap: usize) -> Option<Vec<String>> {
    let obj = parse::extract_object(output)?;
    let list = obj.get("questions")?.as_array()?;
    let mut seen = HashSet::new();
    let out: Vec<String> = list
        .iter()
        .filter_map(Value::as_str)
        .map(str::trim)
        .filter(|q| !q.is_empty() && seen.insert(q.to_lowercase()))
        .take(cap)
        .map(str::to_string)
        .collect();
    (!out.is_empty()).then_some(out)
}

/// Questions for one content, deduplicated case-insensitively.
pub fn generate_questions(
    client: &dyn TextGenerator,
    content: &str,
    cfg: &GenerationConfig,
) -> Result<Vec<String>, PipelineError> {
    cfg.validate()?;
    if content.trim().is_empty() {
        return Err(PipelineError::Kb(KbError::EmptyText));
    }
    let cap = cfg.cap();
    generate_parsed(
        client,
        prompts::question_generation(cfg.num_questions, content),
        |out| decode_questions(out, cap),
    )
}

/// Generate questions for every content without any and attach them in
/// content order. Returns the number of questions added.
pub fn populate_questions(
    client: &dyn TextGenerator,
    kb: &mut KnowledgeBase,
    cfg: &GenerationConfig,
    max_parallel: usize,
) -> Result<usize, PipelineError> {
    cfg.validate()?;
    let has_questions: HashSet<&str> = kb.questions().iter().map(|q| q.content_id.as_str()).collect();
    let pending: Vec<(String, String)> = kb
        .contents()
        .iter()
        .filter(|c| !has_questions.contains(c.id.as_str()))
        .map(|c| (c.id.clone(), c.text.clone()))
        .collect();
    let results = bounded_map(&pending, max_parallel, |_, (_, text)| {
        generate_questions(client, text, cfg)
    });
    let mut added = 0;
    for ((content_id, _), result) in pending.iter().zip(results) {
        let questions = result.map_err(|e| PipelineError::Content {
            content_id: content_id.clone(),
            source: Box::new(e),
        })?;
        for q in questions {
            kb.attach_question(content_id, &q)?;
            added += 1;
        }
    }
    Ok(added)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Judgement {
    pub answerable: bool,
    pub explanation: String,
}

fn lookup<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).or_else(|| {
        obj.iter()
            .find(|(k, _)| k.trim().eq_ignore_ascii_case(key))
            .map(|(_, v)| v)
    })
}

fn decode_judgement(output: &str) -> Option<Judgement> {
    let obj = parse::extract_object(output)?;
    let explanation = lookup(&obj, "Explanation")?.as_str()?.trim().to_string();
    let verdict = lookup(&obj, "Source relevant")?.as_str()?.trim().to_lowercase();
    let answerable = match verdict.as_str() {
        "yes" => true,
        "no" => false,
        _ => return None,
    };
    Some(Judgement {
        answerable,
        explanation,
    })
}

/// Ask the judge whether `content` answers `question`.
pub fn judge_answerability(
    client: &dyn TextGenerator,
    question: &str,
    content: &str,
) -> Result<Judgement, PipelineError> {
    if question.trim().is_empty() || content.trim().is_empty() {
        return Err(PipelineError::GenerationFailed(ClientError::EmptyInput));
    }
    generate_parsed(client, prompts::answerability(question, content), decode_judgement)
}

/// Contents left without any answerable question after filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageWarning {
    pub bare_contents: Vec<String>,
}

impl fmt::Display for CoverageWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} content(s) have no answerable question: {}",
            self.bare_contents.len(),
            self.bare_contents.join(", ")
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub judged: usize,
    pub kept: usize,
    pub dropped: usize,
    pub coverage: Option<CoverageWarning>,
}

/// Judge every unfiltered question against its own content. Rejected
/// questions stay in the store, marked `no`, and drop out of the matrices.
pub fn filter_questions(
    judge: &dyn TextGenerator,
    kb: &mut KnowledgeBase,
    max_parallel: usize,
) -> Result<FilterReport, PipelineError> {
    let pending: Vec<(usize, String, String, String, String)> = kb
        .questions()
        .iter()
        .enumerate()
        .filter(|(_, q)| q.answerable == Answerable::Unfiltered)
        .map(|(pos, q)| {
            let content = kb.content(&q.content_id).expect("question references known content");
            (
                pos,
                q.id.clone(),
                q.content_id.clone(),
                q.text.clone(),
                content.text.clone(),
            )
        })
        .collect();
    let verdicts = bounded_map(&pending, max_parallel, |_, (_, _, _, question, content)| {
        judge_answerability(judge, question, content)
    });
    let mut report = FilterReport {
        judged: pending.len(),
        kept: 0,
        dropped: 0,
        coverage: None,
    };
    let mut decided = Vec::with_capacity(pending.len());
    for ((pos, qid, cid, _, _), verdict) in pending.iter().zip(verdicts) {
        let j = verdict.map_err(|e| PipelineError::Pair {
            content_id: cid.clone(),
            question_id: qid.clone(),
            source: Box::new(e),
        })?;
        decided.push((*pos, j.answerable));
    }
    for (pos, yes) in decided {
        if yes {
            report.kept += 1;
            kb.set_answerable(pos, Answerable::Yes);
        } else {
            report.dropped += 1;
            kb.set_answerable(pos, Answerable::No);
        }
    }
    let bare = kb.uncovered_contents();
    if !bare.is_empty() {
        let warning = CoverageWarning { bare_contents: bare };
        log::warn!("{warning}");
        report.coverage = Some(warning);
    }
    Ok(report)
}

/// `1 - max cosine` between `candidate` and the prior questions, in `[0, 1]`.
/// An empty prior is maximally diverse.
pub fn diversity_score(candidate: &str, prior: &[&str], embedder: &dyn Embedder) -> Result<f64, PipelineError> {
    if prior.is_empty() {
        return Ok(1.0);
    }
    if prior.contains(&candidate) {
        return Ok(0.0);
    }
    let mut texts = Vec::with_capacity(prior.len() + 1);
    texts.push(candidate.to_string());
    texts.extend(prior.iter().map(|p| p.to_string()));
    let vecs = embedder.embed(&texts)?;
    let best = vecs[1..]
        .iter()
        .map(|v| dot(&vecs[0], v))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((1.0 - best).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::mock::{MockEmbedder, MockGenerator, DEFAULT_DIM, SENTINEL_NO, SENTINEL_YES};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn fixed(out: &'static str) -> impl Fn(&TextGenRequest) -> Result<String, ClientError> {
        move |_| Ok(out.to_string())
    }

    #[test]
    fn parses_questions() {
        let cfg = GenerationConfig::default();
        let got = generate_questions(&fixed(r#"{"questions":["a?","b?"]}"#), "text", &cfg).unwrap();
        assert_eq!(got, vec!["a?", "b?"]);
        let fenced = "```json\n{\"questions\":[\"a?\",\"b?\"]}\n```";
        assert_eq!(generate_questions(&fixed(fenced), "text", &cfg).unwrap(), got);
    }

    #[test]
    fn wrong_key_is_a_parse_failure_after_one_retry() {
        let calls = AtomicUsize::new(0);
        let client = |r: &TextGenRequest| {
            let n = calls.fetch_add(1, Ordering::SeqCst);
            assert_eq!(r.prompt.ends_with(RETRY_SUFFIX), n == 1);
            Ok(r#"{"q":[]}"#.to_string())
        };
        let err = generate_questions(&client, "text", &GenerationConfig::default()).unwrap_err();
        assert!(matches!(err, PipelineError::ParseFailure { .. }));
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn retry_can_recover() {
        let calls = AtomicUsize::new(0);
        let client = |_: &TextGenRequest| {
            Ok(if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                "nope"
            } else {
                r#"{"questions":["x?"]}"#
            }
            .to_string())
        };
        assert_eq!(
            generate_questions(&client, "t", &GenerationConfig::default()).unwrap(),
            vec!["x?"]
        );
    }

    #[test]
    fn dedupes_and_caps() {
        let cfg = GenerationConfig {
            num_questions: 2,
            max_accept_factor: 1.5,
            ..GenerationConfig::default()
        };
        let out = r#"{"questions":["A?","a?"," b? ","c?","d?"]}"#;
        assert_eq!(
            generate_questions(&fixed(out), "t", &cfg).unwrap(),
            vec!["A?", "b?", "c?"]
        );
    }

    #[test]
    fn judge_verdicts() {
        let yes = fixed(r#"{"Explanation":"covers it","Source relevant":"Yes"}"#);
        let j = judge_answerability(&yes, "q", "c").unwrap();
        assert!(j.answerable);
        assert_eq!(j.explanation, "covers it");
        let no = fixed(r#"{"Explanation":"..","Source relevant":" no "}"#);
        assert!(!judge_answerability(&no, "q", "c").unwrap().answerable);
        let missing = fixed(r#"{"Explanation":".."}"#);
        assert!(matches!(
            judge_answerability(&missing, "q", "c"),
            Err(PipelineError::ParseFailure { .. })
        ));
        let odd = fixed(r#"{"Explanation":"..","Source relevant":"maybe"}"#);
        assert!(judge_answerability(&odd, "q", "c").is_err());
    }

    fn kb_with(questions: &[(&str, &str)]) -> KnowledgeBase {
        let mut kb = KnowledgeBase::new();
        let a = kb.add_content("Walking after meals lowers glucose.", 1).unwrap();
        let b = kb.add_content("Check your feet every day.", 2).unwrap();
        for (which, text) in questions {
            let id = if *which == "a" { &a } else { &b };
            kb.attach_question(id, text).unwrap();
        }
        kb
    }

    fn mock_judge() -> MockGenerator {
        MockGenerator::new(0, MockEmbedder::new(DEFAULT_DIM, 0))
    }

    #[test]
    fn filter_all_yes_keeps_everything() {
        let mut kb = kb_with(&[("a", "REL:YES one"), ("a", "REL:YES two"), ("b", "REL:YES three")]);
        let report = filter_questions(&mock_judge(), &mut kb, 4).unwrap();
        assert_eq!((report.kept, report.dropped), (3, 0));
        assert!(report.coverage.is_none());
        assert_eq!(kb.observed_matrix().n(), 3);
    }

    #[test]
    fn filter_flags_bare_content() {
        let q_no = format!("{SENTINEL_NO} x");
        let q_yes = format!("{SENTINEL_YES} y");
        let mut kb = kb_with(&[("a", &q_yes), ("b", &q_no), ("b", "REL:NO z")]);
        let report = filter_questions(&mock_judge(), &mut kb, 2).unwrap();
        let warning = report.coverage.unwrap();
        assert_eq!(warning.bare_contents, vec![kb.contents()[1].id.clone()]);
        // rejected questions remain stored but have no matrix column
        assert_eq!(kb.questions().len(), 3);
        assert_eq!(kb.observed_matrix().n(), 1);
    }

    #[test]
    fn filter_is_idempotent() {
        let mut kb = kb_with(&[
            ("a", "How does walking after meals lower glucose?"),
            ("a", "REL:NO"),
            ("b", "What is a car?"),
        ]);
        filter_questions(&mock_judge(), &mut kb, 3).unwrap();
        let first: Vec<Answerable> = kb.questions().iter().map(|q| q.answerable).collect();
        for pos in 0..kb.questions().len() {
            kb.set_answerable(pos, Answerable::Unfiltered);
        }
        filter_questions(&mock_judge(), &mut kb, 1).unwrap();
        let second: Vec<Answerable> = kb.questions().iter().map(|q| q.answerable).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn judge_errors_name_the_pair() {
        let mut kb = kb_with(&[("a", "q1"), ("b", "q2")]);
        let failing = |r: &TextGenRequest| {
            if r.prompt.contains("q2") {
                Err(ClientError::Transport("down".into()))
            } else {
                Ok(r#"{"Explanation":"","Source relevant":"yes"}"#.to_string())
            }
        };
        match filter_questions(&failing, &mut kb, 2).unwrap_err() {
            PipelineError::Pair {
                content_id,
                question_id,
                ..
            } => {
                assert_eq!(content_id, kb.contents()[1].id);
                assert_eq!(question_id, kb.questions()[1].id);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn diversity_bounds() {
        let e = MockEmbedder::new(DEFAULT_DIM, 0);
        assert_eq!(diversity_score("anything", &[], &e).unwrap(), 1.0);
        assert_eq!(
            diversity_score("same words", &["other", "same words"], &e).unwrap(),
            0.0
        );
        let d = diversity_score("check feet", &["walk after meals", "sleep well"], &e).unwrap();
        assert!((0.0..=1.0).contains(&d));
        // order of the prior does not matter
        let d2 = diversity_score("check feet", &["sleep well", "walk after meals"], &e).unwrap();
        assert_eq!(d, d2);
    }

    struct Axis;

    impl Embedder for Axis {
        fn dim(&self) -> usize {
            3
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<crate::vector::EmbeddingVector>, ClientError> {
            texts
                .iter()
                .map(|t| {
                    let mut v = vec![0.0; 3];
                    v[t.len() % 3] = 1.0;
                    crate::vector::EmbeddingVector::from_raw(v).map_err(ClientError::from)
                })
                .collect()
        }
    }

    #[test]
    fn orthogonal_prior_is_fully_diverse() {
        assert_eq!(diversity_score("a", &["bb", "ccc"], &Axis).unwrap(), 1.0);
    }
}
