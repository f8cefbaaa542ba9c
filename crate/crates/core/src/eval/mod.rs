//! Benchmark harness: test-set construction, answer generation and the
//! retrieval and answer-quality metrics.

mod bench;
pub mod report;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{bounded_map, ClientError, PairScorer, TextGenRequest, TextGenerator};
use crate::kb::{KbError, KnowledgeBase};
use crate::pipeline::{judge_answerability, PipelineError};
use crate::prompts::{self, DECLINE_CANNOT_DETERMINE, DECLINE_DO_NOT_KNOW};
use crate::retrieve::{RetrievalError, RetrievalResult};

pub use bench::{run_benchmark, AnswerRecord, BenchOutput, BenchPlan, ANSWERS_FILE, REPORT_FILE};
pub use report::{EvaluationReport, MetricCounts, MetricRow};

/// Appended when a rephrasing came back identical to a stored question.
const REPHRASE_RETRY: &str = "\n\nUse wording that differs from every earlier version of the question.";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{cases} cases but {results} results")]
    CaseResultMismatch { cases: usize, results: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("could not parse judge output: {0}")]
    ParseFailure(String),
    #[error("{file}:{line}: {message}")]
    Format { file: String, line: usize, message: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Kb(#[from] KbError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Rephrase,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestCase {
    pub id: String,
    pub question: String,
    pub golden_content_id: String,
    pub origin: Origin,
}

/// Case-folded with runs of whitespace collapsed.
fn normalized(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn stored_questions(kb: &KnowledgeBase) -> HashSet<String> {
    kb.questions().iter().map(|q| normalized(&q.text)).collect()
}

/// Test cases built from rephrased stored questions. Returns the cases and
/// one warning per dropped case.
pub fn build_rephrase_set(
    generator: &dyn TextGenerator,
    kb: &KnowledgeBase,
    sample_size: usize,
    seed: u64,
    max_parallel: usize,
) -> Result<(Vec<TestCase>, Vec<String>), EvalError> {
    let active = kb.active_positions();
    if sample_size > active.len() {
        return Err(EvalError::Config(format!(
            "sample size {sample_size} exceeds the {} answerable questions",
            active.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, active.len(), sample_size)
        .into_iter()
        .map(|i| active[i])
        .collect();
    picked.sort_unstable();
    let stored = stored_questions(kb);
    let outputs =
        bounded_map(
            &picked,
            max_parallel,
            |_, &pos| -> Result<Option<String>, ClientError> {
                let prompt = prompts::rephrase(&kb.questions()[pos].text);
                let first = generator.generate(&TextGenRequest::new(prompt.clone()))?;
                if !first.trim().is_empty() && !stored.contains(&normalized(&first)) {
                    return Ok(Some(first.trim().to_string()));
                }
                let second = generator.generate(&TextGenRequest::new(prompt + REPHRASE_RETRY))?;
                Ok((!second.trim().is_empty() && !stored.contains(&normalized(&second)))
                    .then(|| second.trim().to_string()))
            },
        );
    let mut cases = Vec::new();
    let mut warnings = Vec::new();
    for (pos, out) in picked.iter().zip(outputs) {
        let q = &kb.questions()[*pos];
        match out? {
            Some(text) => cases.push(TestCase {
                id: format!("r{:05}", cases.len()),
                question: text,
                golden_content_id: q.content_id.clone(),
                origin: Origin::Rephrase,
            }),
            None => warnings.push(format!(
                "dropped rephrase of {}: output repeats a stored question",
                q.id
            )),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((cases, warnings))
}

/// One new question per content, kept only when the judge finds its content
/// answers it and it does not repeat a stored question.
pub fn build_ood_set(
    generator: &dyn TextGenerator,
    judge: &dyn TextGenerator,
    kb: &KnowledgeBase,
    max_parallel: usize,
) -> Result<(Vec<TestCase>, Vec<String>), EvalError> {
    let stored = stored_questions(kb);
    let contents = kb.contents();
    let outcomes = bounded_map(
        contents,
        max_parallel,
        |_, c| -> Result<Option<String>, PipelineError> {
            let existing: Vec<&str> = kb
                .questions()
                .iter()
                .filter(|q| q.content_id == c.id)
                .map(|q| q.text.as_str())
                .collect();
            let candidate = generator.generate(&TextGenRequest::new(prompts::new_question(&c.text, &existing)))?;
            let candidate = candidate.trim().to_string();
            if candidate.is_empty() || stored.contains(&normalized(&candidate)) {
                return Ok(None);
            }
            let verdict = judge_answerability(judge, &candidate, &c.text)?;
            Ok(verdict.answerable.then_some(candidate))
        },
    );
    let mut cases = Vec::new();
    let mut warnings = Vec::new();
    for (c, out) in contents.iter().zip(outcomes) {
        match out? {
            Some(question) => cases.push(TestCase {
                id: format!("o{:05}", cases.len()),
                question,
                golden_content_id: c.id.clone(),
                origin: Origin::Ood,
            }),
            None => warnings.push(format!("no usable new question for {}", c.id)),
        }
    }
    if cases.is_empty() {
        warnings.push("out-of-distribution set is empty".to_string());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((cases, warnings))
}

pub fn write_cases(path: &Path, cases: &[TestCase]) -> Result<(), EvalError> {
    write_lines(path, cases)
}

pub fn read_cases(path: &Path, kb: &KnowledgeBase) -> Result<Vec<TestCase>, EvalError> {
    let name = path.display().to_string();
    let io = |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut cases = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let case: TestCase = serde_json::from_str(&line).map_err(|e| EvalError::Format {
            file: name.clone(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if kb.content(&case.golden_content_id).is_none() {
            return Err(EvalError::Format {
                file: name.clone(),
                line: n + 1,
                message: format!("unknown content {}", case.golden_content_id),
            });
        }
        cases.push(case);
    }
    Ok(cases)
}

pub(crate) fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EvalError> {
    let io = |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        writeln!(w, "{}", serde_json::to_string(item).expect("record serializes")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub text: String,
    pub declined: bool,
}

/// Either canonical refusal anywhere in the trimmed output.
pub fn is_declined(text: &str) -> bool {
    let t = text.trim();
    t.contains(DECLINE_CANNOT_DETERMINE) || t.contains(DECLINE_DO_NOT_KNOW)
}

/// Answer `query` from `contexts`, given in retrieval order.
pub fn generate_answer(generator: &dyn TextGenerator, query: &str, contexts: &[&str]) -> Result<Answer, EvalError> {
    let text = generator.generate(&TextGenRequest::new(prompts::answer_generation(query, contexts)))?;
    let declined = is_declined(&text);
    Ok(Answer {
        text: text.trim().to_string(),
        declined,
    })
}

fn check_lengths(cases: &[TestCase], results: &[RetrievalResult]) -> Result<(), EvalError> {
    if cases.len() != results.len() {
        return Err(EvalError::CaseResultMismatch {
            cases: cases.len(),
            results: results.len(),
        });
    }
    if cases.is_empty() {
        return Err(EvalError::Config("no test cases".into()));
    }
    Ok(())
}

/// Fraction of cases whose retrieved set contains the golden content.
pub fn exact_recovery_rate(cases: &[TestCase], results: &[RetrievalResult]) -> Result<f64, EvalError> {
    check_lengths(cases, results)?;
    let hits = cases
        .iter()
        .zip(results)
        .filter(|(c, r)| r.content_ids().any(|id| id == c.golden_content_id))
        .count();
    Ok(hits as f64 / cases.len() as f64)
}

/// A rate or mean over the cases that could be scored, with the failures
/// that were left out of the denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub counted: usize,
    pub failures: Vec<(String, String)>,
}

fn summarize(cases: &[TestCase], per_case: Vec<Result<f64, EvalError>>) -> Scored {
    let mut sum = 0.0;
    let mut counted = 0;
    let mut failures = Vec::new();
    for (c, r) in cases.iter().zip(per_case) {
        match r {
            Ok(v) => {
                sum += v;
                counted += 1;
            }
            Err(e) => failures.push((c.id.clone(), e.to_string())),
        }
    }
    Scored {
        value: if counted == 0 { 0.0 } else { sum / counted as f64 },
        counted,
        failures,
    }
}

fn content_text<'a>(kb: &'a KnowledgeBase, id: &str) -> Result<&'a str, EvalError> {
    kb.content(id)
        .map(|c| c.text.as_str())
        .ok_or_else(|| KbError::UnknownContent(id.to_string()).into())
}

/// Whether any retrieved content answers the case's question.
pub fn case_relevant(
    judge: &dyn TextGenerator,
    kb: &KnowledgeBase,
    question: &str,
    result: &RetrievalResult,
) -> Result<bool, EvalError> {
    for id in result.content_ids() {
        if judge_answerability(judge, question, content_text(kb, id)?)?.answerable {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Highest reranker score among the retrieved contents.
pub fn case_reranker_max(
    scorer: &dyn PairScorer,
    kb: &KnowledgeBase,
    question: &str,
    result: &RetrievalResult,
) -> Result<f64, EvalError> {
    let mut best: Option<f64> = None;
    for id in result.content_ids() {
        let s = scorer.score_pair(question, content_text(kb, id)?)?;
        best = Some(best.map_or(s, |b| b.max(s)));
    }
    best.ok_or_else(|| EvalError::Config("nothing retrieved".into()))
}

/// Fraction of cases where at least one retrieved content is judged to
/// answer the question. Judge failures are excluded and reported.
pub fn relevancy_rate(
    judge: &dyn TextGenerator,
    kb: &KnowledgeBase,
    cases: &[TestCase],
    results: &[RetrievalResult],
    max_parallel: usize,
) -> Result<Scored, EvalError> {
    check_lengths(cases, results)?;
    let per_case = bounded_map(cases, max_parallel, |i, c| {
        case_relevant(judge, kb, &c.question, &results[i]).map(|hit| f64::from(u8::from(hit)))
    });
    Ok(summarize(cases, per_case))
}

/// Mean over cases of the best reranker score among the retrieved contents.
pub fn avg_reranker_score(
    scorer: &dyn PairScorer,
    kb: &KnowledgeBase,
    cases: &[TestCase],
    results: &[RetrievalResult],
    max_parallel: usize,
) -> Result<Scored, EvalError> {
    check_lengths(cases, results)?;
    let per_case = bounded_map(cases, max_parallel, |i, c| {
        case_reranker_max(scorer, kb, &c.question, &results[i])
    });
    Ok(summarize(cases, per_case))
}

fn parse_yes_no(output: &str) -> Result<bool, EvalError> {
    let word: String = output
        .trim()
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_ascii_uppercase();
    match word.as_str() {
        "YES" => Ok(true),
        "NO" => Ok(false),
        _ => Err(EvalError::ParseFailure(output.chars().take(80).collect())),
    }
}

/// First number in the output, clamped to `[0, 1]`.
fn parse_score(output: &str) -> Result<f64, EvalError> {
    output
        .split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
        .filter(|t| !t.is_empty() && t.chars().any(|c| c.is_ascii_digit()))
        .find_map(|t| t.parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .map(|v| v.clamp(0.0, 1.0))
        .ok_or_else(|| EvalError::ParseFailure(output.chars().take(80).collect()))
}

/// Guideline extracted from a golden answer written from the golden content.
pub fn golden_guideline(
    generator: &dyn TextGenerator,
    question: &str,
    golden_content: &str,
) -> Result<String, EvalError> {
    let golden = generator.generate(&TextGenRequest::new(prompts::golden_answer(golden_content, question)))?;
    Ok(generator.generate(&TextGenRequest::new(prompts::guideline(golden.trim())))?)
}

/// Each field is judged independently; a failure leaves that field empty and
/// adds an entry to `errors`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnswerQuality {
    pub relevant: Option<bool>,
    pub faithful: Option<bool>,
    pub adherence: Option<f64>,
    pub errors: Vec<String>,
}

pub fn judge_answer_quality(
    judge: &dyn TextGenerator,
    question: &str,
    answer: &Answer,
    contexts: &[&str],
    guideline: Result<&str, &str>,
) -> AnswerQuality {
    let mut q = AnswerQuality::default();
    let ask = |prompt: String| -> Result<String, EvalError> { Ok(judge.generate(&TextGenRequest::new(prompt))?) };
    match ask(prompts::answer_relevancy(question, &answer.text)).and_then(|o| parse_yes_no(&o)) {
        Ok(v) => q.relevant = Some(v),
        Err(e) => q.errors.push(format!("relevancy: {e}")),
    }
    if answer.declined {
        q.faithful = Some(false);
    } else {
        match ask(prompts::faithfulness(contexts, &answer.text)).and_then(|o| parse_yes_no(&o)) {
            Ok(v) => q.faithful = Some(v),
            Err(e) => q.errors.push(format!("faithfulness: {e}")),
        }
    }
    match guideline {
        Ok(g) => match ask(prompts::adherence(g, &answer.text)).and_then(|o| parse_score(&o)) {
            Ok(v) => q.adherence = Some(v),
            Err(e) => q.errors.push(format!("adherence: {e}")),
        },
        Err(e) => q.errors.push(format!("adherence: {e}")),
    }
    q
}
