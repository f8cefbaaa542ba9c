use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::report::{EvaluationReport, MetricCounts, MetricRow, ReportConfig};
use super::{
    case_relevant, case_reranker_max, generate_answer, golden_guideline, judge_answer_quality, write_lines, EvalError,
    TestCase,
};
use crate::clients::{bounded_map, Clients};
use crate::kb::{FrozenKb, KbError};
use crate::retrieve::{RetrievalResult, Retriever, StrategyConfig};

pub const REPORT_FILE: &str = "report.json";
pub const ANSWERS_FILE: &str = "answers.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPlan {
    pub strategies: Vec<StrategyConfig>,
    pub ks: Vec<usize>,
    /// Replaces the seed of every strategy configuration.
    pub seed: u64,
    pub max_parallel: usize,
}

/// Everything measured for one (strategy, k, case). Fields stay `None` when
/// the step producing them failed; the reasons are in `errors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub test_case_id: String,
    pub strategy: String,
    pub k: usize,
    pub retrieved: Option<RetrievalResult>,
    pub exact_hit: Option<bool>,
    pub retrieval_relevant: Option<bool>,
    pub reranker_max: Option<f64>,
    pub answer: Option<String>,
    pub declined: Option<bool>,
    pub faithful: Option<bool>,
    pub relevant: Option<bool>,
    pub adherence: Option<f64>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutput {
    pub report: EvaluationReport,
    pub answers: Vec<AnswerRecord>,
}

impl BenchOutput {
    /// Writes the report and the per-case records into `dir`; returns the
    /// report path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, EvalError> {
        std::fs::create_dir_all(dir).map_err(|source| KbError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let report = dir.join(REPORT_FILE);
        std::fs::write(&report, self.report.to_canonical_json()).map_err(|source| KbError::Io {
            path: report.clone(),
            source,
        })?;
        write_lines(&dir.join(ANSWERS_FILE), &self.answers)?;
        Ok(report)
    }
}

fn evaluate_case(
    kb: &FrozenKb,
    clients: &Clients,
    cfg: &StrategyConfig,
    k: usize,
    case: &TestCase,
    guideline: &Result<String, String>,
) -> AnswerRecord {
    let mut rec = AnswerRecord {
        test_case_id: case.id.clone(),
        strategy: cfg.strategy.name().to_string(),
        k,
        retrieved: None,
        exact_hit: None,
        retrieval_relevant: None,
        reranker_max: None,
        answer: None,
        declined: None,
        faithful: None,
        relevant: None,
        adherence: None,
        errors: Vec::new(),
    };
    let result = match Retriever::new(kb, clients).retrieve(&case.question, k, cfg) {
        Ok(r) => r,
        Err(e) => {
            rec.errors.push(format!("retrieval: {e}"));
            return rec;
        }
    };
    rec.exact_hit = Some(result.content_ids().any(|id| id == case.golden_content_id));
    match case_relevant(clients.judge.as_ref(), kb, &case.question, &result) {
        Ok(v) => rec.retrieval_relevant = Some(v),
        Err(e) => rec.errors.push(format!("relevancy: {e}")),
    }
    match case_reranker_max(clients.scorer.as_ref(), kb, &case.question, &result) {
        Ok(v) => rec.reranker_max = Some(v),
        Err(e) => rec.errors.push(format!("reranker: {e}")),
    }
    let contexts: Vec<&str> = result
        .content_ids()
        .filter_map(|id| kb.content(id).map(|c| c.text.as_str()))
        .collect();
    match generate_answer(clients.generator.as_ref(), &case.question, &contexts) {
        Ok(answer) => {
            let q = judge_answer_quality(
                clients.judge.as_ref(),
                &case.question,
                &answer,
                &contexts,
                guideline.as_deref().map_err(String::as_str),
            );
            rec.relevant = q.relevant;
            rec.faithful = q.faithful;
            rec.adherence = q.adherence;
            rec.errors.extend(q.errors);
            rec.declined = Some(answer.declined);
            rec.answer = Some(answer.text);
        }
        Err(e) => rec.errors.push(format!("answer: {e}")),
    }
    rec.retrieved = Some(result);
    rec
}

fn mean(values: impl Iterator<Item = Option<f64>>, failures: &mut usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => *failures += 1,
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn aggregate(strategy: &str, k: usize, records: &[AnswerRecord]) -> MetricRow {
    let flag = |b: Option<bool>| b.map(|b| f64::from(u8::from(b)));
    let mut c = MetricCounts {
        cases: records.len(),
        ..Default::default()
    };
    let retrieved: Vec<&AnswerRecord> = records.iter().filter(|r| r.retrieved.is_some()).collect();
    c.retrieval_failures = records.len() - retrieved.len();
    let answered: Vec<&AnswerRecord> = retrieved.iter().copied().filter(|r| r.declined.is_some()).collect();
    c.answer_failures = retrieved.len() - answered.len();
    let mut ignore = 0;
    MetricRow {
        strategy: strategy.to_string(),
        k,
        exact_recovery_rate: mean(retrieved.iter().map(|r| flag(r.exact_hit)), &mut ignore),
        relevancy_rate: mean(
            retrieved.iter().map(|r| flag(r.retrieval_relevant)),
            &mut c.relevancy_failures,
        ),
        avg_reranker_score: mean(retrieved.iter().map(|r| r.reranker_max), &mut c.reranker_failures),
        declined_rate: mean(answered.iter().map(|r| flag(r.declined)), &mut ignore),
        faithfulness_rate: mean(answered.iter().map(|r| flag(r.faithful)), &mut c.faithfulness_failures),
        relevancy_answer_rate: mean(
            answered.iter().map(|r| flag(r.relevant)),
            &mut c.answer_relevancy_failures,
        ),
        accuracy_rate: mean(answered.iter().map(|r| r.adherence), &mut c.adherence_failures),
        counts: c,
    }
}

/// Every strategy at every k against every case. Per-case failures are
/// recorded and excluded from the affected denominators; they never abort
/// the run.
pub fn run_benchmark(
    kb: &FrozenKb,
    clients: &Clients,
    cases: &[TestCase],
    plan: &BenchPlan,
) -> Result<BenchOutput, EvalError> {
    if plan.strategies.is_empty() {
        return Err(EvalError::Config("no strategies given".into()));
    }
    if plan.ks.is_empty() || plan.ks.contains(&0) {
        return Err(EvalError::Config(
            "k values must be a non-empty list of positive integers".into(),
        ));
    }
    if cases.is_empty() {
        return Err(EvalError::Config("no test cases".into()));
    }
    for case in cases {
        if kb.content(&case.golden_content_id).is_none() {
            return Err(KbError::UnknownContent(case.golden_content_id.clone()).into());
        }
    }
    let strategies: Vec<StrategyConfig> = plan
        .strategies
        .iter()
        .map(|s| StrategyConfig {
            seed: plan.seed,
            ..s.clone()
        })
        .collect();
    for s in &strategies {
        s.validate()?;
    }

    // The guideline depends only on the case, so it is shared by every run.
    let guidelines: Vec<Result<String, String>> = bounded_map(cases, plan.max_parallel, |_, case| {
        let golden = kb.content(&case.golden_content_id).expect("checked above");
        golden_guideline(clients.generator.as_ref(), &case.question, &golden.text).map_err(|e| e.to_string())
    });

    let mut work = Vec::with_capacity(strategies.len() * plan.ks.len() * cases.len());
    for (s, _) in strategies.iter().enumerate() {
        for &k in &plan.ks {
            for c in 0..cases.len() {
                work.push((s, k, c));
            }
        }
    }
    let answers = bounded_map(&work, plan.max_parallel, |_, &(s, k, c)| {
        evaluate_case(kb, clients, &strategies[s], k, &cases[c], &guidelines[c])
    });

    let rows = answers
        .chunks(cases.len())
        .map(|chunk| aggregate(&chunk[0].strategy, chunk[0].k, chunk))
        .collect();
    Ok(BenchOutput {
        report: EvaluationReport {
            rows,
            config: ReportConfig {
                strategies,
                ks: plan.ks.clone(),
                seed: plan.seed,
                cases: cases.len(),
            },
        },
        answers,
    })
}
