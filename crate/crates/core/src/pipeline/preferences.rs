use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{diversity_score, judge_answerability, PipelineError};
use crate::clients::{bounded_map, Embedder, TextGenRequest, TextGenerator};
use crate::kb::{KbError, KnowledgeBase};
use crate::prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preferred {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub content_id: String,
    /// Questions shown in the prompt.
    pub shown: Vec<String>,
    pub a: String,
    pub b: String,
    pub preferred: Preferred,
    pub reward_a: f64,
    pub reward_b: f64,
}

impl PreferenceExample {
    pub fn preferred_reward(&self) -> f64 {
        match self.preferred {
            Preferred::A => self.reward_a,
            Preferred::B => self.reward_b,
        }
    }

    pub fn preferred_text(&self) -> &str {
        match self.preferred {
            Preferred::A => &self.a,
            Preferred::B => &self.b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreferenceConfig {
    /// Samples drawn per content.
    pub samples_per_content: usize,
    pub seed: u64,
    /// Reward a preferred question must reach to count as "high" for plain
    /// fine-tuning data.
    pub high_reward: f64,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        Self {
            samples_per_content: 4,
            seed: 0,
            high_reward: 0.15,
        }
    }
}

/// Subset size in `0..=max`, drawn with probability proportional to `size + 1`.
fn subset_size(rng: &mut ChaCha8Rng, max: usize) -> usize {
    let total = (max + 1) * (max + 2) / 2;
    let mut ticket = rng.random_range(0..total);
    for size in 0..=max {
        if ticket <= size {
            return size;
        }
        ticket -= size + 1;
    }
    max
}

struct Scorer<'a> {
    judge: &'a dyn TextGenerator,
    embedder: &'a dyn Embedder,
}

impl Scorer<'_> {
    /// Answerability (+1 / -1) times diversity against the shown set.
    fn reward(&self, content: &str, question: &str, shown: &[&str]) -> Result<f64, PipelineError> {
        let alpha = if judge_answerability(self.judge, question, content)?.answerable {
            1.0
        } else {
            -1.0
        };
        Ok(alpha * diversity_score(question, shown, self.embedder)?)
    }
}

fn curate_content(
    scorer: &Scorer<'_>,
    generator: Option<&dyn TextGenerator>,
    content: &str,
    content_id: &str,
    questions: &[String],
    cfg: &PreferenceConfig,
    seed: u64,
) -> Result<Vec<PreferenceExample>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = questions.len();
    if n < 3 && generator.is_none() {
        return Err(PipelineError::InsufficientQuestions {
            content_id: content_id.to_string(),
        });
    }
    let mut out = Vec::new();
    for _ in 0..cfg.samples_per_content {
        // Leave two questions unshown when possible; otherwise fresh ones fill in.
        let max_shown = if n >= 3 { n - 2 } else { n };
        let size = subset_size(&mut rng, max_shown);
        let picked = sample(&mut rng, n, size).into_vec();
        let shown: Vec<&str> = picked.iter().map(|&i| questions[i].as_str()).collect();
        let mut remaining: Vec<String> = (0..n)
            .filter(|i| !picked.contains(i))
            .map(|i| questions[i].clone())
            .collect();
        let mut pair: Vec<String> = if remaining.len() >= 2 {
            sample(&mut rng, remaining.len(), 2)
                .into_iter()
                .map(|i| remaining[i].clone())
                .collect()
        } else {
            std::mem::take(&mut remaining)
        };
        while pair.len() < 2 {
            let generator = generator.ok_or_else(|| PipelineError::InsufficientQuestions {
                content_id: content_id.to_string(),
            })?;
            let existing: Vec<&str> = questions
                .iter()
                .map(String::as_str)
                .chain(pair.iter().map(String::as_str))
                .collect();
            let fresh = generator.generate(&TextGenRequest::new(prompts::new_question(content, &existing)))?;
            pair.push(fresh.trim().to_string());
        }
        let (a, b) = (pair[0].clone(), pair[1].clone());
        if a == b || a.is_empty() || b.is_empty() {
            continue;
        }
        let reward_a = scorer.reward(content, &a, &shown)?;
        let reward_b = scorer.reward(content, &b, &shown)?;
        let preferred = if reward_a > reward_b {
            Preferred::A
        } else if reward_b > reward_a {
            Preferred::B
        } else {
            continue;
        };
        out.push(PreferenceExample {
            content_id: content_id.to_string(),
            shown: shown.iter().map(|s| s.to_string()).collect(),
            a,
            b,
            preferred,
            reward_a,
            reward_b,
        });
    }
    Ok(out)
}

/// Build a pairwise preference dataset from the current question base.
/// Ties in reward are skipped. Output order follows content order, then
/// sample order, and depends only on the inputs and `cfg.seed`.
pub fn curate_preferences(
    judge: &dyn TextGenerator,
    embedder: &dyn Embedder,
    generator: Option<&dyn TextGenerator>,
    kb: &KnowledgeBase,
    cfg: &PreferenceConfig,
    max_parallel: usize,
) -> Result<Vec<PreferenceExample>, PipelineError> {
    if cfg.samples_per_content == 0 {
        return Err(PipelineError::InvalidConfig(
            "samples_per_content must be at least 1".into(),
        ));
    }
    let scorer = Scorer { judge, embedder };
    let per_content: Vec<(String, String, Vec<String>)> = kb
        .contents()
        .iter()
        .map(|c| {
            let qs = kb
                .questions()
                .iter()
                .filter(|q| q.content_id == c.id)
                .map(|q| q.text.clone())
                .collect();
            (c.id.clone(), c.text.clone(), qs)
        })
        .collect();
    let results = bounded_map(&per_content, max_parallel, |ordinal, (id, text, qs)| {
        let seed = cfg.seed ^ (ordinal as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        curate_content(&scorer, generator, text, id, qs, cfg, seed)
    });
    let mut out = Vec::new();
    for ((id, _, _), r) in per_content.iter().zip(results) {
        out.extend(r.map_err(|e| match e {
            e @ PipelineError::InsufficientQuestions { .. } => e,
            other => PipelineError::Content {
                content_id: id.clone(),
                source: Box::new(other),
            },
        })?);
    }
    Ok(out)
}

/// Examples whose preferred question clears the high-reward bar, for
/// supervised fine-tuning instead of preference tuning.
pub fn high_reward_examples(examples: &[PreferenceExample], threshold: f64) -> Vec<&PreferenceExample> {
    examples.iter().filter(|e| e.preferred_reward() >= threshold).collect()
}

pub fn write_preferences(path: &Path, examples: &[PreferenceExample]) -> Result<(), PipelineError> {
    let io = |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for e in examples {
        let line = serde_json::to_string(e).expect("preference example serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}
