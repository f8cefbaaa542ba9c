//! Prompt templates and a small `{placeholder}` renderer.
//!
//! Templates live in `prompts/*.txt`. `{name}` is substituted, `{{` and `}}`
//! are literal braces. Substituted values are never re-scanned.

use thiserror::Error;

/// Canonical refusal when the supplied context is insufficient.
pub const DECLINE_CANNOT_DETERMINE: &str = "I cannot determine the answer to that.";
/// Canonical refusal when no context is supplied.
pub const DECLINE_DO_NOT_KNOW: &str = "I do not know the answer to that.";

/// Appended to a prompt when its first output could not be parsed.
pub const RETRY_SUFFIX: &str = "\n\nReturn only JSON.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template references unknown placeholder {{{0}}}")]
    Unbound(String),
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    QuestionGeneration,
    Answerability,
    AnswerGeneration,
    Hyde,
    PseudoAnswer,
    Rephrase,
    NewQuestion,
    AnswerRelevancy,
    Faithfulness,
    GoldenAnswer,
    Guideline,
    Adherence,
}

impl PromptKind {
    pub const ALL: [PromptKind; 12] = [
        PromptKind::QuestionGeneration,
        PromptKind::Answerability,
        PromptKind::AnswerGeneration,
        PromptKind::Hyde,
        PromptKind::PseudoAnswer,
        PromptKind::Rephrase,
        PromptKind::NewQuestion,
        PromptKind::AnswerRelevancy,
        PromptKind::Faithfulness,
        PromptKind::GoldenAnswer,
        PromptKind::Guideline,
        PromptKind::Adherence,
    ];

    pub fn template(self) -> &'static str {
        let raw = match self {
            PromptKind::QuestionGeneration => include_str!("../prompts/question_generation.txt"),
            PromptKind::Answerability => include_str!("../prompts/answerability.txt"),
            PromptKind::AnswerGeneration => include_str!("../prompts/answer_generation.txt"),
            PromptKind::Hyde => include_str!("../prompts/hyde.txt"),
            PromptKind::PseudoAnswer => include_str!("../prompts/pseudo_answer.txt"),
            PromptKind::Rephrase => include_str!("../prompts/rephrase.txt"),
            PromptKind::NewQuestion => include_str!("../prompts/new_question.txt"),
            PromptKind::AnswerRelevancy => include_str!("../prompts/answer_relevancy.txt"),
            PromptKind::Faithfulness => include_str!("../prompts/faithfulness.txt"),
            PromptKind::GoldenAnswer => include_str!("../prompts/golden_answer.txt"),
            PromptKind::Guideline => include_str!("../prompts/guideline.txt"),
            PromptKind::Adherence => include_str!("../prompts/adherence.txt"),
        };
        raw.trim_end_matches('\n')
    }

    /// Identify which template produced `prompt` by its literal prefix.
    pub fn detect(prompt: &str) -> Option<PromptKind> {
        Self::ALL.into_iter().find(|k| {
            let prefix = literal_prefix(k.template());
            prompt.starts_with(&prefix)
        })
    }

    /// Recover placeholder values from a prompt rendered from this template.
    /// A trailing [`RETRY_SUFFIX`] is ignored.
    pub fn parse(self, prompt: &str) -> Option<Vec<(String, String)>> {
        let prompt = prompt.strip_suffix(RETRY_SUFFIX).unwrap_or(prompt);
        let segments = segments(self.template()).ok()?;
        let mut rest = prompt;
        let mut out = Vec::new();
        let mut pending: Option<String> = None;
        let last_literal = segments
            .iter()
            .rposition(|s| matches!(s, Segment::Literal(_)))
            .unwrap_or(0);
        for (idx, seg) in segments.iter().enumerate() {
            match seg {
                Segment::Literal(lit) => {
                    if let Some(name) = pending.take() {
                        let at = if idx == last_literal {
                            rest.rfind(lit.as_str())?
                        } else {
                            rest.find(lit.as_str())?
                        };
                        out.push((name, rest[..at].to_string()));
                        rest = &rest[at + lit.len()..];
                    } else {
                        rest = rest.strip_prefix(lit.as_str())?;
                    }
                }
                Segment::Placeholder(name) => pending = Some(name.clone()),
            }
        }
        if let Some(name) = pending {
            out.push((name, rest.to_string()));
        }
        Some(out)
    }

    pub fn field(self, prompt: &str, name: &str) -> Option<String> {
        self.parse(prompt)?.into_iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

fn segments(template: &str) -> Result<Vec<Segment>, PromptError> {
    let mut out = Vec::new();
    let mut lit = String::new();
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < template.len() {
        let ch = template[i..].chars().next().expect("in bounds");
        match ch {
            '{' if bytes.get(i + 1) == Some(&b'{') => {
                lit.push('{');
                i += 2;
            }
            '}' if bytes.get(i + 1) == Some(&b'}') => {
                lit.push('}');
                i += 2;
            }
            '{' => {
                let end = template[i..].find('}').ok_or(PromptError::Unterminated(i))? + i;
                if !lit.is_empty() {
                    out.push(Segment::Literal(std::mem::take(&mut lit)));
                }
                out.push(Segment::Placeholder(template[i + 1..end].to_string()));
                i = end + 1;
            }
            c => {
                lit.push(c);
                i += c.len_utf8();
            }
        }
    }
    if !lit.is_empty() {
        out.push(Segment::Literal(lit));
    }
    Ok(out)
}

fn literal_prefix(template: &str) -> String {
    match segments(template).ok().and_then(|s| s.into_iter().next()) {
        Some(Segment::Literal(l)) => l,
        _ => String::new(),
    }
}

/// Substitute every `{name}` in `template` from `vars`.
pub fn render(template: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    for seg in segments(template)? {
        match seg {
            Segment::Literal(l) => out.push_str(&l),
            Segment::Placeholder(name) => {
                let value = vars
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, v)| *v)
                    .ok_or(PromptError::Unbound(name))?;
                out.push_str(value);
            }
        }
    }
    Ok(out)
}

fn render_kind(kind: PromptKind, vars: &[(&str, &str)]) -> String {
    render(kind.template(), vars).expect("bundled templates bind every placeholder")
}

const EXAMPLE_CONTENT: &str = "Walking after meals can help lower your blood sugar. A 10 to 15 minute walk \
helps your muscles use glucose from your blood. If you can't walk, try light chores or marching in place.";

const EXAMPLE_QUESTIONS: [&str; 5] = [
    "How can walking after I eat help my blood sugar?",
    "How long should I walk after a meal to help my glucose?",
    "What can I do after eating if I am not able to go for a walk?",
    "Why does moving my muscles lower my blood sugar?",
    "Is a short walk after dinner enough to make a difference for my diabetes?",
];

const ANSWERABILITY_EXAMPLES: &str = r#"
Question: How long should I walk after a meal?
Content: A 10 to 15 minute walk after meals helps your muscles use glucose from your blood.
Output: {"Explanation": "The query asks for a walking duration. The content states 10 to 15 minutes.", "Source relevant": "Yes"}

Question: What is a normal blood pressure reading?
Content: A 10 to 15 minute walk after meals helps your muscles use glucose from your blood.
Output: {"Explanation": "The query needs blood pressure ranges. The content only discusses walking and glucose.", "Source relevant": "No"}"#;

pub fn question_generation(num_questions: usize, content: &str) -> String {
    let n = num_questions.to_string();
    let examples: Vec<&str> = EXAMPLE_QUESTIONS
        .iter()
        .copied()
        .take(num_questions.clamp(1, EXAMPLE_QUESTIONS.len()))
        .collect();
    let example_json = serde_json::json!({ "questions": examples }).to_string();
    render_kind(
        PromptKind::QuestionGeneration,
        &[
            ("num_questions", &n),
            ("example content", EXAMPLE_CONTENT),
            ("example JSON with list of num_question questions", &example_json),
            ("cc_text", content),
        ],
    )
}

pub fn answerability(question: &str, content: &str) -> String {
    render_kind(
        PromptKind::Answerability,
        &[
            (
                "positive and negative examples, with explanations",
                ANSWERABILITY_EXAMPLES,
            ),
            ("question", question),
            ("content", content),
        ],
    )
}

/// Contexts are joined by blank lines in retrieval order.
pub fn answer_generation(question: &str, contexts: &[&str]) -> String {
    let joined = contexts.join("\n\n");
    render_kind(
        PromptKind::AnswerGeneration,
        &[("contexts", &joined), ("question", question)],
    )
}

pub fn hyde(question: &str) -> String {
    render_kind(PromptKind::Hyde, &[("question", question)])
}

pub fn pseudo_answer(question: &str) -> String {
    render_kind(PromptKind::PseudoAnswer, &[("question", question)])
}

pub fn rephrase(question: &str) -> String {
    render_kind(PromptKind::Rephrase, &[("question", question)])
}

pub fn new_question(content: &str, existing: &[&str]) -> String {
    let listed: Vec<String> = existing.iter().map(|q| format!("- {q}")).collect();
    let listed = if listed.is_empty() {
        "- (none)".to_string()
    } else {
        listed.join("\n")
    };
    render_kind(PromptKind::NewQuestion, &[("existing", &listed), ("content", content)])
}

pub fn answer_relevancy(question: &str, answer: &str) -> String {
    render_kind(
        PromptKind::AnswerRelevancy,
        &[("question", question), ("answer", answer)],
    )
}

pub fn faithfulness(contexts: &[&str], answer: &str) -> String {
    let joined = contexts.join("\n\n");
    render_kind(PromptKind::Faithfulness, &[("contexts", &joined), ("answer", answer)])
}

pub fn golden_answer(content: &str, question: &str) -> String {
    render_kind(
        PromptKind::GoldenAnswer,
        &[("content", content), ("question", question)],
    )
}

pub fn guideline(golden: &str) -> String {
    render_kind(PromptKind::Guideline, &[("golden", golden)])
}

pub fn adherence(guideline: &str, answer: &str) -> String {
    render_kind(PromptKind::Adherence, &[("guideline", guideline), ("answer", answer)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_and_unescapes() {
        assert_eq!(render("a {x} {{y}} {x}", &[("x", "1")]).unwrap(), "a 1 {y} 1");
        assert_eq!(render("{x}", &[]), Err(PromptError::Unbound("x".into())));
        assert_eq!(render("oops {x", &[("x", "1")]), Err(PromptError::Unterminated(5)));
        // values are inserted verbatim
        assert_eq!(render("{x}", &[("x", "{y}")]).unwrap(), "{y}");
    }

    #[test]
    fn question_prompt_keeps_json_format_instruction() {
        let p = question_generation(20, "Some text.");
        assert!(p.contains(r#"{"questions": ["...","...","...","..."]}"#));
        assert!(p.contains("setup 20 questions"));
        assert!(p.ends_with("Text:\nSome text.\nGenerated Questions:"));
    }

    #[test]
    fn every_rendered_prompt_is_detected_and_parsed() {
        let cases = [
            (
                PromptKind::QuestionGeneration,
                question_generation(3, "Body text."),
                "cc_text",
                "Body text.",
            ),
            (PromptKind::Answerability, answerability("Q?", "C."), "content", "C."),
            (
                PromptKind::AnswerGeneration,
                answer_generation("Q?", &["a", "b"]),
                "contexts",
                "a\n\nb",
            ),
            (PromptKind::Hyde, hyde("Q?"), "question", "Q?"),
            (PromptKind::PseudoAnswer, pseudo_answer("Q?"), "question", "Q?"),
            (PromptKind::Rephrase, rephrase("Q?"), "question", "Q?"),
            (PromptKind::NewQuestion, new_question("C.", &["x?"]), "existing", "- x?"),
            (
                PromptKind::AnswerRelevancy,
                answer_relevancy("Q?", "A."),
                "answer",
                "A.",
            ),
            (PromptKind::Faithfulness, faithfulness(&["c"], "A."), "contexts", "c"),
            (PromptKind::GoldenAnswer, golden_answer("C.", "Q?"), "question", "Q?"),
            (PromptKind::Guideline, guideline("G."), "golden", "G."),
            (PromptKind::Adherence, adherence("- a", "A."), "guideline", "- a"),
        ];
        for (kind, prompt, field, value) in cases {
            assert_eq!(PromptKind::detect(&prompt), Some(kind), "{kind:?}");
            assert_eq!(kind.field(&prompt, field).as_deref(), Some(value), "{kind:?}");
        }
    }

    #[test]
    fn parse_tolerates_retry_suffix() {
        let p = format!("{}{RETRY_SUFFIX}", answerability("Q?", "C."));
        assert_eq!(PromptKind::Answerability.field(&p, "question").as_deref(), Some("Q?"));
        assert_eq!(PromptKind::Answerability.field(&p, "content").as_deref(), Some("C."));
    }
}
