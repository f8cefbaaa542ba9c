//! Lenient extraction of a JSON object from model output.
//!
//! The repairs are deliberately few: drop Markdown code fences, keep the first
//! balanced `{...}`, and turn single-quoted keys (and simple single-quoted
//! string values) into double-quoted ones.

use std::sync::LazyLock;

use regex::Regex;
use serde_json::{Map, Value};

static SINGLE_QUOTED_KEY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"([{,]\s*)'([^'"\\]*)'(\s*:)"#).expect("valid regex"));
static SINGLE_QUOTED_VALUE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(:\s*)'([^'"\\]*)'(\s*[,}])"#).expect("valid regex"));

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// First `{...}` whose braces balance, ignoring braces inside double-quoted
/// strings.
pub fn first_balanced_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (off, ch) in text[start..].char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + off + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn requote(object: &str) -> String {
    let keys = SINGLE_QUOTED_KEY.replace_all(object, "$1\"$2\"$3");
    // Run twice: adjacent matches share the separator character.
    let once = SINGLE_QUOTED_VALUE.replace_all(&keys, "$1\"$2\"$3");
    SINGLE_QUOTED_VALUE.replace_all(&once, "$1\"$2\"$3").into_owned()
}

/// Best-effort parse of the first JSON object in `text`.
pub fn extract_object(text: &str) -> Option<Map<String, Value>> {
    let as_object = |s: &str| match serde_json::from_str::<Value>(s) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    };
    if let Some(m) = as_object(text.trim()) {
        return Some(m);
    }
    let unfenced = strip_fences(text);
    let object = first_balanced_object(&unfenced)?;
    as_object(object).or_else(|| as_object(&requote(object)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_object() {
        let m = extract_object(r#"{"questions":["a?","b?"]}"#).unwrap();
        assert_eq!(m["questions"][1], "b?");
    }

    #[test]
    fn fenced_with_prose() {
        let text = "Sure! Here you go:\n```json\n{\"questions\": [\"a?\"]}\n```\nHope that helps {really}.";
        let m = extract_object(text).unwrap();
        assert_eq!(m["questions"][0], "a?");
    }

    #[test]
    fn braces_inside_strings_do_not_count() {
        let text = r#"noise {"a": "x } y", "b": {"c": 1}} trailing"#;
        assert_eq!(first_balanced_object(text), Some(r#"{"a": "x } y", "b": {"c": 1}}"#));
    }

    #[test]
    fn python_style_dict() {
        let m = extract_object("{'Explanation': 'It covers it', 'Source relevant': 'Yes'}").unwrap();
        assert_eq!(m["Source relevant"], "Yes");
        assert_eq!(m["Explanation"], "It covers it");
    }

    #[test]
    fn unbalanced_or_absent() {
        assert!(extract_object("no json here").is_none());
        assert!(extract_object("{\"a\": 1").is_none());
        assert!(extract_object("[1, 2]").is_none());
    }
}
