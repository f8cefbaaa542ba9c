use std::path::Path;
use std::sync::Arc;

use qbrag::cli::{cmd_genq, cmd_ingest};
use qbrag::clients::{ClientError, Clients, TextGenRequest};
use qbrag::kb;
use qbrag::pipeline::GenerationConfig;
use qbrag::prompts::PromptKind;

fn ingest(dir: &Path, clients: &Clients) {
    let contents = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/contents.jsonl");
    cmd_ingest(&contents, dir, clients, &mut Vec::new()).unwrap();
}

#[test]
fn unparseable_generation_names_the_content() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("kb");
    let mock = Clients::mock(0);
    ingest(&dir, &mock);
    let before = std::fs::read(dir.join("questions.jsonl")).unwrap();

    let inner = mock.generator.clone();
    let target = kb::load(&dir).unwrap().contents()[4].text.clone();
    let generator = move |req: &TextGenRequest| -> Result<String, ClientError> {
        if PromptKind::detect(&req.prompt) == Some(PromptKind::QuestionGeneration) && req.prompt.contains(&target) {
            return Ok("no questions here, sorry".into());
        }
        inner.generate(req)
    };
    let clients = mock.clone().with_generator(Arc::new(generator));
    let err = cmd_genq(&dir, &clients, &GenerationConfig::default(), &mut Vec::new()).unwrap_err();
    assert!(err.to_string().contains("c000004"), "{err}");
    // nothing is written on failure
    assert_eq!(before, std::fs::read(dir.join("questions.jsonl")).unwrap());
}

#[test]
fn rejected_questions_leave_a_content_bare() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("kb");
    let mock = Clients::mock(0);
    ingest(&dir, &mock);

    let inner = mock.judge.clone();
    let target = kb::load(&dir).unwrap().contents()[4].text.clone();
    let judge = move |req: &TextGenRequest| -> Result<String, ClientError> {
        let kind = PromptKind::Answerability;
        if PromptKind::detect(&req.prompt) == Some(kind)
            && kind.field(&req.prompt, "content").as_deref() == Some(target.as_str())
        {
            return Ok(r#"{"Explanation": "off topic", "Source relevant": "No"}"#.into());
        }
        inner.generate(req)
    };
    let clients = mock.clone().with_judge(Arc::new(judge));
    let summary = cmd_genq(&dir, &clients, &GenerationConfig::default(), &mut Vec::new()).unwrap();
    let stored = kb::load(&dir).unwrap();
    let bare = vec![stored.contents()[4].id.clone()];
    assert_eq!(summary.bare_contents, bare);
    assert_eq!(stored.uncovered_contents(), bare);
    assert_eq!(summary.kept, stored.active_positions().len());
    assert!(
        stored.questions().len() > summary.kept,
        "rejected questions stay in the store"
    );
}

#[test]
fn regenerating_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("kb");
    let clients = Clients::mock(0);
    ingest(&dir, &clients);
    let cfg = GenerationConfig::default();
    cmd_genq(&dir, &clients, &cfg, &mut Vec::new()).unwrap();
    let once = std::fs::read(dir.join("questions.jsonl")).unwrap();
    cmd_genq(&dir, &clients, &cfg, &mut Vec::new()).unwrap();
    assert_eq!(once, std::fs::read(dir.join("questions.jsonl")).unwrap());
}
