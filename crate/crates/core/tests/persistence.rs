use std::path::Path;

use qbrag::cli::{cmd_build_matrix, cmd_genq, cmd_ingest, MatrixSettings};
use qbrag::clients::Clients;
use qbrag::kb::{self, KbError, MatrixKind, CONTENT_EMBEDDINGS_FILE, MATRIX_FILE};
use qbrag::pipeline::GenerationConfig;

fn build(dir: &Path) {
    let clients = Clients::mock(0);
    let contents = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/contents.jsonl");
    let mut sink = Vec::new();
    cmd_ingest(&contents, dir, &clients, &mut sink).unwrap();
    cmd_genq(dir, &clients, &GenerationConfig::default(), &mut sink).unwrap();
    cmd_build_matrix(dir, &clients, &MatrixSettings::default(), &mut sink).unwrap();
}

#[test]
fn save_then_load_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("a");
    build(&first);
    let loaded = kb::load(&first).unwrap();
    assert_eq!(loaded.matrix().unwrap().kind(), MatrixKind::Estimate);

    // embeddings are stored as f32, so the second generation must be exact
    let second = tmp.path().join("b");
    kb::save(&loaded, &second).unwrap();
    let reloaded = kb::load(&second).unwrap();
    assert_eq!(loaded, reloaded);
    for name in [
        "contents.jsonl",
        "questions.jsonl",
        MATRIX_FILE,
        CONTENT_EMBEDDINGS_FILE,
    ] {
        assert_eq!(
            std::fs::read(first.join(name)).unwrap(),
            std::fs::read(second.join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn corrupted_embeddings_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("kb");
    build(&dir);
    let path = dir.join(CONTENT_EMBEDDINGS_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[20] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(kb::load(&dir), Err(KbError::ChecksumMismatch { .. })));

    bytes.truncate(bytes.len() - 9);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(kb::load(&dir), Err(KbError::Format { .. })));
}

#[test]
fn malformed_matrix_reports_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("kb");
    build(&dir);
    let path = dir.join(MATRIX_FILE);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"i\": 99999, \"j\": 0, \"p\": 0.5}\n");
    let line = text.lines().count();
    std::fs::write(&path, text).unwrap();
    match kb::load(&dir) {
        Err(KbError::Format { file, location, .. }) => {
            assert_eq!(file, MATRIX_FILE);
            assert_eq!(location, format!("line {line}"));
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn missing_directory_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(kb::load(&tmp.path().join("nothing")), Err(KbError::Io { .. })));
}
