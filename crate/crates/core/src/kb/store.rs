//! On-disk layout of a knowledge base directory.
//!
//! ```text
//! contents.jsonl       {"id","text","created_at"} per line
//! questions.jsonl      {"id","content_id","text","answerable"} per line
//! embeddings.qbem.c    content embeddings
//! embeddings.qbem.q    question embeddings
//! matrix.jsonl         header {"kind","m","n","threshold"?} then one entry per line
//! ```
//!
//! Embedding files are little-endian: `b"QBEM"`, `u8` version (1), `u32` dim,
//! `u32` count, `count × dim` `f32` values (one row per item), then the CRC32 of
//! the `f32` payload as `u32`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnswerabilityMatrix, Content, KbError, KnowledgeBase, MatrixEntries, MatrixKind, Question};
use crate::vector::EmbeddingMatrix;

pub const CONTENTS_FILE: &str = "contents.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const CONTENT_EMBEDDINGS_FILE: &str = "embeddings.qbem.c";
pub const QUESTION_EMBEDDINGS_FILE: &str = "embeddings.qbem.q";
pub const MATRIX_FILE: &str = "matrix.jsonl";

const MAGIC: &[u8; 4] = b"QBEM";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;
/// Estimate entries below this are omitted from `matrix.jsonl`.
const SPARSE_EPS: f64 = 1e-6;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixHeader {
    kind: MatrixKind,
    m: usize,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    threshold: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixLine {
    i: usize,
    j: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    p: Option<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KbError + '_ {
    move |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(file: &str, location: impl Into<String>, message: impl ToString) -> KbError {
    KbError::Format {
        file: file.to_string(),
        location: location.into(),
        message: message.to_string(),
    }
}

/// Write `kb` into `dir`, creating it if needed.
pub fn save(kb: &KnowledgeBase, dir: &Path) -> Result<(), KbError> {
    if !kb.embeddings_fresh() || kb.content_embeddings().is_none() {
        return Err(KbError::EmbeddingsStale);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_jsonl(&dir.join(CONTENTS_FILE), kb.contents())?;
    write_jsonl(&dir.join(QUESTIONS_FILE), kb.questions())?;

    let dim = kb.embedding_dim().expect("content embeddings present");
    let content_emb = kb.content_embeddings().expect("checked above");
    write_qbem(&dir.join(CONTENT_EMBEDDINGS_FILE), content_emb)?;
    let empty = EmbeddingMatrix::new(dim);
    write_qbem(
        &dir.join(QUESTION_EMBEDDINGS_FILE),
        kb.question_embeddings().unwrap_or(&empty),
    )?;

    let observed;
    let matrix = match kb.matrix() {
        Some(m) => m,
        None => {
            observed = kb.observed_matrix();
            &observed
        }
    };
    write_matrix(&dir.join(MATRIX_FILE), matrix)
}

/// Read a knowledge base previously written by [`save`].
pub fn load(dir: &Path) -> Result<KnowledgeBase, KbError> {
    let contents: Vec<Content> = read_jsonl(&dir.join(CONTENTS_FILE), CONTENTS_FILE)?;
    let questions: Vec<Question> = read_jsonl(&dir.join(QUESTIONS_FILE), QUESTIONS_FILE)?;
    let (c_dim, c_flat) = read_qbem(&dir.join(CONTENT_EMBEDDINGS_FILE), CONTENT_EMBEDDINGS_FILE)?;
    let (q_dim, q_flat) = read_qbem(&dir.join(QUESTION_EMBEDDINGS_FILE), QUESTION_EMBEDDINGS_FILE)?;
    if c_dim != q_dim {
        return Err(format_err(
            QUESTION_EMBEDDINGS_FILE,
            "header",
            format!("dimension {q_dim} differs from content embeddings ({c_dim})"),
        ));
    }
    let content_emb = embedding_matrix(
        CONTENT_EMBEDDINGS_FILE,
        c_dim,
        contents.iter().map(|c| c.id.clone()).collect(),
        c_flat,
    )?;
    let question_emb = embedding_matrix(
        QUESTION_EMBEDDINGS_FILE,
        q_dim,
        questions.iter().map(|q| q.id.clone()).collect(),
        q_flat,
    )?;

    let mut kb = KnowledgeBase::from_parts(contents, questions, Some(content_emb), Some(question_emb))?;
    let matrix = read_matrix(&dir.join(MATRIX_FILE))?;
    if matrix.kind() == MatrixKind::Observed && matrix != kb.observed_matrix() {
        return Err(format_err(
            MATRIX_FILE,
            "body",
            "observed matrix disagrees with questions.jsonl",
        ));
    }
    kb.set_matrix(matrix)
        .map_err(|e| format_err(MATRIX_FILE, "header", e))?;
    Ok(kb)
}

fn embedding_matrix(file: &str, dim: usize, ids: Vec<String>, flat: Vec<f32>) -> Result<EmbeddingMatrix, KbError> {
    if flat.len() != ids.len() * dim {
        return Err(format_err(
            file,
            "header",
            format!("{} vectors stored, {} items listed", flat.len() / dim.max(1), ids.len()),
        ));
    }
    let data = flat.into_iter().map(f64::from).collect();
    EmbeddingMatrix::from_flat(dim, ids, data).map_err(|e| format_err(file, "payload", e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), KbError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        write_json_line(&mut w, path, item)?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, name: &str) -> Result<Vec<T>, KbError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| format_err(name, format!("line {}", n + 1), e))?;
        out.push(item);
    }
    Ok(out)
}

/// Write an embedding matrix in the QBEM format.
pub fn write_qbem(path: &Path, mat: &EmbeddingMatrix) -> Result<(), KbError> {
    let mut payload = Vec::with_capacity(mat.as_flat().len() * 4);
    for &x in mat.as_flat() {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(mat.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(mat.len() as u32).to_le_bytes());
    buf.extend_from_slice(&payload);
    buf.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    fs::write(path, buf).map_err(io_err(path))
}

/// Read a QBEM file, returning `(dim, row-major values)`.
pub fn read_qbem(path: &Path, name: &str) -> Result<(usize, Vec<f32>), KbError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            name,
            "offset 0",
            format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(name, "offset 0", "bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(format_err(
            name,
            "offset 4",
            format!("unsupported version {}", bytes[4]),
        ));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    let dim = u32_at(5) as usize;
    let count = u32_at(9) as usize;
    if dim == 0 {
        return Err(format_err(name, "offset 5", "dimension is zero"));
    }
    let payload_len = dim
        .checked_mul(count)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| format_err(name, "offset 5", "dimension × count overflows"))?;
    let expected = HEADER_LEN + payload_len + 4;
    if bytes.len() != expected {
        return Err(format_err(
            name,
            format!("offset {}", bytes.len().min(expected)),
            format!("expected {expected} bytes for {count}×{dim}, found {}", bytes.len()),
        ));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
    let stored = u32_at(HEADER_LEN + payload_len);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(KbError::ChecksumMismatch {
            file: name.to_string(),
            stored,
            computed,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dim, values))
}

fn write_json_line<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<(), KbError> {
    serde_json::to_writer(&mut *w, value).map_err(|e| KbError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    w.write_all(b"\n").map_err(io_err(path))
}

fn write_matrix(path: &Path, matrix: &AnswerabilityMatrix) -> Result<(), KbError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = MatrixHeader {
        kind: matrix.kind(),
        m: matrix.m(),
        n: matrix.n(),
        threshold: matrix.threshold(),
    };
    write_json_line(&mut w, path, &header)?;
    match matrix.entries() {
        MatrixEntries::Binary(set) => {
            for &(i, j) in set {
                write_json_line(&mut w, path, &MatrixLine { i, j, p: None })?;
            }
        }
        MatrixEntries::Dense { probs, .. } => {
            let n = matrix.n();
            for (idx, &p) in probs.iter().enumerate() {
                if p >= SPARSE_EPS {
                    let line = MatrixLine {
                        i: idx / n,
                        j: idx % n,
                        p: Some(p),
                    };
                    write_json_line(&mut w, path, &line)?;
                }
            }
        }
    }
    w.flush().map_err(io_err(path))
}

fn read_matrix(path: &Path) -> Result<AnswerabilityMatrix, KbError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: MatrixHeader = loop {
        match lines.next() {
            None => return Err(format_err(MATRIX_FILE, "line 1", "missing header")),
            Some((n, line)) => {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line)
                    .map_err(|e| format_err(MATRIX_FILE, format!("line {}", n + 1), e))?;
            }
        }
    };
    let mut ones = BTreeSet::new();
    let mut probs = vec![0.0; header.m * header.n];
    for (n, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("line {}", n + 1);
        let entry: MatrixLine = serde_json::from_str(&line).map_err(|e| format_err(MATRIX_FILE, loc(), e))?;
        if entry.i >= header.m || entry.j >= header.n {
            return Err(format_err(
                MATRIX_FILE,
                loc(),
                format!("entry ({}, {}) out of bounds", entry.i, entry.j),
            ));
        }
        match (header.kind, entry.p) {
            (MatrixKind::Estimate, Some(p)) => probs[entry.i * header.n + entry.j] = p,
            (MatrixKind::Estimate, None) => return Err(format_err(MATRIX_FILE, loc(), "estimate entry without \"p\"")),
            (_, Some(_)) => return Err(format_err(MATRIX_FILE, loc(), "binary entry with \"p\"")),
            (_, None) => {
                ones.insert((entry.i, entry.j));
            }
        }
    }
    let built = match header.kind {
        MatrixKind::Estimate => {
            let threshold = header
                .threshold
                .ok_or_else(|| format_err(MATRIX_FILE, "line 1", "estimate header needs \"threshold\""))?;
            AnswerabilityMatrix::estimate(header.m, header.n, probs, threshold)
        }
        kind => AnswerabilityMatrix::binary(kind, header.m, header.n, ones),
    };
    built.map_err(|e| format_err(MATRIX_FILE, "body", e))
}
