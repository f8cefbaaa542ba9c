//! The HTTP adapter against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use qbrag::clients::http::HttpClient;
use qbrag::clients::{Backend, ClientConfig, ClientError, Embedder, PairScorer, TextGenRequest, TextGenerator};

/// Serves the scripted `(status, body)` replies in order, one per
/// connection, and records each request body.
fn serve(replies: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut request = vec![0; length];
            reader.read_exact(&mut request).unwrap();
            log.lock().unwrap().push(String::from_utf8(request).unwrap());
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn client(url: String, retries: usize) -> HttpClient {
    HttpClient::new(ClientConfig {
        backend: Backend::Http,
        endpoint: Some(url),
        max_retries: retries,
        backoff_base_ms: 1,
        timeout_ms: 5_000,
        dim: 3,
        ..ClientConfig::default()
    })
    .unwrap()
}

#[test]
fn persistent_server_errors_exhaust_retries() {
    let (url, seen) = serve(vec![(500, r#"{"error":"down"}"#); 3]);
    let err = client(url, 2).generate(&TextGenRequest::new("hello")).unwrap_err();
    match err {
        ClientError::RetryExhausted { attempts, last } => {
            assert_eq!(attempts, 3);
            assert!(last.contains("500"), "{last}");
        }
        other => panic!("expected retry exhaustion, got {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn recovers_after_a_transient_failure() {
    let (url, seen) = serve(vec![(503, "{}"), (200, r#"{"text":"fine"}"#)]);
    let text = client(url, 2).generate(&TextGenRequest::new("hello")).unwrap();
    assert_eq!(text, "fine");
    let bodies = seen.lock().unwrap();
    let body: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
    assert_eq!(body["prompt"], "hello");
}

#[test]
fn client_errors_fail_fast() {
    let (url, seen) = serve(vec![(400, "bad prompt"), (200, r#"{"text":"unused"}"#)]);
    let err = client(url, 3).generate(&TextGenRequest::new("hello")).unwrap_err();
    assert!(
        matches!(err, ClientError::BackendRefused { status: 400, .. }),
        "{err:?}"
    );
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn embeddings_and_scores_round_trip() {
    let (url, _) = serve(vec![
        (200, r#"{"vectors":[[3,0,4],[0,2,0]]}"#),
        (200, r#"{"score":-1.5}"#),
    ]);
    let c = client(url, 0);
    let v = c.embed(&["a".to_string(), "b".to_string()]).unwrap();
    assert!((v[0][0] - 0.6).abs() < 1e-12 && (v[0][2] - 0.8).abs() < 1e-12);
    assert_eq!(&*v[1], &[0.0, 1.0, 0.0]);
    assert_eq!(c.score_pair("q", "d").unwrap(), -1.5);
}
