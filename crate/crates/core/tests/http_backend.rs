//! Wire-level tests of the HTTP chat backend against a canned loopback
//! server: request shape, auth header, and error classification.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::time::Duration;

use orchestra_core::backend::{
    Backend, BackendError, GenerationRequest, HttpChatBackend, Message, StopReason,
};

struct Canned {
    status_line: &'static str,
    headers: &'static str,
    body: &'static str,
    delay: Option<Duration>,
}

/// Serve one canned response; the raw request text comes back over the
/// channel.
fn serve_once(canned: Canned) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        if let Ok((mut stream, _)) = listener.accept() {
            let mut raw = Vec::new();
            let mut buf = [0u8; 4096];
            loop {
                let n = stream.read(&mut buf).unwrap_or(0);
                if n == 0 {
                    break;
                }
                raw.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&raw);
                if let Some(split) = text.find("\r\n\r\n") {
                    let content_length = text
                        .lines()
                        .find_map(|l| l.to_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap_or(0)))
                        .unwrap_or(0);
                    if raw.len() >= split + 4 + content_length {
                        break;
                    }
                }
            }
            let _ = tx.send(String::from_utf8_lossy(&raw).into_owned());
            if let Some(delay) = canned.delay {
                std::thread::sleep(delay);
            }
            let response = format!(
                "HTTP/1.1 {}\r\nContent-Type: application/json\r\n{}Content-Length: {}\r\nConnection: close\r\n\r\n{}",
                canned.status_line,
                canned.headers,
                canned.body.len(),
                canned.body
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    (format!("http://{addr}"), rx)
}

fn request() -> GenerationRequest {
    GenerationRequest {
        messages: vec![Message::system("sys"), Message::user("hello")],
        temperature: 0.7,
        seed: Some(42),
        stop_sequences: vec!["<|end_sql_query|>".into(), "<|end_answer|>".into()],
        max_tokens: 128,
    }
}

#[test]
fn success_maps_the_wire_format() {
    let (url, rx) = serve_once(Canned {
        status_line: "200 OK",
        headers: "",
        body: r#"{"choices":[{"message":{"content":"generated text"},"finish_reason":"stop"}],"usage":{"prompt_tokens":9,"completion_tokens":3}}"#,
        delay: None,
    });
    let backend = HttpChatBackend::new(url, "test-model").with_api_key("secret-key");
    let result = backend.generate(&request()).unwrap();
    assert_eq!(result.text, "generated text");
    assert_eq!(result.stop_reason, StopReason::End);
    assert_eq!(result.usage.prompt_tokens, 9);
    assert_eq!(result.usage.completion_tokens, 3);

    let raw = rx.recv().unwrap();
    assert!(raw.starts_with("POST /v1/chat/completions"), "{raw}");
    assert!(raw.contains("authorization: Bearer secret-key") || raw.contains("Authorization: Bearer secret-key"));
    let body = raw.split("\r\n\r\n").nth(1).unwrap();
    let json: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(json["model"], "test-model");
    assert_eq!(json["temperature"], 0.7);
    assert_eq!(json["max_tokens"], 128);
    assert_eq!(json["seed"], 42);
    assert_eq!(json["messages"][0]["role"], "system");
    assert_eq!(json["messages"][1]["content"], "hello");
    assert_eq!(json["stop"].as_array().unwrap().len(), 2);
}

#[test]
fn long_stop_lists_are_omitted_for_the_provider() {
    let (url, rx) = serve_once(Canned {
        status_line: "200 OK",
        headers: "",
        body: r#"{"choices":[{"message":{"content":"x"},"finish_reason":"length"}]}"#,
        delay: None,
    });
    let backend = HttpChatBackend::new(url, "m").with_max_stop_sequences(1);
    let result = backend.generate(&request()).unwrap();
    // The engine's scan-and-truncate path takes over in this mode.
    assert_eq!(result.stop_reason, StopReason::Length);
    let raw = rx.recv().unwrap();
    let body = raw.split("\r\n\r\n").nth(1).unwrap();
    let json: serde_json::Value = serde_json::from_str(body).unwrap();
    assert!(json.get("stop").is_none(), "{json}");
}

#[test]
fn rate_limits_surface_with_retry_after() {
    let (url, _rx) = serve_once(Canned {
        status_line: "429 Too Many Requests",
        headers: "Retry-After: 2\r\n",
        body: "slow down",
        delay: None,
    });
    let backend = HttpChatBackend::new(url, "m");
    match backend.generate(&request()).unwrap_err() {
        BackendError::RateLimited { retry_after } => {
            assert_eq!(retry_after, Some(Duration::from_secs(2)));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn server_errors_are_protocol_errors() {
    let (url, _rx) = serve_once(Canned {
        status_line: "500 Internal Server Error",
        headers: "",
        body: "boom",
        delay: None,
    });
    let backend = HttpChatBackend::new(url, "m");
    match backend.generate(&request()).unwrap_err() {
        BackendError::Protocol(message) => assert!(message.contains("500"), "{message}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_bodies_are_protocol_errors() {
    let (url, _rx) = serve_once(Canned {
        status_line: "200 OK",
        headers: "",
        body: "{\"choices\": \"nope\"}",
        delay: None,
    });
    let backend = HttpChatBackend::new(url, "m");
    assert!(matches!(
        backend.generate(&request()).unwrap_err(),
        BackendError::Protocol(_)
    ));
}

#[test]
fn slow_servers_time_out() {
    let (url, _rx) = serve_once(Canned {
        status_line: "200 OK",
        headers: "",
        body: r#"{"choices":[{"message":{"content":"late"}}]}"#,
        delay: Some(Duration::from_millis(400)),
    });
    let backend = HttpChatBackend::new(url, "m").with_timeout(Duration::from_millis(80));
    assert!(matches!(
        backend.generate(&request()).unwrap_err(),
        BackendError::Timeout
    ));
}
