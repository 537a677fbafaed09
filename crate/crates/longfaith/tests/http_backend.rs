//! Wire-level tests for the HTTP completion backend against a scripted
//! single-thread TCP server.

mod common;

use common::synth_sample;
use longfaith::client::{ClientConfig, ClientError, LlmClient};
use longfaith::prompt::{render_synthesis_prompt, PromptVariant, RenderedPrompt, TemplateSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread::JoinHandle;

fn read_request(stream: &mut TcpStream) -> String {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut head = String::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 {
            break;
        }
        let done = line == "\r\n";
        head.push_str(&line);
        if done {
            break;
        }
    }
    let content_length = head
        .lines()
        .find_map(|l| {
            let (key, value) = l.split_once(':')?;
            key.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse::<usize>().ok())
                .flatten()
        })
        .unwrap_or(0);
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body).unwrap();
    format!("{head}{}", String::from_utf8_lossy(&body))
}

/// Serves the scripted `(status, body)` responses one connection each and
/// returns the captured raw requests.
fn spawn_server(responses: Vec<(u16, String)>) -> (String, JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            seen.push(read_request(&mut stream));
            let reason = match status {
                200 => "OK",
                401 => "Unauthorized",
                429 => "Too Many Requests",
                _ => "Internal Server Error",
            };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
        seen
    });
    (addr, handle)
}

fn ok_body(text: &str) -> String {
    format!(
        r#"{{"choices":[{{"message":{{"role":"assistant","content":"{text}"}},"finish_reason":"stop"}}]}}"#
    )
}

fn test_prompt() -> RenderedPrompt {
    let sample = synth_sample("h1", 2);
    render_synthesis_prompt(&TemplateSet::bundled(), PromptVariant::CocGtDoc, &sample).unwrap()
}

fn config_for(addr: &str, key_env: &str) -> ClientConfig {
    ClientConfig {
        base_url: format!("{addr}/v1"),
        api_key_source: key_env.into(),
        backoff_base_ms: 1,
        ..Default::default()
    }
}

#[test]
fn posts_chat_completion_with_bearer_token() {
    let key_env = "LONGFAITH_TEST_KEY_BEARER";
    std::env::set_var(key_env, "sekrit-token");
    let (addr, server) = spawn_server(vec![(200, ok_body("hello from the wire"))]);
    let client = LlmClient::http(config_for(&addr, key_env)).unwrap();
    let result = client.complete(&test_prompt()).unwrap();
    assert_eq!(result.text, "hello from the wire");
    assert_eq!(result.finish_reason, "stop");
    assert_eq!(result.attempt_count, 1);

    let requests = server.join().unwrap();
    let request = &requests[0];
    assert!(
        request.starts_with("POST /v1/chat/completions HTTP/1.1"),
        "{request}"
    );
    assert!(
        request.contains("authorization: Bearer sekrit-token")
            || request.contains("Authorization: Bearer sekrit-token")
    );
    let body_start = request.find("\r\n\r\n").unwrap() + 4;
    let payload: serde_json::Value = serde_json::from_str(&request[body_start..]).unwrap();
    assert_eq!(payload["model"], "gpt-4o-mini");
    assert_eq!(payload["messages"][0]["role"], "user");
    assert!(payload["messages"][0]["content"]
        .as_str()
        .unwrap()
        .contains("[3] Entry 3 for h1"));
    assert!(payload["temperature"].is_number());
    assert!(payload["max_tokens"].is_number());
}

#[test]
fn rate_limits_retry_until_success() {
    let (addr, server) = spawn_server(vec![
        (429, r#"{"error":"slow down"}"#.into()),
        (429, r#"{"error":"slow down"}"#.into()),
        (200, ok_body("third time lucky")),
    ]);
    let client = LlmClient::http(config_for(&addr, "LONGFAITH_TEST_KEY_UNSET")).unwrap();
    let result = client.complete(&test_prompt()).unwrap();
    assert_eq!(result.text, "third time lucky");
    assert_eq!(result.attempt_count, 3);
    assert_eq!(server.join().unwrap().len(), 3);
}

#[test]
fn auth_failure_is_fatal_without_retry() {
    let (addr, server) = spawn_server(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let client = LlmClient::http(config_for(&addr, "LONGFAITH_TEST_KEY_UNSET")).unwrap();
    let err = client.complete(&test_prompt());
    match err {
        Err(ClientError::Fatal(message)) => {
            assert!(message.contains("401"), "{message}");
            assert!(message.contains("bad key"), "{message}");
        }
        other => panic!("expected fatal error, got {other:?}"),
    }
    // exactly one request reached the server
    assert_eq!(server.join().unwrap().len(), 1);
}

#[test]
fn server_errors_exhaust_the_retry_budget() {
    let mut config = config_for("placeholder", "LONGFAITH_TEST_KEY_UNSET");
    config.retry_limit = 2;
    let (addr, server) = spawn_server(vec![
        (500, "oops".into()),
        (500, "oops".into()),
        (500, "oops".into()),
    ]);
    config.base_url = format!("{addr}/v1");
    let client = LlmClient::http(config).unwrap();
    let err = client.complete(&test_prompt());
    match err {
        Err(ClientError::RetriesExhausted { attempts, last }) => {
            assert_eq!(attempts, 3);
            assert!(last.contains("500"), "{last}");
        }
        other => panic!("expected exhaustion, got {other:?}"),
    }
    assert_eq!(server.join().unwrap().len(), 3);
}

#[test]
fn connection_refused_is_retriable_then_exhausts() {
    // bind and drop to find a dead port
    let dead = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap()
    };
    let mut config = config_for(&format!("http://{dead}"), "LONGFAITH_TEST_KEY_UNSET");
    config.retry_limit = 1;
    let client = LlmClient::http(config).unwrap();
    let err = client.complete(&test_prompt());
    assert!(matches!(
        err,
        Err(ClientError::RetriesExhausted { attempts: 2, .. })
    ));
}
