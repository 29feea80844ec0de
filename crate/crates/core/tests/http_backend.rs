use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use spatial_eval::dataset::{Choice, ImageRef, Sample};
use spatial_eval::prompting::{build_direct, AblationMode};
use spatial_eval::vlm_client::{ClientError, EndpointConfig, HttpBackend, RequestMeta, VlmClient};

struct Seen {
    path: String,
    headers: Vec<(String, String)>,
    body: serde_json::Value,
}

/// Serves the canned `(status, extra headers, body)` replies in order, one
/// connection each, and records what was received.
fn serve(replies: Vec<(u16, &'static str, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, extra, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
            }
            let len: usize = headers.iter().find(|(k, _)| k == "content-length").map(|(_, v)| v.parse().unwrap()).unwrap_or(0);
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                path: request_line.split_whitespace().nth(1).unwrap().to_string(),
                headers,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n{extra}\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 3}
    })
    .to_string()
}

fn sample() -> Sample {
    Sample {
        id: "h1".into(),
        images: vec![ImageRef::new("data:image/png;base64,AAAA")],
        question: "Which object is closer to the camera?".into(),
        choices: Some(vec![Choice::new("A", "the lamp"), Choice::new("B", "the chair")]),
        truth: "A".into(),
        category: spatial_eval::dataset::Category::Depth,
        source: "t".into(),
        meta: Default::default(),
    }
}

fn client(url: String, key_env: &str) -> VlmClient {
    let cfg = EndpointConfig {
        base_url: url,
        model: "m".into(),
        api_key_env: key_env.into(),
        backoff_base_ms: 1,
        backoff_max_ms: 5,
        max_retries: 2,
        ..Default::default()
    };
    VlmClient::new(cfg.clone(), Arc::new(HttpBackend::new(&cfg))).unwrap()
}

#[test]
fn posts_chat_completions_with_auth_and_sample_id() {
    std::env::set_var("SPATIAL_EVAL_TEST_KEY_A", "sekret");
    let (url, seen, handle) = serve(vec![(200, "", ok_body("<answer>A</answer>"))]);
    let c = client(url, "SPATIAL_EVAL_TEST_KEY_A");
    let r = c.complete(&build_direct(&sample(), AblationMode::WithImage), &RequestMeta::for_sample("h1")).unwrap();
    handle.join().unwrap();
    assert_eq!(r.text, "<answer>A</answer>");
    assert_eq!(r.token_usage, Some((11, 3)));
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    let header = |k: &str| seen[0].headers.iter().find(|(h, _)| h == k).map(|(_, v)| v.clone());
    assert_eq!(header("authorization").as_deref(), Some("Bearer sekret"));
    assert_eq!(header("x-sample-id").as_deref(), Some("h1"));
    let body = &seen[0].body;
    assert_eq!(body["model"], "m");
    assert_eq!(body["n"], 1);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"][0]["image_url"]["url"], "data:image/png;base64,AAAA");
}

#[test]
fn retries_server_errors_and_honours_retry_after() {
    let (url, seen, handle) = serve(vec![
        (500, "", "{}".into()),
        (429, "Retry-After: 0\r\n", "{}".into()),
        (200, "", ok_body("fine")),
    ]);
    let c = client(url, "SPATIAL_EVAL_TEST_KEY_UNSET");
    let r = c.complete(&build_direct(&sample(), AblationMode::WithImage), &RequestMeta::default()).unwrap();
    handle.join().unwrap();
    assert_eq!((r.text.as_str(), r.attempt), ("fine", 3));
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert!(seen.lock().unwrap()[0].headers.iter().all(|(h, _)| h != "authorization"));
}

#[test]
fn bad_request_fails_fast_and_junk_is_malformed() {
    let (url, _, handle) = serve(vec![(400, "", "{\"error\": \"bad\"}".into()), (200, "", "not json".into())]);
    let c = client(url, "SPATIAL_EVAL_TEST_KEY_UNSET");
    let t = build_direct(&sample(), AblationMode::WithImage);
    assert!(matches!(c.complete(&t, &RequestMeta::default()), Err(ClientError::NonRetryableStatus { code: 400, .. })));
    assert!(matches!(c.complete(&t, &RequestMeta::default()), Err(ClientError::MalformedResponse(_))));
    handle.join().unwrap();
}

#[test]
fn connection_refused_is_transport_after_retries() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let c = client(format!("http://127.0.0.1:{port}/v1"), "SPATIAL_EVAL_TEST_KEY_UNSET");
    match c.complete(&build_direct(&sample(), AblationMode::WithImage), &RequestMeta::default()) {
        Err(ClientError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
}
