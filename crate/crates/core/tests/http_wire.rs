//! HttpTransport against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;
use vidbench::judge::{ChatClient, EndpointConfig, Judge, ResponseCache, Verdict};
use vidbench::Error;

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

type Handler = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

fn read_request(stream: &mut TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut len = 0usize;
    let mut auth = None;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        match k.to_ascii_lowercase().as_str() {
            "content-length" => len = v.trim().parse().ok()?,
            "authorization" => auth = Some(v.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).ok()?;
    Some(Seen {
        path,
        auth,
        body: serde_json::from_slice(&body).ok()?,
    })
}

fn serve(handler: Arc<Handler>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let Some(req) = read_request(&mut stream) else { continue };
            let n = {
                let mut l = log.lock().unwrap();
                l.push(req.clone());
                l.len() - 1
            };
            let (status, body) = handler(n, &req.body);
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn config(base_url: String, key_env: &str) -> EndpointConfig {
    EndpointConfig {
        base_url,
        model_name: "judge-model".into(),
        api_key_env: key_env.into(),
        timeout_s: 10.0,
        max_in_flight: 2,
        max_retries: 2,
        backoff_ms: 1,
        ..Default::default()
    }
}

#[test]
fn request_body_and_headers() {
    let (url, seen) = serve(Arc::new(|_, _| (200, completion("{\"pred\": \"yes\", \"score\": 4}"))));
    std::env::set_var("VIDBENCH_WIRE_TEST_KEY", "sekrit");
    let client = ChatClient::http(config(url, "VIDBENCH_WIRE_TEST_KEY"), ResponseCache::in_memory()).unwrap();
    let judge = Judge::Endpoint(Arc::new(client));
    let v = judge.judge_qa("Where?", "On the table", "table").unwrap();
    assert_eq!((v.pred, v.score, v.parse_failure), (Verdict::Yes, 4.0, false));

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    let r = &seen[0];
    assert_eq!(r.path, "/v1/chat/completions");
    assert_eq!(r.auth.as_deref(), Some("Bearer sekrit"));
    assert_eq!(r.body["model"], "judge-model");
    assert_eq!(r.body["temperature"], 0.0);
    assert_eq!(r.body["max_tokens"], 256);
    assert_eq!(r.body["messages"][0]["role"], "user");
    let prompt = r.body["messages"][0]["content"].as_str().unwrap();
    assert!(
        prompt.contains("Question: Where?")
            && prompt.contains("Correct Answer: On the table")
            && prompt.contains("Predicted Answer: table"),
        "{prompt}"
    );
}

#[test]
fn video_reference_sent_as_content_part() {
    let (url, seen) = serve(Arc::new(|_, _| (200, completion("(A)"))));
    let client = ChatClient::http(config(url, "VIDBENCH_WIRE_UNSET"), ResponseCache::in_memory()).unwrap();
    let raw = client
        .complete_with_video("fgqa.v1", Some("videos/v1.mp4"), "Question: q")
        .unwrap();
    assert_eq!(raw, "(A)");
    let seen = seen.lock().unwrap();
    let parts = &seen[0].body["messages"][0]["content"];
    assert_eq!(parts[0]["type"], "video_url");
    assert_eq!(parts[0]["video_url"]["url"], "videos/v1.mp4");
    assert_eq!(parts[1], serde_json::json!({"type": "text", "text": "Question: q"}));
    assert!(seen[0].auth.is_none());
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = serve(Arc::new(|n, _| {
        if n < 2 {
            (503, "{\"error\":\"busy\"}".to_string())
        } else {
            (200, completion("7"))
        }
    }));
    let client = ChatClient::http(config(url, "VIDBENCH_WIRE_UNSET"), ResponseCache::in_memory()).unwrap();
    let judge = Judge::Endpoint(Arc::new(client));
    assert_eq!(judge.judge_caption_pair("a dog", "a cat").unwrap().score, 7.0);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn exhausted_retries_surface_transport_error() {
    let (url, seen) = serve(Arc::new(|_, _| (500, "nope".to_string())));
    let client = ChatClient::http(config(url, "VIDBENCH_WIRE_UNSET"), ResponseCache::in_memory()).unwrap();
    let err = client.complete("t", "p").unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 3, .. }), "{err}");
    assert!(err.to_string().contains("500"));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn malformed_body_is_a_transport_error() {
    let (url, _) = serve(Arc::new(|_, _| (200, "{\"choices\": 3}".to_string())));
    let mut cfg = config(url, "VIDBENCH_WIRE_UNSET");
    cfg.max_retries = 0;
    let client = ChatClient::http(cfg, ResponseCache::in_memory()).unwrap();
    assert!(matches!(
        client.complete("t", "p"),
        Err(Error::Transport { attempts: 1, .. })
    ));
}
