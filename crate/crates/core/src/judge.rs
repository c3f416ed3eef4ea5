//! Chat-completions client for model and judge endpoints.
//!
//! Every request goes through [`ChatClient::complete`], which consults an
//! append-only response cache keyed by `sha256(model, template id, prompt)`,
//! retries transport failures with exponential backoff, and never has more
//! than `max_in_flight` requests outstanding. [`Judge`] layers the SGQA and
//! RCap judge protocols on top, with an offline token-F1 fallback.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::SimilarityMatrix;
use crate::template;

pub const SGQA_SCORE_MAX: f64 = 5.0;
pub const RCAP_SCORE_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_s: f64,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model_name: "Llama-3.3-70B-Instruct".into(),
            api_key_env: "VIDBENCH_API_KEY".into(),
            timeout_s: 120.0,
            max_in_flight: 8,
            max_retries: 3,
            temperature: 0.0,
            max_tokens: 256,
            backoff_ms: 500,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight < 1 {
            return Err(Error::Config("endpoint.max_in_flight must be at least 1".into()));
        }
        if self.temperature != 0.0 {
            return Err(Error::Config("endpoint.temperature must be 0 (greedy decoding)".into()));
        }
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(Error::Config("endpoint.timeout_s must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MediaUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    VideoUrl { video_url: MediaUrl },
}

/// Plain text, or typed parts when a video reference rides along.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum MessageContent {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: MessageContent,
}

/// Body of a chat-completions request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Concatenated text of all messages.
    pub fn prompt_text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            match &m.content {
                MessageContent::Text(t) => out.push_str(t),
                MessageContent::Parts(parts) => {
                    for p in parts {
                        if let ContentPart::Text { text } = p {
                            out.push_str(text);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn video_url(&self) -> Option<&str> {
        self.messages.iter().find_map(|m| match &m.content {
            MessageContent::Parts(parts) => parts.iter().find_map(|p| match p {
                ContentPart::VideoUrl { video_url } => Some(video_url.url.as_str()),
                ContentPart::Text { .. } => None,
            }),
            MessageContent::Text(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError(pub String);

/// Sends one request and returns the assistant text.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, TransportError>;
}

impl<F> ChatTransport for F
where
    F: Fn(&ChatRequest) -> std::result::Result<String, TransportError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, TransportError> {
        self(request)
    }
}

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &EndpointConfig) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .http_status_as_error(false)
            .build();
        Self {
            agent: ureq::Agent::new_with_config(config),
            url: format!("{}/chat/completions", cfg.base_url.trim_end_matches('/')),
            api_key: std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty()),
        }
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, TransportError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError(format!("HTTP {status}: {text}")));
        }
        let body: CompletionBody =
            serde_json::from_str(&text).map_err(|e| TransportError(format!("malformed completion body: {e}")))?;
        body.choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| TransportError("completion has no choices".into()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    raw_response: String,
}

/// Append-only JSONL response cache. Unreadable lines (e.g. a torn final
/// write) are skipped on load.
pub struct ResponseCache {
    map: Mutex<HashMap<String, String>>,
    file: Mutex<Option<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            map: Mutex::new(HashMap::new()),
            file: Mutex::new(None),
            path: None,
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut map = HashMap::new();
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if let Ok(l) = serde_json::from_str::<CacheLine>(&line) {
                    map.entry(l.key).or_insert(l.raw_response);
                }
            }
        }
        let torn_tail = std::fs::read(&path)
            .map(|b| b.last().is_some_and(|&c| c != b'\n'))
            .unwrap_or(false);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if torn_tail {
            file.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            map: Mutex::new(map),
            file: Mutex::new(Some(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.map.lock().unwrap().get(key).cloned()
    }

    pub fn insert(&self, key: &str, raw: &str) -> Result<()> {
        let mut map = self.map.lock().unwrap();
        if map.contains_key(key) {
            return Ok(());
        }
        if let Some(f) = self.file.lock().unwrap().as_mut() {
            let mut line = serde_json::to_string(&CacheLine {
                key: key.to_string(),
                raw_response: raw.to_string(),
            })
            .map_err(|e| Error::json("cache entry", e))?;
            line.push('\n');
            let path = self.path.clone().unwrap_or_default();
            f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
            f.flush().map_err(|e| Error::io(&path, e))?;
        }
        map.insert(key.to_string(), raw.to_string());
        Ok(())
    }
}

/// `video` is the media reference sent with the prompt, empty for text-only
/// requests.
pub fn cache_key(model_name: &str, template_id: &str, video: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    for part in [model_name, template_id, video, prompt] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Counters exposed for instrumentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClientStats {
    /// Transport sends, including retries.
    pub requests: u64,
    pub cache_hits: u64,
    pub failures: u64,
    pub max_in_flight_observed: usize,
}

struct Gate {
    limit: usize,
    count: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn acquire(&self) -> usize {
        let mut c = self.count.lock().unwrap();
        while *c >= self.limit {
            c = self.cv.wait(c).unwrap();
        }
        *c += 1;
        *c
    }

    fn release(&self) {
        *self.count.lock().unwrap() -= 1;
        self.cv.notify_one();
    }
}

pub struct ChatClient {
    cfg: EndpointConfig,
    transport: Box<dyn ChatTransport>,
    cache: ResponseCache,
    gate: Gate,
    requests: AtomicU64,
    cache_hits: AtomicU64,
    failures: AtomicU64,
    max_seen: AtomicUsize,
}

impl ChatClient {
    pub fn new(cfg: EndpointConfig, transport: Box<dyn ChatTransport>, cache: ResponseCache) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            gate: Gate {
                limit: cfg.max_in_flight,
                count: Mutex::new(0),
                cv: Condvar::new(),
            },
            cfg,
            transport,
            cache,
            requests: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            failures: AtomicU64::new(0),
            max_seen: AtomicUsize::new(0),
        })
    }

    pub fn http(cfg: EndpointConfig, cache: ResponseCache) -> Result<Self> {
        let transport = Box::new(HttpTransport::new(&cfg));
        Self::new(cfg, transport, cache)
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            requests: self.requests.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            failures: self.failures.load(Ordering::SeqCst),
            max_in_flight_observed: self.max_seen.load(Ordering::SeqCst),
        }
    }

    fn request_for(&self, video: Option<&str>, prompt: &str) -> ChatRequest {
        let content = match video {
            Some(url) => MessageContent::Parts(vec![
                ContentPart::VideoUrl {
                    video_url: MediaUrl { url: url.to_string() },
                },
                ContentPart::Text {
                    text: prompt.to_string(),
                },
            ]),
            None => MessageContent::Text(prompt.to_string()),
        };
        ChatRequest {
            model: self.cfg.model_name.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content,
            }],
            temperature: self.cfg.temperature,
            max_tokens: self.cfg.max_tokens,
        }
    }

    /// Returns the cached response or sends the prompt, retrying transport
    /// failures up to `max_retries` times.
    pub fn complete(&self, template_id: &str, prompt: &str) -> Result<String> {
        self.complete_with_video(template_id, None, prompt)
    }

    /// Like [`ChatClient::complete`], with the video reference sent as a
    /// `video_url` content part ahead of the prompt.
    pub fn complete_with_video(&self, template_id: &str, video: Option<&str>, prompt: &str) -> Result<String> {
        let key = cache_key(&self.cfg.model_name, template_id, video.unwrap_or(""), prompt);
        if let Some(raw) = self.cache.get(&key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(raw);
        }
        let request = self.request_for(video, prompt);
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(backoff));
            }
            let now = self.gate.acquire();
            self.max_seen.fetch_max(now, Ordering::SeqCst);
            self.requests.fetch_add(1, Ordering::SeqCst);
            let result = self.transport.send(&request);
            self.gate.release();
            match result {
                Ok(raw) => {
                    self.cache.insert(&key, &raw)?;
                    return Ok(raw);
                }
                Err(TransportError(msg)) => {
                    self.failures.fetch_add(1, Ordering::SeqCst);
                    last = msg;
                }
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }

    /// Applies `f` to every job on at most `max_in_flight` worker threads.
    /// Results come back in job order.
    pub fn map_bounded<J, T, F>(&self, jobs: &[J], f: F) -> Vec<T>
    where
        J: Sync,
        T: Send,
        F: Fn(&J) -> T + Sync,
    {
        map_bounded(self.cfg.max_in_flight, jobs, f)
    }
}

/// Ordered parallel map over at most `workers` threads.
pub fn map_bounded<J, T, F>(workers: usize, jobs: &[J], f: F) -> Vec<T>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> T + Sync,
{
    let workers = workers.max(1).min(jobs.len());
    if workers <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let out = f(&jobs[i]);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every job produces a result"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub pred: Verdict,
    pub score: f64,
    pub raw: String,
    #[serde(default)]
    pub parse_failure: bool,
}

impl JudgeVerdict {
    fn failed(raw: String) -> Self {
        Self {
            pred: Verdict::No,
            score: 0.0,
            raw,
            parse_failure: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionJudgement {
    pub score: f64,
    pub raw: String,
    #[serde(default)]
    pub parse_failure: bool,
}

fn number_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap())
}

fn verdict_fields(obj: &serde_json::Map<String, serde_json::Value>) -> Option<(Verdict, f64)> {
    let pred = match obj.get("pred")? {
        serde_json::Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Verdict::Yes,
            "no" => Verdict::No,
            _ => return None,
        },
        _ => return None,
    };
    let score = match obj.get("score")? {
        serde_json::Value::Number(n) => n.as_f64()?,
        serde_json::Value::String(s) => s.trim().parse().ok()?,
        _ => return None,
    };
    score.is_finite().then_some((pred, score))
}

/// Finds the first `{...}` object that carries `pred` and `score` keys.
/// Python-style single quotes are accepted. The score is clamped to `[0, 5]`.
pub fn parse_qa_verdict(raw: &str) -> Option<(Verdict, f64)> {
    static FIELDS: std::sync::OnceLock<(Regex, Regex)> = std::sync::OnceLock::new();
    let (pred_re, score_re) = FIELDS.get_or_init(|| {
        (
            Regex::new(r#"(?i)["']pred["']\s*:\s*["']\s*(yes|no)\s*["']"#).unwrap(),
            Regex::new(r#"(?i)["']score["']\s*:\s*["']?\s*(-?\d+(?:\.\d+)?)"#).unwrap(),
        )
    });
    let mut from = 0;
    while let Some(open) = raw[from..].find('{').map(|i| i + from) {
        let Some(close) = raw[open..].find('}').map(|i| i + open) else {
            break;
        };
        let candidate = &raw[open..=close];
        let parsed = serde_json::from_str::<serde_json::Value>(candidate)
            .ok()
            .or_else(|| serde_json::from_str(&candidate.replace('\'', "\"")).ok());
        let fields = match parsed {
            Some(serde_json::Value::Object(obj)) => verdict_fields(&obj),
            _ => None,
        }
        .or_else(|| {
            let p = pred_re.captures(candidate)?;
            let s = score_re.captures(candidate)?;
            let pred = if p[1].eq_ignore_ascii_case("yes") {
                Verdict::Yes
            } else {
                Verdict::No
            };
            Some((pred, s[1].parse().ok()?))
        });
        if let Some((pred, score)) = fields {
            return Some((pred, score.clamp(0.0, SGQA_SCORE_MAX)));
        }
        from = open + 1;
    }
    None
}

/// First number in the response, clamped to `[0, 10]`.
pub fn parse_caption_score(raw: &str) -> Option<f64> {
    let m = number_re().find(raw)?;
    let v: f64 = m.as_str().parse().ok()?;
    v.is_finite().then(|| v.clamp(0.0, RCAP_SCORE_MAX))
}

fn normalized_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Token-level F1 after lowercasing and stripping punctuation.
pub fn fallback_lexical_similarity(a: &str, b: &str) -> f64 {
    let ta = normalized_tokens(a);
    let tb = normalized_tokens(b);
    match (ta.is_empty(), tb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &ta {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &tb {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / tb.len() as f64;
    let recall = common as f64 / ta.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Threshold on lexical F1 for a `yes` verdict in offline mode.
pub const FALLBACK_QA_YES_THRESHOLD: f64 = 0.5;

fn judge_values(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
    pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
}

pub fn judge_qa_prompt(question: &str, target: &str, candidate: &str) -> Result<String> {
    template::JUDGE_SGQA.fill(&judge_values(&[
        ("question", question),
        ("target", target),
        ("candidate", candidate),
    ]))
}

pub fn judge_caption_prompt(gt_caption: &str, pred_caption: &str) -> Result<String> {
    template::JUDGE_RCAP.fill(&judge_values(&[("gt", gt_caption), ("pred", pred_caption)]))
}

/// Judge backend: a live endpoint or the offline lexical stand-in.
#[derive(Clone)]
pub enum Judge {
    Lexical,
    Endpoint(Arc<ChatClient>),
}

impl Judge {
    pub fn name(&self) -> String {
        match self {
            Judge::Lexical => "lexical-f1".into(),
            Judge::Endpoint(c) => c.config().model_name.clone(),
        }
    }

    pub fn template_ids(&self) -> Vec<&'static str> {
        match self {
            Judge::Lexical => Vec::new(),
            Judge::Endpoint(_) => vec![template::JUDGE_SGQA.id, template::JUDGE_RCAP.id],
        }
    }

    fn workers(&self) -> usize {
        match self {
            Judge::Lexical => 1,
            Judge::Endpoint(c) => c.config().max_in_flight,
        }
    }

    pub fn judge_qa(&self, question: &str, target: &str, candidate: &str) -> Result<JudgeVerdict> {
        match self {
            Judge::Lexical => {
                let sim = fallback_lexical_similarity(target, candidate);
                Ok(JudgeVerdict {
                    pred: if sim >= FALLBACK_QA_YES_THRESHOLD {
                        Verdict::Yes
                    } else {
                        Verdict::No
                    },
                    score: SGQA_SCORE_MAX * sim,
                    raw: format!("lexical-f1={sim}"),
                    parse_failure: false,
                })
            }
            Judge::Endpoint(client) => {
                let prompt = judge_qa_prompt(question, target, candidate)?;
                let raw = client.complete(template::JUDGE_SGQA.id, &prompt)?;
                Ok(match parse_qa_verdict(&raw) {
                    Some((pred, score)) => JudgeVerdict {
                        pred,
                        score,
                        raw,
                        parse_failure: false,
                    },
                    None => JudgeVerdict::failed(raw),
                })
            }
        }
    }

    pub fn judge_caption_pair(&self, gt_caption: &str, pred_caption: &str) -> Result<CaptionJudgement> {
        match self {
            Judge::Lexical => {
                let sim = fallback_lexical_similarity(gt_caption, pred_caption);
                Ok(CaptionJudgement {
                    score: RCAP_SCORE_MAX * sim,
                    raw: format!("lexical-f1={sim}"),
                    parse_failure: false,
                })
            }
            Judge::Endpoint(client) => {
                let prompt = judge_caption_prompt(gt_caption, pred_caption)?;
                let raw = client.complete(template::JUDGE_RCAP.id, &prompt)?;
                Ok(match parse_caption_score(&raw) {
                    Some(score) => CaptionJudgement {
                        score,
                        raw,
                        parse_failure: false,
                    },
                    None => CaptionJudgement {
                        score: 0.0,
                        raw,
                        parse_failure: true,
                    },
                })
            }
        }
    }

    /// `s[i][j] = judge(gt_j, pred_i) / 10`, each distinct pair judged once.
    pub fn pairwise_similarity(&self, preds: &[String], gts: &[String]) -> Result<SimilarityMatrix> {
        let mut unique: Vec<(&str, &str)> = Vec::new();
        let mut index: HashMap<(&str, &str), usize> = HashMap::new();
        for p in preds {
            for g in gts {
                index.entry((g.as_str(), p.as_str())).or_insert_with(|| {
                    unique.push((g.as_str(), p.as_str()));
                    unique.len() - 1
                });
            }
        }
        let results = map_bounded(self.workers(), &unique, |(g, p)| self.judge_caption_pair(g, p));
        let scores: Vec<f64> = results
            .into_iter()
            .map(|r| r.map(|j| j.score / RCAP_SCORE_MAX))
            .collect::<Result<_>>()?;
        let values = preds
            .iter()
            .map(|p| {
                gts.iter()
                    .map(|g| scores[index[&(g.as_str(), p.as_str())]].clamp(0.0, 1.0))
                    .collect()
            })
            .collect();
        SimilarityMatrix::new(values, gts.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qa_verdict_examples() {
        assert_eq!(
            parse_qa_verdict(r#"{"pred": "yes", "score": 4.8}"#),
            Some((Verdict::Yes, 4.8))
        );
        assert_eq!(
            parse_qa_verdict(r#"{"pred": "no", "score": 0}"#),
            Some((Verdict::No, 0.0))
        );
        assert_eq!(
            parse_qa_verdict(r#"Sure! {"pred":"yes","score":7}"#),
            Some((Verdict::Yes, 5.0))
        );
        assert_eq!(parse_qa_verdict("{'pred': 'no', 'score': 2}"), Some((Verdict::No, 2.0)));
        assert_eq!(
            parse_qa_verdict(r#"{"note": 1} then {"pred": "YES", "score": "3"}"#),
            Some((Verdict::Yes, 3.0))
        );
        assert_eq!(parse_qa_verdict("{'pred': \"it's yes\", 'score': 2}"), None);
        assert_eq!(parse_qa_verdict("yes, 5"), None);
        assert_eq!(parse_qa_verdict("{"), None);
    }

    #[test]
    fn caption_score_examples() {
        assert_eq!(parse_caption_score("7"), Some(7.0));
        assert_eq!(parse_caption_score("[8]"), Some(8.0));
        assert_eq!(parse_caption_score("score: 11"), Some(10.0));
        assert_eq!(parse_caption_score("no idea"), None);
    }

    #[test]
    fn lexical_examples() {
        assert_eq!(fallback_lexical_similarity("A red car.", "a red car"), 1.0);
        assert_eq!(fallback_lexical_similarity("dog", "cat"), 0.0);
        assert!((fallback_lexical_similarity("a red car", "red car") - 0.8).abs() < 1e-12);
        assert_eq!(fallback_lexical_similarity("", "  ..."), 1.0);
        assert_eq!(fallback_lexical_similarity("", "x"), 0.0);
    }

    #[test]
    fn cache_key_separates_fields() {
        assert_ne!(cache_key("ab", "c", "", "d"), cache_key("a", "bc", "", "d"));
        assert_ne!(cache_key("m", "t", "v1", "p"), cache_key("m", "t", "v2", "p"));
        assert_eq!(cache_key("m", "t", "", "p").len(), 64);
    }

    fn echo_client(max_in_flight: usize) -> ChatClient {
        let cfg = EndpointConfig {
            max_in_flight,
            backoff_ms: 0,
            ..Default::default()
        };
        let t = |r: &ChatRequest| -> std::result::Result<String, TransportError> { Ok(r.prompt_text()) };
        ChatClient::new(cfg, Box::new(t), ResponseCache::in_memory()).unwrap()
    }

    #[test]
    fn retries_then_fails_hard() {
        let cfg = EndpointConfig {
            max_retries: 2,
            backoff_ms: 0,
            ..Default::default()
        };
        let t = |_: &ChatRequest| -> std::result::Result<String, TransportError> { Err(TransportError("down".into())) };
        let c = ChatClient::new(cfg, Box::new(t), ResponseCache::in_memory()).unwrap();
        let err = c.complete("t", "p").unwrap_err();
        assert!(matches!(err, Error::Transport { attempts: 3, .. }));
        assert_eq!(c.stats().requests, 3);
    }

    #[test]
    fn retry_recovers() {
        let calls = AtomicUsize::new(0);
        let cfg = EndpointConfig {
            backoff_ms: 0,
            ..Default::default()
        };
        let t = move |_: &ChatRequest| -> std::result::Result<String, TransportError> {
            if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                Err(TransportError("blip".into()))
            } else {
                Ok("8".into())
            }
        };
        let c = ChatClient::new(cfg, Box::new(t), ResponseCache::in_memory()).unwrap();
        let j = Judge::Endpoint(Arc::new(c));
        assert_eq!(j.judge_caption_pair("a", "b").unwrap().score, 8.0);
    }

    #[test]
    fn second_call_hits_cache() {
        let c = echo_client(2);
        c.complete("t", "hello").unwrap();
        c.complete("t", "hello").unwrap();
        let s = c.stats();
        assert_eq!((s.requests, s.cache_hits), (1, 1));
    }

    #[test]
    fn pairwise_dedupes_pairs() {
        let cfg = EndpointConfig {
            backoff_ms: 0,
            ..Default::default()
        };
        let t = |_: &ChatRequest| -> std::result::Result<String, TransportError> { Ok("5".into()) };
        let c = Arc::new(ChatClient::new(cfg, Box::new(t), ResponseCache::in_memory()).unwrap());
        let j = Judge::Endpoint(c.clone());
        let preds = vec!["x".to_string(), "x".to_string()];
        let gts = vec!["y".to_string(), "y".to_string(), "y".to_string()];
        let m = j.pairwise_similarity(&preds, &gts).unwrap();
        assert_eq!((m.rows, m.cols), (2, 3));
        assert!(m.values.iter().flatten().all(|&v| v == 0.5));
        assert_eq!(c.stats().requests, 1);
    }

    #[test]
    fn lexical_pairwise_identity() {
        let m = Judge::Lexical
            .pairwise_similarity(&["a cat".into()], &["a cat".into()])
            .unwrap();
        assert_eq!(m.values, vec![vec![1.0]]);
    }

    #[test]
    fn unparseable_verdict_is_flagged() {
        let cfg = EndpointConfig {
            backoff_ms: 0,
            ..Default::default()
        };
        let t = |_: &ChatRequest| -> std::result::Result<String, TransportError> { Ok("I think so".into()) };
        let c = ChatClient::new(cfg, Box::new(t), ResponseCache::in_memory()).unwrap();
        let v = Judge::Endpoint(Arc::new(c)).judge_qa("q", "a", "b").unwrap();
        assert!(v.parse_failure);
        assert_eq!((v.pred, v.score), (Verdict::No, 0.0));
    }

    #[test]
    fn temperature_must_be_zero() {
        let cfg = EndpointConfig {
            temperature: 0.7,
            ..Default::default()
        };
        let t = |_: &ChatRequest| -> std::result::Result<String, TransportError> { Ok(String::new()) };
        assert!(ChatClient::new(cfg, Box::new(t), ResponseCache::in_memory()).is_err());
    }

    #[test]
    fn cache_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("judge_cache.jsonl");
        {
            let c = ResponseCache::open(&path).unwrap();
            c.insert("k1", "v1").unwrap();
            c.insert("k1", "other").unwrap();
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"key\": \"torn")
            .unwrap();
        let c = ResponseCache::open(&path).unwrap();
        assert_eq!(c.get("k1").as_deref(), Some("v1"));
        assert_eq!(c.len(), 1);
        c.insert("k2", "v2").unwrap();
        drop(c);
        let c = ResponseCache::open(&path).unwrap();
        assert_eq!(c.get("k2").as_deref(), Some("v2"));
    }

    proptest::proptest! {
        #[test]
        fn lexical_symmetric_bounded(a in "[a-c ,.]{0,12}", b in "[a-c ,.]{0,12}") {
            let x = fallback_lexical_similarity(&a, &b);
            proptest::prop_assert_eq!(x, fallback_lexical_similarity(&b, &a));
            proptest::prop_assert!((0.0..=1.0).contains(&x));
            let mut ta = normalized_tokens(&a);
            let mut tb = normalized_tokens(&b);
            ta.sort();
            tb.sort();
            proptest::prop_assert_eq!(x == 1.0, ta == tb);
        }
    }
}
