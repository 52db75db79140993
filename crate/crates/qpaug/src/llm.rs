//! LLM access: a backend trait, a scripted mock, an OpenAI-compatible
//! HTTP client, and a caching wrapper.
//!
//! Decoding is always greedy (temperature 0), so a completion is a pure
//! function of (model, prompt, max_tokens, stop). [`LlmClient`] exploits
//! that: responses are cached on disk keyed by a content hash of those
//! fields, and a warm cache replays a run without touching the backend.
//! Cache entries are written atomically (temp file, then rename), which
//! makes an interrupted run resumable by rerunning it.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// One completion request. Temperature is not a field: decoding is
/// always greedy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    /// Generation halts before the earliest occurrence of any of these.
    pub stop: Vec<String>,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("mock script has no rule matching prompt starting `{prompt_prefix}`")]
    MockMiss { prompt_prefix: String },
    #[error("completion request failed: {0}")]
    Http(String),
    #[error("completion endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    BadResponse(String),
    #[error("mock script `{path}`: {message}")]
    BadScript { path: String, message: String },
    #[error("cache entry `{path}` is corrupt: {message}")]
    CacheCorrupt { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Something that can run one greedy completion. Implementations must be
/// safe to call from multiple threads.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, req: &LlmRequest) -> Result<String, LlmError>;

    /// Short backend label recorded in run output ("mock", "http").
    fn name(&self) -> &'static str;
}

/// One mock rule: `pattern` is a glob (only `*` is special) matched
/// against the whole prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    pub pattern: String,
    pub response: String,
}

/// Scripted backend for offline runs. Rules are tried in order and the
/// first match wins. A prompt no rule matches is an error rather than an
/// empty answer, so a test with a gap in its script fails loudly.
pub struct MockLlm {
    rules: Vec<ScriptRule>,
    calls: AtomicU64,
}

impl MockLlm {
    pub fn from_rules(rules: Vec<ScriptRule>) -> Self {
        MockLlm { rules, calls: AtomicU64::new(0) }
    }

    /// Loads a JSON array of `{"pattern": ..., "response": ...}` rules.
    pub fn from_script_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::BadScript {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let rules: Vec<ScriptRule> =
            serde_json::from_str(&text).map_err(|e| LlmError::BadScript {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        Ok(MockLlm::from_rules(rules))
    }

    /// Number of completions served; cache hits never reach here.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmBackend for MockLlm {
    fn complete(&self, req: &LlmRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        for rule in &self.rules {
            if glob_match(&rule.pattern, &req.prompt) {
                return Ok(rule.response.clone());
            }
        }
        Err(LlmError::MockMiss {
            prompt_prefix: req.prompt.chars().take(120).collect(),
        })
    }

    fn name(&self) -> &'static str {
        "mock"
    }
}

/// Glob match where `*` spans any run of characters (including none)
/// and everything else is literal. Greedy with backtracking.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0usize, 0usize);
    let mut star: Option<usize> = None;
    let mut mark = 0usize;
    while ti < t.len() {
        if pi < p.len() && p[pi] == '*' {
            star = Some(pi);
            mark = ti;
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ti = mark;
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|c| *c == '*')
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

/// OpenAI-compatible chat-completions client. The prompt is sent as a
/// single user message with temperature 0. Transport failures, 429, and
/// 5xx are retried twice with exponential backoff.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: &str, api_key: Option<String>) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .expect("reqwest client");
        HttpBackend {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key,
            client,
        }
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, req: &LlmRequest) -> Result<String, LlmError> {
        let url = format!("{}/v1/chat/completions", self.endpoint);
        let mut body = serde_json::json!({
            "model": req.model,
            "messages": [{ "role": "user", "content": req.prompt }],
            "temperature": 0.0,
            "max_tokens": req.max_tokens,
        });
        if !req.stop.is_empty() {
            body["stop"] = serde_json::json!(req.stop);
        }
        let mut attempt = 0;
        let response = loop {
            attempt += 1;
            let mut http_req = self.client.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                http_req = http_req.bearer_auth(key);
            }
            match http_req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        break resp;
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable || attempt >= 3 {
                        return Err(LlmError::Status {
                            status: status.as_u16(),
                            body: resp.text().unwrap_or_default(),
                        });
                    }
                }
                Err(e) => {
                    if attempt >= 3 {
                        return Err(LlmError::Http(e.to_string()));
                    }
                }
            }
            std::thread::sleep(Duration::from_millis(200 * (1 << (attempt - 1))));
        };
        let parsed: ChatResponse =
            response.json().map_err(|e| LlmError::BadResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::BadResponse("no choices in response".into()))?;
        Ok(choice.message.content)
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

/// Counting semaphore bounding in-flight backend calls.
struct Gate {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Gate { permits: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.permits.lock().unwrap() += 1;
        self.gate.cv.notify_one();
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    response: String,
    created_at: u64,
}

/// Backend wrapper adding a disk cache, stop-sequence enforcement, and
/// a bound on concurrent backend calls. Results returned to callers
/// never contain a stop sequence.
pub struct LlmClient {
    backend: Arc<dyn LlmBackend>,
    cache_dir: Option<PathBuf>,
    gate: Gate,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
    tmp_counter: AtomicU64,
}

impl LlmClient {
    /// `max_parallel` bounds simultaneous backend calls; the cache
    /// directory is created if missing.
    pub fn new(
        backend: Arc<dyn LlmBackend>,
        cache_dir: Option<PathBuf>,
        max_parallel: usize,
    ) -> Result<Self, LlmError> {
        assert!(max_parallel > 0, "max_parallel must be >= 1");
        if let Some(dir) = &cache_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(LlmClient {
            backend,
            cache_dir,
            gate: Gate::new(max_parallel),
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    /// Completions that reached the backend (cache misses).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::SeqCst)
    }

    /// Content hash identifying a request: SHA-256 over length-prefixed
    /// fields (domain tag, model, prompt, max_tokens, stop list), so no
    /// two distinct requests can collide by field concatenation.
    pub fn cache_key(req: &LlmRequest) -> String {
        fn field(h: &mut Sha256, bytes: &[u8]) {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        let mut h = Sha256::new();
        field(&mut h, b"qpaug-llm-cache-v1");
        field(&mut h, req.model.as_bytes());
        field(&mut h, req.prompt.as_bytes());
        field(&mut h, &u64::from(req.max_tokens).to_le_bytes());
        field(&mut h, &(req.stop.len() as u64).to_le_bytes());
        for s in &req.stop {
            field(&mut h, s.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn complete(&self, req: &LlmRequest) -> Result<String, LlmError> {
        let key = Self::cache_key(req);
        if let Some(dir) = &self.cache_dir {
            let path = dir.join(format!("{key}.json"));
            if path.exists() {
                let entry = self.read_entry(&path)?;
                if entry.key != key {
                    return Err(LlmError::CacheCorrupt {
                        path: path.display().to_string(),
                        message: format!("entry key {} does not match file", entry.key),
                    });
                }
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(entry.response);
            }
        }
        let raw = {
            let _permit = self.gate.acquire();
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            self.backend.complete(req)?
        };
        let response = truncate_at_stops(&raw, &req.stop);
        if let Some(dir) = &self.cache_dir {
            self.write_entry(dir, &key, &response)?;
        }
        Ok(response)
    }

    fn read_entry(&self, path: &Path) -> Result<CacheEntry, LlmError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| LlmError::CacheCorrupt {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn write_entry(&self, dir: &Path, key: &str, response: &str) -> Result<(), LlmError> {
        let created_at = SystemTime::now()
            .duration_since(SystemTime::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let entry = CacheEntry {
            key: key.to_string(),
            response: response.to_string(),
            created_at,
        };
        let tmp = dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::SeqCst)
        ));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(serde_json::to_string(&entry).expect("serializable").as_bytes())?;
            f.flush()?;
        }
        std::fs::rename(&tmp, dir.join(format!("{key}.json")))?;
        Ok(())
    }
}

/// Cuts `text` before the earliest occurrence of any stop sequence.
fn truncate_at_stops(text: &str, stops: &[String]) -> String {
    let mut cut = text.len();
    for stop in stops {
        if stop.is_empty() {
            continue;
        }
        if let Some(i) = text.find(stop.as_str()) {
            cut = cut.min(i);
        }
    }
    text[..cut].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prompt: &str) -> LlmRequest {
        LlmRequest {
            model: "test-model".into(),
            prompt: prompt.into(),
            max_tokens: 64,
            stop: vec![],
        }
    }

    fn rule(pattern: &str, response: &str) -> ScriptRule {
        ScriptRule { pattern: pattern.into(), response: response.into() }
    }

    #[test]
    fn glob_basics() {
        assert!(glob_match("*", ""));
        assert!(glob_match("*", "anything"));
        assert!(glob_match("abc", "abc"));
        assert!(!glob_match("abc", "abcd"));
        assert!(glob_match("a*c", "abbbc"));
        assert!(glob_match("a*c", "ac"));
        assert!(!glob_match("a*c", "ab"));
        assert!(glob_match("*capital*france*", "what is the capital of france?"));
        assert!(!glob_match("*capital*france*", "capital of germany"));
        assert!(glob_match("x**y", "xzzy"));
        assert!(!glob_match("", "x"));
        assert!(glob_match("", ""));
    }

    #[test]
    fn glob_backtracks_across_repeats() {
        assert!(glob_match("*ab*ab", "abab"));
        assert!(glob_match("*ing", "string matching"));
        assert!(!glob_match("*ing!", "string matching"));
    }

    #[test]
    fn mock_first_match_wins() {
        let mock = MockLlm::from_rules(vec![
            rule("*france*", "Paris"),
            rule("*", "fallback"),
        ]);
        assert_eq!(mock.complete(&req("capital of france")).unwrap(), "Paris");
        assert_eq!(mock.complete(&req("capital of peru")).unwrap(), "fallback");
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn mock_miss_is_an_error() {
        let mock = MockLlm::from_rules(vec![rule("exact only", "x")]);
        let err = mock.complete(&req("something else")).unwrap_err();
        assert!(matches!(err, LlmError::MockMiss { prompt_prefix } if prompt_prefix == "something else"));
    }

    #[test]
    fn script_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        std::fs::write(
            &path,
            r#"[{"pattern": "*water*", "response": "H2O [DONE]"}]"#,
        )
        .unwrap();
        let mock = MockLlm::from_script_file(&path).unwrap();
        assert_eq!(mock.complete(&req("what is water")).unwrap(), "H2O [DONE]");

        std::fs::write(&path, "not json").unwrap();
        assert!(matches!(
            MockLlm::from_script_file(&path),
            Err(LlmError::BadScript { .. })
        ));
    }

    #[test]
    fn client_caches_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mock = Arc::new(MockLlm::from_rules(vec![rule("*", "answer")]));
        let client = LlmClient::new(
            mock.clone(),
            Some(dir.path().to_path_buf()),
            4,
        )
        .unwrap();
        let r = req("q1");
        assert_eq!(client.complete(&r).unwrap(), "answer");
        assert_eq!(client.complete(&r).unwrap(), "answer");
        assert_eq!(mock.calls(), 1);
        assert_eq!(client.backend_calls(), 1);
        assert_eq!(client.cache_hits(), 1);

        // a fresh client over the same dir replays without the backend
        let mock2 = Arc::new(MockLlm::from_rules(vec![]));
        let client2 =
            LlmClient::new(mock2.clone(), Some(dir.path().to_path_buf()), 4).unwrap();
        assert_eq!(client2.complete(&r).unwrap(), "answer");
        assert_eq!(mock2.calls(), 0);
    }

    #[test]
    fn cache_entry_shape_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let client = LlmClient::new(
            Arc::new(MockLlm::from_rules(vec![rule("*", "hi")])),
            Some(dir.path().to_path_buf()),
            1,
        )
        .unwrap();
        let r = req("q");
        client.complete(&r).unwrap();
        let key = LlmClient::cache_key(&r);
        let text =
            std::fs::read_to_string(dir.path().join(format!("{key}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["key"], serde_json::json!(key));
        assert_eq!(v["response"], serde_json::json!("hi"));
        assert!(v["created_at"].is_u64());
    }

    #[test]
    fn corrupt_cache_entry_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let client = LlmClient::new(
            Arc::new(MockLlm::from_rules(vec![rule("*", "hi")])),
            Some(dir.path().to_path_buf()),
            1,
        )
        .unwrap();
        let r = req("q");
        let key = LlmClient::cache_key(&r);
        std::fs::write(dir.path().join(format!("{key}.json")), "{broken").unwrap();
        assert!(matches!(
            client.complete(&r).unwrap_err(),
            LlmError::CacheCorrupt { .. }
        ));
    }

    #[test]
    fn cache_key_separates_fields() {
        let base = req("p");
        let mut other_model = base.clone();
        other_model.model = "m2".into();
        let mut other_tokens = base.clone();
        other_tokens.max_tokens = 65;
        let mut other_stop = base.clone();
        other_stop.stop = vec!["[DONE]".into()];
        let keys = [
            LlmClient::cache_key(&base),
            LlmClient::cache_key(&other_model),
            LlmClient::cache_key(&other_tokens),
            LlmClient::cache_key(&other_stop),
        ];
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                assert_ne!(keys[i], keys[j]);
            }
        }

        // length prefixes keep field boundaries unambiguous
        let mut ab = base.clone();
        ab.model = "ab".into();
        ab.prompt = "c".into();
        let mut a = base.clone();
        a.model = "a".into();
        a.prompt = "bc".into();
        assert_ne!(LlmClient::cache_key(&ab), LlmClient::cache_key(&a));
    }

    #[test]
    fn stop_sequences_truncate_responses() {
        let mock = Arc::new(MockLlm::from_rules(vec![rule(
            "*",
            "Water is H2O. [DONE] trailing junk",
        )]));
        let client = LlmClient::new(mock, None, 1).unwrap();
        let mut r = req("gen");
        r.stop = vec!["[DONE]".into()];
        assert_eq!(client.complete(&r).unwrap(), "Water is H2O. ");
    }

    #[test]
    fn earliest_stop_wins() {
        assert_eq!(
            truncate_at_stops("abcXdefY", &["Y".into(), "X".into()]),
            "abc"
        );
        assert_eq!(truncate_at_stops("clean", &["Z".into()]), "clean");
        assert_eq!(truncate_at_stops("clean", &[]), "clean");
    }

    struct Probing {
        active: AtomicU64,
        max_seen: AtomicU64,
    }

    impl LlmBackend for Probing {
        fn complete(&self, _req: &LlmRequest) -> Result<String, LlmError> {
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.max_seen.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(20));
            self.active.fetch_sub(1, Ordering::SeqCst);
            Ok("ok".into())
        }

        fn name(&self) -> &'static str {
            "probe"
        }
    }

    #[test]
    fn gate_bounds_backend_concurrency() {
        let probe = Arc::new(Probing {
            active: AtomicU64::new(0),
            max_seen: AtomicU64::new(0),
        });
        let client =
            Arc::new(LlmClient::new(probe.clone(), None, 2).unwrap());
        std::thread::scope(|s| {
            for i in 0..8 {
                let client = Arc::clone(&client);
                s.spawn(move || client.complete(&req(&format!("p{i}"))).unwrap());
            }
        });
        assert!(probe.max_seen.load(Ordering::SeqCst) <= 2);
        assert_eq!(client.backend_calls(), 8);
    }
}
