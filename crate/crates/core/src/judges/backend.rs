use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::cache::{cached_call, CacheMode, ResponseCache};
use super::{BackendError, Request, Response, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    #[serde(alias = "rule")]
    RuleBased,
    Replay,
    /// Pre-recorded system answers keyed by record and mode.
    Canned,
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn call(&self, request: &Request) -> Result<Response, BackendError>;

    /// Whether image evidence should be attached to requests as base64.
    fn needs_images(&self) -> bool {
        false
    }
}

/// Word-level negation pairs the rule judge treats as contradicting.
pub const DEFAULT_NEGATIONS: [(&str, &str); 9] = [
    ("is", "is not"),
    ("are", "are not"),
    ("was", "was not"),
    ("were", "were not"),
    ("does", "does not"),
    ("did", "did not"),
    ("can", "cannot"),
    ("has", "has no"),
    ("will", "will not"),
];

/// Offline judge. Entailment iff the normalized claim occurs in the normalized
/// evidence text (or caption); Contradiction iff the claim with one negation
/// pattern applied or removed occurs there; otherwise Neutral.
#[derive(Debug, Clone)]
pub struct RuleBackend {
    pub negations: Vec<(String, String)>,
}

impl Default for RuleBackend {
    fn default() -> Self {
        RuleBackend {
            negations: DEFAULT_NEGATIONS
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        }
    }
}

/// Lowercase, punctuation to spaces, single-spaced, padded with one space on
/// each side so substring tests respect word boundaries.
fn normalize_padded(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect();
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    format!(" {} ", words.join(" "))
}

impl RuleBackend {
    pub fn judge(&self, claim: &str, evidence: &str) -> &'static str {
        let claim = normalize_padded(claim);
        let evidence = normalize_padded(evidence);
        if claim.trim().is_empty() {
            return "Neutral";
        }
        if evidence.contains(&claim) {
            return "Entailment";
        }
        for (plain, negated) in &self.negations {
            let plain = format!(" {plain} ");
            let negated = format!(" {negated} ");
            let variants = [
                claim.replacen(&plain, &negated, 1),
                claim.replacen(&negated, &plain, 1),
            ];
            if variants
                .iter()
                .any(|v| *v != claim && evidence.contains(v.as_str()))
            {
                return "Contradiction";
            }
        }
        "Neutral"
    }
}

impl Backend for RuleBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::RuleBased
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        match request.task {
            Task::Entailment => {
                let claim = request.get("claim").unwrap_or("");
                let evidence = request.get("evidence").unwrap_or("");
                Ok(Response {
                    label: Some(self.judge(claim, evidence).to_string()),
                    ..Default::default()
                })
            }
            Task::ClosedBook => Ok(Response {
                answer: Some(String::new()),
                confidence: Some(serde_json::json!(0.0)),
                ..Default::default()
            }),
            other => Err(BackendError::Unsupported(other)),
        }
    }
}

/// Environment variable holding the bearer token for remote endpoints.
pub const API_KEY_ENV: &str = "CLAIMCHECK_API_KEY";

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) {
        let mut free = self.free.lock().expect("slot lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock");
        }
        *free -= 1;
    }

    fn release(&self) {
        *self.free.lock().expect("slot lock") += 1;
        self.cv.notify_one();
    }
}

/// JSON-over-HTTP backend. Posts the request body to `endpoint` and expects a
/// [`Response`] body back. At most `max_inflight` calls run at once.
pub struct RemoteBackend {
    endpoint: String,
    agent: ureq::Agent,
    retries: u32,
    api_key: Option<String>,
    slots: Slots,
    calls: AtomicUsize,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: u32, max_inflight: usize) -> Self {
        RemoteBackend {
            endpoint: endpoint.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            retries,
            api_key: std::env::var(API_KEY_ENV).ok(),
            slots: Slots {
                free: Mutex::new(max_inflight.max(1)),
                cv: Condvar::new(),
            },
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of HTTP attempts made so far.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn attempt(&self, request: &Request) -> Result<Response, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(request).map_err(|e| e.to_string())?;
        resp.into_json::<Response>().map_err(|e| e.to_string())
    }
}

impl Backend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        self.slots.acquire();
        let mut last = String::new();
        let mut result = None;
        for attempt in 0..=self.retries {
            match self.attempt(request) {
                Ok(r) => {
                    result = Some(r);
                    break;
                }
                Err(e) => {
                    log::warn!("remote call to {} failed (attempt {}): {e}", self.endpoint, attempt + 1);
                    last = e;
                    if attempt < self.retries {
                        std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                    }
                }
            }
        }
        self.slots.release();
        result.ok_or(BackendError::Unreachable(last))
    }

    fn needs_images(&self) -> bool {
        true
    }
}

/// One line of a canned answers file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CannedAnswer {
    pub record_id: String,
    /// Retrieval mode short name (`go`, `gpd`, `do`); absent means any mode.
    #[serde(default)]
    pub mode: Option<String>,
    /// Raw system response; takes precedence over `short`/`long`.
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub short: Option<String>,
    #[serde(default)]
    pub long: Option<String>,
}

/// Serves `generate` requests from a line-delimited answers file.
#[derive(Debug, Clone, Default)]
pub struct CannedBackend {
    answers: BTreeMap<(String, String), String>,
}

impl CannedBackend {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Cache(format!("{}: {e}", path.display())))?;
        let mut backend = CannedBackend::default();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: CannedAnswer = serde_json::from_str(line)
                .map_err(|e| BackendError::Cache(format!("{} line {}: {e}", path.display(), idx + 1)))?;
            backend.insert(row);
        }
        Ok(backend)
    }

    pub fn insert(&mut self, row: CannedAnswer) {
        let body = row.response.unwrap_or_else(|| {
            format!(
                "SHORT: {}\nLONG: {}",
                row.short.unwrap_or_default(),
                row.long.unwrap_or_default()
            )
        });
        let mode = row.mode.unwrap_or_else(|| "*".into()).to_ascii_lowercase();
        self.answers.insert((row.record_id, mode), body);
    }
}

impl Backend for CannedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Canned
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        if request.task != Task::Generate {
            return Err(BackendError::Unsupported(request.task));
        }
        let record = request.get("record_id").unwrap_or("").to_string();
        let mode = request.get("mode").unwrap_or("").to_ascii_lowercase();
        self.answers
            .get(&(record.clone(), mode))
            .or_else(|| self.answers.get(&(record.clone(), "*".into())))
            .map(|a| Response {
                answer: Some(a.clone()),
                ..Default::default()
            })
            .ok_or_else(|| BackendError::Unreachable(format!("no canned answer for {record}")))
    }
}

/// Serves only cached responses; a miss is a `missing_fixture` error.
pub struct ReplayBackend {
    cache: ResponseCache,
    images: bool,
}

impl ReplayBackend {
    pub fn new(cache: ResponseCache, images: bool) -> Self {
        ReplayBackend { cache, images }
    }
}

impl Backend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        cached_call(&self.cache, request, CacheMode::Replay, None)
    }

    fn needs_images(&self) -> bool {
        self.images
    }
}

/// Cache in front of another backend: hits skip the inner call, misses are
/// forwarded and stored.
pub struct RecordingBackend {
    cache: ResponseCache,
    inner: Arc<dyn Backend>,
}

impl RecordingBackend {
    pub fn new(cache: ResponseCache, inner: Arc<dyn Backend>) -> Self {
        RecordingBackend { cache, inner }
    }
}

impl Backend for RecordingBackend {
    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        cached_call(&self.cache, request, CacheMode::Record, Some(self.inner.as_ref()))
    }

    fn needs_images(&self) -> bool {
        self.inner.needs_images()
    }
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    2
}

fn default_inflight() -> usize {
    4
}

/// Declarative backend settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Record cache for remote/rule backends; the fixture store for replay.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Canned answers file.
    #[serde(default)]
    pub answers: Option<PathBuf>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    /// Whether replayed requests carried image payloads when recorded.
    #[serde(default)]
    pub replay_images: bool,
}

impl BackendConfig {
    pub fn of_kind(kind: BackendKind) -> Self {
        BackendConfig {
            kind,
            endpoint: None,
            cache_dir: None,
            answers: None,
            temperature: 0.0,
            timeout_secs: default_timeout(),
            retries: default_retries(),
            max_inflight: default_inflight(),
            replay_images: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.temperature != 0.0 {
            return Err(format!("temperature must be 0, got {}", self.temperature));
        }
        match self.kind {
            BackendKind::Remote if self.endpoint.is_none() => {
                Err("remote backend needs an endpoint".into())
            }
            BackendKind::Replay if self.cache_dir.is_none() => {
                Err("replay backend needs a cache_dir".into())
            }
            BackendKind::Canned if self.answers.is_none() => {
                Err("canned backend needs an answers file".into())
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>, BackendError> {
        self.validate().map_err(BackendError::Cache)?;
        let inner: Arc<dyn Backend> = match self.kind {
            BackendKind::Remote => Arc::new(RemoteBackend::new(
                self.endpoint.clone().unwrap_or_default(),
                Duration::from_secs(self.timeout_secs),
                self.retries,
                self.max_inflight,
            )),
            BackendKind::RuleBased => Arc::new(RuleBackend::default()),
            BackendKind::Canned => Arc::new(CannedBackend::load(
                self.answers.as_deref().expect("validated"),
            )?),
            BackendKind::Replay => {
                let cache = ResponseCache::new(self.cache_dir.clone().expect("validated"))?;
                return Ok(Arc::new(ReplayBackend::new(cache, self.replay_images)));
            }
        };
        match &self.cache_dir {
            Some(dir) => Ok(Arc::new(RecordingBackend::new(
                ResponseCache::new(dir.clone())?,
                inner,
            ))),
            None => Ok(inner),
        }
    }
}
