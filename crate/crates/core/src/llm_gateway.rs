//! Sampling SQL completions from pluggable generation backends.
//!
//! Every sample is addressed by `(model_id, prompt hash, temperature, seed,
//! sample index)`. The on-disk cache is consulted first; only misses reach
//! the backend. A sample the backend fails to produce becomes a failed
//! placeholder instead of aborting its arm.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptgen::{PromptDesignId, RenderedPrompt};

pub const DEFAULT_SAMPLES: usize = 32;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const STOP_SEQUENCES: [&str; 2] = [";", "\n\n"];

/// One (model, design, shots) configuration contributing candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArm {
    pub model_id: String,
    pub design: PromptDesignId,
    #[serde(default)]
    pub shots: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Filled in as `1 / arms` when not configured.
    #[serde(default)]
    pub weight: Option<f64>,
    /// Start index into the demonstration pool, so arms can use different demos.
    #[serde(default)]
    pub demo_offset: usize,
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl ModelArm {
    pub fn new(model_id: impl Into<String>, design: PromptDesignId) -> Self {
        Self {
            model_id: model_id.into(),
            design,
            shots: 0,
            samples: DEFAULT_SAMPLES,
            temperature: DEFAULT_TEMPERATURE,
            weight: None,
            demo_offset: 0,
        }
    }

    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }

    pub fn with_shots(mut self, shots: usize) -> Self {
        self.shots = shots;
        self
    }

    /// `model/design/N-shot`, used in audit records.
    pub fn descriptor(&self) -> String {
        format!("{}/{}/{}-shot", self.model_id, self.design, self.shots)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendError {
    pub status: Option<u16>,
    pub message: String,
}

impl BackendError {
    pub fn new(status: Option<u16>, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.status {
            Some(s) => write!(f, "backend error ({s}): {}", self.message),
            None => write!(f, "backend error: {}", self.message),
        }
    }
}

impl std::error::Error for BackendError {}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no backend registered for `{0}`")]
    BackendUnavailable(String),
    #[error("backend `{0}` is already registered")]
    DuplicateModelId(String),
    #[error("arm `{0}` requests zero samples")]
    ZeroSamples(String),
    #[error("cache i/o at {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub prompt_hash: &'a str,
    /// Number of completions wanted.
    pub n: usize,
    /// Sample index of the first requested completion.
    pub first_index: usize,
    pub temperature: f64,
    pub seed: u64,
    pub stop: &'a [&'a str],
}

/// Anything that can turn a prompt into `n` completion strings.
pub trait GenerationBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Vec<String>, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    /// Raw decoded text, or the reason the sample could not be produced.
    pub text: Result<String, BackendError>,
    pub arm: ModelArm,
    pub sample_index: usize,
    pub from_cache: bool,
}

impl Completion {
    pub fn is_failed(&self) -> bool {
        self.text.is_err()
    }
}

/// Content-addressed completion store:
/// `<root>/<model_id>/<prompt hash>/<temperature>/<seed>/<index>.txt`.
#[derive(Debug)]
pub struct CompletionCache {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl CompletionCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, model_id: &str, hash: &str, temperature: f64, seed: u64, index: usize) -> PathBuf {
        self.root
            .join(path_component(model_id))
            .join(path_component(hash))
            .join(format!("{temperature}"))
            .join(seed.to_string())
            .join(format!("{index}.txt"))
    }

    pub fn get(&self, path: &Path) -> Option<String> {
        fs::read_to_string(path).ok()
    }

    pub fn put(&self, path: &Path, text: &str) -> Result<(), GatewayError> {
        let cache_err = |source| GatewayError::Cache {
            path: path.to_path_buf(),
            source,
        };
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = path.parent().expect("entry paths always have a parent");
        fs::create_dir_all(dir).map_err(cache_err)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(cache_err)?;
        fs::rename(&tmp, path).map_err(cache_err)
    }
}

fn path_component(raw: &str) -> String {
    let cleaned: String = raw
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    if cleaned.is_empty() || cleaned.starts_with('.') {
        format!("_{cleaned}")
    } else {
        cleaned
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub entries: u64,
    pub bytes: u64,
}

/// Counts cached completions under `dir`. Fails if `dir` does not exist.
pub fn cache_stats(dir: &Path) -> io::Result<CacheStats> {
    let mut stats = CacheStats::default();
    let mut stack = vec![dir.to_path_buf()];
    // read_dir on the root surfaces a missing directory as an error
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let entry = entry?;
            let ty = entry.file_type()?;
            if ty.is_dir() {
                stack.push(entry.path());
            } else if entry.path().extension().is_some_and(|e| e == "txt") {
                stats.entries += 1;
                stats.bytes += entry.metadata()?.len();
            }
        }
    }
    Ok(stats)
}

/// Removes everything below `dir`, keeping `dir` itself.
pub fn cache_clear(dir: &Path) -> io::Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            fs::remove_dir_all(&path)?;
        } else {
            fs::remove_file(&path)?;
        }
    }
    Ok(())
}

/// Routes arms to registered backends and caches their samples.
#[derive(Default)]
pub struct Gateway {
    backends: BTreeMap<String, Arc<dyn GenerationBackend>>,
    cache: Option<CompletionCache>,
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_cache(cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            backends: BTreeMap::new(),
            cache: Some(CompletionCache::new(cache_dir)),
        }
    }

    pub fn register_backend(
        &mut self,
        model_id: impl Into<String>,
        backend: Arc<dyn GenerationBackend>,
    ) -> Result<(), GatewayError> {
        let model_id = model_id.into();
        if self.backends.contains_key(&model_id) {
            return Err(GatewayError::DuplicateModelId(model_id));
        }
        self.backends.insert(model_id, backend);
        Ok(())
    }

    pub fn has_backend(&self, model_id: &str) -> bool {
        self.backends.contains_key(model_id)
    }

    /// Exactly `arm.samples` completions in sample-index order.
    pub fn sample(&self, arm: &ModelArm, prompt: &RenderedPrompt, seed: u64) -> Result<Vec<Completion>, GatewayError> {
        let backend = self
            .backends
            .get(&arm.model_id)
            .ok_or_else(|| GatewayError::BackendUnavailable(arm.model_id.clone()))?;
        if arm.samples == 0 {
            return Err(GatewayError::ZeroSamples(arm.descriptor()));
        }

        let entry = |i| {
            self.cache
                .as_ref()
                .map(|c| c.entry_path(&arm.model_id, &prompt.content_hash, arm.temperature, seed, i))
        };
        let mut slots: Vec<Option<Completion>> = (0..arm.samples)
            .map(|i| {
                let cache = self.cache.as_ref()?;
                let text = cache.get(&entry(i)?)?;
                Some(Completion {
                    text: Ok(text),
                    arm: arm.clone(),
                    sample_index: i,
                    from_cache: true,
                })
            })
            .collect();

        for (start, len) in missing_runs(&slots) {
            let request = |first_index, n| GenerationRequest {
                model: &arm.model_id,
                prompt: &prompt.text,
                prompt_hash: &prompt.content_hash,
                n,
                first_index,
                temperature: arm.temperature,
                seed,
                stop: &STOP_SEQUENCES,
            };
            let batch = checked_generate(backend.as_ref(), &request(start, len));
            let texts: Vec<Result<String, BackendError>> = match batch {
                Ok(texts) => texts.into_iter().map(Ok).collect(),
                Err(_) if len > 1 => (start..start + len)
                    .map(|i| checked_generate(backend.as_ref(), &request(i, 1)).map(|mut v| v.remove(0)))
                    .collect(),
                Err(e) => vec![Err(e)],
            };
            for (offset, text) in texts.into_iter().enumerate() {
                let i = start + offset;
                if let (Ok(t), Some(cache), Some(path)) = (&text, self.cache.as_ref(), entry(i)) {
                    cache.put(&path, t)?;
                }
                if let Err(e) = &text {
                    log::warn!("{} sample {i} failed: {e}", arm.descriptor());
                }
                slots[i] = Some(Completion {
                    text,
                    arm: arm.clone(),
                    sample_index: i,
                    from_cache: false,
                });
            }
        }
        Ok(slots.into_iter().map(|s| s.expect("every slot filled")).collect())
    }
}

fn checked_generate(backend: &dyn GenerationBackend, req: &GenerationRequest<'_>) -> Result<Vec<String>, BackendError> {
    let out = backend.generate(req)?;
    if out.len() < req.n {
        return Err(BackendError::new(
            None,
            format!("short response: expected {} completions, got {}", req.n, out.len()),
        ));
    }
    Ok(out.into_iter().take(req.n).collect())
}

/// Contiguous `(start, len)` runs of empty slots.
fn missing_runs<T>(slots: &[Option<T>]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < slots.len() {
        if slots[i].is_none() {
            let start = i;
            while i < slots.len() && slots[i].is_none() {
                i += 1;
            }
            runs.push((start, i - start));
        } else {
            i += 1;
        }
    }
    runs
}

/// One record of a scripted fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub prompt_hash: String,
    pub completions: Vec<String>,
}

/// Replays fixed completions keyed by prompt hash. Sample `i` of a script
/// with `k` completions is completion `i mod k`.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    scripts: HashMap<String, Vec<String>>,
}

impl ScriptedBackend {
    pub fn new(records: impl IntoIterator<Item = ScriptRecord>) -> Self {
        Self {
            scripts: records
                .into_iter()
                .map(|r| (r.prompt_hash, r.completions))
                .collect(),
        }
    }

    /// Loads every `*.json` file in `dir`; each holds one record or an array of records.
    pub fn from_dir(dir: &Path) -> io::Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<io::Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
        paths.sort();
        let mut records = Vec::new();
        for path in paths {
            let raw = fs::read_to_string(&path)?;
            let value: serde_json::Value = serde_json::from_str(&raw)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?;
            let parsed = if value.is_array() {
                serde_json::from_value::<Vec<ScriptRecord>>(value)
            } else {
                serde_json::from_value::<ScriptRecord>(value).map(|r| vec![r])
            };
            records.extend(
                parsed.map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?,
            );
        }
        Ok(Self::new(records))
    }

    pub fn insert(&mut self, prompt_hash: impl Into<String>, completions: Vec<String>) {
        self.scripts.insert(prompt_hash.into(), completions);
    }
}

impl GenerationBackend for ScriptedBackend {
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<Vec<String>, BackendError> {
        let script = self
            .scripts
            .get(req.prompt_hash)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| BackendError::new(Some(404), format!("no script for prompt {}", req.prompt_hash)))?;
        Ok((req.first_index..req.first_index + req.n)
            .map(|i| script[i % script.len()].clone())
            .collect())
    }
}

pub const REMOTE_MAX_ATTEMPTS: u32 = 3;
pub const REMOTE_INITIAL_BACKOFF: Duration = Duration::from_secs(1);
const ERROR_BODY_LIMIT: usize = 200;

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    n: usize,
    temperature: f64,
    stop: &'a [&'a str],
}

#[derive(Deserialize)]
struct WireResponse {
    completions: Vec<String>,
}

/// HTTP backend speaking the JSON completion contract.
pub struct RemoteBackend {
    endpoint: String,
    auth_token_env: Option<String>,
    agent: ureq::Agent,
    max_attempts: u32,
    initial_backoff: Duration,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, auth_token_env: Option<String>, request_timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(request_timeout))
            .http_status_as_error(false)
            .build();
        Self {
            endpoint: endpoint.into(),
            auth_token_env,
            agent: ureq::Agent::new_with_config(config),
            max_attempts: REMOTE_MAX_ATTEMPTS,
            initial_backoff: REMOTE_INITIAL_BACKOFF,
        }
    }

    pub fn with_initial_backoff(mut self, backoff: Duration) -> Self {
        self.initial_backoff = backoff;
        self
    }

    fn attempt(&self, req: &GenerationRequest<'_>, token: Option<&str>) -> Attempt {
        let mut builder = self.agent.post(&self.endpoint);
        if let Some(token) = token {
            builder = builder.header("Authorization", format!("Bearer {token}"));
        }
        let body = WireRequest {
            model: req.model,
            prompt: req.prompt,
            n: req.n,
            temperature: req.temperature,
            stop: req.stop,
        };
        let response = match builder.send_json(&body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(BackendError::new(None, format!("transport: {e}"))),
        };
        let status = response.status().as_u16();
        let text = match response.into_body().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(BackendError::new(Some(status), format!("reading body: {e}"))),
        };
        if status != 200 {
            let err = BackendError::new(Some(status), truncate(&text, ERROR_BODY_LIMIT));
            return if status == 429 || (500..600).contains(&status) {
                Attempt::Retry(err)
            } else {
                Attempt::Fail(err)
            };
        }
        match serde_json::from_str::<WireResponse>(&text) {
            Ok(w) if w.completions.len() >= req.n => Attempt::Done(w.completions),
            Ok(_) => Attempt::Fail(BackendError::new(Some(status), "short response")),
            Err(e) => Attempt::Fail(BackendError::new(Some(status), format!("malformed response: {e}"))),
        }
    }
}

enum Attempt {
    Done(Vec<String>),
    Retry(BackendError),
    Fail(BackendError),
}

fn truncate(s: &str, limit: usize) -> String {
    match s.char_indices().nth(limit) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

impl GenerationBackend for RemoteBackend {
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<Vec<String>, BackendError> {
        let token = match &self.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::new(None, format!("auth token variable `{var}` is not set"))
            })?),
            None => None,
        };
        let mut backoff = self.initial_backoff;
        let mut last = BackendError::new(None, "no attempts made");
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match self.attempt(req, token.as_deref()) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => last = e,
            }
        }
        Err(last)
    }
}
