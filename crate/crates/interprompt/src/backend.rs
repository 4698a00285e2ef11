//! Completion generation and fine-tune job management.
//!
//! A single [`Backend`] trait covers the remote HTTP service and the
//! deterministic in-process mock used for offline tests. Batch prediction
//! runs with bounded parallelism, collects per-item failures instead of
//! aborting, and caches responses on disk keyed by model id and prompt
//! hash so evaluation reruns are free and deterministic.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Post;
use crate::prompt::{build_completion, build_nshot_prompt, PromptTemplate};

/// Environment variable holding the remote API key.
pub const API_KEY_ENV: &str = "INTERPROMPT_API_KEY";

/// API key wrapper that never renders its value in Debug/Display output.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        Self(key.into())
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()).map(Self)
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ApiKey(****)")
    }
}

impl std::fmt::Display for ApiKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "****")
    }
}

#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub base_url: String,
    pub api_key: Option<ApiKey>,
    pub model_id: String,
    pub max_tokens: u32,
    /// Decoding temperature; 0 (greedy) for reproducibility.
    pub temperature: f64,
    pub stop: Vec<String>,
    pub max_parallel: usize,
    pub retry_budget: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            api_key: None,
            model_id: "mock".to_string(),
            max_tokens: 256,
            temperature: 0.0,
            stop: vec!["\n###\n".to_string()],
            max_parallel: 4,
            retry_budget: 3,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_parallel < 1 {
            return Err(BackendError::InvalidConfig("max_parallel must be >= 1"));
        }
        if self.temperature < 0.0 {
            return Err(BackendError::InvalidConfig("temperature must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneJob {
    pub job_id: String,
    pub training_file: String,
    pub status: JobStatus,
    pub result_model_id: Option<String>,
}

impl FineTuneJob {
    /// result_model_id present iff succeeded.
    pub fn invariant_holds(&self) -> bool {
        self.result_model_id.is_some() == (self.status == JobStatus::Succeeded)
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid backend config: {0}")]
    InvalidConfig(&'static str),
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("no API key (set {API_KEY_ENV})")]
    MissingApiKey,
    #[error("training file {0} is empty")]
    EmptyTrainingFile(PathBuf),
    #[error("training file line {line}: {message}")]
    InvalidTrainingFile { line: usize, message: String },
    #[error("service rejected request ({status}): {message}")]
    Service { status: u16, message: String },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("unknown fine-tune job: {0}")]
    JobNotFound(String),
    #[error("scripted failure for prompt")]
    ScriptedFailure,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait Backend: Sync {
    fn complete(&self, prompt: &str, config: &BackendConfig) -> Result<String, BackendError>;
    fn submit_finetune(
        &self,
        training_file: &Path,
        config: &BackendConfig,
    ) -> Result<FineTuneJob, BackendError>;
    fn poll_finetune(
        &self,
        job: &FineTuneJob,
        config: &BackendConfig,
    ) -> Result<FineTuneJob, BackendError>;
}

/// Validate a fine-tune JSONL file locally before any network call.
pub fn validate_training_file(path: &Path) -> Result<usize, BackendError> {
    let content = fs::read_to_string(path)?;
    let mut count = 0;
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        serde_json::from_str::<crate::prompt::FineTuneRecord>(line).map_err(|e| {
            BackendError::InvalidTrainingFile {
                line: i + 1,
                message: e.to_string(),
            }
        })?;
        count += 1;
    }
    if count == 0 {
        return Err(BackendError::EmptyTrainingFile(path.to_path_buf()));
    }
    Ok(count)
}

pub fn prompt_hash(model_id: &str, prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model_id.as_bytes());
    hasher.update([0]);
    hasher.update(prompt.as_bytes());
    format!("{:x}", hasher.finalize())
}

fn truncate_at_stop(text: &str, stop: &[String]) -> String {
    let mut end = text.len();
    for s in stop {
        if s.is_empty() {
            continue;
        }
        if let Some(i) = text.find(s.as_str()) {
            end = end.min(i);
        }
    }
    text[..end].to_string()
}

// ---------------------------------------------------------------------------
// Deterministic mock backend
// ---------------------------------------------------------------------------

struct MockFineTuneState {
    polls_remaining: u32,
    status: JobStatus,
    training_file: String,
}

/// In-process backend driven entirely by fixtures. Thread-safe and
/// deterministic; instruments concurrency so tests can assert the
/// max_parallel bound.
pub struct MockBackend {
    fixtures: HashMap<String, String>,
    fallback: String,
    fail_prompts: HashSet<String>,
    /// Fine-tune jobs succeed after this many polls (0 = immediately).
    pub polls_until_success: u32,
    latency: Duration,
    jobs: Mutex<HashMap<String, MockFineTuneState>>,
    job_counter: AtomicUsize,
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight_seen: AtomicUsize,
}

impl MockBackend {
    /// Mock whose fallback is the template's "neither" completion.
    pub fn new(template: &PromptTemplate) -> Self {
        let neither = Post {
            id: "fallback".into(),
            text: "fallback".into(),
            tbe_label: false,
            pbu_label: false,
            tbe_cue: None,
            pbu_cue: None,
        };
        Self {
            fixtures: HashMap::new(),
            fallback: build_completion(&neither, template).serialized,
            fail_prompts: HashSet::new(),
            polls_until_success: 0,
            latency: Duration::ZERO,
            jobs: Mutex::new(HashMap::new()),
            job_counter: AtomicUsize::new(0),
            requests: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight_seen: AtomicUsize::new(0),
        }
    }

    pub fn insert_fixture(&mut self, prompt: impl Into<String>, completion: impl Into<String>) {
        self.fixtures.insert(prompt.into(), completion.into());
    }

    pub fn fail_on(&mut self, prompt: impl Into<String>) {
        self.fail_prompts.insert(prompt.into());
    }

    /// Artificial per-request latency, to make concurrency observable.
    pub fn set_latency(&mut self, latency: Duration) {
        self.latency = latency;
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight_seen.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn complete(&self, prompt: &str, _config: &BackendConfig) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        self.requests.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight_seen.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let result = if self.fail_prompts.contains(prompt) {
            Err(BackendError::ScriptedFailure)
        } else {
            Ok(self
                .fixtures
                .get(prompt)
                .cloned()
                .unwrap_or_else(|| self.fallback.clone()))
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }

    fn submit_finetune(
        &self,
        training_file: &Path,
        config: &BackendConfig,
    ) -> Result<FineTuneJob, BackendError> {
        validate_training_file(training_file)?;
        let n = self.job_counter.fetch_add(1, Ordering::SeqCst) + 1;
        let job_id = format!("mock-ft-{n}");
        let status = JobStatus::Pending;
        self.jobs.lock().unwrap().insert(
            job_id.clone(),
            MockFineTuneState {
                polls_remaining: self.polls_until_success,
                status,
                training_file: training_file.display().to_string(),
            },
        );
        let _ = config;
        Ok(FineTuneJob {
            job_id,
            training_file: training_file.display().to_string(),
            status,
            result_model_id: None,
        })
    }

    fn poll_finetune(
        &self,
        job: &FineTuneJob,
        config: &BackendConfig,
    ) -> Result<FineTuneJob, BackendError> {
        let mut jobs = self.jobs.lock().unwrap();
        let state = jobs
            .get_mut(&job.job_id)
            .ok_or_else(|| BackendError::JobNotFound(job.job_id.clone()))?;
        if !state.status.is_terminal() {
            if state.polls_remaining <= 1 {
                state.status = JobStatus::Succeeded;
            } else {
                state.polls_remaining -= 1;
                state.status = JobStatus::Running;
            }
        }
        Ok(FineTuneJob {
            job_id: job.job_id.clone(),
            training_file: state.training_file.clone(),
            status: state.status,
            result_model_id: (state.status == JobStatus::Succeeded)
                .then(|| format!("{}-ft-{}", config.model_id, job.job_id)),
        })
    }
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

/// Client for a completion-style JSON service: POST /completions and the
/// /fine-tunes create/retrieve endpoints.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
}

impl Default for HttpBackend {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop: &'a [String],
}

#[derive(Deserialize)]
struct CompletionChoice {
    text: String,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct FineTuneResponse {
    id: String,
    status: String,
    #[serde(default)]
    fine_tuned_model: Option<String>,
}

impl HttpBackend {
    pub fn new() -> Self {
        Self {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("client builds"),
        }
    }

    /// Send with retries on 429 and 5xx, honoring Retry-After when given.
    fn send_with_retry(
        &self,
        build: impl Fn() -> reqwest::blocking::RequestBuilder,
        config: &BackendConfig,
    ) -> Result<reqwest::blocking::Response, BackendError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let outcome = build().send();
            match outcome {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return Ok(resp);
                    }
                    let retriable = status.as_u16() == 429 || status.is_server_error();
                    if retriable && attempts <= config.retry_budget {
                        let wait = resp
                            .headers()
                            .get("retry-after")
                            .and_then(|v| v.to_str().ok())
                            .and_then(|v| v.parse::<f64>().ok())
                            .map(|secs| Duration::from_secs_f64(secs.max(0.0)))
                            .unwrap_or_else(|| Duration::from_millis(50 << attempts.min(6)));
                        std::thread::sleep(wait);
                        continue;
                    }
                    let message = resp.text().unwrap_or_default();
                    return Err(BackendError::Service {
                        status: status.as_u16(),
                        message,
                    });
                }
                Err(e) => {
                    if attempts <= config.retry_budget {
                        std::thread::sleep(Duration::from_millis(50 << attempts.min(6)));
                        continue;
                    }
                    return Err(BackendError::Transport {
                        attempts,
                        message: e.to_string(),
                    });
                }
            }
        }
    }

    fn parse_status(status: &str) -> JobStatus {
        match status {
            "succeeded" => JobStatus::Succeeded,
            "failed" | "cancelled" => JobStatus::Failed,
            "running" => JobStatus::Running,
            _ => JobStatus::Pending,
        }
    }
}

impl Backend for HttpBackend {
    fn complete(&self, prompt: &str, config: &BackendConfig) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        config.validate()?;
        let key = config.api_key.as_ref().ok_or(BackendError::MissingApiKey)?;
        let url = format!("{}/completions", config.base_url.trim_end_matches('/'));
        let body = serde_json::to_value(CompletionRequest {
            model: &config.model_id,
            prompt,
            max_tokens: config.max_tokens,
            temperature: config.temperature,
            stop: &config.stop,
        })
        .expect("request serializes");
        let resp = self.send_with_retry(
            || self.client.post(&url).bearer_auth(key.expose()).json(&body),
            config,
        )?;
        let parsed: CompletionResponse = resp.json().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .unwrap_or_default();
        Ok(truncate_at_stop(&text, &config.stop))
    }

    fn submit_finetune(
        &self,
        training_file: &Path,
        config: &BackendConfig,
    ) -> Result<FineTuneJob, BackendError> {
        let n_records = validate_training_file(training_file)?;
        let key = config.api_key.as_ref().ok_or(BackendError::MissingApiKey)?;
        let url = format!("{}/fine-tunes", config.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": config.model_id,
            "training_file": training_file.display().to_string(),
            "n_records": n_records,
        });
        let resp = self.send_with_retry(
            || self.client.post(&url).bearer_auth(key.expose()).json(&body),
            config,
        )?;
        let parsed: FineTuneResponse = resp.json().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = Self::parse_status(&parsed.status);
        Ok(FineTuneJob {
            job_id: parsed.id,
            training_file: training_file.display().to_string(),
            status,
            result_model_id: parsed.fine_tuned_model,
        })
    }

    fn poll_finetune(
        &self,
        job: &FineTuneJob,
        config: &BackendConfig,
    ) -> Result<FineTuneJob, BackendError> {
        if job.status.is_terminal() {
            return Ok(job.clone());
        }
        let key = config.api_key.as_ref().ok_or(BackendError::MissingApiKey)?;
        let url = format!(
            "{}/fine-tunes/{}",
            config.base_url.trim_end_matches('/'),
            job.job_id
        );
        let resp =
            self.send_with_retry(|| self.client.get(&url).bearer_auth(key.expose()), config);
        let resp = match resp {
            Ok(r) => r,
            Err(BackendError::Service { status: 404, .. }) => {
                return Err(BackendError::JobNotFound(job.job_id.clone()))
            }
            Err(e) => return Err(e),
        };
        let parsed: FineTuneResponse = resp.json().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        Ok(FineTuneJob {
            job_id: parsed.id,
            training_file: job.training_file.clone(),
            status: Self::parse_status(&parsed.status),
            result_model_id: parsed.fine_tuned_model,
        })
    }
}

// ---------------------------------------------------------------------------
// Response cache and batch prediction
// ---------------------------------------------------------------------------

/// Disk cache keyed by (model_id, prompt) hash.
pub struct ResponseCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    prompt_sha256: String,
    completion: String,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let content = fs::read_to_string(self.path_for(key)).ok()?;
        serde_json::from_str::<CacheEntry>(&content)
            .ok()
            .map(|e| e.completion)
    }

    pub fn put(&self, key: &str, completion: &str) -> std::io::Result<()> {
        let entry = CacheEntry {
            prompt_sha256: key.to_string(),
            completion: completion.to_string(),
        };
        fs::write(self.path_for(key), serde_json::to_string(&entry)?)
    }
}

/// How prompts are assembled for prediction.
pub enum PromptMode<'a> {
    /// Post text plus separator, for a fine-tuned model.
    FineTuned,
    /// N-shot prompt with the given worked exemplars.
    NShot(&'a [Post]),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub id: String,
    pub prompt_sha256: String,
    pub completion: Option<String>,
    pub error: Option<String>,
    pub from_cache: bool,
    pub latency_ms: u64,
}

/// One completion per post, order-preserving, with at most
/// `config.max_parallel` requests in flight. Per-item failures are
/// recorded, never thrown.
pub fn batch_predict(
    posts: &[Post],
    template: &PromptTemplate,
    backend: &dyn Backend,
    config: &BackendConfig,
    mode: &PromptMode<'_>,
    cache: Option<&ResponseCache>,
) -> Result<Vec<PredictionOutcome>, BackendError> {
    config.validate()?;
    let prompts: Vec<String> = posts
        .iter()
        .map(|post| match mode {
            PromptMode::FineTuned => Ok(format!("{}{}", post.text, template.separator)),
            PromptMode::NShot(exemplars) => build_nshot_prompt(post, exemplars, template)
                .map_err(|e| BackendError::InvalidConfig(match e {
                    crate::prompt::PromptError::ExemplarLeakage(_) => "target post appears among exemplars",
                    crate::prompt::PromptError::TextContainsStop => "post text contains stop sequence",
                })),
        })
        .collect::<Result<_, _>>()?;

    let results: Vec<Mutex<Option<PredictionOutcome>>> =
        (0..posts.len()).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.max_parallel.min(posts.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= posts.len() {
                    break;
                }
                let key = prompt_hash(&config.model_id, &prompts[i]);
                let start = Instant::now();
                let (completion, error, from_cache) =
                    match cache.and_then(|c| c.get(&key)) {
                        Some(hit) => (Some(hit), None, true),
                        None => match backend.complete(&prompts[i], config) {
                            Ok(text) => {
                                if let Some(c) = cache {
                                    let _ = c.put(&key, &text);
                                }
                                (Some(text), None, false)
                            }
                            Err(e) => (None, Some(e.to_string()), false),
                        },
                    };
                *results[i].lock().unwrap() = Some(PredictionOutcome {
                    id: posts[i].id.clone(),
                    prompt_sha256: key,
                    completion,
                    error,
                    from_cache,
                    latency_ms: start.elapsed().as_millis() as u64,
                });
            });
        }
    });
    Ok(results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{build_finetune_record, write_finetune_jsonl};

    fn posts(n: usize) -> Vec<Post> {
        (0..n)
            .map(|i| Post {
                id: format!("p{i}"),
                text: format!("post number {i} feels alone"),
                tbe_label: false,
                pbu_label: false,
                tbe_cue: None,
                pbu_cue: None,
            })
            .collect()
    }

    #[test]
    fn mock_returns_fixture_or_fallback() {
        let tpl = PromptTemplate::default();
        let mut mock = MockBackend::new(&tpl);
        mock.insert_fixture("known prompt", "known completion");
        let config = BackendConfig::default();
        assert_eq!(mock.complete("known prompt", &config).unwrap(), "known completion");
        let fallback = mock.complete("unknown prompt", &config).unwrap();
        assert!(fallback.contains("neither belong nor burden"));
    }

    #[test]
    fn mock_finetune_state_machine() {
        let tpl = PromptTemplate::default();
        let mut mock = MockBackend::new(&tpl);
        mock.polls_until_success = 3;
        let config = BackendConfig::default();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let post = posts(1).remove(0);
        let record = build_finetune_record(&post, &tpl).unwrap();
        let mut buf = Vec::new();
        write_finetune_jsonl(&mut buf, &[record]).unwrap();
        std::fs::write(&path, buf).unwrap();

        let job = mock.submit_finetune(&path, &config).unwrap();
        assert_eq!(job.status, JobStatus::Pending);
        assert!(job.invariant_holds());

        let p1 = mock.poll_finetune(&job, &config).unwrap();
        assert_eq!(p1.status, JobStatus::Running);
        let p2 = mock.poll_finetune(&p1, &config).unwrap();
        assert_eq!(p2.status, JobStatus::Running);
        let p3 = mock.poll_finetune(&p2, &config).unwrap();
        assert_eq!(p3.status, JobStatus::Succeeded);
        assert!(p3.result_model_id.is_some());
        assert!(p3.invariant_holds());

        // Terminal states are sticky.
        let p4 = mock.poll_finetune(&p3, &config).unwrap();
        assert_eq!(p4, p3);
    }

    #[test]
    fn unknown_job_is_not_found() {
        let tpl = PromptTemplate::default();
        let mock = MockBackend::new(&tpl);
        let bogus = FineTuneJob {
            job_id: "nope".into(),
            training_file: String::new(),
            status: JobStatus::Pending,
            result_model_id: None,
        };
        assert!(matches!(
            mock.poll_finetune(&bogus, &BackendConfig::default()),
            Err(BackendError::JobNotFound(_))
        ));
    }

    #[test]
    fn empty_training_file_fails_locally() {
        let tpl = PromptTemplate::default();
        let mock = MockBackend::new(&tpl);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            mock.submit_finetune(&path, &BackendConfig::default()),
            Err(BackendError::EmptyTrainingFile(_))
        ));
        assert_eq!(mock.request_count(), 0);
    }

    #[test]
    fn batch_is_order_preserving_and_collects_failures() {
        let tpl = PromptTemplate::default();
        let batch = posts(3);
        let mut mock = MockBackend::new(&tpl);
        mock.fail_on(format!("{}{}", batch[1].text, tpl.separator));
        let config = BackendConfig::default();
        let out = batch_predict(&batch, &tpl, &mock, &config, &PromptMode::FineTuned, None).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].id, "p0");
        assert_eq!(out[2].id, "p2");
        assert!(out[0].completion.is_some());
        assert!(out[1].completion.is_none() && out[1].error.is_some());
        assert!(out[2].completion.is_some());
    }

    #[test]
    fn batch_respects_max_parallel() {
        let tpl = PromptTemplate::default();
        let mut mock = MockBackend::new(&tpl);
        mock.set_latency(Duration::from_millis(5));
        let config = BackendConfig {
            max_parallel: 3,
            ..BackendConfig::default()
        };
        let batch = posts(24);
        batch_predict(&batch, &tpl, &mock, &config, &PromptMode::FineTuned, None).unwrap();
        assert!(mock.max_in_flight() <= 3, "saw {}", mock.max_in_flight());
        assert_eq!(mock.request_count(), 24);
    }

    #[test]
    fn sequential_when_max_parallel_is_one() {
        let tpl = PromptTemplate::default();
        let mut mock = MockBackend::new(&tpl);
        mock.set_latency(Duration::from_millis(1));
        let config = BackendConfig {
            max_parallel: 1,
            ..BackendConfig::default()
        };
        batch_predict(&posts(8), &tpl, &mock, &config, &PromptMode::FineTuned, None).unwrap();
        assert_eq!(mock.max_in_flight(), 1);
    }

    #[test]
    fn cache_makes_rerun_free() {
        let tpl = PromptTemplate::default();
        let mock = MockBackend::new(&tpl);
        let config = BackendConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path().join("cache")).unwrap();
        let batch = posts(5);
        let first =
            batch_predict(&batch, &tpl, &mock, &config, &PromptMode::FineTuned, Some(&cache)).unwrap();
        assert_eq!(mock.request_count(), 5);
        let second =
            batch_predict(&batch, &tpl, &mock, &config, &PromptMode::FineTuned, Some(&cache)).unwrap();
        assert_eq!(mock.request_count(), 5, "rerun must issue zero requests");
        assert!(second.iter().all(|o| o.from_cache));
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.completion, b.completion);
        }
    }

    #[test]
    fn api_key_never_leaks_via_debug() {
        let key = ApiKey::new("sk-supersecret-123");
        let config = BackendConfig {
            api_key: Some(key),
            ..BackendConfig::default()
        };
        let rendered = format!("{config:?}");
        assert!(!rendered.contains("supersecret"));
    }

    #[test]
    fn stop_truncation() {
        let stops = vec!["\n###\n".to_string()];
        assert_eq!(truncate_at_stop("hello\n###\nrest", &stops), "hello");
        assert_eq!(truncate_at_stop("no stop here", &stops), "no stop here");
    }
}
