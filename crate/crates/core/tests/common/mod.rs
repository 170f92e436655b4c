#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use clpc::api;
use clpc::config::ServerConfig;
use clpc::providers::{EchoProvider, ProviderDescriptor, ProviderKind, ReverseProvider};
use clpc::{Platform, Provider, ProviderError, ProviderRegistry, ProviderRequest, SystemClock};
use serde_json::{json, Value};
use tempfile::TempDir;
use tokio::sync::{oneshot, Notify};

pub const PROMPTS: [&str; 2] = ["Be brief.", "Answer in plain English."];

/// Config files plus a data directory in a temp dir.
pub struct Fixture {
    pub dir: TempDir,
    pub defaults: PathBuf,
    pub experiments: PathBuf,
    pub data_dir: PathBuf,
}

impl Fixture {
    /// EXP-A allows every mock and carries two system prompts; EXP-B only
    /// allows mock-echo. One remote provider is declared but never allowed.
    pub fn new() -> Self {
        Self::with_listen("127.0.0.1:0")
    }

    pub fn with_listen(listen: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let experiments = dir.path().join("experiments");
        let data_dir = dir.path().join("data");
        fs::create_dir_all(&experiments).unwrap();
        let defaults = dir.path().join("defaults.json");
        let body = json!({
            "default_provider_id": "mock-echo",
            "default_font_size_px": 16,
            "default_line_spacing": 1.4,
            "listen_address": listen,
            "data_dir": data_dir,
            "providers": [{
                "id": "remote-x",
                "base_url": "http://127.0.0.1:9/v1/chat/completions",
                "model_name": "some-model",
                "api_key_env": "CLPC_TEST_REMOTE_X_KEY",
                "timeout_ms": 500
            }],
            "custom_events": [{"type_name": "scroll_depth", "required_payload_keys": ["depth_px"]}]
        });
        fs::write(&defaults, serde_json::to_vec_pretty(&body).unwrap()).unwrap();
        write_experiment(
            &experiments,
            "exp-a.json",
            json!({
                "code": "EXP-A",
                "system_prompts": PROMPTS,
                "allowed_providers": ["mock-echo", "mock-reverse", "mock-gate", "mock-fail"],
                "overrides": {"default_font_size_px": 18}
            }),
        );
        write_experiment(
            &experiments,
            "exp-b.json",
            json!({"code": "EXP-B", "system_prompts": [], "allowed_providers": ["mock-echo"]}),
        );
        Self {
            dir,
            defaults,
            experiments,
            data_dir,
        }
    }

    /// Only the two compiled-in mocks are allowed, so the stock binary
    /// accepts the configuration.
    pub fn stock() -> Self {
        let fx = Self::new();
        write_experiment(
            &fx.experiments,
            "exp-a.json",
            json!({
                "code": "EXP-A",
                "system_prompts": PROMPTS,
                "allowed_providers": ["mock-echo", "mock-reverse"]
            }),
        );
        fx
    }

    pub fn config(&self) -> ServerConfig {
        ServerConfig::load(&self.defaults, &self.experiments, &TEST_PROVIDER_IDS).unwrap()
    }
}

pub fn write_experiment(dir: &Path, name: &str, body: Value) {
    fs::write(dir.join(name), serde_json::to_vec_pretty(&body).unwrap()).unwrap();
}

/// Wraps a provider and records every request it receives.
pub struct Capture<P> {
    inner: P,
    pub requests: Arc<Mutex<Vec<ProviderRequest>>>,
}

#[async_trait]
impl<P: Provider> Provider for Capture<P> {
    async fn generate(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        self.requests.lock().unwrap().push(request.clone());
        self.inner.generate(request).await
    }
}

/// Blocks each generation until released, announcing when it has started.
#[derive(Default)]
pub struct Gate {
    pub entered: Notify,
    pub release: Notify,
}

pub struct GateProvider(pub Arc<Gate>);

#[async_trait]
impl Provider for GateProvider {
    async fn generate(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        self.0.entered.notify_one();
        self.0.release.notified().await;
        Ok(format!(
            "GATE: {}",
            request.last_user_text().unwrap_or_default()
        ))
    }
}

pub struct FailProvider;

#[async_trait]
impl Provider for FailProvider {
    async fn generate(&self, _: &ProviderRequest) -> Result<String, ProviderError> {
        Err(ProviderError::UpstreamError {
            provider_id: "mock-fail".into(),
            message: "status 500: boom".into(),
        })
    }
}

/// Handles to the test providers registered by [`start`].
pub struct Probes {
    pub echo: Arc<Mutex<Vec<ProviderRequest>>>,
    pub reverse: Arc<Mutex<Vec<ProviderRequest>>>,
    pub gate: Arc<Gate>,
}

pub const TEST_PROVIDER_IDS: [&str; 4] = ["mock-echo", "mock-reverse", "mock-gate", "mock-fail"];

pub fn test_registry() -> (ProviderRegistry, Probes) {
    let clock = Arc::new(SystemClock);
    let mut registry = ProviderRegistry::new(clock);
    let echo = Arc::new(Mutex::new(Vec::new()));
    let reverse = Arc::new(Mutex::new(Vec::new()));
    let gate = Arc::new(Gate::default());
    let desc = |id: &str| ProviderDescriptor {
        id: id.into(),
        display_name: id.into(),
        kind: ProviderKind::Builtin,
    };
    registry
        .register_provider(
            desc("mock-echo"),
            Arc::new(Capture {
                inner: EchoProvider,
                requests: echo.clone(),
            }),
        )
        .unwrap();
    registry
        .register_provider(
            desc("mock-reverse"),
            Arc::new(Capture {
                inner: ReverseProvider,
                requests: reverse.clone(),
            }),
        )
        .unwrap();
    registry
        .register_provider(desc("mock-gate"), Arc::new(GateProvider(gate.clone())))
        .unwrap();
    registry
        .register_provider(desc("mock-fail"), Arc::new(FailProvider))
        .unwrap();
    (
        registry,
        Probes {
            echo,
            reverse,
            gate,
        },
    )
}

/// An in-process server on an ephemeral port.
pub struct TestServer {
    pub base: String,
    pub platform: Arc<Platform>,
    pub probes: Probes,
    pub client: reqwest::Client,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<tokio::task::JoinHandle<()>>,
}

pub async fn start(fx: &Fixture) -> TestServer {
    let config = fx.config();
    let (mut registry, probes) = test_registry();
    let remote = config.defaults.providers[0].clone();
    registry
        .register_provider(
            ProviderDescriptor {
                id: remote.id.clone(),
                display_name: remote.model_name.clone(),
                kind: ProviderKind::Remote,
            },
            Arc::new(clpc::providers::RemoteProvider::new(remote)),
        )
        .unwrap();
    let platform = Arc::new(Platform::open(config, registry, Arc::new(SystemClock)).unwrap());
    let (listener, addr) = api::bind("127.0.0.1:0").await.unwrap();
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(api::serve(platform.clone(), listener, async {
        let _ = rx.await;
    }));
    TestServer {
        base: format!("http://{addr}"),
        platform,
        probes,
        client: reqwest::Client::new(),
        shutdown: Some(tx),
        task: Some(tokio::spawn(async move {
            task.await.unwrap().unwrap();
        })),
    }
}

pub struct Reply {
    pub status: u16,
    pub body: Value,
}

impl TestServer {
    pub async fn post(&self, path: &str, body: Value) -> Reply {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = resp.status().as_u16();
        let body = resp.json().await.unwrap_or(Value::Null);
        Reply { status, body }
    }

    pub async fn get(&self, path: &str) -> Reply {
        let resp = self
            .client
            .get(format!("{}{path}", self.base))
            .send()
            .await
            .unwrap();
        let status = resp.status().as_u16();
        let body = resp.json().await.unwrap_or(Value::Null);
        Reply { status, body }
    }

    pub async fn login(&self, username: &str, code: &str) -> String {
        let r = self
            .post(
                "/api/session",
                json!({"username": username, "experiment_code": code}),
            )
            .await;
        assert_eq!(r.status, 200, "{}", r.body);
        r.body["session_id"].as_str().unwrap().to_owned()
    }

    pub async fn send(&self, sid: &str, text: &str) -> Reply {
        self.post(
            &format!("/api/session/{sid}/message"),
            json!({ "text": text }),
        )
        .await
    }

    pub async fn switch(&self, sid: &str, provider: &str) -> Reply {
        self.post(
            &format!("/api/session/{sid}/settings"),
            json!({ "provider_id": provider }),
        )
        .await
    }

    pub async fn flag(&self, sid: &str, message_id: &str, flag: &str) -> Reply {
        self.post(
            &format!("/api/session/{sid}/flag"),
            json!({ "message_id": message_id, "flag": flag }),
        )
        .await
    }

    pub async fn events(&self, sid: &str, events: Value) -> Reply {
        self.post(
            &format!("/api/session/{sid}/events"),
            json!({ "events": events }),
        )
        .await
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            task.await.unwrap();
        }
    }
}

/// Every journal line under `data_dir`, parsed without going through the
/// crate's journal reader.
pub fn raw_journal_lines(data_dir: &Path) -> Vec<String> {
    let mut segments: Vec<(i64, PathBuf)> = fs::read_dir(data_dir)
        .unwrap()
        .filter_map(|e| {
            let path = e.unwrap().path();
            let name = path.file_name()?.to_str()?.to_owned();
            let ms = name
                .strip_prefix("events-")?
                .strip_suffix(".jsonl")?
                .parse()
                .ok()?;
            Some((ms, path))
        })
        .collect();
    segments.sort();
    segments
        .into_iter()
        .flat_map(|(_, p)| {
            fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(str::to_owned)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Checks a line's checksum by textual removal of the trailing crc field.
pub fn crc_ok(line: &str) -> bool {
    let Some(idx) = line.rfind(",\"crc32\":") else {
        return false;
    };
    let Some(digits) = line[idx + 9..].strip_suffix('}') else {
        return false;
    };
    let Ok(stored) = digits.parse::<u32>() else {
        return false;
    };
    let canonical = format!("{}}}", &line[..idx]);
    crc32fast::hash(canonical.as_bytes()) == stored
}

pub fn journal_digest(data_dir: &Path) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(data_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    for path in entries {
        hasher.update(path.file_name().unwrap().to_string_lossy().as_bytes());
        hasher.update(fs::read(&path).unwrap());
    }
    hasher.finalize().to_vec()
}

pub fn reverse_chars(s: &str) -> String {
    let mut chars: Vec<char> = s.chars().collect();
    chars.reverse();
    chars.into_iter().collect()
}
