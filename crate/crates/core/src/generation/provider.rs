//! Language-model providers: an HTTP adapter and a fixture-backed mock.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{estimate_tokens, KeyTuple, Prompt};

/// Environment variable holding the bearer token for live requests.
pub const API_KEY_ENV: &str = "HYBRIDQ_API_KEY";

pub const FIXTURE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderMode {
    Live,
    Mock(PathBuf),
}

/// Model endpoint settings plus the batching knobs used during generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub mode: ProviderMode,
    /// Target key tuples per request.
    pub batch_size: usize,
    /// Requests in flight at once.
    pub concurrency: usize,
    pub timeout: Duration,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint: "http://127.0.0.1:8080/v1/complete".into(),
            model_id: "mock".into(),
            temperature: 0.0,
            max_output_tokens: 3000,
            mode: ProviderMode::Mock(PathBuf::new()),
            batch_size: 20,
            concurrency: 4,
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    provider: ProviderDoc,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProviderDoc {
    #[serde(default = "default_mode")]
    mode: String,
    endpoint: Option<String>,
    model_id: Option<String>,
    temperature: Option<f64>,
    max_output_tokens: Option<u32>,
    fixtures: Option<PathBuf>,
    batch_size: Option<usize>,
    concurrency: Option<usize>,
    timeout_secs: Option<u64>,
}

fn default_mode() -> String {
    "mock".into()
}

impl ProviderConfig {
    /// Reads the `[provider]` table of a TOML config file. Relative fixture
    /// paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base, &path.display().to_string())
    }

    pub fn from_toml_str(text: &str, base_dir: &Path, source: &str) -> Result<Self> {
        let doc: ConfigFile = toml::from_str(text).map_err(|e| Error::config(source, e))?;
        let d = doc.provider;
        let defaults = ProviderConfig::default();
        let mode = match d.mode.as_str() {
            "live" => ProviderMode::Live,
            "mock" => ProviderMode::Mock(d.fixtures.map(|f| base_dir.join(f)).unwrap_or_default()),
            other => return Err(Error::config(source, format!("unknown provider mode `{other}`"))),
        };
        let config = ProviderConfig {
            endpoint: d.endpoint.unwrap_or(defaults.endpoint),
            model_id: d.model_id.unwrap_or(defaults.model_id),
            temperature: d.temperature.unwrap_or(defaults.temperature),
            max_output_tokens: d.max_output_tokens.unwrap_or(defaults.max_output_tokens),
            mode,
            batch_size: d.batch_size.unwrap_or(defaults.batch_size),
            concurrency: d.concurrency.unwrap_or(defaults.concurrency),
            timeout: d.timeout_secs.map(Duration::from_secs).unwrap_or(defaults.timeout),
        };
        config.validate().map_err(|m| Error::config(source, m))?;
        Ok(config)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be > 0".into());
        }
        if self.batch_size == 0 || self.concurrency == 0 {
            return Err("batch_size and concurrency must be > 0".into());
        }
        Ok(())
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            ProviderMode::Live => "live",
            ProviderMode::Mock(_) => "mock",
        }
    }

    /// Instantiates the provider this config describes.
    pub fn build(&self) -> Result<Box<dyn Provider>> {
        self.validate().map_err(|m| Error::config("provider config", m))?;
        Ok(match &self.mode {
            ProviderMode::Live => Box::new(LiveProvider::new(self.clone())?),
            ProviderMode::Mock(path) => Box::new(MockProvider::from_path(path, self)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub raw_text: String,
    pub input_tokens_reported: Option<u64>,
    pub output_tokens_reported: Option<u64>,
    /// The completion stopped at the output limit; the caller re-batches.
    pub truncated: bool,
}

pub trait Provider: Send + Sync {
    fn complete(&self, prompt: &Prompt) -> Result<ProviderResponse>;
    fn model_id(&self) -> &str;
}

impl<T: Provider + ?Sized> Provider for Box<T> {
    fn complete(&self, prompt: &Prompt) -> Result<ProviderResponse> {
        (**self).complete(prompt)
    }
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
}

impl<T: Provider + ?Sized> Provider for &T {
    fn complete(&self, prompt: &Prompt) -> Result<ProviderResponse> {
        (**self).complete(prompt)
    }
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
}

/// Sends one prompt with the provider described by `config`.
pub fn invoke_provider(config: &ProviderConfig, prompt: &Prompt) -> Result<ProviderResponse> {
    config.build()?.complete(prompt)
}

/// Counts requests and requested keys passing through a provider.
pub struct MeteredProvider<P> {
    inner: P,
    invocations: AtomicUsize,
    keys: AtomicUsize,
}

impl<P: Provider> MeteredProvider<P> {
    pub fn new(inner: P) -> Self {
        MeteredProvider {
            inner,
            invocations: AtomicUsize::new(0),
            keys: AtomicUsize::new(0),
        }
    }

    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::SeqCst)
    }

    pub fn keys_requested(&self) -> usize {
        self.keys.load(Ordering::SeqCst)
    }
}

impl<P: Provider> Provider for MeteredProvider<P> {
    fn complete(&self, prompt: &Prompt) -> Result<ProviderResponse> {
        self.invocations.fetch_add(1, Ordering::SeqCst);
        self.keys.fetch_add(prompt.targets.len(), Ordering::SeqCst);
        self.inner.complete(prompt)
    }
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
    input: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
    #[serde(default)]
    usage: Option<WireUsage>,
    #[serde(default)]
    truncated: Option<bool>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    input_tokens: Option<u64>,
    output_tokens: Option<u64>,
}

/// JSON-over-HTTP completion endpoint.
///
/// Request body: `{"model", "temperature", "max_tokens", "input"}`.
/// Response body: `{"text", "usage": {"input_tokens", "output_tokens"}}`,
/// optionally with `truncated` or `finish_reason`.
pub struct LiveProvider {
    config: ProviderConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl LiveProvider {
    pub fn new(config: ProviderConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(LiveProvider {
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            config,
            client,
        })
    }
}

impl Provider for LiveProvider {
    fn complete(&self, prompt: &Prompt) -> Result<ProviderResponse> {
        let input = prompt.render();
        let body = WireRequest {
            model: &self.config.model_id,
            temperature: self.config.temperature,
            max_tokens: self.config.max_output_tokens,
            input: &input,
        };
        let mut request = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| Error::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::ProviderStatus {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| Error::Transport(format!("malformed provider response: {e}")))?;
        let (input_tokens, output_tokens) = wire
            .usage
            .map(|u| (u.input_tokens, u.output_tokens))
            .unwrap_or((None, None));
        let truncated = wire.truncated.unwrap_or(false)
            || wire.finish_reason.as_deref() == Some("length")
            || output_tokens.is_some_and(|n| n >= u64::from(self.config.max_output_tokens));
        Ok(ProviderResponse {
            raw_text: wire.text,
            input_tokens_reported: input_tokens,
            output_tokens_reported: output_tokens,
            truncated,
        })
    }

    fn model_id(&self) -> &str {
        &self.config.model_id
    }
}

/// A canned response for a spec, a list of target keys and optionally a
/// specific few-shot count (`k = None` matches any count).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub spec: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub keys: Vec<KeyTuple>,
    pub response: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

type FixtureKey = (String, Option<usize>, Vec<KeyTuple>);

/// Mock responses. Lookup tries the exact target list first; a multi-key
/// prompt with no exact entry is answered by joining single-key entries in
/// target order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureSet {
    entries: Vec<FixtureEntry>,
    index: HashMap<FixtureKey, usize>,
}

#[derive(Serialize, Deserialize)]
struct FixtureDoc {
    format_version: u32,
    entries: Vec<FixtureEntry>,
}

impl FixtureSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry, replacing any entry with the same lookup key.
    pub fn insert(&mut self, entry: FixtureEntry) {
        let key = (entry.spec.to_ascii_lowercase(), entry.k, entry.keys.clone());
        match self.index.get(&key) {
            Some(&i) => self.entries[i] = entry,
            None => {
                self.index.insert(key, self.entries.len());
                self.entries.push(entry);
            }
        }
    }

    pub fn entries(&self) -> &[FixtureEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get(&self, spec: &str, k: usize, keys: &[KeyTuple]) -> Option<&FixtureEntry> {
        let spec = spec.to_ascii_lowercase();
        let keys = keys.to_vec();
        self.index
            .get(&(spec.clone(), Some(k), keys.clone()))
            .or_else(|| self.index.get(&(spec, None, keys)))
            .map(|&i| &self.entries[i])
    }

    /// Returns the response text and whether it is marked truncated.
    pub fn lookup(&self, spec: &str, k: usize, targets: &[KeyTuple]) -> Option<(String, bool)> {
        if let Some(e) = self.get(spec, k, targets) {
            return Some((e.response.clone(), e.truncated));
        }
        if targets.len() < 2 {
            return None;
        }
        let mut lines = Vec::with_capacity(targets.len());
        let mut truncated = false;
        for t in targets {
            let e = self.get(spec, k, std::slice::from_ref(t))?;
            lines.push(e.response.trim_end_matches('\n'));
            truncated |= e.truncated;
        }
        Some((lines.join("\n"), truncated))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: FixtureDoc = serde_json::from_str(text)?;
        if doc.format_version != FIXTURE_FORMAT_VERSION {
            return Err(Error::config(
                "fixtures",
                format!("unsupported format_version {}", doc.format_version),
            ));
        }
        let mut set = FixtureSet::new();
        for e in doc.entries {
            set.insert(e);
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Json(j) => Error::config(path.display().to_string(), j),
            other => other,
        })
    }

    /// Pretty JSON with entries sorted by spec, k and keys.
    pub fn to_json_string(&self) -> String {
        let mut entries = self.entries.clone();
        entries.sort_by(|a, b| (&a.spec, a.k, &a.keys).cmp(&(&b.spec, b.k, &b.keys)));
        let doc = FixtureDoc {
            format_version: FIXTURE_FORMAT_VERSION,
            entries,
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("fixture doc serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

/// Deterministic provider answering from a [`FixtureSet`].
///
/// Token counts are not reported, so cost reports fall back to estimates.
pub struct MockProvider {
    fixtures: FixtureSet,
    model_id: String,
    max_output_tokens: u32,
}

impl MockProvider {
    pub fn new(fixtures: FixtureSet, model_id: impl Into<String>, max_output_tokens: u32) -> Self {
        MockProvider {
            fixtures,
            model_id: model_id.into(),
            max_output_tokens,
        }
    }

    pub fn from_path(path: &Path, config: &ProviderConfig) -> Result<Self> {
        if path.as_os_str().is_empty() {
            return Err(Error::config("provider config", "mock mode needs a fixture file"));
        }
        Ok(Self::new(FixtureSet::load(path)?, config.model_id.clone(), config.max_output_tokens))
    }
}

impl Provider for MockProvider {
    fn complete(&self, prompt: &Prompt) -> Result<ProviderResponse> {
        let (text, marked) = self
            .fixtures
            .lookup(&prompt.spec, prompt.k, &prompt.targets)
            .ok_or_else(|| Error::FixtureMiss {
                spec: prompt.spec.clone(),
                k: prompt.k,
                keys: prompt
                    .targets
                    .iter()
                    .map(|t| format!("({t})"))
                    .collect::<Vec<_>>()
                    .join(" "),
            })?;
        let truncated = marked || estimate_tokens(&text) > self.max_output_tokens as usize;
        Ok(ProviderResponse {
            raw_text: text,
            input_tokens_reported: None,
            output_tokens_reported: None,
            truncated,
        })
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}
