use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use heart2mind_core::contest::LlmEndpointConfig;
use heart2mind_core::sae::SaeConfig;

pub const CONFIG_ENV: &str = "HEART2MIND_CONFIG";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmBackendKind {
    /// Chat-completions endpoint at `llm.base_url`.
    #[default]
    Http,
    /// In-process scripted replies; no network.
    Scripted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub llm_backend: LlmBackendKind,
    pub llm: LlmEndpointConfig,
    pub sae: SaeConfig,
    pub cors_allowlist: Vec<String>,
    /// Windows scored per session; evenly spaced over the recording.
    pub max_windows: usize,
    /// Name of an environment variable holding a static bearer token.
    pub auth_token_env: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("heart2mind-data"),
            checkpoint: PathBuf::from("model.h2m"),
            llm_backend: LlmBackendKind::Http,
            llm: LlmEndpointConfig::default(),
            sae: SaeConfig::default(),
            cors_allowlist: vec!["http://localhost:5173".into()],
            max_windows: 64,
            auth_token_env: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Syntax(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Fields(Vec<String>),
}

impl ServiceConfig {
    /// File at `path` (or `$HEART2MIND_CONFIG`, or built-in defaults), then
    /// environment overrides, then validation.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let path = path.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| ConfigError::Read {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        if let Some(v) = get("HEART2MIND_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = get("HEART2MIND_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = get("HEART2MIND_CHECKPOINT") {
            self.checkpoint = v.into();
        }
        if let Some(v) = get("HEART2MIND_LLM_BACKEND") {
            match v.as_str() {
                "http" => self.llm_backend = LlmBackendKind::Http,
                "scripted" => self.llm_backend = LlmBackendKind::Scripted,
                other => errors.push(format!("llm_backend: unknown backend `{other}` (HEART2MIND_LLM_BACKEND)")),
            }
        }
        if let Some(v) = get("HEART2MIND_LLM_BASE_URL") {
            self.llm.base_url = v;
        }
        if let Some(v) = get("HEART2MIND_LLM_MODEL") {
            self.llm.model_name = v;
        }
        if let Some(v) = get("HEART2MIND_LLM_API_KEY_REF") {
            self.llm.api_key_ref = Some(v);
        }
        if let Some(v) = get("HEART2MIND_CORS_ALLOWLIST") {
            self.cors_allowlist = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Fields(errors))
        }
    }

    /// All problems at once, one `field: message` line each.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut e = Vec::new();
        if self.listen.parse::<std::net::SocketAddr>().is_err() {
            e.push(format!("listen: `{}` is not a socket address", self.listen));
        }
        if self.data_dir.as_os_str().is_empty() {
            e.push("data_dir: must not be empty".into());
        }
        if self.llm.base_url.parse::<reqwest::Url>().is_err() {
            e.push(format!("llm.base_url: `{}` is not a URL", self.llm.base_url));
        }
        if self.llm.model_name.trim().is_empty() {
            e.push("llm.model_name: must not be empty".into());
        }
        if self.llm.max_tokens == 0 {
            e.push("llm.max_tokens: must be positive".into());
        }
        if !(0.0..=2.0).contains(&self.llm.temperature) {
            e.push("llm.temperature: must lie in [0, 2]".into());
        }
        if !(self.llm.top_p > 0.0 && self.llm.top_p <= 1.0) {
            e.push("llm.top_p: must lie in (0, 1]".into());
        }
        if !(self.llm.timeout_s > 0.0) {
            e.push("llm.timeout_s: must be positive".into());
        }
        if self.llm.max_concurrent_requests == 0 {
            e.push("llm.max_concurrent_requests: must be positive".into());
        }
        if !(self.sae.rho > 0.0 && self.sae.rho < 1.0) {
            e.push("sae.rho: must lie in (0, 1)".into());
        }
        if self.max_windows == 0 {
            e.push("max_windows: must be positive".into());
        }
        for origin in &self.cors_allowlist {
            if origin.parse::<axum::http::HeaderValue>().is_err() || !origin.starts_with("http") {
                e.push(format!("cors_allowlist: `{origin}` is not an origin"));
            }
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Fields(e))
        }
    }

    /// SHA-256 of the effective configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
