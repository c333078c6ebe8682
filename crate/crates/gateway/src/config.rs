//! Gateway configuration: TOML file, then environment overrides.

use std::net::SocketAddr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_LISTEN: &str = "OTSHADOW_LISTEN";
pub const ENV_HTTP_LISTEN: &str = "OTSHADOW_HTTP_LISTEN";
pub const ENV_PUSH_MS: &str = "OTSHADOW_PUSH_MS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{var}: {message}")]
    Env { var: &'static str, message: String },
    #[error("push interval must be at least 1 ms")]
    PushInterval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    /// NDJSON-over-TCP listener.
    pub listen: SocketAddr,
    /// HTTP bridge for browsers; disabled when absent.
    pub http_listen: Option<SocketAddr>,
    /// Default `metrics_push` interval.
    pub push_interval_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 7400)),
            http_listen: Some(SocketAddr::from(([127, 0, 0, 1], 7401))),
            push_interval_ms: 100,
        }
    }
}

impl GatewayConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: GatewayConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Loads `path` if given, else defaults, then applies the process
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => Self::from_path(p)?,
            None => Self::default(),
        };
        base.with_env(|k| std::env::var(k).ok())
    }

    /// Applies overrides from `lookup`. An empty `OTSHADOW_HTTP_LISTEN`
    /// disables the HTTP bridge.
    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        fn addr(var: &'static str, v: &str) -> Result<SocketAddr, ConfigError> {
            v.parse().map_err(|e: std::net::AddrParseError| ConfigError::Env {
                var,
                message: e.to_string(),
            })
        }
        if let Some(v) = lookup(ENV_LISTEN) {
            self.listen = addr(ENV_LISTEN, &v)?;
        }
        if let Some(v) = lookup(ENV_HTTP_LISTEN) {
            self.http_listen = if v.trim().is_empty() {
                None
            } else {
                Some(addr(ENV_HTTP_LISTEN, &v)?)
            };
        }
        if let Some(v) = lookup(ENV_PUSH_MS) {
            self.push_interval_ms = v
                .trim()
                .parse()
                .map_err(|e: std::num::ParseIntError| ConfigError::Env {
                    var: ENV_PUSH_MS,
                    message: e.to_string(),
                })?;
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.push_interval_ms == 0 {
            return Err(ConfigError::PushInterval);
        }
        Ok(())
    }
}
