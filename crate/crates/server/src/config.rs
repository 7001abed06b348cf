use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub port: u16,
    pub cache_bytes: u64,
    /// Model new sessions start with.
    pub backend: String,
    /// Precompute pool size. The interactive lane is one extra thread.
    pub workers: usize,
    /// Websocket/HTTP gateway port; 0 disables the gateway.
    pub gateway_port: u16,
    pub static_dir: Option<PathBuf>,
    pub worker_timeout_ms: u64,
    /// Minimum spacing of unsolicited PRECOMPUTE_STATUS events.
    pub status_interval_ms: u64,
}

pub const DEFAULT_PORT: u16 = 8942;
pub const DEFAULT_GATEWAY_PORT: u16 = 8943;

pub fn default_workers() -> usize {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    cores.saturating_sub(1).max(1)
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            cache_bytes: 2 << 30,
            backend: volseg_core::backend::REFERENCE_MODEL_ID.into(),
            workers: default_workers(),
            gateway_port: DEFAULT_GATEWAY_PORT,
            static_dir: None,
            worker_timeout_ms: 30_000,
            status_interval_ms: 100,
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: ServerConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_owned(), e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.port == 0 {
            return Err(ConfigError::Invalid("port must be in 1..=65535".into()));
        }
        if self.cache_bytes == 0 {
            return Err(ConfigError::Invalid("cache_bytes must be > 0".into()));
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be >= 1".into()));
        }
        if self.backend.is_empty() {
            return Err(ConfigError::Invalid("backend must name a model".into()));
        }
        if self.gateway_port != 0 && self.gateway_port == self.port {
            return Err(ConfigError::Invalid("gateway_port must differ from port".into()));
        }
        Ok(())
    }

    pub fn worker_timeout(&self) -> Duration {
        Duration::from_millis(self.worker_timeout_ms)
    }

    pub fn status_interval(&self) -> Duration {
        Duration::from_millis(self.status_interval_ms)
    }
}
