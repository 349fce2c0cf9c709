//! Provider and service settings, read from `VIPERA_*` environment variables.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_MAX_RETRIES: u32 = 1;
pub const DEFAULT_PARALLELISM: usize = 4;
pub const DEFAULT_DATA_DIR: &str = "vipera-data";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{0} provider is in remote mode but has no endpoint URL")]
    MissingEndpoint(Role),
    #[error("invalid value {value:?} for {key}")]
    InvalidValue { key: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    T2i,
    Vlm,
    Llm,
}

impl Role {
    fn env_prefix(self) -> &'static str {
        match self {
            Role::T2i => "VIPERA_T2I",
            Role::Vlm => "VIPERA_VLM",
            Role::Llm => "VIPERA_LLM",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::T2i => "t2i",
            Role::Vlm => "vlm",
            Role::Llm => "llm",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    Remote,
    #[default]
    Stub,
}

impl std::str::FromStr for ProviderMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "remote" => Ok(ProviderMode::Remote),
            "stub" => Ok(ProviderMode::Stub),
            _ => Err(ConfigError::InvalidValue {
                key: "VIPERA_PROVIDER_MODE",
                value: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderConfig {
    pub role: Role,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub auth_token: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub mode: ProviderMode,
}

impl ProviderConfig {
    pub fn stub(role: Role) -> Self {
        Self {
            role,
            endpoint_url: None,
            model_name: "stub".into(),
            auth_token: None,
            timeout: DEFAULT_TIMEOUT,
            max_retries: DEFAULT_MAX_RETRIES,
            mode: ProviderMode::Stub,
        }
    }

    pub fn remote(role: Role, endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint_url: Some(endpoint_url.into()),
            model_name: model_name.into(),
            mode: ProviderMode::Remote,
            ..Self::stub(role)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.mode == ProviderMode::Remote && self.endpoint_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
            return Err(ConfigError::MissingEndpoint(self.role));
        }
        Ok(())
    }
}

/// Everything the service needs to start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    pub t2i: ProviderConfig,
    pub vlm: ProviderConfig,
    pub llm: ProviderConfig,
    pub parallelism: usize,
    pub data_dir: PathBuf,
}

impl Default for Settings {
    fn default() -> Self {
        Self::stub(DEFAULT_DATA_DIR)
    }
}

impl Settings {
    pub fn stub(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            t2i: ProviderConfig::stub(Role::T2i),
            vlm: ProviderConfig::stub(Role::Vlm),
            llm: ProviderConfig::stub(Role::Llm),
            parallelism: DEFAULT_PARALLELISM,
            data_dir: data_dir.into(),
        }
    }

    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_lookup(|key| std::env::var(key).ok())
    }

    /// Builds settings from an arbitrary variable lookup.
    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mode = lookup("VIPERA_PROVIDER_MODE")
            .map(|m| m.parse())
            .transpose()?
            .unwrap_or_default();
        let token = lookup("VIPERA_API_TOKEN").filter(|t| !t.is_empty());
        let provider = |role: Role| {
            let prefix = role.env_prefix();
            ProviderConfig {
                role,
                endpoint_url: lookup(&format!("{prefix}_URL")).filter(|u| !u.is_empty()),
                model_name: lookup(&format!("{prefix}_MODEL")).unwrap_or_else(|| "default".into()),
                auth_token: token.clone(),
                timeout: DEFAULT_TIMEOUT,
                max_retries: DEFAULT_MAX_RETRIES,
                mode,
            }
        };
        let parallelism = match lookup("VIPERA_PARALLELISM") {
            None => DEFAULT_PARALLELISM,
            Some(v) => v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&p| p > 0)
                .ok_or(ConfigError::InvalidValue {
                    key: "VIPERA_PARALLELISM",
                    value: v,
                })?,
        };
        let settings = Self {
            t2i: provider(Role::T2i),
            vlm: provider(Role::Vlm),
            llm: provider(Role::Llm),
            parallelism,
            data_dir: lookup("VIPERA_DATA_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR)),
        };
        for p in [&settings.t2i, &settings.vlm, &settings.llm] {
            p.validate()?;
        }
        Ok(settings)
    }
}
