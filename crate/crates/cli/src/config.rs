//! Layered configuration: command-line flags beat environment variables,
//! which beat the TOML config file, which beats built-in defaults. The
//! API key is read from the environment only.

use anyhow::{bail, Context};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

pub const ENV_API_KEY: &str = "RISKFORGE_API_KEY";
pub const ENV_ENDPOINT: &str = "RISKFORGE_ENDPOINT";
pub const ENV_CONFIG: &str = "RISKFORGE_CONFIG";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    gateway: GatewaySection,
    #[serde(default)]
    embedding: EmbeddingSection,
    #[serde(default)]
    paths: PathsSection,
    #[serde(default)]
    defaults: DefaultsSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GatewaySection {
    endpoint: Option<String>,
    model_strong: Option<String>,
    model_fast: Option<String>,
    max_attempts: Option<u32>,
    backoff_ms: Option<u64>,
    timeout_secs: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingSection {
    provider: Option<String>,
    dim: Option<usize>,
    seed: Option<u64>,
    endpoint: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathsSection {
    registry: Option<PathBuf>,
    index: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DefaultsSection {
    k: Option<usize>,
    max_turns: Option<usize>,
}

#[derive(Debug, Clone)]
pub enum ProviderChoice {
    Hashing { dim: usize, seed: u64 },
    Remote { endpoint: String, dim: usize },
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub models: BTreeMap<String, String>,
    pub max_attempts: u32,
    pub backoff: Duration,
    pub timeout: Duration,
    pub provider: ProviderChoice,
    pub registry: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub k: usize,
    pub max_turns: usize,
}

/// The flag-level overrides that participate in precedence.
#[derive(Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub endpoint: Option<String>,
}

fn parse_file(text: &str) -> anyhow::Result<FileConfig> {
    match toml::from_str(text) {
        Ok(config) => Ok(config),
        Err(e) if e.to_string().contains("api_key") => {
            bail!(
                "config files must not contain an API key; \
                 set the {ENV_API_KEY} environment variable instead"
            )
        }
        Err(e) => Err(e).context("cannot parse config file"),
    }
}

/// Resolve settings from flags, an environment lookup, and the optional
/// config file. `env` is injectable so precedence is testable.
pub fn load(overrides: &Overrides, env: &dyn Fn(&str) -> Option<String>) -> anyhow::Result<Settings> {
    let config_path = overrides
        .config
        .clone()
        .or_else(|| env(ENV_CONFIG).map(PathBuf::from));
    let file = match &config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            parse_file(&text)?
        }
        None => FileConfig::default(),
    };
    let endpoint = overrides
        .endpoint
        .clone()
        .or_else(|| env(ENV_ENDPOINT))
        .or(file.gateway.endpoint);
    let mut models = BTreeMap::new();
    if let Some(name) = file.gateway.model_strong {
        models.insert(riskforge_core::gateway::MODEL_STRONG.to_string(), name);
    }
    if let Some(name) = file.gateway.model_fast {
        models.insert(riskforge_core::gateway::MODEL_FAST.to_string(), name);
    }
    let dim = file
        .embedding
        .dim
        .unwrap_or(riskforge_core::retrieval::HashingProvider::DEFAULT_DIM);
    let provider = match file.embedding.provider.as_deref() {
        None | Some("hashing") => ProviderChoice::Hashing {
            dim,
            seed: file.embedding.seed.unwrap_or(0),
        },
        Some("remote") => {
            let Some(endpoint) = file.embedding.endpoint.clone() else {
                bail!("embedding.provider = \"remote\" needs embedding.endpoint");
            };
            ProviderChoice::Remote { endpoint, dim }
        }
        Some(other) => bail!("unknown embedding provider `{other}` (hashing or remote)"),
    };
    Ok(Settings {
        endpoint,
        api_key: env(ENV_API_KEY).filter(|k| !k.is_empty()),
        models,
        max_attempts: file.gateway.max_attempts.unwrap_or(5),
        backoff: Duration::from_millis(file.gateway.backoff_ms.unwrap_or(1000)),
        timeout: Duration::from_secs(file.gateway.timeout_secs.unwrap_or(60)),
        provider,
        registry: file.paths.registry,
        index: file.paths.index,
        checkpoint: file.paths.checkpoint,
        k: file.defaults.k.unwrap_or(riskforge_core::retrieval::DEFAULT_K),
        max_turns: file
            .defaults
            .max_turns
            .unwrap_or(riskforge_core::agent::DEFAULT_MAX_TURNS),
    })
}
