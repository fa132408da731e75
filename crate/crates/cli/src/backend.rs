//! Construction of chat backends and embedding providers from settings,
//! plus the shared registry/index loading every pipeline command needs.

use crate::config::{ProviderChoice, Settings};
use anyhow::{anyhow, Context};
use riskforge_core::agent::Toolbox;
use riskforge_core::gateway::{
    ChatBackend, Recorder, RemoteBackend, RemoteChatConfig, ReplayBackend, Templates,
};
use riskforge_core::model::Registry;
use riskforge_core::retrieval::{
    EmbeddingProvider, HashingProvider, RemoteProvider, VectorIndex,
};
use std::path::{Path, PathBuf};

/// Run `f` against the configured backend: a replay transcript when
/// given, otherwise the remote gateway. `record` wraps either in a
/// transcript recorder.
pub fn with_chat_backend<T>(
    settings: &Settings,
    replay: Option<&Path>,
    record: Option<&Path>,
    f: impl FnOnce(&mut dyn ChatBackend) -> anyhow::Result<T>,
) -> anyhow::Result<T> {
    let mut base: Box<dyn ChatBackend> = match replay {
        Some(path) => Box::new(
            ReplayBackend::load(path)
                .with_context(|| format!("cannot load replay transcript {}", path.display()))?,
        ),
        None => Box::new(RemoteBackend::new(remote_config(settings)?)?),
    };
    match record {
        Some(path) => {
            let mut recorder = Recorder::new(base.as_mut());
            let result = f(&mut recorder)?;
            recorder.save(path)?;
            Ok(result)
        }
        None => f(base.as_mut()),
    }
}

fn remote_config(settings: &Settings) -> anyhow::Result<RemoteChatConfig> {
    let endpoint = settings.endpoint.as_deref().ok_or_else(|| {
        anyhow!(
            "no gateway endpoint configured; pass --endpoint, set RISKFORGE_ENDPOINT, \
             or add gateway.endpoint to the config file"
        )
    })?;
    let mut config = RemoteChatConfig::new(endpoint);
    config.api_key = settings.api_key.clone();
    config.models = settings.models.clone();
    config.max_attempts = settings.max_attempts;
    config.backoff_base = settings.backoff;
    config.timeout = settings.timeout;
    Ok(config)
}

pub fn build_provider(settings: &Settings) -> Box<dyn EmbeddingProvider> {
    match &settings.provider {
        ProviderChoice::Hashing { dim, seed } => Box::new(HashingProvider::new(*dim, *seed)),
        ProviderChoice::Remote { endpoint, dim } => Box::new(RemoteProvider::new(
            endpoint.clone(),
            *dim,
            settings.api_key.clone(),
        )),
    }
}

/// Everything a pipeline command needs, loaded and cross-checked.
pub struct Stack {
    pub registry: Registry,
    pub index: VectorIndex,
    pub provider: Box<dyn EmbeddingProvider>,
    pub templates: Templates,
}

pub fn resolve_path(
    flag: Option<PathBuf>,
    fallback: &Option<PathBuf>,
    what: &str,
    hint: &str,
) -> anyhow::Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| anyhow!("no {what} path given; pass {hint} or set it in the config file"))
}

impl Stack {
    pub fn load(
        registry_dir: &Path,
        index_path: &Path,
        settings: &Settings,
    ) -> anyhow::Result<Stack> {
        let registry = Registry::load_dir(registry_dir)
            .with_context(|| format!("cannot load registry {}", registry_dir.display()))?;
        let index = VectorIndex::load(index_path)
            .with_context(|| format!("cannot load index {}", index_path.display()))?;
        let provider = build_provider(settings);
        if provider.dim() != index.dim() {
            anyhow::bail!(
                "embedding provider dimension {} does not match index dimension {}",
                provider.dim(),
                index.dim()
            );
        }
        Ok(Stack {
            registry,
            index,
            provider,
            templates: Templates::builtin(),
        })
    }

    pub fn toolbox(&self) -> Toolbox<'_> {
        Toolbox {
            registry: &self.registry,
            index: &self.index,
            provider: self.provider.as_ref(),
            templates: &self.templates,
        }
    }
}
