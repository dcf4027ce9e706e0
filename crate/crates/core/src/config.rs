//! Engine configuration and the backend/scorer wiring built from it.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{
    Backend, BackendError, HttpBackend, LmClient, RecordingBackend, ReplayBackend, ScoreCache,
    SyntheticBackend,
};
use crate::covariate::SamplerConfig;
use crate::estimator::{EstimatorError, MatchConfig};
use crate::intervention::InterventionConfig;
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::task::{ClmPerplexityScorer, ClozeScorer, ColaScorer, PairScorer, RandomScorer};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("replay mode needs an existing fixture store at {0}")]
    MissingFixtureStore(PathBuf),
    #[error("cannot open response store at {path}: {source}")]
    Store {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid match settings: {0}")]
    Match(#[from] EstimatorError),
    #[error("parallelism pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    /// Every call goes upstream; nothing is stored.
    Live,
    /// Read through the store; misses go upstream and are stored.
    Record,
    /// Only the store; a miss is an error.
    #[default]
    Replay,
}

/// Where live and record modes send requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upstream {
    #[default]
    Http,
    /// Deterministic in-process toy model, for offline demos and fixtures.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelIds {
    /// Masked LM with the before/after/[none] head.
    pub temporal: String,
    /// Causal LM for the perplexity baseline.
    pub clm: String,
    /// Masked LM for the cloze baseline.
    pub mlm: String,
}

impl Default for ModelIds {
    fn default() -> Self {
        ModelIds {
            temporal: "roberta-large-temporal".into(),
            clm: "gpt2-xl".into(),
            mlm: "roberta-large".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub mode: BackendMode,
    pub upstream: Upstream,
    pub base_url: String,
    pub timeout_secs: u64,
    pub models: ModelIds,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            mode: BackendMode::Replay,
            upstream: Upstream::Http,
            base_url: "http://127.0.0.1:8080".into(),
            timeout_secs: 120,
            models: ModelIds::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Cola,
    Clm,
    Cloze,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub parallelism: usize,
    pub cache_dir: PathBuf,
    pub scorer: ScorerKind,
    pub backend: BackendConfig,
    pub sampler: SamplerConfig,
    pub interventions: InterventionConfig,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 0,
            parallelism: 0,
            cache_dir: PathBuf::from(".cola-cache"),
            scorer: ScorerKind::Cola,
            backend: BackendConfig::default(),
            sampler: SamplerConfig::default(),
            interventions: InterventionConfig::default(),
            matching: MatchConfig::default(),
        }
    }
}

impl EngineConfig {
    /// Push engine-wide settings into the component configs.
    pub fn resolved(mut self) -> Self {
        self.sampler.seed = self.seed;
        self.interventions.seed = self.seed;
        self
    }

    pub fn snapshot(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            temporal_model: self.backend.models.temporal.clone(),
            sampler: self.sampler.clone(),
            interventions: self.interventions.clone(),
            matching: self.matching.clone(),
        }
    }
}

fn upstream(config: &BackendConfig) -> Result<Arc<dyn Backend>, BackendError> {
    Ok(match config.upstream {
        Upstream::Http => {
            Arc::new(HttpBackend::new(config.base_url.clone(), Duration::from_secs(config.timeout_secs))?)
        }
        Upstream::Synthetic => Arc::new(SyntheticBackend),
    })
}

fn open_store(dir: &Path) -> Result<Arc<ScoreCache>, ConfigError> {
    ScoreCache::open(dir).map(Arc::new).map_err(|source| ConfigError::Store { path: dir.to_owned(), source })
}

/// A configured backend plus everything built on it.
pub struct Engine {
    config: EngineConfig,
    client: LmClient,
    store: Option<Arc<ScoreCache>>,
    pool: rayon::ThreadPool,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, ConfigError> {
        let config = config.resolved();
        config.matching.validate()?;
        let (backend, store): (Arc<dyn Backend>, _) = match config.backend.mode {
            BackendMode::Live => (upstream(&config.backend)?, None),
            BackendMode::Record => {
                let store = open_store(&config.cache_dir)?;
                let inner = upstream(&config.backend)?;
                (Arc::new(RecordingBackend::new(inner, store.clone())), Some(store))
            }
            BackendMode::Replay => {
                if !ScoreCache::exists(&config.cache_dir) {
                    return Err(ConfigError::MissingFixtureStore(config.cache_dir.clone()));
                }
                let store = open_store(&config.cache_dir)?;
                (Arc::new(ReplayBackend::new(store.clone())), Some(store))
            }
        };
        Self::with_backend(config, backend, store)
    }

    /// Build around an explicit backend, bypassing the configured mode.
    pub fn with_backend(
        config: EngineConfig,
        backend: Arc<dyn Backend>,
        store: Option<Arc<ScoreCache>>,
    ) -> Result<Self, ConfigError> {
        let config = config.resolved();
        config.matching.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| ConfigError::ThreadPool(e.to_string()))?;
        Ok(Engine { config, client: LmClient::new(backend), store, pool })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn client(&self) -> &LmClient {
        &self.client
    }

    pub fn store(&self) -> Option<&Arc<ScoreCache>> {
        self.store.as_ref()
    }

    pub fn pipeline(&self) -> Result<Pipeline, ConfigError> {
        Ok(Pipeline::new(self.client.clone(), self.config.pipeline_config())?)
    }

    pub fn scorer(&self, kind: ScorerKind) -> Result<Box<dyn PairScorer>, ConfigError> {
        let models = &self.config.backend.models;
        Ok(match kind {
            ScorerKind::Cola => Box::new(ColaScorer { pipeline: self.pipeline()? }),
            ScorerKind::Clm => {
                Box::new(ClmPerplexityScorer { client: self.client.clone(), model: models.clm.clone() })
            }
            ScorerKind::Cloze => {
                Box::new(ClozeScorer { client: self.client.clone(), model: models.mlm.clone() })
            }
            ScorerKind::Random => Box::new(RandomScorer { seed: self.config.seed }),
        })
    }

    /// Run `f` on the engine's worker pool.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_propagated() {
        let cfg = EngineConfig { seed: 9, ..Default::default() }.resolved();
        assert_eq!((cfg.sampler.seed, cfg.interventions.seed), (9, 9));
    }

    #[test]
    fn snapshot_has_every_section() {
        let snap = EngineConfig::default().snapshot();
        for key in
            ["seed", "parallelism", "cache_dir", "scorer", "backend", "sampler", "interventions", "match"]
        {
            assert!(snap.get(key).is_some(), "{key}");
        }
        assert_eq!(snap["backend"]["mode"], "replay");
        assert_eq!(snap["interventions"]["codes"].as_array().unwrap().len(), 6);
    }

    #[test]
    fn replay_without_store_fails() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EngineConfig { cache_dir: dir.path().join("nope"), ..Default::default() };
        assert!(matches!(Engine::new(cfg), Err(ConfigError::MissingFixtureStore(_))));
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = EngineConfig { cache_dir: dir.path().to_owned(), ..Default::default() };
        cfg.backend.mode = BackendMode::Record;
        cfg.backend.upstream = Upstream::Synthetic;
        let rec = Engine::new(cfg.clone()).unwrap();
        let a = rec.client().pseudo_loglik("A b c.", "m").unwrap();
        drop(rec);
        cfg.backend.mode = BackendMode::Replay;
        let rep = Engine::new(cfg).unwrap();
        assert_eq!(rep.client().pseudo_loglik("A b c.", "m").unwrap(), a);
        assert!(matches!(rep.client().pseudo_loglik("Other.", "m"), Err(BackendError::FixtureMiss { .. })));
    }

    #[test]
    fn incompatible_match_settings() {
        let mut cfg = EngineConfig::default();
        cfg.backend.mode = BackendMode::Live;
        cfg.matching.normalizations = [crate::Normalization::C, crate::Normalization::E].into();
        assert!(matches!(Engine::new(cfg), Err(ConfigError::Match(_))));
    }
}
