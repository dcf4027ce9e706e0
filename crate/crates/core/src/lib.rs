//! Causal reasoning over event sequences: covariate sampling, interventions,
//! temporal propensity matching and the evaluation harness around them.

pub mod backend;
pub mod bleu;
pub mod config;
pub mod covariate;
pub mod estimator;
pub mod event;
pub mod intervention;
pub mod pipeline;
pub mod task;
pub mod temporal;

pub use backend::{Backend, BackendError, BackendRequest, BackendResponse, Endpoint, LmClient};
pub use config::{BackendMode, ConfigError, Engine, EngineConfig, ScorerKind, Upstream};
pub use estimator::{CausalEstimate, MatchConfig, Normalization};
pub use event::{DatasetError, Event, EventPair, EventSequence, Split};
pub use pipeline::{PairTrace, Pipeline, PipelineConfig, PipelineError};
pub use task::{MetricsReport, PairScorer, TaskError};
