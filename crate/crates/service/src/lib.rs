//! HTTP backend for the grading web application: prediction with Integrated
//! Gradients overlays, a checkpoint registry with atomic activation, and an
//! append-only clinician feedback log.
//!
//! | Method | Path | Notes |
//! |---|---|---|
//! | POST | `/api/predict` | multipart `image`; query `ig_steps`, `include_overlay` |
//! | POST | `/api/feedback` | JSON `{request_id, clinician_grade}` → 201 |
//! | GET | `/api/feedback` | query `since_id` |
//! | GET / POST | `/api/models` | bearer token; multipart `model_id` + `checkpoint` |
//! | POST | `/api/models/{id}/activate` | bearer token |
//! | GET | `/api/health` | |
//!
//! Every response carries an `x-request-id` header; JSON object bodies also
//! carry it as `request_id`. Errors are `{"error": {"code", "message"}}`.

mod api;
mod config;
mod feedback;
mod registry;

use std::future::Future;
use std::sync::Arc;

use tokio::net::TcpListener;

pub use api::{router, AppState, PREDICTION_MEMORY};
pub use config::{ServiceConfig, DEFAULT_IG_STEPS, MAX_IG_STEPS};
pub use feedback::{FeedbackDraft, FeedbackRecord, FeedbackStore, NdjsonStore};
pub use registry::{validate_model_id, ModelInfo, Registry};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid checkpoint {path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: drgrade::Error,
    },

    #[error("model id {0:?} already exists")]
    DuplicateModel(String),

    #[error("unknown model {0:?}")]
    UnknownModel(String),

    #[error("invalid model id {0:?}: use 1-64 letters, digits, '-', '_' or '.'")]
    InvalidModelId(String),

    #[error("feedback log: {0}")]
    FeedbackLog(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A configured service: registry and feedback log opened, not yet listening.
pub struct Service {
    state: Arc<AppState>,
}

impl Service {
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let registry = Registry::open(&config.model_dir)?;
        let feedback = NdjsonStore::open(&config.feedback_path)?;
        if let Some(dir) = &config.image_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Service {
            state: Arc::new(AppState::new(config, registry, Arc::new(feedback))),
        })
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    /// Serves on `listener` until `shutdown` resolves, lets in-flight
    /// requests finish, then flushes the feedback log.
    pub async fn run(self, listener: TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        let app = router(self.state.clone());
        axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
        self.state
            .feedback
            .flush()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(())
    }
}
