use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::ServiceError;

pub const DEFAULT_IG_STEPS: usize = 50;

/// Upper bound on `ig_steps`, from the config or a request.
pub const MAX_IG_STEPS: usize = 2000;

/// Service settings, read from a TOML file with optional environment overrides.
///
/// ```toml
/// listen = "127.0.0.1:8080"
/// model_dir = "models"
/// feedback_path = "feedback.ndjson"
/// admin_token = "change-me"
/// ig_steps = 50
/// # image_dir = "uploads"   # keep uploaded images; off by default
/// ```
///
/// Relative paths are resolved against the config file's directory.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub model_dir: PathBuf,
    pub feedback_path: PathBuf,
    pub admin_token: String,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    /// Directory for full uploaded images. Only their hashes are kept when unset.
    #[serde(default)]
    pub image_dir: Option<PathBuf>,
}

fn default_ig_steps() -> usize {
    DEFAULT_IG_STEPS
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_relative_to(base);
        }
        Ok(config)
    }

    fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.model_dir);
        fix(&mut self.feedback_path);
        if let Some(dir) = &mut self.image_dir {
            fix(dir);
        }
    }

    /// Applies `DRGRADE_LISTEN`, `DRGRADE_MODEL_DIR`, `DRGRADE_FEEDBACK_PATH`,
    /// `DRGRADE_ADMIN_TOKEN` and `DRGRADE_IG_STEPS` from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ServiceError> {
        for (key, value) in vars {
            match key.as_str() {
                "DRGRADE_LISTEN" => {
                    self.listen = value
                        .parse()
                        .map_err(|e| ServiceError::Config(format!("DRGRADE_LISTEN: {e}")))?;
                }
                "DRGRADE_MODEL_DIR" => self.model_dir = value.into(),
                "DRGRADE_FEEDBACK_PATH" => self.feedback_path = value.into(),
                "DRGRADE_ADMIN_TOKEN" => self.admin_token = value,
                "DRGRADE_IG_STEPS" => {
                    self.ig_steps = value
                        .parse()
                        .map_err(|e| ServiceError::Config(format!("DRGRADE_IG_STEPS: {e}")))?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if !self.model_dir.is_dir() {
            return Err(ServiceError::Config(format!(
                "model directory {} does not exist",
                self.model_dir.display()
            )));
        }
        if self.admin_token.trim().is_empty() {
            return Err(ServiceError::Config("admin_token must not be empty".into()));
        }
        if !(1..=MAX_IG_STEPS).contains(&self.ig_steps) {
            return Err(ServiceError::Config(format!("ig_steps must be in 1..={MAX_IG_STEPS}")));
        }
        Ok(())
    }
}
