//! Service configuration (TOML) and backend construction.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use loopguard_core::backend::{Backend, LiveConfig, OpenAiCompatClient, ScriptedBackend, SimulatedMllm, SimulatedMllmConfig};
use loopguard_core::planner::PlannerConfig;

pub const DATA_DIR_ENV: &str = "LOOPGUARD_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("backend: {0}")]
    Backend(String),
}

/// Which MLLM answers detection queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Accuracy-profile simulator; only answers simulated observations.
    Simulated(SimulatedMllmConfig),
    /// Rule file as read by `ScriptedBackend::load`.
    Scripted { rules: PathBuf },
    Live(LiveConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Simulated(SimulatedMllmConfig::default())
    }
}

/// Builds backends for episodes. Simulated backends are created per episode
/// with their own seed; scripted and live backends are shared.
pub enum BackendFactory {
    Simulated(SimulatedMllmConfig),
    Shared(Arc<dyn Backend>),
}

impl BackendFactory {
    pub fn for_episode(&self, seed: u64) -> Arc<dyn Backend> {
        match self {
            BackendFactory::Simulated(cfg) => Arc::new(SimulatedMllm::new(SimulatedMllmConfig {
                seed,
                ..cfg.clone()
            })),
            BackendFactory::Shared(b) => b.clone(),
        }
    }

    pub fn health_check(&self) -> Result<(), String> {
        match self {
            BackendFactory::Simulated(_) => Ok(()),
            BackendFactory::Shared(b) => b.health_check().map_err(|e| e.to_string()),
        }
    }
}

impl Drop for BackendFactory {
    fn drop(&mut self) {
        // a blocking HTTP client panics when dropped on an async worker
        if matches!(self, BackendFactory::Shared(_)) && tokio::runtime::Handle::try_current().is_ok() {
            let owned = std::mem::replace(self, BackendFactory::Simulated(SimulatedMllmConfig::default()));
            std::thread::spawn(move || drop(owned));
        }
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<BackendFactory, ConfigError> {
        Ok(match self {
            BackendConfig::Simulated(cfg) => BackendFactory::Simulated(cfg.clone()),
            BackendConfig::Scripted { rules } => BackendFactory::Shared(Arc::new(
                ScriptedBackend::load(rules).map_err(|e| ConfigError::Backend(e.to_string()))?,
            )),
            BackendConfig::Live(cfg) => BackendFactory::Shared(Arc::new(
                OpenAiCompatClient::new(cfg.clone()).map_err(|e| ConfigError::Backend(e.to_string()))?,
            )),
        })
    }
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_task_dir() -> PathBuf {
    PathBuf::from("fixtures/tasks")
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    /// Holds `{id}.json` task specs and `{id}.sim.json` environments.
    #[serde(default = "default_task_dir")]
    pub task_dir: PathBuf,
    /// Episode logs; overridden by `LOOPGUARD_DATA_DIR`.
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    /// Static console bundle served under `/console`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub console_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            backend: BackendConfig::default(),
            planner: PlannerConfig::default(),
            task_dir: default_task_dir(),
            data_dir: default_data_dir(),
            console_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    /// Reads the file, then applies environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            if !dir.is_empty() {
                self.data_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen
            .parse()
            .map_err(|e| ConfigError::Invalid(vec![format!("listen address {:?}: {e}", self.listen)]))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if let Err(ConfigError::Invalid(p)) = self.listen_addr() {
            problems.extend(p);
        }
        if let Err(e) = self.planner.detector.validate() {
            problems.push(e.to_string());
        }
        if std::fs::read_dir(&self.task_dir).is_err() {
            problems.push(format!("task_dir {} is not a readable directory", self.task_dir.display()));
        }
        if let Some(dir) = &self.console_dir {
            if std::fs::read_dir(dir).is_err() {
                problems.push(format!("console_dir {} is not a readable directory", dir.display()));
            }
        }
        if let BackendConfig::Scripted { rules } = &self.backend {
            if !rules.is_file() {
                problems.push(format!("rules file {} not found", rules.display()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }
}
