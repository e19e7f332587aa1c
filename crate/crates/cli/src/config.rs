//! Run configuration, read from a TOML document.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use sqlprompt_core::content_linker::DEFAULT_MAX_PER_COLUMN;
use sqlprompt_core::llm_gateway::{Gateway, GenerationBackend, ModelArm, RemoteBackend, ScriptedBackend};

pub const DEFAULT_FAN_OUT: usize = 8;
const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Completions replayed from JSON script files.
    Scripted { dir: PathBuf },
    /// Completions requested over HTTP.
    Remote {
        endpoint: String,
        /// Name of the environment variable holding the bearer token.
        #[serde(default)]
        auth_token_env: Option<String>,
        #[serde(default = "default_request_timeout")]
        timeout_secs: f64,
    },
}

fn default_request_timeout() -> f64 {
    60.0
}

fn default_timeout() -> f64 {
    5.0
}

fn default_fan_out() -> usize {
    DEFAULT_FAN_OUT
}

fn default_max_values() -> usize {
    DEFAULT_MAX_PER_COLUMN
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub db_dir: PathBuf,
    pub manifest: PathBuf,
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Per-candidate audit log; defaults to `<output>.audit.jsonl`.
    #[serde(default)]
    pub audit_output: Option<PathBuf>,
    #[serde(default)]
    pub audit: bool,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Per-statement execution timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_fan_out")]
    pub fan_out: usize,
    /// Examples (with gold SQL) that few-shot arms take demonstrations from.
    #[serde(default)]
    pub demo_source: Option<PathBuf>,
    #[serde(default = "default_max_values")]
    pub max_values_per_column: usize,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default)]
    pub arms: Vec<ModelArm>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        config.fill_weights();
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.db_dir);
        fix(&mut self.manifest);
        fix(&mut self.dataset);
        fix(&mut self.output);
        for p in [&mut self.audit_output, &mut self.cache_dir, &mut self.demo_source]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for backend in self.backends.values_mut() {
            if let BackendConfig::Scripted { dir } = backend {
                fix(dir);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            bail!("no arms configured");
        }
        if self.fan_out == 0 {
            bail!("fan_out must be at least 1");
        }
        if !self.timeout_secs.is_finite() || self.timeout_secs <= 0.0 {
            bail!("timeout_secs must be positive");
        }
        if self.max_values_per_column == 0 {
            bail!("max_values_per_column must be at least 1");
        }
        for arm in &self.arms {
            if !self.backends.contains_key(&arm.model_id) {
                bail!("arm {} names model `{}` with no backend configured", arm.descriptor(), arm.model_id);
            }
            if arm.samples == 0 {
                bail!("arm {} has zero samples", arm.descriptor());
            }
            if arm.temperature.is_nan() || arm.temperature < 0.0 {
                bail!("arm {} has a negative temperature", arm.descriptor());
            }
            if arm.shots > 0 && self.demo_source.is_none() {
                bail!("arm {} needs demonstrations but no demo_source is set", arm.descriptor());
            }
        }
        let weights: Vec<f64> = self.arms.iter().filter_map(|a| a.weight).collect();
        if !weights.is_empty() {
            if weights.len() != self.arms.len() {
                bail!("either every arm sets a weight or none does");
            }
            if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && **w <= 1.0)) {
                bail!("arm weight {w} outside (0, 1]");
            }
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
                bail!("arm weights sum to {sum}, expected 1");
            }
        }
        Ok(())
    }

    fn fill_weights(&mut self) {
        let uniform = 1.0 / self.arms.len() as f64;
        for arm in &mut self.arms {
            arm.weight.get_or_insert(uniform);
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn audit_path(&self) -> PathBuf {
        self.audit_output.clone().unwrap_or_else(|| {
            let mut s = self.output.clone().into_os_string();
            s.push(".audit.jsonl");
            PathBuf::from(s)
        })
    }

    /// Gateway with every configured backend registered.
    pub fn gateway(&self) -> Result<Gateway> {
        let mut gateway = match &self.cache_dir {
            Some(dir) => Gateway::with_cache(dir),
            None => Gateway::new(),
        };
        for (model_id, backend) in &self.backends {
            let backend: Arc<dyn GenerationBackend> = match backend {
                BackendConfig::Scripted { dir } => Arc::new(
                    ScriptedBackend::from_dir(dir)
                        .with_context(|| format!("loading scripts for `{model_id}` from {}", dir.display()))?,
                ),
                BackendConfig::Remote {
                    endpoint,
                    auth_token_env,
                    timeout_secs,
                } => Arc::new(RemoteBackend::new(
                    endpoint.clone(),
                    auth_token_env.clone(),
                    Duration::from_secs_f64(*timeout_secs),
                )),
            };
            gateway.register_backend(model_id.clone(), backend)?;
        }
        Ok(gateway)
    }
}
