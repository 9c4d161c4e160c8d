//! Job configuration: a single TOML file describing backends, filters,
//! limits, pools, and per-stage targets. Unknown keys are rejected so typos
//! fail loudly instead of silently using defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assemble::ImageSettings;
use crate::backend::BackendPolicy;
use crate::dialogue::DialogueLimits;
use crate::prompt::FilterConfig;

use super::JobError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

/// One backend endpoint. API keys are never stored here: `api_key_env` names
/// the environment variable holding the secret.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub policy: BackendPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: None,
            model: None,
            api_key_env: None,
            policy: BackendPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsConfig {
    pub chat: BackendConfig,
    pub t2i: BackendConfig,
    pub judge: BackendConfig,
}

/// In-context example pool sizing and rotation cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub capacity: usize,
    pub rotation_interval: u32,
    pub rotation_fraction: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { capacity: 8, rotation_interval: 5, rotation_fraction: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    /// Prompts requested per chat call.
    pub prompts_per_call: usize,
    /// Keywords generated when an ability ships without a keyword pool.
    pub keyword_pool_size: usize,
    /// Questions generated when an ability ships without a question pool.
    pub question_pool_size: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { prompts_per_call: 20, keyword_pool_size: 30, question_pool_size: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Target {
    pub ability: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairTargets {
    pub similarity: u64,
    pub difference: u64,
    pub logical_relation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    /// Ability spec whose instructions drive pair and interleaved generation.
    pub source_ability: String,
    #[serde(default)]
    pub pairs: PairTargets,
    #[serde(default)]
    pub interleaved: u64,
    #[serde(default = "default_phases")]
    pub interleaved_phases: usize,
    #[serde(default = "default_domain")]
    pub interleaved_domain: String,
}

fn default_phases() -> usize {
    3
}

fn default_domain() -> String {
    "preparing a simple meal".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub job_id: String,
    pub seed: u64,
    pub abilities_dir: PathBuf,
    pub templates_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub limits: DialogueLimits,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub image: ImageSettings,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub stage1: Vec<Stage1Target>,
    #[serde(default)]
    pub stage2: Option<Stage2Config>,
}

impl JobConfig {
    /// Parses a TOML config. Relative paths are resolved against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, JobError> {
        let text = std::fs::read_to_string(path)?;
        let mut config: JobConfig =
            toml::from_str(&text).map_err(|e| JobError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut config.abilities_dir, &mut config.templates_dir, &mut config.output_dir] {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), JobError> {
        let err = |detail: String| Err(JobError::Config(detail));
        if self.job_id.is_empty() {
            return err("job_id must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.pool.rotation_fraction) {
            return err(format!(
                "pool.rotation_fraction must be in [0, 1], got {}",
                self.pool.rotation_fraction
            ));
        }
        if self.pool.capacity == 0 {
            return err("pool.capacity must be positive".into());
        }
        if self.generation.prompts_per_call == 0 {
            return err("generation.prompts_per_call must be positive".into());
        }
        if self.image.width == 0 || self.image.height == 0 {
            return err("image dimensions must be positive".into());
        }
        self.filter.validate().map_err(JobError::Config)?;
        self.limits.validate().map_err(JobError::Config)?;
        for backend in [&self.backends.chat, &self.backends.t2i, &self.backends.judge] {
            backend.policy.validate().map_err(JobError::Config)?;
            if backend.kind == BackendKind::Http && backend.endpoint.is_none() {
                return err("http backends require an endpoint".into());
            }
        }
        for target in &self.stage1 {
            if target.ability.is_empty() {
                return err("stage1 targets need an ability id".into());
            }
        }
        if let Some(stage2) = &self.stage2 {
            if stage2.interleaved > 0 && stage2.interleaved_phases == 0 {
                return err("stage2.interleaved_phases must be positive".into());
            }
        }
        Ok(())
    }

    /// Stable hash of the resolved configuration, stored in manifests so a
    /// resume under a different config is refused.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
