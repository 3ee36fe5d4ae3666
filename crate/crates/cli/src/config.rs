//! Run configuration: one TOML document with optional sections for the
//! environment, network, optimizer, and reward, plus the run seed and
//! output directory. Every field has a documented default; unknown keys are
//! rejected so typos fail loudly instead of silently using defaults.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use voctl_core::env::EnvConfig;
use voctl_core::nn::NetConfig;
use voctl_core::ppo::PpoConfig;
use voctl_core::reward::RewardConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// The full description of one training/evaluation run.
///
/// The `[reward]` section is authoritative for the reward everywhere; the
/// environment's embedded reward config is always overwritten by it, and a
/// `reward` key inside `[env]` is rejected to keep a single source of truth.
/// Likewise the run `seed` may only be set at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: environments, parameter init, and samplers derive from it.
    pub seed: u64,
    /// Directory all artifacts are written into.
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub net: NetConfig,
    pub ppo: PpoConfig,
    pub reward: RewardConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            env: EnvConfig::default(),
            net: NetConfig::default(),
            ppo: PpoConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        // Structural guardrails first: the reward lives in its own section
        // and the seed at the top level only.
        let value: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(env) = value.get("env").and_then(|v| v.as_table()) {
            if env.contains_key("reward") {
                return Err(ConfigError::Parse(
                    "env.reward is not settable; use the top-level [reward] section".into(),
                ));
            }
            if env.contains_key("seed") {
                return Err(ConfigError::Parse(
                    "env.seed is not settable; use the top-level seed".into(),
                ));
            }
        }
        let config: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.effective_env()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.net.validate().map_err(|e| invalid(e.to_string()))?;
        self.ppo.validate().map_err(|e| invalid(e.to_string()))?;
        self.reward.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    /// Environment config with the authoritative reward and seed injected.
    pub fn effective_env(&self) -> EnvConfig {
        let mut env = self.env.clone();
        env.reward = self.reward.clone();
        env.seed = self.seed;
        env
    }

    /// Canonical TOML snapshot of the effective configuration.
    ///
    /// Records the experiment, not the destination: `output_dir` is omitted
    /// (the snapshot lives inside it), so runs that differ only in output
    /// location share a `hash()`.
    pub fn snapshot_toml(&self) -> String {
        let mut value = toml::Value::try_from(self).expect("config serialization cannot fail");
        if let Some(table) = value.as_table_mut() {
            table.remove("output_dir");
        }
        // `env.reward` and `env.seed` are not settable — the top-level
        // `[reward]` section and `seed` are authoritative — so the snapshot
        // omits them too, keeping it parseable by the same rules.
        if let Some(env) = value.get_mut("env").and_then(|v| v.as_table_mut()) {
            env.remove("reward");
            env.remove("seed");
        }
        toml::to_string_pretty(&value).expect("config serialization cannot fail")
    }

    /// SHA-256 of the canonical snapshot, lowercase hex. Identifies the
    /// exact configuration in every artifact.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.snapshot_toml().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.snapshot_toml();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
seed = 42
[ppo]
learning_rate = 0.01
[env]
episode_length = 100
[reward]
lambda2 = 0.0075
"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.ppo.learning_rate, 0.01);
        assert_eq!(cfg.ppo.gamma, PpoConfig::default().gamma);
        assert_eq!(cfg.env.episode_length, 100);
        assert_eq!(cfg.reward.lambda2, 0.0075);
        // The effective env carries the top-level reward and seed.
        let env = cfg.effective_env();
        assert_eq!(env.reward.lambda2, 0.0075);
        assert_eq!(env.seed, 42);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for doc in [
            "sead = 3",
            "[ppo]\nlearnig_rate = 0.1",
            "[env]\nepisode_len = 7",
            "[reward]\nlambda3 = 1.0",
            "[network]\ntoken_count = 2",
        ] {
            let err = RunConfig::from_toml_str(doc).unwrap_err();
            assert!(
                matches!(err, ConfigError::Parse(_)),
                "{doc:?} gave {err:?}"
            );
        }
    }

    #[test]
    fn env_reward_and_env_seed_are_rejected() {
        let err = RunConfig::from_toml_str("[env.reward]\nlambda1 = 0.5").unwrap_err();
        assert!(err.to_string().contains("[reward]"), "{err}");
        let err = RunConfig::from_toml_str("[env]\nseed = 9").unwrap_err();
        assert!(err.to_string().contains("top-level seed"), "{err}");
    }

    #[test]
    fn invalid_values_fail_validation() {
        let err = RunConfig::from_toml_str("[ppo]\ngamma = 0.0").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err:?}");
        let err = RunConfig::from_toml_str("[reward]\nlambda1 = -1.0").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err:?}");
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.ppo.learning_rate *= 2.0;
        assert_ne!(a.hash(), c.hash());
    }
}
