//! Plain-text `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ltgbert::model::ModelConfig;
use ltgbert::objectives::MaskingConfig;
use ltgbert::training::PretrainConfig;
use thiserror::Error;

/// Keys naming files or directories; kept verbatim.
pub const PATH_KEYS: &[&str] = &[
    "train_data",
    "dev_data",
    "vocab_path",
    "checkpoint_path",
    "out_dir",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("`{key}`: {msg}")]
    Value { key: String, msg: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    /// Also carries the schedule and the seed.
    pub pretrain: PretrainConfig,
    pub paths: BTreeMap<String, String>,
    /// Keys set explicitly by the file or overrides.
    pub explicit: Vec<String>,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if config.explicit.iter().any(|k| k == key) {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: key.into(),
                });
            }
            config.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                other => other,
            })?;
        }
        Ok(config)
    }

    /// Sets one key; later calls override earlier ones.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value_error = |msg: String| ConfigError::Value {
            key: key.into(),
            msg,
        };
        let known = if PATH_KEYS.contains(&key) {
            self.paths.insert(key.into(), value.into());
            true
        } else {
            self.model
                .set(key, value)
                .map_err(|e| value_error(e.to_string()))?
                || self
                    .masking
                    .set(key, value)
                    .map_err(|e| value_error(e.to_string()))?
                || self
                    .pretrain
                    .set(key, value)
                    .map_err(|e| value_error(e.to_string()))?
        };
        if !known {
            return Err(ConfigError::UnknownKey {
                line: 0,
                key: key.into(),
            });
        }
        if !self.explicit.iter().any(|k| k == key) {
            self.explicit.push(key.into());
        }
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }

    pub fn path(&self, key: &str) -> Option<&str> {
        self.paths.get(key).map(String::as_str)
    }

    /// Every key with its resolved value, in a fixed order; parseable by
    /// [`RunConfig::parse`].
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        let pairs = self
            .model
            .to_pairs()
            .into_iter()
            .chain(self.masking.to_pairs())
            .chain(self.pretrain.to_pairs());
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (k, v) in &self.paths {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
