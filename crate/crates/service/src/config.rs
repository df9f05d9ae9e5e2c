//! Service configuration: TOML file, then `QBE_*` environment overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Directory written by `build-index`.
    pub index_dir: PathBuf,
    /// Where item audio lives; defaults to the root recorded in the index.
    pub corpus_root: Option<PathBuf>,
    /// Concurrent feature extractions for uploaded queries.
    pub workers: usize,
    /// Uploads longer than this are refused with 413.
    pub max_audio_seconds: f64,
    pub default_k: usize,
    /// Allowed CORS origin; `*` allows any.
    pub cors_origin: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            index_dir: PathBuf::from("index"),
            corpus_root: None,
            workers: 2,
            max_audio_seconds: 30.0,
            default_k: 5,
            cors_origin: "*".into(),
        }
    }
}

/// Environment variables consulted by [`ServiceConfig::apply_env`].
pub const ENV_VARS: [&str; 8] = [
    "QBE_HOST",
    "QBE_PORT",
    "QBE_INDEX_DIR",
    "QBE_CORPUS_ROOT",
    "QBE_WORKERS",
    "QBE_MAX_AUDIO_SECONDS",
    "QBE_DEFAULT_K",
    "QBE_CORS_ORIGIN",
];

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing service config")
    }

    /// Reads `path` if given, then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text)?
            }
            None => ServiceConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides fields from `lookup` (normally the process environment).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        let parse = |key: &str, v: &str| -> Result<f64> {
            v.parse::<f64>().with_context(|| format!("{key}={v:?} is not a number"))
        };
        if let Some(v) = lookup("QBE_HOST") {
            self.host = v;
        }
        if let Some(v) = lookup("QBE_PORT") {
            self.port = v.parse().with_context(|| format!("QBE_PORT={v:?}"))?;
        }
        if let Some(v) = lookup("QBE_INDEX_DIR") {
            self.index_dir = v.into();
        }
        if let Some(v) = lookup("QBE_CORPUS_ROOT") {
            self.corpus_root = Some(v.into());
        }
        if let Some(v) = lookup("QBE_WORKERS") {
            self.workers = v.parse().with_context(|| format!("QBE_WORKERS={v:?}"))?;
        }
        if let Some(v) = lookup("QBE_MAX_AUDIO_SECONDS") {
            self.max_audio_seconds = parse("QBE_MAX_AUDIO_SECONDS", &v)?;
        }
        if let Some(v) = lookup("QBE_DEFAULT_K") {
            self.default_k = v.parse().with_context(|| format!("QBE_DEFAULT_K={v:?}"))?;
        }
        if let Some(v) = lookup("QBE_CORS_ORIGIN") {
            self.cors_origin = v;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        anyhow::ensure!(self.workers >= 1, "workers must be at least 1");
        anyhow::ensure!(self.default_k >= 1, "default_k must be at least 1");
        anyhow::ensure!(
            self.max_audio_seconds.is_finite() && self.max_audio_seconds > 0.0,
            "max_audio_seconds must be positive"
        );
        Ok(())
    }

    /// Request body cap: the audio limit at 96 kHz stereo 32-bit, plus slack
    /// for multipart framing.
    pub fn max_body_bytes(&self) -> usize {
        (self.max_audio_seconds * 96_000.0 * 2.0 * 4.0) as usize + (1 << 16)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn toml_with_defaults() {
        let cfg = ServiceConfig::from_toml("port = 9000\nindex_dir = \"/srv/idx\"\n").unwrap();
        assert_eq!(cfg.port, 9000);
        assert_eq!(cfg.index_dir, PathBuf::from("/srv/idx"));
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.max_audio_seconds, 30.0);
        assert!(ServiceConfig::from_toml("port = \"x\"").is_err());
    }

    #[test]
    fn env_overrides_file() {
        let env: HashMap<&str, &str> = [("QBE_PORT", "7001"), ("QBE_WORKERS", "4"), ("QBE_MAX_AUDIO_SECONDS", "2.5")]
            .into_iter()
            .collect();
        let mut cfg = ServiceConfig::from_toml("port = 9000").unwrap();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.port, 7001);
        assert_eq!(cfg.workers, 4);
        assert_eq!(cfg.max_audio_seconds, 2.5);
        let bad: HashMap<&str, &str> = [("QBE_PORT", "seventy")].into_iter().collect();
        assert!(cfg.apply_env(|k| bad.get(k).map(|v| v.to_string())).is_err());
    }

    #[test]
    fn validation() {
        let cfg = ServiceConfig {
            workers: 0,
            ..ServiceConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ServiceConfig::default().validate().is_ok());
    }
}
