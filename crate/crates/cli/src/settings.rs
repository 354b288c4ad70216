//! Run settings: defaults, then a `key = value` config file, then flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lrmr_core::evaluation::ThresholdObjective;
use lrmr_core::judge::{BackendConfig, BackendKind};
use lrmr_core::report::ReportMode;
use lrmr_core::simulation::OracleConfig;
use lrmr_core::{Error, Result};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub opponents: usize,
    pub backend: BackendKind,
    pub model: String,
    pub endpoint: Option<String>,
    pub temperature: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub timeout_s: f64,
    pub backoff_base_s: f64,
    pub out: PathBuf,
    pub run_id: String,
    pub cache_dir: Option<PathBuf>,
    pub no_cache: bool,
    pub train_frac: f64,
    pub prompt_mode: ReportMode,
    pub credit_opponent: bool,
    pub invalid_limit: f64,
    pub threshold_objective: ThresholdObjective,
    pub rule_weights: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub tile_px: u32,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let oracle = OracleConfig::default();
        let backend = BackendConfig::default();
        Settings {
            seed: 0,
            opponents: 6,
            backend: backend.kind,
            model: backend.model_id,
            endpoint: None,
            temperature: backend.temperature,
            max_retries: backend.max_retries,
            max_in_flight: backend.max_in_flight,
            timeout_s: backend.timeout_s,
            backoff_base_s: backend.backoff_base_s,
            out: PathBuf::from("out"),
            run_id: "default".into(),
            cache_dir: None,
            no_cache: false,
            train_frac: 0.7,
            prompt_mode: ReportMode::Structured,
            credit_opponent: true,
            invalid_limit: 0.10,
            threshold_objective: ThresholdObjective::F1,
            rule_weights: None,
            prompts_dir: None,
            tile_px: 128,
            beta: oracle.noise_scale,
            epsilon: oracle.comparable_band,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl Settings {
    /// Sets one key; `-` and `_` are interchangeable in key names.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "seed" => self.seed = parse(&key, value)?,
            "opponents" => self.opponents = parse(&key, value)?,
            "backend" => self.backend = value.parse()?,
            "model" => self.model = value.to_string(),
            "endpoint" => self.endpoint = Some(value.to_string()).filter(|v| !v.is_empty()),
            "temperature" => self.temperature = parse(&key, value)?,
            "max_retries" => self.max_retries = parse(&key, value)?,
            "max_in_flight" => self.max_in_flight = parse(&key, value)?,
            "timeout_s" => self.timeout_s = parse(&key, value)?,
            "backoff_base_s" => self.backoff_base_s = parse(&key, value)?,
            "out" => self.out = PathBuf::from(value),
            "run_id" => self.run_id = value.to_string(),
            "cache_dir" => self.cache_dir = Some(PathBuf::from(value)),
            "no_cache" => self.no_cache = parse_bool(&key, value)?,
            "train_frac" => self.train_frac = parse(&key, value)?,
            "prompt_mode" => self.prompt_mode = value.parse()?,
            "credit_opponent" => self.credit_opponent = parse_bool(&key, value)?,
            "invalid_limit" => self.invalid_limit = parse(&key, value)?,
            "threshold_objective" => self.threshold_objective = value.parse()?,
            "rule_weights" => self.rule_weights = Some(PathBuf::from(value)),
            "prompts_dir" => self.prompts_dir = Some(PathBuf::from(value)),
            "tile_px" => self.tile_px = parse(&key, value)?,
            "beta" => self.beta = parse(&key, value)?,
            "epsilon" => self.epsilon = parse(&key, value)?,
            _ => return Err(Error::config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
            self.apply(k, v)
                .map_err(|e| Error::config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::config(format!("run_id {:?} is not a plain directory name", self.run_id)));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::config(format!("train_frac {} must be in (0, 1)", self.train_frac)));
        }
        if !(0.0..=1.0).contains(&self.invalid_limit) {
            return Err(Error::config(format!("invalid_limit {} must be in [0, 1]", self.invalid_limit)));
        }
        if self.opponents == 0 {
            return Err(Error::config("opponents must be >= 1"));
        }
        self.oracle().validate()?;
        self.backend_config().validate()
    }

    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig {
            kind: self.backend,
            model_id: self.model.clone(),
            temperature: self.temperature,
            endpoint_url: self.endpoint.clone(),
            max_retries: self.max_retries,
            max_in_flight: self.max_in_flight,
            timeout_s: self.timeout_s,
            backoff_base_s: self.backoff_base_s,
        }
    }

    pub fn oracle(&self) -> OracleConfig {
        OracleConfig {
            noise_scale: self.beta,
            comparable_band: self.epsilon,
            seed: self.seed,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.run_id)
    }

    pub fn cache_root(&self) -> Option<PathBuf> {
        if self.no_cache {
            None
        } else {
            Some(self.cache_dir.clone().unwrap_or_else(|| self.out.join("cache")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# comment\nseed = 4\nopponents=3\nprompt-mode = freeform\n\ncredit_opponent = no\n").unwrap();
        let mut s = Settings::default();
        s.apply_file(&path).unwrap();
        assert_eq!((s.seed, s.opponents, s.prompt_mode, s.credit_opponent), (4, 3, ReportMode::Freeform, false));
        s.apply("seed", "9").unwrap();
        assert_eq!(s.seed, 9);
    }

    #[test]
    fn rejects_bad_entries() {
        let mut s = Settings::default();
        assert!(s.apply("colour", "blue").is_err());
        assert!(s.apply("seed", "-1").is_err());
        assert!(s.apply("backend", "carrier-pigeon").is_err());
        s.run_id = "../x".into();
        assert!(s.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        fs::write(&path, "seed 4\n").unwrap();
        let err = Settings::default().apply_file(&path).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }

    #[test]
    fn defaults_validate() {
        Settings::default().validate().unwrap();
        assert_eq!(Settings::default().cache_root(), Some(PathBuf::from("out/cache")));
    }
}
