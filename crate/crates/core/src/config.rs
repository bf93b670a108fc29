//! TOML run configuration, one section per module. Every key is optional.
//!
//! ```toml
//! [model]
//! debounce_window_s = 2.0
//!
//! [economy]
//! active_s = 2.0
//! inactive_s = 8.0
//! duty_cycle = 0.2
//! min_fetch_gap_ms = 100.0
//! sustain_interval_s = 900.0
//! min_move_m = 10.0
//!
//! [sentiment]
//! alpha = 15.0
//! theta = 0.05
//!
//! [geo]
//! max_cluster_points = 1500
//!
//! [balance]
//! min_reports_per_class = 5
//! max_degree = 1.8
//!
//! [learn]
//! join_window_s = 1800
//! k_max = 10
//! budget = 40
//! averaging = "macro"
//!
//! [empathy]
//! half_life_s = 86400.0
//! report_boost = 0.05
//! pause_multiplier = 2.0
//!
//! [stats]
//! alpha = 0.05
//!
//! [store]
//! retention_days = 28
//! base_interval_s = 3600
//! min_interval_s = 60
//! shrink = 2.0
//!
//! [pipeline]
//! workers = 0
//! timing = false
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::balance::BalanceThresholds;
use crate::economy::CollectionRhythm;
use crate::empathy::EmpathyParams;
use crate::learn::folds::DEFAULT_K_MAX;
use crate::learn::Averaging;
use crate::sentiment::{DEFAULT_ALPHA, DEFAULT_THETA};
use crate::store::{RetryState, DEFAULT_RETENTION_DAYS};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub economy: CollectionRhythm,
    pub sentiment: SentimentConfig,
    pub geo: GeoConfig,
    pub balance: BalanceThresholds,
    pub learn: LearnConfig,
    pub empathy: EmpathyParams,
    pub stats: StatsConfig,
    pub store: StoreConfig,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub debounce_window_s: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            debounce_window_s: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SentimentConfig {
    pub alpha: f64,
    pub theta: f64,
}

impl Default for SentimentConfig {
    fn default() -> Self {
        SentimentConfig {
            alpha: DEFAULT_ALPHA,
            theta: DEFAULT_THETA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoConfig {
    /// Location points fed to the cluster search; longer tracks are thinned
    /// by an even stride.
    pub max_cluster_points: usize,
}

impl Default for GeoConfig {
    fn default() -> Self {
        GeoConfig {
            max_cluster_points: 1500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub join_window_s: i64,
    pub k_max: usize,
    /// Hyperparameter evaluations per entity.
    pub budget: usize,
    pub averaging: Averaging,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            join_window_s: 1800,
            k_max: DEFAULT_K_MAX,
            budget: 40,
            averaging: Averaging::Macro,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub alpha: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig { alpha: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub retention_days: i64,
    pub base_interval_s: u64,
    pub min_interval_s: u64,
    pub shrink: f64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        let r = RetryState::default();
        StoreConfig {
            retention_days: DEFAULT_RETENTION_DAYS,
            base_interval_s: r.base_interval_s,
            min_interval_s: r.min_interval_s,
            shrink: r.shrink,
        }
    }
}

impl StoreConfig {
    pub fn retry_state(&self) -> RetryState {
        RetryState {
            base_interval_s: self.base_interval_s,
            min_interval_s: self.min_interval_s,
            shrink: self.shrink,
            current_s: self.base_interval_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Concurrent entities; 0 uses every core.
    pub workers: usize,
    /// Record wall-clock stage timings. Off keeps reports byte-identical
    /// across runs.
    pub timing: bool,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.model.debounce_window_s > 0.0) {
            return bad("model.debounce_window_s must be > 0".into());
        }
        if let Err(e) = self.economy.validate() {
            return bad(format!("economy: {e}"));
        }
        if !(self.sentiment.alpha > 0.0) || !(0.0..1.0).contains(&self.sentiment.theta) {
            return bad("sentiment: alpha must be > 0 and theta in [0, 1)".into());
        }
        if self.geo.max_cluster_points < 2 {
            return bad("geo.max_cluster_points must be at least 2".into());
        }
        if self.learn.join_window_s <= 0 || self.learn.k_max < 2 || self.learn.budget == 0 {
            return bad("learn: join_window_s > 0, k_max >= 2 and budget >= 1 required".into());
        }
        if let Err(e) = self.empathy.validate() {
            return bad(format!("empathy: {e}"));
        }
        if !(self.stats.alpha > 0.0 && self.stats.alpha < 1.0) {
            return bad("stats.alpha must be in (0, 1)".into());
        }
        if self.store.retention_days < 0 || self.store.min_interval_s == 0 || !(self.store.shrink >= 1.0) {
            return bad("store: retention_days >= 0, min_interval_s >= 1, shrink >= 1 required".into());
        }
        Ok(())
    }
}
