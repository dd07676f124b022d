use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::context::{GroupBy, Retention};

/// What happens when tagging fails or a handler panics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailMode {
    /// Forward the request and log it for audit.
    #[default]
    Open,
    /// Deny the request.
    Closed,
}

impl FromStr for FailMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "open" => Ok(FailMode::Open),
            "closed" => Ok(FailMode::Closed),
            other => Err(format!("unknown fail mode {other:?} (expected open or closed)")),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{0} must be greater than zero")]
    NonPositive(&'static str),
    #[error("{name} ({window:?}) exceeds history retention ({retention:?})")]
    WindowTooLong {
        name: &'static str,
        window: Duration,
        retention: Duration,
    },
}

/// Thresholds and windows for the built-in policies. Durations are written
/// as "5m", "1h", "90s" in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub record_threshold: u64,
    pub max_purchase_qty: u64,
    #[serde(with = "humantime_serde")]
    pub purchase_window: Duration,
    pub login_attempt_limit: u64,
    #[serde(with = "humantime_serde")]
    pub login_window: Duration,
    pub cart_hold_limit: u64,
    #[serde(with = "humantime_serde")]
    pub cart_window: Duration,
    pub registration_limit: u64,
    #[serde(with = "humantime_serde")]
    pub registration_window: Duration,
    pub comment_limit: u64,
    #[serde(with = "humantime_serde")]
    pub comment_window: Duration,
    pub fail_mode: FailMode,
    pub group_by: GroupBy,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            record_threshold: 100,
            max_purchase_qty: 10,
            purchase_window: Duration::from_secs(5 * 60),
            login_attempt_limit: 5,
            login_window: Duration::from_secs(5 * 60),
            cart_hold_limit: 10,
            cart_window: Duration::from_secs(15 * 60),
            registration_limit: 3,
            registration_window: Duration::from_secs(3600),
            comment_limit: 10,
            comment_window: Duration::from_secs(60),
            fail_mode: FailMode::Open,
            group_by: GroupBy::ClientIp,
        }
    }
}

impl PolicyConfig {
    pub fn windows(&self) -> [(&'static str, Duration); 5] {
        [
            ("purchase_window", self.purchase_window),
            ("login_window", self.login_window),
            ("cart_window", self.cart_window),
            ("registration_window", self.registration_window),
            ("comment_window", self.comment_window),
        ]
    }

    pub fn largest_window(&self) -> Duration {
        self.windows().iter().map(|(_, w)| *w).max().unwrap_or_default()
    }

    pub fn validate(&self, retention: &Retention) -> Result<(), ConfigError> {
        let limits = [
            ("record_threshold", self.record_threshold),
            ("max_purchase_qty", self.max_purchase_qty),
            ("login_attempt_limit", self.login_attempt_limit),
            ("cart_hold_limit", self.cart_hold_limit),
            ("registration_limit", self.registration_limit),
            ("comment_limit", self.comment_limit),
        ];
        for (name, v) in limits {
            if v == 0 {
                return Err(ConfigError::NonPositive(name));
            }
        }
        for (name, w) in self.windows() {
            if w.is_zero() {
                return Err(ConfigError::NonPositive(name));
            }
            if w > retention.max_age {
                return Err(ConfigError::WindowTooLong {
                    name,
                    window: w,
                    retention: retention.max_age,
                });
            }
        }
        Ok(())
    }
}
