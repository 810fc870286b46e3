//! Scenario files: a TOML description of one simulated day — campus seed,
//! clock start, the scripted-backend fixture to answer gateway calls from,
//! the intents users submit, and any scheduled sensor drifts.
//!
//! Loading is strict: unknown fields, bad versions, duplicate intent keys,
//! drifts pointing at unknown intents, and out-of-range thresholds are all
//! rejected with the offending path in the error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::campus::SensorField;
use crate::decision::{DEFAULT_CANDIDATES, DEFAULT_THETA1_SECONDS, DEFAULT_THETA2};
use crate::error::Error;
use crate::gateway::Role;
use crate::time::Timestamp;

pub const DEFAULT_TICK_SECONDS: i64 = 60;
pub const DEFAULT_BOOKING_DURATION_SECONDS: i64 = 3600;

/// Tunable knobs, all optional in the file and overridable from the CLI.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub theta1_seconds: i64,
    pub theta2: f64,
    pub candidates: usize,
    pub tick_seconds: i64,
    pub booking_duration_seconds: i64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            theta1_seconds: DEFAULT_THETA1_SECONDS,
            theta2: DEFAULT_THETA2,
            candidates: DEFAULT_CANDIDATES,
            tick_seconds: DEFAULT_TICK_SECONDS,
            booking_duration_seconds: DEFAULT_BOOKING_DURATION_SECONDS,
        }
    }
}

/// One user request, submitted `submit_offset_seconds` after clock start.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioIntent {
    pub key: String,
    pub user: String,
    #[serde(default)]
    pub submit_offset_seconds: i64,
    pub text: String,
    /// Ground-truth command claims, used as the precision reference when
    /// scoring this intent's candidate plans.
    #[serde(default)]
    pub reference_commands: Vec<String>,
}

/// A scheduled disturbance on the room an intent ends up in. `tick` counts
/// monitoring ticks (the loop starts after planning and negotiation).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDrift {
    pub intent: String,
    pub field: String,
    pub delta: f64,
    pub tick: u64,
}

impl ScenarioDrift {
    pub fn sensor_field(&self) -> Result<SensorField, Error> {
        match self.field.as_str() {
            "temperature" => Ok(SensorField::Temperature),
            "light" => Ok(SensorField::Light),
            other => Err(Error::ScenarioInvalid {
                path: String::new(),
                message: format!("drift field must be temperature or light, got '{other}'"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    pub campus_seed: u64,
    #[serde(with = "crate::time::serde_rfc3339")]
    pub clock_start: Timestamp,
    /// Scripted-backend fixture, relative to the scenario file.
    pub backend_fixture: String,
    #[serde(default)]
    pub config: ScenarioConfig,
    pub intents: Vec<ScenarioIntent>,
    #[serde(default)]
    pub drifts: Vec<ScenarioDrift>,
    /// Expected gateway calls per role; when present the run fails if the
    /// ledger disagrees. Roles not listed must see zero calls.
    #[serde(default)]
    pub expected_calls: Option<BTreeMap<String, u64>>,
}

impl Scenario {
    pub fn from_toml_str(label: &str, raw: &str) -> Result<Scenario, Error> {
        let invalid = |message: String| Error::ScenarioInvalid {
            path: label.to_string(),
            message,
        };
        let scenario: Scenario =
            toml::from_str(raw).map_err(|e| invalid(e.to_string()))?;
        scenario.validate(label)?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Scenario, Error> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_toml_str(&path.display().to_string(), &raw)
    }

    /// The backend fixture path, resolved against the scenario's own
    /// location.
    pub fn fixture_path(&self, scenario_path: &Path) -> PathBuf {
        scenario_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&self.backend_fixture)
    }

    fn validate(&self, label: &str) -> Result<(), Error> {
        let invalid = |message: String| Error::ScenarioInvalid {
            path: label.to_string(),
            message,
        };
        if self.version != 1 {
            return Err(invalid(format!("unsupported version {}", self.version)));
        }
        if self.name.trim().is_empty() {
            return Err(invalid("scenario name must not be empty".into()));
        }
        if self.intents.is_empty() {
            return Err(invalid("a scenario needs at least one intent".into()));
        }
        for intent in &self.intents {
            if intent.key.trim().is_empty() || intent.key.contains(char::is_whitespace) {
                return Err(invalid(format!(
                    "intent key '{}' must be a non-empty token",
                    intent.key
                )));
            }
            if self.intents.iter().filter(|i| i.key == intent.key).count() > 1 {
                return Err(invalid(format!("duplicate intent key '{}'", intent.key)));
            }
            if intent.text.trim().is_empty() {
                return Err(invalid(format!("intent '{}' has empty text", intent.key)));
            }
            if intent.submit_offset_seconds < 0 {
                return Err(invalid(format!(
                    "intent '{}' submits before clock start",
                    intent.key
                )));
            }
        }
        for drift in &self.drifts {
            if !self.intents.iter().any(|i| i.key == drift.intent) {
                return Err(invalid(format!(
                    "drift references unknown intent '{}'",
                    drift.intent
                )));
            }
            drift.sensor_field().map_err(|e| invalid(e.to_string()))?;
        }
        if let Some(expected) = &self.expected_calls {
            for role in expected.keys() {
                if !Role::ALL.iter().any(|r| r.as_str() == role) {
                    return Err(invalid(format!("expected_calls names unknown role '{role}'")));
                }
            }
        }
        let c = &self.config;
        if c.theta1_seconds <= 0 {
            return Err(invalid("theta1_seconds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&c.theta2) {
            return Err(invalid("theta2 must lie in [0, 1]".into()));
        }
        if c.candidates < 2 {
            return Err(invalid("candidates must be at least 2".into()));
        }
        if c.tick_seconds <= 0 {
            return Err(invalid("tick_seconds must be positive".into()));
        }
        if c.booking_duration_seconds <= 0 {
            return Err(invalid("booking_duration_seconds must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
name = "smoke"
campus_seed = 7
clock_start = "2025-03-14T08:00:00Z"
backend_fixture = "fixtures/smoke.toml"

[[intents]]
key = "a"
user = "alice"
text = "book me a room"
"#;

    #[test]
    fn minimal_scenario_loads_with_defaults() {
        let s = Scenario::from_toml_str("mem", MINIMAL).unwrap();
        assert_eq!(s.name, "smoke");
        assert_eq!(s.config, ScenarioConfig::default());
        assert_eq!(s.config.theta1_seconds, 7200);
        assert!((s.config.theta2 - 0.7).abs() < 1e-12);
        assert_eq!(s.config.candidates, 3);
        assert_eq!(s.intents[0].submit_offset_seconds, 0);
        assert!(s.drifts.is_empty());
        assert!(s.expected_calls.is_none());
    }

    #[test]
    fn fixture_path_resolves_next_to_the_scenario() {
        let s = Scenario::from_toml_str("mem", MINIMAL).unwrap();
        assert_eq!(
            s.fixture_path(Path::new("/tmp/scenarios/smoke.toml")),
            Path::new("/tmp/scenarios/fixtures/smoke.toml")
        );
    }

    fn expect_invalid(raw: &str, needle: &str) {
        match Scenario::from_toml_str("mem", raw) {
            Err(Error::ScenarioInvalid { message, .. }) => {
                assert!(message.contains(needle), "message '{message}' lacks '{needle}'");
            }
            other => panic!("expected ScenarioInvalid, got {other:?}"),
        }
    }

    #[test]
    fn strict_validation_rejects_bad_scenarios() {
        expect_invalid(&MINIMAL.replace("version = 1", "version = 2"), "version");
        expect_invalid(&MINIMAL.replace("key = \"a\"", "key = \"a b\""), "token");
        expect_invalid(
            &format!("{MINIMAL}\n[[intents]]\nkey = \"a\"\nuser = \"bob\"\ntext = \"x\"\n"),
            "duplicate",
        );
        expect_invalid(
            &format!("{MINIMAL}\n[[drifts]]\nintent = \"ghost\"\nfield = \"temperature\"\ndelta = 1.0\ntick = 0\n"),
            "unknown intent",
        );
        expect_invalid(
            &format!("{MINIMAL}\n[[drifts]]\nintent = \"a\"\nfield = \"humidity\"\ndelta = 1.0\ntick = 0\n"),
            "temperature or light",
        );
        expect_invalid(
            &format!("{MINIMAL}\n[expected_calls]\noracle = 3\n"),
            "unknown role",
        );
        expect_invalid(
            &format!("{MINIMAL}\n[config]\ntheta2 = 1.5\n"),
            "theta2",
        );
        expect_invalid(
            &format!("{MINIMAL}\n[config]\ncandidates = 1\n"),
            "candidates",
        );
        // Unknown fields anywhere are parse errors.
        expect_invalid(&format!("{MINIMAL}\nmystery = true\n"), "mystery");
    }
}
