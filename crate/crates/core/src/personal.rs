//! Personal agent: intent analysis, per-user case memory, preference recall,
//! and self-evaluation.
//!
//! The personal agent turns raw request text into an [`Intent`] via one
//! scripted gateway call. When the analysis carries no preferences, the
//! agent may inherit them from the user's case memory: a past case qualifies
//! when the cosine similarity between the stored plan-type embedding and the
//! new plan type is **strictly above 0.5** and the case is **strictly less
//! than one hour old**; among qualifying cases the most recent wins, with
//! insertion order breaking timestamp ties (later insert wins). Case memory
//! is append-only and persists as one JSON record per line.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedder, EmbeddingVector};
use crate::error::Error;
use crate::gateway::{invoke, Backend, CallLedger, Prompt, Role, StructuredPayload};
use crate::time::{serde_rfc3339, Timestamp};

/// Similarity a past case must strictly exceed to be recalled.
pub const RECALL_SIMILARITY_FLOOR: f64 = 0.5;
/// Age (seconds) a past case must be strictly younger than to be recalled.
pub const RECALL_MAX_AGE_SECONDS: i64 = 3600;

/// Discrete light preference bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightLevel {
    Off,
    Dim,
    Bright,
}

impl LightLevel {
    /// Canonical lux target used when a numeric setpoint is needed
    /// (monitoring deviation math, set-light commands).
    pub fn target_lux(&self) -> f64 {
        match self {
            LightLevel::Off => 0.0,
            LightLevel::Dim => 150.0,
            LightLevel::Bright => 700.0,
        }
    }
}

impl std::fmt::Display for LightLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LightLevel::Off => "off",
            LightLevel::Dim => "dim",
            LightLevel::Bright => "bright",
        })
    }
}

/// Light preference: a named band or an exact lux value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LightPreference {
    Level(LightLevel),
    Lux(f64),
}

impl LightPreference {
    pub fn target_lux(&self) -> f64 {
        match self {
            LightPreference::Level(level) => level.target_lux(),
            LightPreference::Lux(lux) => *lux,
        }
    }
}

impl std::fmt::Display for LightPreference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LightPreference::Level(level) => level.fmt(f),
            LightPreference::Lux(lux) => write!(f, "{lux} lux"),
        }
    }
}

/// What the user wants from a room.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub light: Option<LightPreference>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room_capacity: Option<u32>,
    /// Free-form extras (catering choices, equipment, …) that no actuator
    /// consumes but memory still carries.
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub other: std::collections::BTreeMap<String, String>,
}

impl PreferenceSet {
    pub fn is_unconstrained(&self) -> bool {
        self.temperature_c.is_none()
            && self.light.is_none()
            && self.room_capacity.is_none()
            && self.other.is_empty()
    }

    /// One-line summary used in reports and prompt bodies.
    pub fn summary(&self) -> String {
        let mut parts = Vec::new();
        if let Some(t) = self.temperature_c {
            parts.push(format!("temperature {t}°C"));
        }
        if let Some(l) = &self.light {
            parts.push(format!("light {l}"));
        }
        if let Some(c) = self.room_capacity {
            parts.push(format!("capacity {c}"));
        }
        for (k, v) in &self.other {
            parts.push(format!("{k} {v}"));
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join(", ")
        }
    }
}

/// Structured payload the scripted personal agent returns for analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentAnalysis {
    pub plan_type: String,
    #[serde(with = "serde_rfc3339")]
    pub deadline: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferences: Option<PreferenceSet>,
}

impl IntentAnalysis {
    pub fn validate(&self) -> Result<(), Error> {
        if self.plan_type.trim().is_empty() {
            return Err(Error::BlankIntentText);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentVerdict {
    Aligned,
    Misaligned,
}

/// Structured payload for the personal agent's self-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfEvaluation {
    pub verdict: AlignmentVerdict,
    pub justification: String,
}

/// A user request after analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Intent {
    pub id: String,
    pub user_id: String,
    pub raw_text: String,
    pub plan_type: String,
    pub deadline: Timestamp,
    pub preferences: Option<PreferenceSet>,
    pub submitted_at: Timestamp,
    /// Case id the preferences were inherited from, when recall filled them.
    pub inherited_from: Option<String>,
}

/// One remembered interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub case_id: String,
    pub plan_type: String,
    pub timestamp: Timestamp,
    pub preferences: PreferenceSet,
    pub execution_details: String,
    pub plan_embedding: EmbeddingVector,
}

/// Append-only case memory for one user.
#[derive(Debug, Clone, Default)]
pub struct CaseMemory {
    pub user_id: String,
    records: Vec<CaseRecord>,
}

impl CaseMemory {
    pub fn new(user_id: impl Into<String>) -> Self {
        CaseMemory {
            user_id: user_id.into(),
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[CaseRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Append a new case. The stored embedding is always `embed(plan_type)`.
    pub fn commit_case(
        &mut self,
        embedder: &Embedder,
        plan_type: &str,
        now: Timestamp,
        preferences: PreferenceSet,
        execution_details: impl Into<String>,
    ) -> &CaseRecord {
        let record = CaseRecord {
            case_id: format!("case-{}", self.records.len() + 1),
            plan_type: plan_type.to_string(),
            timestamp: now,
            preferences,
            execution_details: execution_details.into(),
            plan_embedding: embedder.embed(plan_type),
        };
        self.records.push(record);
        self.records.last().expect("just pushed")
    }

    /// The most recent case similar enough and young enough to reuse.
    /// Both thresholds are strict; timestamp ties go to the later insert.
    pub fn recall_preferences(
        &self,
        embedder: &Embedder,
        plan_type: &str,
        now: Timestamp,
    ) -> Option<&CaseRecord> {
        let probe = embedder.embed(plan_type);
        let mut best: Option<&CaseRecord> = None;
        for record in &self.records {
            let age = now - record.timestamp;
            if age >= RECALL_MAX_AGE_SECONDS {
                continue;
            }
            let sim = cosine(&probe, &record.plan_embedding)
                .expect("memory embeddings share the run dimension");
            if sim <= RECALL_SIMILARITY_FLOOR {
                continue;
            }
            match best {
                Some(b) if b.timestamp > record.timestamp => {}
                _ => best = Some(record), // later insert wins ties
            }
        }
        best
    }

    /// Read a memory file (one JSON record per line) for one user.
    pub fn load_jsonl(path: &Path, user_id: impl Into<String>) -> Result<Self, Error> {
        let user_id = user_id.into();
        let mut memory = CaseMemory::new(user_id);
        if !path.exists() {
            return Ok(memory);
        }
        let raw = std::fs::read_to_string(path)?;
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: CaseRecord =
                serde_json::from_str(line).map_err(|e| Error::CaseMemoryCorrupt {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", i + 1),
                })?;
            memory.records.push(record);
        }
        Ok(memory)
    }

    /// Append one record to the user's memory file.
    pub fn append_jsonl(path: &Path, record: &CaseRecord) -> Result<(), Error> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(file, "{line}")?;
        Ok(())
    }
}

/// One gateway call that turns raw text into an [`Intent`].
pub fn analyze_intent(
    backend: &dyn Backend,
    ledger: &CallLedger,
    intent_id: &str,
    user_id: &str,
    raw_text: &str,
    submitted_at: Timestamp,
) -> Result<Intent, Error> {
    if raw_text.trim().is_empty() {
        return Err(Error::BlankIntentText);
    }
    let body = format!(
        "Extract the plan type, deadline, and any stated preferences from this request.\n\
         user: {user_id}\nrequest: {raw_text}\nkey={intent_id}"
    );
    let prompt = Prompt::new(Role::Personal, body)?;
    let response = invoke(backend, &prompt, ledger, submitted_at)?;
    let analysis = match response.structured {
        Some(StructuredPayload::IntentAnalysis(a)) => a,
        _ => {
            return Err(Error::FixtureInconsistent {
                context: format!("personal/{intent_id}"),
                message: "analysis response must carry an intent_analysis payload".into(),
            });
        }
    };
    analysis.validate()?;
    Ok(Intent {
        id: intent_id.to_string(),
        user_id: user_id.to_string(),
        raw_text: raw_text.to_string(),
        plan_type: analysis.plan_type,
        deadline: analysis.deadline,
        preferences: analysis.preferences,
        submitted_at,
        inherited_from: None,
    })
}

/// The personal agent's alignment check on what it produced for the user.
/// When preferences were inherited from memory, the justification must name
/// the case it leaned on.
pub fn self_evaluate(
    backend: &dyn Backend,
    ledger: &CallLedger,
    intent: &Intent,
    response_summary: &str,
    recalled_case: Option<&CaseRecord>,
    now: Timestamp,
) -> Result<SelfEvaluation, Error> {
    let body = format!(
        "Check that the produced plan summary still matches the user's request.\n\
         request: {}\nsummary: {}\nkey={}/selfeval",
        intent.raw_text, response_summary, intent.id
    );
    let prompt = Prompt::new(Role::Personal, body)?;
    let response = invoke(backend, &prompt, ledger, now)?;
    let evaluation = match response.structured {
        Some(StructuredPayload::SelfEvaluation(e)) => e,
        _ => {
            return Err(Error::FixtureInconsistent {
                context: format!("personal/{}/selfeval", intent.id),
                message: "self-evaluation response must carry a self_evaluation payload".into(),
            });
        }
    };
    if let Some(case) = recalled_case {
        if !evaluation.justification.contains(&case.case_id) {
            return Err(Error::MissingCaseJustification {
                case_id: case.case_id.clone(),
            });
        }
    }
    Ok(evaluation)
}
