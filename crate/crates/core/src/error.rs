//! Crate-wide error type.
//!
//! Every contract violation the pipeline can detect is a typed variant here —
//! scripted-backend misses, zero-denominator metrics, stale enqueues, booking
//! conflicts — so tests can match on the exact failure instead of string
//! output. Precondition violations ("usage" errors) are variants too rather
//! than panics, because fixture and scenario bugs should surface as values in
//! test setup.

use thiserror::Error;

use crate::time::{TimeSlot, Timestamp};

#[derive(Debug, Error)]
pub enum Error {
    // ── embedding / metrics ──────────────────────────────────────────────
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("precision is undefined for an empty response claim set")]
    EmptyResponseClaims,

    #[error("recall is undefined for an empty reference claim set")]
    EmptyReferenceClaims,

    // ── gateway ──────────────────────────────────────────────────────────
    #[error("prompt body must not be empty")]
    EmptyPromptBody,

    #[error("no scripted response for {0}")]
    UnscriptedPrompt(String),

    #[error("fixture {path}: {message}")]
    FixtureInvalid { path: String, message: String },

    #[error("scripted payload disagrees with computed result for {context}: {message}")]
    FixtureInconsistent { context: String, message: String },

    // ── personal agent ───────────────────────────────────────────────────
    #[error("intent text is empty or whitespace-only")]
    BlankIntentText,

    #[error("self-evaluation for a recalled case must mention {case_id} in its justification")]
    MissingCaseJustification { case_id: String },

    #[error("case memory file {path}: {message}")]
    CaseMemoryCorrupt { path: String, message: String },

    // ── decision ─────────────────────────────────────────────────────────
    #[error("operation requires a {expected}-urgency intent, got {actual}")]
    WrongUrgency { expected: String, actual: String },

    #[error("low-urgency planning needs at least 2 candidates, got {n}")]
    TooFewCandidates { n: usize },

    #[error("cannot {operation} an empty solution set")]
    EmptySolutionSet { operation: &'static str },

    #[error("solution {id}: {message}")]
    SolutionInvalid { id: String, message: String },

    #[error("evaluator selected unknown solution {id}")]
    UnknownSelection { id: String },

    // ── execution ────────────────────────────────────────────────────────
    #[error("no dataset matches requirement '{requirement}'")]
    NoCompatibleDataset { requirement: String },

    #[error("requirement '{requirement}' matches more than one dataset")]
    AmbiguousDataset { requirement: String },

    #[error("rendezvous entry {key} (group {group}, stage {stage}) required but absent")]
    DependencyUnmet {
        group: String,
        stage: u32,
        key: String,
    },

    #[error("rendezvous entry {key} (group {group}, stage {stage}) already written")]
    RendezvousOverwrite {
        group: String,
        stage: u32,
        key: String,
    },

    #[error("agent at stage {reader_stage} read entry {key} from stage {entry_stage} in violation of stage discipline")]
    StageDiscipline {
        reader_stage: u32,
        entry_stage: u32,
        key: String,
    },

    #[error("negotiation failed for intent {intent_id}: no alternative room for {slot}")]
    NegotiationFailed { intent_id: String, slot: TimeSlot },

    #[error("no room satisfies intent {intent_id} for {slot}")]
    NoRoomAvailable { intent_id: String, slot: TimeSlot },

    // ── management ───────────────────────────────────────────────────────
    #[error("command {command_id} rejected: launch_at {launch_at} is before now {now}")]
    RejectedStale {
        command_id: String,
        launch_at: Timestamp,
        now: Timestamp,
    },

    #[error("monitoring window for {intent_id} is empty or inverted")]
    InvalidWindow { intent_id: String },

    // ── campus ───────────────────────────────────────────────────────────
    #[error("unknown room {room}")]
    UnknownRoom { room: String },

    #[error("room {room} already booked for an overlapping slot {slot}")]
    BookingConflict { room: String, slot: TimeSlot },

    #[error("command {command_id} is malformed: needs {what}")]
    MalformedCommand {
        command_id: String,
        what: &'static str,
    },

    #[error("campus table {path}: {message}")]
    CampusTableCorrupt { path: String, message: String },

    // ── scenario / pipeline ──────────────────────────────────────────────
    #[error("scenario {path}: {message}")]
    ScenarioInvalid { path: String, message: String },

    #[error("no consecutive intent pair reaches the hint-recall similarity threshold (best pair scored {best:.4})")]
    NoLearningPair { best: f64 },

    #[error("ledger counts diverge from the scenario's declared expected calls: {detail}")]
    LedgerMismatch { detail: String },

    #[error("timestamp '{value}' is not RFC 3339")]
    Time {
        value: String,
        source: chrono::ParseError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
