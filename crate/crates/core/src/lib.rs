//! Urgency-aware multi-agent orchestration for smart spaces.
//!
//! The pipeline turns free-text user intents into dispatched building commands:
//!
//! 1. a personal agent extracts a plan type, deadline, and preferences
//!    (recalling preferences from per-user case memory when they are missing),
//! 2. intents are classified by time-to-deadline into stale / high / low urgency,
//! 3. high-urgency intents get one fast plan; low-urgency intents get several
//!    candidate plans (hint-conditioned when solution memory recalls a similar
//!    past intent), scored on LM-call cost, similarity, and precision, and
//!    filtered to the Pareto front before an evaluator picks one,
//! 4. one low-level agent per sub-task executes the chosen plan against the
//!    campus dataset, sharing intermediate results through a rendezvous store,
//! 5. cross-intent room conflicts are negotiated, commands are queued with a
//!    time-to-launch, and a monitoring loop corrects drift in reserved rooms.
//!
//! Everything is deterministic: language-model calls go through a scripted
//! backend, randomness is seeded, and time is simulated and injected.

pub mod campus;
pub mod decision;
pub mod embedding;
pub mod error;
pub mod execution;
pub mod gateway;
pub mod management;
pub mod metrics;
pub mod personal;
pub mod pipeline;
pub mod report;
pub mod scenario;
pub mod time;

pub mod par;

pub use error::Error;

/// Convenience result alias used across the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;
