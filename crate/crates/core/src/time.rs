//! Simulated time: integer UTC seconds and half-open slots.
//!
//! Core logic never reads the wall clock; every operation that needs "now"
//! takes a [`Timestamp`] parameter supplied by the caller (scenario driver,
//! test, or CLI).

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Seconds since the Unix epoch, UTC.
pub type Timestamp = i64;

/// Parse an RFC 3339 timestamp (`2025-03-14T15:00:00Z`) into epoch seconds.
pub fn parse_rfc3339(s: &str) -> Result<Timestamp, Error> {
    DateTime::parse_from_rfc3339(s)
        .map(|dt| dt.timestamp())
        .map_err(|e| Error::Time {
            value: s.to_string(),
            source: e,
        })
}

/// Render epoch seconds as RFC 3339 UTC, the format used in logs and reports.
pub fn format_ts(ts: Timestamp) -> String {
    match Utc.timestamp_opt(ts, 0) {
        chrono::LocalResult::Single(dt) => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        _ => format!("@{ts}"),
    }
}

/// Half-open time slot `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeSlot {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeSlot {
    pub fn new(start: Timestamp, end: Timestamp) -> Self {
        debug_assert!(start < end, "slot must be non-empty");
        TimeSlot { start, end }
    }

    /// Half-open overlap: `[15:00,16:00)` and `[16:00,17:00)` do not overlap.
    pub fn overlaps(&self, other: &TimeSlot) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        self.start <= ts && ts < self.end
    }
}

impl std::fmt::Display for TimeSlot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {})", format_ts(self.start), format_ts(self.end))
    }
}

/// Serde adapter: timestamps travel as RFC 3339 strings in fixtures and
/// scenario files, as epoch seconds in memory.
pub mod serde_rfc3339 {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::{format_ts, parse_rfc3339, Timestamp};

    pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_ts(*ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let raw = String::deserialize(d)?;
        parse_rfc3339(&raw).map_err(serde::de::Error::custom)
    }
}
