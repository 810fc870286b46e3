//! Synthetic campus: 15 meeting rooms with temperature, light, capacity, and
//! bookings, generated deterministically from a seed.
//!
//! Generation draws from a seeded ChaCha8 stream in fixed room order, so the
//! same seed always yields the same campus on every platform. Generated
//! values: temperature uniform in [18, 26] °C (rounded to 0.1), light level
//! from the {150, 400, 700} lux bands, capacity in [2, 16], and up to two
//! pre-existing one-hour bookings per room inside working hours
//! (08:00–18:00). Applied commands clamp temperature to [5, 40] °C and light
//! to ≥ 0 lux; the clamp and generation ranges are also recorded in the
//! table-file header.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::execution::{Action, Command, Field};
use crate::personal::PreferenceSet;
use crate::time::{format_ts, parse_rfc3339, TimeSlot, Timestamp};

/// The fixed meeting-room inventory, in generation order.
pub const ROOM_IDS: [&str; 15] = [
    "TS501", "PK258", "PK265", "PK306", "PK254", "PK266", "PK261", "PK253",
    "PK267", "PK262", "PK309", "PK268", "PK263", "PK308", "PK264",
];

pub const TEMP_MIN_C: f64 = 5.0;
pub const TEMP_MAX_C: f64 = 40.0;
pub const GEN_TEMP_RANGE_C: (f64, f64) = (18.0, 26.0);
pub const LIGHT_BANDS_LUX: [f64; 3] = [150.0, 400.0, 700.0];
pub const WORK_START_HOUR: i64 = 8;
pub const WORK_END_HOUR: i64 = 18;

/// Sensor-backed fields drift can be injected into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorField {
    Temperature,
    Light,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomState {
    pub id: String,
    pub capacity: u32,
    pub temperature_c: f64,
    pub light_lux: f64,
    /// Sorted, non-overlapping half-open slots.
    pub bookings: Vec<TimeSlot>,
}

impl RoomState {
    pub fn is_free(&self, slot: &TimeSlot) -> bool {
        self.bookings.iter().all(|b| !b.overlaps(slot))
    }
}

/// The whole building at a point in time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CampusSnapshot {
    rooms: BTreeMap<String, RoomState>,
    /// Alert commands applied to the campus end up here (they actuate nothing).
    pub alert_log: Vec<String>,
}

impl CampusSnapshot {
    /// Build a campus from explicit room states (fixtures and tests; the
    /// simulated building comes from [`generate_campus`]).
    pub fn from_rooms(rooms: impl IntoIterator<Item = RoomState>) -> CampusSnapshot {
        CampusSnapshot {
            rooms: rooms.into_iter().map(|r| (r.id.clone(), r)).collect(),
            alert_log: Vec::new(),
        }
    }

    pub fn room(&self, id: &str) -> Result<&RoomState, Error> {
        self.rooms.get(id).ok_or_else(|| Error::UnknownRoom {
            room: id.to_string(),
        })
    }

    fn room_mut(&mut self, id: &str) -> Result<&mut RoomState, Error> {
        self.rooms.get_mut(id).ok_or_else(|| Error::UnknownRoom {
            room: id.to_string(),
        })
    }

    /// Rooms in deterministic (lexicographic) order.
    pub fn rooms(&self) -> impl Iterator<Item = &RoomState> {
        self.rooms.values()
    }

    pub fn len(&self) -> usize {
        self.rooms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rooms.is_empty()
    }
}

/// Deterministically generate the campus for one day (`day` = UTC midnight).
pub fn generate_campus(seed: u64, day: Timestamp) -> CampusSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rooms = BTreeMap::new();
    for id in ROOM_IDS {
        let capacity = rng.gen_range(2..=16u32);
        let temperature_c =
            (rng.gen_range(GEN_TEMP_RANGE_C.0..=GEN_TEMP_RANGE_C.1) * 10.0).round() / 10.0;
        let light_lux = LIGHT_BANDS_LUX[rng.gen_range(0..LIGHT_BANDS_LUX.len())];
        let n_bookings = rng.gen_range(0..=2usize);
        let mut hours: Vec<i64> = Vec::new();
        while hours.len() < n_bookings {
            let h = rng.gen_range(WORK_START_HOUR..WORK_END_HOUR);
            if !hours.contains(&h) {
                hours.push(h);
            }
        }
        hours.sort_unstable();
        let bookings = hours
            .into_iter()
            .map(|h| TimeSlot::new(day + h * 3600, day + (h + 1) * 3600))
            .collect();
        rooms.insert(
            id.to_string(),
            RoomState {
                id: id.to_string(),
                capacity,
                temperature_c,
                light_lux,
                bookings,
            },
        );
    }
    CampusSnapshot {
        rooms,
        alert_log: Vec::new(),
    }
}

/// Apply one dispatched command to the building.
pub fn apply_command(campus: &mut CampusSnapshot, command: &Command) -> Result<(), Error> {
    let need_magnitude = || -> Result<f64, Error> {
        command.magnitude.ok_or(Error::MalformedCommand {
            command_id: command.id.to_string(),
            what: "magnitude",
        })
    };
    let need_slot = || -> Result<TimeSlot, Error> {
        command.slot.ok_or(Error::MalformedCommand {
            command_id: command.id.to_string(),
            what: "slot",
        })
    };
    match (command.field, command.action) {
        (Field::Temperature, Action::Set) => {
            let m = need_magnitude()?;
            let room = campus.room_mut(&command.room)?;
            room.temperature_c = m.clamp(TEMP_MIN_C, TEMP_MAX_C);
        }
        (Field::Temperature, Action::Increase) => {
            let m = need_magnitude()?;
            let room = campus.room_mut(&command.room)?;
            room.temperature_c = (room.temperature_c + m).clamp(TEMP_MIN_C, TEMP_MAX_C);
        }
        (Field::Temperature, Action::Decrease) => {
            let m = need_magnitude()?;
            let room = campus.room_mut(&command.room)?;
            room.temperature_c = (room.temperature_c - m).clamp(TEMP_MIN_C, TEMP_MAX_C);
        }
        (Field::Light, Action::Set) => {
            let m = need_magnitude()?;
            let room = campus.room_mut(&command.room)?;
            room.light_lux = m.max(0.0);
        }
        (Field::Light, Action::Increase) => {
            let m = need_magnitude()?;
            let room = campus.room_mut(&command.room)?;
            room.light_lux = (room.light_lux + m).max(0.0);
        }
        (Field::Light, Action::Decrease) => {
            let m = need_magnitude()?;
            let room = campus.room_mut(&command.room)?;
            room.light_lux = (room.light_lux - m).max(0.0);
        }
        (Field::Booking, Action::Reserve) => {
            let slot = need_slot()?;
            let room = campus.room_mut(&command.room)?;
            if !room.is_free(&slot) {
                return Err(Error::BookingConflict {
                    room: command.room.clone(),
                    slot,
                });
            }
            room.bookings.push(slot);
            room.bookings.sort_unstable();
        }
        (Field::Booking, Action::Release) => {
            let slot = need_slot()?;
            let room = campus.room_mut(&command.room)?;
            room.bookings.retain(|b| b != &slot);
        }
        (_, Action::Alert) => {
            campus.room(&command.room)?; // room must exist even for alerts
            campus
                .alert_log
                .push(format!("{} {}", command.id, command.room));
        }
        (field, action) => {
            return Err(Error::MalformedCommand {
                command_id: command.id.to_string(),
                what: match (field, action) {
                    (Field::Booking, _) => "slot-bearing action",
                    _ => "sensor action",
                },
            });
        }
    }
    Ok(())
}

/// Nudge a sensor reading without a command (simulated external disturbance).
pub fn inject_drift(
    campus: &mut CampusSnapshot,
    room_id: &str,
    field: SensorField,
    delta: f64,
) -> Result<(), Error> {
    let room = campus.room_mut(room_id)?;
    match field {
        SensorField::Temperature => {
            room.temperature_c = (room.temperature_c + delta).clamp(TEMP_MIN_C, TEMP_MAX_C);
        }
        SensorField::Light => {
            room.light_lux = (room.light_lux + delta).max(0.0);
        }
    }
    Ok(())
}

/// Total order used everywhere a "next-best room" is needed: temperature
/// distance to the preference (absent preference → distance 0 for all), then
/// capacity ascending, then room id.
pub fn room_order_key(room: &RoomState, prefs: &PreferenceSet) -> (f64, u32, String) {
    let dist = prefs
        .temperature_c
        .map(|t| (room.temperature_c - t).abs())
        .unwrap_or(0.0);
    (dist, room.capacity, room.id.clone())
}

/// Rooms free for `slot` that satisfy a required capacity (when the
/// preference states one), ordered by [`room_order_key`]. Light level is not
/// filtered on — it is adjustable after booking.
pub fn query_available(
    campus: &CampusSnapshot,
    slot: &TimeSlot,
    prefs: &PreferenceSet,
) -> Vec<String> {
    let mut matches: Vec<&RoomState> = campus
        .rooms()
        .filter(|r| r.is_free(slot))
        .filter(|r| prefs.room_capacity.is_none_or(|need| r.capacity >= need))
        .collect();
    matches.sort_by(|a, b| {
        let ka = room_order_key(a, prefs);
        let kb = room_order_key(b, prefs);
        ka.0.total_cmp(&kb.0)
            .then_with(|| ka.1.cmp(&kb.1))
            .then_with(|| ka.2.cmp(&kb.2))
    });
    matches.into_iter().map(|r| r.id.clone()).collect()
}

// ─── table file ─────────────────────────────────────────────────────────────

/// Render the campus as its table file: one room per line,
/// `room_id<TAB>capacity<TAB>temperature_c<TAB>light_lux<TAB>bookings`.
pub fn serialize_table(campus: &CampusSnapshot) -> String {
    let mut out = String::new();
    out.push_str("# columns: room_id\tcapacity\ttemperature_c\tlight_lux\tbookings\n");
    out.push_str("# bookings: comma-joined start..end (RFC 3339, half-open), '-' if none\n");
    out.push_str(&format!(
        "# ranges: temperature clamp [{TEMP_MIN_C}, {TEMP_MAX_C}] °C, generated [{}, {}] °C; \
         light ≥ 0 lux, generated bands {{150, 400, 700}}; bookings within {WORK_START_HOUR}:00–{WORK_END_HOUR}:00\n",
        GEN_TEMP_RANGE_C.0, GEN_TEMP_RANGE_C.1
    ));
    for room in campus.rooms() {
        let bookings = if room.bookings.is_empty() {
            "-".to_string()
        } else {
            room.bookings
                .iter()
                .map(|s| format!("{}..{}", format_ts(s.start), format_ts(s.end)))
                .collect::<Vec<_>>()
                .join(",")
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            room.id, room.capacity, room.temperature_c, room.light_lux, bookings
        ));
    }
    out
}

/// Parse a table file produced by [`serialize_table`].
pub fn parse_table(label: &str, raw: &str) -> Result<CampusSnapshot, Error> {
    let corrupt = |line_no: usize, message: String| Error::CampusTableCorrupt {
        path: label.to_string(),
        message: format!("line {line_no}: {message}"),
    };
    let mut rooms = BTreeMap::new();
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(corrupt(line_no, format!("expected 5 columns, got {}", cols.len())));
        }
        let capacity: u32 = cols[1]
            .parse()
            .map_err(|e| corrupt(line_no, format!("capacity: {e}")))?;
        let temperature_c: f64 = cols[2]
            .parse()
            .map_err(|e| corrupt(line_no, format!("temperature: {e}")))?;
        let light_lux: f64 = cols[3]
            .parse()
            .map_err(|e| corrupt(line_no, format!("light: {e}")))?;
        let mut bookings = Vec::new();
        if cols[4] != "-" {
            for part in cols[4].split(',') {
                let (s, e) = part
                    .split_once("..")
                    .ok_or_else(|| corrupt(line_no, format!("booking '{part}' lacks '..'")))?;
                let start = parse_rfc3339(s).map_err(|e| corrupt(line_no, e.to_string()))?;
                let end = parse_rfc3339(e).map_err(|e| corrupt(line_no, e.to_string()))?;
                if start >= end {
                    return Err(corrupt(line_no, format!("booking '{part}' is empty")));
                }
                bookings.push(TimeSlot { start, end });
            }
        }
        let id = cols[0].to_string();
        if rooms
            .insert(
                id.clone(),
                RoomState {
                    id,
                    capacity,
                    temperature_c,
                    light_lux,
                    bookings,
                },
            )
            .is_some()
        {
            return Err(corrupt(line_no, format!("duplicate room {}", cols[0])));
        }
    }
    Ok(CampusSnapshot {
        rooms,
        alert_log: Vec::new(),
    })
}
