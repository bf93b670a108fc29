//! Domain types, event-log ingestion and the report debounce rule.
//!
//! The event log is newline-delimited JSON. Every line carries a `type`
//! field selecting one of three record shapes:
//!
//! ```text
//! {"type":"report","entity":"e1","at":"2019-06-02T07:00:00Z","tz":"Europe/Lisbon","class":"positive","origin":"button"}
//! {"type":"sample","entity":"e1","at":"2019-06-02T07:00:03Z","kind":"location","lat":38.72,"lon":-9.14,"accuracy_m":12.0}
//! {"type":"sample","entity":"e1","at":"2019-06-02T07:00:03Z","kind":"activity","activity":"walking"}
//! {"type":"profile","entity":"e1","age":34,"gender":"female"}
//! ```
//!
//! `origin` defaults to `button`, `accuracy_m` to `0`, and `synthetic` (only
//! written by reconstruction) to `false`. `tz` accepts IANA names and fixed
//! offsets such as `UTC+02:00`. Weekdays are numbered from Monday = 0.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;
use std::time::Duration;

use chrono::{DateTime, Datelike, FixedOffset, TimeZone, Timelike, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unreadable event stream: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown time zone `{0}`")]
    UnknownZone(String),
    #[error("reports for entity `{entity}` are not sorted by time (index {index})")]
    Unsorted { entity: String, index: usize },
    #[error("debounce window must be positive")]
    ZeroWindow,
}

/// Three-valued emotional valence, ordered Negative < Neutral < Positive.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum ValenceClass {
    Negative,
    Neutral,
    Positive,
}

impl ValenceClass {
    pub const ALL: [ValenceClass; 3] = [Self::Negative, Self::Neutral, Self::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Negative => "negative",
            Self::Neutral => "neutral",
            Self::Positive => "positive",
        }
    }

    /// Ordinal coding used by per-report statistics: -1, 0, +1.
    pub fn signed(self) -> f64 {
        self.index() as f64 - 1.0
    }
}

impl fmt::Display for ValenceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ValenceClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "negative" => Ok(Self::Negative),
            "neutral" => Ok(Self::Neutral),
            "positive" => Ok(Self::Positive),
            other => Err(format!("unknown valence class `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportOrigin {
    Button,
    DetectedText,
}

/// A calendar time zone: an IANA zone or a fixed UTC offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    Iana(Tz),
    Fixed(FixedOffset),
}

impl Zone {
    pub fn utc() -> Self {
        Zone::Iana(Tz::UTC)
    }
}

impl FromStr for Zone {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let name = s.trim();
        if let Ok(tz) = name.parse::<Tz>() {
            return Ok(Zone::Iana(tz));
        }
        parse_fixed_offset(name)
            .map(Zone::Fixed)
            .ok_or_else(|| ModelError::UnknownZone(s.to_string()))
    }
}

// Accepts `UTC+02:00`, `GMT-3`, `+0530`, `-07:00`.
fn parse_fixed_offset(s: &str) -> Option<FixedOffset> {
    let rest = s
        .strip_prefix("UTC")
        .or_else(|| s.strip_prefix("GMT"))
        .unwrap_or(s);
    let (sign, digits) = match rest.chars().next()? {
        '+' => (1, &rest[1..]),
        '-' => (-1, &rest[1..]),
        _ => return None,
    };
    let (h, m) = match digits.split_once(':') {
        Some((h, m)) => (h, m),
        None if digits.len() == 4 => digits.split_at(2),
        None => (digits, "0"),
    };
    let h: i32 = h.parse().ok()?;
    let m: i32 = m.parse().ok()?;
    if !(0..=14).contains(&h) || !(0..60).contains(&m) {
        return None;
    }
    FixedOffset::east_opt(sign * (h * 3600 + m * 60))
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Zone::Iana(tz) => f.write_str(tz.name()),
            Zone::Fixed(off) => {
                let secs = off.local_minus_utc();
                let sign = if secs < 0 { '-' } else { '+' };
                let secs = secs.abs();
                write!(f, "UTC{}{:02}:{:02}", sign, secs / 3600, (secs % 3600) / 60)
            }
        }
    }
}

impl Serialize for Zone {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Zone {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValenceReport {
    pub entity_id: String,
    pub at: DateTime<Utc>,
    pub tz: Zone,
    pub class: ValenceClass,
    pub origin: ReportOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Reading {
    Location(GeoPoint),
    Activity(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSample {
    pub entity_id: String,
    pub at: DateTime<Utc>,
    pub reading: Reading,
    pub accuracy_m: f64,
    /// Set on samples emitted by reconstruction rather than observed.
    pub synthetic: bool,
}

impl SensorSample {
    pub fn location(&self) -> Option<GeoPoint> {
        match self.reading {
            Reading::Location(p) => Some(p),
            Reading::Activity(_) => None,
        }
    }

    pub fn is_location(&self) -> bool {
        matches!(self.reading, Reading::Location(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityProfile {
    pub entity_id: String,
    pub age_years: Option<u32>,
    pub gender: Option<Gender>,
}

impl EntityProfile {
    /// Entities without both age and gender still learn; they are only left
    /// out of demographic comparisons.
    pub fn demographic_eligible(&self) -> bool {
        self.age_years.is_some() && self.gender.is_some()
    }
}

/// Local weekday (Monday = 0) and hour of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MomentContext {
    pub weekday: u8,
    pub hour: u8,
}

pub fn moment_of(at: DateTime<Utc>, tz: &Zone) -> MomentContext {
    let (weekday, hour) = match tz {
        Zone::Iana(z) => {
            let local = z.from_utc_datetime(&at.naive_utc());
            (local.weekday(), local.hour())
        }
        Zone::Fixed(off) => {
            let local = off.from_utc_datetime(&at.naive_utc());
            (local.weekday(), local.hour())
        }
    };
    MomentContext {
        weekday: weekday.num_days_from_monday() as u8,
        hour: hour as u8,
    }
}

/// Parses the zone name and delegates to [`moment_of`].
pub fn moment_of_named(at: DateTime<Utc>, tz: &str) -> Result<MomentContext, ModelError> {
    let zone: Zone = tz.parse()?;
    Ok(moment_of(at, &zone))
}

/// Keeps only the last button report of every burst whose consecutive gaps
/// are shorter than `window`. Detected-text reports pass through untouched.
///
/// Input must be time-sorted per entity; the relative order of surviving
/// reports is preserved.
pub fn debounce_reports(
    reports: &[ValenceReport],
    window: Duration,
) -> Result<Vec<ValenceReport>, ModelError> {
    if window.is_zero() {
        return Err(ModelError::ZeroWindow);
    }
    let window = chrono::Duration::from_std(window).map_err(|_| ModelError::ZeroWindow)?;

    let mut last_seen: HashMap<&str, DateTime<Utc>> = HashMap::new();
    for (i, r) in reports.iter().enumerate() {
        if let Some(prev) = last_seen.insert(&r.entity_id, r.at) {
            if r.at < prev {
                return Err(ModelError::Unsorted {
                    entity: r.entity_id.clone(),
                    index: i,
                });
            }
        }
    }

    // A button report survives iff the next button report of the same
    // entity is at least `window` later (or there is none).
    let mut next_button: HashMap<&str, DateTime<Utc>> = HashMap::new();
    let mut keep = vec![true; reports.len()];
    for (i, r) in reports.iter().enumerate().rev() {
        if r.origin != ReportOrigin::Button {
            continue;
        }
        if let Some(next) = next_button.get(r.entity_id.as_str()) {
            if *next - r.at < window {
                keep[i] = false;
            }
        }
        next_button.insert(&r.entity_id, r.at);
    }

    Ok(reports
        .iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then(|| r.clone()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ingested {
    pub reports: Vec<ValenceReport>,
    pub samples: Vec<SensorSample>,
    pub profiles: Vec<EntityProfile>,
    pub diagnostics: Vec<Diagnostic>,
}

impl Ingested {
    /// Distinct entity ids across reports, samples and profiles, sorted.
    pub fn entity_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .reports
            .iter()
            .map(|r| r.entity_id.clone())
            .chain(self.samples.iter().map(|s| s.entity_id.clone()))
            .chain(self.profiles.iter().map(|p| p.entity_id.clone()))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn record_count(&self) -> usize {
        self.reports.len() + self.samples.len() + self.profiles.len()
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum RawRecord {
    Report {
        entity: String,
        at: DateTime<Utc>,
        tz: String,
        class: ValenceClass,
        #[serde(default = "default_origin")]
        origin: ReportOrigin,
    },
    Sample {
        entity: String,
        at: DateTime<Utc>,
        kind: RawKind,
        lat: Option<f64>,
        lon: Option<f64>,
        activity: Option<String>,
        #[serde(default)]
        accuracy_m: f64,
        #[serde(default)]
        synthetic: bool,
    },
    Profile {
        entity: String,
        age: Option<u32>,
        gender: Option<Gender>,
    },
}

fn default_origin() -> ReportOrigin {
    ReportOrigin::Button
}

#[derive(Debug, Deserialize, Serialize, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum RawKind {
    Location,
    Activity,
}

enum Record {
    Report(ValenceReport),
    Sample(SensorSample),
    Profile(EntityProfile),
}

fn parse_line(line: &str) -> Result<Record, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    match raw {
        RawRecord::Report {
            entity,
            at,
            tz,
            class,
            origin,
        } => {
            let tz = tz.parse::<Zone>().map_err(|e| e.to_string())?;
            Ok(Record::Report(ValenceReport {
                entity_id: entity,
                at,
                tz,
                class,
                origin,
            }))
        }
        RawRecord::Sample {
            entity,
            at,
            kind,
            lat,
            lon,
            activity,
            accuracy_m,
            synthetic,
        } => {
            if !accuracy_m.is_finite() || accuracy_m < 0.0 {
                return Err(format!("accuracy_m must be finite and >= 0, got {accuracy_m}"));
            }
            let reading = match (kind, lat, lon) {
                (RawKind::Location, Some(lat), Some(lon)) => {
                    if !(-90.0..=90.0).contains(&lat) {
                        return Err(format!("latitude {lat} out of range"));
                    }
                    if !(lon > -180.0 && lon <= 180.0) {
                        return Err(format!("longitude {lon} out of range"));
                    }
                    Reading::Location(GeoPoint { lat, lon })
                }
                (RawKind::Location, _, _) => {
                    return Err("location sample requires lat and lon".into())
                }
                (RawKind::Activity, None, None) => {
                    Reading::Activity(activity.unwrap_or_default())
                }
                (RawKind::Activity, _, _) => {
                    return Err("activity sample must not carry lat/lon".into())
                }
            };
            Ok(Record::Sample(SensorSample {
                entity_id: entity,
                at,
                reading,
                accuracy_m,
                synthetic,
            }))
        }
        RawRecord::Profile {
            entity,
            age,
            gender,
        } => Ok(Record::Profile(EntityProfile {
            entity_id: entity,
            age_years: age,
            gender,
        })),
    }
}

/// Parses an event log. Blank lines and `#` comment lines are ignored;
/// malformed lines become diagnostics and parsing continues.
pub fn ingest_events<R: BufRead>(reader: R) -> Result<Ingested, ModelError> {
    let mut out = Ingested::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match parse_line(trimmed) {
            Ok(Record::Report(r)) => out.reports.push(r),
            Ok(Record::Sample(s)) => out.samples.push(s),
            Ok(Record::Profile(p)) => out.profiles.push(p),
            Err(message) => out.diagnostics.push(Diagnostic {
                line: i + 1,
                message,
            }),
        }
    }
    Ok(out)
}

/// Serializes a report as one event-log line.
pub fn report_line(r: &ValenceReport) -> String {
    serde_json::json!({
        "type": "report",
        "entity": r.entity_id,
        "at": r.at.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true),
        "tz": r.tz.to_string(),
        "class": r.class,
        "origin": r.origin,
    })
    .to_string()
}

/// Serializes a sample as one event-log line.
pub fn sample_line(s: &SensorSample) -> String {
    let mut v = serde_json::json!({
        "type": "sample",
        "entity": s.entity_id,
        "at": s.at.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true),
    });
    let obj = v.as_object_mut().expect("object literal");
    match &s.reading {
        Reading::Location(p) => {
            obj.insert("kind".into(), "location".into());
            obj.insert("lat".into(), p.lat.into());
            obj.insert("lon".into(), p.lon.into());
        }
        Reading::Activity(a) => {
            obj.insert("kind".into(), "activity".into());
            obj.insert("activity".into(), a.clone().into());
        }
    }
    obj.insert("accuracy_m".into(), s.accuracy_m.into());
    if s.synthetic {
        obj.insert("synthetic".into(), true.into());
    }
    v.to_string()
}

/// Serializes a profile as one event-log line.
pub fn profile_line(p: &EntityProfile) -> String {
    serde_json::json!({
        "type": "profile",
        "entity": p.entity_id,
        "age": p.age_years,
        "gender": p.gender,
    })
    .to_string()
}
