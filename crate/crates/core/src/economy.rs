//! Collection-time data economy and its a-posteriori reconstruction.
//!
//! A location sample is dropped when it moved less than `min_move_m` from the
//! last retained sample *and* arrived less than `sustain_interval_s` after
//! it. Activity samples are dropped when they repeat the last retained label
//! within the sustain interval. Reconstruction re-emits the last retained
//! value on the sustain grid, so the rhythm used for filtering must be the
//! rhythm used for reconstruction.

use std::collections::HashMap;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::geo::haversine_m;
use crate::model::{Reading, SensorSample};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EconomyError {
    #[error("invalid collection rhythm: {0}")]
    InvalidRhythm(String),
    #[error("samples for entity `{entity}` are not sorted by time (index {index})")]
    Unsorted { entity: String, index: usize },
    #[error("reconstruction rhythm differs from the rhythm that economized the data")]
    RhythmMismatch,
    #[error("horizon {horizon} precedes the last retained sample at {last}")]
    HorizonTooEarly {
        horizon: DateTime<Utc>,
        last: DateTime<Utc>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectionRhythm {
    pub active_s: f64,
    pub inactive_s: f64,
    pub duty_cycle: f64,
    pub min_fetch_gap_ms: f64,
    pub sustain_interval_s: f64,
    pub min_move_m: f64,
}

impl Default for CollectionRhythm {
    fn default() -> Self {
        CollectionRhythm {
            active_s: 2.0,
            inactive_s: 8.0,
            duty_cycle: 0.20,
            min_fetch_gap_ms: 100.0,
            sustain_interval_s: 900.0,
            min_move_m: 10.0,
        }
    }
}

impl CollectionRhythm {
    pub fn validate(&self) -> Result<(), EconomyError> {
        let fields = [
            ("active_s", self.active_s),
            ("inactive_s", self.inactive_s),
            ("duty_cycle", self.duty_cycle),
            ("min_fetch_gap_ms", self.min_fetch_gap_ms),
            ("sustain_interval_s", self.sustain_interval_s),
            ("min_move_m", self.min_move_m),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(EconomyError::InvalidRhythm(format!("{name} must be > 0, got {v}")));
            }
        }
        let expected = self.active_s / (self.active_s + self.inactive_s);
        if (expected - self.duty_cycle).abs() > 1e-9 {
            return Err(EconomyError::InvalidRhythm(format!(
                "duty_cycle {} disagrees with active/(active+inactive) = {expected}",
                self.duty_cycle
            )));
        }
        if self.sustain_interval_s.fract() != 0.0 {
            return Err(EconomyError::InvalidRhythm(
                "sustain_interval_s must be a whole number of seconds".into(),
            ));
        }
        Ok(())
    }

    /// Sampling frequency in Hz implied by one active+inactive period.
    pub fn frequency_hz(&self) -> f64 {
        1.0 / (self.active_s + self.inactive_s)
    }

    pub fn sustain(&self) -> Duration {
        Duration::seconds(self.sustain_interval_s as i64)
    }
}

/// Filter output tagged with the rhythm that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Economized {
    pub rhythm: CollectionRhythm,
    pub samples: Vec<SensorSample>,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Channel {
    Location,
    Activity,
}

fn channel(s: &SensorSample) -> Channel {
    match s.reading {
        Reading::Location(_) => Channel::Location,
        Reading::Activity(_) => Channel::Activity,
    }
}

fn check_sorted(samples: &[SensorSample]) -> Result<(), EconomyError> {
    let mut last: HashMap<&str, DateTime<Utc>> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(prev) = last.insert(&s.entity_id, s.at) {
            if s.at < prev {
                return Err(EconomyError::Unsorted {
                    entity: s.entity_id.clone(),
                    index: i,
                });
            }
        }
    }
    Ok(())
}

/// Whether `next` is redundant given the last retained sample.
fn redundant(kept: &SensorSample, next: &SensorSample, rhythm: &CollectionRhythm) -> bool {
    let within_sustain = next.at - kept.at < rhythm.sustain();
    match (&kept.reading, &next.reading) {
        (Reading::Location(a), Reading::Location(b)) => {
            within_sustain && haversine_m(*a, *b) < rhythm.min_move_m
        }
        (Reading::Activity(a), Reading::Activity(b)) => within_sustain && a == b,
        _ => false,
    }
}

pub fn economy_filter(
    samples: &[SensorSample],
    rhythm: &CollectionRhythm,
) -> Result<Economized, EconomyError> {
    rhythm.validate()?;
    check_sorted(samples)?;
    let mut last: HashMap<(&str, Channel), &SensorSample> = HashMap::new();
    let mut out = Vec::new();
    for s in samples {
        let key = (s.entity_id.as_str(), channel(s));
        match last.get(&key) {
            Some(kept) if redundant(kept, s, rhythm) => {}
            _ => {
                last.insert(key, s);
                out.push(s.clone());
            }
        }
    }
    Ok(Economized {
        rhythm: *rhythm,
        samples: out,
    })
}

/// Fills the gaps of economized data on the sustain grid up to `horizon`.
/// Synthetic samples sit at exactly `t_retained + k * sustain_interval_s`,
/// strictly before the next retained sample of their channel, and at or
/// before the horizon after the last one. Output is sorted by entity, then
/// time.
pub fn reconstruct(
    retained: &Economized,
    rhythm: &CollectionRhythm,
    horizon: DateTime<Utc>,
) -> Result<Vec<SensorSample>, EconomyError> {
    if retained.rhythm != *rhythm {
        return Err(EconomyError::RhythmMismatch);
    }
    rhythm.validate()?;
    check_sorted(&retained.samples)?;
    if let Some(last) = retained.samples.iter().map(|s| s.at).max() {
        if horizon < last {
            return Err(EconomyError::HorizonTooEarly { horizon, last });
        }
    }

    let step = rhythm.sustain();
    let mut streams: Vec<((&str, Channel), Vec<&SensorSample>)> = Vec::new();
    let mut index: HashMap<(&str, Channel), usize> = HashMap::new();
    for s in &retained.samples {
        let key = (s.entity_id.as_str(), channel(s));
        let i = *index.entry(key).or_insert_with(|| {
            streams.push((key, Vec::new()));
            streams.len() - 1
        });
        streams[i].1.push(s);
    }

    let mut out: Vec<SensorSample> = Vec::new();
    for (_, stream) in &streams {
        for (i, s) in stream.iter().enumerate() {
            out.push((*s).clone());
            let next = stream.get(i + 1).map(|n| n.at);
            let mut k = 1;
            loop {
                let t = s.at + step * k;
                let inside = match next {
                    Some(n) => t < n,
                    None => t <= horizon,
                };
                if !inside {
                    break;
                }
                out.push(SensorSample {
                    at: t,
                    synthetic: true,
                    ..(*s).clone()
                });
                k += 1;
            }
        }
    }
    out.sort_by(|a, b| a.entity_id.cmp(&b.entity_id).then(a.at.cmp(&b.at)));
    Ok(out)
}

/// Filter then reconstruct up to the last sample's time.
pub fn economize_and_reconstruct(
    samples: &[SensorSample],
    rhythm: &CollectionRhythm,
) -> Result<Vec<SensorSample>, EconomyError> {
    let filtered = economy_filter(samples, rhythm)?;
    let Some(horizon) = samples.iter().map(|s| s.at).max() else {
        return Ok(Vec::new());
    };
    reconstruct(&filtered, rhythm, horizon)
}

fn hold_value<'a>(stream: &[&'a SensorSample], t: DateTime<Utc>) -> Option<&'a SensorSample> {
    let idx = stream.partition_point(|s| s.at <= t);
    idx.checked_sub(1).map(|i| stream[i])
}

fn same_value(a: &SensorSample, b: &SensorSample, tolerance_m: f64) -> bool {
    match (&a.reading, &b.reading) {
        (Reading::Location(p), Reading::Location(q)) => haversine_m(*p, *q) <= tolerance_m,
        (Reading::Activity(x), Reading::Activity(y)) => x == y,
        _ => false,
    }
}

/// True when filtering then reconstructing reproduces the original stream
/// sampled-and-held on the sustain grid, within `min_move_m` for positions.
pub fn roundtrip_check(original: &[SensorSample], rhythm: &CollectionRhythm) -> bool {
    let Ok(rebuilt) = economize_and_reconstruct(original, rhythm) else {
        return false;
    };
    let step = rhythm.sustain();

    let split = |xs: &[SensorSample]| {
        let mut m: HashMap<(String, Channel), Vec<SensorSample>> = HashMap::new();
        for s in xs {
            m.entry((s.entity_id.clone(), channel(s))).or_default().push(s.clone());
        }
        m
    };
    let orig = split(original);
    let rec = split(&rebuilt);
    if orig.len() != rec.len() {
        return false;
    }
    for (key, o) in &orig {
        let Some(r) = rec.get(key) else {
            return false;
        };
        let o_refs: Vec<&SensorSample> = o.iter().collect();
        let r_refs: Vec<&SensorSample> = r.iter().collect();
        let start = o[0].at;
        let end = o[o.len() - 1].at;
        let mut t = start;
        while t <= end {
            match (hold_value(&o_refs, t), hold_value(&r_refs, t)) {
                (Some(a), Some(b)) if same_value(a, b, rhythm.min_move_m) => {}
                _ => return false,
            }
            t += step;
        }
        // every original observation is represented within tolerance
        for s in o {
            match hold_value(&r_refs, s.at) {
                Some(b) if same_value(s, b, rhythm.min_move_m) => {}
                _ => return false,
            }
        }
    }
    true
}
