//! Report/location join and feature encoding.
//!
//! Feature order is `moment_dow`, `moment_hour`, then one indicator per
//! observed grid cell sorted by name.

use std::collections::{BTreeSet, HashMap};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::LearnError;
use crate::geo::GridCell;
use crate::model::{moment_of, MomentContext, SensorSample, ValenceClass, ValenceReport};

pub const DOW_FEATURE: &str = "moment_dow";
pub const HOUR_FEATURE: &str = "moment_hour";

/// One report placed in time and space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub at: DateTime<Utc>,
    pub moment: MomentContext,
    pub cell: GridCell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub instances: Vec<Instance>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<ValenceClass>,
    /// Reports with no location sample inside the join window.
    pub dropped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            instances: idx.iter().map(|&i| self.instances[i]).collect(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            dropped: 0,
        }
    }
}

/// Dense encoding of `instance` against a feature table. Cells missing from
/// the table leave every indicator at zero.
pub fn encode(feature_names: &[String], instance: &Instance) -> Vec<f64> {
    let cell_name = instance.cell.feature_name();
    feature_names
        .iter()
        .map(|name| match name.as_str() {
            DOW_FEATURE => f64::from(instance.moment.weekday),
            HOUR_FEATURE => f64::from(instance.moment.hour),
            n if n == cell_name => 1.0,
            _ => 0.0,
        })
        .collect()
}

/// Feature family used for population rankings.
pub fn family(feature: &str) -> &str {
    if feature.starts_with("mgrs_") {
        "mgrs_*"
    } else {
        feature
    }
}

fn nearest(track: &[(DateTime<Utc>, GridCell)], at: DateTime<Utc>) -> Option<(Duration, GridCell)> {
    let pos = track.partition_point(|(t, _)| *t < at);
    let before = pos.checked_sub(1).map(|i| track[i]);
    let after = track.get(pos).copied();
    match (before, after) {
        (Some(b), Some(a)) => {
            let (db, da) = (at - b.0, a.0 - at);
            // ties go to the earlier sample
            Some(if db <= da { (db, b.1) } else { (da, a.1) })
        }
        (Some(b), None) => Some((at - b.0, b.1)),
        (None, Some(a)) => Some((a.0 - at, a.1)),
        (None, None) => None,
    }
}

/// Pairs each report with the nearest location sample of the same entity.
/// Reports farther than `window` from every sample are dropped and counted.
pub fn build_features(
    reports: &[ValenceReport],
    samples: &[SensorSample],
    window: Duration,
) -> Result<Dataset, LearnError> {
    let mut tracks: HashMap<&str, Vec<(DateTime<Utc>, GridCell)>> = HashMap::new();
    for s in samples {
        if let Some(p) = s.location() {
            if let Ok(cell) = GridCell::from_latlon(p.lat, p.lon) {
                tracks.entry(s.entity_id.as_str()).or_default().push((s.at, cell));
            }
        }
    }
    for track in tracks.values_mut() {
        track.sort_by_key(|(t, _)| *t);
    }

    let mut instances = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0;
    for r in reports {
        let hit = tracks
            .get(r.entity_id.as_str())
            .and_then(|t| nearest(t, r.at))
            .filter(|(d, _)| *d <= window);
        match hit {
            Some((_, cell)) => {
                instances.push(Instance {
                    at: r.at,
                    moment: moment_of(r.at, &r.tz),
                    cell,
                });
                labels.push(r.class);
            }
            None => dropped += 1,
        }
    }
    if instances.is_empty() {
        return Err(LearnError::NoJoinableInstances);
    }

    let cells: BTreeSet<String> = instances.iter().map(|i| i.cell.feature_name()).collect();
    let mut feature_names = vec![DOW_FEATURE.to_string(), HOUR_FEATURE.to_string()];
    feature_names.extend(cells);
    let rows = instances.iter().map(|i| encode(&feature_names, i)).collect();
    Ok(Dataset {
        feature_names,
        instances,
        rows,
        labels,
        dropped,
    })
}
