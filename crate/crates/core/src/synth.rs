//! Seeded synthetic entities whose valence is a known function of the
//! report context. Used by tests, the acceptance suite and CLI demos.

use chrono::{DateTime, Datelike, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    EntityProfile, Gender, GeoPoint, Ingested, Reading, ReportOrigin, SensorSample, ValenceClass,
    ValenceReport, Zone,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    /// Label depends on the local weekday only.
    Weekday,
    /// Label depends on the place only.
    Location,
    /// Label depends on the hour of day only.
    Hour,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySpec {
    pub entity_id: String,
    pub driver: Driver,
    pub reports: usize,
    /// Probability that a label is replaced by a different class.
    pub noise: f64,
    pub places: usize,
    pub center: GeoPoint,
    pub start: DateTime<Utc>,
}

impl EntitySpec {
    pub fn new(entity_id: &str, driver: Driver, reports: usize) -> Self {
        EntitySpec {
            entity_id: entity_id.to_string(),
            driver,
            reports,
            noise: 0.05,
            places: 6,
            center: GeoPoint {
                lat: 38.7223,
                lon: -9.1393,
            },
            start: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

/// Weekday labels, Monday first; Sunday is always positive.
pub const WEEKDAY_LABELS: [ValenceClass; 7] = [
    ValenceClass::Negative,
    ValenceClass::Neutral,
    ValenceClass::Negative,
    ValenceClass::Neutral,
    ValenceClass::Positive,
    ValenceClass::Positive,
    ValenceClass::Positive,
];

/// Place `i` is 3 km per step from the center along a spiral of offsets,
/// so every place falls in its own 1 km cell.
pub fn place(center: GeoPoint, i: usize) -> GeoPoint {
    let ring = (i / 4 + 1) as f64;
    let (dy, dx) = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][i % 4];
    let km = 3.0 * ring;
    let dlat = dy * km / 111.32;
    let dlon = dx * km / (111.32 * center.lat.to_radians().cos());
    GeoPoint {
        lat: center.lat + dlat + 0.0004,
        lon: center.lon + dlon + 0.0004,
    }
}

fn truth(driver: Driver, weekday: usize, hour: u32, place: usize) -> ValenceClass {
    match driver {
        Driver::Weekday => WEEKDAY_LABELS[weekday],
        Driver::Location => ValenceClass::ALL[place % 3],
        Driver::Hour => match hour {
            0..=7 => ValenceClass::Neutral,
            8..=15 => ValenceClass::Negative,
            _ => ValenceClass::Positive,
        },
    }
}

/// Reports spread over consecutive days, each with one location sample a
/// few minutes before it. Places are drawn independently of time.
pub fn generate_entity(spec: &EntitySpec, seed: u64) -> Ingested {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_day = 8usize;
    let days = spec.reports.div_ceil(per_day);
    let mut reports = Vec::with_capacity(spec.reports);
    let mut samples = Vec::with_capacity(spec.reports);
    let places: Vec<GeoPoint> = (0..spec.places).map(|i| place(spec.center, i)).collect();
    for d in 0..days {
        // one report per 3 h slot, at least 10 min apart
        let minutes: Vec<i64> = (0..per_day as i64).map(|s| s * 180 + rng.gen_range(0..170)).collect();
        for m in minutes {
            if reports.len() == spec.reports {
                break;
            }
            let at = spec.start + Duration::days(d as i64) + Duration::minutes(m) + Duration::seconds(30);
            let p = rng.gen_range(0..spec.places);
            let mut class = truth(spec.driver, at.weekday().num_days_from_monday() as usize, m as u32 / 60, p);
            if rng.gen_bool(spec.noise) {
                let others: Vec<ValenceClass> = ValenceClass::ALL.into_iter().filter(|&c| c != class).collect();
                class = *others.choose(&mut rng).expect("two others");
            }
            samples.push(SensorSample {
                entity_id: spec.entity_id.clone(),
                at: at - Duration::seconds(rng.gen_range(10..120)),
                reading: Reading::Location(places[p]),
                accuracy_m: 15.0,
                synthetic: false,
            });
            reports.push(ValenceReport {
                entity_id: spec.entity_id.clone(),
                at,
                tz: Zone::utc(),
                class,
                origin: ReportOrigin::Button,
            });
        }
    }
    samples.sort_by_key(|s| s.at);
    let age = 18 + (seed % 50) as u32;
    Ingested {
        reports,
        samples,
        profiles: vec![EntityProfile {
            entity_id: spec.entity_id.clone(),
            age_years: Some(age),
            gender: Some(if seed % 2 == 0 { Gender::Female } else { Gender::Male }),
        }],
        diagnostics: Vec::new(),
    }
}

/// Merges entities generated with seeds `seed, seed + 1, ...`.
pub fn generate_population(specs: &[EntitySpec], seed: u64) -> Ingested {
    let mut all = Ingested::default();
    for (i, spec) in specs.iter().enumerate() {
        let one = generate_entity(spec, seed.wrapping_add(i as u64));
        all.reports.extend(one.reports);
        all.samples.extend(one.samples);
        all.profiles.extend(one.profiles);
    }
    all
}
