//! MGRS grid cells at 1 km precision (AA lettering scheme).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::utm::{self, Utm};
use super::GeoError;
use crate::model::GeoPoint;

const BANDS: &[u8; 20] = b"CDEFGHJKLMNPQRSTUVWX";
const ROW_LETTERS: &[u8; 20] = b"ABCDEFGHJKLMNPQRSTUV";
const COLUMN_SETS: [&[u8; 8]; 3] = [b"ABCDEFGH", b"JKLMNPQR", b"STUVWXYZ"];

pub const MIN_LAT: f64 = -80.0;
pub const MAX_LAT: f64 = 84.0;

/// A 1000 m x 1000 m MGRS square, e.g. `18TWL8511`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridCell {
    pub zone: u8,
    pub band: char,
    pub square: [char; 2],
    pub easting_km: u8,
    pub northing_km: u8,
}

fn band_index(lat: f64) -> usize {
    (((lat - MIN_LAT) / 8.0).floor() as isize).clamp(0, 19) as usize
}

fn band_lat_range(band: char) -> Option<(f64, f64)> {
    let i = BANDS.iter().position(|&b| b as char == band)?;
    let lo = MIN_LAT + 8.0 * i as f64;
    let hi = if band == 'X' { MAX_LAT } else { lo + 8.0 };
    Some((lo, hi))
}

fn column_set(zone: u8) -> &'static [u8; 8] {
    COLUMN_SETS[(zone as usize - 1) % 3]
}

fn row_offset(zone: u8) -> usize {
    if zone % 2 == 0 {
        5
    } else {
        0
    }
}

/// Longitude span a zone covers inside a latitude band.
fn zone_lon_range(zone: u8, band: char) -> (f64, f64) {
    match (zone, band) {
        (31, 'V') => (0.0, 3.0),
        (32, 'V') => (3.0, 12.0),
        (31, 'X') => (0.0, 9.0),
        (33, 'X') => (9.0, 21.0),
        (35, 'X') => (21.0, 33.0),
        (37, 'X') => (33.0, 42.0),
        _ => {
            let lo = zone as f64 * 6.0 - 186.0;
            (lo, lo + 6.0)
        }
    }
}

impl GridCell {
    /// Encodes a coordinate; UTM easting and northing are truncated to whole
    /// kilometres.
    pub fn from_latlon(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(GeoError::NonFinite);
        }
        if !(MIN_LAT..=MAX_LAT).contains(&lat) {
            return Err(GeoError::OutsideMgrsBand(lat));
        }
        if !(lon > -180.0 && lon <= 180.0) {
            return Err(GeoError::LongitudeRange(lon));
        }
        let u = utm::forward(lat, lon);
        Ok(Self::from_utm(&u, BANDS[band_index(lat)] as char))
    }

    fn from_utm(u: &Utm, band: char) -> Self {
        let e = u.easting.floor() as i64;
        let n = u.northing.floor() as i64;
        let col = (e / 100_000) as usize;
        let row = ((n / 100_000) as usize + row_offset(u.zone)) % 20;
        // columns 1..8 exist within a zone; clamp guards the far edges
        let col_letter = column_set(u.zone)[col.clamp(1, 8) - 1] as char;
        GridCell {
            zone: u.zone,
            band,
            square: [col_letter, ROW_LETTERS[row] as char],
            easting_km: ((e % 100_000) / 1000) as u8,
            northing_km: ((n % 100_000) / 1000) as u8,
        }
    }

    pub fn is_north(&self) -> bool {
        self.band >= 'N'
    }

    /// South-west corner of the square in UTM metres.
    pub fn utm_origin(&self) -> Result<Utm, GeoError> {
        let bad = || GeoError::BadCell(self.to_string());
        let col = column_set(self.zone)
            .iter()
            .position(|&c| c as char == self.square[0])
            .ok_or_else(bad)?
            + 1;
        let row_raw = ROW_LETTERS
            .iter()
            .position(|&c| c as char == self.square[1])
            .ok_or_else(bad)?;
        let row = (row_raw + 20 - row_offset(self.zone)) % 20;
        let (lat_lo, lat_hi) = band_lat_range(self.band).ok_or_else(bad)?;
        let easting = col as f64 * 100_000.0 + self.easting_km as f64 * 1000.0;
        let base = row as f64 * 100_000.0 + self.northing_km as f64 * 1000.0;

        // The row letter repeats every 2000 km; pick the repetition whose
        // centre lies in (or closest to) the latitude band.
        let north = self.is_north();
        let mut best: Option<(f64, f64)> = None;
        for k in 0..6 {
            let northing = base + k as f64 * 2_000_000.0;
            if northing > 10_000_000.0 {
                break;
            }
            let u = Utm {
                zone: self.zone,
                north,
                easting: easting + 500.0,
                northing: northing + 500.0,
            };
            let (lat, _) = utm::inverse(&u);
            let miss = if lat < lat_lo {
                lat_lo - lat
            } else if lat > lat_hi {
                lat - lat_hi
            } else {
                0.0
            };
            if best.map_or(true, |(m, _)| miss < m) {
                best = Some((miss, northing));
            }
        }
        let (miss, northing) = best.ok_or_else(bad)?;
        if miss > 1.0 {
            return Err(bad());
        }
        Ok(Utm {
            zone: self.zone,
            north,
            easting,
            northing,
        })
    }

    /// Corners (lat, lon) counter-clockwise from the south-west, computed
    /// by inverse-projecting the four UTM corners.
    pub fn corners(&self) -> Result<[GeoPoint; 4], GeoError> {
        let o = self.utm_origin()?;
        let at = |de: f64, dn: f64| {
            let (lat, lon) = utm::inverse(&Utm {
                easting: o.easting + de,
                northing: o.northing + dn,
                ..o
            });
            GeoPoint { lat, lon }
        };
        Ok([
            at(0.0, 0.0),
            at(1000.0, 0.0),
            at(1000.0, 1000.0),
            at(0.0, 1000.0),
        ])
    }

    /// A point that encodes back to this cell. Usually the square's centre;
    /// for squares clipped by a band or zone boundary, a point inside the
    /// clipped part.
    pub fn representative_point(&self) -> Result<GeoPoint, GeoError> {
        let o = self.utm_origin()?;
        let probe = |de: f64, dn: f64| {
            let (lat, lon) = utm::inverse(&Utm {
                easting: o.easting + de,
                northing: o.northing + dn,
                ..o
            });
            GeoPoint { lat, lon }
        };
        let hits = |p: GeoPoint| GridCell::from_latlon(p.lat, p.lon).ok() == Some(*self);

        let centre = probe(500.0, 500.0);
        if hits(centre) {
            return Ok(centre);
        }

        // clamp into the band and the zone's longitude span
        let (lat_lo, lat_hi) = band_lat_range(self.band).ok_or(GeoError::BadCell(self.to_string()))?;
        let (lon_lo, lon_hi) = zone_lon_range(self.zone, self.band);
        let eps = 1e-7;
        let clamped = GeoPoint {
            lat: centre.lat.clamp(lat_lo + eps, lat_hi - eps),
            lon: centre.lon.clamp(lon_lo + eps, lon_hi - eps),
        };
        if hits(clamped) {
            return Ok(clamped);
        }

        for steps in [16usize, 64, 256] {
            let h = 1000.0 / steps as f64;
            let mut best: Option<(f64, GeoPoint)> = None;
            for i in 0..steps {
                for j in 0..steps {
                    let de = (i as f64 + 0.5) * h;
                    let dn = (j as f64 + 0.5) * h;
                    let p = probe(de, dn);
                    if hits(p) {
                        let d = (de - 500.0).powi(2) + (dn - 500.0).powi(2);
                        if best.map_or(true, |(bd, _)| d < bd) {
                            best = Some((d, p));
                        }
                    }
                }
            }
            if let Some((_, p)) = best {
                return Ok(p);
            }
        }
        Err(GeoError::BadCell(self.to_string()))
    }

    /// Feature name used by the learner, e.g. `mgrs_18TWL8511`.
    pub fn feature_name(&self) -> String {
        format!("mgrs_{self}")
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:02}{}{}{}{:02}{:02}",
            self.zone, self.band, self.square[0], self.square[1], self.easting_km, self.northing_km
        )
    }
}

impl FromStr for GridCell {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GeoError::BadCell(s.to_string());
        let s = s.trim();
        let s = s.strip_prefix("mgrs_").unwrap_or(s);
        let b = s.as_bytes();
        let digits = b.iter().take_while(|c| c.is_ascii_digit()).count();
        if !(1..=2).contains(&digits) || b.len() != digits + 7 {
            return Err(bad());
        }
        let zone: u8 = s[..digits].parse().map_err(|_| bad())?;
        if !(1..=60).contains(&zone) {
            return Err(bad());
        }
        let band = (b[digits] as char).to_ascii_uppercase();
        if !BANDS.contains(&(band as u8)) {
            return Err(bad());
        }
        let c0 = (b[digits + 1] as char).to_ascii_uppercase();
        let c1 = (b[digits + 2] as char).to_ascii_uppercase();
        if !column_set(zone).contains(&(c0 as u8)) || !ROW_LETTERS.contains(&(c1 as u8)) {
            return Err(bad());
        }
        let num = &s[digits + 3..];
        if !num.bytes().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        Ok(GridCell {
            zone,
            band,
            square: [c0, c1],
            easting_km: num[..2].parse().map_err(|_| bad())?,
            northing_km: num[2..].parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for GridCell {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GridCell {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Free-function form of [`GridCell::from_latlon`].
pub fn latlon_to_cell(lat: f64, lon: f64) -> Result<GridCell, GeoError> {
    GridCell::from_latlon(lat, lon)
}
