//! Prediction maps: the most influential cells of a model with the class
//! probabilities predicted there for one weekday and hour.

use std::fmt::Write as _;

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use valence_core::geo::GridCell;
use valence_core::learn::features::family;
use valence_core::learn::{GbdtModel, Instance};
use valence_core::model::{GeoPoint, MomentContext, ValenceClass};

pub const DEFAULT_TOP_N: usize = 7;

pub const WEEKDAYS: [&str; 7] = [
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
];

/// Monday = 0. Accepts full names, three-letter abbreviations and digits.
pub fn parse_weekday(s: &str) -> Option<u8> {
    let s = s.trim().to_ascii_lowercase();
    if let Ok(n) = s.parse::<u8>() {
        return (n < 7).then_some(n);
    }
    WEEKDAYS
        .iter()
        .position(|d| *d == s || (s.len() == 3 && d.starts_with(&s)))
        .map(|i| i as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapCell {
    pub cell: String,
    /// 1 is the most influential.
    pub rank: usize,
    pub importance: f64,
    /// Negative, neutral, positive.
    pub probabilities: [f64; 3],
    /// Closed lon-lat ring, counter-clockwise.
    pub ring: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMapDoc {
    pub weekday: u8,
    pub hour: u8,
    pub cells: Vec<MapCell>,
    pub warnings: Vec<String>,
}

/// Probabilities for one context, indexed negative/neutral/positive.
pub fn predict_context(model: &GbdtModel, weekday: u8, hour: u8, cell: GridCell) -> [f64; 3] {
    let instance = Instance {
        at: DateTime::UNIX_EPOCH,
        moment: MomentContext { weekday, hour },
        cell,
    };
    model.proba_by_class(&model.encode(&instance))
}

fn ring(cell: &GridCell) -> Option<Vec<[f64; 2]>> {
    let corners: [GeoPoint; 4] = cell.corners().ok()?;
    let mut ring: Vec<[f64; 2]> = corners.iter().map(|p| [p.lon, p.lat]).collect();
    ring.push(ring[0]);
    Some(ring)
}

/// `importance` is per feature, in any order; only `mgrs_*` entries count.
pub fn export_map(
    model: &GbdtModel,
    importance: &[(String, f64)],
    weekday: u8,
    hour: u8,
    top_n: usize,
) -> PredictionMapDoc {
    let mut warnings = Vec::new();
    let mut cells: Vec<(&str, f64)> = importance
        .iter()
        .filter(|(f, _)| family(f) == "mgrs_*")
        .map(|(f, v)| (f.as_str(), *v))
        .collect();
    if cells.is_empty() {
        warnings.push("model has no location features".to_string());
    }
    // stable: equal importance keeps feature-table order
    cells.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut out = Vec::new();
    for (name, imp) in cells.into_iter().take(top_n) {
        let id = name.trim_start_matches("mgrs_");
        let Some(cell) = id.parse::<GridCell>().ok() else {
            warnings.push(format!("unparseable cell feature {name}"));
            continue;
        };
        let Some(ring) = ring(&cell) else {
            warnings.push(format!("cell {id} has no geometry"));
            continue;
        };
        out.push(MapCell {
            cell: id.to_string(),
            rank: out.len() + 1,
            importance: imp,
            probabilities: predict_context(model, weekday, hour, cell),
            ring,
        });
    }
    PredictionMapDoc {
        weekday,
        hour,
        cells: out,
        warnings,
    }
}

impl PredictionMapDoc {
    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .cells
            .iter()
            .map(|c| {
                json!({
                    "type": "Feature",
                    "geometry": {"type": "Polygon", "coordinates": [c.ring]},
                    "properties": {
                        "cell": c.cell,
                        "rank": c.rank,
                        "importance": c.importance,
                        "weekday": WEEKDAYS[self.weekday as usize],
                        "hour": self.hour,
                        "p_negative": c.probabilities[0],
                        "p_neutral": c.probabilities[1],
                        "p_positive": c.probabilities[2],
                    }
                })
            })
            .collect();
        json!({"type": "FeatureCollection", "features": features})
    }

    /// Standalone page: one SVG polygon per cell, coloured by the most
    /// likely class; hovering shows the probabilities, the wheel zooms.
    pub fn to_html(&self) -> String {
        let pts = self.cells.iter().flat_map(|c| c.ring.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in pts {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let (w, h) = (800.0_f64, 600.0_f64);
        let kx = ((y0 + y1) / 2.0).to_radians().cos();
        let span = ((x1 - x0) * kx).max(y1 - y0).max(1e-6) * 1.1;
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let scale = h.min(w) / span;
        let project = |p: &[f64; 2]| (w / 2.0 + (p[0] - cx) * kx * scale, h / 2.0 - (p[1] - cy) * scale);

        let mut shapes = String::new();
        for c in &self.cells {
            let d: Vec<String> = c.ring.iter().map(|p| {
                let (x, y) = project(p);
                format!("{x:.1},{y:.1}")
            }).collect();
            let best = (0..3).max_by(|&a, &b| c.probabilities[a].total_cmp(&c.probabilities[b])).unwrap_or(1);
            let colour = ["#d9534f", "#9e9e9e", "#5cb85c"][best];
            let info = format!(
                "#{} {} | negative {:.3} | neutral {:.3} | positive {:.3}",
                c.rank, c.cell, c.probabilities[0], c.probabilities[1], c.probabilities[2]
            );
            let _ = writeln!(
                shapes,
                r##"<polygon points="{}" fill="{colour}" fill-opacity="0.6" stroke="#333" data-info="{info}"><title>{info}</title></polygon>"##,
                d.join(" ")
            );
        }
        let title = format!(
            "Valence on {} at {:02}:00, top {} cells",
            WEEKDAYS[self.weekday as usize], self.hour, self.cells.len()
        );
        let classes: Vec<&str> = ValenceClass::ALL.iter().map(|c| c.as_str()).collect();
        format!(
            r##"<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>{title}</title>
<style>body{{font-family:sans-serif;margin:1em}}#info{{height:1.5em}}svg{{border:1px solid #ccc;cursor:grab}}</style>
</head><body>
<h3>{title}</h3>
<div id="info">hover a cell ({})</div>
<svg id="map" width="{w}" height="{h}" viewBox="0 0 {w} {h}" xmlns="http://www.w3.org/2000/svg">
{shapes}</svg>
<script>
const svg=document.getElementById('map'),info=document.getElementById('info');
let vb=[0,0,{w},{h}];
svg.querySelectorAll('polygon').forEach(p=>p.addEventListener('mouseenter',()=>info.textContent=p.dataset.info));
svg.addEventListener('wheel',e=>{{e.preventDefault();const f=e.deltaY>0?1.2:1/1.2;const r=svg.getBoundingClientRect();
const mx=vb[0]+(e.clientX-r.left)/r.width*vb[2],my=vb[1]+(e.clientY-r.top)/r.height*vb[3];
vb=[mx-(mx-vb[0])*f,my-(my-vb[1])*f,vb[2]*f,vb[3]*f];svg.setAttribute('viewBox',vb.join(' '));}});
</script>
</body></html>
"##,
            classes.join(" / ")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weekday_names() {
        assert_eq!(parse_weekday("Sunday"), Some(6));
        assert_eq!(parse_weekday("mon"), Some(0));
        assert_eq!(parse_weekday("3"), Some(3));
        assert_eq!(parse_weekday("7"), None);
        assert_eq!(parse_weekday("someday"), None);
    }

    #[test]
    fn ring_is_closed_lon_lat() {
        let cell: GridCell = "29SMC8785".parse().unwrap();
        let r = ring(&cell).unwrap();
        assert_eq!(r.len(), 5);
        assert_eq!(r[0], r[4]);
        // Lisbon: lon around -9, lat around 38.7
        assert!(r.iter().all(|p| (-9.3..-9.0).contains(&p[0]) && (38.6..38.8).contains(&p[1])));
        // counter-clockwise: positive shoelace area
        let area: f64 = r.windows(2).map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1]).sum();
        assert!(area > 0.0);
    }
}
