//! Geospatial encoding and location clustering.

pub mod hdbscan;
pub mod mgrs;
pub mod utm;
mod validity;

pub use hdbscan::{
    hdbscan, search_cluster_params, ClusterParams, Clustering, ParamSearch, SearchTrial,
    MIN_SAMPLES_CANDIDATES,
};
pub use mgrs::{latlon_to_cell, GridCell};
pub use validity::dbcv;

use crate::model::GeoPoint;

/// Mean Earth radius (IUGG), metres.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, thiserror::Error)]
pub enum GeoError {
    #[error("latitude {0} outside the MGRS band range [-80, 84]")]
    OutsideMgrsBand(f64),
    #[error("longitude {0} outside (-180, 180]")]
    LongitudeRange(f64),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("malformed grid cell `{0}`")]
    BadCell(String),
    #[error("min_cluster_size must be at least 2, got {0}")]
    ClusterSize(usize),
    #[error("min_samples must be at least 1")]
    MinSamples,
}

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2)
        + a.lat.to_radians().cos() * b.lat.to_radians().cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}
