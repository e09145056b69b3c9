//! Unsupervised collection of seasonal image stacks.
//!
//! Locations are drawn around populated cities (or uniformly inside land
//! boxes for the ablation arm), each gets a jittered five-date schedule at
//! 3-month increments, and a stack is accepted only if the catalog has a
//! clear tile for every date.

mod catalog;
mod cities;
mod dataset;
mod location;
mod schedule;
mod synth;

pub use catalog::{
    CatalogQuery, LocalDirCatalog, LocalTileEntry, TileCatalog, TilePatch, DEFAULT_EXTENT_KM,
    DEFAULT_MAX_CLOUD,
};
pub use cities::{load_cities, synthetic_cities, write_cities, CityRecord, DEFAULT_TOP_CITIES};
pub use dataset::{
    build_dataset, load_dataset, read_manifest, BuildOptions, BuildReport, LocationMeta,
    ManifestRow, SamplingStrategy, StoredStack,
};
pub use location::{
    haversine_km, sample_location, sample_uniform_location, wrap_lon, LocationSample,
    KM_PER_DEGREE,
};
pub use schedule::{
    build_date_schedule, gaps_are_legal, latest_reference, DateSchedule, DATES_PER_STACK,
    DEFAULT_WINDOW_DAYS, MONTHS_BETWEEN_DATES,
};
pub use synth::{
    seasonal_term, synth_tile, LandCoverClass, SyntheticCatalog, SyntheticWorld, CLASSES,
    NUM_CLASSES,
};

use chrono::Days;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latitude/longitude bounding box used by the uniform sampling arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandBox {
    pub name: String,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl LandBox {
    pub fn new(name: &str, lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Self {
        Self {
            name: name.into(),
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        }
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }

    /// Area on the unit sphere (steradians).
    pub fn spherical_area(&self) -> f64 {
        (self.lat_max.to_radians().sin() - self.lat_min.to_radians().sin())
            * (self.lon_max - self.lon_min).to_radians()
    }
}

/// Coarse continental boxes.
pub fn default_land_boxes() -> Vec<LandBox> {
    vec![
        LandBox::new("north_america", 25.0, 60.0, -125.0, -70.0),
        LandBox::new("south_america", -35.0, 10.0, -75.0, -40.0),
        LandBox::new("europe", 36.0, 60.0, -10.0, 40.0),
        LandBox::new("africa", -30.0, 30.0, -15.0, 45.0),
        LandBox::new("asia", 10.0, 55.0, 60.0, 135.0),
        LandBox::new("australia", -38.0, -15.0, 115.0, 150.0),
    ]
}

/// Five co-located tiles following a date schedule.
#[derive(Debug, Clone)]
pub struct SeasonalStack {
    pub location: LocationSample,
    pub patches: Vec<TilePatch>,
    pub schedule: DateSchedule,
}

/// Outcome of one acquisition attempt.
#[derive(Debug)]
pub enum Acquisition {
    Accepted(SeasonalStack),
    /// Some date had no clear tile, or the acquired dates broke the schedule.
    Rejected { missing_dates: usize },
}

/// Queries the catalog for every scheduled date (± `window_days`) and
/// accepts the location only if all of them yield a clear tile.
pub fn acquire_stack(
    catalog: &dyn TileCatalog,
    location: &LocationSample,
    schedule: &DateSchedule,
    max_cloud: f64,
    window_days: i64,
) -> Result<Acquisition> {
    if window_days < 0 {
        return Err(Error::InvalidInput("window_days must be non-negative".into()));
    }
    let schedule = DateSchedule {
        dates: schedule.dates.clone(),
        window_days,
    };
    let mut patches = Vec::with_capacity(schedule.dates.len());
    let mut missing = 0;
    for date in &schedule.dates {
        let lo = date.checked_sub_days(Days::new(window_days as u64)).expect("date in range");
        let hi = date.checked_add_days(Days::new(window_days as u64)).expect("date in range");
        let query = CatalogQuery::new(location.center_lat, location.center_lon, lo, hi, max_cloud)?;
        match catalog.query(&query)? {
            Some(p) if p.cloud_fraction < max_cloud => patches.push(p),
            _ => missing += 1,
        }
    }
    if missing > 0 {
        return Ok(Acquisition::Rejected { missing_dates: missing });
    }
    let acquired: Vec<_> = patches.iter().map(|p| p.date).collect();
    if !gaps_are_legal(&schedule, &acquired) {
        return Ok(Acquisition::Rejected { missing_dates: 0 });
    }
    let size = patches[0].size();
    if patches.iter().any(|p| p.size() != size) {
        return Err(Error::ShapeMismatch("tiles of one stack differ in size".into()));
    }
    Ok(Acquisition::Accepted(SeasonalStack {
        location: location.clone(),
        patches,
        schedule,
    }))
}
