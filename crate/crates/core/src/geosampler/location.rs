use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geosampler::{CityRecord, LandBox};
use crate::rng::seeded;

/// Kilometres per degree of latitude (and of longitude at the equator).
/// The local tangent-plane conversion is accurate to well under 1% for
/// offsets of a few hundred kilometres away from the poles.
pub const KM_PER_DEGREE: f64 = 111.32;

const MIN_COS_LAT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationSample {
    /// Anchor city, `None` for the uniform sampling arm.
    pub city_index: Option<usize>,
    pub center_lat: f64,
    pub center_lon: f64,
    pub rng_seed: u64,
    /// Northward and eastward offset from the anchor city in km.
    pub offset_km: (f64, f64),
}

pub fn wrap_lon(lon: f64) -> f64 {
    if (-180.0..=180.0).contains(&lon) {
        return lon;
    }
    let w = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 && lon > 0.0 {
        180.0
    } else {
        w
    }
}

/// Picks a city uniformly and offsets it by an isotropic Gaussian of
/// `sigma_km` per axis in the local tangent plane.
pub fn sample_location(cities: &[CityRecord], sigma_km: f64, seed: u64) -> Result<LocationSample> {
    if cities.is_empty() {
        return Err(Error::InvalidInput("city list is empty".into()));
    }
    if !(sigma_km >= 0.0) {
        return Err(Error::InvalidInput(format!("sigma_km must be >= 0, got {sigma_km}")));
    }
    let mut rng = seeded(seed);
    let city_index = rng.gen_range(0..cities.len());
    let city = &cities[city_index];
    let north: f64 = sigma_km * Distribution::<f64>::sample(&StandardNormal, &mut rng);
    let east: f64 = sigma_km * Distribution::<f64>::sample(&StandardNormal, &mut rng);

    let dlat = north / KM_PER_DEGREE;
    let cos_lat = city.lat.to_radians().cos();
    let dlon = if cos_lat < MIN_COS_LAT {
        log::warn!("city {} at latitude {} is polar; longitude offset dropped", city.name, city.lat);
        0.0
    } else {
        east / (KM_PER_DEGREE * cos_lat)
    };
    Ok(LocationSample {
        city_index: Some(city_index),
        center_lat: (city.lat + dlat).clamp(-90.0, 90.0),
        center_lon: wrap_lon(city.lon + dlon),
        rng_seed: seed,
        offset_km: (north, east),
    })
}

/// Uniform-on-the-sphere sample inside a set of bounding boxes, each box
/// weighted by its spherical area.
pub fn sample_uniform_location(boxes: &[LandBox], seed: u64) -> Result<LocationSample> {
    if boxes.is_empty() {
        return Err(Error::InvalidInput("no land boxes configured".into()));
    }
    let areas: Vec<f64> = boxes.iter().map(LandBox::spherical_area).collect();
    let total: f64 = areas.iter().sum();
    let mut rng = seeded(seed);
    let mut pick = rng.gen_range(0.0..total);
    let mut chosen = boxes.len() - 1;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            chosen = i;
            break;
        }
        pick -= a;
    }
    let b = &boxes[chosen];
    let (s0, s1) = (b.lat_min.to_radians().sin(), b.lat_max.to_radians().sin());
    let lat = rng.gen_range(s0..s1).asin().to_degrees();
    let lon = rng.gen_range(b.lon_min..b.lon_max);
    Ok(LocationSample {
        city_index: None,
        center_lat: lat,
        center_lon: lon,
        rng_seed: seed,
        offset_km: (0.0, 0.0),
    })
}

/// Great-circle distance in km.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    const EARTH_RADIUS_KM: f64 = 6371.0088;
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}
