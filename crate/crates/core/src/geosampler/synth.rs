//! Procedural stand-in for a satellite tile catalog.
//!
//! A tile is a pure function of (rounded location, date, world seed). The
//! ground is a static land-cover map built from per-class value-noise fields
//! plus regional preferences; each class has a base colour, a seasonal colour
//! swing driven by `sin(2π·doy/365)` (sign flipped south of the equator) and a
//! static texture. Seasons also change the spatial pattern: vegetation green-up
//! timing varies across the tile, crop parcels follow their own cycles,
//! wetlands flood, winters bring patchy snow away from the tropics and dry
//! seasons patchy straw-coloured grass towards the equator. A small date-keyed
//! noise term and optional cloud blobs are added on top. When diversity
//! anchors are configured, land cover far from every anchor collapses to a
//! few regional classes.

use chrono::{Datelike, Days, NaiveDate};

use crate::error::Result;
use crate::geosampler::catalog::{CatalogQuery, TileCatalog, TilePatch, DEFAULT_EXTENT_KM};
use crate::geosampler::location::{haversine_km, KM_PER_DEGREE};
use crate::rng::{mix64, unit_from_hash};

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy)]
pub struct LandCoverClass {
    pub name: &'static str,
    pub base: [f64; 3],
    /// Colour offset at the peak of the seasonal cycle.
    pub seasonal: [f64; 3],
    pub texture: f64,
}

pub const CLASSES: [LandCoverClass; NUM_CLASSES] = [
    LandCoverClass { name: "water", base: [0.10, 0.20, 0.40], seasonal: [0.00, 0.03, 0.02], texture: 0.01 },
    LandCoverClass { name: "forest", base: [0.12, 0.30, 0.13], seasonal: [0.10, 0.04, 0.00], texture: 0.07 },
    LandCoverClass { name: "cropland", base: [0.50, 0.52, 0.22], seasonal: [-0.22, 0.14, -0.06], texture: 0.05 },
    LandCoverClass { name: "grassland", base: [0.38, 0.50, 0.26], seasonal: [-0.10, 0.10, 0.00], texture: 0.04 },
    LandCoverClass { name: "urban", base: [0.56, 0.53, 0.52], seasonal: [0.02, 0.02, 0.02], texture: 0.10 },
    LandCoverClass { name: "industrial", base: [0.72, 0.42, 0.36], seasonal: [0.01, 0.01, 0.01], texture: 0.08 },
    LandCoverClass { name: "bare", base: [0.76, 0.66, 0.46], seasonal: [0.04, 0.03, 0.02], texture: 0.03 },
    LandCoverClass { name: "wetland", base: [0.24, 0.36, 0.32], seasonal: [0.02, 0.09, 0.05], texture: 0.04 },
    LandCoverClass { name: "upland", base: [0.58, 0.58, 0.60], seasonal: [-0.22, -0.22, -0.20], texture: 0.06 },
    LandCoverClass { name: "shrub", base: [0.32, 0.40, 0.16], seasonal: [0.06, 0.10, -0.04], texture: 0.05 },
];

const LOCAL_WEIGHT: f64 = 2.5;
const WATER: usize = 0;
const WETLAND: usize = 7;
const SNOW: [f64; 3] = [0.90, 0.91, 0.94];
const SOIL: [f64; 3] = [0.60, 0.48, 0.32];
const DRY_GRASS: [f64; 3] = [0.78, 0.68, 0.44];
const CROP: [f64; 3] = [0.16, 0.42, 0.12];
const FOREST: usize = 1;
const URBAN: usize = 4;
const INDUSTRIAL: usize = 5;
const CROPLAND: usize = 2;
const SHRUB: usize = 9;
const GRASSLAND: usize = 3;

/// Procedural world parameters.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub patch_size: usize,
    pub extent_km: f64,
    /// Diversity anchors `(lat, lon)`; empty means uniformly diverse land cover.
    pub anchors: Vec<(f64, f64)>,
    /// e-folding distance of land-cover diversity around anchors.
    pub anchor_scale_km: f64,
    /// Days between successive acquisitions of a location.
    pub revisit_days: i64,
    /// Probability that an acquisition is completely cloud free.
    pub clear_prob: f64,
}

impl SyntheticWorld {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            patch_size: 64,
            extent_km: DEFAULT_EXTENT_KM,
            anchors: Vec::new(),
            anchor_scale_km: 60.0,
            revisit_days: 5,
            clear_prob: 0.7,
        }
    }

    pub fn with_patch_size(mut self, size: usize) -> Self {
        self.patch_size = size;
        self
    }

    pub fn with_anchors(mut self, anchors: Vec<(f64, f64)>) -> Self {
        self.anchors = anchors;
        self
    }

    fn diversity(&self, lat: f64, lon: f64) -> (f64, f64) {
        if self.anchors.is_empty() {
            return (1.0, f64::INFINITY);
        }
        let d = self
            .anchors
            .iter()
            .map(|&(a, b)| haversine_km(lat, lon, a, b))
            .fold(f64::INFINITY, f64::min);
        (0.08 + 0.92 * (-d / self.anchor_scale_km).exp(), d)
    }

    /// Static land-cover map of the patch centred at `(lat, lon)`.
    pub fn land_cover(&self, lat: f64, lon: f64) -> Vec<u8> {
        let (lat, lon) = round_location(lat, lon);
        let n = self.patch_size;
        let (cx, cy) = world_km(lat, lon);
        let (diversity, dist) = self.diversity(lat, lon);

        let mut bias = [0.0f64; NUM_CLASSES];
        for (c, b) in bias.iter_mut().enumerate() {
            *b = value_noise(self.seed ^ (0x100 + c as u64), cx / 25.0, cy / 25.0);
        }
        if dist.is_finite() {
            let near = (-dist / 5.0).exp();
            let mid = (-dist / 40.0).exp();
            bias[URBAN] += 0.5 * near;
            bias[INDUSTRIAL] += 0.3 * near;
            bias[CROPLAND] += 0.25 * mid;
            bias[SHRUB] += 0.15 * mid;
            bias[GRASSLAND] += 0.15 * mid;
            // settlements and fields do not occur far from people
            let remote = 1.0 - (-dist / 200.0).exp();
            for c in [URBAN, INDUSTRIAL, CROPLAND] {
                bias[c] -= remote;
            }
        }

        let mut map = vec![0u8; n * n];
        for r in 0..n {
            for col in 0..n {
                let (x, y) = self.pixel_km(cx, cy, r, col);
                let mut best = (f64::NEG_INFINITY, 0usize);
                for (c, b) in bias.iter().enumerate() {
                    let s = LOCAL_WEIGHT * diversity * fbm(self.seed ^ (0x200 + c as u64), x / 0.6, y / 0.6) + b;
                    if s > best.0 {
                        best = (s, c);
                    }
                }
                map[r * n + col] = best.1 as u8;
            }
        }
        map
    }

    /// Spatially structured seasonal effects that replace the class colour:
    /// patchy snow on open ground in winter away from the tropics, patchy dry
    /// grass in the summer dry season towards the equator, crop parcels on
    /// individual phenology cycles and flooded wetland in the wet season.
    fn seasonal_cover(&self, class: usize, x: f64, y: f64, lat: f64, phase: f64) -> Option<[f64; 3]> {
        let season = phase.sin();
        let snow_lat = ((lat.abs() - 20.0) / 20.0).clamp(0.0, 1.0);
        let snow = snow_lat * (-season / 0.7).clamp(0.0, 1.0);
        if snow > 0.0
            && !matches!(class, WATER | URBAN | INDUSTRIAL)
            && fbm(self.seed ^ 0x5e0, x / 0.3, y / 0.3) < snow
        {
            return Some(SNOW);
        }
        let dry = (1.0 - snow_lat) * (season / 0.7).clamp(0.0, 1.0);
        if dry > 0.0
            && matches!(class, GRASSLAND | SHRUB | CROPLAND)
            && fbm(self.seed ^ 0xd27, x / 0.3, y / 0.3) < 0.8 * dry
        {
            return Some(DRY_GRASS);
        }
        match class {
            CROPLAND => {
                let (px, py) = ((x / 0.25).floor() as i64, (y / 0.15).floor() as i64);
                let offset = 2.0 * std::f64::consts::PI * lattice(self.seed ^ 0xc40b, px, py);
                let green = 0.5 + 0.5 * (phase + offset).sin();
                Some(std::array::from_fn(|c| SOIL[c] + green * (CROP[c] - SOIL[c])))
            }
            WETLAND if season > 0.3 && fbm(self.seed ^ 0x3e7, x / 0.4, y / 0.4) < 0.8 * (season - 0.3) / 0.7 => {
                Some(CLASSES[WATER].base)
            }
            _ => None,
        }
    }

    fn pixel_km(&self, cx: f64, cy: f64, r: usize, c: usize) -> (f64, f64) {
        let n = self.patch_size as f64;
        let east = ((c as f64 + 0.5) / n - 0.5) * self.extent_km;
        let north = (0.5 - (r as f64 + 0.5) / n) * self.extent_km;
        (cx + east, cy + north)
    }

    /// Deterministic cloud cover of the acquisition at `(lat, lon, date)`.
    pub fn cloud_fraction(&self, lat: f64, lon: f64, date: NaiveDate) -> f64 {
        let h = location_date_hash(self.seed ^ 0xc10d, lat, lon, date);
        if unit_from_hash(h) < self.clear_prob {
            0.0
        } else {
            unit_from_hash(mix64(h))
        }
    }

    /// Whether the constellation images `(lat, lon)` on `date`.
    pub fn is_acquisition(&self, lat: f64, lon: f64, date: NaiveDate) -> bool {
        let (lat, lon) = round_location(lat, lon);
        let phase = (mix64(self.seed ^ lat.to_bits() ^ mix64(lon.to_bits())) % self.revisit_days as u64) as i64;
        (date.num_days_from_ce() as i64 + phase).rem_euclid(self.revisit_days) == 0
    }

    /// Renders the tile seen at `(lat, lon)` on `date`.
    pub fn render(&self, lat: f64, lon: f64, date: NaiveDate) -> TilePatch {
        let (lat, lon) = round_location(lat, lon);
        let n = self.patch_size;
        let land = self.land_cover(lat, lon);
        let (cx, cy) = world_km(lat, lon);
        let phase = season_angle(lat, date);
        let season = phase.sin();
        let intensity = 1.0 + 0.08 * season;
        let date_key = location_date_hash(self.seed ^ 0xda7e, lat, lon, date);
        let cloud_fraction = self.cloud_fraction(lat, lon, date);

        let mut raw = vec![0u8; n * n * 3];
        let mut cloud_noise = Vec::new();
        if cloud_fraction > 0.0 {
            cloud_noise = (0..n * n)
                .map(|i| {
                    let (x, y) = self.pixel_km(cx, cy, i / n, i % n);
                    fbm(date_key, x / 0.5, y / 0.5)
                })
                .collect();
        }
        let cloud_threshold = if cloud_fraction > 0.0 {
            let mut sorted = cloud_noise.clone();
            sorted.sort_by(f64::total_cmp);
            let k = ((1.0 - cloud_fraction) * (n * n) as f64).floor() as usize;
            sorted.get(k).copied().unwrap_or(f64::INFINITY)
        } else {
            f64::INFINITY
        };

        for r in 0..n {
            for col in 0..n {
                let i = r * n + col;
                let class = &CLASSES[land[i] as usize];
                let (x, y) = self.pixel_km(cx, cy, r, col);
                let cover = self.seasonal_cover(land[i] as usize, x, y, lat, phase);
                let tex = class.texture * (2.0 * value_noise(self.seed ^ 0x7e7, x / 0.05, y / 0.05) - 1.0)
                    + pattern(land[i] as usize, x, y)
                    + phenology(self.seed, land[i] as usize, x, y, phase);
                let jitter = 0.02 * (2.0 * unit_from_hash(mix64(date_key ^ i as u64)) - 1.0);
                let cloudy = cloud_fraction > 0.0 && cloud_noise[i] >= cloud_threshold;
                for ch in 0..3 {
                    let ground = match cover {
                        Some(c) => c[ch],
                        None => class.base[ch] + season * class.seasonal[ch],
                    };
                    let mut v = ground * intensity + tex + jitter;
                    if cloudy {
                        v = 0.15 * v + 0.85 * 0.92;
                    }
                    raw[i * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        TilePatch {
            pixels: image::RgbImage::from_raw(n as u32, n as u32, raw).expect("buffer size"),
            lat,
            lon,
            date,
            cloud_fraction,
            ground_extent_km: self.extent_km,
            land_cover: Some(land),
        }
    }
}

/// Position in the annual cycle in radians, shifted by half a year south of
/// the equator.
fn season_angle(lat: f64, date: NaiveDate) -> f64 {
    let doy = date.ordinal0() as f64;
    let shift = if lat >= 0.0 { 0.0 } else { std::f64::consts::PI };
    2.0 * std::f64::consts::PI * doy / 365.0 + shift
}

/// Seasonal driver in `[-1, 1]`; opposite phase in the two hemispheres.
pub fn seasonal_term(lat: f64, date: NaiveDate) -> f64 {
    season_angle(lat, date).sin()
}

/// Renders the tile for the midpoint of the query window, ignoring the cloud
/// threshold.
pub fn synth_tile(query: &CatalogQuery, world_seed: u64) -> TilePatch {
    SyntheticWorld::new(world_seed).render(query.lat, query.lon, query.midpoint())
}

/// Catalog backed by a [`SyntheticWorld`]: scans acquisition dates in the
/// query window, nearest to the window midpoint first, and returns the first
/// one under the cloud threshold.
#[derive(Debug, Clone)]
pub struct SyntheticCatalog {
    pub world: SyntheticWorld,
}

impl SyntheticCatalog {
    pub fn new(world: SyntheticWorld) -> Self {
        Self { world }
    }
}

impl TileCatalog for SyntheticCatalog {
    fn query(&self, q: &CatalogQuery) -> Result<Option<TilePatch>> {
        let mid = q.midpoint();
        let mut candidates: Vec<NaiveDate> = q
            .date_lo
            .iter_days()
            .take_while(|d| *d <= q.date_hi)
            .filter(|d| self.world.is_acquisition(q.lat, q.lon, *d))
            .collect();
        candidates.sort_by_key(|d| ((*d - mid).num_days().abs(), *d));
        for date in candidates {
            if self.world.cloud_fraction(q.lat, q.lon, date) < q.max_cloud {
                return Ok(Some(self.world.render(q.lat, q.lon, date)));
            }
        }
        Ok(None)
    }
}

fn round_location(lat: f64, lon: f64) -> (f64, f64) {
    ((lat * 1e4).round() / 1e4, (lon * 1e4).round() / 1e4)
}

fn world_km(lat: f64, lon: f64) -> (f64, f64) {
    (lon * KM_PER_DEGREE * lat.to_radians().cos(), lat * KM_PER_DEGREE)
}

fn location_date_hash(seed: u64, lat: f64, lon: f64, date: NaiveDate) -> u64 {
    let (lat, lon) = round_location(lat, lon);
    mix64(seed ^ mix64(lat.to_bits()) ^ mix64(lon.to_bits().rotate_left(17)) ^ mix64(date.num_days_from_ce() as u64))
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    unit_from_hash(mix64(seed ^ mix64(ix as u64 ^ mix64(iy as u64))))
}

/// Smooth value noise in `[0, 1)` with unit lattice spacing.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty
}

fn fbm(seed: u64, x: f64, y: f64) -> f64 {
    (2.0 * value_noise(seed, x, y) + value_noise(mix64(seed), 2.0 * x + 0.37, 2.0 * y + 0.71)) / 3.0
}

/// Brightness swing of vegetated ground whose timing varies smoothly in
/// space, so the pattern inside a tile (not only its mean colour) changes
/// through the year.
fn phenology(seed: u64, class: usize, x: f64, y: f64, phase: f64) -> f64 {
    let amplitude = match class {
        FOREST => 0.25,
        GRASSLAND => 0.30,
        SHRUB => 0.25,
        WETLAND => 0.15,
        _ => return 0.0,
    };
    let offset = 2.0 * std::f64::consts::PI * fbm(seed ^ 0x9e70, x / 0.2, y / 0.2);
    amplitude * (phase + 2.0 * offset).sin()
}

/// Class-specific structured texture: road grids in built-up areas, field
/// stripes in cropland.
fn pattern(class: usize, x: f64, y: f64) -> f64 {
    match class {
        URBAN | INDUSTRIAL => {
            let road = |v: f64| v.rem_euclid(0.3) < 0.05;
            if road(x) || road(y) {
                0.12
            } else {
                0.0
            }
        }
        CROPLAND => 0.05 * (2.0 * std::f64::consts::PI * (x + 0.5 * y) / 0.2).sin(),
        _ => 0.0,
    }
}

#[allow(dead_code)]
pub(crate) fn add_days(date: NaiveDate, days: i64) -> NaiveDate {
    if days >= 0 {
        date.checked_add_days(Days::new(days as u64)).expect("date in range")
    } else {
        date.checked_sub_days(Days::new((-days) as u64)).expect("date in range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::FloatImage;
    use crate::rng::seeded;
    use rand::Rng;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn same_query_is_bit_identical() {
        let q = CatalogQuery::new(45.1234, 7.5, d("2020-06-01"), d("2020-06-30"), 0.1).unwrap();
        assert_eq!(synth_tile(&q, 3), synth_tile(&q, 3));
    }

    #[test]
    fn six_months_apart_differs_more_than_same_date() {
        let world = SyntheticWorld::new(11);
        let mut rng = seeded(0);
        for _ in 0..100 {
            let lat = rng.gen_range(-60.0..60.0);
            let lon = rng.gen_range(-180.0..180.0);
            let a = FloatImage::from_rgb8(&world.render(lat, lon, d("2020-04-01")).pixels);
            let a2 = FloatImage::from_rgb8(&world.render(lat, lon, d("2020-04-01")).pixels);
            let b = FloatImage::from_rgb8(&world.render(lat, lon, d("2020-10-01")).pixels);
            assert!(a.mean_abs_diff(&b) > a.mean_abs_diff(&a2));
        }
    }

    #[test]
    fn hemispheres_have_opposite_seasons() {
        let date = d("2020-04-15");
        let n = seasonal_term(45.0, date);
        let s = seasonal_term(-45.0, date);
        assert!(n > 0.0 && s < 0.0);
        assert!((n + s).abs() < 1e-12);
    }

    #[test]
    fn cloud_fraction_distribution() {
        let world = SyntheticWorld::new(5);
        let mut zeros = 0;
        let total = 20_000;
        let start = d("2019-01-01");
        for i in 0..total {
            let cf = world.cloud_fraction(10.0 + (i % 100) as f64 * 0.01, 20.0, add_days(start, (i / 100) as i64));
            assert!((0.0..=1.0).contains(&cf));
            if cf == 0.0 {
                zeros += 1;
            }
        }
        let frac = zeros as f64 / total as f64;
        assert!((frac - 0.7).abs() < 0.02, "{frac}");
    }

    #[test]
    fn land_cover_has_many_classes_and_is_static() {
        let world = SyntheticWorld::new(2);
        let mut seen = [false; NUM_CLASSES];
        let mut rng = seeded(1);
        for _ in 0..200 {
            let (lat, lon) = (rng.gen_range(-50.0..50.0), rng.gen_range(-170.0..170.0));
            let a = world.render(lat, lon, d("2020-01-01"));
            let b = world.render(lat, lon, d("2020-07-01"));
            assert_eq!(a.land_cover, b.land_cover);
            for &c in a.land_cover.as_ref().unwrap() {
                seen[c as usize] = true;
            }
        }
        assert!(seen.iter().filter(|&&s| s).count() >= 8);
    }

    #[test]
    fn anchors_concentrate_diversity() {
        let world = SyntheticWorld::new(4).with_anchors(vec![(40.0, 0.0)]);
        let classes_present = |lat: f64, lon: f64| {
            let h = world.render(lat, lon, d("2020-01-01")).class_histogram(NUM_CLASSES).unwrap();
            h.iter().filter(|&&c| c as f64 >= 0.05 * 4096.0).count()
        };
        let mut rng = seeded(2);
        let (mut near, mut far) = (0, 0);
        for _ in 0..40 {
            near += classes_present(40.0 + rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            far += classes_present(20.0 + rng.gen_range(-5.0..5.0), 60.0 + rng.gen_range(-5.0..5.0));
        }
        assert!(near > far, "near {near} far {far}");
    }

    #[test]
    fn catalog_respects_window_and_cloud_threshold() {
        let cat = SyntheticCatalog::new(SyntheticWorld::new(8));
        let q = CatalogQuery::new(12.0, 34.0, d("2020-03-01"), d("2020-03-31"), 0.1).unwrap();
        let t = cat.query(&q).unwrap().expect("a clear acquisition in 31 days");
        assert!(t.date >= q.date_lo && t.date <= q.date_hi);
        assert!(t.cloud_fraction < 0.1);
        let strict = CatalogQuery::new(12.0, 34.0, d("2020-03-01"), d("2020-03-31"), 0.0).unwrap();
        assert!(cat.query(&strict).unwrap().is_none());
    }

    #[test]
    fn cloudy_tiles_show_clouds() {
        let world = SyntheticWorld::new(6);
        let start = d("2020-01-01");
        let (lat, lon) = (5.0, 5.0);
        let date = (0..400)
            .map(|i| add_days(start, i))
            .find(|dt| world.cloud_fraction(lat, lon, *dt) > 0.5)
            .unwrap();
        let tile = world.render(lat, lon, date);
        let bright = tile.pixels.pixels().filter(|p| p.0.iter().all(|&v| v > 200)).count();
        let expected = tile.cloud_fraction * 4096.0;
        assert!((bright as f64 - expected).abs() < 0.1 * 4096.0, "{bright} vs {expected}");
    }
}
