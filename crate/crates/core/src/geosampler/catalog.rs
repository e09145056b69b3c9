use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::geosampler::location::haversine_km;

/// Side length of a patch on the ground.
pub const DEFAULT_EXTENT_KM: f64 = 2.65;
pub const DEFAULT_MAX_CLOUD: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogQuery {
    pub lat: f64,
    pub lon: f64,
    pub date_lo: NaiveDate,
    pub date_hi: NaiveDate,
    pub max_cloud: f64,
}

impl CatalogQuery {
    pub fn new(lat: f64, lon: f64, date_lo: NaiveDate, date_hi: NaiveDate, max_cloud: f64) -> Result<Self> {
        if date_lo > date_hi {
            return Err(Error::InvalidInput(format!("date range {date_lo}..{date_hi} is inverted")));
        }
        if !(0.0..=1.0).contains(&max_cloud) {
            return Err(Error::InvalidInput(format!("max_cloud {max_cloud} outside [0, 1]")));
        }
        Ok(Self {
            lat,
            lon,
            date_lo,
            date_hi,
            max_cloud,
        })
    }

    pub fn midpoint(&self) -> NaiveDate {
        self.date_lo + (self.date_hi - self.date_lo) / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TilePatch {
    pub pixels: RgbImage,
    pub lat: f64,
    pub lon: f64,
    pub date: NaiveDate,
    pub cloud_fraction: f64,
    pub ground_extent_km: f64,
    /// Per-pixel latent land-cover class, row-major. Only synthetic tiles carry it.
    pub land_cover: Option<Vec<u8>>,
}

impl TilePatch {
    pub fn size(&self) -> usize {
        self.pixels.width() as usize
    }

    /// Pixel counts per land-cover class.
    pub fn class_histogram(&self, num_classes: usize) -> Option<Vec<u32>> {
        self.land_cover.as_ref().map(|lc| {
            let mut h = vec![0u32; num_classes];
            for &c in lc {
                h[c as usize] += 1;
            }
            h
        })
    }
}

/// A source of image tiles. `Ok(None)` means no acceptable tile exists for
/// the query; `Err(CatalogUnavailable)` is a transport failure worth retrying.
pub trait TileCatalog: Send + Sync {
    fn query(&self, query: &CatalogQuery) -> Result<Option<TilePatch>>;
}

/// One entry of a local tile directory's `index.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalTileEntry {
    pub path: String,
    pub lat: f64,
    pub lon: f64,
    pub date: NaiveDate,
    pub cloud_fraction: f64,
    #[serde(default = "default_extent")]
    pub ground_extent_km: f64,
}

fn default_extent() -> f64 {
    DEFAULT_EXTENT_KM
}

/// Catalog over pre-downloaded PNG tiles listed in `<root>/index.jsonl`.
/// A tile matches when the query point lies within half its ground extent
/// of the tile center; among matches the date closest to the window
/// midpoint wins.
pub struct LocalDirCatalog {
    root: PathBuf,
    entries: Vec<LocalTileEntry>,
}

impl LocalDirCatalog {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let index = root.join("index.jsonl");
        let text = std::fs::read_to_string(&index)
            .map_err(|e| Error::CatalogUnavailable(format!("{}: {e}", index.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: LocalTileEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: index.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self { root, entries })
    }
}

impl TileCatalog for LocalDirCatalog {
    fn query(&self, q: &CatalogQuery) -> Result<Option<TilePatch>> {
        let mid = q.midpoint();
        let best = self
            .entries
            .iter()
            .filter(|e| e.date >= q.date_lo && e.date <= q.date_hi && e.cloud_fraction < q.max_cloud)
            .filter(|e| haversine_km(q.lat, q.lon, e.lat, e.lon) <= e.ground_extent_km / 2.0)
            .min_by_key(|e| ((e.date - mid).num_days().abs(), e.date));
        let Some(entry) = best else {
            return Ok(None);
        };
        let path = self.root.join(&entry.path);
        let bytes = std::fs::read(&path).at(&path)?;
        let pixels = image::load_from_memory(&bytes)?.to_rgb8();
        if pixels.width() != pixels.height() {
            return Err(Error::ShapeMismatch(format!("{}: tile is not square", path.display())));
        }
        Ok(Some(TilePatch {
            pixels,
            lat: entry.lat,
            lon: entry.lon,
            date: entry.date,
            cloud_fraction: entry.cloud_fraction,
            ground_extent_km: entry.ground_extent_km,
            land_cover: None,
        }))
    }
}
