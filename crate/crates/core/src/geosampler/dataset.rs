//! On-disk seasonal dataset: `root/loc000000/t{0..4}.png`, `meta.json` per
//! location and an append-only `manifest.jsonl`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::geosampler::{
    acquire_stack, build_date_schedule, default_land_boxes, sample_location, sample_uniform_location,
    Acquisition, CityRecord, LandBox, SeasonalStack, TileCatalog, DEFAULT_MAX_CLOUD, DEFAULT_WINDOW_DAYS,
    NUM_CLASSES,
};
use crate::rng::{derive_seed, derived};

pub const MANIFEST: &str = "manifest.jsonl";
const TRANSPORT_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    Gaussian,
    Uniform,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::InvalidInput(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub n_locations: usize,
    pub strategy: SamplingStrategy,
    pub sigma_km: f64,
    pub max_cloud: f64,
    pub window_days: i64,
    pub jitter_days: u32,
    pub today: NaiveDate,
    pub seed: u64,
    pub land_boxes: Vec<LandBox>,
    /// Attempts per location slot before giving up.
    pub max_attempts: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            n_locations: 10,
            strategy: SamplingStrategy::Gaussian,
            sigma_km: 50.0,
            max_cloud: DEFAULT_MAX_CLOUD,
            window_days: DEFAULT_WINDOW_DAYS,
            jitter_days: 365,
            today: NaiveDate::from_ymd_opt(2021, 3, 1).expect("valid date"),
            seed: 0,
            land_boxes: default_land_boxes(),
            max_attempts: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationMeta {
    pub lat: f64,
    pub lon: f64,
    pub dates: Vec<NaiveDate>,
    pub cloud_fractions: Vec<f64>,
    pub city_index: Option<usize>,
    pub seed: u64,
    pub latent_label_histogram: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    #[serde(flatten)]
    pub meta: LocationMeta,
    pub path: String,
}

#[derive(Debug, Default, Clone)]
pub struct BuildReport {
    pub accepted: usize,
    pub rejected: usize,
    pub already_present: usize,
}

#[derive(Debug, Clone)]
pub struct StoredStack {
    pub meta: LocationMeta,
    pub path: String,
    pub images: Vec<RgbImage>,
}

fn location_dir_name(index: usize) -> String {
    format!("loc{index:06}")
}

fn parse_location_index(name: &str) -> Option<usize> {
    name.strip_prefix("loc").and_then(|s| s.parse().ok())
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).at(&path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn append_manifest(root: &Path, row: &ManifestRow) -> Result<()> {
    let path = root.join(MANIFEST);
    let mut f = OpenOptions::new().create(true).append(true).open(&path).at(&path)?;
    let line = serde_json::to_string(row)?;
    writeln!(f, "{line}").at(&path)?;
    f.sync_data().at(&path)
}

fn stack_meta(stack: &SeasonalStack) -> LocationMeta {
    let first = &stack.patches[0];
    LocationMeta {
        lat: first.lat,
        lon: first.lon,
        dates: stack.patches.iter().map(|p| p.date).collect(),
        cloud_fractions: stack.patches.iter().map(|p| p.cloud_fraction).collect(),
        city_index: stack.location.city_index,
        seed: stack.location.rng_seed,
        latent_label_histogram: first.class_histogram(NUM_CLASSES),
    }
}

/// Writes the stack into `root/<name>` through a temporary directory and a rename.
fn persist_stack(root: &Path, name: &str, stack: &SeasonalStack) -> Result<LocationMeta> {
    let tmp = root.join(format!(".tmp-{name}"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    fs::create_dir_all(&tmp).at(&tmp)?;
    for (t, patch) in stack.patches.iter().enumerate() {
        patch.pixels.save(tmp.join(format!("t{t}.png")))?;
    }
    let meta = stack_meta(stack);
    let meta_path = tmp.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).at(&meta_path)?;
    let dst = root.join(name);
    fs::rename(&tmp, &dst).at(&dst)?;
    Ok(meta)
}

/// Collects `n_locations` accepted stacks under `out_dir`, re-sampling a
/// location slot whenever its stack is rejected. Slots already present in
/// the manifest are skipped, so an interrupted build can be resumed.
pub fn build_dataset(
    catalog: &dyn TileCatalog,
    cities: &[CityRecord],
    opts: &BuildOptions,
    out_dir: &Path,
) -> Result<BuildReport> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    for entry in fs::read_dir(out_dir).at(out_dir)? {
        let entry = entry.at(out_dir)?;
        if entry.file_name().to_string_lossy().starts_with(".tmp-") {
            fs::remove_dir_all(entry.path()).at(entry.path())?;
        }
    }

    let mut done: BTreeMap<usize, ManifestRow> = read_manifest(out_dir)?
        .into_iter()
        .filter_map(|r| parse_location_index(&r.path).map(|i| (i, r)))
        .collect();
    // a directory renamed into place whose manifest append never happened
    for i in 0..opts.n_locations {
        let name = location_dir_name(i);
        let meta_path = out_dir.join(&name).join("meta.json");
        if !done.contains_key(&i) && meta_path.exists() {
            let meta: LocationMeta = serde_json::from_slice(&fs::read(&meta_path).at(&meta_path)?)?;
            let row = ManifestRow { meta, path: name };
            append_manifest(out_dir, &row)?;
            done.insert(i, row);
        }
    }

    let mut report = BuildReport::default();
    for i in 0..opts.n_locations {
        if done.contains_key(&i) {
            report.already_present += 1;
            continue;
        }
        let mut accepted = None;
        for attempt in 0..opts.max_attempts {
            let seed = derive_seed(opts.seed, &[i as u64, attempt as u64]);
            let location = match opts.strategy {
                SamplingStrategy::Gaussian => sample_location(cities, opts.sigma_km, seed)?,
                SamplingStrategy::Uniform => sample_uniform_location(&opts.land_boxes, seed)?,
            };
            let schedule = build_date_schedule(&mut derived(seed, &[1]), opts.today, opts.jitter_days)?;
            let outcome = with_retries(|| {
                acquire_stack(catalog, &location, &schedule, opts.max_cloud, opts.window_days)
            })?;
            match outcome {
                Acquisition::Accepted(stack) => {
                    accepted = Some(stack);
                    break;
                }
                Acquisition::Rejected { .. } => report.rejected += 1,
            }
        }
        let stack = accepted.ok_or_else(|| {
            Error::InvalidInput(format!(
                "location slot {i}: no acceptable stack after {} attempts",
                opts.max_attempts
            ))
        })?;
        let name = location_dir_name(i);
        let meta = persist_stack(out_dir, &name, &stack)?;
        append_manifest(out_dir, &ManifestRow { meta, path: name })?;
        report.accepted += 1;
    }
    Ok(report)
}

fn with_retries<T>(mut f: impl FnMut() -> Result<T>) -> Result<T> {
    let mut last = None;
    for _ in 0..TRANSPORT_RETRIES {
        match f() {
            Err(Error::CatalogUnavailable(msg)) => {
                log::warn!("catalog unavailable, retrying: {msg}");
                last = Some(msg);
            }
            other => return other,
        }
    }
    Err(Error::CatalogUnavailable(last.unwrap_or_default()))
}

/// Loads every stack listed in the manifest, ordered by location index.
pub fn load_dataset(root: &Path) -> Result<Vec<StoredStack>> {
    let mut rows = read_manifest(root)?;
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{}: empty or missing manifest", root.display())));
    }
    rows.sort_by(|a, b| a.path.cmp(&b.path));
    rows.dedup_by(|a, b| a.path == b.path);
    rows.into_iter()
        .map(|row| {
            let dir: PathBuf = root.join(&row.path);
            let images = (0..row.meta.dates.len())
                .map(|t| Ok(image::open(dir.join(format!("t{t}.png")))?.to_rgb8()))
                .collect::<Result<Vec<_>>>()?;
            Ok(StoredStack {
                meta: row.meta,
                path: row.path,
                images,
            })
        })
        .collect()
}
