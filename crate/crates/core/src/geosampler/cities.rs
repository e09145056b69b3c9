use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::geosampler::LandBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityRecord {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub population: u64,
}

/// Default size of the retained city list.
pub const DEFAULT_TOP_CITIES: usize = 10_000;

/// Reads a `name<TAB>lat<TAB>lon<TAB>population` file with a header row and
/// keeps the `top_n` most populated entries, most populated first.
pub fn load_cities(path: &Path, top_n: usize) -> Result<Vec<CityRecord>> {
    let text = std::fs::read_to_string(path).at(path)?;
    parse_cities(&text, path, top_n)
}

pub(crate) fn parse_cities(text: &str, path: &Path, top_n: usize) -> Result<Vec<CityRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty cities file".into()))?;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    if cols != ["name", "lat", "lon", "population"] {
        return Err(err(1, format!("unexpected header {header:?}")));
    }

    let mut cities = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(lineno, format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| err(lineno, format!("bad {what} {s:?}: {e}")))
        };
        let lat = num(fields[1], "latitude")?;
        let lon = num(fields[2], "longitude")?;
        if !(-90.0..=90.0).contains(&lat) {
            return Err(err(lineno, format!("latitude out of range: {lat}")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(err(lineno, format!("longitude out of range: {lon}")));
        }
        let population = fields[3]
            .trim()
            .parse::<u64>()
            .map_err(|e| err(lineno, format!("bad population {:?}: {e}", fields[3])))?;
        cities.push(CityRecord {
            name: fields[0].trim().to_string(),
            lat,
            lon,
            population,
        });
    }
    if cities.is_empty() {
        return Err(err(1, "no city rows".into()));
    }
    // stable: equal populations keep file order
    cities.sort_by(|a, b| b.population.cmp(&a.population));
    cities.truncate(top_n);
    Ok(cities)
}

pub fn write_cities(path: &Path, cities: &[CityRecord]) -> Result<()> {
    let mut out = String::from("name\tlat\tlon\tpopulation\n");
    for c in cities {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", c.name, c.lat, c.lon, c.population));
    }
    std::fs::write(path, out).at(path)
}

/// Random city list inside the given land boxes with heavy-tailed populations.
pub fn synthetic_cities(n: usize, boxes: &[LandBox], rng: &mut impl Rng) -> Vec<CityRecord> {
    (0..n)
        .map(|i| {
            let b = &boxes[rng.gen_range(0..boxes.len())];
            let lat = rng.gen_range(b.lat_min..b.lat_max);
            let lon = rng.gen_range(b.lon_min..b.lon_max);
            let u: f64 = rng.gen_range(0.0..1.0);
            let population = (50_000.0 / (1.0 - u).powf(0.8)) as u64;
            CityRecord {
                name: format!("city{i:05}"),
                lat,
                lon,
                population,
            }
        })
        .collect()
}
