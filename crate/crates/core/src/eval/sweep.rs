use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::LabeledDataset;
use super::probe::{fine_tune, linear_probe, ProbeConfig, ProbeMode, ProbeResult};
use crate::encoder::Encoder;
use crate::error::{Error, IoContext, Result};

pub const RESULTS_HEADER: &str = "task,mode,fraction,seed,metric_name,metric_value,epoch_of_best";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub mode: String,
    pub fraction: f64,
    pub seed: u64,
    pub metric_name: String,
    pub metric_value: f64,
    pub epoch_of_best: usize,
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.task, self.mode, self.fraction, self.seed, self.metric_name, self.metric_value, self.epoch_of_best
        )
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut text = String::from(RESULTS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, text).at(path)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        rows.push(ResultRow {
            task: f[0].to_string(),
            mode: f[1].to_string(),
            fraction: f[2].parse().map_err(|_| bad("bad fraction"))?,
            seed: f[3].parse().map_err(|_| bad("bad seed"))?,
            metric_name: f[4].to_string(),
            metric_value: f[5].parse().map_err(|_| bad("bad metric value"))?,
            epoch_of_best: f[6].parse().map_err(|_| bad("bad epoch"))?,
        });
    }
    Ok(rows)
}

/// Runs the linear probe or fine-tuning, depending on `mode`.
pub fn run_probe(encoder: &Encoder, train: &LabeledDataset, val: &LabeledDataset, mode: ProbeMode, cfg: &ProbeConfig) -> Result<ProbeResult> {
    match mode {
        ProbeMode::Linear => linear_probe(encoder, train, val, cfg),
        ProbeMode::Finetune => fine_tune(encoder, train, val, cfg).map(|(r, _)| r),
    }
}

/// One probe per `(fraction, seed)` on a stratified subset of the training split.
/// The seed drives both the subsampling and the classifier initialization.
pub fn label_efficiency_sweep(
    encoder: &Encoder,
    train: &LabeledDataset,
    val: &LabeledDataset,
    fractions: &[f64],
    mode: ProbeMode,
    cfg: &ProbeConfig,
    seeds: &[u64],
) -> Result<Vec<ResultRow>> {
    if fractions.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one fraction and one seed".into()));
    }
    let mut rows = Vec::with_capacity(fractions.len() * seeds.len());
    for &fraction in fractions {
        for &seed in seeds {
            let subset = train.fraction(fraction, seed)?;
            let run_cfg = ProbeConfig { seed, ..cfg.clone() };
            let r = run_probe(encoder, &subset, val, mode, &run_cfg)?;
            rows.push(ResultRow {
                task: "sweep".into(),
                mode: mode.as_str().into(),
                fraction,
                seed,
                metric_name: r.metric_name,
                metric_value: r.best,
                epoch_of_best: r.epoch_of_best,
            });
        }
    }
    Ok(rows)
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}
