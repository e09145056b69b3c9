use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::state::{lr_at, LearnerConfig, SecoState, StepMetrics, TrainConfig};
use crate::error::{Error, IoContext, Result};
use crate::image::FloatImage;
use crate::rng::derived;
use crate::views::{make_views, AugmentationConfig};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,epoch,lr,L0,L1,L2,total,wall_ms";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";

const EPOCH_STREAM: u64 = 0xE90C;
const VIEW_STREAM: u64 = 0x71E5;

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub learner: LearnerConfig,
    pub train: TrainConfig,
    pub views: AugmentationConfig,
    /// Run configuration echoed into every checkpoint.
    pub echo: serde_json::Value,
    pub resume: bool,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: SecoState,
    pub checkpoint: PathBuf,
    pub last: Option<StepMetrics>,
    pub steps_run: u64,
}

pub fn steps_per_epoch(n_locations: usize, batch_size: usize) -> usize {
    n_locations / batch_size
}

fn epoch_checkpoint(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.ckpt"))
}

/// Most recent per-epoch checkpoint in `out_dir`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = out_dir.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).at(&dir)? {
        let path = entry.at(&dir)?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Drops log rows past `step` so a resumed run appends cleanly.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).at(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).at(path)
}

/// Pre-trains on `stacks` (the dated patches of each location), logging every
/// step and checkpointing every `checkpoint_every` epochs and at the end.
pub fn pretrain(stacks: &[Vec<FloatImage>], opts: &PretrainOptions, out_dir: &Path) -> Result<PretrainOutcome> {
    let train = &opts.train;
    train.validate()?;
    opts.learner.validate()?;
    opts.views.validate()?;
    if stacks.len() < train.batch_size {
        return Err(Error::InvalidInput(format!(
            "dataset has {} locations, fewer than batch size {}",
            stacks.len(),
            train.batch_size
        )));
    }
    fs::create_dir_all(out_dir).at(out_dir)?;
    let log_path = out_dir.join(TRAIN_LOG);
    let per_epoch = steps_per_epoch(stacks.len(), train.batch_size);
    let total_steps = (per_epoch * train.epochs) as u64;

    let (mut state, start_epoch) = match latest_checkpoint(out_dir)? {
        Some(path) if opts.resume => {
            let (state, header) = load_checkpoint(&path)?;
            if header.learner != opts.learner || header.train != *train {
                return Err(Error::Config(format!(
                    "{} was written with a different learner configuration",
                    path.display()
                )));
            }
            log::info!("resuming from {} at epoch {}", path.display(), header.epoch);
            truncate_log(&log_path, state.step)?;
            (state, header.epoch)
        }
        _ => {
            fs::write(&log_path, format!("{LOG_HEADER}\n")).at(&log_path)?;
            (SecoState::new(opts.learner.clone(), train, train.seed)?, 0)
        }
    };

    let mut log = fs::OpenOptions::new().append(true).open(&log_path).at(&log_path)?;
    let started = Instant::now();
    let mut last = None;
    let mut steps_run = 0;
    for epoch in start_epoch..train.epochs {
        let mut order: Vec<usize> = (0..stacks.len()).collect();
        order.shuffle(&mut derived(train.seed, &[EPOCH_STREAM, epoch as u64]));
        for chunk in order.chunks_exact(train.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let mut rng = derived(train.seed, &[VIEW_STREAM, epoch as u64, i as u64]);
                    make_views(&stacks[i], &mut rng, &opts.views)
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = lr_at(state.step, total_steps, train);
            let metrics = match state.train_step(&batch, lr) {
                Ok(m) => m,
                Err(e) => {
                    write_diagnostics(out_dir, &state, epoch, &e)?;
                    return Err(e);
                }
            };
            let l = metrics.loss;
            writeln!(
                log,
                "{},{},{},{},{},{},{},{}",
                metrics.step,
                epoch,
                lr,
                l.l0,
                l.l1,
                l.l2,
                l.total,
                started.elapsed().as_millis()
            )
            .at(&log_path)?;
            last = Some(metrics);
            steps_run += 1;
        }
        let done = epoch + 1;
        if done % train.checkpoint_every == 0 || done == train.epochs {
            let checkpoint = epoch_checkpoint(out_dir, done);
            save_checkpoint(&checkpoint, &state, train, done, &opts.echo)?;
            log::info!("epoch {done}: checkpoint {}", checkpoint.display());
        }
    }
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_path, &state, train, train.epochs, &opts.echo)?;
    Ok(PretrainOutcome {
        state,
        checkpoint: final_path,
        last,
        steps_run,
    })
}

fn write_diagnostics(out_dir: &Path, state: &SecoState, epoch: usize, err: &Error) -> Result<()> {
    let path = out_dir.join("diagnostics.json");
    let norms: Vec<serde_json::Value> = state
        .online_params()
        .iter()
        .map(|p| {
            let norm = p.value.iter().map(|v| v * v).sum::<f64>().sqrt();
            serde_json::json!({"name": p.name, "norm": norm})
        })
        .collect();
    let doc = serde_json::json!({
        "error": err.to_string(),
        "step": state.step,
        "epoch": epoch,
        "param_norms": norms,
    });
    fs::write(&path, serde_json::to_vec_pretty(&doc)?).at(&path)
}
