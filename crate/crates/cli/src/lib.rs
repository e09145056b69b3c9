//! Subcommands of the `seco` binary.
//!
//! Every command reads one [`RunConfig`], applies flag overrides, resolves
//! paths against the working directory and echoes the resolved config into
//! each artifact directory it writes.

use std::path::{Path, PathBuf};

use chrono::Days;
use clap::{Args, Parser, Subcommand};
use seco_core::config::{CatalogKind, LabelSource};
use seco_core::encoder::Encoder;
use seco_core::eval::{
    label_efficiency_sweep, median, predict_mask, read_results_csv, run_probe, synthetic_change_pair,
    synthetic_land_cover, train_change_decoder, write_results_csv, LabeledDataset, ProbeMode, ResultRow, Split,
};
use seco_core::geosampler::{
    build_dataset, load_cities, load_dataset, synthetic_cities, LocalDirCatalog, SamplingStrategy, StoredStack,
    SyntheticCatalog, SyntheticWorld, TileCatalog,
};
use seco_core::image::FloatImage;
use seco_core::learner::{load_checkpoint, pretrain, PretrainOptions, FINAL_CHECKPOINT};
use seco_core::plot::{mask_image, save_png, side_by_side, LinePlot, Series};
use seco_core::rng::{derive_seed, derived};
use seco_core::{Error as CoreError, RunConfig};

/// Results file written by every evaluation command.
pub const RESULTS_CSV: &str = "results.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or missing inputs; exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(CoreError::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "seco", version, about = "Seasonal contrastive pre-training for satellite imagery")]
pub struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Run config (TOML); defaults apply when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed (also read from SECO_SEED).
    #[arg(long, global = true, env = "SECO_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect seasonal stacks into `io.data_dir`.
    Sample(SampleArgs),
    /// Pre-train on the sampled stacks.
    Pretrain(PretrainArgs),
    /// Linear probe on frozen features.
    Probe(EvalArgs),
    /// Fine-tune encoder and classifier.
    Finetune(EvalArgs),
    /// Probe over label fractions and plot metric vs fraction.
    Sweep(SweepArgs),
    /// Train a change decoder on frozen feature differences.
    Changedet(EvalArgs),
    /// Plot a results CSV (median over seeds per fraction).
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Number of locations.
    #[arg(long = "n")]
    pub n_locations: Option<usize>,
    #[arg(long, value_parser = parse_catalog)]
    pub catalog: Option<CatalogKind>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<SamplingStrategy>,
    /// Cities file (tab-separated `name lat lon population`).
    #[arg(long)]
    pub cities: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from the latest epoch checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Print the published pre-training configuration and exit.
    #[arg(long)]
    pub paper_scale: bool,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Encoder checkpoint; `io.checkpoint` or the pre-training output when unset.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use a randomly initialized encoder instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub random_init: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, default_value = "linear", value_parser = parse_mode)]
    pub mode: ProbeMode,
    /// Comma-separated label fractions.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Results CSV to plot.
    #[arg(long)]
    pub csv: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_catalog(s: &str) -> Result<CatalogKind, String> {
    match s {
        "synthetic" => Ok(CatalogKind::Synthetic),
        "local" => Ok(CatalogKind::Local),
        _ => Err(format!("unknown catalog {s:?} (synthetic, local)")),
    }
}

fn parse_strategy(s: &str) -> Result<SamplingStrategy, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

fn parse_mode(s: &str) -> Result<ProbeMode, String> {
    match s {
        "linear" => Ok(ProbeMode::Linear),
        "finetune" => Ok(ProbeMode::Finetune),
        _ => Err(format!("unknown mode {s:?} (linear, finetune)")),
    }
}

/// Loads the config, applies the seed override and validates.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let path = cli.workdir.join(p);
            if !path.exists() {
                return Err(CliError::Usage(format!("config file {} not found", path.display())));
            }
            RunConfig::load(&path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let mut cfg = resolve_config(cli)?;
    let wd = &cli.workdir;
    match &cli.command {
        Command::Sample(a) => cmd_sample(&mut cfg, wd, a),
        Command::Pretrain(a) => cmd_pretrain(&mut cfg, wd, a),
        Command::Probe(a) => cmd_probe(&mut cfg, wd, a, ProbeMode::Linear),
        Command::Finetune(a) => cmd_probe(&mut cfg, wd, a, ProbeMode::Finetune),
        Command::Sweep(a) => cmd_sweep(&mut cfg, wd, a),
        Command::Changedet(a) => cmd_changedet(&mut cfg, wd, a),
        Command::Plot(a) => cmd_plot(wd, a),
    }
}

fn validated(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))
}

/// Cities from the configured file, or generated ones when no file is set.
pub fn cities_for(cfg: &RunConfig, wd: &Path) -> CliResult<Vec<seco_core::CityRecord>> {
    match &cfg.sampler.cities_path {
        Some(p) => {
            let path = wd.join(p);
            if !path.exists() {
                return Err(CliError::Usage(format!("cities file {} not found", path.display())));
            }
            Ok(load_cities(&path, cfg.sampler.top_cities)?)
        }
        None => Ok(synthetic_cities(
            cfg.sampler.synthetic_cities,
            &cfg.sampler.land_boxes,
            &mut derived(cfg.sampler.world_seed, &[0xc17e]),
        )),
    }
}

/// The procedural world a config describes.
pub fn world_for(cfg: &RunConfig, cities: &[seco_core::CityRecord]) -> SyntheticWorld {
    let mut world = SyntheticWorld::new(cfg.sampler.world_seed).with_patch_size(cfg.sampler.patch_size);
    if cfg.sampler.anchored {
        world = world.with_anchors(cities.iter().map(|c| (c.lat, c.lon)).collect());
    }
    world
}

pub fn cmd_sample(cfg: &mut RunConfig, wd: &Path, a: &SampleArgs) -> CliResult<()> {
    if let Some(n) = a.n_locations {
        cfg.sampler.n_locations = n;
    }
    if let Some(c) = a.catalog {
        cfg.sampler.catalog = c;
    }
    if let Some(s) = a.strategy {
        cfg.sampler.strategy = s;
    }
    if let Some(p) = &a.cities {
        cfg.sampler.cities_path = Some(p.clone());
    }
    if let Some(p) = &a.out {
        cfg.io.data_dir = p.clone();
    }
    validated(cfg)?;
    let cities = cities_for(cfg, wd)?;
    let catalog: Box<dyn TileCatalog> = match cfg.sampler.catalog {
        CatalogKind::Synthetic => Box::new(SyntheticCatalog::new(world_for(cfg, &cities))),
        CatalogKind::Local => {
            let dir = wd.join(cfg.sampler.catalog_dir.as_ref().expect("validated"));
            Box::new(LocalDirCatalog::open(dir)?)
        }
    };
    let out = wd.join(&cfg.io.data_dir);
    cfg.echo_to(&out)?;
    let report = build_dataset(catalog.as_ref(), &cities, &cfg.build_options(), &out)?;
    println!(
        "sampled {} locations into {}: accepted {}, rejected {}, already present {}",
        cfg.sampler.n_locations,
        out.display(),
        report.accepted,
        report.rejected,
        report.already_present
    );
    Ok(())
}

fn load_stacks(dir: &Path) -> CliResult<Vec<StoredStack>> {
    if !dir.join("manifest.jsonl").exists() {
        return Err(CliError::Usage(format!("no dataset at {} (run `seco sample` first)", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

fn float_stacks(stacks: &[StoredStack]) -> Vec<Vec<FloatImage>> {
    stacks
        .iter()
        .map(|s| s.images.iter().map(FloatImage::from_rgb8).collect())
        .collect()
}

pub fn cmd_pretrain(cfg: &mut RunConfig, wd: &Path, a: &PretrainArgs) -> CliResult<()> {
    if a.paper_scale {
        let paper = RunConfig::paper_scale();
        paper.validate()?;
        println!("# published pre-training scale (validated, not run at desk scale)");
        print!("{}", paper.to_toml_string());
        return Ok(());
    }
    if let Some(e) = a.epochs {
        cfg.learner.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.learner.batch_size = b;
    }
    if let Some(p) = &a.data {
        cfg.io.data_dir = p.clone();
    }
    if let Some(p) = &a.out {
        cfg.io.pretrain_dir = p.clone();
    }
    validated(cfg)?;
    let stacks = float_stacks(&load_stacks(&wd.join(&cfg.io.data_dir))?);
    let out = wd.join(&cfg.io.pretrain_dir);
    cfg.echo_to(&out)?;
    let opts = PretrainOptions {
        learner: cfg.learner_config(),
        train: cfg.train_config(),
        views: cfg.views.clone(),
        echo: cfg.to_json(),
        resume: a.resume,
    };
    let outcome = pretrain(&stacks, &opts, &out)?;
    match outcome.last {
        Some(m) => println!(
            "pre-trained {} steps (step {}), loss {:.4} (L0 {:.4}, L1 {:.4}, L2 {:.4}); checkpoint {}",
            outcome.steps_run,
            m.step,
            m.loss.total,
            m.loss.l0,
            m.loss.l1,
            m.loss.l2,
            outcome.checkpoint.display()
        ),
        None => println!("nothing to do; checkpoint {}", outcome.checkpoint.display()),
    }
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, wd: &Path, a: &EvalArgs) -> PathBuf {
    match (&a.checkpoint, &cfg.io.checkpoint) {
        (Some(p), _) | (None, Some(p)) => wd.join(p),
        (None, None) => wd.join(&cfg.io.pretrain_dir).join(FINAL_CHECKPOINT),
    }
}

/// The encoder to evaluate: a checkpoint's online encoder, or a random one.
pub fn eval_encoder(cfg: &RunConfig, wd: &Path, a: &EvalArgs) -> CliResult<Encoder> {
    if a.random_init {
        return Ok(Encoder::new(cfg.learner.encoder.clone(), &mut derived(cfg.seed, &[0x4a7d]))?);
    }
    let path = checkpoint_path(cfg, wd, a);
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(load_checkpoint(&path)?.0.encoder)
}

/// Train/val splits of the configured labeled data.
pub fn labeled_splits(cfg: &RunConfig, wd: &Path) -> CliResult<(LabeledDataset, LabeledDataset)> {
    let dir = wd.join(cfg.io.labels_dir.as_ref().unwrap_or(&cfg.io.data_dir));
    match cfg.eval.labels {
        LabelSource::Folder => Ok((
            seco_core::eval::load_folder_dataset(&dir, Split::Train)?,
            seco_core::eval::load_folder_dataset(&dir, Split::Val)?,
        )),
        LabelSource::Synthetic => {
            let stacks = load_stacks(&dir)?;
            let n_val = ((stacks.len() as f64 * cfg.eval.val_fraction).round() as usize).clamp(1, stacks.len() - 1);
            let (train, val) = stacks.split_at(stacks.len() - n_val);
            Ok((
                synthetic_land_cover(train, cfg.eval.target_kind, Split::Train)?,
                synthetic_land_cover(val, cfg.eval.target_kind, Split::Val)?,
            ))
        }
    }
}

fn apply_eval_args(cfg: &mut RunConfig, a: &EvalArgs) -> CliResult<()> {
    if let Some(e) = a.epochs {
        cfg.eval.epochs = e;
        cfg.eval.change.epochs = e;
    }
    if let Some(s) = a.seeds {
        cfg.eval.seeds = s;
    }
    if let Some(p) = &a.out {
        cfg.io.eval_dir = p.clone();
    }
    validated(cfg)
}

fn probe_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.eval.seeds as u64).map(|r| cfg.seed.wrapping_add(r)).collect()
}

/// One row per seed; the median over seeds is printed and written to
/// `summary.json`.
pub fn cmd_probe(cfg: &mut RunConfig, wd: &Path, a: &EvalArgs, mode: ProbeMode) -> CliResult<()> {
    apply_eval_args(cfg, a)?;
    let encoder = eval_encoder(cfg, wd, a)?;
    let (train, val) = labeled_splits(cfg, wd)?;
    let out = wd.join(&cfg.io.eval_dir).join(mode_task(mode));
    cfg.echo_to(&out)?;
    let mut rows = Vec::new();
    for (r, seed) in probe_seeds(cfg).into_iter().enumerate() {
        let pc = cfg.probe_config(r as u64);
        let res = run_probe(&encoder, &train, &val, mode, &pc)?;
        println!("{} seed {seed}: {} {:.4} (epoch {})", mode_task(mode), res.metric_name, res.best, res.epoch_of_best);
        rows.push(ResultRow {
            task: mode_task(mode).into(),
            mode: mode.as_str().into(),
            fraction: 1.0,
            seed,
            metric_name: res.metric_name,
            metric_value: res.best,
            epoch_of_best: res.epoch_of_best,
        });
    }
    write_results_csv(&out.join(RESULTS_CSV), &rows)?;
    let values: Vec<f64> = rows.iter().map(|r| r.metric_value).collect();
    let med = median(&values).expect("at least one seed");
    println!("{} median over {} seeds: {} {:.4}", mode_task(mode), rows.len(), rows[0].metric_name, med);
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "task": mode_task(mode),
            "metric_name": rows[0].metric_name,
            "median": med,
            "seeds": rows.iter().map(|r| r.seed).collect::<Vec<_>>(),
            "values": values,
            "config": cfg.to_json(),
        }),
    )
}

fn mode_task(mode: ProbeMode) -> &'static str {
    match mode {
        ProbeMode::Linear => "probe",
        ProbeMode::Finetune => "finetune",
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(CoreError::from)?;
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn cmd_sweep(cfg: &mut RunConfig, wd: &Path, a: &SweepArgs) -> CliResult<()> {
    if let Some(f) = &a.fractions {
        cfg.eval.fractions = f.clone();
    }
    apply_eval_args(cfg, &a.eval)?;
    let encoder = eval_encoder(cfg, wd, &a.eval)?;
    let (train, val) = labeled_splits(cfg, wd)?;
    let out = wd.join(&cfg.io.eval_dir).join("sweep");
    cfg.echo_to(&out)?;
    let rows = label_efficiency_sweep(&encoder, &train, &val, &cfg.eval.fractions, a.mode, &cfg.probe_config(0), &probe_seeds(cfg))?;
    let csv = out.join(RESULTS_CSV);
    write_results_csv(&csv, &rows)?;
    for (f, m) in median_by_fraction(&rows) {
        println!("fraction {f}: median {} {:.4}", rows[0].metric_name, m);
    }
    plot_rows(&rows, &out.join("sweep.png"))?;
    println!("wrote {} and sweep.png", csv.display());
    Ok(())
}

/// Median metric per fraction, in increasing fraction order.
pub fn median_by_fraction(rows: &[ResultRow]) -> Vec<(f64, f64)> {
    let mut fractions: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    fractions
        .into_iter()
        .map(|f| {
            let v: Vec<f64> = rows.iter().filter(|r| r.fraction == f).map(|r| r.metric_value).collect();
            (f, median(&v).expect("non-empty group"))
        })
        .collect()
}

fn plot_rows(rows: &[ResultRow], path: &Path) -> CliResult<()> {
    let mut groups: Vec<(String, Vec<ResultRow>)> = Vec::new();
    for r in rows {
        let key = format!("{}/{}", r.task, r.mode);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.clone()),
            None => groups.push((key, vec![r.clone()])),
        }
    }
    let series: Vec<Series> = groups
        .into_iter()
        .map(|(name, g)| Series {
            name,
            points: median_by_fraction(&g),
        })
        .collect();
    let img = LinePlot {
        y_range: Some((0.0, 1.0)),
        ..LinePlot::default()
    }
    .render(&series)?;
    save_png(&img, path)?;
    Ok(())
}

pub fn cmd_changedet(cfg: &mut RunConfig, wd: &Path, a: &EvalArgs) -> CliResult<()> {
    apply_eval_args(cfg, a)?;
    let encoder = eval_encoder(cfg, wd, a)?;
    let cities = cities_for(cfg, wd)?;
    let mut world = world_for(cfg, &cities);
    // keep the ground resolution of the pre-training tiles
    world.extent_km *= cfg.eval.change_size as f64 / cfg.sampler.patch_size as f64;
    world.patch_size = cfg.eval.change_size;
    let pairs = (0..cfg.eval.change_pairs)
        .map(|i| {
            let city = &cities[i % cities.len()];
            let date_b = cfg.sampler.today;
            let date_a = date_b.checked_sub_days(Days::new(365)).expect("date in range");
            synthetic_change_pair(&world, city.lat, city.lon, date_a, date_b, derive_seed(cfg.seed, &[0xc4a9, i as u64]))
        })
        .collect::<seco_core::Result<Vec<_>>>()?;
    let out = wd.join(&cfg.io.eval_dir).join("changedet");
    cfg.echo_to(&out)?;
    let outcome = train_change_decoder(&encoder, &pairs, &cfg.change_config())?;
    let m = &outcome.train_metrics;
    println!("change detection (train): precision {:.4} recall {:.4} F1 {:.4}", m.precision, m.recall, m.f1);
    let row = ResultRow {
        task: "changedet".into(),
        mode: "frozen".into(),
        fraction: 1.0,
        seed: cfg.seed,
        metric_name: "f1".into(),
        metric_value: m.f1,
        epoch_of_best: cfg.eval.change.epochs,
    };
    write_results_csv(&out.join(RESULTS_CSV), &[row])?;
    write_json(
        &out.join("metrics.json"),
        &serde_json::json!({
            "train_metrics": m,
            "loss_history": outcome.loss_history,
            "config": cfg.to_json(),
        }),
    )?;
    for (i, pair) in pairs.iter().enumerate() {
        let pred = predict_mask(&encoder, &outcome.decoder, pair)?;
        let (h, w) = (pair.height(), pair.width());
        let panels = [
            pair.image_a.to_rgb8(),
            pair.image_b.to_rgb8(),
            mask_image(&pair.gt_mask, h, w)?,
            mask_image(&pred, h, w)?,
        ];
        save_png(&side_by_side(&panels, 4)?, &out.join(format!("pair_{i:02}.png")))?;
    }
    Ok(())
}

pub fn cmd_plot(wd: &Path, a: &PlotArgs) -> CliResult<()> {
    let csv = wd.join(&a.csv);
    if !csv.exists() {
        return Err(CliError::Usage(format!("results file {} not found", csv.display())));
    }
    let rows = read_results_csv(&csv)?;
    if rows.is_empty() {
        return Err(CliError::Usage(format!("{} has no rows", csv.display())));
    }
    let out = wd.join(&a.out);
    plot_rows(&rows, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
