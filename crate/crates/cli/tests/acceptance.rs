//! Acceptance suite: one check per numbered criterion, each printing a single
//! PASS/FAIL line. Runs without the libtest harness so the lines are always
//! shown; the process exits non-zero if any criterion fails.
//!
//! `cargo test -p seco-cli --test acceptance -- 3 11` runs a subset.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use astro_float::{BigFloat, Consts, RoundingMode};
use chrono::Months;
use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;
use seco_cli::{cities_for, world_for};
use seco_core::encoder::{Encoder, EncoderConfig};
use seco_core::eval::{
    average_precision, change_features, linear_probe, mean_average_precision, synthetic_change_pair,
    synthetic_land_cover, train_change_decoder, ChangeConfig, LabeledDataset, ProbeConfig, Split, TargetKind,
};
use seco_core::geosampler::{
    build_dataset, load_dataset, read_manifest, sample_location, BuildOptions, SamplingStrategy, StoredStack,
    SyntheticCatalog, SyntheticWorld, KM_PER_DEGREE,
};
use seco_core::image::FloatImage;
use seco_core::learner::{
    info_nce, pretrain, seco_loss, EmbeddingQueue, LearnerConfig, PretrainOptions, SecoState, SubspaceEmbeddings,
    TrainConfig,
};
use seco_core::rng::{derived, seeded};
use seco_core::views::{apply_artificial, draw_aug_params, make_views, select_temporal_views, AugmentationConfig};
use seco_core::{CityRecord, RunConfig};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_LOCATIONS: usize = 512;
const HELD_OUT: usize = 128;
/// Pre-training length of the desk models (the criterion asks for at least 2000).
const PRETRAIN_STEPS: usize = 4000;
const MICRO_PARAMS: usize = 5000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "info_nce vs extended-precision oracle", c01_info_nce),
        (2, "seco_loss vs naive enumeration", c02_seco_loss),
        (3, "gradient vs central differences", c03_gradient),
        (4, "queue FIFO, capacity, unit norm", c04_queue),
        (5, "momentum update identity", c05_momentum),
        (6, "sampling statistics", c06_sampling),
        (7, "sub-space invariance emergence", c07_invariance),
        (8, "pre-trained beats random init", c08_transfer),
        (9, "gaussian >= uniform sampling", c09_ablation),
        (10, "change-detection sanity", c10_change),
        (11, "mAP oracle and monotone invariance", c11_map),
        (12, "end-to-end determinism", c12_determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn unit_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Array2<f64> {
    let flat: Vec<f64> = (0..rows).flat_map(|_| random_unit(rng, dim)).collect();
    Array2::from_shape_vec((rows, dim), flat).unwrap()
}

// ---------------------------------------------------------------- 1

const PREC: usize = 320;
const RM: RoundingMode = RoundingMode::ToEven;

fn big_dot(a: &[f64], b: &[f64]) -> BigFloat {
    a.iter().zip(b).fold(BigFloat::from_f64(0.0, PREC), |acc, (x, y)| {
        acc.add(&BigFloat::from_f64(*x, PREC).mul(&BigFloat::from_f64(*y, PREC), PREC, RM), PREC, RM)
    })
}

/// `ln(sum_j exp(l_j)) - l_pos` evaluated with 320-bit mantissas.
fn big_info_nce(q: &[f64], pos: &[f64], negs: &[&[f64]], tau: f64, cc: &mut Consts) -> BigFloat {
    let t = BigFloat::from_f64(tau, PREC);
    let lp = big_dot(q, pos).div(&t, PREC, RM);
    let mut sum = lp.exp(PREC, RM, cc);
    for k in negs {
        sum = sum.add(&big_dot(q, k).div(&t, PREC, RM).exp(PREC, RM, cc), PREC, RM);
    }
    sum.ln(PREC, RM, cc).sub(&lp, PREC, RM)
}

fn relative_error_within(value: f64, oracle: &BigFloat, tol: f64) -> bool {
    let diff = BigFloat::from_f64(value, PREC).sub(oracle, PREC, RM);
    let bound = oracle.mul(&BigFloat::from_f64(tol, PREC), PREC, RM);
    matches!(diff.abs_cmp(&bound), Some(c) if c <= 0)
}

fn c01_info_nce() -> Outcome {
    let mut cc = Consts::new().expect("constants cache");
    let mut rng = seeded(101);
    let taus = [0.07, 0.5, 1.0];
    let mut bad = 0;
    for i in 0..1000 {
        let dim = rng.gen_range(2..=128);
        let tau = taus[i % 3];
        let q = random_unit(&mut rng, dim);
        let pos = random_unit(&mut rng, dim);
        let negs: Vec<Vec<f64>> = (0..rng.gen_range(1..=64)).map(|_| random_unit(&mut rng, dim)).collect();
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let got = info_nce(&q, &pos, &refs, tau).expect("valid instance");
        if !relative_error_within(got, &big_info_nce(&q, &pos, &refs, tau, &mut cc), 1e-6) {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("{bad} of 1000 instances exceed relative error 1e-6"))
}

// ---------------------------------------------------------------- 2

/// Direct `-ln(e^p / (e^p + sum e^n))` with explicit positive and negative sets.
fn naive_nce(q: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |k: &[f64]| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / tau;
    if negs.is_empty() {
        return 0.0;
    }
    let ep = dot(pos).exp();
    let en: f64 = negs.iter().map(|k| dot(k).exp()).sum();
    -(ep / (ep + en)).ln()
}

fn naive_seco_loss(emb: &[SubspaceEmbeddings; 3], queues: &[Vec<Vec<f64>>; 3], tau: f64, multi: bool) -> f64 {
    let batch = emb[0].q.nrows();
    let row = |m: &Array2<f64>, i: usize| m.row(i).to_vec();
    let mut total = 0.0;
    for (s, e) in emb.iter().enumerate() {
        let mut sub = 0.0;
        for i in 0..batch {
            let q = row(&e.q, i);
            let (k0, k1, k2) = (row(&e.k0, i), row(&e.k1, i), row(&e.k2, i));
            let mut negs = queues[s].clone();
            sub += match s {
                0 if multi => [&k0, &k1, &k2].iter().map(|p| naive_nce(&q, p, &negs, tau)).sum::<f64>() / 3.0,
                0 => naive_nce(&q, &k0, &negs, tau),
                1 => {
                    negs.extend([k0, k2]);
                    naive_nce(&q, &k1, &negs, tau)
                }
                _ => {
                    negs.extend([k0, k1]);
                    naive_nce(&q, &k2, &negs, tau)
                }
            };
        }
        total += sub / batch as f64;
    }
    total
}

fn c02_seco_loss() -> Outcome {
    let mut rng = seeded(202);
    let mut worst: f64 = 0.0;
    let cases = 300;
    for case in 0..cases {
        let batch = rng.gen_range(1..=8);
        let dim = rng.gen_range(4..=16);
        let tau = [0.07, 0.2, 0.5, 1.0][case % 4];
        let multi = case % 2 == 1;
        let emb: [SubspaceEmbeddings; 3] = std::array::from_fn(|_| SubspaceEmbeddings {
            q: unit_rows(&mut rng, batch, dim),
            k0: unit_rows(&mut rng, batch, dim),
            k1: unit_rows(&mut rng, batch, dim),
            k2: unit_rows(&mut rng, batch, dim),
        });
        let mut queues: [EmbeddingQueue; 3] = std::array::from_fn(|_| EmbeddingQueue::new(64, dim).unwrap());
        let mut plain: [Vec<Vec<f64>>; 3] = Default::default();
        for (q, p) in queues.iter_mut().zip(plain.iter_mut()) {
            for _ in 0..rng.gen_range(0..=64) {
                let v = random_unit(&mut rng, dim);
                q.push(&v).unwrap();
                p.push(v);
            }
        }
        let got = seco_loss(&emb, &queues, tau, multi).unwrap().total;
        let want = naive_seco_loss(&emb, &plain, tau, multi);
        worst = worst.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
    }
    outcome(worst <= 1e-6, format!("max relative error {worst:.2e} over {cases} instances"))
}

// ---------------------------------------------------------------- 3

fn micro_learner() -> LearnerConfig {
    LearnerConfig {
        encoder: EncoderConfig {
            widths: vec![4, 8],
            blocks: vec![0, 1],
            groups: 2,
        },
        proj_dim: 8,
        queue_size: 16,
        temperature: 0.2,
        key_momentum: 0.99,
        multi_positive_z0: false,
    }
}

fn noise_views(n: usize, size: usize, seed: u64) -> Vec<seco_core::ViewSet> {
    let mut rng = seeded(seed);
    let cfg = AugmentationConfig {
        out_size: size,
        ..Default::default()
    };
    (0..n)
        .map(|_| {
            let patches: Vec<FloatImage> = (0..5)
                .map(|_| FloatImage {
                    height: size,
                    width: size,
                    data: (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
                })
                .collect();
            make_views(&patches, &mut rng, &cfg).unwrap()
        })
        .collect()
}

fn c03_gradient() -> Outcome {
    let mut state = SecoState::new(micro_learner(), &TrainConfig::default(), 31).unwrap();
    let mut rng = seeded(32);
    for q in state.queues.iter_mut() {
        for _ in 0..10 {
            q.push(&random_unit(&mut rng, 8)).unwrap();
        }
    }
    let batch = noise_views(2, 8, 33);
    state.loss_and_grad(&batch).unwrap();
    let grads: Vec<f64> = state.online_params().iter().flat_map(|p| p.grad.clone()).collect();
    let base = state.online_values();
    if base.len() > MICRO_PARAMS {
        return outcome(false, format!("micro model has {} parameters", base.len()));
    }
    let eps = 1e-5;
    let (mut checked, mut bad) = (0, 0);
    for k in 0..base.len() {
        if grads[k].abs() <= 1e-8 {
            continue;
        }
        let mut p = base.clone();
        p[k] = base[k] + eps;
        state.set_online_values(&p);
        let lp = state.forward_loss(&batch).unwrap().total;
        p[k] = base[k] - eps;
        state.set_online_values(&p);
        let lm = state.forward_loss(&batch).unwrap().total;
        let fd = (lp - lm) / (2.0 * eps);
        checked += 1;
        if (fd - grads[k]).abs() / fd.abs().max(grads[k].abs()) > 1e-3 {
            bad += 1;
        }
    }
    state.set_online_values(&base);
    let ok_share = (checked - bad) as f64 / checked.max(1) as f64;
    outcome(
        checked > 0 && ok_share >= 0.99,
        format!("{} params, {checked} checked, {:.2}% within 1e-3", base.len(), 100.0 * ok_share),
    )
}

// ---------------------------------------------------------------- 4

#[derive(Debug, Clone)]
enum QueueOp {
    Push(Vec<f64>),
    PushRows(Vec<Vec<f64>>),
}

fn c04_queue() -> Outcome {
    const DIM: usize = 6;
    let vector = prop::collection::vec(-10.0f64..10.0, DIM).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3));
    let op = prop_oneof![
        vector.clone().prop_map(QueueOp::Push),
        prop::collection::vec(vector, 1..5).prop_map(QueueOp::PushRows),
    ];
    let program = (1usize..40, prop::collection::vec(op, 100));
    let mut runner = TestRunner::new(PropConfig {
        cases: 100,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let result = runner.run(&program, |(capacity, ops)| {
        let mut queue = EmbeddingQueue::new(capacity, DIM).unwrap();
        let mut model: std::collections::VecDeque<Vec<f64>> = Default::default();
        let normalize = |v: &[f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        for op in ops {
            let rows = match op {
                QueueOp::Push(v) => {
                    queue.push(&v).unwrap();
                    vec![v]
                }
                QueueOp::PushRows(rows) => {
                    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                    let m = Array2::from_shape_vec((rows.len(), DIM), flat).unwrap();
                    queue.push_rows(m.view()).unwrap();
                    rows
                }
            };
            for r in rows {
                model.push_back(normalize(&r));
                if model.len() > capacity {
                    model.pop_front();
                }
            }
            prop_assert!(queue.len() <= capacity);
            prop_assert_eq!(queue.len(), model.len());
            for (got, want) in queue.iter_oldest_first().zip(&model) {
                let norm = got.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-12, "norm {}", norm);
                for (a, b) in got.iter().zip(want) {
                    prop_assert!((a - b).abs() < 1e-12, "FIFO order violated");
                }
            }
        }
        Ok(())
    });
    match result {
        Ok(()) => outcome(true, "100 programs x 100 operations, zero violations".into()),
        Err(e) => outcome(false, format!("violation: {e}")),
    }
}

// ---------------------------------------------------------------- 5

fn c05_momentum() -> Outcome {
    let mut violations = 0;
    for &m in &[0.0, 0.5, 0.999, 1.0] {
        let mut state = SecoState::new(micro_learner(), &TrainConfig::default(), 51).unwrap();
        let mut rng = seeded(52);
        let perturbed: Vec<f64> = state.online_values().iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
        state.set_online_values(&perturbed);
        let before = state.key_values();
        let theta = state.online_values();
        state.momentum_update(m);
        let after = state.key_values();
        violations += before
            .iter()
            .zip(&theta)
            .zip(&after)
            .filter(|((k, t), a)| (m * **k + (1.0 - m) * **t).to_bits() != a.to_bits())
            .count();
        if m == 0.0 {
            violations += theta.iter().zip(&after).filter(|(t, a)| t.to_bits() != a.to_bits()).count();
        }
        if m == 1.0 {
            violations += before.iter().zip(&after).filter(|(k, a)| k.to_bits() != a.to_bits()).count();
        }
    }
    outcome(violations == 0, format!("{violations} coordinates differ from m*key + (1-m)*online"))
}

// ---------------------------------------------------------------- 6

fn c06_sampling() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let one = [CityRecord {
        name: "mid".into(),
        lat: 45.0,
        lon: 10.0,
        population: 1,
    }];
    let draws: Vec<(f64, f64)> = (0..10_000).map(|i| sample_location(&one, 50.0, 6000 + i).unwrap().offset_km).collect();
    // independent check of the stored offsets against the centre coordinates
    let s = sample_location(&one, 50.0, 6000).unwrap();
    let north = (s.center_lat - 45.0) * KM_PER_DEGREE;
    if (north - s.offset_km.0).abs() > 1e-6 {
        pass = false;
        notes.push("offset does not match centre".to_string());
    }
    for (axis, values) in [("north", draws.iter().map(|d| d.0).collect::<Vec<_>>()), ("east", draws.iter().map(|d| d.1).collect())] {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt();
        pass &= (sd - 50.0).abs() <= 2.5;
        notes.push(format!("{axis} sd {sd:.2} km"));
    }

    let cities: Vec<CityRecord> = (0..20)
        .map(|i| CityRecord {
            name: format!("c{i}"),
            lat: -40.0 + 4.0 * i as f64,
            lon: -100.0 + 9.0 * i as f64,
            population: 1000 - i,
        })
        .collect();
    let mut counts = vec![0.0; cities.len()];
    for i in 0..10_000 {
        counts[sample_location(&cities, 50.0, 9000 + i).unwrap().city_index.unwrap()] += 1.0;
    }
    let expected = 10_000.0 / cities.len() as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((cities.len() - 1) as f64).unwrap().inverse_cdf(0.99);
    pass &= chi2 < critical;
    notes.push(format!("chi2 {chi2:.1} < {critical:.1}"));

    let fx = fixtures();
    let rows = read_manifest(&fx.gaussian_dir).unwrap();
    let mut bad_stacks = 0;
    for r in &rows {
        let d = &r.meta.dates;
        let gaps_ok = d.windows(2).all(|w| {
            let nominal = w[0].checked_add_months(Months::new(3)).unwrap();
            (w[1] - nominal).num_days().abs() <= 15
        });
        if !gaps_ok || d.len() != 5 || r.meta.cloud_fractions.iter().any(|&c| c >= 0.10) {
            bad_stacks += 1;
        }
    }
    pass &= bad_stacks == 0 && !rows.is_empty();
    notes.push(format!("{bad_stacks} of {} stacks off schedule or cloudy", rows.len()));
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------- shared desk-scale fixtures

struct Fixtures {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    world: SyntheticWorld,
    gaussian_dir: PathBuf,
    uniform_dir: PathBuf,
    gaussian: Vec<Vec<FloatImage>>,
    uniform: Vec<Vec<FloatImage>>,
    labeled: (LabeledDataset, LabeledDataset),
}

fn float_stacks(stacks: &[StoredStack]) -> Vec<Vec<FloatImage>> {
    stacks.iter().map(|s| s.images.iter().map(FloatImage::from_rgb8).collect()).collect()
}

fn build(cfg: &RunConfig, world: &SyntheticWorld, cities: &[CityRecord], opts: BuildOptions, dir: &Path) -> Vec<StoredStack> {
    build_dataset(&SyntheticCatalog::new(world.clone()), cities, &opts, dir).unwrap();
    let _ = cfg;
    load_dataset(dir).unwrap()
}

/// Pre-training data (Gaussian and uniform arms) and a separate labeled set,
/// all from the default anchored synthetic world.
fn fixtures() -> &'static Fixtures {
    static F: OnceLock<Fixtures> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let cities = cities_for(&cfg, dir.path()).unwrap();
        let world = world_for(&cfg, &cities);
        let base = cfg.build_options();
        let gaussian_dir = dir.path().join("gaussian");
        let uniform_dir = dir.path().join("uniform");
        let gaussian = build(
            &cfg,
            &world,
            &cities,
            BuildOptions {
                n_locations: TRAIN_LOCATIONS + HELD_OUT,
                seed: 11,
                ..base.clone()
            },
            &gaussian_dir,
        );
        let uniform = build(
            &cfg,
            &world,
            &cities,
            BuildOptions {
                n_locations: TRAIN_LOCATIONS,
                strategy: SamplingStrategy::Uniform,
                seed: 12,
                ..base.clone()
            },
            &uniform_dir,
        );
        let labeled = build(
            &cfg,
            &world,
            &cities,
            BuildOptions {
                n_locations: 400,
                seed: 13,
                ..base
            },
            &dir.path().join("labeled"),
        );
        let (tr, va) = labeled.split_at(320);
        Fixtures {
            cfg,
            world,
            gaussian_dir,
            uniform_dir,
            gaussian: float_stacks(&gaussian),
            uniform: float_stacks(&uniform),
            labeled: (
                synthetic_land_cover(tr, TargetKind::MultiLabel, Split::Train).unwrap(),
                synthetic_land_cover(va, TargetKind::MultiLabel, Split::Val).unwrap(),
            ),
            _dir: dir,
        }
    })
}

fn pretrain_arm(stacks: &[Vec<FloatImage>], seed: u64, out: &Path) -> SecoState {
    let cfg = &fixtures().cfg;
    let mut train = TrainConfig {
        seed,
        ..cfg.train_config()
    };
    let per_epoch = stacks.len() / train.batch_size;
    train.epochs = PRETRAIN_STEPS.div_ceil(per_epoch);
    train.checkpoint_every = train.epochs;
    let opts = PretrainOptions {
        learner: cfg.learner_config(),
        train,
        views: cfg.views.clone(),
        echo: cfg.to_json(),
        resume: false,
    };
    let o = pretrain(stacks, &opts, out).unwrap();
    assert!(o.steps_run as usize >= PRETRAIN_STEPS);
    assert!(o.state.online_values().len() <= MICRO_PARAMS, "desk model is not a micro model");
    o.state
}

fn gaussian_models() -> &'static Vec<SecoState> {
    static M: OnceLock<Vec<SecoState>> = OnceLock::new();
    M.get_or_init(|| {
        let fx = fixtures();
        let train = &fx.gaussian[..TRAIN_LOCATIONS];
        SEEDS
            .iter()
            .map(|&s| pretrain_arm(train, s, &fx.gaussian_dir.join(format!("run{s}"))))
            .collect()
    })
}

fn uniform_models() -> &'static Vec<SecoState> {
    static M: OnceLock<Vec<SecoState>> = OnceLock::new();
    M.get_or_init(|| {
        let fx = fixtures();
        SEEDS
            .iter()
            .map(|&s| pretrain_arm(&fx.uniform, s, &fx.uniform_dir.join(format!("run{s}"))))
            .collect()
    })
}

fn median(v: &[f64]) -> f64 {
    seco_core::eval::median(v).unwrap()
}

// ---------------------------------------------------------------- 7

/// Mean cosine of seasonal pairs and of artificially augmented pairs in Z1 and Z2.
fn invariance_means(state: &SecoState, held: &[Vec<FloatImage>], seed: u64) -> [f64; 4] {
    let aug = &fixtures().cfg.views;
    let size = aug.out_size;
    let mut rng = seeded(seed);
    let mut acc = [0.0; 4];
    for stack in held {
        let (a, b, _) = select_temporal_views(stack.len(), &mut rng).unwrap();
        let xa = stack[a].resize(size);
        let xb = stack[b].resize(size);
        let xt = apply_artificial(&stack[a], &draw_aug_params(&mut rng, aug));
        let z = state.embed_subspaces(&[&xa, &xb, &xt]);
        let cos = |m: &Array2<f64>, i: usize, j: usize| m.row(i).dot(&m.row(j));
        acc[0] += cos(&z[1], 0, 1);
        acc[1] += cos(&z[2], 0, 1);
        acc[2] += cos(&z[1], 0, 2);
        acc[3] += cos(&z[2], 0, 2);
    }
    acc.map(|v| v / held.len() as f64)
}

fn c07_invariance() -> Outcome {
    let fx = fixtures();
    let held = &fx.gaussian[TRAIN_LOCATIONS..];
    let per_seed: Vec<[f64; 4]> = gaussian_models()
        .iter()
        .zip(SEEDS)
        .map(|(m, s)| invariance_means(m, held, 700 + s))
        .collect();
    let seasonal = median(&per_seed.iter().map(|c| c[0] - c[1]).collect::<Vec<_>>());
    let artificial = median(&per_seed.iter().map(|c| c[3] - c[2]).collect::<Vec<_>>());
    let runs: Vec<String> = per_seed
        .iter()
        .map(|c| format!("[{:.3} {:.3} | {:.3} {:.3}]", c[0], c[1], c[2], c[3]))
        .collect();
    outcome(
        seasonal >= 0.05 && artificial >= 0.05,
        format!(
            "median margins: seasonal Z1-Z2 {seasonal:.3}, artificial Z2-Z1 {artificial:.3} (need >= 0.05); per seed [sZ1 sZ2 | aZ1 aZ2] {}",
            runs.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn probe_map(encoder: &Encoder, seed: u64) -> f64 {
    let (train, val) = &fixtures().labeled;
    let cfg = ProbeConfig {
        seed,
        ..fixtures().cfg.probe_config(0)
    };
    linear_probe(encoder, train, val, &cfg).unwrap().best
}

fn c08_transfer() -> Outcome {
    let cfg = &fixtures().cfg;
    let mut margins = Vec::new();
    let mut notes = Vec::new();
    for (m, &s) in gaussian_models().iter().zip(&SEEDS) {
        let random = Encoder::new(cfg.learner.encoder.clone(), &mut derived(s, &[0x4a7d])).unwrap();
        let (p, r) = (probe_map(&m.encoder, s), probe_map(&random, s));
        margins.push(p - r);
        notes.push(format!("{:.1} vs {:.1}", 100.0 * p, 100.0 * r));
    }
    let med = median(&margins);
    outcome(
        med >= 0.05,
        format!("median margin {:.1} mAP points (need >= 5); pre-trained vs random per seed: {}", 100.0 * med, notes.join(", ")),
    )
}

// ---------------------------------------------------------------- 9

fn c09_ablation() -> Outcome {
    let g: Vec<f64> = gaussian_models().iter().zip(&SEEDS).map(|(m, &s)| probe_map(&m.encoder, s)).collect();
    let u: Vec<f64> = uniform_models().iter().zip(&SEEDS).map(|(m, &s)| probe_map(&m.encoder, s)).collect();
    let (mg, mu) = (median(&g), median(&u));
    outcome(mg >= mu, format!("median probe mAP gaussian {:.1} vs uniform {:.1}", 100.0 * mg, 100.0 * mu))
}

// ---------------------------------------------------------------- 10

fn c10_change() -> Outcome {
    let fx = fixtures();
    let encoder = &gaussian_models()[0].encoder;
    let size = fx.cfg.eval.change_size;
    let mut world = fx.world.clone();
    world.extent_km *= size as f64 / world.patch_size as f64;
    world.patch_size = size;
    let cities = cities_for(&fx.cfg, Path::new(".")).unwrap();
    let d_b = fx.cfg.sampler.today;
    let d_a = d_b.checked_sub_months(Months::new(12)).unwrap();
    let pair = synthetic_change_pair(&world, cities[0].lat, cities[0].lon, d_a, d_b, 1010).unwrap();

    let same = change_features(encoder, &pair.image_a, &pair.image_a).unwrap();
    let zero = same.iter().all(|m| m.iter().all(|&v| v == 0.0));
    let ab = change_features(encoder, &pair.image_a, &pair.image_b).unwrap();
    let ba = change_features(encoder, &pair.image_b, &pair.image_a).unwrap();
    let symmetric = ab == ba;

    let cfg = ChangeConfig {
        epochs: 100,
        ..fx.cfg.change_config()
    };
    let out = train_change_decoder(encoder, std::slice::from_ref(&pair), &cfg).unwrap();
    let f1 = out.train_metrics.f1;
    outcome(
        zero && symmetric && f1 >= 0.9,
        format!("identical pair zero: {zero}; swap symmetric: {symmetric}; overfit F1 {f1:.3} after 100 epochs (need >= 0.9)"),
    )
}

// ---------------------------------------------------------------- 11

/// AP from explicit ranks: the rank of item i is one plus the number of items
/// ranked ahead of it (higher score, or equal score and lower index).
fn exhaustive_ap(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| 1 + (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] != 0).map(rank).collect();
    if pos.is_empty() {
        return None;
    }
    pos.sort_unstable();
    let sum: f64 = pos.iter().enumerate().map(|(k, &r)| (k + 1) as f64 / r as f64).sum();
    Some(sum / pos.len() as f64)
}

fn c11_map() -> Outcome {
    let mut rng = seeded(1111);
    let (mut mismatches, mut transform_breaks) = (0, 0);
    let transforms: [fn(f64) -> f64; 3] = [|x| 2.0 * x, |x| x.exp(), |x| x * x * x + 4.0 * x];
    for case in 0..500 {
        let n = rng.gen_range(1..=50);
        let c = rng.gen_range(1..=10);
        // a coarse grid on half the instances forces ties
        let grid = case % 2 == 0;
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| if grid { rng.gen_range(0..6) as f64 / 4.0 } else { rng.gen_range(-3.0..3.0) }).collect())
            .collect();
        let mut labels: Vec<Vec<u8>> = (0..n).map(|_| (0..c).map(|_| u8::from(rng.gen_bool(0.3))).collect()).collect();
        labels[0][0] = 1;
        let mut total = 0.0;
        let mut counted = 0;
        for k in 0..c {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let l: Vec<u8> = labels.iter().map(|r| r[k]).collect();
            if average_precision(&s, &l) != exhaustive_ap(&s, &l) {
                mismatches += 1;
            }
            if let Some(ap) = exhaustive_ap(&s, &l) {
                total += ap;
                counted += 1;
            }
        }
        let map = mean_average_precision(&scores, &labels).unwrap();
        if map != total / counted as f64 {
            mismatches += 1;
        }
        for f in transforms {
            let t: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect();
            if mean_average_precision(&t, &labels).unwrap() != map {
                transform_breaks += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && transform_breaks == 0,
        format!("500 instances: {mismatches} mismatches vs exhaustive ranks, {transform_breaks} changes under monotone transforms"),
    )
}

// ---------------------------------------------------------------- 12

const SMOKE_CONFIG: &str = r#"
seed = 5

[sampler]
n_locations = 64
synthetic_cities = 8

[learner]
epochs = 2
batch_size = 16
queue_size = 64
checkpoint_every = 1

[learner.encoder]
widths = [4, 8]
blocks = [0, 1]
groups = 2

[eval]
epochs = 5
seeds = 1
"#;

fn run_seco(workdir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_seco"))
        .arg("--workdir")
        .arg(workdir)
        .args(["--config", "smoke.toml"])
        .args(args)
        .env_remove("SECO_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn smoke_pipeline(workdir: &Path) -> Result<Vec<u8>, String> {
    std::fs::write(workdir.join("smoke.toml"), SMOKE_CONFIG).map_err(|e| e.to_string())?;
    for args in [&["sample"][..], &["pretrain"], &["probe"]] {
        run_seco(workdir, args)?;
    }
    std::fs::read(workdir.join("runs/eval/probe/results.csv")).map_err(|e| e.to_string())
}

fn c12_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (smoke_pipeline(a.path()), smoke_pipeline(b.path())) {
        (Ok(x), Ok(y)) => {
            let ckpt = |d: &Path| std::fs::read(d.join("runs/pretrain/checkpoint.ckpt")).ok();
            let same_ckpt = ckpt(a.path()) == ckpt(b.path());
            outcome(
                x == y && same_ckpt && !x.is_empty(),
                format!("results.csv identical: {}; checkpoint identical: {same_ckpt}", x == y),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}
