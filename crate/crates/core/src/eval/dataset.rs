use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::geosampler::{StoredStack, NUM_CLASSES};
use crate::image::FloatImage;
use crate::rng::seeded;

/// Fraction of a patch a class must cover to count as present.
pub const PRESENCE_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    MultiLabel,
    SingleLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `N x C` binary rows.
    MultiLabel(Vec<Vec<u8>>),
    /// Class index per example.
    SingleLabel(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::MultiLabel(t) => t.len(),
            Targets::SingleLabel(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> TargetKind {
        match self {
            Targets::MultiLabel(_) => TargetKind::MultiLabel,
            Targets::SingleLabel(_) => TargetKind::SingleLabel,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::MultiLabel(t) => Targets::MultiLabel(idx.iter().map(|&i| t[i].clone()).collect()),
            Targets::SingleLabel(t) => Targets::SingleLabel(idx.iter().map(|&i| t[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<FloatImage>,
    pub targets: Targets,
    pub num_classes: usize,
    pub split: Split,
    /// Whether multi-label rows without any positive are legitimate.
    pub allow_empty_rows: bool,
}

impl LabeledDataset {
    pub fn new(images: Vec<FloatImage>, targets: Targets, num_classes: usize, split: Split, allow_empty_rows: bool) -> Result<Self> {
        if images.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: images.len(),
                actual: targets.len(),
            });
        }
        match &targets {
            Targets::MultiLabel(rows) => {
                if let Some(i) = rows.iter().position(|r| r.len() != num_classes || r.iter().any(|&v| v > 1)) {
                    return Err(Error::InvalidInput(format!("target row {i} is not a {num_classes}-class binary vector")));
                }
                if !allow_empty_rows {
                    if let Some(i) = rows.iter().position(|r| r.iter().all(|&v| v == 0)) {
                        return Err(Error::InvalidInput(format!("target row {i} has no positive label")));
                    }
                }
            }
            Targets::SingleLabel(t) => {
                if let Some(i) = t.iter().position(|&c| c >= num_classes) {
                    return Err(Error::InvalidInput(format!("target {i} is outside {num_classes} classes")));
                }
            }
        }
        Ok(Self {
            images,
            targets,
            num_classes,
            split,
            allow_empty_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            targets: self.targets.select(idx),
            num_classes: self.num_classes,
            split: self.split,
            allow_empty_rows: self.allow_empty_rows,
        }
    }

    /// Subset holding `fraction` of the examples, stratified by class.
    pub fn fraction(&self, fraction: f64, seed: u64) -> Result<LabeledDataset> {
        Ok(self.subset(&stratified_subsample(&self.targets, self.num_classes, fraction, seed)?))
    }

    /// Iterates `(image, target row)` pairs, the target as a dense class vector.
    pub fn iter(&self) -> impl Iterator<Item = (&FloatImage, Vec<u8>)> + '_ {
        self.images.iter().enumerate().map(move |(i, img)| {
            let row = match &self.targets {
                Targets::MultiLabel(t) => t[i].clone(),
                Targets::SingleLabel(t) => {
                    let mut r = vec![0; self.num_classes];
                    r[t[i]] = 1;
                    r
                }
            };
            (img, row)
        })
    }
}

/// Labels from the latent land-cover histogram of each stored stack.
/// Multi-label: every class covering at least [`PRESENCE_THRESHOLD`] of the
/// patch. Single-label: the class covering the most pixels. The image is the
/// stack's first acquisition.
pub fn synthetic_land_cover(stacks: &[StoredStack], kind: TargetKind, split: Split) -> Result<LabeledDataset> {
    let mut images = Vec::with_capacity(stacks.len());
    let mut multi = Vec::new();
    let mut single = Vec::new();
    for s in stacks {
        let hist = s
            .meta
            .latent_label_histogram
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("{} has no latent land-cover labels", s.path)))?;
        let total: u32 = hist.iter().sum();
        let first = s
            .images
            .first()
            .ok_or_else(|| Error::InvalidInput(format!("{} has no images", s.path)))?;
        images.push(FloatImage::from_rgb8(first));
        multi.push(
            hist.iter()
                .map(|&c| u8::from(total > 0 && c as f64 / total as f64 >= PRESENCE_THRESHOLD))
                .collect::<Vec<u8>>(),
        );
        let argmax = hist
            .iter()
            .enumerate()
            .fold((0, 0), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
            .0;
        single.push(argmax);
    }
    let targets = match kind {
        TargetKind::MultiLabel => Targets::MultiLabel(multi),
        TargetKind::SingleLabel => Targets::SingleLabel(single),
    };
    LabeledDataset::new(images, targets, NUM_CLASSES, split, false)
}

/// `dataset.toml` of a folder dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderManifest {
    pub kind: TargetKind,
    pub num_classes: usize,
    #[serde(default)]
    pub allow_empty_rows: bool,
    /// Images are resized to this square size on load.
    pub image_size: Option<usize>,
}

/// Loads one split of a folder dataset: `dataset.toml` plus `train.csv` /
/// `val.csv` with a `path,targets` header, where `targets` lists class indices
/// separated by spaces and `path` is relative to the folder.
pub fn load_folder_dataset(root: &Path, split: Split) -> Result<LabeledDataset> {
    let manifest_path = root.join("dataset.toml");
    let text = fs::read_to_string(&manifest_path).at(&manifest_path)?;
    let manifest: FolderManifest = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
    let csv = root.join(match split {
        Split::Train => "train.csv",
        Split::Val => "val.csv",
    });
    let body = fs::read_to_string(&csv).at(&csv)?;
    let mut lines = body.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "path,targets" => {}
        _ => {
            return Err(Error::Parse {
                path: csv.clone(),
                line: 1,
                message: "expected header `path,targets`".into(),
            })
        }
    }
    let mut images = Vec::new();
    let mut multi = Vec::new();
    let mut single = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: csv.clone(),
            line: i + 1,
            message,
        };
        let (path, targets) = line
            .split_once(',')
            .ok_or_else(|| parse_err("expected `path,targets`".into()))?;
        let classes = targets
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| parse_err(format!("bad class index {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(c) = classes.iter().find(|&&c| c >= manifest.num_classes) {
            return Err(parse_err(format!("class {c} outside {} classes", manifest.num_classes)));
        }
        let img_path = root.join(path.trim());
        let rgb = image::open(&img_path)
            .map_err(|e| parse_err(format!("{}: {e}", img_path.display())))?
            .to_rgb8();
        let mut img = FloatImage::from_rgb8(&rgb);
        if let Some(size) = manifest.image_size {
            img = img.resize(size);
        }
        images.push(img);
        match manifest.kind {
            TargetKind::MultiLabel => {
                let mut row = vec![0u8; manifest.num_classes];
                classes.iter().for_each(|&c| row[c] = 1);
                multi.push(row);
            }
            TargetKind::SingleLabel => {
                if classes.len() != 1 {
                    return Err(parse_err(format!("single-label row has {} classes", classes.len())));
                }
                single.push(classes[0]);
            }
        }
    }
    let targets = match manifest.kind {
        TargetKind::MultiLabel => Targets::MultiLabel(multi),
        TargetKind::SingleLabel => Targets::SingleLabel(single),
    };
    LabeledDataset::new(images, targets, manifest.num_classes, split, manifest.allow_empty_rows)
}

/// Deterministic class-stratified subset of `round(fraction * N)` indices
/// (at least one), returned in ascending order.
///
/// Single-label targets get per-class quotas by largest remainder.
/// Multi-label targets use greedy iterative stratification: the rarest
/// remaining label is distributed first, each example going to whichever of
/// the subset or the remainder still wants that label most.
pub fn stratified_subsample(targets: &Targets, num_classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let n = targets.len();
    if n == 0 {
        return Err(Error::InvalidInput("cannot subsample an empty dataset".into()));
    }
    if fraction == 1.0 {
        return Ok((0..n).collect());
    }
    let want = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = seeded(seed);
    let mut chosen = match targets {
        Targets::SingleLabel(t) => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
            for (i, &c) in t.iter().enumerate() {
                by_class[c].push(i);
            }
            let exact: Vec<f64> = by_class.iter().map(|m| m.len() as f64 * want as f64 / n as f64).collect();
            let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
            let mut order: Vec<usize> = (0..num_classes).collect();
            order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
            let mut missing = want - quota.iter().sum::<usize>();
            for &c in order.iter().cycle().take(num_classes * 2) {
                if missing == 0 {
                    break;
                }
                if quota[c] < by_class[c].len() {
                    quota[c] += 1;
                    missing -= 1;
                }
            }
            let mut out = Vec::with_capacity(want);
            for (members, &q) in by_class.iter_mut().zip(&quota) {
                members.shuffle(&mut rng);
                out.extend_from_slice(&members[..q]);
            }
            out
        }
        Targets::MultiLabel(rows) => iterative_stratification(rows, num_classes, want, &mut rng),
    };
    chosen.sort_unstable();
    Ok(chosen)
}

fn iterative_stratification(rows: &[Vec<u8>], num_classes: usize, want: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let n = rows.len();
    let frac = [want as f64 / n as f64, 1.0 - want as f64 / n as f64];
    let mut capacity = [want as f64, (n - want) as f64];
    let mut desired: [Vec<f64>; 2] = std::array::from_fn(|f| {
        (0..num_classes)
            .map(|c| rows.iter().filter(|r| r[c] != 0).count() as f64 * frac[f])
            .collect()
    });
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let assign = |i: usize, fold: usize, assigned: &mut Vec<Option<usize>>, capacity: &mut [f64; 2], desired: &mut [Vec<f64>; 2]| {
        assigned[i] = Some(fold);
        capacity[fold] -= 1.0;
        for (c, &v) in rows[i].iter().enumerate() {
            if v != 0 {
                desired[fold][c] -= 1.0;
            }
        }
    };
    loop {
        let remaining: Vec<usize> = (0..num_classes)
            .map(|c| order.iter().filter(|&&i| assigned[i].is_none() && rows[i][c] != 0).count())
            .collect();
        let Some(label) = (0..num_classes).filter(|&c| remaining[c] > 0).min_by_key(|&c| (remaining[c], c)) else {
            break;
        };
        for &i in &order {
            if assigned[i].is_some() || rows[i][label] == 0 {
                continue;
            }
            let fold = if capacity[0] <= 0.0 {
                1
            } else if capacity[1] <= 0.0 {
                0
            } else {
                match desired[0][label].total_cmp(&desired[1][label]) {
                    std::cmp::Ordering::Greater => 0,
                    std::cmp::Ordering::Less => 1,
                    std::cmp::Ordering::Equal => usize::from(capacity[1] > capacity[0]),
                }
            };
            assign(i, fold, &mut assigned, &mut capacity, &mut desired);
        }
    }
    for &i in &order {
        if assigned[i].is_none() {
            let fold = usize::from(capacity[0] <= 0.0);
            assign(i, fold, &mut assigned, &mut capacity, &mut desired);
        }
    }
    let mut inside: Vec<bool> = assigned.iter().map(|a| *a == Some(0)).collect();
    refine_by_swaps(rows, num_classes, frac[0], &mut inside, rng);
    (0..n).filter(|&i| inside[i]).collect()
}

/// Swaps members in and out of the subset while that reduces the squared
/// deviation of per-class counts from their proportional targets. Greedy
/// assignment alone drifts on dense labels when the subset is small.
const SWAP_CANDIDATES: usize = 512;

fn refine_by_swaps(rows: &[Vec<u8>], num_classes: usize, frac: f64, inside: &mut [bool], rng: &mut impl rand::Rng) {
    let target: Vec<f64> = (0..num_classes)
        .map(|c| rows.iter().filter(|r| r[c] != 0).count() as f64 * frac)
        .collect();
    let mut count = vec![0.0; num_classes];
    for (r, _) in rows.iter().zip(inside.iter()).filter(|(_, &s)| s) {
        for c in 0..num_classes {
            count[c] += f64::from(r[c]);
        }
    }
    let mut members: Vec<usize> = (0..rows.len()).filter(|&i| inside[i]).collect();
    let mut others: Vec<usize> = (0..rows.len()).filter(|&i| !inside[i]).collect();
    if members.is_empty() || others.is_empty() {
        return;
    }
    for _pass in 0..20 {
        let mut improved = false;
        members.shuffle(rng);
        others.shuffle(rng);
        for a in 0..members.len() {
            let i = members[a];
            let mut best: Option<(usize, f64)> = None;
            let start = rng.gen_range(0..others.len());
            for b in (0..others.len().min(SWAP_CANDIDATES)).map(|k| (start + k) % others.len()) {
                let j = others[b];
                let gain: f64 = (0..num_classes)
                    .map(|c| {
                        let d = f64::from(rows[j][c]) - f64::from(rows[i][c]);
                        if d == 0.0 {
                            return 0.0;
                        }
                        let before = count[c] - target[c];
                        before * before - (before + d) * (before + d)
                    })
                    .sum();
                if gain > 1e-9 && best.is_none_or(|(_, g)| gain > g) {
                    best = Some((b, gain));
                }
            }
            if let Some((b, _)) = best {
                let j = others[b];
                for c in 0..num_classes {
                    count[c] += f64::from(rows[j][c]) - f64::from(rows[i][c]);
                }
                inside[i] = false;
                inside[j] = true;
                members[a] = j;
                others[b] = i;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
}
