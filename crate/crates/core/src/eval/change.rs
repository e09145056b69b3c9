use chrono::NaiveDate;
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{mask_metrics, MaskMetrics};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::geosampler::SyntheticWorld;
use crate::image::{to_tensor, FloatImage};
use crate::nn::{
    concat_channels, dropout, relu, relu_backward, split_channels, upsample_nearest2x,
    upsample_nearest2x_backward, Adam, Conv2d, ConvCache, Module, Param,
};
use crate::rng::{derived, seeded, SeededRng};

/// Two co-registered images and the binary change mask between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangePair {
    pub image_a: FloatImage,
    pub image_b: FloatImage,
    /// Row-major `height x width`, values in `{0, 1}`.
    pub gt_mask: Vec<u8>,
}

impl ChangePair {
    pub fn new(image_a: FloatImage, image_b: FloatImage, gt_mask: Vec<u8>) -> Result<Self> {
        if (image_a.height, image_a.width) != (image_b.height, image_b.width) {
            return Err(Error::ShapeMismatch(format!(
                "pair images are {}x{} and {}x{}",
                image_a.height, image_a.width, image_b.height, image_b.width
            )));
        }
        if gt_mask.len() != image_a.height * image_a.width || gt_mask.iter().any(|&v| v > 1) {
            return Err(Error::ShapeMismatch("mask must be a binary image of the pair's size".into()));
        }
        Ok(Self {
            image_a,
            image_b,
            gt_mask,
        })
    }

    pub fn height(&self) -> usize {
        self.image_a.height
    }

    pub fn width(&self) -> usize {
        self.image_a.width
    }

    /// Same horizontal flip and quarter turns applied to both images and the mask.
    pub fn transformed(&self, flip: bool, quarter_turns: usize) -> ChangePair {
        let n = self.width();
        let mut mask_img = FloatImage::zeros(self.height(), n);
        for (i, &m) in self.gt_mask.iter().enumerate() {
            mask_img.set(i / n, i % n, 0, m as f64);
        }
        let apply = |img: &FloatImage| {
            let img = if flip { img.hflip() } else { img.clone() };
            img.rot90(quarter_turns)
        };
        let m = apply(&mask_img);
        ChangePair {
            image_a: apply(&self.image_a),
            image_b: apply(&self.image_b),
            gt_mask: (0..self.gt_mask.len()).map(|i| m.get(i / n, i % n, 0) as u8).collect(),
        }
    }

    /// Non-overlapping `tile x tile` crops; a pair smaller than `tile` in
    /// either dimension is kept whole.
    pub fn tiles(&self, tile: usize) -> Vec<ChangePair> {
        let (h, w) = (self.height(), self.width());
        if h < tile || w < tile {
            return vec![self.clone()];
        }
        let crop = |img: &FloatImage, y0: usize, x0: usize| {
            let mut out = FloatImage::zeros(tile, tile);
            for y in 0..tile {
                for x in 0..tile {
                    for c in 0..3 {
                        out.set(y, x, c, img.get(y0 + y, x0 + x, c));
                    }
                }
            }
            out
        };
        let mut out = Vec::new();
        for ty in 0..h / tile {
            for tx in 0..w / tile {
                let (y0, x0) = (ty * tile, tx * tile);
                let mask = (0..tile * tile).map(|i| self.gt_mask[(y0 + i / tile) * w + x0 + i % tile]).collect();
                out.push(ChangePair {
                    image_a: crop(&self.image_a, y0, x0),
                    image_b: crop(&self.image_b, y0, x0),
                    gt_mask: mask,
                });
            }
        }
        out
    }
}

/// `|f_s(a) - f_s(b)|` for every encoder stage `s`, shallowest first.
pub fn change_features(encoder: &Encoder, a: &FloatImage, b: &FloatImage) -> Result<Vec<Array4<f64>>> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch(format!(
            "cannot compare {}x{} with {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let r = encoder.config.reduction();
    if !a.height.is_multiple_of(r) || !a.width.is_multiple_of(r) {
        return Err(Error::ShapeMismatch(format!(
            "image size {}x{} is not a multiple of the encoder reduction {r}",
            a.height, a.width
        )));
    }
    let fa = encoder.stage_features(&to_tensor(&[a]));
    let fb = encoder.stage_features(&to_tensor(&[b]));
    Ok(fa.iter().zip(&fb).map(|(x, y)| (x - y).mapv(f64::abs)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChangeConfig {
    /// Decoder width per level; the encoder's stage widths when empty.
    pub widths: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_gamma: f64,
    pub tile: usize,
    /// Random horizontal flips and quarter turns during training.
    pub augment: bool,
    pub seed: u64,
}

impl Default for ChangeConfig {
    fn default() -> Self {
        Self {
            widths: Vec::new(),
            dropout: 0.3,
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_gamma: 0.95,
            tile: 96,
            augment: true,
            seed: 0,
        }
    }
}

/// U-Net style decoder over per-stage difference maps: starting from the
/// deepest map, upsample, apply dropout, concatenate the next shallower map
/// and convolve; a final upsampling returns to input resolution.
#[derive(Debug, Clone)]
pub struct ChangeDecoder {
    levels: Vec<Conv2d>,
    out: Conv2d,
    head: Conv2d,
    dropout: f64,
}

struct LevelTrace {
    conv: ConvCache,
    act: Array4<f64>,
    /// Dropout mask applied after the upsampling that feeds this level.
    mask: Option<Array4<f64>>,
    skip_channels: usize,
}

struct DecoderTrace {
    levels: Vec<LevelTrace>,
    out_mask: Array4<f64>,
    out_conv: ConvCache,
    out_act: Array4<f64>,
    head: ConvCache,
}

impl ChangeDecoder {
    pub fn new(stage_channels: &[usize], widths: &[usize], dropout: f64, rng: &mut impl Rng) -> Result<Self> {
        let widths = if widths.is_empty() { stage_channels } else { widths };
        if widths.len() != stage_channels.len() || widths.contains(&0) {
            return Err(Error::Config(format!(
                "decoder widths {widths:?} do not match {} encoder stages",
                stage_channels.len()
            )));
        }
        let s = stage_channels.len();
        let mut levels = Vec::with_capacity(s);
        for level in (0..s).rev() {
            let input = stage_channels[level] + if level + 1 < s { widths[level + 1] } else { 0 };
            levels.push(Conv2d::new(&format!("decoder.level{level}"), input, widths[level], 3, 1, 1, true, rng));
        }
        Ok(Self {
            levels,
            out: Conv2d::new("decoder.out", widths[0], widths[0], 3, 1, 1, true, rng),
            head: Conv2d::new("decoder.head", widths[0], 1, 1, 1, 0, true, rng),
            dropout,
        })
    }

    fn forward_impl(&self, diffs: &[Array4<f64>], mut rng: Option<&mut SeededRng>) -> (Array4<f64>, DecoderTrace) {
        let s = diffs.len();
        let mut traces = Vec::with_capacity(s);
        let mut x: Option<Array4<f64>> = None;
        for (i, conv) in self.levels.iter().enumerate() {
            let level = s - 1 - i;
            let (input, mask) = match x.take() {
                None => (diffs[level].clone(), None),
                Some(prev) => {
                    let (up, mask) = self.drop(&upsample_nearest2x(&prev), rng.as_deref_mut());
                    (concat_channels(&up, &diffs[level]), mask)
                }
            };
            let (y, cache) = conv.forward(&input);
            let act = relu(&y);
            traces.push(LevelTrace {
                conv: cache,
                act: act.clone(),
                mask,
                skip_channels: diffs[level].dim().1,
            });
            x = Some(act);
        }
        let (up, out_mask) = self.drop(&upsample_nearest2x(&x.expect("at least one level")), rng);
        let (y, out_conv) = self.out.forward(&up);
        let out_act = relu(&y);
        let (logits, head) = self.head.forward(&out_act);
        let out_mask = out_mask.unwrap_or_else(|| Array4::from_elem(up.dim(), 1.0));
        (
            logits,
            DecoderTrace {
                levels: traces,
                out_mask,
                out_conv,
                out_act,
                head,
            },
        )
    }

    fn drop(&self, x: &Array4<f64>, rng: Option<&mut SeededRng>) -> (Array4<f64>, Option<Array4<f64>>) {
        match rng {
            Some(r) if self.dropout > 0.0 => {
                let (y, m) = dropout(x, self.dropout, r);
                (y, Some(m))
            }
            _ => (x.clone(), None),
        }
    }

    /// Per-pixel change logits `(N, 1, H, W)` without dropout.
    pub fn forward_inference(&self, diffs: &[Array4<f64>]) -> Array4<f64> {
        self.forward_impl(diffs, None).0
    }

    fn backward(&mut self, trace: &DecoderTrace, grad_logits: &Array4<f64>) {
        let g = self.head.backward(&trace.head, grad_logits, true).expect("input grad");
        let g = relu_backward(&trace.out_act, &g);
        let g = self.out.backward(&trace.out_conv, &g, true).expect("input grad") * &trace.out_mask;
        let mut g = upsample_nearest2x_backward(&g);
        for (i, (conv, t)) in self.levels.iter_mut().zip(&trace.levels).enumerate().rev() {
            let ga = relu_backward(&t.act, &g);
            let need_input = i > 0;
            let gin = conv.backward(&t.conv, &ga, need_input);
            if let Some(gin) = gin {
                let up_channels = gin.dim().1 - t.skip_channels;
                let (gup, _) = split_channels(&gin, up_channels);
                let gup = match &t.mask {
                    Some(m) => gup * m,
                    None => gup,
                };
                g = upsample_nearest2x_backward(&gup);
            }
        }
    }
}

impl Module for ChangeDecoder {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for c in self.levels.iter().chain([&self.out, &self.head]) {
            out.push(&c.weight);
            out.extend(c.bias.as_ref());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for c in self.levels.iter_mut().chain([&mut self.out, &mut self.head]) {
            out.push(&mut c.weight);
            out.extend(c.bias.as_mut());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ChangeOutcome {
    pub decoder: ChangeDecoder,
    /// Metrics on the training tiles, predicted without dropout or augmentation.
    pub train_metrics: MaskMetrics,
    /// Mean training loss of every epoch.
    pub loss_history: Vec<f64>,
}

/// Mean binary cross-entropy over pixels and its gradient w.r.t. the logits.
fn bce_with_logits(logits: &Array4<f64>, mask: &[u8]) -> (f64, Array4<f64>) {
    let n = mask.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array4::zeros(logits.dim());
    for ((g, &z), &m) in grad.iter_mut().zip(logits.iter()).zip(mask) {
        let t = m as f64;
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
        *g = (p - t) / n;
    }
    (loss / n, grad)
}

/// Predicted binary change mask for a whole pair.
pub fn predict_mask(encoder: &Encoder, decoder: &ChangeDecoder, pair: &ChangePair) -> Result<Vec<u8>> {
    let diffs = change_features(encoder, &pair.image_a, &pair.image_b)?;
    Ok(decoder.forward_inference(&diffs).iter().map(|&z| u8::from(z > 0.0)).collect())
}

/// Trains a change decoder on top of a frozen encoder.
pub fn train_change_decoder(encoder: &Encoder, pairs: &[ChangePair], cfg: &ChangeConfig) -> Result<ChangeOutcome> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no change pairs".into()));
    }
    if pairs.iter().all(|p| p.gt_mask.iter().all(|&v| v == 0)) {
        return Err(Error::InvalidInput(
            "every ground-truth mask is empty; there is no change to learn".into(),
        ));
    }
    let tiles: Vec<ChangePair> = pairs.iter().flat_map(|p| p.tiles(cfg.tile)).collect();
    let channels = encoder.config.widths.clone();
    let mut decoder = ChangeDecoder::new(&channels, &cfg.widths, cfg.dropout, &mut derived(cfg.seed, &[0xdec0]))?;
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr * cfg.lr_gamma.powi(epoch as i32);
        let mut rng = derived(cfg.seed, &[0xe90c, epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &t in &order {
            let tile = &tiles[t];
            let sample = if cfg.augment {
                let square = tile.height() == tile.width();
                let turns = if square { rng.gen_range(0..4) } else { 2 * rng.gen_range(0..2) };
                if square {
                    tile.transformed(rng.gen_bool(0.5), turns)
                } else {
                    tile.transformed(rng.gen_bool(0.5), 0)
                }
            } else {
                tile.clone()
            };
            let diffs = change_features(encoder, &sample.image_a, &sample.image_b)?;
            let mut drop_rng = seeded(rng.gen());
            let (logits, trace) = decoder.forward_impl(&diffs, Some(&mut drop_rng));
            let (loss, grad) = bce_with_logits(&logits, &sample.gt_mask);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("change decoder loss at epoch {epoch}")));
            }
            total += loss;
            decoder.zero_grad();
            decoder.backward(&trace, &grad);
            opt.step(decoder.params_mut());
        }
        loss_history.push(total / tiles.len() as f64);
    }
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for tile in &tiles {
        pred.extend(predict_mask(encoder, &decoder, tile)?);
        gt.extend_from_slice(&tile.gt_mask);
    }
    Ok(ChangeOutcome {
        decoder,
        train_metrics: mask_metrics(&pred, &gt)?,
        loss_history,
    })
}

/// Built-up surface pasted into the second image inside the change polygon.
const CONSTRUCTION: [f64; 3] = [0.80, 0.76, 0.70];

/// Renders a location on two dates and pastes a new built-up area, bounded by
/// a random star-shaped polygon, into the second image. The mask marks the
/// polygon.
pub fn synthetic_change_pair(
    world: &SyntheticWorld,
    lat: f64,
    lon: f64,
    date_a: NaiveDate,
    date_b: NaiveDate,
    seed: u64,
) -> Result<ChangePair> {
    let image_a = FloatImage::from_rgb8(&world.render(lat, lon, date_a).pixels);
    let mut image_b = FloatImage::from_rgb8(&world.render(lat, lon, date_b).pixels);
    let n = image_a.width;
    let mut rng = seeded(seed);
    let size = n as f64;
    let (cx, cy) = (rng.gen_range(0.35..0.65) * size, rng.gen_range(0.35..0.65) * size);
    let k = rng.gen_range(6..10);
    let polygon: Vec<(f64, f64)> = (0..k)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * (i as f64 + rng.gen_range(-0.3..0.3)) / k as f64;
            let radius = rng.gen_range(0.14..0.28) * size;
            (cx + radius * angle.cos(), cy + radius * angle.sin())
        })
        .collect();
    let grid = rng.gen_range(8..14);
    let mut mask = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            if !point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &polygon) {
                continue;
            }
            mask[y * n + x] = 1;
            let road = x % grid < 2 || y % grid < 2;
            for c in 0..3 {
                let v = if road { 0.35 } else { CONSTRUCTION[c] } + rng.gen_range(-0.03..0.03);
                image_b.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
    ChangePair::new(image_a, image_b, mask)
}

/// Even-odd rule.
fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn encoder() -> Encoder {
        let cfg = EncoderConfig {
            widths: vec![4, 8],
            blocks: vec![0, 1],
            groups: 2,
        };
        Encoder::new(cfg, &mut seeded(1)).unwrap()
    }

    fn pair(size: usize, seed: u64) -> ChangePair {
        let world = SyntheticWorld::new(3).with_patch_size(size);
        let d = |s: &str| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
        synthetic_change_pair(&world, 48.2, 16.4, d("2020-04-10"), d("2020-07-12"), seed).unwrap()
    }

    #[test]
    fn identical_images_give_zero_differences() {
        let p = pair(16, 0);
        for f in change_features(&encoder(), &p.image_a, &p.image_a).unwrap() {
            assert!(f.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn differences_are_symmetric_and_match_naive() {
        let enc = encoder();
        let p = pair(16, 1);
        let ab = change_features(&enc, &p.image_a, &p.image_b).unwrap();
        let ba = change_features(&enc, &p.image_b, &p.image_a).unwrap();
        assert_eq!(ab, ba);
        let fa = enc.stage_features(&to_tensor(&[&p.image_a]));
        let fb = enc.stage_features(&to_tensor(&[&p.image_b]));
        for ((d, a), b) in ab.iter().zip(&fa).zip(&fb) {
            for ((&dv, &av), &bv) in d.iter().zip(a.iter()).zip(b.iter()) {
                assert!(dv >= 0.0);
                assert_eq!(dv, (av - bv).abs());
            }
        }
        assert_eq!(ab.len(), 2);
        assert_eq!(ab[0].dim(), (1, 4, 8, 8));
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let a = FloatImage::zeros(16, 16);
        let b = FloatImage::zeros(8, 8);
        assert!(change_features(&encoder(), &a, &b).is_err());
        assert!(ChangePair::new(a, b, vec![0; 256]).is_err());
    }

    #[test]
    fn synthetic_pair_has_change_inside_polygon() {
        let p = pair(32, 2);
        let changed = p.gt_mask.iter().filter(|&&v| v == 1).count();
        assert!(changed > 20 && changed < 32 * 32 / 2, "{changed}");
    }

    #[test]
    fn tiling_and_transforms() {
        let p = pair(32, 3);
        let tiles = p.tiles(16);
        assert_eq!(tiles.len(), 4);
        assert_eq!(tiles[3].gt_mask[0], p.gt_mask[16 * 32 + 16]);
        assert_eq!(p.tiles(64).len(), 1);
        let t = p.transformed(true, 1);
        assert_eq!(t.gt_mask.iter().map(|&v| v as usize).sum::<usize>(), p.gt_mask.iter().map(|&v| v as usize).sum::<usize>());
        assert_eq!(t.transformed(false, 3).transformed(true, 0), p);
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let enc = encoder();
        let p = pair(16, 4);
        let diffs = change_features(&enc, &p.image_a, &p.image_b).unwrap();
        let mut dec = ChangeDecoder::new(&[4, 8], &[], 0.0, &mut seeded(5)).unwrap();
        let (logits, trace) = dec.forward_impl(&diffs, None);
        let (_, grad) = bce_with_logits(&logits, &p.gt_mask);
        dec.zero_grad();
        dec.backward(&trace, &grad);
        let analytic = dec.flat_grads();
        let base = dec.flat_values();
        let eps = 1e-6;
        for k in (0..base.len()).step_by(5) {
            let mut v = base.clone();
            v[k] += eps;
            dec.set_flat_values(&v);
            let lp = bce_with_logits(&dec.forward_inference(&diffs), &p.gt_mask).0;
            v[k] -= 2.0 * eps;
            dec.set_flat_values(&v);
            let lm = bce_with_logits(&dec.forward_inference(&diffs), &p.gt_mask).0;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - analytic[k]).abs() <= 1e-6 + 1e-4 * fd.abs(), "param {k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn all_negative_masks_abort() {
        let mut p = pair(16, 6);
        p.gt_mask.iter_mut().for_each(|v| *v = 0);
        assert!(train_change_decoder(&encoder(), &[p], &ChangeConfig::default()).is_err());
    }

    #[test]
    fn training_without_dropout_is_deterministic() {
        let enc = encoder();
        let p = pair(16, 7);
        let cfg = ChangeConfig {
            dropout: 0.0,
            epochs: 3,
            ..Default::default()
        };
        let a = train_change_decoder(&enc, std::slice::from_ref(&p), &cfg).unwrap();
        let b = train_change_decoder(&enc, &[p], &cfg).unwrap();
        assert_eq!(a.train_metrics, b.train_metrics);
        assert_eq!(a.loss_history, b.loss_history);
    }
}
