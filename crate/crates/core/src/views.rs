//! Query/key view generation.
//!
//! From three distinct dates `t0, t1, t2` of one location:
//! the query is the raw `t0` patch, key 0 is an artificially augmented `t1`
//! patch (seasonal + artificial change), key 1 is the raw `t2` patch (seasonal
//! change only) and key 2 is an artificially augmented `t0` patch (artificial
//! change only).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{CropRect, FloatImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub out_size: usize,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    pub hflip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            out_size: 64,
            crop_scale_min: 0.2,
            crop_scale_max: 1.0,
            crop_ratio_min: 3.0 / 4.0,
            crop_ratio_max: 4.0 / 3.0,
            hflip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
        }
    }
}

impl AugmentationConfig {
    /// A configuration whose draws are always the identity transform.
    pub fn identity(out_size: usize) -> Self {
        Self {
            out_size,
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            crop_ratio_min: 1.0,
            crop_ratio_max: 1.0,
            hflip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, name: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("views.{name} must be a probability, got {p}")))
            }
        };
        prob(self.hflip_p, "hflip_p")?;
        prob(self.jitter_p, "jitter_p")?;
        prob(self.grayscale_p, "grayscale_p")?;
        prob(self.blur_p, "blur_p")?;
        if self.out_size == 0 {
            return Err(Error::Config("views.out_size must be positive".into()));
        }
        if !(0.0 < self.crop_scale_min && self.crop_scale_min <= self.crop_scale_max && self.crop_scale_max <= 1.0) {
            return Err(Error::Config("views crop scale must satisfy 0 < min <= max <= 1".into()));
        }
        if !(0.0 < self.crop_ratio_min && self.crop_ratio_min <= self.crop_ratio_max) {
            return Err(Error::Config("views crop ratio must satisfy 0 < min <= max".into()));
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config("views.hue must be in [0, 0.5]".into()));
        }
        if !(0.0 < self.blur_sigma_min && self.blur_sigma_min <= self.blur_sigma_max) {
            return Err(Error::Config("views blur sigma range is invalid".into()));
        }
        Ok(())
    }
}

/// Colour jitter factors. Identity is `(1, 1, 1, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl ColorJitter {
    pub const IDENTITY: ColorJitter = ColorJitter {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub crop: CropRect,
    pub hflip: bool,
    pub jitter: ColorJitter,
    pub grayscale: bool,
    /// Gaussian blur standard deviation in output pixels; 0 disables blur.
    pub blur_sigma: f64,
    pub out_size: usize,
}

impl AugmentationParams {
    pub fn identity(out_size: usize) -> Self {
        Self {
            crop: CropRect::FULL,
            hflip: false,
            jitter: ColorJitter::IDENTITY,
            grayscale: false,
            blur_sigma: 0.0,
            out_size,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ViewSet {
    pub x_q: FloatImage,
    pub x_k0: FloatImage,
    pub x_k1: FloatImage,
    pub x_k2: FloatImage,
    pub t_indices: (usize, usize, usize),
    pub params_k0: AugmentationParams,
    pub params_k2: AugmentationParams,
}

/// Three distinct indices, uniform over ordered triples.
pub fn select_temporal_views(n: usize, rng: &mut impl Rng) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 dates per stack, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..3 {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    Ok((idx[0], idx[1], idx[2]))
}

/// Random-resized-crop, flip, colour jitter, grayscale and blur parameters.
/// The crop area fraction is uniform in `[crop_scale_min, crop_scale_max]`;
/// the aspect ratio is log-uniform over the part of
/// `[crop_ratio_min, crop_ratio_max]` that keeps the crop inside the image.
pub fn draw_aug_params(rng: &mut impl Rng, cfg: &AugmentationConfig) -> AugmentationParams {
    let area = uniform(rng, cfg.crop_scale_min, cfg.crop_scale_max);
    let lo = cfg.crop_ratio_min.max(area);
    let hi = cfg.crop_ratio_max.min(1.0 / area);
    let ratio = if lo < hi {
        uniform(rng, lo.ln(), hi.ln()).exp()
    } else {
        lo.min(hi)
    };
    let w = (area * ratio).sqrt().min(1.0);
    let h = (area / ratio).sqrt().min(1.0);
    let crop = CropRect {
        x: uniform(rng, 0.0, 1.0 - w),
        y: uniform(rng, 0.0, 1.0 - h),
        w,
        h,
    };
    let hflip = rng.gen::<f64>() < cfg.hflip_p;
    let jitter = if rng.gen::<f64>() < cfg.jitter_p {
        ColorJitter {
            brightness: uniform(rng, (1.0 - cfg.brightness).max(0.0), 1.0 + cfg.brightness),
            contrast: uniform(rng, (1.0 - cfg.contrast).max(0.0), 1.0 + cfg.contrast),
            saturation: uniform(rng, (1.0 - cfg.saturation).max(0.0), 1.0 + cfg.saturation),
            hue: uniform(rng, -cfg.hue, cfg.hue),
        }
    } else {
        ColorJitter::IDENTITY
    };
    let grayscale = rng.gen::<f64>() < cfg.grayscale_p;
    let blur_sigma = if rng.gen::<f64>() < cfg.blur_p {
        uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max)
    } else {
        0.0
    };
    AugmentationParams {
        crop,
        hflip,
        jitter,
        grayscale,
        blur_sigma,
        out_size: cfg.out_size,
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Applies crop, flip, jitter, grayscale and blur, in that order.
pub fn apply_artificial(image: &FloatImage, params: &AugmentationParams) -> FloatImage {
    let mut img = image.crop_resize(params.crop, params.out_size);
    if params.hflip {
        img = img.hflip();
    }
    if params.jitter != ColorJitter::IDENTITY {
        apply_jitter(&mut img, &params.jitter);
    }
    if params.grayscale {
        to_grayscale(&mut img);
    }
    if params.blur_sigma > 0.0 {
        img = gaussian_blur(&img, params.blur_sigma);
    }
    img
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn apply_jitter(img: &mut FloatImage, j: &ColorJitter) {
    if j.brightness != 1.0 {
        img.data.iter_mut().for_each(|v| *v = (*v * j.brightness).clamp(0.0, 1.0));
    }
    if j.contrast != 1.0 {
        let mean = img
            .data
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .sum::<f64>()
            / (img.height * img.width) as f64;
        img.data
            .iter_mut()
            .for_each(|v| *v = ((*v - mean) * j.contrast + mean).clamp(0.0, 1.0));
    }
    if j.saturation != 1.0 {
        for p in img.data.chunks_exact_mut(3) {
            let g = luma(p[0], p[1], p[2]);
            for v in p.iter_mut() {
                *v = ((*v - g) * j.saturation + g).clamp(0.0, 1.0);
            }
        }
    }
    if j.hue != 0.0 {
        for p in img.data.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
            let (r, g, b) = hsv_to_rgb((h + j.hue).rem_euclid(1.0), s, v);
            p[0] = r;
            p[1] = g;
            p[2] = b;
        }
    }
}

fn to_grayscale(img: &mut FloatImage) {
    for p in img.data.chunks_exact_mut(3) {
        let g = luma(p[0], p[1], p[2]);
        p.iter_mut().for_each(|v| *v = g);
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable Gaussian blur with a `ceil(3σ)` radius and clamped borders.
pub fn gaussian_blur(img: &FloatImage, sigma: f64) -> FloatImage {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (img.height as isize, img.width as isize);
    let pass = |src: &FloatImage, horizontal: bool| {
        let mut dst = FloatImage::zeros(src.height, src.width);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (k, wgt) in kernel.iter().enumerate() {
                        let o = k as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y, (x + o).clamp(0, w - 1))
                        } else {
                            ((y + o).clamp(0, h - 1), x)
                        };
                        acc += wgt * src.get(yy as usize, xx as usize, c);
                    }
                    dst.set(y as usize, x as usize, c, acc);
                }
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

/// Builds the query and three key views from the dated patches of one location.
pub fn make_views(patches: &[FloatImage], rng: &mut impl Rng, cfg: &AugmentationConfig) -> Result<ViewSet> {
    let (t0, t1, t2) = select_temporal_views(patches.len(), rng)?;
    let params_k0 = draw_aug_params(rng, cfg);
    let params_k2 = draw_aug_params(rng, cfg);
    Ok(ViewSet {
        x_q: patches[t0].resize(cfg.out_size),
        x_k0: apply_artificial(&patches[t1], &params_k0),
        x_k1: patches[t2].resize(cfg.out_size),
        x_k2: apply_artificial(&patches[t0], &params_k2),
        t_indices: (t0, t1, t2),
        params_k0,
        params_k2,
    })
}
