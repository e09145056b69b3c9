//! Static PNG figures: metric curves and side-by-side change masks.
//!
//! Figures carry no text; every plot is written next to the CSV that backs it.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

/// One named polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinePlot {
    pub width: u32,
    pub height: u32,
    /// Logarithmic x axis (label fractions span decades).
    pub log_x: bool,
    pub y_range: Option<(f64, f64)>,
}

impl Default for LinePlot {
    fn default() -> Self {
        Self {
            width: 480,
            height: 320,
            log_x: true,
            y_range: None,
        }
    }
}

impl LinePlot {
    /// Renders the series with a light grid at the data's x positions and
    /// at y-tenths of the range.
    pub fn render(&self, series: &[Series]) -> Result<RgbImage> {
        let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
        if pts.is_empty() {
            return Err(Error::InvalidInput("nothing to plot".into()));
        }
        if pts.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite() || (self.log_x && x <= 0.0)) {
            return Err(Error::InvalidInput("plot points must be finite (and positive x on a log axis)".into()));
        }
        let tx = |x: f64| if self.log_x { x.log10() } else { x };
        let (mut x0, mut x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(x, _)| (a.min(tx(x)), b.max(tx(x))));
        let (mut y0, mut y1) = self
            .y_range
            .unwrap_or_else(|| pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, y)| (a.min(y), b.max(y))));
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let margin = 24.0;
        let (w, h) = (self.width as f64, self.height as f64);
        let px = |x: f64| margin + (tx(x) - x0) / (x1 - x0) * (w - 2.0 * margin);
        let py = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);

        let mut img = RgbImage::from_pixel(self.width, self.height, BACKGROUND);
        for i in 0..=10 {
            let y = h - margin - i as f64 / 10.0 * (h - 2.0 * margin);
            draw_line(&mut img, (margin, y), (w - margin, y), GRID);
        }
        for &(x, _) in &pts {
            draw_line(&mut img, (px(x), margin), (px(x), h - margin), GRID);
        }
        draw_line(&mut img, (margin, h - margin), (w - margin, h - margin), AXIS);
        draw_line(&mut img, (margin, margin), (margin, h - margin), AXIS);
        for (k, s) in series.iter().enumerate() {
            let colour = PALETTE[k % PALETTE.len()];
            let mut sorted = s.points.clone();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            for pair in sorted.windows(2) {
                draw_line(&mut img, (px(pair[0].0), py(pair[0].1)), (px(pair[1].0), py(pair[1].1)), colour);
            }
            for &(x, y) in &sorted {
                draw_marker(&mut img, px(x), py(y), colour);
            }
        }
        Ok(img)
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, (a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, c);
    }
}

fn draw_marker(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    let (x, y) = (x.round() as i64, y.round() as i64);
    for dy in -2..=2 {
        for dx in -2..=2 {
            put(img, x + dx, y + dy, c);
        }
    }
}

/// Binary mask as a black/white image.
pub fn mask_image(mask: &[u8], height: usize, width: usize) -> Result<RgbImage> {
    if mask.len() != height * width {
        return Err(Error::ShapeMismatch(format!("mask of {} values for {height}x{width}", mask.len())));
    }
    let raw = mask.iter().flat_map(|&m| [if m != 0 { 255 } else { 0 }; 3]).collect();
    Ok(RgbImage::from_raw(width as u32, height as u32, raw).expect("buffer size"))
}

/// Places panels left to right on a grey background with `gap` pixels between them.
pub fn side_by_side(panels: &[RgbImage], gap: u32) -> Result<RgbImage> {
    if panels.is_empty() {
        return Err(Error::InvalidInput("no panels".into()));
    }
    let width = panels.iter().map(|p| p.width()).sum::<u32>() + gap * (panels.len() as u32 + 1);
    let height = panels.iter().map(|p| p.height()).max().unwrap_or(0) + 2 * gap;
    let mut out = RgbImage::from_pixel(width, height, Rgb([128, 128, 128]));
    let mut x = gap;
    for p in panels {
        image::imageops::replace(&mut out, p, x as i64, gap as i64);
        x += p.width() + gap;
    }
    Ok(out)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
