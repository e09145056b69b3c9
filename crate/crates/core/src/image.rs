//! Floating-point RGB images and conversion to network input tensors.

use ndarray::Array4;
use image::RgbImage;

/// Fractional crop rectangle: origin and size as fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl CropRect {
    pub const FULL: CropRect = CropRect {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };
}

/// Row-major `height x width x 3` image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// Bilinear resample of a crop window onto an `out x out` grid
    /// (half-pixel centers, edge clamping). Crop sides shorter than one
    /// pixel are clamped to one pixel.
    pub fn crop_resize(&self, crop: CropRect, out: usize) -> FloatImage {
        let x0 = crop.x * self.width as f64;
        let y0 = crop.y * self.height as f64;
        let cw = (crop.w * self.width as f64).max(1.0);
        let ch = (crop.h * self.height as f64).max(1.0);
        let sx = cw / out as f64;
        let sy = ch / out as f64;
        let mut dst = FloatImage::zeros(out, out);
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        for oy in 0..out {
            let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let iy0 = fy.floor() as usize;
            let iy1 = (iy0 + 1).min(self.height - 1);
            let ty = fy - iy0 as f64;
            for ox in 0..out {
                let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let ix0 = fx.floor() as usize;
                let ix1 = (ix0 + 1).min(self.width - 1);
                let tx = fx - ix0 as f64;
                for c in 0..3 {
                    let top = self.get(iy0, ix0, c) * (1.0 - tx) + self.get(iy0, ix1, c) * tx;
                    let bot = self.get(iy1, ix0, c) * (1.0 - tx) + self.get(iy1, ix1, c) * tx;
                    dst.set(oy, ox, c, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        dst
    }

    pub fn resize(&self, out: usize) -> FloatImage {
        self.crop_resize(CropRect::FULL, out)
    }

    pub fn hflip(&self) -> FloatImage {
        let mut dst = FloatImage::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    dst.set(y, self.width - 1 - x, c, self.get(y, x, c));
                }
            }
        }
        dst
    }

    /// Rotates by `k` quarter turns counter-clockwise. Square images only.
    pub fn rot90(&self, k: usize) -> FloatImage {
        assert_eq!(self.height, self.width, "rot90 needs a square image");
        let n = self.width;
        let mut cur = self.clone();
        for _ in 0..k % 4 {
            let mut dst = FloatImage::zeros(n, n);
            for y in 0..n {
                for x in 0..n {
                    for c in 0..3 {
                        dst.set(n - 1 - x, y, c, cur.get(y, x, c));
                    }
                }
            }
            cur = dst;
        }
        cur
    }

    pub fn mean_abs_diff(&self, other: &FloatImage) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }
}

/// Per-channel normalization applied before the encoder.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Stacks images of equal size into a normalized `(N, 3, H, W)` tensor.
pub fn to_tensor(images: &[&FloatImage]) -> Array4<f64> {
    assert!(!images.is_empty(), "empty image batch");
    let (h, w) = (images[0].height, images[0].width);
    let mut t = Array4::<f64>::zeros((images.len(), 3, h, w));
    for (i, img) in images.iter().enumerate() {
        assert!(img.height == h && img.width == w, "mixed image sizes in batch");
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    t[[i, c, y, x]] = (img.get(y, x, c) - PIXEL_MEAN) / PIXEL_STD;
                }
            }
        }
    }
    t
}
