use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::{kaiming_normal, Param};

/// 2-D convolution with square kernels, lowered to a matrix product via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            kaiming_normal(rng, out_channels * fan_in, fan_in),
        );
        let bias = bias.then(|| Param::filled(format!("{name}.bias"), vec![out_channels], 0.0));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        (
            (h + 2 * p - k) / self.stride + 1,
            (w + 2 * p - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let ckk = self.in_channels * self.kernel * self.kernel;
        ArrayView2::from_shape((self.out_channels, ckk), &self.weight.value).expect("weight layout")
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_hw(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.padding, ho, wo);
        let out = self.weight_matrix().dot(&cols);
        let y = self.unfold_output(&out, n, ho, wo);
        let cache = ConvCache {
            cols,
            in_shape: (n, c, h, w),
            out_hw: (ho, wo),
        };
        (y, cache)
    }

    pub fn forward_inference(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward(x).0
    }

    fn unfold_output(&self, out: &Array2<f64>, n: usize, ho: usize, wo: usize) -> Array4<f64> {
        let hw = ho * wo;
        let mut y = Array4::<f64>::zeros((n, self.out_channels, ho, wo));
        let ys = y.as_slice_mut().expect("contiguous");
        let os = out.as_slice().expect("contiguous");
        let total = n * hw;
        for o in 0..self.out_channels {
            let b = self.bias.as_ref().map_or(0.0, |b| b.value[o]);
            let row = &os[o * total..(o + 1) * total];
            for i in 0..n {
                let dst = &mut ys[(i * self.out_channels + o) * hw..(i * self.out_channels + o + 1) * hw];
                let src = &row[i * hw..(i + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients. Returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(
        &mut self,
        cache: &ConvCache,
        grad_out: &Array4<f64>,
        need_input_grad: bool,
    ) -> Option<Array4<f64>> {
        let (n, c, h, w) = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        let hw = ho * wo;
        let oc = self.out_channels;
        let total = n * hw;

        // (N, O, Ho, Wo) -> (O, N*Ho*Wo)
        let mut g = Array2::<f64>::zeros((oc, total));
        {
            let gs = g.as_slice_mut().expect("contiguous");
            let src = grad_out.as_slice().expect("contiguous grad");
            for i in 0..n {
                for o in 0..oc {
                    let s = &src[(i * oc + o) * hw..(i * oc + o + 1) * hw];
                    gs[o * total + i * hw..o * total + (i + 1) * hw].copy_from_slice(s);
                }
            }
        }

        let dw = g.dot(&cache.cols.t());
        for (acc, d) in self.weight.grad.iter_mut().zip(dw.iter()) {
            *acc += d;
        }
        if let Some(bias) = self.bias.as_mut() {
            for (o, acc) in bias.grad.iter_mut().enumerate() {
                *acc += g.row(o).sum();
            }
        }

        if !need_input_grad {
            return None;
        }
        let dcols = self.weight_matrix().t().dot(&g);
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        col2im(&dcols.view(), &mut dx, self.kernel, self.stride, self.padding, ho, wo);
        Some(dx)
    }
}

fn im2col(
    x: &Array4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let hw = ho * wo;
    let total = n * hw;
    let mut cols = Array2::<f64>::zeros((c * k * k, total));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous");
    let cs = cols.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cs[row * total..(row + 1) * total];
                for i in 0..n {
                    let plane = &xs[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                    let dst = &mut dst_row[i * hw..(i + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &ArrayView2<f64>,
    dx: &mut Array4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (n, c, h, w) = dx.dim();
    let hw = ho * wo;
    let total = n * hw;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("contiguous");
    let mut dxv: ArrayViewMut2<f64> = dx
        .view_mut()
        .into_shape_with_order((n * c, h * w))
        .expect("contiguous dx");
    let ds = dxv.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cs[row * total..(row + 1) * total];
                for i in 0..n {
                    let plane = &mut ds[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                    let src = &src_row[i * hw..(i + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[oy * wo..(oy + 1) * wo];
                        for (ox, s) in srow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}
