use ndarray::Array4;

use super::Param;

/// Group normalization with a per-channel affine transform. Statistics are
/// computed per sample, so query and key paths never share batch statistics.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

#[derive(Debug)]
pub struct GroupNormCache {
    xhat: Array4<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(name: &str, groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "channels must divide into groups");
        Self {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::filled(format!("{name}.beta"), vec![channels], 0.0),
            groups,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, GroupNormCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "group norm channels");
        let cpg = c / self.groups;
        let span = cpg * h * w;
        let hw = h * w;
        let mut xhat = x.as_standard_layout().into_owned();
        let mut y = Array4::<f64>::zeros((n, c, h, w));
        let mut inv_std = Vec::with_capacity(n * self.groups);
        {
            let xs = xhat.as_slice_mut().expect("contiguous");
            let ys = y.as_slice_mut().expect("contiguous");
            for (gi, chunk) in xs.chunks_mut(span).enumerate() {
                let mean = chunk.iter().sum::<f64>() / span as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std.push(istd);
                let g = gi % self.groups;
                for (j, v) in chunk.iter_mut().enumerate() {
                    *v = (*v - mean) * istd;
                    let ch = g * cpg + j / hw;
                    ys[gi * span + j] = self.gamma.value[ch] * *v + self.beta.value[ch];
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn forward_inference(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &GroupNormCache, grad_out: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = grad_out.dim();
        let cpg = c / self.groups;
        let hw = h * w;
        let span = cpg * hw;
        let gs = grad_out.as_standard_layout();
        let gs = gs.as_slice().expect("contiguous");
        let xs = cache.xhat.as_slice().expect("contiguous");
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        let ds = dx.as_slice_mut().expect("contiguous");
        let mut dxhat = vec![0.0; span];
        for gi in 0..n * self.groups {
            let g = gi % self.groups;
            let base = gi * span;
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for j in 0..span {
                let ch = g * cpg + j / hw;
                let go = gs[base + j];
                let xh = xs[base + j];
                self.gamma.grad[ch] += go * xh;
                self.beta.grad[ch] += go;
                let d = go * self.gamma.value[ch];
                dxhat[j] = d;
                sum_d += d;
                sum_dx += d * xh;
            }
            let mean_d = sum_d / span as f64;
            let mean_dx = sum_dx / span as f64;
            let istd = cache.inv_std[gi];
            for j in 0..span {
                ds[base + j] = istd * (dxhat[j] - mean_d - xs[base + j] * mean_dx);
            }
        }
        dx
    }
}
