//! Small residual convolutional encoder `f`: a stack of stride-2 stages, each
//! optionally followed by residual blocks, ending in global average pooling.
//! The pooled vector is the shared representation; the per-stage outputs feed
//! change detection.

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv2d, ConvCache, GroupNorm,
    GroupNormCache, Module, Param,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of each stride-2 stage.
    pub widths: Vec<usize>,
    /// Residual blocks after each stage's downsampling convolution.
    pub blocks: Vec<usize>,
    /// Group-norm groups; must divide every width.
    pub groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            blocks: vec![0, 0, 1],
            groups: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.widths.len() != self.blocks.len() {
            return Err(Error::Config("encoder widths and blocks differ in length".into()));
        }
        if self.groups == 0 || self.widths.iter().any(|w| w % self.groups != 0) {
            return Err(Error::Config(format!(
                "group count {} must divide every stage width {:?}",
                self.groups, self.widths
            )));
        }
        Ok(())
    }

    /// Dimension of the pooled representation.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Total downsampling factor.
    pub fn reduction(&self) -> usize {
        1 << self.widths.len()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv2d,
    norm: GroupNorm,
    blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    stages: Vec<Stage>,
}

struct BlockTrace {
    c1: ConvCache,
    n1: GroupNormCache,
    a1: Array4<f64>,
    c2: ConvCache,
    n2: GroupNormCache,
    out: Array4<f64>,
}

struct StageTrace {
    down: ConvCache,
    norm: GroupNormCache,
    act: Array4<f64>,
    blocks: Vec<BlockTrace>,
}

/// Intermediate values recorded by [`Encoder::forward_train`].
pub struct EncoderTrace {
    stages: Vec<StageTrace>,
    last_hw: (usize, usize),
}

impl ResBlock {
    fn new(name: &str, width: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), width, width, 3, 1, 1, false, rng),
            norm1: GroupNorm::new(&format!("{name}.norm1"), groups, width),
            conv2: Conv2d::new(&format!("{name}.conv2"), width, width, 3, 1, 1, false, rng),
            norm2: GroupNorm::new(&format!("{name}.norm2"), groups, width),
        }
    }

    fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, BlockTrace) {
        let (h, c1) = self.conv1.forward(x);
        let (h, n1) = self.norm1.forward(&h);
        let a1 = relu(&h);
        let (h, c2) = self.conv2.forward(&a1);
        let (h, n2) = self.norm2.forward(&h);
        let out = relu(&(h + x));
        let trace = BlockTrace {
            c1,
            n1,
            a1,
            c2,
            n2,
            out: out.clone(),
        };
        (out, trace)
    }

    fn forward_inference(&self, x: &Array4<f64>) -> Array4<f64> {
        let h = self.norm1.forward_inference(&self.conv1.forward_inference(x));
        let h = self.norm2.forward_inference(&self.conv2.forward_inference(&relu(&h)));
        relu(&(h + x))
    }

    fn backward(&mut self, t: &BlockTrace, grad_out: &Array4<f64>) -> Array4<f64> {
        let g = relu_backward(&t.out, grad_out);
        let gh = self.norm2.backward(&t.n2, &g);
        let ga = self.conv2.backward(&t.c2, &gh, true).expect("input grad");
        let ga = relu_backward(&t.a1, &ga);
        let gh = self.norm1.backward(&t.n1, &ga);
        let gx = self.conv1.backward(&t.c1, &gh, true).expect("input grad");
        gx + g
    }

    fn params(&self) -> Vec<&Param> {
        vec![
            &self.conv1.weight,
            &self.norm1.gamma,
            &self.norm1.beta,
            &self.conv2.weight,
            &self.norm2.gamma,
            &self.norm2.beta,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv1.weight,
            &mut self.norm1.gamma,
            &mut self.norm1.beta,
            &mut self.conv2.weight,
            &mut self.norm2.gamma,
            &mut self.norm2.beta,
        ]
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.widths.len());
        let mut in_ch = 3;
        for (s, (&width, &nblocks)) in config.widths.iter().zip(&config.blocks).enumerate() {
            let name = format!("encoder.stage{s}");
            let down = Conv2d::new(&format!("{name}.down"), in_ch, width, 3, 2, 1, false, rng);
            let norm = GroupNorm::new(&format!("{name}.norm"), config.groups, width);
            let blocks = (0..nblocks)
                .map(|b| ResBlock::new(&format!("{name}.block{b}"), width, config.groups, rng))
                .collect();
            stages.push(Stage { down, norm, blocks });
            in_ch = width;
        }
        Ok(Self { config, stages })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn check_input(&self, x: &Array4<f64>) {
        let (_, c, h, w) = x.dim();
        let r = self.config.reduction();
        assert_eq!(c, 3, "encoder expects RGB input");
        assert!(h >= r && w >= r, "input {h}x{w} smaller than encoder reduction {r}");
    }

    /// Output of every stage, shallowest first.
    pub fn stage_features(&self, x: &Array4<f64>) -> Vec<Array4<f64>> {
        self.check_input(x);
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            h = relu(&stage.norm.forward_inference(&stage.down.forward_inference(&h)));
            for block in &stage.blocks {
                h = block.forward_inference(&h);
            }
            feats.push(h.clone());
        }
        feats
    }

    /// Pooled representation without recording a trace.
    pub fn embed(&self, x: &Array4<f64>) -> Array2<f64> {
        let feats = self.stage_features(x);
        global_avg_pool(feats.last().expect("at least one stage"))
    }

    pub fn forward_train(&self, x: &Array4<f64>) -> (Array2<f64>, EncoderTrace) {
        self.check_input(x);
        let mut traces = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            let (d, down) = stage.down.forward(&h);
            let (d, norm) = stage.norm.forward(&d);
            let act = relu(&d);
            h = act.clone();
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (o, t) = block.forward(&h);
                h = o;
                blocks.push(t);
            }
            traces.push(StageTrace {
                down,
                norm,
                act,
                blocks,
            });
        }
        let (_, _, hh, ww) = h.dim();
        (
            global_avg_pool(&h),
            EncoderTrace {
                stages: traces,
                last_hw: (hh, ww),
            },
        )
    }

    /// Accumulates parameter gradients given the gradient of the pooled output.
    pub fn backward(&mut self, trace: &EncoderTrace, grad_pooled: &Array2<f64>) {
        let (h, w) = trace.last_hw;
        let mut g = global_avg_pool_backward(grad_pooled, h, w);
        let n = self.stages.len();
        for (idx, (stage, st)) in self.stages.iter_mut().zip(&trace.stages).enumerate().rev() {
            for (block, bt) in stage.blocks.iter_mut().zip(&st.blocks).rev() {
                g = block.backward(bt, &g);
            }
            let ga = relu_backward(&st.act, &g);
            let gn = stage.norm.backward(&st.norm, &ga);
            let need_input = idx > 0;
            match stage.down.backward(&st.down, &gn, need_input) {
                Some(gx) => g = gx,
                None => debug_assert_eq!(idx, 0, "stage {idx} of {n}"),
            }
        }
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.push(&s.down.weight);
            out.push(&s.norm.gamma);
            out.push(&s.norm.beta);
            for b in &s.blocks {
                out.extend(b.params());
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.down.weight);
            out.push(&mut s.norm.gamma);
            out.push(&mut s.norm.beta);
            for b in &mut s.blocks {
                out.extend(b.params_mut());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny() -> Encoder {
        let cfg = EncoderConfig {
            widths: vec![4, 8],
            blocks: vec![0, 1],
            groups: 2,
        };
        Encoder::new(cfg, &mut seeded(0)).unwrap()
    }

    #[test]
    fn shapes_and_names() {
        let enc = tiny();
        let x = Array4::from_elem((2, 3, 16, 16), 0.1);
        let feats = enc.stage_features(&x);
        assert_eq!(feats[0].dim(), (2, 4, 8, 8));
        assert_eq!(feats[1].dim(), (2, 8, 4, 4));
        assert_eq!(enc.embed(&x).dim(), (2, 8));
        let names: Vec<_> = enc.params().iter().map(|p| p.name.clone()).collect();
        assert!(names.contains(&"encoder.stage1.block0.conv2.weight".to_string()));
    }

    #[test]
    fn rejects_bad_groups() {
        let cfg = EncoderConfig {
            widths: vec![6],
            blocks: vec![0],
            groups: 4,
        };
        assert!(Encoder::new(cfg, &mut seeded(0)).is_err());
    }

    #[test]
    fn train_and_inference_paths_agree() {
        let enc = tiny();
        let mut rng = seeded(4);
        let x = Array4::from_shape_fn((3, 3, 16, 16), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let (a, _) = enc.forward_train(&x);
        let b = enc.embed(&x);
        assert_eq!(a, b);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut enc = tiny();
        let mut rng = seeded(9);
        let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let up = Array2::from_shape_fn((2, 8), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let (_, trace) = enc.forward_train(&x);
        enc.backward(&trace, &up);
        let grads = enc.flat_grads();
        let base = enc.flat_values();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in (0..base.len()).step_by(7) {
            let mut v = base.clone();
            v[i] += eps;
            let mut e = enc.clone();
            e.set_flat_values(&v);
            let lp = (e.embed(&x) * &up).sum();
            v[i] -= 2.0 * eps;
            e.set_flat_values(&v);
            let lm = (e.embed(&x) * &up).sum();
            let fd = (lp - lm) / (2.0 * eps);
            worst = worst.max((fd - grads[i]).abs());
        }
        assert!(worst < 1e-6, "worst abs error {worst}");
    }
}
