use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::head::ProjectionHead;
use super::loss::{seco_loss, seco_loss_with_grad, SecoLoss, SubspaceEmbeddings};
use super::queue::EmbeddingQueue;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::image::{to_tensor, FloatImage};
use crate::nn::{Module, Param, Sgd};
use crate::rng::derived;
use crate::views::ViewSet;

/// Model shape and contrastive hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub encoder: EncoderConfig,
    /// Projection output dimension `d'`.
    pub proj_dim: usize,
    /// Capacity `K` of each negative queue.
    pub queue_size: usize,
    pub temperature: f64,
    /// EMA coefficient `m` of the key encoder.
    pub key_momentum: f64,
    /// Also treat the k1 and k2 keys as positives in sub-space 0.
    pub multi_positive_z0: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            proj_dim: 128,
            queue_size: 16_384,
            temperature: 0.07,
            key_momentum: 0.999,
            multi_positive_z0: false,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.proj_dim == 0 || self.queue_size == 0 {
            return Err(Error::Config("proj_dim and queue_size must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.key_momentum) {
            return Err(Error::Config(format!("key_momentum must be in [0, 1], got {}", self.key_momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of training after which the learning rate decays.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Write a checkpoint every this many epochs (the final epoch is always saved).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            base_lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![0.6, 0.8],
            lr_decay: 0.1,
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("epochs, batch_size and checkpoint_every must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0 && self.lr_decay > 0.0) {
            return Err(Error::Config("learning-rate parameters must be positive".into()));
        }
        let increasing = self.milestones.windows(2).all(|w| w[0] < w[1]);
        if !increasing || self.milestones.iter().any(|&m| !(0.0 < m && m < 1.0)) {
            return Err(Error::Config(format!(
                "milestones must be increasing fractions in (0, 1), got {:?}",
                self.milestones
            )));
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `base_lr * lr_decay^k` where `k` counts the
/// milestones already reached.
pub fn lr_at(step: u64, total_steps: u64, config: &TrainConfig) -> f64 {
    let reached = config
        .milestones
        .iter()
        .filter(|&&m| step as f64 >= m * total_steps as f64 - 1e-9)
        .count();
    config.base_lr * config.lr_decay.powi(reached as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss: SecoLoss,
    pub lr: f64,
    pub step: u64,
}

/// Online and key networks, the three negative queues and the optimizer state.
#[derive(Debug, Clone)]
pub struct SecoState {
    pub config: LearnerConfig,
    pub encoder: Encoder,
    pub heads: [ProjectionHead; 3],
    pub key_encoder: Encoder,
    pub key_heads: [ProjectionHead; 3],
    pub queues: [EmbeddingQueue; 3],
    pub optimizer: Sgd,
    pub step: u64,
}

impl SecoState {
    /// Fresh state; the key networks start as exact copies of the online ones.
    pub fn new(config: LearnerConfig, train: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derived(seed, &[0x1417]);
        let encoder = Encoder::new(config.encoder.clone(), &mut rng)?;
        let d = encoder.feature_dim();
        let heads: [ProjectionHead; 3] =
            std::array::from_fn(|i| ProjectionHead::new(&format!("head{i}"), d, config.proj_dim, &mut rng));
        let queues = [
            EmbeddingQueue::new(config.queue_size, config.proj_dim)?,
            EmbeddingQueue::new(config.queue_size, config.proj_dim)?,
            EmbeddingQueue::new(config.queue_size, config.proj_dim)?,
        ];
        Ok(Self {
            key_encoder: encoder.clone(),
            key_heads: heads.clone(),
            encoder,
            heads,
            queues,
            optimizer: Sgd::new(train.base_lr, train.momentum, train.weight_decay),
            config,
            step: 0,
        })
    }

    pub fn online_params(&self) -> Vec<&Param> {
        let mut out = self.encoder.params();
        for h in &self.heads {
            out.extend(h.params());
        }
        out
    }

    pub fn online_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.encoder.params_mut();
        for h in &mut self.heads {
            out.extend(h.params_mut());
        }
        out
    }

    pub fn key_params(&self) -> Vec<&Param> {
        let mut out = self.key_encoder.params();
        for h in &self.key_heads {
            out.extend(h.params());
        }
        out
    }

    pub fn key_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.key_encoder.params_mut();
        for h in &mut self.key_heads {
            out.extend(h.params_mut());
        }
        out
    }

    pub fn online_values(&self) -> Vec<f64> {
        self.online_params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn set_online_values(&mut self, values: &[f64]) {
        let mut offset = 0;
        for p in self.online_params_mut() {
            let n = p.len();
            p.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }

    pub fn key_values(&self) -> Vec<f64> {
        self.key_params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    /// `θ' <- m θ' + (1 - m) θ` for every key-network parameter.
    pub fn momentum_update(&mut self, m: f64) {
        let online: Vec<Vec<f64>> = self.online_params().iter().map(|p| p.value.clone()).collect();
        for (kp, theta) in self.key_params_mut().into_iter().zip(&online) {
            for (k, &t) in kp.value.iter_mut().zip(theta) {
                *k = m * *k + (1.0 - m) * t;
            }
        }
    }

    /// Representation `v` from the online encoder.
    pub fn features(&self, images: &[&FloatImage]) -> Array2<f64> {
        self.encoder.embed(&to_tensor(images))
    }

    /// Online projections of `images` in each sub-space.
    pub fn embed_subspaces(&self, images: &[&FloatImage]) -> [Array2<f64>; 3] {
        let v = self.features(images);
        std::array::from_fn(|i| self.heads[i].forward_inference(&v))
    }

    fn key_embeddings(&self, batch: &[ViewSet]) -> [[Array2<f64>; 3]; 3] {
        let n = batch.len();
        let mut images: Vec<&FloatImage> = batch.iter().map(|v| &v.x_k0).collect();
        images.extend(batch.iter().map(|v| &v.x_k1));
        images.extend(batch.iter().map(|v| &v.x_k2));
        let v = self.key_encoder.embed(&to_tensor(&images));
        std::array::from_fn(|i| {
            let z = self.key_heads[i].forward_inference(&v);
            std::array::from_fn(|k| z.slice(s![k * n..(k + 1) * n, ..]).to_owned())
        })
    }

    /// Queries through the online network, every key through the key network.
    pub fn forward_views(&self, batch: &[ViewSet]) -> Result<[SubspaceEmbeddings; 3]> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let queries: Vec<&FloatImage> = batch.iter().map(|v| &v.x_q).collect();
        let zq = self.embed_subspaces(&queries);
        let keys = self.key_embeddings(batch);
        let emb = assemble(zq, keys);
        check_finite(&emb, self.step)?;
        Ok(emb)
    }

    /// Total loss on `batch` under the current parameters, without side effects.
    pub fn forward_loss(&self, batch: &[ViewSet]) -> Result<SecoLoss> {
        let emb = self.forward_views(batch)?;
        seco_loss(&emb, &self.queues, self.config.temperature, self.config.multi_positive_z0)
    }

    /// Loss on `batch` and its gradient w.r.t. the online parameters (same
    /// order as [`SecoState::online_values`]). Leaves the gradients in place.
    pub fn loss_and_grad(&mut self, batch: &[ViewSet]) -> Result<(SecoLoss, [SubspaceEmbeddings; 3])> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let queries: Vec<&FloatImage> = batch.iter().map(|v| &v.x_q).collect();
        let (v, enc_trace) = self.encoder.forward_train(&to_tensor(&queries));
        let mut head_traces = Vec::with_capacity(3);
        let mut zq: Vec<Array2<f64>> = Vec::with_capacity(3);
        for h in &self.heads {
            let (z, t) = h.forward(&v);
            zq.push(z);
            head_traces.push(t);
        }
        let zq: [Array2<f64>; 3] = zq.try_into().expect("three heads");
        let keys = self.key_embeddings(batch);
        let emb = assemble(zq, keys);
        check_finite(&emb, self.step)?;
        let (loss, grads) = seco_loss_with_grad(
            &emb,
            &self.queues,
            self.config.temperature,
            self.config.multi_positive_z0,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {}: L0={} L1={} L2={}",
                self.step, loss.l0, loss.l1, loss.l2
            )));
        }
        for p in self.online_params_mut() {
            p.zero_grad();
        }
        let mut gv = Array2::<f64>::zeros(v.dim());
        for ((h, t), g) in self.heads.iter_mut().zip(&head_traces).zip(&grads) {
            gv += &h.backward(t, g);
        }
        self.encoder.backward(&enc_trace, &gv);
        Ok((loss, emb))
    }

    /// One optimization step: forward, loss, SGD on the online network,
    /// key-network EMA, queue updates, step increment.
    pub fn train_step(&mut self, batch: &[ViewSet], lr: f64) -> Result<StepMetrics> {
        let (loss, emb) = self.loss_and_grad(batch)?;
        self.optimizer.lr = lr;
        let mut opt = std::mem::replace(&mut self.optimizer, Sgd::new(0.0, 0.0, 0.0));
        opt.step(self.online_params_mut());
        self.optimizer = opt;
        self.momentum_update(self.config.key_momentum);
        let [e0, e1, e2] = &emb;
        let mut renormalized = self.queues[0].push_rows(e0.k0.view())?;
        renormalized += self.queues[1].push_rows(e1.k1.view())?;
        renormalized += self.queues[2].push_rows(e2.k2.view())?;
        if renormalized > 0 {
            log::warn!("step {}: {renormalized} queue keys renormalized", self.step);
        }
        self.step += 1;
        Ok(StepMetrics {
            loss,
            lr,
            step: self.step,
        })
    }
}

fn assemble(zq: [Array2<f64>; 3], keys: [[Array2<f64>; 3]; 3]) -> [SubspaceEmbeddings; 3] {
    let mut zq = zq.into_iter();
    let mut keys = keys.into_iter();
    std::array::from_fn(|_| {
        let [k0, k1, k2] = keys.next().expect("three sub-spaces");
        SubspaceEmbeddings {
            q: zq.next().expect("three sub-spaces"),
            k0,
            k1,
            k2,
        }
    })
}

fn check_finite(emb: &[SubspaceEmbeddings; 3], step: u64) -> Result<()> {
    for (i, e) in emb.iter().enumerate() {
        for (name, m) in [("q", &e.q), ("k0", &e.k0), ("k1", &e.k1), ("k2", &e.k2)] {
            if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "step {step}: sub-space {i} embedding {name} has a non-finite value at flat index {pos}"
                )));
            }
        }
    }
    Ok(())
}
