use super::Param;

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
            for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
                // first step: buffer starts at the raw gradient
                for ((vi, g), w) in v.iter_mut().zip(&p.grad).zip(&p.value) {
                    *vi = g + self.weight_decay * w;
                }
            }
            for (p, v) in params.into_iter().zip(&self.velocity) {
                for (w, vi) in p.value.iter_mut().zip(v) {
                    *w -= self.lr * vi;
                }
            }
            return;
        }
        assert_eq!(params.len(), self.velocity.len(), "optimizer/parameter mismatch");
        for (p, v) in params.into_iter().zip(self.velocity.iter_mut()) {
            for ((w, g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                let d = g + self.weight_decay * *w;
                *vi = self.momentum * *vi + d;
                *w -= self.lr * *vi;
            }
        }
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.into_iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            for i in 0..p.value.len() {
                let g = p.grad[i] + self.weight_decay * p.value[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
