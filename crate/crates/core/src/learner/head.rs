use ndarray::Array2;
use rand::Rng;

use crate::nn::{l2_normalize, l2_normalize_backward, relu, relu_backward, Linear, LinearCache, Module, Param};

/// Two-layer MLP `d -> d -> d'` with ReLU between, followed by l2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct HeadTrace {
    c1: LinearCache,
    hidden: Array2<f64>,
    c2: LinearCache,
    z: Array2<f64>,
    norms: Vec<f64>,
}

impl ProjectionHead {
    pub fn new(name: &str, dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), dim, dim, rng),
            fc2: Linear::new(&format!("{name}.fc2"), dim, out_dim, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_features
    }

    pub fn forward_inference(&self, v: &Array2<f64>) -> Array2<f64> {
        let h = relu(&self.fc1.forward_inference(v));
        l2_normalize(&self.fc2.forward_inference(&h)).0
    }

    pub fn forward(&self, v: &Array2<f64>) -> (Array2<f64>, HeadTrace) {
        let (a, c1) = self.fc1.forward(v);
        let hidden = relu(&a);
        let (y, c2) = self.fc2.forward(&hidden);
        let (z, norms) = l2_normalize(&y);
        (
            z.clone(),
            HeadTrace {
                c1,
                hidden,
                c2,
                z,
                norms,
            },
        )
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, trace: &HeadTrace, grad_z: &Array2<f64>) -> Array2<f64> {
        let gy = l2_normalize_backward(&trace.z, &trace.norms, grad_z);
        let gh = self.fc2.backward(&trace.c2, &gy);
        let ga = relu_backward(&trace.hidden, &gh);
        self.fc1.backward(&trace.c1, &ga)
    }
}

impl Module for ProjectionHead {
    fn params(&self) -> Vec<&Param> {
        vec![&self.fc1.weight, &self.fc1.bias, &self.fc2.weight, &self.fc2.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn output_is_unit_norm() {
        let mut rng = seeded(0);
        let head = ProjectionHead::new("h", 6, 4, &mut rng);
        let v = Array2::from_shape_fn((3, 6), |(i, j)| (i * 6 + j) as f64 * 0.1 - 0.7);
        let z = head.forward_inference(&v);
        for row in z.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
        assert_eq!(head.forward(&v).0, z);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded(1);
        let mut head = ProjectionHead::new("h", 5, 3, &mut rng);
        let v = Array2::from_shape_fn((2, 5), |(i, j)| ((i * 5 + j) as f64).sin());
        let w = Array2::from_shape_fn((2, 3), |(i, j)| ((i + 2 * j) as f64).cos());
        let loss = |h: &ProjectionHead, v: &Array2<f64>| (h.forward_inference(v) * &w).sum();
        let (_, trace) = head.forward(&v);
        head.zero_grad();
        let gv = head.backward(&trace, &w);
        let eps = 1e-6;
        for idx in 0..v.len() {
            let (i, j) = (idx / 5, idx % 5);
            let mut vp = v.clone();
            vp[[i, j]] += eps;
            let mut vm = v.clone();
            vm[[i, j]] -= eps;
            let fd = (loss(&head, &vp) - loss(&head, &vm)) / (2.0 * eps);
            assert!((fd - gv[[i, j]]).abs() < 1e-6, "input {idx}: {fd} vs {}", gv[[i, j]]);
        }
        let analytic = head.flat_grads();
        let base = head.flat_values();
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += eps;
            head.set_flat_values(&p);
            let lp = loss(&head, &v);
            p[k] -= 2.0 * eps;
            head.set_flat_values(&p);
            let lm = loss(&head, &v);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - analytic[k]).abs() < 1e-6, "param {k}: {fd} vs {}", analytic[k]);
        }
    }
}
