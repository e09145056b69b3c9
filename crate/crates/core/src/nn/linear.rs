use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::{uniform_fan_in, Module, Param};

/// Affine layer `y = x W^T + b` over `(batch, features)` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug)]
pub struct LinearCache {
    input: Array2<f64>,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_features, in_features],
                uniform_fan_in(rng, in_features * out_features, in_features),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![out_features],
                uniform_fan_in(rng, out_features, in_features),
            ),
            in_features,
            out_features,
        }
    }

    pub fn zeroed(name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Param::filled(format!("{name}.weight"), vec![out_features, in_features], 0.0),
            bias: Param::filled(format!("{name}.bias"), vec![out_features], 0.0),
            in_features,
            out_features,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_features, self.in_features), &self.weight.value)
            .expect("weight layout")
    }

    pub fn forward_inference(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_features, "linear input width");
        let mut y = x.dot(&self.weight_matrix().t());
        for mut row in y.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.bias.value) {
                *v += b;
            }
        }
        y
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        let y = self.forward_inference(x);
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache, grad_out: &Array2<f64>) -> Array2<f64> {
        let dw = grad_out.t().dot(&cache.input);
        for (acc, d) in self.weight.grad.iter_mut().zip(dw.iter()) {
            *acc += d;
        }
        for row in grad_out.rows() {
            for (acc, d) in self.bias.grad.iter_mut().zip(row) {
                *acc += d;
            }
        }
        grad_out.dot(&self.weight_matrix())
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
