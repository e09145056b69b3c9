//! Parameter-free operations and their gradients.

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;

pub fn relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its *output*.
pub fn relu_backward<D: ndarray::Dimension>(
    output: &ndarray::Array<f64, D>,
    grad_out: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut g = grad_out.clone();
    g.zip_mut_with(output, |g, &o| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
    g
}

pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let denom = (h * w) as f64;
    Array2::from_shape_fn((n, c), |(i, ch)| x.slice(s![i, ch, .., ..]).sum() / denom)
}

pub fn global_avg_pool_backward(grad_out: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = grad_out.dim();
    let denom = (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| grad_out[[i, ch]] / denom)
}

/// Row-wise l2 normalization. Returns the normalized rows and the row norms.
pub fn l2_normalize(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut z = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in z.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    (z, norms)
}

pub fn l2_normalize_backward(z: &Array2<f64>, norms: &[f64], grad_out: &Array2<f64>) -> Array2<f64> {
    let mut dx = grad_out.clone();
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let zi = z.row(i);
        let proj = zi.dot(&grad_out.row(i));
        row.zip_mut_with(&zi, |d, &zv| *d = (*d - zv * proj) / norms[i]);
    }
    dx
}

pub fn upsample_nearest2x(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(i, ch, y, xx)| x[[i, ch, y / 2, xx / 2]])
}

pub fn upsample_nearest2x_backward(grad_out: &Array4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = grad_out.dim();
    let mut dx = Array4::<f64>::zeros((n, c, h2 / 2, w2 / 2));
    for ((i, ch, y, x), g) in grad_out.indexed_iter() {
        dx[[i, ch, y / 2, x / 2]] += g;
    }
    dx
}

pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(g: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    (
        g.slice(s![.., ..first, .., ..]).to_owned(),
        g.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// Inverted dropout. Returns the output and the scaling mask (0 or 1/(1-p)).
pub fn dropout(x: &Array4<f64>, p: f64, rng: &mut impl Rng) -> (Array4<f64>, Array4<f64>) {
    if p <= 0.0 {
        return (x.clone(), Array4::from_elem(x.dim(), 1.0));
    }
    let keep = 1.0 - p;
    let mask = Array4::from_shape_fn(x.dim(), |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
    (x * &mask, mask)
}
