//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::Rng;
use seco_core::image::FloatImage;
use seco_core::rng::seeded;

/// `rows x dim` matrix of random unit vectors.
pub fn unit_rows(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    let mut m = Array2::from_shape_fn((rows, dim), |_| rng.gen_range(-1.0f64..1.0));
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    m
}

/// Five noisy images standing in for one seasonal stack.
pub fn noise_stack(size: usize, seed: u64) -> Vec<FloatImage> {
    let mut rng = seeded(seed);
    (0..5)
        .map(|_| FloatImage {
            height: size,
            width: size,
            data: (0..size * size * 3).map(|_| rng.gen::<f64>()).collect(),
        })
        .collect()
}
