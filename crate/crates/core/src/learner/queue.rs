use ndarray::ArrayView2;

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-5;

/// Fixed-capacity FIFO of unit vectors, stored as a ring buffer so the live
/// rows are always the first `len` rows of the backing storage.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    len: usize,
    next: usize,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "queue capacity and dimension must be positive (got {capacity}, {dim})"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            len: 0,
            next: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one key, evicting the oldest when full. A key that is not
    /// unit-norm is renormalized with a warning; returns whether that happened.
    pub fn push(&mut self, key: &[f64]) -> Result<bool> {
        if key.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: key.len(),
            });
        }
        let norm = key.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::NonFinite(format!("queue key has norm {norm}")));
        }
        let renormalized = (norm - 1.0).abs() > UNIT_TOL;
        if renormalized {
            log::warn!("queue key has norm {norm:.6}; renormalizing");
        }
        let slot = &mut self.data[self.next * self.dim..(self.next + 1) * self.dim];
        for (dst, &v) in slot.iter_mut().zip(key) {
            *dst = if renormalized { v / norm } else { v };
        }
        self.next = (self.next + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(renormalized)
    }

    /// Pushes every row of a `(batch, dim)` matrix in row order.
    pub fn push_rows(&mut self, keys: ArrayView2<'_, f64>) -> Result<usize> {
        let mut renormalized = 0;
        for row in keys.rows() {
            let row = row.to_vec();
            renormalized += usize::from(self.push(&row)?);
        }
        Ok(renormalized)
    }

    /// Live rows in storage order (not insertion order).
    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len, self.dim), &self.data[..self.len * self.dim])
            .expect("queue layout")
    }

    /// Live rows from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let start = if self.len < self.capacity { 0 } else { self.next };
        (0..self.len).map(move |i| {
            let slot = (start + i) % self.capacity;
            &self.data[slot * self.dim..(slot + 1) * self.dim]
        })
    }

    /// Live rows oldest first, flattened.
    pub fn to_flat(&self) -> Vec<f64> {
        self.iter_oldest_first().flatten().copied().collect()
    }

    /// Rebuilds a queue from rows listed oldest first.
    pub fn from_flat(capacity: usize, dim: usize, rows: &[f64]) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        if !rows.len().is_multiple_of(dim) || rows.len() / dim > capacity {
            return Err(Error::Checkpoint(format!(
                "queue payload of {} values does not fit capacity {capacity} x dim {dim}",
                rows.len()
            )));
        }
        for row in rows.chunks_exact(dim) {
            q.push(row)?;
        }
        Ok(q)
    }
}
