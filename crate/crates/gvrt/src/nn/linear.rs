//! Fully connected layer.

use rand::Rng;

use super::{gemm, Param};

/// Affine map `y = x Wᵀ + b` over a batch of row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: Param::uniform(out_dim * in_dim, in_dim, rng),
            bias: Param::zeros(out_dim),
        }
    }

    /// `x`: `batch × in_dim` → `batch × out_dim`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let batch = x.len() / self.in_dim;
        debug_assert_eq!(x.len(), batch * self.in_dim);
        let mut y = Vec::with_capacity(batch * self.out_dim);
        for _ in 0..batch {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(
            batch,
            self.in_dim,
            self.out_dim,
            1.0,
            x,
            false,
            &self.weight.value,
            true,
            1.0,
            &mut y,
        );
        y
    }

    /// Accumulates parameter gradients and returns `d loss / d x`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let batch = x.len() / self.in_dim;
        debug_assert_eq!(dy.len(), batch * self.out_dim);
        // dW += dyᵀ · x
        gemm(
            self.out_dim,
            batch,
            self.in_dim,
            1.0,
            dy,
            true,
            x,
            false,
            1.0,
            &mut self.weight.grad,
        );
        for r in 0..batch {
            for o in 0..self.out_dim {
                self.bias.grad[o] += dy[r * self.out_dim + o];
            }
        }
        // dx = dy · W
        let mut dx = vec![0.0; batch * self.in_dim];
        gemm(
            batch,
            self.out_dim,
            self.in_dim,
            1.0,
            dy,
            false,
            &self.weight.value,
            false,
            0.0,
            &mut dx,
        );
        dx
    }
}
