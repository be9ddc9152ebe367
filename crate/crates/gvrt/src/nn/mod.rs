//! Minimal neural-net toolkit: flat `f64` parameter buffers, layers with
//! explicit backward passes, Adam, and softmax utilities.
//!
//! All math is `f64` so analytic gradients can be validated against central
//! finite differences at `h = 1e-5`, and so repeated runs are bit-identical.
//! Tensors are plain `Vec<f64>` in row-major order with shapes tracked by the
//! owning layer; batch is always the leading dimension.

pub mod adam;
pub mod conv;
pub mod linear;
pub mod lstm;

pub use adam::{Adam, AdamConfig, ParamGroup};
pub use conv::Conv2d;
pub use linear::Linear;
pub use lstm::LstmCell;

use rand::Rng;

/// Floor applied before taking logs of probabilities that may be exactly zero.
pub const LOG_FLOOR: f64 = 1e-12;

/// `ln(max(p, LOG_FLOOR))`.
pub fn safe_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// A learnable tensor: value and accumulated gradient, same length.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(n: usize) -> Self {
        Param {
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Uniform init in `[-bound, bound]` with `bound = sqrt(1 / fan_in)`.
    pub fn uniform(n: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        Param {
            value: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
            grad: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

// ── GEMM ────────────────────────────────────────────────────────────────────

/// `c (m×n) = alpha · op(a) · op(b) + beta · c`, all row-major.
///
/// `ta`/`tb` treat the stored matrix as transposed: with `ta = true`, `a` is
/// stored `k×m` and used as its transpose.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ── Elementwise ─────────────────────────────────────────────────────────────

/// In-place ReLU.
pub fn relu(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// ReLU backward given the *outputs* of the forward pass: `dx = dy · [y > 0]`.
pub fn relu_backward(y: &[f64], dy: &mut [f64]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ── Softmax and cross-entropy ───────────────────────────────────────────────

/// Row-wise softmax of `logits` (`rows × classes`).
pub fn softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let rows = logits.len() / classes;
    let mut out = vec![0.0; logits.len()];
    for r in 0..rows {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &l) in out[r * classes..(r + 1) * classes].iter_mut().zip(row) {
            *o = (l - max).exp();
            sum += *o;
        }
        for o in &mut out[r * classes..(r + 1) * classes] {
            *o /= sum;
        }
    }
    out
}

/// Row-wise log-softmax of `logits` (`rows × classes`).
pub fn log_softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let rows = logits.len() / classes;
    let mut out = vec![0.0; logits.len()];
    for r in 0..rows {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
        for (o, &l) in out[r * classes..(r + 1) * classes].iter_mut().zip(row) {
            *o = l - log_sum;
        }
    }
    out
}

/// Mean cross-entropy of `logits` (`rows × classes`) against integer targets.
///
/// Returns the loss and `d loss / d logits`, already divided by the row count,
/// so the pair is a complete fused forward/backward.
pub fn softmax_xent(logits: &[f64], classes: usize, targets: &[usize]) -> (f64, Vec<f64>) {
    let rows = targets.len();
    debug_assert_eq!(logits.len(), rows * classes);
    let log_p = log_softmax(logits, classes);
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; logits.len()];
    let scale = 1.0 / rows as f64;
    for (r, &t) in targets.iter().enumerate() {
        debug_assert!(t < classes);
        loss -= log_p[r * classes + t];
        for c in 0..classes {
            let p = log_p[r * classes + c].exp();
            dlogits[r * classes + c] = (p - if c == t { 1.0 } else { 0.0 }) * scale;
        }
    }
    (loss * scale, dlogits)
}

/// Index of the row maximum (first one on ties).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ── Embedding ───────────────────────────────────────────────────────────────

/// Token embedding table (`vocab × dim`), row lookup forward, scatter-add backward.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub vocab: usize,
    pub dim: usize,
    pub weight: Param,
}

impl Embedding {
    pub fn new(vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Embedding {
            vocab,
            dim,
            weight: Param::uniform(vocab * dim, dim, rng),
        }
    }

    /// Rows for `tokens`, concatenated (`tokens.len() × dim`).
    pub fn forward(&self, tokens: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; tokens.len() * self.dim];
        for (r, &t) in tokens.iter().enumerate() {
            debug_assert!(t < self.vocab);
            out[r * self.dim..(r + 1) * self.dim]
                .copy_from_slice(&self.weight.value[t * self.dim..(t + 1) * self.dim]);
        }
        out
    }

    pub fn backward(&mut self, tokens: &[usize], dout: &[f64]) {
        debug_assert_eq!(dout.len(), tokens.len() * self.dim);
        for (r, &t) in tokens.iter().enumerate() {
            for d in 0..self.dim {
                self.weight.grad[t * self.dim + d] += dout[r * self.dim + d];
            }
        }
    }
}
