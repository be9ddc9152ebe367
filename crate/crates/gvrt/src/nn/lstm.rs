//! Single LSTM cell, stepped externally over time.

use rand::Rng;

use super::{gemm, sigmoid, Param};

/// One LSTM layer's parameters; the caller drives the time loop and keeps the
/// per-step caches so backward can run through an arbitrary unrolled length.
///
/// Gate order within the `4·hidden` blocks is `[input, forget, cell, output]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub in_dim: usize,
    pub hidden: usize,
    /// `4·hidden × in_dim`.
    pub w_ih: Param,
    /// `4·hidden × hidden`.
    pub w_hh: Param,
    pub bias: Param,
}

/// Post-activation gate values and cell state for one time step of a batch.
pub struct LstmStepCache {
    /// `batch × 4·hidden`: σ/tanh-activated gates in order i, f, g, o.
    gates: Vec<f64>,
    /// `batch × hidden`: tanh of the new cell state.
    c_new_tanh: Vec<f64>,
    batch: usize,
}

impl LstmCell {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        LstmCell {
            in_dim,
            hidden,
            w_ih: Param::uniform(4 * hidden * in_dim, in_dim, rng),
            w_hh: Param::uniform(4 * hidden * hidden, hidden, rng),
            bias: Param::zeros(4 * hidden),
        }
    }

    /// One step over a batch: `x` is `batch × in_dim`, `h`/`c` are
    /// `batch × hidden` and are replaced by the new state.
    pub fn forward_step(&self, x: &[f64], h: &mut Vec<f64>, c: &mut Vec<f64>) -> LstmStepCache {
        let batch = x.len() / self.in_dim;
        let hd = self.hidden;
        debug_assert_eq!(h.len(), batch * hd);

        // Pre-activations: bias + x·W_ihᵀ + h·W_hhᵀ.
        let mut gates = Vec::with_capacity(batch * 4 * hd);
        for _ in 0..batch {
            gates.extend_from_slice(&self.bias.value);
        }
        gemm(batch, self.in_dim, 4 * hd, 1.0, x, false, &self.w_ih.value, true, 1.0, &mut gates);
        gemm(batch, hd, 4 * hd, 1.0, h, false, &self.w_hh.value, true, 1.0, &mut gates);

        let mut c_new_tanh = vec![0.0; batch * hd];
        for b in 0..batch {
            let g = &mut gates[b * 4 * hd..(b + 1) * 4 * hd];
            for j in 0..hd {
                let i_g = sigmoid(g[j]);
                let f_g = sigmoid(g[hd + j]);
                let g_g = g[2 * hd + j].tanh();
                let o_g = sigmoid(g[3 * hd + j]);
                g[j] = i_g;
                g[hd + j] = f_g;
                g[2 * hd + j] = g_g;
                g[3 * hd + j] = o_g;
                let c_new = f_g * c[b * hd + j] + i_g * g_g;
                let ct = c_new.tanh();
                c[b * hd + j] = c_new;
                c_new_tanh[b * hd + j] = ct;
                h[b * hd + j] = o_g * ct;
            }
        }
        LstmStepCache { gates, c_new_tanh, batch }
    }

    /// Backward through one step. `x`, `h_prev`, `c_prev` are the step's
    /// inputs; `dh`/`dc` are gradients w.r.t. the step's outputs and are
    /// replaced by gradients w.r.t. the previous state. Returns `dx`.
    pub fn backward_step(
        &mut self,
        cache: &LstmStepCache,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        dh: &mut Vec<f64>,
        dc: &mut Vec<f64>,
    ) -> Vec<f64> {
        let batch = cache.batch;
        let hd = self.hidden;

        // Gradients w.r.t. gate pre-activations.
        let mut da = vec![0.0; batch * 4 * hd];
        for b in 0..batch {
            let g = &cache.gates[b * 4 * hd..(b + 1) * 4 * hd];
            for j in 0..hd {
                let (i_g, f_g, g_g, o_g) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let ct = cache.c_new_tanh[b * hd + j];
                let dh_j = dh[b * hd + j];
                let dc_total = dc[b * hd + j] + dh_j * o_g * (1.0 - ct * ct);
                da[b * 4 * hd + j] = dc_total * g_g * i_g * (1.0 - i_g);
                da[b * 4 * hd + hd + j] = dc_total * c_prev[b * hd + j] * f_g * (1.0 - f_g);
                da[b * 4 * hd + 2 * hd + j] = dc_total * i_g * (1.0 - g_g * g_g);
                da[b * 4 * hd + 3 * hd + j] = dh_j * ct * o_g * (1.0 - o_g);
                dc[b * hd + j] = dc_total * f_g;
            }
        }

        // Parameter gradients: dW_ih += daᵀ·x, dW_hh += daᵀ·h_prev, db += Σ da.
        gemm(4 * hd, batch, self.in_dim, 1.0, &da, true, x, false, 1.0, &mut self.w_ih.grad);
        gemm(4 * hd, batch, hd, 1.0, &da, true, h_prev, false, 1.0, &mut self.w_hh.grad);
        for b in 0..batch {
            for j in 0..4 * hd {
                self.bias.grad[j] += da[b * 4 * hd + j];
            }
        }

        // Input-side gradients: dx = da·W_ih, dh_prev = da·W_hh.
        let mut dx = vec![0.0; batch * self.in_dim];
        gemm(batch, 4 * hd, self.in_dim, 1.0, &da, false, &self.w_ih.value, false, 0.0, &mut dx);
        let mut dh_prev = vec![0.0; batch * hd];
        gemm(batch, 4 * hd, hd, 1.0, &da, false, &self.w_hh.value, false, 0.0, &mut dh_prev);
        *dh = dh_prev;
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;

    fn probe_loss(h: &[f64], c: &[f64]) -> f64 {
        let sh: f64 = h.iter().enumerate().map(|(i, &v)| v * (0.2 + 0.07 * i as f64)).sum();
        let sc: f64 = c.iter().enumerate().map(|(i, &v)| v * (0.1 - 0.05 * i as f64)).sum();
        sh + sc
    }

    /// Run two steps and return the probe loss; exercises state carry-over.
    fn two_step_loss(cell: &LstmCell, x0: &[f64], x1: &[f64], batch: usize) -> f64 {
        let mut h = vec![0.0; batch * cell.hidden];
        let mut c = vec![0.0; batch * cell.hidden];
        cell.forward_step(x0, &mut h, &mut c);
        cell.forward_step(x1, &mut h, &mut c);
        probe_loss(&h, &c)
    }

    #[test]
    fn two_step_gradients_match_finite_difference() {
        let mut rng = component_rng(6, "test-lstm");
        let mut cell = LstmCell::new(3, 4, &mut rng);
        let batch = 2;
        let x0: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let x1: Vec<f64> = (0..6).map(|i| -0.2 * i as f64 + 0.4).collect();

        // Forward, keeping per-step state snapshots.
        let mut h = vec![0.0; batch * cell.hidden];
        let mut c = vec![0.0; batch * cell.hidden];
        let (h0_in, c0_in) = (h.clone(), c.clone());
        let cache0 = cell.forward_step(&x0, &mut h, &mut c);
        let (h1_in, c1_in) = (h.clone(), c.clone());
        let cache1 = cell.forward_step(&x1, &mut h, &mut c);

        // Backward from the probe cotangents through both steps.
        let mut dh: Vec<f64> = (0..h.len()).map(|i| 0.2 + 0.07 * i as f64).collect();
        let mut dc: Vec<f64> = (0..c.len()).map(|i| 0.1 - 0.05 * i as f64).collect();
        let dx1 = cell.backward_step(&cache1, &x1, &h1_in, &c1_in, &mut dh, &mut dc);
        let dx0 = cell.backward_step(&cache0, &x0, &h0_in, &c0_in, &mut dh, &mut dc);

        let h_step = 1e-5;
        let check = |analytic: f64, fd: f64, what: &str| {
            assert!(
                (analytic - fd).abs() < 1e-6,
                "{what}: analytic {analytic} vs fd {fd}"
            );
        };
        for i in 0..cell.w_ih.len() {
            let mut m = cell.clone();
            m.w_ih.value[i] += h_step;
            let lp = two_step_loss(&m, &x0, &x1, batch);
            m.w_ih.value[i] -= 2.0 * h_step;
            let lm = two_step_loss(&m, &x0, &x1, batch);
            check(cell.w_ih.grad[i], (lp - lm) / (2.0 * h_step), "w_ih");
        }
        for i in 0..cell.w_hh.len() {
            let mut m = cell.clone();
            m.w_hh.value[i] += h_step;
            let lp = two_step_loss(&m, &x0, &x1, batch);
            m.w_hh.value[i] -= 2.0 * h_step;
            let lm = two_step_loss(&m, &x0, &x1, batch);
            check(cell.w_hh.grad[i], (lp - lm) / (2.0 * h_step), "w_hh");
        }
        for i in 0..cell.bias.len() {
            let mut m = cell.clone();
            m.bias.value[i] += h_step;
            let lp = two_step_loss(&m, &x0, &x1, batch);
            m.bias.value[i] -= 2.0 * h_step;
            let lm = two_step_loss(&m, &x0, &x1, batch);
            check(cell.bias.grad[i], (lp - lm) / (2.0 * h_step), "bias");
        }
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp[i] += h_step;
            let lp = two_step_loss(&cell, &xp, &x1, batch);
            xp[i] -= 2.0 * h_step;
            let lm = two_step_loss(&cell, &xp, &x1, batch);
            check(dx0[i], (lp - lm) / (2.0 * h_step), "x0");
        }
        for i in 0..x1.len() {
            let mut xp = x1.clone();
            xp[i] += h_step;
            let lp = two_step_loss(&cell, &x0, &xp, batch);
            xp[i] -= 2.0 * h_step;
            let lm = two_step_loss(&cell, &x0, &xp, batch);
            check(dx1[i], (lp - lm) / (2.0 * h_step), "x1");
        }
    }
}
