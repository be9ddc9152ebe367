//! 2-D convolution via im2col and GEMM.

use rand::Rng;

use super::{gemm, Param};

/// Square-kernel conv over `[batch, channels, h, w]` tensors.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out_ch × (in_ch · kernel²)`, row-major.
    pub weight: Param,
    pub bias: Param,
}

/// Forward activations plus the unrolled input patches needed for backward.
pub struct ConvCache {
    /// `(in_ch · k²) × (batch · out_h · out_w)`, row-major.
    col: Vec<f64>,
    batch: usize,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: Param::uniform(out_ch * fan_in, fan_in, rng),
            bias: Param::zeros(out_ch),
        }
    }

    pub fn out_size(&self, in_size: usize) -> usize {
        (in_size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// `x`: `batch × in_ch × in_h × in_w` → (`batch × out_ch × out_h × out_w`, cache).
    pub fn forward(&self, x: &[f64], batch: usize, in_h: usize, in_w: usize) -> (Vec<f64>, ConvCache) {
        debug_assert_eq!(x.len(), batch * self.in_ch * in_h * in_w);
        let (oh, ow) = (self.out_size(in_h), self.out_size(in_w));
        let ckk = self.in_ch * self.kernel * self.kernel;
        let cols = batch * oh * ow;

        let mut col = vec![0.0; ckk * cols];
        for b in 0..batch {
            for c in 0..self.in_ch {
                let plane = &x[(b * self.in_ch + c) * in_h * in_w..(b * self.in_ch + c + 1) * in_h * in_w];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let row = (c * self.kernel + ky) * self.kernel + kx;
                        let dst = &mut col[row * cols + b * oh * ow..row * cols + (b + 1) * oh * ow];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy as usize >= in_h {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix as usize >= in_w {
                                    continue;
                                }
                                dst[oy * ow + ox] = plane[iy as usize * in_w + ix as usize];
                            }
                        }
                    }
                }
            }
        }

        // out_t = W · col, laid out [out_ch, batch · oh · ow].
        let mut out_t = vec![0.0; self.out_ch * cols];
        gemm(self.out_ch, ckk, cols, 1.0, &self.weight.value, false, &col, false, 0.0, &mut out_t);

        // Reorder to [batch, out_ch, oh·ow] and add bias.
        let mut y = vec![0.0; batch * self.out_ch * oh * ow];
        for co in 0..self.out_ch {
            let bias = self.bias.value[co];
            for b in 0..batch {
                let src = &out_t[co * cols + b * oh * ow..co * cols + (b + 1) * oh * ow];
                let dst = &mut y[(b * self.out_ch + co) * oh * ow..(b * self.out_ch + co + 1) * oh * ow];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        (y, ConvCache { col, batch, in_h, in_w })
    }

    /// Accumulates parameter gradients and returns `d loss / d x`.
    pub fn backward(&mut self, cache: &ConvCache, dy: &[f64]) -> Vec<f64> {
        let (batch, in_h, in_w) = (cache.batch, cache.in_h, cache.in_w);
        let (oh, ow) = (self.out_size(in_h), self.out_size(in_w));
        let ckk = self.in_ch * self.kernel * self.kernel;
        let cols = batch * oh * ow;
        debug_assert_eq!(dy.len(), batch * self.out_ch * oh * ow);

        // Reorder dy to [out_ch, batch · oh · ow]; bias grad on the way.
        let mut dy_t = vec![0.0; self.out_ch * cols];
        for co in 0..self.out_ch {
            let mut sum = 0.0;
            for b in 0..batch {
                let src = &dy[(b * self.out_ch + co) * oh * ow..(b * self.out_ch + co + 1) * oh * ow];
                dy_t[co * cols + b * oh * ow..co * cols + (b + 1) * oh * ow].copy_from_slice(src);
                sum += src.iter().sum::<f64>();
            }
            self.bias.grad[co] += sum;
        }

        // dW += dy_t · colᵀ
        gemm(self.out_ch, cols, ckk, 1.0, &dy_t, false, &cache.col, true, 1.0, &mut self.weight.grad);

        // dcol = Wᵀ · dy_t, then scatter back to image layout.
        let mut dcol = vec![0.0; ckk * cols];
        gemm(ckk, self.out_ch, cols, 1.0, &self.weight.value, true, &dy_t, false, 0.0, &mut dcol);

        let mut dx = vec![0.0; batch * self.in_ch * in_h * in_w];
        for b in 0..batch {
            for c in 0..self.in_ch {
                let plane = &mut dx[(b * self.in_ch + c) * in_h * in_w..(b * self.in_ch + c + 1) * in_h * in_w];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let row = (c * self.kernel + ky) * self.kernel + kx;
                        let src = &dcol[row * cols + b * oh * ow..row * cols + (b + 1) * oh * ow];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy as usize >= in_h {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix as usize >= in_w {
                                    continue;
                                }
                                plane[iy as usize * in_w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}
