//! 2-D cross-correlation via im2col + GEMM.

use super::{matmul, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }
}

/// `floor((len + 2·pad − dilation·(k − 1) − 1) / stride) + 1`, or `None` if non-positive.
pub fn conv_output_len(len: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = len + 2 * pad;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub cfg: Conv2dConfig,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Input row index for output row `o` and kernel tap `ki`, if inside the input.
    #[inline]
    fn in_row(&self, o: usize, ki: usize) -> Option<usize> {
        let r = (o * self.cfg.stride.0 + ki * self.cfg.dilation.0) as isize - self.cfg.padding.0 as isize;
        (r >= 0 && (r as usize) < self.h).then_some(r as usize)
    }

    #[inline]
    fn in_col(&self, o: usize, kj: usize) -> Option<usize> {
        let c = (o * self.cfg.stride.1 + kj * self.cfg.dilation.1) as isize - self.cfg.padding.1 as isize;
        (c >= 0 && (c as usize) < self.w).then_some(c as usize)
    }

    /// Unfolds one item `[c_in, h, w]` into `cols[k][p]`.
    pub fn im2col<T: Real>(&self, input: &[T], cols: &mut [T]) {
        let p = self.p();
        for ci in 0..self.c_in {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * p;
                    let dst = &mut cols[row..row + p];
                    for orow in 0..self.oh {
                        let seg = &mut dst[orow * self.ow..(orow + 1) * self.ow];
                        match self.in_row(orow, ki) {
                            None => seg.fill(T::zero()),
                            Some(r) => {
                                let src = &plane[r * self.w..(r + 1) * self.w];
                                for (oc, slot) in seg.iter_mut().enumerate() {
                                    *slot = match self.in_col(oc, kj) {
                                        Some(c) => src[c],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds `cols[k][p]` back, accumulating into one item's input gradient.
    pub fn col2im<T: Real>(&self, cols: &[T], grad_in: &mut [T]) {
        let p = self.p();
        for ci in 0..self.c_in {
            let plane = &mut grad_in[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * p;
                    let src = &cols[row..row + p];
                    for orow in 0..self.oh {
                        let Some(r) = self.in_row(orow, ki) else {
                            continue;
                        };
                        let seg = &src[orow * self.ow..(orow + 1) * self.ow];
                        let dst = &mut plane[r * self.w..(r + 1) * self.w];
                        for (oc, g) in seg.iter().enumerate() {
                            if let Some(c) = self.in_col(oc, kj) {
                                dst[c] += *g;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Forward for a whole batch: `out[b] = W · im2col(x[b]) + bias`.
    pub fn forward<T: Real>(&self, batch: usize, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
        let (k, p) = (self.k(), self.p());
        let in_sz = self.c_in * self.h * self.w;
        let out_sz = self.c_out * p;
        let mut out = vec![T::zero(); batch * out_sz];
        let mut cols = vec![T::zero(); k * p];
        for b in 0..batch {
            self.im2col(&x[b * in_sz..(b + 1) * in_sz], &mut cols);
            let dst = &mut out[b * out_sz..(b + 1) * out_sz];
            matmul(self.c_out, k, p, weight, false, &cols, false, dst, false);
            if let Some(bias) = bias {
                for (co, bv) in bias.iter().enumerate() {
                    dst[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += *bv);
                }
            }
        }
        out
    }

    /// Accumulates gradients for input (if requested), weight and bias.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        batch: usize,
        x: &[T],
        weight: &[T],
        grad_out: &[T],
        grad_x: Option<&mut [T]>,
        grad_w: Option<&mut [T]>,
        grad_b: Option<&mut [T]>,
    ) {
        let (k, p) = (self.k(), self.p());
        let in_sz = self.c_in * self.h * self.w;
        let out_sz = self.c_out * p;
        if let Some(gb) = grad_b {
            for b in 0..batch {
                for (co, acc) in gb.iter_mut().enumerate() {
                    let start = b * out_sz + co * p;
                    *acc += grad_out[start..start + p].iter().copied().sum::<T>();
                }
            }
        }
        let mut cols = vec![T::zero(); k * p];
        if let Some(gw) = grad_w {
            for b in 0..batch {
                self.im2col(&x[b * in_sz..(b + 1) * in_sz], &mut cols);
                // gw[c_out][k] += g[c_out][p] · cols[k][p]^T
                matmul(
                    self.c_out,
                    p,
                    k,
                    &grad_out[b * out_sz..(b + 1) * out_sz],
                    false,
                    &cols,
                    true,
                    gw,
                    true,
                );
            }
        }
        if let Some(gx) = grad_x {
            for b in 0..batch {
                // cols[k][p] = W[c_out][k]^T · g[c_out][p]
                matmul(
                    k,
                    self.c_out,
                    p,
                    weight,
                    true,
                    &grad_out[b * out_sz..(b + 1) * out_sz],
                    false,
                    &mut cols,
                    false,
                );
                self.col2im(&cols, &mut gx[b * in_sz..(b + 1) * in_sz]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation, `[c_in,h,w]` single item.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.oh * g.ow];
        for co in 0..g.c_out {
            for oi in 0..g.oh {
                for oj in 0..g.ow {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let r =
                                    (oi * g.cfg.stride.0 + ki * g.cfg.dilation.0) as isize - g.cfg.padding.0 as isize;
                                let c =
                                    (oj * g.cfg.stride.1 + kj * g.cfg.dilation.1) as isize - g.cfg.padding.1 as isize;
                                if r < 0 || c < 0 || r >= g.h as isize || c >= g.w as isize {
                                    continue;
                                }
                                acc += x[(ci * g.h + r as usize) * g.w + c as usize]
                                    * w[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    out[(co * g.oh + oi) * g.ow + oj] = acc;
                }
            }
        }
        out
    }

    fn geom(c_in: usize, h: usize, w: usize, c_out: usize, k: usize, cfg: Conv2dConfig) -> ConvGeom {
        ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh: k,
            kw: k,
            oh: conv_output_len(h, k, cfg.stride.0, cfg.padding.0, cfg.dilation.0).unwrap(),
            ow: conv_output_len(w, k, cfg.stride.1, cfg.padding.1, cfg.dilation.1).unwrap(),
            cfg,
        }
    }

    #[test]
    fn ones_kernel_sums_window() {
        let g = geom(1, 3, 3, 1, 3, Conv2dConfig::default());
        let out = g.forward::<f64>(1, &[1.0; 9], &[1.0; 9], None);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        for k in [3usize, 5, 7] {
            let cfg = Conv2dConfig {
                padding: ((k - 1) / 2, (k - 1) / 2),
                ..Default::default()
            };
            let g = geom(1, 6, 5, 1, k, cfg);
            let mut w = vec![0.0f64; k * k];
            w[(k / 2) * k + k / 2] = 1.0;
            let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.5 - 3.0).collect();
            assert_eq!(g.forward(1, &x, &w, None), x);
        }
    }

    #[test]
    fn matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (
                1,
                5,
                5,
                1,
                3,
                Conv2dConfig {
                    padding: (2, 2),
                    dilation: (2, 2),
                    ..Default::default()
                },
            ),
            (
                2,
                9,
                7,
                3,
                3,
                Conv2dConfig {
                    padding: (5, 1),
                    dilation: (5, 1),
                    ..Default::default()
                },
            ),
            (
                3,
                8,
                6,
                2,
                5,
                Conv2dConfig {
                    stride: (2, 1),
                    padding: (1, 2),
                    dilation: (1, 1),
                },
            ),
        ];
        for (ci, h, w, co, k, cfg) in cases {
            let g = geom(ci, h, w, co, k, cfg);
            let x: Vec<f64> = (0..ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wt: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = g.forward(1, &x, &wt, None);
            let slow = naive(&g, &x, &wt);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn output_length_formula() {
        assert_eq!(conv_output_len(5, 3, 1, 2, 2), Some(5));
        assert_eq!(conv_output_len(3, 3, 1, 0, 1), Some(1));
        assert_eq!(conv_output_len(2, 3, 1, 0, 1), None);
        assert_eq!(conv_output_len(10, 3, 2, 1, 1), Some(5));
    }
}
