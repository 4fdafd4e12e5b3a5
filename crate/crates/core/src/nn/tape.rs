//! Recorded computation graph and reverse sweep.
//!
//! Each operator appends a node holding its output; `backward` walks the
//! nodes in reverse. Leaves keep accumulating gradient across `backward`
//! calls; interior gradients are recomputed on every call.

use super::conv::{conv_output_len, ConvGeom};
use super::{matmul, Conv2dConfig, DiffTensor, ParamStore, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Statistics source for batch normalisation.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalise with statistics of the valid positions of this batch.
    Batch,
    /// Normalise with fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Batch mean and unbiased variance per channel, for running-stat updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        batch: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        dims: [usize; 4],
        lengths: Vec<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: usize,
    },
    PoolFreq {
        x: usize,
        dims: [usize; 4],
        factor: usize,
    },
    MaskedMeanPool {
        x: usize,
        dims: [usize; 4],
        lengths: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        widths: Vec<usize>,
        batch: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        batch: usize,
        fan_in: usize,
        fan_out: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        s: T,
    },
    Sum {
        a: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, v: &[T]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape).map_err(|_| Error::ShapeMismatch {
        op,
        detail: format!("expected a 4-D tensor, got {shape:?}"),
    })
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            grad: Vec::new(),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(mismatch("leaf", format!("shape {shape:?} vs {} values", values.len())));
        }
        check_finite("leaf", &values)?;
        Ok(self.push(shape, values, requires_grad, Op::Leaf))
    }

    pub fn tensor(&mut self, t: &DiffTensor<T>) -> Result<Var> {
        self.leaf(t.shape.clone(), t.values.clone(), t.requires_grad)
    }

    /// One leaf per parameter, in store order.
    pub fn params(&mut self, store: &ParamStore<T>, requires_grad: bool) -> Result<Vec<Var>> {
        store
            .iter()
            .map(|p| self.leaf(p.tensor.shape.clone(), p.tensor.values.clone(), requires_grad))
            .collect()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Gradient of a node after `backward`, if it requires one and was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        let n = self.node(v);
        (n.requires_grad && !n.grad.is_empty()).then_some(n.grad.as_slice())
    }

    fn any_grad(&self, vars: &[usize]) -> bool {
        vars.iter().any(|i| self.nodes[*i].requires_grad)
    }

    /// Cross-correlation of `x [B, C_in, H, W]` with `w [C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: Conv2dConfig) -> Result<Var> {
        const OP: &str = "conv2d";
        let [batch, c_in, h, wd] = dims4(OP, self.shape(x))?;
        let [c_out, wc_in, kh, kw] = dims4(OP, self.shape(w))?;
        if wc_in != c_in {
            return Err(mismatch(
                OP,
                format!("input has {c_in} channels, weight expects {wc_in}"),
            ));
        }
        if cfg.dilation.0 == 0 || cfg.dilation.1 == 0 || cfg.stride.0 == 0 || cfg.stride.1 == 0 {
            return Err(mismatch(OP, "stride and dilation must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(mismatch(
                    OP,
                    format!("bias shape {:?}, expected [{c_out}]", self.shape(b)),
                ));
            }
        }
        let oh = conv_output_len(h, kh, cfg.stride.0, cfg.padding.0, cfg.dilation.0);
        let ow = conv_output_len(wd, kw, cfg.stride.1, cfg.padding.1, cfg.dilation.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(mismatch(
                OP,
                format!("input {h}x{wd} too small for kernel {kh}x{kw} with {cfg:?}"),
            ));
        };
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            oh,
            ow,
            cfg,
        };
        let out = geom.forward(batch, self.value(x), self.value(w), b.map(|b| self.value(b)));
        check_finite(OP, &out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            vec![batch, c_out, oh, ow],
            out,
            rg,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
                batch,
            },
        ))
    }

    /// Batch normalisation of `x [B, C, H, W]` over the valid time rows
    /// `h < lengths[b]`; invalid positions are output as zero.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        lengths: &[usize],
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        const OP: &str = "batch_norm";
        let dims @ [batch, c, h, w] = dims4(OP, self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch(OP, format!("affine parameters must have shape [{c}]")));
        }
        if lengths.len() != batch || lengths.iter().any(|l| *l == 0 || *l > h) {
            return Err(mismatch(
                OP,
                format!("lengths {lengths:?} invalid for batch {batch}, time {h}"),
            ));
        }
        let xv = self.value(x);
        let plane = h * w;
        let (mean, var, stats) = match mode {
            BatchNormMode::Batch => {
                let count = (lengths.iter().sum::<usize>() * w) as f64;
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for (bi, len) in lengths.iter().enumerate() {
                        let base = (bi * c + ch) * plane;
                        s += xv[base..base + len * w].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for (bi, len) in lengths.iter().enumerate() {
                        let base = (bi * c + ch) * plane;
                        ss += xv[base..base + len * w]
                            .iter()
                            .map(|v| (v.f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch(OP, "running statistics have wrong length".into()));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (bi, len) in lengths.iter().enumerate() {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                let m = T::of(mean[ch]);
                for i in base..base + len * w {
                    let xh = (xv[i] - m) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        check_finite(OP, &out)?;
        let rg = self.any_grad(&[x.0, gamma.0, beta.0]);
        let v = self.push(
            dims.to_vec(),
            out,
            rg,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                dims,
                lengths: lengths.to_vec(),
                xhat,
                inv_std,
                batch_stats: stats.is_some(),
            },
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|v| v.max(T::zero())).collect();
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::Relu { x: x.0 }))
    }

    /// Average pooling over non-overlapping groups of `factor` along the last axis.
    pub fn pool_freq(&mut self, x: Var, factor: usize) -> Result<Var> {
        const OP: &str = "pool_freq";
        let dims @ [b, c, h, w] = dims4(OP, self.shape(x))?;
        if factor == 0 || w < factor {
            return Err(mismatch(OP, format!("cannot pool width {w} by {factor}")));
        }
        let wo = w / factor;
        let xv = self.value(x);
        let scale = T::one() / T::of(factor as f64);
        let mut out = vec![T::zero(); b * c * h * wo];
        for (row, dst) in out.chunks_mut(wo).enumerate() {
            let src = &xv[row * w..row * w + w];
            for (j, o) in dst.iter_mut().enumerate() {
                *o = src[j * factor..(j + 1) * factor].iter().copied().sum::<T>() * scale;
            }
        }
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(vec![b, c, h, wo], out, rg, Op::PoolFreq { x: x.0, dims, factor }))
    }

    /// Mean over valid time rows and all columns: `[B, C, H, W] -> [B, C]`.
    pub fn masked_mean_pool(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        const OP: &str = "masked_mean_pool";
        let dims @ [b, c, h, w] = dims4(OP, self.shape(x))?;
        if lengths.len() != b || lengths.iter().any(|l| *l == 0 || *l > h) {
            return Err(mismatch(
                OP,
                format!("lengths {lengths:?} invalid for batch {b}, time {h}"),
            ));
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); b * c];
        for (bi, len) in lengths.iter().enumerate() {
            let denom = T::of((len * w) as f64);
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                out[bi * c + ch] = xv[base..base + len * w].iter().copied().sum::<T>() / denom;
            }
        }
        check_finite(OP, &out)?;
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(
            vec![b, c],
            out,
            rg,
            Op::MaskedMeanPool {
                x: x.0,
                dims,
                lengths: lengths.to_vec(),
            },
        ))
    }

    /// Concatenates `[B, w_i]` matrices along the feature axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        let first = xs.first().ok_or_else(|| mismatch(OP, "no inputs".into()))?;
        let batch = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(xs.len());
        for x in xs {
            match self.shape(*x) {
                [b, w] if *b == batch => widths.push(*w),
                s => return Err(mismatch(OP, format!("expected [{batch}, _], got {s:?}"))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(batch * total);
        for bi in 0..batch {
            for (x, w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*x)[bi * w..(bi + 1) * w]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.any_grad(&ids);
        Ok(self.push(vec![batch, total], out, rg, Op::Concat { xs: ids, widths, batch }))
    }

    /// `y = x · wᵀ + b` with `x [B, in]`, `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "linear";
        let (batch, fan_in) = match self.shape(x) {
            [b, i] => (*b, *i),
            s => return Err(mismatch(OP, format!("input must be 2-D, got {s:?}"))),
        };
        let fan_out = match self.shape(w) {
            [o, i] if *i == fan_in => *o,
            s => {
                return Err(mismatch(
                    OP,
                    format!("weight {s:?} incompatible with input width {fan_in}"),
                ))
            }
        };
        if self.shape(b) != [fan_out] {
            return Err(mismatch(
                OP,
                format!("bias shape {:?}, expected [{fan_out}]", self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); batch * fan_out];
        matmul(
            batch,
            fan_in,
            fan_out,
            self.value(x),
            false,
            self.value(w),
            true,
            &mut out,
            false,
        );
        let bv = self.value(b);
        for row in out.chunks_mut(fan_out) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += *b);
        }
        check_finite(OP, &out)?;
        let rg = self.any_grad(&[x.0, w.0, b.0]);
        Ok(self.push(
            vec![batch, fan_out],
            out,
            rg,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
                batch,
                fan_in,
                fan_out,
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits [B, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let (batch, classes) = match self.shape(logits) {
            [b, k] => (*b, *k),
            s => return Err(mismatch(OP, format!("logits must be 2-D, got {s:?}"))),
        };
        if labels.len() != batch || batch == 0 {
            return Err(mismatch(OP, format!("{} labels for batch {batch}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); batch * classes];
        let mut total = 0.0f64;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &lv[bi * classes..(bi + 1) * classes];
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[label].f64();
            for (k, v) in row.iter().enumerate() {
                probs[bi * classes + k] = T::of((v.f64() - lse).exp());
            }
        }
        let loss = vec![T::of(total / batch as f64)];
        check_finite(OP, &loss)?;
        let rg = self.any_grad(&[logits.0]);
        Ok(self.push(
            vec![],
            loss,
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
                classes,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        check_finite("add", &out)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        check_finite("mul", &out)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out: Vec<T> = self.value(a).iter().map(|x| *x * s).collect();
        check_finite("scale", &out)?;
        let rg = self.any_grad(&[a.0]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Scale { a: a.0, s }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = vec![self.value(a).iter().copied().sum::<T>()];
        check_finite("sum", &out)?;
        let rg = self.any_grad(&[a.0]);
        Ok(self.push(vec![], out, rg, Op::Sum { a: a.0 }))
    }

    /// Propagates d(loss)/d(node) to every reachable node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = &self.node(loss).shape;
        if self.node(loss).value.len() != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        for n in &mut self.nodes[..=loss.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad.clear();
            }
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = vec![T::one()];
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad || node.grad.is_empty() {
                continue;
            }
            backprop(node, before);
        }
        Ok(())
    }
}

/// Takes a node's gradient buffer out for accumulation (zero-filled if fresh).
fn take_grad<T: Real>(nodes: &mut [Node<T>], i: usize) -> Option<Vec<T>> {
    let n = &mut nodes[i];
    if !n.requires_grad {
        return None;
    }
    let mut g = std::mem::take(&mut n.grad);
    if g.is_empty() {
        g = vec![T::zero(); n.value.len()];
    }
    Some(g)
}

fn put_grad<T>(nodes: &mut [Node<T>], i: usize, g: Option<Vec<T>>) {
    if let Some(g) = g {
        nodes[i].grad = g;
    }
}

fn add_into<T: Real>(nodes: &mut [Node<T>], i: usize, contrib: impl Fn(usize) -> T) {
    if let Some(mut g) = take_grad(nodes, i) {
        for (k, v) in g.iter_mut().enumerate() {
            *v += contrib(k);
        }
        put_grad(nodes, i, Some(g));
    }
}

fn backprop<T: Real>(node: &Node<T>, nodes: &mut [Node<T>]) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom, batch } => {
            let mut gx = take_grad(nodes, *x);
            let mut gw = take_grad(nodes, *w);
            let mut gb = b.and_then(|b| take_grad(nodes, b));
            geom.backward(
                *batch,
                &nodes[*x].value,
                &nodes[*w].value,
                g,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            put_grad(nodes, *x, gx);
            put_grad(nodes, *w, gw);
            if let Some(b) = b {
                put_grad(nodes, *b, gb);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            dims,
            lengths,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let [_, c, h, w] = *dims;
            let plane = h * w;
            let gam: Vec<T> = nodes[*gamma].value.clone();
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for (bi, len) in lengths.iter().enumerate() {
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    for i in base..base + len * w {
                        sum_dy[ch] += g[i];
                        sum_dy_xhat[ch] += g[i] * xhat[i];
                    }
                }
            }
            let mut gg = take_grad(nodes, *gamma);
            if let Some(gg) = gg.as_mut() {
                gg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += *b);
            }
            put_grad(nodes, *gamma, gg);
            let mut gbt = take_grad(nodes, *beta);
            if let Some(gb) = gbt.as_mut() {
                gb.iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += *b);
            }
            put_grad(nodes, *beta, gbt);
            let mut gx = take_grad(nodes, *x);
            if let Some(gx) = gx.as_mut() {
                let count = T::of((lengths.iter().sum::<usize>() * w) as f64);
                for (bi, len) in lengths.iter().enumerate() {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        let k = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            let mean_dy = sum_dy[ch] / count;
                            let mean_dy_xhat = sum_dy_xhat[ch] / count;
                            for i in base..base + len * w {
                                gx[i] += k * (g[i] - mean_dy - xhat[i] * mean_dy_xhat);
                            }
                        } else {
                            for i in base..base + len * w {
                                gx[i] += k * g[i];
                            }
                        }
                    }
                }
            }
            put_grad(nodes, *x, gx);
        }
        Op::Relu { x } => {
            let xv = &nodes[*x].value;
            let mask: Vec<bool> = xv.iter().map(|v| *v > T::zero()).collect();
            add_into(nodes, *x, |k| if mask[k] { g[k] } else { T::zero() });
        }
        Op::PoolFreq { x, dims, factor } => {
            let w = dims[3];
            let wo = w / factor;
            let scale = T::one() / T::of(*factor as f64);
            add_into(nodes, *x, |k| {
                let (row, col) = (k / w, k % w);
                let j = col / factor;
                if j < wo {
                    g[row * wo + j] * scale
                } else {
                    T::zero()
                }
            });
        }
        Op::MaskedMeanPool { x, dims, lengths } => {
            let [_, c, h, w] = *dims;
            add_into(nodes, *x, |k| {
                let bi = k / (c * h * w);
                let ch = (k / (h * w)) % c;
                let t = (k / w) % h;
                let len = lengths[bi];
                if t < len {
                    g[bi * c + ch] / T::of((len * w) as f64)
                } else {
                    T::zero()
                }
            });
        }
        Op::Concat { xs, widths, batch } => {
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (x, w) in xs.iter().zip(widths) {
                let (off, w) = (offset, *w);
                add_into(nodes, *x, |k| g[(k / w) * total + off + k % w]);
                offset += w;
            }
            let _ = batch;
        }
        Op::Linear {
            x,
            w,
            b,
            batch,
            fan_in,
            fan_out,
        } => {
            let mut gx = take_grad(nodes, *x);
            if let Some(gx) = gx.as_mut() {
                matmul(*batch, *fan_out, *fan_in, g, false, &nodes[*w].value, false, gx, true);
            }
            put_grad(nodes, *x, gx);
            let mut gw = take_grad(nodes, *w);
            if let Some(gw) = gw.as_mut() {
                matmul(*fan_out, *batch, *fan_in, g, true, &nodes[*x].value, false, gw, true);
            }
            put_grad(nodes, *w, gw);
            add_into(nodes, *b, |o| (0..*batch).map(|bi| g[bi * fan_out + o]).sum::<T>());
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            classes,
        } => {
            let scale = g[0] / T::of(labels.len() as f64);
            add_into(nodes, *logits, |k| {
                let (bi, c) = (k / classes, k % classes);
                let onehot = if labels[bi] == c { T::one() } else { T::zero() };
                (probs[k] - onehot) * scale
            });
        }
        Op::Add { a, b } => {
            add_into(nodes, *a, |k| g[k]);
            add_into(nodes, *b, |k| g[k]);
        }
        Op::Mul { a, b } => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            add_into(nodes, *a, |k| g[k] * bv[k]);
            add_into(nodes, *b, |k| g[k] * av[k]);
        }
        Op::Scale { a, s } => add_into(nodes, *a, |k| g[k] * *s),
        Op::Sum { a } => add_into(nodes, *a, |_| g[0]),
    }
}
