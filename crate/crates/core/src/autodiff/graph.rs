//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op in execution order, so one reverse sweep
//! over the node list visits each node exactly once. Gradients accumulate
//! additively into the inputs of each node.

use super::kernels::{self, PlaneGeom};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel running statistics owned by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Batch-norm behaviour for one call.
pub enum BnMode<'a> {
    /// Normalise by batch statistics and fold them into `stats`.
    Train {
        stats: &'a mut RunningStats,
        momentum: f64,
    },
    /// Normalise by the stored running statistics.
    Eval(&'a RunningStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    AvgPool2 {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AffineCombine {
        g: Var,
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Sum {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    ConcreteGate {
        logit: Var,
        temperature: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::AffineCombine { .. } => "affine_combine",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Sigmoid { .. } => "sigmoid",
            Op::ConcreteGate { .. } => "concrete_gate",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The computation record: executed ops in topological (execution) order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    flops: u64,
    context: String,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf, if the leaf was reachable.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// FLOPs executed by forward ops so far (2 per multiply-accumulate).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Label attached to non-finite diagnostics until changed.
    pub fn set_context(&mut self, context: impl Into<String>) {
        self.context = context.into();
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, flops: u64) -> Result<Var> {
        if !value.all_finite() {
            let context = if self.context.is_empty() {
                String::new()
            } else {
                format!(" at {}", self.context)
            };
            return Err(Error::NonFinite {
                op: op.name(),
                context,
            });
        }
        self.flops += flops;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, wd) = self.val(x).dims4("conv2d")?;
        let (co, wci, kh, kw) = self.val(w).dims4("conv2d")?;
        if wci != ci {
            return shape_err(
                "conv2d",
                format!("input has {ci} channels but kernel expects {wci}"),
            );
        }
        check_kernel("conv2d", kh, kw, stride)?;
        let g = PlaneGeom::new(h, wd, kh, stride, pad).ok_or_else(|| {
            shape_error("conv2d", format!("kernel {kh} larger than padded {h}x{wd}"))
        })?;
        let mut out = vec![0.0; n * co * g.oh * g.ow];
        kernels::conv2d_forward(
            self.val(x).data(),
            self.val(w).data(),
            &mut out,
            n,
            ci,
            co,
            kh,
            &g,
        );
        let flops = 2 * (n * co * g.oh * g.ow * ci * kh * kw) as u64;
        let value = Tensor::new(vec![n, co, g.oh, g.ow], out)?;
        self.push(value, Op::Conv2d { x, w, stride, pad }, flops)
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.val(x).dims4("depthwise_conv2d")?;
        let (wc, one, kh, kw) = self.val(w).dims4("depthwise_conv2d")?;
        if wc != c || one != 1 {
            return shape_err(
                "depthwise_conv2d",
                format!("input has {c} channels but kernel is [{wc}, {one}, {kh}, {kw}]"),
            );
        }
        check_kernel("depthwise_conv2d", kh, kw, stride)?;
        let g = PlaneGeom::new(h, wd, kh, stride, pad).ok_or_else(|| {
            shape_error(
                "depthwise_conv2d",
                format!("kernel {kh} larger than padded {h}x{wd}"),
            )
        })?;
        let mut out = vec![0.0; n * c * g.oh * g.ow];
        kernels::depthwise_forward(
            self.val(x).data(),
            self.val(w).data(),
            &mut out,
            n,
            c,
            kh,
            &g,
        );
        let flops = 2 * (n * c * g.oh * g.ow * kh * kw) as u64;
        let value = Tensor::new(vec![n, c, g.oh, g.ow], out)?;
        self.push(value, Op::Depthwise { x, w, stride, pad }, flops)
    }

    /// Per-channel batch normalisation for `[n, c]` or `[n, c, h, w]` inputs.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.val(x);
        let (n, c, spatial) = match xs.shape() {
            &[n, c] => (n, c, 1),
            &[n, c, h, w] => (n, c, h * w),
            s => return shape_err("batch_norm", format!("unsupported shape {s:?}")),
        };
        if self.val(gamma).shape() != [c] || self.val(beta).shape() != [c] {
            return shape_err(
                "batch_norm",
                format!(
                    "{c} channels but gamma {:?} / beta {:?}",
                    self.val(gamma).shape(),
                    self.val(beta).shape()
                ),
            );
        }
        if eps < 0.0 {
            return Err(Error::InvalidArgument(format!("batch_norm eps {eps} < 0")));
        }
        let m = n * spatial;
        if m == 0 {
            return shape_err("batch_norm", "empty batch");
        }
        let data = xs.data();
        let channel =
            |b: usize, ch: usize| &data[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];

        let batch_stats = matches!(mode, BnMode::Train { .. });
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        match &mode {
            BnMode::Train { .. } => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += channel(b, ch).iter().sum::<f64>();
                    }
                    let mean = s / m as f64;
                    let mut v = 0.0;
                    for b in 0..n {
                        v += channel(b, ch)
                            .iter()
                            .map(|x| (x - mean) * (x - mean))
                            .sum::<f64>();
                    }
                    means[ch] = mean;
                    vars[ch] = v / m as f64;
                }
            }
            BnMode::Eval(stats) => {
                if stats.channels() != c {
                    return shape_err(
                        "batch_norm",
                        format!(
                            "running stats have {} channels, input {c}",
                            stats.channels()
                        ),
                    );
                }
                means.copy_from_slice(&stats.mean);
                vars.copy_from_slice(&stats.var);
            }
        }
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let denom = vars[ch] + eps;
            if denom <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "batch_norm channel {ch} has zero variance and eps = {eps}"
                )));
            }
            inv_std[ch] = 1.0 / denom.sqrt();
        }
        let gv = self.val(gamma).data();
        let bv = self.val(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                let (mu, is, ga, be) = (means[ch], inv_std[ch], gv[ch], bv[ch]);
                for k in base..base + spatial {
                    let xh = (data[k] - mu) * is;
                    xhat[k] = xh;
                    out[k] = ga * xh + be;
                }
            }
        }
        if let BnMode::Train { stats, momentum } = mode {
            if stats.channels() != c {
                return shape_err(
                    "batch_norm",
                    format!(
                        "running stats have {} channels, input {c}",
                        stats.channels()
                    ),
                );
            }
            let unbias = if m > 1 {
                m as f64 / (m as f64 - 1.0)
            } else {
                1.0
            };
            for ch in 0..c {
                stats.mean[ch] = momentum * stats.mean[ch] + (1.0 - momentum) * means[ch];
                stats.var[ch] = momentum * stats.var[ch] + (1.0 - momentum) * vars[ch] * unbias;
            }
        }
        let shape = self.val(x).shape().to_vec();
        let flops = 2 * out.len() as u64;
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            flops,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xs = self.val(x);
        let out: Vec<f64> = xs
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let flops = out.len() as u64;
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        self.push(value, Op::Relu { x }, flops)
    }

    /// 2x2 average pooling with stride 2; odd extents replicate the last row/column.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.val(x).dims4("avg_pool2")?;
        if h == 0 || w == 0 {
            return shape_err("avg_pool2", "empty spatial extent");
        }
        let (oh, ow) = (kernels::pooled_extent(h), kernels::pooled_extent(w));
        let mut out = vec![0.0; n * c * oh * ow];
        kernels::avg_pool2_forward(self.val(x).data(), &mut out, n * c, h, w);
        let flops = (n * c * h * w) as u64;
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(value, Op::AvgPool2 { x }, flops)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.val(x).dims4("global_avg_pool")?;
        let hw = h * w;
        if hw == 0 {
            return shape_err("global_avg_pool", "empty spatial extent");
        }
        let data = self.val(x).data();
        let out: Vec<f64> = (0..n * c)
            .map(|p| data[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let flops = (n * c * hw) as u64;
        let value = Tensor::new(vec![n, c], out)?;
        self.push(value, Op::GlobalAvgPool { x }, flops)
    }

    /// `y = x W^T + b` with `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.val(x).dims2("linear")?;
        let (dout, win) = self.val(w).dims2("linear")?;
        if win != din {
            return shape_err(
                "linear",
                format!("input has {din} features, weight expects {win}"),
            );
        }
        if let Some(b) = b {
            if self.val(b).shape() != [dout] {
                return shape_err(
                    "linear",
                    format!("bias shape {:?}, expected [{dout}]", self.val(b).shape()),
                );
            }
        }
        let xd = self.val(x).data();
        let wd = self.val(w).data();
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let row = &xd[i * din..(i + 1) * din];
            for o in 0..dout {
                let wr = &wd[o * din..(o + 1) * din];
                out[i * dout + o] = row.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        let mut flops = 2 * (n * din * dout) as u64;
        if let Some(b) = b {
            let bd = self.val(b).data();
            for i in 0..n {
                for o in 0..dout {
                    out[i * dout + o] += bd[o];
                }
            }
            flops += (n * dout) as u64;
        }
        let value = Tensor::new(vec![n, dout], out)?;
        self.push(value, Op::Linear { x, w, b }, flops)
    }

    /// `g * a + (1 - g) * b` where `g` is a scalar or holds one gate per batch item.
    ///
    /// A gate of exactly 1 (0) yields `a` (`b`) bit-for-bit.
    pub fn affine_combine(&mut self, g: Var, a: Var, b: Var) -> Result<Var> {
        let (gs, av, bv) = (self.val(g), self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return shape_err(
                "affine_combine",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            );
        }
        let total = av.len();
        let items = gate_items("affine_combine", gs, av)?;
        if let Some(bad) = gs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "affine_combine gate {bad} outside [0, 1]"
            )));
        }
        let per = total / items.max(1);
        let mut out = vec![0.0; total];
        for it in 0..items {
            let gv = gs.data()[if gs.len() == 1 { 0 } else { it }];
            let range = it * per..(it + 1) * per;
            let (ad, bd) = (&av.data()[range.clone()], &bv.data()[range.clone()]);
            let dst = &mut out[range];
            if gv == 1.0 {
                dst.copy_from_slice(ad);
            } else if gv == 0.0 {
                dst.copy_from_slice(bd);
            } else {
                let h = 1.0 - gv;
                for ((o, x), y) in dst.iter_mut().zip(ad).zip(bd) {
                    *o = gv * x + h * y;
                }
            }
        }
        let flops = 3 * total as u64;
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(value, Op::AffineCombine { g, a, b }, flops)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let flops = out.len() as u64;
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(value, Op::Add { a, b }, flops)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return shape_err("mul", format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let flops = out.len() as u64;
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(value, Op::Mul { a, b }, flops)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.val(x);
        let out: Vec<f64> = xv.data().iter().map(|v| c * v).collect();
        let flops = out.len() as u64;
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::Scale { x, c }, flops)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let s = xv.sum();
        let flops = xv.len() as u64;
        self.push(Tensor::scalar(s), Op::Sum { x }, flops)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::Sigmoid { x }, 0)
    }

    /// Relaxed Bernoulli gates `sigmoid((logit + L_i) / temperature)`, one per
    /// entry of `logistic_noise` (`L_i = ln u_i - ln(1 - u_i)`).
    pub fn concrete_gate(
        &mut self,
        logit: Var,
        logistic_noise: &[f64],
        temperature: f64,
    ) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "concrete temperature {temperature} must be > 0"
            )));
        }
        let lv = self.val(logit);
        if lv.len() != 1 {
            return shape_err("concrete_gate", format!("logit shape {:?}", lv.shape()));
        }
        let l = lv.item();
        let out: Vec<f64> = logistic_noise
            .iter()
            .map(|&z| sigmoid((l + z) / temperature))
            .collect();
        let value = Tensor::new(vec![out.len()], out)?;
        self.push(value, Op::ConcreteGate { logit, temperature }, 0)
    }

    /// Mean softmax cross-entropy of `logits: [n, K]` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.val(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return shape_err(
                "softmax_cross_entropy",
                format!("{n} rows but {} labels", labels.len()),
            );
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let data = self.val(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &data[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            total += z.ln() + max - row[labels[i]];
        }
        let loss = total / n as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            0,
        )
    }

    /// `sum_i c_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            let t = self.val(v);
            if t.len() != 1 {
                return shape_err("weighted_sum", format!("term shape {:?}", t.shape()));
            }
            s += c * t.item();
        }
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            0,
        )
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every leaf it reaches.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.val(loss).len() != 1 {
            return shape_err(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.val(loss).shape()
                ),
            );
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    leaves[idx] = Some(Tensor::new(node.value.shape().to_vec(), dy)?);
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (n, ci, h, wd) = self.val(*x).dims4("conv2d")?;
                    let (co, _, k, _) = self.val(*w).dims4("conv2d")?;
                    let g = PlaneGeom::new(h, wd, k, *stride, *pad).expect("validated in forward");
                    let mut dx = vec![0.0; self.val(*x).len()];
                    let mut dw = vec![0.0; self.val(*w).len()];
                    kernels::conv2d_backward(
                        self.val(*x).data(),
                        self.val(*w).data(),
                        &dy,
                        &mut dx,
                        &mut dw,
                        n,
                        ci,
                        co,
                        k,
                        &g,
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Depthwise { x, w, stride, pad } => {
                    let (n, c, h, wd) = self.val(*x).dims4("depthwise_conv2d")?;
                    let (_, _, k, _) = self.val(*w).dims4("depthwise_conv2d")?;
                    let g = PlaneGeom::new(h, wd, k, *stride, *pad).expect("validated in forward");
                    let mut dx = vec![0.0; self.val(*x).len()];
                    let mut dw = vec![0.0; self.val(*w).len()];
                    kernels::depthwise_backward(
                        self.val(*x).data(),
                        self.val(*w).data(),
                        &dy,
                        &mut dx,
                        &mut dw,
                        n,
                        c,
                        k,
                        &g,
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let shape = self.val(*x).shape();
                    let (n, c) = (shape[0], shape[1]);
                    let spatial: usize = shape[2..].iter().product();
                    let m = (n * spatial) as f64;
                    let gv = self.val(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * spatial;
                            for k in base..base + spatial {
                                dgamma[ch] += dy[k] * xhat[k];
                                dbeta[ch] += dy[k];
                            }
                        }
                    }
                    let mut dx = vec![0.0; dy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * spatial;
                            let scale = gv[ch] * inv_std[ch];
                            if *batch_stats {
                                let (sd, sdx) = (dbeta[ch], dgamma[ch]);
                                for k in base..base + spatial {
                                    dx[k] = scale * (dy[k] - sd / m - xhat[k] * sdx / m);
                                }
                            } else {
                                for k in base..base + spatial {
                                    dx[k] = scale * dy[k];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Relu { x } => {
                    let xd = self.val(*x).data();
                    let dx = dy
                        .iter()
                        .zip(xd)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool2 { x } => {
                    let (n, c, h, w) = self.val(*x).dims4("avg_pool2")?;
                    let mut dx = vec![0.0; self.val(*x).len()];
                    kernels::avg_pool2_backward(&dy, &mut dx, n * c, h, w);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let (n, c, h, w) = self.val(*x).dims4("global_avg_pool")?;
                    let hw = h * w;
                    let mut dx = vec![0.0; n * c * hw];
                    for p in 0..n * c {
                        let g = dy[p] / hw as f64;
                        dx[p * hw..(p + 1) * hw].iter_mut().for_each(|v| *v = g);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (n, din) = self.val(*x).dims2("linear")?;
                    let (dout, _) = self.val(*w).dims2("linear")?;
                    let xd = self.val(*x).data();
                    let wd = self.val(*w).data();
                    let mut dx = vec![0.0; n * din];
                    let mut dw = vec![0.0; dout * din];
                    for i in 0..n {
                        for o in 0..dout {
                            let g = dy[i * dout + o];
                            if g == 0.0 {
                                continue;
                            }
                            let wr = &wd[o * din..(o + 1) * din];
                            let xr = &xd[i * din..(i + 1) * din];
                            for (d, v) in dx[i * din..(i + 1) * din].iter_mut().zip(wr) {
                                *d += g * v;
                            }
                            for (d, v) in dw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                                *d += g * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let mut db = vec![0.0; dout];
                        for i in 0..n {
                            for o in 0..dout {
                                db[o] += dy[i * dout + o];
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AffineCombine { g, a, b } => {
                    let gs = self.val(*g).data();
                    let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                    let items = if gs.len() == 1 { 1 } else { gs.len() };
                    let per = dy.len() / items;
                    let mut da = vec![0.0; dy.len()];
                    let mut db = vec![0.0; dy.len()];
                    let mut dg = vec![0.0; gs.len()];
                    for it in 0..items {
                        let gv = gs[if gs.len() == 1 { 0 } else { it }];
                        let mut acc = 0.0;
                        for k in it * per..(it + 1) * per {
                            da[k] = gv * dy[k];
                            db[k] = (1.0 - gv) * dy[k];
                            acc += (ad[k] - bd[k]) * dy[k];
                        }
                        dg[if gs.len() == 1 { 0 } else { it }] += acc;
                    }
                    accumulate(&mut grads, *g, dg);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Mul { a, b } => {
                    let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                    let da = dy.iter().zip(bd).map(|(g, v)| g * v).collect();
                    let db = dy.iter().zip(ad).map(|(g, v)| g * v).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, dy.iter().map(|g| c * g).collect());
                }
                Op::Sum { x } => {
                    accumulate(&mut grads, *x, vec![dy[0]; self.val(*x).len()]);
                }
                Op::Sigmoid { x } => {
                    let y = node.value.data();
                    let dx = dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcreteGate { logit, temperature } => {
                    let y = node.value.data();
                    let d: f64 = dy
                        .iter()
                        .zip(y)
                        .map(|(g, s)| g * s * (1.0 - s) / temperature)
                        .sum();
                    accumulate(&mut grads, *logit, vec![d]);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = dy[0] / n as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        dl[i * k + y] -= scale;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::WeightedSum { terms } => {
                    for &(v, c) in terms {
                        accumulate(&mut grads, v, vec![c * dy[0]]);
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contribution) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn gate_items(op: &'static str, gate: &Tensor, a: &Tensor) -> Result<usize> {
    if gate.len() == 1 && gate.rank() <= 1 {
        return Ok(1);
    }
    match (gate.shape(), a.shape().first()) {
        (&[g], Some(&n)) if g == n => Ok(n),
        _ => shape_err(
            op,
            format!(
                "gate shape {:?} incompatible with {:?}",
                gate.shape(),
                a.shape()
            ),
        ),
    }
}

fn check_kernel(op: &'static str, kh: usize, kw: usize, stride: usize) -> Result<()> {
    if kh != kw || kh == 0 {
        return shape_err(
            op,
            format!("kernel must be square and non-empty, got {kh}x{kw}"),
        );
    }
    if !(1..=2).contains(&stride) {
        return Err(Error::InvalidArgument(format!(
            "{op} stride {stride} not in {{1, 2}}"
        )));
    }
    Ok(())
}

fn shape_error(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
