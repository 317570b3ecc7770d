//! Reverse-mode tape.
//!
//! Every differentiable operation appends one node holding its output value
//! and whatever it needs for the backward pass. [`Tape::backward`] walks the
//! nodes in exact reverse order and accumulates gradients additively, so a
//! value consumed twice receives the sum of both contributions.
//!
//! Layer operations take a leading batch axis: images are `[N, C, H, W]`,
//! feature vectors `[N, F]`.

use crate::autodiff::conv;
use crate::autodiff::param::{ParamId, ParamStore};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Which `(sample, channel)` planes of a `[N, C, H, W]` activation are live.
/// Dead planes are never computed and read as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneMask {
    batch: usize,
    channels: usize,
    live: Vec<bool>,
}

impl PlaneMask {
    pub fn new(batch: usize, channels: usize, live: Vec<bool>) -> Result<Self> {
        if live.len() != batch * channels {
            return Err(Error::dim(
                "plane_mask",
                format!("{} flags for {}x{} planes", live.len(), batch, channels),
            ));
        }
        Ok(Self {
            batch,
            channels,
            live,
        })
    }

    pub fn all(batch: usize, channels: usize) -> Self {
        Self {
            batch,
            channels,
            live: vec![true; batch * channels],
        }
    }

    #[inline]
    pub fn is_live(&self, n: usize, c: usize) -> bool {
        self.live[n * self.channels + c]
    }

    pub fn live_channels(&self, n: usize) -> Vec<usize> {
        (0..self.channels).filter(|&c| self.is_live(n, c)).collect()
    }

    /// True when every channel is either live for all samples or for none.
    pub fn is_channel_uniform(&self) -> bool {
        (0..self.channels).all(|c| (1..self.batch).all(|n| self.is_live(n, c) == self.is_live(0, c)))
    }

    pub fn count_live(&self) -> usize {
        self.live.iter().filter(|&&l| l).count()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SaturatingSigmoid {
        x: Var,
        // gradient of the output w.r.t. x, zero where clamped
        deriv: Vec<f64>,
    },
    StraightThrough {
        x: Var,
        surrogate: Vec<f64>,
    },
    ChannelScale {
        x: Var,
        scale: Var,
    },
    GlobalAvgPool(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
    },
    RepeatRows(Var),
    L1(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: conv::Geometry,
        mask: Option<PlaneMask>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BnMode,
        // number of elements each channel's statistics were taken over (train)
        counts: Vec<usize>,
        mask: Option<PlaneMask>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            value,
            requires_grad,
            param: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            param: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            param: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; backward accumulates into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).tensor.clone(),
            requires_grad: true,
            param: Some(id),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        )?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| sigmoid(x)).collect())?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg, "sigmoid")
    }

    /// `clamp(a * sigmoid(x + noise) - b, 0, 1)` elementwise.
    ///
    /// `noise` is treated as a constant; pass `None` for the noise-free form.
    pub fn saturating_sigmoid(&mut self, x: Var, a: f64, b: f64, noise: Option<&[f64]>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(n) = noise {
            if n.len() != tx.numel() {
                return Err(Error::dim(
                    "saturating_sigmoid",
                    format!("noise has {} entries for {:?}", n.len(), tx.shape()),
                ));
            }
        }
        let (values, deriv) = saturating_sigmoid_values(tx.data(), a, b, noise);
        let out = Tensor::new(tx.shape().to_vec(), values)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SaturatingSigmoid { x, deriv }, rg, "saturating_sigmoid")
    }

    /// Emits `forward` as the value but routes gradients to `x` scaled by
    /// `surrogate` (the derivative of a differentiable stand-in).
    pub fn straight_through(&mut self, x: Var, forward: Tensor, surrogate: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        same_shape("straight_through", tx, &forward)?;
        if surrogate.len() != tx.numel() {
            return Err(Error::dim("straight_through", "surrogate length"));
        }
        let rg = self.rg(&[x]);
        self.push(forward, Op::StraightThrough { x, surrogate }, rg, "straight_through")
    }

    /// Multiplies each `[H, W]` plane of `x: [N, C, H, W]` by `scale[n, c]`.
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(scale));
        expect_rank("channel_scale", tx, 4)?;
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        if ts.shape() != [n, c] {
            return Err(Error::dim(
                "channel_scale",
                format!("scale {:?} for input {:?}", ts.shape(), tx.shape()),
            ));
        }
        let plane = tx.shape()[2] * tx.shape()[3];
        let mut data = tx.data().to_vec();
        for (i, chunk) in data.chunks_mut(plane.max(1)).enumerate().take(n * c) {
            let s = ts.data()[i];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, scale]);
        self.push(out, Op::ChannelScale { x, scale }, rg, "channel_scale")
    }

    /// Spatial mean: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("global_avg_pool", tx, 4)?;
        let s = tx.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if plane == 0 {
            return Err(Error::dim("global_avg_pool", "empty spatial extent"));
        }
        let data = tx
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::GlobalAvgPool(x), rg, "global_avg_pool")
    }

    /// Non-overlapping max pooling with window and stride `size`.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("max_pool2d", tx, 4)?;
        let s = tx.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if size == 0 || h < size || w < size {
            return Err(Error::dim(
                "max_pool2d",
                format!("window {size} on {h}x{w}"),
            ));
        }
        let (ho, wo) = (h / size, w / size);
        let mut data = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let src = tx.data();
        for nc in 0..n * c {
            let base = nc * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = base + (i * size + di) * w + j * size + dj;
                            if src[idx] > best {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    data.push(best);
                    argmax.push(at);
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::MaxPool { x, argmax }, rg, "max_pool2d")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    /// `y = x W^T`: `[N, in] x [out, in] -> [N, out]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        expect_rank("linear", tx, 2)?;
        expect_rank("linear", tw, 2)?;
        let (n, fin) = (tx.shape()[0], tx.shape()[1]);
        let (fout, win) = (tw.shape()[0], tw.shape()[1]);
        if fin != win {
            return Err(Error::dim(
                "linear",
                format!("input width {fin} but weight is {fout}x{win}"),
            ));
        }
        let mut data = vec![0.0; n * fout];
        for r in 0..n {
            let xr = &tx.data()[r * fin..(r + 1) * fin];
            for o in 0..fout {
                let wr = &tw.data()[o * fin..(o + 1) * fin];
                data[r * fout + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        let out = Tensor::new(vec![n, fout], data)?;
        let rg = self.rg(&[x, w]);
        self.push(out, Op::Linear { x, w }, rg, "linear")
    }

    /// Stacks `rows` copies of a vector: `[F] -> [rows, F]`.
    pub fn repeat_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("repeat_rows", tx, 1)?;
        let mut data = Vec::with_capacity(rows * tx.numel());
        for _ in 0..rows {
            data.extend_from_slice(tx.data());
        }
        let out = Tensor::new(vec![rows, tx.numel()], data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::RepeatRows(x), rg, "repeat_rows")
    }

    /// Sum of absolute values. Subgradient 0 at 0.
    pub fn l1_norm(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data().iter().map(|v| v.abs()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::L1(x), rg, "l1_norm")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg, "sum")
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        expect_rank("softmax_cross_entropy", tl, 2)?;
        let (n, k) = (tl.shape()[0], tl.shape()[1]);
        if labels.len() != n || n == 0 {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &tl.data()[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[r]];
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    /// Cross-correlation with zero padding.
    ///
    /// `x: [N, C_in, H, W]`, `w: [C_out, C_in, k, k]`, optional `bias: [C_out]`.
    /// With a `mask`, dead output planes are skipped entirely and read as zero.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        mask: Option<PlaneMask>,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geom = conv::Geometry::infer(tx.shape(), tw.shape(), stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.c_out] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.value(b).shape(), geom.c_out),
                ));
            }
        }
        if let Some(m) = &mask {
            if m.batch != geom.batch || m.channels != geom.c_out {
                return Err(Error::dim("conv2d", "mask does not match output planes"));
            }
        }
        let bias_data = bias.map(|b| self.value(b).data());
        let out = conv::forward(&geom, tx.data(), tw.data(), bias_data, mask.as_ref());
        let out = Tensor::new(vec![geom.batch, geom.c_out, geom.h_out, geom.w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                mask,
            },
            rg,
            "conv2d",
        )
    }

    /// Batch normalization over `[N, C, H, W]`.
    ///
    /// Train mode normalizes with batch statistics and updates `stats`; eval
    /// mode uses `stats`. Dead planes of `mask` output zero and are excluded
    /// from everything; in train mode the mask has to be uniform per channel.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: BnMode,
        cfg: BnConfig,
        mask: Option<PlaneMask>,
    ) -> Result<Var> {
        if cfg.eps <= 0.0 {
            return Err(Error::Config(format!("batch-norm eps must be positive, got {}", cfg.eps)));
        }
        let tx = self.value(x);
        expect_rank("batch_norm", tx, 4)?;
        let s = tx.shape().to_vec();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{name} {:?} for {c} channels", self.value(v).shape()),
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::dim("batch_norm", "running stats channel count"));
        }
        if let Some(m) = &mask {
            if m.batch != n || m.channels != c {
                return Err(Error::dim("batch_norm", "mask does not match planes"));
            }
            if mode == BnMode::Train && !m.is_channel_uniform() {
                return Err(Error::Usage(
                    "train-mode batch norm needs a channel-uniform mask".into(),
                ));
            }
        }
        if mode == BnMode::Train && n < 2 {
            return Err(Error::Usage(format!(
                "train-mode batch norm needs batch size >= 2, got {n}"
            )));
        }
        let live = |ni: usize, ci: usize| mask.as_ref().is_none_or(|m| m.is_live(ni, ci));
        let src = tx.data();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; c];
        let mut counts = vec![0usize; c];
        for ci in 0..c {
            let (mean, var) = match mode {
                BnMode::Train => {
                    let samples: Vec<usize> = (0..n).filter(|&ni| live(ni, ci)).collect();
                    if samples.is_empty() {
                        continue;
                    }
                    let m = samples.len() * plane;
                    let mut sum = 0.0;
                    for &ni in &samples {
                        let off = (ni * c + ci) * plane;
                        sum += src[off..off + plane].iter().sum::<f64>();
                    }
                    let mean = sum / m as f64;
                    let mut sq = 0.0;
                    for &ni in &samples {
                        let off = (ni * c + ci) * plane;
                        sq += src[off..off + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = sq / m as f64;
                    let unbiased = if m > 1 { sq / (m - 1) as f64 } else { var };
                    stats.mean[ci] = (1.0 - cfg.momentum) * stats.mean[ci] + cfg.momentum * mean;
                    stats.var[ci] = (1.0 - cfg.momentum) * stats.var[ci] + cfg.momentum * unbiased;
                    counts[ci] = m;
                    (mean, var)
                }
                BnMode::Eval => (stats.mean[ci], stats.var[ci]),
            };
            let is = 1.0 / (var + cfg.eps).sqrt();
            inv_std[ci] = is;
            for ni in 0..n {
                if !live(ni, ci) {
                    continue;
                }
                let off = (ni * c + ci) * plane;
                for p in off..off + plane {
                    let xh = (src[p] - mean) * is;
                    xhat[p] = xh;
                    out[p] = g[ci] * xh + bt[ci];
                }
            }
        }
        let out = Tensor::new(s, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
                counts,
                mask,
            },
            rg,
            "batch_norm",
        )
    }

    /// Backpropagates from the scalar `loss`, consuming the tape.
    ///
    /// Every parameter leaf recorded on the tape gets its gradient added to
    /// the store (zeros when no path carries signal).
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(gy);
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                match &grads[i] {
                    Some(g) => store.accumulate_grad(id, g),
                    None => store.accumulate_grad(id, &vec![0.0; node.value.numel()]),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, gy.to_vec());
                send(*b, gy.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, gy.iter().zip(vb).map(|(g, y)| g * y).collect());
                send(*b, gy.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => send(*a, gy.iter().map(|g| g * c).collect()),
            Op::Relu(a) => send(
                *a,
                gy.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid(a) => send(
                *a,
                gy.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            ),
            Op::SaturatingSigmoid { x, deriv } => {
                send(*x, gy.iter().zip(deriv).map(|(g, d)| g * d).collect())
            }
            Op::StraightThrough { x, surrogate } => {
                send(*x, gy.iter().zip(surrogate).map(|(g, d)| g * d).collect())
            }
            Op::ChannelScale { x, scale } => {
                let (vx, vs) = (val(*x), val(*scale));
                let nc = vs.len();
                let plane = vx.len().checked_div(nc).unwrap_or(0);
                let mut gx = vec![0.0; vx.len()];
                let mut gs = vec![0.0; nc];
                for i in 0..nc {
                    let r = i * plane..(i + 1) * plane;
                    let mut acc = 0.0;
                    for p in r {
                        gx[p] = gy[p] * vs[i];
                        acc += gy[p] * vx[p];
                    }
                    gs[i] = acc;
                }
                send(*x, gx);
                send(*scale, gs);
            }
            Op::GlobalAvgPool(x) => {
                let nx = val(*x).len();
                let nc = gy.len();
                let plane = nx / nc;
                let mut gx = vec![0.0; nx];
                for (i, g) in gy.iter().enumerate() {
                    let v = g / plane as f64;
                    gx[i * plane..(i + 1) * plane].iter_mut().for_each(|e| *e = v);
                }
                send(*x, gx);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (g, &at) in gy.iter().zip(argmax) {
                    gx[at] += g;
                }
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, gy.to_vec()),
            Op::Linear { x, w } => {
                let (vx, vw) = (val(*x), val(*w));
                let fout = self.nodes[w.0].value.shape()[0];
                let fin = self.nodes[w.0].value.shape()[1];
                let n = vx.len() / fin.max(1);
                let mut gx = vec![0.0; vx.len()];
                let mut gw = vec![0.0; vw.len()];
                for r in 0..n {
                    for o in 0..fout {
                        let g = gy[r * fout + o];
                        if g == 0.0 {
                            continue;
                        }
                        for i in 0..fin {
                            gx[r * fin + i] += g * vw[o * fin + i];
                            gw[o * fin + i] += g * vx[r * fin + i];
                        }
                    }
                }
                send(*x, gx);
                send(*w, gw);
            }
            Op::RepeatRows(x) => {
                let f = val(*x).len();
                let mut gx = vec![0.0; f];
                for row in gy.chunks(f.max(1)) {
                    gx.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                send(*x, gx);
            }
            Op::L1(x) => {
                let g = gy[0];
                send(
                    *x,
                    val(*x)
                        .iter()
                        .map(|&v| {
                            if v > 0.0 {
                                g
                            } else if v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::Sum(x) => send(*x, vec![gy[0]; val(*x).len()]),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = gy[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * k + l] -= scale;
                }
                send(*logits, gl);
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                mask,
            } => {
                let (gx, gw, gb) = conv::backward(
                    geom,
                    val(*x),
                    val(*w),
                    gy,
                    mask.as_ref(),
                    self.nodes[x.0].requires_grad,
                );
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                send(*w, gw);
                if let Some(b) = bias {
                    send(*b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
                counts,
                mask,
            } => {
                let s = self.nodes[x.0].value.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let g = val(*gamma);
                let live = |ni: usize, ci: usize| mask.as_ref().is_none_or(|m| m.is_live(ni, ci));
                let mut gx = vec![0.0; gy.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ci in 0..c {
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xh = 0.0;
                    for ni in (0..n).filter(|&ni| live(ni, ci)) {
                        let off = (ni * c + ci) * plane;
                        for p in off..off + plane {
                            sum_dy += gy[p];
                            sum_dy_xh += gy[p] * xhat[p];
                        }
                    }
                    gg[ci] = sum_dy_xh;
                    gb[ci] = sum_dy;
                    let is = inv_std[ci];
                    match mode {
                        BnMode::Eval => {
                            for ni in (0..n).filter(|&ni| live(ni, ci)) {
                                let off = (ni * c + ci) * plane;
                                for p in off..off + plane {
                                    gx[p] = gy[p] * g[ci] * is;
                                }
                            }
                        }
                        BnMode::Train => {
                            let m = counts[ci] as f64;
                            if counts[ci] == 0 {
                                continue;
                            }
                            for ni in (0..n).filter(|&ni| live(ni, ci)) {
                                let off = (ni * c + ci) * plane;
                                for p in off..off + plane {
                                    gx[p] = g[ci] * is / m
                                        * (m * gy[p] - sum_dy - xhat[p] * sum_dy_xh);
                                }
                            }
                        }
                    }
                }
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
        }
    }
}

/// Values and derivatives of `clamp(a * sigmoid(x + noise) - b, 0, 1)`.
///
/// The derivative is zero wherever the clamp is active.
pub fn saturating_sigmoid_values(x: &[f64], a: f64, b: f64, noise: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let mut values = Vec::with_capacity(x.len());
    let mut deriv = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        let z = v + noise.map_or(0.0, |n| n[i]);
        let sg = sigmoid(z);
        let raw = a * sg - b;
        if raw <= 0.0 {
            values.push(0.0);
            deriv.push(0.0);
        } else if raw >= 1.0 {
            values.push(1.0);
            deriv.push(0.0);
        } else {
            values.push(raw);
            deriv.push(a * sg * (1.0 - sg));
        }
    }
    (values, deriv)
}
