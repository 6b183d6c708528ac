//! Reverse-mode gradient tape.
//!
//! Every op appends a node holding its output value and enough saved state to
//! run its backward rule. `backward` walks the nodes in reverse recording
//! order. A tape is meant to live for exactly one forward/backward pass: build
//! it, read the leaf gradients, drop it.

use super::kernels::{self, ConvGeometry, UpGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, the one used for normalization.
    pub var: Vec<f64>,
    /// Number of values each channel's statistics were computed over.
    pub count: usize,
}

impl BatchStats {
    /// Exponential moving update `r ← m·r + (1−m)·batch`. The running
    /// variance receives the unbiased batch variance.
    pub fn blend_into(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        let correction = if self.count > 1 {
            self.count as f64 / (self.count - 1) as f64
        } else {
            1.0
        };
        for (r, &m) in running_mean.iter_mut().zip(&self.mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, &v) in running_var.iter_mut().zip(&self.var) {
            *r = momentum * *r + (1.0 - momentum) * v * correction;
        }
    }
}

/// Which statistics a batch-norm call normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum Normalization<'a> {
    /// Statistics of the current batch.
    Batch { epsilon: f64 },
    /// Stored running statistics.
    Running {
        mean: &'a [f64],
        var: &'a [f64],
        epsilon: f64,
    },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: UpGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Elu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Film {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Affine {
        input: Var,
        scale: f64,
    },
    Sum {
        input: Var,
    },
    SumPerSample {
        input: Var,
    },
    Pad2d {
        input: Var,
    },
    Crop2d {
        input: Var,
    },
    Reshape {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a tensor whose gradient should be computed.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a tensor that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = self.any_grad(inputs);
        self.push(value, requires_grad, op)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let [b, c, h, w] = self.value(input).dims4(OP)?;
        let [k, wc, kh, kw] = self.value(weight).dims4(OP)?;
        if wc != c {
            return Err(Error::dim(
                OP,
                "channels",
                format!("input has {c} channels, kernel expects {wc}"),
            ));
        }
        let nb = self.value(bias).dims1(OP)?;
        if nb != k {
            return Err(Error::dim(
                OP,
                "bias",
                format!("{nb} biases for {k} output channels"),
            ));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be at least 1".into()));
        }
        if kh > h + 2 * padding {
            return Err(Error::dim(
                OP,
                "height",
                format!("kernel height {kh} exceeds padded height {}", h + 2 * padding),
            ));
        }
        if kw > w + 2 * padding {
            return Err(Error::dim(
                OP,
                "width",
                format!("kernel width {kw} exceeds padded width {}", w + 2 * padding),
            ));
        }
        let geometry = ConvGeometry {
            batch: b,
            in_channels: c,
            height: h,
            width: w,
            out_channels: k,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![b, k, geometry.out_h, geometry.out_w], out)?;
        Ok(self.record(
            value,
            &[input, weight, bias],
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
        ))
    }

    /// Stride-2 transposed convolution with a `[C_in, C_out, 2, 2]` kernel;
    /// doubles both spatial dimensions.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let [b, c, h, w] = self.value(input).dims4(OP)?;
        let [wc, k, kh, kw] = self.value(weight).dims4(OP)?;
        if wc != c {
            return Err(Error::dim(
                OP,
                "channels",
                format!("input has {c} channels, kernel expects {wc}"),
            ));
        }
        if (kh, kw) != (2, 2) {
            return Err(Error::dim(
                OP,
                "kernel",
                format!("upsampling kernel must be 2x2, got {kh}x{kw}"),
            ));
        }
        let nb = self.value(bias).dims1(OP)?;
        if nb != k {
            return Err(Error::dim(
                OP,
                "bias",
                format!("{nb} biases for {k} output channels"),
            ));
        }
        let geometry = UpGeometry {
            batch: b,
            in_channels: c,
            out_channels: k,
            height: h,
            width: w,
        };
        let out = kernels::conv_transpose2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![b, k, 2 * h, 2 * w], out)?;
        Ok(self.record(
            value,
            &[input, weight, bias],
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geometry,
            },
        ))
    }

    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "max_pool2d";
        let dims = self.value(input).dims4(OP)?;
        let [b, c, h, w] = dims;
        if h % 2 != 0 {
            return Err(Error::dim(OP, "height", format!("odd height {h}")));
        }
        if w % 2 != 0 {
            return Err(Error::dim(OP, "width", format!("odd width {w}")));
        }
        let (out, argmax) = kernels::max_pool2d_forward(dims, self.value(input).data());
        let value = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        Ok(self.record(value, &[input], Op::MaxPool2d { input, argmax }))
    }

    /// Source index of every max-pool output, one vector per pooling op in
    /// recording order. Two passes with equal routing are on the same
    /// smooth piece of the network function.
    pub fn pool_routing(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::MaxPool2d { argmax, .. } => Some(argmax.clone()),
                _ => None,
            })
            .collect()
    }

    /// Per-channel normalization over every axis except axis 1, followed by
    /// a learned per-channel scale and shift. Returns the batch statistics
    /// when normalizing with them.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        norm: Normalization<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        const OP: &str = "batch_norm";
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(
                OP,
                "rank",
                format!("need at least [B, C], got {shape:?}"),
            ));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let count = batch * inner;
        if count == 0 {
            return Err(Error::Contract("batch_norm over an empty batch".into()));
        }
        for (v, name) in [(scale, "scale"), (shift, "shift")] {
            let n = self.value(v).dims1(OP)?;
            if n != channels {
                return Err(Error::dim(
                    OP,
                    name,
                    format!("{n} entries for {channels} channels"),
                ));
            }
        }
        let x = self.value(input).data();
        let (mean, var, epsilon, batch_stats) = match norm {
            Normalization::Batch { epsilon } => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for (ch, m) in mean.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for b in 0..batch {
                        let off = (b * channels + ch) * inner;
                        s += x[off..off + inner].iter().sum::<f64>();
                    }
                    *m = s / count as f64;
                }
                for (ch, v) in var.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for b in 0..batch {
                        let off = (b * channels + ch) * inner;
                        s += x[off..off + inner]
                            .iter()
                            .map(|&xi| (xi - mean[ch]) * (xi - mean[ch]))
                            .sum::<f64>();
                    }
                    *v = s / count as f64;
                }
                (mean, var, epsilon, true)
            }
            Normalization::Running { mean, var, epsilon } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::dim(
                        OP,
                        "running stats",
                        format!("expected {channels} channels"),
                    ));
                }
                (mean.to_vec(), var.to_vec(), epsilon, false)
            }
        };
        if epsilon <= 0.0 {
            return Err(Error::Contract("batch_norm epsilon must be positive".into()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..batch {
            for ch in 0..channels {
                let off = (b * channels + ch) * inner;
                for i in off..off + inner {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let stats = batch_stats.then_some(BatchStats { mean, var, count });
        let value = Tensor::new(shape, out)?;
        let v = self.record(
            value,
            &[input, scale, shift],
            Op::BatchNorm {
                input,
                scale,
                shift,
                normalized,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, stats))
    }

    /// `x` for `x ≥ 0`, `exp(x) − 1` otherwise.
    pub fn elu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { v.exp_m1() })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.record(value, &[input], Op::Elu { input })
    }

    /// Logistic function. Outputs are clamped to the open interval (0, 1) so
    /// that saturated inputs never produce exact 0 or 1.
    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<f64> = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.record(value, &[input], Op::Sigmoid { input })
    }

    /// `input · weightᵀ + bias` with input `[B, N]` and weight `[M, N]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "linear";
        let [b, n] = self.value(input).dims2(OP)?;
        let [m, wn] = self.value(weight).dims2(OP)?;
        if wn != n {
            return Err(Error::dim(
                OP,
                "inner",
                format!("input has {n} features, weight expects {wn}"),
            ));
        }
        let nb = self.value(bias).dims1(OP)?;
        if nb != m {
            return Err(Error::dim(
                OP,
                "bias",
                format!("{nb} biases for {m} outputs"),
            ));
        }
        let mut out = vec![0.0; b * m];
        kernels::gemm(
            b,
            n,
            m,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            &mut out,
            0.0,
        );
        let bias_v = self.value(bias).data();
        for row in out.chunks_exact_mut(m) {
            row.iter_mut().zip(bias_v).for_each(|(o, bb)| *o += bb);
        }
        let value = Tensor::new(vec![b, m], out)?;
        Ok(self.record(
            value,
            &[input, weight, bias],
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Feature-wise affine modulation: `out[b,k,…] = gamma[b,k]·x[b,k,…] + beta[b,k]`.
    pub fn film(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        const OP: &str = "film";
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(
                OP,
                "rank",
                format!("need at least [B, K], got {shape:?}"),
            ));
        }
        let (b, k) = (shape[0], shape[1]);
        for (v, name) in [(gamma, "gamma"), (beta, "beta")] {
            let dims = self.value(v).dims2(OP)?;
            if dims != [b, k] {
                return Err(Error::dim(
                    OP,
                    name,
                    format!("expected [{b}, {k}], got {dims:?}"),
                ));
            }
        }
        let inner: usize = shape[2..].iter().product();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![0.0; x.len()];
        for (bk, (o, xi)) in out
            .chunks_exact_mut(inner.max(1))
            .zip(x.chunks_exact(inner.max(1)))
            .enumerate()
        {
            for (oo, &xx) in o.iter_mut().zip(xi) {
                *oo = g[bk] * xx + be[bk];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, &[input, gamma, beta], Op::Film { input, gamma, beta }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, "shape", format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), out).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.record(value, &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.record(value, &[a, b], Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.zip_with(a, b, |x, y| x / y);
        Ok(self.record(value, &[a, b], Op::Div { a, b }))
    }

    /// Elementwise `scale · x + offset`.
    pub fn affine(&mut self, input: Var, scale: f64, offset: f64) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| scale * v + offset).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.record(value, &[input], Op::Affine { input, scale })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.record(Tensor::scalar(s), &[input], Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel().max(1) as f64;
        let s = self.sum(input);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Sum over every axis but the first: `[B, …] → [B]`.
    pub fn sum_per_sample(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let Some(&b) = x.shape().first() else {
            return Err(Error::dim("sum_per_sample", "rank", "scalar input"));
        };
        let inner = x.numel().checked_div(b).unwrap_or(0);
        let out = (0..b)
            .map(|i| x.data()[i * inner..(i + 1) * inner].iter().sum())
            .collect();
        let value = Tensor::new(vec![b], out)?;
        Ok(self.record(value, &[input], Op::SumPerSample { input }))
    }

    /// Zero-pads the two trailing axes of a 4-D tensor at the bottom and right.
    pub fn pad2d(&mut self, input: Var, bottom: usize, right: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("pad2d")?;
        let (nh, nw) = (h + bottom, w + right);
        let x = self.value(input).data();
        let mut out = vec![0.0; b * c * nh * nw];
        for p in 0..b * c {
            for i in 0..h {
                out[p * nh * nw + i * nw..p * nh * nw + i * nw + w]
                    .copy_from_slice(&x[p * h * w + i * w..p * h * w + (i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![b, c, nh, nw], out)?;
        Ok(self.record(value, &[input], Op::Pad2d { input }))
    }

    /// Keeps the top-left `height × width` window of a 4-D tensor.
    pub fn crop2d(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("crop2d")?;
        if height > h || width > w {
            return Err(Error::dim(
                "crop2d",
                if height > h { "height" } else { "width" },
                format!("cannot crop {h}x{w} to {height}x{width}"),
            ));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * height * width);
        for p in 0..b * c {
            for i in 0..height {
                out.extend_from_slice(&x[p * h * w + i * w..p * h * w + i * w + width]);
            }
        }
        let value = Tensor::new(vec![b, c, height, width], out)?;
        Ok(self.record(value, &[input], Op::Crop2d { input }))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.record(value, &[input], Op::Reshape { input }))
    }

    /// Back-propagates from a scalar `loss`, populating the gradient of every
    /// leaf that requires one. Intermediate gradients are released as soon as
    /// they have been consumed. Calling it again recomputes from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not recorded on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_rule(i, &grad);
            for (var, g) in contributions {
                let node = &mut self.nodes[var.0];
                if !node.requires_grad {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_rule(&self, i: usize, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let data = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let grads = kernels::conv2d_backward(
                    geometry,
                    data(*input),
                    data(*weight),
                    grad,
                    [needs(*input), needs(*weight), needs(*bias)],
                );
                push_grads(&mut out, [*input, *weight, *bias], grads);
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let grads = kernels::conv_transpose2d_backward(
                    geometry,
                    data(*input),
                    data(*weight),
                    grad,
                    [needs(*input), needs(*weight), needs(*bias)],
                );
                push_grads(&mut out, [*input, *weight, *bias], grads);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut g = vec![0.0; self.nodes[input.0].value.numel()];
                for (&src, &dy) in argmax.iter().zip(grad) {
                    g[src] += dy;
                }
                out.push((*input, g));
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let shape = self.nodes[input.0].value.shape();
                let (batch, channels) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let count = (batch * inner) as f64;
                let gamma = data(*scale);
                let mut dscale = vec![0.0; channels];
                let mut dshift = vec![0.0; channels];
                for b in 0..batch {
                    for ch in 0..channels {
                        let off = (b * channels + ch) * inner;
                        for idx in off..off + inner {
                            dscale[ch] += grad[idx] * normalized[idx];
                            dshift[ch] += grad[idx];
                        }
                    }
                }
                if needs(*input) {
                    let mut dx = vec![0.0; grad.len()];
                    for b in 0..batch {
                        for ch in 0..channels {
                            let off = (b * channels + ch) * inner;
                            let k = gamma[ch] * inv_std[ch];
                            for idx in off..off + inner {
                                dx[idx] = if *batch_stats {
                                    k * (grad[idx]
                                        - dshift[ch] / count
                                        - normalized[idx] * dscale[ch] / count)
                                } else {
                                    k * grad[idx]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*scale, dscale));
                out.push((*shift, dshift));
            }
            Op::Elu { input } => {
                let g = data(*input)
                    .iter()
                    .zip(grad)
                    .map(|(&x, &dy)| if x >= 0.0 { dy } else { dy * x.exp() })
                    .collect();
                out.push((*input, g));
            }
            Op::Sigmoid { input } => {
                let g = node
                    .value
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&s, &dy)| dy * s * (1.0 - s))
                    .collect();
                out.push((*input, g));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let [b, n] = [
                    self.nodes[input.0].value.shape()[0],
                    self.nodes[input.0].value.shape()[1],
                ];
                let m = self.nodes[weight.0].value.shape()[0];
                if needs(*input) {
                    let mut dx = vec![0.0; b * n];
                    kernels::gemm(b, m, n, grad, false, data(*weight), false, &mut dx, 0.0);
                    out.push((*input, dx));
                }
                if needs(*weight) {
                    let mut dw = vec![0.0; m * n];
                    kernels::gemm(m, b, n, grad, true, data(*input), false, &mut dw, 0.0);
                    out.push((*weight, dw));
                }
                if needs(*bias) {
                    let mut db = vec![0.0; m];
                    for row in grad.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Film { input, gamma, beta } => {
                let x = data(*input);
                let g = data(*gamma);
                let planes = g.len();
                let inner = x.len().checked_div(planes).unwrap_or(0);
                let mut dx = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; planes];
                let mut dbeta = vec![0.0; planes];
                for p in 0..planes {
                    for idx in p * inner..(p + 1) * inner {
                        dx[idx] = grad[idx] * g[p];
                        dgamma[p] += grad[idx] * x[idx];
                        dbeta[p] += grad[idx];
                    }
                }
                out.push((*input, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Add { a, b } => {
                out.push((*a, grad.to_vec()));
                out.push((*b, grad.to_vec()));
            }
            Op::Mul { a, b } => {
                let (xa, xb) = (data(*a), data(*b));
                out.push((*a, grad.iter().zip(xb).map(|(g, y)| g * y).collect()));
                out.push((*b, grad.iter().zip(xa).map(|(g, x)| g * x).collect()));
            }
            Op::Div { a, b } => {
                let (xa, xb) = (data(*a), data(*b));
                out.push((*a, grad.iter().zip(xb).map(|(g, y)| g / y).collect()));
                out.push((
                    *b,
                    grad.iter()
                        .zip(xa.iter().zip(xb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect(),
                ));
            }
            Op::Affine { input, scale } => {
                out.push((*input, grad.iter().map(|g| g * scale).collect()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![grad[0]; self.nodes[input.0].value.numel()]));
            }
            Op::SumPerSample { input } => {
                let n = self.nodes[input.0].value.numel();
                let inner = if grad.is_empty() { 0 } else { n / grad.len() };
                let mut g = Vec::with_capacity(n);
                for &gb in grad {
                    g.extend(std::iter::repeat_n(gb, inner));
                }
                out.push((*input, g));
            }
            Op::Pad2d { input } => {
                let [b, c, h, w] = four(self.nodes[input.0].value.shape());
                let [_, _, nh, nw] = four(node.value.shape());
                let mut g = Vec::with_capacity(b * c * h * w);
                for p in 0..b * c {
                    for r in 0..h {
                        g.extend_from_slice(&grad[p * nh * nw + r * nw..p * nh * nw + r * nw + w]);
                    }
                }
                out.push((*input, g));
            }
            Op::Crop2d { input } => {
                let [b, c, h, w] = four(self.nodes[input.0].value.shape());
                let [_, _, ch, cw] = four(node.value.shape());
                let mut g = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for r in 0..ch {
                        g[p * h * w + r * w..p * h * w + r * w + cw]
                            .copy_from_slice(&grad[p * ch * cw + r * cw..p * ch * cw + (r + 1) * cw]);
                    }
                }
                out.push((*input, g));
            }
            Op::Reshape { input } => {
                out.push((*input, grad.to_vec()));
            }
        }
        out.retain(|(v, _)| needs(*v));
        out
    }
}

fn push_grads(out: &mut Vec<(Var, Vec<f64>)>, vars: [Var; 3], grads: kernels::ConvGrads) {
    let [input, weight, bias] = vars;
    if let Some(g) = grads.input {
        out.push((input, g));
    }
    if let Some(g) = grads.weight {
        out.push((weight, g));
    }
    if let Some(g) = grads.bias {
        out.push((bias, g));
    }
}

fn four(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}
