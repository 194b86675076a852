use super::kernels::{self, Conv2dSpec};
use super::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed by a train-mode batch norm. `var` is the
/// unbiased estimate, which is what running statistics track.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Exponential moving update `r <- (1 - momentum) r + momentum * batch`.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    ChannelNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        /// Batch statistics participate in the gradient only in train mode.
        batch_stats: bool,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    AvgPoolChannels(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Roll {
        input: Var,
        axis: usize,
        shift: isize,
    },
    MeanAxis {
        input: Var,
        axis: usize,
    },
    Sum(Var),
    IndexSelect {
        input: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward evaluations so that [`Graph::backward`] can replay them
/// in reverse.
///
/// A graph is single-use: after a backward pass it refuses further ops.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zero-filled when it did not influence the output.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv_with(input, weight, bias, Conv2dSpec::new(stride, padding))
    }

    /// Channel-wise convolution; `weight` is `[C, 1, m, m]`.
    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let c = self.shape(input).get(1).copied().unwrap_or(0);
        let wc = self.shape(weight).first().copied().unwrap_or(0);
        if c != wc || c == 0 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("weight channel count {wc} != input channel count {c}"),
            ));
        }
        self.conv_with(input, weight, bias, Conv2dSpec::depthwise(c, stride, padding))
    }

    fn conv_with(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
        )
    }

    /// 2-D batch normalization over `(B, H, W)` per channel.
    ///
    /// In train mode the returned [`BatchStats`] carry the batch mean and
    /// unbiased variance for updating running statistics.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "batchnorm2d: epsilon must be > 0, got {eps}"
            )));
        }
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(Error::shape(
                "batchnorm2d",
                format!("input must be [B,C,H,W], got {:?}", x.shape()),
            ));
        }
        let c = x.shape()[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("{name} shape {:?} != [{c}]", self.shape(v)),
                ));
            }
        }
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let (mean, var) = kernels::channel_stats(x)?;
                let n = (x.len() / c) as f64;
                let unbiased = var
                    .iter()
                    .map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batchnorm2d",
                        format!(
                            "running stats have {}/{} entries for {c} channels",
                            mean.len(),
                            var.len()
                        ),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = kernels::channel_normalize(x, &mean, &inv_std);
        let out = kernels::channel_affine(
            &xhat,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let var_out = self.push(
            out,
            Op::ChannelNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: stats.is_some(),
            },
        )?;
        Ok((var_out, stats))
    }

    pub fn layernorm(
        &mut self,
        input: Var,
        axis: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layernorm: epsilon must be > 0, got {eps}"
            )));
        }
        let x = self.value(input);
        let (_, len, _) = split_axis(x.shape(), axis)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [len] {
                return Err(Error::shape(
                    "layernorm",
                    format!("{name} shape {:?} != [{len}]", self.shape(v)),
                ));
            }
        }
        let (xhat, inv_std) = kernels::layernorm_normalize(x, axis, eps)?;
        let (_, len, inner) = split_axis(x.shape(), axis)?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let k = (i / inner) % len;
                g[k] * v + b[k]
            })
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(
            out,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            },
        )
    }

    /// ReLU; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)));
        self.push(out, Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        self.push(out, Op::Softmax { input: x, axis })
    }

    /// Mean over the channel axis of `[B,C,H,W]`, giving `[B,1,H,W]`.
    pub fn avgpool_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [b, c, h, w] = *t.shape() else {
            return Err(Error::shape(
                "avgpool_channels",
                format!("input must be [B,C,H,W], got {:?}", t.shape()),
            ));
        };
        if c == 0 {
            return Err(Error::shape("avgpool_channels", "zero channels"));
        }
        let plane = h * w;
        let mut out = vec![0.0; b * plane];
        for bi in 0..b {
            let dst = &mut out[bi * plane..][..plane];
            for ch in 0..c {
                for (o, v) in dst.iter_mut().zip(&t.data()[(bi * c + ch) * plane..][..plane]) {
                    *o += v;
                }
            }
            for o in dst.iter_mut() {
                *o /= c as f64;
            }
        }
        let out = Tensor::new([b, 1, h, w], out)?;
        self.push(out, Op::AvgPoolChannels(x))
    }

    /// Affine map over the last axis: `[..., F] x [F, G] + [G] -> [..., G]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let f = *x.shape().last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
        let [wf, g] = *w.shape() else {
            return Err(Error::shape(
                "linear",
                format!("weight must be [F,G], got {:?}", w.shape()),
            ));
        };
        if wf != f {
            return Err(Error::shape(
                "linear",
                format!("input features {f} != weight rows {wf}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [g] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} != [{g}]", self.shape(b)),
                ));
            }
        }
        let rows = x.len() / f.max(1);
        let mut out = vec![0.0; rows * g];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * g..][..g].copy_from_slice(bd);
            }
        }
        kernels::gemm_nn(x.data(), w.data(), &mut out, rows, f, g);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = g;
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    fn broadcast_binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        let shape = kernels::broadcast_shape(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; shape.iter().product()];
        kernels::broadcast_for_each(ta.shape(), tb.shape(), &shape, |o, ia, ib| {
            out[o] = f(ta.data()[ia], tb.data()[ib]);
        });
        Tensor::new(shape, out)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    /// Batched matrix product `[..., M, K] @ [..., K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(x), axes)?;
        self.push(
            out,
            Op::Permute {
                input: x,
                axes: axes.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// Cyclic shift along `axis` (`out[i] = x[i - shift]`).
    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let out = kernels::roll(self.value(x), axis, shift)?;
        self.push(
            out,
            Op::Roll {
                input: x,
                axis,
                shift,
            },
        )
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for (dst, v) in out[o * inner..][..inner]
                    .iter_mut()
                    .zip(&t.data()[(o * len + k) * inner..][..inner])
                {
                    *dst += v;
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::MeanAxis { input: x, axis })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Gathers slices along axis 0: `out[i, ...] = x[indices[i], ...]`.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = *t.shape().first().ok_or_else(|| Error::shape("index_select", "scalar input"))?;
        let row_len = t.len() / rows.max(1);
        let mut out = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            if i >= rows {
                return Err(Error::InvalidArgument(format!(
                    "index_select: index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&t.data()[i * row_len..][..row_len]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::IndexSelect {
                input: x,
                indices: indices.to_vec(),
            },
        )
    }

    /// Mean cross-entropy of `[B, K]` logits against integer labels,
    /// computed through a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let [b, k] = *t.shape() else {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be [B,K], got {:?}", t.shape()),
            ));
        };
        if labels.len() != b || b == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for batch of {b}", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let probs = kernels::softmax(t, 1)?;
        let mut loss = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let r = &t.data()[row * k..][..k];
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - r[label];
        }
        let out = Tensor::scalar(loss / b as f64);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a scalar output, seeded with 1.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(output).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalar(shape));
        }
        self.backward_with(output, Tensor::ones(shape))
    }

    /// Reverse pass seeded with an arbitrary output cotangent.
    pub fn backward_with(&mut self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed shape {:?} != output shape {:?}",
                    seed.shape(),
                    self.shape(output)
                ),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.node_backward(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn node_backward(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (gi, gw, gb) =
                    kernels::conv2d_backward(self.value(*input), self.value(*weight), g, *spec)?;
                accumulate(grads, *input, gi);
                accumulate(grads, *weight, gw);
                if let Some(b) = bias {
                    accumulate(grads, *b, gb);
                }
            }
            Op::ChannelNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = xhat.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (k, (&gv, &xv)) in g.data().iter().zip(xhat.data()).enumerate() {
                    let ch = (k / plane) % c;
                    dgamma[ch] += gv * xv;
                    dbeta[ch] += gv;
                }
                let dx: Vec<f64> = if *batch_stats {
                    let n = (xhat.len() / c) as f64;
                    g.data()
                        .iter()
                        .zip(xhat.data())
                        .enumerate()
                        .map(|(k, (&gv, &xv))| {
                            let ch = (k / plane) % c;
                            gam[ch] * inv_std[ch] / n * (n * gv - dbeta[ch] - xv * dgamma[ch])
                        })
                        .collect()
                } else {
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gv)| {
                            let ch = (k / plane) % c;
                            gv * gam[ch] * inv_std[ch]
                        })
                        .collect()
                };
                accumulate(grads, *input, Tensor::new(s, dx)?);
                accumulate(grads, *gamma, Tensor::new([c], dgamma)?);
                accumulate(grads, *beta, Tensor::new([c], dbeta)?);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            } => {
                let (_, len, inner) = split_axis(xhat.shape(), *axis)?;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; len];
                let mut dbeta = vec![0.0; len];
                let mut dxhat = vec![0.0; g.len()];
                for (i, (&gv, &xv)) in g.data().iter().zip(xhat.data()).enumerate() {
                    let k = (i / inner) % len;
                    dgamma[k] += gv * xv;
                    dbeta[k] += gv;
                    dxhat[i] = gv * gam[k];
                }
                let dx = kernels::layernorm_input_grad(xhat, &dxhat, inv_std, *axis)?;
                accumulate(grads, *input, Tensor::new(xhat.shape(), dx)?);
                accumulate(grads, *gamma, Tensor::new([len], dgamma)?);
                accumulate(grads, *beta, Tensor::new([len], dbeta)?);
            }
            Op::Relu(x) => {
                let gx = g.zip_map(y, |gv, yv| if yv > 0.0 { gv } else { 0.0 })?;
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))?;
                accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, v| {
                    let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
                    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    gv * (cdf + v * pdf)
                })?;
                accumulate(grads, *x, gx);
            }
            Op::Softmax { input, axis } => {
                accumulate(grads, *input, kernels::softmax_backward(y, g, *axis)?);
            }
            Op::AvgPoolChannels(x) => {
                let s = self.shape(*x);
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut gx = vec![0.0; b * c * plane];
                for bi in 0..b {
                    let src = &g.data()[bi * plane..][..plane];
                    for ch in 0..c {
                        for (d, v) in gx[(bi * c + ch) * plane..][..plane].iter_mut().zip(src) {
                            *d = v / c as f64;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(s, gx)?);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (f, gcols) = (w.shape()[0], w.shape()[1]);
                let rows = x.len() / f.max(1);
                let mut gx = vec![0.0; x.len()];
                kernels::gemm_nt(g.data(), w.data(), &mut gx, rows, gcols, f);
                let mut gw = vec![0.0; w.len()];
                kernels::gemm_tn(x.data(), g.data(), &mut gw, f, rows, gcols);
                accumulate(grads, *input, Tensor::new(x.shape(), gx)?);
                accumulate(grads, *weight, Tensor::new(w.shape(), gw)?);
                if let Some(b) = bias {
                    let mut gb = vec![0.0; gcols];
                    for r in 0..rows {
                        for (d, v) in gb.iter_mut().zip(&g.data()[r * gcols..][..gcols]) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new([gcols], gb)?);
                }
            }
            Op::Add(a, b) => {
                let (ga, gb) = self.broadcast_grads(*a, *b, g, |gv, _, _| (gv, gv));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ga, gb) = self.broadcast_grads(*a, *b, g, |gv, av, bv| (gv * bv, gv * av));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(x, factor) => {
                accumulate(grads, *x, g.map(|v| v * factor));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k, n, _) = kernels::matmul_dims(ta, tb)?;
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                for t in 0..batch {
                    let gt = &g.data()[t * m * n..][..m * n];
                    kernels::gemm_nt(gt, &tb.data()[t * k * n..][..k * n], &mut ga[t * m * k..][..m * k], m, n, k);
                    kernels::gemm_tn(&ta.data()[t * m * k..][..m * k], gt, &mut gb[t * k * n..][..k * n], k, m, n);
                }
                accumulate(grads, *a, Tensor::new(ta.shape(), ga)?);
                accumulate(grads, *b, Tensor::new(tb.shape(), gb)?);
            }
            Op::Permute { input, axes } => {
                let inv = kernels::inverse_permutation(axes);
                accumulate(grads, *input, kernels::permute(g, &inv)?);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, g.reshape(self.shape(*x))?);
            }
            Op::Roll { input, axis, shift } => {
                accumulate(grads, *input, kernels::roll(g, *axis, -shift)?);
            }
            Op::MeanAxis { input, axis } => {
                let s = self.shape(*input);
                let (outer, len, inner) = split_axis(s, *axis)?;
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..][..inner];
                    for k in 0..len {
                        for (d, v) in gx[(o * len + k) * inner..][..inner].iter_mut().zip(src) {
                            *d = v / len as f64;
                        }
                    }
                }
                accumulate(grads, *input, Tensor::new(s, gx)?);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::IndexSelect { input, indices } => {
                let s = self.shape(*input);
                let row_len = self.value(*input).len() / s[0].max(1);
                let mut gx = vec![0.0; s.iter().product()];
                for (r, &i) in indices.iter().enumerate() {
                    for (d, v) in gx[i * row_len..][..row_len]
                        .iter_mut()
                        .zip(&g.data()[r * row_len..][..row_len])
                    {
                        *d += v;
                    }
                }
                accumulate(grads, *input, Tensor::new(s, gx)?);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.shape()[1];
                let b = labels.len() as f64;
                let scale = g.data()[0] / b;
                let mut gl = probs.data().to_vec();
                for (row, &label) in labels.iter().enumerate() {
                    gl[row * k + label] -= 1.0;
                }
                for v in &mut gl {
                    *v *= scale;
                }
                accumulate(grads, *logits, Tensor::new(probs.shape(), gl)?);
            }
        }
        Ok(())
    }

    fn broadcast_grads(
        &self,
        a: Var,
        b: Var,
        g: &Tensor,
        f: impl Fn(f64, f64, f64) -> (f64, f64),
    ) -> (Tensor, Tensor) {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut ga = vec![0.0; ta.len()];
        let mut gb = vec![0.0; tb.len()];
        kernels::broadcast_for_each(ta.shape(), tb.shape(), g.shape(), |o, ia, ib| {
            let (da, db) = f(g.data()[o], ta.data()[ia], tb.data()[ib]);
            ga[ia] += da;
            gb[ib] += db;
        });
        (
            Tensor::new(ta.shape(), ga).expect("shape preserved"),
            Tensor::new(tb.shape(), gb).expect("shape preserved"),
        )
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
