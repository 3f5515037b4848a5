//! Reverse-mode differentiation over the time-unrolled network.
//!
//! A [`Tape`] records tensor-level operations in execution order. Because a
//! node's inputs are always recorded before it, reverse recording order is a
//! valid topological order and [`Tape::backward`] visits every node once.
//! Spike nodes run their own BPTT loop internally using the surrogate
//! derivative. A tape is single-use: a second `backward` is an error.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::neuron::{self, LifParams, LifTrace, SpikeFn, SurrogateParams};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Leaf,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    DepthwiseTime {
        x: Var,
        k: Var,
        b: Option<Var>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Lif {
        x: Var,
        p: LifParams,
        sg: SurrogateParams,
        mode: SpikeFn,
        trace: LifTrace,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulBlocks {
        x: Var,
        factors: Vec<f64>,
    },
    Scale {
        x: Var,
        c: f64,
    },
    SumTime(Var),
    MulBroadcastTime {
        a: Var,
        b: Var,
    },
    WindowSumTime {
        x: Var,
        radius: usize,
    },
    Reshape(Var),
    SwapLast2(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Var, Var),
    SoftmaxLast(Var),
    MaskedTimeSum {
        x: Var,
        factors: Vec<f64>,
    },
    CrossEntropyAccum {
        yhat: Var,
        labels: Vec<usize>,
    },
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a train-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.var(*v))
    }

    /// `(param, gradient)` pairs for every parameter recorded on the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.by_node[v.0].as_ref().map(|g| (*p, g)))
    }
}

fn time_len(t: &Tensor) -> usize {
    t.shape().first().copied().unwrap_or(0)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Leaf | Op::Param => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// A free variable that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Record a parameter; repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 {
            return Err(dim_err("linear", "weight rank", 2, ws.len()));
        }
        let (din, dout) = (ws[0], ws[1]);
        let last = *xs.last().unwrap_or(&0);
        if last != din {
            return Err(dim_err("linear", format!("input axis {}", xs.len().saturating_sub(1)), din, last));
        }
        if let Some(b) = b {
            self.value(b).expect_shape("linear bias", &[dout])?;
        }
        let out = kernels::linear(
            self.value(x).data(),
            din,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            dout,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, &inputs))
    }

    /// Same-padded depthwise temporal convolution; `x` is `[T, …, C]`,
    /// `k` is `[C, K]` with `K` odd.
    pub fn depthwise_time(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let ks = self.shape(k).to_vec();
        if ks.len() != 2 {
            return Err(dim_err("depthwise_time", "kernel rank", 2, ks.len()));
        }
        let (c, ksize) = (ks[0], ks[1]);
        if ksize % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {ksize}")));
        }
        let xv = self.value(x);
        if xv.last_dim() != c {
            return Err(dim_err("depthwise_time", "channel", c, xv.last_dim()));
        }
        if let Some(b) = b {
            self.value(b).expect_shape("depthwise bias", &[c])?;
        }
        let out = kernels::depthwise_time(
            xv.data(),
            time_len(xv),
            c,
            self.value(k).data(),
            ksize,
            b.map(|b| self.value(b).data()),
        );
        let shape = xv.shape().to_vec();
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::DepthwiseTime { x, k, b }, &inputs))
    }

    /// Batch normalization over every axis but the last, using batch
    /// statistics. Returns the statistics for the running-average update.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let rows = xv.rows();
        if rows < 2 {
            return Err(Error::Config(format!(
                "train-mode batch norm needs at least 2 samples per channel, got {rows}"
            )));
        }
        self.value(gamma).expect_shape("bn gamma", &[c])?;
        self.value(beta).expect_shape("bn beta", &[c])?;
        let (mean, var) = kernels::channel_stats(xv.data(), c);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let shift: Vec<f64> = mean.iter().zip(&inv_std).map(|(m, s)| -m * s).collect();
        let xhat = kernels::channel_affine(xv.data(), &inv_std, &shift);
        let out = kernels::channel_affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        let shape = xv.shape().to_vec();
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, BatchStats { mean, var, count: rows }))
    }

    /// Batch normalization with fixed statistics (a per-channel affine map).
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        self.value(gamma).expect_shape("bn gamma", &[c])?;
        self.value(beta).expect_shape("bn beta", &[c])?;
        if mean.len() != c || var.len() != c {
            return Err(dim_err("batchnorm_eval", "running stats", c, mean.len().min(var.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let shift: Vec<f64> = mean.iter().zip(&inv_std).map(|(m, s)| -m * s).collect();
        let xhat = kernels::channel_affine(xv.data(), &inv_std, &shift);
        let out = kernels::channel_affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Spike function over the leading (time) axis.
    pub fn lif(&mut self, x: Var, p: LifParams, sg: SurrogateParams, mode: SpikeFn) -> Result<Var> {
        let xv = self.value(x);
        let trace = neuron::lif_forward(xv.data(), time_len(xv), &p, sg, mode);
        let out = Tensor::new(xv.shape(), trace.spikes.clone())?;
        Ok(self.push(out, Op::Lif { x, p, sg, mode, trace }, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a).to_vec();
        self.value(b).expect_shape(op, &sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("shape checked")
    }

    /// Multiply each contiguous block of `len / factors.len()` elements by
    /// the matching factor. With `x = [T, B, …]` and one factor per `(t, b)`
    /// this applies a temporal mask; with one factor per element it is a
    /// constant elementwise product (dropout).
    pub fn mul_blocks(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if factors.is_empty() || xv.len() % factors.len() != 0 {
            return Err(dim_err("mul_blocks", "factor count", xv.len(), factors.len()));
        }
        let block = xv.len() / factors.len();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i / block])
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.push(out, Op::MulBlocks { x, factors }, &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    /// Sum over the time axis, keeping it with length 1.
    pub fn sum_time(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let t = time_len(xv);
        let width = if t == 0 { 0 } else { xv.len() / t };
        let out = kernels::column_sum(xv.data(), width);
        let mut shape = xv.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::Contract("sum_time on a rank-0 tensor".into()));
        }
        shape[0] = 1;
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumTime(x), &[x]))
    }

    /// `a` of shape `[1, …]` broadcast along time against `b` of shape `[T, …]`.
    pub fn mul_broadcast_time(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().first() != Some(&1) || av.shape()[1..] != bv.shape()[1..] {
            let mut want = bv.shape().to_vec();
            want[0] = 1;
            av.expect_shape("mul_broadcast_time", &want)?;
        }
        let width = av.len();
        let data = bv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * av.data()[i % width])
            .collect();
        let out = Tensor::new(bv.shape(), data)?;
        Ok(self.push(out, Op::MulBroadcastTime { a, b }, &[a, b]))
    }

    /// Sum over a centered window of `2·radius + 1` time steps, zero padded.
    pub fn window_sum_time(&mut self, x: Var, radius: usize) -> Result<Var> {
        let xv = self.value(x);
        let out = kernels::window_sum_time(xv.data(), time_len(xv), radius);
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::WindowSumTime { x, radius }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Swap the two trailing axes: `[…, A, B] → […, B, A]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 {
            return Err(dim_err("swap_last2", "rank", 2, s.len()));
        }
        let (a, b) = (s[s.len() - 2], s[s.len() - 1]);
        let out = swap_last2_data(xv.data(), a, b);
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SwapLast2(x), &[x]))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if start + len > c {
            return Err(dim_err("slice_last", "channel", c, start + len));
        }
        let data: Vec<f64> = xv
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::new(&shape, data)?, Op::SliceLast { x, start }, &[x]))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape()[..av.ndim() - 1] != bv.shape()[..bv.ndim().saturating_sub(1)] {
            let mut want = av.shape().to_vec();
            *want.last_mut().unwrap() = bv.last_dim();
            bv.expect_shape("concat_last", &want)?;
        }
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(ca).zip(bv.data().chunks(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        Ok(self.push(Tensor::new(&shape, data)?, Op::ConcatLast(a, b), &[a, b]))
    }

    /// Outputs of every spike-function node recorded so far.
    pub fn spike_outputs(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Lif { .. })).map(|n| &n.value)
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = kernels::softmax_rows(xv.data(), xv.last_dim());
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::SoftmaxLast(x), &[x]))
    }

    /// `[T, B, Y] → [B, Y]`: `Σ_t factors[t, b] · x[t, b, :]`.
    pub fn masked_time_sum(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 {
            return Err(dim_err("masked_time_sum", "rank", 3, s.len()));
        }
        let (t, b, y) = (s[0], s[1], s[2]);
        if factors.len() != t * b {
            return Err(dim_err("masked_time_sum", "mask", t * b, factors.len()));
        }
        let mut out = vec![0.0; b * y];
        for ti in 0..t {
            for bi in 0..b {
                let f = factors[ti * b + bi];
                if f == 0.0 {
                    continue;
                }
                let row = &xv.data()[(ti * b + bi) * y..(ti * b + bi + 1) * y];
                for (o, &v) in out[bi * y..(bi + 1) * y].iter_mut().zip(row) {
                    *o += f * v;
                }
            }
        }
        Ok(self.push(Tensor::new(&[b, y], out)?, Op::MaskedTimeSum { x, factors }, &[x]))
    }

    /// Mean over the batch of `−ln(ŷ[label] / Σ_i ŷ[i])` for accumulated
    /// scores `ŷ` of shape `[B, Y]`.
    pub fn cross_entropy_accumulated(&mut self, yhat: Var, labels: &[usize]) -> Result<Var> {
        let yv = self.value(yhat);
        let s = yv.shape();
        if s.len() != 2 {
            return Err(dim_err("cross_entropy", "rank", 2, s.len()));
        }
        let (b, y) = (s[0], s[1]);
        if labels.len() != b {
            return Err(dim_err("cross_entropy", "labels", b, labels.len()));
        }
        let mut loss = 0.0;
        for (bi, &l) in labels.iter().enumerate() {
            if l >= y {
                return Err(Error::Input(format!("label {l} out of range for {y} classes")));
            }
            let row = &yv.data()[bi * y..(bi + 1) * y];
            let total: f64 = row.iter().sum();
            loss -= (row[l] / total).ln();
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyAccum {
                yhat,
                labels: labels.to_vec(),
            },
            &[yhat],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Propagate `d loss / d node` for every recorded node that depends on a
    /// leaf or parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let by_node = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].needs_grad)
                    .map(|g| Tensor::new(self.nodes[i].value.shape(), g).expect("grad shape"))
            })
            .collect();
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients { by_node, params })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let ws = val(*w).shape();
                let (din, dout) = (ws[0], ws[1]);
                if self.nodes[x.0].needs_grad {
                    acc(*x, kernels::linear_grad_input(g, val(*w).data(), din, dout));
                }
                if self.nodes[w.0].needs_grad {
                    acc(*w, kernels::linear_grad_weight(val(*x).data(), g, din, dout));
                }
                if let Some(b) = b {
                    acc(*b, kernels::column_sum(g, dout));
                }
            }
            Op::DepthwiseTime { x, k, b } => {
                let ks = val(*k).shape();
                let (c, ksize) = (ks[0], ks[1]);
                let t = time_len(val(*x));
                if self.nodes[x.0].needs_grad {
                    acc(*x, kernels::depthwise_time_grad_input(g, t, c, val(*k).data(), ksize));
                }
                if self.nodes[k.0].needs_grad {
                    acc(*k, kernels::depthwise_time_grad_kernel(val(*x).data(), g, t, c, ksize));
                }
                if let Some(b) = b {
                    acc(*b, kernels::column_sum(g, c));
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let m = (g.len() / c) as f64;
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                for (row_g, row_h) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ((d, &gv), &h) in dgamma.iter_mut().zip(row_g).zip(row_h) {
                        *d += gv * h;
                    }
                }
                let dbeta = kernels::column_sum(g, c);
                if self.nodes[x.0].needs_grad {
                    // dx = γ·inv_std/m · (m·g − Σg − x̂·Σ(g·x̂))
                    let mut dx = vec![0.0; g.len()];
                    for ((drow, grow), hrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            drow[ch] = gam[ch] * inv_std[ch] / m
                                * (m * grow[ch] - dbeta[ch] - hrow[ch] * dgamma[ch]);
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let gam = val(*gamma).data();
                if self.nodes[x.0].needs_grad {
                    let scale: Vec<f64> = gam.iter().zip(inv_std).map(|(a, b)| a * b).collect();
                    let dx = g
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(&scale).map(|(a, b)| a * b).collect::<Vec<_>>())
                        .collect();
                    acc(*x, dx);
                }
                let mut dgamma = vec![0.0; c];
                for (row_g, row_h) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ((d, &gv), &h) in dgamma.iter_mut().zip(row_g).zip(row_h) {
                        *d += gv * h;
                    }
                }
                acc(*gamma, dgamma);
                acc(*beta, kernels::column_sum(g, c));
            }
            Op::Lif { x, p, sg, mode, trace } => {
                let t = time_len(val(*x));
                acc(*x, neuron::lif_backward(g, trace, t, p, *sg, *mode));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::MulBlocks { x, factors } => {
                let block = g.len() / factors.len();
                acc(*x, g.iter().enumerate().map(|(i, &v)| v * factors[i / block]).collect());
            }
            Op::Scale { x, c } => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::SumTime(x) => {
                let width = g.len();
                let len = val(*x).len();
                acc(*x, (0..len).map(|i| g[i % width]).collect());
            }
            Op::MulBroadcastTime { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let width = av.len();
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; width];
                    for (i, (&gv, &bval)) in g.iter().zip(bv).enumerate() {
                        da[i % width] += gv * bval;
                    }
                    acc(*a, da);
                }
                acc(*b, g.iter().enumerate().map(|(i, &gv)| gv * av[i % width]).collect());
            }
            Op::WindowSumTime { x, radius } => {
                let t = time_len(val(*x));
                acc(*x, kernels::window_sum_time(g, t, *radius));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::SwapLast2(x) => {
                let s = node.value.shape();
                let n = s.len();
                acc(*x, swap_last2_data(g, s[n - 2], s[n - 1]));
            }
            Op::SliceLast { x, start } => {
                let c = val(*x).last_dim();
                let len = node.value.last_dim();
                let mut dx = vec![0.0; val(*x).len()];
                for (drow, grow) in dx.chunks_mut(c).zip(g.chunks(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                acc(*x, dx);
            }
            Op::ConcatLast(a, b) => {
                let (ca, cb) = (val(*a).last_dim(), val(*b).last_dim());
                let mut da = Vec::with_capacity(val(*a).len());
                let mut db = Vec::with_capacity(val(*b).len());
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::SoftmaxLast(x) => {
                let c = node.value.last_dim();
                let p = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for ((drow, grow), prow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(p.chunks(c)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &pv) in drow.iter_mut().zip(grow).zip(prow) {
                        *d = pv * (gv - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::MaskedTimeSum { x, factors } => {
                let s = val(*x).shape();
                let (t, b, y) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; t * b * y];
                for ti in 0..t {
                    for bi in 0..b {
                        let f = factors[ti * b + bi];
                        let row = &mut dx[(ti * b + bi) * y..(ti * b + bi + 1) * y];
                        for (d, &gv) in row.iter_mut().zip(&g[bi * y..(bi + 1) * y]) {
                            *d = f * gv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::CrossEntropyAccum { yhat, labels } => {
                let yv = val(*yhat);
                let y = yv.shape()[1];
                let b = labels.len() as f64;
                let mut dy = vec![0.0; yv.len()];
                for (bi, &l) in labels.iter().enumerate() {
                    let row = &yv.data()[bi * y..(bi + 1) * y];
                    let total: f64 = row.iter().sum();
                    let drow = &mut dy[bi * y..(bi + 1) * y];
                    for d in drow.iter_mut() {
                        *d = g[0] / (b * total);
                    }
                    drow[l] -= g[0] / (b * row[l]);
                }
                acc(*yhat, dy);
            }
            Op::SumAll(x) => acc(*x, vec![g[0]; val(*x).len()]),
        }
    }
}

fn swap_last2_data(x: &[f64], a: usize, b: usize) -> Vec<f64> {
    let block = a * b;
    let mut out = vec![0.0; x.len()];
    if block == 0 {
        return out;
    }
    for (src, dst) in x.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `build` (which maps leaves to a scalar)
    /// against the tape gradient for every leaf element.
    fn check_grad(leaves: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-4;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.var(vars[li]).unwrap().data().to_vec();
            for e in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut perturbed = leaves.clone();
                    perturbed[li].data_mut()[e] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.into_iter().map(|p| t.constant(p)).collect();
                    let l = build(&mut t, &vs);
                    t.value(l).data()[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "leaf {li}[{e}]: tape {a} vs fd {numeric}");
            }
        }
    }

    /// Weighted sum so that every output element gets a distinct upstream gradient.
    fn weighted(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(tape.shape(v), &mut rng);
        let wv = tape.constant(w);
        let p = tape.mul(v, wv).unwrap();
        tape.sum_all(p)
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        // loss = Σ (x·W) with x fixed: dL/dW[i, j] = x[i]
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.leaf(Tensor::zeros(&[3, 2]));
        let y = tape.linear(x, w, None).unwrap();
        let l = tape.sum_all(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.var(w).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert!(g.var(x).is_none());
    }

    #[test]
    fn disconnected_leaf_gets_zero_or_nothing() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::scalar(5.0));
        let l = tape.sum_all(a);
        let g = tape.backward(l).unwrap();
        assert!(g.var(unused).map_or(true, |t| t.data()[0] == 0.0));
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let l = tape.sum_all(a);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_dimension_error_names_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        match tape.linear(x, w, None) {
            Err(Error::Dimension { axis, expected, actual, .. }) => {
                assert_eq!((axis.as_str(), expected, actual), ("input axis 2", 4, 3));
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn even_depthwise_kernel_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5, 1, 2]));
        let k = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(tape.depthwise_time(x, k, None), Err(Error::Config(_))));
    }

    #[test]
    fn fd_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_grad(
            vec![rand_tensor(&[3, 2, 4], &mut rng), rand_tensor(&[4, 3], &mut rng), rand_tensor(&[3], &mut rng)],
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
                weighted(t, y, 9)
            },
        );
    }

    #[test]
    fn fd_depthwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_grad(
            vec![rand_tensor(&[6, 2, 3], &mut rng), rand_tensor(&[3, 5], &mut rng), rand_tensor(&[3], &mut rng)],
            |t, v| {
                let y = t.depthwise_time(v[0], v[1], Some(v[2])).unwrap();
                weighted(t, y, 10)
            },
        );
    }

    #[test]
    fn fd_batchnorm_train_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![rand_tensor(&[4, 2, 3], &mut rng), rand_tensor(&[3], &mut rng), rand_tensor(&[3], &mut rng)];
        check_grad(leaves.clone(), |t, v| {
            let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5).unwrap();
            weighted(t, y, 11)
        });
        check_grad(leaves, |t, v| {
            let y = t
                .batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0], 1e-5)
                .unwrap();
            weighted(t, y, 12)
        });
    }

    #[test]
    fn fd_softmax_and_accumulated_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check_grad(vec![rand_tensor(&[5, 2, 3], &mut rng)], |t, v| {
            let p = t.softmax_last(v[0]).unwrap();
            let mut mask = vec![1.0; 10];
            mask[8] = 0.0;
            let yhat = t.masked_time_sum(p, mask).unwrap();
            t.cross_entropy_accumulated(yhat, &[2, 0]).unwrap()
        });
    }

    #[test]
    fn fd_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_grad(
            vec![rand_tensor(&[4, 2, 6], &mut rng), rand_tensor(&[1, 2, 3], &mut rng)],
            |t, v| {
                let s = t.sum_time(v[0]).unwrap();
                let s = t.scale(s, 0.7);
                let w = t.window_sum_time(v[0], 1).unwrap();
                let a = t.slice_last(w, 0, 3).unwrap();
                let b = t.slice_last(w, 3, 3).unwrap();
                let ab = t.mul(a, b).unwrap();
                let bc = t.mul_broadcast_time(v[1], ab).unwrap();
                let cat = t.concat_last(bc, a).unwrap();
                let r = t.reshape(cat, &[4, 2, 2, 3]).unwrap();
                let sw = t.swap_last2(r).unwrap();
                let m = t.mul_blocks(sw, (0..8).map(|i| (i % 3) as f64).collect()).unwrap();
                let l1 = weighted(t, m, 13);
                let l2 = weighted(t, s, 14);
                let both = t.add(l1, l2).unwrap();
                t.sum_all(both)
            },
        );
    }

    #[test]
    fn fd_smooth_lif() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check_grad(vec![rand_tensor(&[7, 2, 3], &mut rng)], |t, v| {
            let s = t
                .lif(v[0], LifParams::default(), SurrogateParams::default(), SpikeFn::Smooth)
                .unwrap();
            weighted(t, s, 15)
        });
    }

    #[test]
    fn heaviside_lif_uses_surrogate_with_detached_reset() {
        // single neuron, two steps, no spike at t=0: dS1/dx0 = sg(H1-vth) * (1-1/tau)
        let p = LifParams::default();
        let sg = SurrogateParams::default();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 1], vec![0.1, 0.2]).unwrap());
        let s = tape.lif(x, p, sg, SpikeFn::Heaviside).unwrap();
        let last = tape.slice_last(s, 0, 1).unwrap();
        let w = tape.constant(Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap());
        let picked = tape.mul(last, w).unwrap();
        let l = tape.sum_all(picked);
        let g = tape.backward(l).unwrap();
        let h1 = p.charge(p.charge(p.v_reset, 0.1), 0.2);
        let expected = neuron::surrogate_grad(h1 - p.v_th, sg) * (1.0 - 1.0 / p.tau);
        let got = g.var(x).unwrap().data();
        assert!((got[0] - expected).abs() < 1e-15);
        assert!((got[1] - neuron::surrogate_grad(h1 - p.v_th, sg)).abs() < 1e-15);
    }
}
