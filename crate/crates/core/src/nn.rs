//! Layer primitives built on the tape: linear / pointwise convolution,
//! depthwise temporal convolution, batch normalization, dropout and the
//! `{conv-BN-SN}` projection units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::energy::{fold_bn, FoldLayout};
use crate::error::{Error, Result};
use crate::neuron::{LifParams, SpikeFn, SurrogateParams};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which synaptic operation a traced layer performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Pconv,
    Dconv1d,
    Dconv2dHeads,
    /// Accumulations inside attention (temporal sums, window sums).
    Accumulate,
    /// Hadamard product with a binary attention map.
    Hadamard,
}

/// Module ownership used to group synaptic operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    Conv,
    Mstasa,
}

/// One synaptic layer observed during a traced forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub name: String,
    pub kind: LayerKind,
    pub group: LayerGroup,
    /// Dense MAC count of the layer.
    pub flops: u64,
    /// Nonzero entries in the layer input.
    pub input_nonzero: u64,
    /// Total entries in the layer input.
    pub input_len: u64,
    /// Whether the input is real-valued network input (not spikes).
    pub analog_input: bool,
}

/// Running-statistic update emitted by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub tracked: ParamId,
    pub momentum: f64,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
}

/// Per-pass state threaded through every layer.
pub struct ForwardCtx {
    pub mode: Mode,
    pub spike_fn: SpikeFn,
    pub lif: LifParams,
    pub surrogate: SurrogateParams,
    pub dropout_p: f64,
    rng: ChaCha8Rng,
    pub bn_updates: Vec<BnUpdate>,
    pub trace: Option<Vec<LayerTrace>>,
}

impl ForwardCtx {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            spike_fn: SpikeFn::Heaviside,
            lif: LifParams::default(),
            surrogate: SurrogateParams::default(),
            dropout_p: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
            trace: None,
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn train(seed: u64, dropout_p: f64) -> Self {
        Self {
            dropout_p,
            ..Self::new(Mode::Train, seed)
        }
    }

    pub fn with_spike_fn(mut self, f: SpikeFn) -> Self {
        self.spike_fn = f;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn spike(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.lif(x, self.lif, self.surrogate, self.spike_fn)
    }

    /// Inverted dropout in train mode; identity otherwise.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.dropout_p;
        if self.mode != Mode::Train || p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = tape.value(x).len();
        let factors = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        tape.mul_blocks(x, factors)
    }

    pub(crate) fn record(&mut self, tape: &Tape, input: Var, name: &str, kind: LayerKind, group: LayerGroup, flops: u64) {
        self.record_input(tape, input, name, kind, group, flops, false);
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn record_input(
        &mut self,
        tape: &Tape,
        input: Var,
        name: &str,
        kind: LayerKind,
        group: LayerGroup,
        flops: u64,
        analog_input: bool,
    ) {
        if let Some(trace) = self.trace.as_mut() {
            let v = tape.value(input);
            trace.push(LayerTrace {
                name: name.to_string(),
                kind,
                group,
                flops,
                input_nonzero: v.count_nonzero() as u64,
                input_len: v.len() as u64,
                analog_input,
            });
        }
    }
}

/// Fully connected map over the channel axis. Pointwise (kernel-1)
/// convolution is the same operation.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[din, dout], din, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[dout]), ParamKind::NoDecay));
        Self {
            name: name.to_string(),
            weight,
            bias,
            din,
            dout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }

    /// MAC count for an input with `rows` positions.
    pub fn flops(&self, rows: usize) -> u64 {
        (rows * self.din * self.dout) as u64
    }

    /// Fold a following eval-mode batch norm into this layer.
    pub fn absorb_bn(&mut self, store: &mut ParamStore, bn: &mut BatchNorm) -> Result<()> {
        absorb(store, &self.name, self.weight, &mut self.bias, bn, FoldLayout::OutputLast)
    }
}

fn absorb(
    store: &mut ParamStore,
    name: &str,
    weight: ParamId,
    bias: &mut Option<ParamId>,
    bn: &mut BatchNorm,
    layout: FoldLayout,
) -> Result<()> {
    if bn.folded {
        return Ok(());
    }
    if store.get(bn.tracked).data()[0] <= 0.0 {
        return Err(Error::Config(format!(
            "{}: cannot fold a batch norm without running statistics",
            bn.name
        )));
    }
    let (w, b) = fold_bn(
        store.get(weight),
        bias.map(|b| store.get(b)),
        &bn.state(store, Mode::Eval),
        layout,
    )?;
    *store.get_mut(weight) = w;
    match *bias {
        Some(id) => *store.get_mut(id) = b,
        None => *bias = Some(store.add(format!("{name}.bias"), b, ParamKind::NoDecay)),
    }
    // absorbed affine parameters no longer take part in the forward pass
    store.set_kind(bn.gamma, ParamKind::Buffer);
    store.set_kind(bn.beta, ParamKind::Buffer);
    bn.folded = true;
    Ok(())
}

/// Depthwise convolution along time with same padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub name: String,
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub channels: usize,
    pub ksize: usize,
}

impl DepthwiseConv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        ksize: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if ksize % 2 == 0 {
            return Err(Error::Config(format!("{name}: kernel size must be odd, got {ksize}")));
        }
        let kernel = store.add_uniform(format!("{name}.weight"), &[channels, ksize], ksize, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), ParamKind::NoDecay));
        Ok(Self {
            name: name.to_string(),
            kernel,
            bias,
            channels,
            ksize,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.depthwise_time(x, k, b)
    }

    /// MAC count for an input of `len` elements.
    pub fn flops(&self, len: usize) -> u64 {
        (len * self.ksize) as u64
    }

    /// Fold a following eval-mode batch norm into this layer.
    pub fn absorb_bn(&mut self, store: &mut ParamStore, bn: &mut BatchNorm) -> Result<()> {
        absorb(store, &self.name, self.kernel, &mut self.bias, bn, FoldLayout::OutputFirst)
    }
}

/// Standalone view of a batch-norm layer's state.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: Mode,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode: Mode::Train,
        }
    }

    /// Per-channel `(scale, shift)` of the eval-mode affine map.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = scale
            .iter()
            .zip(&self.running_mean)
            .zip(&self.beta)
            .map(|((s, m), b)| b - s * m)
            .collect();
        (scale, shift)
    }

    /// Normalize `x` (`[…, C]`). Train mode uses batch statistics over every
    /// leading axis and updates the running averages.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let c = self.gamma.len();
        if x.last_dim() != c {
            return Err(crate::error::dim_err("batchnorm", "channel", c, x.last_dim()));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::new(&[c], self.gamma.clone())?);
        let b = tape.constant(Tensor::new(&[c], self.beta.clone())?);
        let out = match self.mode {
            Mode::Train => {
                let (out, stats) = tape.batchnorm_train(xv, g, b, self.eps)?;
                let n = stats.count as f64;
                for ch in 0..c {
                    let unbiased = stats.var[ch] * n / (n - 1.0);
                    self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * stats.mean[ch];
                    self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
                }
                out
            }
            Mode::Eval => tape.batchnorm_eval(xv, g, b, &self.running_mean, &self.running_var, self.eps)?,
        };
        Ok(tape.value(out).clone())
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over the channel axis with running statistics kept
/// as buffers in the parameter store.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Scalar buffer counting recorded batches; eval requires it to be > 0.
    pub tracked: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    /// Set once the layer has been absorbed into the preceding linear map.
    pub folded: bool,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), ParamKind::NoDecay);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::NoDecay);
        let running_mean = store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer);
        let running_var = store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), ParamKind::Buffer);
        let tracked = store.add(format!("{name}.tracked"), Tensor::scalar(0.0), ParamKind::Buffer);
        Self {
            name: name.to_string(),
            gamma,
            beta,
            running_mean,
            running_var,
            tracked,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            folded: false,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        if self.folded {
            return Ok(x);
        }
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match ctx.mode {
            Mode::Train => {
                let (out, stats) = tape.batchnorm_train(x, g, b, self.eps)?;
                let n = stats.count as f64;
                ctx.bn_updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    tracked: self.tracked,
                    momentum: self.momentum,
                    batch_mean: stats.mean,
                    batch_var: stats.var.iter().map(|v| v * n / (n - 1.0)).collect(),
                });
                Ok(out)
            }
            Mode::Eval => {
                if store.get(self.tracked).data()[0] <= 0.0 {
                    return Err(Error::Config(format!(
                        "{}: eval-mode batch norm before any statistics were recorded",
                        self.name
                    )));
                }
                tape.batchnorm_eval(
                    x,
                    g,
                    b,
                    store.get(self.running_mean).data(),
                    store.get(self.running_var).data(),
                    self.eps,
                )
            }
        }
    }

    pub fn state(&self, store: &ParamStore, mode: Mode) -> BatchNormState {
        BatchNormState {
            gamma: store.get(self.gamma).data().to_vec(),
            beta: store.get(self.beta).data().to_vec(),
            running_mean: store.get(self.running_mean).data().to_vec(),
            running_var: store.get(self.running_var).data().to_vec(),
            eps: self.eps,
            momentum: self.momentum,
            mode,
        }
    }

    /// Mark running statistics as usable without training (mean 0, var 1
    /// unless already set).
    pub fn init_running_stats(&self, store: &mut ParamStore) {
        let t = store.get_mut(self.tracked);
        if t.data()[0] <= 0.0 {
            t.data_mut()[0] = 1.0;
        }
    }

}

/// Mark every batch-norm layer in `store` as having usable running
/// statistics.
pub fn init_all_running_stats(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".tracked")).collect();
    for id in ids {
        let t = store.get_mut(id);
        if t.data()[0] <= 0.0 {
            t.data_mut()[0] = 1.0;
        }
    }
}

/// Apply running-statistic updates collected during a train-mode pass.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, &b) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
        store.get_mut(u.tracked).data_mut()[0] += 1.0;
    }
}

/// `{PConv/Linear-BN-SN}` unit.
#[derive(Clone, Debug)]
pub struct ProjectionBlock {
    pub linear: Linear,
    pub bn: BatchNorm,
    pub kind: LayerKind,
    pub group: LayerGroup,
}

impl ProjectionBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        kind: LayerKind,
        group: LayerGroup,
        rng: &mut R,
    ) -> Self {
        let linear = Linear::new(store, &format!("{name}.conv"), din, dout, false, rng);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), dout);
        Self { linear, bn, kind, group }
    }

    /// Pre-spike activation `BN(W·x)` with dropout applied in train mode.
    pub fn pre_activation(&self, tape: &mut Tape, store: &ParamStore, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        let rows = tape.value(x).rows();
        ctx.record(tape, x, &self.linear.name, self.kind, self.group, self.linear.flops(rows));
        let y = self.linear.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, ctx, y)?;
        ctx.dropout(tape, y)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        let y = self.pre_activation(tape, store, ctx, x)?;
        ctx.spike(tape, y)
    }

    pub fn fold(&mut self, store: &mut ParamStore) -> Result<()> {
        self.linear.absorb_bn(store, &mut self.bn)
    }
}

/// `{DConv-BN-SN}` unit.
#[derive(Clone, Debug)]
pub struct DepthwiseBlock {
    pub conv: DepthwiseConv,
    pub bn: BatchNorm,
}

impl DepthwiseBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, ksize: usize, rng: &mut R) -> Result<Self> {
        let conv = DepthwiseConv::new(store, &format!("{name}.conv"), channels, ksize, false, rng)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), channels);
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        let len = tape.value(x).len();
        ctx.record(tape, x, &self.conv.name, LayerKind::Dconv1d, LayerGroup::Conv, self.conv.flops(len));
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, ctx, y)?;
        ctx.spike(tape, y)
    }

    pub fn fold(&mut self, store: &mut ParamStore) -> Result<()> {
        self.conv.absorb_bn(store, &mut self.bn)
    }
}
