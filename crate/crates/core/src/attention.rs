//! Spiking temporal-aware self-attention.
//!
//! Queries and keys are summed over time (globally, or over a centered
//! window of `2w + 1` steps), scaled, re-spiked, and used as a binary gate on
//! the value spikes. Cost is linear in the sequence length. The multi-view
//! block fuses the windowed branch, the global branch and a convolutional
//! value branch.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{BatchNorm, DepthwiseConv, ForwardCtx, LayerGroup, LayerKind, Linear, ProjectionBlock};
use crate::params::ParamStore;
use crate::tensor::{SpikeTensor, Tensor};

/// Temporal kernel of the value branch.
pub const V_BRANCH_KERNEL: usize = 9;

/// How the windowed branch spikes its per-step scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwaNeuron {
    /// Every step is evaluated from the reset potential, independently of
    /// its neighbours.
    #[default]
    PerStep,
    /// Membrane state carries across steps.
    Temporal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub hidden: usize,
    pub heads: usize,
    pub window_radius: usize,
    /// Configured (padded) sequence length; fixes `β_global`.
    pub time_steps: usize,
    pub swa_neuron: SwaNeuron,
}

impl AttentionConfig {
    pub fn new(hidden: usize, heads: usize, window_radius: usize, time_steps: usize) -> Result<Self> {
        let cfg = Self {
            hidden,
            heads,
            window_radius,
            time_steps,
            swa_neuron: SwaNeuron::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by head count {}",
                self.hidden, self.heads
            )));
        }
        if self.window_radius < 1 {
            return Err(Error::Config("window radius must be >= 1".into()));
        }
        if self.time_steps == 0 {
            return Err(Error::Config("time steps must be >= 1".into()));
        }
        if 2 * self.window_radius + 1 > (2 * self.time_steps).max(3) {
            return Err(Error::Config(format!(
                "window radius {} exceeds the sequence length {}",
                self.window_radius, self.time_steps
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// `1 / √(D_h · T)`
    pub fn beta_global(&self) -> f64 {
        1.0 / ((self.head_dim() * self.time_steps) as f64).sqrt()
    }

    /// `1 / √(D_h · (2w + 1))`
    pub fn beta_local(&self) -> f64 {
        1.0 / ((self.head_dim() * (2 * self.window_radius + 1)) as f64).sqrt()
    }
}

/// Default window radius for a sequence length: `T / 5`, rounded.
pub fn default_window_radius(time_steps: usize) -> usize {
    ((time_steps as f64 / 5.0).round() as usize).max(1)
}

/// Per-sample validity of each time step; padding always follows real data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalMask {
    steps: usize,
    lengths: Vec<usize>,
}

impl TemporalMask {
    pub fn all_valid(steps: usize, batch: usize) -> Self {
        Self {
            steps,
            lengths: vec![steps; batch],
        }
    }

    /// Mask valid on the first `lengths[b]` steps of each sample.
    pub fn from_lengths(steps: usize, lengths: &[usize]) -> Result<Self> {
        if let Some(&l) = lengths.iter().find(|&&l| l > steps) {
            return Err(Error::Input(format!("valid length {l} exceeds {steps} steps")));
        }
        Ok(Self {
            steps,
            lengths: lengths.to_vec(),
        })
    }

    /// Build from explicit `[t][b]` flags; rejects non-prefix patterns.
    pub fn from_flags(flags: &[Vec<bool>]) -> Result<Self> {
        let steps = flags.len();
        let batch = flags.first().map_or(0, |r| r.len());
        let mut lengths = vec![0; batch];
        for (b, len) in lengths.iter_mut().enumerate() {
            let col: Vec<bool> = flags.iter().map(|r| r[b]).collect();
            *len = col.iter().take_while(|&&v| v).count();
            if col[*len..].iter().any(|&v| v) {
                return Err(Error::Input(format!("mask for sample {b} is not a prefix pattern")));
            }
        }
        Ok(Self { steps, lengths })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn is_valid(&self, t: usize, b: usize) -> bool {
        t < self.lengths[b]
    }

    /// Time-major `[T × B]` factors (1 valid, 0 padding).
    pub fn factors(&self) -> Vec<f64> {
        let b = self.batch();
        (0..self.steps * b)
            .map(|i| if self.is_valid(i / b, i % b) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Pad every sample with `extra` invalid steps.
    pub fn extended(&self, extra: usize) -> Self {
        Self {
            steps: self.steps + extra,
            lengths: self.lengths.clone(),
        }
    }

    fn check(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if shape.len() < 2 {
            return Err(dim_err(op, "rank", 3, shape.len()));
        }
        if shape[0] != self.steps {
            return Err(dim_err(op, "time", self.steps, shape[0]));
        }
        if shape[1] != self.batch() {
            return Err(dim_err(op, "batch", self.batch(), shape[1]));
        }
        Ok(())
    }
}

/// Zero query/key entries at padded steps.
pub fn mask_on_tape(tape: &mut Tape, x: Var, mask: &TemporalMask) -> Result<Var> {
    mask.check("temporal mask", tape.shape(x))?;
    tape.mul_blocks(x, mask.factors())
}

fn spike_maybe_per_step(tape: &mut Tape, ctx: &ForwardCtx, x: Var, mode: SwaNeuron) -> Result<Var> {
    match mode {
        SwaNeuron::Temporal => ctx.spike(tape, x),
        SwaNeuron::PerStep => {
            let shape = tape.shape(x).to_vec();
            let flat = tape.reshape(x, &[1, shape.iter().product()])?;
            let s = ctx.spike(tape, flat)?;
            tape.reshape(s, &shape)
        }
    }
}

/// Long-range branch: `SN(β_global · (Σ_t Q' + Σ_t K')) ⊙ V`, one attention
/// vector per sample broadcast across all steps.
pub fn global_branch(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    name: &str,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let n = tape.value(q).len() as u64;
    ctx.record(tape, q, &format!("{name}.global.q_sum"), LayerKind::Accumulate, LayerGroup::Mstasa, n);
    let qs = tape.sum_time(q)?;
    ctx.record(tape, k, &format!("{name}.global.k_sum"), LayerKind::Accumulate, LayerGroup::Mstasa, n);
    let ks = tape.sum_time(k)?;
    let s = tape.add(qs, ks)?;
    let s = tape.scale(s, cfg.beta_global());
    let map = ctx.spike(tape, s)?;
    let flops = tape.value(v).len() as u64;
    ctx.record(tape, map, &format!("{name}.global.gate"), LayerKind::Hadamard, LayerGroup::Mstasa, flops);
    tape.mul_broadcast_time(map, v)
}

/// Windowed branch: `SN(scale · (Q_sum + K_sum)) ⊙ V` with window sums over
/// `[t − w, t + w]`, zeros beyond either end.
#[allow(clippy::too_many_arguments)]
pub fn window_branch(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    name: &str,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
    scale: f64,
) -> Result<Var> {
    let w = cfg.window_radius;
    let n = tape.value(q).len() as u64 * (2 * w as u64 + 1);
    ctx.record(tape, q, &format!("{name}.window.q_sum"), LayerKind::Accumulate, LayerGroup::Mstasa, n);
    let qs = tape.window_sum_time(q, w)?;
    ctx.record(tape, k, &format!("{name}.window.k_sum"), LayerKind::Accumulate, LayerGroup::Mstasa, n);
    let ks = tape.window_sum_time(k, w)?;
    let s = tape.add(qs, ks)?;
    let s = tape.scale(s, scale);
    let map = spike_maybe_per_step(tape, ctx, s, cfg.swa_neuron)?;
    let flops = tape.value(v).len() as u64;
    ctx.record(tape, map, &format!("{name}.window.gate"), LayerKind::Hadamard, LayerGroup::Mstasa, flops);
    tape.mul(map, v)
}

fn check_qkv(q: &SpikeTensor, k: &SpikeTensor, v: &SpikeTensor, cfg: &AttentionConfig) -> Result<()> {
    let s = q.shape();
    if s.len() != 3 {
        return Err(dim_err("attention", "rank", 3, s.len()));
    }
    if s[2] != cfg.hidden {
        return Err(dim_err("attention", "channel", cfg.hidden, s[2]));
    }
    k.as_tensor().expect_shape("attention key", s)?;
    v.as_tensor().expect_shape("attention value", s)?;
    Ok(())
}

fn run_branch(
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    cfg: &AttentionConfig,
    f: impl FnOnce(&mut Tape, &mut ForwardCtx, Var, Var, Var) -> Result<Var>,
) -> Result<(SpikeTensor, u64)> {
    check_qkv(q, k, v, cfg)?;
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval().with_trace();
    let (qv, kv, vv) = (
        tape.constant(q.as_tensor().clone()),
        tape.constant(k.as_tensor().clone()),
        tape.constant(v.as_tensor().clone()),
    );
    let out = f(&mut tape, &mut ctx, qv, kv, vv)?;
    let ops = ctx.trace.unwrap_or_default().iter().map(|l| l.flops).sum();
    Ok((SpikeTensor::try_from(tape.value(out).clone())?, ops))
}

/// Zero the entries of a query/key tensor at padded steps.
pub fn apply_temporal_mask(x: &SpikeTensor, mask: &TemporalMask) -> Result<SpikeTensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.as_tensor().clone());
    let out = mask_on_tape(&mut tape, v, mask)?;
    SpikeTensor::try_from(tape.value(out).clone())
}

/// Global STASA on already-masked queries and keys.
pub fn stasa_global(q: &SpikeTensor, k: &SpikeTensor, v: &SpikeTensor, cfg: &AttentionConfig) -> Result<SpikeTensor> {
    stasa_global_counted(q, k, v, cfg).map(|(s, _)| s)
}

/// [`stasa_global`] plus the number of accumulate operations it performed
/// (temporal sums and the gating product).
pub fn stasa_global_counted(
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    cfg: &AttentionConfig,
) -> Result<(SpikeTensor, u64)> {
    run_branch(q, k, v, cfg, |t, c, q, k, v| global_branch(t, c, "stasa", q, k, v, cfg))
}

/// Sliding-window STASA with `β_local`.
pub fn stasa_swa(q: &SpikeTensor, k: &SpikeTensor, v: &SpikeTensor, cfg: &AttentionConfig) -> Result<SpikeTensor> {
    stasa_swa_scaled(q, k, v, cfg, cfg.beta_local())
}

/// Sliding-window STASA with an explicit score scale.
pub fn stasa_swa_scaled(
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    cfg: &AttentionConfig,
    scale: f64,
) -> Result<SpikeTensor> {
    run_branch(q, k, v, cfg, |t, c, q, k, v| window_branch(t, c, "stasa", q, k, v, cfg, scale)).map(|(s, _)| s)
}

/// Depthwise temporal convolution followed by a pointwise mix over the head
/// axis. `v` is `[T, B, H, D_h]`, `kernel` is `[H, 9]`, `mix` is `[H, H]`;
/// every head shares its temporal filter across its `D_h` positions.
pub fn conv2d_depthwise_heads(tape: &mut Tape, v: Var, kernel: Var, mix: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 4 {
        return Err(dim_err("conv2d_depthwise_heads", "rank", 4, s.len()));
    }
    let heads = tape.shape(kernel)[0];
    if s[2] != heads {
        return Err(dim_err("conv2d_depthwise_heads", "heads", heads, s[2]));
    }
    let per_head = tape.swap_last2(v)?;
    let conv = tape.depthwise_time(per_head, kernel, None)?;
    let mixed = tape.linear(conv, mix, None)?;
    tape.swap_last2(mixed)
}

/// Convolutional value branch: `{DConv(9×1)+PConv over heads}-BN-SN`.
#[derive(Clone, Debug)]
pub struct VBranch {
    pub dw: DepthwiseConv,
    pub mix: Linear,
    pub bn: BatchNorm,
    pub heads: usize,
}

impl VBranch {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            dw: DepthwiseConv::new(store, &format!("{name}.dw"), heads, V_BRANCH_KERNEL, false, rng)?,
            mix: Linear::new(store, &format!("{name}.pw"), heads, heads, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), heads),
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ctx: &mut ForwardCtx, v: Var) -> Result<Var> {
        let s = tape.shape(v).to_vec();
        let (t, b, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let len = tape.value(v).len();
        let flops = self.dw.flops(len) + (len * self.heads) as u64;
        ctx.record(tape, v, &self.dw.name, LayerKind::Dconv2dHeads, LayerGroup::Mstasa, flops);
        let v4 = tape.reshape(v, &[t, b, self.heads, dh])?;
        // [T, B, Dh, H] with heads as channels
        let per_head = tape.swap_last2(v4)?;
        let conv = self.dw.forward(tape, store, per_head)?;
        let mixed = self.mix.forward(tape, store, conv)?;
        let normed = self.bn.forward(tape, store, ctx, mixed)?;
        let spikes = ctx.spike(tape, normed)?;
        let back = tape.swap_last2(spikes)?;
        tape.reshape(back, &[t, b, d])
    }

    pub fn fold(&mut self, store: &mut ParamStore) -> Result<()> {
        self.mix.absorb_bn(store, &mut self.bn)
    }
}

/// Multi-view STASA block.
#[derive(Clone, Debug)]
pub struct Mstasa {
    pub name: String,
    pub q: ProjectionBlock,
    pub k: ProjectionBlock,
    pub v: ProjectionBlock,
    pub v_branch: VBranch,
    pub dual: ProjectionBlock,
    pub merge: ProjectionBlock,
    pub cfg: AttentionConfig,
}

/// Intermediate tensors of one MSTASA evaluation.
pub struct MstasaParts {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub window: Var,
    pub global: Var,
    pub value_conv: Var,
    pub out: Var,
}

impl Mstasa {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let proj = |store: &mut ParamStore, n: &str, rng: &mut R| {
            ProjectionBlock::new(store, &format!("{name}.{n}"), d, d, LayerKind::Pconv, LayerGroup::Mstasa, rng)
        };
        Ok(Self {
            name: name.to_string(),
            q: proj(store, "q", rng),
            k: proj(store, "k", rng),
            v: proj(store, "v", rng),
            v_branch: VBranch::new(store, &format!("{name}.v_branch"), cfg.heads, rng)?,
            dual: proj(store, "dual", rng),
            merge: proj(store, "merge", rng),
            cfg,
        })
    }

    /// Shared query/key/value spikes.
    pub fn qkv(&self, tape: &mut Tape, store: &ParamStore, ctx: &mut ForwardCtx, x: Var) -> Result<(Var, Var, Var)> {
        Ok((
            self.q.forward(tape, store, ctx, x)?,
            self.k.forward(tape, store, ctx, x)?,
            self.v.forward(tape, store, ctx, x)?,
        ))
    }

    pub fn forward_parts(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        x: Var,
        mask: &TemporalMask,
    ) -> Result<MstasaParts> {
        let (q, k, v) = self.qkv(tape, store, ctx, x)?;
        let qm = mask_on_tape(tape, q, mask)?;
        let km = mask_on_tape(tape, k, mask)?;
        let window = window_branch(tape, ctx, &self.name, qm, km, v, &self.cfg, self.cfg.beta_local())?;
        let global = global_branch(tape, ctx, &self.name, qm, km, v, &self.cfg)?;
        let value_conv = self.v_branch.forward(tape, store, ctx, v)?;
        let fused = tape.add(window, global)?;
        let dual = self.dual.forward(tape, store, ctx, fused)?;
        let merged_in = tape.add(dual, value_conv)?;
        let out = self.merge.forward(tape, store, ctx, merged_in)?;
        Ok(MstasaParts {
            q,
            k,
            v,
            window,
            global,
            value_conv,
            out,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        x: Var,
        mask: &TemporalMask,
    ) -> Result<Var> {
        Ok(self.forward_parts(tape, store, ctx, x, mask)?.out)
    }

    /// Fold every batch norm into its preceding linear map.
    pub fn fold(&mut self, store: &mut ParamStore) -> Result<()> {
        for p in [&mut self.q, &mut self.k, &mut self.v, &mut self.dual, &mut self.merge] {
            p.fold(store)?;
        }
        self.v_branch.fold(store)
    }
}

/// Convenience: wrap a tensor known to be binary.
pub fn spikes(t: Tensor) -> Result<SpikeTensor> {
    SpikeTensor::try_from(t)
}
