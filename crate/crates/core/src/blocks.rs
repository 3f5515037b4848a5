//! The full network: spiking embedding extractor, residual blocks of
//! multi-view attention and contextual-refinement MLP, and a per-step linear
//! classifier whose softmax outputs are accumulated over time.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{default_window_radius, AttentionConfig, Mstasa, SwaNeuron, TemporalMask};
use crate::autodiff::{Tape, Var};
use crate::energy::{EnergyReport, LayerCost};
use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::nn::{
    init_all_running_stats, BatchNorm, DepthwiseBlock, DepthwiseConv, ForwardCtx, LayerGroup, LayerKind, Linear,
    ProjectionBlock,
};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Kernel of the embedding extractor's depthwise convolution.
pub const SEE_KERNEL: usize = 7;
/// Kernel of the MLP's depthwise convolution.
pub const SCR_KERNEL: usize = 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    #[default]
    Spike,
    Analog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub heads: usize,
    pub hidden: usize,
    pub input_neurons: usize,
    pub window_radius: usize,
    pub time_steps: usize,
    pub expansion: usize,
    pub classes: usize,
    pub dropout: f64,
    pub input_kind: InputKind,
    pub swa_neuron: SwaNeuron,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 1,
            heads: 8,
            hidden: 128,
            input_neurons: 140,
            window_radius: default_window_radius(100),
            time_steps: 100,
            expansion: 4,
            classes: 20,
            dropout: 0.1,
            input_kind: InputKind::Spike,
            swa_neuron: SwaNeuron::PerStep,
        }
    }
}

impl ModelConfig {
    /// `nL-h-d` shorthand with the remaining fields at their defaults.
    pub fn sized(blocks: usize, heads: usize, hidden: usize) -> Self {
        Self {
            blocks,
            heads,
            hidden,
            ..Self::default()
        }
    }

    /// Small SHD model (1L-8-128, 20 classes) at the size published for it;
    /// that size is reached with an MLP expansion of 1.
    pub fn shd_small() -> Self {
        Self {
            expansion: 1,
            ..Self::sized(1, 8, 128)
        }
    }

    /// Large SSC model (2L-16-256, 35 classes).
    pub fn ssc_large() -> Self {
        Self {
            classes: 35,
            ..Self::sized(2, 16, 256)
        }
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        let mut a = AttentionConfig::new(self.hidden, self.heads, self.window_radius, self.time_steps)?;
        a.swa_neuron = self.swa_neuron;
        Ok(a)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.expansion * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("model.blocks must be >= 1".into()));
        }
        if self.input_neurons == 0 {
            return Err(Error::Config("model.input_neurons must be >= 1".into()));
        }
        if self.expansion == 0 || self.mlp_hidden() % 2 != 0 {
            return Err(Error::Config(format!(
                "model.expansion × model.hidden = {} must be even and nonzero",
                self.mlp_hidden()
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("model.classes must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", self.dropout)));
        }
        self.attention()?;
        Ok(())
    }
}

/// Spiking embedding extractor.
#[derive(Clone, Debug)]
pub struct See {
    pub pconv: Linear,
    pub dconv: DepthwiseConv,
    pub bn: BatchNorm,
    pub linear: ProjectionBlock,
}

impl See {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.hidden;
        Ok(Self {
            pconv: Linear::new(store, "see.pconv", cfg.input_neurons, d, false, rng),
            dconv: DepthwiseConv::new(store, "see.dconv", d, SEE_KERNEL, false, rng)?,
            bn: BatchNorm::new(store, "see.bn", d),
            linear: ProjectionBlock::new(store, "see.linear", d, d, LayerKind::Linear, LayerGroup::Conv, rng),
        })
    }

    /// Returns `(X′, X″)`; `X″ = SN(BN(Linear(X′))) + X′` takes values in {0, 1, 2}.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        x: Var,
        analog: bool,
    ) -> Result<(Var, Var)> {
        let rows = tape.value(x).rows();
        let hidden_len = rows * self.dconv.channels;
        // pointwise and depthwise run as one fused stage on the network input
        ctx.record_input(tape, x, &self.pconv.name, LayerKind::Pconv, LayerGroup::Conv, self.pconv.flops(rows), analog);
        ctx.record_input(
            tape,
            x,
            &self.dconv.name,
            LayerKind::Dconv1d,
            LayerGroup::Conv,
            self.dconv.flops(hidden_len),
            analog,
        );
        let y = self.pconv.forward(tape, store, x)?;
        let y = self.dconv.forward(tape, store, y)?;
        let y = self.bn.forward(tape, store, ctx, y)?;
        let x1 = ctx.spike(tape, y)?;
        let x2 = self.linear.forward(tape, store, ctx, x1)?;
        let out = tape.add(x2, x1)?;
        Ok((x1, out))
    }

    fn fold(&mut self, store: &mut ParamStore) -> Result<()> {
        self.dconv.absorb_bn(store, &mut self.bn)?;
        self.linear.fold(store)
    }
}

/// Spiking contextual-refinement MLP (inverted bottleneck with a temporal
/// depthwise convolution on half of the expanded channels).
#[derive(Clone, Debug)]
pub struct ScrMlp {
    pub pre_pc: ProjectionBlock,
    pub pre_lin: ProjectionBlock,
    pub dc: DepthwiseBlock,
    pub post_lin: ProjectionBlock,
    pub post_pc: ProjectionBlock,
    pub hidden: usize,
}

impl ScrMlp {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, h) = (cfg.hidden, cfg.mlp_hidden());
        if h % 2 != 0 {
            return Err(Error::Config(format!("MLP width {h} cannot be split evenly")));
        }
        let g = LayerGroup::Conv;
        Ok(Self {
            pre_pc: ProjectionBlock::new(store, &format!("{name}.pre_pc"), d, d, LayerKind::Pconv, g, rng),
            pre_lin: ProjectionBlock::new(store, &format!("{name}.pre_lin"), d, h, LayerKind::Linear, g, rng),
            dc: DepthwiseBlock::new(store, &format!("{name}.dc"), h / 2, SCR_KERNEL, rng)?,
            post_lin: ProjectionBlock::new(store, &format!("{name}.post_lin"), h, d, LayerKind::Linear, g, rng),
            post_pc: ProjectionBlock::new(store, &format!("{name}.post_pc"), d, d, LayerKind::Pconv, g, rng),
            hidden: h,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        let half = self.hidden / 2;
        let y = self.pre_pc.forward(tape, store, ctx, x)?;
        let y = self.pre_lin.forward(tape, store, ctx, y)?;
        let h1 = tape.slice_last(y, 0, half)?;
        let h2 = tape.slice_last(y, half, half)?;
        let h1 = self.dc.forward(tape, store, ctx, h1)?;
        let y = tape.concat_last(h1, h2)?;
        let y = self.post_lin.forward(tape, store, ctx, y)?;
        self.post_pc.forward(tape, store, ctx, y)
    }

    fn fold(&mut self, store: &mut ParamStore) -> Result<()> {
        self.pre_pc.fold(store)?;
        self.pre_lin.fold(store)?;
        self.dc.fold(store)?;
        self.post_lin.fold(store)?;
        self.post_pc.fold(store)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub mstasa: Mstasa,
    pub mlp: ScrMlp,
}

/// Tensors exposed by [`SpikCommander::forward_parts`].
pub struct ForwardParts {
    pub see: Var,
    pub blocks: Vec<Var>,
    pub scores: Var,
}

#[derive(Clone, Debug)]
pub struct SpikCommander {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub see: See,
    pub blocks: Vec<Block>,
    pub head: Linear,
    folded: bool,
}

impl SpikCommander {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let see = See::new(&mut store, &config, &mut rng)?;
        let att = config.attention()?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let mstasa = Mstasa::new(&mut store, &format!("blocks.{i}.mstasa"), att, &mut rng)?;
            let mlp = ScrMlp::new(&mut store, &format!("blocks.{i}.mlp"), &config, &mut rng)?;
            blocks.push(Block { mstasa, mlp });
        }
        let head = Linear::new(&mut store, "head", config.hidden, config.classes, true, &mut rng);
        Ok(Self {
            config,
            store,
            see,
            blocks,
            head,
            folded: false,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn is_folded(&self) -> bool {
        self.folded
    }

    fn check_input(&self, x: &Tensor, mask: &TemporalMask) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(dim_err("model input", "rank", 3, s.len()));
        }
        if s[2] != self.config.input_neurons {
            return Err(dim_err("model input", "axis 2 (neurons)", self.config.input_neurons, s[2]));
        }
        if mask.steps() != s[0] || mask.batch() != s[1] {
            return Err(dim_err("model input", "mask", s[0] * s[1], mask.steps() * mask.batch()));
        }
        if self.config.input_kind == InputKind::Spike && !x.is_binary() {
            return Err(Error::Input("spike-input model received non-binary input".into()));
        }
        if !x.all_finite() {
            return Err(Error::Input("model input contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn forward_parts(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        x: Var,
        mask: &TemporalMask,
    ) -> Result<ForwardParts> {
        self.check_input(tape.value(x), mask)?;
        let store = &self.store;
        let analog = self.config.input_kind == InputKind::Analog;
        let (_, see) = self.see.forward(tape, store, ctx, x, analog)?;
        let mut h = see;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let a = b.mstasa.forward(tape, store, ctx, h, mask)?;
            h = tape.add(h, a)?;
            let m = b.mlp.forward(tape, store, ctx, h)?;
            h = tape.add(h, m)?;
            outs.push(h);
        }
        let rows = tape.value(h).rows();
        ctx.record(tape, h, &self.head.name, LayerKind::Linear, LayerGroup::Conv, self.head.flops(rows));
        let scores = self.head.forward(tape, store, h)?;
        Ok(ForwardParts {
            see,
            blocks: outs,
            scores,
        })
    }

    /// Per-step class scores `[T, B, Y]`.
    pub fn forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, x: Var, mask: &TemporalMask) -> Result<Var> {
        Ok(self.forward_parts(tape, ctx, x, mask)?.scores)
    }

    /// Scores for a batch in eval mode.
    pub fn scores(&self, x: &Tensor, mask: &TemporalMask) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &mut ForwardCtx::eval(), xv, mask)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, x: &Tensor, mask: &TemporalMask) -> Result<Classification> {
        classify(&self.scores(x, mask)?, Some(mask))
    }

    /// Accumulated softmax outputs and mean cross-entropy on the tape.
    pub fn loss(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        x: Var,
        mask: &TemporalMask,
        labels: &[usize],
    ) -> Result<(Var, Var)> {
        let scores = self.forward(tape, ctx, x, mask)?;
        let probs = tape.softmax_last(scores)?;
        let yhat = tape.masked_time_sum(probs, mask.factors())?;
        let loss = tape.cross_entropy_accumulated(yhat, labels)?;
        Ok((loss, yhat))
    }

    /// Mark running statistics usable without training (for inspection of
    /// freshly built models).
    pub fn init_running_stats(&mut self) {
        init_all_running_stats(&mut self.store);
    }

    /// Fold every batch norm into its preceding linear map for inference.
    pub fn fold_bn(&mut self) -> Result<()> {
        if self.folded {
            return Ok(());
        }
        self.see.fold(&mut self.store)?;
        for b in &mut self.blocks {
            b.mstasa.fold(&mut self.store)?;
            b.mlp.fold(&mut self.store)?;
        }
        self.folded = true;
        Ok(())
    }

    /// Operation counts and energy of one eval pass over `x`.
    pub fn estimate_energy(&self, x: &Tensor, mask: &TemporalMask) -> Result<EnergyReport> {
        if !self.folded {
            return Err(Error::Config("energy profiling needs batch norm folded first".into()));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx::eval().with_trace();
        self.forward(&mut tape, &mut ctx, xv, mask)?;
        let layers = ctx.trace.unwrap_or_default().iter().map(LayerCost::from_trace).collect();
        Ok(EnergyReport::from_layers(layers))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&encode_checkpoint(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        decode_checkpoint(&bytes)
    }
}

/// Output of [`classify`].
#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    /// Per-step softmax outputs `[T, B, Y]`.
    pub probs: Tensor,
    /// Outputs summed over valid steps `[B, Y]`.
    pub accumulated: Tensor,
    pub predicted: Vec<usize>,
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-step softmax, accumulation over valid steps, and argmax.
pub fn classify(scores: &Tensor, mask: Option<&TemporalMask>) -> Result<Classification> {
    let s = scores.shape();
    if s.len() != 3 {
        return Err(dim_err("classify", "rank", 3, s.len()));
    }
    let (t, b, y) = (s[0], s[1], s[2]);
    let probs = Tensor::new(s, kernels::softmax_rows(scores.data(), y))?;
    let mut acc = vec![0.0; b * y];
    for ti in 0..t {
        for bi in 0..b {
            if mask.is_some_and(|m| !m.is_valid(ti, bi)) {
                continue;
            }
            let row = &probs.data()[(ti * b + bi) * y..(ti * b + bi + 1) * y];
            for (a, &p) in acc[bi * y..(bi + 1) * y].iter_mut().zip(row) {
                *a += p;
            }
        }
    }
    let predicted = acc.chunks(y).map(argmax).collect();
    Ok(Classification {
        probs,
        accumulated: Tensor::new(&[b, y], acc)?,
        predicted,
    })
}

/// Mean cross-entropy of accumulated outputs `ŷ` (`[B, Y]`).
pub fn cross_entropy_loss(yhat: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let y = tape.constant(yhat.clone());
    let l = tape.cross_entropy_accumulated(y, labels)?;
    Ok(tape.value(l).data()[0])
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPKC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    folded: bool,
}

/// Little-endian layout after the magic: version `u32`, header length `u32`,
/// JSON header, tensor count `u32`, then per tensor name length `u32`, UTF-8
/// name, rank `u32`, dims `u32` each, `f32` data; a CRC32 of everything
/// after the magic closes the file.
pub fn encode_checkpoint(model: &SpikCommander) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    body.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.config.clone(),
        folded: model.folded,
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    put_u32(&mut body, header.len())?;
    body.extend_from_slice(&header);
    let entries = model.store.entries();
    put_u32(&mut body, entries.len())?;
    for e in entries {
        put_u32(&mut body, e.name.len())?;
        body.extend_from_slice(e.name.as_bytes());
        put_u32(&mut body, e.value.ndim())?;
        for &d in e.value.shape() {
            put_u32(&mut body, d)?;
        }
        for &v in e.value.data() {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "checkpoint truncated",
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SpikCommander> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "checkpoint truncated",
        )));
    }
    let (body, crc) = bytes[4..].split_at(bytes.len() - 8);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    let version = c.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = c.u32()?;
    let header: CheckpointHeader =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut model = SpikCommander::new(header.config, 0)?;
    if header.folded {
        model.init_running_stats();
        model.fold_bn()?;
    }
    let count = c.u32()?;
    let mut loaded = ParamStore::new();
    for _ in 0..count {
        let nlen = c.u32()?;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let kind = model
            .store
            .find(&name)
            .map(|id| model.store.entry(id).kind)
            .unwrap_or(crate::params::ParamKind::Weight);
        loaded.add(name, Tensor::new(&shape, data)?, kind);
    }
    if c.pos != body.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    model.store.load_from(&loaded)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            blocks: 1,
            heads: 2,
            hidden: 8,
            input_neurons: 6,
            window_radius: 2,
            time_steps: 10,
            expansion: 2,
            classes: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 })
    }

    #[test]
    fn config_constraints() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            classes: 1,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let odd = ModelConfig {
            hidden: 3,
            heads: 1,
            expansion: 1,
            ..ModelConfig::default()
        };
        assert!(odd.validate().is_err());
        let c = ModelConfig::default();
        assert_eq!((c.mlp_hidden(), c.mlp_hidden() / 2), (512, 256));
    }

    #[test]
    fn published_sizes() {
        let small = SpikCommander::new(ModelConfig::shd_small(), 0).unwrap().param_count();
        assert!(((small as f64) / 0.19e6 - 1.0).abs() < 0.03, "{small}");
        let large = SpikCommander::new(ModelConfig::ssc_large(), 0).unwrap().param_count();
        assert!(((large as f64) / 2.13e6 - 1.0).abs() < 0.03, "{large}");
        let again = SpikCommander::new(ModelConfig::ssc_large(), 9).unwrap().param_count();
        assert_eq!(large, again);
    }

    #[test]
    fn forward_shape_and_binarity() {
        let mut m = SpikCommander::new(tiny(), 1).unwrap();
        m.init_running_stats();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_input(&mut rng, &[10, 2, 6]);
        let mask = TemporalMask::all_valid(10, 2);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let parts = m.forward_parts(&mut tape, &mut ForwardCtx::eval(), xv, &mask).unwrap();
        assert_eq!(tape.shape(parts.scores), &[10, 2, 3]);
        assert!(tape.value(parts.see).data().iter().all(|&v| v == 0.0 || v == 1.0 || v == 2.0));
        assert!(tape.spike_outputs().all(|s| s.is_binary()));
        for b in &parts.blocks {
            assert_eq!(tape.shape(*b), &[10, 2, 8]);
        }
    }

    #[test]
    fn default_model_output_shape() {
        let mut m = SpikCommander::new(ModelConfig::shd_small(), 0).unwrap();
        m.init_running_stats();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_input(&mut rng, &[100, 2, 140]);
        let s = m.scores(&x, &TemporalMask::all_valid(100, 2)).unwrap();
        assert_eq!(s.shape(), &[100, 2, 20]);
    }

    #[test]
    fn rejects_bad_input() {
        let mut m = SpikCommander::new(tiny(), 1).unwrap();
        m.init_running_stats();
        let mask = TemporalMask::all_valid(10, 1);
        let wrong_n = Tensor::zeros(&[10, 1, 5]);
        assert!(matches!(m.scores(&wrong_n, &mask), Err(Error::Dimension { .. })));
        let analog = Tensor::full(&[10, 1, 6], 0.5);
        assert!(matches!(m.scores(&analog, &mask), Err(Error::Input(_))));
        m.config.input_kind = InputKind::Analog;
        assert!(m.scores(&analog, &mask).is_ok());
    }

    #[test]
    fn eval_needs_statistics() {
        let m = SpikCommander::new(tiny(), 1).unwrap();
        let x = Tensor::zeros(&[10, 1, 6]);
        assert!(matches!(m.scores(&x, &TemporalMask::all_valid(10, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn batch_permutation_equivariance() {
        let mut m = SpikCommander::new(tiny(), 4).unwrap();
        m.init_running_stats();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_input(&mut rng, &[10, 3, 6]);
        let mask = TemporalMask::from_lengths(10, &[10, 7, 4]).unwrap();
        let s = m.scores(&x, &mask).unwrap();
        let perm = [2, 0, 1];
        let xp = Tensor::from_fn(&[10, 3, 6], |i| {
            let (t, b, n) = (i / 18, (i / 6) % 3, i % 6);
            x.get(&[t, perm[b], n])
        });
        let lens: Vec<usize> = perm.iter().map(|&p| mask.lengths()[p]).collect();
        let sp = m.scores(&xp, &TemporalMask::from_lengths(10, &lens).unwrap()).unwrap();
        for t in 0..10 {
            for b in 0..3 {
                for y in 0..3 {
                    assert_eq!(sp.get(&[t, b, y]), s.get(&[t, perm[b], y]));
                }
            }
        }
    }

    #[test]
    fn classify_examples() {
        let c = classify(&Tensor::zeros(&[6, 1, 2]), None).unwrap();
        assert!(c.probs.data().iter().all(|&p| p == 0.5));
        assert_eq!(c.accumulated.data(), &[3.0, 3.0]);
        assert_eq!(c.predicted, vec![0]);
        let c = classify(&Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap(), None).unwrap();
        assert!((c.probs.data()[0] - 0.7310585786).abs() < 1e-9);
        assert!((c.probs.data()[1] - 0.2689414214).abs() < 1e-9);
    }

    #[test]
    fn classify_skips_padding() {
        let mut s = Tensor::zeros(&[4, 1, 2]);
        s.set(&[3, 0, 1], 50.0);
        let mask = TemporalMask::from_lengths(4, &[3]).unwrap();
        let c = classify(&s, Some(&mask)).unwrap();
        assert_eq!(c.accumulated.data(), &[1.5, 1.5]);
        assert_eq!(c.predicted, vec![0]);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn loss_examples() {
        let uniform = Tensor::new(&[1, 2], vec![5.0, 5.0]).unwrap();
        assert!((cross_entropy_loss(&uniform, &[1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let sure = Tensor::new(&[1, 2], vec![0.99, 0.01]).unwrap();
        assert!((cross_entropy_loss(&sure, &[0]).unwrap() - 0.01005).abs() < 1e-5);
        assert!(matches!(cross_entropy_loss(&sure, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn folding_preserves_scores() {
        let mut m = SpikCommander::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // non-trivial statistics
        for i in 0..m.store.len() {
            let id = m.store.ids().nth(i).unwrap();
            let name = m.store.name(id).to_string();
            let t = m.store.get_mut(id);
            if name.ends_with("running_mean") || name.ends_with(".beta") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            } else if name.ends_with("running_var") || name.ends_with(".gamma") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.6..1.4));
            }
        }
        m.init_running_stats();
        let x = rand_input(&mut rng, &[10, 2, 6]);
        let mask = TemporalMask::all_valid(10, 2);
        let before = m.scores(&x, &mask).unwrap();
        assert!(m.estimate_energy(&x, &mask).is_err());
        let params = m.param_count();
        m.fold_bn().unwrap();
        assert!(m.is_folded());
        assert!(m.param_count() < params);
        let after = m.scores(&x, &mask).unwrap();
        assert!(before.max_abs_diff(&after) < 1e-5);
        let report = m.estimate_energy(&x, &mask).unwrap();
        assert!(report.total_mj > 0.0);
    }

    #[test]
    fn fold_without_statistics_fails() {
        let mut m = SpikCommander::new(tiny(), 3).unwrap();
        assert!(matches!(m.fold_bn(), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = SpikCommander::new(tiny(), 11).unwrap();
        m.init_running_stats();
        let bytes = encode_checkpoint(&m).unwrap();
        assert_eq!(&bytes[..4], b"SPKC");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in back.store.entries().iter().zip(m.store.entries()) {
            assert_eq!(a.name, b.name);
            let narrowed: Vec<f64> = b.value.data().iter().map(|&v| v as f32 as f64).collect();
            assert_eq!(a.value.data(), &narrowed[..]);
        }
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

        let mut f = m.clone();
        f.fold_bn().unwrap();
        let fb = decode_checkpoint(&encode_checkpoint(&f).unwrap()).unwrap();
        assert!(fb.is_folded());
    }

    #[test]
    fn checkpoint_corruption_detected() {
        let m = SpikCommander::new(tiny(), 11).unwrap();
        let mut bytes = encode_checkpoint(&m).unwrap();
        assert!(matches!(decode_checkpoint(b"NOPE"), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&[]), Err(Error::Format(_))));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn train_mode_collects_bn_updates() {
        let m = SpikCommander::new(tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_input(&mut rng, &[10, 2, 6]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut ctx = ForwardCtx::train(0, 0.1);
        assert_eq!(ctx.mode, Mode::Train);
        let (loss, yhat) = m
            .loss(&mut tape, &mut ctx, xv, &TemporalMask::all_valid(10, 2), &[0, 2])
            .unwrap();
        assert!(tape.value(loss).data()[0].is_finite());
        let sums: Vec<f64> = tape.value(yhat).data().chunks(3).map(|r| r.iter().sum()).collect();
        assert!(sums.iter().all(|s| (s - 10.0).abs() < 1e-9));
        assert!(!ctx.bn_updates.is_empty());
    }
}
