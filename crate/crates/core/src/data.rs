//! Event recordings, dense tensors and augmentation.
//!
//! Spike recordings are stored as sorted `(time_us, neuron)` events in the
//! `SPKE` container and binned into binary `[T × N]` tensors on load. Real
//! valued feature matrices use the `SPKA` container. All randomness comes
//! from seeded ChaCha streams.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::TemporalMask;
use crate::blocks::InputKind;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const EVENTS_MAGIC: &[u8; 4] = b"SPKE";
pub const ANALOG_MAGIC: &[u8; 4] = b"SPKA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Event {
    pub time_us: u32,
    pub neuron: u16,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventSample {
    pub events: Vec<Event>,
    pub label: u16,
    pub duration_us: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventDataset {
    pub neurons: u16,
    pub samples: Vec<EventSample>,
}

/// Counters for inputs repaired or clipped during ingestion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub unsorted_repaired: usize,
    pub truncated: usize,
}

/// Binned sample; rows at or beyond `valid_steps` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSample {
    pub tensor: Tensor,
    pub valid_steps: usize,
    pub label: usize,
}

fn eof(what: &str) -> Error {
    Error::Io(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        format!("{what}: truncated payload"),
    ))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(eof(self.what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn check_header(r: &mut Reader, magic: &[u8; 4]) -> Result<()> {
    if r.buf.len() < 4 || &r.buf[..4] != magic {
        return Err(Error::Format(format!(
            "{}: missing magic {:?}",
            r.what,
            std::str::from_utf8(magic).unwrap()
        )));
    }
    r.pos = 4;
    let v = r.u32()?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("{}: unsupported version {v}", r.what)));
    }
    Ok(())
}

fn count_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

/// Serialize an event dataset.
pub fn encode_events(ds: &EventDataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(EVENTS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count_u32(ds.samples.len(), "sample count")?.to_le_bytes());
    out.extend_from_slice(&ds.neurons.to_le_bytes());
    for s in &ds.samples {
        out.extend_from_slice(&s.label.to_le_bytes());
        out.extend_from_slice(&s.duration_us.to_le_bytes());
        out.extend_from_slice(&count_u32(s.events.len(), "event count")?.to_le_bytes());
        for e in &s.events {
            out.extend_from_slice(&e.time_us.to_le_bytes());
            out.extend_from_slice(&e.neuron.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse an event dataset. Unsorted samples are stably sorted and counted.
pub fn decode_events(bytes: &[u8], stats: &mut IngestStats) -> Result<EventDataset> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        what: "event file",
    };
    check_header(&mut r, EVENTS_MAGIC)?;
    let count = r.u32()? as usize;
    let neurons = r.u16()?;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let label = r.u16()?;
        let duration_us = r.u32()?;
        let n = r.u32()? as usize;
        let mut events = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let time_us = r.u32()?;
            let neuron = r.u16()?;
            if neuron >= neurons {
                return Err(Error::Format(format!(
                    "sample {i}: neuron {neuron} outside {neurons} input neurons"
                )));
            }
            if time_us > duration_us {
                return Err(Error::Format(format!(
                    "sample {i}: event at {time_us} us after duration {duration_us} us"
                )));
            }
            events.push(Event { time_us, neuron });
        }
        if events.windows(2).any(|w| w[1].time_us < w[0].time_us) {
            events.sort_by_key(|e| e.time_us);
            stats.unsorted_repaired += 1;
        }
        samples.push(EventSample {
            events,
            label,
            duration_us,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("event file: trailing bytes".into()));
    }
    Ok(EventDataset { neurons, samples })
}

pub fn write_events(path: &Path, ds: &EventDataset) -> Result<()> {
    std::fs::write(path, encode_events(ds)?)?;
    Ok(())
}

pub fn load_events(path: &Path, stats: &mut IngestStats) -> Result<EventDataset> {
    decode_events(&std::fs::read(path)?, stats)
}

/// Real-valued `[T × F]` feature matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalogDataset {
    pub features: u16,
    pub samples: Vec<DenseSample>,
}

pub fn encode_analog(ds: &AnalogDataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(ANALOG_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count_u32(ds.samples.len(), "sample count")?.to_le_bytes());
    out.extend_from_slice(&ds.features.to_le_bytes());
    for s in &ds.samples {
        if s.tensor.ndim() != 2 || s.tensor.shape()[1] != ds.features as usize {
            return Err(dim_err("encode_analog", "features", ds.features as usize, s.tensor.last_dim()));
        }
        let label = u16::try_from(s.label).map_err(|_| Error::Format(format!("label {} exceeds u16", s.label)))?;
        out.extend_from_slice(&label.to_le_bytes());
        out.extend_from_slice(&count_u32(s.valid_steps, "row count")?.to_le_bytes());
        for &v in &s.tensor.data()[..s.valid_steps * ds.features as usize] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_analog(bytes: &[u8]) -> Result<AnalogDataset> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        what: "feature file",
    };
    check_header(&mut r, ANALOG_MAGIC)?;
    let count = r.u32()? as usize;
    let features = r.u16()?;
    let f = features as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let label = r.u16()? as usize;
        let rows = r.u32()? as usize;
        let data = (0..rows * f).map(|_| r.f32().map(|v| v as f64)).collect::<Result<Vec<_>>>()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("feature file: non-finite value".into()));
        }
        samples.push(DenseSample {
            tensor: Tensor::new(&[rows, f], data)?,
            valid_steps: rows,
            label,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("feature file: trailing bytes".into()));
    }
    Ok(AnalogDataset { features, samples })
}

/// Number of steps a one-second window yields at bin width `delta_t_ms`.
pub fn time_steps(delta_t_ms: f64) -> usize {
    (1000.0 / delta_t_ms).round() as usize
}

/// Bin events into a binary `[T × N/neuron_bin]` tensor: a cell is 1 when at
/// least one event falls into it. `T = ⌈duration / Δt⌉` (at least 1); events
/// at the very end of the recording land in the last bin.
pub fn bin_and_discretize(s: &EventSample, neurons: u16, neuron_bin: u16, delta_t_ms: f64) -> Result<DenseSample> {
    if neuron_bin == 0 || neurons % neuron_bin != 0 {
        return Err(Error::Config(format!(
            "{neurons} input neurons are not divisible into bins of {neuron_bin}"
        )));
    }
    if !(delta_t_ms > 0.0) {
        return Err(Error::Config(format!("bin width must be positive, got {delta_t_ms} ms")));
    }
    let width_us = delta_t_ms * 1000.0;
    let n = (neurons / neuron_bin) as usize;
    let rows = ((s.duration_us as f64 / width_us).ceil() as usize).max(1);
    let mut t = Tensor::zeros(&[rows, n]);
    for e in &s.events {
        if e.neuron >= neurons {
            return Err(Error::Input(format!("neuron {} outside {neurons} input neurons", e.neuron)));
        }
        let row = ((e.time_us as f64 / width_us).floor() as usize).min(rows - 1);
        t.data_mut()[row * n + (e.neuron / neuron_bin) as usize] = 1.0;
    }
    Ok(DenseSample {
        tensor: t,
        valid_steps: rows,
        label: s.label as usize,
    })
}

/// Zero-pad (or truncate) to `target_t` rows. At least one step stays valid.
pub fn pad_and_mask(d: &DenseSample, target_t: usize, stats: &mut IngestStats) -> Result<(DenseSample, TemporalMask)> {
    if target_t == 0 {
        return Err(Error::Config("target length must be >= 1".into()));
    }
    if d.tensor.ndim() != 2 {
        return Err(dim_err("pad_and_mask", "rank", 2, d.tensor.ndim()));
    }
    let n = d.tensor.shape()[1];
    let mut valid = d.valid_steps.min(d.tensor.shape()[0]);
    if valid > target_t {
        stats.truncated += 1;
        valid = target_t;
    }
    let valid = valid.max(1);
    let mut data = vec![0.0; target_t * n];
    let copy = d.valid_steps.min(target_t).min(d.tensor.shape()[0]) * n;
    data[..copy].copy_from_slice(&d.tensor.data()[..copy]);
    let mask = TemporalMask::from_lengths(target_t, &[valid])?;
    Ok((
        DenseSample {
            tensor: Tensor::new(&[target_t, n], data)?,
            valid_steps: valid,
            label: d.label,
        },
        mask,
    ))
}

/// Augmentation settings. Percentages are in `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub drop_proportion_pct: f64,
    pub time_drop_pct: f64,
    pub neuron_drop_count: u16,
    pub freq_masks: usize,
    pub freq_mask_bins: usize,
    pub time_masks: usize,
    pub time_mask_pct: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            drop_proportion_pct: 0.0,
            time_drop_pct: 0.0,
            neuron_drop_count: 0,
            freq_masks: 0,
            freq_mask_bins: 0,
            time_masks: 0,
            time_mask_pct: 0.0,
            rng_seed: 312,
        }
    }
}

impl AugmentConfig {
    pub fn shd() -> Self {
        Self {
            drop_proportion_pct: 50.0,
            time_drop_pct: 20.0,
            neuron_drop_count: 20,
            ..Self::default()
        }
    }

    pub fn ssc() -> Self {
        Self {
            drop_proportion_pct: 50.0,
            time_drop_pct: 10.0,
            neuron_drop_count: 10,
            ..Self::default()
        }
    }

    pub fn gsc() -> Self {
        Self {
            freq_masks: 1,
            freq_mask_bins: 10,
            time_masks: 1,
            time_mask_pct: 25.0,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let c = match name {
            "shd" => Self::shd(),
            "ssc" => Self::ssc(),
            "gsc" => Self::gsc(),
            "none" => Self::default(),
            other => return Err(Error::Config(format!("unknown augmentation preset `{other}`"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("augment.drop_proportion_pct", self.drop_proportion_pct),
            ("augment.time_drop_pct", self.time_drop_pct),
            ("augment.time_mask_pct", self.time_mask_pct),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Config(format!("{k} must be in [0, 100], got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.drop_proportion_pct == 0.0 && self.freq_masks == 0 && self.time_masks == 0
    }
}

/// Remove events with `start ≤ t < start + len`.
pub fn drop_by_time(s: &EventSample, start_us: u32, len_us: u32) -> EventSample {
    let end = start_us as u64 + len_us as u64;
    EventSample {
        events: s
            .events
            .iter()
            .copied()
            .filter(|e| (e.time_us as u64) < start_us as u64 || (e.time_us as u64) >= end)
            .collect(),
        ..s.clone()
    }
}

/// Remove events whose neuron lies in `[lo, hi)`.
pub fn drop_by_neuron(s: &EventSample, lo: u16, hi: u16) -> EventSample {
    EventSample {
        events: s
            .events
            .iter()
            .copied()
            .filter(|e| e.neuron < lo || e.neuron >= hi)
            .collect(),
        ..s.clone()
    }
}

/// With probability `drop_proportion_pct`, drop a random time window or a
/// random neuron band (chosen uniformly); otherwise return the input.
pub fn event_drop<R: Rng>(s: &EventSample, neurons: u16, cfg: &AugmentConfig, rng: &mut R) -> EventSample {
    if cfg.drop_proportion_pct <= 0.0 || rng.gen::<f64>() * 100.0 >= cfg.drop_proportion_pct {
        return s.clone();
    }
    if rng.gen::<bool>() {
        let window = (s.duration_us as f64 * cfg.time_drop_pct / 100.0).floor() as u32;
        let start = rng.gen_range(0..=s.duration_us - window);
        drop_by_time(s, start, window)
    } else {
        let band = cfg.neuron_drop_count.min(neurons);
        let lo = rng.gen_range(0..=neurons - band);
        drop_by_neuron(s, lo, lo + band)
    }
}

/// A zeroed rectangle: rows `[t0, t1)` (all columns) or columns `[f0, f1)`
/// (all rows).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskRegion {
    Features { start: usize, end: usize },
    Steps { start: usize, end: usize },
}

impl MaskRegion {
    pub fn contains(&self, t: usize, f: usize) -> bool {
        match *self {
            Self::Features { start, end } => (start..end).contains(&f),
            Self::Steps { start, end } => (start..end).contains(&t),
        }
    }
}

/// Frequency and time masking on a `[T × F]` feature matrix.
pub fn spec_mask<R: Rng>(x: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<(Tensor, Vec<MaskRegion>)> {
    if x.ndim() != 2 {
        return Err(dim_err("spec_mask", "rank", 2, x.ndim()));
    }
    let (t, f) = (x.shape()[0], x.shape()[1]);
    let mut regions = Vec::new();
    for _ in 0..cfg.freq_masks {
        let w = rng.gen_range(0..=cfg.freq_mask_bins.min(f));
        let s = rng.gen_range(0..=f - w);
        regions.push(MaskRegion::Features { start: s, end: s + w });
    }
    let max_t = ((cfg.time_mask_pct / 100.0) * t as f64).floor() as usize;
    for _ in 0..cfg.time_masks {
        let w = rng.gen_range(0..=max_t.min(t));
        let s = rng.gen_range(0..=t - w);
        regions.push(MaskRegion::Steps { start: s, end: s + w });
    }
    let mut out = x.clone();
    for ti in 0..t {
        for fi in 0..f {
            if regions.iter().any(|r| r.contains(ti, fi)) {
                out.data_mut()[ti * f + fi] = 0.0;
            }
        }
    }
    Ok((out, regions))
}

/// Settings of the planted-motif dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub steps: usize,
    pub neurons: usize,
    pub noise_p: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(classes: usize, samples_per_class: usize, steps: usize, neurons: usize, seed: u64) -> Self {
        Self {
            classes,
            samples_per_class,
            steps,
            neurons,
            noise_p: 0.05,
            seed,
        }
    }
}

/// One class motif: `neurons[j]` fires during the `j`-th slice of the
/// motif window, so the subset sweeps in a fixed order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Motif {
    pub neurons: Vec<usize>,
    pub length: usize,
}

impl Motif {
    fn active(&self, offset: usize) -> Option<usize> {
        if offset >= self.length {
            return None;
        }
        Some(self.neurons[offset * self.neurons.len() / self.length])
    }
}

pub fn synth_motifs(cfg: &SynthConfig) -> Result<Vec<Motif>> {
    if cfg.classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if cfg.neurons < 2 || cfg.steps < 2 {
        return Err(Error::Config("synthetic data needs at least 2 neurons and 2 steps".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = (cfg.neurons / cfg.classes).clamp(1, 4).max((cfg.neurons / 4).min(4)).min(cfg.neurons);
    let length = (cfg.steps / 2).max(k.min(cfg.steps));
    let mut pool: Vec<usize> = (0..cfg.neurons).collect();
    let mut motifs = Vec::with_capacity(cfg.classes);
    for c in 0..cfg.classes {
        if pool.len() < k {
            pool = (0..cfg.neurons).collect();
        }
        // draw a subset without replacement, in random firing order
        let mut subset = Vec::with_capacity(k);
        for _ in 0..k {
            let i = rng.gen_range(0..pool.len());
            subset.push(pool.swap_remove(i));
        }
        if motifs.iter().any(|m: &Motif| m.neurons == subset) {
            subset.rotate_left(c % k.max(1));
        }
        motifs.push(Motif { neurons: subset, length });
    }
    Ok(motifs)
}

/// Planted-motif dataset, interleaved by class (sample `i` has label
/// `i mod classes`). Each sample places its class motif at a random start
/// and adds Bernoulli background noise.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<DenseSample>> {
    let motifs = synth_motifs(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let (t, n) = (cfg.steps, cfg.neurons);
    let mut out = Vec::with_capacity(cfg.classes * cfg.samples_per_class);
    for i in 0..cfg.classes * cfg.samples_per_class {
        let label = i % cfg.classes;
        let m = &motifs[label];
        let start = rng.gen_range(0..=t - m.length);
        let mut x = Tensor::zeros(&[t, n]);
        for ti in 0..t {
            for ni in 0..n {
                if cfg.noise_p > 0.0 && rng.gen::<f64>() < cfg.noise_p {
                    x.data_mut()[ti * n + ni] = 1.0;
                }
            }
            if let Some(nj) = ti.checked_sub(start).and_then(|o| m.active(o)) {
                x.data_mut()[ti * n + nj] = 1.0;
            }
        }
        out.push(DenseSample {
            tensor: x,
            valid_steps: t,
            label,
        });
    }
    Ok(out)
}

/// Convert a binary dense sample to events at bin centres of width
/// `delta_t_ms`; binning the result with the same width is lossless.
pub fn dense_to_events(d: &DenseSample, delta_t_ms: f64) -> Result<EventSample> {
    if d.tensor.ndim() != 2 {
        return Err(dim_err("dense_to_events", "rank", 2, d.tensor.ndim()));
    }
    if !d.tensor.is_binary() {
        return Err(Error::Input("only binary samples convert to events".into()));
    }
    let (t, n) = (d.tensor.shape()[0], d.tensor.shape()[1]);
    let width = delta_t_ms * 1000.0;
    let mut events = Vec::new();
    for ti in 0..t {
        for ni in 0..n {
            if d.tensor.data()[ti * n + ni] != 0.0 {
                events.push(Event {
                    time_us: ((ti as f64 + 0.5) * width) as u32,
                    neuron: ni as u16,
                });
            }
        }
    }
    Ok(EventSample {
        events,
        label: d.label as u16,
        duration_us: (t as f64 * width) as u32,
    })
}

/// Parse `time_us,neuron,label` lines; blank lines separate samples. An
/// optional header line is skipped. Events are sorted per sample.
pub fn parse_csv_events(text: &str, neurons: Option<u16>, stats: &mut IngestStats) -> Result<EventDataset> {
    let mut samples = Vec::new();
    let mut cur: Vec<Event> = Vec::new();
    let mut label: Option<u16> = None;
    let mut max_neuron = 0u16;
    let mut flush = |cur: &mut Vec<Event>, label: &mut Option<u16>, samples: &mut Vec<EventSample>| {
        if let Some(l) = label.take() {
            if cur.windows(2).any(|w| w[1].time_us < w[0].time_us) {
                cur.sort_by_key(|e| e.time_us);
                stats.unsorted_repaired += 1;
            }
            let duration_us = cur.iter().map(|e| e.time_us).max().unwrap_or(0);
            samples.push(EventSample {
                events: std::mem::take(cur),
                label: l,
                duration_us,
            });
        }
    };
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            flush(&mut cur, &mut label, &mut samples);
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Input(format!("line {}: expected time_us,neuron,label", ln + 1)));
        }
        let parsed = (
            fields[0].parse::<u32>(),
            fields[1].parse::<u16>(),
            fields[2].parse::<u16>(),
        );
        let (t, n, l) = match parsed {
            (Ok(t), Ok(n), Ok(l)) => (t, n, l),
            _ if ln == 0 => continue,
            _ => return Err(Error::Input(format!("line {}: malformed number", ln + 1))),
        };
        match label {
            Some(prev) if prev != l => {
                return Err(Error::Input(format!(
                    "line {}: label {l} differs from sample label {prev}",
                    ln + 1
                )))
            }
            _ => label = Some(l),
        }
        max_neuron = max_neuron.max(n);
        cur.push(Event { time_us: t, neuron: n });
    }
    flush(&mut cur, &mut label, &mut samples);
    let neurons = match neurons {
        Some(k) if k <= max_neuron && !samples.is_empty() => {
            return Err(Error::Input(format!("neuron {max_neuron} outside {k} input neurons")))
        }
        Some(k) => k,
        None => max_neuron.saturating_add(1),
    };
    Ok(EventDataset { neurons, samples })
}

/// Per-dataset preprocessing defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPreset {
    pub name: &'static str,
    pub raw_neurons: u16,
    pub neuron_bin: u16,
    pub delta_t_ms: f64,
    pub classes: usize,
    pub augment: AugmentConfig,
}

pub fn dataset_preset(name: &str) -> Result<DatasetPreset> {
    let (raw_neurons, neuron_bin, classes) = match name {
        "shd" => (700, 5, 20),
        "ssc" => (700, 5, 35),
        "gsc" => (140, 1, 35),
        other => return Err(Error::Config(format!("unknown dataset preset `{other}`"))),
    };
    Ok(DatasetPreset {
        name: match name {
            "shd" => "shd",
            "ssc" => "ssc",
            _ => "gsc",
        },
        raw_neurons,
        neuron_bin,
        delta_t_ms: 10.0,
        classes,
        augment: AugmentConfig::preset(name)?,
    })
}

/// Training or evaluation data in whichever form it was loaded.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Events {
        data: EventDataset,
        neuron_bin: u16,
        delta_t_ms: f64,
    },
    Dense {
        samples: Vec<DenseSample>,
        kind: InputKind,
    },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Self::Events { data, .. } => data.samples.len(),
            Self::Dense { samples, .. } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> usize {
        match self {
            Self::Events { data, .. } => data.samples[i].label as usize,
            Self::Dense { samples, .. } => samples[i].label,
        }
    }

    pub fn input_kind(&self) -> InputKind {
        match self {
            Self::Events { .. } => InputKind::Spike,
            Self::Dense { kind, .. } => *kind,
        }
    }

    /// Feature width after binning.
    pub fn features(&self) -> usize {
        match self {
            Self::Events { data, neuron_bin, .. } => (data.neurons / (*neuron_bin).max(1)) as usize,
            Self::Dense { samples, .. } => samples.first().map_or(0, |s| s.tensor.last_dim()),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        match self {
            Self::Events {
                data,
                neuron_bin,
                delta_t_ms,
            } => Self::Events {
                data: EventDataset {
                    neurons: data.neurons,
                    samples: idx.iter().map(|&i| data.samples[i].clone()).collect(),
                },
                neuron_bin: *neuron_bin,
                delta_t_ms: *delta_t_ms,
            },
            Self::Dense { samples, kind } => Self::Dense {
                samples: idx.iter().map(|&i| samples[i].clone()).collect(),
                kind: *kind,
            },
        }
    }

    /// Dense form of sample `i`, augmented when `augment` is given.
    pub fn materialize(&self, i: usize, augment: Option<(&AugmentConfig, &mut ChaCha8Rng)>) -> Result<DenseSample> {
        match self {
            Self::Events {
                data,
                neuron_bin,
                delta_t_ms,
            } => {
                let s = &data.samples[i];
                let s = match augment {
                    Some((cfg, rng)) => event_drop(s, data.neurons, cfg, rng),
                    None => s.clone(),
                };
                bin_and_discretize(&s, data.neurons, *neuron_bin, *delta_t_ms)
            }
            Self::Dense { samples, kind } => {
                let s = &samples[i];
                match (augment, kind) {
                    (Some((cfg, rng)), InputKind::Analog) => {
                        let (tensor, _) = spec_mask(&s.tensor, cfg, rng)?;
                        Ok(DenseSample { tensor, ..s.clone() })
                    }
                    _ => Ok(s.clone()),
                }
            }
        }
    }
}

/// Load an `SPKE` or `SPKA` file, chosen by its magic bytes.
pub fn load_dataset(path: &Path, neuron_bin: u16, delta_t_ms: f64, stats: &mut IngestStats) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    match bytes.get(..4) {
        Some(m) if m == EVENTS_MAGIC => Ok(Dataset::Events {
            data: decode_events(&bytes, stats)?,
            neuron_bin,
            delta_t_ms,
        }),
        Some(m) if m == ANALOG_MAGIC => Ok(Dataset::Dense {
            samples: decode_analog(&bytes)?.samples,
            kind: InputKind::Analog,
        }),
        _ => Err(Error::Format(format!("{}: not an SPKE or SPKA file", path.display()))),
    }
}

/// Time-major batch ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[T × B × N]`
    pub x: Tensor,
    pub mask: TemporalMask,
    pub labels: Vec<usize>,
}

/// Pad each sample to `target_t` and interleave into `[T × B × N]`.
pub fn assemble_batch(samples: &[DenseSample], target_t: usize, stats: &mut IngestStats) -> Result<Batch> {
    let b = samples.len();
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let n = samples[0].tensor.last_dim();
    let mut x = vec![0.0; target_t * b * n];
    let mut lengths = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(b);
    for (bi, s) in samples.iter().enumerate() {
        if s.tensor.last_dim() != n {
            return Err(dim_err("assemble_batch", "features", n, s.tensor.last_dim()));
        }
        let (p, m) = pad_and_mask(s, target_t, stats)?;
        lengths.push(m.lengths()[0]);
        labels.push(s.label);
        for t in 0..target_t {
            x[(t * b + bi) * n..(t * b + bi + 1) * n].copy_from_slice(&p.tensor.data()[t * n..(t + 1) * n]);
        }
    }
    Ok(Batch {
        x: Tensor::new(&[target_t, b, n], x)?,
        mask: TemporalMask::from_lengths(target_t, &lengths)?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(events: &[(u32, u16)], duration_us: u32) -> EventSample {
        EventSample {
            events: events.iter().map(|&(time_us, neuron)| Event { time_us, neuron }).collect(),
            label: 3,
            duration_us,
        }
    }

    #[test]
    fn empty_file_is_format_error() {
        let mut st = IngestStats::default();
        assert!(matches!(decode_events(&[], &mut st), Err(Error::Format(_))));
        let mut bad = encode_events(&EventDataset {
            neurons: 4,
            samples: vec![],
        })
        .unwrap();
        bad[4] = 9;
        assert!(matches!(decode_events(&bad, &mut st), Err(Error::Format(_))));
    }

    #[test]
    fn degenerate_sample_and_round_trip() {
        let ds = EventDataset {
            neurons: 700,
            samples: vec![sample(&[], 1000), sample(&[(5, 1), (9, 699)], 10)],
        };
        let bytes = encode_events(&ds).unwrap();
        let mut st = IngestStats::default();
        let back = decode_events(&bytes, &mut st).unwrap();
        assert_eq!(back, ds);
        assert!(back.samples[0].events.is_empty());
        assert_eq!(encode_events(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let ds = EventDataset {
            neurons: 8,
            samples: vec![sample(&[(1, 1), (2, 2)], 10)],
        };
        let bytes = encode_events(&ds).unwrap();
        let mut st = IngestStats::default();
        assert!(matches!(decode_events(&bytes[..bytes.len() - 3], &mut st), Err(Error::Io(_))));
    }

    #[test]
    fn unsorted_events_repaired() {
        let ds = EventDataset {
            neurons: 8,
            samples: vec![sample(&[(7, 1), (2, 2), (7, 0)], 10)],
        };
        let mut st = IngestStats::default();
        let back = decode_events(&encode_events(&ds).unwrap(), &mut st).unwrap();
        assert_eq!(st.unsorted_repaired, 1);
        let ev: Vec<_> = back.samples[0].events.iter().map(|e| (e.time_us, e.neuron)).collect();
        assert_eq!(ev, vec![(2, 2), (7, 1), (7, 0)]);
    }

    #[test]
    fn invalid_events_rejected() {
        let mut st = IngestStats::default();
        let late = EventDataset {
            neurons: 8,
            samples: vec![sample(&[(11, 1)], 10)],
        };
        assert!(matches!(decode_events(&encode_events(&late).unwrap(), &mut st), Err(Error::Format(_))));
        let high = EventDataset {
            neurons: 8,
            samples: vec![sample(&[(1, 8)], 10)],
        };
        assert!(matches!(decode_events(&encode_events(&high).unwrap(), &mut st), Err(Error::Format(_))));
    }

    #[test]
    fn binning_examples() {
        assert_eq!(time_steps(10.0), 100);
        assert_eq!(time_steps(4.0), 250);
        assert_eq!(time_steps(1.0), 1000);
        let s = sample(&[(3000, 0), (3000, 1), (3000, 2), (3000, 3), (3000, 4)], 1_000_000);
        let d = bin_and_discretize(&s, 700, 5, 10.0).unwrap();
        assert_eq!(d.tensor.shape(), &[100, 140]);
        assert_eq!(d.tensor.count_nonzero(), 1);
        assert_eq!(d.tensor.get(&[0, 0]), 1.0);
        assert!(matches!(bin_and_discretize(&s, 701, 5, 10.0), Err(Error::Config(_))));
    }

    #[test]
    fn single_bin_reduces_to_band_presence() {
        let s = sample(&[(0, 0), (50, 7), (99, 7), (100, 11)], 100);
        let d = bin_and_discretize(&s, 12, 4, 1.0).unwrap();
        assert_eq!(d.tensor.shape(), &[1, 3]);
        assert_eq!(d.tensor.data(), &[1.0, 1.0, 1.0]);
        let s = sample(&[(0, 0), (50, 1)], 100);
        let d = bin_and_discretize(&s, 12, 4, 1.0).unwrap();
        assert_eq!(d.tensor.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn padding_examples() {
        let mut st = IngestStats::default();
        let d = DenseSample {
            tensor: Tensor::full(&[3, 2], 1.0),
            valid_steps: 3,
            label: 0,
        };
        let (p, m) = pad_and_mask(&d, 5, &mut st).unwrap();
        assert_eq!(p.tensor.shape(), &[5, 2]);
        assert_eq!(&p.tensor.data()[6..], &[0.0; 4]);
        assert_eq!(m.factors(), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        let (same, m) = pad_and_mask(&d, 3, &mut st).unwrap();
        assert_eq!(same, d);
        assert_eq!(m, TemporalMask::all_valid(3, 1));
        let (_, m) = pad_and_mask(&d, 2, &mut st).unwrap();
        assert_eq!(st.truncated, 1);
        assert_eq!(m.lengths(), &[2]);
        let empty = DenseSample {
            tensor: Tensor::zeros(&[0, 2]),
            valid_steps: 0,
            label: 0,
        };
        let (_, m) = pad_and_mask(&empty, 4, &mut st).unwrap();
        assert_eq!(m.lengths(), &[1]);
    }

    #[test]
    fn event_drop_examples() {
        let s = sample(&[(1, 5), (2, 10), (3, 29), (4, 30), (5, 31)], 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(event_drop(&s, 700, &AugmentConfig::default(), &mut rng), s);
        let d = drop_by_neuron(&s, 10, 30);
        let ev: Vec<u16> = d.events.iter().map(|e| e.neuron).collect();
        assert_eq!(ev, vec![5, 30, 31]);
        let d = drop_by_time(&s, 2, 2);
        let ev: Vec<u32> = d.events.iter().map(|e| e.time_us).collect();
        assert_eq!(ev, vec![1, 4, 5]);
        let shd = AugmentConfig::preset("shd").unwrap();
        assert_eq!((shd.drop_proportion_pct, shd.time_drop_pct, shd.neuron_drop_count), (50.0, 20.0, 20));
        let ssc = AugmentConfig::preset("ssc").unwrap();
        assert_eq!((ssc.drop_proportion_pct, ssc.time_drop_pct, ssc.neuron_drop_count), (50.0, 10.0, 10));
        let gsc = AugmentConfig::preset("gsc").unwrap();
        assert_eq!((gsc.freq_masks, gsc.freq_mask_bins, gsc.time_masks, gsc.time_mask_pct), (1, 10, 1, 25.0));
    }

    #[test]
    fn spec_mask_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[40, 20], |i| 1.0 + i as f64);
        let (same, r) = spec_mask(&x, &AugmentConfig::default(), &mut rng).unwrap();
        assert!(r.is_empty());
        assert_eq!(same, x);
        let cfg = AugmentConfig::gsc();
        for _ in 0..50 {
            let (m, regions) = spec_mask(&x, &cfg, &mut rng).unwrap();
            for t in 0..40 {
                for f in 0..20 {
                    let inside = regions.iter().any(|r| r.contains(t, f));
                    let want = if inside { 0.0 } else { x.get(&[t, f]) };
                    assert_eq!(m.get(&[t, f]), want);
                }
            }
            for r in &regions {
                match *r {
                    MaskRegion::Features { start, end } => assert!(end - start <= 10),
                    MaskRegion::Steps { start, end } => assert!(end - start <= 10),
                }
            }
        }
    }

    #[test]
    fn synth_is_deterministic_and_clean_without_noise() {
        let cfg = SynthConfig::new(2, 10, 50, 16, 7);
        assert_eq!(synth_dataset(&cfg).unwrap(), synth_dataset(&cfg).unwrap());
        let clean = SynthConfig { noise_p: 0.0, ..cfg };
        let motifs = synth_motifs(&clean).unwrap();
        for s in synth_dataset(&clean).unwrap() {
            let m = &motifs[s.label];
            assert_eq!(s.tensor.count_nonzero(), m.length);
            for t in 0..50 {
                for n in 0..16 {
                    if s.tensor.get(&[t, n]) != 0.0 {
                        assert!(m.neurons.contains(&n));
                    }
                }
            }
        }
        assert!(synth_dataset(&SynthConfig::new(1, 10, 50, 16, 7)).is_err());
    }

    #[test]
    fn events_from_dense_bin_back_losslessly() {
        let cfg = SynthConfig::new(3, 2, 20, 8, 1);
        for s in synth_dataset(&cfg).unwrap() {
            let e = dense_to_events(&s, 20.0).unwrap();
            let back = bin_and_discretize(&e, 8, 1, 20.0).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn csv_ingest() {
        let text = "time_us,neuron,label\n10,3,1\n5,2,1\n\n\n7,0,0\n";
        let mut st = IngestStats::default();
        let ds = parse_csv_events(text, None, &mut st).unwrap();
        assert_eq!(ds.neurons, 4);
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(st.unsorted_repaired, 1);
        assert_eq!(ds.samples[0].duration_us, 10);
        assert_eq!(ds.samples[1].label, 0);
        assert!(parse_csv_events("1,2,3\n1,2,4\n", None, &mut st).is_err());
        assert!(parse_csv_events("1,2\n", None, &mut st).is_err());
        assert!(parse_csv_events("1,9,0\n", Some(8), &mut st).is_err());
    }

    #[test]
    fn analog_round_trip() {
        let ds = AnalogDataset {
            features: 3,
            samples: vec![DenseSample {
                tensor: Tensor::from_fn(&[4, 3], |i| i as f64 * 0.5),
                valid_steps: 4,
                label: 2,
            }],
        };
        let bytes = encode_analog(&ds).unwrap();
        assert_eq!(&bytes[..4], b"SPKA");
        assert_eq!(decode_analog(&bytes).unwrap(), ds);
        assert!(matches!(decode_analog(b"SPKE"), Err(Error::Format(_))));
    }

    #[test]
    fn batch_layout() {
        let a = DenseSample {
            tensor: Tensor::full(&[2, 2], 1.0),
            valid_steps: 2,
            label: 0,
        };
        let b = DenseSample {
            tensor: Tensor::full(&[3, 2], 2.0),
            valid_steps: 3,
            label: 1,
        };
        let mut st = IngestStats::default();
        let batch = assemble_batch(&[a, b], 3, &mut st).unwrap();
        assert_eq!(batch.x.shape(), &[3, 2, 2]);
        assert_eq!(batch.x.get(&[1, 0, 1]), 1.0);
        assert_eq!(batch.x.get(&[2, 0, 0]), 0.0);
        assert_eq!(batch.x.get(&[2, 1, 0]), 2.0);
        assert_eq!(batch.mask.lengths(), &[2, 3]);
        assert_eq!(batch.labels, vec![0, 1]);
    }

    #[test]
    fn presets_load() {
        for name in ["shd", "ssc", "gsc"] {
            let p = dataset_preset(name).unwrap();
            assert_eq!(p.raw_neurons / p.neuron_bin, 140);
        }
        assert!(dataset_preset("mnist").is_err());
    }
}
