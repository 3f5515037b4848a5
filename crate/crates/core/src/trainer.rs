//! Backpropagation-through-time training with AdamW and a restarting cosine
//! schedule.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::TemporalMask;
use crate::autodiff::Tape;
use crate::blocks::{argmax, classify, SpikCommander};
use crate::data::{assemble_batch, AugmentConfig, Batch, Dataset, IngestStats};
use crate::error::{Error, Result};
use crate::nn::{apply_bn_updates, ForwardCtx, Mode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_SEED: u64 = 312;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub scheduler_t_max: usize,
    pub seed: u64,
    /// Max global gradient norm; no clipping when absent.
    pub grad_clip: Option<f64>,
    /// Fraction of training data held out when no validation set is given.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 1e-2,
            epochs: 500,
            batch_size: 256,
            scheduler_t_max: 40,
            seed: DEFAULT_SEED,
            grad_clip: None,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted as a no-op run
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.scheduler_t_max == 0 {
            return Err(Error::Config("train.scheduler_t_max must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("train.grad_clip must be > 0".into()));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("train.val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam moments for every parameter in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update. Decay is decoupled and skips parameters marked
/// `NoDecay`; buffers are never touched. Parameters without a gradient are
/// left unchanged.
pub fn adamw_step<'a>(
    store: &mut ParamStore,
    grads: impl IntoIterator<Item = (ParamId, &'a Tensor)>,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut grads: Vec<(ParamId, &Tensor)> = grads.into_iter().collect();
    grads.sort_by_key(|(id, _)| *id);
    for (id, g) in &grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (id, g) in grads {
        let kind = store.entry(id).kind;
        if kind == ParamKind::Buffer {
            continue;
        }
        let i = id.index();
        let decay = if kind == ParamKind::Weight { lr * weight_decay } else { 0.0 };
        let p = store.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for k in 0..p.len() {
            p[k] -= decay * p[k];
            m[k] = b1 * m[k] + (1.0 - b1) * g.data()[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g.data()[k] * g.data()[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            p[k] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Cosine annealing with warm restarts every `t_max` epochs, `eta_min = 0`.
pub fn cosine_lr(epoch: usize, base_lr: f64, t_max: usize) -> f64 {
    let phase = (epoch % t_max.max(1)) as f64 / t_max.max(1) as f64;
    base_lr * (1.0 + (PI * phase).cos()) / 2.0
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_ms: u64,
}

/// Everything besides the model and hyper-parameters that a run needs.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Padded sequence length; defaults to the model's configured `T`.
    pub target_t: Option<usize>,
    pub augment: Option<AugmentConfig>,
    /// Receives `metrics.jsonl` and `best.spkc` when set.
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: f64,
    pub stats: IngestStats,
}

/// Loss and accuracy of `model` on `data` in eval mode.
pub fn evaluate(model: &SpikCommander, data: &Dataset, batch_size: usize, target_t: usize) -> Result<(f64, f64)> {
    let mut stats = IngestStats::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = build_batch(data, chunk, None, 0, target_t, &mut stats)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone());
        let (l, yhat) = model.loss(&mut tape, &mut ForwardCtx::eval(), x, &batch.mask, &batch.labels)?;
        loss += tape.value(l).data()[0] * chunk.len() as f64;
        correct += count_correct(tape.value(yhat), &batch.labels);
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Predicted classes for every sample of `data`.
pub fn predict_all(model: &SpikCommander, data: &Dataset, batch_size: usize, target_t: usize) -> Result<Vec<usize>> {
    let mut stats = IngestStats::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = build_batch(data, chunk, None, 0, target_t, &mut stats)?;
        let scores = model.scores(&batch.x, &batch.mask)?;
        out.extend(classify(&scores, Some(&batch.mask))?.predicted);
    }
    Ok(out)
}

fn count_correct(yhat: &Tensor, labels: &[usize]) -> usize {
    let y = yhat.last_dim();
    yhat.data()
        .chunks(y)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Derive an independent stream seed from a base seed and indices.
fn stream_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn build_batch(
    data: &Dataset,
    idx: &[usize],
    augment: Option<&AugmentConfig>,
    epoch: usize,
    target_t: usize,
    stats: &mut IngestStats,
) -> Result<Batch> {
    let samples = idx
        .iter()
        .map(|&i| match augment {
            Some(cfg) if !cfg.is_identity() => {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.rng_seed, epoch as u64, i as u64));
                data.materialize(i, Some((cfg, &mut rng)))
            }
            _ => data.materialize(i, None),
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_batch(&samples, target_t, stats)
}

/// Seeded train/validation split: shuffle, then hold out the last
/// `fraction` of the indices.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, u64::MAX, 0)));
    let n_val = if n >= 2 && fraction > 0.0 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Train `model` on `train` and track the best validation accuracy.
///
/// Without an explicit validation set, a seeded fraction of `train` is held
/// out. A non-finite loss aborts the run; the best checkpoint written so far
/// stays on disk.
pub fn train(
    model: &mut SpikCommander,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if train.features() != model.config.input_neurons {
        return Err(crate::error::dim_err(
            "train",
            "features",
            model.config.input_neurons,
            train.features(),
        ));
    }
    let target_t = opts.target_t.unwrap_or(model.config.time_steps);
    let (train_set, val_set) = match val {
        Some(v) => (train.clone(), Some(v.clone())),
        None => {
            let (tr, va) = split_indices(train.len(), cfg.val_fraction, cfg.seed);
            let va = (!va.is_empty()).then(|| train.subset(&va));
            (train.subset(&tr), va)
        }
    };
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let mut opt = OptimizerState::new(&model.store);
    let mut stats = IngestStats::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let (mut best_epoch, mut best_val_acc) = (None, f64::NEG_INFINITY);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg.lr, cfg.scheduler_t_max);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = build_batch(&train_set, chunk, opts.augment.as_ref(), epoch, target_t, &mut stats)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch.x);
            let mut ctx = ForwardCtx::new(Mode::Train, stream_seed(cfg.seed, epoch as u64, bi as u64));
            ctx.dropout_p = model.config.dropout;
            let (loss, yhat) = model.loss(&mut tape, &mut ctx, x, &batch.mask, &batch.labels)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, loss: lv });
            }
            loss_sum += lv * chunk.len() as f64;
            correct += count_correct(tape.value(yhat), &batch.labels);
            let grads = tape.backward(loss)?;
            let mut gs: Vec<(ParamId, Tensor)> = grads.params().map(|(id, g)| (id, g.clone())).collect();
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut gs, c);
            }
            adamw_step(&mut model.store, gs.iter().map(|(id, g)| (*id, g)), &mut opt, lr, cfg.weight_decay)?;
            apply_bn_updates(&mut model.store, &ctx.bn_updates);
        }
        let n = train_set.len() as f64;
        let (val_loss, val_acc) = match &val_set {
            Some(v) => evaluate(model, v, cfg.batch_size, target_t)?,
            None => (f64::NAN, f64::NAN),
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if !m.train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: m.train_loss,
            });
        }
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", metrics_line(&m))?;
        }
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>4} lr {lr:.2e} loss {:.4} acc {:.3} val_loss {:.4} val_acc {:.3}",
                m.train_loss, m.train_acc, m.val_loss, m.val_acc
            );
        }
        let score = if val_acc.is_nan() { m.train_acc } else { val_acc };
        if score > best_val_acc {
            best_val_acc = score;
            best_epoch = Some(epoch);
            if let Some(dir) = &opts.out_dir {
                model.save(&dir.join("best.spkc"))?;
            }
        }
        metrics.push(m);
    }
    Ok(TrainReport {
        metrics,
        best_epoch,
        best_val_acc,
        stats,
    })
}

/// JSON line for one epoch; undefined losses and accuracies are `null`.
pub fn metrics_line(m: &EpochMetrics) -> String {
    serde_json::to_string(m).expect("metrics serialize")
}

/// Metrics log with timing fields removed, for replay comparisons.
pub fn metrics_fingerprint(metrics: &[EpochMetrics]) -> Vec<String> {
    metrics
        .iter()
        .map(|m| metrics_line(&EpochMetrics { wall_ms: 0, ..m.clone() }))
        .collect()
}

pub fn best_checkpoint(dir: &Path) -> PathBuf {
    dir.join("best.spkc")
}

/// Single-sample mask helper for callers assembling their own batches.
pub fn full_mask(steps: usize, batch: usize) -> TemporalMask {
    TemporalMask::all_valid(steps, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{InputKind, ModelConfig};
    use crate::data::{synth_dataset, SynthConfig};

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 0.01, 40), 0.01);
        assert!((cosine_lr(20, 0.01, 40) - 0.005).abs() < 1e-15);
        assert_eq!(cosine_lr(40, 0.01, 40), 0.01);
        assert!(cosine_lr(39, 0.01, 40) < 1e-4);
    }

    fn scalar_store(v: f64, kind: ParamKind) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v), kind);
        (s, id)
    }

    #[test]
    fn zero_grads_no_decay_is_identity() {
        let (mut s, id) = scalar_store(0.7, ParamKind::Weight);
        let mut st = OptimizerState::new(&s);
        let g = Tensor::scalar(0.0);
        for _ in 0..5 {
            adamw_step(&mut s, [(id, &g)], &mut st, 0.1, 0.0).unwrap();
        }
        assert_eq!(s.get(id).data()[0], 0.7);
    }

    #[test]
    fn decay_alone_shrinks_geometrically() {
        let (mut s, id) = scalar_store(2.0, ParamKind::Weight);
        let mut st = OptimizerState::new(&s);
        let g = Tensor::scalar(0.0);
        let (lr, wd) = (0.1, 0.5);
        for _ in 0..7 {
            adamw_step(&mut s, [(id, &g)], &mut st, lr, wd).unwrap();
        }
        let want = 2.0 * (1.0f64 - lr * wd).powi(7);
        assert!((s.get(id).data()[0] - want).abs() < 1e-14);

        let (mut s, id) = scalar_store(2.0, ParamKind::NoDecay);
        let mut st = OptimizerState::new(&s);
        adamw_step(&mut s, [(id, &g)], &mut st, lr, wd).unwrap();
        assert_eq!(s.get(id).data()[0], 2.0);
    }

    #[test]
    fn matches_hand_iterated_recurrence() {
        let (mut s, id) = scalar_store(1.0, ParamKind::Weight);
        let mut st = OptimizerState::new(&s);
        let gs = [0.5, -0.2, 0.9, 0.0, -1.3];
        let (lr, wd) = (0.01, 0.1);
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (k, &g) in gs.iter().enumerate() {
            adamw_step(&mut s, [(id, &Tensor::scalar(g))], &mut st, lr, wd).unwrap();
            let t = (k + 1) as i32;
            p *= 1.0 - lr * wd;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            p -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((s.get(id).data()[0] - p).abs() < 1e-10);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = ParamStore::new();
        let id = s.add("blocks.0.mstasa.q.conv.weight", Tensor::scalar(1.0), ParamKind::Weight);
        let mut st = OptimizerState::new(&s);
        let err = adamw_step(&mut s, [(id, &Tensor::scalar(f64::NAN))], &mut st, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("blocks.0.mstasa.q.conv.weight"));
        assert_eq!(s.get(id).data()[0], 1.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![(ParamId(0), Tensor::new(&[2], vec![3.0, 4.0]).unwrap())];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (a, b) = split_indices(50, 0.1, 3);
        assert_eq!((a.len(), b.len()), (45, 5));
        assert_eq!(split_indices(50, 0.1, 3), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    fn tiny_model() -> SpikCommander {
        let cfg = ModelConfig {
            blocks: 1,
            heads: 2,
            hidden: 8,
            input_neurons: 8,
            window_radius: 2,
            time_steps: 12,
            expansion: 2,
            classes: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        SpikCommander::new(cfg, 5).unwrap()
    }

    fn tiny_data(n: usize) -> Dataset {
        let samples = synth_dataset(&SynthConfig::new(2, n / 2, 12, 8, 9)).unwrap();
        Dataset::Dense {
            samples,
            kind: InputKind::Spike,
        }
    }

    #[test]
    fn zero_lr_leaves_weights_bit_identical() {
        let mut m = tiny_model();
        let before: Vec<Tensor> = m
            .store
            .entries()
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.value.clone())
            .collect();
        let cfg = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            epochs: 1,
            batch_size: 1,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let data = tiny_data(2).subset(&[0]);
        train(&mut m, &data, None, &cfg, &TrainOptions::default()).unwrap();
        let after: Vec<Tensor> = m
            .store
            .entries()
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.value.clone())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn replay_is_deterministic() {
        let cfg = TrainConfig {
            lr: 5e-3,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = tiny_model();
            let r = train(&mut m, &tiny_data(16), None, &cfg, &TrainOptions::default()).unwrap();
            (metrics_fingerprint(&r.metrics), m.store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn writes_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let mut m = tiny_model();
        train(&mut m, &tiny_data(16), None, &cfg, &opts).unwrap();
        let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for k in ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "wall_ms"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(SpikCommander::load(&best_checkpoint(dir.path())).is_ok());
    }

    #[test]
    fn rejects_empty_and_mismatched_data() {
        let mut m = tiny_model();
        let cfg = TrainConfig::default();
        let empty = Dataset::Dense {
            samples: vec![],
            kind: InputKind::Spike,
        };
        assert!(matches!(train(&mut m, &empty, None, &cfg, &TrainOptions::default()), Err(Error::Input(_))));
        let wrong = Dataset::Dense {
            samples: synth_dataset(&SynthConfig::new(2, 2, 12, 6, 1)).unwrap(),
            kind: InputKind::Spike,
        };
        assert!(train(&mut m, &wrong, None, &cfg, &TrainOptions::default()).is_err());
    }
}
