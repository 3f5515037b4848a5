use spikcommander::attention::TemporalMask;
use spikcommander::blocks::{InputKind, ModelConfig, SpikCommander};
use spikcommander::data::{
    assemble_batch, dense_to_events, encode_analog, load_dataset, synth_dataset, write_events, AnalogDataset,
    Dataset, DenseSample, EventDataset, IngestStats, SynthConfig,
};
use spikcommander::energy::energy_mj;
use spikcommander::trainer::{best_checkpoint, predict_all, train, TrainConfig, TrainOptions};
use spikcommander::{Error, Tensor};

fn tiny_model(neurons: usize, steps: usize) -> ModelConfig {
    ModelConfig {
        blocks: 1,
        heads: 2,
        hidden: 8,
        input_neurons: neurons,
        window_radius: 2,
        time_steps: steps,
        expansion: 2,
        classes: 2,
        ..ModelConfig::default()
    }
}

/// Nearest-centroid classifier on flattened `[T × N]` inputs: a linear
/// probe showing that the planted motifs are separable.
fn centroid_accuracy(train: &[DenseSample], test: &[DenseSample], classes: usize) -> f64 {
    let dim = train[0].tensor.len();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0.0; classes];
    for s in train {
        for (a, v) in sums[s.label].iter_mut().zip(s.tensor.data()) {
            *a += v;
        }
        counts[s.label] += 1.0;
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| s.iter().map(|v| v / c).collect())
        .collect();
    let correct = test
        .iter()
        .filter(|s| {
            let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(s.tensor.data()).map(|(a, b)| (a - b).powi(2)).sum() };
            let best = (0..classes)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == s.label
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn synthetic_task_is_linearly_separable() {
    let all = synth_dataset(&SynthConfig::new(2, 150, 50, 16, 312)).unwrap();
    let (train, test) = all.split_at(200);
    let acc = centroid_accuracy(train, test, 2);
    assert!(acc >= 0.99, "linear probe accuracy {acc}");
}

#[test]
fn synthetic_events_survive_the_file_format() {
    let dense = synth_dataset(&SynthConfig::new(3, 4, 20, 6, 9)).unwrap();
    let ds = EventDataset {
        neurons: 6,
        samples: dense.iter().map(|d| dense_to_events(d, 10.0).unwrap()).collect(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.spke");
    write_events(&path, &ds).unwrap();
    let loaded = load_dataset(&path, 1, 10.0, &mut IngestStats::default()).unwrap();
    assert_eq!(loaded.len(), dense.len());
    for (i, d) in dense.iter().enumerate() {
        assert_eq!(&loaded.materialize(i, None).unwrap(), d);
    }
}

#[test]
fn analog_files_load_as_dense_analog() {
    let samples = vec![DenseSample {
        tensor: Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.25, 1.5]).unwrap(),
        valid_steps: 2,
        label: 1,
    }];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.spka");
    let bytes = encode_analog(&AnalogDataset {
        features: 3,
        samples: samples.clone(),
    })
    .unwrap();
    std::fs::write(&path, bytes).unwrap();
    let d = load_dataset(&path, 1, 10.0, &mut IngestStats::default()).unwrap();
    assert_eq!(d.input_kind(), InputKind::Analog);
    assert_eq!(d.materialize(0, None).unwrap(), samples[0]);

    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"NOPE....").unwrap();
    assert!(matches!(
        load_dataset(&bad, 1, 10.0, &mut IngestStats::default()),
        Err(Error::Format(_))
    ));
}

#[test]
fn training_writes_a_reloadable_best_checkpoint() {
    let data = synth_dataset(&SynthConfig::new(2, 12, 12, 4, 1)).unwrap();
    let ds = Dataset::Dense {
        samples: data,
        kind: InputKind::Spike,
    };
    let mut model = SpikCommander::new(tiny_model(4, 12), 3).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    let report = train(&mut model, &ds, None, &cfg, &opts).unwrap();
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "wall_ms"] {
            assert!(v.get(key).is_some(), "missing {key} in {line}");
        }
    }
    assert!(report.best_epoch.is_some());
    let best = SpikCommander::load(&best_checkpoint(dir.path())).unwrap();
    assert_eq!(best.config, model.config);
    let preds = predict_all(&best, &ds, 8, 12).unwrap();
    assert_eq!(preds.len(), ds.len());
}

#[test]
fn profiling_needs_folding_and_obeys_the_energy_formula() {
    let data = synth_dataset(&SynthConfig::new(2, 2, 10, 5, 4)).unwrap();
    let batch = assemble_batch(&data, 10, &mut IngestStats::default()).unwrap();
    let mut model = SpikCommander::new(tiny_model(5, 10), 8).unwrap();
    model.init_running_stats();
    assert!(matches!(model.estimate_energy(&batch.x, &batch.mask), Err(Error::Config(_))));
    let before = model.scores(&batch.x, &batch.mask).unwrap();
    model.fold_bn().unwrap();
    let after = model.scores(&batch.x, &batch.mask).unwrap();
    assert!(before.max_abs_diff(&after) < 1e-9);
    let report = model.estimate_energy(&batch.x, &batch.mask).unwrap();
    assert!(!report.layers.is_empty());
    let expected = energy_mj(report.mac_flops() as f64, report.total_sops() as f64);
    assert!((report.total_mj - expected).abs() <= 1e-12 * expected.max(1e-12));
    // spike input: the only dense operations come from analog activations
    for l in &report.layers {
        assert!(l.sops <= l.flops, "{}", l.name);
    }
}

#[test]
fn analog_models_charge_the_input_layer_as_mac() {
    let cfg = ModelConfig {
        input_kind: InputKind::Analog,
        ..tiny_model(3, 6)
    };
    let mut model = SpikCommander::new(cfg, 2).unwrap();
    model.init_running_stats();
    model.fold_bn().unwrap();
    let x = Tensor::from_fn(&[6, 2, 3], |i| (i as f64 * 0.37).sin());
    let report = model
        .estimate_energy(&x, &TemporalMask::all_valid(6, 2))
        .unwrap();
    assert!(report.mac_flops() > 0);
}

#[test]
fn spike_models_reject_analog_input() {
    let model = SpikCommander::new(tiny_model(3, 6), 2).unwrap();
    let x = Tensor::full(&[6, 1, 3], 0.5);
    assert!(matches!(
        model.scores(&x, &TemporalMask::all_valid(6, 1)),
        Err(Error::Input(_))
    ));
}
