//! Command-line front end: `train`, `eval`, `profile`, `ingest`, `synth`.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikcommander::attention::TemporalMask;
use spikcommander::blocks::{InputKind, SpikCommander};
use spikcommander::config::{parse_config, RunConfig};
use spikcommander::data::{
    assemble_batch, dense_to_events, load_dataset, parse_csv_events, synth_dataset, write_events, Dataset,
    EventDataset, IngestStats, SynthConfig,
};
use spikcommander::trainer::{evaluate, train, TrainOptions, DEFAULT_SEED};
use spikcommander::{build_id, Error, Result, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "spikcommander", version, about = "Spiking transformer training and profiling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes config, seed, metrics and checkpoints to --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Accuracy of a checkpoint on a test set.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test data; `data.test` from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-layer operation counts and energy of one inference pass.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        input: Option<InputArg>,
        /// Samples to profile on; random inputs when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Input firing rate of random spike inputs.
        #[arg(long, default_value_t = 0.1)]
        rate: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON-lines report destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a CSV event dump (time_us,neuron,label) into SPKE.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        neurons: Option<u16>,
    },
    /// Write a planted-motif spike dataset as SPKE.
    Synth {
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long = "t", default_value_t = 50)]
        steps: usize,
        #[arg(long = "n", default_value_t = 16)]
        neurons: usize,
        #[arg(long, default_value_t = 100)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 10.0)]
        delta_t_ms: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InputArg {
    Spike,
    Analog,
}

impl From<InputArg> for InputKind {
    fn from(a: InputArg) -> Self {
        match a {
            InputArg::Spike => InputKind::Spike,
            InputArg::Analog => InputKind::Analog,
        }
    }
}

/// Run the command line `argv` (program name first) and return the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            seed,
            out,
            quiet,
        } => cmd_train(config.as_deref(), seed, &out, quiet),
        Command::Eval {
            config,
            checkpoint,
            data,
        } => cmd_eval(config.as_deref(), &checkpoint, data.as_deref()),
        Command::Profile {
            config,
            checkpoint,
            input,
            data,
            samples,
            rate,
            seed,
            out,
        } => cmd_profile(
            config.as_deref(),
            &checkpoint,
            input.map(InputKind::from),
            data.as_deref(),
            samples,
            rate,
            seed,
            out.as_deref(),
        ),
        Command::Ingest { input, out, neurons } => cmd_ingest(&input, &out, neurons),
        Command::Synth {
            classes,
            steps,
            neurons,
            samples_per_class,
            delta_t_ms,
            seed,
            out,
        } => cmd_synth(classes, steps, neurons, samples_per_class, delta_t_ms, seed, &out),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => parse_config(p).map_err(|e| match e {
            Error::Io(io) => Error::Input(format!("{}: {io}", p.display())),
            other => other,
        }),
        None => Ok(RunConfig::default()),
    }
}

/// Seed precedence: command line, then config, then the default.
pub fn resolve_seed(cli: Option<u64>, config: Option<u64>) -> u64 {
    cli.or(config).unwrap_or(DEFAULT_SEED)
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let mut stats = IngestStats::default();
    let d = load_dataset(path, cfg.data.neuron_bin, cfg.data.delta_t_ms, &mut stats)
        .map_err(|e| with_path(e, path))?;
    if stats.unsorted_repaired > 0 {
        eprintln!("{}: repaired {} unsorted samples", path.display(), stats.unsorted_repaired);
    }
    Ok(d)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Input(format!("{}: {io}", path.display())),
        other => other,
    }
}

fn load_model(path: &Path) -> Result<SpikCommander> {
    SpikCommander::load(path).map_err(|e| with_path(e, path))
}

fn cmd_train(config: Option<&Path>, seed: Option<u64>, out: &Path, quiet: bool) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.train.seed = resolve_seed(seed, Some(cfg.train.seed));
    let train_path = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| Error::Config("data.train is not set".into()))?;
    let train_set = load_data(&train_path, &cfg)?;
    let val_set = match &cfg.data.val {
        Some(p) => Some(load_data(p, &cfg)?),
        None => None,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.echo()?)?;
    std::fs::write(out.join("seed"), format!("{}\n", cfg.train.seed))?;
    std::fs::write(out.join("build_id"), format!("{}\n", build_id()))?;
    let mut model = SpikCommander::new(cfg.model.clone(), cfg.train.seed)?;
    let opts = TrainOptions {
        target_t: Some(cfg.target_t()),
        augment: Some(cfg.augment.clone()).filter(|a| !a.is_identity()),
        out_dir: Some(out.to_path_buf()),
        verbose: !quiet,
    };
    let report = train(&mut model, &train_set, val_set.as_ref(), &cfg.train, &opts)?;
    model.save(&out.join("final.spkc"))?;
    let last = report.metrics.last();
    println!(
        "trained {} epochs, {} parameters; final train acc {:.4}; best val acc {:.4} at epoch {}",
        report.metrics.len(),
        model.param_count(),
        last.map_or(f64::NAN, |m| m.train_acc),
        report.best_val_acc,
        report.best_epoch.map_or("-".to_string(), |e| e.to_string())
    );
    println!("run directory: {}", out.display());
    Ok(())
}

fn cmd_eval(config: Option<&Path>, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let model = load_model(checkpoint)?;
    let path = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.test.clone())
        .ok_or_else(|| Error::Config("no test data: pass --data or set data.test".into()))?;
    let test = load_data(&path, &cfg)?;
    let target_t = cfg.data.target_t.unwrap_or(model.config.time_steps);
    let (loss, acc) = evaluate(&model, &test, cfg.train.batch_size, target_t)?;
    println!("samples {} accuracy {:.4} loss {:.4}", test.len(), acc, loss);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_profile(
    config: Option<&Path>,
    checkpoint: &Path,
    input: Option<InputKind>,
    data: Option<&Path>,
    samples: usize,
    rate: f64,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let mut model = load_model(checkpoint)?;
    let kind = input.unwrap_or(model.config.input_kind);
    if kind != model.config.input_kind {
        return Err(Error::Config(format!(
            "--input {kind:?} does not match the model's {:?} input",
            model.config.input_kind
        )));
    }
    if samples == 0 {
        return Err(Error::Config("--samples must be >= 1".into()));
    }
    let target_t = cfg.data.target_t.unwrap_or(model.config.time_steps);
    let (x, mask) = match data {
        Some(p) => {
            let d = load_data(p, &cfg)?;
            let n = samples.min(d.len());
            let dense = (0..n).map(|i| d.materialize(i, None)).collect::<Result<Vec<_>>>()?;
            let b = assemble_batch(&dense, target_t, &mut IngestStats::default())?;
            (b.x, b.mask)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(resolve_seed(seed, Some(cfg.train.seed)));
            let shape = [target_t, samples, model.config.input_neurons];
            let x = match kind {
                InputKind::Spike => Tensor::from_fn(&shape, |_| f64::from(u8::from(rng.gen_bool(rate.clamp(0.0, 1.0))))),
                InputKind::Analog => Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)),
            };
            (x, TemporalMask::all_valid(target_t, samples))
        }
    };
    model.fold_bn()?;
    let report = model.estimate_energy(&x, &mask)?;
    print!("{}", report.render_text());
    if let Some(p) = out {
        std::fs::write(p, report.to_jsonl())?;
    }
    Ok(())
}

fn cmd_ingest(input: &Path, out: &Path, neurons: Option<u16>) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| with_path(e.into(), input))?;
    let mut stats = IngestStats::default();
    let ds = parse_csv_events(&text, neurons, &mut stats)?;
    write_events(out, &ds)?;
    println!(
        "wrote {} samples over {} neurons to {} ({} re-sorted)",
        ds.samples.len(),
        ds.neurons,
        out.display(),
        stats.unsorted_repaired
    );
    Ok(())
}

fn cmd_synth(
    classes: usize,
    steps: usize,
    neurons: usize,
    samples_per_class: usize,
    delta_t_ms: f64,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let neurons16 = u16::try_from(neurons).map_err(|_| Error::Config(format!("--n {neurons} exceeds u16")))?;
    let cfg = SynthConfig::new(classes, samples_per_class, steps, neurons, resolve_seed(seed, None));
    let samples = synth_dataset(&cfg)?
        .iter()
        .map(|d| dense_to_events(d, delta_t_ms))
        .collect::<Result<Vec<_>>>()?;
    let ds = EventDataset {
        neurons: neurons16,
        samples,
    };
    write_events(out, &ds)?;
    println!("wrote {} samples to {}", ds.samples.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some(2)), 1);
        assert_eq!(resolve_seed(None, Some(2)), 2);
        assert_eq!(resolve_seed(None, None), 312);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(dispatch(["spikcommander", "fly"]), EXIT_USAGE);
        assert_eq!(dispatch(["spikcommander"]), EXIT_USAGE);
        assert_eq!(dispatch(["spikcommander", "eval"]), EXIT_USAGE);
        assert_eq!(dispatch(["spikcommander", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_checkpoint_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("none.spkc");
        let code = dispatch(["spikcommander", "eval", "--checkpoint", ck.to_str().unwrap(), "--data", "x.spke"]);
        assert_eq!(code, EXIT_RUNTIME);
    }

    #[test]
    fn synth_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.spke");
        let b = dir.path().join("b.spke");
        for p in [&a, &b] {
            let code = dispatch([
                "spikcommander",
                "synth",
                "--classes",
                "2",
                "--t",
                "50",
                "--n",
                "16",
                "--seed",
                "7",
                "--out",
                p.to_str().unwrap(),
            ]);
            assert_eq!(code, EXIT_OK);
        }
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
