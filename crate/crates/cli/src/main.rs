use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qcaps::data::{label_histogram, Dataset, DatasetKind, SplitMode, SplitSpec};
use qcaps::train::checkpoint::Checkpoint;
use qcaps::train::gradcheck::run_suite;
use qcaps::train::trainer::evaluate_checkpoint;
use qcaps::train::{train, TrainConfig, TrainOptions};
use qcaps::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "qcaps", version, about = "Quaternion capsule networks: training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint and a metrics CSV under the output directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference gradient checks in 64-bit precision.
    Gradcheck {
        /// Override every per-component tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Trainable-parameter census of a configuration.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Parse every file of a dataset and print its summary.
    Verify {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other configuration key; applied after the flags above.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Stop after this many optimizer steps (a checkpoint is written).
    #[arg(long)]
    max_steps: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the dataset the checkpoint was trained on.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    split: Option<SplitMode>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_)
        | Error::CheckpointMismatch(_)
        | Error::FieldTooSmall { .. }
        | Error::ShapeMismatch { .. }
        | Error::AlignmentError { .. }
        | Error::EmptyChildren
        | Error::BadTarget { .. }
        | Error::NonScalarLoss { .. } => EXIT_CONFIG,
        Error::BadMagic { .. }
        | Error::TruncatedFile { .. }
        | Error::DimensionMismatch(_)
        | Error::MissingCompanion(_)
        | Error::MissingMeta { .. }
        | Error::DatasetMissing(_)
        | Error::BadCheckpoint(_)
        | Error::Io { .. } => EXIT_DATA,
        Error::DegenerateAxis { .. } | Error::NonUnitRotor { .. } | Error::NonFiniteLoss { .. } => EXIT_NUMERICAL,
    }
}

fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> qcaps::Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::ConfigInvalid(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> qcaps::Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(d) = &a.dataset {
        cfg.set("dataset", d)?;
    }
    if let Some(d) = a.data_dir {
        cfg.data_dir = d;
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    apply_overrides(&mut cfg, &a.overrides)?;
    let opts = TrainOptions {
        max_steps: a.max_steps,
        resume: a.resume,
        verbose: !a.quiet,
    };
    let s = train(&cfg, &opts)?;
    println!("steps: {}", s.steps);
    println!("completed: {}", s.completed);
    for (epoch, loss) in &s.epoch_losses {
        println!("epoch {epoch} mean loss: {loss:.6}");
    }
    for (kind, m) in &s.evals {
        println!("{} accuracy: {:.4} ({} samples)", kind.name(), m.accuracy, m.samples);
    }
    println!("checkpoint: {}", s.checkpoint.display());
    println!("metrics: {}", s.metrics.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> qcaps::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = TrainConfig::parse(&ck.config)?;
    if let Some(d) = &a.dataset {
        cfg.set("dataset", d)?;
    }
    if let Some(s) = a.split {
        cfg.split = s;
    }
    if let Some(d) = a.data_dir {
        cfg.data_dir = d;
    }
    apply_overrides(&mut cfg, &a.overrides)?;
    let rows = evaluate_checkpoint(&ck, &cfg)?;
    println!("checkpoint step {} dataset {} split {}", ck.step, cfg.dataset, cfg.split);
    println!("{:<10} {:>8} {:>10} {:>10} {:>10}", "set", "samples", "accuracy", "error", "loss");
    for (kind, m) in rows {
        println!(
            "{:<10} {:>8} {:>10.4} {:>10.4} {:>10.5}",
            kind.name(),
            m.samples,
            m.accuracy,
            m.error_rate,
            m.loss
        );
    }
    Ok(())
}

fn run_gradcheck(tolerance: Option<f64>) -> qcaps::Result<bool> {
    let rows = run_suite(tolerance)?;
    println!("{:<48} {:>12} {:>10} {:>7}  result", "component", "max rel err", "tolerance", "coords");
    for r in &rows {
        println!(
            "{:<48} {:>12.3e} {:>10.1e} {:>7}  {}",
            r.component,
            r.max_rel_error,
            r.tolerance,
            r.coords,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", rows.len() - failed, rows.len());
    Ok(failed == 0)
}

fn run_params(config: Option<PathBuf>, overrides: &[String]) -> qcaps::Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(&p)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, overrides)?;
    cfg.validate()?;
    let arch = cfg.architecture();
    let census = arch.census();
    println!("dataset {} ({} classes, {} input channels)", cfg.dataset, arch.classes, arch.in_channels);
    println!("input {0}x{0} x {1} channels", arch.image_size, arch.in_channels);
    for f in arch.field_chain()? {
        println!("field {}x{} x {} types", f.height, f.width, f.types);
    }
    println!("class capsules {}", arch.classes);
    for (module, n) in &census.modules {
        println!("module {module:<24} {n:>10}");
    }
    for (layer, pairs) in &census.rotor_pairs {
        println!("rotor pairs {layer:<19} {pairs:>10}");
    }
    println!("transform params (rotors)  {:>10}", census.transform_params);
    println!("transform params (4x4)     {:>10}", census.matrix_transform_params);
    println!("transform ratio            {:>10}", census.transform_ratio());
    println!("total trainable            {:>10}", census.total);
    Ok(())
}

fn run_verify(dataset: &str, dir: &std::path::Path) -> qcaps::Result<()> {
    let kind: DatasetKind = dataset.parse()?;
    let data = Dataset::load(kind, dir, Default::default())?;
    data.verify()?;
    for (name, samples) in [("train", &data.train), ("test", &data.test)] {
        let first = &samples[0].image;
        println!(
            "{name}: {} samples of {}x{}x{}",
            samples.len(),
            first.channels,
            first.height,
            first.width
        );
        println!("{name} labels: {:?}", label_histogram(samples, kind.classes()));
    }
    if kind.has_viewpoints() {
        for mode in [SplitMode::NovelAzimuth, SplitMode::NovelElevation] {
            let spec = SplitSpec::new(mode);
            let split = qcaps::data::viewpoint_split(&data.train, &data.test, &spec)?;
            println!(
                "{mode}: {} train, {} familiar test, {} novel test",
                split.train.len(),
                split.familiar.len(),
                split.novel.len()
            );
        }
    }
    println!("ok");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Gradcheck { tolerance } => run_gradcheck(tolerance),
        Command::Params { config, overrides } => run_params(config, &overrides).map(|_| true),
        Command::Data {
            command: DataCommand::Verify { dataset, data_dir },
        } => run_verify(&dataset, &data_dir).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NUMERICAL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
