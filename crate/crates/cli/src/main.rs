use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fergcn_core::config::RunConfig;
use fergcn_core::container::{load_checkpoint, read_dataset, save_checkpoint, write_dataset};
use fergcn_core::export::{export_heatmaps, export_weights, heatmaps};
use fergcn_core::synth::{make_dataset, CurveFamily, SyntheticSpec};
use fergcn_core::trainer::{
    ablation, ablation_table, confusion_table, evaluate, metrics_csv, train_with, Variant,
};
use fergcn_core::verify::{self, Scope};
use fergcn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fergcn", version, about = "Graph-convolutional expression recognition on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write metrics.csv and checkpoint.fgck.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and compare model variants.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Export intensity-weight curves or feature heatmaps.
    Export(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Curve {
    Ramp,
    Bump,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Frame side length in pixels.
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, value_enum, default_value_t = Curve::Ramp)]
    curve: Curve,
    #[arg(long, default_value_t = SyntheticSpec::default().noise_sigma)]
    noise: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SyntheticSpec::default().distractors)]
    distractors: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Run configuration: a `key=value` file plus flags that override it.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    module_count: Option<usize>,
    #[arg(long)]
    fusion: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mean_axis: Option<String>,
    #[arg(long)]
    cell: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    split: Split,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated module counts; a trailing `f` enables weighted fusion.
    #[arg(long, default_value = "0,1,2,3,2f")]
    variants: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// ops, module, end_to_end, stop_gradient or all.
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Weights,
    Heatmaps,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, default_value = "export")]
    out: PathBuf,
}

/// 1 for usage and configuration errors, 2 for numerical failures, 3 for I/O
/// and file-format errors.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } => 3,
        _ => 1,
    }
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text)?;
    }
    let overrides: [(&str, Option<String>); 14] = [
        ("dataset", args.data.as_ref().map(|p| p.display().to_string())),
        ("output", args.out.as_ref().map(|p| p.display().to_string())),
        ("N", args.frames.map(|v| v.to_string())),
        ("d", args.dim.map(|v| v.to_string())),
        ("K", args.classes.map(|v| v.to_string())),
        ("module_count", args.module_count.map(|v| v.to_string())),
        ("use_weighted_fusion", args.fusion.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("learning_rate", args.lr.map(|v| v.to_string())),
        ("weight_decay", args.weight_decay.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("fusion_mean_axis", args.mean_axis.clone()),
        ("cell", args.cell.clone()),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset given (use --data or dataset=...)".into()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output.clone().unwrap_or_else(|| PathBuf::from("run"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn gen(a: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        classes: a.classes,
        frames: a.frames,
        rows: a.size,
        cols: a.size,
        curve: match a.curve {
            Curve::Ramp => CurveFamily::Ramp,
            Curve::Bump => CurveFamily::Bump,
        },
        noise_sigma: a.noise,
        distractors: a.distractors,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let ds = make_dataset(&spec, a.per_class)?;
    write_dataset(&ds, &a.out)?;
    let split = ds.split();
    println!(
        "wrote {} clips ({} train / {} val) to {}",
        ds.samples.len(),
        split.train.len(),
        split.val.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = run_config(&a.run)?;
    let ds = read_dataset(dataset_path(&cfg)?)?;
    let dir = output_dir(&cfg)?;
    let out = train_with(&cfg, &ds, |r| {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}  |A offdiag| {:.3e}",
            r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy, r.a_offdiag
        );
    })?;
    write(&dir.join("metrics.csv"), &metrics_csv(&out.metrics))?;
    write(&dir.join("config.txt"), &cfg.to_text())?;
    save_checkpoint(&out.model, dir.join("checkpoint.fgck"))?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let split = ds.split();
    let indices: Vec<usize> = match a.split {
        Split::Train => split.train,
        Split::Val => split.val,
        Split::All => (0..ds.samples.len()).collect(),
    };
    let e = evaluate(&model, &ds, &indices)?;
    println!("accuracy {:.4} over {} clips", e.accuracy, indices.len());
    print!("{}", confusion_table(&e));
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = run_config(&a.run)?;
    let variants = Variant::parse_list(&a.variants)?;
    let ds = read_dataset(dataset_path(&cfg)?)?;
    let rows = ablation(&cfg, &ds, &variants)?;
    let table = ablation_table(&rows);
    print!("{table}");
    if cfg.output.is_some() {
        let dir = output_dir(&cfg)?;
        write(&dir.join("ablation.txt"), &table)?;
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let report = verify::run(Scope::parse(&a.scope)?, a.seed)?;
    print!("{report}");
    Ok(report.passed())
}

fn export(a: &ExportArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let written = match a.kind {
        Kind::Weights => export_weights(&model.intensity_weights()?, &a.out)?,
        Kind::Heatmaps => export_heatmaps(&heatmaps(&model, &ds)?, &a.out)?,
    };
    println!("wrote {} files to {}", written.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::from(2);
            }
            Err(e) => Err(e),
        },
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
