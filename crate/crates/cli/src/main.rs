use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsq_core::data::{self, DatasetId};
use lsq_core::harness::{
    self, experiment_dir, render_summary, run_cell, write_experiment, write_trace, Cell, ExperimentConfig,
    ExperimentKind, ExperimentResult,
};
use lsq_core::init::InitScheme;
use lsq_core::integer::{compare_paths, fold, FoldedNetwork};
use lsq_core::network::{checkpoint, LayerKind, Network};
use lsq_core::{ActivationKind, Error, OffsetMode, Tensor};

#[derive(Parser)]
#[command(name = "lsq", version, about = "Quantization-aware training with learnable scale and offset")]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for a single run; replaces the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the float network that quantized runs start from.
    PretrainFloat(PretrainArgs),
    /// Attach quantizers to a float checkpoint and initialize them.
    Calibrate(CellArgs),
    /// Calibrate and train one quantized network.
    TrainQat(CellArgs),
    /// Train every (bit-width, configuration) cell.
    Sweep(SweepArgs),
    /// Compare initialization schemes across seeds.
    Stability(SweepArgs),
    /// Compare learned offsets against frozen ones.
    FixedOffset(SweepArgs),
    /// Fold a quantized checkpoint into an integer network.
    Fold(FoldArgs),
    /// Check the integer path against the simulated-quantization path.
    VerifyFold(VerifyArgs),
    /// List learned offsets per layer next to the smallest inputs.
    BetaReport(BetaArgs),
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    dataset: Option<DatasetId>,
    #[arg(long)]
    activation: Option<ActivationKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
}

#[derive(Args)]
struct CellArgs {
    /// Float checkpoint to start from.
    #[arg(long)]
    float: PathBuf,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    /// Activation quantization configuration (1 to 4).
    #[arg(long = "quant-config", default_value_t = 4)]
    quant_config: u8,
    #[arg(long, default_value_t = InitScheme::LsqPlus)]
    scheme: InitScheme,
    /// Freeze activation offsets (`fixed_xmin` or `fixed_zero`).
    #[arg(long)]
    fixed_offset: Option<OffsetMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
}

#[derive(Args, Default)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    bits: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    configs: Option<Vec<u8>>,
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<InitScheme>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    offset_modes: Option<Vec<OffsetMode>>,
    /// Configuration held fixed by stability, fixed-offset and beta-report.
    #[arg(long)]
    fixed_config: Option<u8>,
    /// Shared float checkpoint.
    #[arg(long)]
    float: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    dataset: Option<DatasetId>,
    #[arg(long)]
    activation: Option<ActivationKind>,
}

#[derive(Args)]
struct FoldArgs {
    /// Trained quantized checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Exported folded model; folded on the fly when absent.
    #[arg(long)]
    folded: Option<PathBuf>,
    /// Largest allowed `|integer − float| / (1 + |float|)`.
    #[arg(long, default_value_t = 1e-5)]
    tol: f32,
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

#[derive(Args)]
struct BetaArgs {
    /// Report on this trained checkpoint instead of training one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    sweep: SweepArgs,
}

enum Failure {
    Config(String),
    Verification(String),
    Other(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::NoOffset(_) | Error::UnknownConfig(_) | Error::BitWidth(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Other(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.into())
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let Cli { config, seed, out, command } = cli;
    let base = |kind| -> CliResult<ExperimentConfig> {
        let mut cfg = match &config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::new(kind),
        };
        cfg.experiment = kind;
        if let Some(s) = seed {
            cfg.sweep.seeds = vec![s];
        }
        if let Some(o) = &out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    };
    match command {
        Command::PretrainFloat(args) => {
            let mut cfg = base(ExperimentKind::ConfigSweep)?;
            apply_common(&mut cfg, args.dataset, args.activation, None, None);
            if let Some(e) = args.epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(lr) = args.lr {
                cfg.pretrain.lr = lr;
            }
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            cfg.validate()?;
            let path = out.unwrap_or_else(|| PathBuf::from("float.lsqc"));
            pretrain(&cfg, &path)?;
            Ok(())
        }
        Command::Calibrate(args) => cell_command(base(ExperimentKind::ConfigSweep)?, args, seed, out, false),
        Command::TrainQat(args) => cell_command(base(ExperimentKind::ConfigSweep)?, args, seed, out, true),
        Command::Sweep(args) => experiment(base(ExperimentKind::ConfigSweep)?, args),
        Command::Stability(args) => experiment(base(ExperimentKind::InitStability)?, args),
        Command::FixedOffset(args) => experiment(base(ExperimentKind::FixedOffset)?, args),
        Command::Fold(args) => {
            let net = checkpoint::load(&args.checkpoint)?;
            let folded = fold(&net)?;
            let path = out.unwrap_or_else(|| args.checkpoint.with_extension("lsqf"));
            folded.save(&path)?;
            println!("wrote {}", path.display());
            for a in folded.accumulator_audit() {
                println!("layer {}: |acc| ≤ {} ({} bits{})", a.layer, a.bound, a.bits, if a.fits_i32() { "" } else { ", exceeds i32" });
            }
            Ok(())
        }
        Command::VerifyFold(args) => verify(&args),
        Command::BetaReport(args) => beta_report(base(ExperimentKind::BetaReport)?, args),
    }
}

fn apply_common(cfg: &mut ExperimentConfig, dataset: Option<DatasetId>, act: Option<ActivationKind>, epochs: Option<usize>, lr: Option<f32>) {
    if let Some(d) = dataset {
        cfg.dataset = d;
    }
    if let Some(a) = act {
        cfg.activation = a;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = lr {
        cfg.train.lr = lr;
    }
}

fn apply_sweep(cfg: &mut ExperimentConfig, args: SweepArgs) {
    let s = &mut cfg.sweep;
    if let Some(v) = args.bits {
        s.bits = v;
    }
    if let Some(v) = args.configs {
        s.configs = v;
    }
    if let Some(v) = args.schemes {
        s.schemes = v;
    }
    if let Some(v) = args.seeds {
        s.seeds = v;
    }
    if let Some(v) = args.offset_modes {
        s.offset_modes = v;
    }
    if let Some(v) = args.fixed_config {
        s.fixed_config = v;
    }
    if let Some(f) = args.float {
        cfg.float_checkpoint = Some(f);
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    apply_common(cfg, args.dataset, args.activation, args.epochs, args.lr);
}

fn pretrain(cfg: &ExperimentConfig, path: &Path) -> CliResult<Network> {
    eprintln!("pretraining {} / {} for {} epochs", cfg.dataset, cfg.activation, cfg.pretrain.epochs);
    let (net, trace) = harness::pretrain_float(cfg.dataset, cfg.activation, &cfg.pretrain)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    checkpoint::save(&net, path)?;
    let acc = trace.final_val_acc().unwrap_or(0.0);
    println!("wrote {} (val acc {:.2}%)", path.display(), 100.0 * acc);
    Ok(net)
}

/// The configured float checkpoint, or a fresh one saved under the output
/// directory.
fn float_for(cfg: &mut ExperimentConfig) -> CliResult<Network> {
    if cfg.float_checkpoint.is_some() {
        return Ok(harness::shared_float(cfg)?);
    }
    let path = cfg.output_dir.join("float.lsqc");
    let net = pretrain(cfg, &path)?;
    cfg.float_checkpoint = Some(path);
    Ok(net)
}

fn cell_command(mut cfg: ExperimentConfig, args: CellArgs, seed: Option<u64>, out: Option<PathBuf>, train: bool) -> CliResult<()> {
    apply_common(&mut cfg, None, None, args.epochs, args.lr);
    cfg.float_checkpoint = Some(args.float.clone());
    if !train {
        cfg.train.epochs = 0;
    }
    cfg.validate()?;
    let float = checkpoint::load(&args.float)?;
    if float.is_quantized() {
        return Err(Failure::Config(format!("{} is not a float checkpoint", args.float.display())));
    }
    cfg.dataset = dataset_for(float.spec().input_shape.as_slice());
    if let Some(act) = activation_of(&float) {
        cfg.activation = act;
    }
    let split = data::load(cfg.dataset);
    let cell = Cell {
        bits: args.bits,
        config: args.quant_config,
        scheme: args.scheme,
        fixed_offset: args.fixed_offset,
        seed: seed.unwrap_or(0),
    };
    let run = run_cell(&float, &split, &cell, &cfg)?;
    let path = out.unwrap_or_else(|| PathBuf::from(format!("{}.lsqc", run.record.stem())));
    checkpoint::save(&run.network, &path)?;
    run.init.save_csv(path.with_extension("init.csv"))?;
    if train {
        write_trace(&run.trace, std::fs::File::create(path.with_extension("trace.csv"))?)?;
    }
    for e in &run.init.entries {
        let beta = e.beta_init.map_or("-".to_string(), |b| format!("{b:.5}"));
        println!("{:<16} s={:<10.6} β={:<10} mse={:.3e}", e.layer, e.s_init, beta, e.mse);
    }
    println!(
        "wrote {}: val acc {:.2}%, train acc {:.2}%",
        path.display(),
        100.0 * run.record.final_val_acc,
        100.0 * run.record.final_train_acc
    );
    Ok(())
}

fn activation_of(net: &Network) -> Option<ActivationKind> {
    net.spec().layers.iter().find_map(|l| match l.kind {
        LayerKind::Activation(a) => Some(a),
        _ => None,
    })
}

fn dataset_for(input_shape: &[usize]) -> DatasetId {
    match input_shape {
        [2] => DatasetId::Spiral,
        _ => DatasetId::Digits,
    }
}

fn experiment(mut cfg: ExperimentConfig, args: SweepArgs) -> CliResult<()> {
    apply_sweep(&mut cfg, args);
    cfg.validate()?;
    let cells = harness::sweep_cells(&cfg);
    eprintln!("{}: {} training runs", cfg.experiment, cells.len());
    let float = float_for(&mut cfg)?;
    let result = match cfg.experiment {
        ExperimentKind::ConfigSweep => harness::run_config_sweep(&cfg, &float)?,
        ExperimentKind::InitStability => harness::run_init_stability(&cfg, &float)?,
        ExperimentKind::FixedOffset => harness::run_fixed_offset(&cfg, &float)?,
        ExperimentKind::BetaReport => unreachable!("beta report has its own subcommand"),
    };
    let dir = experiment_dir(&cfg);
    write_experiment(&cfg, &result, &dir)?;
    if cfg.experiment == ExperimentKind::ConfigSweep {
        write_config_table(&result, &dir.join("table.csv"))?;
    }
    print!("{}", render_summary(&result));
    println!("results in {}", dir.display());
    Ok(())
}

/// Wide table: one row per bit-width setting, mean and best accuracy per
/// configuration.
fn write_config_table(result: &ExperimentResult, path: &Path) -> CliResult<()> {
    let records = result.records();
    let mut configs: Vec<u8> = records.iter().map(|r| r.config).collect();
    configs.sort_unstable();
    configs.dedup();
    let mut settings: Vec<(u32, u32)> = records.iter().map(|r| (r.bits_w, r.bits_a)).collect();
    settings.sort_unstable();
    settings.dedup();
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    let mut header = vec!["setting".to_string()];
    for c in &configs {
        header.push(format!("config{c}_mean"));
        header.push(format!("config{c}_best"));
    }
    w.write_record(&header).map_err(Error::from)?;
    for (bw, ba) in settings {
        let mut row = vec![format!("W{bw}A{ba}")];
        for c in &configs {
            match result.summary.get(&format!("W{bw}A{ba}/config {c}")) {
                Some(s) => row.extend([format!("{:.4}", s.mean), format!("{:.4}", s.best)]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&row).map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn verify(args: &VerifyArgs) -> CliResult<()> {
    let net = checkpoint::load(&args.checkpoint)?;
    let folded = match &args.folded {
        Some(p) => FoldedNetwork::load(p)?,
        None => fold(&net)?,
    };
    if folded.spec().without_quantizers() != net.spec().without_quantizers() {
        return Err(Failure::Verification("folded model and checkpoint have different architectures".into()));
    }
    let split = data::load(dataset_for(&net.spec().input_shape));
    let n = args.samples.clamp(1, split.val.len());
    let rows: Vec<usize> = (0..n).collect();
    let inputs: Tensor = split.val.subset(&rows).inputs;
    let check = compare_paths(&net, &folded, &inputs)?;
    println!(
        "compared {} outputs on {} inputs: max abs deviation {:.3e}, max rel deviation {:.3e}{}",
        check.elements,
        n,
        check.max_abs,
        check.max_rel,
        if check.exact { " (exact)" } else { "" }
    );
    if check.passes(args.tol) {
        Ok(())
    } else {
        Err(Failure::Verification(format!("max rel deviation {:.3e} exceeds {:.1e}", check.max_rel, args.tol)))
    }
}

fn beta_report(mut cfg: ExperimentConfig, args: BetaArgs) -> CliResult<()> {
    apply_sweep(&mut cfg, args.sweep);
    cfg.validate()?;
    let dir = experiment_dir(&cfg);
    let report = match &args.checkpoint {
        Some(path) => {
            let net = checkpoint::load(path)?;
            let split = data::load(dataset_for(&net.spec().input_shape));
            let batches: Vec<Tensor> =
                split.train.batches(cfg.calibration.batch_size).into_iter().map(|b| b.inputs).collect();
            harness::run_beta_report(&net, &batches, &Default::default())?
        }
        None => {
            let float = float_for(&mut cfg)?;
            let (run, report) = harness::run_beta_experiment(&cfg, &float)?;
            std::fs::create_dir_all(&dir)?;
            checkpoint::save(&run.network, dir.join("trained.lsqc"))?;
            println!("trained {}: val acc {:.2}%", run.record.stem(), 100.0 * run.record.final_val_acc);
            report
        }
    };
    std::fs::create_dir_all(&dir)?;
    report.write_csv(std::fs::File::create(dir.join("beta.csv"))?)?;
    std::fs::write(dir.join("beta.svg"), report.to_svg())?;
    for r in &report.rows {
        println!(
            "{:<12} β={:>9.5} x_min={:>9.5}{}",
            r.layer,
            r.beta,
            r.x_min,
            if r.below_xmin { "  β < x_min" } else { "" }
        );
    }
    println!("{:.0}% of offsets negative; results in {}", 100.0 * report.negative_fraction(), dir.display());
    Ok(())
}
