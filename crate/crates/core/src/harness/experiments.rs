use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{self, DatasetId, Split};
use crate::error::{Error, Result};
use crate::init::{calibrate_with_batches, calibration_rng, fixed_offset_mode, InitReport, InitScheme};
use crate::network::{checkpoint, train, Network, NetworkSpec, TrainConfig, TrainTrace};
use crate::quantizer::{ActivationScheme, OffsetMode};
use crate::ActivationKind;

use super::beta::{run_beta_report, BetaReport};
use super::config::{ExperimentConfig, ExperimentKind};
use super::records::{format_quantizers, save_records, summarize, write_trace, RunRecord, Summary};

/// Architecture used for a dataset: the small conv net for digits, an MLP
/// for the spiral.
pub fn float_spec(dataset: DatasetId, act: ActivationKind) -> NetworkSpec {
    match dataset {
        DatasetId::Digits => NetworkSpec::conv_net(act),
        DatasetId::Spiral => NetworkSpec::mlp(act, 32, 2),
    }
}

/// Trains a float network from a random start seeded by `cfg.seed`.
pub fn pretrain_float(dataset: DatasetId, act: ActivationKind, cfg: &TrainConfig) -> Result<(Network, TrainTrace)> {
    let split = data::load(dataset);
    let mut rng = calibration_rng(cfg.seed ^ 0xf10a7);
    let mut net = Network::init(float_spec(dataset, act), &mut rng)?;
    let trace = train(&mut net, &split, cfg)?;
    Ok((net, trace))
}

/// The float network every cell starts from: loaded from
/// `cfg.float_checkpoint` when set, otherwise pretrained.
pub fn shared_float(cfg: &ExperimentConfig) -> Result<Network> {
    match &cfg.float_checkpoint {
        Some(path) => {
            let net = checkpoint::load(path)?;
            if net.is_quantized() {
                return Err(Error::Config(format!("{} is not a float checkpoint", path.display())));
            }
            if net.spec().without_quantizers() != float_spec(cfg.dataset, cfg.activation) {
                return Err(Error::Config(format!(
                    "{} does not match the {} / {} architecture",
                    path.display(),
                    cfg.dataset,
                    cfg.activation
                )));
            }
            Ok(net)
        }
        None => Ok(pretrain_float(cfg.dataset, cfg.activation, &cfg.pretrain)?.0),
    }
}

/// One point of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub bits: u32,
    pub config: u8,
    pub scheme: InitScheme,
    /// Freezes every activation offset in this mode instead of learning it.
    pub fixed_offset: Option<OffsetMode>,
    pub seed: u64,
}

pub struct RunOutput {
    pub record: RunRecord,
    pub trace: TrainTrace,
    pub network: Network,
    pub init: InitReport,
}

/// Quantizes `float` as `cell` describes, calibrates it on batches drawn with
/// the cell's seed, and trains it.
pub fn run_cell(float: &Network, split: &Split, cell: &Cell, cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let mut net = float.attach_quantizers(cell.bits, cell.bits, cell.config)?;
    let mut rng = calibration_rng(cell.seed);
    let batches = split.train.sample_batches(cfg.calibration.batches, cfg.calibration.batch_size, &mut rng);
    if let Some(mode) = cell.fixed_offset {
        if mode != OffsetMode::Learned {
            fixed_offset_mode(&mut net, mode, &batches)?;
        }
    }
    let init = calibrate_with_batches(&mut net, &batches, &split.train.inputs, cell.scheme, &cfg.calibration.mse)?;
    let tcfg = TrainConfig { seed: cell.seed, ..cfg.train.clone() };
    let trace = train(&mut net, split, &tcfg)?;
    let offset_mode = match (cell.fixed_offset, ActivationScheme::from_id(cell.config)?.has_offset()) {
        (_, false) => "none".to_string(),
        (Some(m), true) => m.to_string(),
        (None, true) => OffsetMode::Learned.to_string(),
    };
    let final_val_acc = trace.final_val_acc().unwrap_or(net.accuracy(&split.val)?);
    let mut record = RunRecord {
        experiment: cfg.experiment.to_string(),
        dataset: cfg.dataset.to_string(),
        activation: cfg.activation.to_string(),
        bits_w: cell.bits,
        bits_a: cell.bits,
        config: cell.config,
        scheme: cell.scheme,
        offset_mode,
        seed: cell.seed,
        final_val_acc,
        best_val_acc: trace.best_val_acc().unwrap_or(final_val_acc),
        final_train_acc: net.accuracy(&split.train)?,
        trace: String::new(),
        quantizers: format_quantizers(&net),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    record.trace = format!("traces/{}.csv", record.stem());
    Ok(RunOutput { record, trace, network: net, init })
}

/// Runs every cell on a worker pool. Results come back ordered by sweep
/// coordinates regardless of which run finished first.
pub fn run_cells(float: &Network, split: &Split, cells: &[Cell], cfg: &ExperimentConfig) -> Result<Vec<RunOutput>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut out = pool.install(|| {
        cells.par_iter().map(|c| run_cell(float, split, c, cfg)).collect::<Result<Vec<_>>>()
    })?;
    out.sort_by_key(|o| o.record.key());
    Ok(out)
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let s = &cfg.sweep;
    let mut cells = Vec::new();
    match cfg.experiment {
        ExperimentKind::ConfigSweep => {
            for &bits in &s.bits {
                for &config in &s.configs {
                    for &scheme in &s.schemes {
                        for &seed in &s.seeds {
                            cells.push(Cell { bits, config, scheme, fixed_offset: None, seed });
                        }
                    }
                }
            }
        }
        ExperimentKind::InitStability => {
            for &bits in &s.bits {
                for &scheme in &s.schemes {
                    for &seed in &s.seeds {
                        cells.push(Cell { bits, config: s.fixed_config, scheme, fixed_offset: None, seed });
                    }
                }
            }
        }
        ExperimentKind::FixedOffset => {
            for &bits in &s.bits {
                for &mode in &s.offset_modes {
                    for &scheme in &s.schemes {
                        for &seed in &s.seeds {
                            let fixed_offset = Some(mode);
                            cells.push(Cell { bits, config: s.fixed_config, scheme, fixed_offset, seed });
                        }
                    }
                }
            }
        }
        ExperimentKind::BetaReport => {
            let (bits, scheme, seed) = (s.bits[0], s.schemes[0], s.seeds[0]);
            cells.push(Cell { bits, config: s.fixed_config, scheme, fixed_offset: None, seed });
        }
    }
    cells
}

pub struct ExperimentResult {
    pub runs: Vec<RunOutput>,
    /// Summary of final validation accuracy per group; the group label
    /// depends on the experiment (`W2A2/config 3`, `W2A2/lsq_plus`, ...).
    pub summary: BTreeMap<String, Summary>,
}

impl ExperimentResult {
    pub fn records(&self) -> Vec<RunRecord> {
        self.runs.iter().map(|r| r.record.clone()).collect()
    }

    pub fn mean(&self, label: &str) -> Option<f32> {
        self.summary.get(label).map(|s| s.mean)
    }
}

fn run_experiment(cfg: &ExperimentConfig, float: &Network, label: impl Fn(&RunRecord) -> String) -> Result<ExperimentResult> {
    cfg.validate()?;
    let split = data::load(cfg.dataset);
    let runs = run_cells(float, &split, &sweep_cells(cfg), cfg)?;
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    Ok(ExperimentResult { summary: summarize(&records, label), runs })
}

/// Trains the single beta-report cell and lists its offsets against the
/// smallest quantizer inputs on fresh training batches.
pub fn run_beta_experiment(cfg: &ExperimentConfig, float: &Network) -> Result<(RunOutput, BetaReport)> {
    cfg.validate()?;
    let split = data::load(cfg.dataset);
    let cell = sweep_cells(&ExperimentConfig { experiment: ExperimentKind::BetaReport, ..cfg.clone() })[0];
    let run = run_cell(float, &split, &cell, cfg)?;
    let batches = split.train.batches(cfg.calibration.batch_size).into_iter().map(|b| b.inputs).collect::<Vec<_>>();
    // with momentum μ the velocity keeps moving β after its gradient dies, by at
    // most μ/(1 − μ) times the last step
    let carry = 1.0 / (1.0 - cfg.train.momentum);
    let slack = run.trace.max_offset_step.iter().map(|(&site, &step)| (site, step * carry)).collect();
    let report = run_beta_report(&run.network, &batches, &slack)?;
    Ok((run, report))
}

pub fn setting(r: &RunRecord) -> String {
    format!("W{}A{}", r.bits_w, r.bits_a)
}

/// Every (bit-width, activation config) cell from the shared float network.
pub fn run_config_sweep(cfg: &ExperimentConfig, float: &Network) -> Result<ExperimentResult> {
    run_experiment(cfg, float, |r| format!("{}/config {}", setting(r), r.config))
}

/// Mean and half-range per init scheme with the activation config held fixed.
pub fn run_init_stability(cfg: &ExperimentConfig, float: &Network) -> Result<ExperimentResult> {
    if cfg.sweep.seeds.len() < 2 {
        return Err(Error::Config("init_stability needs at least two seeds".into()));
    }
    run_experiment(cfg, float, |r| format!("{}/{}", setting(r), r.scheme))
}

/// Learned against frozen offsets.
pub fn run_fixed_offset(cfg: &ExperimentConfig, float: &Network) -> Result<ExperimentResult> {
    run_experiment(cfg, float, |r| format!("{}/{}", setting(r), r.offset_mode))
}

/// Writes the effective config, `records.csv`, `summary.csv`, per-run traces
/// and init reports under `dir`.
pub fn write_experiment(cfg: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("traces"))?;
    std::fs::create_dir_all(dir.join("init"))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    save_records(&result.records(), dir.join("records.csv"))?;
    for run in &result.runs {
        write_trace(&run.trace, std::fs::File::create(dir.join(&run.record.trace))?)?;
        run.init.save_csv(dir.join("init").join(format!("{}.csv", run.record.stem())))?;
    }
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["group", "mean", "best", "worst", "delta", "runs"])?;
    for (group, s) in &result.summary {
        w.write_record([
            group.clone(),
            format!("{:.4}", s.mean),
            format!("{:.4}", s.best),
            format!("{:.4}", s.worst),
            format!("{:.4}", s.delta),
            s.runs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Human-readable table: one row per group, accuracies in percent, shown as
/// `mean ± Δacc (best)`.
pub fn render_summary(result: &ExperimentResult) -> String {
    let width = result.summary.keys().map(String::len).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>16}  {:>6}  runs\n", "group", "mean ± Δacc", "best");
    for (group, s) in &result.summary {
        out.push_str(&format!(
            "{:<width$}  {:>8.2} ± {:<5.2}  {:>6.2}  {}\n",
            group,
            100.0 * s.mean,
            100.0 * s.delta,
            100.0 * s.best,
            s.runs
        ));
    }
    out
}

pub fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(cfg.experiment.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_cardinality() {
        let mut cfg = ExperimentConfig::new(ExperimentKind::ConfigSweep);
        cfg.sweep.bits = vec![2, 4];
        assert_eq!(sweep_cells(&cfg).len(), 8);
        cfg.sweep.bits = vec![4];
        cfg.sweep.configs = vec![1, 3];
        assert_eq!(sweep_cells(&cfg).len(), 2);
        let mut st = ExperimentConfig::new(ExperimentKind::InitStability);
        st.sweep.bits = vec![2];
        st.sweep.schemes = InitScheme::ALL.to_vec();
        st.sweep.seeds = (0..5).collect();
        assert_eq!(sweep_cells(&st).len(), 15);
    }

    #[test]
    fn missing_float_checkpoint_is_reported() {
        let mut cfg = ExperimentConfig::new(ExperimentKind::ConfigSweep);
        cfg.float_checkpoint = Some(PathBuf::from("/nonexistent/float.lsqc"));
        assert!(matches!(shared_float(&cfg), Err(Error::MissingCheckpoint(_))));
    }
}
