use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::data::DatasetId;
use crate::error::{Error, Result};
use crate::init::{CalibrationOptions, InitScheme};
use crate::network::TrainConfig;
use crate::quantizer::{ActivationScheme, OffsetMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ConfigSweep,
    InitStability,
    FixedOffset,
    BetaReport,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::ConfigSweep => "config_sweep",
            ExperimentKind::InitStability => "init_stability",
            ExperimentKind::FixedOffset => "fixed_offset",
            ExperimentKind::BetaReport => "beta_report",
        })
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "config_sweep" => Ok(Self::ConfigSweep),
            "init_stability" => Ok(Self::InitStability),
            "fixed_offset" => Ok(Self::FixedOffset),
            "beta_report" => Ok(Self::BetaReport),
            other => Err(Error::Config(format!("unknown experiment kind '{other}'"))),
        }
    }
}

/// Swept coordinates. Bit-widths apply to weights and activations alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub bits: Vec<u32>,
    pub configs: Vec<u8>,
    pub schemes: Vec<InitScheme>,
    pub seeds: Vec<u64>,
    pub offset_modes: Vec<OffsetMode>,
    /// Activation config held fixed by the stability, fixed-offset and
    /// β-report experiments.
    pub fixed_config: u8,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            bits: vec![2, 4],
            configs: vec![1, 2, 3, 4],
            schemes: vec![InitScheme::LsqPlus],
            seeds: vec![0],
            offset_modes: vec![OffsetMode::Learned, OffsetMode::FixedXmin, OffsetMode::FixedZero],
            fixed_config: 4,
        }
    }
}

fn default_pretrain() -> TrainConfig {
    TrainConfig { epochs: 15, lr: 0.05, ..TrainConfig::default() }
}

fn default_qat() -> TrainConfig {
    TrainConfig { epochs: 6, lr: 0.01, weight_decay: 0.0, ..TrainConfig::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_dataset")]
    pub dataset: DatasetId,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Shared float starting point; trained and saved here when absent.
    #[serde(default)]
    pub float_checkpoint: Option<PathBuf>,
    /// Worker threads for independent runs; 0 picks the machine default.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default = "default_qat")]
    pub train: TrainConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub calibration: CalibrationOptions,
}

fn default_dataset() -> DatasetId {
    DatasetId::Digits
}

fn default_activation() -> ActivationKind {
    ActivationKind::Swish
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            dataset: default_dataset(),
            activation: default_activation(),
            output_dir: default_output(),
            float_checkpoint: None,
            workers: 0,
            sweep: Sweep::default(),
            train: default_qat(),
            pretrain: default_pretrain(),
            calibration: CalibrationOptions::default(),
        }
    }

    /// Parses TOML text; syntax and type errors carry line and column.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    Error::Config(format!("line {line}, column {col}: {msg}"))
                }
                None => Error::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sweep;
        let empty = |what: &str| Err(Error::Config(format!("sweep.{what} must not be empty")));
        if s.bits.is_empty() {
            return empty("bits");
        }
        if s.configs.is_empty() {
            return empty("configs");
        }
        if s.schemes.is_empty() {
            return empty("schemes");
        }
        if s.seeds.is_empty() {
            return empty("seeds");
        }
        if s.offset_modes.is_empty() {
            return empty("offset_modes");
        }
        if s.seeds.iter().collect::<BTreeSet<_>>().len() != s.seeds.len() {
            return Err(Error::Config("sweep.seeds must be distinct".into()));
        }
        for &b in &s.bits {
            crate::quantizer::quant_bounds(b, true)?;
        }
        for &c in s.configs.iter().chain([&s.fixed_config]) {
            ActivationScheme::from_id(c)?;
        }
        match self.experiment {
            ExperimentKind::InitStability if s.seeds.len() < 2 => {
                return Err(Error::Config("init_stability needs at least two seeds".into()))
            }
            ExperimentKind::FixedOffset | ExperimentKind::BetaReport
                if !ActivationScheme::from_id(s.fixed_config)?.has_offset() =>
            {
                return Err(Error::NoOffset(format!("sweep.fixed_config {} has no offset", s.fixed_config)))
            }
            _ => {}
        }
        self.train.validate()?;
        self.pretrain.validate()
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::parse("experiment = \"config_sweep\"\n").unwrap();
        assert_eq!(cfg.sweep, Sweep::default());
        assert_eq!(cfg.dataset, DatasetId::Digits);
    }

    #[test]
    fn sections_are_read() {
        let text = r#"
experiment = "init_stability"
activation = "relu"

[sweep]
bits = [2]
seeds = [1, 2, 3]
schemes = ["min_max", "lsq", "lsq_plus"]

[train]
epochs = 3
lr = 0.02
"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.activation, ActivationKind::Relu);
        assert_eq!(cfg.sweep.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let text = "experiment = \"config_sweep\"\n[sweep]\nbits = [2,\n";
        let Err(Error::Config(msg)) = ExperimentConfig::parse(text) else { panic!("expected config error") };
        assert!(msg.starts_with("line 3") || msg.starts_with("line 4"), "{msg}");
        let text = "experiment = \"config_sweep\"\n\n[train]\nepochs = \"many\"\n";
        let Err(Error::Config(msg)) = ExperimentConfig::parse(text) else { panic!("expected config error") };
        assert!(msg.starts_with("line 4"), "{msg}");
    }

    #[test]
    fn invalid_sweeps_are_rejected() {
        let base = "experiment = \"init_stability\"\n[sweep]\n";
        assert!(ExperimentConfig::parse(&format!("{base}seeds = [1]\n")).is_err());
        assert!(ExperimentConfig::parse(&format!("{base}seeds = [1, 1]\n")).is_err());
        assert!(ExperimentConfig::parse(&format!("{base}seeds = []\n")).is_err());
        assert!(ExperimentConfig::parse(&format!("{base}seeds = [1, 2]\nconfigs = [5]\n")).is_err());
        assert!(ExperimentConfig::parse("experiment = \"fixed_offset\"\n[sweep]\nfixed_config = 1\n").is_err());
        assert!(ExperimentConfig::parse("experiment = \"config_sweep\"\nunknown = 1\n").is_err());
    }
}
