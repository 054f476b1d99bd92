use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::InitScheme;
use crate::network::{Network, TrainTrace};

/// One training run: its sweep coordinates, outcome, and final quantizer
/// parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub dataset: String,
    pub activation: String,
    pub bits_w: u32,
    pub bits_a: u32,
    pub config: u8,
    pub scheme: InitScheme,
    /// `learned`, `fixed_zero`, `fixed_xmin`, or `none` for offset-free configs.
    pub offset_mode: String,
    pub seed: u64,
    pub final_val_acc: f32,
    pub best_val_acc: f32,
    pub final_train_acc: f32,
    /// Per-epoch trace file, relative to the output directory.
    pub trace: String,
    /// `site=s/β` pairs separated by `;`, with `-` for an absent offset.
    pub quantizers: String,
    pub wall_clock_s: f64,
}

/// Sort key: records are ordered by coordinates, never by completion order.
pub type RunKey = (u32, u32, u8, InitScheme, String, u64);

impl RunRecord {
    pub fn key(&self) -> RunKey {
        (self.bits_w, self.bits_a, self.config, self.scheme, self.offset_mode.clone(), self.seed)
    }

    /// File-name stem unique within one experiment.
    pub fn stem(&self) -> String {
        format!(
            "w{}a{}_c{}_{}_{}_s{}",
            self.bits_w, self.bits_a, self.config, self.scheme, self.offset_mode, self.seed
        )
    }

    /// Everything except wall-clock time, for reproducibility checks.
    pub fn outcome(&self) -> (RunKey, f32, f32, f32, &str) {
        (self.key(), self.final_val_acc, self.best_val_acc, self.final_train_acc, &self.quantizers)
    }

    pub fn parsed_quantizers(&self) -> Result<Vec<(String, f32, Option<f32>)>> {
        parse_quantizers(&self.quantizers)
    }
}

pub fn format_quantizers(net: &Network) -> String {
    net.quantizers()
        .iter()
        .map(|(site, q)| match q.state.offset() {
            Some(b) => format!("{site}={}/{b}", q.state.scale()),
            None => format!("{site}={}/-", q.state.scale()),
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub fn parse_quantizers(text: &str) -> Result<Vec<(String, f32, Option<f32>)>> {
    let bad = || Error::Format(format!("malformed quantizer list '{text}'"));
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(';')
        .map(|item| {
            let (site, rest) = item.split_once('=').ok_or_else(bad)?;
            let (s, b) = rest.split_once('/').ok_or_else(bad)?;
            let s = s.parse::<f32>().map_err(|_| bad())?;
            let b = match b {
                "-" => None,
                v => Some(v.parse::<f32>().map_err(|_| bad())?),
            };
            Ok((site.to_string(), s, b))
        })
        .collect()
}

pub fn write_records<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<Vec<RunRecord>, _>>()?)
}

pub fn save_records(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    write_records(records, std::fs::File::create(path)?)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    read_records(std::fs::File::open(path)?)
}

#[derive(Serialize)]
struct TraceRow {
    epoch: usize,
    step: usize,
    loss: f32,
    train_acc: f32,
    val_acc: f32,
}

pub fn write_trace<W: Write>(trace: &TrainTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in &trace.epochs {
        w.serialize(TraceRow {
            epoch: e.epoch,
            step: e.step,
            loss: e.loss,
            train_acc: e.train_acc,
            val_acc: e.val_acc,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Mean, best, worst and half-range of a group of accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f32,
    pub best: f32,
    pub worst: f32,
    /// `(best − worst)/2`.
    pub delta: f32,
    pub runs: usize,
}

impl Summary {
    pub fn of(values: &[f32]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mean = (values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64) as f32;
        let best = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let worst = values.iter().copied().fold(f32::INFINITY, f32::min);
        Some(Self { mean, best, worst, delta: (best - worst) / 2.0, runs: values.len() })
    }
}

/// Groups final validation accuracies by `group` and summarizes each group.
pub fn summarize<K: Ord + Clone>(records: &[RunRecord], group: impl Fn(&RunRecord) -> K) -> BTreeMap<K, Summary> {
    let mut groups: BTreeMap<K, Vec<f32>> = BTreeMap::new();
    for r in records {
        groups.entry(group(r)).or_default().push(r.final_val_acc);
    }
    groups.into_iter().filter_map(|(k, v)| Summary::of(&v).map(|s| (k, s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: u64, acc: f32) -> RunRecord {
        RunRecord {
            experiment: "config_sweep".into(),
            dataset: "digits".into(),
            activation: "swish".into(),
            bits_w: 2,
            bits_a: 2,
            config: 3,
            scheme: InitScheme::LsqPlus,
            offset_mode: "learned".into(),
            seed,
            final_val_acc: acc,
            best_val_acc: acc + 0.01,
            final_train_acc: 0.1 + acc / 3.0,
            trace: format!("traces/s{seed}.csv"),
            quantizers: "input=0.003921569/0;layer0.weight=0.07/-;layer1.act=0.1234567/-0.2784".into(),
            wall_clock_s: 1.5,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let records: Vec<_> = (0..5).map(|s| record(s, 0.9 - s as f32 / 7.0)).collect();
        let mut buf = Vec::new();
        write_records(&records, &mut buf).unwrap();
        assert_eq!(read_records(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn quantizer_field_parses() {
        let q = record(0, 0.5).parsed_quantizers().unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q[1], ("layer0.weight".to_string(), 0.07, None));
        assert_eq!(q[2].2, Some(-0.2784));
        assert!(parse_quantizers("x=1").is_err());
    }

    #[test]
    fn summary_uses_half_range() {
        let s = Summary::of(&[0.8, 0.9, 0.85]).unwrap();
        assert!((s.delta - 0.05).abs() < 1e-6);
        assert!((s.mean - 0.85).abs() < 1e-6);
        assert!(Summary::of(&[]).is_none());
    }
}
