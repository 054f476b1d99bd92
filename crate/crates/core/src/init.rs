//! Quantizer-parameter initialization: min-max, LSQ, and LSQ+.
//!
//! Weights and activations are calibrated per layer against the float
//! network. LSQ+ uses a Gaussian 3σ rule for weights and a reconstruction-MSE
//! fit for activations, started from the min-max solution.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{train, Network, QuantSite, TrainConfig, TrainTrace};
use crate::quantizer::{dequantize, local_partials, quantize_code, OffsetMode, QuantConfig, MIN_SCALE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    MinMax,
    Lsq,
    LsqPlus,
}

impl InitScheme {
    pub const ALL: [InitScheme; 3] = [InitScheme::MinMax, InitScheme::Lsq, InitScheme::LsqPlus];
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::MinMax => "min_max",
            InitScheme::Lsq => "lsq",
            InitScheme::LsqPlus => "lsq_plus",
        })
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min_max" | "minmax" => Ok(InitScheme::MinMax),
            "lsq" => Ok(InitScheme::Lsq),
            "lsq_plus" | "lsqplus" | "lsq+" => Ok(InitScheme::LsqPlus),
            other => Err(Error::Config(format!("unknown init scheme '{other}'"))),
        }
    }
}

/// Maps `x_min` to code `n` and `x_max` to code `p`.
///
/// An empty range (`x_min == x_max`) yields the floor scale with `β = x_min`.
pub fn init_minmax(x_min: f32, x_max: f32, n: i32, p: i32) -> Result<(f32, f32)> {
    if !(x_min.is_finite() && x_max.is_finite()) || x_max < x_min {
        return Err(Error::InvalidRange { x_min, x_max });
    }
    if x_max == x_min {
        return Ok((MIN_SCALE, x_min));
    }
    let s = ((x_max - x_min) / (p - n) as f32).max(MIN_SCALE);
    Ok((s, x_min - n as f32 * s))
}

/// Smallest scale that covers `[x_min, x_max]` with the offset held at `beta`.
pub fn init_minmax_fixed_offset(x_min: f32, x_max: f32, beta: f32, n: i32, p: i32) -> Result<f32> {
    if !(x_min.is_finite() && x_max.is_finite()) || x_max < x_min {
        return Err(Error::InvalidRange { x_min, x_max });
    }
    let mut s = (x_max - beta) / p as f32;
    if n < 0 {
        s = s.max((x_min - beta) / n as f32);
    }
    Ok(if s.is_finite() { s.max(MIN_SCALE) } else { MIN_SCALE })
}

/// `2·mean(|v|)/√p`, floored.
pub fn init_lsq(values: &[f32], p: i32) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::Empty("values for scale initialization"));
    }
    let mean_abs = values.iter().map(|v| v.abs() as f64).sum::<f64>() / values.len() as f64;
    Ok(((2.0 * mean_abs / (p as f64).sqrt()) as f32).max(MIN_SCALE))
}

/// `max(|μ − 3σ|, |μ + 3σ|) / 2^(b−1)` with the sample standard deviation.
pub fn init_lsqplus_weight(weights: &[f32], bits: u32) -> Result<f32> {
    if weights.len() < 2 {
        return Err(Error::Empty("at least two weights for the Gaussian rule"));
    }
    let len = weights.len() as f64;
    let mu = weights.iter().map(|&w| w as f64).sum::<f64>() / len;
    let var = weights.iter().map(|&w| (w as f64 - mu).powi(2)).sum::<f64>() / (len - 1.0);
    let sigma = var.sqrt();
    let reach = (mu - 3.0 * sigma).abs().max((mu + 3.0 * sigma).abs());
    Ok(((reach / 2f64.powi(bits as i32 - 1)) as f32).max(MIN_SCALE))
}

/// Mean of `(x̂ − x)²`.
pub fn reconstruction_mse(values: &[f32], scale: f32, offset: Option<f32>, n: i32, p: i32) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (nf, pf) = (n as f32, p as f32);
    let sum: f64 = values
        .iter()
        .map(|&x| {
            let e = dequantize(quantize_code(x, scale, offset, nf, pf), scale, offset) - x;
            (e as f64).powi(2)
        })
        .sum();
    sum / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MseOptions {
    pub steps: usize,
    /// Initial step size. Scale-free: the step on `s` is `lr · ∂MSE/∂s`, and
    /// `∂MSE/∂s` grows linearly with the data's scale.
    pub lr: f32,
}

impl Default for MseOptions {
    fn default() -> Self {
        Self { steps: 1000, lr: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MseFit {
    pub scale: f32,
    pub offset: Option<f32>,
    pub mse: f64,
    /// MSE of the starting point.
    pub start_mse: f64,
}

fn mse_and_grad(values: &[f32], s: f32, b: Option<f32>, n: i32, p: i32) -> (f64, f64, f64) {
    let (nf, pf) = (n as f32, p as f32);
    let (mut loss, mut ds, mut db) = (0f64, 0f64, 0f64);
    for &x in values {
        let u = match b {
            Some(b) => (x - b) / s,
            None => x / s,
        };
        let e = (dequantize(quantize_code(x, s, b, nf, pf), s, b) - x) as f64;
        let part = local_partials(u, nf, pf);
        loss += e * e;
        ds += 2.0 * e * part.ds as f64;
        db += 2.0 * e * part.dbeta as f64;
    }
    let len = values.len().max(1) as f64;
    (loss / len, ds / len, db / len)
}

/// Gradient descent on reconstruction MSE using the straight-through partials,
/// from `(scale, offset)`. The offset moves only if `offset_trainable`.
///
/// A step that raises the loss is rejected and the step size halved; an
/// accepted step grows it by 10%. The best point seen is returned, so the
/// result is never worse than the start.
pub fn fit_mse(
    values: &[f32],
    n: i32,
    p: i32,
    scale: f32,
    offset: Option<f32>,
    offset_trainable: bool,
    opts: &MseOptions,
) -> Result<MseFit> {
    if values.is_empty() {
        return Err(Error::Empty("calibration values"));
    }
    let (mut s, mut b) = (scale.max(MIN_SCALE), offset);
    let (mut loss, mut gs, mut gb) = mse_and_grad(values, s, b, n, p);
    let start_mse = loss;
    let mut lr = opts.lr as f64;
    for _ in 0..opts.steps {
        if loss == 0.0 || lr < 1e-20 {
            break;
        }
        let ns = ((s as f64 - lr * gs) as f32).max(MIN_SCALE);
        let nb = match b {
            Some(b) if offset_trainable => Some((b as f64 - lr * gb) as f32),
            other => other,
        };
        let (nl, ngs, ngb) = mse_and_grad(values, ns, nb, n, p);
        if nl <= loss && nl.is_finite() {
            (s, b, loss, gs, gb) = (ns, nb, nl, ngs, ngb);
            lr *= 1.1;
        } else {
            lr *= 0.5;
        }
    }
    Ok(MseFit { scale: s, offset: b, mse: loss, start_mse })
}

/// Min-max start point for `cfg`: `β` follows the config's offset mode
/// (learned from the range, zero, or pinned at `x_min`).
pub fn minmax_for_config(cfg: &QuantConfig, x_min: f32, x_max: f32) -> Result<(f32, Option<f32>)> {
    let (n, p) = (cfg.n(), cfg.p());
    match cfg.offset_mode() {
        Some(OffsetMode::Learned) => {
            let (s, b) = init_minmax(x_min, x_max, n, p)?;
            Ok((s, Some(b)))
        }
        Some(OffsetMode::FixedXmin) => Ok((init_minmax_fixed_offset(x_min, x_max, x_min, n, p)?, Some(x_min))),
        Some(OffsetMode::FixedZero) => Ok((init_minmax_fixed_offset(x_min, x_max, 0.0, n, p)?, Some(0.0))),
        None => Ok((init_minmax_fixed_offset(x_min, x_max, 0.0, n, p)?, None)),
    }
}

fn flatten(batches: &[Tensor]) -> Vec<f32> {
    batches.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn range_of(values: &[f32]) -> Result<(f32, f32)> {
    if values.is_empty() {
        return Err(Error::Empty("calibration values"));
    }
    Ok(values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
}

/// Tail fractions clipped from each side when proposing start points.
const CLIP_QUANTILES: [f64; 6] = [0.001, 0.003, 0.01, 0.02, 0.05, 0.1];
/// Scale candidates of the coarse seed grid, as multiples of `range/(p−n)`.
const SEED_SCALES: usize = 24;
/// Offset candidates of the coarse seed grid across `[x_min, x_max]`.
const SEED_OFFSETS: usize = 17;
/// Values scored per seed candidate.
const SEED_SAMPLE: usize = 8192;

/// Runs [`fit_mse`] from the best of several start points: the min-max
/// solution, min-max over clipped ranges, and a coarse `(s, β)` grid scored on
/// a strided subsample. The final fit is never worse than plain min-max.
///
/// The loss is far from convex at low bit-widths, and straight-through
/// gradients give `β` no signal from unclipped values, so descent alone from
/// the full range stalls when outliers stretch it.
pub fn fit_mse_multistart(
    values: &[f32],
    cfg: &QuantConfig,
    fixed_offset: Option<f32>,
    opts: &MseOptions,
) -> Result<MseFit> {
    let mut sorted = values.to_vec();
    if sorted.is_empty() {
        return Err(Error::Empty("calibration values"));
    }
    sorted.sort_unstable_by(f32::total_cmp);
    let last = sorted.len() - 1;
    let (lo, hi) = (sorted[0], sorted[last]);
    let (n, p) = (cfg.n(), cfg.p());
    let learned = cfg.offset_mode() == Some(OffsetMode::Learned);
    let full = minmax_start(cfg, fixed_offset, lo, hi)?;
    let full_mse = reconstruction_mse(values, full.0, full.1, n, p);

    let mut starts = vec![full];
    for q in CLIP_QUANTILES {
        let k = ((q * last as f64).round() as usize).min(last / 2);
        starts.push(minmax_start(cfg, fixed_offset, sorted[k], sorted[last - k])?);
    }
    let unit = ((hi - lo) / (p - n) as f32).max(MIN_SCALE);
    for i in 1..=SEED_SCALES {
        let s = unit * i as f32 / 16.0;
        match full.1 {
            Some(_) if learned => {
                for j in 0..SEED_OFFSETS {
                    let b = lo + (hi - lo) * j as f32 / (SEED_OFFSETS - 1) as f32;
                    starts.push((s, Some(b)));
                }
                starts.push((s, Some(0.5 * (lo + hi) - 0.5 * (n + p) as f32 * s)));
            }
            b => starts.push((s, b)),
        }
    }
    let stride = values.len().div_ceil(SEED_SAMPLE).max(1);
    let sample: Vec<f32> = values.iter().step_by(stride).copied().collect();
    let (s, b) = starts
        .iter()
        .map(|&(s, b)| ((s, b), reconstruction_mse(&sample, s, b, n, p)))
        .fold(None, |best: Option<((f32, Option<f32>), f64)>, cur| match best {
            Some(bst) if bst.1 <= cur.1 => Some(bst),
            _ => Some(cur),
        })
        .expect("at least one start")
        .0;
    let mut fit = fit_mse(values, n, p, s, b, learned, opts)?;
    if fit.mse > full_mse {
        fit = fit_mse(values, n, p, full.0, full.1, learned, opts)?;
    }
    fit.start_mse = full_mse;
    Ok(fit)
}

fn minmax_start(cfg: &QuantConfig, fixed_offset: Option<f32>, lo: f32, hi: f32) -> Result<(f32, Option<f32>)> {
    match (cfg.offset_mode(), fixed_offset) {
        (Some(OffsetMode::FixedXmin), Some(b)) => Ok((init_minmax_fixed_offset(lo, hi, b, cfg.n(), cfg.p())?, Some(b))),
        _ => minmax_for_config(cfg, lo, hi),
    }
}

/// MSE-optimal `(s, β)` for activation samples. Only `s` is fitted unless
/// the offset is learned; a fixed `x_min` offset is the samples' minimum.
/// `start_mse` in the result is the plain min-max reconstruction error.
pub fn init_lsqplus_activation(batches: &[Tensor], cfg: &QuantConfig, opts: &MseOptions) -> Result<MseFit> {
    let values = flatten(batches);
    let (lo, _) = range_of(&values)?;
    let fixed = (cfg.offset_mode() == Some(OffsetMode::FixedXmin)).then_some(lo);
    fit_mse_multistart(&values, cfg, fixed, opts)
}

/// Running `(min, max)` of every activation and input quantizer's input on
/// the float network.
pub fn estimate_activation_range(net: &Network, batches: &[Tensor]) -> Result<BTreeMap<QuantSite, (f32, f32)>> {
    if batches.is_empty() {
        return Err(Error::Empty("calibration batches"));
    }
    let mut ranges: BTreeMap<QuantSite, (f32, f32)> = BTreeMap::new();
    for batch in batches {
        net.probe_float(batch, &mut |site, t| {
            if matches!(site, QuantSite::Weight(_)) || t.numel() == 0 {
                return;
            }
            let r = ranges.entry(site).or_insert((f32::INFINITY, f32::NEG_INFINITY));
            *r = (r.0.min(t.min()), r.1.max(t.max()));
        })?;
    }
    Ok(ranges)
}

/// Freezes every activation offset at zero or at its measured minimum.
pub fn fixed_offset_mode(net: &mut Network, mode: OffsetMode, batches: &[Tensor]) -> Result<()> {
    let ranges = estimate_activation_range(net, batches)?;
    net.fix_offsets(mode, |site| ranges.get(&site).map(|r| r.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitEntry {
    pub layer: String,
    pub scheme: InitScheme,
    pub s_init: f32,
    pub beta_init: Option<f32>,
    pub mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InitReport {
    pub entries: Vec<InitEntry>,
    pub batches: usize,
}

impl InitReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<InitEntry>> {
        let mut r = csv::Reader::from_reader(input);
        Ok(r.deserialize().collect::<std::result::Result<Vec<InitEntry>, _>>()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    pub batches: usize,
    pub batch_size: usize,
    pub mse: MseOptions,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { batches: 4, batch_size: 128, mse: MseOptions::default() }
    }
}

/// Initializes every quantizer of `net` from `train` with `scheme`.
///
/// The input quantizer always uses min-max over the whole training set.
/// Min-max and LSQ read the first calibration batch; LSQ+ fits on all of them.
pub fn calibrate<R: Rng + ?Sized>(
    net: &mut Network,
    train: &Dataset,
    scheme: InitScheme,
    opts: &CalibrationOptions,
    rng: &mut R,
) -> Result<InitReport> {
    let batches = train.sample_batches(opts.batches, opts.batch_size, rng);
    calibrate_with_batches(net, &batches, &train.inputs, scheme, &opts.mse)
}

pub fn calibrate_with_batches(
    net: &mut Network,
    batches: &[Tensor],
    full_inputs: &Tensor,
    scheme: InitScheme,
    mse: &MseOptions,
) -> Result<InitReport> {
    if batches.is_empty() {
        return Err(Error::Empty("calibration batches"));
    }
    let mut samples: BTreeMap<QuantSite, Vec<Vec<f32>>> = BTreeMap::new();
    for batch in batches {
        net.probe_float(batch, &mut |site, t| {
            if let QuantSite::Activation(_) = site {
                samples.entry(site).or_default().push(t.data().to_vec());
            }
        })?;
    }
    let mut report = InitReport { entries: Vec::new(), batches: batches.len() };

    if let Some(q) = net.quantizer_mut(QuantSite::Input) {
        let (lo, hi) = range_of(full_inputs.data())?;
        let (s, b) = minmax_for_config(&q.config, lo, hi)?;
        q.state.set_scale(s);
        if let Some(b) = b {
            q.state.set_offset(b);
        }
        report.entries.push(InitEntry {
            layer: QuantSite::Input.to_string(),
            scheme: InitScheme::MinMax,
            s_init: q.state.scale(),
            beta_init: q.state.offset(),
            mse: reconstruction_mse(full_inputs.data(), s, q.state.offset(), q.config.n(), q.config.p()),
        });
    }

    let sites: Vec<QuantSite> = net.quantizers().into_iter().map(|(s, _)| s).collect();
    for site in sites {
        let entry = match site {
            QuantSite::Input => continue,
            QuantSite::Weight(i) => {
                let w = net.layers()[i].weight.clone().expect("weight quantizer implies weights");
                let q = net.quantizer_mut(site).expect("listed");
                let (n, p) = (q.config.n(), q.config.p());
                let s = match scheme {
                    InitScheme::MinMax => minmax_for_config(&q.config, w.min(), w.max())?.0,
                    InitScheme::Lsq => init_lsq(w.data(), p)?,
                    InitScheme::LsqPlus => init_lsqplus_weight(w.data(), q.config.bits())?,
                };
                q.state.set_scale(s);
                InitEntry {
                    layer: site.to_string(),
                    scheme,
                    s_init: q.state.scale(),
                    beta_init: None,
                    mse: reconstruction_mse(w.data(), q.state.scale(), None, n, p),
                }
            }
            QuantSite::Activation(_) => {
                let per_batch = samples.remove(&site).unwrap_or_default();
                let q = net.quantizer_mut(site).expect("listed");
                let cfg = q.config;
                let (n, p) = (cfg.n(), cfg.p());
                let first = per_batch.first().ok_or(Error::Empty("activation samples"))?;
                let all: Vec<f32> = per_batch.iter().flatten().copied().collect();
                let (s, b, scored): (f32, Option<f32>, &[f32]) = match scheme {
                    InitScheme::MinMax => {
                        let (lo, hi) = range_of(first)?;
                        let (s, b) = minmax_start(&cfg, q.state.offset(), lo, hi)?;
                        (s, b, first)
                    }
                    InitScheme::Lsq => {
                        let b = match cfg.offset_mode() {
                            Some(OffsetMode::FixedXmin) => q.state.offset(),
                            Some(_) => Some(0.0),
                            None => None,
                        };
                        (init_lsq(first, p)?, b, first)
                    }
                    InitScheme::LsqPlus => {
                        let fit = fit_mse_multistart(&all, &cfg, q.state.offset(), mse)?;
                        (fit.scale, fit.offset, &all)
                    }
                };
                q.state.set_scale(s);
                if let Some(b) = b {
                    q.state.set_offset(b);
                }
                InitEntry {
                    layer: site.to_string(),
                    scheme,
                    s_init: q.state.scale(),
                    beta_init: q.state.offset(),
                    mse: reconstruction_mse(scored, q.state.scale(), q.state.offset(), n, p),
                }
            }
        };
        report.entries.push(entry);
    }
    Ok(report)
}

/// Calibrates with `scheme` (batches drawn with `cfg.seed`) and trains.
pub fn train_qat(
    net: &mut Network,
    data: &Split,
    cfg: &TrainConfig,
    scheme: InitScheme,
    calib: &CalibrationOptions,
) -> Result<(InitReport, TrainTrace)> {
    let mut rng = calibration_rng(cfg.seed);
    let report = calibrate(net, &data.train, scheme, calib, &mut rng)?;
    let trace = train(net, data, cfg)?;
    Ok((report, trace))
}

/// Random stream used to draw calibration batches for `seed`.
pub fn calibration_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
