//! Fixed-point inference with activation offsets folded into the bias.
//!
//! For a weighted layer fed by codes `x̄` with scale `s_x` and offset `β`,
//! and symmetric weight codes `w̄` with scale `s_w`:
//!
//! ```text
//! ŵ·x̂ = s_w·s_x·(w̄·x̄) + β·s_w·Σ_k w̄_k
//! ```
//!
//! The second term depends only on parameters and moves into the bias. The
//! integer path accumulates `w̄·x̄` in `i64` and does one scale-and-bias per
//! output element. With zero padding a convolution tap that lands outside
//! the input contributes nothing on the float path, so the folded
//! convolution bias is kept per output position and only counts in-bounds
//! taps.

use std::io::Write as _;
use std::path::Path;

use crate::activation::ActivationKind;
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::network::checkpoint::{read_spec, write_spec, Reader, Writer};
use crate::network::{LayerKind, LayerParams, Network, NetworkSpec, Quantizer};
use crate::quantizer::{dequantize, quantize_code};
use crate::tensor::Tensor;

pub const FOLDED_MAGIC: &[u8; 4] = b"LSQF";
pub const FOLDED_VERSION: u32 = 1;

/// The `(s, β, n, p)` a code stream is expressed in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodeFormat {
    pub scale: f32,
    pub offset: Option<f32>,
    pub n: i32,
    pub p: i32,
}

impl CodeFormat {
    pub fn of(q: &Quantizer) -> Self {
        let offset = if q.config.offset_enabled() { Some(q.state.beta()) } else { None };
        Self { scale: q.state.scale(), offset, n: q.config.n(), p: q.config.p() }
    }

    #[inline]
    pub fn encode(&self, x: f32) -> i32 {
        quantize_code(x, self.scale, self.offset, self.n as f32, self.p as f32) as i32
    }

    #[inline]
    pub fn decode(&self, code: i32) -> f32 {
        dequantize(code as f32, self.scale, self.offset)
    }

    pub fn beta(&self) -> f32 {
        self.offset.unwrap_or(0.0)
    }

    /// Largest code magnitude.
    pub fn max_abs_code(&self) -> u64 {
        (self.n as i64).unsigned_abs().max((self.p as i64).unsigned_abs())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldedOp {
    /// Codes stored `[inputs, outputs]`.
    Dense { inputs: usize, outputs: usize },
    /// Codes stored `[out, in, k, k]`; `height`, `width` are the input extent.
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, height: usize, width: usize },
}

impl FoldedOp {
    fn outputs(&self) -> usize {
        match *self {
            FoldedOp::Dense { outputs, .. } => outputs,
            FoldedOp::Conv { out_channels, .. } => out_channels,
        }
    }

    fn geometry(&self, batch: usize) -> Option<ConvGeometry> {
        match *self {
            FoldedOp::Conv { in_channels, out_channels, kernel, stride, padding, height, width } => ConvGeometry::new(
                &[batch, in_channels, height, width],
                &[out_channels, in_channels, kernel, kernel],
                stride,
                padding,
            )
            .ok(),
            FoldedOp::Dense { .. } => None,
        }
    }

    /// Number of bias entries after folding: one per output, times output
    /// positions for convolutions.
    fn folded_len(&self) -> usize {
        match self.geometry(1) {
            Some(g) => g.out_channels * g.out_h * g.out_w,
            None => self.outputs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldedLayer {
    /// Index of the source layer.
    pub index: usize,
    pub op: FoldedOp,
    pub codes: Vec<i32>,
    pub weight_quant: Quantizer,
    /// Format of the incoming activation codes.
    pub input: CodeFormat,
    /// `s_w·s_x`, exact in `f64`.
    pub combined_scale: f64,
    /// The layer's own bias.
    pub bias: Vec<f32>,
    /// `bias + β·s_w·Σ w̄`; dense `[outputs]`, conv `[outputs, Ho·Wo]`.
    pub folded_bias: Vec<f64>,
}

impl FoldedLayer {
    fn new(index: usize, op: FoldedOp, codes: Vec<i32>, weight_quant: Quantizer, input: CodeFormat, bias: Vec<f32>) -> Self {
        let s_w = weight_quant.state.scale() as f64;
        let beta_sw = input.beta() as f64 * s_w;
        let folded_bias = match op {
            FoldedOp::Dense { inputs, outputs } => (0..outputs)
                .map(|o| {
                    let sum: i64 = (0..inputs).map(|k| codes[k * outputs + o] as i64).sum();
                    bias[o] as f64 + beta_sw * sum as f64
                })
                .collect(),
            FoldedOp::Conv { .. } => {
                let g = op.geometry(1).expect("conv op");
                let mask = g.tap_mask();
                let (plen, hw) = (g.patch_len(), g.out_h * g.out_w);
                let mut out = Vec::with_capacity(g.out_channels * hw);
                for o in 0..g.out_channels {
                    let row = &codes[o * plen..(o + 1) * plen];
                    for pos in 0..hw {
                        let taps = &mask[pos * plen..(pos + 1) * plen];
                        let sum: i64 = row.iter().zip(taps).filter(|(_, &m)| m).map(|(&c, _)| c as i64).sum();
                        out.push(bias[o] as f64 + beta_sw * sum as f64);
                    }
                }
                out
            }
        };
        Self {
            index,
            op,
            codes,
            combined_scale: s_w * input.scale as f64,
            weight_quant,
            input,
            bias,
            folded_bias,
        }
    }

    /// Worst-case `|Σ w̄·x̄|` over outputs.
    pub fn accumulator_bound(&self) -> u64 {
        let per_code = self.input.max_abs_code();
        let outputs = self.op.outputs();
        let row_sums: Vec<u64> = match self.op {
            FoldedOp::Dense { inputs, outputs } => (0..outputs)
                .map(|o| (0..inputs).map(|k| self.codes[k * outputs + o].unsigned_abs() as u64).sum())
                .collect(),
            FoldedOp::Conv { .. } => {
                let len = self.codes.len() / outputs.max(1);
                self.codes.chunks(len.max(1)).map(|r| r.iter().map(|c| c.unsigned_abs() as u64).sum()).collect()
            }
        };
        row_sums.into_iter().max().unwrap_or(0) * per_code
    }

    fn forward(&self, x: &[i32], batch: usize) -> Result<Vec<f32>> {
        let overflow = || Error::AccumulatorOverflow(self.index);
        let dot = |a: &[i32], w: &mut dyn Iterator<Item = i32>| -> Result<i64> {
            a.iter().zip(w).try_fold(0i64, |acc, (&xi, wi)| {
                (xi as i64).checked_mul(wi as i64).and_then(|t| acc.checked_add(t)).ok_or_else(overflow)
            })
        };
        match self.op {
            FoldedOp::Dense { inputs, outputs } => {
                let mut out = Vec::with_capacity(batch * outputs);
                for r in 0..batch {
                    let row = &x[r * inputs..(r + 1) * inputs];
                    for o in 0..outputs {
                        let acc = dot(row, &mut (0..inputs).map(|k| self.codes[k * outputs + o]))?;
                        out.push((acc as f64 * self.combined_scale + self.folded_bias[o]) as f32);
                    }
                }
                Ok(out)
            }
            FoldedOp::Conv { .. } => {
                let g = self.op.geometry(batch).expect("conv op");
                let cols = g.im2col(x, 0i32);
                let (plen, hw, oc) = (g.patch_len(), g.out_h * g.out_w, g.out_channels);
                let mut rows = Vec::with_capacity(g.patches() * oc);
                for (r, patch) in cols.chunks(plen).enumerate() {
                    let pos = r % hw;
                    for o in 0..oc {
                        let acc = dot(patch, &mut self.codes[o * plen..(o + 1) * plen].iter().copied())?;
                        rows.push((acc as f64 * self.combined_scale + self.folded_bias[o * hw + pos]) as f32);
                    }
                }
                Ok(g.rows_to_nchw(&rows))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Layer(FoldedLayer),
    Activation { kind: ActivationKind, quant: Option<Quantizer> },
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldedNetwork {
    spec: NetworkSpec,
    input_quant: Quantizer,
    stages: Vec<Stage>,
}

fn weight_codes(w: &Tensor, q: &Quantizer) -> Vec<i32> {
    let fmt = CodeFormat::of(q);
    w.data().iter().map(|&v| fmt.encode(v)).collect()
}

/// Folds every weighted layer of a fully quantized network.
pub fn fold(net: &Network) -> Result<FoldedNetwork> {
    let input_quant = net
        .input_quant()
        .cloned()
        .ok_or_else(|| Error::Network("folding needs an input quantizer".into()))?;
    let spec = net.spec();
    let shapes = spec.shapes()?;
    let mut current = Some(CodeFormat::of(&input_quant));
    let mut stages = Vec::with_capacity(spec.layers.len());
    for (i, (l, params)) in spec.layers.iter().zip(net.layers()).enumerate() {
        let stage = match l.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                let wq = params.weight_quant.clone().ok_or_else(|| {
                    Error::Network(format!("layer {i} has no weight quantizer"))
                })?;
                if wq.config.offset_enabled() {
                    return Err(Error::AsymmetricWeights(i));
                }
                let input = current.take().ok_or_else(|| {
                    Error::Network(format!("layer {i} is not fed by quantized activations"))
                })?;
                let w = params.weight.as_ref().expect("weighted layer");
                let bias = params.bias.as_ref().expect("weighted layer").data().to_vec();
                let op = match l.kind {
                    LayerKind::Dense { inputs, outputs } => FoldedOp::Dense { inputs, outputs },
                    LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                        let src = spec.input_shape_of(i)?;
                        FoldedOp::Conv { in_channels, out_channels, kernel, stride, padding, height: src[1], width: src[2] }
                    }
                    _ => unreachable!(),
                };
                Stage::Layer(FoldedLayer::new(i, op, weight_codes(w, &wq), wq, input, bias))
            }
            LayerKind::Activation(kind) => {
                current = params.act_quant.as_ref().map(CodeFormat::of);
                Stage::Activation { kind, quant: params.act_quant.clone() }
            }
            LayerKind::Flatten => Stage::Flatten,
        };
        stages.push(stage);
    }
    debug_assert_eq!(shapes.len(), stages.len());
    Ok(FoldedNetwork { spec: spec.clone(), input_quant, stages })
}

enum Value {
    Codes(Vec<i32>, CodeFormat),
    Real(Vec<f32>),
}

impl FoldedNetwork {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn input_quant(&self) -> &Quantizer {
        &self.input_quant
    }

    pub fn layers(&self) -> impl Iterator<Item = &FoldedLayer> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Layer(l) => Some(l),
            _ => None,
        })
    }

    /// Logits for a `[batch, ...]` input. Only the input and the outputs of
    /// activation functions are quantized in floating point; weighted layers
    /// run on integer codes.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape().get(1..) != Some(&self.spec.input_shape[..]) {
            return Err(Error::Shape(format!(
                "folded network expects samples of shape {:?}, got {:?}",
                self.spec.input_shape,
                input.shape()
            )));
        }
        let batch = input.shape()[0];
        let fmt = CodeFormat::of(&self.input_quant);
        let mut value = Value::Codes(input.data().iter().map(|&v| fmt.encode(v)).collect(), fmt);
        for stage in &self.stages {
            value = match (stage, value) {
                (Stage::Layer(l), Value::Codes(codes, _)) => Value::Real(l.forward(&codes, batch)?),
                (Stage::Layer(l), Value::Real(_)) => {
                    return Err(Error::Network(format!("layer {} received unquantized input", l.index)))
                }
                (Stage::Activation { kind, quant }, v) => {
                    let real = match v {
                        Value::Real(r) => r,
                        Value::Codes(c, f) => c.iter().map(|&k| f.decode(k)).collect(),
                    };
                    let act = real.into_iter().map(|v| kind.apply(v));
                    match quant {
                        Some(q) => {
                            let f = CodeFormat::of(q);
                            Value::Codes(act.map(|v| f.encode(v)).collect(), f)
                        }
                        None => Value::Real(act.collect()),
                    }
                }
                (Stage::Flatten, v) => v,
            };
        }
        let data = match value {
            Value::Real(r) => r,
            Value::Codes(c, f) => c.iter().map(|&k| f.decode(k)).collect(),
        };
        Tensor::new([batch, self.spec.classes], data)
    }

    /// The quantized network this was folded from: weights are the dequantized
    /// codes `w̄·s_w`, biases and quantizer states are the originals.
    pub fn unfold(&self) -> Result<Network> {
        let mut layers = Vec::with_capacity(self.stages.len());
        for (l, stage) in self.spec.layers.iter().zip(&self.stages) {
            layers.push(match stage {
                Stage::Layer(f) => {
                    let s = f.weight_quant.state.scale();
                    let w: Vec<f32> = f.codes.iter().map(|&c| c as f32 * s).collect();
                    LayerParams {
                        weight: Some(Tensor::new(l.kind.weight_shape().expect("weighted"), w)?),
                        bias: Some(Tensor::from_vec(f.bias.clone())),
                        weight_quant: Some(f.weight_quant.clone()),
                        act_quant: None,
                    }
                }
                Stage::Activation { quant, .. } => LayerParams { act_quant: quant.clone(), ..Default::default() },
                Stage::Flatten => LayerParams::default(),
            });
        }
        Network::from_parts(self.spec.clone(), layers, Some(self.input_quant.clone()))
    }

    pub fn accumulator_audit(&self) -> Vec<AuditEntry> {
        self.layers().map(AuditEntry::of).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let mut w = Writer::new(&mut buf);
        w.bytes(FOLDED_MAGIC)?;
        w.u32(FOLDED_VERSION)?;
        write_spec(&mut w, &self.spec)?;
        w.state(Some(&self.input_quant.state))?;
        for stage in &self.stages {
            match stage {
                Stage::Layer(l) => {
                    w.state(Some(&l.weight_quant.state))?;
                    w.len(l.codes.len())?;
                    l.codes.iter().try_for_each(|&c| w.i32(c))?;
                    w.f32(l.input.scale)?;
                    w.u8(l.input.offset.is_some() as u8)?;
                    w.f32(l.input.beta())?;
                    w.u32(l.input.n as u32)?;
                    w.u32(l.input.p as u32)?;
                    w.f64(l.combined_scale)?;
                    w.len(l.bias.len())?;
                    l.bias.iter().try_for_each(|&b| w.f32(b))?;
                    w.len(l.folded_bias.len())?;
                    l.folded_bias.iter().try_for_each(|&b| w.f64(b))?;
                }
                Stage::Activation { quant, .. } => w.state(quant.as_ref().map(|q| &q.state))?,
                Stage::Flatten => {}
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != FOLDED_MAGIC {
            return Err(Error::Format("not a folded model (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FOLDED_VERSION {
            return Err(Error::Format(format!("unsupported folded model version {version}")));
        }
        let spec = read_spec(&mut r)?;
        let bad = |what: &str| Error::Format(format!("folded model: {what}"));
        let input_cfg = spec.input_quant.ok_or_else(|| bad("missing input quantizer"))?;
        let input_state = r.state()?.ok_or_else(|| bad("missing input quantizer state"))?;
        let input_quant = Quantizer { config: input_cfg, state: input_state };
        let mut stages = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let stage = match l.kind {
                LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                    let config = l.weight_quant.ok_or_else(|| bad("weighted layer without quantizer"))?;
                    let state = r.state()?.ok_or_else(|| bad("missing weight quantizer state"))?;
                    let count = r.len()?;
                    let expected: usize = l.kind.weight_shape().expect("weighted").iter().product();
                    if count != expected {
                        return Err(bad(&format!("layer {i} has {count} codes, expected {expected}")));
                    }
                    let codes = (0..count).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
                    if codes.iter().any(|&c| c < config.n() || c > config.p()) {
                        return Err(bad(&format!("layer {i} weight code outside [{}, {}]", config.n(), config.p())));
                    }
                    let scale = r.f32()?;
                    let has_offset = r.flag()?;
                    let beta = r.f32()?;
                    let (n, p) = (r.u32()? as i32, r.u32()? as i32);
                    let input = CodeFormat { scale, offset: has_offset.then_some(beta), n, p };
                    let combined = r.f64()?;
                    let bias_len = r.len()?;
                    let bias = (0..bias_len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
                    let folded_len = r.len()?;
                    let folded = (0..folded_len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    let op = match l.kind {
                        LayerKind::Dense { inputs, outputs } => FoldedOp::Dense { inputs, outputs },
                        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                            let src = spec.input_shape_of(i)?;
                            FoldedOp::Conv { in_channels, out_channels, kernel, stride, padding, height: src[1], width: src[2] }
                        }
                        _ => unreachable!(),
                    };
                    if bias.len() != op.outputs() || folded.len() != op.folded_len() {
                        return Err(bad(&format!("layer {i} bias length mismatch")));
                    }
                    let layer = FoldedLayer {
                        index: i,
                        op,
                        codes,
                        weight_quant: Quantizer { config, state },
                        input,
                        combined_scale: combined,
                        bias,
                        folded_bias: folded,
                    };
                    Stage::Layer(layer)
                }
                LayerKind::Activation(kind) => {
                    let state = r.state()?;
                    let quant = match (l.act_quant, state) {
                        (Some(config), Some(state)) => Some(Quantizer { config, state }),
                        (None, None) => None,
                        _ => return Err(bad(&format!("layer {i} quantizer mismatch"))),
                    };
                    Stage::Activation { kind, quant }
                }
                LayerKind::Flatten => Stage::Flatten,
            };
            stages.push(stage);
        }
        r.finish()?;
        Ok(Self { spec, input_quant, stages })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::decode(&bytes)
    }
}

/// Worst-case accumulator magnitude of one folded layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditEntry {
    pub layer: usize,
    /// Upper bound on `|Σ w̄·x̄|`.
    pub bound: u64,
    /// Two's-complement width that holds `±bound`: magnitude bits plus sign.
    pub bits: u32,
}

impl AuditEntry {
    pub fn of(layer: &FoldedLayer) -> Self {
        Self::from_bound(layer.index, layer.accumulator_bound())
    }

    pub fn from_bound(layer: usize, bound: u64) -> Self {
        Self { layer, bound, bits: 64 - bound.leading_zeros() + 1 }
    }

    pub fn fits_i32(&self) -> bool {
        self.bits <= 32
    }
}

/// Elementwise comparison of the integer path against the simulated float path.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldCheck {
    pub max_abs: f32,
    /// Largest `|integer − float| / (1 + |float|)`.
    pub max_rel: f32,
    pub elements: usize,
    pub exact: bool,
}

impl FoldCheck {
    pub fn passes(&self, tol: f32) -> bool {
        self.max_rel <= tol
    }
}

pub fn compare_paths(net: &Network, folded: &FoldedNetwork, inputs: &Tensor) -> Result<FoldCheck> {
    let float = net.predict(inputs)?;
    let int = folded.forward(inputs)?;
    let mut check = FoldCheck { max_abs: 0.0, max_rel: 0.0, elements: float.numel(), exact: true };
    for (&a, &b) in int.data().iter().zip(float.data()) {
        let d = (a - b).abs();
        check.max_abs = check.max_abs.max(d);
        check.max_rel = check.max_rel.max(d / (1.0 + b.abs()));
        check.exact &= a == b;
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerSpec;
    use crate::quantizer::{OffsetMode, QuantConfig, QuantizerState};

    fn quant(bits: u32, signed: bool, offset: Option<OffsetMode>, s: f32, b: Option<f32>) -> Quantizer {
        let config = QuantConfig::new(bits, signed, offset).unwrap();
        Quantizer { config, state: QuantizerState::new(s, b) }
    }

    /// input (unsigned + offset) → dense 1×1 → logits
    fn single_dense(w: f32, s_w: f32, s_x: f32, beta: f32, bias: f32) -> Network {
        let in_q = quant(4, false, Some(OffsetMode::Learned), s_x, Some(beta));
        let w_q = quant(4, true, None, s_w, None);
        let spec = NetworkSpec {
            layers: vec![LayerSpec {
                kind: LayerKind::Dense { inputs: 1, outputs: 1 },
                weight_quant: Some(w_q.config),
                act_quant: None,
            }],
            input_shape: vec![1],
            classes: 1,
            input_quant: Some(in_q.config),
        };
        let layers = vec![LayerParams {
            weight: Some(Tensor::new([1, 1], vec![w]).unwrap()),
            bias: Some(Tensor::from_vec(vec![bias])),
            weight_quant: Some(w_q),
            act_quant: None,
        }];
        Network::from_parts(spec, layers, Some(in_q)).unwrap()
    }

    #[test]
    fn hand_example_folds_offset_into_bias() {
        let net = single_dense(0.5, 0.5, 0.1, -0.278, 0.0);
        let f = fold(&net).unwrap();
        let l = f.layers().next().unwrap();
        assert_eq!(l.codes, vec![1]);
        assert!((l.folded_bias[0] - (-0.278f32 as f64 * 0.5)).abs() < 1e-12);
        // x = −0.078 sits on code 2 of the input grid
        let x = Tensor::new([1, 1], vec![2.0 * 0.1 - 0.278]).unwrap();
        let int = f.forward(&x).unwrap().item();
        assert!((int - (-0.039)).abs() < 1e-6, "{int}");
        let float = net.predict(&x).unwrap().item();
        assert!((float - (-0.039)).abs() < 1e-6, "{float}");
    }

    #[test]
    fn zero_offset_keeps_bias() {
        let net = single_dense(0.5, 0.5, 0.1, 0.0, 0.25);
        let f = fold(&net).unwrap();
        assert_eq!(f.layers().next().unwrap().folded_bias, vec![0.25f32 as f64]);
    }

    #[test]
    fn audit_bounds() {
        let net = single_dense(0.5, 0.5, 0.1, 0.0, 0.0);
        let audit = fold(&net).unwrap().accumulator_audit();
        assert_eq!(audit[0].bound, 15);
        assert_eq!(audit[0].bits, 5);
        assert_eq!(AuditEntry::from_bound(0, 8 * 15 * 100).bound, 12_000);
        assert!(AuditEntry::from_bound(0, 12_000).fits_i32());
        assert_eq!(AuditEntry::from_bound(0, 0), AuditEntry { layer: 0, bound: 0, bits: 1 });
    }

    #[test]
    fn asymmetric_weights_are_rejected() {
        let mut net = single_dense(0.5, 0.5, 0.1, 0.0, 0.0);
        let mut spec = net.spec().clone();
        let cfg = QuantConfig::new(4, true, Some(OffsetMode::Learned)).unwrap();
        spec.layers[0].weight_quant = Some(cfg);
        assert!(matches!(spec.validate(), Err(Error::AsymmetricWeights(0))));
        net.layers_mut()[0].weight_quant = None;
        assert!(fold(&net).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let layer = FoldedLayer::new(
            3,
            FoldedOp::Dense { inputs: 3, outputs: 1 },
            vec![i32::MAX; 3],
            quant(24, true, None, 1.0, None),
            CodeFormat { scale: 1.0, offset: None, n: 0, p: i32::MAX },
            vec![0.0],
        );
        let big = i32::MAX;
        // three products of nearly 2^62 exceed i64
        assert!(matches!(layer.forward(&[big; 3], 1), Err(Error::AccumulatorOverflow(3))));
    }
}
