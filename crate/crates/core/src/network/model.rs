use std::fmt;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::quantizer::{lsq_grad_scale, OffsetMode, QuantConfig, QuantizerState};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::spec::{LayerKind, NetworkSpec};

/// Where a quantizer sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuantSite {
    Input,
    Weight(usize),
    Activation(usize),
}

impl fmt::Display for QuantSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantSite::Input => write!(f, "input"),
            QuantSite::Weight(i) => write!(f, "layer{i}.weight"),
            QuantSite::Activation(i) => write!(f, "layer{i}.act"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantizer {
    pub config: QuantConfig,
    pub state: QuantizerState,
}

impl Quantizer {
    /// Fresh quantizer with unit scale and zero offset; `numel` is the number
    /// of values feeding it per sample (or per tensor, for weights).
    pub fn new(config: QuantConfig, numel: usize) -> Self {
        let state = QuantizerState::for_config(&config, 1.0, 0.0, lsq_grad_scale(numel, config.p()));
        Self { config, state }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerParams {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub weight_quant: Option<Quantizer>,
    pub act_quant: Option<Quantizer>,
}

/// Records a quantizer on the tape. The default records the built-in
/// fake-quantization op; tests substitute reference implementations.
pub trait QuantRecorder {
    fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        scale: Var,
        offset: Option<Var>,
        config: &QuantConfig,
        grad_scale: f32,
    ) -> Result<Var>;
}

pub struct FakeQuantRecorder;

impl QuantRecorder for FakeQuantRecorder {
    fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        scale: Var,
        offset: Option<Var>,
        config: &QuantConfig,
        grad_scale: f32,
    ) -> Result<Var> {
        tape.fake_quantize(x, scale, offset, config.n(), config.p(), grad_scale)
    }
}

/// Tape handles for the trainable values of one forward pass.
#[derive(Debug, Default)]
pub struct Bindings {
    pub weights: Vec<Option<Var>>,
    pub biases: Vec<Option<Var>>,
    pub quantizers: Vec<(QuantSite, Var, Option<Var>)>,
}

pub type Probe<'a> = &'a mut dyn FnMut(QuantSite, &Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerParams>,
    input_quant: Option<Quantizer>,
}

impl Network {
    /// Random He-normal weights and zero biases.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let weight = l.kind.weight_shape().map(|shape| {
                    let fan_in: usize = match l.kind {
                        LayerKind::Dense { inputs, .. } => inputs,
                        _ => shape[1..].iter().product(),
                    };
                    Tensor::randn(shape, (2.0 / fan_in as f32).sqrt(), rng)
                });
                let bias = l.kind.bias_len().map(|n| Tensor::zeros([n]));
                LayerParams { weight, bias, weight_quant: None, act_quant: None }
            })
            .collect();
        let mut net = Self { spec: spec.without_quantizers(), layers, input_quant: None };
        if spec.is_quantized() {
            net = net.with_spec_quantizers(spec)?;
        }
        Ok(net)
    }

    /// Assembles a network from explicit parts (used by checkpoint loading).
    pub fn from_parts(spec: NetworkSpec, layers: Vec<LayerParams>, input_quant: Option<Quantizer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers.len() {
            return Err(Error::Network(format!("{} layer records for {} layers", layers.len(), spec.layers.len())));
        }
        for (i, (l, p)) in spec.layers.iter().zip(&layers).enumerate() {
            let shape_ok = match (l.kind.weight_shape(), &p.weight) {
                (Some(s), Some(w)) => w.shape() == s.as_slice(),
                (None, None) => true,
                _ => false,
            };
            let bias_ok = match (l.kind.bias_len(), &p.bias) {
                (Some(n), Some(b)) => b.shape() == [n],
                (None, None) => true,
                _ => false,
            };
            let quant_ok = l.weight_quant == p.weight_quant.as_ref().map(|q| q.config)
                && l.act_quant == p.act_quant.as_ref().map(|q| q.config);
            if !(shape_ok && bias_ok && quant_ok) {
                return Err(Error::Network(format!("layer {i} parameters do not match its description")));
            }
        }
        if spec.input_quant != input_quant.as_ref().map(|q| q.config) {
            return Err(Error::Network("input quantizer does not match description".into()));
        }
        Ok(Self { spec, layers, input_quant })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn input_quant(&self) -> Option<&Quantizer> {
        self.input_quant.as_ref()
    }

    pub fn is_quantized(&self) -> bool {
        self.spec.is_quantized()
    }

    fn with_spec_quantizers(mut self, spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        for (i, (l, p)) in spec.layers.iter().zip(self.layers.iter_mut()).enumerate() {
            p.weight_quant = l.weight_quant.map(|cfg| {
                let numel = p.weight.as_ref().map_or(1, Tensor::numel);
                Quantizer::new(cfg, numel)
            });
            p.act_quant = l.act_quant.map(|cfg| Quantizer::new(cfg, shapes[i].iter().product()));
        }
        self.input_quant = spec.input_quant.map(|cfg| {
            let mut q = Quantizer::new(cfg, spec.input_shape.iter().product());
            q.state.scale_trainable = false;
            q
        });
        self.spec = spec;
        Ok(self)
    }

    /// Copy of this network's float weights with quantizers attached:
    /// signed symmetric weights at `bits_w`, activation `config` (1–4) at `bits_a`.
    /// Quantizer parameters start at `s = 1, β = 0` until calibrated.
    pub fn attach_quantizers(&self, bits_w: u32, bits_a: u32, config: u8) -> Result<Network> {
        let spec = self.spec.with_quantizers(bits_w, bits_a, config)?;
        self.without_quantizers().with_spec_quantizers(spec)
    }

    /// The same float weights with every quantizer removed.
    pub fn without_quantizers(&self) -> Network {
        Network {
            spec: self.spec.without_quantizers(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams { weight: l.weight.clone(), bias: l.bias.clone(), ..Default::default() })
                .collect(),
            input_quant: None,
        }
    }

    /// All quantizers in network order, input first.
    pub fn quantizers(&self) -> Vec<(QuantSite, &Quantizer)> {
        let mut out = Vec::new();
        if let Some(q) = &self.input_quant {
            out.push((QuantSite::Input, q));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(q) = &l.weight_quant {
                out.push((QuantSite::Weight(i), q));
            }
            if let Some(q) = &l.act_quant {
                out.push((QuantSite::Activation(i), q));
            }
        }
        out
    }

    pub fn quantizer(&self, site: QuantSite) -> Option<&Quantizer> {
        match site {
            QuantSite::Input => self.input_quant.as_ref(),
            QuantSite::Weight(i) => self.layers.get(i)?.weight_quant.as_ref(),
            QuantSite::Activation(i) => self.layers.get(i)?.act_quant.as_ref(),
        }
    }

    pub fn quantizer_mut(&mut self, site: QuantSite) -> Option<&mut Quantizer> {
        match site {
            QuantSite::Input => self.input_quant.as_mut(),
            QuantSite::Weight(i) => self.layers.get_mut(i)?.weight_quant.as_mut(),
            QuantSite::Activation(i) => self.layers.get_mut(i)?.act_quant.as_mut(),
        }
    }

    /// Freezes every activation offset. `FixedZero` sets `β = 0`; `FixedXmin`
    /// sets `β` from `x_min(site)`.
    pub fn fix_offsets(&mut self, mode: OffsetMode, x_min: impl Fn(QuantSite) -> Option<f32>) -> Result<()> {
        if mode == OffsetMode::Learned {
            return Err(Error::Config("fixed offset mode must be fixed_zero or fixed_xmin".into()));
        }
        let sites: Vec<QuantSite> = self
            .quantizers()
            .into_iter()
            .filter(|(s, q)| matches!(s, QuantSite::Activation(_)) && q.config.offset_enabled())
            .map(|(s, _)| s)
            .collect();
        if sites.is_empty() {
            return Err(Error::NoOffset("network has no activation offsets to fix".into()));
        }
        for site in sites {
            let beta = match mode {
                OffsetMode::FixedZero => 0.0,
                _ => x_min(site).ok_or_else(|| Error::Network(format!("no measured minimum for {site}")))?,
            };
            let q = self.quantizer_mut(site).expect("site listed above");
            q.config = q.config.with_offset_mode(mode)?;
            let i = match site {
                QuantSite::Activation(i) => i,
                _ => unreachable!(),
            };
            q.state.set_offset(beta);
            q.state.offset_trainable = false;
            self.spec.layers[i].act_quant = Some(q.config);
        }
        Ok(())
    }

    fn quant_vars(&self, tape: &mut Tape, q: &Quantizer, trainable: bool) -> (Var, Option<Var>) {
        let s = tape.leaf(Tensor::scalar(q.state.scale()).with_requires_grad(trainable && q.state.scale_trainable));
        let b = q.config.offset_enabled().then(|| {
            tape.leaf(Tensor::scalar(q.state.beta()).with_requires_grad(trainable && q.state.offset_trainable))
        });
        (s, b)
    }

    /// Records the forward pass of a `[batch, ...]` input and returns the logits.
    ///
    /// `probe`, if given, sees the network input, every weight tensor and
    /// every activation output, before any quantizer is applied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: Tensor,
        trainable: bool,
        recorder: &dyn QuantRecorder,
        mut probe: Option<Probe<'_>>,
    ) -> Result<(Var, Bindings)> {
        let batch = input.shape().first().copied().unwrap_or(0);
        if input.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::Shape(format!(
                "network expects samples of shape {:?}, got {:?}",
                self.spec.input_shape,
                &input.shape()[1..]
            )));
        }
        let mut b = Bindings::default();
        let mut x = tape.constant(input);
        if let Some(p) = probe.as_deref_mut() {
            p(QuantSite::Input, tape.value(x));
        }
        if let Some(q) = &self.input_quant {
            let (s, o) = self.quant_vars(tape, q, trainable);
            x = recorder.record(tape, x, s, o, &q.config, q.state.grad_scale)?;
            b.quantizers.push((QuantSite::Input, s, o));
        }
        for (i, (spec, params)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            let mut wvar = None;
            let mut bvar = None;
            if let (Some(w), Some(bias)) = (&params.weight, &params.bias) {
                let wleaf = tape.leaf(w.clone().with_requires_grad(trainable));
                let bleaf = tape.leaf(bias.clone().with_requires_grad(trainable));
                wvar = Some(wleaf);
                bvar = Some(bleaf);
                let mut wq = wleaf;
                if let Some(p) = probe.as_deref_mut() {
                    p(QuantSite::Weight(i), w);
                }
                if let Some(q) = &params.weight_quant {
                    let (s, o) = self.quant_vars(tape, q, trainable);
                    wq = recorder.record(tape, wleaf, s, o, &q.config, q.state.grad_scale)?;
                    b.quantizers.push((QuantSite::Weight(i), s, o));
                }
                x = match spec.kind {
                    LayerKind::Dense { .. } => {
                        let y = tape.matmul(x, wq)?;
                        tape.add(y, bleaf)?
                    }
                    LayerKind::Conv2d { out_channels, stride, padding, .. } => {
                        let y = tape.conv2d(x, wq, stride, padding)?;
                        let bb = tape.reshape(bleaf, [out_channels, 1, 1])?;
                        tape.add(y, bb)?
                    }
                    _ => unreachable!("only dense and conv layers carry weights"),
                };
            } else {
                x = match spec.kind {
                    LayerKind::Activation(kind) => tape.activation(x, kind),
                    LayerKind::Flatten => {
                        let per: usize = tape.value(x).shape()[1..].iter().product();
                        tape.reshape(x, [batch, per])?
                    }
                    _ => unreachable!("weighted layers handled above"),
                };
                if let (Some(p), LayerKind::Activation(_)) = (probe.as_deref_mut(), &spec.kind) {
                    p(QuantSite::Activation(i), tape.value(x));
                }
                if let Some(q) = &params.act_quant {
                    let (s, o) = self.quant_vars(tape, q, trainable);
                    x = recorder.record(tape, x, s, o, &q.config, q.state.grad_scale)?;
                    b.quantizers.push((QuantSite::Activation(i), s, o));
                }
            }
            b.weights.push(wvar);
            b.biases.push(bvar);
        }
        Ok((x, b))
    }

    /// Logits for a batch, no gradients.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward(&mut tape, input.clone(), false, &FakeQuantRecorder, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Classification accuracy in `[0, 1]`.
    pub fn accuracy(&self, data: &Dataset) -> Result<f32> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for batch in data.batches(256) {
            let logits = self.predict(&batch.inputs)?;
            correct += count_correct(&logits, &batch.labels);
        }
        Ok(correct as f32 / data.len() as f32)
    }

    /// Runs the float network (quantizers bypassed) and hands every quantizer
    /// input to `probe`.
    pub fn probe_float(&self, input: &Tensor, probe: Probe<'_>) -> Result<()> {
        let mut tape = Tape::new();
        self.forward(&mut tape, input.clone(), false, &Bypass, Some(probe))?;
        Ok(())
    }
}

impl Network {
    /// Runs the quantized network and hands every quantizer input to `probe`.
    pub fn probe(&self, input: &Tensor, probe: Probe<'_>) -> Result<()> {
        let mut tape = Tape::new();
        self.forward(&mut tape, input.clone(), false, &FakeQuantRecorder, Some(probe))?;
        Ok(())
    }
}

/// Records quantizers as identity.
struct Bypass;

impl QuantRecorder for Bypass {
    fn record(&self, _: &mut Tape, x: Var, _: Var, _: Option<Var>, _: &QuantConfig, _: f32) -> Result<Var> {
        Ok(x)
    }
}

pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(r, &l)| {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0;
            arg == l
        })
        .count()
}
