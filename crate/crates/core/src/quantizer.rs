//! Learnable uniform fake quantization.
//!
//! A quantizer maps `x` to integer codes `x̄ = round(clamp((x - β)/s, n, p))` and
//! back to `x̂ = x̄·s + β`. The scale `s` and offset `β` are trainable; their
//! gradients use the straight-through estimator for the rounding step:
//!
//! | branch        | ∂x̂/∂s          | ∂x̂/∂β | ∂x̂/∂x |
//! |---------------|----------------|-------|-------|
//! | `u <= n`      | `n`            | 1     | 0     |
//! | `n < u < p`   | `round(u) - u` | 0     | 1     |
//! | `u >= p`      | `p`            | 1     | 0     |
//!
//! with `u = (x - β)/s`. Points exactly on `n` or `p` count as clamped.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scales are never allowed below this value.
pub const MIN_SCALE: f32 = 1e-8;

/// How the offset of an offset-enabled quantizer evolves during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    Learned,
    /// Frozen at zero, which reduces to symmetric quantization.
    FixedZero,
    /// Frozen at the measured minimum of the quantizer input.
    FixedXmin,
}

impl OffsetMode {
    pub(crate) fn code(self) -> u8 {
        match self {
            OffsetMode::Learned => 1,
            OffsetMode::FixedZero => 2,
            OffsetMode::FixedXmin => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Option<Self>> {
        match code {
            0 => Some(None),
            1 => Some(Some(OffsetMode::Learned)),
            2 => Some(Some(OffsetMode::FixedZero)),
            3 => Some(Some(OffsetMode::FixedXmin)),
            _ => None,
        }
    }
}

impl fmt::Display for OffsetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OffsetMode::Learned => "learned",
            OffsetMode::FixedZero => "fixed_zero",
            OffsetMode::FixedXmin => "fixed_xmin",
        })
    }
}

impl std::str::FromStr for OffsetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(OffsetMode::Learned),
            "fixed_zero" | "zero" => Ok(OffsetMode::FixedZero),
            "fixed_xmin" | "xmin" => Ok(OffsetMode::FixedXmin),
            other => Err(Error::Config(format!("unknown offset mode '{other}'"))),
        }
    }
}

/// The four activation parametrizations: signedness crossed with offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActivationScheme {
    /// Config 1: unsigned range, no offset (plain LSQ).
    UnsignedSymmetric,
    /// Config 2: signed range, no offset.
    SignedSymmetric,
    /// Config 3: signed range, learned offset.
    SignedAsymmetric,
    /// Config 4: unsigned range, learned offset.
    UnsignedAsymmetric,
}

impl ActivationScheme {
    pub const ALL: [ActivationScheme; 4] = [
        ActivationScheme::UnsignedSymmetric,
        ActivationScheme::SignedSymmetric,
        ActivationScheme::SignedAsymmetric,
        ActivationScheme::UnsignedAsymmetric,
    ];

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(ActivationScheme::UnsignedSymmetric),
            2 => Ok(ActivationScheme::SignedSymmetric),
            3 => Ok(ActivationScheme::SignedAsymmetric),
            4 => Ok(ActivationScheme::UnsignedAsymmetric),
            other => Err(Error::UnknownConfig(other)),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            ActivationScheme::UnsignedSymmetric => 1,
            ActivationScheme::SignedSymmetric => 2,
            ActivationScheme::SignedAsymmetric => 3,
            ActivationScheme::UnsignedAsymmetric => 4,
        }
    }

    pub fn signed(self) -> bool {
        matches!(self, ActivationScheme::SignedSymmetric | ActivationScheme::SignedAsymmetric)
    }

    pub fn has_offset(self) -> bool {
        matches!(self, ActivationScheme::SignedAsymmetric | ActivationScheme::UnsignedAsymmetric)
    }
}

/// Integer code range for a bit-width.
pub fn quant_bounds(bits: u32, signed: bool) -> Result<(i32, i32)> {
    if !(2..=24).contains(&bits) {
        return Err(Error::BitWidth(bits));
    }
    if signed {
        let half = 1i32 << (bits - 1);
        Ok((-half, half - 1))
    } else {
        Ok((0, (1i32 << bits) - 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantConfig {
    bits: u32,
    signed: bool,
    offset: Option<OffsetMode>,
    n: i32,
    p: i32,
}

impl QuantConfig {
    pub fn new(bits: u32, signed: bool, offset: Option<OffsetMode>) -> Result<Self> {
        let (n, p) = quant_bounds(bits, signed)?;
        Ok(Self { bits, signed, offset, n, p })
    }

    /// Signed symmetric quantizer used for all weights.
    pub fn weight(bits: u32) -> Result<Self> {
        Self::new(bits, true, None)
    }

    pub fn activation(scheme: ActivationScheme, bits: u32) -> Result<Self> {
        let offset = scheme.has_offset().then_some(OffsetMode::Learned);
        Self::new(bits, scheme.signed(), offset)
    }

    /// Same range, with the offset frozen according to `mode`.
    pub fn with_offset_mode(self, mode: OffsetMode) -> Result<Self> {
        if self.offset.is_none() {
            return Err(Error::NoOffset(format!("{self}")));
        }
        Ok(Self { offset: Some(mode), ..self })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn offset_mode(&self) -> Option<OffsetMode> {
        self.offset
    }

    pub fn offset_enabled(&self) -> bool {
        self.offset.is_some()
    }

    pub fn n(&self) -> i32 {
        self.n
    }

    pub fn p(&self) -> i32 {
        self.p
    }

    /// The activation scheme this config corresponds to, ignoring offset mode.
    pub fn scheme(&self) -> ActivationScheme {
        match (self.signed, self.offset.is_some()) {
            (false, false) => ActivationScheme::UnsignedSymmetric,
            (true, false) => ActivationScheme::SignedSymmetric,
            (true, true) => ActivationScheme::SignedAsymmetric,
            (false, true) => ActivationScheme::UnsignedAsymmetric,
        }
    }
}

impl fmt::Display for QuantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-bit {} [{}, {}]",
            self.bits,
            if self.signed { "signed" } else { "unsigned" },
            self.n,
            self.p
        )?;
        match self.offset {
            Some(mode) => write!(f, " offset={mode}"),
            None => write!(f, " no offset"),
        }
    }
}

/// Gradient scale `1/sqrt(numel·p)` for a quantizer fed by `numel` values.
pub fn lsq_grad_scale(numel: usize, p: i32) -> f32 {
    (1.0 / ((numel.max(1) as f64) * (p.max(1) as f64)).sqrt()) as f32
}

/// Trainable parameters of one quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerState {
    scale: f32,
    offset: Option<f32>,
    pub scale_trainable: bool,
    pub offset_trainable: bool,
    pub grad_scale: f32,
}

impl QuantizerState {
    /// State consistent with `cfg`: the offset exists only when the config has
    /// one, and is trainable only in `Learned` mode.
    pub fn for_config(cfg: &QuantConfig, scale: f32, offset: f32, grad_scale: f32) -> Self {
        let offset = match cfg.offset_mode() {
            None => None,
            Some(OffsetMode::FixedZero) => Some(0.0),
            Some(_) => Some(offset),
        };
        Self {
            scale: scale.max(MIN_SCALE),
            offset,
            scale_trainable: true,
            offset_trainable: cfg.offset_mode() == Some(OffsetMode::Learned),
            grad_scale,
        }
    }

    /// Raw constructor; `scale` is not floored so validation happens on use.
    pub fn new(scale: f32, offset: Option<f32>) -> Self {
        Self {
            scale,
            offset,
            scale_trainable: true,
            offset_trainable: offset.is_some(),
            grad_scale: 1.0,
        }
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn offset(&self) -> Option<f32> {
        self.offset
    }

    /// Offset as used in formulas: zero when disabled.
    pub fn beta(&self) -> f32 {
        self.offset.unwrap_or(0.0)
    }

    pub fn set_scale(&mut self, scale: f32) {
        self.scale = if scale.is_finite() { scale.max(MIN_SCALE) } else { MIN_SCALE };
    }

    /// No-op when the offset is disabled.
    pub fn set_offset(&mut self, offset: f32) {
        if let Some(b) = &mut self.offset {
            *b = offset;
        }
    }
}

/// Which piece of the piecewise gradient a point falls on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Below,
    Interior,
    Above,
}

/// Classifies `u = (x - β)/s`; `u == n` and `u == p` are clamped.
#[inline]
pub fn boundary_tiebreak(u: f32, n: f32, p: f32) -> Branch {
    if u <= n {
        Branch::Below
    } else if u >= p {
        Branch::Above
    } else {
        Branch::Interior
    }
}

/// Per-element partial derivatives of `x̂` at normalized input `u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Partials {
    pub ds: f32,
    pub dbeta: f32,
    pub dx: f32,
}

#[inline]
pub fn local_partials(u: f32, n: f32, p: f32) -> Partials {
    match boundary_tiebreak(u, n, p) {
        Branch::Below => Partials { ds: n, dbeta: 1.0, dx: 0.0 },
        Branch::Above => Partials { ds: p, dbeta: 1.0, dx: 0.0 },
        Branch::Interior => Partials { ds: u.round_ties_even() - u, dbeta: 0.0, dx: 1.0 },
    }
}

#[inline]
fn normalize(x: f32, scale: f32, offset: Option<f32>) -> f32 {
    match offset {
        Some(b) => (x - b) / scale,
        None => x / scale,
    }
}

/// Integer code for one value, as a float.
#[inline]
pub fn quantize_code(x: f32, scale: f32, offset: Option<f32>, n: f32, p: f32) -> f32 {
    normalize(x, scale, offset).clamp(n, p).round_ties_even()
}

#[inline]
pub fn dequantize(code: f32, scale: f32, offset: Option<f32>) -> f32 {
    match offset {
        Some(b) => code * scale + b,
        None => code * scale,
    }
}

/// Writes `x̂` into `hat` and, if given, the codes into `codes`.
pub(crate) fn fake_quantize_slice(
    x: &[f32],
    scale: f32,
    offset: Option<f32>,
    n: f32,
    p: f32,
    hat: &mut [f32],
    mut codes: Option<&mut [f32]>,
) {
    for (i, (&xi, h)) in x.iter().zip(hat.iter_mut()).enumerate() {
        let code = quantize_code(xi, scale, offset, n, p);
        *h = dequantize(code, scale, offset);
        if let Some(c) = codes.as_deref_mut() {
            c[i] = code;
        }
    }
}

/// Returns `(dx, Σ upstream·∂x̂/∂s, Σ upstream·∂x̂/∂β)` without the gradient scale.
pub(crate) fn fake_quantize_backward_slice(
    x: &[f32],
    scale: f32,
    offset: Option<f32>,
    n: f32,
    p: f32,
    upstream: &[f32],
) -> (Vec<f32>, f64, f64) {
    let mut dx = Vec::with_capacity(x.len());
    let mut ds = 0f64;
    let mut db = 0f64;
    for (&xi, &g) in x.iter().zip(upstream) {
        let part = local_partials(normalize(xi, scale, offset), n, p);
        dx.push(g * part.dx);
        ds += g as f64 * part.ds as f64;
        db += g as f64 * part.dbeta as f64;
    }
    (dx, ds, db)
}

fn check_scale(state: &QuantizerState) -> Result<()> {
    if !(state.scale.is_finite() && state.scale > 0.0) {
        return Err(Error::NonPositiveScale(state.scale));
    }
    Ok(())
}

fn effective_offset(state: &QuantizerState, cfg: &QuantConfig) -> Option<f32> {
    if cfg.offset_enabled() {
        Some(state.beta())
    } else {
        None
    }
}

/// Returns `(x̂, x̄)`.
pub fn fake_quantize_forward(x: &Tensor, state: &QuantizerState, cfg: &QuantConfig) -> Result<(Tensor, Tensor)> {
    check_scale(state)?;
    let mut hat = vec![0f32; x.numel()];
    let mut codes = vec![0f32; x.numel()];
    fake_quantize_slice(
        x.data(),
        state.scale,
        effective_offset(state, cfg),
        cfg.n as f32,
        cfg.p as f32,
        &mut hat,
        Some(&mut codes),
    );
    Ok((Tensor::new(x.shape(), hat)?, Tensor::new(x.shape(), codes)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantGrads {
    pub dx: Tensor,
    pub ds: f32,
    pub dbeta: f32,
}

pub fn fake_quantize_backward(
    x: &Tensor,
    state: &QuantizerState,
    cfg: &QuantConfig,
    upstream: &Tensor,
) -> Result<QuantGrads> {
    check_scale(state)?;
    if upstream.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match input {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let offset = effective_offset(state, cfg);
    let (dx, ds, db) =
        fake_quantize_backward_slice(x.data(), state.scale, offset, cfg.n as f32, cfg.p as f32, upstream.data());
    let g = state.grad_scale as f64;
    Ok(QuantGrads {
        dx: Tensor::new(x.shape(), dx)?,
        ds: (g * ds) as f32,
        dbeta: if offset.is_some() { (g * db) as f32 } else { 0.0 },
    })
}
