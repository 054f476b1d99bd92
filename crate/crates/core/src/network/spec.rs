use crate::activation::ActivationKind;
use crate::conv::output_extent;
use crate::error::{Error, Result};
use crate::quantizer::{ActivationScheme, OffsetMode, QuantConfig};

/// Bit-width of the quantizer applied to raw network inputs.
pub const INPUT_BITS: u32 = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// `y = x·W + b` with `W` stored as `[inputs, outputs]`.
    Dense { inputs: usize, outputs: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Activation(ActivationKind),
    Flatten,
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => Some(vec![inputs, outputs]),
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some(vec![out_channels, in_channels, kernel, kernel])
            }
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerKind::Dense { outputs, .. } => Some(outputs),
            LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::Network(format!("dense layer expects [{inputs}], got {input:?}")));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let &[c, h, w] = input else {
                    return Err(Error::Network(format!("conv layer expects [C, H, W], got {input:?}")));
                };
                if c != in_channels {
                    return Err(Error::Network(format!("conv layer expects {in_channels} channels, got {c}")));
                }
                Ok(vec![
                    out_channels,
                    output_extent(h, kernel, stride, padding)?,
                    output_extent(w, kernel, stride, padding)?,
                ])
            }
            LayerKind::Activation(_) => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Always signed and offset-free when present.
    pub weight_quant: Option<QuantConfig>,
    pub act_quant: Option<QuantConfig>,
}

impl LayerSpec {
    pub fn plain(kind: LayerKind) -> Self {
        Self { kind, weight_quant: None, act_quant: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub input_quant: Option<QuantConfig>,
}

impl NetworkSpec {
    pub fn new(kinds: Vec<LayerKind>, input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let spec = Self {
            layers: kinds.into_iter().map(LayerSpec::plain).collect(),
            input_shape,
            classes,
            input_quant: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks shape compatibility and quantizer placement.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        if shapes.last().map(Vec::as_slice) != Some(&[self.classes][..]) {
            return Err(Error::Network(format!(
                "network ends in {:?}, expected [{}] logits",
                shapes.last(),
                self.classes
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(q) = &l.weight_quant {
                if !l.kind.has_weights() {
                    return Err(Error::Network(format!("layer {i} has no weights to quantize")));
                }
                if q.offset_enabled() {
                    return Err(Error::AsymmetricWeights(i));
                }
            }
            if l.act_quant.is_some() && !matches!(l.kind, LayerKind::Activation(_)) {
                return Err(Error::Network(format!("activation quantizer on non-activation layer {i}")));
            }
        }
        Ok(())
    }

    /// Per-sample output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = l.kind.output_shape(&cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Per-sample input shape of layer `i`.
    pub fn input_shape_of(&self, i: usize) -> Result<Vec<usize>> {
        if i == 0 {
            return Ok(self.input_shape.clone());
        }
        Ok(self.shapes()?[i - 1].clone())
    }

    /// Three 3×3 conv layers and two dense layers for 1×8×8 inputs.
    pub fn conv_net(act: ActivationKind) -> Self {
        use LayerKind::*;
        let kinds = vec![
            Conv2d { in_channels: 1, out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            Activation(act),
            Conv2d { in_channels: 8, out_channels: 16, kernel: 3, stride: 2, padding: 1 },
            Activation(act),
            Conv2d { in_channels: 16, out_channels: 16, kernel: 3, stride: 1, padding: 1 },
            Activation(act),
            Flatten,
            Dense { inputs: 256, outputs: 32 },
            Activation(act),
            Dense { inputs: 32, outputs: 10 },
        ];
        Self::new(kinds, vec![1, 8, 8], 10).expect("static architecture is consistent")
    }

    /// Fully connected network for 2-D inputs.
    pub fn mlp(act: ActivationKind, hidden: usize, classes: usize) -> Self {
        use LayerKind::*;
        let kinds = vec![
            Dense { inputs: 2, outputs: hidden },
            Activation(act),
            Dense { inputs: hidden, outputs: hidden },
            Activation(act),
            Dense { inputs: hidden, outputs: classes },
        ];
        Self::new(kinds, vec![2], classes).expect("static architecture is consistent")
    }

    /// Adds signed symmetric weight quantizers at `bits_w`, activation
    /// quantizers following `config` (1–4) at `bits_a`, and an 8-bit input
    /// quantizer with a frozen offset.
    ///
    /// Identity activations carry no nonlinearity and get a signed symmetric
    /// quantizer regardless of `config`.
    pub fn with_quantizers(&self, bits_w: u32, bits_a: u32, config: u8) -> Result<Self> {
        let scheme = ActivationScheme::from_id(config)?;
        let weight = QuantConfig::weight(bits_w)?;
        let act = QuantConfig::activation(scheme, bits_a)?;
        let identity = QuantConfig::activation(ActivationScheme::SignedSymmetric, bits_a)?;
        let layers = self
            .layers
            .iter()
            .map(|l| LayerSpec {
                kind: l.kind.clone(),
                weight_quant: l.kind.has_weights().then_some(weight),
                act_quant: match l.kind {
                    LayerKind::Activation(ActivationKind::Identity) => Some(identity),
                    LayerKind::Activation(_) => Some(act),
                    _ => None,
                },
            })
            .collect();
        let input_quant = QuantConfig::new(INPUT_BITS, false, Some(OffsetMode::FixedXmin))?;
        let spec = Self { layers, input_quant: Some(input_quant), ..self.clone() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn without_quantizers(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| LayerSpec::plain(l.kind.clone())).collect(),
            input_quant: None,
            ..self.clone()
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.input_quant.is_some() || self.layers.iter().any(|l| l.weight_quant.is_some() || l.act_quant.is_some())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.kind.weight_shape().map_or(0, |s| s.iter().product::<usize>()) + l.kind.bias_len().unwrap_or(0)
            })
            .sum()
    }
}
