//! Versioned little-endian checkpoint container.
//!
//! ```text
//! magic "LSQC" | version u32
//! spec:    rank u32, dims u32*, classes u32, input quant config, layer count u32,
//!          per layer: kind tag u8 + u32 fields, weight quant config, act quant config
//! params:  per layer: weight tensor?, bias tensor?
//! quant:   per quantizer site (input, then layer order): state
//! ```
//! A config is `present u8 [bits u8, signed u8, offset u8]`; a tensor is
//! `present u8 [rank u32, dims u32*, f32*]`; a state is
//! `present u8 [scale f32, has_offset u8, offset f32, s_trainable u8, β_trainable u8, g f32]`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::quantizer::{OffsetMode, QuantConfig, QuantizerState};
use crate::tensor::Tensor;

use super::model::{LayerParams, Network, Quantizer};
use super::spec::{LayerKind, LayerSpec, NetworkSpec};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSQC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub(crate) fn new(inner: W) -> Self {
        Self { inner }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub(crate) fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub(crate) fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn i32(&mut self, v: i32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn len(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} exceeds u32")))?;
        self.u32(v)
    }

    pub(crate) fn dims(&mut self, dims: &[usize]) -> Result<()> {
        self.len(dims.len())?;
        dims.iter().try_for_each(|&d| self.len(d))
    }

    pub(crate) fn tensor(&mut self, t: Option<&Tensor>) -> Result<()> {
        match t {
            None => self.u8(0),
            Some(t) => {
                self.u8(1)?;
                self.dims(t.shape())?;
                t.data().iter().try_for_each(|&v| self.f32(v))
            }
        }
    }

    pub(crate) fn config(&mut self, c: Option<&QuantConfig>) -> Result<()> {
        match c {
            None => self.u8(0),
            Some(c) => {
                self.u8(1)?;
                self.u8(c.bits() as u8)?;
                self.u8(c.signed() as u8)?;
                self.u8(c.offset_mode().map_or(0, OffsetMode::code))
            }
        }
    }

    pub(crate) fn state(&mut self, s: Option<&QuantizerState>) -> Result<()> {
        match s {
            None => self.u8(0),
            Some(s) => {
                self.u8(1)?;
                self.f32(s.scale())?;
                self.u8(s.offset().is_some() as u8)?;
                self.f32(s.beta())?;
                self.u8(s.scale_trainable as u8)?;
                self.u8(s.offset_trainable as u8)?;
                self.f32(s.grad_scale)
            }
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub(crate) fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.len()?;
        if rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        (0..rank).map(|_| self.len()).collect()
    }

    pub(crate) fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("invalid flag byte {v}"))),
        }
    }

    pub(crate) fn tensor(&mut self) -> Result<Option<Tensor>> {
        if !self.flag()? {
            return Ok(None);
        }
        let shape = self.dims()?;
        let numel: usize = shape.iter().product();
        if numel * 4 > self.buf.len() {
            return Err(Error::Format("tensor data truncated".into()));
        }
        let data = (0..numel).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
        Ok(Some(Tensor::new(shape, data)?))
    }

    pub(crate) fn config(&mut self) -> Result<Option<QuantConfig>> {
        if !self.flag()? {
            return Ok(None);
        }
        let bits = self.u8()? as u32;
        let signed = self.flag()?;
        let code = self.u8()?;
        let offset = OffsetMode::from_code(code).ok_or_else(|| Error::Format(format!("offset code {code}")))?;
        Ok(Some(QuantConfig::new(bits, signed, offset)?))
    }

    pub(crate) fn state(&mut self) -> Result<Option<QuantizerState>> {
        if !self.flag()? {
            return Ok(None);
        }
        let scale = self.f32()?;
        let has_offset = self.flag()?;
        let beta = self.f32()?;
        let mut st = QuantizerState::new(scale, has_offset.then_some(beta));
        st.scale_trainable = self.flag()?;
        st.offset_trainable = self.flag()?;
        st.grad_scale = self.f32()?;
        Ok(Some(st))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

fn write_kind<W: Write>(w: &mut Writer<W>, kind: &LayerKind) -> Result<()> {
    match *kind {
        LayerKind::Dense { inputs, outputs } => {
            w.u8(0)?;
            w.len(inputs)?;
            w.len(outputs)
        }
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            w.u8(1)?;
            [in_channels, out_channels, kernel, stride, padding].iter().try_for_each(|&v| w.len(v))
        }
        LayerKind::Activation(a) => {
            w.u8(2)?;
            w.u8(a.code())
        }
        LayerKind::Flatten => w.u8(3),
    }
}

fn read_kind(r: &mut Reader<'_>) -> Result<LayerKind> {
    Ok(match r.u8()? {
        0 => LayerKind::Dense { inputs: r.len()?, outputs: r.len()? },
        1 => LayerKind::Conv2d {
            in_channels: r.len()?,
            out_channels: r.len()?,
            kernel: r.len()?,
            stride: r.len()?,
            padding: r.len()?,
        },
        2 => {
            let code = r.u8()?;
            LayerKind::Activation(
                ActivationKind::from_code(code).ok_or_else(|| Error::Format(format!("activation code {code}")))?,
            )
        }
        3 => LayerKind::Flatten,
        t => return Err(Error::Format(format!("unknown layer tag {t}"))),
    })
}

pub(crate) fn write_spec<W: Write>(w: &mut Writer<W>, spec: &NetworkSpec) -> Result<()> {
    w.dims(&spec.input_shape)?;
    w.len(spec.classes)?;
    w.config(spec.input_quant.as_ref())?;
    w.len(spec.layers.len())?;
    for l in &spec.layers {
        write_kind(w, &l.kind)?;
        w.config(l.weight_quant.as_ref())?;
        w.config(l.act_quant.as_ref())?;
    }
    Ok(())
}

pub(crate) fn read_spec(r: &mut Reader<'_>) -> Result<NetworkSpec> {
    let input_shape = r.dims()?;
    let classes = r.len()?;
    let input_quant = r.config()?;
    let count = r.len()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let kind = read_kind(r)?;
        layers.push(LayerSpec { kind, weight_quant: r.config()?, act_quant: r.config()? });
    }
    let spec = NetworkSpec { layers, input_shape, classes, input_quant };
    spec.validate()?;
    Ok(spec)
}

pub fn encode(net: &Network) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut w = Writer::new(&mut buf);
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    write_spec(&mut w, net.spec())?;
    for l in net.layers() {
        w.tensor(l.weight.as_ref())?;
        w.tensor(l.bias.as_ref())?;
    }
    w.state(net.input_quant().map(|q| &q.state))?;
    for l in net.layers() {
        w.state(l.weight_quant.as_ref().map(|q| &q.state))?;
        w.state(l.act_quant.as_ref().map(|q| &q.state))?;
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let spec = read_spec(&mut r)?;
    let mut layers: Vec<LayerParams> = Vec::with_capacity(spec.layers.len());
    for _ in &spec.layers {
        layers.push(LayerParams { weight: r.tensor()?, bias: r.tensor()?, ..Default::default() });
    }
    let pair = |cfg: Option<QuantConfig>, st: Option<QuantizerState>| -> Result<Option<Quantizer>> {
        match (cfg, st) {
            (Some(config), Some(state)) => Ok(Some(Quantizer { config, state })),
            (None, None) => Ok(None),
            _ => Err(Error::Format("quantizer state does not match description".into())),
        }
    };
    let input_quant = pair(spec.input_quant, r.state()?)?;
    for (l, p) in spec.layers.iter().zip(layers.iter_mut()) {
        p.weight_quant = pair(l.weight_quant, r.state()?)?;
        p.act_quant = pair(l.act_quant, r.state()?)?;
    }
    r.finish()?;
    Network::from_parts(spec, layers, input_quant)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(net)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    decode(&bytes)
}
