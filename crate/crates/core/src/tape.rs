//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! nodes in reverse recorded order, so each op's rule runs exactly once, and
//! gradients from multiple consumers are summed.

use crate::activation::ActivationKind;
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::quantizer;
use crate::tensor::{
    broadcast_index_map, broadcast_shape, matmul_at_kernel, matmul_bt_kernel, matmul_kernel, Tensor,
};

/// Upstream-to-input gradient for one output element.
type ElementGrad<'a> = Box<dyn Fn(usize) -> f32 + 'a>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside this module.
pub trait CustomOp: Send {
    /// Gradient with respect to each input, or `None` for no contribution.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &[f32]) -> Vec<Option<Vec<f32>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var, a_map: Option<Vec<usize>>, b_map: Option<Vec<usize>> },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeometry, cols: Vec<f32> },
    Activation { x: Var, kind: ActivationKind },
    Reshape { x: Var },
    Scale { x: Var, factor: f32 },
    /// Sum over axes; `map[i]` is the output slot of input element `i`.
    Reduce { x: Var, map: Vec<usize>, factor: f32 },
    FakeQuant { x: Var, scale: Var, offset: Option<Var>, n: f32, p: f32, grad_scale: f32 },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Records an input; it receives a gradient iff `requires_grad` is set on it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let a_map = (ta.shape() != shape.as_slice()).then(|| broadcast_index_map(ta.shape(), &shape));
        let b_map = (tb.shape() != shape.as_slice()).then(|| broadcast_index_map(tb.shape(), &shape));
        let numel: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let f = |x: f32, y: f32| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f32> = (0..numel)
            .map(|i| {
                let ia = a_map.as_ref().map_or(i, |m| m[i]);
                let ib = b_map.as_ref().map_or(i, |m| m[i]);
                f(da[ia], db[ib])
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary { kind, a, b, a_map, b_map }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::Shape(format!("matmul needs 2-D operands, got {:?} and {:?}", ta.shape(), tb.shape())));
        };
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions differ: {:?} · {:?}", ta.shape(), tb.shape())));
        }
        let out = matmul_kernel(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Cross-correlation of NCHW input with OCHW kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let geom = ConvGeometry::new(tx.shape(), tw.shape(), stride, padding)?;
        let cols = geom.im2col(tx.data(), 0.0);
        let rows = matmul_bt_kernel(&cols, tw.data(), geom.patches(), geom.patch_len(), geom.out_channels);
        let out = Tensor::new(geom.output_shape(), geom.rows_to_nchw(&rows))?;
        let rg = self.rg(x) || self.rg(w);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv2d { x, w, geom, cols }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| kind.apply(v)).collect();
        let out = Tensor::new(tx.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Activation { x, kind }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.nodes[x.0].value.reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(tx.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::Axis { axis: a, rank: shape.len() });
            }
        }
        let kept: Vec<usize> =
            shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect();
        let map = broadcast_index_map(&kept, &shape);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let factor = if mean { 1.0 / count.max(1) as f32 } else { 1.0 };
        let mut acc = vec![0f64; kept.iter().product()];
        for (&v, &slot) in self.nodes[x.0].value.data().iter().zip(&map) {
            acc[slot] += v as f64;
        }
        let data = acc.into_iter().map(|v| (v * factor as f64) as f32).collect();
        let mut out_shape: Vec<usize> =
            shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Reduce { x, map, factor }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.nodes[x.0].value.rank()).collect();
        self.reduce(x, &axes, false).expect("all axes valid")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.nodes[x.0].value.rank()).collect();
        self.reduce(x, &axes, true).expect("all axes valid")
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    /// Fake-quantizes `x` with single-element `scale` and optional `offset` nodes.
    pub fn fake_quantize(
        &mut self,
        x: Var,
        scale: Var,
        offset: Option<Var>,
        n: i32,
        p: i32,
        grad_scale: f32,
    ) -> Result<Var> {
        let s = self.nodes[scale.0].value.item();
        if s.is_nan() || s <= 0.0 {
            return Err(Error::NonPositiveScale(s));
        }
        let b = offset.map(|o| self.nodes[o.0].value.item());
        let tx = &self.nodes[x.0].value;
        let mut hat = vec![0f32; tx.numel()];
        quantizer::fake_quantize_slice(tx.data(), s, b, n as f32, p as f32, &mut hat, None);
        let out = Tensor::new(tx.shape(), hat)?;
        let rg = self.rg(x) || self.rg(scale) || offset.is_some_and(|o| self.rg(o));
        Ok(self.push(
            out,
            Op::FakeQuant { x, scale, offset, n: n as f32, p: p as f32, grad_scale },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let &[batch, classes] = t.shape() else {
            return Err(Error::Shape(format!("logits must be [batch, classes], got {:?}", t.shape())));
        };
        if labels.len() != batch {
            return Err(Error::Shape(format!("{} labels for batch of {batch}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = vec![0f32; batch * classes];
        let mut loss = 0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &t.data()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            for (c, &v) in row.iter().enumerate() {
                probs[r * classes + c] = ((v as f64 - max).exp() / z) as f32;
            }
            loss += z.ln() + max - row[label] as f64;
        }
        let value = Tensor::scalar((loss / batch as f64) as f32);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Propagates gradients from a scalar `loss` to every reachable node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut send = |v: Var, contribution: Vec<f32>| {
            if !nodes[v.0].value.requires_grad() {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        // sums a broadcast operand's gradient back to its own shape
        let reduce = |len: usize, map: &Option<Vec<usize>>, per_out: &dyn Fn(usize) -> f32| -> Vec<f32> {
            let mut out = vec![0f32; len];
            match map {
                Some(m) => (0..g.len()).for_each(|j| out[m[j]] += per_out(j)),
                None => (0..g.len()).for_each(|j| out[j] = per_out(j)),
            }
            out
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, a_map, b_map } => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let ai = |j: usize| a_map.as_ref().map_or(j, |m| m[j]);
                let bi = |j: usize| b_map.as_ref().map_or(j, |m| m[j]);
                let (ga, gb): (ElementGrad, ElementGrad) = match kind {
                    BinaryKind::Add => (Box::new(|j| g[j]), Box::new(|j| g[j])),
                    BinaryKind::Sub => (Box::new(|j| g[j]), Box::new(|j| -g[j])),
                    BinaryKind::Mul => (Box::new(move |j| g[j] * tb[bi(j)]), Box::new(move |j| g[j] * ta[ai(j)])),
                    BinaryKind::Div => (
                        Box::new(move |j| g[j] / tb[bi(j)]),
                        Box::new(move |j| {
                            let d = tb[bi(j)];
                            -g[j] * ta[ai(j)] / (d * d)
                        }),
                    ),
                };
                if val(*a).requires_grad() {
                    send(*a, reduce(ta.len(), a_map, &*ga));
                }
                if val(*b).requires_grad() {
                    send(*b, reduce(tb.len(), b_map, &*gb));
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if val(*a).requires_grad() {
                    // dA = dC · Bᵀ
                    send(*a, matmul_bt_kernel(g, val(*b).data(), *m, *n, *k));
                }
                if val(*b).requires_grad() {
                    // dB = Aᵀ · dC
                    send(*b, matmul_at_kernel(val(*a).data(), g, *m, *k, *n));
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let d = geom.nchw_to_rows(g);
                if val(*w).requires_grad() {
                    send(*w, matmul_at_kernel(&d, cols, geom.patches(), geom.out_channels, geom.patch_len()));
                }
                if val(*x).requires_grad() {
                    let dcols =
                        matmul_kernel(&d, val(*w).data(), geom.patches(), geom.out_channels, geom.patch_len());
                    send(*x, geom.col2im(&dcols));
                }
            }
            Op::Activation { x, kind } => {
                let dx = val(*x).data().iter().zip(g).map(|(&v, &gi)| gi * kind.derivative(v)).collect();
                send(*x, dx);
            }
            Op::Reshape { x } => send(*x, g.to_vec()),
            Op::Scale { x, factor } => send(*x, g.iter().map(|v| v * factor).collect()),
            Op::Reduce { x, map, factor } => send(*x, map.iter().map(|&slot| g[slot] * factor).collect()),
            Op::FakeQuant { x, scale, offset, n, p, grad_scale } => {
                let s = val(*scale).item();
                let b = offset.map(|o| val(o).item());
                let (dx, ds, db) = quantizer::fake_quantize_backward_slice(val(*x).data(), s, b, *n, *p, g);
                send(*x, dx);
                send(*scale, vec![(*grad_scale as f64 * ds) as f32]);
                if let Some(o) = offset {
                    send(*o, vec![(*grad_scale as f64 * db) as f32]);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f32;
                let mut d: Vec<f32> = probs.iter().map(|&pr| pr * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * classes + l] -= scale;
                }
                send(*logits, d);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                for (v, grad) in inputs.iter().zip(op.backward(&ins, &nodes[i].value, g)) {
                    if let Some(grad) = grad {
                        send(*v, grad);
                    }
                }
            }
        }
    }
}
