use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::model::{count_correct, FakeQuantRecorder, Network, QuantRecorder, QuantSite};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Learning-rate multiplier for quantizer scales.
    pub scale_lr_mult: f32,
    /// Learning-rate multiplier for quantizer offsets.
    pub offset_lr_mult: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            scale_lr_mult: 1.0,
            offset_lr_mult: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.scale_lr_mult >= 0.0
            && self.offset_lr_mult >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss: f32,
    pub train_acc: f32,
    pub val_acc: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochMetrics>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f32>,
    /// Largest single-step change of each activation offset.
    pub max_offset_step: BTreeMap<QuantSite, f32>,
    /// Largest gradient magnitude seen by each activation offset.
    pub max_offset_grad: BTreeMap<QuantSite, f32>,
}

impl TrainTrace {
    pub fn final_val_acc(&self) -> Option<f32> {
        self.epochs.last().map(|e| e.val_acc)
    }

    pub fn best_val_acc(&self) -> Option<f32> {
        self.epochs.iter().map(|e| e.val_acc).reduce(f32::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Weight(usize),
    Bias(usize),
    Scale(QuantSite),
    Offset(QuantSite),
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Default)]
struct Sgd {
    velocity: BTreeMap<Slot, Vec<f32>>,
}

impl Sgd {
    fn step(&mut self, slot: Slot, param: &mut [f32], grad: &[f32], lr: f32, momentum: f32, decay: f32) {
        let v = self.velocity.entry(slot).or_insert_with(|| vec![0.0; param.len()]);
        for ((p, g), vi) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *vi = momentum * *vi + g + decay * *p;
            *p -= lr * *vi;
        }
    }
}

/// Trains every weight, bias and trainable quantizer parameter.
pub fn train(net: &mut Network, data: &Split, cfg: &TrainConfig) -> Result<TrainTrace> {
    train_with(net, data, cfg, &FakeQuantRecorder)
}

pub fn train_with(
    net: &mut Network,
    data: &Split,
    cfg: &TrainConfig,
    recorder: &dyn QuantRecorder,
) -> Result<TrainTrace> {
    cfg.validate()?;
    // distinct stream from calibration sampling, which also derives from the seed
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0000_0000);
    let mut opt = Sgd::default();
    let mut trace = TrainTrace::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0f64;
        let mut correct = 0usize;
        for batch in data.train.shuffled_batches(cfg.batch_size, &mut rng) {
            let loss = train_step(net, &batch, cfg, recorder, &mut opt, &mut trace, &mut correct)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            trace.step_losses.push(loss);
            loss_sum += loss as f64 * batch.len() as f64;
            step += 1;
        }
        let n = data.train.len().max(1);
        trace.epochs.push(EpochMetrics {
            epoch,
            step,
            loss: (loss_sum / n as f64) as f32,
            train_acc: correct as f32 / n as f32,
            val_acc: net.accuracy(&data.val)?,
        });
    }
    Ok(trace)
}

fn train_step(
    net: &mut Network,
    batch: &Dataset,
    cfg: &TrainConfig,
    recorder: &dyn QuantRecorder,
    opt: &mut Sgd,
    trace: &mut TrainTrace,
    correct: &mut usize,
) -> Result<f32> {
    let mut tape = Tape::new();
    let (logits, bind) = net.forward(&mut tape, batch.inputs.clone(), true, recorder, None)?;
    *correct += count_correct(tape.value(logits), &batch.labels);
    let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Ok(loss_value);
    }
    tape.backward(loss)?;

    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        if let (Some(w), Some(v)) = (layer.weight.as_mut(), bind.weights[i]) {
            if let Some(g) = tape.grad(v) {
                opt.step(Slot::Weight(i), w.data_mut(), g, cfg.lr, cfg.momentum, cfg.weight_decay);
            }
        }
        if let (Some(b), Some(v)) = (layer.bias.as_mut(), bind.biases[i]) {
            if let Some(g) = tape.grad(v) {
                opt.step(Slot::Bias(i), b.data_mut(), g, cfg.lr, cfg.momentum, 0.0);
            }
        }
    }
    for &(site, svar, ovar) in &bind.quantizers {
        let q = net.quantizer_mut(site).expect("bound quantizer exists");
        if let Some(g) = tape.grad(svar) {
            let mut s = [q.state.scale()];
            opt.step(Slot::Scale(site), &mut s, g, cfg.lr * cfg.scale_lr_mult, cfg.momentum, 0.0);
            q.state.set_scale(s[0]);
        }
        if let Some(ov) = ovar {
            let tracked = matches!(site, QuantSite::Activation(_));
            if tracked {
                trace.max_offset_step.entry(site).or_insert(0.0);
                trace.max_offset_grad.entry(site).or_insert(0.0);
            }
            if let Some(g) = tape.grad(ov) {
                let before = q.state.beta();
                let mut b = [before];
                opt.step(Slot::Offset(site), &mut b, g, cfg.lr * cfg.offset_lr_mult, cfg.momentum, 0.0);
                q.state.set_offset(b[0]);
                if tracked {
                    let st = trace.max_offset_step.get_mut(&site).expect("inserted above");
                    *st = st.max((b[0] - before).abs());
                    let gr = trace.max_offset_grad.get_mut(&site).expect("inserted above");
                    *gr = gr.max(g[0].abs());
                }
            }
        }
    }
    Ok(loss_value)
}

/// Convenience for callers holding bare tensors.
pub fn evaluate(net: &Network, inputs: &Tensor, labels: &[usize]) -> Result<f32> {
    let logits = net.predict(inputs)?;
    Ok(count_correct(&logits, labels) as f32 / labels.len().max(1) as f32)
}
