#![allow(dead_code)]

use lsq_core::init::{calibrate_with_batches, InitScheme, MseOptions};
use lsq_core::network::{LayerKind, Network, NetworkSpec};
use lsq_core::{ActivationKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ACTIVATIONS: [ActivationKind; 4] =
    [ActivationKind::Swish, ActivationKind::Relu, ActivationKind::Hswish, ActivationKind::LeakyRelu];

/// Dense–act–dense–act–dense network with random sizes, bit-widths and
/// activation config, calibrated by min-max on random inputs.
pub fn random_quantized_mlp(seed: u64) -> (Network, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.random_range(3..=16);
    let h1 = rng.random_range(4..=32);
    let h2 = rng.random_range(4..=32);
    let classes = rng.random_range(2..=10);
    let act = ACTIVATIONS[rng.random_range(0..ACTIVATIONS.len())];
    let kinds = vec![
        LayerKind::Dense { inputs: d_in, outputs: h1 },
        LayerKind::Activation(act),
        LayerKind::Dense { inputs: h1, outputs: h2 },
        LayerKind::Activation(act),
        LayerKind::Dense { inputs: h2, outputs: classes },
    ];
    let spec = NetworkSpec::new(kinds, vec![d_in], classes).unwrap();
    let mut float = Network::init(spec, &mut rng).unwrap();
    for l in float.layers_mut() {
        if let Some(b) = l.bias.as_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let bits = [2u32, 3, 4, 8];
    let bw = bits[rng.random_range(0..bits.len())];
    let ba = bits[rng.random_range(0..bits.len())];
    let config = rng.random_range(1..=4u8);
    let mut net = float.attach_quantizers(bw, ba, config).unwrap();
    let calib = Tensor::uniform([128, d_in], -2.0, 2.0, &mut rng);
    calibrate_with_batches(&mut net, std::slice::from_ref(&calib), &calib, InitScheme::MinMax, &MseOptions::default()).unwrap();
    let inputs = Tensor::uniform([64, d_in], -2.0, 2.0, &mut rng);
    (net, inputs)
}

pub mod oracles;
