use std::time::Instant;

use lsq_core::network::{train, Network, NetworkSpec, TrainConfig};
use lsq_core::ActivationKind;
use rand::SeedableRng;

#[test]
fn float_conv_net_fits_digits() {
    let split = lsq_core::data::digits();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut net = Network::init(NetworkSpec::conv_net(ActivationKind::Swish), &mut rng).unwrap();
    let cfg = TrainConfig { epochs: 15, lr: 0.05, ..Default::default() };
    let t = Instant::now();
    let trace = train(&mut net, &split, &cfg).unwrap();
    for e in &trace.epochs {
        println!("{e:?}");
    }
    println!("elapsed {:?}", t.elapsed());
    let train_acc = net.accuracy(&split.train).unwrap();
    assert!(train_acc >= 0.95, "{train_acc}");
}
