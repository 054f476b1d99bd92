mod common;

use common::oracles;
use lsq_core::quantizer::{fake_quantize_backward, fake_quantize_forward, lsq_grad_scale, quant_bounds};
use lsq_core::{OffsetMode, QuantConfig, QuantizerState, Tensor};
use proptest::prelude::*;

fn config(bits: u32, signed: bool, offset: bool) -> QuantConfig {
    QuantConfig::new(bits, signed, offset.then_some(OffsetMode::Learned)).unwrap()
}

fn values(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-8.0f32..8.0, 1..=len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn forward_is_idempotent(
        x in values(64), s in 0.01f32..2.0, beta in -2.0f32..2.0, bits in 2u32..=8, signed: bool, offset: bool,
    ) {
        let cfg = config(bits, signed, offset);
        let state = QuantizerState::for_config(&cfg, s, beta, 1.0);
        let (hat, _) = fake_quantize_forward(&Tensor::from_vec(x), &state, &cfg).unwrap();
        let (again, _) = fake_quantize_forward(&hat, &state, &cfg).unwrap();
        prop_assert_eq!(hat.data(), again.data());
    }

    #[test]
    fn codes_and_values_stay_in_range(
        x in values(64), s in 0.01f32..2.0, beta in -2.0f32..2.0, bits in 2u32..=8, signed: bool, offset: bool,
    ) {
        let cfg = config(bits, signed, offset);
        let state = QuantizerState::for_config(&cfg, s, beta, 1.0);
        let b = if offset { beta } else { 0.0 };
        let (n, p) = (cfg.n() as f32, cfg.p() as f32);
        let (hat, codes) = fake_quantize_forward(&Tensor::from_vec(x), &state, &cfg).unwrap();
        for (&h, &c) in hat.data().iter().zip(codes.data()) {
            prop_assert_eq!(c, c.round());
            prop_assert!((n..=p).contains(&c));
            prop_assert!(h >= n * s + b - 1e-5 && h <= p * s + b + 1e-5);
        }
    }

    #[test]
    fn forward_is_monotone(
        a in -8.0f32..8.0, d in 0.0f32..4.0, s in 0.01f32..2.0, beta in -2.0f32..2.0, bits in 2u32..=8, signed: bool,
    ) {
        let cfg = config(bits, signed, true);
        let state = QuantizerState::for_config(&cfg, s, beta, 1.0);
        let (hat, _) = fake_quantize_forward(&Tensor::from_vec(vec![a, a + d]), &state, &cfg).unwrap();
        prop_assert!(hat.data()[0] <= hat.data()[1]);
    }

    #[test]
    fn backward_matches_branch_oracle(
        x in values(32), s in 0.01f32..2.0, beta in -2.0f32..2.0, bits in 2u32..=8, signed: bool, g in 0.01f32..1.0,
        seed in 0u64..1000,
    ) {
        let cfg = config(bits, signed, true);
        let state = QuantizerState::for_config(&cfg, s, beta, g);
        let upstream: Vec<f32> = (0..x.len()).map(|i| ((i as u64 * 31 + seed) % 17) as f32 / 8.0 - 1.0).collect();
        let got = fake_quantize_backward(
            &Tensor::from_vec(x.clone()), &state, &cfg, &Tensor::from_vec(upstream.clone()),
        ).unwrap();
        let (dx, ds, db) = oracles::backward(&x, s, beta, cfg.n(), cfg.p(), &upstream, g);
        prop_assert_eq!(got.dx.data(), dx.as_slice());
        prop_assert!((got.ds as f64 - ds).abs() <= 1e-6 * (1.0 + ds.abs()));
        prop_assert!((got.dbeta as f64 - db).abs() <= 1e-6 * (1.0 + db.abs()));
    }

    #[test]
    fn zero_offset_reduces_to_symmetric(
        x in values(64), s in 0.01f32..2.0, bits in 2u32..=8, seed in 0u64..1000,
    ) {
        let with_offset = QuantConfig::new(bits, false, Some(OffsetMode::FixedZero)).unwrap();
        let plain = config(bits, false, false);
        let (n, p) = quant_bounds(bits, false).unwrap();
        let g = lsq_grad_scale(x.len(), p);
        let upstream: Vec<f32> = (0..x.len()).map(|i| ((i as u64 * 13 + seed) % 11) as f32 / 5.0 - 1.0).collect();
        let want = oracles::symmetric_forward(&x, s, n, p);
        let (want_dx, want_ds) = oracles::symmetric_backward(&x, s, n, p, &upstream, g);
        for cfg in [with_offset, plain] {
            let state = QuantizerState::for_config(&cfg, s, 0.0, g);
            let xt = Tensor::from_vec(x.clone());
            let (hat, _) = fake_quantize_forward(&xt, &state, &cfg).unwrap();
            prop_assert_eq!(hat.data(), want.as_slice());
            let grads = fake_quantize_backward(&xt, &state, &cfg, &Tensor::from_vec(upstream.clone())).unwrap();
            prop_assert_eq!(grads.dx.data(), want_dx.as_slice());
            prop_assert_eq!(grads.ds.to_bits(), want_ds.to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    /// Unsigned grid with `β` below every input and every code below `p`: the
    /// offset receives no gradient whatever flows in from above.
    #[test]
    fn offset_gradient_dies_below_the_data(
        x in prop::collection::vec(-4.0f32..4.0, 1..32),
        gap in 1e-3f32..2.0,
        bits in 2u32..=8,
        upstream_seed in any::<u64>(),
        headroom in 0.01f32..0.99,
    ) {
        let cfg = config(bits, false, true);
        let x_min = x.iter().copied().fold(f32::INFINITY, f32::min);
        let x_max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let beta = x_min - gap;
        // choose s so the largest normalized input sits strictly below p
        let s = (x_max - beta) / (cfg.p() as f32 * headroom);
        prop_assume!(x.iter().all(|&v| (v - beta) / s < cfg.p() as f32 && (v - beta) / s > 0.0));
        let state = QuantizerState::for_config(&cfg, s, beta, 1.0);
        let upstream: Vec<f32> = (0..x.len())
            .map(|i| ((upstream_seed.rotate_left(i as u32 % 64) % 2001) as f32 - 1000.0) / 100.0)
            .collect();
        let grads = fake_quantize_backward(&Tensor::from_vec(x), &state, &cfg, &Tensor::from_vec(upstream)).unwrap();
        prop_assert_eq!(grads.dbeta, 0.0);
    }
}
