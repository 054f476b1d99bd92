use lsq_core::init::{init_lsqplus_activation, init_minmax, MseOptions};
use lsq_core::{ActivationScheme, QuantConfig, Tensor};

mod common;

use common::oracles::{grid_min, heavy_tailed, mse};

#[test]
fn mse_fit_matches_grid_search_and_beats_minmax() {
    for seed in [7u64, 8, 9] {
        let x = heavy_tailed(4000, seed);
        let (lo, hi) = x.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for bits in [2u32, 4] {
            let cfg = QuantConfig::activation(ActivationScheme::UnsignedAsymmetric, bits).unwrap();
            let (n, p) = (cfg.n() as f64, cfg.p() as f64);
            let fit = init_lsqplus_activation(&[Tensor::from_vec(x.clone())], &cfg, &MseOptions::default()).unwrap();
            let (s0, b0) = init_minmax(lo, hi, cfg.n(), cfg.p()).unwrap();
            let minmax = mse(&x, s0 as f64, b0 as f64, n, p);
            let grid = grid_min(&x, n, p, 2.0 * s0 as f64, lo as f64, hi as f64);
            let ours = mse(&x, fit.scale as f64, fit.offset.unwrap() as f64, n, p);
            assert!(ours <= 1.05 * grid, "seed {seed} b{bits}: {ours} vs grid {grid}");
            assert!(ours < minmax, "seed {seed} b{bits}: {ours} vs min-max {minmax}");
        }
    }
}

#[test]
fn scale_only_fit_for_offset_free_config() {
    let x: Vec<f32> = heavy_tailed(2000, 3).into_iter().map(f32::abs).collect();
    let cfg = QuantConfig::activation(ActivationScheme::UnsignedSymmetric, 4).unwrap();
    let fit = init_lsqplus_activation(&[Tensor::from_vec(x.clone())], &cfg, &MseOptions::default()).unwrap();
    assert_eq!(fit.offset, None);
    let best_1d = (1..=2000)
        .map(|i| mse(&x, 20.0 / 15.0 * i as f64 / 1000.0, 0.0, 0.0, 15.0))
        .fold(f64::INFINITY, f64::min);
    assert!(fit.mse <= 1.05 * best_1d, "{} vs {best_1d}", fit.mse);
}
