//! Reference formulas written without the library's quantizer code.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `(∂x̂/∂s, ∂x̂/∂β, ∂x̂/∂x)` at `u = (x − β)/s`, evaluated branch by branch.
pub fn partials(u: f32, n: f32, p: f32) -> (f64, f64, f64) {
    if n < u && u < p {
        let r = u.round_ties_even();
        (-(u as f64) + r as f64, 0.0, 1.0)
    } else if u <= n {
        (n as f64, 1.0, 0.0)
    } else {
        (p as f64, 1.0, 0.0)
    }
}

/// Quantizer backward for one tensor: `(dx, ds, dβ)` with gradient scale `g`.
pub fn backward(x: &[f32], s: f32, beta: f32, n: i32, p: i32, upstream: &[f32], g: f32) -> (Vec<f32>, f64, f64) {
    let mut dx = Vec::with_capacity(x.len());
    let (mut ds, mut db) = (0f64, 0f64);
    for (&xi, &up) in x.iter().zip(upstream) {
        let u = (xi - beta) / s;
        let (ps, pb, px) = partials(u, n as f32, p as f32);
        ds += up as f64 * ps;
        db += up as f64 * pb;
        dx.push((up as f64 * px) as f32);
    }
    (dx, g as f64 * ds, g as f64 * db)
}

/// Symmetric quantizer with trainable scale: `round(clamp(x/s, n, p))·s`.
pub fn symmetric_forward(x: &[f32], s: f32, n: i32, p: i32) -> Vec<f32> {
    x.iter()
        .map(|&v| {
            let u = v / s;
            let c = if u < n as f32 {
                n as f32
            } else if u > p as f32 {
                p as f32
            } else {
                u.round_ties_even()
            };
            c * s
        })
        .collect()
}

/// Symmetric scale gradient and input gradient with the usual straight-through rule.
pub fn symmetric_backward(x: &[f32], s: f32, n: i32, p: i32, upstream: &[f32], g: f32) -> (Vec<f32>, f32) {
    let mut dx = Vec::with_capacity(x.len());
    let mut ds = 0f64;
    for (&v, &up) in x.iter().zip(upstream) {
        let u = v / s;
        let (d, pass) = if u <= n as f32 {
            (n as f32, 0.0)
        } else if u >= p as f32 {
            (p as f32, 0.0)
        } else {
            (u.round_ties_even() - u, 1.0)
        };
        ds += up as f64 * d as f64;
        dx.push(up * pass);
    }
    (dx, (g as f64 * ds) as f32)
}

/// Normal samples with 1% replaced by ±20.
pub fn heavy_tailed(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|i| match i % 100 {
            0 => 20.0,
            50 => -20.0,
            _ => StandardNormal.sample(&mut rng),
        })
        .collect()
}

/// Reconstruction MSE written directly from the quantizer definition.
pub fn mse(x: &[f32], s: f64, b: f64, n: f64, p: f64) -> f64 {
    x.iter()
        .map(|&v| {
            let v = v as f64;
            let code = ((v - b) / s).clamp(n, p).round_ties_even();
            (code * s + b - v).powi(2)
        })
        .sum::<f64>()
        / x.len() as f64
}

pub fn grid_min(x: &[f32], n: f64, p: f64, s_hi: f64, b_lo: f64, b_hi: f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in 1..=200 {
        let s = s_hi * i as f64 / 200.0;
        for j in 0..200 {
            let b = b_lo + (b_hi - b_lo) * j as f64 / 199.0;
            best = best.min(mse(x, s, b, n, p));
        }
    }
    best
}
