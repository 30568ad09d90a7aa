//! Fixtures shared by unit tests.

use crate::barriers::{SmoothBarriers, SmoothLevel, SmoothingSpec, TensorPoly, TimeCoordinate};

/// Quadratic tensor fit of `f` on `q in [0, 100]`, `nu1, t in [0, 1]`.
pub fn level(f: impl Fn(f64, f64, f64) -> f64) -> SmoothLevel {
    let spec = SmoothingSpec {
        degree_q: 2,
        degree_nu: 2,
        degree_t: 2,
        time: TimeCoordinate::Linear,
    };
    let mut samples = Vec::new();
    for i in 0..6 {
        for j in 0..6 {
            for k in 0..6 {
                let (q, nu, t) = (20.0 * i as f64, 0.2 * j as f64, 0.2 * k as f64);
                samples.push([q, nu, t, f(q, nu, t)]);
            }
        }
    }
    let poly = TensorPoly::fit(spec, 1.0, [(0.0, 100.0), (0.0, 1.0), (0.0, 1.0)], &samples).unwrap();
    SmoothLevel {
        poly,
        max_deviation: 0.0,
        rms_deviation: 0.0,
        nodes: samples.len(),
        deviation_by_time: vec![],
    }
}

pub fn barriers(buy: impl Fn(f64, f64, f64) -> f64, sell: impl Fn(f64, f64, f64) -> f64) -> SmoothBarriers {
    SmoothBarriers {
        buy: level(buy),
        sell: level(sell),
    }
}

pub fn lin(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}
