use super::*;
use crate::rng::{mean_and_stderr, stream};
use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::Rng;

/// Constant drifts on each side of `x_1 = 0` and a constant diffusion.
struct PiecewiseConstant {
    plus: [f64; 2],
    minus: [f64; 2],
    beta: [f64; 4],
}

impl DiscontinuousSde for PiecewiseConstant {
    fn dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        2
    }
    fn drift(&self, side: Side, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[..2].copy_from_slice(match side {
            Side::Plus => &self.plus,
            Side::Minus => &self.minus,
        });
    }
    fn diffusion(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[..4].copy_from_slice(&self.beta);
    }
    fn surface(&self, _rest: &[f64], _t: f64) -> SurfaceJet {
        SurfaceJet::flat()
    }
}

/// Three states, two noises, a curved moving surface and state-dependent coefficients.
struct Curved {
    scale: f64,
}

impl DiscontinuousSde for Curved {
    fn dim(&self) -> usize {
        3
    }
    fn noise_dim(&self) -> usize {
        2
    }
    fn drift(&self, side: Side, x: &[f64], t: f64, out: &mut [f64]) {
        let a = match side {
            Side::Plus => [-x[0] + x[1].cos(), 1.0 + 0.1 * x[2], -x[2] + 0.2 * t],
            Side::Minus => [2.0 + 0.5 * x[1], -1.0 + 0.3 * x[0], -x[2] + 0.5],
        };
        for i in 0..3 {
            out[i] = self.scale * a[i];
        }
    }
    fn diffusion(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out[..6].copy_from_slice(&[1.0 + 0.1 * x[1].sin(), 0.2, 0.3, 0.5, 0.0, 0.4 + 0.05 * x[0] * x[0]]);
    }
    fn surface(&self, rest: &[f64], t: f64) -> SurfaceJet {
        let mut j = SurfaceJet::flat();
        j.h = 0.5 * rest[0].sin() + 0.2 * rest[1] * rest[1] + 0.3 * t;
        j.grad[0] = 0.5 * rest[0].cos();
        j.grad[1] = 0.4 * rest[1];
        j.dt = 0.3;
        j.hess[0][0] = -0.5 * rest[0].sin();
        j.hess[1][1] = 0.4;
        j
    }
}

struct NoNoise;

impl DiscontinuousSde for NoNoise {
    fn dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, side: Side, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = if side == Side::Plus { -1.0 } else { 1.0 };
    }
    fn diffusion(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn surface(&self, _rest: &[f64], _t: f64) -> SurfaceJet {
        SurfaceJet::flat()
    }
}

fn engine<S: DiscontinuousSde>(sde: &S) -> Transform<'_, S> {
    Transform::new(sde, TransformOptions::default())
}

/// `sign(x) (sigma^2 / 2c) (1 - exp(-2c|x|/sigma^2))` for drift `c sign(x)`.
fn kinked_g1(c: f64, sigma: f64, x: f64) -> f64 {
    let s2 = sigma * sigma;
    x.signum() * s2 / (2.0 * c) * (1.0 - (-2.0 * c * x.abs() / s2).exp())
}

fn random_surface_points(n: usize, seed: u64) -> Vec<([f64; 3], f64)> {
    let mut rng = stream(seed, 0);
    (0..n)
        .map(|_| {
            let rest = [rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5)];
            let t = rng.random_range(0.0..1.0);
            let c = Curved { scale: 1.0 };
            let h = c.surface(&rest, t).h;
            ([h, rest[0], rest[1]], t)
        })
        .collect()
}

#[test]
fn g1_is_identity_without_drift() {
    let sde = KinkedOu {
        kappa: 0.0,
        kink: 0.0,
        ..KinkedOu::default()
    };
    let e = engine(&sde);
    for x in [-3.0, -0.2, 0.0, 0.7, 5.0] {
        assert_abs_diff_eq!(e.g1(&[x], 0.0).unwrap(), x, epsilon = 1e-12);
        assert_abs_diff_eq!(e.forward(&[x], 0.0).unwrap()[0], x, epsilon = 1e-12);
    }
}

#[test]
fn g1_matches_closed_form_for_kinked_drift() {
    for (kink, sigma) in [(2.0, 1.0), (-1.5, 0.8), (0.3, 2.0)] {
        let sde = KinkedOu {
            kappa: 0.0,
            kink,
            sigma,
            ..KinkedOu::default()
        };
        let e = engine(&sde);
        // drift is -kink sign(x), so c = -kink in the closed form
        for x in [-1.3, -0.4, 0.05, 0.6, 1.7] {
            let expected = kinked_g1(-kink, sigma, x);
            assert_abs_diff_eq!(e.g1(&[x], 0.0).unwrap(), expected, epsilon = 1e-8);
        }
    }
}

#[test]
fn gk_matches_closed_form_for_piecewise_constant_drift() {
    let sde = PiecewiseConstant {
        plus: [-1.2, 0.7],
        minus: [0.9, -0.4],
        beta: [0.8, 0.3, 0.1, 0.6],
    };
    let a11 = 0.8f64 * 0.8 + 0.3 * 0.3;
    let e = engine(&sde);
    for y in [-0.9, -0.3, 0.4, 1.1] {
        let (c1, c2) = if y > 0.0 { (-1.2, 0.7) } else { (0.9, -0.4) };
        let r = 2.0 * c1 / a11;
        let g1 = (1.0 - (-r * y).exp()) / r;
        let g2 = -(c2 / c1) * (y - g1);
        let x = [y, 0.37];
        assert_abs_diff_eq!(e.g1(&x, 0.0).unwrap(), g1, epsilon = 1e-8);
        assert_abs_diff_eq!(e.gk(&x, 0.0, 1).unwrap(), g2, epsilon = 1e-8);
    }
}

#[test]
fn gk_vanishes_on_surface_and_without_drift() {
    let sde = PiecewiseConstant {
        plus: [-1.0, 0.0],
        minus: [1.0, 0.0],
        beta: [1.0, 0.0, 0.0, 1.0],
    };
    let e = engine(&sde);
    assert_eq!(e.gk(&[0.8, 2.0], 0.0, 1).unwrap(), 0.0);
    let curved = Curved { scale: 1.0 };
    let c = engine(&curved);
    let (x, t) = random_surface_points(1, 5)[0];
    assert_eq!(c.gk(&x, t, 1).unwrap(), 0.0);
    assert_eq!(c.gk(&x, t, 2).unwrap(), 0.0);
}

#[test]
fn sweep_agrees_with_quadrature() {
    let sde = Curved { scale: 1.0 };
    let e = Transform::new(
        &sde,
        TransformOptions {
            rk_steps: 1024,
            ..TransformOptions::default()
        },
    );
    let mut rng = stream(11, 0);
    for _ in 0..5 {
        let x = [rng.random_range(-0.6..0.6), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let t = rng.random_range(0.0..1.0);
        let y = e.to_adapted(&x, t);
        let z = e.forward(&y, t).unwrap();
        assert_abs_diff_eq!(z[0], e.g1(&x, t).unwrap(), epsilon = 1e-8);
        for k in 1..3 {
            assert_abs_diff_eq!(z[k] - y[k], e.gk(&x, t, k).unwrap(), epsilon = 1e-8);
        }
    }
}

#[test]
fn first_drift_component_vanishes_on_surface() {
    let sde = Curved { scale: 1.0 };
    let e = engine(&sde);
    let mut worst = 0.0f64;
    for (x, t) in random_surface_points(100, 3) {
        let y = e.to_adapted(&x, t);
        let co = e.coefficients(&y, t).unwrap();
        worst = worst.max(co.drift[0].abs());
    }
    assert!(worst <= 1e-6, "surface drift {worst:e}");
}

#[test]
fn jacobian_is_identity_on_surface() {
    let sde = Curved { scale: 1.0 };
    let e = engine(&sde);
    for (x, t) in random_surface_points(100, 4) {
        let y = e.to_adapted(&x, t);
        let co = e.coefficients(&y, t).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(co.jacobian[i * 3 + j], id, epsilon = 1e-8);
            }
        }
    }
}

#[test]
fn transformed_drift_is_continuous_across_surface() {
    let sde = Curved { scale: 1.0 };
    let e = engine(&sde);
    let raw_jump = {
        let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
        sde.drift(Side::Plus, &[0.0, 0.3, -0.2], 0.5, &mut a);
        sde.drift(Side::Minus, &[0.0, 0.3, -0.2], 0.5, &mut b);
        (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
    };
    assert!(raw_jump > 1.0);
    for (x, t) in random_surface_points(20, 6) {
        let y = e.to_adapted(&x, t);
        let up = e.coefficients(&[1e-7, y[1], y[2]], t).unwrap();
        let dn = e.coefficients(&[-1e-7, y[1], y[2]], t).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(up.drift[i], dn.drift[i], epsilon = 1e-4);
        }
    }
}

#[test]
fn diffusion_normal_component_must_not_vanish() {
    let e = engine(&NoNoise);
    let rest: [f64; 0] = [];
    assert!(matches!(
        e.check_nondegenerate([(&rest[..], 0.0)]),
        Err(TransformError::DegenerateDiffusion { .. })
    ));
    assert!(e.g1(&[0.5], 0.0).is_err());
    assert!(e.coefficients(&[0.5], 0.0).is_err());
    let curved = Curved { scale: 1.0 };
    let points: Vec<([f64; 2], f64)> = random_surface_points(10, 8).iter().map(|(x, t)| ([x[1], x[2]], *t)).collect();
    let floor = engine(&curved).check_nondegenerate(points.iter().map(|(r, t)| (&r[..], *t))).unwrap();
    assert!(floor > 0.1);
}

#[test]
fn equal_drifts_give_plain_euler_path() {
    let sde = Curved { scale: 1.0 };
    struct Smooth<'a>(&'a Curved);
    impl DiscontinuousSde for Smooth<'_> {
        fn dim(&self) -> usize {
            3
        }
        fn noise_dim(&self) -> usize {
            2
        }
        fn drift(&self, _side: Side, x: &[f64], t: f64, out: &mut [f64]) {
            self.0.drift(Side::Plus, x, t, out)
        }
        fn diffusion(&self, x: &[f64], t: f64, out: &mut [f64]) {
            self.0.diffusion(x, t, out)
        }
        fn surface(&self, rest: &[f64], t: f64) -> SurfaceJet {
            self.0.surface(rest, t)
        }
    }
    let smooth = Smooth(&sde);
    let e = engine(&smooth);
    let dt = 0.01;
    let mut rng = stream(1, 0);
    let dws = brownian_increments(&mut rng, 100, 2, dt);
    let x0 = [0.1, 0.0, 0.0];
    let path = e.simulate_path(&x0, 0.0, dt, &dws, &mut rng).unwrap();
    let mut x = x0.to_vec();
    for (k, dw) in dws.chunks(2).enumerate() {
        e.plain_step(&mut x, k as f64 * dt, dt, dw);
        let d = path.state(k + 1).iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-6);
    }
}

#[test]
fn path_csv_has_region_column() {
    // a mild kink, so the drift does not dominate the noise near the origin
    let sde = KinkedOu {
        kink: 0.5,
        ..KinkedOu::default()
    };
    let e = engine(&sde);
    let mut rng = stream(2, 0);
    let dws = brownian_increments(&mut rng, 20, 1, 0.05);
    let path = e.simulate_path(&[0.0], 0.0, 0.05, &dws, &mut rng).unwrap();
    let mut buf = Vec::new();
    path.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x_1,region"));
    assert_eq!(lines.count(), 21);
    assert!(path.regions.contains(&Region::Tube));
}

#[test]
fn kinked_ou_loads_from_json() {
    let ou: KinkedOu = serde_json::from_str(r#"{"kappa":1.0,"kink":2.0,"sigma":0.5,"x0":0.3,"horizon":2.0}"#).unwrap();
    assert_eq!(ou.sigma, 0.5);
    assert!(serde_json::from_str::<KinkedOu>(r#"{"kappa":1.0}"#).is_err());
}

/// Terminal values of `n` paths with increments drawn at step `dt / refine`
/// and summed up to `dt`, so runs with different `refine` share paths.
fn kinked_terminal(sde: &KinkedOu, dt: f64, fine_steps: usize, factor: usize, n: usize, seed: u64, transformed: bool) -> Vec<f64> {
    let e = engine(sde);
    (0..n)
        .map(|p| {
            let mut rng = stream(seed, p as u64);
            let fine = brownian_increments(&mut rng, fine_steps, 1, sde.horizon / fine_steps as f64);
            let dws = coarsen_increments(&fine, 1, factor);
            if transformed {
                *e.simulate_path(&[sde.x0], 0.0, dt, &dws, &mut rng).unwrap().last().first().unwrap()
            } else {
                euler_path(sde, &[sde.x0], 0.0, dt, &dws)[0]
            }
        })
        .collect()
}

/// A kink pushing away from the origin: the discretization bias is large
/// enough to see at moderate path counts.
fn repelling(kappa: f64, sigma: f64, x0: f64) -> KinkedOu {
    KinkedOu {
        kappa,
        kink: -1.0,
        sigma,
        x0,
        horizon: 1.0,
    }
}

#[test]
fn kinked_ou_mean_matches_fine_euler() {
    let sde = repelling(0.5, 1.0, 0.1);
    let n = 4000;
    let coarse = kinked_terminal(&sde, 0.02, 50, 1, n, 21, true);
    let oracle = kinked_terminal(&sde, 0.0002, 5000, 1, n, 22, false);
    let (m1, e1) = mean_and_stderr(&coarse);
    let (m2, e2) = mean_and_stderr(&oracle);
    let combined = (e1 * e1 + e2 * e2).sqrt();
    assert!((m1 - m2).abs() <= 3.0 * combined, "{m1} vs {m2} (se {combined})");
}

#[test]
fn halving_step_moves_mean_towards_fine_euler() {
    let sde = repelling(0.0, 0.5, 0.2);
    let n = 4000;
    // one set of Brownian paths on 4000 steps, summed up for the coarse grids
    let oracle = kinked_terminal(&sde, 0.00025, 4000, 1, n, 31, false);
    let (target, _) = mean_and_stderr(&oracle);
    let errors: Vec<f64> = [(0.2, 800), (0.1, 400), (0.05, 200)]
        .iter()
        .map(|&(dt, factor)| {
            let v = kinked_terminal(&sde, dt, 4000, factor, n, 31, true);
            (mean_and_stderr(&v).0 - target).abs()
        })
        .collect();
    assert!(errors[0] >= errors[1] && errors[1] >= errors[2], "{errors:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn inverse_recovers_state_near_surface(
        f in -0.4f64..0.4,
        r1 in -1.5f64..1.5,
        r2 in -1.0f64..1.0,
        t in 0.0f64..1.0,
    ) {
        let sde = Curved { scale: 1.0 };
        let e = engine(&sde);
        let y = [f, r1, r2];
        let z = e.forward(&y, t).unwrap();
        let back = e.invert(&z, t, &[0.0, r1 + 0.05, r2 - 0.05]).unwrap();
        for i in 0..3 {
            prop_assert!((back[i] - y[i]).abs() <= 1e-9);
        }
    }
}

