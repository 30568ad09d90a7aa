//! Simulation of SDEs whose drift jumps across a moving hypersurface.
//!
//! The surface is a graph `x_1 = h(x_2, .., x_d, t)`. States are written in the
//! adapted coordinates `y = (x_1 - h, x_2, .., x_d)`, where the surface is
//! `y_1 = 0`, and mapped by
//!
//! ```text
//! G(y) = (g_1(y, t), y_2 + g_2(y, t), .., y_d + g_d(y, t))
//! g_1  = ∫_0^{y_1} e^{-I(ξ)} dξ,          I(ξ) = ∫_0^ξ 2 α̂_1 / â_11 ds
//! g_k  = ∫_0^{y_1} C_k(ξ) e^{-I(ξ)} dξ,   C_k(ξ) = -∫_0^ξ 2 α̂_k / â_11 e^{I(s)} ds
//! ```
//!
//! with `α̂, β̂` the coefficients of `y` and `â = β̂ β̂ᵀ`. The drift of `Z = G(Y)`
//! loses the jump of `α̂`, so Euler–Maruyama on `Z` is well behaved near the
//! surface. [`Transform::step`] uses that scheme inside a tube around the
//! surface and a plain Euler step outside it.

mod kinked;
mod storage;

pub use kinked::KinkedOu;
pub use storage::{storage_system_spec, StorageSurface, StorageSystem, SurfaceKind};

use std::cell::Cell;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::TransformError;

/// Largest state and noise dimension the engine handles.
/// Chord iterations tried before full Newton.
const CHORD_MAX_ITER: usize = 30;

pub const MAX_DIM: usize = 4;

/// Which side of the surface a drift evaluation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Minus,
    Plus,
}

/// Value and derivatives of the surface `x_1 = h(rest, t)`.
/// `grad` and `hess` are indexed by the `rest` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceJet {
    pub h: f64,
    pub grad: [f64; MAX_DIM],
    pub dt: f64,
    pub hess: [[f64; MAX_DIM]; MAX_DIM],
}

impl SurfaceJet {
    /// The fixed surface `x_1 = 0`.
    pub fn flat() -> Self {
        Self {
            h: 0.0,
            grad: [0.0; MAX_DIM],
            dt: 0.0,
            hess: [[0.0; MAX_DIM]; MAX_DIM],
        }
    }
}

/// An SDE `dX = α±(X, t) dt + β(X, t) dW` whose drift switches across a surface.
pub trait DiscontinuousSde: Sync {
    fn dim(&self) -> usize;

    fn noise_dim(&self) -> usize;

    /// Drift on `side`, written into `out[..dim]`. Both sides must be smooth
    /// fields defined on a neighbourhood of the surface.
    fn drift(&self, side: Side, x: &[f64], t: f64, out: &mut [f64]);

    /// Diffusion matrix, row-major `dim x noise_dim`, written into `out`.
    fn diffusion(&self, x: &[f64], t: f64, out: &mut [f64]);

    /// The surface `x_1 = h(rest, t)` with first and second derivatives.
    fn surface(&self, rest: &[f64], t: f64) -> SurfaceJet;

    /// Side of a point at signed distance `f = x_1 - h` from the surface.
    fn side(&self, f: f64) -> Side {
        if f > 0.0 {
            Side::Plus
        } else {
            Side::Minus
        }
    }

    /// Maps a state back into the domain after a step (for example capacity clamps).
    fn project(&self, _x: &mut [f64]) {}

    /// True when coordinate `k >= 1` enters neither drift, diffusion nor the
    /// surface, so `G` does not depend on it and no differences are taken.
    fn passive(&self, _k: usize) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformOptions {
    /// RK4 steps per sweep along `y_1`.
    pub rk_steps: usize,
    /// Central-difference step for first derivatives in `y_2..` and `t`.
    pub fd_step: f64,
    /// Step for second derivatives in `y_2..`.
    pub fd_step2: f64,
    /// Tube half-width in units of `sqrt(â_11 dt)`.
    pub tube_factor: f64,
    /// Largest `|α̂_1| sqrt(dt / â_11)` for which a step goes through `Z`.
    /// Beyond it the drift dominates the noise over one step, `g_1` saturates
    /// within the step's reach and the inversion becomes ill-posed.
    pub max_drift_ratio: f64,
    /// Newton stops once `|G(y) - z| <= newton_tol (1 + |z|)`.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Halvings allowed when an inversion fails.
    pub max_substep_depth: usize,
    /// Lower bound on `â_11`; smaller values count as degenerate.
    pub min_normal_variance: f64,
    /// Absolute tolerance of the stand-alone quadrature evaluations.
    pub quadrature_tol: f64,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self {
            rk_steps: 8,
            fd_step: 1e-5,
            fd_step2: 1e-4,
            tube_factor: 2.0,
            max_drift_ratio: 0.2,
            newton_tol: 1e-12,
            newton_max_iter: 50,
            max_substep_depth: 6,
            min_normal_variance: 1e-12,
            quadrature_tol: 1e-10,
        }
    }
}

/// Coefficients of `Z = G(Y)` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedCoefficients {
    pub side: Side,
    pub z: Vec<f64>,
    pub drift: Vec<f64>,
    /// Row-major `dim x noise_dim`.
    pub diffusion: Vec<f64>,
    /// `∂G/∂y`, row-major `dim x dim`.
    pub jacobian: Vec<f64>,
}

/// Position relative to the surface after mapping into `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedState {
    pub z: Vec<f64>,
    pub side: Side,
}

/// How a step was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Plain,
    Tube,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Plain => "plain",
            Region::Tube => "tube",
        }
    }
}

/// Coefficients in adapted coordinates.
#[derive(Clone, Copy)]
struct Hat {
    alpha: [f64; MAX_DIM],
    beta: [f64; MAX_DIM * MAX_DIM],
    a11: f64,
}

/// `g` and its first two `y_1`-derivatives at the end of a sweep.
#[derive(Clone, Copy)]
struct Sweep {
    g: [f64; MAX_DIM],
    d1: [f64; MAX_DIM],
    d2: [f64; MAX_DIM],
}

/// The transform attached to one SDE.
pub struct Transform<'a, S: DiscontinuousSde + ?Sized> {
    sde: &'a S,
    opts: TransformOptions,
}

impl<'a, S: DiscontinuousSde + ?Sized> Transform<'a, S> {
    pub fn new(sde: &'a S, opts: TransformOptions) -> Self {
        let (d, m) = (sde.dim(), sde.noise_dim());
        assert!((1..=MAX_DIM).contains(&d) && (1..=MAX_DIM).contains(&m), "dimensions {d}x{m} not supported");
        Self { sde, opts }
    }

    pub fn sde(&self) -> &S {
        self.sde
    }

    pub fn options(&self) -> &TransformOptions {
        &self.opts
    }

    /// Adapted coordinates of `x`.
    pub fn to_adapted(&self, x: &[f64], t: f64) -> Vec<f64> {
        let jet = self.sde.surface(&x[1..], t);
        let mut y = x.to_vec();
        y[0] -= jet.h;
        y
    }

    pub fn from_adapted(&self, y: &[f64], t: f64) -> Vec<f64> {
        let jet = self.sde.surface(&y[1..], t);
        let mut x = y.to_vec();
        x[0] += jet.h;
        x
    }

    fn hat(&self, side: Side, y0: f64, rest: &[f64], t: f64, jet: &SurfaceJet) -> Hat {
        let (d, m) = (self.sde.dim(), self.sde.noise_dim());
        let mut x = [0.0; MAX_DIM];
        x[0] = y0 + jet.h;
        x[1..d].copy_from_slice(&rest[..d - 1]);
        let mut alpha = [0.0; MAX_DIM];
        let mut beta = [0.0; MAX_DIM * MAX_DIM];
        self.sde.drift(side, &x[..d], t, &mut alpha[..d]);
        self.sde.diffusion(&x[..d], t, &mut beta[..d * m]);
        let mut a1 = alpha[0] - jet.dt;
        for j in 1..d {
            a1 -= jet.grad[j - 1] * alpha[j];
            for l in 1..d {
                let hjl = jet.hess[j - 1][l - 1];
                if hjl != 0.0 {
                    let cov: f64 = (0..m).map(|c| beta[j * m + c] * beta[l * m + c]).sum();
                    a1 -= 0.5 * hjl * cov;
                }
            }
        }
        alpha[0] = a1;
        for c in 0..m {
            let mut b = beta[c];
            for j in 1..d {
                b -= jet.grad[j - 1] * beta[j * m + c];
            }
            beta[c] = b;
        }
        let a11 = (0..m).map(|c| beta[c] * beta[c]).sum();
        Hat { alpha, beta, a11 }
    }

    fn degenerate(&self, hat: &Hat, y0: f64, rest: &[f64]) -> Option<TransformError> {
        (!(hat.a11 >= self.opts.min_normal_variance)).then(|| {
            let mut at = vec![y0];
            at.extend_from_slice(rest);
            TransformError::DegenerateDiffusion { value: hat.a11, at }
        })
    }

    /// Integrates `(I, g_1, C_k, g_k)` along `y_1` from the surface by RK4.
    fn sweep(&self, side: Side, y: &[f64], t: f64) -> Result<Sweep, TransformError> {
        let d = self.sde.dim();
        let rest = &y[1..d];
        let jet = self.sde.surface(rest, t);
        let n_u = 2 * d;
        let mut err = None;
        let mut rhs = |s: f64, u: &[f64; 2 * MAX_DIM], du: &mut [f64; 2 * MAX_DIM]| {
            let hat = self.hat(side, s, rest, t, &jet);
            if err.is_none() {
                err = self.degenerate(&hat, s, rest);
            }
            let inv = 1.0 / hat.a11;
            let e = u[0].exp();
            du[0] = 2.0 * hat.alpha[0] * inv;
            du[1] = 1.0 / e;
            for k in 1..d {
                du[1 + k] = -2.0 * hat.alpha[k] * inv * e;
                du[d + k] = u[1 + k] / e;
            }
        };
        let mut u = [0.0; 2 * MAX_DIM];
        let steps = self.opts.rk_steps.max(1);
        if y[0] != 0.0 {
            let h = y[0] / steps as f64;
            let (mut k1, mut k2, mut k3, mut k4) = ([0.0; 2 * MAX_DIM], [0.0; 2 * MAX_DIM], [0.0; 2 * MAX_DIM], [0.0; 2 * MAX_DIM]);
            let mut tmp = [0.0; 2 * MAX_DIM];
            for i in 0..steps {
                let s = h * i as f64;
                rhs(s, &u, &mut k1);
                for c in 0..n_u {
                    tmp[c] = u[c] + 0.5 * h * k1[c];
                }
                rhs(s + 0.5 * h, &tmp, &mut k2);
                for c in 0..n_u {
                    tmp[c] = u[c] + 0.5 * h * k2[c];
                }
                rhs(s + 0.5 * h, &tmp, &mut k3);
                for c in 0..n_u {
                    tmp[c] = u[c] + h * k3[c];
                }
                rhs(s + h, &tmp, &mut k4);
                for c in 0..n_u {
                    u[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
                }
            }
        }
        if let Some(e) = err {
            return Err(e);
        }
        let hat = self.hat(side, y[0], rest, t, &jet);
        if let Some(e) = self.degenerate(&hat, y[0], rest) {
            return Err(e);
        }
        let r = 2.0 * hat.alpha[0] / hat.a11;
        let emi = (-u[0]).exp();
        let mut out = Sweep {
            g: [0.0; MAX_DIM],
            d1: [0.0; MAX_DIM],
            d2: [0.0; MAX_DIM],
        };
        out.g[0] = u[1];
        out.d1[0] = emi;
        out.d2[0] = -r * emi;
        for k in 1..d {
            let ck = u[1 + k];
            out.g[k] = u[d + k];
            out.d1[k] = ck * emi;
            out.d2[k] = -2.0 * hat.alpha[k] / hat.a11 - ck * r * emi;
        }
        Ok(out)
    }

    fn shifted(y: &[f64], j: usize, by: f64) -> [f64; MAX_DIM] {
        let mut p = [0.0; MAX_DIM];
        p[..y.len()].copy_from_slice(y);
        p[j] += by;
        p
    }

    /// `G(y)` and `∂G/∂y` (row-major).
    fn value_and_jacobian(&self, y: &[f64], t: f64) -> Result<([f64; MAX_DIM], [f64; MAX_DIM * MAX_DIM]), TransformError> {
        let d = self.sde.dim();
        let side = self.sde.side(y[0]);
        let base = self.sweep(side, y, t)?;
        let mut g = base.g;
        let mut jac = [0.0; MAX_DIM * MAX_DIM];
        for i in 0..d {
            jac[i * d] = base.d1[i];
        }
        let eps = self.opts.fd_step;
        for j in 1..d {
            if self.sde.passive(j) {
                jac[j * d + j] = 1.0;
                continue;
            }
            let up = self.sweep(side, &Self::shifted(y, j, eps)[..d], t)?;
            let dn = self.sweep(side, &Self::shifted(y, j, -eps)[..d], t)?;
            for i in 0..d {
                jac[i * d + j] = (up.g[i] - dn.g[i]) / (2.0 * eps) + if i == j { 1.0 } else { 0.0 };
            }
        }
        for k in 1..d {
            g[k] += y[k];
        }
        Ok((g, jac))
    }

    /// `G` in adapted coordinates.
    pub fn forward(&self, y: &[f64], t: f64) -> Result<Vec<f64>, TransformError> {
        let d = self.sde.dim();
        let s = self.sweep(self.sde.side(y[0]), y, t)?;
        let mut z = s.g[..d].to_vec();
        for k in 1..d {
            z[k] += y[k];
        }
        Ok(z)
    }

    /// Maps an original state to `Z`.
    pub fn transform_state(&self, x: &[f64], t: f64) -> Result<TransformedState, TransformError> {
        let y = self.to_adapted(x, t);
        Ok(TransformedState {
            z: self.forward(&y, t)?,
            side: self.sde.side(y[0]),
        })
    }

    /// Drift and diffusion of `Z` at adapted point `y`.
    ///
    /// Derivatives along `y_1` are exact in terms of the sweep; the others use
    /// central differences, skipping second derivatives whose covariance weight
    /// vanishes.
    pub fn coefficients(&self, y: &[f64], t: f64) -> Result<TransformedCoefficients, TransformError> {
        let (d, m) = (self.sde.dim(), self.sde.noise_dim());
        let side = self.sde.side(y[0]);
        let jet = self.sde.surface(&y[1..d], t);
        let hat = self.hat(side, y[0], &y[1..d], t, &jet);
        let base = self.sweep(side, y, t)?;

        let mut cov = [[0.0; MAX_DIM]; MAX_DIM];
        for j in 0..d {
            for l in 0..d {
                cov[j][l] = (0..m).map(|c| hat.beta[j * m + c] * hat.beta[l * m + c]).sum();
            }
        }

        let eps = self.opts.fd_step;
        let mut jac = [[0.0; MAX_DIM]; MAX_DIM];
        // hess[i][j][l] for component i of g
        let mut hess = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
        for i in 0..d {
            jac[i][0] = base.d1[i];
            hess[i][0][0] = base.d2[i];
        }
        for j in (1..d).filter(|&j| !self.sde.passive(j)) {
            let up = self.sweep(side, &Self::shifted(y, j, eps)[..d], t)?;
            let dn = self.sweep(side, &Self::shifted(y, j, -eps)[..d], t)?;
            for i in 0..d {
                jac[i][j] = (up.g[i] - dn.g[i]) / (2.0 * eps);
                let mixed = (up.d1[i] - dn.d1[i]) / (2.0 * eps);
                hess[i][0][j] = mixed;
                hess[i][j][0] = mixed;
            }
        }
        let e2 = self.opts.fd_step2;
        for j in 1..d {
            for l in j..d {
                if cov[j][l] == 0.0 || self.sde.passive(j) || self.sde.passive(l) {
                    continue;
                }
                let val = if j == l {
                    let up = self.sweep(side, &Self::shifted(y, j, e2)[..d], t)?;
                    let dn = self.sweep(side, &Self::shifted(y, j, -e2)[..d], t)?;
                    (0..d).map(|i| (up.g[i] - 2.0 * base.g[i] + dn.g[i]) / (e2 * e2)).collect::<Vec<_>>()
                } else {
                    let corner = |a: f64, b: f64| {
                        let mut p = Self::shifted(y, j, a);
                        p[l] += b;
                        self.sweep(side, &p[..d], t)
                    };
                    let (pp, pm, mp, mm) = (corner(e2, e2)?, corner(e2, -e2)?, corner(-e2, e2)?, corner(-e2, -e2)?);
                    (0..d).map(|i| (pp.g[i] - pm.g[i] - mp.g[i] + mm.g[i]) / (4.0 * e2 * e2)).collect()
                };
                for i in 0..d {
                    hess[i][j][l] = val[i];
                    hess[i][l][j] = val[i];
                }
            }
        }
        let later = self.sweep(side, y, t + eps)?;
        let earlier = self.sweep(side, y, t - eps)?;

        let mut drift = vec![0.0; d];
        let mut z = vec![0.0; d];
        for i in 0..d {
            let mut acc = (later.g[i] - earlier.g[i]) / (2.0 * eps);
            for j in 0..d {
                acc += jac[i][j] * hat.alpha[j];
                for l in 0..d {
                    acc += 0.5 * hess[i][j][l] * cov[j][l];
                }
            }
            // identity part of G_i for i >= 1
            if i >= 1 {
                acc += hat.alpha[i];
                jac[i][i] += 1.0;
            }
            drift[i] = acc;
            z[i] = base.g[i] + if i >= 1 { y[i] } else { 0.0 };
        }
        let mut diffusion = vec![0.0; d * m];
        for i in 0..d {
            for c in 0..m {
                diffusion[i * m + c] = (0..d).map(|j| jac[i][j] * hat.beta[j * m + c]).sum();
            }
        }
        let jacobian = (0..d).flat_map(|i| jac[i][..d].to_vec()).collect();
        Ok(TransformedCoefficients {
            side,
            z,
            drift,
            diffusion,
            jacobian,
        })
    }

    /// Solves `G(y) = z` by damped Newton from `guess`.
    pub fn invert(&self, z: &[f64], t: f64, guess: &[f64]) -> Result<Vec<f64>, TransformError> {
        self.invert_from(z, t, guess, None)
    }

    /// As [`Transform::invert`], first trying chord iterations with a known
    /// Jacobian near `guess` (row-major). Falls back to full Newton when the
    /// chord stalls.
    fn invert_from(&self, z: &[f64], t: f64, guess: &[f64], chord: Option<&[f64]>) -> Result<Vec<f64>, TransformError> {
        let d = self.sde.dim();
        let scale = 1.0 + z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let tol = self.opts.newton_tol * scale;
        let mut y = guess.to_vec();
        // NaN-safe: a non-finite iterate never counts as converged
        let residual = |g: &[f64]| {
            (0..d).fold(0.0f64, |a, i| {
                let r = (g[i] - z[i]).abs();
                if r.is_finite() {
                    a.max(r)
                } else {
                    f64::INFINITY
                }
            })
        };
        if let Some(lu) = chord.map(|j| DMatrix::from_row_slice(d, d, &j[..d * d]).lu()) {
            let mut g = self.forward(&y, t)?;
            let mut res = residual(&g);
            for _ in 0..CHORD_MAX_ITER {
                if res <= tol {
                    return Ok(y);
                }
                let b = DVector::from_iterator(d, (0..d).map(|i| z[i] - g[i]));
                let Some(delta) = lu.solve(&b) else { break };
                let trial: Vec<f64> = (0..d).map(|i| y[i] + delta[i]).collect();
                let Ok(tg) = self.forward(&trial, t) else { break };
                let tres = residual(&tg);
                if !(tres < 0.5 * res) {
                    break;
                }
                y = trial;
                g = tg;
                res = tres;
            }
            if res <= tol {
                return Ok(y);
            }
        }
        let (mut g, mut jac) = self.value_and_jacobian(&y, t)?;
        let mut res = residual(&g);
        for _ in 0..self.opts.newton_max_iter {
            if res <= tol {
                return Ok(y);
            }
            let a = DMatrix::from_row_slice(d, d, &jac[..d * d]);
            let b = DVector::from_iterator(d, (0..d).map(|i| z[i] - g[i]));
            let Some(delta) = a.lu().solve(&b) else { break };
            let mut lambda = 1.0;
            loop {
                let trial: Vec<f64> = (0..d).map(|i| y[i] + lambda * delta[i]).collect();
                let (tg, tj) = self.value_and_jacobian(&trial, t)?;
                let tres = residual(&tg);
                if tres < res {
                    y = trial;
                    g = tg;
                    jac = tj;
                    res = tres;
                    break;
                }
                lambda *= 0.5;
                if lambda < 1e-6 {
                    return Err(TransformError::InversionFailed {
                        iterations: self.opts.newton_max_iter,
                        residual: res,
                        at: z.to_vec(),
                    });
                }
            }
        }
        if res <= tol {
            return Ok(y);
        }
        Err(TransformError::InversionFailed {
            iterations: self.opts.newton_max_iter,
            residual: res,
            at: z.to_vec(),
        })
    }

    /// Smallest `â_11` over surface points `(rest, t)`; errors below the
    /// configured floor.
    pub fn check_nondegenerate<'p>(&self, points: impl IntoIterator<Item = (&'p [f64], f64)>) -> Result<f64, TransformError> {
        let mut worst = f64::INFINITY;
        for (rest, t) in points {
            let jet = self.sde.surface(rest, t);
            for side in [Side::Minus, Side::Plus] {
                let hat = self.hat(side, 0.0, rest, t, &jet);
                if let Some(e) = self.degenerate(&hat, 0.0, rest) {
                    return Err(e);
                }
                worst = worst.min(hat.a11);
            }
        }
        Ok(worst)
    }

    /// Whether the two drifts differ at the surface point below `x`.
    fn has_jump(&self, x: &[f64], t: f64, jet: &SurfaceJet) -> bool {
        let d = self.sde.dim();
        let mut p = [0.0; MAX_DIM];
        p[..d].copy_from_slice(&x[..d]);
        p[0] = jet.h;
        let (mut lo, mut hi) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
        self.sde.drift(Side::Minus, &p[..d], t, &mut lo[..d]);
        self.sde.drift(Side::Plus, &p[..d], t, &mut hi[..d]);
        (0..d).any(|i| (hi[i] - lo[i]).abs() > 1e-12 * (1.0 + hi[i].abs().max(lo[i].abs())))
    }

    /// Euler step of the original SDE with the drift of the current side.
    pub fn plain_step(&self, x: &mut [f64], t: f64, dt: f64, dw: &[f64]) {
        let (d, m) = (self.sde.dim(), self.sde.noise_dim());
        let jet = self.sde.surface(&x[1..d], t);
        let side = self.sde.side(x[0] - jet.h);
        let mut alpha = [0.0; MAX_DIM];
        let mut beta = [0.0; MAX_DIM * MAX_DIM];
        self.sde.drift(side, x, t, &mut alpha[..d]);
        self.sde.diffusion(x, t, &mut beta[..d * m]);
        for i in 0..d {
            x[i] += alpha[i] * dt + (0..m).map(|c| beta[i * m + c] * dw[c]).sum::<f64>();
        }
        self.sde.project(x);
    }

    fn transformed_step(&self, x: &mut [f64], t: f64, dt: f64, dw: &[f64]) -> Result<(), TransformError> {
        let m = self.sde.noise_dim();
        let y = self.to_adapted(x, t);
        let co = self.coefficients(&y, t)?;
        let z: Vec<f64> = (0..y.len())
            .map(|i| co.z[i] + co.drift[i] * dt + (0..m).map(|c| co.diffusion[i * m + c] * dw[c]).sum::<f64>())
            .collect();
        let y_new = self.invert_from(&z, t + dt, &y, Some(&co.jacobian))?;
        x.copy_from_slice(&self.from_adapted(&y_new, t + dt));
        self.sde.project(x);
        Ok(())
    }

    /// Whether a step of size `dt` from `(x, t)` goes through `Z`: the state
    /// lies within `tube_factor sqrt(â_11 dt)` of the surface, the drift
    /// actually jumps there and neither side's drift dominates the noise.
    pub fn in_tube(&self, x: &[f64], t: f64, dt: f64) -> bool {
        let d = self.sde.dim();
        let rest = &x[1..d];
        let jet = self.sde.surface(rest, t);
        let f = x[0] - jet.h;
        let hat = self.hat(self.sde.side(f), f, rest, t, &jet);
        let radius = self.opts.tube_factor * (hat.a11 * dt).sqrt();
        if f.abs() > radius || !self.has_jump(x, t, &jet) {
            return false;
        }
        [Side::Minus, Side::Plus].into_iter().all(|side| {
            let h = self.hat(side, 0.0, rest, t, &jet);
            h.a11 > 0.0 && h.alpha[0].abs() * (dt / h.a11).sqrt() <= self.opts.max_drift_ratio
        })
    }

    /// Euler step on `Z` mapped back through the inverse. A failed inversion
    /// splits the step in two halves joined by a Brownian bridge draw from `rng`.
    pub fn tube_step<R: Rng + ?Sized>(&self, x: &mut [f64], t: f64, dt: f64, dw: &[f64], rng: &mut R) -> Result<(), TransformError> {
        self.tube_step_at_depth(x, t, dt, dw, rng, 0)
    }

    fn tube_step_at_depth<R: Rng + ?Sized>(&self, x: &mut [f64], t: f64, dt: f64, dw: &[f64], rng: &mut R, depth: usize) -> Result<(), TransformError> {
        let start = x.to_vec();
        match self.transformed_step(x, t, dt, dw) {
            Ok(()) => Ok(()),
            Err(TransformError::InversionFailed { residual, .. }) if depth < self.opts.max_substep_depth => {
                log::debug!("inversion failed at t={t} (residual {residual:e}), halving step {dt}");
                x.copy_from_slice(&start);
                let half = 0.5 * dt;
                let first: Vec<f64> = dw
                    .iter()
                    .map(|w| {
                        let z: f64 = StandardNormal.sample(rng);
                        0.5 * w + 0.5 * dt.sqrt() * z
                    })
                    .collect();
                let second: Vec<f64> = dw.iter().zip(&first).map(|(w, a)| w - a).collect();
                for (t_half, inc) in [(t, &first), (t + half, &second)] {
                    if self.in_tube(x, t_half, half) {
                        self.tube_step_at_depth(x, t_half, half, inc, rng, depth + 1)?;
                    } else {
                        self.plain_step(x, t_half, half, inc);
                    }
                }
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    /// One step from `(x, t)` with Brownian increment `dw`: through `Z` inside
    /// the tube, plain Euler outside.
    pub fn step<R: Rng + ?Sized>(&self, x: &mut [f64], t: f64, dt: f64, dw: &[f64], rng: &mut R) -> Result<Region, TransformError> {
        if self.in_tube(x, t, dt) {
            self.tube_step(x, t, dt, dw, rng)?;
            Ok(Region::Tube)
        } else {
            self.plain_step(x, t, dt, dw);
            Ok(Region::Plain)
        }
    }

    /// Runs a path on `n_steps` steps of size `dt`; `dws` holds the
    /// increments step after step (`n_steps * noise_dim` values).
    pub fn simulate_path<R: Rng + ?Sized>(&self, x0: &[f64], t0: f64, dt: f64, dws: &[f64], rng: &mut R) -> Result<SdePath, TransformError> {
        let (d, m) = (self.sde.dim(), self.sde.noise_dim());
        assert_eq!(dws.len() % m, 0);
        let n = dws.len() / m;
        let mut path = SdePath {
            dim: d,
            times: Vec::with_capacity(n + 1),
            states: Vec::with_capacity((n + 1) * d),
            regions: Vec::with_capacity(n + 1),
        };
        let mut x = x0.to_vec();
        path.push(t0, &x, Region::Plain);
        for k in 0..n {
            let t = t0 + k as f64 * dt;
            let region = self.step(&mut x, t, dt, &dws[k * m..(k + 1) * m], rng)?;
            path.push(t0 + (k + 1) as f64 * dt, &x, region);
        }
        Ok(path)
    }
}

/// Recorded path; `regions[k]` says how the step ending at `times[k]` was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct SdePath {
    pub dim: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub regions: Vec<Region>,
}

impl SdePath {
    fn push(&mut self, t: f64, x: &[f64], region: Region) {
        self.times.push(t);
        self.states.extend_from_slice(x);
        self.regions.push(region);
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.times.len() - 1)
    }

    pub fn tube_fraction(&self) -> f64 {
        let n = self.regions.len().saturating_sub(1).max(1);
        self.regions.iter().skip(1).filter(|r| **r == Region::Tube).count() as f64 / n as f64
    }

    pub fn write_csv<W: Write + ?Sized>(&self, out: &mut W) -> io::Result<()> {
        write!(out, "t")?;
        for i in 1..=self.dim {
            write!(out, ",x_{i}")?;
        }
        writeln!(out, ",region")?;
        for (k, t) in self.times.iter().enumerate() {
            write!(out, "{t}")?;
            for v in self.state(k) {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{}", self.regions[k].as_str())?;
        }
        Ok(())
    }
}

/// Draws `n_steps * noise_dim` independent `N(0, dt)` increments.
pub fn brownian_increments<R: Rng + ?Sized>(rng: &mut R, n_steps: usize, noise_dim: usize, dt: f64) -> Vec<f64> {
    let sd = dt.sqrt();
    (0..n_steps * noise_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

/// Sums consecutive blocks of `factor` steps, giving the increments of the
/// same Brownian path on a grid `factor` times coarser.
pub fn coarsen_increments(dws: &[f64], noise_dim: usize, factor: usize) -> Vec<f64> {
    let n = dws.len() / noise_dim;
    assert_eq!(n % factor, 0, "{n} steps not divisible by {factor}");
    let mut out = vec![0.0; (n / factor) * noise_dim];
    for k in 0..n {
        for c in 0..noise_dim {
            out[(k / factor) * noise_dim + c] += dws[k * noise_dim + c];
        }
    }
    out
}

/// Plain Euler–Maruyama with the drift of the current side, for reference runs.
pub fn euler_path<S: DiscontinuousSde + ?Sized>(sde: &S, x0: &[f64], t0: f64, dt: f64, dws: &[f64]) -> Vec<f64> {
    let engine = Transform::new(sde, TransformOptions::default());
    let m = sde.noise_dim();
    let mut x = x0.to_vec();
    for (k, dw) in dws.chunks(m).enumerate() {
        engine.plain_step(&mut x, t0 + k as f64 * dt, dt, dw);
    }
    x
}

fn signed_integral(f: impl Fn(f64) -> f64, upper: f64, tol: f64) -> f64 {
    if upper == 0.0 {
        return 0.0;
    }
    let (a, b) = if upper > 0.0 { (0.0, upper) } else { (upper, 0.0) };
    let v = quadrature::integrate(f, a, b, tol).integral;
    if upper > 0.0 {
        v
    } else {
        -v
    }
}

impl<S: DiscontinuousSde + ?Sized> Transform<'_, S> {
    /// Ratio `2 α̂_k / â_11` along the segment from the surface to `y`.
    fn ratio(&self, side: Side, rest: &[f64], t: f64, jet: &SurfaceJet, k: usize, s: f64, err: &Cell<Option<f64>>) -> f64 {
        let hat = self.hat(side, s, rest, t, jet);
        if !(hat.a11 >= self.opts.min_normal_variance) {
            err.set(Some(hat.a11));
            return 0.0;
        }
        2.0 * hat.alpha[k] / hat.a11
    }

    fn check_segment(&self, err: &Cell<Option<f64>>, y: &[f64]) -> Result<(), TransformError> {
        match err.get() {
            Some(value) => Err(TransformError::DegenerateDiffusion { value, at: y.to_vec() }),
            None => Ok(()),
        }
    }

    /// `g_1` at the original state `x` by nested adaptive quadrature.
    pub fn g1(&self, x: &[f64], t: f64) -> Result<f64, TransformError> {
        let y = self.to_adapted(x, t);
        let rest = &y[1..];
        let jet = self.sde.surface(rest, t);
        let side = self.sde.side(y[0]);
        let tol = self.opts.quadrature_tol;
        let err = Cell::new(None);
        let inner = |xi: f64| signed_integral(|s| self.ratio(side, rest, t, &jet, 0, s, &err), xi, tol);
        let v = signed_integral(|xi| (-inner(xi)).exp(), y[0], tol);
        self.check_segment(&err, &y)?;
        Ok(v)
    }

    /// `g_k` (zero-based `k >= 1`) at the original state `x` by nested adaptive quadrature.
    pub fn gk(&self, x: &[f64], t: f64, k: usize) -> Result<f64, TransformError> {
        assert!(k >= 1 && k < self.sde.dim(), "component {k} out of range");
        let y = self.to_adapted(x, t);
        let rest = &y[1..];
        let jet = self.sde.surface(rest, t);
        let side = self.sde.side(y[0]);
        let tol = self.opts.quadrature_tol;
        let err = Cell::new(None);
        let exponent = |xi: f64| signed_integral(|s| self.ratio(side, rest, t, &jet, 0, s, &err), xi, tol);
        let ck = |xi: f64| -signed_integral(|s| self.ratio(side, rest, t, &jet, k, s, &err) * exponent(s).exp(), xi, tol);
        let v = signed_integral(|xi| ck(xi) * (-exponent(xi)).exp(), y[0], tol);
        self.check_segment(&err, &y)?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests;
