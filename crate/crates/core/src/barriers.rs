//! Switching levels of the threshold policy, their smooth approximation and
//! the admissibility checks needed before simulating the controlled system.
//!
//! Along each price line of the policy the modes must read Buy, then Wait,
//! then Sell. The buy level separates Buy from Wait, the sell level separates
//! Wait from Sell; both sit at the midpoint of the two nodes where the mode
//! changes, so their resolution is one price step.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::BarrierError;
use crate::hjb::{mixed_derivative_margin, Grid4D, MixedMargin, Mode, PolicyField, ValueField};
use crate::model::ModelParams;

/// Location of a switching level on one price line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Level {
    /// The switch happens below the price range (the upper mode covers the whole line).
    BelowRange,
    Inside(f64),
    /// The switch happens above the price range (the lower mode covers the whole line).
    AboveRange,
    /// The line does not have the Buy/Wait/Sell structure.
    Flagged,
}

impl Level {
    /// Numeric value with the out-of-range cases at `∓inf`; NaN when flagged.
    pub fn value(self) -> f64 {
        match self {
            Level::BelowRange => f64::NEG_INFINITY,
            Level::Inside(x) => x,
            Level::AboveRange => f64::INFINITY,
            Level::Flagged => f64::NAN,
        }
    }

    pub fn inside(self) -> Option<f64> {
        match self {
            Level::Inside(x) => Some(x),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Level::BelowRange => "below",
            Level::Inside(_) => "inside",
            Level::AboveRange => "above",
            Level::Flagged => "flagged",
        }
    }
}

/// Buy and sell levels over the `(q, nu1, t)` nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierField {
    pub q: Vec<f64>,
    pub nu: Vec<f64>,
    pub t: Vec<f64>,
    /// Price spacing, the resolution of every level.
    pub ds: f64,
    pub buy: Vec<Level>,
    pub sell: Vec<Level>,
}

impl BarrierField {
    #[inline]
    pub fn index(&self, i_q: usize, i_nu: usize, i_t: usize) -> usize {
        (i_t * self.q.len() + i_q) * self.nu.len() + i_nu
    }

    pub fn buy_at(&self, i_q: usize, i_nu: usize, i_t: usize) -> Level {
        self.buy[self.index(i_q, i_nu, i_t)]
    }

    pub fn sell_at(&self, i_q: usize, i_nu: usize, i_t: usize) -> Level {
        self.sell[self.index(i_q, i_nu, i_t)]
    }

    /// `(i_q, i_nu, i_t)` of every flagged line.
    pub fn flagged(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for i_t in 0..self.t.len() {
            for i_q in 0..self.q.len() {
                for i_nu in 0..self.nu.len() {
                    if self.buy_at(i_q, i_nu, i_t) == Level::Flagged {
                        out.push((i_q, i_nu, i_t));
                    }
                }
            }
        }
        out
    }

    /// Fails on the first node where both levels are inside the range and the
    /// buy level is not strictly below the sell level.
    pub fn check_distinct(&self) -> Result<(), BarrierError> {
        for i_t in 0..self.t.len() {
            for i_q in 0..self.q.len() {
                for i_nu in 0..self.nu.len() {
                    let (b, s) = (self.buy_at(i_q, i_nu, i_t), self.sell_at(i_q, i_nu, i_t));
                    if let (Some(b), Some(s)) = (b.inside(), s.inside()) {
                        if b >= s {
                            return Err(BarrierError::Crossing {
                                q: self.q[i_q],
                                nu1: self.nu[i_nu],
                                t: self.t[i_t],
                                buy: b,
                                sell: s,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// CSV with columns `q,nu1,t,buy_level,buy_status,sell_level,sell_status`.
    /// Levels outside the range are written as `-inf`/`inf`, flagged ones as `nan`.
    pub fn write_csv<W: Write + ?Sized>(&self, out: &mut W, time_stride: usize) -> io::Result<()> {
        writeln!(out, "q,nu1,t,buy_level,buy_status,sell_level,sell_status")?;
        for i_t in time_indices(self.t.len(), time_stride) {
            for i_q in 0..self.q.len() {
                for i_nu in 0..self.nu.len() {
                    let (b, s) = (self.buy_at(i_q, i_nu, i_t), self.sell_at(i_q, i_nu, i_t));
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{}",
                        self.q[i_q],
                        self.nu[i_nu],
                        self.t[i_t],
                        b.value(),
                        b.label(),
                        s.value(),
                        s.label()
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Every `stride`-th time index plus the last one.
pub fn time_indices(n_t: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut idx: Vec<usize> = (0..n_t).step_by(stride).collect();
    if idx.last() != Some(&(n_t - 1)) {
        idx.push(n_t - 1);
    }
    idx
}

/// Levels of one price line, or `None` if the modes are not ordered Buy, Wait, Sell.
fn scan_line(s: &[f64], modes: impl Iterator<Item = Mode>) -> Option<(Level, Level)> {
    let modes: Vec<Mode> = modes.collect();
    if modes.windows(2).any(|w| w[1] < w[0]) {
        return None;
    }
    let n = modes.len();
    let buys = modes.iter().take_while(|m| **m == Mode::Buy).count();
    let sells = modes.iter().rev().take_while(|m| **m == Mode::Sell).count();
    let level = |below: usize| match below {
        0 => Level::BelowRange,
        k if k == n => Level::AboveRange,
        k => Level::Inside(0.5 * (s[k - 1] + s[k])),
    };
    Some((level(buys), level(n - sells)))
}

/// Switching levels on every `(q, nu1, t)` line of the policy.
pub fn extract_barriers(policy: &PolicyField) -> BarrierField {
    let g = &policy.grid;
    let (n_q, n_nu, n_t) = (g.n_q(), g.n_nu(), g.n_t());
    let per_slice = n_q * n_nu;
    let mut levels = vec![(Level::Flagged, Level::Flagged); n_t * per_slice];
    levels.par_chunks_mut(per_slice).enumerate().for_each(|(i_t, chunk)| {
        for i_q in 0..n_q {
            for i_nu in 0..n_nu {
                let line = (0..g.n_s()).map(|i_s| policy.mode(i_s, i_q, i_nu, i_t));
                chunk[i_q * n_nu + i_nu] = scan_line(&g.s, line).unwrap_or((Level::Flagged, Level::Flagged));
            }
        }
    });
    let (buy, sell) = levels.into_iter().unzip();
    BarrierField {
        q: g.q.clone(),
        nu: g.nu.clone(),
        t: g.t.clone(),
        ds: g.ds,
        buy,
        sell,
    }
}

/// Barrier slope along `nu1` at which the diffusion becomes tangent to the
/// switching surface: `sigma^2 / (kappa (mu_1 - mu_2) nu1 (1 - nu1))`.
pub fn forbidden_slope(params: &ModelParams, nu1: f64) -> f64 {
    params.sigma * params.sigma / (params.kappa * (params.mu[0] - params.mu[1]) * nu1 * (1.0 - nu1))
}

/// `|sigma - (kappa/sigma)(mu_1 - mu_2) nu1 (1 - nu1) b_nu|`, the normal
/// component of the price noise across the surface `s = b(q, nu1, t)`.
pub fn parallel_margin(params: &ModelParams, nu1: f64, slope_nu: f64) -> f64 {
    (params.sigma - params.filter_vol2(nu1) * slope_nu).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeMargin {
    pub barrier: &'static str,
    pub q: f64,
    pub nu1: f64,
    pub t: f64,
    pub slope: f64,
    pub margin: f64,
    /// `sigma - (kappa/sigma)(mu_1 - mu_2) nu1 (1 - nu1) b_nu` before taking the absolute value.
    pub signed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParallelReport {
    pub min_margin: f64,
    /// Smallest signed margin. Node slopes are differences of levels quantized
    /// to the price step, so this can dip below zero where the smooth levels do not.
    pub min_signed_margin: f64,
    pub worst: Option<NodeMargin>,
    pub nodes_checked: usize,
    /// Nodes whose margin is not strictly positive.
    pub failing: Vec<NodeMargin>,
}

/// Non-parallelity margins of both barriers at every interior `nu1` node where
/// the level and at least one `nu1` neighbour are inside the price range.
/// Slopes use central differences, one-sided when only one neighbour is available.
pub fn check_nonparallelity(barriers: &BarrierField, params: &ModelParams) -> ParallelReport {
    let mut report = ParallelReport {
        min_margin: f64::INFINITY,
        min_signed_margin: f64::INFINITY,
        worst: None,
        nodes_checked: 0,
        failing: Vec::new(),
    };
    let n_nu = barriers.nu.len();
    for (name, levels) in [("buy", &barriers.buy), ("sell", &barriers.sell)] {
        for i_t in 0..barriers.t.len() {
            for i_q in 0..barriers.q.len() {
                for i_nu in 1..n_nu - 1 {
                    let at = |j: usize| levels[barriers.index(i_q, j, i_t)].inside();
                    if at(i_nu).is_none() {
                        continue;
                    }
                    let slope = match (at(i_nu - 1), at(i_nu), at(i_nu + 1)) {
                        (Some(a), _, Some(b)) => (b - a) / (barriers.nu[i_nu + 1] - barriers.nu[i_nu - 1]),
                        (Some(a), Some(m), None) => (m - a) / (barriers.nu[i_nu] - barriers.nu[i_nu - 1]),
                        (None, Some(m), Some(b)) => (b - m) / (barriers.nu[i_nu + 1] - barriers.nu[i_nu]),
                        _ => continue,
                    };
                    let nu1 = barriers.nu[i_nu];
                    let node = NodeMargin {
                        barrier: name,
                        q: barriers.q[i_q],
                        nu1,
                        t: barriers.t[i_t],
                        slope,
                        margin: parallel_margin(params, nu1, slope),
                        signed: params.sigma - params.filter_vol2(nu1) * slope,
                    };
                    report.nodes_checked += 1;
                    report.min_signed_margin = report.min_signed_margin.min(node.signed);
                    if node.margin < report.min_margin {
                        report.min_margin = node.margin;
                        report.worst = Some(node);
                    }
                    if node.margin <= 0.0 {
                        report.failing.push(node);
                    }
                }
            }
        }
    }
    report
}

/// Margin of `V_sq != 1` over all time slices.
pub fn check_mixed_derivative(value: &ValueField) -> MixedMargin {
    mixed_derivative_margin(value, 0..value.grid.n_t())
}

/// How time enters the polynomial basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimeCoordinate {
    /// `t` itself.
    Linear,
    /// `exp(-rate (T - t))`, which stretches the end of the horizon where the
    /// levels move fastest.
    Exponential { rate: f64 },
    /// `ln(T - t + offset)`, which resolves the terminal boundary layer.
    Logarithmic { offset: f64 },
}

impl TimeCoordinate {
    /// Value and first two derivatives with respect to `t`.
    fn map(self, t: f64, horizon: f64) -> (f64, f64, f64) {
        match self {
            TimeCoordinate::Linear => (t, 1.0, 0.0),
            TimeCoordinate::Exponential { rate } => {
                let w = (-rate * (horizon - t)).exp();
                (w, rate * w, rate * rate * w)
            }
            TimeCoordinate::Logarithmic { offset } => {
                let r = horizon - t + offset;
                (r.ln(), -1.0 / r, -1.0 / (r * r))
            }
        }
    }
}

/// Degrees of the tensor polynomial and the time coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingSpec {
    pub degree_q: usize,
    pub degree_nu: usize,
    pub degree_t: usize,
    pub time: TimeCoordinate,
}

impl Default for SmoothingSpec {
    fn default() -> Self {
        Self {
            degree_q: 5,
            degree_nu: 5,
            degree_t: 3,
            time: TimeCoordinate::Logarithmic { offset: 0.002 },
        }
    }
}

/// Legendre polynomial values and first two derivatives at `x` for degrees `0..=n`.
const MAX_STACK_DEGREE: usize = 16;

/// Rows `[P_k, c1 P_k', c2 P_k' + c3 P_k'']` at `x` for `k < out.len()`.
fn legendre_jet(x: f64, out: &mut [[f64; 3]], c1: f64, c2: f64, c3: f64) {
    let n = out.len();
    let (mut p, mut d1, mut d2) = ([0.0; MAX_STACK_DEGREE], [0.0; MAX_STACK_DEGREE], [0.0; MAX_STACK_DEGREE]);
    p[0] = 1.0;
    if n > 1 {
        p[1] = x;
        d1[1] = 1.0;
    }
    for k in 1..n.saturating_sub(1) {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * x * p[k] - kf * p[k - 1]) / (kf + 1.0);
        d1[k + 1] = d1[k - 1] + (2.0 * kf + 1.0) * p[k];
        d2[k + 1] = d2[k - 1] + (2.0 * kf + 1.0) * d1[k];
    }
    for k in 0..n {
        out[k] = [p[k], c1 * d1[k], c2 * d1[k] + c3 * d2[k]];
    }
}

/// `P_0(x) .. P_{len-1}(x)` into `out`.
fn legendre_values(x: f64, out: &mut [f64]) {
    let n = out.len();
    out[0] = 1.0;
    if n > 1 {
        out[1] = x;
    }
    for k in 1..n.saturating_sub(1) {
        let kf = k as f64;
        out[k + 1] = ((2.0 * kf + 1.0) * x * out[k] - kf * out[k - 1]) / (kf + 1.0);
    }
}

fn legendre(n: usize, x: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; n + 1];
    let mut d1 = vec![0.0; n + 1];
    let mut d2 = vec![0.0; n + 1];
    p[0] = 1.0;
    if n >= 1 {
        p[1] = x;
        d1[1] = 1.0;
    }
    for k in 1..n {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * x * p[k] - kf * p[k - 1]) / (kf + 1.0);
        d1[k + 1] = d1[k - 1] + (2.0 * kf + 1.0) * p[k];
        d2[k + 1] = d2[k - 1] + (2.0 * kf + 1.0) * d1[k];
    }
    (p, d1, d2)
}

/// Tensor Legendre polynomial in `(q, nu1, time coordinate)`, each axis mapped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorPoly {
    pub spec: SmoothingSpec,
    pub horizon: f64,
    /// Axis ranges in `(q, nu1, time coordinate)`.
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    /// Coefficient of `P_i(q) P_j(nu1) P_k(time)` at `(i * (dn + 1) + j) * (dt + 1) + k`.
    pub coeffs: Vec<f64>,
}

/// Value, gradient and Hessian of a smooth level in `(q, nu1, t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: [f64; 3],
    pub hess: [[f64; 3]; 3],
}

impl TensorPoly {
    fn dims(&self) -> [usize; 3] {
        [self.spec.degree_q + 1, self.spec.degree_nu + 1, self.spec.degree_t + 1]
    }

    fn scaled(&self, axis: usize, v: f64) -> (f64, f64) {
        let h = self.hi[axis] - self.lo[axis];
        ((2.0 * v - self.lo[axis] - self.hi[axis]) / h, 2.0 / h)
    }

    fn basis_row(spec: &SmoothingSpec, lo: [f64; 3], hi: [f64; 3], horizon: f64, q: f64, nu: f64, t: f64, out: &mut [f64]) {
        let x = |axis: usize, v: f64| (2.0 * v - lo[axis] - hi[axis]) / (hi[axis] - lo[axis]);
        let (pq, _, _) = legendre(spec.degree_q, x(0, q));
        let (pn, _, _) = legendre(spec.degree_nu, x(1, nu));
        let (pt, _, _) = legendre(spec.degree_t, x(2, spec.time.map(t, horizon).0));
        let mut k = 0;
        for a in &pq {
            for b in &pn {
                for c in &pt {
                    out[k] = a * b * c;
                    k += 1;
                }
            }
        }
    }

    pub fn eval(&self, q: f64, nu1: f64, t: f64) -> f64 {
        let [nq, nn, nt] = self.dims();
        if nq.max(nn).max(nt) > MAX_STACK_DEGREE {
            let mut row = vec![0.0; self.coeffs.len()];
            Self::basis_row(&self.spec, self.lo, self.hi, self.horizon, q, nu1, t, &mut row);
            return row.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum();
        }
        let (mut pq, mut pn, mut pt) = ([0.0; MAX_STACK_DEGREE], [0.0; MAX_STACK_DEGREE], [0.0; MAX_STACK_DEGREE]);
        legendre_values(self.scaled(0, q).0, &mut pq[..nq]);
        legendre_values(self.scaled(1, nu1).0, &mut pn[..nn]);
        legendre_values(self.scaled(2, self.spec.time.map(t, self.horizon).0).0, &mut pt[..nt]);
        let mut acc = 0.0;
        let mut k = 0;
        for a in &pq[..nq] {
            for b in &pn[..nn] {
                let mut inner = 0.0;
                for c in &pt[..nt] {
                    inner += c * self.coeffs[k];
                    k += 1;
                }
                acc += a * b * inner;
            }
        }
        acc
    }

    /// The same surface moved by `by` price units.
    pub fn shifted(&self, by: f64) -> Self {
        let mut out = self.clone();
        // basis function 0 is the constant P_0 P_0 P_0 = 1
        out.coeffs[0] += by;
        out
    }

    /// Value with exact first and second derivatives in `(q, nu1, t)`.
    pub fn jet(&self, q: f64, nu1: f64, t: f64) -> Jet {
        let [nq, nn, nt] = self.dims();
        assert!(nq.max(nn).max(nt) <= MAX_STACK_DEGREE, "degree above {}", MAX_STACK_DEGREE - 1);
        let (w, dw, d2w) = self.spec.time.map(t, self.horizon);
        let (xq, sq) = self.scaled(0, q);
        let (xn, sn) = self.scaled(1, nu1);
        let (xt, st) = self.scaled(2, w);
        // value, first and second derivative of each factor in the physical
        // variable; time goes through the chain rule of w(t)
        let mut fq = [[0.0; 3]; MAX_STACK_DEGREE];
        let mut fnu = [[0.0; 3]; MAX_STACK_DEGREE];
        let mut ft = [[0.0; 3]; MAX_STACK_DEGREE];
        legendre_jet(xq, &mut fq[..nq], sq, 0.0, sq * sq);
        legendre_jet(xn, &mut fnu[..nn], sn, 0.0, sn * sn);
        legendre_jet(xt, &mut ft[..nt], st * dw, st * d2w, st * st * dw * dw);
        let mut jet = Jet {
            value: 0.0,
            grad: [0.0; 3],
            hess: [[0.0; 3]; 3],
        };
        // orders (q, nu, t) with total degree <= 2
        let orders: [[usize; 3]; 10] = [
            [0, 0, 0],
            [1, 0, 0],
            [0, 1, 0],
            [0, 0, 1],
            [2, 0, 0],
            [0, 2, 0],
            [0, 0, 2],
            [1, 1, 0],
            [1, 0, 1],
            [0, 1, 1],
        ];
        let mut acc = [0.0; 10];
        for i in 0..nq {
            let mut m = [[0.0; 3]; 3];
            for j in 0..nn {
                let base = (i * nn + j) * nt;
                let mut tk = [0.0; 3];
                for k in 0..nt {
                    let c = self.coeffs[base + k];
                    for d in 0..3 {
                        tk[d] += c * ft[k][d];
                    }
                }
                for a in 0..3 {
                    for b in 0..3 {
                        m[a][b] += fnu[j][a] * tk[b];
                    }
                }
            }
            for (slot, o) in orders.iter().enumerate() {
                acc[slot] += fq[i][o[0]] * m[o[1]][o[2]];
            }
        }
        jet.value = acc[0];
        jet.grad = [acc[1], acc[2], acc[3]];
        jet.hess = [[acc[4], acc[7], acc[8]], [acc[7], acc[5], acc[9]], [acc[8], acc[9], acc[6]]];
        jet
    }

    /// Least-squares fit to `(q, nu1, t, level)` samples.
    pub fn fit(spec: SmoothingSpec, horizon: f64, ranges: [(f64, f64); 3], samples: &[[f64; 4]]) -> Result<Self, BarrierError> {
        let dims = [spec.degree_q + 1, spec.degree_nu + 1, spec.degree_t + 1];
        let m = dims.iter().product::<usize>();
        if samples.len() < m {
            return Err(BarrierError::Underdetermined {
                nodes: samples.len(),
                coefficients: m,
            });
        }
        let (t0, t1) = (spec.time.map(ranges[2].0, horizon).0, spec.time.map(ranges[2].1, horizon).0);
        let lo = [ranges[0].0, ranges[1].0, t0];
        let hi = [ranges[0].1, ranges[1].1, t1];
        let (gram, rhs) = samples
            .par_chunks(4096)
            .map(|chunk| {
                let mut gram = vec![0.0; m * m];
                let mut rhs = vec![0.0; m];
                let mut row = vec![0.0; m];
                for s in chunk {
                    Self::basis_row(&spec, lo, hi, horizon, s[0], s[1], s[2], &mut row);
                    for a in 0..m {
                        rhs[a] += row[a] * s[3];
                        let ra = row[a];
                        let g = &mut gram[a * m..(a + 1) * m];
                        for b in a..m {
                            g[b] += ra * row[b];
                        }
                    }
                }
                (gram, rhs)
            })
            .reduce(
                || (vec![0.0; m * m], vec![0.0; m]),
                |(mut g1, mut r1), (g2, r2)| {
                    g1.iter_mut().zip(&g2).for_each(|(a, b)| *a += b);
                    r1.iter_mut().zip(&r2).for_each(|(a, b)| *a += b);
                    (g1, r1)
                },
            );
        let gram = DMatrix::from_fn(m, m, |a, b| if a <= b { gram[a * m + b] } else { gram[b * m + a] });
        let coeffs = gram
            .cholesky()
            .map(|c| c.solve(&DVector::from_vec(rhs)))
            .ok_or(BarrierError::Singular)?;
        Ok(Self {
            spec,
            horizon,
            lo,
            hi,
            coeffs: coeffs.iter().copied().collect(),
        })
    }
}

/// A fitted level with its fit statistics against the node values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothLevel {
    pub poly: TensorPoly,
    pub max_deviation: f64,
    pub rms_deviation: f64,
    pub nodes: usize,
    /// Largest deviation on each time node (0 where no node is inside the range).
    pub deviation_by_time: Vec<f64>,
}

/// Smoothed buy and sell levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothBarriers {
    pub buy: SmoothLevel,
    pub sell: SmoothLevel,
}

impl SmoothBarriers {
    /// Both levels moved by constant offsets.
    pub fn shifted(&self, buy_by: f64, sell_by: f64) -> Self {
        let mut out = self.clone();
        out.buy.poly = self.buy.poly.shifted(buy_by);
        out.sell.poly = self.sell.poly.shifted(sell_by);
        out
    }

    /// Mode of a state under the smoothed threshold rule. Selling wins when both fire.
    pub fn classify(&self, s: f64, q: f64, nu1: f64, t: f64) -> Mode {
        if s >= self.sell.poly.eval(q, nu1, t) {
            Mode::Sell
        } else if s <= self.buy.poly.eval(q, nu1, t) {
            Mode::Buy
        } else {
            Mode::Wait
        }
    }
}

fn fit_level(levels: &[Level], barriers: &BarrierField, spec: SmoothingSpec) -> Result<SmoothLevel, BarrierError> {
    let mut samples = Vec::new();
    let mut sample_time = Vec::new();
    for i_t in 0..barriers.t.len() {
        for i_q in 0..barriers.q.len() {
            for i_nu in 0..barriers.nu.len() {
                if let Some(x) = levels[barriers.index(i_q, i_nu, i_t)].inside() {
                    samples.push([barriers.q[i_q], barriers.nu[i_nu], barriers.t[i_t], x]);
                    sample_time.push(i_t);
                }
            }
        }
    }
    let range = |v: &[f64]| (v[0], v[v.len() - 1]);
    let horizon = barriers.t[barriers.t.len() - 1];
    let poly = TensorPoly::fit(spec, horizon, [range(&barriers.q), range(&barriers.nu), range(&barriers.t)], &samples)?;
    let devs: Vec<f64> = samples.iter().map(|s| (poly.eval(s[0], s[1], s[2]) - s[3]).abs()).collect();
    let max_deviation = devs.iter().fold(0.0f64, |m, d| m.max(*d));
    let rms_deviation = (devs.iter().map(|d| d * d).sum::<f64>() / devs.len() as f64).sqrt();
    let mut deviation_by_time = vec![0.0f64; barriers.t.len()];
    for (d, &i_t) in devs.iter().zip(&sample_time) {
        deviation_by_time[i_t] = deviation_by_time[i_t].max(*d);
    }
    Ok(SmoothLevel {
        poly,
        max_deviation,
        rms_deviation,
        nodes: samples.len(),
        deviation_by_time,
    })
}

/// Fits both levels on the nodes where they lie inside the price range.
/// Out-of-range and flagged nodes are excluded.
pub fn smooth_barriers(barriers: &BarrierField, spec: SmoothingSpec) -> Result<SmoothBarriers, BarrierError> {
    Ok(SmoothBarriers {
        buy: fit_level(&barriers.buy, barriers, spec)?,
        sell: fit_level(&barriers.sell, barriers, spec)?,
    })
}

/// Gap and signed non-parallelity of the smoothed levels on a sample lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothCheck {
    /// Smallest `sell - buy`.
    pub min_gap: f64,
    pub gap_at: [f64; 3],
    /// Smallest `sigma - (kappa/sigma)(mu_1 - mu_2) nu1 (1 - nu1) b_nu` over both levels.
    /// Positive means the price noise crosses each surface from the same side everywhere.
    pub min_signed_margin: f64,
    pub margin_at: [f64; 3],
}

/// Evaluates the smoothed levels on every `(q, nu1, t)` in the given axes.
pub fn check_smooth(smooth: &SmoothBarriers, params: &ModelParams, q: &[f64], nu: &[f64], t: &[f64]) -> SmoothCheck {
    let mut out = SmoothCheck {
        min_gap: f64::INFINITY,
        gap_at: [f64::NAN; 3],
        min_signed_margin: f64::INFINITY,
        margin_at: [f64::NAN; 3],
    };
    for &tt in t {
        for &qq in q {
            for &nn in nu {
                let b = smooth.buy.poly.jet(qq, nn, tt);
                let s = smooth.sell.poly.jet(qq, nn, tt);
                if s.value - b.value < out.min_gap {
                    out.min_gap = s.value - b.value;
                    out.gap_at = [qq, nn, tt];
                }
                for j in [b, s] {
                    let m = params.sigma - params.filter_vol2(nn) * j.grad[1];
                    if m < out.min_signed_margin {
                        out.min_signed_margin = m;
                        out.margin_at = [qq, nn, tt];
                    }
                }
            }
        }
    }
    out
}

/// Fraction of grid nodes whose policy mode the smoothed threshold rule reproduces.
pub fn mode_agreement(policy: &PolicyField, smooth: &SmoothBarriers) -> f64 {
    let g: &Grid4D = &policy.grid;
    let matches: usize = (0..g.n_t())
        .into_par_iter()
        .map(|i_t| {
            let mut hits = 0;
            for i_q in 0..g.n_q() {
                for i_nu in 0..g.n_nu() {
                    let (q, nu, t) = (g.q[i_q], g.nu[i_nu], g.t[i_t]);
                    let b = smooth.buy.poly.eval(q, nu, t);
                    let s_lvl = smooth.sell.poly.eval(q, nu, t);
                    for i_s in 0..g.n_s() {
                        let s = g.s[i_s];
                        let mode = if s >= s_lvl {
                            Mode::Sell
                        } else if s <= b {
                            Mode::Buy
                        } else {
                            Mode::Wait
                        };
                        hits += usize::from(mode == policy.mode(i_s, i_q, i_nu, i_t));
                    }
                }
            }
            hits
        })
        .sum();
    matches as f64 / (g.slice_len() * g.n_t()) as f64
}
