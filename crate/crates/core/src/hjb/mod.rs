//! Backward solution of the dynamic programming equation on a uniform grid in
//! price `s`, storage level `q`, filter probability `nu1` and time `t`.
//!
//! Only the two-regime case is supported; the filter state is then the single
//! coordinate `nu1 = pi_1`.

mod operators;
mod solver;

use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::model::ModelParams;

pub use solver::{backward_solve, backward_solve_with, SolveStats, SolverOptions};

/// Grid resolution and price truncation. All `n_*` are node counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub s_min: f64,
    pub s_max: f64,
    pub n_s: usize,
    pub n_q: usize,
    pub n_nu: usize,
    pub n_t: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            s_min: -100.0,
            s_max: 200.0,
            n_s: 151,
            n_q: 41,
            n_nu: 21,
            n_t: 200,
        }
    }
}

/// Uniform tensor grid over `[s_min, s_max] x [q_lo, q_hi] x [0, 1] x [0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid4D {
    pub s: Vec<f64>,
    pub q: Vec<f64>,
    pub nu: Vec<f64>,
    pub t: Vec<f64>,
    pub ds: f64,
    pub dq: f64,
    pub dnu: f64,
    pub dt: f64,
}

fn uniform(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + i as f64 * h })
        .collect()
}

impl Grid4D {
    /// Checks node counts, the regime count and that the price range covers the
    /// regime levels (plus any seasonal amplitude) by six stationary standard deviations.
    pub fn new(spec: &GridSpec, params: &ModelParams) -> Result<Self, GridError> {
        if params.regimes() != 2 {
            return Err(GridError::RegimeCount(params.regimes()));
        }
        for (axis, nodes) in [("s", spec.n_s), ("q", spec.n_q), ("nu", spec.n_nu), ("t", spec.n_t)] {
            if nodes < 3 {
                return Err(GridError::TooFewNodes { axis, nodes });
            }
        }
        let season = params.seasonality.map_or(0.0, |k| k.amplitude.abs());
        let reach = 6.0 * params.stationary_std() + season;
        let lo = params.mu.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = params.mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (need_min, need_max) = (lo - reach, hi + reach);
        if !(spec.s_min < need_min && spec.s_max > need_max) {
            return Err(GridError::DomainTooNarrow {
                s_min: spec.s_min,
                s_max: spec.s_max,
                need_min,
                need_max,
            });
        }
        let s = uniform(spec.s_min, spec.s_max, spec.n_s);
        let q = uniform(params.q_lo, params.q_hi, spec.n_q);
        let nu = uniform(0.0, 1.0, spec.n_nu);
        let t = uniform(0.0, params.horizon, spec.n_t);
        Ok(Self {
            ds: (spec.s_max - spec.s_min) / (spec.n_s - 1) as f64,
            dq: (params.q_hi - params.q_lo) / (spec.n_q - 1) as f64,
            dnu: 1.0 / (spec.n_nu - 1) as f64,
            dt: params.horizon / (spec.n_t - 1) as f64,
            s,
            q,
            nu,
            t,
        })
    }

    pub fn n_s(&self) -> usize {
        self.s.len()
    }
    pub fn n_q(&self) -> usize {
        self.q.len()
    }
    pub fn n_nu(&self) -> usize {
        self.nu.len()
    }
    pub fn n_t(&self) -> usize {
        self.t.len()
    }

    /// Nodes per time slice.
    pub fn slice_len(&self) -> usize {
        self.n_s() * self.n_q() * self.n_nu()
    }

    /// Offset of `(i_s, i_q, i_nu)` inside a time slice. Each `q` plane is contiguous.
    #[inline]
    pub fn index(&self, i_s: usize, i_q: usize, i_nu: usize) -> usize {
        (i_q * self.n_nu() + i_nu) * self.n_s() + i_s
    }

    /// Nearest node index on a uniform axis.
    pub fn nearest(axis: &[f64], x: f64) -> usize {
        let h = (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64;
        (((x - axis[0]) / h).round().max(0.0) as usize).min(axis.len() - 1)
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            s_min: self.s[0],
            s_max: self.s[self.n_s() - 1],
            n_s: self.n_s(),
            n_q: self.n_q(),
            n_nu: self.n_nu(),
            n_t: self.n_t(),
        }
    }
}

/// Cell index and weight of `x` on a uniform axis, with `x` clamped to the axis.
#[inline]
pub(crate) fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    let n = axis.len();
    let h = (axis[n - 1] - axis[0]) / (n - 1) as f64;
    let pos = ((x - axis[0]) / h).clamp(0.0, (n - 1) as f64);
    let j = (pos.floor() as usize).min(n - 2);
    (j, pos - j as f64)
}

/// `V(s, q, nu1, t)` on every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: Grid4D,
    /// Time slices in order; slice `i_t` occupies `[i_t * slice_len, (i_t + 1) * slice_len)`.
    pub values: Vec<f64>,
}

impl ValueField {
    pub fn slice(&self, i_t: usize) -> &[f64] {
        let n = self.grid.slice_len();
        &self.values[i_t * n..(i_t + 1) * n]
    }

    pub fn at(&self, i_s: usize, i_q: usize, i_nu: usize, i_t: usize) -> f64 {
        self.slice(i_t)[self.grid.index(i_s, i_q, i_nu)]
    }

    /// Multilinear interpolation; arguments outside the grid are clamped.
    pub fn interpolate(&self, s: f64, q: f64, nu1: f64, t: f64) -> f64 {
        let g = &self.grid;
        let (jt, wt) = locate(&g.t, t);
        let a = interpolate_slice(g, self.slice(jt), s, q, nu1);
        let b = interpolate_slice(g, self.slice(jt + 1), s, q, nu1);
        (1.0 - wt) * a + wt * b
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn interpolate_slice(g: &Grid4D, slice: &[f64], s: f64, q: f64, nu1: f64) -> f64 {
    let (js, ws) = locate(&g.s, s);
    let (jq, wq) = locate(&g.q, q);
    let (jn, wn) = locate(&g.nu, nu1);
    let mut acc = 0.0;
    for (dq, fq) in [(0, 1.0 - wq), (1, wq)] {
        for (dn, fn_) in [(0, 1.0 - wn), (1, wn)] {
            let base = g.index(js, jq + dq, jn + dn);
            acc += fq * fn_ * ((1.0 - ws) * slice[base] + ws * slice[base + 1]);
        }
    }
    acc
}

/// Trading decision at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Mode {
    Buy = 0,
    Wait = 1,
    Sell = 2,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Buy => "Buy",
            Mode::Wait => "Wait",
            Mode::Sell => "Sell",
        }
    }

    pub fn from_u8(code: u8) -> Option<Self> {
        match code {
            0 => Some(Mode::Buy),
            1 => Some(Mode::Wait),
            2 => Some(Mode::Sell),
            _ => None,
        }
    }

    /// Rate implied by the mode at a level with envelope `(u_min, u_max)`.
    pub fn rate(self, bounds: (f64, f64)) -> f64 {
        match self {
            Mode::Buy => bounds.1,
            Mode::Wait => 0.0,
            Mode::Sell => bounds.0,
        }
    }
}

/// Optimal mode on every node. Rates follow from the mode and the envelope at the node's level.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    pub grid: Grid4D,
    pub modes: Vec<Mode>,
    /// `(u_min, u_max)` for each `q` node.
    pub bounds: Vec<(f64, f64)>,
}

impl PolicyField {
    pub fn slice(&self, i_t: usize) -> &[Mode] {
        let n = self.grid.slice_len();
        &self.modes[i_t * n..(i_t + 1) * n]
    }

    pub fn mode(&self, i_s: usize, i_q: usize, i_nu: usize, i_t: usize) -> Mode {
        self.slice(i_t)[self.grid.index(i_s, i_q, i_nu)]
    }

    pub fn rate(&self, i_s: usize, i_q: usize, i_nu: usize, i_t: usize) -> f64 {
        self.mode(i_s, i_q, i_nu, i_t).rate(self.bounds[i_q])
    }
}

/// Switching rule: buy while the price plus the purchase cost is below the
/// marginal value of storage, sell while the price net of the sale cost is
/// above it. Exact equality resolves to trading, and to selling if both fire.
pub fn pointwise_control(s: f64, q: f64, vq: f64, params: &ModelParams) -> (Mode, f64) {
    let bounds = params.rate_bounds(q);
    let mode = if s >= vq + params.d_minus {
        Mode::Sell
    } else if s <= vq - params.d_plus {
        Mode::Buy
    } else {
        Mode::Wait
    };
    (mode, mode.rate(bounds))
}

/// Hamiltonian `u V_q + F(s, q, u)` of the control problem at fixed derivative `vq`.
pub fn hamiltonian(s: f64, q: f64, u: f64, vq: f64, params: &ModelParams) -> f64 {
    u * vq + params.running_reward(s, q, u)
}

/// Derivative of a slice along `q`: central inside, one-sided at the capacity limits.
pub(crate) fn dq_at(g: &Grid4D, slice: &[f64], i_s: usize, i_q: usize, i_nu: usize) -> f64 {
    let n_q = g.n_q();
    let (lo, hi) = match i_q {
        0 => (0, 1),
        i if i + 1 == n_q => (i - 1, i),
        i => (i - 1, i + 1),
    };
    (slice[g.index(i_s, hi, i_nu)] - slice[g.index(i_s, lo, i_nu)]) / (g.q[hi] - g.q[lo])
}

/// `V_sq` on one time slice: central differences inside, one-sided at the edges.
pub fn mixed_derivative_slice(g: &Grid4D, slice: &[f64]) -> Vec<f64> {
    let (n_s, n_q, n_nu) = (g.n_s(), g.n_q(), g.n_nu());
    let span = |i: usize, n: usize| match i {
        0 => (0, 1),
        i if i + 1 == n => (i - 1, i),
        i => (i - 1, i + 1),
    };
    let mut out = vec![0.0; slice.len()];
    for i_q in 0..n_q {
        let (ql, qh) = span(i_q, n_q);
        for i_nu in 0..n_nu {
            for i_s in 0..n_s {
                let (sl, sh) = span(i_s, n_s);
                let v = |a, b| slice[g.index(a, b, i_nu)];
                let d = v(sh, qh) - v(sh, ql) - v(sl, qh) + v(sl, ql);
                out[g.index(i_s, i_q, i_nu)] = d / ((g.s[sh] - g.s[sl]) * (g.q[qh] - g.q[ql]));
            }
        }
    }
    out
}

/// `V_sq` on the whole field, laid out like [`ValueField::values`].
pub fn mixed_derivative_field(value: &ValueField) -> Vec<f64> {
    (0..value.grid.n_t())
        .flat_map(|i_t| mixed_derivative_slice(&value.grid, value.slice(i_t)))
        .collect()
}

/// Smallest `|V_sq - 1|` over the field and where it occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixedMargin {
    pub min_margin: f64,
    pub at_s: f64,
    pub at_q: f64,
    pub at_nu1: f64,
    pub at_t: f64,
    pub max_abs_vsq: f64,
}

/// Margin of the condition `V_sq != 1` over every slice in `slices`.
pub fn mixed_derivative_margin(value: &ValueField, slices: impl IntoIterator<Item = usize>) -> MixedMargin {
    let g = &value.grid;
    let mut best = MixedMargin {
        min_margin: f64::INFINITY,
        at_s: f64::NAN,
        at_q: f64::NAN,
        at_nu1: f64::NAN,
        at_t: f64::NAN,
        max_abs_vsq: 0.0,
    };
    for i_t in slices {
        let vsq = mixed_derivative_slice(g, value.slice(i_t));
        for i_q in 0..g.n_q() {
            for i_nu in 0..g.n_nu() {
                for i_s in 0..g.n_s() {
                    let x = vsq[g.index(i_s, i_q, i_nu)];
                    best.max_abs_vsq = best.max_abs_vsq.max(x.abs());
                    let m = (x - 1.0).abs();
                    if m < best.min_margin {
                        best.min_margin = m;
                        best.at_s = g.s[i_s];
                        best.at_q = g.q[i_q];
                        best.at_nu1 = g.nu[i_nu];
                        best.at_t = g.t[i_t];
                    }
                }
            }
        }
    }
    best
}
