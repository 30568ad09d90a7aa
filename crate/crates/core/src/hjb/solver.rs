//! Backward time stepping.
//!
//! One step from `t_{n+1}` to `t_n` has two stages:
//!
//! 1. Control and storage transport. For each of the three candidate rates
//!    `u_min(q)`, `0`, `u_max(q)` the next slice is read at the foot point
//!    `q + u dt` (linear interpolation, clamped to the capacity range), discounted
//!    by `exp(-rho dt)`, and `F(s, q, u) dt` is added. The best candidate wins.
//! 2. Price and filter diffusion, implicitly, by a Douglas splitting with
//!    weight one on each `q` plane: the price direction and the filter
//!    direction are each solved implicitly in turn, the price/filter cross term
//!    is taken explicitly.
//!
//! The mean-reversion drift in the implicit price solve uses the exponentially
//! fitted speed `(exp(kappa dt) - 1)/dt`, which makes the step exact for
//! values affine in the price.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::operators::Tridiag;
use super::{dq_at, pointwise_control, Grid4D, GridSpec, Mode, PolicyField, ValueField};
use crate::error::SolverError;
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Passes per time step. Passes after the first re-derive the controls
    /// from the marginal value of the current iterate and re-solve.
    pub policy_iterations: usize,
    /// Relative value change (against `max |V|`) accepted as converged.
    pub tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            policy_iterations: 1,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SolveStats {
    pub steps: usize,
    /// Largest number of passes used by any single time step.
    pub max_passes: usize,
}

/// Solves on the grid described by `spec` with default solver options.
pub fn backward_solve(params: &ModelParams, spec: &GridSpec) -> Result<(ValueField, PolicyField), SolverError> {
    let (value, policy, _) = backward_solve_with(params, spec, &SolverOptions::default())?;
    Ok((value, policy))
}

pub fn backward_solve_with(
    params: &ModelParams,
    spec: &GridSpec,
    opts: &SolverOptions,
) -> Result<(ValueField, PolicyField, SolveStats), SolverError> {
    let grid = Grid4D::new(spec, params)?;
    let stepper = Stepper::new(params, &grid);
    let len = grid.slice_len();
    let n_t = grid.n_t();
    let plane = grid.n_nu() * grid.n_s();

    let mut values = vec![0.0; n_t * len];
    let mut modes = vec![Mode::Wait; n_t * len];
    stepper.terminal(&mut values[(n_t - 1) * len..], &mut modes[(n_t - 1) * len..]);

    let mut stats = SolveStats {
        steps: n_t - 1,
        max_passes: 1,
    };
    for n in (0..n_t - 1).rev() {
        let t = grid.t[n];
        let (head, tail) = values.split_at_mut((n + 1) * len);
        let next = &tail[..len];
        let cur = &mut head[n * len..];
        let cur_modes = &mut modes[n * len..(n + 1) * len];

        cur.par_chunks_mut(plane)
            .zip(cur_modes.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(i_q, (v, m))| stepper.step_plane(next, i_q, t, None, v, m));

        let mut pass = 1;
        while pass < opts.policy_iterations {
            pass += 1;
            let forced = stepper.controls_from(cur);
            let changed = forced.iter().zip(cur_modes.iter()).filter(|(a, b)| a != b).count();
            if changed == 0 {
                break;
            }
            let previous = cur.to_vec();
            cur.par_chunks_mut(plane)
                .zip(cur_modes.par_chunks_mut(plane))
                .zip(forced.par_chunks(plane))
                .enumerate()
                .for_each(|(i_q, ((v, m), f))| stepper.step_plane(next, i_q, t, Some(f), v, m));
            let change = previous.iter().zip(cur.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let scale = cur.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            if change <= opts.tolerance * scale {
                break;
            }
            if pass == opts.policy_iterations {
                return Err(SolverError::NotConverged {
                    time_index: n,
                    iterations: pass,
                    last_change: change,
                    changed_controls: changed,
                });
            }
        }
        stats.max_passes = stats.max_passes.max(pass);
    }

    let bounds = grid.q.iter().map(|&q| params.rate_bounds(q)).collect();
    Ok((
        ValueField {
            grid: grid.clone(),
            values,
        },
        PolicyField { grid, modes, bounds },
        stats,
    ))
}

struct Stepper<'a> {
    p: &'a ModelParams,
    g: &'a Grid4D,
    dt: f64,
    discount: f64,
    kappa_fit: f64,
    filter_op: Tridiag,
    /// Price/filter covariance `kappa (mu_1 - mu_2) nu (1 - nu)` per filter node.
    cross: Vec<f64>,
    bounds: Vec<(f64, f64)>,
}

impl<'a> Stepper<'a> {
    fn new(p: &'a ModelParams, g: &'a Grid4D) -> Self {
        let dt = g.dt;
        let filter_op = Tridiag::convection_diffusion(
            g.n_nu(),
            g.dnu,
            |j| p.filter_drift2(g.nu[j]),
            |j| 0.5 * p.filter_vol2(g.nu[j]).powi(2),
        );
        let dmu = p.mu[0] - p.mu[1];
        Self {
            p,
            g,
            dt,
            discount: (-p.rho * dt).exp(),
            kappa_fit: (p.kappa * dt).exp_m1() / dt,
            filter_op,
            cross: g.nu.iter().map(|&v| p.kappa * dmu * v * (1.0 - v)).collect(),
            bounds: g.q.iter().map(|&q| p.rate_bounds(q)).collect(),
        }
    }

    /// Terminal reward and the modes the switching rule gives for `V_q = c_S s - d_minus`.
    fn terminal(&self, values: &mut [f64], modes: &mut [Mode]) {
        let g = self.g;
        for i_q in 0..g.n_q() {
            for i_nu in 0..g.n_nu() {
                for i_s in 0..g.n_s() {
                    let (s, q) = (g.s[i_s], g.q[i_q]);
                    let k = g.index(i_s, i_q, i_nu);
                    values[k] = self.p.terminal_reward(s, q);
                    modes[k] = pointwise_control(s, q, self.p.scrap_rate * s - self.p.d_minus, self.p).0;
                }
            }
        }
    }

    /// Next-slice value at `(s_i, q + u dt, nu_j)`.
    fn shifted(&self, next: &[f64], i_s: usize, i_nu: usize, q: f64, u: f64) -> f64 {
        let g = self.g;
        let (j, w) = super::locate(&g.q, q + u * self.dt);
        let a = next[g.index(i_s, j, i_nu)];
        let b = next[g.index(i_s, j + 1, i_nu)];
        a + w * (b - a)
    }

    /// Candidate values `[buy, wait, sell]`.
    fn candidates(&self, next: &[f64], i_s: usize, i_q: usize, i_nu: usize) -> [f64; 3] {
        let (s, q) = (self.g.s[i_s], self.g.q[i_q]);
        let (u_min, u_max) = self.bounds[i_q];
        let wait = self.discount * next[self.g.index(i_s, i_q, i_nu)] + self.dt * self.p.running_reward(s, q, 0.0);
        let trade = |u: f64| {
            if u == 0.0 {
                wait
            } else {
                self.discount * self.shifted(next, i_s, i_nu, q, u) + self.dt * self.p.running_reward(s, q, u)
            }
        };
        [trade(u_max), wait, trade(u_min)]
    }

    /// Best candidate, preferring trading on ties and selling over buying.
    /// A mode whose rate vanishes at this level does not compete; if the winner
    /// is Wait, such a mode still labels the node when the switching rule fires
    /// for it.
    fn select(&self, c: [f64; 3], next: &[f64], i_s: usize, i_q: usize, i_nu: usize) -> Mode {
        let (u_min, u_max) = self.bounds[i_q];
        let [buy, wait, sell] = c;
        let mode = if u_min < 0.0 && sell >= wait && (u_max == 0.0 || sell >= buy) {
            Mode::Sell
        } else if u_max > 0.0 && buy >= wait {
            Mode::Buy
        } else {
            Mode::Wait
        };
        if mode == Mode::Wait && (u_min == 0.0 || u_max == 0.0) {
            let vq = dq_at(self.g, next, i_s, i_q, i_nu);
            let (rule, _) = pointwise_control(self.g.s[i_s], self.g.q[i_q], vq, self.p);
            let idle = (rule == Mode::Buy && u_max == 0.0) || (rule == Mode::Sell && u_min == 0.0);
            if idle {
                return rule;
            }
        }
        mode
    }

    /// Modes from the switching rule with `V_q` taken from `slice`.
    fn controls_from(&self, slice: &[f64]) -> Vec<Mode> {
        let g = self.g;
        let mut out = vec![Mode::Wait; slice.len()];
        for i_q in 0..g.n_q() {
            for i_nu in 0..g.n_nu() {
                for i_s in 0..g.n_s() {
                    let vq = dq_at(g, slice, i_s, i_q, i_nu);
                    out[g.index(i_s, i_q, i_nu)] = pointwise_control(g.s[i_s], g.q[i_q], vq, self.p).0;
                }
            }
        }
        out
    }

    fn step_plane(&self, next: &[f64], i_q: usize, t: f64, forced: Option<&[Mode]>, values: &mut [f64], modes: &mut [Mode]) {
        let n_s = self.g.n_s();
        for i_nu in 0..self.g.n_nu() {
            for i_s in 0..n_s {
                let c = self.candidates(next, i_s, i_q, i_nu);
                let k = i_nu * n_s + i_s;
                let mode = match forced {
                    Some(f) => f[k],
                    None => self.select(c, next, i_s, i_q, i_nu),
                };
                modes[k] = mode;
                values[k] = c[mode as usize];
            }
        }
        self.diffuse_plane(t, values);
    }

    /// Douglas step on one `q` plane (index `i_nu * n_s + i_s`), in place.
    fn diffuse_plane(&self, t: f64, plane: &mut [f64]) {
        let g = self.g;
        let (n_s, n_nu) = (g.n_s(), g.n_nu());
        let mut filter_part = vec![0.0; plane.len()];
        for i_s in 0..n_s {
            self.filter_op.apply_strided(&plane[i_s..], n_s, &mut filter_part[i_s..]);
        }
        let mut cross_part = vec![0.0; plane.len()];
        for i_nu in 1..n_nu - 1 {
            let c = self.cross[i_nu] / (2.0 * g.dnu);
            if c == 0.0 {
                continue;
            }
            for i_s in 0..n_s {
                let (sl, sh) = match i_s {
                    0 => (0, 1),
                    i if i + 1 == n_s => (i - 1, i),
                    i => (i - 1, i + 1),
                };
                let up = (i_nu + 1) * n_s;
                let dn = (i_nu - 1) * n_s;
                let d = plane[up + sh] - plane[up + sl] - plane[dn + sh] + plane[dn + sl];
                cross_part[i_nu * n_s + i_s] = c * d / (g.s[sh] - g.s[sl]);
            }
        }
        let dt = self.dt;
        for k in 0..plane.len() {
            plane[k] += dt * (filter_part[k] + cross_part[k]);
        }

        let half_var = 0.5 * self.p.sigma * self.p.sigma;
        let level_shift = self.p.seasonality(t);
        let mut scratch = vec![0.0; n_s.max(n_nu)];
        for i_nu in 0..n_nu {
            let level = self.p.mean_level2(g.nu[i_nu]) + level_shift;
            let op = Tridiag::convection_diffusion(n_s, g.ds, |i| self.kappa_fit * (level - g.s[i]), |_| half_var);
            op.solve_implicit_strided(dt, &mut plane[i_nu * n_s..(i_nu + 1) * n_s], 1, &mut scratch);
        }

        for k in 0..plane.len() {
            plane[k] -= dt * filter_part[k];
        }
        for i_s in 0..n_s {
            self.filter_op.solve_implicit_strided(dt, &mut plane[i_s..], n_s, &mut scratch);
        }
    }
}
