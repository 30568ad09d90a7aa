//! Monte Carlo value of the smoothed threshold policy, for comparison with the
//! grid value function.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::filter::step2;
use crate::hjb::{Mode, ValueField};
use crate::model::ModelParams;
use crate::rng::{mean_and_stderr, path_stream, stream};
use crate::transform::{StorageSystem, Transform, TransformOptions};

/// Paths per start below which an estimate is refused.
pub const MIN_PATHS: usize = 100;

/// Observable state `(S, Q, pi_1)` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemState {
    pub s: f64,
    pub q: f64,
    pub pi1: f64,
    pub t: f64,
}

impl SystemState {
    pub fn new(s: f64, q: f64, pi1: f64, t: f64) -> Self {
        Self { s, q, pi1, t }
    }

    /// Fails unless the state lies in the domain; `index` labels the error.
    pub fn check(&self, params: &ModelParams, index: usize) -> Result<(), EvalError> {
        let bad = |reason: String| Err(EvalError::BadStart { index, reason });
        if !self.s.is_finite() {
            return bad(format!("price {}", self.s));
        }
        if !params.in_capacity(self.q) {
            return bad(format!("level {} outside [{}, {}]", self.q, params.q_lo, params.q_hi));
        }
        if !(0.0..=1.0).contains(&self.pi1) {
            return bad(format!("filter value {}", self.pi1));
        }
        if !(0.0..=params.horizon).contains(&self.t) {
            return bad(format!("time {} outside [0, {}]", self.t, params.horizon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Euler–Maruyama with the drift evaluated at the current mode.
    Plain,
    /// Plain steps away from the levels, steps through the transform near them.
    Transformed,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Plain => "plain",
            Scheme::Transformed => "transformed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub dt: f64,
    pub n_paths: usize,
    pub scheme: Scheme,
    /// Pair every path with its mirror image `-dW`.
    pub antithetic: bool,
    pub transform: TransformOptions,
    /// Drop all noise; for tests of the deterministic skeleton.
    #[serde(skip)]
    pub zero_noise: bool,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            n_paths: 2000,
            scheme: Scheme::Plain,
            antithetic: false,
            transform: TransformOptions::default(),
            zero_noise: false,
        }
    }
}

/// Result of one controlled path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    /// Discounted running reward plus discounted terminal reward.
    pub reward: f64,
    pub terminal: SystemState,
    pub min_q: f64,
    pub max_q: f64,
    pub steps: usize,
    pub tube_steps: usize,
}

/// One recorded step of a controlled path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathPoint {
    pub t: f64,
    pub s: f64,
    pub q: f64,
    pub pi1: f64,
    pub mode: Mode,
    pub tube: bool,
}

/// Step sizes covering `[t0, horizon]`: full steps of `dt`, the last one shortened.
fn step_sizes(t0: f64, horizon: f64, dt: f64) -> impl Iterator<Item = (f64, f64)> {
    let span = horizon - t0;
    let n = if span <= 0.0 { 0 } else { (span / dt - 1e-9).ceil() as usize };
    (0..n).map(move |k| {
        let t = t0 + k as f64 * dt;
        let h = if k + 1 == n { horizon - t } else { dt };
        (t, h)
    })
}

/// Simulates one path under the threshold policy of `system` and accumulates
/// `∫ e^{-rho (r - t0)} F dr` by the left-endpoint rule plus the discounted
/// terminal reward. Steps through the transform carry the discounted reward as
/// an extra state coordinate, so trading and payment stay consistent when the
/// mode changes within a step. `sign` flips the Brownian increments (antithetic partner).
pub fn simulate_controlled_path<R: Rng + ?Sized>(
    params: &ModelParams,
    system: &StorageSystem,
    start: SystemState,
    spec: &SimulationSpec,
    sign: f64,
    rng: &mut R,
    mut record: Option<&mut Vec<PathPoint>>,
) -> Result<PathOutcome, EvalError> {
    let tracked = system.clone().with_reward_tracking();
    let buy = Transform::new(&tracked.buy, spec.transform);
    let sell = Transform::new(&tracked.sell, spec.transform);
    let mut x = [start.s, start.q, start.pi1, 0.0];
    let mut reward = 0.0;
    let (mut min_q, mut max_q) = (start.q, start.q);
    let (mut steps, mut tube_steps) = (0, 0);
    for (t, h) in step_sizes(start.t, params.horizon, spec.dt) {
        let mode = system.mode(&x, t);
        let u = mode.rate(params.rate_bounds(x[1]));
        let (s, q) = (x[0], x[1]);
        let dw = if spec.zero_noise {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(rng);
            sign * h.sqrt() * z
        };
        let engine = if std::ptr::eq(system.governing(&x, t), &system.buy) { &buy } else { &sell };
        let tube = spec.scheme == Scheme::Transformed && !spec.zero_noise && engine.in_tube(&x, t, h);
        if let Some(rec) = record.as_deref_mut() {
            rec.push(PathPoint {
                t,
                s: x[0],
                q: x[1],
                pi1: x[2],
                mode,
                tube,
            });
        }
        if tube {
            // the reward coordinate carries e^{-rho t} F through the step
            x[3] = 0.0;
            engine.tube_step(&mut x, t, h, &[dw], rng)?;
            reward += (params.rho * start.t).exp() * x[3];
            tube_steps += 1;
        } else {
            let drift = params.kappa * (params.mean_level2(x[2]) + params.seasonality(t) - x[0]);
            let s_next = x[0] + drift * h + params.sigma * dw;
            x[2] = step2(x[2], dw, h, params);
            x[1] = (x[1] + u * h).clamp(params.q_lo, params.q_hi);
            x[0] = s_next;
            reward += (-params.rho * (t - start.t)).exp() * params.running_reward(s, q, u) * h;
        }
        min_q = min_q.min(x[1]);
        max_q = max_q.max(x[1]);
        steps += 1;
    }
    let terminal = SystemState::new(x[0], x[1], x[2], params.horizon.max(start.t));
    reward += (-params.rho * (terminal.t - start.t)).exp() * params.terminal_reward(x[0], x[1]);
    if let Some(rec) = record {
        rec.push(PathPoint {
            t: terminal.t,
            s: x[0],
            q: x[1],
            pi1: x[2],
            mode: system.mode(&x, terminal.t),
            tube: false,
        });
    }
    Ok(PathOutcome {
        reward,
        terminal,
        min_q,
        max_q,
        steps,
        tube_steps,
    })
}

/// Estimate at one starting point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartReport {
    pub start: SystemState,
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    /// Grid value interpolated at the start, when a value field was attached.
    pub grid_value: Option<f64>,
    /// `mean - grid_value`.
    pub discrepancy: Option<f64>,
    pub min_q: f64,
    pub max_q: f64,
    /// Fraction of steps taken through the transform.
    pub tube_fraction: f64,
}

impl StartReport {
    /// Whether the estimate matches the grid value within `max(rel * |V|, k * stderr)`.
    pub fn consistent(&self, rel: f64, k: f64) -> Option<bool> {
        let v = self.grid_value?;
        Some((self.mean - v).abs() <= (rel * v.abs()).max(k * self.stderr))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub scheme: Scheme,
    pub dt: f64,
    pub seed: u64,
    pub antithetic: bool,
    pub starts: Vec<StartReport>,
}

impl EvaluationReport {
    /// Fills in the grid value and discrepancy for every start.
    pub fn attach_grid(&mut self, value: &ValueField) {
        for r in &mut self.starts {
            let v = value.interpolate(r.start.s, r.start.q, r.start.pi1, r.start.t);
            r.grid_value = Some(v);
            r.discrepancy = Some(r.mean - v);
        }
    }

    pub fn write_csv<W: Write + ?Sized>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "scheme,s,q,nu1,t,mean,stderr,n_paths,grid_value,discrepancy,min_q,max_q,tube_fraction")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.starts {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.scheme.as_str(),
                r.start.s,
                r.start.q,
                r.start.pi1,
                r.start.t,
                r.mean,
                r.stderr,
                r.n_paths,
                opt(r.grid_value),
                opt(r.discrepancy),
                r.min_q,
                r.max_q,
                r.tube_fraction
            )?;
        }
        Ok(())
    }
}

/// Estimates the policy value at every start with `spec.n_paths` paths each.
///
/// Path `p` of start `i` draws from its own stream, so the report does not
/// depend on thread scheduling. With antithetic pairing, the mean of each
/// pair is one sample and the standard error is taken over pairs.
pub fn estimate_j(params: &ModelParams, system: &StorageSystem, starts: &[SystemState], spec: &SimulationSpec, seed: u64) -> Result<EvaluationReport, EvalError> {
    if spec.n_paths < MIN_PATHS {
        return Err(EvalError::TooFewPaths {
            min: MIN_PATHS,
            got: spec.n_paths,
        });
    }
    for (i, s) in starts.iter().enumerate() {
        s.check(params, i)?;
    }
    let mut reports = Vec::with_capacity(starts.len());
    for (i, &start) in starts.iter().enumerate() {
        let samples = if spec.antithetic { spec.n_paths / 2 } else { spec.n_paths };
        let outcomes: Vec<Result<(f64, PathOutcome), EvalError>> = (0..samples)
            .into_par_iter()
            .map(|p| {
                let index = path_stream(i, p);
                let mut rng = stream(seed, index);
                let a = simulate_controlled_path(params, system, start, spec, 1.0, &mut rng, None)?;
                if spec.antithetic {
                    let mut rng = stream(seed, index);
                    let b = simulate_controlled_path(params, system, start, spec, -1.0, &mut rng, None)?;
                    let merged = PathOutcome {
                        reward: 0.5 * (a.reward + b.reward),
                        min_q: a.min_q.min(b.min_q),
                        max_q: a.max_q.max(b.max_q),
                        steps: a.steps + b.steps,
                        tube_steps: a.tube_steps + b.tube_steps,
                        ..a
                    };
                    Ok((merged.reward, merged))
                } else {
                    Ok((a.reward, a))
                }
            })
            .collect();
        let mut values = Vec::with_capacity(samples);
        let (mut min_q, mut max_q) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut steps, mut tube_steps) = (0usize, 0usize);
        for o in outcomes {
            let (v, out) = o?;
            values.push(v);
            min_q = min_q.min(out.min_q);
            max_q = max_q.max(out.max_q);
            steps += out.steps;
            tube_steps += out.tube_steps;
        }
        let (mean, stderr) = mean_and_stderr(&values);
        reports.push(StartReport {
            start,
            mean,
            stderr,
            n_paths: if spec.antithetic { 2 * samples } else { samples },
            grid_value: None,
            discrepancy: None,
            min_q,
            max_q,
            tube_fraction: if steps == 0 { 0.0 } else { tube_steps as f64 / steps as f64 },
        });
    }
    Ok(EvaluationReport {
        scheme: spec.scheme,
        dt: spec.dt,
        seed,
        antithetic: spec.antithetic,
        starts: reports,
    })
}

/// Writes a recorded path as CSV.
pub fn write_path_csv<W: Write + ?Sized>(points: &[PathPoint], out: &mut W) -> io::Result<()> {
    writeln!(out, "t,S,Q,nu1,mode,tube")?;
    for p in points {
        writeln!(out, "{},{},{},{},{},{}", p.t, p.s, p.q, p.pi1, p.mode.as_str(), u8::from(p.tube))?;
    }
    Ok(())
}
