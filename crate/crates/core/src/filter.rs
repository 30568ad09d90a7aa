//! Wonham filter for the hidden regime of the price drift, plus joint
//! simulation of the true regime, the observed price and the filter.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::model::ModelParams;
use crate::rng;

/// Lower clamp for filter probabilities of states the chain can re-enter.
pub const PROBABILITY_FLOOR: f64 = 1e-9;

/// Conditional regime probabilities given the observed price history.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pi: Vec<f64>,
}

impl FilterState {
    /// Accepts any componentwise nonnegative vector with unit sum (to 1e-9).
    pub fn new(pi: Vec<f64>) -> Option<Self> {
        let sum: f64 = pi.iter().sum();
        if pi.is_empty() || pi.iter().any(|p| !(*p >= 0.0) || *p > 1.0) || (sum - 1.0).abs() > 1e-9 {
            return None;
        }
        Some(Self { pi })
    }

    pub fn vertex(index: usize, regimes: usize) -> Self {
        let mut pi = vec![0.0; regimes];
        pi[index] = 1.0;
        Self { pi }
    }

    pub fn from_prior(params: &ModelParams) -> Self {
        Self {
            pi: params.nu0.clone(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.pi
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.pi
    }
}

/// Filtered drift `kappa (<mu, pi> + K(t) - s)` of the observed price.
pub fn conditional_drift(s: f64, pi: &FilterState, t: f64, params: &ModelParams) -> f64 {
    params.kappa * (params.mean_level(pi.probs()) + params.seasonality(t) - s)
}

/// Innovation loadings `pi_i (a(s, e_i, t) - a_hat) / sigma`. The price and the
/// seasonal offset cancel, leaving `pi_i kappa (mu_i - <mu, pi>) / sigma`.
pub fn innovation_loadings(pi: &[f64], params: &ModelParams) -> Vec<f64> {
    let mean = params.mean_level(pi);
    pi.iter()
        .zip(&params.mu)
        .map(|(p, m)| p * params.kappa * (m - mean) / params.sigma)
        .collect()
}

/// Euler–Maruyama step of the filter driven by the innovation increment `d_innovation`.
///
/// After the raw update every component is clamped to `[floor, 1]` and the
/// vector is renormalized. The floor is [`PROBABILITY_FLOOR`] for states with
/// positive inflow intensity and 0 for states the chain can never enter, so
/// that absorbing vertices stay exactly where they are.
pub fn filter_step(pi: &FilterState, d_innovation: f64, dt: f64, params: &ModelParams) -> FilterState {
    let mut next = pi.pi.clone();
    step_in_place(&mut next, d_innovation, dt, params);
    FilterState { pi: next }
}

/// In-place form of [`filter_step`].
pub fn step_in_place(pi: &mut [f64], d_innovation: f64, dt: f64, params: &ModelParams) {
    assert!(dt > 0.0, "filter step needs dt > 0, got {dt}");
    let d = pi.len();
    let mean = params.mean_level(pi);
    let scale = params.kappa / params.sigma * d_innovation;
    let mut raw = [0.0f64; 8];
    let mut heap;
    let raw: &mut [f64] = if d <= raw.len() {
        &mut raw[..d]
    } else {
        heap = vec![0.0; d];
        &mut heap
    };
    for i in 0..d {
        let inflow: f64 = (0..d).map(|k| params.lambda[k][i] * pi[k]).sum();
        raw[i] = pi[i] + inflow * dt + pi[i] * (params.mu[i] - mean) * scale;
    }
    for i in 0..d {
        let floor = if has_inflow(params, i) { PROBABILITY_FLOOR } else { 0.0 };
        raw[i] = raw[i].clamp(floor, 1.0);
    }
    let sum: f64 = raw.iter().sum();
    for i in 0..d {
        pi[i] = raw[i] / sum;
    }
}

fn has_inflow(params: &ModelParams, i: usize) -> bool {
    params
        .lambda
        .iter()
        .enumerate()
        .any(|(k, row)| k != i && row[i] > 0.0)
}

/// Scalar two-regime version of [`step_in_place`] acting on `nu1 = pi_1`.
pub fn step2(nu1: f64, d_innovation: f64, dt: f64, params: &ModelParams) -> f64 {
    let mut pi = [nu1, 1.0 - nu1];
    step_in_place(&mut pi, d_innovation, dt, params);
    pi[0]
}

/// Piecewise-constant path of the hidden chain on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    pub horizon: f64,
    pub initial: usize,
    /// `(time, new state)` pairs with strictly increasing times.
    pub jumps: Vec<(f64, usize)>,
}

impl RegimePath {
    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.jumps.partition_point(|&(tj, _)| tj <= t);
        if idx == 0 {
            self.initial
        } else {
            self.jumps[idx - 1].1
        }
    }

    /// Total time spent in `state` over the horizon.
    pub fn occupation_time(&self, state: usize) -> f64 {
        let mut total = 0.0;
        let mut current = self.initial;
        let mut since = 0.0;
        for &(tj, next) in &self.jumps {
            if current == state {
                total += tj - since;
            }
            current = next;
            since = tj;
        }
        if current == state {
            total += self.horizon - since;
        }
        total
    }

    /// Completed holding periods `(state, duration)`, excluding the censored last one.
    pub fn holding_times(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.jumps.len());
        let mut current = self.initial;
        let mut since = 0.0;
        for &(tj, next) in &self.jumps {
            out.push((current, tj - since));
            current = next;
            since = tj;
        }
        out
    }
}

/// Exact continuous-time Markov chain path: exponential holding times with rate
/// `-lambda_ii`, jump targets with probabilities `lambda_ij / -lambda_ii`.
pub fn sample_regime_path<R: Rng + ?Sized>(
    params: &ModelParams,
    horizon: f64,
    initial: usize,
    rng: &mut R,
) -> RegimePath {
    assert!(horizon > 0.0, "horizon must be positive");
    let mut jumps = Vec::new();
    let mut state = initial;
    let mut t = 0.0;
    loop {
        let rate = -params.lambda[state][state];
        if rate <= 0.0 {
            break;
        }
        t += Exp::new(rate).expect("positive rate").sample(rng);
        if t >= horizon {
            break;
        }
        let mut target = rng.random::<f64>() * rate;
        let mut next = state;
        for (j, &l) in params.lambda[state].iter().enumerate() {
            if j == state || l <= 0.0 {
                continue;
            }
            next = j;
            if target < l {
                break;
            }
            target -= l;
        }
        state = next;
        jumps.push((t, state));
    }
    RegimePath {
        horizon,
        initial,
        jumps,
    }
}

/// Draws a regime index from the distribution `probs`.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let mut u = rng.random::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.len() - 1
}

/// Regime path started from a draw of the initial distribution.
pub fn simulate_regime(params: &ModelParams, horizon: f64, seed: u64) -> RegimePath {
    let mut rng = rng::stream(seed, 0);
    let initial = sample_categorical(&params.nu0, &mut rng);
    sample_regime_path(params, horizon, initial, &mut rng)
}

/// How the true regime of a truth-mode simulation is produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegimeSource {
    /// Initial state drawn from `nu0`, then the chain with generator `Lambda`.
    Sample,
    /// Regime held fixed for the whole horizon.
    Pinned(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthOptions {
    pub horizon: f64,
    pub dt: f64,
    /// Initial price; defaults to `<mu, nu0>`.
    pub s0: Option<f64>,
    pub regime: RegimeSource,
    /// Record every `record_every`-th step (the last step is always kept).
    pub record_every: usize,
    /// Switches the Brownian increments off (deterministic diagnostics only).
    pub zero_noise: bool,
}

impl TruthOptions {
    pub fn new(horizon: f64, dt: f64) -> Self {
        Self {
            horizon,
            dt,
            s0: None,
            regime: RegimeSource::Sample,
            record_every: 1,
            zero_noise: false,
        }
    }
}

/// Recorded truth-mode path.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPath {
    pub times: Vec<f64>,
    pub prices: Vec<f64>,
    /// True regime (0-based) at each recorded time.
    pub regimes: Vec<usize>,
    pub filter: Vec<Vec<f64>>,
    /// Time average of `pi_1` over the whole horizon (left-endpoint rule).
    pub mean_pi1: f64,
    /// Smallest component and largest `|sum - 1|` seen over all steps.
    pub min_component: f64,
    pub max_sum_error: f64,
}

impl FilterPath {
    /// CSV with columns `t,S,Y,pi_1..pi_D`; `Y` is 1-based.
    pub fn write_csv<W: Write + ?Sized>(&self, out: &mut W) -> io::Result<()> {
        let d = self.filter.first().map_or(0, Vec::len);
        write!(out, "t,S,Y")?;
        for i in 1..=d {
            write!(out, ",pi_{i}")?;
        }
        writeln!(out)?;
        for k in 0..self.times.len() {
            write!(out, "{},{},{}", self.times[k], self.prices[k], self.regimes[k] + 1)?;
            for p in &self.filter[k] {
                write!(out, ",{p}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Simulates the true regime, the price under the true drift and the filter
/// driven by the observed innovations `dB = (dS - a_hat dt) / sigma`.
pub fn simulate_truth_and_filter<R: Rng + ?Sized>(
    params: &ModelParams,
    opts: &TruthOptions,
    rng: &mut R,
) -> FilterPath {
    assert!(opts.dt > 0.0 && opts.horizon > 0.0, "need dt > 0 and horizon > 0");
    let (initial, regime_path) = match opts.regime {
        RegimeSource::Sample => {
            let initial = sample_categorical(&params.nu0, rng);
            (initial, Some(sample_regime_path(params, opts.horizon, initial, rng)))
        }
        RegimeSource::Pinned(state) => (state, None),
    };
    let regime_at = |t: f64| regime_path.as_ref().map_or(initial, |p| p.state_at(t));

    let steps = (opts.horizon / opts.dt).round().max(1.0) as usize;
    let dt = opts.horizon / steps as f64;
    let sqrt_dt = dt.sqrt();
    let stride = opts.record_every.max(1);

    let mut s = opts.s0.unwrap_or_else(|| params.mean_level(&params.nu0));
    let mut pi = params.nu0.clone();
    let mut path = FilterPath {
        times: vec![0.0],
        prices: vec![s],
        regimes: vec![regime_at(0.0)],
        filter: vec![pi.clone()],
        mean_pi1: 0.0,
        min_component: pi.iter().copied().fold(f64::INFINITY, f64::min),
        max_sum_error: (pi.iter().sum::<f64>() - 1.0).abs(),
    };
    let mut pi1_sum = 0.0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let y = regime_at(t);
        pi1_sum += pi[0];
        let season = params.seasonality(t);
        let true_drift = params.kappa * (params.mu[y] + season - s);
        let filtered_drift = params.kappa * (params.mean_level(&pi) + season - s);
        let dw = if opts.zero_noise {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(rng);
            sqrt_dt * z
        };
        let ds = true_drift * dt + params.sigma * dw;
        let innovation = (ds - filtered_drift * dt) / params.sigma;
        s += ds;
        step_in_place(&mut pi, innovation, dt, params);
        let min = pi.iter().copied().fold(f64::INFINITY, f64::min);
        path.min_component = path.min_component.min(min);
        path.max_sum_error = path.max_sum_error.max((pi.iter().sum::<f64>() - 1.0).abs());
        if (k + 1) % stride == 0 || k + 1 == steps {
            let t_next = (k + 1) as f64 * dt;
            path.times.push(t_next);
            path.prices.push(s);
            path.regimes.push(regime_at(t_next));
            path.filter.push(pi.clone());
        }
    }
    path.mean_pi1 = pi1_sum / steps as f64;
    path
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn preset() -> ModelParams {
        ModelParams::paper2016()
    }

    fn frozen() -> ModelParams {
        let mut p = preset();
        p.lambda = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        p
    }

    #[test]
    fn conditional_drift_examples() {
        let p = preset();
        let half = FilterState::new(vec![0.5, 0.5]).unwrap();
        let top = FilterState::vertex(0, 2);
        assert_eq!(conditional_drift(40.0, &half, 0.0, &p), 0.0);
        assert_eq!(conditional_drift(50.0, &top, 0.3, &p), 0.0);
        assert_relative_eq!(conditional_drift(30.0, &top, 0.0, &p), 300.0);
    }

    #[test]
    fn symmetric_midpoint_has_no_drift() {
        let p = preset();
        let half = FilterState::new(vec![0.5, 0.5]).unwrap();
        let next = filter_step(&half, 0.0, 1e-3, &p);
        assert_eq!(next.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn innovation_loading_at_midpoint() {
        let p = preset();
        let loads = innovation_loadings(&[0.5, 0.5], &p);
        assert_relative_eq!(loads[0], 1.5, epsilon = 1e-12);
        assert_relative_eq!(loads[1], -1.5, epsilon = 1e-12);
        assert_relative_eq!(p.filter_vol2(0.5), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn vertex_is_absorbing_without_transitions() {
        let p = frozen();
        let top = FilterState::vertex(0, 2);
        for db in [-3.0, -0.1, 0.0, 0.7, 5.0] {
            assert_eq!(filter_step(&top, db, 1e-2, &p).probs(), &[1.0, 0.0]);
        }
    }

    #[test]
    fn vanishing_loadings_at_vertices() {
        let p = preset();
        for i in 0..2 {
            let v = FilterState::vertex(i, 2);
            assert!(innovation_loadings(v.probs(), &p).iter().all(|l| *l == 0.0));
        }
    }

    #[test]
    #[should_panic]
    fn non_positive_dt_is_rejected() {
        let p = preset();
        filter_step(&FilterState::from_prior(&p), 0.0, 0.0, &p);
    }

    #[test]
    fn overshoot_is_projected_to_simplex() {
        let p = preset();
        let s = FilterState::new(vec![0.02, 0.98]).unwrap();
        let next = filter_step(&s, -50.0, 1e-3, &p);
        assert!(next.probs().iter().all(|&x| x >= PROBABILITY_FLOOR * 0.5));
        assert!((next.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn frozen_chain_is_constant() {
        let p = frozen();
        let path = simulate_regime(&p, 10.0, 1);
        assert!(path.jumps.is_empty());
    }

    #[test]
    fn regime_path_queries() {
        let path = RegimePath {
            horizon: 5.0,
            initial: 0,
            jumps: vec![(1.0, 1), (3.5, 0)],
        };
        assert_eq!(path.state_at(0.5), 0);
        assert_eq!(path.state_at(1.0), 1);
        assert_eq!(path.state_at(4.0), 0);
        assert_relative_eq!(path.occupation_time(0), 2.5);
        assert_relative_eq!(path.occupation_time(1), 2.5);
        assert_eq!(path.holding_times(), vec![(0, 1.0), (1, 2.5)]);
    }

    #[test]
    fn mean_holding_time_matches_rate() {
        let p = preset();
        let mut rng = rng::stream(11, 0);
        let path = sample_regime_path(&p, 20_000.0, 0, &mut rng);
        let holds: Vec<f64> = path
            .holding_times()
            .into_iter()
            .filter(|(s, _)| *s == 0)
            .map(|(_, h)| h)
            .collect();
        let (mean, se) = rng::mean_and_stderr(&holds);
        assert!((mean - 2.0).abs() < 3.0 * se, "mean {mean} se {se}");
        let frac = path.occupation_time(0) / path.horizon;
        assert!((frac - 0.5).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn pinned_noise_free_price_stays_at_level() {
        let p = frozen();
        let opts = TruthOptions {
            s0: Some(50.0),
            regime: RegimeSource::Pinned(0),
            zero_noise: true,
            ..TruthOptions::new(2.0, 1e-3)
        };
        let mut p1 = p.clone();
        p1.nu0 = vec![1.0 - 1e-12, 1e-12];
        let path = simulate_truth_and_filter(&p1, &opts, &mut rng::stream(0, 0));
        assert!(path.prices.iter().all(|&s| (s - 50.0).abs() < 1e-12));
    }

    #[test]
    fn frozen_chain_keeps_filter_on_vertex() {
        let mut p = frozen();
        p.nu0 = vec![1.0, 0.0];
        let opts = TruthOptions {
            regime: RegimeSource::Pinned(0),
            ..TruthOptions::new(1.0, 1e-3)
        };
        let path = simulate_truth_and_filter(&p, &opts, &mut rng::stream(3, 0));
        assert!(path.filter.iter().all(|pi| pi[0] == 1.0));
    }

    #[test]
    fn csv_header_and_rows() {
        let p = preset();
        let opts = TruthOptions {
            record_every: 100,
            ..TruthOptions::new(0.5, 1e-3)
        };
        let path = simulate_truth_and_filter(&p, &opts, &mut rng::stream(5, 0));
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,S,Y,pi_1,pi_2"));
        assert_eq!(lines.count(), path.times.len());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn step_preserves_simplex(p1 in 0.0f64..=1.0, db in -5.0f64..5.0, dt in 1e-5f64..0.1) {
                let p = ModelParams::paper2016();
                let next = step2(p1, db, dt, &p);
                prop_assert!((0.0..=1.0).contains(&next));
                let mut pi = [p1, 1.0 - p1];
                step_in_place(&mut pi, db, dt, &p);
                prop_assert!(pi.iter().all(|&x| x >= 0.0));
                prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }

            #[test]
            fn drift_is_affine_in_price(s in -100.0f64..200.0, p1 in 0.0f64..=1.0) {
                let p = ModelParams::paper2016();
                let pi = FilterState::new(vec![p1, 1.0 - p1]).unwrap();
                let slope = conditional_drift(s + 1.0, &pi, 0.0, &p) - conditional_drift(s, &pi, 0.0, &p);
                prop_assert!((slope + p.kappa).abs() < 1e-9);
            }
        }
    }
}
