//! Market, regime, cost and capacity constants of the storage problem, together
//! with the reward functions and the admissible charging-rate envelope.
//!
//! Everything in here is a pure function of an immutable [`ModelParams`].

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ParamError;

/// Name of the embedded parameter preset used throughout the numerical study.
pub const PAPER_PRESET: &str = "paper2016";

/// Cosine seasonal component `K(t) = K_S cos(2π(t - t_S)/Δ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seasonality {
    #[serde(rename = "K_S")]
    pub amplitude: f64,
    #[serde(rename = "t_S")]
    pub peak_time: f64,
    #[serde(rename = "Delta")]
    pub season_length: f64,
}

/// All constants of the model. Serialized with the conventional symbol names
/// (`kappa`, `Lambda`, `cS`, `M_u`, ...) as one flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Mean-reversion speed (1/year).
    pub kappa: f64,
    /// Regime mean-reversion levels, strictly decreasing.
    pub mu: Vec<f64>,
    /// Price volatility (price/sqrt(year)).
    pub sigma: f64,
    /// Generator of the hidden chain (1/year), row-major.
    #[serde(rename = "Lambda")]
    pub lambda: Vec<Vec<f64>>,
    /// Discount rate (1/year).
    pub rho: f64,
    /// Planning horizon (years).
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Initial regime distribution.
    pub nu0: Vec<f64>,
    pub d_plus: f64,
    pub d_minus: f64,
    /// Storage cost per unit stored per year.
    pub c0: f64,
    /// Scrap rate applied on terminal liquidation.
    #[serde(rename = "cS")]
    pub scrap_rate: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    /// Maximal charge/discharge rate (energy/year).
    #[serde(rename = "M_u")]
    pub max_rate: f64,
    /// Width of the smooth ramps of the rate envelope at the capacity limits.
    pub ramp_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seasonality: Option<Seasonality>,
}

impl ModelParams {
    /// The two-regime parameter set of the numerical study.
    pub fn paper2016() -> Self {
        Self {
            kappa: 15.0,
            mu: vec![50.0, 30.0],
            sigma: 50.0,
            lambda: vec![vec![-0.5, 0.5], vec![0.5, -0.5]],
            rho: 0.05,
            horizon: 1.0,
            nu0: vec![0.5, 0.5],
            d_plus: 10.0,
            d_minus: 10.0,
            c0: 0.0,
            scrap_rate: 0.95,
            q_lo: 0.0,
            q_hi: 100.0,
            max_rate: 730.0,
            ramp_width: 5.0,
            seasonality: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self, ParamError> {
        match name {
            PAPER_PRESET => Ok(Self::paper2016()),
            other => Err(ParamError::UnknownPreset(other.to_string())),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, ParamError> {
        let params: Self =
            serde_json::from_str(text).map_err(|e| ParamError::Parse(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ParamError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ParamError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Number of hidden regimes.
    pub fn regimes(&self) -> usize {
        self.mu.len()
    }

    /// Checks every invariant and reports the first offending field.
    pub fn validate(&self) -> Result<(), ParamError> {
        fn bad(field: &'static str, reason: impl Into<String>) -> ParamError {
            ParamError::Invalid {
                field,
                reason: reason.into(),
            }
        }
        let finite = [
            ("kappa", self.kappa),
            ("sigma", self.sigma),
            ("rho", self.rho),
            ("T", self.horizon),
            ("d_plus", self.d_plus),
            ("d_minus", self.d_minus),
            ("c0", self.c0),
            ("cS", self.scrap_rate),
            ("q_lo", self.q_lo),
            ("q_hi", self.q_hi),
            ("M_u", self.max_rate),
            ("ramp_width", self.ramp_width),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(bad(name, "must be finite"));
            }
        }
        if self.kappa <= 0.0 {
            return Err(bad("kappa", "must be > 0"));
        }
        if self.sigma <= 0.0 {
            return Err(bad("sigma", "must be > 0"));
        }
        let d = self.mu.len();
        if d == 0 {
            return Err(bad("mu", "needs at least one regime"));
        }
        if self.mu.windows(2).any(|w| w[0] <= w[1]) || self.mu.iter().any(|m| !m.is_finite()) {
            return Err(bad("mu", "must be finite and strictly decreasing"));
        }
        if self.lambda.len() != d || self.lambda.iter().any(|row| row.len() != d) {
            return Err(bad("Lambda", format!("must be a {d}x{d} matrix")));
        }
        for (i, row) in self.lambda.iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(bad("Lambda", "entries must be finite"));
            }
            if row.iter().enumerate().any(|(j, &v)| j != i && v < 0.0) {
                return Err(bad("Lambda", format!("row {i} has a negative off-diagonal")));
            }
            let sum: f64 = row.iter().sum();
            let scale = row.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            if sum.abs() > 1e-12 * scale {
                return Err(bad("Lambda", format!("row {i} sums to {sum}, not 0")));
            }
        }
        if self.nu0.len() != d {
            return Err(bad("nu0", format!("must have {d} entries")));
        }
        if self.nu0.iter().any(|&p| !(p > 0.0)) {
            return Err(bad("nu0", "entries must be > 0"));
        }
        if (self.nu0.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(bad("nu0", "must sum to 1"));
        }
        if !(self.scrap_rate > 0.0 && self.scrap_rate < 1.0) {
            return Err(bad("cS", "must lie in (0, 1)"));
        }
        if self.d_plus < 0.0 {
            return Err(bad("d_plus", "must be >= 0"));
        }
        if self.d_minus < 0.0 {
            return Err(bad("d_minus", "must be >= 0"));
        }
        if self.c0 < 0.0 {
            return Err(bad("c0", "must be >= 0"));
        }
        if self.q_lo < 0.0 || self.q_lo >= self.q_hi {
            return Err(bad("q_lo", "need 0 <= q_lo < q_hi"));
        }
        // M_u = 0 is accepted: it is the uncontrolled reference problem.
        if self.max_rate < 0.0 {
            return Err(bad("M_u", "must be >= 0"));
        }
        if !(self.ramp_width > 0.0 && self.ramp_width <= 0.5 * (self.q_hi - self.q_lo)) {
            return Err(bad("ramp_width", "need 0 < ramp_width <= (q_hi - q_lo)/2"));
        }
        if self.rho <= 0.0 {
            return Err(bad("rho", "must be > 0"));
        }
        if self.horizon <= 0.0 {
            return Err(bad("T", "must be > 0"));
        }
        if let Some(season) = &self.seasonality {
            if !(season.season_length > 0.0) {
                return Err(bad("seasonality", "Delta must be > 0"));
            }
            if !season.amplitude.is_finite() || !season.peak_time.is_finite() {
                return Err(bad("seasonality", "K_S and t_S must be finite"));
            }
        }
        Ok(())
    }

    /// Seasonal offset of the equilibrium price.
    pub fn seasonality(&self, t: f64) -> f64 {
        match &self.seasonality {
            None => 0.0,
            Some(k) => k.amplitude * (2.0 * PI * (t - k.peak_time) / k.season_length).cos(),
        }
    }

    /// Reward rate `F(s, q, u)`: purchases pay `s + d_plus`, sales earn
    /// `s - d_minus`, storage costs `c0 q`.
    pub fn running_reward(&self, s: f64, q: f64, u: f64) -> f64 {
        debug_assert!(self.in_capacity(q), "level {q} outside capacity");
        debug_assert!(
            u.abs() <= self.max_rate * (1.0 + 1e-12),
            "rate {u} exceeds max rate"
        );
        if u >= 0.0 {
            -u * (s + self.d_plus) - self.c0 * q
        } else {
            -u * (s - self.d_minus) - self.c0 * q
        }
    }

    /// Liquidation value `q (c_S s - d_minus)` of the terminal inventory.
    pub fn terminal_reward(&self, s: f64, q: f64) -> f64 {
        debug_assert!(self.in_capacity(q), "level {q} outside capacity");
        q * (self.scrap_rate * s - self.d_minus)
    }

    /// Admissible rate interval `[u_min(q), u_max(q)]`.
    ///
    /// Both ends plateau at `∓M_u` and ramp to zero at the respective capacity
    /// limit through a quintic smoothstep of width `ramp_width`, which makes them
    /// C² in `q`.
    pub fn rate_bounds(&self, q: f64) -> (f64, f64) {
        assert!(
            self.in_capacity(q),
            "level {q} outside [{}, {}]",
            self.q_lo,
            self.q_hi
        );
        let u_max = self.max_rate * smoothstep5((self.q_hi - q) / self.ramp_width);
        let u_min = -self.max_rate * smoothstep5((q - self.q_lo) / self.ramp_width);
        (u_min, u_max)
    }

    pub fn in_capacity(&self, q: f64) -> bool {
        let slack = 1e-9 * (self.q_hi - self.q_lo);
        q >= self.q_lo - slack && q <= self.q_hi + slack
    }

    /// Regime-weighted mean level `<mu, pi>`.
    pub fn mean_level(&self, pi: &[f64]) -> f64 {
        self.mu.iter().zip(pi).map(|(m, p)| m * p).sum()
    }

    /// Two-regime mean level at filter value `nu1`.
    pub fn mean_level2(&self, nu1: f64) -> f64 {
        self.mu[0] * nu1 + self.mu[1] * (1.0 - nu1)
    }

    /// Drift of the first filter coordinate in the two-regime reduction,
    /// `lambda_11 nu + lambda_21 (1 - nu)`.
    pub fn filter_drift2(&self, nu1: f64) -> f64 {
        self.lambda[0][0] * nu1 + self.lambda[1][0] * (1.0 - nu1)
    }

    /// Diffusion coefficient of the first filter coordinate in the two-regime
    /// reduction, `(kappa/sigma)(mu_1 - mu_2) nu (1 - nu)`.
    pub fn filter_vol2(&self, nu1: f64) -> f64 {
        self.kappa / self.sigma * (self.mu[0] - self.mu[1]) * nu1 * (1.0 - nu1)
    }

    /// Stationary standard deviation `sigma / sqrt(2 kappa)` of the price around its level.
    pub fn stationary_std(&self) -> f64 {
        self.sigma / (2.0 * self.kappa).sqrt()
    }
}

/// Quintic smoothstep `6x⁵ - 15x⁴ + 10x³` on `x` clipped to `[0, 1]`.
pub fn smoothstep5(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn preset() -> ModelParams {
        ModelParams::paper2016()
    }

    #[test]
    fn preset_is_valid() {
        preset().validate().unwrap();
        assert_eq!(ModelParams::preset("paper2016").unwrap(), preset());
        assert!(ModelParams::preset("nope").is_err());
    }

    #[test]
    fn seasonality_values() {
        let mut p = preset();
        assert_eq!(p.seasonality(0.3), 0.0);
        p.seasonality = Some(Seasonality {
            amplitude: 7.0,
            peak_time: 0.25,
            season_length: 1.0,
        });
        assert_relative_eq!(p.seasonality(0.25), 7.0);
        assert!(p.seasonality(0.5).abs() < 1e-12);
        for t in [0.0, 0.1, 0.37, 0.9] {
            assert_relative_eq!(p.seasonality(t), p.seasonality(t + 1.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn running_reward_examples() {
        let p = preset();
        assert_eq!(p.running_reward(42.0, 10.0, 0.0), 0.0);
        assert_relative_eq!(p.running_reward(30.0, 50.0, 100.0), -4000.0);
        assert_relative_eq!(p.running_reward(50.0, 50.0, -100.0), 4000.0);
        let mut costly = p.clone();
        costly.c0 = 2.0;
        assert_relative_eq!(costly.running_reward(30.0, 50.0, 0.0), -100.0);
    }

    #[test]
    fn running_reward_has_concave_kink_at_zero() {
        let p = preset();
        let h = 1e-3;
        let right = (p.running_reward(40.0, 50.0, h) - p.running_reward(40.0, 50.0, 0.0)) / h;
        let left = (p.running_reward(40.0, 50.0, 0.0) - p.running_reward(40.0, 50.0, -h)) / h;
        assert_relative_eq!(right - left, -(p.d_plus + p.d_minus), epsilon = 1e-9);
    }

    #[test]
    fn terminal_reward_examples() {
        let p = preset();
        assert_eq!(p.terminal_reward(123.0, 0.0), 0.0);
        assert_relative_eq!(p.terminal_reward(50.0, 100.0), 3750.0);
        let q1 = 20.0;
        let q2 = 35.0;
        assert_relative_eq!(
            p.terminal_reward(41.0, q1) + p.terminal_reward(41.0, q2),
            p.terminal_reward(41.0, q1 + q2),
            epsilon = 1e-9
        );
    }

    #[test]
    fn rate_bounds_endpoints_and_plateau() {
        let p = preset();
        assert_eq!(p.rate_bounds(p.q_hi).1, 0.0);
        assert_eq!(p.rate_bounds(p.q_lo).0, 0.0);
        let (lo, hi) = p.rate_bounds(50.0);
        assert_eq!(lo, -p.max_rate);
        assert_eq!(hi, p.max_rate);
        let (lo, hi) = p.rate_bounds(p.q_hi);
        assert_eq!(lo, -p.max_rate);
        assert_eq!(hi, 0.0);
    }

    #[test]
    #[should_panic]
    fn rate_bounds_rejects_out_of_capacity() {
        preset().rate_bounds(100.5);
    }

    #[test]
    fn validation_names_offending_field() {
        let mut p = preset();
        p.mu = vec![30.0, 50.0];
        match p.validate() {
            Err(ParamError::Invalid { field, .. }) => assert_eq!(field, "mu"),
            other => panic!("unexpected {other:?}"),
        }
        let mut p = preset();
        p.lambda[0][1] = 0.7;
        assert!(matches!(p.validate(), Err(ParamError::Invalid { field: "Lambda", .. })));
        let mut p = preset();
        p.scrap_rate = 1.0;
        assert!(matches!(p.validate(), Err(ParamError::Invalid { field: "cS", .. })));
        let mut p = preset();
        p.ramp_width = 60.0;
        assert!(matches!(
            p.validate(),
            Err(ParamError::Invalid { field: "ramp_width", .. })
        ));
    }

    #[test]
    fn json_round_trip_uses_symbol_names() {
        let p = preset();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"Lambda\""));
        assert!(text.contains("\"M_u\""));
        assert_eq!(ModelParams::from_json_str(&text).unwrap(), p);
        assert!(ModelParams::from_json_str("{\"kappa\": 1}").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rate_bounds_envelope(q in 0.0f64..=100.0) {
                let p = ModelParams::paper2016();
                let (lo, hi) = p.rate_bounds(q);
                prop_assert!(-p.max_rate <= lo && lo <= 0.0);
                prop_assert!(0.0 <= hi && hi <= p.max_rate);
            }

            #[test]
            fn rate_bounds_lipschitz(q in 0.0f64..=100.0, dq in -3.0f64..3.0) {
                let p = ModelParams::paper2016();
                let q2 = (q + dq).clamp(p.q_lo, p.q_hi);
                let l = 2.0 * p.max_rate / p.ramp_width;
                let (lo1, hi1) = p.rate_bounds(q);
                let (lo2, hi2) = p.rate_bounds(q2);
                prop_assert!((hi1 - hi2).abs() <= l * (q - q2).abs() + 1e-9);
                prop_assert!((lo1 - lo2).abs() <= l * (q - q2).abs() + 1e-9);
            }

            #[test]
            fn seasonality_periodic(t in 0.0f64..5.0, amp in -20.0f64..20.0, peak in 0.0f64..1.0, len in 0.2f64..2.0) {
                let mut p = ModelParams::paper2016();
                p.seasonality = Some(Seasonality { amplitude: amp, peak_time: peak, season_length: len });
                prop_assert!((p.seasonality(t) - p.seasonality(t + len)).abs() < 1e-9);
            }
        }
    }
}
