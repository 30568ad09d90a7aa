//! The controlled storage system `(S, Q, nu1)` under a threshold policy, split
//! into one discontinuous SDE per switching level.

use serde::Serialize;

use super::{DiscontinuousSde, Side, SurfaceJet, MAX_DIM};
use crate::barriers::{check_smooth, SmoothBarriers, TensorPoly};
use crate::error::BarrierError;
use crate::hjb::Mode;
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    /// Buy below the level, wait above.
    Buy,
    /// Sell at or above the level, wait below.
    Sell,
}

/// The storage system near one switching level `s = b(q, nu1, t)`.
///
/// With `track_reward` the state gains a fourth coordinate accumulating
/// `e^{-rho t} F(s, q, u)`, whose drift jumps across the level together with
/// the trading rate.
#[derive(Debug, Clone)]
pub struct StorageSurface {
    pub params: ModelParams,
    pub level: TensorPoly,
    pub kind: SurfaceKind,
    pub track_reward: bool,
}

impl StorageSurface {
    /// Mode on the given side of this level.
    pub fn mode(&self, side: Side) -> Mode {
        match (self.kind, side) {
            (SurfaceKind::Buy, Side::Minus) => Mode::Buy,
            (SurfaceKind::Sell, Side::Plus) => Mode::Sell,
            _ => Mode::Wait,
        }
    }
}

/// Drift of `(S, Q, nu1)` when trading in `mode`. The level is clamped to
/// capacity before evaluating the rate envelope.
pub fn system_drift(params: &ModelParams, mode: Mode, x: &[f64], t: f64, out: &mut [f64]) {
    let (s, q, nu) = (x[0], x[1], x[2]);
    out[0] = params.kappa * (params.mean_level2(nu) + params.seasonality(t) - s);
    out[1] = mode.rate(params.rate_bounds(q.clamp(params.q_lo, params.q_hi)));
    out[2] = params.filter_drift2(nu);
}

/// Diffusion column `(sigma, 0, (kappa/sigma)(mu_1 - mu_2) nu1 (1 - nu1))`.
pub fn system_diffusion(params: &ModelParams, x: &[f64], out: &mut [f64]) {
    out[0] = params.sigma;
    out[1] = 0.0;
    out[2] = params.filter_vol2(x[2]);
}

impl DiscontinuousSde for StorageSurface {
    fn dim(&self) -> usize {
        if self.track_reward {
            4
        } else {
            3
        }
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, side: Side, x: &[f64], t: f64, out: &mut [f64]) {
        let mode = self.mode(side);
        system_drift(&self.params, mode, x, t, out);
        if self.track_reward {
            let p = &self.params;
            let q = x[1].clamp(p.q_lo, p.q_hi);
            out[3] = (-p.rho * t).exp() * p.running_reward(x[0], q, mode.rate(p.rate_bounds(q)));
        }
    }

    fn diffusion(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        system_diffusion(&self.params, x, out);
        if self.track_reward {
            out[3] = 0.0;
        }
    }

    fn surface(&self, rest: &[f64], t: f64) -> SurfaceJet {
        let jet = self.level.jet(rest[0], rest[1], t);
        let mut out = SurfaceJet::flat();
        out.h = jet.value;
        out.grad[..2].copy_from_slice(&jet.grad[..2]);
        out.dt = jet.grad[2];
        for j in 0..2 {
            out.hess[j][..2].copy_from_slice(&jet.hess[j][..2]);
        }
        out
    }

    fn side(&self, f: f64) -> Side {
        let plus = match self.kind {
            SurfaceKind::Buy => f > 0.0,
            SurfaceKind::Sell => f >= 0.0,
        };
        if plus {
            Side::Plus
        } else {
            Side::Minus
        }
    }

    fn project(&self, x: &mut [f64]) {
        x[1] = x[1].clamp(self.params.q_lo, self.params.q_hi);
        x[2] = x[2].clamp(0.0, 1.0);
    }

    fn passive(&self, k: usize) -> bool {
        self.track_reward && k == 3
    }
}

/// Both level systems and the pasting surface `s = (b_buy + b_sell) / 2`
/// that decides which of them governs a state.
#[derive(Debug, Clone)]
pub struct StorageSystem {
    pub buy: StorageSurface,
    pub sell: StorageSurface,
}

impl StorageSystem {
    /// The same system with the discounted reward appended to the state.
    pub fn with_reward_tracking(mut self) -> Self {
        self.buy.track_reward = true;
        self.sell.track_reward = true;
        self
    }

    pub fn pasting_level(&self, q: f64, nu1: f64, t: f64) -> f64 {
        0.5 * (self.buy.level.eval(q, nu1, t) + self.sell.level.eval(q, nu1, t))
    }

    /// The level system in charge of `x = (s, q, nu1)` at time `t`.
    pub fn governing(&self, x: &[f64], t: f64) -> &StorageSurface {
        if x[0] < self.pasting_level(x[1], x[2], t) {
            &self.buy
        } else {
            &self.sell
        }
    }

    /// Mode of the threshold rule; agrees with [`SmoothBarriers::classify`].
    pub fn mode(&self, x: &[f64], t: f64) -> Mode {
        let sys = self.governing(x, t);
        let f = x[0] - sys.level.eval(x[1], x[2], t);
        sys.mode(sys.side(f))
    }
}

const _: () = assert!(MAX_DIM >= 4);

/// Builds the storage system from smoothed levels after checking, on the
/// lattice `q x nu x t`, that the levels stay apart and that the price noise
/// crosses both surfaces with a positive normal component.
pub fn storage_system_spec(params: &ModelParams, smooth: &SmoothBarriers, q: &[f64], nu: &[f64], t: &[f64]) -> Result<StorageSystem, BarrierError> {
    let check = check_smooth(smooth, params, q, nu, t);
    if !(check.min_gap > 0.0) {
        let [qq, nn, tt] = check.gap_at;
        return Err(BarrierError::Crossing {
            q: qq,
            nu1: nn,
            t: tt,
            buy: smooth.buy.poly.eval(qq, nn, tt),
            sell: smooth.sell.poly.eval(qq, nn, tt),
        });
    }
    if !(check.min_signed_margin > 0.0) {
        let [qq, nn, tt] = check.margin_at;
        return Err(BarrierError::NonParallel {
            q: qq,
            nu1: nn,
            t: tt,
            margin: check.min_signed_margin,
        });
    }
    let surface = |level: &TensorPoly, kind| StorageSurface {
        params: params.clone(),
        level: level.clone(),
        kind,
        track_reward: false,
    };
    Ok(StorageSystem {
        buy: surface(&smooth.buy.poly, SurfaceKind::Buy),
        sell: surface(&smooth.sell.poly, SurfaceKind::Sell),
    })
}
