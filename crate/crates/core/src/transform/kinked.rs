use serde::{Deserialize, Serialize};

use super::{DiscontinuousSde, Side, SurfaceJet};

/// Scalar test problem `dX = (-kappa X - kink sign(X)) dt + sigma dW`.
///
/// A positive `kink` pushes towards the origin from both sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinkedOu {
    pub kappa: f64,
    pub kink: f64,
    pub sigma: f64,
    pub x0: f64,
    pub horizon: f64,
}

impl Default for KinkedOu {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            kink: 2.0,
            sigma: 1.0,
            x0: 0.5,
            horizon: 1.0,
        }
    }
}

impl DiscontinuousSde for KinkedOu {
    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, side: Side, x: &[f64], _t: f64, out: &mut [f64]) {
        let push = match side {
            Side::Plus => -self.kink,
            Side::Minus => self.kink,
        };
        out[0] = -self.kappa * x[0] + push;
    }

    fn diffusion(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.sigma;
    }

    fn surface(&self, _rest: &[f64], _t: f64) -> SurfaceJet {
        SurfaceJet::flat()
    }
}
