//! One-dimensional convection–diffusion stencils and the tridiagonal solver
//! used by the splitting scheme.

/// Three-point operator `(A v)_i = lower_i v_{i-1} + diag_i v_i + upper_i v_{i+1}`.
#[derive(Debug, Clone, PartialEq)]
pub(super) struct Tridiag {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiag {
    /// Discretizes `a(x) v' + d(x) v''` on a uniform line with spacing `h`.
    ///
    /// Inside, central differences are used while the cell Peclet number
    /// `|a| h / d` stays at most 2 and upwinding beyond, so every row has
    /// nonnegative off-diagonals. The end rows drop the second-order term and
    /// take an inward one-sided difference when the drift points inward; an
    /// outward drift there leaves the row empty.
    pub fn convection_diffusion(n: usize, h: f64, drift: impl Fn(usize) -> f64, diffusion: impl Fn(usize) -> f64) -> Self {
        let mut op = Self {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
        };
        for i in 1..n - 1 {
            let (a, d) = (drift(i), diffusion(i));
            let (lo, up) = if a.abs() * h <= 2.0 * d {
                (d / (h * h) - a / (2.0 * h), d / (h * h) + a / (2.0 * h))
            } else {
                (d / (h * h) + (-a).max(0.0) / h, d / (h * h) + a.max(0.0) / h)
            };
            op.lower[i] = lo;
            op.upper[i] = up;
            op.diag[i] = -(lo + up);
        }
        let a0 = drift(0);
        if a0 > 0.0 {
            op.upper[0] = a0 / h;
            op.diag[0] = -a0 / h;
        }
        let an = drift(n - 1);
        if an < 0.0 {
            op.lower[n - 1] = -an / h;
            op.diag[n - 1] = an / h;
        }
        op
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    /// `out_i = (A v)_i` for a line read with `stride` starting at `v[0]`.
    pub fn apply_strided(&self, v: &[f64], stride: usize, out: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let mut acc = self.diag[i] * v[i * stride];
            if i > 0 {
                acc += self.lower[i] * v[(i - 1) * stride];
            }
            if i + 1 < n {
                acc += self.upper[i] * v[(i + 1) * stride];
            }
            out[i * stride] = acc;
        }
    }

    /// Solves `(I - dt A) x = rhs` in place on a strided line (Thomas algorithm).
    /// `scratch` needs `len()` entries.
    pub fn solve_implicit_strided(&self, dt: f64, line: &mut [f64], stride: usize, scratch: &mut [f64]) {
        let n = self.len();
        let b0 = 1.0 - dt * self.diag[0];
        scratch[0] = -dt * self.upper[0] / b0;
        line[0] /= b0;
        for i in 1..n {
            let a = -dt * self.lower[i];
            let b = 1.0 - dt * self.diag[i];
            let denom = b - a * scratch[i - 1];
            scratch[i] = if i + 1 < n { -dt * self.upper[i] / denom } else { 0.0 };
            line[i * stride] = (line[i * stride] - a * line[(i - 1) * stride]) / denom;
        }
        for i in (0..n - 1).rev() {
            line[i * stride] -= scratch[i] * line[(i + 1) * stride];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_on_linear_functions() {
        let h = 0.5;
        let op = Tridiag::convection_diffusion(9, h, |i| 3.0 - i as f64, |_| 0.7);
        let v: Vec<f64> = (0..9).map(|i| 2.0 + 4.0 * h * i as f64).collect();
        let mut out = vec![0.0; 9];
        op.apply_strided(&v, 1, &mut out);
        for i in 0..9 {
            let a = 3.0 - i as f64;
            let expected = if (i == 0 && a <= 0.0) || (i == 8 && a >= 0.0) { 0.0 } else { a * 4.0 };
            assert_relative_eq!(out[i], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn rows_are_monotone() {
        let op = Tridiag::convection_diffusion(50, 0.1, |i| 40.0 - 2.0 * i as f64, |i| 0.01 * i as f64);
        for i in 0..50 {
            assert!(op.lower[i] >= 0.0 && op.upper[i] >= 0.0);
            assert!((op.lower[i] + op.diag[i] + op.upper[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn implicit_solve_inverts_operator() {
        let op = Tridiag::convection_diffusion(7, 1.0, |i| i as f64 - 3.0, |_| 2.0);
        let x: Vec<f64> = (0..7).map(|i| ((i * i) as f64).sin()).collect();
        let dt = 0.3;
        let mut ax = vec![0.0; 7];
        op.apply_strided(&x, 1, &mut ax);
        let mut rhs: Vec<f64> = x.iter().zip(&ax).map(|(x, a)| x - dt * a).collect();
        let mut scratch = vec![0.0; 7];
        op.solve_implicit_strided(dt, &mut rhs, 1, &mut scratch);
        for (a, b) in rhs.iter().zip(&x) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn strided_solve_matches_contiguous() {
        let op = Tridiag::convection_diffusion(5, 0.2, |_| 1.0, |_| 0.3);
        let mut a = vec![1.0, -2.0, 0.5, 4.0, 3.0];
        let mut b = vec![0.0; 15];
        for i in 0..5 {
            b[i * 3] = a[i];
        }
        let mut scratch = vec![0.0; 5];
        op.solve_implicit_strided(0.1, &mut a, 1, &mut scratch);
        op.solve_implicit_strided(0.1, &mut b, 3, &mut scratch);
        for i in 0..5 {
            assert_eq!(a[i], b[i * 3]);
        }
    }
}
