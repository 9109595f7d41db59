//! Dormand–Prince 5(4) embedded Runge–Kutta integrator with adaptive step
//! control, for complex state vectors.

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            max_steps: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th- and 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Adaptive integrator for `y' = f(t, y)`. The last accepted step size is
/// kept so that consecutive calls continue smoothly.
pub struct Dopri5<F> {
    rhs: F,
    opts: OdeOptions,
    h: Option<f64>,
    k: [Vec<Complex64>; 7],
    tmp: Vec<Complex64>,
    y_new: Vec<Complex64>,
    pub stats: OdeStats,
}

impl<F> Dopri5<F>
where
    F: FnMut(f64, &[Complex64], &mut [Complex64]),
{
    pub fn new(rhs: F, dim: usize, opts: OdeOptions) -> Self {
        let zero = vec![Complex64::new(0.0, 0.0); dim];
        Self {
            rhs,
            opts,
            h: None,
            k: std::array::from_fn(|_| zero.clone()),
            tmp: zero.clone(),
            y_new: zero,
            stats: OdeStats::default(),
        }
    }

    fn weighted_norm(&self, y: &[Complex64], v: &[Complex64], w: &[Complex64]) -> f64 {
        let n = y.len().max(1) as f64;
        let sum: f64 = y
            .iter()
            .zip(v)
            .zip(w)
            .map(|((yi, vi), wi)| {
                let sc = self.opts.abs_tol + self.opts.rel_tol * yi.norm().max(wi.norm());
                (vi.norm() / sc).powi(2)
            })
            .sum();
        (sum / n).sqrt()
    }

    fn initial_step(&mut self, t: f64, y: &[Complex64], span: f64) -> f64 {
        (self.rhs)(t, y, &mut self.k[0]);
        let d0 = self.weighted_norm(y, y, y);
        let d1 = self.weighted_norm(y, &self.k[0], y);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        for i in 0..y.len() {
            self.tmp[i] = y[i] + self.k[0][i] * h0;
        }
        (self.rhs)(t + h0, &self.tmp, &mut self.k[1]);
        let diff: Vec<Complex64> = self.k[1].iter().zip(&self.k[0]).map(|(a, b)| a - b).collect();
        let d2 = self.weighted_norm(y, &diff, y) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(span)
    }

    /// Advance `y` from `t0` to `t1` in place.
    pub fn integrate(&mut self, t0: f64, y: &mut [Complex64], t1: f64) -> Result<()> {
        let span = t1 - t0;
        if span == 0.0 {
            return Ok(());
        }
        if !(span > 0.0) {
            return Err(Error::Integrator {
                t_reached: t0,
                reason: format!("cannot integrate backwards to {t1}"),
            });
        }
        let mut t = t0;
        let mut h = match self.h {
            Some(h) => h.min(span),
            None => self.initial_step(t, y, span),
        };
        (self.rhs)(t, y, &mut self.k[0]);
        let mut steps = 0usize;

        while t < t1 {
            steps += 1;
            if steps > self.opts.max_steps {
                return Err(Error::Integrator {
                    t_reached: t,
                    reason: "step budget exhausted".into(),
                });
            }
            // Absorb a remainder too small to step over.
            let last = t + h >= t1 - 1e-12 * t1.abs().max(1.0);
            if last {
                h = t1 - t;
            }
            if !(h > 1e-14 * t.abs().max(1.0)) || !h.is_finite() {
                return Err(Error::Integrator {
                    t_reached: t,
                    reason: format!("step size underflow (h = {h:e})"),
                });
            }

            self.stages(t, y, h);
            let mut err = vec![Complex64::new(0.0, 0.0); y.len()];
            for i in 0..y.len() {
                err[i] = (self.k[0][i] * E1
                    + self.k[2][i] * E3
                    + self.k[3][i] * E4
                    + self.k[4][i] * E5
                    + self.k[5][i] * E6
                    + self.k[6][i] * E7)
                    * h;
            }
            let err_norm = self.weighted_norm(y, &err, &self.y_new);
            if !err_norm.is_finite() {
                return Err(Error::Integrator {
                    t_reached: t,
                    reason: "non-finite error estimate".into(),
                });
            }

            if err_norm <= 1.0 {
                self.stats.accepted += 1;
                t = if last { t1 } else { t + h };
                y.copy_from_slice(&self.y_new);
                self.k.swap(0, 6);
                let factor = if err_norm == 0.0 { 5.0 } else { (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0) };
                if !last {
                    h *= factor;
                    self.h = Some(h);
                } else {
                    // Don't let a truncated final step shrink the next call.
                    self.h = Some(self.h.unwrap_or(h).max(h * factor));
                }
            } else {
                self.stats.rejected += 1;
                h *= (0.9 * err_norm.powf(-0.2)).clamp(0.1, 1.0);
            }
        }
        Ok(())
    }

    fn stages(&mut self, t: f64, y: &[Complex64], h: f64) {
        let n = y.len();
        macro_rules! stage {
            ($out:expr, $c:expr, [$(($idx:expr, $a:expr)),*]) => {{
                for i in 0..n {
                    let mut acc = y[i];
                    $( acc += self.k[$idx][i] * ($a * h); )*
                    self.tmp[i] = acc;
                }
                (self.rhs)(t + $c * h, &self.tmp, &mut self.k[$out]);
            }};
        }
        stage!(1, C2, [(0, A21)]);
        stage!(2, C3, [(0, A31), (1, A32)]);
        stage!(3, C4, [(0, A41), (1, A42), (2, A43)]);
        stage!(4, C5, [(0, A51), (1, A52), (2, A53), (3, A54)]);
        stage!(5, 1.0, [(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)]);
        for i in 0..n {
            self.y_new[i] = y[i]
                + (self.k[0][i] * B1 + self.k[2][i] * B3 + self.k[3][i] * B4 + self.k[4][i] * B5 + self.k[5][i] * B6) * h;
        }
        (self.rhs)(t + h, &self.y_new, &mut self.k[6]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_and_rotation() {
        let lambda = Complex64::new(-0.7, 2.3);
        let mut solver = Dopri5::new(
            move |_t, y: &[Complex64], dy: &mut [Complex64]| dy[0] = lambda * y[0],
            1,
            OdeOptions::default(),
        );
        let mut y = vec![Complex64::new(1.0, 0.0)];
        solver.integrate(0.0, &mut y, 3.0).unwrap();
        let exact = (lambda * 3.0).exp();
        assert!((y[0] - exact).norm() < 1e-9, "{:?} vs {exact:?}", y[0]);
        // Continue in a second call.
        solver.integrate(3.0, &mut y, 5.0).unwrap();
        assert!((y[0] - (lambda * 5.0).exp()).norm() < 1e-9);
    }

    #[test]
    fn time_dependent_rhs() {
        let mut solver = Dopri5::new(
            |t, _y: &[Complex64], dy: &mut [Complex64]| dy[0] = Complex64::new(t.cos(), 0.0),
            1,
            OdeOptions::default(),
        );
        let mut y = vec![Complex64::new(0.0, 0.0)];
        solver.integrate(0.0, &mut y, 10.0).unwrap();
        assert!((y[0].re - 10f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn rejects_backwards_span() {
        let mut solver = Dopri5::new(|_t, _y: &[Complex64], _dy: &mut [Complex64]| {}, 1, OdeOptions::default());
        let mut y = vec![Complex64::new(1.0, 0.0)];
        assert!(solver.integrate(1.0, &mut y, 0.0).is_err());
    }
}
