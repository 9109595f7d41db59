//! Finite-time photon counting statistics from the n-resolved master
//! equation, and the s-ensemble built on them.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::analytic::intensity_and_mandel;
use crate::error::{Error, Result};
use crate::liouville::{build_tilted_generator, leading_eigen, vec_index, GeneratorParts};
use crate::model::ModulatedFluorophore;
use crate::numeric::ode::{Dopri5, OdeOptions};

pub const DEFAULT_TAIL_TOL: f64 = 1e-10;
pub const N_MAX_CAP: usize = 100_000;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Initial system state in every bath block. The bath always starts from
/// its stationary distribution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    /// Joint stationary state of system and bath.
    #[default]
    Stationary,
    /// Emitter in its ground state.
    Ground,
}

/// Stacked blocks at `t = 0`; their traces sum to one.
pub fn initial_blocks(model: &ModulatedFluorophore, init: InitialCondition) -> Result<Vec<Complex64>> {
    match init {
        InitialCondition::Stationary => {
            let spec = leading_eigen(&build_tilted_generator(model, 0.0))?;
            // Remove roundoff anti-Hermitian parts.
            let mut v: Vec<Complex64> = spec.right.iter().copied().collect();
            for b in v.chunks_exact_mut(4) {
                let (d0, d1) = (b[vec_index(0, 0)].re, b[vec_index(1, 1)].re);
                let c = 0.5 * (b[vec_index(0, 1)] + b[vec_index(1, 0)].conj());
                b[vec_index(0, 0)] = Complex64::new(d0, 0.0);
                b[vec_index(1, 1)] = Complex64::new(d1, 0.0);
                b[vec_index(0, 1)] = c;
                b[vec_index(1, 0)] = c.conj();
            }
            Ok(v)
        }
        InitialCondition::Ground => {
            let p = model.stationary_populations()?;
            let mut v = vec![ZERO; 4 * p.len()];
            for (r, pr) in p.iter().enumerate() {
                v[4 * r + vec_index(1, 1)] = Complex64::new(*pr, 0.0);
            }
            Ok(v)
        }
    }
}

fn block_trace(v: &[Complex64]) -> Complex64 {
    v.chunks_exact(4).map(|b| b[vec_index(0, 0)] + b[vec_index(1, 1)]).sum()
}

fn check_time(t: f64) -> Result<()> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::validation("t", format!("must be finite and non-negative, got {t}")));
    }
    Ok(())
}

fn gemv(m: &DMatrix<Complex64>, x: &[Complex64], y: &mut [Complex64], accumulate: bool) {
    let n = m.nrows();
    for i in 0..n {
        let mut acc = if accumulate { y[i] } else { ZERO };
        for j in 0..n {
            acc += m[(i, j)] * x[j];
        }
        y[i] = acc;
    }
}

/// Propagate the stacked blocks under the generator tilted by `s`. The
/// result is returned as `(blocks, ln_scale)`: the true state is
/// `e^{ln_scale} * blocks`, with `blocks` renormalized along the way so that
/// the tolerances stay relative.
pub fn propagate_tilted(
    model: &ModulatedFluorophore,
    s: f64,
    t: f64,
    init: InitialCondition,
) -> Result<(Vec<Complex64>, f64)> {
    check_time(t)?;
    let mut y = initial_blocks(model, init)?;
    let matrix = GeneratorParts::new(model).tilted(s);
    let row_sum = matrix
        .row_iter()
        .map(|r| r.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max);
    // The norm changes by at most a factor e per chunk.
    let chunk = 1.0 / row_sum.max(1e-12);
    let mut solver = Dopri5::new(
        |_t, x: &[Complex64], dx: &mut [Complex64]| gemv(&matrix, x, dx, false),
        y.len(),
        OdeOptions::default(),
    );
    let mut ln_scale = 0.0;
    let mut now = 0.0;
    while now < t {
        let next = if t - now < 1.000001 * chunk { t } else { now + chunk };
        solver.integrate(now, &mut y, next)?;
        now = next;
        let norm = y.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Integrator {
                t_reached: now,
                reason: format!("generating operator norm became {norm:e}"),
            });
        }
        ln_scale += norm.ln();
        for z in y.iter_mut() {
            *z /= norm;
        }
    }
    Ok((y, ln_scale))
}

/// `Z_t(s)`: trace of the generating operator at time `t`.
pub fn integrate_generating(model: &ModulatedFluorophore, s: f64, t: f64) -> Result<f64> {
    integrate_generating_from(model, s, t, InitialCondition::default())
}

pub fn integrate_generating_from(model: &ModulatedFluorophore, s: f64, t: f64, init: InitialCondition) -> Result<f64> {
    Ok(log_generating(model, s, t, init)?.exp())
}

/// `ln Z_t(s)`, usable when `Z` under- or overflows.
pub fn log_generating(model: &ModulatedFluorophore, s: f64, t: f64, init: InitialCondition) -> Result<f64> {
    let (y, ln_scale) = propagate_tilted(model, s, t, init)?;
    let tr = block_trace(&y).re;
    if !(tr > 0.0) {
        return Err(Error::Integrator {
            t_reached: t,
            reason: format!("generating function trace is not positive ({tr:e})"),
        });
    }
    Ok(ln_scale + tr.ln())
}

/// Photon-count probabilities `P_0 .. P_{n_max}` at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountingDistribution {
    pub t: f64,
    pub probs: Vec<f64>,
    pub tail_mass: f64,
}

impl CountingDistribution {
    pub fn n_max(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(n, p)| n as f64 * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.probs.iter().enumerate().map(|(n, p)| (n as f64 - m).powi(2) * p).sum()
    }

    /// `sum_n e^{-s n} P_n` over the stored probabilities.
    pub fn generating(&self, s: f64) -> f64 {
        self.probs.iter().enumerate().map(|(n, p)| p * (-s * n as f64).exp()).sum()
    }
}

pub fn integrate_hierarchy(model: &ModulatedFluorophore, t: f64, tail_tol: f64) -> Result<CountingDistribution> {
    integrate_hierarchy_from(model, t, tail_tol, InitialCondition::default())
}

pub fn integrate_hierarchy_from(
    model: &ModulatedFluorophore,
    t: f64,
    tail_tol: f64,
    init: InitialCondition,
) -> Result<CountingDistribution> {
    check_time(t)?;
    if !(tail_tol > 0.0 && tail_tol <= 1e-3) {
        return Err(Error::validation("tail_tol", format!("must lie in (0, 1e-3], got {tail_tol}")));
    }
    let p = model.stationary_populations()?;
    let mean_rate: f64 = p
        .iter()
        .zip(&model.levels)
        .map(|(w, l)| w * intensity_and_mandel(l, &model.drive).0)
        .sum();
    let mut n_max = ((5.0 * mean_rate * t).ceil() as usize + 10).min(N_MAX_CAP);
    let parts = GeneratorParts::new(model);
    let start = initial_blocks(model, init)?;
    loop {
        let dist = hierarchy_once(&parts, &start, t, n_max)?;
        if dist.tail_mass < tail_tol {
            return Ok(dist);
        }
        if n_max >= N_MAX_CAP {
            return Err(Error::TruncationCap {
                n_max,
                tail_mass: dist.tail_mass,
            });
        }
        log::debug!("tail mass {:.3e} at n_max = {n_max}; doubling", dist.tail_mass);
        n_max = (2 * n_max).min(N_MAX_CAP);
    }
}

fn hierarchy_once(parts: &GeneratorParts, start: &[Complex64], t: f64, n_max: usize) -> Result<CountingDistribution> {
    let d = start.len();
    let levels = n_max + 1;
    let mut y = vec![ZERO; d * levels];
    y[..d].copy_from_slice(start);
    let (l0, jump) = (&parts.no_jump, &parts.jump);
    let rhs = |_t: f64, x: &[Complex64], dx: &mut [Complex64]| {
        for n in 0..levels {
            let (lo, hi) = (n * d, (n + 1) * d);
            gemv(l0, &x[lo..hi], &mut dx[lo..hi], false);
            if n > 0 {
                gemv(jump, &x[lo - d..lo], &mut dx[lo..hi], true);
            }
        }
    };
    let mut solver = Dopri5::new(rhs, y.len(), OdeOptions::default());
    solver.integrate(0.0, &mut y, t)?;

    let mut probs: Vec<f64> = y.chunks_exact(d).map(|level| block_trace(level).re).collect();
    for q in probs.iter_mut() {
        // Integrator noise around zero.
        if *q < 0.0 && *q > -1e-9 {
            *q = 0.0;
        }
    }
    if let Some(bad) = probs.iter().find(|q| **q < 0.0) {
        return Err(Error::Integrator {
            t_reached: t,
            reason: format!("negative count probability {bad:e}"),
        });
    }
    let total: f64 = probs.iter().sum();
    Ok(CountingDistribution {
        t,
        probs,
        tail_mass: (1.0 - total).max(0.0),
    })
}

/// Finite-time s-ensemble built from a counting distribution. All
/// quantities are extensive in time; `grand_potential = -ln Z`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SEnsembleStats {
    pub s: f64,
    pub z: f64,
    pub q: Vec<f64>,
    pub entropy: f64,
    pub internal_energy: f64,
    pub particle_number: f64,
    pub grand_potential: f64,
    /// `|theta - (E - S + s N)|`.
    pub residual: f64,
}

pub fn s_ensemble(dist: &CountingDistribution, s: f64) -> Result<SEnsembleStats> {
    if dist.probs.is_empty() {
        return Err(Error::validation("probs", "empty distribution"));
    }
    let log_w: Vec<f64> = dist
        .probs
        .iter()
        .enumerate()
        .map(|(n, &p)| if p > 0.0 { p.ln() - s * n as f64 } else { f64::NEG_INFINITY })
        .collect();
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return Err(Error::validation("probs", "all probabilities vanish"));
    }
    let ln_z = top + log_w.iter().map(|lw| (lw - top).exp()).sum::<f64>().ln();
    let q: Vec<f64> = log_w.iter().map(|lw| (lw - ln_z).exp()).collect();

    let mut entropy = 0.0;
    let mut energy = 0.0;
    let mut number = 0.0;
    for (n, (&qn, &pn)) in q.iter().zip(&dist.probs).enumerate() {
        if qn == 0.0 {
            continue;
        }
        if pn <= 0.0 {
            return Err(Error::validation(
                "probs",
                format!("count {n} has q = {qn:e} but P = {pn:e}"),
            ));
        }
        entropy -= qn * qn.ln();
        energy -= qn * pn.ln();
        number += qn * n as f64;
    }
    let grand_potential = -ln_z;
    let residual = (grand_potential - (energy - entropy + s * number)).abs();
    Ok(SEnsembleStats {
        s,
        z: ln_z.exp(),
        q,
        entropy: entropy.max(0.0),
        internal_energy: energy,
        particle_number: number,
        grand_potential,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouville;

    fn slow_bath() -> ModulatedFluorophore {
        ModulatedFluorophore::two_state_decay(2.5, 0.5, 1.0, 4e-4, 8e-4).unwrap()
    }

    #[test]
    fn generating_trivial_limits() {
        let model = slow_bath();
        assert!((integrate_generating(&model, 0.0, 20.0).unwrap() - 1.0).abs() < 1e-9);
        assert!((integrate_generating(&model, 0.7, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((integrate_generating_from(&model, 0.0, 5.0, InitialCondition::Ground).unwrap() - 1.0).abs() < 1e-9);
        assert!(integrate_generating(&model, 0.1, -1.0).is_err());
    }

    #[test]
    fn generating_asymptotics() {
        let model = ModulatedFluorophore::resonant(2.0, 1.0).unwrap();
        let s = 0.5;
        let t = 200.0;
        let theta = liouville::theta(&model, s).unwrap();
        for init in [InitialCondition::Stationary, InitialCondition::Ground] {
            let ln_z = log_generating(&model, s, t, init).unwrap();
            assert!((-ln_z / t - theta).abs() < 1e-3, "{init:?}");
        }
        // Two long times cancel the prefactor.
        let z1 = log_generating(&model, s, t, InitialCondition::Stationary).unwrap();
        let z2 = log_generating(&model, s, 2.0 * t, InitialCondition::Stationary).unwrap();
        assert!(((z1 - z2) / t - theta).abs() < 1e-8);
        let grow = log_generating(&slow_bath(), -0.5, 2000.0, InitialCondition::Stationary).unwrap();
        let theta_neg = liouville::theta(&slow_bath(), -0.5).unwrap();
        assert!((-grow / 2000.0 - theta_neg).abs() < 1e-3);
    }

    #[test]
    fn short_time_has_no_counts() {
        let d = integrate_hierarchy(&slow_bath(), 1e-6, 1e-10).unwrap();
        assert!(d.probs[0] > 1.0 - 1e-6);
    }

    #[test]
    fn hierarchy_matches_generating() {
        let model = slow_bath();
        let t = 20.0;
        let d = integrate_hierarchy(&model, t, 1e-12).unwrap();
        assert!(d.tail_mass < 1e-12);
        for s in [0.0, 0.1, 0.5, 1.0] {
            let z = integrate_generating(&model, s, t).unwrap();
            assert!((d.generating(s) - z).abs() < 1e-8 + d.tail_mass, "s = {s}");
        }
        assert!(integrate_hierarchy(&model, t, 0.1).is_err());
    }

    #[test]
    fn poisson_like_markov_mean() {
        let model = ModulatedFluorophore::resonant(2.0, 1.0).unwrap();
        let t = 100.0;
        let d = integrate_hierarchy(&model, t, 1e-10).unwrap();
        // Stationary start: the mean count grows exactly linearly.
        assert!((d.mean() / t - 1.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn ensemble_identities() {
        let d = integrate_hierarchy(&slow_bath(), 50.0, 1e-10).unwrap();
        let zero = s_ensemble(&d, 0.0).unwrap();
        assert!(zero.grand_potential.abs() < 1e-9);
        assert!(zero.residual < 1e-12);
        for (q, p) in zero.q.iter().zip(&d.probs) {
            assert!((q - p / (1.0 - d.tail_mass)).abs() < 1e-12);
        }
        for s in [-0.3, 0.1, 1.0] {
            let e = s_ensemble(&d, s).unwrap();
            assert!(e.residual <= 1e-9, "s = {s}: {}", e.residual);
            assert!((e.q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(e.entropy >= 0.0);
        }
    }

    #[test]
    fn deterministic_distribution() {
        let d = CountingDistribution {
            t: 1.0,
            probs: vec![0.0, 0.0, 0.0, 1.0],
            tail_mass: 0.0,
        };
        let e = s_ensemble(&d, 0.4).unwrap();
        assert_eq!(e.entropy, 0.0);
        assert_eq!(e.internal_energy, 0.0);
        assert!((e.grand_potential - 1.2).abs() < 1e-14);
        assert_eq!(e.particle_number, 3.0);
    }
}
