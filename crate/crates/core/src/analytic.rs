//! Closed forms and semi-analytic limits: the resonant Markovian grand
//! potential, fast-modulation averaging, per-state photon statistics, the
//! slow-modulation stochastic approximation and the Legendre transform.

use std::cell::RefCell;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::liouville::{self, Cumulants, DEFAULT_STEP, IMAG_TOL};
use crate::model::{DriveParams, LevelParams, ModulatedFluorophore};
use crate::numeric::golden_section_max;
use crate::numeric::quad::{composite, gauss_legendre};

/// Population-weighted bath averages of the level parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AveragedParams {
    pub gamma: f64,
    pub omega: f64,
    pub rabi: f64,
}

impl AveragedParams {
    pub fn level(&self) -> LevelParams {
        LevelParams {
            gamma: self.gamma,
            omega: self.omega,
            rabi: self.rabi,
        }
    }
}

pub fn averaged_parameters(model: &ModulatedFluorophore) -> Result<AveragedParams> {
    let p = model.stationary_populations()?;
    let avg = |f: fn(&LevelParams) -> f64| p.iter().zip(&model.levels).map(|(w, l)| w * f(l)).sum();
    Ok(AveragedParams {
        gamma: avg(|l| l.gamma),
        omega: avg(|l| l.omega),
        rabi: avg(|l| l.rabi),
    })
}

/// Fast-modulation reference model: a single state with averaged parameters.
pub fn fast_limit_model(model: &ModulatedFluorophore) -> Result<ModulatedFluorophore> {
    ModulatedFluorophore::single(averaged_parameters(model)?.level(), model.drive)
}

fn check_markov_inputs(gamma: f64, rabi: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::validation("gamma", format!("must be positive and finite, got {gamma}")));
    }
    if !(rabi.is_finite() && rabi >= 0.0) {
        return Err(Error::validation("rabi", format!("must be non-negative and finite, got {rabi}")));
    }
    Ok(())
}

/// `y = theta - gamma/2` is the largest real root of `y^3 + p y + q = 0`.
fn cubic_coefficients(gamma: f64, rabi: f64, s: f64) -> (f64, f64) {
    let p = (4.0 * rabi * rabi - gamma * gamma) / 4.0;
    let q = (-s).exp() * gamma * rabi * rabi / 2.0;
    (p, q)
}

/// Grand potential of a resonantly driven emitter without bath.
pub fn theta_markov(gamma: f64, rabi: f64, s: f64) -> Result<f64> {
    check_markov_inputs(gamma, rabi)?;
    let z = (-s).exp();
    let a = 54.0 * z * gamma * rabi * rabi;
    let d = 4.0 * rabi * rabi - gamma * gamma;
    let disc = Complex64::new(a * a + 27.0 * d * d * d, 0.0).sqrt();
    let f = (Complex64::new(a, 0.0) + disc).powf(1.0 / 3.0);
    let tail = if d == 0.0 { Complex64::new(0.0, 0.0) } else { d / (2.0 * f) };
    let theta = Complex64::new(gamma / 2.0, 0.0) - f / 6.0 + tail;
    let tolerance = IMAG_TOL * theta.re.abs().max(1.0);
    if !(theta.im.abs() <= tolerance) {
        return Err(Error::ImaginaryResidue {
            quantity: "closed-form grand potential (cube-root branch)",
            residue: theta.im.abs(),
            tolerance,
        });
    }
    // One Newton polish on the cubic.
    let (p, q) = cubic_coefficients(gamma, rabi, s);
    let y = theta.re - gamma / 2.0;
    let slope = 3.0 * y * y + p;
    let step = (y * y * y + p * y + q) / slope;
    if slope > 0.0 && step.abs() < 1e-8 * y.abs().max(1.0) {
        Ok(theta.re - step)
    } else {
        Ok(theta.re)
    }
}

/// Exact first two cumulants of the resonant Markovian emitter by implicit
/// differentiation of the cubic.
pub fn markov_cumulants(gamma: f64, rabi: f64, s: f64) -> Result<Cumulants> {
    let theta = theta_markov(gamma, rabi, s)?;
    let (p, q) = cubic_coefficients(gamma, rabi, s);
    let y = theta - gamma / 2.0;
    let slope = 3.0 * y * y + p;
    if !(slope > 0.0) {
        return Err(Error::RootNotFound {
            reason: format!("leading root of the cubic is not simple (slope {slope:e})"),
            lo: y,
            hi: y,
        });
    }
    let mean = q / slope;
    let variance = mean + 6.0 * y * mean * mean / slope;
    Ok(Cumulants { mean, variance })
}

/// Steady-state photon intensity and Mandel variance rate of one bath state.
pub fn intensity_and_mandel(level: &LevelParams, drive: &DriveParams) -> (f64, f64) {
    let delta = drive.detuning(level);
    let (g2, o2, d2) = (level.gamma * level.gamma, level.rabi * level.rabi, delta * delta);
    let denom = g2 + 2.0 * o2 + 4.0 * d2;
    let intensity = level.gamma * o2 / denom;
    let mandel = intensity * (1.0 - (6.0 * g2 - 8.0 * d2) * o2 / (denom * denom));
    debug_assert!(intensity >= 0.0 && mandel >= 0.0);
    (intensity, mandel)
}

/// Grand potential of one isolated bath state.
pub fn phase_theta(level: &LevelParams, drive: &DriveParams, s: f64) -> Result<f64> {
    if drive.detuning(level) == 0.0 {
        theta_markov(level.gamma, level.rabi, s)
    } else {
        liouville::theta(&ModulatedFluorophore::single(*level, *drive)?, s)
    }
}

/// Counting cumulants of one isolated bath state.
pub fn phase_cumulants(level: &LevelParams, drive: &DriveParams, s: f64) -> Result<Cumulants> {
    if drive.detuning(level) == 0.0 {
        markov_cumulants(level.gamma, level.rabi, s)
    } else {
        liouville::cumulants(&ModulatedFluorophore::single(*level, *drive)?, s, DEFAULT_STEP)
    }
}

/// Long-time variance rate of the photon count at `s = 0`.
pub fn variance_s0(model: &ModulatedFluorophore) -> Result<f64> {
    let p = model.stationary_populations()?;
    let stats: Vec<(f64, f64)> = model.levels.iter().map(|l| intensity_and_mandel(l, &model.drive)).collect();
    let local: f64 = p.iter().zip(&stats).map(|(w, (_, m))| w * m).sum();
    let n = model.n_states();
    let correlation = match n {
        1 => 0.0,
        2 => {
            let phi_tot = model.bath.rate(0, 1) + model.bath.rate(1, 0);
            let di = stats[0].0 - stats[1].0;
            2.0 * p[0] * p[1] * di * di / phi_tot
        }
        _ => {
            let f = correlation_matrix(model)?;
            let i: Vec<f64> = stats.iter().map(|(x, _)| *x).collect();
            let mut acc = 0.0;
            for r in 0..n {
                for rp in 0..n {
                    acc += i[r] * f[(r, rp)] * i[rp];
                }
            }
            2.0 * acc
        }
    };
    Ok(local + correlation)
}

/// `f[(r, r')] = P_r' * integral_0^inf (e^{W u} - Pi)[(r, r')] du`, where
/// `Pi` projects onto the stationary bath state.
pub fn correlation_matrix(model: &ModulatedFluorophore) -> Result<DMatrix<f64>> {
    let w = model.bath_generator().matrix;
    let p = model.stationary_populations()?;
    let n = w.nrows();
    let pi = DMatrix::from_fn(n, n, |r, _| p[r]);

    let eig = w.clone().schur().complex_eigenvalues();
    let mut re: Vec<f64> = eig.iter().map(|z| z.re).collect();
    re.sort_by(|a, b| b.total_cmp(a));
    let slowest = re.get(1).copied().unwrap_or(0.0).abs();
    let fastest = re.last().copied().unwrap_or(0.0).abs();
    if slowest == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }

    let rule = gauss_legendre(20);
    let coarse = gauss_legendre(10);
    let integrand = |u: f64| (&w * u).exp() - &pi;
    let panel = |a: f64, b: f64, rule: &(Vec<f64>, Vec<f64>)| {
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        rule.0
            .iter()
            .zip(&rule.1)
            .fold(DMatrix::zeros(n, n), |acc, (x, wt)| acc + integrand(mid + half * x) * (wt * half))
    };

    let scale = 1.0 / slowest;
    let mut horizon = 20.0 / slowest;
    for _ in 0..6 {
        // Geometric panels resolve every bath timescale.
        let mut total = DMatrix::zeros(n, n);
        let mut a = 0.0;
        let mut width = 0.25 / fastest.max(slowest);
        let mut ok = true;
        while a < horizon {
            let b = (a + width).min(horizon);
            let fine = panel(a, b, &rule);
            let rough = panel(a, b, &coarse);
            if (&fine - &rough).amax() > 1e-12 * scale {
                ok = false;
            }
            total += fine;
            a = b;
            width *= 2.0;
        }
        let tail = integrand(horizon).amax() / slowest;
        if ok && tail <= 1e-12 * scale {
            return Ok(DMatrix::from_fn(n, n, |r, rp| total[(r, rp)] * p[rp]));
        }
        horizon *= 2.0;
    }
    Err(Error::Quadrature {
        suggested_horizon: horizon,
    })
}

/// Stochastic approximation parameters for a two-state bath in the slow
/// modulation regime. Phase `a` is always the brighter state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlowModApprox {
    pub eps0: f64,
    pub d_eps: f64,
    pub s_p: f64,
    pub alpha: f64,
    pub phi_tot: f64,
    /// `true` when the input state 1 is the brighter one.
    pub relabeled: bool,
    /// Input-state index of phases A and B.
    pub mapping: [usize; 2],
    pub level_a: LevelParams,
    pub level_b: LevelParams,
    pub drive: DriveParams,
    pub pop_a: f64,
    pub pop_b: f64,
    pub intensity_a: f64,
    pub intensity_b: f64,
    pub mandel_a: f64,
    pub mandel_b: f64,
}

impl SlowModApprox {
    /// `phi~(s) = alpha s (s - 2 s_p) + phi_tot`.
    pub fn phi_tilde(&self, s: f64) -> Result<f64> {
        let v = self.alpha * s * (s - 2.0 * self.s_p) + self.phi_tot;
        if !(v > 0.0) {
            return Err(Error::validation(
                "alpha",
                format!("effective bath rate is not positive at s = {s} ({v:e}); reduce alpha"),
            ));
        }
        Ok(v)
    }

    /// Width of the variance peak.
    pub fn sigma_p(&self) -> f64 {
        2.0 * self.phi_tot / (self.intensity_a - self.intensity_b).abs()
    }

    /// Population of phase A in the tanh form.
    pub fn pop_a_at(&self, s: f64) -> f64 {
        0.5 * (1.0 - (self.eps0 + s * self.d_eps).tanh())
    }

    pub fn theta_a(&self, s: f64) -> Result<f64> {
        phase_theta(&self.level_a, &self.drive, s)
    }

    pub fn theta_b(&self, s: f64) -> Result<f64> {
        phase_theta(&self.level_b, &self.drive, s)
    }

    pub fn cumulants_a(&self, s: f64) -> Result<Cumulants> {
        phase_cumulants(&self.level_a, &self.drive, s)
    }

    pub fn cumulants_b(&self, s: f64) -> Result<Cumulants> {
        phase_cumulants(&self.level_b, &self.drive, s)
    }
}

fn require_two_states(model: &ModulatedFluorophore) -> Result<()> {
    if model.n_states() != 2 {
        return Err(Error::Unsupported(format!(
            "the slow-modulation approximation needs exactly 2 bath states, got {}",
            model.n_states()
        )));
    }
    Ok(())
}

/// Default `alpha`: the effective rate doubles at `|s - s_p| = 10 sigma_p`.
pub fn default_alpha(phi_tot: f64, sigma_p: f64) -> f64 {
    phi_tot / (10.0 * sigma_p).powi(2)
}

pub fn slow_mod_params(model: &ModulatedFluorophore, alpha: Option<f64>) -> Result<SlowModApprox> {
    require_two_states(model)?;
    let p = model.stationary_populations()?;
    let stats: Vec<(f64, f64)> = model.levels.iter().map(|l| intensity_and_mandel(l, &model.drive)).collect();
    let di = stats[0].0 - stats[1].0;
    if di.abs() <= 1e-12 * stats[0].0.abs().max(stats[1].0.abs()).max(f64::MIN_POSITIVE) {
        return Err(Error::DegeneratePhases { intensity: stats[0].0 });
    }
    let relabeled = di < 0.0;
    let (a, b) = if relabeled { (1, 0) } else { (0, 1) };
    let phi_tot = model.bath.rate(0, 1) + model.bath.rate(1, 0);
    let eps0 = 0.5 * (p[b] / p[a]).ln();
    let d_eps = (stats[a].0 - stats[b].0) / phi_tot;
    let s_p = -eps0 / d_eps;
    let sigma_p = 2.0 * phi_tot / (stats[a].0 - stats[b].0);
    let alpha = match alpha {
        Some(v) if !(v.is_finite() && v >= 0.0) => {
            return Err(Error::validation("alpha", format!("must be non-negative and finite, got {v}")))
        }
        Some(v) => v,
        None => default_alpha(phi_tot, sigma_p),
    };
    let approx = SlowModApprox {
        eps0,
        d_eps,
        s_p,
        alpha,
        phi_tot,
        relabeled,
        mapping: [a, b],
        level_a: model.levels[a],
        level_b: model.levels[b],
        drive: model.drive,
        pop_a: p[a],
        pop_b: p[b],
        intensity_a: stats[a].0,
        intensity_b: stats[b].0,
        mandel_a: stats[a].1,
        mandel_b: stats[b].1,
    };
    approx.phi_tilde(s_p)?;
    Ok(approx)
}

/// Slow-modulation cumulants together with the phase populations they use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlowCumulants {
    pub mean: f64,
    pub variance: f64,
    pub pop_a: f64,
    pub pop_b: f64,
}

pub fn slow_cumulants_with(approx: &SlowModApprox, s: f64) -> Result<SlowCumulants> {
    let ca = approx.cumulants_a(s)?;
    let cb = approx.cumulants_b(s)?;
    let pa = approx.pop_a_at(s);
    let pb = 1.0 - pa;
    let dn = ca.mean - cb.mean;
    Ok(SlowCumulants {
        mean: pa * ca.mean + pb * cb.mean,
        variance: pa * ca.variance + pb * cb.variance + 2.0 * pa * pb * dn * dn / approx.phi_tilde(s)?,
        pop_a: pa,
        pop_b: pb,
    })
}

pub fn slow_cumulants(model: &ModulatedFluorophore, s: f64) -> Result<Cumulants> {
    let c = slow_cumulants_with(&slow_mod_params(model, None)?, s)?;
    Ok(Cumulants {
        mean: c.mean,
        variance: c.variance,
    })
}

/// Location, height and width of the variance peak at the blinking
/// transition, with the mean count rate at the peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeakScaling {
    pub s_p: f64,
    pub height: f64,
    pub width: f64,
    pub mean_at_peak: f64,
}

pub fn peak_scaling(model: &ModulatedFluorophore) -> Result<PeakScaling> {
    let a = slow_mod_params(model, None)?;
    let di = a.intensity_a - a.intensity_b;
    Ok(PeakScaling {
        s_p: a.s_p,
        height: 0.5 * (a.mandel_a + a.mandel_b) + di * di / (2.0 * a.phi_tot),
        width: a.sigma_p(),
        mean_at_peak: 0.5 * (a.intensity_a + a.intensity_b),
    })
}

/// How the double-Gaussian phase weights depend on `s`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `epsilon(s) = s * d_eps`, the same weights as [`slow_cumulants`].
    #[default]
    Linear,
    /// `epsilon(s) = (theta_A(s) - theta_B(s)) / phi~(s)`.
    GrandPotential,
}

/// Two-phase Gaussian mixture for the distribution of the count rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DoubleGaussian {
    pub s: f64,
    pub weights: [f64; 2],
    pub means: [f64; 2],
    /// Component variances, already multiplied by `upsilon`.
    pub variances: [f64; 2],
    pub upsilon: f64,
}

const GAUSS_SPAN: f64 = 12.0;

impl DoubleGaussian {
    pub fn pdf(&self, n: f64) -> f64 {
        (0..2)
            .map(|k| {
                let v = self.variances[k];
                let d = n - self.means[k];
                self.weights[k] * (-d * d / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
            })
            .sum()
    }

    /// Integration range covering both components.
    pub fn support(&self) -> (f64, f64) {
        let sd = |k: usize| self.variances[k].sqrt();
        let lo = (self.means[0] - GAUSS_SPAN * sd(0)).min(self.means[1] - GAUSS_SPAN * sd(1));
        let hi = (self.means[0] + GAUSS_SPAN * sd(0)).max(self.means[1] + GAUSS_SPAN * sd(1));
        (lo, hi)
    }

    fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let (lo, hi) = self.support();
        let sd = self.variances[0].sqrt().min(self.variances[1].sqrt());
        let panels = (((hi - lo) / (0.5 * sd)).ceil() as usize).clamp(8, 100_000);
        composite(|n| self.pdf(n) * f(n), lo, hi, panels, &gauss_legendre(20))
    }

    pub fn normalization(&self) -> f64 {
        self.integrate(|_| 1.0)
    }

    /// Mean and size-scaled variance of the count rate by quadrature.
    pub fn moments(&self) -> (f64, f64) {
        let mean = self.integrate(|n| n);
        let second = self.integrate(|n| (n - mean) * (n - mean));
        (mean, second / self.upsilon)
    }
}

pub fn double_gaussian(model: &ModulatedFluorophore, s: f64, mode: WeightMode) -> Result<DoubleGaussian> {
    double_gaussian_with(&slow_mod_params(model, None)?, s, mode)
}

pub fn double_gaussian_with(approx: &SlowModApprox, s: f64, mode: WeightMode) -> Result<DoubleGaussian> {
    let phi = approx.phi_tilde(s)?;
    let upsilon = phi / 2.0;
    let ca = approx.cumulants_a(s)?;
    let cb = approx.cumulants_b(s)?;
    let eps = match mode {
        WeightMode::Linear => s * approx.d_eps,
        WeightMode::GrandPotential => (approx.theta_a(s)? - approx.theta_b(s)?) / phi,
    };
    let wa = 0.5 * (1.0 - (approx.eps0 + eps).tanh());
    let variances = [ca.variance * upsilon, cb.variance * upsilon];
    if variances.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::validation(
            "variances",
            format!("phase variances must be positive, got {variances:?}"),
        ));
    }
    Ok(DoubleGaussian {
        s,
        weights: [wa, 1.0 - wa],
        means: [ca.mean, cb.mean],
        variances,
        upsilon,
    })
}

/// One point of the rate function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    pub n: f64,
    pub phi: f64,
    pub s_star: f64,
    /// `false` when the maximizer sits on the edge of the s grid.
    pub reliable: bool,
}

/// Legendre-Fenchel transform `phi(N) = max_s [theta(s) - s N]`: discrete
/// maximum over `s_grid`, then golden-section refinement between the
/// neighbouring grid points.
pub fn rate_function<F>(theta: F, s_grid: &[f64], n_grid: &[f64]) -> Result<Vec<RatePoint>>
where
    F: Fn(f64) -> Result<f64>,
{
    if s_grid.len() < 3 {
        return Err(Error::validation("s_grid", "need at least 3 points"));
    }
    if s_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::validation("s_grid", "must be strictly increasing"));
    }
    let sampled: Vec<f64> = s_grid.iter().map(|&s| theta(s)).collect::<Result<_>>()?;
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let mut out = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let (k, _) = sampled
            .iter()
            .zip(s_grid)
            .map(|(t, s)| t - s * n)
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty grid");
        let last = s_grid.len() - 1;
        if k == 0 || k == last {
            out.push(RatePoint {
                n,
                phi: sampled[k] - s_grid[k] * n,
                s_star: s_grid[k],
                reliable: false,
            });
            continue;
        }
        let objective = |s: f64| match theta(s) {
            Ok(t) => t - s * n,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NEG_INFINITY
            }
        };
        let (s_star, phi) = golden_section_max(objective, s_grid[k - 1], s_grid[k + 1], 1e-12);
        if let Some(e) = failure.borrow_mut().take() {
            return Err(e);
        }
        let discrete = sampled[k] - s_grid[k] * n;
        let (s_star, phi) = if phi >= discrete { (s_star, phi) } else { (s_grid[k], discrete) };
        out.push(RatePoint {
            n,
            phi,
            s_star,
            reliable: true,
        });
    }
    Ok(out)
}

/// Closed-form rate function of the resonant emitter at `gamma = 2 Omega`.
pub fn rate_function_scale_invariant(rabi: f64, n: f64) -> f64 {
    if n == 0.0 {
        return rabi;
    }
    rabi - 3.0 * n + 3.0 * n * (3.0 * n / rabi).ln()
}
