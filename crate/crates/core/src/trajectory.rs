//! Quantum-jump Monte Carlo for the emitter coupled to a classical bath.
//!
//! Each trajectory carries a pure emitter state and a bath label. Between
//! events the state follows the non-Hermitian evolution of the current bath
//! state; events are photon emissions (collapse to the ground state) and bath
//! hops (label change, state untouched). Event times are drawn by inverting
//! the survival probability `|psi(tau)|^2 e^{-Phi tau}`, with the no-jump
//! propagator evaluated in closed form.

use std::io::Write;

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::counting::{initial_blocks, InitialCondition};
use crate::error::{Error, Result};
use crate::liouville::vec_index;
use crate::model::{LevelParams, ModulatedFluorophore};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const TIME_TOL: f64 = 1e-10;

/// Seed of trajectory `k` derived from the master seed.
pub fn trajectory_seed(master_seed: u64, k: u64) -> u64 {
    let mut z = master_seed.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Emission,
    BathJump,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    /// Bath states of a hop; `None` for emissions.
    pub from: Option<usize>,
    pub to: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub seed: u64,
    /// Empty unless event recording was requested.
    pub events: Vec<Event>,
    pub t_final: f64,
    pub n_emissions: u64,
    /// Total sojourn time in each bath state.
    pub bath_occupation: Vec<f64>,
}

impl TrajectoryRecord {
    /// Emission count up to time `t`; needs recorded events unless
    /// `t == t_final`.
    pub fn count_at(&self, t: f64) -> Result<u64> {
        if t == self.t_final {
            return Ok(self.n_emissions);
        }
        if t > self.t_final {
            return Err(Error::validation("t", format!("{t} exceeds the record length {}", self.t_final)));
        }
        if self.events.is_empty() && self.n_emissions > 0 {
            return Err(Error::validation("events", "record was stored without events"));
        }
        Ok(self
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Emission && e.t <= t)
            .count() as u64)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    pub init: InitialCondition,
    /// Times at which ensemble-averaged states are recorded.
    pub checkpoints: Vec<f64>,
    pub record_events: bool,
}

/// Ensemble average of `|psi><psi|` placed in the block of the current bath
/// state, stacked like the master-equation blocks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointStats {
    pub t: f64,
    pub mean: Vec<Complex64>,
    pub stderr_re: Vec<f64>,
    pub stderr_im: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub n_traj: usize,
    pub t: f64,
    pub mean_rate: f64,
    pub mean_rate_stderr: f64,
    pub var_rate: f64,
    pub var_rate_stderr: f64,
    /// `histogram[n]` trajectories ended with `n` emissions.
    pub histogram: Vec<u64>,
    pub checkpoints: Vec<CheckpointStats>,
    /// Propagations whose norm underflowed and had to be restarted.
    pub norm_underflows: u64,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub stats: EnsembleStats,
    pub records: Vec<TrajectoryRecord>,
}

impl Ensemble {
    pub fn counts(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.n_emissions).collect()
    }
}

/// Closed-form no-jump propagator `e^{M tau}` of one bath state, with
/// `M = -i H - gamma/2 |+><+|`.
#[derive(Debug, Clone)]
struct NoJump {
    mu: Complex64,
    delta: Complex64,
    a: Matrix2<Complex64>,
    gamma: f64,
    /// Characteristic rate used to bracket jump times.
    rate_scale: f64,
}

impl NoJump {
    fn new(model: &ModulatedFluorophore, level: &LevelParams, state: usize) -> Self {
        let h = model.hamiltonian(state);
        let excited = Matrix2::new(ONE, ZERO, ZERO, ZERO);
        let m = h * Complex64::new(0.0, -1.0) - excited * Complex64::new(level.gamma / 2.0, 0.0);
        let mu = m.trace() / 2.0;
        let a = m - Matrix2::identity() * mu;
        let delta = (mu * mu - m.determinant()).sqrt();
        Self {
            mu,
            delta,
            a,
            gamma: level.gamma,
            rate_scale: level.gamma + level.rabi.abs() + model.detuning(state).abs(),
        }
    }

    fn propagator(&self, tau: f64) -> Matrix2<Complex64> {
        let x = self.delta * tau;
        let (c, sc) = if x.norm() < 1e-2 {
            let x2 = x * x;
            let c = ONE + x2 * (0.5 + x2 * (1.0 / 24.0 + x2 * (1.0 / 720.0 + x2 / 40320.0)));
            let sc = ONE + x2 * (1.0 / 6.0 + x2 * (1.0 / 120.0 + x2 * (1.0 / 5040.0 + x2 / 362880.0)));
            let e = (self.mu * tau).exp();
            (e * c, e * sc * tau)
        } else {
            // e^{mu tau} cosh and e^{mu tau} sinh / delta without overflow.
            let ep = ((self.mu + self.delta) * tau).exp();
            let em = ((self.mu - self.delta) * tau).exp();
            ((ep + em) * 0.5, (ep - em) / (self.delta * 2.0))
        };
        Matrix2::identity() * c + self.a * sc
    }

    fn evolve(&self, psi: &Vector2<Complex64>, tau: f64) -> Vector2<Complex64> {
        self.propagator(tau) * psi
    }
}

fn ground() -> Vector2<Complex64> {
    Vector2::new(ZERO, ONE)
}

fn normalized(psi: Vector2<Complex64>) -> Option<Vector2<Complex64>> {
    let n = psi.norm();
    (n > 1e-150 && n.is_finite()).then(|| psi / Complex64::new(n, 0.0))
}

/// Time of the next jump from the normalized state `psi`, where the survival
/// `|psi(tau)|^2 e^{-escape tau}` reaches `e^{ln_target}`, or `None` when
/// it stays above the target over `window`.
fn next_jump(nj: &NoJump, psi: &Vector2<Complex64>, escape: f64, window: f64, ln_target: f64) -> Option<f64> {
    let f = |tau: f64| -> (f64, f64) {
        let p = nj.evolve(psi, tau);
        let norm2 = p.norm_squared();
        if !(norm2 > 0.0) {
            return (f64::NEG_INFINITY, f64::NAN);
        }
        let value = norm2.ln() - escape * tau - ln_target;
        let slope = -(nj.gamma * p[0].norm_sqr() / norm2 + escape);
        (value, slope)
    };
    if f(window).0 >= 0.0 {
        return None;
    }
    // March forward to a tight bracket.
    let mut lo = 0.0;
    let mut step = 0.5 / (nj.rate_scale + escape).max(1e-300);
    let mut hi;
    loop {
        hi = (lo + step).min(window);
        if f(hi).0 < 0.0 {
            break;
        }
        lo = hi;
        step *= 1.5;
    }
    // Newton with bisection safeguard.
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (v, d) = f(x);
        if v > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - v / d;
        let next = if v.is_finite() && d.is_finite() && d < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() < TIME_TOL || hi - lo < TIME_TOL {
            return Some(next);
        }
        x = next;
    }
    Some(x)
}

fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn pick<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Mixed state as a weighted list of pure states.
#[derive(Debug, Clone)]
struct PureMixture {
    weights: Vec<f64>,
    states: Vec<Vector2<Complex64>>,
}

impl PureMixture {
    fn from_density(rho: &Matrix2<Complex64>) -> Self {
        let herm = (rho + rho.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = herm.symmetric_eigen();
        let weights = eig.eigenvalues.iter().map(|l| l.max(0.0)).collect();
        let states = (0..2).map(|i| eig.eigenvectors.column(i).into_owned()).collect();
        Self { weights, states }
    }

    fn ground() -> Self {
        Self {
            weights: vec![1.0],
            states: vec![ground()],
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Vector2<Complex64> {
        self.states[pick(rng, &self.weights)]
    }
}

/// Initial bath weights and per-state pure-state mixtures.
fn initial_distribution(model: &ModulatedFluorophore, init: InitialCondition) -> Result<(Vec<f64>, Vec<PureMixture>)> {
    let blocks = initial_blocks(model, init)?;
    let mut weights = Vec::new();
    let mut mixtures = Vec::new();
    for b in blocks.chunks_exact(4) {
        let rho = Matrix2::from_column_slice(b);
        let tr = rho.trace().re;
        weights.push(tr.max(0.0));
        mixtures.push(if tr > 0.0 {
            PureMixture::from_density(&(rho / Complex64::new(tr, 0.0)))
        } else {
            PureMixture::ground()
        });
    }
    Ok((weights, mixtures))
}

struct Outcome {
    record: TrajectoryRecord,
    snapshots: Vec<(usize, Vector2<Complex64>)>,
    underflows: u64,
}

struct Simulator<'a> {
    model: &'a ModulatedFluorophore,
    no_jump: Vec<NoJump>,
    escape: Vec<f64>,
    hop_weights: Vec<Vec<f64>>,
}

impl<'a> Simulator<'a> {
    fn new(model: &'a ModulatedFluorophore) -> Self {
        let n = model.n_states();
        Self {
            model,
            no_jump: (0..n).map(|r| NoJump::new(model, &model.levels[r], r)).collect(),
            escape: (0..n).map(|r| model.bath.escape_rate(r)).collect(),
            hop_weights: (0..n).map(|r| (0..n).map(|rp| model.bath.rate(rp, r)).collect()).collect(),
        }
    }

    /// Hybrid unravelling of the full master equation.
    #[allow(clippy::too_many_arguments)]
    fn coupled(
        &self,
        seed: u64,
        t_max: f64,
        start: (&[f64], &[PureMixture]),
        checkpoints: &[f64],
        record_events: bool,
    ) -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_states = self.model.n_states();
        let mut state = pick(&mut rng, start.0);
        let mut psi = start.1[state].draw(&mut rng);
        let mut t = 0.0;
        let mut n = 0u64;
        let mut occupation = vec![0.0; n_states];
        let mut events = Vec::new();
        let mut snapshots = Vec::with_capacity(checkpoints.len());
        let mut next_cp = 0;
        let mut underflows = 0;

        loop {
            let window = t_max - t;
            let nj = &self.no_jump[state];
            let escape = self.escape[state];
            let ln_u = open_unit(&mut rng).ln();
            let jump = next_jump(nj, &psi, escape, window, ln_u);
            let tau = jump.unwrap_or(window);
            while next_cp < checkpoints.len() && checkpoints[next_cp] <= t + tau {
                let at = nj.evolve(&psi, checkpoints[next_cp] - t);
                snapshots.push((state, normalized(at).unwrap_or_else(ground)));
                next_cp += 1;
            }
            occupation[state] += tau;
            let Some(tau) = jump else { break };
            t += tau;
            psi = match normalized(nj.evolve(&psi, tau)) {
                Some(p) => p,
                None => {
                    underflows += 1;
                    ground()
                }
            };
            let emission = nj.gamma * psi[0].norm_sqr();
            if rng.random::<f64>() * (emission + escape) < emission {
                psi = ground();
                n += 1;
                if record_events {
                    events.push(Event {
                        t,
                        kind: EventKind::Emission,
                        from: None,
                        to: None,
                    });
                }
            } else {
                let to = pick(&mut rng, &self.hop_weights[state]);
                if record_events {
                    events.push(Event {
                        t,
                        kind: EventKind::BathJump,
                        from: Some(state),
                        to: Some(to),
                    });
                }
                state = to;
            }
        }
        Outcome {
            record: TrajectoryRecord {
                seed,
                events,
                t_final: t_max,
                n_emissions: n,
                bath_occupation: occupation,
            },
            snapshots,
            underflows,
        }
    }

    /// Bath hops sampled on their own; each sojourn runs an independent
    /// single-state emitter restarted from its stationary state.
    fn doubly_stochastic(
        &self,
        seed: u64,
        t_max: f64,
        bath_start: &[f64],
        phase_start: &[PureMixture],
        record_events: bool,
    ) -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_states = self.model.n_states();
        let mut state = pick(&mut rng, bath_start);
        let mut t = 0.0;
        let mut n = 0u64;
        let mut occupation = vec![0.0; n_states];
        let mut events = Vec::new();
        let mut underflows = 0;

        while t < t_max {
            let escape = self.escape[state];
            let sojourn = if escape > 0.0 {
                -open_unit(&mut rng).ln() / escape
            } else {
                f64::INFINITY
            };
            let end = (t + sojourn).min(t_max);
            let nj = &self.no_jump[state];
            let mut psi = phase_start[state].draw(&mut rng);
            let mut now = t;
            loop {
                let ln_u = open_unit(&mut rng).ln();
                let Some(tau) = next_jump(nj, &psi, 0.0, end - now, ln_u) else { break };
                now += tau;
                n += 1;
                psi = ground();
                if record_events {
                    events.push(Event {
                        t: now,
                        kind: EventKind::Emission,
                        from: None,
                        to: None,
                    });
                }
            }
            occupation[state] += end - t;
            t = end;
            if t < t_max {
                let to = pick(&mut rng, &self.hop_weights[state]);
                if record_events {
                    events.push(Event {
                        t,
                        kind: EventKind::BathJump,
                        from: Some(state),
                        to: Some(to),
                    });
                }
                state = to;
            }
            if !t.is_finite() {
                underflows += 1;
                break;
            }
        }
        Outcome {
            record: TrajectoryRecord {
                seed,
                events,
                t_final: t_max,
                n_emissions: n,
                bath_occupation: occupation,
            },
            snapshots: Vec::new(),
            underflows,
        }
    }
}

fn check_run(n_traj: usize, t_max: f64, checkpoints: &[f64]) -> Result<()> {
    if n_traj == 0 {
        return Err(Error::validation("n_traj", "need at least one trajectory"));
    }
    if !(t_max.is_finite() && t_max > 0.0) {
        return Err(Error::validation("t_max", format!("must be positive and finite, got {t_max}")));
    }
    if checkpoints.windows(2).any(|w| !(w[1] > w[0])) || checkpoints.iter().any(|c| !(*c >= 0.0 && *c <= t_max)) {
        return Err(Error::validation("checkpoints", "must be increasing and lie in [0, t_max]"));
    }
    Ok(())
}

/// Running moments of a sample, for the mean and variance standard errors.
#[derive(Debug, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        let n1 = self.n;
        self.n += 1.0;
        let n = self.n;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term = delta * dn * n1;
        self.mean += dn;
        self.m4 += term * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term;
    }

    fn variance(&self) -> f64 {
        if self.n > 1.0 {
            self.m2 / (self.n - 1.0)
        } else {
            0.0
        }
    }

    fn mean_stderr(&self) -> f64 {
        (self.variance() / self.n).sqrt()
    }

    /// Standard error of the sample variance from the fourth central moment.
    fn variance_stderr(&self) -> f64 {
        let n = self.n;
        if n < 4.0 {
            return f64::NAN;
        }
        let mu4 = self.m4 / n;
        let var = self.variance();
        ((mu4 - (n - 3.0) / (n - 1.0) * var * var) / n).max(0.0).sqrt()
    }
}

fn reduce(outcomes: Vec<Outcome>, t_max: f64, checkpoints: &[f64], n_states: usize) -> Ensemble {
    let n_traj = outcomes.len();
    let mut moments = Moments::default();
    let max_n = outcomes.iter().map(|o| o.record.n_emissions).max().unwrap_or(0) as usize;
    let mut histogram = vec![0u64; max_n + 1];
    let dim = 4 * n_states;
    let mut sum = vec![vec![ZERO; dim]; checkpoints.len()];
    let mut sum_sq_re = vec![vec![0.0; dim]; checkpoints.len()];
    let mut sum_sq_im = vec![vec![0.0; dim]; checkpoints.len()];
    let mut underflows = 0;
    let mut records = Vec::with_capacity(n_traj);

    for o in outcomes {
        let n = o.record.n_emissions;
        moments.push(n as f64);
        histogram[n as usize] += 1;
        underflows += o.underflows;
        for (c, (state, psi)) in o.snapshots.iter().enumerate() {
            for j in 0..2 {
                for i in 0..2 {
                    let v = psi[i] * psi[j].conj();
                    let k = 4 * state + vec_index(i, j);
                    sum[c][k] += v;
                    sum_sq_re[c][k] += v.re * v.re;
                    sum_sq_im[c][k] += v.im * v.im;
                }
            }
        }
        records.push(o.record);
    }

    let nt = n_traj as f64;
    let stderr = |s: f64, sq: f64| {
        if n_traj < 2 {
            return f64::NAN;
        }
        let m = s / nt;
        ((sq / nt - m * m).max(0.0) / (nt - 1.0)).sqrt()
    };
    let checkpoints = checkpoints
        .iter()
        .enumerate()
        .map(|(c, &t)| CheckpointStats {
            t,
            mean: sum[c].iter().map(|z| z / nt).collect(),
            stderr_re: (0..dim).map(|k| stderr(sum[c][k].re, sum_sq_re[c][k])).collect(),
            stderr_im: (0..dim).map(|k| stderr(sum[c][k].im, sum_sq_im[c][k])).collect(),
        })
        .collect();

    Ensemble {
        stats: EnsembleStats {
            n_traj,
            t: t_max,
            mean_rate: moments.mean / t_max,
            mean_rate_stderr: moments.mean_stderr() / t_max,
            var_rate: moments.variance() / t_max,
            var_rate_stderr: moments.variance_stderr() / t_max,
            histogram,
            checkpoints,
            norm_underflows: underflows,
        },
        records,
    }
}

/// Quantum-jump unravelling of the coupled emitter and bath.
pub fn simulate_ensemble(
    model: &ModulatedFluorophore,
    n_traj: usize,
    t_max: f64,
    master_seed: u64,
    opts: &SimOptions,
) -> Result<Ensemble> {
    check_run(n_traj, t_max, &opts.checkpoints)?;
    let sim = Simulator::new(model);
    let (bath_start, mixtures) = initial_distribution(model, opts.init)?;
    let outcomes: Vec<Outcome> = (0..n_traj as u64)
        .into_par_iter()
        .map(|k| {
            sim.coupled(
                trajectory_seed(master_seed, k),
                t_max,
                (&bath_start, &mixtures),
                &opts.checkpoints,
                opts.record_events,
            )
        })
        .collect();
    Ok(reduce(outcomes, t_max, &opts.checkpoints, model.n_states()))
}

/// Sampler of the stochastic approximation: classical bath path with
/// independent emitter segments per sojourn.
pub fn doubly_stochastic_sample(
    model: &ModulatedFluorophore,
    n_traj: usize,
    t_max: f64,
    master_seed: u64,
    record_events: bool,
) -> Result<Ensemble> {
    check_run(n_traj, t_max, &[])?;
    let intensities: Vec<f64> = model
        .levels
        .iter()
        .map(|l| crate::analytic::intensity_and_mandel(l, &model.drive).0)
        .collect();
    let min_i = intensities.iter().copied().fold(f64::INFINITY, f64::min);
    let max_escape = (0..model.n_states()).map(|r| model.bath.escape_rate(r)).fold(0.0, f64::max);
    if max_escape > 0.1 * min_i {
        log::warn!("bath rate {max_escape:e} is not slow compared with the intensities (min {min_i:e})");
    }
    let sim = Simulator::new(model);
    let bath_start = model.stationary_populations()?;
    let phase_start: Vec<PureMixture> = (0..model.n_states())
        .map(|r| {
            let single = ModulatedFluorophore::single(model.levels[r], model.drive)?;
            let blocks = initial_blocks(&single, InitialCondition::Stationary)?;
            Ok(PureMixture::from_density(&Matrix2::from_column_slice(&blocks)))
        })
        .collect::<Result<_>>()?;
    let outcomes: Vec<Outcome> = (0..n_traj as u64)
        .into_par_iter()
        .map(|k| sim.doubly_stochastic(trajectory_seed(master_seed, k), t_max, &bath_start, &phase_start, record_events))
        .collect();
    Ok(reduce(outcomes, t_max, &[], model.n_states()))
}

/// Monte Carlo estimate of `Z_t(s)` and of `-ln Z_t(s) / t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartitionEstimate {
    pub s: f64,
    pub t: f64,
    pub z: f64,
    pub z_stderr: f64,
    pub theta: f64,
    pub theta_stderr: f64,
}

/// Sample mean of `e^{-s n}` with jackknife standard errors.
pub fn partition_from_counts(counts: &[u64], s: f64, t: f64) -> Result<PartitionEstimate> {
    if counts.is_empty() {
        return Err(Error::EmptyRecords);
    }
    // Shift by the smallest exponent to avoid underflow.
    let n_min = *counts.iter().min().expect("non-empty") as f64;
    let shift = -s * n_min;
    let w: Vec<f64> = counts.iter().map(|&n| (-s * n as f64 - shift).exp()).collect();
    let m = w.len() as f64;
    let total: f64 = w.iter().sum();
    let mean = total / m;
    let ln_z = mean.ln() + shift;
    let theta = -ln_z / t;
    let (z_stderr, theta_stderr) = if w.len() < 2 {
        (0.0, 0.0)
    } else {
        let loo: Vec<f64> = w.iter().map(|wi| (total - wi) / (m - 1.0)).collect();
        let jack = |vals: &[f64]| {
            let avg = vals.iter().sum::<f64>() / m;
            ((m - 1.0) / m * vals.iter().map(|v| (v - avg).powi(2)).sum::<f64>()).sqrt()
        };
        let z_loo: Vec<f64> = loo.iter().map(|v| v * shift.exp()).collect();
        let theta_loo: Vec<f64> = loo.iter().map(|v| -(v.ln() + shift) / t).collect();
        (jack(&z_loo), jack(&theta_loo))
    };
    Ok(PartitionEstimate {
        s,
        t,
        z: ln_z.exp(),
        z_stderr,
        theta,
        theta_stderr,
    })
}

pub fn empirical_partition(records: &[TrajectoryRecord], s: f64, t: f64) -> Result<PartitionEstimate> {
    let counts: Vec<u64> = records.iter().map(|r| r.count_at(t)).collect::<Result<_>>()?;
    partition_from_counts(&counts, s, t)
}

#[derive(Serialize)]
struct RecordLine<'a> {
    seed: u64,
    events: &'a [Event],
    n: u64,
}

/// Write records as JSON lines `{seed, events: [{t, kind, from, to}], n}`.
pub fn write_records<W: Write>(records: &[TrajectoryRecord], mut out: W) -> Result<()> {
    for r in records {
        let line = RecordLine {
            seed: r.seed,
            events: &r.events,
            n: r.n_emissions,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DriveParams;

    #[test]
    fn propagator_matches_series() {
        let model = ModulatedFluorophore::single(
            LevelParams { gamma: 0.7, omega: 0.2, rabi: 1.3 },
            DriveParams { omega_laser: -0.1 },
        )
        .unwrap();
        let nj = NoJump::new(&model, &model.levels[0], 0);
        let m = nj.a + Matrix2::identity() * nj.mu;
        for tau in [1e-6, 0.3, 2.0, 7.5] {
            // Scaling and squaring of the Taylor series.
            let k = 20;
            let small = m * Complex64::new(tau / f64::powi(2.0, k), 0.0);
            let mut term = Matrix2::identity();
            let mut e = Matrix2::identity();
            for j in 1..20 {
                term = term * small / Complex64::new(j as f64, 0.0);
                e += term;
            }
            for _ in 0..k {
                e = e * e;
            }
            assert!((nj.propagator(tau) - e).norm() < 1e-10, "tau = {tau}");
        }
    }

    #[test]
    fn propagator_at_exceptional_point() {
        // gamma = 2 Omega at resonance gives delta = 0 with a defective M.
        let model = ModulatedFluorophore::resonant(2.0, 1.0).unwrap();
        let nj = NoJump::new(&model, &model.levels[0], 0);
        assert!(nj.delta.norm() < 1e-7);
        let u = nj.propagator(3.0);
        let m = nj.a + Matrix2::identity() * nj.mu;
        // Derivative check by central difference.
        let h = 1e-5;
        let d = (nj.propagator(3.0 + h) - nj.propagator(3.0 - h)) / Complex64::new(2.0 * h, 0.0);
        assert!((d - m * u).norm() < 1e-8);
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_ne!(trajectory_seed(1, 0), trajectory_seed(1, 1));
        assert_ne!(trajectory_seed(1, 0), trajectory_seed(2, 0));
        assert_eq!(trajectory_seed(42, 7), trajectory_seed(42, 7));
    }

    #[test]
    fn dark_emitter_never_emits() {
        let model = ModulatedFluorophore::two_state_decay(1.0, 2.0, 0.0, 0.5, 0.5).unwrap();
        let e = simulate_ensemble(&model, 50, 100.0, 3, &SimOptions::default()).unwrap();
        assert!(e.records.iter().all(|r| r.n_emissions == 0));
        assert_eq!(e.stats.histogram, vec![50]);
        let total: f64 = e.records[0].bath_occupation.iter().sum();
        assert!((total - 100.0).abs() < 1e-9);
    }

    #[test]
    fn records_are_consistent() {
        let model = ModulatedFluorophore::two_state_decay(2.0, 0.5, 1.0, 0.05, 0.1).unwrap();
        let opts = SimOptions {
            record_events: true,
            ..SimOptions::default()
        };
        let e = simulate_ensemble(&model, 20, 200.0, 11, &opts).unwrap();
        for r in &e.records {
            assert!(r.events.windows(2).all(|w| w[1].t > w[0].t));
            assert!(r.events.iter().all(|ev| ev.t <= r.t_final));
            let n = r.events.iter().filter(|ev| ev.kind == EventKind::Emission).count() as u64;
            assert_eq!(n, r.n_emissions);
            assert_eq!(r.count_at(r.t_final).unwrap(), n);
            assert!(r.count_at(100.0).unwrap() <= n);
        }
        assert_eq!(e.stats.histogram.iter().sum::<u64>(), 20);
        let mut buf = Vec::new();
        write_records(&e.records[..2], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("{\"seed\":"));
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        assert_eq!(v["n"].as_u64().unwrap(), e.records[0].n_emissions);
    }

    #[test]
    fn invalid_runs() {
        let model = ModulatedFluorophore::resonant(2.0, 1.0).unwrap();
        assert!(simulate_ensemble(&model, 0, 1.0, 0, &SimOptions::default()).is_err());
        assert!(simulate_ensemble(&model, 1, -1.0, 0, &SimOptions::default()).is_err());
        let bad = SimOptions {
            checkpoints: vec![2.0, 1.0],
            ..SimOptions::default()
        };
        assert!(simulate_ensemble(&model, 1, 5.0, 0, &bad).is_err());
    }

    #[test]
    fn partition_trivial_cases() {
        let p = partition_from_counts(&[3, 5, 9], 0.0, 1.0).unwrap();
        assert_eq!(p.z, 1.0);
        let one = partition_from_counts(&[4], 0.5, 2.0).unwrap();
        assert!((one.z - (-2.0f64).exp()).abs() < 1e-15);
        assert!(matches!(partition_from_counts(&[], 0.5, 1.0), Err(Error::EmptyRecords)));
        let far = partition_from_counts(&[5000, 5001], 1.0, 100.0).unwrap();
        assert!(far.theta.is_finite() && far.theta > 49.0);
    }

    #[test]
    fn moments_match_two_pass() {
        let xs = [3.0, 7.0, 1.0, 4.0, 4.0, 10.0, 2.0];
        let mut m = Moments::default();
        xs.iter().for_each(|x| m.push(*x));
        let mean = xs.iter().sum::<f64>() / 7.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        let mu4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / 7.0;
        assert!((m.mean - mean).abs() < 1e-12);
        assert!((m.variance() - var).abs() < 1e-12);
        assert!((m.m4 / 7.0 - mu4).abs() < 1e-9);
    }
}
