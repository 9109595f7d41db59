use std::fs::File;
use std::io::BufWriter;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use jumpthermo::analytic::{self, WeightMode};
use jumpthermo::counting::{self, InitialCondition};
use jumpthermo::liouville::{self, Sweep};
use jumpthermo::numeric::linspace;
use jumpthermo::trajectory::{self, SimOptions};
use jumpthermo::{ModelConfig, ModulatedFluorophore};

use crate::args::*;
use crate::output::{to_json, Csv};

/// Result of one command. `data` goes to `--out` (or stdout); `report`, if
/// present, always goes to stdout.
pub struct Output {
    pub data: String,
    pub report: Option<String>,
    pub seed: Option<u64>,
}

impl Output {
    fn data(data: String) -> Self {
        Self {
            data,
            report: None,
            seed: None,
        }
    }
}

/// Points that failed inside an otherwise completed sweep.
#[derive(Debug)]
pub struct SweepFailed {
    pub partial: Output,
    pub failures: Vec<(f64, jumpthermo::Error)>,
}

impl std::fmt::Display for SweepFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} sweep point(s) failed", self.failures.len())?;
        if let Some((s, e)) = self.failures.first() {
            write!(f, "; first at s = {s}: {e}")?;
        }
        Ok(())
    }
}

impl std::fmt::Debug for Output {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Output").field("bytes", &self.data.len()).finish()
    }
}

impl std::error::Error for SweepFailed {}

fn grid(s_min: f64, s_max: f64, points: usize) -> Result<Vec<f64>> {
    if !(s_min.is_finite() && s_max.is_finite()) || points == 0 || (points > 1 && !(s_max > s_min)) {
        bail!("invalid s grid: [{s_min}, {s_max}] with {points} points");
    }
    Ok(linspace(s_min, s_max, points))
}

fn finish_sweep(sweep: Sweep, out: Output) -> Result<Output> {
    if sweep.failures.is_empty() {
        Ok(out)
    } else {
        Err(SweepFailed {
            partial: out,
            failures: sweep.failures.into_iter().map(|f| (f.s, f.error)).collect(),
        }
        .into())
    }
}

pub fn theta(model: &ModulatedFluorophore, a: &ThetaArgs) -> Result<Output> {
    let s = grid(a.s_min, a.s_max, a.points)?;
    let sweep = liouville::sweep(model, &s);
    let mut header: Vec<String> = ["s", "theta", "mean", "variance"].iter().map(|h| h.to_string()).collect();
    header.extend((1..=model.n_states()).map(|r| format!("pop_{r}")));
    let mut csv = Csv::new(&header);
    for p in &sweep.points {
        let mut row = vec![p.s, p.theta, p.mean, p.variance];
        row.extend(&p.pops);
        csv.row(&row);
    }
    finish_sweep(sweep, Output::data(csv.into_string()))
}

pub fn fast_limit(model: &ModulatedFluorophore, a: &FastLimitArgs) -> Result<Output> {
    let s = grid(a.s_min, a.s_max, a.points)?;
    let avg = analytic::averaged_parameters(model)?;
    let level = avg.level();
    let sweep = liouville::sweep(model, &s);
    let mut csv = Csv::new(&[
        "s",
        "theta_full",
        "theta_avg",
        "mean_full",
        "variance_full",
        "fano_full",
        "mean_avg",
        "variance_avg",
        "fano_avg",
    ]);
    for p in &sweep.points {
        let th = analytic::phase_theta(&level, &model.drive, p.s)?;
        let c = analytic::phase_cumulants(&level, &model.drive, p.s)?;
        csv.row(&[
            p.s,
            p.theta,
            th,
            p.mean,
            p.variance,
            p.variance / p.mean,
            c.mean,
            c.variance,
            c.fano(),
        ]);
    }
    finish_sweep(sweep, Output::data(csv.into_string()))
}

#[derive(Serialize)]
struct NumericPeak {
    s: f64,
    height: f64,
    fwhm: Option<f64>,
    mean: f64,
}

#[derive(Serialize)]
struct SlowLimitReport {
    s_p: f64,
    height: f64,
    width: f64,
    mean_at_peak: f64,
    eps0: f64,
    d_eps: f64,
    alpha: f64,
    phi_tot: f64,
    relabeled: bool,
    phase_a: usize,
    phase_b: usize,
    variance_s0: f64,
    numeric_peak: Option<NumericPeak>,
}

/// Full width at half maximum by linear interpolation of the crossings.
fn fwhm(s: &[f64], v: &[f64], peak: usize) -> Option<f64> {
    let half = 0.5 * v[peak];
    let cross = |i: usize, j: usize| s[i] + (half - v[i]) * (s[j] - s[i]) / (v[j] - v[i]);
    let left = (0..peak).rev().find(|&i| v[i] < half).map(|i| cross(i, i + 1))?;
    let right = (peak + 1..v.len()).find(|&i| v[i] < half).map(|i| cross(i - 1, i))?;
    Some(right - left)
}

pub fn slow_limit(model: &ModulatedFluorophore, config: &ModelConfig, a: &SlowLimitArgs) -> Result<Output> {
    let approx = analytic::slow_mod_params(model, config.alpha)?;
    let peak = analytic::peak_scaling(model)?;
    let sigma = approx.sigma_p();
    let s = grid(
        a.grid.s_min.unwrap_or(approx.s_p - 3.0 * sigma),
        a.grid.s_max.unwrap_or(approx.s_p + 3.0 * sigma),
        a.grid.points.unwrap_or(201),
    )?;
    let sweep = liouville::sweep(model, &s);
    let [ia, ib] = approx.mapping;
    let mut csv = Csv::new(&[
        "s",
        "theta",
        "mean",
        "variance",
        "pop_a",
        "slow_mean",
        "slow_variance",
        "slow_pop_a",
    ]);
    for p in &sweep.points {
        let c = analytic::slow_cumulants_with(&approx, p.s)?;
        csv.row(&[p.s, p.theta, p.mean, p.variance, p.pops[ia], c.mean, c.variance, c.pop_a]);
    }
    let numeric_peak = sweep
        .points
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.variance.total_cmp(&y.1.variance))
        .map(|(k, p)| {
            let ss: Vec<f64> = sweep.points.iter().map(|q| q.s).collect();
            let vv: Vec<f64> = sweep.points.iter().map(|q| q.variance).collect();
            NumericPeak {
                s: p.s,
                height: p.variance,
                fwhm: fwhm(&ss, &vv, k),
                mean: p.mean,
            }
        });
    let report = SlowLimitReport {
        s_p: peak.s_p,
        height: peak.height,
        width: peak.width,
        mean_at_peak: peak.mean_at_peak,
        eps0: approx.eps0,
        d_eps: approx.d_eps,
        alpha: approx.alpha,
        phi_tot: approx.phi_tot,
        relabeled: approx.relabeled,
        phase_a: ia,
        phase_b: ib,
        variance_s0: analytic::variance_s0(model)?,
        numeric_peak,
    };
    let out = Output {
        data: csv.into_string(),
        report: Some(to_json(&report)?),
        seed: None,
    };
    finish_sweep(sweep, out)
}

pub fn distribution(model: &ModulatedFluorophore, config: &ModelConfig, a: &DistributionArgs) -> Result<Output> {
    if a.points < 2 {
        bail!("--points must be at least 2");
    }
    let approx = analytic::slow_mod_params(model, config.alpha)?;
    let mode = match a.weights {
        Weights::Linear => WeightMode::Linear,
        Weights::GrandPotential => WeightMode::GrandPotential,
    };
    let mut csv = Csv::new(&["s", "n", "pdf", "weight_a", "weight_b"]);
    for &s in &a.s {
        let dg = analytic::double_gaussian_with(&approx, s, mode)?;
        let (lo, hi) = dg.support();
        for n in linspace(lo, hi, a.points) {
            csv.row(&[s, n, dg.pdf(n), dg.weights[0], dg.weights[1]]);
        }
    }
    Ok(Output::data(csv.into_string()))
}

#[derive(Serialize)]
struct EnsembleEntry {
    s: f64,
    z: f64,
    z_generating: f64,
    grand_potential: f64,
    entropy: f64,
    internal_energy: f64,
    particle_number: f64,
    residual: f64,
    q: Vec<f64>,
}

#[derive(Serialize)]
struct CountingReport {
    t: f64,
    initial_condition: InitialCondition,
    n_max: usize,
    tail_mass: f64,
    mean: f64,
    variance: f64,
    probs: Vec<f64>,
    ensembles: Vec<EnsembleEntry>,
}

pub fn counting(model: &ModulatedFluorophore, a: &CountingArgs) -> Result<Output> {
    let init = if a.cold_start {
        InitialCondition::Ground
    } else {
        InitialCondition::Stationary
    };
    let dist = counting::integrate_hierarchy_from(model, a.t, a.tail_tol, init)?;
    let ensembles = a
        .s
        .iter()
        .map(|&s| {
            let e = counting::s_ensemble(&dist, s)?;
            Ok(EnsembleEntry {
                s,
                z: e.z,
                z_generating: counting::integrate_generating_from(model, s, a.t, init)?,
                grand_potential: e.grand_potential,
                entropy: e.entropy,
                internal_energy: e.internal_energy,
                particle_number: e.particle_number,
                residual: e.residual,
                q: e.q,
            })
        })
        .collect::<jumpthermo::Result<Vec<_>>>()?;
    let report = CountingReport {
        t: dist.t,
        initial_condition: init,
        n_max: dist.n_max(),
        tail_mass: dist.tail_mass,
        mean: dist.mean(),
        variance: dist.variance(),
        probs: dist.probs.clone(),
        ensembles,
    };
    Ok(Output::data(to_json(&report)?))
}

#[derive(Serialize)]
struct SimulateReport {
    sampler: &'static str,
    seed: u64,
    stats: trajectory::EnsembleStats,
    partition: Vec<trajectory::PartitionEstimate>,
}

pub fn simulate(model: &ModulatedFluorophore, a: &SimulateArgs) -> Result<Output> {
    let record_events = a.records.is_some();
    let (sampler, ensemble) = if a.doubly_stochastic {
        if !a.checkpoints.is_empty() || a.cold_start {
            bail!("--checkpoints and --cold-start apply only to the full dynamics");
        }
        (
            "doubly_stochastic",
            trajectory::doubly_stochastic_sample(model, a.trajectories, a.t_max, a.seed, record_events)?,
        )
    } else {
        let opts = SimOptions {
            init: if a.cold_start {
                InitialCondition::Ground
            } else {
                InitialCondition::Stationary
            },
            checkpoints: a.checkpoints.clone(),
            record_events,
        };
        ("quantum_jump", trajectory::simulate_ensemble(model, a.trajectories, a.t_max, a.seed, &opts)?)
    };
    if let Some(path) = &a.records {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        trajectory::write_records(&ensemble.records, BufWriter::new(file))?;
    }
    let counts = ensemble.counts();
    let partition = a
        .s
        .iter()
        .map(|&s| trajectory::partition_from_counts(&counts, s, a.t_max))
        .collect::<jumpthermo::Result<Vec<_>>>()?;
    let report = SimulateReport {
        sampler,
        seed: a.seed,
        stats: ensemble.stats,
        partition,
    };
    Ok(Output {
        data: to_json(&report)?,
        report: None,
        seed: Some(a.seed),
    })
}

pub fn rate_function(model: &ModulatedFluorophore, a: &RateFunctionArgs) -> Result<Output> {
    let s = grid(a.s_min, a.s_max, a.s_points)?;
    if !(a.n_max >= a.n_min) || a.n_points == 0 {
        bail!("invalid N grid: [{}, {}] with {} points", a.n_min, a.n_max, a.n_points);
    }
    let n = linspace(a.n_min, a.n_max, a.n_points);
    let pts = analytic::rate_function(|x| liouville::theta(model, x), &s, &n)?;
    let mut csv = Csv::new(&["n", "phi", "s_star", "reliable"]);
    for p in pts {
        csv.row(&[p.n, p.phi, p.s_star, if p.reliable { 1.0 } else { 0.0 }]);
    }
    Ok(Output::data(csv.into_string()))
}
