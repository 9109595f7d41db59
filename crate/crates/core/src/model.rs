//! Physical model: per-bath-state two-level parameters, the laser drive and
//! the classical bath that hops between configurational states.
//!
//! Units: hbar = 1 and every frequency or rate is a multiple of a reference
//! Rabi frequency. Transition frequencies (`omega`) and the laser frequency
//! are measured from a common reference, so only their differences matter.

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-level parameters for one bath state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    /// Radiative decay rate.
    pub gamma: f64,
    /// Transition frequency including the bath-induced shift.
    pub omega: f64,
    /// Rabi frequency.
    pub rabi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveParams {
    pub omega_laser: f64,
}

impl DriveParams {
    /// Laser detuning `omega_laser - omega` for a given level.
    pub fn detuning(&self, level: &LevelParams) -> f64 {
        self.omega_laser - level.omega
    }
}

/// Classical bath: `rates[(r, rp)]` is the hopping rate from state `rp` into
/// state `r`. The diagonal is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct BathProcess {
    rates: DMatrix<f64>,
}

impl BathProcess {
    pub fn new(rates: DMatrix<f64>) -> Result<Self> {
        if rates.nrows() == 0 || rates.nrows() != rates.ncols() {
            return Err(Error::validation(
                "rates",
                format!("expected a non-empty square matrix, got {}x{}", rates.nrows(), rates.ncols()),
            ));
        }
        for r in 0..rates.nrows() {
            for rp in 0..rates.ncols() {
                let v = rates[(r, rp)];
                if r != rp && !(v.is_finite() && v >= 0.0) {
                    return Err(Error::validation(
                        format!("rates[{r}][{rp}]"),
                        format!("hopping rates must be finite and non-negative, got {v}"),
                    ));
                }
            }
        }
        Ok(Self { rates })
    }

    /// A single-state bath (no modulation).
    pub fn trivial() -> Self {
        Self {
            rates: DMatrix::zeros(1, 1),
        }
    }

    pub fn n_states(&self) -> usize {
        self.rates.nrows()
    }

    /// Rate of the transition `from -> to` (zero on the diagonal).
    pub fn rate(&self, to: usize, from: usize) -> f64 {
        if to == from {
            0.0
        } else {
            self.rates[(to, from)]
        }
    }

    /// Total escape rate out of `state`.
    pub fn escape_rate(&self, state: usize) -> f64 {
        (0..self.n_states()).map(|to| self.rate(to, state)).sum()
    }
}

/// Generator `W` of the bath rate equation `dP/dt = W P`; columns sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BathGenerator {
    pub matrix: DMatrix<f64>,
}

pub fn bath_generator(bath: &BathProcess) -> BathGenerator {
    let n = bath.n_states();
    let mut w = DMatrix::zeros(n, n);
    for from in 0..n {
        let mut out = 0.0;
        for to in 0..n {
            if to != from {
                let rate = bath.rate(to, from);
                w[(to, from)] = rate;
                out += rate;
            }
        }
        w[(from, from)] = -out;
    }
    BathGenerator { matrix: w }
}

/// Stationary probability vector of the bath generator.
///
/// The zero mode is required to be simple: a second singular value below
/// `1e-10` times the largest one means the bath is disconnected.
pub fn stationary_populations(gen: &BathGenerator) -> Result<Vec<f64>> {
    let w = &gen.matrix;
    let n = w.nrows();
    if n == 1 {
        return Ok(vec![1.0]);
    }

    let mut sv: Vec<f64> = w.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| a.total_cmp(b));
    let largest = sv[n - 1];
    let ratio = if largest > 0.0 { sv[1] / largest } else { 0.0 };
    if ratio < 1e-10 {
        return Err(Error::DegenerateBath { ratio });
    }

    // Replace the last balance equation by the normalisation constraint.
    let mut a = w.clone();
    for c in 0..n {
        a[(n - 1, c)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let p = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Eigen("singular stationarity system".into()))?;

    let mut p: Vec<f64> = p.iter().map(|&x| if x < 0.0 && x > -1e-12 { 0.0 } else { x }).collect();
    if let Some(bad) = p.iter().position(|&x| x < 0.0) {
        return Err(Error::Eigen(format!(
            "stationary population {bad} is negative ({})",
            p[bad]
        )));
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    Ok(p)
}

/// Rotating-frame Hamiltonian `-(delta/2) sigma_z + (rabi/2) sigma_x` in the
/// basis `(|+>, |->)`, with `delta = omega_laser - omega`.
pub fn rotating_frame_hamiltonian(level: &LevelParams, drive: &DriveParams) -> Matrix2<Complex64> {
    let delta = drive.detuning(level);
    let half_rabi = Complex64::new(level.rabi / 2.0, 0.0);
    Matrix2::new(
        Complex64::new(-delta / 2.0, 0.0),
        half_rabi,
        half_rabi,
        Complex64::new(delta / 2.0, 0.0),
    )
}

/// Full model: one set of level parameters per bath state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedFluorophore {
    pub levels: Vec<LevelParams>,
    pub drive: DriveParams,
    pub bath: BathProcess,
}

impl ModulatedFluorophore {
    pub fn new(levels: Vec<LevelParams>, drive: DriveParams, bath: BathProcess) -> Result<Self> {
        if levels.len() != bath.n_states() {
            return Err(Error::validation(
                "levels",
                format!("{} levels for a bath with {} states", levels.len(), bath.n_states()),
            ));
        }
        for (r, level) in levels.iter().enumerate() {
            validate_level(r, level)?;
        }
        if !drive.omega_laser.is_finite() {
            return Err(Error::validation("omega_laser", "must be finite"));
        }
        Ok(Self { levels, drive, bath })
    }

    /// Markovian single-state model.
    pub fn single(level: LevelParams, drive: DriveParams) -> Result<Self> {
        Self::new(vec![level], drive, BathProcess::trivial())
    }

    /// Resonantly driven single-state model.
    pub fn resonant(gamma: f64, rabi: f64) -> Result<Self> {
        Self::single(
            LevelParams {
                gamma,
                omega: 0.0,
                rabi,
            },
            DriveParams { omega_laser: 0.0 },
        )
    }

    /// Resonant two-state model with common Rabi frequency, the layout used
    /// for blinking emitters whose environment modulates only the decay rate.
    /// `phi_ab` is the rate B -> A and `phi_ba` the rate A -> B.
    pub fn two_state_decay(gamma_a: f64, gamma_b: f64, rabi: f64, phi_ab: f64, phi_ba: f64) -> Result<Self> {
        let levels = [gamma_a, gamma_b]
            .iter()
            .map(|&gamma| LevelParams {
                gamma,
                omega: 0.0,
                rabi,
            })
            .collect();
        let rates = DMatrix::from_row_slice(2, 2, &[0.0, phi_ab, phi_ba, 0.0]);
        Self::new(levels, DriveParams { omega_laser: 0.0 }, BathProcess::new(rates)?)
    }

    pub fn n_states(&self) -> usize {
        self.levels.len()
    }

    pub fn bath_generator(&self) -> BathGenerator {
        bath_generator(&self.bath)
    }

    pub fn stationary_populations(&self) -> Result<Vec<f64>> {
        stationary_populations(&self.bath_generator())
    }

    pub fn hamiltonian(&self, state: usize) -> Matrix2<Complex64> {
        rotating_frame_hamiltonian(&self.levels[state], &self.drive)
    }

    pub fn detuning(&self, state: usize) -> f64 {
        self.drive.detuning(&self.levels[state])
    }

    /// The same drive and bath restricted to one bath state.
    pub fn phase(&self, state: usize) -> Self {
        Self {
            levels: vec![self.levels[state]],
            drive: self.drive,
            bath: BathProcess::trivial(),
        }
    }
}

fn validate_level(r: usize, level: &LevelParams) -> Result<()> {
    if !(level.gamma.is_finite() && level.gamma > 0.0) {
        return Err(Error::validation(
            format!("levels[{r}].gamma"),
            format!("decay rate must be finite and positive, got {}", level.gamma),
        ));
    }
    if !level.omega.is_finite() {
        return Err(Error::validation(format!("levels[{r}].omega_shift"), "must be finite"));
    }
    if !(level.rabi.is_finite() && level.rabi >= 0.0) {
        return Err(Error::validation(
            format!("levels[{r}].rabi"),
            format!("Rabi frequency must be finite and non-negative, got {}", level.rabi),
        ));
    }
    Ok(())
}

/// One entry of the `levels` array of a configuration file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    pub gamma: f64,
    #[serde(default)]
    pub omega_shift: f64,
    pub rabi: f64,
}

/// JSON configuration record. All values are in units of the reference Rabi
/// frequency; `rates[r][rp]` is the rate of `rp -> r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_states: usize,
    pub levels: Vec<LevelConfig>,
    #[serde(default)]
    pub omega_laser: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn build(&self) -> Result<ModulatedFluorophore> {
        build_model(self)
    }
}

pub fn build_model(config: &ModelConfig) -> Result<ModulatedFluorophore> {
    let n = config.n_states;
    if n == 0 {
        return Err(Error::validation("n_states", "must be at least 1"));
    }
    if config.levels.len() != n {
        return Err(Error::validation(
            "levels",
            format!("expected {n} entries, got {}", config.levels.len()),
        ));
    }
    if let Some(alpha) = config.alpha {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::validation("alpha", format!("must be finite and non-negative, got {alpha}")));
        }
    }

    let bath = match &config.rates {
        None if n == 1 => BathProcess::trivial(),
        None => return Err(Error::validation("rates", "required when n_states > 1")),
        Some(rows) => {
            if rows.len() != n || rows.iter().any(|row| row.len() != n) {
                return Err(Error::validation("rates", format!("expected a {n}x{n} array")));
            }
            for (r, row) in rows.iter().enumerate() {
                if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::validation(format!("rates[{r}][{c}]"), "must be finite"));
                }
            }
            BathProcess::new(DMatrix::from_fn(n, n, |r, c| rows[r][c]))?
        }
    };

    let levels = config
        .levels
        .iter()
        .map(|l| LevelParams {
            gamma: l.gamma,
            omega: l.omega_shift,
            rabi: l.rabi,
        })
        .collect();
    ModulatedFluorophore::new(
        levels,
        DriveParams {
            omega_laser: config.omega_laser,
        },
        bath,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slow_bath_config() -> ModelConfig {
        ModelConfig::from_json(
            r#"{"n_states": 2,
                "levels": [{"gamma": 2.5, "omega_shift": 0.0, "rabi": 1.0},
                           {"gamma": 0.5, "omega_shift": 0.0, "rabi": 1.0}],
                "omega_laser": 0.0,
                "rates": [[0.0, 4e-4], [8e-4, 0.0]],
                "alpha": 2.15}"#,
        )
        .unwrap()
    }

    #[test]
    fn builds_two_state_model() {
        let model = build_model(&slow_bath_config()).unwrap();
        assert_eq!(model.n_states(), 2);
        assert_eq!(model.bath.rate(0, 1), 4e-4);
        assert_eq!(model.bath.rate(1, 0), 8e-4);
    }

    #[test]
    fn single_state_without_rates() {
        let cfg = ModelConfig::from_json(r#"{"n_states": 1, "levels": [{"gamma": 2.0, "rabi": 1.0}]}"#).unwrap();
        let model = build_model(&cfg).unwrap();
        assert_eq!(model.n_states(), 1);
        assert_eq!(model.stationary_populations().unwrap(), vec![1.0]);
    }

    #[test]
    fn rejects_negative_gamma() {
        let mut cfg = slow_bath_config();
        cfg.levels[1].gamma = -1.0;
        match build_model(&cfg) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "levels[1].gamma"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_rates() {
        let mut cfg = slow_bath_config();
        cfg.rates = Some(vec![vec![0.0, -1e-3], vec![8e-4, 0.0]]);
        match build_model(&cfg) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "rates[0][1]"),
            other => panic!("unexpected {other:?}"),
        }
        cfg.rates = Some(vec![vec![0.0, 1e-3]]);
        assert!(matches!(build_model(&cfg), Err(Error::Validation { .. })));
        cfg.rates = Some(vec![vec![0.0, f64::NAN], vec![8e-4, 0.0]]);
        assert!(matches!(build_model(&cfg), Err(Error::Validation { .. })));
        cfg.rates = None;
        assert!(matches!(build_model(&cfg), Err(Error::Validation { .. })));
    }

    #[test]
    fn rejects_dimension_mismatch_and_non_finite() {
        let mut cfg = slow_bath_config();
        cfg.n_states = 3;
        assert!(matches!(build_model(&cfg), Err(Error::Validation { .. })));
        let mut cfg = slow_bath_config();
        cfg.levels[0].rabi = f64::INFINITY;
        assert!(matches!(build_model(&cfg), Err(Error::Validation { .. })));
        let mut cfg = slow_bath_config();
        cfg.omega_laser = f64::NAN;
        assert!(matches!(build_model(&cfg), Err(Error::Validation { .. })));
    }

    #[test]
    fn symmetric_generator() {
        let phi = 0.7;
        let bath = BathProcess::new(DMatrix::from_row_slice(2, 2, &[0.0, phi, phi, 0.0])).unwrap();
        let w = bath_generator(&bath).matrix;
        assert_eq!(w, DMatrix::from_row_slice(2, 2, &[-phi, phi, phi, -phi]));
        assert_eq!(stationary_populations(&bath_generator(&bath)).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn trivial_generator() {
        let w = bath_generator(&BathProcess::trivial());
        assert_eq!(w.matrix, DMatrix::zeros(1, 1));
    }

    #[test]
    fn slow_bath_generator_and_populations() {
        let model = build_model(&slow_bath_config()).unwrap();
        let w = model.bath_generator().matrix;
        for c in 0..2 {
            assert_eq!(w.column(c).sum(), 0.0);
        }
        let p = model.stationary_populations().unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disconnected_bath_is_an_error() {
        let bath = BathProcess::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            stationary_populations(&bath_generator(&bath)),
            Err(Error::DegenerateBath { .. })
        ));
        // Two closed classes out of three states.
        let rates = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let bath = BathProcess::new(rates).unwrap();
        assert!(matches!(
            stationary_populations(&bath_generator(&bath)),
            Err(Error::DegenerateBath { .. })
        ));
    }

    #[test]
    fn hamiltonian_examples() {
        let drive = DriveParams { omega_laser: 0.0 };
        let h = rotating_frame_hamiltonian(&LevelParams { gamma: 1.0, omega: 0.0, rabi: 1.3 }, &drive);
        assert_eq!(h[(0, 0)], Complex64::new(0.0, 0.0));
        assert_eq!(h[(0, 1)], Complex64::new(0.65, 0.0));
        assert_eq!(h[(1, 1)], Complex64::new(0.0, 0.0));

        let h = rotating_frame_hamiltonian(&LevelParams { gamma: 1.0, omega: -0.8, rabi: 0.0 }, &drive);
        assert_eq!(h[(0, 0)], Complex64::new(-0.4, 0.0));
        assert_eq!(h[(1, 1)], Complex64::new(0.4, 0.0));
        assert_eq!(h[(0, 1)], Complex64::new(0.0, 0.0));

        // delta = 1, rabi = 2.
        let h = rotating_frame_hamiltonian(&LevelParams { gamma: 1.0, omega: -1.0, rabi: 2.0 }, &drive);
        let expected = Matrix2::new(-0.5, 1.0, 1.0, 0.5).map(|x| Complex64::new(x, 0.0));
        assert_eq!(h, expected);
        assert_eq!(h, h.adjoint());
        // Characteristic polynomial x^2 - tr x + det with tr = 0.
        let det = (h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)]).re;
        let root = (-det).sqrt();
        assert!((root - (1.0f64 + 4.0).sqrt() / 2.0).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn two_state_populations_match_closed_form(ab in 1e-6f64..10.0, ba in 1e-6f64..10.0) {
                let bath = BathProcess::new(DMatrix::from_row_slice(2, 2, &[0.0, ab, ba, 0.0])).unwrap();
                let gen = bath_generator(&bath);
                let p = stationary_populations(&gen).unwrap();
                prop_assert!((p[0] - ab / (ab + ba)).abs() < 1e-12);
                prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            }

            #[test]
            fn generator_columns_vanish_and_populations_are_stationary(
                rates in proptest::collection::vec(0.01f64..5.0, 16),
            ) {
                let bath = BathProcess::new(DMatrix::from_row_slice(4, 4, &rates)).unwrap();
                let gen = bath_generator(&bath);
                for c in 0..4 {
                    let off: f64 = (0..4).filter(|&r| r != c).map(|r| gen.matrix[(r, c)]).sum();
                    prop_assert_eq!(gen.matrix[(c, c)], -off);
                }
                let p = stationary_populations(&gen).unwrap();
                let pv = DVector::from_vec(p.clone());
                let residual = (&gen.matrix * &pv).norm();
                prop_assert!(residual <= 1e-12 * gen.matrix.norm());
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&x| x >= 0.0));
            }

            #[test]
            fn hamiltonian_is_hermitian(delta in -10.0f64..10.0, rabi in 0.0f64..10.0) {
                let h = rotating_frame_hamiltonian(
                    &LevelParams { gamma: 1.0, omega: -delta, rabi },
                    &DriveParams { omega_laser: 0.0 },
                );
                let diff = h - h.adjoint();
                prop_assert!(diff.iter().all(|z| z.norm() <= 1e-15));
            }
        }
    }
}
