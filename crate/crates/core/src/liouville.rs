//! Tilted generator acting on the stacked auxiliary density matrices and the
//! grand potential extracted from its leading eigenvalue.
//!
//! Each 2x2 block is vectorized column-major (`vec(X)[i + 2j] = X[i][j]`) in
//! the basis `(|+>, |->)`, and block `r` occupies entries `4r..4r+4`. The
//! tilted generator of block `r` is
//!
//! ```text
//! -i[H_r, X_r] + gamma_r (-1/2 {s+s, X_r} + e^{-s} s X_r s+) + sum_r' W[r][r'] X_r'
//! ```
//!
//! with `s = sigma = |-><+|` and `W` the bath generator. The grand potential
//! is `theta(s) = -lambda_max`.

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ModulatedFluorophore;
use crate::numeric::poly::{bisect, characteristic_polynomial, Poly};

pub const DEFAULT_MAX_DIM: usize = 400;
/// Default finite-difference step for the cumulants.
pub const DEFAULT_STEP: f64 = 1e-4;
pub const IMAG_TOL: f64 = 1e-9;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Index of `X[i][j]` in the column-stacked vectorization of a 2x2 block.
#[inline]
pub fn vec_index(i: usize, j: usize) -> usize {
    i + 2 * j
}

/// Column-stacked vectorization of a list of 2x2 blocks.
pub fn stack(blocks: &[Matrix2<Complex64>]) -> DVector<Complex64> {
    DVector::from_iterator(blocks.len() * 4, blocks.iter().flat_map(|b| b.iter().copied()))
}

/// Inverse of [`stack`].
pub fn unstack(v: &[Complex64]) -> Vec<Matrix2<Complex64>> {
    v.chunks_exact(4).map(Matrix2::from_column_slice).collect()
}

pub(crate) fn lowering() -> Matrix2<Complex64> {
    Matrix2::new(ZERO, ZERO, ONE, ZERO)
}

/// `vec(A X B) = (B^T kron A) vec(X)`.
fn sandwich(a: &Matrix2<Complex64>, b: &Matrix2<Complex64>) -> nalgebra::Matrix4<Complex64> {
    b.transpose().kronecker(a)
}

/// Generator split into the count-preserving part and the photon-jump part:
/// the tilted generator is `no_jump + e^{-s} jump`.
#[derive(Debug, Clone)]
pub struct GeneratorParts {
    pub no_jump: DMatrix<Complex64>,
    pub jump: DMatrix<Complex64>,
}

impl GeneratorParts {
    pub fn new(model: &ModulatedFluorophore) -> Self {
        let n = model.n_states();
        let dim = 4 * n;
        let mut no_jump = DMatrix::zeros(dim, dim);
        let mut jump = DMatrix::zeros(dim, dim);
        let id = Matrix2::<Complex64>::identity();
        let sigma = lowering();
        let excited = sigma.adjoint() * sigma;
        let w = model.bath_generator().matrix;

        for r in 0..n {
            let h = model.hamiltonian(r);
            let gamma = model.levels[r].gamma;
            let minus_i = Complex64::new(0.0, -1.0);
            let coherent = (sandwich(&h, &id) - sandwich(&id, &h)) * minus_i;
            let damping = (sandwich(&excited, &id) + sandwich(&id, &excited)) * Complex64::new(-0.5 * gamma, 0.0);
            let feed = sandwich(&sigma, &sigma.adjoint()) * Complex64::new(gamma, 0.0);
            let base = 4 * r;
            for a in 0..4 {
                for b in 0..4 {
                    no_jump[(base + a, base + b)] = coherent[(a, b)] + damping[(a, b)];
                    jump[(base + a, base + b)] = feed[(a, b)];
                }
            }
            for rp in 0..n {
                let rate = w[(r, rp)];
                if rate != 0.0 {
                    for a in 0..4 {
                        no_jump[(base + a, 4 * rp + a)] += Complex64::new(rate, 0.0);
                    }
                }
            }
        }
        Self { no_jump, jump }
    }

    pub fn tilted(&self, s: f64) -> DMatrix<Complex64> {
        &self.no_jump + &self.jump * Complex64::new((-s).exp(), 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct TiltedGenerator {
    pub s: f64,
    pub n_states: usize,
    pub matrix: DMatrix<Complex64>,
}

impl TiltedGenerator {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Apply the generator to stacked blocks.
    pub fn apply(&self, blocks: &[Matrix2<Complex64>]) -> Vec<Matrix2<Complex64>> {
        let v = &self.matrix * stack(blocks);
        unstack(v.as_slice())
    }
}

pub fn build_tilted_generator(model: &ModulatedFluorophore, s: f64) -> TiltedGenerator {
    TiltedGenerator {
        s,
        n_states: model.n_states(),
        matrix: GeneratorParts::new(model).tilted(s),
    }
}

/// Leading eigenvalue with its left and right eigenvectors.
///
/// `right` is normalized so that the traces of its blocks sum to one and
/// `left` so that `left^H right = 1`.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub lambda_max: Complex64,
    pub right: DVector<Complex64>,
    pub left: DVector<Complex64>,
    pub gap: f64,
    /// Set when the gap is below `1e-8` times the spectral radius.
    pub near_degenerate: bool,
}

impl SpectralData {
    pub fn right_blocks(&self) -> Vec<Matrix2<Complex64>> {
        unstack(self.right.as_slice())
    }

    pub fn left_blocks(&self) -> Vec<Matrix2<Complex64>> {
        unstack(self.left.as_slice())
    }

    /// Per-block pairing `Tr[l_r^H g_r]`; sums to one.
    pub fn block_weights(&self) -> Vec<Complex64> {
        self.left
            .as_slice()
            .chunks_exact(4)
            .zip(self.right.as_slice().chunks_exact(4))
            .map(|(l, g)| l.iter().zip(g).map(|(a, b)| a.conj() * b).sum())
            .collect()
    }

    /// Real part of the leading eigenvalue after checking it is real.
    pub fn real_lambda(&self) -> Result<f64> {
        let lam = self.lambda_max;
        let residue = lam.im.abs();
        let tolerance = IMAG_TOL * lam.re.abs().max(1.0);
        if residue > tolerance {
            return Err(Error::ImaginaryResidue {
                quantity: "leading eigenvalue",
                residue,
                tolerance,
            });
        }
        Ok(lam.re)
    }
}

fn trace_functional(v: &[Complex64]) -> Complex64 {
    v.chunks_exact(4).map(|b| b[vec_index(0, 0)] + b[vec_index(1, 1)]).sum()
}

/// Solve `(A - mu) x = b` repeatedly, normalizing in between.
fn inverse_iteration(lu: &nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>, start: DVector<Complex64>) -> Option<DVector<Complex64>> {
    let mut x = start;
    for _ in 0..3 {
        let y = lu.solve(&x)?;
        let norm = y.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return None;
        }
        x = y / Complex64::new(norm, 0.0);
    }
    Some(x)
}

pub fn leading_eigen(gen: &TiltedGenerator) -> Result<SpectralData> {
    leading_eigen_with_limit(gen, DEFAULT_MAX_DIM)
}

pub fn leading_eigen_with_limit(gen: &TiltedGenerator, max_dim: usize) -> Result<SpectralData> {
    let a = &gen.matrix;
    let n = a.nrows();
    if n > max_dim {
        return Err(Error::Unsupported(format!(
            "generator dimension {n} exceeds the dense limit {max_dim}"
        )));
    }
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen("Schur iteration did not converge".into()))?;
    let mut eig: Vec<Complex64> = schur
        .eigenvalues()
        .ok_or_else(|| Error::Eigen("no eigenvalues from Schur form".into()))?
        .iter()
        .copied()
        .collect();
    eig.sort_by(|x, y| y.re.total_cmp(&x.re));
    let radius = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let scale = radius.max(a.norm() / (n as f64).sqrt()).max(1e-300);

    // Candidates tied for the largest real part.
    let tie_tol = 1e-12 * scale;
    let n_tied = eig.iter().take_while(|z| z.re >= eig[0].re - tie_tol).count();

    let ones = DVector::from_element(n, ONE);
    let mut best: Option<(usize, DVector<Complex64>, f64)> = None;
    for (idx, lam) in eig.iter().enumerate().take(n_tied) {
        let shift = *lam + Complex64::new(1e-13 * scale, 0.0);
        let shifted = a - DMatrix::<Complex64>::identity(n, n) * shift;
        let right = inverse_iteration(&shifted.lu(), ones.clone())
            .ok_or_else(|| Error::Eigen("inverse iteration for the right eigenvector failed".into()))?;
        let overlap = trace_functional(right.as_slice()).norm();
        if best.as_ref().is_none_or(|(_, _, o)| overlap > *o) {
            best = Some((idx, right, overlap));
        }
    }
    let (chosen, right, _) = best.expect("at least one candidate");
    let lam0 = eig[chosen];

    let shift = lam0 + Complex64::new(1e-13 * scale, 0.0);
    let shifted_adj = (a - DMatrix::<Complex64>::identity(n, n) * shift).adjoint();
    let left = inverse_iteration(&shifted_adj.lu(), ones)
        .ok_or_else(|| Error::Eigen("inverse iteration for the left eigenvector failed".into()))?;

    let pairing = left.dotc(&right);
    if pairing.norm() < 1e-14 {
        return Err(Error::Eigen("left and right leading eigenvectors are orthogonal".into()));
    }
    // Two-sided Rayleigh quotient.
    let lambda_max = left.dotc(&(a * &right)) / pairing;

    let tr = trace_functional(right.as_slice());
    if tr.norm() < 1e-300 {
        return Err(Error::Eigen("leading right eigenvector has zero trace".into()));
    }
    let right = right / tr;
    let pairing = left.dotc(&right);
    let left = left / pairing.conj();

    let gap = eig
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != chosen)
        .map(|(_, z)| lambda_max.re - z.re)
        .fold(f64::INFINITY, f64::min);
    let gap = if gap.is_finite() { gap.max(0.0) } else { f64::INFINITY };
    let near_degenerate = gap < 1e-8 * radius;
    if near_degenerate {
        log::warn!("near-degenerate leading eigenvalue at s = {} (gap {gap:.3e})", gen.s);
    }

    Ok(SpectralData {
        lambda_max,
        right,
        left,
        gap,
        near_degenerate,
    })
}

/// Grand potential `theta(s) = -lambda_max(s)`.
pub fn theta(model: &ModulatedFluorophore, s: f64) -> Result<f64> {
    Ok(-leading_eigen(&build_tilted_generator(model, s))?.real_lambda()?)
}

/// Grand potential from the largest real root of `det(u - L_s) = 0`, without
/// any eigenvalue solver. Restricted to one or two bath states.
pub fn theta_poly(model: &ModulatedFluorophore, s: f64) -> Result<f64> {
    if model.n_states() > 2 {
        return Err(Error::Unsupported(format!(
            "polynomial-root route supports at most 2 bath states, got {}",
            model.n_states()
        )));
    }
    let a = build_tilted_generator(model, s).matrix;
    let n = a.nrows();
    let coeffs = characteristic_polynomial(&a);
    let lead_scale = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if let Some(bad) = coeffs.iter().find(|c| c.im.abs() > 1e-8 * lead_scale.max(1.0)) {
        return Err(Error::ImaginaryResidue {
            quantity: "characteristic polynomial coefficient",
            residue: bad.im.abs(),
            tolerance: 1e-8 * lead_scale.max(1.0),
        });
    }
    let poly = Poly(coeffs.iter().map(|c| c.re).collect());
    let roots = poly.real_roots();
    let bound = poly.root_bound();
    let root = *roots.last().ok_or_else(|| Error::RootNotFound {
        reason: "characteristic polynomial has no real root".into(),
        lo: -bound,
        hi: bound,
    })?;

    // Polish against the determinant itself, evaluated by LU.
    let det = |u: f64| -> f64 {
        let shifted = DMatrix::<Complex64>::identity(n, n) * Complex64::new(u, 0.0) - &a;
        shifted.lu().determinant().re
    };
    let scale = a.norm().max(1.0);
    let mut delta = 1e-7 * scale;
    for _ in 0..6 {
        let (lo, hi) = (root - delta, root + delta);
        if det(lo).signum() != det(hi).signum() {
            let polished = bisect(det, lo, hi, 0.0, 200).ok_or_else(|| Error::RootNotFound {
                reason: "lost sign change while polishing".into(),
                lo,
                hi,
            })?;
            return Ok(-polished);
        }
        delta *= 0.1;
    }
    Err(Error::RootNotFound {
        reason: "no sign change of det(u - L) around the polynomial root".into(),
        lo: root - 10.0 * delta,
        hi: root + 10.0 * delta,
    })
}

/// First two scaled cumulants of the photon count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cumulants {
    pub mean: f64,
    pub variance: f64,
}

impl Cumulants {
    pub fn fano(&self) -> f64 {
        self.variance / self.mean
    }
}

/// Relative roundoff of one spectral evaluation.
const SPECTRAL_NOISE: f64 = 1e-15;
/// Largest tolerated roundoff contribution to a differentiated quantity.
const NOISE_FLOOR: f64 = 1e-4;

/// Derivative of `f` at `x` from five-point central stencils at `h` and
/// `2h`, combined by one Richardson extrapolation.
pub fn richardson_derivative<F>(f: F, x: f64, h: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let p1 = f(x + h)?;
    let m1 = f(x - h)?;
    let p2 = f(x + 2.0 * h)?;
    let m2 = f(x - 2.0 * h)?;
    let p4 = f(x + 4.0 * h)?;
    let m4 = f(x - 4.0 * h)?;
    let d_h = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    let d_2h = (8.0 * (p2 - m2) - (p4 - m4)) / (24.0 * h);
    Ok((16.0 * d_h - d_2h) / 15.0)
}

fn check_step(h: f64, magnitude: f64) -> Result<()> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::validation("h", format!("step must be positive, got {h}")));
    }
    // The first-derivative stencil amplifies roundoff by about 2 / h.
    let noise = 2.0 * SPECTRAL_NOISE * magnitude.max(1.0);
    if noise / h > NOISE_FLOOR {
        return Err(Error::StepTooSmall {
            h,
            suggested: noise / NOISE_FLOOR,
        });
    }
    Ok(())
}

/// `theta'(s)` from the leading eigenpair: `e^{-s} l^H J g` with `l^H g = 1`.
fn mean_from(parts: &GeneratorParts, spec: &SpectralData, s: f64) -> Result<f64> {
    let m = spec.left.dotc(&(&parts.jump * &spec.right)) * (-s).exp();
    let tolerance = IMAG_TOL * m.re.abs().max(1.0);
    if m.im.abs() > tolerance {
        return Err(Error::ImaginaryResidue {
            quantity: "mean count rate",
            residue: m.im.abs(),
            tolerance,
        });
    }
    Ok(m.re)
}

struct Solver {
    parts: GeneratorParts,
    n_states: usize,
}

impl Solver {
    fn new(model: &ModulatedFluorophore) -> Self {
        Self {
            parts: GeneratorParts::new(model),
            n_states: model.n_states(),
        }
    }

    fn spectral(&self, s: f64) -> Result<SpectralData> {
        leading_eigen(&TiltedGenerator {
            s,
            n_states: self.n_states,
            matrix: self.parts.tilted(s),
        })
    }

    fn mean(&self, s: f64) -> Result<f64> {
        mean_from(&self.parts, &self.spectral(s)?, s)
    }

    fn point(&self, s: f64, h: f64) -> Result<ThermoPoint> {
        let spec = self.spectral(s)?;
        let theta = -spec.real_lambda()?;
        let pops = populations_from(&spec)?;
        let mean = mean_from(&self.parts, &spec, s)?;
        check_step(h, mean)?;
        let variance = -richardson_derivative(|x| self.mean(x), s, h)?;
        Ok(ThermoPoint {
            s,
            theta,
            mean,
            variance,
            pops,
        })
    }
}

/// `mean = theta'(s)` from the eigenvalue derivative and
/// `variance = -theta''(s)` by differentiating the mean numerically.
pub fn cumulants(model: &ModulatedFluorophore, s: f64, h: f64) -> Result<Cumulants> {
    let p = Solver::new(model).point(s, h)?;
    Ok(Cumulants {
        mean: p.mean,
        variance: p.variance,
    })
}

fn populations_from(spec: &SpectralData) -> Result<Vec<f64>> {
    let weights = spec.block_weights();
    let total: Complex64 = weights.iter().sum();
    let mut out = Vec::with_capacity(weights.len());
    for w in &weights {
        let p = w / total;
        if p.im.abs() > IMAG_TOL {
            return Err(Error::ImaginaryResidue {
                quantity: "s-ensemble bath population",
                residue: p.im.abs(),
                tolerance: IMAG_TOL,
            });
        }
        out.push(p.re);
    }
    Ok(out)
}

/// Bath populations of the s-ensemble, `Tr[l_r g_r] / sum_r' Tr[l_r' g_r']`.
pub fn s_populations(model: &ModulatedFluorophore, s: f64) -> Result<Vec<f64>> {
    populations_from(&leading_eigen(&build_tilted_generator(model, s))?)
}

/// Thermodynamic data at one value of `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermoPoint {
    pub s: f64,
    pub theta: f64,
    pub mean: f64,
    pub variance: f64,
    pub pops: Vec<f64>,
}

pub fn thermo_point(model: &ModulatedFluorophore, s: f64) -> Result<ThermoPoint> {
    Solver::new(model).point(s, DEFAULT_STEP)
}

#[derive(Debug)]
pub struct SweepFailure {
    pub s: f64,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct Sweep {
    pub points: Vec<ThermoPoint>,
    pub failures: Vec<SweepFailure>,
}

/// Independent thermodynamic points over an s grid, returned in grid order.
pub fn sweep(model: &ModulatedFluorophore, s_grid: &[f64]) -> Sweep {
    let solver = Solver::new(model);
    let results: Vec<_> = s_grid
        .par_iter()
        .map(|&s| (s, solver.point(s, DEFAULT_STEP)))
        .collect();
    let mut out = Sweep::default();
    for (s, r) in results {
        match r {
            Ok(p) => out.points.push(p),
            Err(error) => out.failures.push(SweepFailure { s, error }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BathProcess, DriveParams, LevelParams};

    fn slow_bath() -> ModulatedFluorophore {
        ModulatedFluorophore::two_state_decay(2.5, 0.5, 1.0, 4e-4, 8e-4).unwrap()
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Direct evaluation of the master-equation right-hand side, written
    /// with plain 2x2 arithmetic and no vectorization.
    fn rhs_direct(model: &ModulatedFluorophore, s: f64, x: &[Matrix2<Complex64>]) -> Vec<Matrix2<Complex64>> {
        let n = model.n_states();
        let sigma = Matrix2::new(ZERO, ZERO, ONE, ZERO);
        let sd = sigma.adjoint();
        (0..n)
            .map(|r| {
                let h = model.hamiltonian(r);
                let g = model.levels[r].gamma;
                let xr = x[r];
                let mut out = (h * xr - xr * h) * c(0.0, -1.0);
                out += ((sd * sigma * xr + xr * sd * sigma) * c(-0.5, 0.0) + sigma * xr * sd * c((-s).exp(), 0.0)) * c(g, 0.0);
                for rp in 0..n {
                    if rp != r {
                        out += x[rp] * c(model.bath.rate(r, rp), 0.0);
                        out -= xr * c(model.bath.rate(rp, r), 0.0);
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn dimensions() {
        assert_eq!(build_tilted_generator(&slow_bath(), 0.3).dim(), 8);
        assert_eq!(build_tilted_generator(&ModulatedFluorophore::resonant(2.0, 1.0).unwrap(), 0.3).dim(), 4);
    }

    #[test]
    fn trace_covector_annihilates_at_zero() {
        let gen = build_tilted_generator(&slow_bath(), 0.0);
        let mut cov = DVector::zeros(8);
        for r in 0..2 {
            cov[4 * r + vec_index(0, 0)] = ONE;
            cov[4 * r + vec_index(1, 1)] = ONE;
        }
        let left = gen.matrix.transpose() * cov;
        assert!(left.norm() <= 1e-12);
    }

    #[test]
    fn matches_direct_rhs_on_basis_and_random_blocks() {
        let rates = DMatrix::from_row_slice(3, 3, &[0.0, 0.3, 0.1, 0.7, 0.0, 0.2, 0.4, 0.5, 0.0]);
        let model = ModulatedFluorophore::new(
            vec![
                LevelParams { gamma: 1.1, omega: 0.3, rabi: 0.8 },
                LevelParams { gamma: 0.4, omega: -0.2, rabi: 1.7 },
                LevelParams { gamma: 2.2, omega: 0.0, rabi: 0.0 },
            ],
            DriveParams { omega_laser: 0.1 },
            BathProcess::new(rates).unwrap(),
        )
        .unwrap();
        let s = 0.37;
        let gen = build_tilted_generator(&model, s);
        // Every basis matrix.
        for k in 0..12 {
            let mut v = vec![ZERO; 12];
            v[k] = ONE;
            let x = unstack(&v);
            let got = gen.apply(&x);
            let want = rhs_direct(&model, s, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).norm() <= 1e-12);
            }
        }
        // Pseudo-random blocks.
        let x: Vec<_> = (0..3)
            .map(|r| {
                Matrix2::from_fn(|i, j| {
                    let t = (r * 4 + i * 2 + j) as f64;
                    c((1.3 * t + 0.2).sin(), (0.7 * t - 0.5).cos())
                })
            })
            .collect();
        let got = gen.apply(&x);
        let want = rhs_direct(&model, s, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).norm() <= 1e-12);
        }
    }

    #[test]
    fn stationary_eigenpair_at_zero() {
        let model = slow_bath();
        let spec = leading_eigen(&build_tilted_generator(&model, 0.0)).unwrap();
        assert!(spec.lambda_max.norm() < 1e-10);
        let g = spec.right_blocks();
        let tr: Complex64 = g.iter().map(|b| b.trace()).sum();
        assert!((tr - ONE).norm() < 1e-12);
        // Block traces are the bath populations.
        assert!((g[0].trace().re - 1.0 / 3.0).abs() < 1e-9);
        // Left blocks proportional to the identity with a common factor.
        let l = spec.left_blocks();
        let ref_val = l[0][(0, 0)];
        for b in &l {
            assert!((b[(0, 0)] - ref_val).norm() < 1e-9);
            assert!((b[(1, 1)] - ref_val).norm() < 1e-9);
            assert!(b[(0, 1)].norm() < 1e-9 && b[(1, 0)].norm() < 1e-9);
        }
    }

    #[test]
    fn residuals_and_gap() {
        let model = slow_bath();
        let gen = build_tilted_generator(&model, 0.5);
        let spec = leading_eigen(&gen).unwrap();
        let a = &gen.matrix;
        let r = (a * &spec.right - &spec.right * spec.lambda_max).norm() / spec.right.norm();
        assert!(r <= 1e-10 * a.norm());
        let l = (a.adjoint() * &spec.left - &spec.left * spec.lambda_max.conj()).norm() / spec.left.norm();
        assert!(l <= 1e-10 * a.norm());
        assert!(spec.gap > 0.0);
        assert!(spec.lambda_max.im.abs() < 1e-12);
        assert!((spec.left.dotc(&spec.right) - ONE).norm() < 1e-12);

        // Full spectrum oracle from an independent Schur decomposition.
        let eig = a.clone().schur().eigenvalues().unwrap();
        let max_re = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        assert!((max_re - spec.lambda_max.re).abs() < 1e-12);
    }

    #[test]
    fn theta_examples() {
        let markov = ModulatedFluorophore::resonant(2.0, 1.0).unwrap();
        assert!(theta(&markov, 0.0).unwrap().abs() < 1e-10);
        assert!(theta(&slow_bath(), 0.0).unwrap().abs() < 1e-10);
        let t3 = theta(&markov, 3.0).unwrap();
        assert!((t3 - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((t3 - 0.632121).abs() < 1e-6);
    }

    #[test]
    fn theta_poly_examples() {
        let markov = ModulatedFluorophore::resonant(2.0, 1.0).unwrap();
        assert!(theta_poly(&markov, 0.0).unwrap().abs() < 1e-10);
        let t1 = theta_poly(&markov, 1.0).unwrap();
        assert!((t1 - (1.0 - (-1.0f64 / 3.0).exp())).abs() < 1e-10);
        assert!((t1 - 0.283469).abs() < 1e-6);
        let model = slow_bath();
        for s in [-0.5, -0.2, -0.01, 0.01, 0.2] {
            let a = theta(&model, s).unwrap();
            let b = theta_poly(&model, s).unwrap();
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "s = {s}: {a} vs {b}");
        }
        let three = ModulatedFluorophore::new(
            vec![LevelParams { gamma: 1.0, omega: 0.0, rabi: 1.0 }; 3],
            DriveParams { omega_laser: 0.0 },
            BathProcess::new(DMatrix::from_element(3, 3, 1.0)).unwrap(),
        )
        .unwrap();
        assert!(matches!(theta_poly(&three, 0.1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn markov_cumulants_at_scale_invariant_point() {
        let markov = ModulatedFluorophore::resonant(2.0, 1.0).unwrap();
        let c = cumulants(&markov, 0.0, DEFAULT_STEP).unwrap();
        assert!((c.mean - 1.0 / 3.0).abs() < 1e-9);
        assert!((c.variance - 1.0 / 9.0).abs() < 1e-7);
    }

    #[test]
    fn mean_matches_central_difference_of_theta() {
        let model = slow_bath();
        let h = 1e-4;
        for s in [-0.02, 0.0, 0.01, 0.3] {
            let c = cumulants(&model, s, h).unwrap();
            let fd = (theta(&model, s + h).unwrap() - theta(&model, s - h).unwrap()) / (2.0 * h);
            assert!((c.mean - fd).abs() < 1e-6, "s = {s}: {} vs {fd}", c.mean);
        }
    }

    #[test]
    fn no_drive_no_counts() {
        let dark = ModulatedFluorophore::resonant(1.3, 0.0).unwrap();
        let c = cumulants(&dark, 0.4, DEFAULT_STEP).unwrap();
        assert!(c.mean.abs() < 1e-10 && c.variance.abs() < 1e-7);
    }

    #[test]
    fn fig2_mean_at_zero() {
        let c = cumulants(&slow_bath(), 0.0, DEFAULT_STEP).unwrap();
        // P_A I_A + P_B I_B with I = gamma / (gamma^2 + 2).
        let oracle = (1.0 / 3.0) * (2.5 / 8.25) + (2.0 / 3.0) * (0.5 / 2.25);
        assert!((c.mean - oracle).abs() < 1e-4, "{} vs {oracle}", c.mean);
    }

    #[test]
    fn step_below_noise_floor() {
        let markov = ModulatedFluorophore::resonant(2.0, 1.0).unwrap();
        assert!(matches!(cumulants(&markov, 0.0, 1e-13), Err(Error::StepTooSmall { .. })));
        assert!(cumulants(&markov, 0.0, 0.0).is_err());
    }

    #[test]
    fn populations() {
        let model = slow_bath();
        let p0 = s_populations(&model, 0.0).unwrap();
        assert!((p0[0] - 1.0 / 3.0).abs() < 1e-9 && (p0[1] - 2.0 / 3.0).abs() < 1e-9);
        let pp = s_populations(&model, -5.147e-3).unwrap();
        assert!((pp[0] - 0.5).abs() < 0.05, "{pp:?}");
        let high = s_populations(&model, 0.5).unwrap();
        // State B (gamma = 0.5) has the lower intensity.
        assert!(high[1] > 0.99, "{high:?}");
    }

    #[test]
    fn sweep_single_point_and_scale_invariance() {
        let markov = ModulatedFluorophore::resonant(2.0, 1.0).unwrap();
        let sw = sweep(&markov, &[0.0]);
        assert_eq!(sw.points.len(), 1);
        assert!(sw.points[0].theta.abs() < 1e-10);

        let grid = crate::numeric::linspace(-5.0, 5.0, 41);
        let sw = sweep(&markov, &grid);
        assert!(sw.failures.is_empty());
        for p in &sw.points {
            assert!((p.variance / p.mean - 1.0 / 3.0).abs() < 1e-6, "s = {}: {}", p.s, p.variance / p.mean);
        }
    }

    #[test]
    fn sweep_monotone_mean() {
        let grid = crate::numeric::linspace(-0.05, 0.05, 41);
        let sw = sweep(&slow_bath(), &grid);
        for w in sw.points.windows(2) {
            assert!(w[1].mean <= w[0].mean + 1e-8);
            assert!(w[0].variance >= -1e-9);
            assert!((w[0].pops.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
