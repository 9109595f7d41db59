//! Real polynomials and eigenvalue-free extraction of their real roots.

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Coefficients of `det(u I - A)`, lowest degree first, via Faddeev–LeVerrier.
pub fn characteristic_polynomial(a: &DMatrix<Complex64>) -> Vec<Complex64> {
    let n = a.nrows();
    let mut coeffs = vec![Complex64::new(0.0, 0.0); n + 1];
    coeffs[n] = Complex64::new(1.0, 0.0);
    let mut m = DMatrix::<Complex64>::zeros(n, n);
    for k in 1..=n {
        let mut next = a * &m;
        for i in 0..n {
            next[(i, i)] += coeffs[n - k + 1];
        }
        m = next;
        let am = a * &m;
        coeffs[n - k] = -am.trace() / k as f64;
    }
    coeffs
}

/// A polynomial with real coefficients, lowest degree first.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly(pub Vec<f64>);

impl Poly {
    pub fn degree(&self) -> usize {
        self.0.len().saturating_sub(1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self) -> Poly {
        Poly(self.0.iter().enumerate().skip(1).map(|(k, &c)| k as f64 * c).collect())
    }

    /// Cauchy bound on the modulus of every root.
    pub fn root_bound(&self) -> f64 {
        let lead = *self.0.last().expect("empty polynomial");
        1.0 + self.0[..self.0.len() - 1]
            .iter()
            .map(|c| (c / lead).abs())
            .fold(0.0, f64::max)
    }

    /// All real roots in ascending order.
    ///
    /// Critical points (real roots of the derivative, found recursively)
    /// split the line into monotone pieces, each holding at most one root.
    pub fn real_roots(&self) -> Vec<f64> {
        let deg = self.degree();
        if deg == 0 {
            return Vec::new();
        }
        if deg == 1 {
            return vec![-self.0[0] / self.0[1]];
        }
        let bound = self.root_bound();
        let mut knots = vec![-bound];
        knots.extend(self.derivative().real_roots().into_iter().filter(|x| x.abs() < bound));
        knots.push(bound);

        let scale = self.0.iter().map(|c| c.abs()).fold(0.0, f64::max) * bound.powi(deg as i32).max(1.0);
        let tiny = 64.0 * f64::EPSILON * scale;
        let mut roots: Vec<f64> = Vec::new();
        for w in knots.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let (flo, fhi) = (self.eval(lo), self.eval(hi));
            if flo == 0.0 {
                push_unique(&mut roots, lo);
            } else if fhi.abs() <= tiny && flo.abs() > tiny {
                // Touching root at a critical point.
                push_unique(&mut roots, hi);
            } else if flo.signum() != fhi.signum() {
                if let Some(r) = bisect(|x| self.eval(x), lo, hi, 0.0, 200) {
                    push_unique(&mut roots, r);
                }
            }
        }
        roots
    }
}

fn push_unique(roots: &mut Vec<f64>, r: f64) {
    if roots.last().is_none_or(|&last| (r - last).abs() > 1e-14 * r.abs().max(1.0)) {
        roots.push(r);
    }
}

/// Bisection on a sign change, to full floating-point resolution unless
/// `xtol` is positive.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, xtol: f64, max_iter: usize) -> Option<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || (hi - lo) <= xtol {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_roots(roots: &[f64]) -> Poly {
        let mut c = vec![1.0];
        for &r in roots {
            let mut next = vec![0.0; c.len() + 1];
            for (k, &ck) in c.iter().enumerate() {
                next[k + 1] += ck;
                next[k] -= r * ck;
            }
            c = next;
        }
        Poly(c)
    }

    #[test]
    fn recovers_real_roots() {
        let p = from_roots(&[-3.0, -0.5, 0.25, 2.0]);
        let r = p.real_roots();
        let expect = [-3.0, -0.5, 0.25, 2.0];
        assert_eq!(r.len(), 4);
        for (a, b) in r.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn skips_complex_pairs() {
        // (x^2 + 1)(x - 1.5)(x + 0.1)
        let p = from_roots(&[1.5, -0.1]);
        let q = Poly(vec![1.0, 0.0, 1.0]);
        let mut c = vec![0.0; p.0.len() + 2];
        for (i, a) in p.0.iter().enumerate() {
            for (j, b) in q.0.iter().enumerate() {
                c[i + j] += a * b;
            }
        }
        let r = Poly(c).real_roots();
        assert_eq!(r.len(), 2);
        assert!((r[0] + 0.1).abs() < 1e-12);
        assert!((r[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn close_roots_are_separated() {
        let p = from_roots(&[0.0, -1.2e-3, -1.0, -2.5]);
        let r = p.real_roots();
        assert_eq!(r.len(), 4);
        assert!(r[3].abs() < 1e-13);
        assert!((r[2] + 1.2e-3).abs() < 1e-13);
    }

    #[test]
    fn characteristic_polynomial_of_diagonal() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(-2.0, 0.0),
            Complex64::new(0.5, 0.0),
        ]));
        let c = characteristic_polynomial(&a);
        // (u - 1)(u + 2)(u - 0.5) = u^3 + 0.5 u^2 - 2.5 u + 1
        let expect = [1.0, -2.5, 0.5, 1.0];
        for (z, e) in c.iter().zip(expect) {
            assert!((z.re - e).abs() < 1e-14 && z.im.abs() < 1e-14);
        }
    }
}
