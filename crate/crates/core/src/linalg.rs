//! Symmetric banded matrices, banded Cholesky and the smallest eigenpair of a
//! symmetric-definite pencil.

use crate::error::LinalgError;

/// Symmetric matrix stored by its lower band. Entry `(i, j)` with `i >= j` and
/// `i - j <= kd` lives at `data[i * (kd + 1) + (i - j)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymBanded {
    n: usize,
    kd: usize,
    data: Vec<f64>,
}

impl SymBanded {
    pub fn zeros(n: usize, kd: usize) -> Self {
        Self { n, kd, data: vec![0.0; n * (kd + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.kd
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        if hi - lo > self.kd || hi >= self.n {
            None
        } else {
            Some(hi * (self.kd + 1) + (hi - lo))
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `v` to the symmetric pair `(i, j)` / `(j, i)`.
    ///
    /// Panics when the entry lies outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j).expect("entry outside band");
        self.data[s] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j).expect("entry outside band");
        self.data[s] = v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let row = i * (self.kd + 1);
            y[i] += self.data[row] * x[i];
            for d in 1..=self.kd.min(i) {
                let a = self.data[row + d];
                let j = i - d;
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
        }
        y
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    /// `self - s * other`; both matrices must share dimension and bandwidth.
    pub fn shifted(&self, s: f64, other: &SymBanded) -> SymBanded {
        assert_eq!(self.n, other.n);
        assert_eq!(self.kd, other.kd);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - s * b).collect();
        SymBanded { n: self.n, kd: self.kd, data }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.get(i, j);
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn cholesky(&self) -> Result<BandCholesky, LinalgError> {
        let n = self.n;
        let kd = self.kd;
        let w = kd + 1;
        let mut l = self.data.clone();
        for j in 0..n {
            // diagonal
            let mut s = l[j * w];
            for k in j.saturating_sub(kd)..j {
                let ljk = l[j * w + (j - k)];
                s -= ljk * ljk;
            }
            if !(s > 0.0) || !s.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { pivot: j, value: s });
            }
            let d = s.sqrt();
            l[j * w] = d;
            for i in (j + 1)..n.min(j + kd + 1) {
                let mut s = l[i * w + (i - j)];
                let start = i.saturating_sub(kd);
                for k in start..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                l[i * w + (i - j)] = s / d;
            }
        }
        Ok(BandCholesky { n, kd, l })
    }
}

/// Lower-triangular banded Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    kd: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let w = self.kd + 1;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(self.kd)..i {
                s -= self.l[i * w + (i - k)] * y[k];
            }
            y[i] = s / self.l[i * w];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n.min(i + self.kd + 1) {
                s -= self.l[k * w + (k - i)] * y[k];
            }
            y[i] = s / self.l[i * w];
        }
        y
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * (self.kd + 1)].ln()).sum::<f64>()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smallest eigenpair of `A x = θ B x` with `B` positive definite.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    /// B-normalized eigenvector.
    pub vector: Vec<f64>,
    /// `‖A x − θ B x‖₂ / ‖A x‖₂` at the returned pair.
    pub residual: f64,
    pub factorizations: usize,
}

/// Spectrum slicing by Cholesky bisection followed by shifted inverse iteration.
///
/// The bisection brackets the smallest eigenvalue to `rel_tol`; a few
/// inverse-iteration sweeps then produce the eigenvector and a Rayleigh
/// quotient that is at least as accurate as the bracket.
pub fn smallest_generalized_eigen(
    a: &SymBanded,
    b: &SymBanded,
    rel_tol: f64,
) -> Result<EigenPair, LinalgError> {
    let n = a.dim();
    if n == 0 {
        return Err(LinalgError::Empty);
    }
    b.cholesky()?;
    let mut factorizations = 1usize;

    // Upper bound from a few Rayleigh quotients.
    let mut hi = f64::INFINITY;
    for probe in 0..3 {
        let x: Vec<f64> = (0..n)
            .map(|i| match probe {
                0 => 1.0,
                1 => ((i as f64 + 1.0) * std::f64::consts::PI / (n as f64 + 1.0)).sin(),
                _ => if i % 2 == 0 { 1.0 } else { -1.0 },
            })
            .collect();
        let q = a.quad_form(&x) / b.quad_form(&x);
        if q.is_finite() {
            hi = hi.min(q);
        }
    }
    if !hi.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let scale = a.max_abs().max(1e-300) / b.max_abs().max(1e-300);

    // Lower bound: step down until A − lo B is positive definite.
    let mut step = hi.abs().max(1e-3 * scale).max(1e-12);
    let mut lo = hi - step;
    let mut lo_ok = false;
    for _ in 0..200 {
        factorizations += 1;
        if a.shifted(lo, b).cholesky().is_ok() {
            lo_ok = true;
            break;
        }
        hi = hi.min(lo);
        step *= 2.0;
        lo = hi - step;
    }
    if !lo_ok {
        return Err(LinalgError::NoConvergence { residual: f64::NAN });
    }

    let tol = |lo: f64, hi: f64| rel_tol * 1e-2 * (lo.abs().max(hi.abs()).max(1e-8 * scale));
    let mut iters = 0;
    while hi - lo > tol(lo, hi) && iters < 200 {
        let mid = 0.5 * (lo + hi);
        factorizations += 1;
        if a.shifted(mid, b).cholesky().is_ok() {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
    }

    // Inverse iteration just below the bracket.
    // definiteness tests are not monotone at roundoff level, so back off
    let mut gap = tol(lo, hi);
    let f = loop {
        factorizations += 1;
        match a.shifted(lo - gap, b).cholesky() {
            Ok(f) => break f,
            Err(e) if gap > 1e-2 * scale.max(lo.abs()) => return Err(e),
            Err(_) => gap *= 4.0,
        }
    };
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
    let mut theta = f64::NAN;
    let mut residual = f64::INFINITY;
    for _ in 0..50 {
        let bx = b.mul_vec(&x);
        let mut y = f.solve(&bx);
        let bnorm = b.quad_form(&y).sqrt();
        if !(bnorm > 0.0) || !bnorm.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        y.iter_mut().for_each(|v| *v /= bnorm);
        let ay = a.mul_vec(&y);
        let by = b.mul_vec(&y);
        let th = dot(&y, &ay);
        let res: f64 = ay.iter().zip(&by).map(|(p, q)| (p - th * q).powi(2)).sum::<f64>().sqrt();
        let an: f64 = ay.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        x = y;
        let done = (th - theta).abs() <= rel_tol * 1e-3 * th.abs().max(1e-12);
        theta = th;
        residual = res / an;
        if done && residual < 1e-6 {
            break;
        }
    }
    if !theta.is_finite() {
        return Err(LinalgError::NoConvergence { residual });
    }
    // The Rayleigh quotient can only overshoot the true value; the bracket
    // from slicing is the sharper upper end.
    let value = theta.min(hi).max(lo);
    Ok(EigenPair { value, vector: x, residual, factorizations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian(n: usize) -> SymBanded {
        let mut a = SymBanded::zeros(n, 1);
        for i in 0..n {
            a.set(i, i, 2.0);
            if i + 1 < n {
                a.set(i + 1, i, -1.0);
            }
        }
        a
    }

    fn identity(n: usize, kd: usize) -> SymBanded {
        let mut b = SymBanded::zeros(n, kd);
        for i in 0..n {
            b.set(i, i, 1.0);
        }
        b
    }

    #[test]
    fn cholesky_solves_tridiagonal() {
        let a = laplacian(50);
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.mul_vec(&x);
        let y = a.cholesky().unwrap().solve(&b);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = laplacian(10);
        a.set(4, 4, -3.0);
        assert!(matches!(a.cholesky(), Err(LinalgError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn smallest_laplacian_eigenvalue() {
        let n = 200;
        let a = laplacian(n);
        let b = identity(n, 1);
        let e = smallest_generalized_eigen(&a, &b, 1e-10).unwrap();
        let exact = 2.0 - 2.0 * (std::f64::consts::PI / (n as f64 + 1.0)).cos();
        assert!((e.value - exact).abs() <= 1e-9 * exact, "{} vs {}", e.value, exact);
    }

    #[test]
    fn negative_eigenvalue_found() {
        let n = 30;
        let mut a = laplacian(n);
        for i in 0..n {
            a.add(i, i, -1.0);
        }
        let e = smallest_generalized_eigen(&a, &identity(n, 1), 1e-10).unwrap();
        let exact = 1.0 - 2.0 * (std::f64::consts::PI / (n as f64 + 1.0)).cos();
        assert!((e.value - exact).abs() < 1e-9);
    }

    #[test]
    fn pencil_with_equal_matrices() {
        let a = laplacian(40);
        let e = smallest_generalized_eigen(&a, &a, 1e-10).unwrap();
        assert!((e.value - 1.0).abs() < 1e-9);
    }
}
