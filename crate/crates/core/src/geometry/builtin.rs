//! Named metrics and potentials.

use nalgebra::DMatrix;

use super::{MetricField, PotentialField};
use crate::error::{Error, Result};
use crate::expr::Expr;

#[derive(Debug, Clone, Copy)]
pub struct FlatMetric {
    n: usize,
}

impl FlatMetric {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl MetricField for FlatMetric {
    fn dim(&self) -> usize {
        self.n
    }
    fn metric(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.n, self.n)
    }
    fn is_constant(&self) -> bool {
        true
    }
}

/// Round unit sphere in polar chart `(θ, φ)`, `g = diag(1, sin²θ)`, `0 < θ < π`.
#[derive(Debug, Clone, Copy)]
pub struct SphereChartMetric;

impl MetricField for SphereChartMetric {
    fn dim(&self) -> usize {
        2
    }
    fn metric(&self, x: &[f64]) -> DMatrix<f64> {
        let s = x[0].sin();
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, s * s])
    }
    fn metric_derivatives(&self, x: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        let d = (2.0 * x[0]).sin();
        Some(vec![
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, d]),
            DMatrix::zeros(2, 2),
        ])
    }
    fn metric_second_derivatives(&self, x: &[f64]) -> Option<Vec<Vec<DMatrix<f64>>>> {
        let dd = 2.0 * (2.0 * x[0]).cos();
        let z = DMatrix::zeros(2, 2);
        Some(vec![
            vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, dd]), z.clone()],
            vec![z.clone(), z],
        ])
    }
    fn in_domain(&self, x: &[f64]) -> bool {
        x[0] > 0.0 && x[0] < std::f64::consts::PI
    }
}

/// Metric given entrywise by expressions in the chart coordinates; the
/// symmetric part is used.
#[derive(Debug, Clone)]
pub struct ExprMetric {
    n: usize,
    entries: Vec<Expr>,
}

impl ExprMetric {
    pub fn parse<S: AsRef<str>>(n: usize, rows: &[Vec<S>], vars: &[&str]) -> Result<Self> {
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument(format!("metric table must be {n}x{n}")));
        }
        if vars.len() != n {
            return Err(Error::InvalidArgument("one variable name per coordinate".into()));
        }
        let mut entries = Vec::with_capacity(n * n);
        for row in rows {
            for e in row {
                entries.push(Expr::parse(e.as_ref(), vars)?);
            }
        }
        Ok(Self { n, entries })
    }
}

impl MetricField for ExprMetric {
    fn dim(&self) -> usize {
        self.n
    }
    fn metric(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let raw = DMatrix::from_fn(n, n, |i, j| self.entries[i * n + j].eval(x));
        (&raw + raw.transpose()) * 0.5
    }
    fn in_domain(&self, x: &[f64]) -> bool {
        self.metric(x).iter().all(|v| v.is_finite())
    }
}

/// `V(x) = −Σ cos x_i`.
#[derive(Debug, Clone, Copy)]
pub struct Pendulum;

impl PotentialField for Pendulum {
    fn value(&self, x: &[f64]) -> f64 {
        -x.iter().map(|v| v.cos()).sum::<f64>()
    }
    fn partials(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(x.iter().map(|v| v.sin()).collect())
    }
    fn chart_hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let n = x.len();
        Some(DMatrix::from_fn(n, n, |i, j| if i == j { x[i].cos() } else { 0.0 }))
    }
}

/// `V(x) = −¼(|x|² − 1)²`: maxima on the unit sphere of the chart, minimum at 0.
#[derive(Debug, Clone, Copy)]
pub struct DoubleWell;

impl PotentialField for DoubleWell {
    fn value(&self, x: &[f64]) -> f64 {
        let s: f64 = x.iter().map(|v| v * v).sum::<f64>() - 1.0;
        -0.25 * s * s
    }
    fn partials(&self, x: &[f64]) -> Option<Vec<f64>> {
        let s: f64 = x.iter().map(|v| v * v).sum::<f64>() - 1.0;
        Some(x.iter().map(|v| -s * v).collect())
    }
    fn chart_hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let n = x.len();
        let s: f64 = x.iter().map(|v| v * v).sum::<f64>() - 1.0;
        Some(DMatrix::from_fn(n, n, |i, j| {
            -2.0 * x[i] * x[j] - if i == j { s } else { 0.0 }
        }))
    }
}

/// `V(x) = ½ Σ cos 2x_i`: maxima at 0 and π in each periodic coordinate.
#[derive(Debug, Clone, Copy)]
pub struct DoubleWellCircle;

impl PotentialField for DoubleWellCircle {
    fn value(&self, x: &[f64]) -> f64 {
        0.5 * x.iter().map(|v| (2.0 * v).cos()).sum::<f64>()
    }
    fn partials(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(x.iter().map(|v| -(2.0 * v).sin()).collect())
    }
    fn chart_hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let n = x.len();
        Some(DMatrix::from_fn(n, n, |i, j| if i == j { -2.0 * (2.0 * x[i]).cos() } else { 0.0 }))
    }
}

/// `V(x) = ½ Σ c_i (x_i − a_i)²`.
#[derive(Debug, Clone)]
pub struct QuadraticPotential {
    pub coeffs: Vec<f64>,
    pub center: Vec<f64>,
}

impl QuadraticPotential {
    pub fn new(coeffs: Vec<f64>) -> Self {
        let center = vec![0.0; coeffs.len()];
        Self { coeffs, center }
    }
}

impl PotentialField for QuadraticPotential {
    fn value(&self, x: &[f64]) -> f64 {
        0.5 * x
            .iter()
            .zip(&self.center)
            .zip(&self.coeffs)
            .map(|((v, a), c)| c * (v - a) * (v - a))
            .sum::<f64>()
    }
    fn partials(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(x.iter().zip(&self.center).zip(&self.coeffs).map(|((v, a), c)| c * (v - a)).collect())
    }
    fn chart_hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let n = x.len();
        Some(DMatrix::from_fn(n, n, |i, j| if i == j { self.coeffs[i] } else { 0.0 }))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantPotential(pub f64);

impl PotentialField for ConstantPotential {
    fn value(&self, _x: &[f64]) -> f64 {
        self.0
    }
    fn partials(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; x.len()])
    }
    fn chart_hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(x.len(), x.len()))
    }
}

/// Potential given by an expression; derivatives by finite differences.
#[derive(Debug, Clone)]
pub struct ExprPotential {
    expr: Expr,
}

impl ExprPotential {
    pub fn parse(source: &str, vars: &[&str]) -> Result<Self> {
        Ok(Self { expr: Expr::parse(source, vars)? })
    }
}

impl PotentialField for ExprPotential {
    fn value(&self, x: &[f64]) -> f64 {
        self.expr.eval(x)
    }
}
