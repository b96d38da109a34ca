//! Single-chart Riemannian manifolds with a potential.
//!
//! Points are chart coordinates. Periodic coordinates are *lifted*: curves are
//! carried in the universal cover and only wrapped when a point is reported.

mod builtin;
mod calibrate;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use builtin::{
    ConstantPotential, DoubleWell, DoubleWellCircle, ExprMetric, ExprPotential, FlatMetric,
    Pendulum, QuadraticPotential, SphereChartMetric,
};
pub use calibrate::{
    calibrate_ball, check_ball, generalized_sym_eigs, scan_constants, BallSampling, BallViolation,
    CriticalPointData, LocalizedBallScan, GRAD_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordTopology {
    Line,
    Circle { period: f64 },
}

/// Metric tensor field in chart coordinates.
pub trait MetricField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn metric(&self, x: &[f64]) -> DMatrix<f64>;
    /// `∂_k g` for `k = 0..n`, when known in closed form.
    fn metric_derivatives(&self, _x: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        None
    }
    /// `∂_k ∂_l g`, when known in closed form.
    fn metric_second_derivatives(&self, _x: &[f64]) -> Option<Vec<Vec<DMatrix<f64>>>> {
        None
    }
    fn is_constant(&self) -> bool {
        false
    }
    fn in_domain(&self, _x: &[f64]) -> bool {
        true
    }
}

/// Scalar potential `V` in chart coordinates.
pub trait PotentialField: Send + Sync + fmt::Debug {
    fn value(&self, x: &[f64]) -> f64;
    fn partials(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
    fn chart_hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

/// Christoffel symbols `Γ^i_{jk}` stored as `data[(i * n + j) * n + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Christoffel {
    n: usize,
    data: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n * n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + k]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.n + j) * self.n + k] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    /// `Γ^i_{jk} v^j w^k`.
    pub fn contract(&self, v: &[f64], w: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..n {
                    for k in 0..n {
                        s += self.get(i, j, k) * v[j] * w[k];
                    }
                }
                s
            })
            .collect()
    }

    /// Matrix `A^i_j = Γ^i_{jk} v^k`.
    pub fn along(&self, v: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| (0..n).map(|k| self.get(i, j, k) * v[k]).sum())
    }

    /// Matrix `c_l Γ^l_{jk}` for a covector `c`.
    pub fn lowered_by(&self, c: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |j, k| (0..n).map(|l| c[l] * self.get(l, j, k)).sum())
    }
}

/// `V`, its metric gradient and covariant Hessian at a point.
#[derive(Debug, Clone)]
pub struct PotentialPackage {
    pub value: f64,
    /// Chart partials `∂_i V`.
    pub partials: Vec<f64>,
    /// Metric gradient `g^{-1} ∂V`.
    pub gradient: Vec<f64>,
    /// Chart second partials `∂_i ∂_j V`.
    pub chart_hessian: DMatrix<f64>,
    /// Covariant Hessian `∂²V − Γ·∂V`.
    pub hessian: DMatrix<f64>,
}

#[derive(Clone)]
pub struct ManifoldModel {
    topology: Vec<CoordTopology>,
    metric: Arc<dyn MetricField>,
    potential: Arc<dyn PotentialField>,
    fd_step: f64,
}

impl fmt::Debug for ManifoldModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ManifoldModel")
            .field("topology", &self.topology)
            .field("metric", &self.metric)
            .field("potential", &self.potential)
            .field("fd_step", &self.fd_step)
            .finish()
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

impl ManifoldModel {
    pub fn new(
        topology: Vec<CoordTopology>,
        metric: Arc<dyn MetricField>,
        potential: Arc<dyn PotentialField>,
    ) -> Result<Self> {
        if topology.is_empty() {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if metric.dim() != topology.len() {
            return Err(Error::InvalidArgument(format!(
                "metric dimension {} does not match {} topology flags",
                metric.dim(),
                topology.len()
            )));
        }
        for t in &topology {
            if let CoordTopology::Circle { period } = t {
                if !(*period > 0.0) {
                    return Err(Error::InvalidArgument("circle period must be positive".into()));
                }
            }
        }
        Ok(Self { topology, metric, potential, fd_step: DEFAULT_FD_STEP })
    }

    /// Flat line or circle/torus with the given potential.
    pub fn flat(topology: Vec<CoordTopology>, potential: Arc<dyn PotentialField>) -> Result<Self> {
        let n = topology.len();
        Self::new(topology, Arc::new(FlatMetric::new(n)), potential)
    }

    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = h;
        self
    }

    pub fn dim(&self) -> usize {
        self.topology.len()
    }

    pub fn topology(&self) -> &[CoordTopology] {
        &self.topology
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    pub fn potential_field(&self) -> &Arc<dyn PotentialField> {
        &self.potential
    }

    pub fn metric_field(&self) -> &Arc<dyn MetricField> {
        &self.metric
    }

    pub fn is_flat(&self) -> bool {
        self.metric.is_constant()
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.is_finite()) && self.metric.in_domain(x)
    }

    fn step_for(&self, x: f64) -> f64 {
        self.fd_step * x.abs().max(1.0)
    }

    // Second differences balance truncation against roundoff at a larger step.
    fn step2_for(&self, x: f64) -> f64 {
        10.0 * self.fd_step * x.abs().max(1.0)
    }

    pub fn metric_at(&self, x: &[f64]) -> DMatrix<f64> {
        self.metric.metric(x)
    }

    pub fn metric_derivatives(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        if let Some(d) = self.metric.metric_derivatives(x) {
            return d;
        }
        let n = self.dim();
        if self.metric.is_constant() {
            return vec![DMatrix::zeros(n, n); n];
        }
        let mut y = x.to_vec();
        (0..n)
            .map(|k| {
                let h = self.step_for(x[k]);
                y[k] = x[k] + h;
                let gp = self.metric.metric(&y);
                y[k] = x[k] - h;
                let gm = self.metric.metric(&y);
                y[k] = x[k];
                (gp - gm) / (2.0 * h)
            })
            .collect()
    }

    pub fn metric_second_derivatives(&self, x: &[f64]) -> Vec<Vec<DMatrix<f64>>> {
        if let Some(d) = self.metric.metric_second_derivatives(x) {
            return d;
        }
        let n = self.dim();
        if self.metric.is_constant() {
            return vec![vec![DMatrix::zeros(n, n); n]; n];
        }
        let mut y = x.to_vec();
        if self.metric.metric_derivatives(x).is_some() {
            let mut out = vec![vec![DMatrix::zeros(n, n); n]; n];
            for l in 0..n {
                let h = self.step_for(x[l]);
                y[l] = x[l] + h;
                let dp = self.metric_derivatives(&y);
                y[l] = x[l] - h;
                let dm = self.metric_derivatives(&y);
                y[l] = x[l];
                for k in 0..n {
                    out[k][l] = (&dp[k] - &dm[k]) / (2.0 * h);
                }
            }
            return out;
        }
        let g0 = self.metric.metric(x);
        let mut out = vec![vec![DMatrix::zeros(n, n); n]; n];
        for k in 0..n {
            let hk = self.step2_for(x[k]);
            y[k] = x[k] + hk;
            let gp = self.metric.metric(&y);
            y[k] = x[k] - hk;
            let gm = self.metric.metric(&y);
            y[k] = x[k];
            out[k][k] = (gp + gm - &g0 * 2.0) / (hk * hk);
            for l in (k + 1)..n {
                let hl = self.step2_for(x[l]);
                let mut corner = |sk: f64, sl: f64| {
                    y[k] = x[k] + sk * hk;
                    y[l] = x[l] + sl * hl;
                    let g = self.metric.metric(&y);
                    y[k] = x[k];
                    y[l] = x[l];
                    g
                };
                let d = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0)
                    + corner(-1.0, -1.0))
                    / (4.0 * hk * hl);
                out[k][l] = d.clone();
                out[l][k] = d;
            }
        }
        out
    }

    fn metric_inverse(&self, x: &[f64], g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let chol = g
            .clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateMetric { point: x.to_vec() })?;
        Ok(chol.inverse())
    }

    /// Christoffel symbols from metric first derivatives.
    pub fn christoffel(&self, x: &[f64]) -> Result<Christoffel> {
        let n = self.dim();
        if self.metric.is_constant() {
            return Ok(Christoffel::zeros(n));
        }
        let g = self.metric.metric(x);
        let ginv = self.metric_inverse(x, &g)?;
        let dg = self.metric_derivatives(x);
        Ok(christoffel_from(&ginv, &dg))
    }

    /// `∂_m Γ^i_{jk}` for `m = 0..n`.
    pub fn christoffel_derivatives(&self, x: &[f64]) -> Result<Vec<Christoffel>> {
        let n = self.dim();
        if self.metric.is_constant() {
            return Ok(vec![Christoffel::zeros(n); n]);
        }
        let g = self.metric.metric(x);
        let ginv = self.metric_inverse(x, &g)?;
        let dg = self.metric_derivatives(x);
        let ddg = self.metric_second_derivatives(x);
        let mut out = Vec::with_capacity(n);
        for m in 0..n {
            let dginv = -(&ginv * &dg[m] * &ginv);
            let mut c = Christoffel::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let mut s = 0.0;
                        for l in 0..n {
                            let lower = dg[j][(l, k)] + dg[k][(l, j)] - dg[l][(j, k)];
                            let dlower =
                                ddg[j][m][(l, k)] + ddg[k][m][(l, j)] - ddg[l][m][(j, k)];
                            s += dginv[(i, l)] * lower + ginv[(i, l)] * dlower;
                        }
                        c.set(i, j, k, 0.5 * s);
                    }
                }
            }
            out.push(c);
        }
        Ok(out)
    }

    /// `⟨R(u,w)w, u⟩` with `R(X,Y)Z = ∇_X∇_Y Z − ∇_Y∇_X Z − ∇_[X,Y] Z`.
    pub fn curvature_quadratic(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<f64> {
        if !self.in_domain(x) {
            return Err(Error::OutsideChart { point: x.to_vec() });
        }
        let n = self.dim();
        if n < 2 || self.metric.is_constant() {
            return Ok(0.0);
        }
        let gam = self.christoffel(x)?;
        let dgam = self.christoffel_derivatives(x)?;
        let g = self.metric.metric(x);
        // (R(u,w)w)^i = R^i_{jkl} w^j u^k w^l
        let mut rw = vec![0.0; n];
        for (i, out) in rw.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut r = dgam[k].get(i, l, j) - dgam[l].get(i, k, j);
                        for p in 0..n {
                            r += gam.get(i, k, p) * gam.get(p, l, j)
                                - gam.get(i, l, p) * gam.get(p, k, j);
                        }
                        s += r * w[j] * u[k] * w[l];
                    }
                }
            }
            *out = s;
        }
        let gu = &g * DVector::from_column_slice(u);
        Ok(gu.iter().zip(&rw).map(|(a, b)| a * b).sum())
    }

    /// Sectional curvature of the plane spanned by `u, w`; zero for parallel
    /// vectors.
    pub fn sectional_curvature(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<f64> {
        let g = self.metric.metric(x);
        let uu = self.inner_with(&g, u, u);
        let ww = self.inner_with(&g, w, w);
        let uw = self.inner_with(&g, u, w);
        let area = uu * ww - uw * uw;
        if area <= 1e-14 * uu * ww {
            return Ok(0.0);
        }
        Ok(self.curvature_quadratic(x, u, w)? / area)
    }

    fn inner_with(&self, g: &DMatrix<f64>, u: &[f64], w: &[f64]) -> f64 {
        let n = u.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += g[(i, j)] * u[i] * w[j];
            }
        }
        s
    }

    pub fn inner(&self, x: &[f64], u: &[f64], w: &[f64]) -> f64 {
        let g = self.metric.metric(x);
        self.inner_with(&g, u, w)
    }

    pub fn norm(&self, x: &[f64], v: &[f64]) -> f64 {
        self.inner(x, v, v).max(0.0).sqrt()
    }

    pub fn potential(&self, x: &[f64]) -> f64 {
        self.potential.value(x)
    }

    pub fn potential_partials(&self, x: &[f64]) -> Vec<f64> {
        if let Some(p) = self.potential.partials(x) {
            return p;
        }
        let n = self.dim();
        let mut y = x.to_vec();
        (0..n)
            .map(|k| {
                let h = self.step_for(x[k]);
                y[k] = x[k] + h;
                let vp = self.potential.value(&y);
                y[k] = x[k] - h;
                let vm = self.potential.value(&y);
                y[k] = x[k];
                (vp - vm) / (2.0 * h)
            })
            .collect()
    }

    pub fn potential_chart_hessian(&self, x: &[f64]) -> DMatrix<f64> {
        if let Some(h) = self.potential.chart_hessian(x) {
            return h;
        }
        let n = self.dim();
        let mut y = x.to_vec();
        let mut out = DMatrix::zeros(n, n);
        if self.potential.partials(x).is_some() {
            for l in 0..n {
                let h = self.step_for(x[l]);
                y[l] = x[l] + h;
                let dp = self.potential_partials(&y);
                y[l] = x[l] - h;
                let dm = self.potential_partials(&y);
                y[l] = x[l];
                for k in 0..n {
                    out[(k, l)] = (dp[k] - dm[k]) / (2.0 * h);
                }
            }
            return (&out + out.transpose()) * 0.5;
        }
        let v0 = self.potential.value(x);
        for k in 0..n {
            let hk = self.step2_for(x[k]);
            y[k] = x[k] + hk;
            let vp = self.potential.value(&y);
            y[k] = x[k] - hk;
            let vm = self.potential.value(&y);
            y[k] = x[k];
            out[(k, k)] = (vp + vm - 2.0 * v0) / (hk * hk);
            for l in (k + 1)..n {
                let hl = self.step2_for(x[l]);
                let mut corner = |sk: f64, sl: f64| {
                    y[k] = x[k] + sk * hk;
                    y[l] = x[l] + sl * hl;
                    let v = self.potential.value(&y);
                    y[k] = x[k];
                    y[l] = x[l];
                    v
                };
                let d = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0)
                    + corner(-1.0, -1.0))
                    / (4.0 * hk * hl);
                out[(k, l)] = d;
                out[(l, k)] = d;
            }
        }
        out
    }

    pub fn potential_package(&self, x: &[f64]) -> Result<PotentialPackage> {
        if !self.in_domain(x) {
            return Err(Error::OutsideChart { point: x.to_vec() });
        }
        let value = self.potential(x);
        let partials = self.potential_partials(x);
        let g = self.metric.metric(x);
        let ginv = self.metric_inverse(x, &g)?;
        let gradient = (&ginv * DVector::from_column_slice(&partials)).iter().copied().collect();
        let chart_hessian = self.potential_chart_hessian(x);
        let gam = self.christoffel(x)?;
        let hessian = &chart_hessian - gam.lowered_by(&partials);
        let hessian = (&hessian + hessian.transpose()) * 0.5;
        Ok(PotentialPackage { value, partials, gradient, chart_hessian, hessian })
    }

    /// Maps lifted coordinates back to the fundamental domain `[0, P)` of each
    /// periodic coordinate.
    pub fn wrap(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.topology)
            .map(|(v, t)| match t {
                CoordTopology::Line => *v,
                CoordTopology::Circle { period } => v.rem_euclid(*period),
            })
            .collect()
    }

    /// The periodic image of `x` closest to `reference`.
    pub fn lift_near(&self, x: &[f64], reference: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(reference)
            .zip(&self.topology)
            .map(|((v, r), t)| match t {
                CoordTopology::Line => *v,
                CoordTopology::Circle { period } => v - ((v - r) / period).round() * period,
            })
            .collect()
    }

    /// Length of the chart segment from `x` to the nearest image of `y`; equals
    /// the geodesic distance on flat models and exceeds it by O(|x−y|³) on
    /// curved ones.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let y = self.lift_near(y, x);
        self.segment_length(x, &y)
    }

    /// Metric length of the straight chart segment between lifted points.
    pub fn segment_length(&self, x: &[f64], y: &[f64]) -> f64 {
        let d: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
        if self.metric.is_constant() {
            return self.norm(x, &d);
        }
        // 4-point Gauss-Legendre along the segment
        const NODES: [f64; 4] = [
            -0.861_136_311_594_052_6,
            -0.339_981_043_584_856_3,
            0.339_981_043_584_856_3,
            0.861_136_311_594_052_6,
        ];
        const WEIGHTS: [f64; 4] = [
            0.347_854_845_137_453_9,
            0.652_145_154_862_546_1,
            0.652_145_154_862_546_1,
            0.347_854_845_137_453_9,
        ];
        let mut s = 0.0;
        for (t, w) in NODES.iter().zip(WEIGHTS) {
            let tau = 0.5 * (t + 1.0);
            let p: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + tau * b).collect();
            s += 0.5 * w * self.norm(&p, &d);
        }
        s
    }

    /// Exponential map with periodic coordinates wrapped.
    pub fn exp_map(&self, x: &[f64], v: &[f64], steps: usize) -> Result<Vec<f64>> {
        let (y, _) = self.geodesic(x, v, steps)?;
        Ok(self.wrap(&y))
    }

    /// Integrates `c'' + Γ(c)(c', c') = 0` from `(x, v)` over `[0, 1]` with
    /// classical RK4; returns the lifted endpoint and final velocity.
    pub fn geodesic(&self, x: &[f64], v: &[f64], steps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if steps == 0 {
            return Err(Error::InvalidArgument("exp_map needs at least one step".into()));
        }
        if !self.in_domain(x) {
            return Err(Error::OutsideChart { point: x.to_vec() });
        }
        let n = self.dim();
        if self.metric.is_constant() || v.iter().all(|c| *c == 0.0) {
            let y: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + b).collect();
            return Ok((y, v.to_vec()));
        }
        let h = 1.0 / steps as f64;
        let mut c = x.to_vec();
        let mut u = v.to_vec();
        let accel = |c: &[f64], u: &[f64]| -> Result<Vec<f64>> {
            if !self.in_domain(c) {
                return Err(Error::OutsideChart { point: c.to_vec() });
            }
            Ok(self.christoffel(c)?.contract(u, u).into_iter().map(|a| -a).collect())
        };
        let axpy = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(p, q)| p + s * q).collect()
        };
        for _ in 0..steps {
            let k1c = u.clone();
            let k1u = accel(&c, &u)?;
            let c2 = axpy(&c, 0.5 * h, &k1c);
            let u2 = axpy(&u, 0.5 * h, &k1u);
            let k2u = accel(&c2, &u2)?;
            let c3 = axpy(&c, 0.5 * h, &u2);
            let u3 = axpy(&u, 0.5 * h, &k2u);
            let k3u = accel(&c3, &u3)?;
            let c4 = axpy(&c, h, &u3);
            let u4 = axpy(&u, h, &k3u);
            let k4u = accel(&c4, &u4)?;
            for i in 0..n {
                c[i] += h / 6.0 * (k1c[i] + 2.0 * u2[i] + 2.0 * u3[i] + u4[i]);
                u[i] += h / 6.0 * (k1u[i] + 2.0 * k2u[i] + 2.0 * k3u[i] + k4u[i]);
            }
        }
        if !self.in_domain(&c) {
            return Err(Error::OutsideChart { point: c });
        }
        Ok((c, u))
    }
}

fn christoffel_from(ginv: &DMatrix<f64>, dg: &[DMatrix<f64>]) -> Christoffel {
    let n = ginv.nrows();
    let mut c = Christoffel::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in j..n {
                let mut s = 0.0;
                for l in 0..n {
                    s += ginv[(i, l)] * (dg[j][(l, k)] + dg[k][(l, j)] - dg[l][(j, k)]);
                }
                c.set(i, j, k, 0.5 * s);
                c.set(i, k, j, 0.5 * s);
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn sphere() -> ManifoldModel {
        ManifoldModel::new(
            vec![CoordTopology::Line, CoordTopology::Circle { period: 2.0 * PI }],
            Arc::new(SphereChartMetric),
            Arc::new(ConstantPotential(0.0)),
        )
        .unwrap()
    }

    fn fd_sphere() -> ManifoldModel {
        let m = ExprMetric::parse(2, &[vec!["1", "0"], vec!["0", "sin(x0)^2"]], &["x0", "x1"])
            .unwrap();
        ManifoldModel::new(
            vec![CoordTopology::Line, CoordTopology::Circle { period: 2.0 * PI }],
            Arc::new(m),
            Arc::new(ConstantPotential(0.0)),
        )
        .unwrap()
    }

    #[test]
    fn flat_christoffel_vanishes() {
        let m = ManifoldModel::flat(vec![CoordTopology::Line; 2], Arc::new(Pendulum)).unwrap();
        assert!(m.christoffel(&[0.3, -1.0]).unwrap().is_zero());
        let c = ManifoldModel::flat(
            vec![CoordTopology::Circle { period: 2.0 * PI }],
            Arc::new(Pendulum),
        )
        .unwrap();
        assert!(c.christoffel(&[1.0]).unwrap().is_zero());
    }

    #[test]
    fn sphere_christoffel_matches_closed_form() {
        for m in [sphere(), fd_sphere()] {
            let g = m.christoffel(&[FRAC_PI_4, 0.0]).unwrap();
            // Γ^θ_{φφ} = −sinθ cosθ, Γ^φ_{θφ} = cotθ
            assert!((g.get(0, 1, 1) + 0.5).abs() < 1e-9, "{}", g.get(0, 1, 1));
            assert!((g.get(1, 0, 1) - 1.0).abs() < 1e-9);
            assert!((g.get(1, 1, 0) - 1.0).abs() < 1e-9);
            assert!(g.get(0, 0, 0).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_gauss_curvature_is_one() {
        for m in [sphere(), fd_sphere()] {
            for theta in [0.4, 1.0, 2.2] {
                let x = [theta, 0.7];
                // orthonormal frame
                let u = [1.0, 0.0];
                let w = [0.0, 1.0 / f64::sin(theta)];
                let k = m.curvature_quadratic(&x, &u, &w).unwrap();
                assert!((k - 1.0).abs() < 1e-5, "theta={theta} k={k}");
                let k2 = m.curvature_quadratic(&x, &w, &u).unwrap();
                assert!((k - k2).abs() < 1e-5);
                assert!(m.curvature_quadratic(&x, &u, &u).unwrap().abs() < 1e-8);
            }
        }
    }

    #[test]
    fn potential_package_pendulum() {
        let m = ManifoldModel::flat(vec![CoordTopology::Line], Arc::new(Pendulum)).unwrap();
        let p = m.potential_package(&[0.0]).unwrap();
        assert_eq!(p.value, -1.0);
        assert!(p.gradient[0].abs() < 1e-15);
        assert!((p.hessian[(0, 0)] - 1.0).abs() < 1e-12);
        let c = ManifoldModel::flat(vec![CoordTopology::Line], Arc::new(ConstantPotential(2.0)))
            .unwrap();
        let p = c.potential_package(&[0.4]).unwrap();
        assert_eq!(p.gradient, vec![0.0]);
        assert_eq!(p.hessian[(0, 0)], 0.0);
    }

    #[test]
    fn exp_map_basic_cases() {
        let c = ManifoldModel::flat(
            vec![CoordTopology::Circle { period: 2.0 * PI }],
            Arc::new(Pendulum),
        )
        .unwrap();
        let y = c.exp_map(&[0.0], &[3.0 * PI], 4).unwrap();
        assert!((y[0] - PI).abs() < 1e-12);
        assert_eq!(c.exp_map(&[0.5], &[0.0], 4).unwrap(), vec![0.5]);
        assert!(c.exp_map(&[0.5], &[0.1], 0).is_err());
        let s = sphere();
        let x = [1.0, 0.3];
        assert_eq!(s.exp_map(&x, &[0.0, 0.0], 8).unwrap(), x.to_vec());
    }

    #[test]
    fn exp_map_leaving_sphere_chart_is_reported() {
        let s = sphere();
        assert!(matches!(s.geodesic(&[0.2, 0.0], &[-1.0, 0.0], 16), Err(Error::OutsideChart { .. })));
    }

    #[test]
    fn degenerate_metric_is_reported() {
        let m = ExprMetric::parse(1, &[vec!["x0"]], &["x0"]).unwrap();
        let model = ManifoldModel::new(
            vec![CoordTopology::Line],
            Arc::new(m),
            Arc::new(ConstantPotential(0.0)),
        )
        .unwrap();
        assert!(matches!(model.christoffel(&[-1.0]), Err(Error::DegenerateMetric { .. })));
    }
}
