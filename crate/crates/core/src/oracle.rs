//! Independent reference solvers used to cross-check the main discretization.
//!
//! Nothing here touches the finite-element kernels in `curvespace`: the
//! boundary value problem is solved in original time `t` by Chebyshev
//! collocation on the strong form `q̈ + Γ(q̇, q̇) + f(t) g^{-1}∂V = 0`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CoordTopology, ManifoldModel};
use crate::timescale::TimeFactor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    Shooting,
    DenseCollocation,
}

/// Reference orbit on `[−ξ_k, ξ_k]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSolution {
    pub method: OracleMethod,
    pub xi_k: f64,
    /// Collocation nodes in original time, increasing.
    pub t_nodes: Vec<f64>,
    /// Chart values at `t_nodes`.
    pub values: Vec<Vec<f64>>,
    /// Max-norm nodal residual of the equations of motion.
    pub residual: f64,
    /// Attainable residual level `ε ‖D²‖_∞ max|q|` of the collocation grid.
    pub residual_floor: f64,
    pub newton_iterations: usize,
}

impl OracleSolution {
    /// Barycentric interpolation at original time `t`.
    pub fn eval_t(&self, t: f64) -> Vec<f64> {
        let n = self.t_nodes.len();
        let dim = self.values[0].len();
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        for j in 0..n {
            let d = t - self.t_nodes[j];
            if d == 0.0 {
                return self.values[j].clone();
            }
            let mut w = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == n - 1 {
                w *= 0.5;
            }
            let c = w / d;
            den += c;
            for (a, v) in num.iter_mut().zip(&self.values[j]) {
                *a += c * v;
            }
        }
        num.iter().map(|a| a / den).collect()
    }

    pub fn eval_xi(&self, tf: &TimeFactor, xi: f64) -> Vec<f64> {
        self.eval_t(tf.t_of_xi(xi))
    }

    /// `(ξ, q)` on a uniform grid of `samples + 1` points in `ξ`.
    pub fn uniform(&self, tf: &TimeFactor, samples: usize) -> Vec<(f64, Vec<f64>)> {
        let samples = samples.max(1);
        (0..=samples)
            .map(|i| {
                let xi = -self.xi_k + 2.0 * self.xi_k * i as f64 / samples as f64;
                (xi, self.eval_xi(tf, xi))
            })
            .collect()
    }
}

/// Chebyshev–Lobatto points on `[−1, 1]` (increasing) and the first
/// differentiation matrix.
fn chebyshev(n: usize) -> (Vec<f64>, DMatrix<f64>) {
    let x: Vec<f64> = (0..=n).map(|j| -(std::f64::consts::PI * j as f64 / n as f64).cos()).collect();
    let c = |j: usize| {
        let e = if j == 0 || j == n { 2.0 } else { 1.0 };
        if j % 2 == 0 {
            e
        } else {
            -e
        }
    };
    let mut d = DMatrix::zeros(n + 1, n + 1);
    for i in 0..=n {
        for j in 0..=n {
            if i != j {
                d[(i, j)] = c(i) / c(j) / (x[i] - x[j]);
            }
        }
    }
    // negative-sum trick for the diagonal
    for i in 0..=n {
        let s: f64 = (0..=n).filter(|j| *j != i).map(|j| d[(i, j)]).sum();
        d[(i, i)] = -s;
    }
    (x, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollocationOptions {
    /// Polynomial degree.
    pub degree: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CollocationOptions {
    fn default() -> Self {
        Self { degree: 40, tol: 1e-11, max_iter: 40 }
    }
}

/// `q̈` forcing term `F(t, q, v) = Γ(q)(v, v) + f(t) g^{-1}(q) ∂V(q)`.
fn forcing(model: &ManifoldModel, tf: &TimeFactor, t: f64, q: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let (f, _, _) = tf.factor(t);
    let pkg = model.potential_package(q)?;
    let mut out: Vec<f64> = pkg.gradient.iter().map(|g| f * g).collect();
    if !model.is_flat() {
        let gamma = model.christoffel(q)?;
        for (o, c) in out.iter_mut().zip(gamma.contract(v, v)) {
            *o += c;
        }
    }
    Ok(out)
}

struct Collocation<'a> {
    model: &'a ManifoldModel,
    tf: &'a TimeFactor,
    t: Vec<f64>,
    d1: DMatrix<f64>,
    d2: DMatrix<f64>,
    dim: usize,
}

impl Collocation<'_> {
    fn derivatives(&self, q: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m = self.t.len();
        let mut v = vec![vec![0.0; self.dim]; m];
        let mut a = vec![vec![0.0; self.dim]; m];
        for i in 0..m {
            for j in 0..m {
                let (c1, c2) = (self.d1[(i, j)], self.d2[(i, j)]);
                for k in 0..self.dim {
                    v[i][k] += c1 * q[j][k];
                    a[i][k] += c2 * q[j][k];
                }
            }
        }
        (v, a)
    }

    fn residual(&self, q: &[Vec<f64>]) -> Result<Vec<f64>> {
        let m = self.t.len();
        let (v, a) = self.derivatives(q);
        let mut out = Vec::with_capacity((m - 2) * self.dim);
        for i in 1..m - 1 {
            let f = forcing(self.model, self.tf, self.t[i], &q[i], &v[i])?;
            out.extend(a[i].iter().zip(&f).map(|(x, y)| x + y));
        }
        Ok(out)
    }

    fn jacobian(&self, q: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let m = self.t.len();
        let n = self.dim;
        let (v, _) = self.derivatives(q);
        let size = (m - 2) * n;
        let mut jac = DMatrix::zeros(size, size);
        for i in 1..m - 1 {
            let row = (i - 1) * n;
            for j in 1..m - 1 {
                let col = (j - 1) * n;
                for k in 0..n {
                    jac[(row + k, col + k)] += self.d2[(i, j)];
                }
            }
            // dF/dv = 2 Γ(v, ·), dF/dq by central differences
            if !self.model.is_flat() {
                let gamma = self.model.christoffel(&q[i])?;
                let dv = gamma.along(&v[i]) * 2.0;
                for j in 1..m - 1 {
                    let col = (j - 1) * n;
                    let c = self.d1[(i, j)];
                    for a in 0..n {
                        for b in 0..n {
                            jac[(row + a, col + b)] += c * dv[(a, b)];
                        }
                    }
                }
            }
            let h = self.model.fd_step();
            for b in 0..n {
                let mut qp = q[i].clone();
                let mut qm = q[i].clone();
                qp[b] += h;
                qm[b] -= h;
                let fp = forcing(self.model, self.tf, self.t[i], &qp, &v[i])?;
                let fm = forcing(self.model, self.tf, self.t[i], &qm, &v[i])?;
                for a in 0..n {
                    jac[(row + a, row + b)] += (fp[a] - fm[a]) / (2.0 * h);
                }
            }
        }
        Ok(jac)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Solves the connecting boundary value problem on `[−ξ_k, ξ_k]` by dense
/// Newton collocation. `init` maps `ξ` to a chart point and fixes the lift of
/// the endpoints, which are `x_∓` lifted near `init(∓ξ_k)`.
pub fn bvp_solve(
    model: &ManifoldModel,
    tf: &TimeFactor,
    xi_k: f64,
    x_minus: &[f64],
    x_plus: &[f64],
    init: &dyn Fn(f64) -> Vec<f64>,
    opts: &CollocationOptions,
) -> Result<OracleSolution> {
    if !(xi_k > 0.0) {
        return Err(Error::InvalidArgument(format!("window half-width {xi_k} must be positive")));
    }
    if opts.degree < 4 {
        return Err(Error::InvalidArgument("collocation degree must be at least 4".into()));
    }
    let dim = model.dim();
    if x_minus.len() != dim || x_plus.len() != dim {
        return Err(Error::InvalidArgument("endpoint dimension mismatch".into()));
    }
    let (ta, tb) = (tf.t_of_xi(-xi_k), tf.t_of_xi(xi_k));
    let (s, d) = chebyshev(opts.degree);
    let scale = 2.0 / (tb - ta);
    let d1 = &d * scale;
    let d2 = &d1 * &d1;
    let t: Vec<f64> = s.iter().map(|x| ta + 0.5 * (x + 1.0) * (tb - ta)).collect();
    let col = Collocation { model, tf, t: t.clone(), d1, d2, dim };

    let mut q: Vec<Vec<f64>> = t.iter().map(|ti| init(tf.xi_of_t(*ti))).collect();
    let last = q.len() - 1;
    q[0] = model.lift_near(x_minus, &q[0]);
    q[last] = model.lift_near(x_plus, &q[last]);

    let d2_norm = (0..col.d2.nrows())
        .map(|i| col.d2.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let floor_of = |q: &[Vec<f64>]| f64::EPSILON * d2_norm * q.iter().map(|p| max_abs(p)).fold(1.0, f64::max);
    let mut res = col.residual(&q)?;
    let mut norm = max_abs(&res);
    let mut iterations = 0;
    while norm > opts.tol.max(4.0 * floor_of(&q)) {
        if iterations >= opts.max_iter {
            return Err(Error::MaxIterations { iterations, residual: norm });
        }
        iterations += 1;
        let jac = col.jacobian(&q)?;
        let rhs = DVector::from_vec(res.iter().map(|x| -x).collect());
        let step = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NoSolution("singular collocation Jacobian".into()))?;
        let size = q.iter().map(|p| max_abs(p)).fold(1.0, f64::max);
        if max_abs(step.as_slice()) <= 1e-14 * size {
            break;
        }
        let mut damping = 1.0;
        let mut accepted = false;
        while damping >= 1e-3 {
            let mut trial = q.clone();
            for i in 1..last {
                for k in 0..dim {
                    trial[i][k] += damping * step[(i - 1) * dim + k];
                }
            }
            if trial.iter().all(|p| model.in_domain(p)) {
                let r = col.residual(&trial)?;
                let n = max_abs(&r);
                if n < norm {
                    q = trial;
                    res = r;
                    norm = n;
                    accepted = true;
                    break;
                }
            }
            damping *= 0.5;
        }
        if !accepted {
            // no decrease from a tiny step: the residual sits at roundoff
            if norm < 1e2 * opts.tol.max(floor_of(&q)) {
                break;
            }
            return Err(Error::NoSolution("collocation line search failed".into()));
        }
    }
    let residual_floor = floor_of(&q);
    Ok(OracleSolution {
        method: OracleMethod::DenseCollocation,
        xi_k,
        t_nodes: t,
        values: q,
        residual: norm,
        residual_floor,
        newton_iterations: iterations,
    })
}

/// Nodal residual of an arbitrary curve (given as a function of `ξ`) on the
/// collocation grid of the given degree.
pub fn collocation_residual(
    model: &ManifoldModel,
    tf: &TimeFactor,
    xi_k: f64,
    curve: &dyn Fn(f64) -> Vec<f64>,
    degree: usize,
) -> Result<f64> {
    let (ta, tb) = (tf.t_of_xi(-xi_k), tf.t_of_xi(xi_k));
    let (s, d) = chebyshev(degree);
    let d1 = &d * (2.0 / (tb - ta));
    let d2 = &d1 * &d1;
    let t: Vec<f64> = s.iter().map(|x| ta + 0.5 * (x + 1.0) * (tb - ta)).collect();
    let q: Vec<Vec<f64>> = t.iter().map(|ti| curve(tf.xi_of_t(*ti))).collect();
    let col = Collocation { model, tf, t, d1, d2, dim: model.dim() };
    Ok(max_abs(&col.residual(&q)?))
}

/// Scalar solution of `(1/r)(r v')' = F(v, ξ)`, `v(a) = 1`, `v(b) = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalarShot {
    pub method: OracleMethod,
    pub xi: Vec<f64>,
    pub v: Vec<f64>,
    pub dv: Vec<f64>,
}

impl ScalarShot {
    /// Linear interpolation in `ξ`.
    pub fn value_at(&self, xi: f64) -> f64 {
        let i = self.xi.partition_point(|x| *x < xi).clamp(1, self.xi.len() - 1);
        let (x0, x1) = (self.xi[i - 1], self.xi[i]);
        let w = (xi - x0) / (x1 - x0);
        self.v[i - 1] * (1.0 - w) + self.v[i] * w
    }
}

/// RK4 from `ξ = b` backwards with `v(b) = 0`, `v'(b) = slope`.
fn integrate_back(
    tf: &TimeFactor,
    rhs: &dyn Fn(f64, f64) -> f64,
    a: f64,
    b: f64,
    slope: f64,
    steps: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let h = (a - b) / steps as f64;
    // y = (v, v'), v'' = F(v, ξ) − p v'
    let field = |xi: f64, y: [f64; 2]| [y[1], rhs(y[0], xi) - tf.p(xi) * y[1]];
    let mut y = [0.0, slope];
    let mut xs = vec![b];
    let mut vs = vec![0.0];
    let mut ds = vec![slope];
    for i in 0..steps {
        let x = b + i as f64 * h;
        let k1 = field(x, y);
        let k2 = field(x + 0.5 * h, [y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1]]);
        let k3 = field(x + 0.5 * h, [y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1]]);
        let k4 = field(x + h, [y[0] + h * k3[0], y[1] + h * k3[1]]);
        for c in 0..2 {
            y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        xs.push(if i + 1 == steps { a } else { x + h });
        vs.push(y[0]);
        ds.push(y[1]);
    }
    xs.reverse();
    vs.reverse();
    ds.reverse();
    (xs, vs, ds)
}

fn shot(xi: Vec<f64>, v: Vec<f64>, dv: Vec<f64>) -> ScalarShot {
    ScalarShot { method: OracleMethod::Shooting, xi, v, dv }
}

/// Linear problem `(1/r)(r v')' = λ² v` by one backward shot and rescaling.
pub fn shoot_comparison(tf: &TimeFactor, lambda: f64, a: f64, b: f64, steps: usize) -> Result<ScalarShot> {
    if !(0.0 < a && a < b) {
        return Err(Error::InvalidArgument(format!("need 0 < a < b, got [{a}, {b}]")));
    }
    let l2 = lambda * lambda;
    let (xi, v, dv) = integrate_back(tf, &move |v, _| l2 * v, a, b, -1.0, steps.max(16));
    let s = v[0];
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::NoSolution("comparison shot did not reach a positive value".into()));
    }
    Ok(shot(xi, v.iter().map(|x| x / s).collect(), dv.iter().map(|x| x / s).collect()))
}

/// Nonlinear problem by bisection on the terminal slope. `F` must make `v(a)`
/// increase with `−v'(b)`, which holds whenever `F` is increasing in `v`.
pub fn shoot_nonlinear(
    tf: &TimeFactor,
    rhs: &dyn Fn(f64, f64) -> f64,
    a: f64,
    b: f64,
    steps: usize,
) -> Result<ScalarShot> {
    if !(0.0 < a && a < b) {
        return Err(Error::InvalidArgument(format!("need 0 < a < b, got [{a}, {b}]")));
    }
    let steps = steps.max(16);
    let reach = |s: f64| integrate_back(tf, rhs, a, b, -s, steps).1[0];
    let mut hi = 1.0;
    let mut tries = 0;
    while !(reach(hi) >= 1.0) {
        hi *= 2.0;
        tries += 1;
        if tries > 200 {
            return Err(Error::NoSolution("could not bracket the terminal slope".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if reach(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (xi, v, dv) = integrate_back(tf, rhs, a, b, -0.5 * (lo + hi), steps);
    Ok(shot(xi, v, dv))
}

/// Finite-difference convergence report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdReport {
    pub steps: Vec<f64>,
    /// Max over directions of `|analytic − central difference|` per step.
    pub gradient_errors: Vec<f64>,
    pub hessian_errors: Vec<f64>,
    /// Least-squares slope of `log error` against `log h`; `None` when the
    /// differences sit at roundoff for every step.
    pub gradient_order: Option<f64>,
    pub hessian_order: Option<f64>,
}

/// Fitted slope over the points whose error exceeds `floor`.
pub fn fitted_order(steps: &[f64], errors: &[f64], floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .zip(errors)
        .filter(|(_, e)| **e > floor)
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Checks a functional `value(s)`, `s` a step vector applied to a base point by
/// some retraction with `value(0)` the base value, against an analytic
/// differential `grad · φ` and quadratic form `hess(φ, φ)`.
///
/// The Hessian difference uses `(I(hφ) − 2I(0) + I(−hφ))/h²`, which matches the
/// covariant Hessian when the retraction follows geodesics.
pub fn fd_check(
    value: &dyn Fn(&[f64]) -> Result<f64>,
    grad: &[f64],
    hess: Option<&dyn Fn(&[f64]) -> f64>,
    directions: &[Vec<f64>],
    steps: &[f64],
) -> Result<FdReport> {
    if steps.len() < 3 {
        return Err(Error::InvalidArgument("fd_check needs at least three steps".into()));
    }
    let zero = vec![0.0; grad.len()];
    let base = value(&zero)?;
    let mut gradient_errors = vec![0.0_f64; steps.len()];
    let mut hessian_errors = vec![0.0_f64; steps.len()];
    let mut scale = base.abs();
    for phi in directions {
        let exact_g: f64 = grad.iter().zip(phi).map(|(a, b)| a * b).sum();
        let exact_h = hess.map(|h| h(phi));
        scale = scale.max(exact_g.abs()).max(exact_h.unwrap_or(0.0).abs());
        for (i, h) in steps.iter().enumerate() {
            let plus: Vec<f64> = phi.iter().map(|v| h * v).collect();
            let minus: Vec<f64> = phi.iter().map(|v| -h * v).collect();
            let (ip, im) = (value(&plus)?, value(&minus)?);
            let g = (ip - im) / (2.0 * h);
            gradient_errors[i] = gradient_errors[i].max((g - exact_g).abs());
            if let Some(e) = exact_h {
                let q = (ip - 2.0 * base + im) / (h * h);
                hessian_errors[i] = hessian_errors[i].max((q - e).abs());
            }
        }
    }
    let floor = 1e-13 * (1.0 + scale);
    let hs: Vec<f64> = steps.to_vec();
    let go = fitted_order(&hs, &gradient_errors, floor);
    let ho = if hess.is_some() {
        let hfloor = hs.iter().map(|h| floor / (h * h)).fold(0.0, f64::max);
        fitted_order(&hs, &hessian_errors, hfloor.min(1e-9 * (1.0 + scale)))
    } else {
        None
    };
    Ok(FdReport { steps: hs, gradient_errors, hessian_errors, gradient_order: go, hessian_order: ho })
}

/// Estimated minimal length between the spheres `B_R(x_−)` and `B_R(x_+)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereDistance {
    pub length: f64,
    /// Spheres touch or overlap, in which case `length` is zero.
    pub overlapping: bool,
    pub mesh_nodes: usize,
}

#[derive(PartialEq)]
struct Label(f64, usize);

impl Eq for Label {}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Shortest path on a uniform chart mesh between the two balls.
///
/// Sources are mesh nodes inside `B_R(x_−)` starting with label `−(R − d)`
/// so the path is measured from the sphere surface; the result subtracts
/// the same slack at the target ball.
pub fn sphere_distance(model: &ManifoldModel, x_minus: &[f64], x_plus: &[f64], radius: f64) -> Result<SphereDistance> {
    let dim = model.dim();
    if x_minus.len() != dim || x_plus.len() != dim {
        return Err(Error::InvalidArgument("endpoint dimension mismatch".into()));
    }
    if model.distance(x_minus, x_plus) <= 2.0 * radius {
        return Ok(SphereDistance { length: 0.0, overlapping: true, mesh_nodes: 0 });
    }
    let per_axis = match dim {
        1 => 4096,
        2 => 160,
        3 => 32,
        _ => 12,
    };
    let x_plus_l = model.lift_near(x_plus, x_minus);
    let span = x_minus.iter().zip(&x_plus_l).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let margin = 0.5 * span.max(1.0);
    let mut axes: Vec<(f64, f64, usize, bool)> = Vec::with_capacity(dim);
    for (i, topo) in model.topology().iter().enumerate() {
        match topo {
            CoordTopology::Circle { period } => {
                axes.push((x_minus[i], period / per_axis as f64, per_axis, true));
            }
            CoordTopology::Line => {
                let lo = x_minus[i].min(x_plus_l[i]) - margin;
                let hi = x_minus[i].max(x_plus_l[i]) + margin;
                axes.push((lo, (hi - lo) / per_axis as f64, per_axis + 1, false));
            }
        }
    }
    let total: usize = axes.iter().map(|a| a.2).product();
    let coords = |mut idx: usize| -> Vec<usize> {
        let mut out = vec![0; dim];
        for (k, a) in axes.iter().enumerate() {
            out[k] = idx % a.2;
            idx /= a.2;
        }
        out
    };
    let point = |c: &[usize]| -> Vec<f64> { c.iter().zip(&axes).map(|(i, a)| a.0 + *i as f64 * a.1).collect() };
    let flat = |c: &[usize]| -> usize {
        let mut idx = 0;
        for k in (0..dim).rev() {
            idx = idx * axes[k].2 + c[k];
        }
        idx
    };
    // neighbour offsets with coprime entries in {−2, …, 2}
    let mut offsets: Vec<Vec<i64>> = Vec::new();
    let reach: i64 = if dim <= 2 { 2 } else { 1 };
    let width = (2 * reach + 1) as usize;
    for code in 0..width.pow(dim as u32) {
        let mut c = code;
        let off: Vec<i64> = (0..dim)
            .map(|_| {
                let v = (c % width) as i64 - reach;
                c /= width;
                v
            })
            .collect();
        let g = off.iter().fold(0_i64, |g, v| gcd(g, v.abs()));
        if g == 1 {
            offsets.push(off);
        }
    }

    let mut label = vec![f64::INFINITY; total];
    let mut heap = BinaryHeap::new();
    for idx in 0..total {
        let p = point(&coords(idx));
        if !model.in_domain(&p) {
            continue;
        }
        let d = model.distance(&p, x_minus);
        if d <= radius {
            label[idx] = d - radius;
            heap.push(Label(d - radius, idx));
        }
    }
    let mut best = f64::INFINITY;
    while let Some(Label(l, idx)) = heap.pop() {
        if l > label[idx] || l >= best {
            continue;
        }
        let c = coords(idx);
        let p = point(&c);
        let dp = model.distance(&p, x_plus);
        if dp <= radius {
            best = best.min(l - (radius - dp));
            continue;
        }
        'next: for off in &offsets {
            let mut nc = c.clone();
            for k in 0..dim {
                let (_, _, count, periodic) = axes[k];
                let v = nc[k] as i64 + off[k];
                if periodic {
                    nc[k] = v.rem_euclid(count as i64) as usize;
                } else if v < 0 || v >= count as i64 {
                    continue 'next;
                } else {
                    nc[k] = v as usize;
                }
            }
            let q: Vec<f64> = p.iter().zip(off).zip(&axes).map(|((x, o), a)| x + *o as f64 * a.1).collect();
            if !model.in_domain(&q) {
                continue;
            }
            let nl = l + model.segment_length(&p, &q);
            let ni = flat(&nc);
            if nl < label[ni] {
                label[ni] = nl;
                heap.push(Label(nl, ni));
            }
        }
    }
    if !best.is_finite() {
        return Err(Error::NoSolution("target ball not reachable on the chart mesh".into()));
    }
    Ok(SphereDistance { length: best.max(0.0), overlapping: false, mesh_nodes: total })
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
