//! Curves on a window `Ω_k` with pinned ends, the windowed action and its
//! first and second variations, discretized by piecewise-linear elements.

mod grid;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ManifoldModel;
use crate::linalg::{smallest_generalized_eigen, EigenPair, SymBanded};
use crate::timescale::TimeFactor;

pub use grid::{Cell, WindowGrid, MIN_CELLS};

/// Convenience wrapper matching [`WindowGrid::build`].
pub fn build_grid(tf: &TimeFactor, xi_k: f64, n_cells: usize) -> Result<WindowGrid> {
    WindowGrid::build(tf, xi_k, n_cells)
}

/// Chart points at every grid node. Periodic coordinates are lifted so that
/// consecutive points differ by less than half a period.
#[derive(Debug, Clone)]
pub struct DiscreteCurve {
    grid: Arc<WindowGrid>,
    points: Vec<Vec<f64>>,
}

/// Tangent vectors at every node, zero at both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentField {
    pub vectors: Vec<Vec<f64>>,
}

impl TangentField {
    pub fn zeros(nodes: usize, dim: usize) -> Self {
        Self { vectors: vec![vec![0.0; dim]; nodes] }
    }

    /// From the interior, node-major coefficient vector used by the solvers.
    pub fn from_interior(interior: &[f64], nodes: usize, dim: usize) -> Self {
        let mut out = Self::zeros(nodes, dim);
        for (i, v) in out.vectors.iter_mut().enumerate().take(nodes - 1).skip(1) {
            v.copy_from_slice(&interior[(i - 1) * dim..i * dim]);
        }
        out
    }

    pub fn interior(&self) -> Vec<f64> {
        let n = self.vectors.len();
        self.vectors[1..n - 1].iter().flatten().copied().collect()
    }
}

impl DiscreteCurve {
    /// Curve from explicit points; the ends must be the prescribed critical
    /// points (the caller passes them pinned).
    pub fn new(model: &ManifoldModel, grid: Arc<WindowGrid>, points: Vec<Vec<f64>>) -> Result<Self> {
        if points.len() != grid.nodes().len() {
            return Err(Error::InvalidArgument(format!(
                "{} points for {} nodes",
                points.len(),
                grid.nodes().len()
            )));
        }
        let n = model.dim();
        for p in &points {
            if p.len() != n {
                return Err(Error::InvalidArgument("point dimension mismatch".into()));
            }
            if !model.in_domain(p) {
                return Err(Error::OutsideChart { point: p.clone() });
            }
        }
        Ok(Self { grid, points })
    }

    /// Straight chart line from `x_minus` to `x_plus`, linear in original time
    /// `t(ξ)` (the natural parametrization of the geodesic near the turning
    /// point).
    pub fn linear_in_time(
        model: &ManifoldModel,
        tf: &TimeFactor,
        grid: Arc<WindowGrid>,
        x_minus: &[f64],
        x_plus: &[f64],
    ) -> Result<Self> {
        let xi = grid.xi_k();
        let (t0, t1) = (tf.t_of_xi(-xi), tf.t_of_xi(xi));
        let points = grid
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 0 {
                    return x_minus.to_vec();
                }
                if i + 1 == grid.nodes().len() {
                    return x_plus.to_vec();
                }
                let w = (tf.t_of_xi(*s) - t0) / (t1 - t0);
                x_minus.iter().zip(x_plus).map(|(a, b)| a + w * (b - a)).collect()
            })
            .collect();
        Self::new(model, grid, points)
    }

    /// The step function `χ`: `x_−` left of the origin, `x_+` from it on.
    pub fn step(model: &ManifoldModel, grid: Arc<WindowGrid>, x_minus: &[f64], x_plus: &[f64]) -> Result<Self> {
        let z = grid.zero_index();
        let points = (0..grid.nodes().len())
            .map(|i| if i < z { x_minus.to_vec() } else { x_plus.to_vec() })
            .collect();
        Self::new(model, grid, points)
    }

    pub fn grid(&self) -> &Arc<WindowGrid> {
        &self.grid
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn x_minus(&self) -> &[f64] {
        &self.points[0]
    }

    pub fn x_plus(&self) -> &[f64] {
        &self.points[self.points.len() - 1]
    }

    /// Number of scalar unknowns (interior nodes times dimension).
    pub fn n_unknowns(&self) -> usize {
        (self.points.len() - 2) * self.dim()
    }

    /// Nodewise retraction `q_i ← Exp_{q_i}(v_i)`; the ends stay fixed.
    pub fn retract(&self, model: &ManifoldModel, step: &[f64]) -> Result<Self> {
        let n = self.dim();
        if step.len() != self.n_unknowns() {
            return Err(Error::InvalidArgument("step length mismatch".into()));
        }
        let last = self.points.len() - 1;
        let points: Result<Vec<Vec<f64>>> = self
            .points
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                if i == 0 || i == last {
                    return Ok(p.clone());
                }
                let v = &step[(i - 1) * n..i * n];
                if model.is_flat() {
                    Ok(p.iter().zip(v).map(|(a, b)| a + b).collect())
                } else {
                    Ok(model.geodesic(p, v, 8)?.0)
                }
            })
            .collect();
        Self::new(model, self.grid.clone(), points?)
    }

    /// Interior chart differences `self − other` on a shared grid.
    pub fn chart_difference(&self, other: &DiscreteCurve) -> Result<Vec<f64>> {
        if !Arc::ptr_eq(&self.grid, &other.grid) && self.grid.nodes() != other.grid.nodes() {
            return Err(Error::InvalidArgument("curves live on different grids".into()));
        }
        let last = self.points.len() - 1;
        Ok(self.points[1..last]
            .iter()
            .zip(&other.points[1..last])
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
            .collect())
    }

    /// Largest nodewise distance to `other` on a shared grid.
    pub fn sup_distance(&self, model: &ManifoldModel, other: &DiscreteCurve) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| model.distance(a, b))
            .fold(0.0, f64::max)
    }

    /// Last exit from `B_R(x_±)` on each side, interpolated linearly between
    /// nodes. Returns the smaller of `ξ_k − ξ̂` over the two sides as
    /// `ξ̂ = ξ_k − gap`; a side that never enters the ball gives `ξ̂ = ξ_k`.
    pub fn measured_entry(&self, model: &ManifoldModel, radius: f64) -> f64 {
        let nodes = self.grid.nodes();
        let xi_k = self.grid.xi_k();
        let last = nodes.len() - 1;
        let side = |target: &[f64], order: &mut dyn Iterator<Item = usize>| -> f64 {
            let mut prev: Option<(usize, f64)> = None;
            for i in order {
                let d = model.distance(&self.points[i], target);
                if d > radius {
                    return match prev {
                        None => 0.0,
                        Some((j, dj)) => {
                            let s = (radius - dj) / (d - dj);
                            (nodes[j] + s * (nodes[i] - nodes[j])).abs()
                        }
                    };
                }
                prev = Some((i, d));
            }
            0.0
        };
        let plus = side(self.x_plus(), &mut (0..=last).rev());
        let minus = side(self.x_minus(), &mut (0..=last));
        // `side` returns |ξ| of the crossing; the gap is measured from the end.
        let gap_plus = if plus == 0.0 && model.distance(&self.points[last - 1], self.x_plus()) > radius {
            0.0
        } else {
            xi_k - plus
        };
        let gap_minus = if minus == 0.0 && model.distance(&self.points[1], self.x_minus()) > radius {
            0.0
        } else {
            xi_k - minus
        };
        xi_k - gap_plus.min(gap_minus)
    }

    /// One-sided second-order estimate of `|q'|` at `−ξ_k` and `+ξ_k`.
    pub fn boundary_speeds(&self, model: &ManifoldModel) -> (f64, f64) {
        let x = self.grid.nodes();
        let n = x.len();
        let d = |i0: usize, i1: usize, i2: usize| -> Vec<f64> {
            // derivative at x[i0] of the quadratic through three nodes
            let (a, b, c) = (x[i0], x[i1], x[i2]);
            let w0 = (2.0 * a - b - c) / ((a - b) * (a - c));
            let w1 = (a - c) / ((b - a) * (b - c));
            let w2 = (a - b) / ((c - a) * (c - b));
            (0..self.dim())
                .map(|k| w0 * self.points[i0][k] + w1 * self.points[i1][k] + w2 * self.points[i2][k])
                .collect()
        };
        let left = d(0, 1, 2);
        let right = d(n - 1, n - 2, n - 3);
        (model.norm(&self.points[0], &left), model.norm(&self.points[n - 1], &right))
    }
}

/// What to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssemblyOptions {
    /// Include the potential term; off for the geodesic (kinetic) problem.
    pub potential: bool,
    pub hessian: bool,
    pub mass: bool,
}

impl AssemblyOptions {
    pub const FULL: Self = Self { potential: true, hessian: true, mass: true };
    pub const VALUE: Self = Self { potential: true, hessian: false, mass: false };
    pub const KINETIC: Self = Self { potential: false, hessian: true, mass: true };
}

/// Value, gradient, Hessian and Gram operator of the action at a curve.
#[derive(Debug, Clone)]
pub struct ActionDerivatives {
    pub value: f64,
    /// Chart covector of the first variation at interior nodes, node-major.
    pub gradient: Vec<f64>,
    /// Covariant second variation; exact at every curve, not only at critical
    /// points, because the Christoffel term of the gradient is included.
    pub hessian: Option<SymBanded>,
    /// Gram form of `∫(|D_ξ v|² + |v|²) r dξ`.
    pub mass: Option<SymBanded>,
    /// `(gᵀ M⁻¹ g)^{1/2}`, the operator norm of the first variation.
    pub dual_residual: Option<f64>,
}

impl ActionDerivatives {
    /// Riesz representative `M⁻¹ g` of the first variation.
    pub fn gradient_field(&self, nodes: usize, dim: usize) -> Result<TangentField> {
        let mass = self
            .mass
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("mass operator not assembled".into()))?;
        let v = mass.cholesky()?.solve(&self.gradient);
        Ok(TangentField::from_interior(&v, nodes, dim))
    }
}

struct CellTerms {
    value: f64,
    grad: Vec<f64>,
    hess: Option<DMatrix<f64>>,
    mass: Option<DMatrix<f64>>,
}

fn potential_ref(curve: &DiscreteCurve, model: &ManifoldModel) -> (f64, f64) {
    (model.potential(curve.x_minus()), model.potential(curve.x_plus()))
}

fn cell_terms(
    model: &ManifoldModel,
    cell: &Cell,
    u: &[f64],
    w: &[f64],
    v_ref: f64,
    opts: AssemblyOptions,
) -> Result<CellTerms> {
    let n = u.len();
    let kappa = 1.0 / cell.int_rinv;
    let e = DVector::from_iterator(n, w.iter().zip(u).map(|(a, b)| a - b));
    let mid: Vec<f64> = u.iter().zip(w).map(|(a, b)| 0.5 * (a + b)).collect();
    if !model.in_domain(&mid) {
        return Err(Error::OutsideChart { point: mid });
    }
    let g = model.metric_at(&mid);
    let ge = &g * &e;
    let mut value = 0.5 * kappa * e.dot(&ge);
    let mut grad = vec![0.0; 2 * n];
    let flat = model.is_flat();
    let dg = if flat { Vec::new() } else { model.metric_derivatives(&mid) };
    // K_e = κ G e,  K_m[k] = ½ κ eᵀ ∂_k G e
    for a in 0..n {
        let ke = kappa * ge[a];
        let km = if flat { 0.0 } else { 0.5 * kappa * e.dot(&(&dg[a] * &e)) };
        grad[a] = -ke + 0.5 * km;
        grad[n + a] = ke + 0.5 * km;
    }
    let mut hess = None;
    if opts.hessian {
        let kee = &g * kappa;
        let mut h2 = DMatrix::zeros(2 * n, 2 * n);
        if flat {
            for a in 0..n {
                for b in 0..n {
                    h2[(a, b)] = kee[(a, b)];
                    h2[(n + a, n + b)] = kee[(a, b)];
                    h2[(a, n + b)] = -kee[(a, b)];
                    h2[(n + a, b)] = -kee[(a, b)];
                }
            }
        } else {
            let ddg = model.metric_second_derivatives(&mid);
            // K_em[a][k] = κ (∂_k G e)_a,  K_mm[k][l] = ½ κ eᵀ ∂_k∂_l G e
            let mut kem = DMatrix::zeros(n, n);
            for k in 0..n {
                let col = &dg[k] * &e;
                for a in 0..n {
                    kem[(a, k)] = kappa * col[a];
                }
            }
            let kmm = DMatrix::from_fn(n, n, |k, l| 0.5 * kappa * e.dot(&(&ddg[k][l] * &e)));
            let sym = &kem + kem.transpose();
            let skew = kem.transpose() - &kem;
            let huu = &kee - &sym * 0.5 + &kmm * 0.25;
            let hww = &kee + &sym * 0.5 + &kmm * 0.25;
            let huw = -&kee + &skew * 0.5 + &kmm * 0.25;
            h2.view_mut((0, 0), (n, n)).copy_from(&huu);
            h2.view_mut((n, n), (n, n)).copy_from(&hww);
            h2.view_mut((0, n), (n, n)).copy_from(&huw);
            h2.view_mut((n, 0), (n, n)).copy_from(&huw.transpose());
        }
        hess = Some(h2);
    }
    if opts.potential {
        for (s, wt) in cell.gauss {
            let q: Vec<f64> = u.iter().zip(w).map(|(a, b)| a + s * (b - a)).collect();
            if !model.in_domain(&q) {
                return Err(Error::OutsideChart { point: q });
            }
            let c = wt * cell.sigma;
            value -= c * (model.potential(&q) - v_ref);
            let dv = model.potential_partials(&q);
            let shape = [1.0 - s, s];
            for (blk, phi) in shape.iter().enumerate() {
                for a in 0..n {
                    grad[blk * n + a] -= c * phi * dv[a];
                }
            }
            if let Some(h2) = hess.as_mut() {
                let hv = model.potential_chart_hessian(&q);
                for (bi, pi) in shape.iter().enumerate() {
                    for (bj, pj) in shape.iter().enumerate() {
                        for a in 0..n {
                            for b in 0..n {
                                h2[(bi * n + a, bj * n + b)] -= c * pi * pj * hv[(a, b)];
                            }
                        }
                    }
                }
            }
        }
    }
    let mut mass = None;
    if opts.mass {
        let mut m2 = DMatrix::zeros(2 * n, 2 * n);
        let gam = model.christoffel(&mid)?;
        // D_ξ φ = s'(ξ) [φ_b − φ_a + ½ Γ(e)(φ_a + φ_b)] and ∫ r s'² = κ
        let a = gam.along(e.as_slice());
        let id = DMatrix::<f64>::identity(n, n);
        let pu = &a * 0.5 - &id;
        let pw = &a * 0.5 + &id;
        let blocks = [&pu, &pw];
        let l2 = cell.l2_block();
        for (bi, pi) in blocks.iter().enumerate() {
            for (bj, pj) in blocks.iter().enumerate() {
                let s = pi.transpose() * &g * *pj * kappa;
                let blk = s + &g * l2[bi][bj];
                m2.view_mut((bi * n, bj * n), (n, n)).copy_from(&blk);
            }
        }
        mass = Some(m2);
    }
    Ok(CellTerms { value, grad, hess, mass })
}

/// Assembles the action and the requested derivatives.
pub fn assemble(model: &ManifoldModel, curve: &DiscreteCurve, opts: AssemblyOptions) -> Result<ActionDerivatives> {
    let n = curve.dim();
    let grid = curve.grid();
    let nodes = grid.nodes().len();
    let unknowns = (nodes - 2) * n;
    let (v_minus, v_plus) = potential_ref(curve, model);
    let terms: Result<Vec<CellTerms>> = grid
        .cells()
        .par_iter()
        .enumerate()
        .map(|(c, cell)| {
            let v_ref = if cell.side() > 0.0 { v_plus } else { v_minus };
            cell_terms(model, cell, &curve.points[c], &curve.points[c + 1], v_ref, opts)
        })
        .collect();
    let terms = terms?;

    let kd = 2 * n - 1;
    let mut value = 0.0;
    let mut gradient = vec![0.0; unknowns];
    let mut hessian = opts.hessian.then(|| SymBanded::zeros(unknowns, kd));
    let mut mass = opts.mass.then(|| SymBanded::zeros(unknowns, kd));
    // Global offset of local slot `blk` of cell `c`, if that node is interior.
    let slot = |c: usize, blk: usize| -> Option<usize> {
        let node = c + blk;
        (node >= 1 && node + 1 < nodes).then(|| (node - 1) * n)
    };
    for (c, t) in terms.iter().enumerate() {
        value += t.value;
        for blk in 0..2 {
            if let Some(o) = slot(c, blk) {
                for a in 0..n {
                    gradient[o + a] += t.grad[blk * n + a];
                }
            }
        }
        for (local, global) in [(t.hess.as_ref(), hessian.as_mut()), (t.mass.as_ref(), mass.as_mut())] {
            let (Some(local), Some(global)) = (local, global) else { continue };
            for bi in 0..2 {
                let Some(oi) = slot(c, bi) else { continue };
                for bj in 0..2 {
                    let Some(oj) = slot(c, bj) else { continue };
                    for a in 0..n {
                        for b in 0..n {
                            let (i, j) = (oi + a, oj + b);
                            if i >= j {
                                global.add(i, j, local[(bi * n + a, bj * n + b)]);
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(h) = hessian.as_mut() {
        if !model.is_flat() {
            // Covariant correction −Γ(q_i)·dI at each interior node.
            let corr: Result<Vec<DMatrix<f64>>> = (1..nodes - 1)
                .into_par_iter()
                .map(|i| {
                    let gam = model.christoffel(&curve.points[i])?;
                    Ok(gam.lowered_by(&gradient[(i - 1) * n..i * n]))
                })
                .collect();
            for (k, m) in corr?.iter().enumerate() {
                for a in 0..n {
                    for b in 0..=a {
                        h.add(k * n + a, k * n + b, -0.5 * (m[(a, b)] + m[(b, a)]));
                    }
                }
            }
        }
    }
    let dual_residual = match &mass {
        Some(m) => {
            let y = m.cholesky()?.solve(&gradient);
            Some(crate::linalg::dot(&gradient, &y).max(0.0).sqrt())
        }
        None => None,
    };
    Ok(ActionDerivatives { value, gradient, hessian, mass, dual_residual })
}

/// Windowed action `I_k[q]`.
pub fn action(model: &ManifoldModel, curve: &DiscreteCurve) -> Result<f64> {
    Ok(assemble(model, curve, AssemblyOptions::VALUE)?.value)
}

/// First variation as a tangent field plus its dual norm.
pub fn gradient(model: &ManifoldModel, curve: &DiscreteCurve) -> Result<(TangentField, f64)> {
    let d = assemble(model, curve, AssemblyOptions { potential: true, hessian: false, mass: true })?;
    let field = d.gradient_field(curve.points.len(), curve.dim())?;
    Ok((field, d.dual_residual.unwrap_or(0.0)))
}

/// Hessian and Gram operators at a curve.
pub fn hessian(model: &ManifoldModel, curve: &DiscreteCurve) -> Result<(SymBanded, SymBanded)> {
    let d = assemble(model, curve, AssemblyOptions::FULL)?;
    Ok((d.hessian.expect("assembled"), d.mass.expect("assembled")))
}

/// Relative accuracy of the coercivity eigenvalue.
pub const GAMMA_REL_TOL: f64 = 1e-9;

/// Smallest eigenvalue of the Hessian relative to the Gram form.
pub fn coercivity_gamma(hessian: &SymBanded, mass: &SymBanded) -> Result<EigenPair> {
    Ok(smallest_generalized_eigen(hessian, mass, GAMMA_REL_TOL)?)
}

/// Scalar Gram forms `∫(v'² + v²)` and `∫(v'² + v²) r` on the interior nodes,
/// both for hats linear in `ξ` (on hats linear in time the unweighted form is
/// infinite at the origin once `r^{-2}` is not integrable); their extreme
/// generalized eigenvalue gives the embedding constant `C_r`.
pub fn scalar_gram_forms(grid: &WindowGrid) -> (SymBanded, SymBanded) {
    let nodes = grid.nodes().len();
    let m = nodes - 2;
    let mut plain = SymBanded::zeros(m, 1);
    let mut weighted = SymBanded::zeros(m, 1);
    for (c, cell) in grid.cells().iter().enumerate() {
        let h = cell.width();
        for (form, w) in [(&mut plain, h), (&mut weighted, cell.int_r)] {
            let local = [[w / (h * h) + w / 3.0, -w / (h * h) + w / 6.0], [0.0, w / (h * h) + w / 3.0]];
            for bi in 0..2 {
                let ni = c + bi;
                if ni == 0 || ni + 1 == nodes {
                    continue;
                }
                for bj in 0..=bi {
                    let nj = c + bj;
                    if nj == 0 || nj + 1 == nodes {
                        continue;
                    }
                    let v = if bi == bj { local[bi][bi] } else { local[0][1] };
                    form.add(ni - 1, nj - 1, v);
                }
            }
        }
    }
    (plain, weighted)
}

/// Chart-linear interpolation of `curve` onto `grid`, which must contain the
/// old window; outside it the curve continues as `x_∓`.
pub fn prolong(model: &ManifoldModel, curve: &DiscreteCurve, grid: Arc<WindowGrid>) -> Result<DiscreteCurve> {
    let old = curve.grid();
    if grid.xi_k() < old.xi_k() {
        return Err(Error::InvalidArgument(format!(
            "cannot prolong from window {} to smaller window {}",
            old.xi_k(),
            grid.xi_k()
        )));
    }
    if Arc::ptr_eq(&grid, old) || grid.nodes() == old.nodes() {
        return Ok(DiscreteCurve { grid, points: curve.points.clone() });
    }
    let xs = old.nodes();
    let points = grid
        .nodes()
        .iter()
        .map(|x| {
            if *x <= xs[0] {
                return curve.x_minus().to_vec();
            }
            if *x >= xs[xs.len() - 1] {
                return curve.x_plus().to_vec();
            }
            if let Some(i) = old.index_of(*x) {
                return curve.points[i].clone();
            }
            let j = xs.partition_point(|v| v < x);
            let s = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
            let (u, w) = (&curve.points[j - 1], &curve.points[j]);
            u.iter().zip(w).map(|(a, b)| a + s * (b - a)).collect()
        })
        .collect();
    DiscreteCurve::new(model, grid, points)
}

/// Per-cell energy `E = ½|q'|² + σ(V(q) − V(χ))` at the time midpoints.
#[derive(Debug, Clone)]
pub struct EnergyProfile {
    pub mids: Vec<f64>,
    pub energy: Vec<f64>,
    /// `|q'|` at midpoints.
    pub speed: Vec<f64>,
    /// Local truncation estimate from the second difference of `E`, plus the
    /// roundoff of `E` itself.
    pub truncation: Vec<f64>,
}

pub fn energy_profile(model: &ManifoldModel, curve: &DiscreteCurve) -> EnergyProfile {
    let (v_minus, v_plus) = potential_ref(curve, model);
    let cells = curve.grid().cells();
    let mut mids = Vec::with_capacity(cells.len());
    let mut energy = Vec::with_capacity(cells.len());
    let mut speed = Vec::with_capacity(cells.len());
    let mut roundoff = Vec::with_capacity(cells.len());
    for (c, cell) in cells.iter().enumerate() {
        let (u, w) = (&curve.points[c], &curve.points[c + 1]);
        let mid: Vec<f64> = u.iter().zip(w).map(|(a, b)| 0.5 * (a + b)).collect();
        let scale = cell.r_tmid * cell.int_rinv;
        let qd: Vec<f64> = w.iter().zip(u).map(|(a, b)| (a - b) / scale).collect();
        let s = model.norm(&mid, &qd);
        let v_ref = if cell.side() > 0.0 { v_plus } else { v_minus };
        let v = model.potential(&mid);
        mids.push(cell.xi_tmid);
        speed.push(s);
        energy.push(0.5 * s * s + cell.sigma * (v - v_ref));
        // chart coordinates carry an absolute error of about ε|q|, which the
        // difference quotient divides by the cell width
        let coord = u.iter().chain(w).fold(0.0_f64, |m, x| m.max(x.abs()));
        let ds = 2.0 * f64::EPSILON * coord / scale;
        roundoff.push(4.0 * (s * ds + ds * ds + f64::EPSILON * (v.abs() + v_ref.abs() + 0.5 * s * s)));
    }
    let k = energy.len();
    let truncation = (0..k)
        .map(|i| {
            let lo = i.saturating_sub(1).min(k.saturating_sub(3));
            let d2 = (energy[lo + 2] - 2.0 * energy[lo + 1] + energy[lo]).abs();
            d2 + roundoff[i].max(1e-300)
        })
        .collect();
    EnergyProfile { mids, energy, speed, truncation }
}

/// Node samples for export: `(ξ, t, q, |q'|, E)`; `|q'|` and `E` are averages
/// of the adjacent cells.
pub fn node_samples(model: &ManifoldModel, tf: &TimeFactor, curve: &DiscreteCurve) -> Vec<(f64, f64, Vec<f64>, f64, f64)> {
    let prof = energy_profile(model, curve);
    let k = prof.energy.len();
    curve
        .grid()
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, xi)| {
            let (s, e) = if i == 0 {
                (prof.speed[0], prof.energy[0])
            } else if i == k {
                (prof.speed[k - 1], prof.energy[k - 1])
            } else {
                (
                    0.5 * (prof.speed[i - 1] + prof.speed[i]),
                    0.5 * (prof.energy[i - 1] + prof.energy[i]),
                )
            };
            (*xi, tf.t_of_xi(*xi), model.wrap(&curve.points[i]), s, e)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{
        ConstantPotential, CoordTopology, DoubleWell, Pendulum, QuadraticPotential, SphereChartMetric,
    };
    use std::f64::consts::PI;

    fn line(p: Arc<dyn crate::geometry::PotentialField>) -> ManifoldModel {
        ManifoldModel::flat(vec![CoordTopology::Line], p).unwrap()
    }

    fn wiggly(model: &ManifoldModel, grid: &Arc<WindowGrid>, a: &[f64], b: &[f64], amp: f64) -> DiscreteCurve {
        let xi = grid.xi_k();
        let pts = grid
            .nodes()
            .iter()
            .map(|s| {
                let w = 0.5 * (s / xi + 1.0);
                let bump = amp * (PI * w).sin();
                a.iter()
                    .zip(b)
                    .enumerate()
                    .map(|(k, (p, q))| p + w * (q - p) + bump * (1.0 + k as f64) * (3.0 * s).cos())
                    .collect()
            })
            .collect();
        DiscreteCurve::new(model, grid.clone(), pts).unwrap()
    }

    #[test]
    fn linear_curve_has_action_half() {
        let m = line(Arc::new(ConstantPotential(0.0)));
        let tf = TimeFactor::unit();
        let g = Arc::new(build_grid(&tf, 0.5, 16).unwrap());
        let c = DiscreteCurve::linear_in_time(&m, &tf, g, &[0.0], &[1.0]).unwrap();
        let d = assemble(&m, &c, AssemblyOptions::FULL).unwrap();
        assert!((d.value - 0.5).abs() < 1e-14);
        assert!(d.gradient.iter().all(|v| v.abs() < 1e-13));
        assert!(d.dual_residual.unwrap() < 1e-13);
    }

    #[test]
    fn constant_curve_at_critical_point_has_zero_action() {
        let m = line(Arc::new(Pendulum));
        let tf = TimeFactor::power(1).unwrap();
        let g = Arc::new(build_grid(&tf, 2.0, 32).unwrap());
        let c = DiscreteCurve::step(&m, g, &[PI], &[PI]).unwrap();
        assert_eq!(action(&m, &c).unwrap(), 0.0);
    }

    #[test]
    fn action_is_additive_over_cells() {
        let m = line(Arc::new(DoubleWell));
        let tf = TimeFactor::power(1).unwrap();
        let g = Arc::new(build_grid(&tf, 1.5, 40).unwrap());
        let c = wiggly(&m, &g, &[-1.0], &[1.0], 0.2);
        let (vm, vp) = potential_ref(&c, &m);
        let total: f64 = g
            .cells()
            .iter()
            .enumerate()
            .map(|(i, cell)| {
                let v = if cell.side() > 0.0 { vp } else { vm };
                cell_terms(&m, cell, &c.points[i], &c.points[i + 1], v, AssemblyOptions::VALUE)
                    .unwrap()
                    .value
            })
            .sum();
        assert!((total - action(&m, &c).unwrap()).abs() < 1e-13);
    }

    fn fd_gradient_error(m: &ManifoldModel, c: &DiscreteCurve, h: f64) -> f64 {
        let d = assemble(m, c, AssemblyOptions::FULL).unwrap();
        let dir: Vec<f64> = (0..c.n_unknowns()).map(|i| ((i * 37 % 11) as f64 / 11.0) - 0.4).collect();
        let plus: Vec<f64> = dir.iter().map(|v| v * h).collect();
        let minus: Vec<f64> = dir.iter().map(|v| -v * h).collect();
        let ip = action(m, &c.retract(m, &plus).unwrap()).unwrap();
        let im = action(m, &c.retract(m, &minus).unwrap()).unwrap();
        ((ip - im) / (2.0 * h) - crate::linalg::dot(&d.gradient, &dir)).abs()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let tf = TimeFactor::power(1).unwrap();
        let sphere = ManifoldModel::new(
            vec![CoordTopology::Line, CoordTopology::Circle { period: 2.0 * PI }],
            Arc::new(SphereChartMetric),
            Arc::new(QuadraticPotential::new(vec![0.3, -0.2])),
        )
        .unwrap();
        let m = line(Arc::new(Pendulum));
        let g = Arc::new(build_grid(&tf, 1.0, 24).unwrap());
        for (model, a, b) in [(&m, vec![0.0], vec![PI]), (&sphere, vec![1.0, 0.2], vec![1.4, 1.0])] {
            let c = wiggly(model, &g, &a, &b, 0.1);
            let e1 = fd_gradient_error(model, &c, 1e-2);
            let e2 = fd_gradient_error(model, &c, 5e-3);
            let order = (e1 / e2).log2();
            assert!(order > 1.9, "order {order} ({e1}, {e2})");
        }
    }

    #[test]
    fn hessian_matches_second_differences() {
        let tf = TimeFactor::power(2).unwrap();
        let sphere = ManifoldModel::new(
            vec![CoordTopology::Line, CoordTopology::Circle { period: 2.0 * PI }],
            Arc::new(SphereChartMetric),
            Arc::new(QuadraticPotential::new(vec![0.3, -0.2])),
        )
        .unwrap();
        let g = Arc::new(build_grid(&tf, 1.0, 20).unwrap());
        let c = wiggly(&sphere, &g, &[1.0, 0.2], &[1.4, 1.0], 0.1);
        let d = assemble(&sphere, &c, AssemblyOptions::FULL).unwrap();
        let h = d.hessian.unwrap();
        let dir: Vec<f64> = (0..c.n_unknowns()).map(|i| ((i * 13 % 7) as f64 / 7.0) - 0.5).collect();
        let exact = h.quad_form(&dir);
        let i0 = action(&sphere, &c).unwrap();
        let err = |s: f64| {
            let p: Vec<f64> = dir.iter().map(|v| v * s).collect();
            let m: Vec<f64> = dir.iter().map(|v| -v * s).collect();
            let ip = action(&sphere, &c.retract(&sphere, &p).unwrap()).unwrap();
            let im = action(&sphere, &c.retract(&sphere, &m).unwrap()).unwrap();
            ((ip + im - 2.0 * i0) / (s * s) - exact).abs()
        };
        let (e1, e2) = (err(2e-2), err(1e-2));
        assert!((e1 / e2).log2() > 1.8, "{e1} {e2}");
    }

    #[test]
    fn hessian_and_mass_symmetric_and_mass_definite() {
        let sphere = ManifoldModel::new(
            vec![CoordTopology::Line, CoordTopology::Circle { period: 2.0 * PI }],
            Arc::new(SphereChartMetric),
            Arc::new(QuadraticPotential::new(vec![0.3, -0.2])),
        )
        .unwrap();
        let g = Arc::new(build_grid(&TimeFactor::power(1).unwrap(), 1.0, 16).unwrap());
        let c = wiggly(&sphere, &g, &[1.0, 0.2], &[1.4, 1.0], 0.1);
        let (h, m) = hessian(&sphere, &c).unwrap();
        let dh = h.to_dense();
        for i in 0..dh.len() {
            for j in 0..dh.len() {
                assert_eq!(dh[i][j], dh[j][i]);
            }
        }
        assert!(m.cholesky().is_ok());
    }

    #[test]
    fn flat_coercivity_between_one_and_lambda_squared() {
        // V = −2 q², σ = +1, r ≡ 1 gives −d² + 4
        let m = line(Arc::new(QuadraticPotential::new(vec![-2.0])));
        let tf = TimeFactor::unit();
        let mut prev = f64::INFINITY;
        for cells in [16, 64, 256] {
            let g = Arc::new(build_grid(&tf, 1.0, cells).unwrap());
            let c = DiscreteCurve::step(&m, g, &[0.0], &[0.0]).unwrap();
            let (h, mass) = hessian(&m, &c).unwrap();
            let gamma = coercivity_gamma(&h, &mass).unwrap().value;
            assert!(gamma >= 1.0 && gamma <= 4.0, "{gamma}");
            assert!(gamma <= prev + 1e-12);
            prev = gamma;
        }
    }

    #[test]
    fn gamma_of_mass_against_itself_is_one() {
        let m = line(Arc::new(Pendulum));
        let g = Arc::new(build_grid(&TimeFactor::power(1).unwrap(), 1.0, 32).unwrap());
        let c = wiggly(&m, &g, &[0.0], &[PI], 0.0);
        let (_, mass) = hessian(&m, &c).unwrap();
        assert!((coercivity_gamma(&mass, &mass).unwrap().value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn positive_potential_block_is_detected() {
        // σ H^V large and positive makes the Hessian indefinite
        let m = line(Arc::new(QuadraticPotential::new(vec![50.0])));
        let g = Arc::new(build_grid(&TimeFactor::unit(), 1.0, 32).unwrap());
        let c = DiscreteCurve::step(&m, g, &[0.0], &[0.0]).unwrap();
        let (h, mass) = hessian(&m, &c).unwrap();
        assert!(coercivity_gamma(&h, &mass).unwrap().value < 0.0);
    }

    #[test]
    fn prolongation_preserves_action_and_is_nested() {
        let m = line(Arc::new(Pendulum));
        let tf = TimeFactor::power(1).unwrap();
        let g = Arc::new(build_grid(&tf, 1.0, 32).unwrap());
        let c = wiggly(&m, &g, &[0.0], &[PI], 0.0);
        let same = prolong(&m, &c, g.clone()).unwrap();
        assert_eq!(same.points(), c.points());
        let big = Arc::new(g.extend(&tf, 2.5).unwrap());
        let p = prolong(&m, &c, big.clone()).unwrap();
        let diff = action(&m, &p).unwrap() - action(&m, &c).unwrap();
        assert!(diff.abs() < 1e-13, "{diff}");
        assert_eq!(p.x_minus(), &[0.0]);
        assert_eq!(p.x_plus(), &[PI]);
        assert!(prolong(&m, &p, g.clone()).is_err());
        let chi = DiscreteCurve::step(&m, g.clone(), &[0.0], &[PI]).unwrap();
        let chi2 = prolong(&m, &chi, big.clone()).unwrap();
        let z = big.zero_index();
        assert!(chi2.points().iter().enumerate().all(|(i, p)| p[0] == if i < z { 0.0 } else { PI }));
    }

    #[test]
    fn embedding_forms_agree_for_unit_weight() {
        let g = build_grid(&TimeFactor::unit(), 1.0, 32).unwrap();
        let (a, b) = scalar_gram_forms(&g);
        let e = smallest_generalized_eigen(&b, &a, 1e-10).unwrap();
        assert!((e.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_speed_of_quadratic_is_exact() {
        let m = line(Arc::new(ConstantPotential(0.0)));
        let g = Arc::new(build_grid(&TimeFactor::power(1).unwrap(), 1.0, 20).unwrap());
        let pts = g.nodes().iter().map(|x| vec![x * x + 2.0 * x]).collect();
        let c = DiscreteCurve::new(&m, g, pts).unwrap();
        let (l, r) = c.boundary_speeds(&m);
        assert!((l - 0.0).abs() < 1e-10 && (r - 4.0).abs() < 1e-10);
    }

    #[test]
    fn entry_time_on_monotone_curve() {
        let m = line(Arc::new(ConstantPotential(0.0)));
        let g = Arc::new(build_grid(&TimeFactor::unit(), 1.0, 40).unwrap());
        let pts = g.nodes().iter().map(|x| vec![*x]).collect();
        let c = DiscreteCurve::new(&m, g, pts).unwrap();
        // leaves B_{0.25}(∓1) at ∓0.75
        assert!((c.measured_entry(&m, 0.25) - 0.75).abs() < 1e-12);
    }
}
