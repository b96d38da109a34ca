//! Spectral data at the endpoint critical points and the validated ball
//! `B_R(x_±)` on which the local rate inequalities hold.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::ManifoldModel;
use crate::error::{Error, Result};

/// Endpoint data. `x_plus` is stored lifted (for a homoclinic loop it differs
/// from `x_minus` by whole periods).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPointData {
    pub x_minus: Vec<f64>,
    pub x_plus: Vec<f64>,
    pub sigma_minus: f64,
    pub sigma_plus: f64,
    /// `Λ_k^-`: square roots of `|eig(σ(−) H^V(x_-))|`.
    pub hessian_eigs_minus: Vec<f64>,
    pub hessian_eigs_plus: Vec<f64>,
    pub lambda: f64,
    pub nu: f64,
    /// Zero until `calibrate_ball` has run.
    pub r_lambda: f64,
    pub scan: Option<LocalizedBallScan>,
}

/// Samples of the validated balls and the curvature/potential constants
/// measured on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizedBallScan {
    pub samples: Vec<Vec<f64>>,
    pub k_max: f64,
    pub c_g: f64,
    pub c_k: f64,
    pub c_v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallSampling {
    pub shells: usize,
    /// Directions per shell; `None` means `64 * dim`.
    pub per_shell: Option<usize>,
    pub seed: u64,
    pub initial_radius: Option<f64>,
    pub floor: f64,
    pub refine_steps: usize,
    pub exp_steps: usize,
}

impl Default for BallSampling {
    fn default() -> Self {
        Self {
            shells: 8,
            per_shell: None,
            seed: 0,
            initial_radius: None,
            floor: 1e-6,
            refine_steps: 30,
            exp_steps: 16,
        }
    }
}

/// The first sample at which one of the ball inequalities fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallViolation {
    pub inequality: String,
    pub point: Vec<f64>,
    pub radius: f64,
    pub lhs: f64,
    pub rhs: f64,
}

/// Relative gradient tolerance for an endpoint to count as critical.
pub const GRAD_TOL: f64 = 1e-8;

/// Eigenvalues of `H` relative to `g`, ascending.
pub fn generalized_sym_eigs(h: &DMatrix<f64>, g: &DMatrix<f64>) -> Option<Vec<f64>> {
    let l = g.clone().cholesky()?.l();
    let linv = l.clone().try_inverse()?;
    let c = &linv * h * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let mut e: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(e)
}

fn rates_at(
    model: &ManifoldModel,
    x: &[f64],
    sigma: f64,
    side: &'static str,
) -> Result<Vec<f64>> {
    let pkg = model.potential_package(x)?;
    let grad_norm = model.norm(x, &pkg.gradient);
    if !(grad_norm <= GRAD_TOL * pkg.value.abs().max(1.0)) {
        return Err(Error::NotCritical { side, grad_norm });
    }
    let g = model.metric_at(x);
    let eigs = generalized_sym_eigs(&(&pkg.hessian * sigma), &g)
        .ok_or_else(|| Error::DegenerateMetric { point: x.to_vec() })?;
    if eigs.iter().any(|e| !(*e < 0.0)) {
        return Err(Error::NotMaximum { side, eigs });
    }
    Ok(eigs.iter().map(|e| (-e).sqrt()).collect())
}

impl CriticalPointData {
    /// Checks criticality and definiteness at both endpoints and picks the
    /// rates `λ` (default 0.9·Λ_min) and `ν` (default 1.1·Λ_max).
    pub fn analyze(
        model: &ManifoldModel,
        x_minus: Vec<f64>,
        x_plus: Vec<f64>,
        sigma_minus: f64,
        sigma_plus: f64,
        lambda: Option<f64>,
        nu: Option<f64>,
    ) -> Result<Self> {
        let n = model.dim();
        if x_minus.len() != n || x_plus.len() != n {
            return Err(Error::InvalidArgument("endpoint dimension mismatch".into()));
        }
        let eig_m = rates_at(model, &x_minus, sigma_minus, "-")?;
        let eig_p = rates_at(model, &x_plus, sigma_plus, "+")?;
        let mut cp = Self {
            x_minus,
            x_plus,
            sigma_minus,
            sigma_plus,
            hessian_eigs_minus: eig_m,
            hessian_eigs_plus: eig_p,
            lambda: 0.0,
            nu: 0.0,
            r_lambda: 0.0,
            scan: None,
        };
        cp.lambda = lambda.unwrap_or(0.9 * cp.rate_min());
        cp.nu = nu.unwrap_or(1.1 * cp.rate_max());
        cp.check_rates()?;
        Ok(cp)
    }

    pub fn rate_min(&self) -> f64 {
        self.hessian_eigs_minus
            .iter()
            .chain(&self.hessian_eigs_plus)
            .fold(f64::INFINITY, |m, v| m.min(*v))
    }

    pub fn rate_max(&self) -> f64 {
        self.hessian_eigs_minus.iter().chain(&self.hessian_eigs_plus).fold(0.0, |m, v| m.max(*v))
    }

    pub fn check_rates(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < self.rate_min()) {
            return Err(Error::Precondition(format!(
                "lambda = {} must lie in (0, {})",
                self.lambda,
                self.rate_min()
            )));
        }
        if !(self.nu > self.rate_max()) {
            return Err(Error::Precondition(format!(
                "nu = {} must exceed {}",
                self.nu,
                self.rate_max()
            )));
        }
        Ok(())
    }

    pub fn is_homoclinic(&self) -> bool {
        self.x_minus == self.x_plus
    }
}

fn golden_offset(seed: u64) -> f64 {
    const PHI: f64 = 0.618_033_988_749_894_9;
    (seed as f64 * PHI).fract()
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Deterministic low-discrepancy unit directions in coordinate space.
fn directions(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let off = golden_offset(seed);
    match n {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * (i as f64 + off) / count as f64;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
            let mut out = Vec::with_capacity(count);
            let mut i = 1u64 + seed * 7919;
            while out.len() < count {
                let v: Vec<f64> = (0..n)
                    .map(|d| 2.0 * radical_inverse(i, PRIMES[d % PRIMES.len()]) - 1.0)
                    .collect();
                let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                if norm > 1e-3 {
                    out.push(v.iter().map(|c| c / norm).collect());
                }
                i += 1;
            }
            out
        }
    }
}

/// Turns a coordinate unit vector into a `g(x)`-unit vector.
fn g_unit(g: &DMatrix<f64>, u: &[f64]) -> Option<Vec<f64>> {
    let l = g.clone().cholesky()?.l();
    let e = l.transpose().solve_upper_triangular(&DVector::from_column_slice(u))?;
    Some(e.iter().copied().collect())
}

struct BallSample {
    point: Vec<f64>,
    velocity: Vec<f64>,
    rho: f64,
}

fn ball_samples(
    model: &ManifoldModel,
    center: &[f64],
    radius: f64,
    sampling: &BallSampling,
) -> Result<Vec<BallSample>> {
    let n = model.dim();
    let per_shell = sampling.per_shell.unwrap_or(64 * n).max(1);
    let dirs = directions(n, per_shell, sampling.seed);
    let g = model.metric_at(center);
    let off = golden_offset(sampling.seed);
    let mut out = Vec::new();
    for j in 1..=sampling.shells {
        let rho = radius * (j as f64 - off) / sampling.shells as f64;
        for u in &dirs {
            let e = g_unit(&g, u).ok_or_else(|| Error::DegenerateMetric { point: center.to_vec() })?;
            let v: Vec<f64> = e.iter().map(|c| c * rho).collect();
            let (point, velocity) = model.geodesic(center, &v, sampling.exp_steps)?;
            out.push(BallSample { point, velocity, rho });
        }
    }
    Ok(out)
}

fn check_center(
    model: &ManifoldModel,
    center: &[f64],
    sigma: f64,
    cp: &CriticalPointData,
    radius: f64,
    sampling: &BallSampling,
) -> Result<std::result::Result<Vec<Vec<f64>>, BallViolation>> {
    let lam2 = cp.lambda * cp.lambda;
    let nu2 = cp.nu * cp.nu;
    let w0 = -sigma * model.potential(center);
    let samples = ball_samples(model, center, radius, sampling)?;
    let mut points = Vec::with_capacity(samples.len());
    for s in samples {
        let x = &s.point;
        let rho2 = s.rho * s.rho;
        let dw = -sigma * model.potential(x) - w0;
        let tol = 1e-12 * (1.0 + w0.abs());
        let violation = |name: &str, lhs: f64, rhs: f64| BallViolation {
            inequality: name.to_string(),
            point: x.clone(),
            radius,
            lhs,
            rhs,
        };
        if dw < 0.5 * lam2 * rho2 - tol {
            return Ok(Err(violation("W(x)-W(x*) >= lambda^2 d^2/2", dw, 0.5 * lam2 * rho2)));
        }
        let partials = model.potential_partials(x);
        let radial: f64 = -sigma * partials.iter().zip(&s.velocity).map(|(a, b)| a * b).sum::<f64>();
        if radial < lam2 * rho2 - tol {
            return Ok(Err(violation("<grad W, radial> >= lambda^2 d^2", radial, lam2 * rho2)));
        }
        let pkg = model.potential_package(x)?;
        let g = model.metric_at(x);
        let hw = &pkg.hessian * (-sigma);
        let eigs = generalized_sym_eigs(&hw, &g)
            .ok_or_else(|| Error::DegenerateMetric { point: x.clone() })?;
        if eigs[0] < lam2 * (1.0 - 1e-12) {
            return Ok(Err(violation("<H^W v, v> >= lambda^2 |v|^2", eigs[0], lam2)));
        }
        if dw > 0.5 * nu2 * rho2 + tol {
            return Ok(Err(violation("W(x)-W(x*) <= nu^2 d^2/2", dw, 0.5 * nu2 * rho2)));
        }
        points.push(s.point);
    }
    Ok(Ok(points))
}

/// Checks all ball inequalities on both endpoint balls of the given radius.
/// Returns the sample points on success and the first violation otherwise.
pub fn check_ball(
    model: &ManifoldModel,
    cp: &CriticalPointData,
    radius: f64,
    sampling: &BallSampling,
) -> Result<std::result::Result<Vec<Vec<f64>>, BallViolation>> {
    let mut all = match check_center(model, &cp.x_minus, cp.sigma_minus, cp, radius, sampling)? {
        Ok(p) => p,
        Err(v) => return Ok(Err(v)),
    };
    match check_center(model, &cp.x_plus, cp.sigma_plus, cp, radius, sampling)? {
        Ok(p) => all.extend(p),
        Err(v) => return Ok(Err(v)),
    }
    Ok(Ok(all))
}

fn default_initial_radius(model: &ManifoldModel, cp: &CriticalPointData) -> f64 {
    let mut r: f64 = 1.0;
    if !cp.is_homoclinic() {
        r = r.min(0.45 * model.segment_length(&cp.x_minus, &cp.x_plus));
    }
    for t in model.topology() {
        if let super::CoordTopology::Circle { period } = t {
            r = r.min(0.45 * period);
        }
    }
    r
}

/// Largest radius from a geometric trial sequence (refined by bisection
/// against the last failing trial) on which every ball inequality holds.
pub fn calibrate_ball(
    model: &ManifoldModel,
    cp: &CriticalPointData,
    shrink_factor: f64,
    sampling: &BallSampling,
) -> Result<CriticalPointData> {
    cp.check_rates()?;
    if !(shrink_factor > 0.0 && shrink_factor < 1.0) {
        return Err(Error::InvalidArgument("shrink factor must lie in (0, 1)".into()));
    }
    let r0 = sampling.initial_radius.unwrap_or_else(|| default_initial_radius(model, cp));
    let mut radius = r0;
    let mut failing: Option<f64> = None;
    let mut last_violation: Option<BallViolation> = None;
    let mut samples = loop {
        if radius < sampling.floor {
            let inequality = last_violation
                .map(|v| v.inequality)
                .unwrap_or_else(|| "none sampled".to_string());
            return Err(Error::Calibration { floor: sampling.floor, inequality });
        }
        match check_ball(model, cp, radius, sampling)? {
            Ok(p) => break p,
            Err(v) => {
                last_violation = Some(v);
                failing = Some(radius);
                radius *= shrink_factor;
            }
        }
    };
    if let Some(mut hi) = failing {
        let mut lo = radius;
        for _ in 0..sampling.refine_steps {
            let mid = 0.5 * (lo + hi);
            match check_ball(model, cp, mid, sampling)? {
                Ok(p) => {
                    lo = mid;
                    samples = p;
                }
                Err(_) => hi = mid,
            }
        }
        radius = lo;
    }
    samples.push(cp.x_minus.clone());
    samples.push(cp.x_plus.clone());
    let mut out = cp.clone();
    out.r_lambda = radius;
    out.scan = Some(scan_constants(model, samples, sampling.seed)?);
    Ok(out)
}

/// Curvature and potential constants dominating their defining expressions at
/// every given point, over sampled unit directions.
pub fn scan_constants(
    model: &ManifoldModel,
    samples: Vec<Vec<f64>>,
    seed: u64,
) -> Result<LocalizedBallScan> {
    let n = model.dim();
    let dirs = directions(n, if n == 1 { 2 } else { 16 * n }, seed);
    let mut k_max = f64::NEG_INFINITY;
    let mut c_g: f64 = 0.0;
    let mut c_k: f64 = 0.0;
    let mut c_v: f64 = 0.0;
    for x in &samples {
        let g = model.metric_at(x);
        let gam = model.christoffel(x)?;
        let pkg = model.potential_package(x)?;
        let eigs = generalized_sym_eigs(&pkg.hessian, &g)
            .ok_or_else(|| Error::DegenerateMetric { point: x.clone() })?;
        c_v = c_v.max(eigs[0].abs()).max(eigs[eigs.len() - 1].abs());
        let units: Vec<Vec<f64>> = dirs
            .iter()
            .map(|u| g_unit(&g, u).ok_or_else(|| Error::DegenerateMetric { point: x.clone() }))
            .collect::<Result<_>>()?;
        if !gam.is_zero() {
            for e in &units {
                let s: f64 = gam.contract(e, e).iter().map(|v| v.abs()).sum();
                c_g = c_g.max(s);
            }
        }
        if n >= 2 && !model.is_flat() {
            for (a, u) in units.iter().enumerate() {
                for w in units.iter().skip(a + 1) {
                    let num = model.curvature_quadratic(x, u, w)?;
                    c_k = c_k.max(num.abs());
                    k_max = k_max.max(model.sectional_curvature(x, u, w)?);
                }
            }
        } else {
            k_max = k_max.max(0.0);
        }
    }
    if !k_max.is_finite() {
        k_max = 0.0;
    }
    Ok(LocalizedBallScan { samples, k_max, c_g, c_k, c_v })
}
