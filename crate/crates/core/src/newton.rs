//! Newton iteration on a fixed window with retraction by the exponential map,
//! and the Kantorovich certificate for it.

use serde::{Deserialize, Serialize};

use crate::curvespace::{assemble, coercivity_gamma, ActionDerivatives, AssemblyOptions, DiscreteCurve};
use crate::error::{Error, LinalgError, Result};
use crate::geometry::ManifoldModel;
use crate::linalg::{dot, SymBanded};

/// Kantorovich data for one Newton run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KantorovichCertificate {
    /// Bound on the inverse Hessian norm, `1/γ`.
    pub a_inv_bound: f64,
    /// Norm of the first Newton step.
    pub b_step: f64,
    pub c_l: f64,
    pub l: f64,
    pub r_star: f64,
    pub trust_radius: f64,
    pub passed: bool,
    /// `(2l)^{2^j} b / l` for `j = 0, 1, …` until it underflows.
    pub predicted_rates: Vec<f64>,
}

/// Evaluates the Kantorovich gate `l = â b̂ C_L ≤ ½` and the radius
/// `r_* = (1 − √(1 − 2l)) / (â C_L)`.
pub fn certify(gamma_lower: f64, first_step_norm: f64, c_l: f64, trust_radius: f64) -> Result<KantorovichCertificate> {
    if !(gamma_lower > 0.0) {
        return Err(Error::Precondition(format!("coercivity {gamma_lower:e} must be positive")));
    }
    if !(c_l > 0.0) || first_step_norm < 0.0 {
        return Err(Error::InvalidArgument("Lipschitz constant and step norm must be positive".into()));
    }
    let a = 1.0 / gamma_lower;
    let b = first_step_norm;
    let l = a * b * c_l;
    let r_star = if l <= 0.5 {
        if l < 1e-8 {
            // 1 − √(1 − 2l) = l + l²/2 + l³/2 + …
            b * (1.0 + 0.5 * l + 0.5 * l * l)
        } else {
            (1.0 - (1.0 - 2.0 * l).sqrt()) / (a * c_l)
        }
    } else {
        f64::INFINITY
    };
    let passed = l <= 0.5 && r_star <= trust_radius;
    let mut predicted_rates = Vec::new();
    if l > 0.0 && l <= 0.5 {
        let mut pow = 2.0 * l;
        for _ in 0..12 {
            let v = pow * b / l;
            if !(v > 1e-300) {
                break;
            }
            predicted_rates.push(v);
            pow *= pow;
        }
    } else if l == 0.0 {
        predicted_rates.push(0.0);
    }
    Ok(KantorovichCertificate { a_inv_bound: a, b_step: b, c_l, l, r_star, trust_radius, passed, predicted_rates })
}

impl KantorovichCertificate {
    /// Predicted bound on `d(q_j, q_*)`; zero once the sequence underflows.
    pub fn predicted(&self, j: usize) -> f64 {
        self.predicted_rates.get(j).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonOptions {
    /// Stop when the dual residual drops below `rel_tol` times its initial value…
    pub rel_tol: f64,
    /// …or below this absolute level.
    pub abs_tol: f64,
    pub max_iter: usize,
    /// Geodesic (kinetic) problem when false.
    pub include_potential: bool,
    /// Halve steps until the residual decreases. Certified runs keep this off.
    pub line_search: bool,
    /// Scale down steps whose Gram norm exceeds this; voids any certificate.
    pub step_cap: Option<f64>,
    /// Compute the coercivity eigenvalue at every iterate, not only at the end.
    pub track_gamma: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_iter: 30,
            include_potential: true,
            line_search: false,
            step_cap: None,
            track_gamma: false,
        }
    }
}

impl NewtonOptions {
    fn assembly(&self) -> AssemblyOptions {
        AssemblyOptions { potential: self.include_potential, hessian: true, mass: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonIterate {
    pub iteration: usize,
    /// Dual residual at the iterate before the step.
    pub residual: f64,
    /// Gram norm of the step taken from this iterate (0 for the last one).
    pub step_norm: f64,
    pub gamma: Option<f64>,
    /// Gram distance to the final iterate, filled in after convergence.
    pub distance_to_final: f64,
    pub damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    /// Steps fell below the roundoff level of the curve before the residual
    /// tolerance was met.
    Stagnated,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonTrace {
    pub iterates: Vec<NewtonIterate>,
    pub termination: Termination,
    /// Some step was capped or damped.
    pub modified_steps: bool,
    /// The residual increased after the first step.
    pub non_monotone: bool,
}

impl NewtonTrace {
    /// Largest local convergence exponent `ln(s_{j+2}/s_{j+1}) / ln(s_{j+1}/s_j)`
    /// over consecutive step norms above `floor`.
    pub fn fitted_exponent(&self, floor: f64) -> Option<f64> {
        let s: Vec<f64> = self.iterates.iter().map(|i| i.step_norm).filter(|v| *v > floor).collect();
        s.windows(3)
            .filter(|w| w[1] < w[0] && w[2] < w[1])
            .map(|w| (w[2] / w[1]).ln() / (w[1] / w[0]).ln())
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |x| x.max(v))))
    }

    pub fn iterations(&self) -> usize {
        self.iterates.len().saturating_sub(1)
    }
}

/// Solves `H δ = −g`; an indefinite Hessian is reported with its coercivity.
fn newton_direction(d: &ActionDerivatives) -> Result<Vec<f64>> {
    let h = d.hessian.as_ref().expect("hessian assembled");
    match h.cholesky() {
        Ok(f) => Ok(f.solve(&d.gradient).into_iter().map(|v| -v).collect()),
        Err(LinalgError::NotPositiveDefinite { .. }) => {
            let mass = d.mass.as_ref().expect("mass assembled");
            let gamma = coercivity_gamma(h, mass).map(|e| e.value).unwrap_or(f64::NAN);
            Err(Error::IndefiniteHessian { gamma })
        }
        Err(e) => Err(e.into()),
    }
}

/// `(δᵀ M δ)^{1/2}`.
pub fn gram_norm(mass: &SymBanded, v: &[f64]) -> f64 {
    mass.quad_form(v).max(0.0).sqrt()
}

/// One pure Newton step; returns the new curve, the step and the derivatives
/// at the old curve.
pub fn newton_step(
    model: &ManifoldModel,
    curve: &DiscreteCurve,
    opts: &NewtonOptions,
) -> Result<(DiscreteCurve, Vec<f64>, ActionDerivatives)> {
    let d = assemble(model, curve, opts.assembly())?;
    if d.gradient.iter().all(|v| *v == 0.0) {
        return Ok((curve.clone(), vec![0.0; d.gradient.len()], d));
    }
    let step = newton_direction(&d)?;
    let next = curve.retract(model, &step)?;
    Ok((next, step, d))
}

/// Converged window solution.
#[derive(Debug, Clone)]
pub struct WindowSolution {
    pub curve: DiscreteCurve,
    pub trace: NewtonTrace,
    /// Coercivity at the solution.
    pub gamma: f64,
    pub derivatives: ActionDerivatives,
    /// Coercivity at the initial curve, when requested for certification.
    pub gamma_initial: Option<f64>,
}

impl WindowSolution {
    pub fn residual(&self) -> f64 {
        self.derivatives.dual_residual.unwrap_or(f64::NAN)
    }
}

/// Runs Newton from `init` until the dual residual meets the tolerances.
pub fn solve_window(model: &ManifoldModel, init: &DiscreteCurve, opts: &NewtonOptions) -> Result<WindowSolution> {
    let asm = opts.assembly();
    let mut curve = init.clone();
    let mut d = assemble(model, &curve, asm)?;
    let r0 = d.dual_residual.unwrap_or(0.0);
    let target = (opts.rel_tol * r0).max(opts.abs_tol);
    let mut iterates: Vec<NewtonIterate> = Vec::new();
    let mut history: Vec<DiscreteCurve> = Vec::new();
    let mut modified = false;
    let mut non_monotone = false;
    let mut gamma_initial = None;
    let termination;
    loop {
        let res = d.dual_residual.unwrap_or(0.0);
        let gamma = if opts.track_gamma || iterates.is_empty() {
            let g = coercivity_gamma(d.hessian.as_ref().unwrap(), d.mass.as_ref().unwrap())?.value;
            if iterates.is_empty() {
                gamma_initial = Some(g);
            }
            Some(g)
        } else {
            None
        };
        if let Some(prev) = iterates.last() {
            if iterates.len() > 1 && res > prev.residual {
                non_monotone = true;
            }
        }
        history.push(curve.clone());
        iterates.push(NewtonIterate {
            iteration: iterates.len(),
            residual: res,
            step_norm: 0.0,
            gamma,
            distance_to_final: 0.0,
            damping: 1.0,
        });
        if res <= target {
            termination = Termination::Converged;
            break;
        }
        if iterates.len() > opts.max_iter {
            termination = Termination::MaxIterations;
            break;
        }
        let mut step = newton_direction(&d)?;
        let mass = d.mass.as_ref().unwrap();
        let mut norm = gram_norm(mass, &step);
        if norm <= resolution(mass, &curve) {
            termination = Termination::Stagnated;
            break;
        }
        let mut damping = 1.0;
        if let Some(cap) = opts.step_cap {
            if norm > cap {
                damping = cap / norm;
                step.iter_mut().for_each(|v| *v *= damping);
                norm = cap;
                modified = true;
            }
        }
        let mut next = curve.retract(model, &step)?;
        let mut nd = assemble(model, &next, asm)?;
        if opts.line_search {
            let mut tries = 0;
            while nd.dual_residual.unwrap_or(f64::INFINITY) > res && tries < 30 {
                damping *= 0.5;
                step.iter_mut().for_each(|v| *v *= 0.5);
                norm *= 0.5;
                next = curve.retract(model, &step)?;
                nd = assemble(model, &next, asm)?;
                tries += 1;
                modified = true;
            }
        }
        let last = iterates.last_mut().unwrap();
        last.step_norm = norm;
        last.damping = damping;
        curve = next;
        d = nd;
    }
    let mass = d.mass.clone().unwrap();
    for (it, c) in iterates.iter_mut().zip(&history) {
        let diff = c.chart_difference(&curve)?;
        it.distance_to_final = gram_norm(&mass, &diff);
    }
    let gamma = match iterates.last().and_then(|i| i.gamma) {
        Some(g) if iterates.len() == 1 => g,
        _ => coercivity_gamma(d.hessian.as_ref().unwrap(), &mass)?.value,
    };
    if let Some(last) = iterates.last_mut() {
        last.gamma = Some(gamma);
    }
    if termination == Termination::MaxIterations {
        return Err(Error::MaxIterations {
            iterations: opts.max_iter,
            residual: d.dual_residual.unwrap_or(f64::NAN),
        });
    }
    Ok(WindowSolution {
        curve,
        trace: NewtonTrace { iterates, termination, modified_steps: modified, non_monotone },
        gamma,
        derivatives: d,
        gamma_initial,
    })
}

/// Checks measured distances against the certificate; distances below
/// `resolution` cannot be resolved in floating point and count as satisfied.
pub fn rates_hold(cert: &KantorovichCertificate, trace: &NewtonTrace, resolution: f64) -> bool {
    trace
        .iterates
        .iter()
        .enumerate()
        .all(|(j, it)| it.distance_to_final <= resolution || it.distance_to_final <= cert.predicted(j) * (1.0 + 1e-9))
}

/// The curve's own roundoff level in the Gram norm.
pub fn resolution(mass: &SymBanded, curve: &DiscreteCurve) -> f64 {
    let scale: Vec<f64> = curve.points()[1..curve.points().len() - 1]
        .iter()
        .flat_map(|p| p.iter().map(|v| v.abs().max(1.0)))
        .collect();
    64.0 * f64::EPSILON * gram_norm(mass, &scale).max(dot(&scale, &scale).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvespace::{action, build_grid};
    use crate::geometry::{CoordTopology, Pendulum, QuadraticPotential};
    use crate::timescale::TimeFactor;
    use std::f64::consts::PI;
    use std::sync::Arc;

    #[test]
    fn certificate_examples() {
        let c = certify(1.0, 0.125, 1.0, 1.0).unwrap();
        assert!((c.l - 0.125).abs() < 1e-15);
        assert!((c.r_star - (1.0 - 0.75f64.sqrt())).abs() < 1e-15);
        assert!(c.passed);
        assert!((c.predicted_rates[0] - 0.25 / 0.125 * 0.125).abs() < 1e-15);
        assert!((c.predicted_rates[1] - 0.0625).abs() < 1e-15);
        let half = certify(2.0, 0.5, 2.0, 10.0).unwrap();
        assert!((half.l - 0.5).abs() < 1e-15);
        assert!((half.r_star - 1.0).abs() < 1e-15);
        let tiny = certify(1.0, 1e-12, 1.0, 1.0).unwrap();
        assert!((tiny.r_star - 1e-12).abs() < 1e-24);
        assert!(!certify(1.0, 1.0, 1.0, 10.0).unwrap().passed);
        assert!(!certify(1.0, 0.1, 1.0, 0.05).unwrap().passed);
        assert!(certify(0.0, 0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn quadratic_model_solved_in_one_step() {
        let m = ManifoldModel::flat(vec![CoordTopology::Line], Arc::new(QuadraticPotential::new(vec![-0.5])))
            .unwrap();
        let tf = TimeFactor::power(1).unwrap();
        let g = Arc::new(build_grid(&tf, 2.0, 64).unwrap());
        let init = DiscreteCurve::linear_in_time(&m, &tf, g, &[0.0], &[0.0]).unwrap();
        let pts: Vec<Vec<f64>> = init.points().iter().enumerate().map(|(i, p)| {
            if i == 0 || i + 1 == init.points().len() { p.clone() } else { vec![0.3 * (i as f64).sin()] }
        }).collect();
        let init = DiscreteCurve::new(&m, init.grid().clone(), pts).unwrap();
        let sol = solve_window(&m, &init, &NewtonOptions::default()).unwrap();
        assert_eq!(sol.trace.iterations(), 1);
        assert!(sol.curve.points().iter().all(|p| p[0].abs() < 1e-12));
    }

    #[test]
    fn solution_init_takes_zero_iterations() {
        let m = ManifoldModel::flat(vec![CoordTopology::Line], Arc::new(QuadraticPotential::new(vec![-0.5])))
            .unwrap();
        let tf = TimeFactor::power(1).unwrap();
        let g = Arc::new(build_grid(&tf, 1.0, 32).unwrap());
        let c = DiscreteCurve::step(&m, g, &[0.0], &[0.0]).unwrap();
        let sol = solve_window(&m, &c, &NewtonOptions::default()).unwrap();
        assert_eq!(sol.trace.iterations(), 0);
        let (next, step, _) = newton_step(&m, &c, &NewtonOptions::default()).unwrap();
        assert_eq!(next.points(), c.points());
        assert!(step.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pendulum_window_converges_quadratically() {
        let m = ManifoldModel::flat(vec![CoordTopology::Circle { period: 2.0 * PI }], Arc::new(Pendulum)).unwrap();
        let tf = TimeFactor::power(1).unwrap();
        let g = Arc::new(build_grid(&tf, 1.0, 200).unwrap());
        let init = DiscreteCurve::linear_in_time(&m, &tf, g, &[0.0], &[PI]).unwrap();
        let sol = solve_window(&m, &init, &NewtonOptions::default()).unwrap();
        assert_eq!(sol.trace.termination, Termination::Converged);
        assert!(sol.residual() < 1e-10);
        assert!(sol.gamma > 0.0);
        assert!(action(&m, &sol.curve).unwrap() < action(&m, &init).unwrap());
        let p = sol.trace.fitted_exponent(1e-12).unwrap();
        assert!(p >= 1.8, "exponent {p}");
    }

    #[test]
    fn indefinite_hessian_is_an_error() {
        let m = ManifoldModel::flat(vec![CoordTopology::Line], Arc::new(QuadraticPotential::new(vec![50.0])))
            .unwrap();
        let g = Arc::new(build_grid(&TimeFactor::unit(), 1.0, 32).unwrap());
        let init = DiscreteCurve::linear_in_time(&m, &TimeFactor::unit(), g, &[0.0], &[0.1]).unwrap();
        let err = solve_window(&m, &init, &NewtonOptions::default()).unwrap_err();
        assert!(matches!(err, Error::IndefiniteHessian { gamma } if gamma < 0.0));
    }
}
