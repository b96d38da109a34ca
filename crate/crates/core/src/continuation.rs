//! Window expansion: seed geodesic on `Ω_0`, per-stage bounds, choice of the
//! next window, the certified coercivity floor and the stopping rule.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::bounds::{
    action_decrease, action_decrease_frozen, c_b, c_delta, c_gamma, coercivity_loss_delta, convergence_sum, decay_bound, floor_step,
    entry_time_bound, entry_time_bound_corollary, f_growth, gradient_bound_bk, lipschitz_cl, mu_condition,
    power_argument, power_b_bound, power_delta_bound, power_gap_bound, power_step, EntryTime, LipschitzData,
    StageBounds,
};
use crate::curvespace::{
    action, assemble, build_grid, prolong, AssemblyOptions, DiscreteCurve, WindowGrid,
};
use crate::error::{Error, Result};
use crate::geometry::{CriticalPointData, LocalizedBallScan, ManifoldModel};
use crate::newton::{
    certify, rates_hold, resolution, solve_window, KantorovichCertificate, NewtonOptions, NewtonTrace, Termination,
    WindowSolution,
};
use crate::quadrature::integrate;
use crate::timescale::TimeFactor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// Grow by `max_growth` and halve until Newton converges with `γ > 0`.
    /// Certificates are still evaluated; the floor is dropped once lost.
    Adaptive,
    /// Largest step whose certified `p_k = b_k C_L / a_k²` meets the target.
    Generic,
    /// Closed-form step of the power-law refinement (needs `f = t^m`).
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationConfig {
    /// Stage budget.
    pub stages: usize,
    pub mode: ScheduleMode,
    /// Schedule `p_k = p_hat / (k + 1)²`.
    pub p_hat: f64,
    /// First trial for `ξ_0`; halved until the seed checks pass.
    pub xi0: f64,
    pub xi0_floor: f64,
    pub seed_cells: usize,
    pub margin_sigma: f64,
    /// Newton trust radius `R` in the Lipschitz constant.
    pub trust_radius: f64,
    /// `ξ_{k+1} ≤ (1 + max_growth) ξ_k`.
    pub max_growth: f64,
    pub bisection_steps: usize,
    /// Adaptive mode: a trial window is rejected past this many iterations.
    pub adaptive_max_iterations: usize,
    /// Adaptive mode: a solve that stagnated at the roundoff floor still
    /// counts when its final residual is below this.
    pub stagnation_residual: f64,
    pub eps_asymptotic: f64,
    pub eps_tail: f64,
    /// Uniform entry gap `h_*` of the power refinement. Defaults to the
    /// floor `R² / (2 I_0[Γ])`; a configured value may only raise it.
    pub h_star: Option<f64>,
    pub newton: NewtonOptions,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            stages: 8,
            mode: ScheduleMode::Adaptive,
            p_hat: 0.1,
            xi0: 0.5,
            xi0_floor: 1e-6,
            seed_cells: 64,
            margin_sigma: 0.1,
            trust_radius: 0.5,
            max_growth: 1.0,
            bisection_steps: 14,
            adaptive_max_iterations: 12,
            stagnation_residual: 1e-9,
            eps_asymptotic: 1e-8,
            eps_tail: 1e-6,
            h_star: None,
            newton: NewtonOptions::default(),
        }
    }
}

impl ContinuationConfig {
    pub fn p_target(&self, k: usize) -> f64 {
        self.p_hat / ((k + 1) as f64).powi(2)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.p_hat > 0.0 && self.p_hat < 0.5) {
            return Err(Error::Config(format!("p_hat = {} must lie in (0, 1/2)", self.p_hat)));
        }
        if !(self.xi0 > self.xi0_floor && self.xi0_floor > 0.0) {
            return Err(Error::Config("need xi0 > xi0_floor > 0".into()));
        }
        if !(self.margin_sigma > 0.0 && self.margin_sigma < 1.0) {
            return Err(Error::Config("margin_sigma must lie in (0, 1)".into()));
        }
        if !(self.trust_radius > 0.0) || !(self.max_growth > 0.0) {
            return Err(Error::Config("trust_radius and max_growth must be positive".into()));
        }
        Ok(())
    }
}

/// Model, factor and calibrated endpoint data.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: ManifoldModel,
    pub tf: TimeFactor,
    pub cp: CriticalPointData,
}

impl Problem {
    pub fn new(model: ManifoldModel, tf: TimeFactor, cp: CriticalPointData) -> Result<Self> {
        if !(cp.r_lambda > 0.0) || cp.scan.is_none() {
            return Err(Error::Precondition("endpoint balls must be calibrated first".into()));
        }
        if cp.x_minus == cp.x_plus {
            return Err(Error::Precondition("trivial loop: x_+ must differ from x_- (use a winding)".into()));
        }
        Ok(Self { model, tf, cp })
    }

    fn scan(&self) -> &LocalizedBallScan {
        self.cp.scan.as_ref().expect("checked in Problem::new")
    }

    /// Calibrated ball radius.
    pub fn radius(&self) -> f64 {
        self.cp.r_lambda
    }

    /// `L = max(0, ℓ(x_−, x_+) − 2R)` along the chart segment of the chosen lift.
    pub fn sphere_gap(&self) -> f64 {
        (self.model.segment_length(&self.cp.x_minus, &self.cp.x_plus) - 2.0 * self.radius()).max(0.0)
    }
}

/// Grid nodes and chart points; enough to rebuild a curve exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSnapshot {
    pub nodes: Vec<f64>,
    pub dw_minus: f64,
    pub dw_plus: f64,
    pub points: Vec<Vec<f64>>,
}

impl CurveSnapshot {
    pub fn of(curve: &DiscreteCurve) -> Self {
        let (dw_minus, dw_plus) = curve.grid().spacing();
        Self { nodes: curve.grid().nodes().to_vec(), dw_minus, dw_plus, points: curve.points().to_vec() }
    }

    pub fn restore(&self, model: &ManifoldModel, tf: &TimeFactor) -> Result<DiscreteCurve> {
        let grid = WindowGrid::from_nodes(tf, self.nodes.clone(), self.dw_minus, self.dw_plus)?;
        DiscreteCurve::new(model, Arc::new(grid), self.points.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub xi_0: f64,
    pub halvings: usize,
    pub geodesic: CurveSnapshot,
    /// Coercivity of the kinetic Hessian at the geodesic.
    pub c_gamma: f64,
    /// `½ ∫r · ∫r^{-1}` over `Ω_0`.
    pub c_xi0: f64,
    /// `max |∇V|` and `max ‖H^V‖` along the geodesic.
    pub c_d1: f64,
    pub c_d2: f64,
    pub b_0: f64,
    pub a_0: f64,
    pub c_l: f64,
    pub p_0: f64,
    pub r_star: f64,
    pub xi_gamma: f64,
    /// `r_* (g(ξ_0) − g(ξ_Γ))^{1/2}` against `σ R`.
    pub margin_lhs: f64,
    pub margin_rhs: f64,
    /// Certified coercivity `√(1 − 2p_0) a_0` at `q_0` and the measured one.
    pub gamma_floor: f64,
    pub gamma_measured: f64,
    pub certificate: KantorovichCertificate,
    pub rates_hold: bool,
    pub newton: NewtonTrace,
    pub residual: f64,
    pub action: f64,
    /// `I_0[Γ]` and the entry-gap floor `R² / (2 I_0[Γ])`.
    pub geodesic_action: f64,
    pub h_star_floor: f64,
}

/// State carried between stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationState {
    pub k: usize,
    pub xi_k: f64,
    /// Measured last entry into the balls.
    pub xi_hat_k: f64,
    pub gamma_0: f64,
    /// Certified floor; `None` once the recurrence is exhausted.
    pub gamma_k: Option<f64>,
    pub gamma_measured: f64,
    /// `A_k = Π (1 − 2p_j)^{-1/2}`.
    pub a_acc: f64,
    /// `Σ A_j Δ_j`.
    pub drift_sum: f64,
    pub i_hat_k: f64,
    /// `Î_{k−1} − ΔÎ_{k−1}` for the corollary form of the entry bound.
    pub i_prev_reduced: Option<f64>,
    /// Entry gap `h_*` used by the power refinement.
    pub h_star: f64,
    /// Certified `p` per stage; `inf` when the stage bound is vacuous.
    #[serde(with = "tagged_floats")]
    pub p_history: Vec<f64>,
    pub epsilon_history: Vec<f64>,
    /// Per-stage `μ_k` and `C_L`, kept so diagnostics survive a restart.
    #[serde(with = "tagged_floats")]
    pub mu_history: Vec<f64>,
    pub c_l_history: Vec<f64>,
    /// The certified floor was lost at some stage; later stages are heuristic.
    pub heuristic: bool,
    pub curve: CurveSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub k: usize,
    pub xi_k: f64,
    pub xi_next: f64,
    pub epsilon: f64,
    pub p_target: f64,
    /// Certified `b_k C_L / a_k²`.
    pub p_certified: f64,
    pub l_measured: f64,
    pub capped: bool,
    pub bounds: StageBounds,
    pub lipschitz: LipschitzData,
    pub gamma_floor_next: Option<f64>,
    /// The same floor from `A_{k+1}^{-1}(γ_0 − Σ A_j Δ_j)`.
    pub gamma_floor_next_alt: Option<f64>,
    pub gamma_initial: f64,
    pub gamma_measured_next: f64,
    pub a_acc_next: f64,
    pub drift_sum_next: f64,
    pub certificate: KantorovichCertificate,
    pub rates_hold: bool,
    pub newton: NewtonTrace,
    pub residual: f64,
    pub action_prolonged: f64,
    pub action_next: f64,
    pub telescoping_ok: bool,
    pub xi_hat_next: f64,
    pub boundary_speeds: (f64, f64),
    pub decay_bound_next: f64,
    pub tail_distance: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Asymptotic,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitResult {
    pub seed: SeedReport,
    pub stages: Vec<StageRecord>,
    pub state: ContinuationState,
    pub stop: StopReason,
    pub lambda_eff: Option<f64>,
    /// Power refinement only: `C_γ` and the convergence sum of the schedule.
    pub c_gamma: Option<f64>,
    pub convergence_sum: Option<f64>,
    /// Power refinement only: `Σ ε_k / F(y_k)` against `∫ dξ / F(y(ξ))`.
    pub necessary_condition: Option<(f64, f64)>,
}

/// `max |eig(H, g)|`.
fn metric_operator_norm(h: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    let l = g.clone().cholesky().ok_or_else(|| Error::DegenerateMetric { point: Vec::new() })?.l();
    let linv = l.try_inverse().ok_or_else(|| Error::DegenerateMetric { point: Vec::new() })?;
    let c = &linv * h * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    Ok(SymmetricEigen::new(c).eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
}

/// Kinetic action `½ ∫ |q'|² r`.
pub fn kinetic_action(model: &ManifoldModel, curve: &DiscreteCurve) -> Result<f64> {
    Ok(assemble(model, curve, AssemblyOptions { potential: false, hessian: false, mass: false })?.value)
}

fn lipschitz(problem: &Problem, cfg: &ContinuationConfig, curve: &DiscreteCurve) -> Result<LipschitzData> {
    let j = kinetic_action(&problem.model, curve)?;
    lipschitz_cl(problem.scan(), curve.grid(), j, cfg.trust_radius)
}

/// Geodesic on `Ω_0`, its constants and the seed checks; halves `ξ_0` until
/// `a_0 > 0`, `p_0 < ½` and the margin check pass, then solves for `q_0`.
pub fn seed_geodesic(problem: &Problem, cfg: &ContinuationConfig) -> Result<(SeedReport, DiscreteCurve)> {
    cfg.check()?;
    let (model, tf) = (&problem.model, &problem.tf);
    let (xm, xp) = (&problem.cp.x_minus, &problem.cp.x_plus);
    let radius = problem.radius();
    let kinetic = NewtonOptions { include_potential: false, ..cfg.newton };
    let mut xi0 = cfg.xi0;
    let mut halvings = 0;
    let mut last_reason = String::new();
    loop {
        if xi0 < cfg.xi0_floor {
            return Err(Error::Seed(format!(
                "no admissible ξ_0 above {:e}: {last_reason}",
                cfg.xi0_floor
            )));
        }
        let grid = Arc::new(build_grid(tf, xi0, cfg.seed_cells)?);
        let straight = DiscreteCurve::linear_in_time(model, tf, grid.clone(), xm, xp)?;
        let geo = solve_window(model, &straight, &kinetic)?;
        let c_gamma = geo.gamma;
        let c_xi0 = 0.5 * tf.int_r(-xi0, xi0) * tf.int_rinv(-xi0, xi0);
        let mut c_d1: f64 = 0.0;
        let mut c_d2: f64 = 0.0;
        for p in geo.curve.points() {
            let pkg = model.potential_package(p)?;
            c_d1 = c_d1.max(model.norm(p, &pkg.gradient));
            c_d2 = c_d2.max(metric_operator_norm(&pkg.hessian, &model.metric_at(p))?);
        }
        let b_0 = c_d1 * c_xi0;
        let a_0 = (c_gamma - c_d2 * c_xi0) / (1.0 + c_xi0);
        let lip = lipschitz(problem, cfg, &geo.curve)?;
        let p_0 = if a_0 > 0.0 { b_0 * lip.c_l / (a_0 * a_0) } else { f64::INFINITY };
        let xi_gamma = geo.curve.measured_entry(model, (1.0 - cfg.margin_sigma) * radius);
        let r_star = if p_0 < 0.5 { a_0 * (1.0 - (1.0 - 2.0 * p_0).sqrt()) / lip.c_l } else { f64::INFINITY };
        let margin_lhs = r_star * (tf.g(xi0) - tf.g(xi_gamma.min(xi0))).max(0.0).sqrt();
        let margin_rhs = cfg.margin_sigma * radius;
        let ok = a_0 > 0.0 && p_0 < 0.5 && xi_gamma < xi0 && margin_lhs <= margin_rhs;
        if !ok {
            last_reason = format!(
                "ξ_0 = {xi0:e}: a_0 = {a_0:e}, p_0 = {p_0:e}, ξ_Γ = {xi_gamma:e}, margin {margin_lhs:e} vs {margin_rhs:e}"
            );
            xi0 *= 0.5;
            halvings += 1;
            continue;
        }
        let geodesic_action = action(model, &geo.curve)?;
        let sol = solve_window(model, &geo.curve, &cfg.newton)?;
        let gamma_init = sol.gamma_initial.unwrap_or(sol.gamma);
        let step0 = sol.trace.iterates.first().map(|i| i.step_norm).unwrap_or(0.0);
        let mass = sol.derivatives.mass.as_ref().expect("mass assembled");
        let (certificate, holds) = if gamma_init > 0.0 {
            let c = certify(gamma_init, step0, lip.c_l, cfg.trust_radius)?;
            let h = rates_hold(&c, &sol.trace, resolution(mass, &sol.curve));
            (c, h)
        } else {
            return Err(Error::Seed(format!("Hessian at the geodesic is not coercive ({gamma_init:e})")));
        };
        let report = SeedReport {
            xi_0: xi0,
            halvings,
            geodesic: CurveSnapshot::of(&geo.curve),
            c_gamma,
            c_xi0,
            c_d1,
            c_d2,
            b_0,
            a_0,
            c_l: lip.c_l,
            p_0,
            r_star,
            xi_gamma,
            margin_lhs,
            margin_rhs,
            gamma_floor: (1.0 - 2.0 * p_0).sqrt() * a_0,
            gamma_measured: sol.gamma,
            certificate,
            rates_hold: holds,
            residual: sol.residual(),
            action: sol.derivatives.value,
            newton: sol.trace.clone(),
            geodesic_action,
            h_star_floor: if geodesic_action > 0.0 { radius * radius / (2.0 * geodesic_action) } else { f64::INFINITY },
        };
        return Ok((report, sol.curve));
    }
}

/// Stage-0 state from the seed.
pub fn initial_state(problem: &Problem, cfg: &ContinuationConfig, seed: &SeedReport, q0: &DiscreteCurve) -> ContinuationState {
    ContinuationState {
        k: 0,
        xi_k: seed.xi_0,
        xi_hat_k: q0.measured_entry(&problem.model, problem.radius()),
        gamma_0: seed.gamma_floor,
        gamma_k: Some(seed.gamma_floor),
        gamma_measured: seed.gamma_measured,
        a_acc: 1.0,
        drift_sum: 0.0,
        i_hat_k: seed.action,
        i_prev_reduced: None,
        h_star: cfg.h_star.map_or(seed.h_star_floor, |h| h.max(seed.h_star_floor)),
        p_history: Vec::new(),
        epsilon_history: Vec::new(),
        mu_history: Vec::new(),
        c_l_history: Vec::new(),
        heuristic: false,
        curve: CurveSnapshot::of(q0),
    }
}

/// Entry-time estimate: Lemma form, then the corollary form, then the
/// measured value. Returns the estimate, the branch and the value used.
pub fn entry_estimate(problem: &Problem, state: &ContinuationState) -> Result<(Option<EntryTime>, String, f64)> {
    let (tf, radius, l) = (&problem.tf, problem.radius(), problem.sphere_gap());
    let mut et = entry_time_bound(tf, state.xi_k, radius, state.i_hat_k, l)?;
    let mut branch = "lemma";
    if et.h.is_none() {
        if let Some(prev) = state.i_prev_reduced {
            et = entry_time_bound_corollary(tf, state.xi_k, radius, state.i_hat_k, prev, l)?;
            branch = "corollary";
        }
    }
    if et.h.is_none() || !(et.zeta < state.xi_k) {
        return Ok((Some(et), "measured".into(), state.xi_hat_k));
    }
    Ok((Some(et), branch.into(), et.zeta.max(state.xi_hat_k)))
}

/// All bounds of stage `k` for a candidate `ξ_{k+1}`.
pub fn compute_stage_bounds(
    problem: &Problem,
    cfg: &ContinuationConfig,
    state: &ContinuationState,
    xi_next: f64,
) -> Result<(StageBounds, LipschitzData)> {
    let curve = state.curve.restore(&problem.model, &problem.tf)?;
    let lip = lipschitz(problem, cfg, &curve)?;
    let bounds = bounds_with(problem, cfg, state, xi_next, &lip)?;
    Ok((bounds, lip))
}

fn bounds_with(
    problem: &Problem,
    _cfg: &ContinuationConfig,
    state: &ContinuationState,
    xi_next: f64,
    _lip: &LipschitzData,
) -> Result<StageBounds> {
    let (tf, cp, radius) = (&problem.tf, &problem.cp, problem.radius());
    let xi_k = state.xi_k;
    if !(state.xi_hat_k < xi_k) {
        return Err(Error::Precondition(format!(
            "curve does not settle in the balls before ξ_k = {xi_k} (entry {})",
            state.xi_hat_k
        )));
    }
    let (et, branch, xi_hat) = entry_estimate(problem, state)?;
    let gap = xi_k - xi_hat;
    let gamma_k = state.gamma_k.unwrap_or(0.0).max(0.0);
    let mu = mu_condition(problem.scan().k_max, cp.lambda, cp.nu, radius, gap);
    let b_k = gradient_bound_bk(tf, xi_k, xi_hat, cp.lambda, radius, xi_next)?;
    let delta_k = match mu {
        Some(m) => coercivity_loss_delta(tf, xi_k, xi_hat, m, gamma_k, xi_next)?,
        None => f64::INFINITY,
    };
    let h_k = et.and_then(|e| e.h);
    let power = tf.power_m().is_some();
    let h_star = state.h_star.is_finite().then_some(state.h_star);
    let eps = xi_next - xi_k;
    let (b_k_power, delta_k_power, gap_bound_power) = match (power, h_star, mu) {
        (true, Some(h), Some(m)) => (
            Some(power_b_bound(tf, cp.lambda, radius, h, xi_k, eps)?),
            Some(power_delta_bound(tf, m, gamma_k, h, xi_k, eps)?),
            Some(power_gap_bound(tf, h, xi_k)?),
        ),
        (true, Some(h), None) => (Some(power_b_bound(tf, cp.lambda, radius, h, xi_k, eps)?), None, Some(power_gap_bound(tf, h, xi_k)?)),
        _ => (None, None, None),
    };
    Ok(StageBounds {
        xi_k,
        xi_hat_k: xi_hat,
        xi_next,
        b_k,
        delta_k,
        a_k: gamma_k - delta_k,
        h_k,
        zeta_k: et.map(|e| e.zeta).unwrap_or(0.0),
        eta_k: et.map(|e| e.eta).unwrap_or(0.0),
        l_k: problem.sphere_gap(),
        i_hat_k: state.i_hat_k,
        delta_i_k: action_decrease(tf, cp.nu, radius, xi_k, state.xi_hat_k, xi_next),
        delta_i_frozen_k: action_decrease_frozen(tf, cp.nu, radius, xi_k, state.xi_hat_k, xi_next),
        mu: mu.unwrap_or(0.0),
        b_k_power,
        delta_k_power,
        gap_bound_power,
        entry_branch: branch,
    })
}

fn certified_p(bounds: &StageBounds, c_l: f64) -> f64 {
    if bounds.a_k > 0.0 {
        bounds.b_k * c_l / (bounds.a_k * bounds.a_k)
    } else {
        f64::INFINITY
    }
}

/// Largest `ε ∈ (0, hi]` with `score(ε) ≤ target`, by geometric bisection.
fn largest_admissible(
    hi: f64,
    target: f64,
    steps: usize,
    score: &mut dyn FnMut(f64) -> Result<f64>,
) -> Result<Option<(f64, f64, bool)>> {
    let top = score(hi)?;
    if top <= target {
        return Ok(Some((hi, top, true)));
    }
    // find an admissible lower end
    let mut lo = hi;
    let mut lo_score = f64::INFINITY;
    for _ in 0..40 {
        lo *= 0.125;
        lo_score = score(lo)?;
        if lo_score <= target {
            break;
        }
    }
    if !(lo_score <= target) {
        return Ok(None);
    }
    let mut up = (lo * 8.0).min(hi);
    for _ in 0..steps {
        let mid = (lo * up).sqrt();
        if mid <= lo || mid >= up {
            break;
        }
        let s = score(mid)?;
        if s <= target {
            lo = mid;
            lo_score = s;
        } else {
            up = mid;
        }
    }
    Ok(Some((lo, lo_score, false)))
}

/// A chosen next window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub xi_next: f64,
    pub p_target: f64,
    /// Value of the mode's score at the chosen window.
    pub score: f64,
    pub capped: bool,
}

/// Picks `ξ_{k+1}` for the configured mode.
pub fn propose_next_window(problem: &Problem, cfg: &ContinuationConfig, state: &ContinuationState) -> Result<Proposal> {
    let target = cfg.p_target(state.k);
    if !(target > 0.0) {
        return Err(Error::Precondition("schedule value must be positive".into()));
    }
    let xi_k = state.xi_k;
    let curve = state.curve.restore(&problem.model, &problem.tf)?;
    let lip = lipschitz(problem, cfg, &curve)?;
    let hi = cfg.max_growth * xi_k;
    let stall = |what: &str| Error::ScheduleStall(format!("stage {}: {what} target {target:e} unattainable", state.k));
    match cfg.mode {
        ScheduleMode::Adaptive => {
            let last = state.epsilon_history.last().copied().unwrap_or(hi);
            let eps = (2.0 * last).min(hi);
            Ok(Proposal { xi_next: xi_k + eps, p_target: target, score: f64::NAN, capped: eps == hi })
        }
        ScheduleMode::Generic => {
            let mut score = |eps: f64| -> Result<f64> {
                let b = bounds_with(problem, cfg, state, xi_k + eps, &lip)?;
                Ok(certified_p(&b, lip.c_l))
            };
            let (eps, s, capped) =
                largest_admissible(hi, target, cfg.bisection_steps, &mut score)?.ok_or_else(|| stall("certified p"))?;
            Ok(Proposal { xi_next: xi_k + eps, p_target: target, score: s, capped })
        }
        ScheduleMode::Power => {
            let tf = &problem.tf;
            let m = tf.power_m().ok_or_else(|| Error::Precondition("power mode needs f = t^m".into()))?;
            let (_, _, xi_hat) = entry_estimate(problem, state)?;
            let h = Some(state.h_star).filter(|h| h.is_finite()).ok_or_else(|| stall("entry gap h_*"))?;
            let cp = &problem.cp;
            let cb = c_b(tf, cp.lambda, problem.radius(), h)?;
            let gamma_k = state.gamma_k.ok_or_else(|| stall("certified floor"))?;
            let mu = mu_condition(problem.scan().k_max, cp.lambda, cp.nu, problem.radius(), xi_k - xi_hat)
                .ok_or_else(|| stall("coercivity rate μ"))?;
            let shrink = (1.0 - 2.0 * target).sqrt();
            let mut gamma_next = shrink * gamma_k;
            let mut eps = 0.0;
            let mut capped = false;
            for _ in 0..100 {
                let (e, c) = power_step(tf, cp.lambda, h, xi_k, target, gamma_next, cb, lip.c_l)?;
                let delta = power_delta_bound(tf, mu, gamma_k, h, xi_k, e)?;
                let g = shrink * (gamma_k - delta);
                if !(g > 0.0) {
                    return Err(stall("power-law γ_{k+1}"));
                }
                let done = (g - gamma_next).abs() <= 1e-14 * g && (e - eps).abs() <= 1e-14 * e;
                gamma_next = g;
                eps = e;
                capped = c;
                if done {
                    break;
                }
            }
            if !(eps > 0.0) {
                return Err(stall("power-law step"));
            }
            let _ = m;
            Ok(Proposal { xi_next: xi_k + eps, p_target: target, score: gamma_next, capped })
        }
    }
}

/// Outer-quarter distance to the endpoints.
pub fn tail_distance(model: &ManifoldModel, curve: &DiscreteCurve) -> f64 {
    let xi_k = curve.grid().xi_k();
    curve
        .grid()
        .nodes()
        .iter()
        .zip(curve.points())
        .filter(|(x, _)| x.abs() >= 0.75 * xi_k)
        .map(|(x, p)| model.distance(p, if *x > 0.0 { curve.x_plus() } else { curve.x_minus() }))
        .fold(0.0, f64::max)
}

/// One stage: bounds, next window, prolongation, Newton and the floors.
fn settled(trace: &NewtonTrace, floor: f64) -> bool {
    match trace.termination {
        Termination::Converged => true,
        Termination::Stagnated => trace.iterates.last().is_some_and(|i| i.residual <= floor),
        Termination::MaxIterations => false,
    }
}

pub fn advance_stage(
    problem: &Problem,
    cfg: &ContinuationConfig,
    state: &ContinuationState,
) -> Result<(ContinuationState, StageRecord)> {
    let start = Instant::now();
    let (model, tf, cp) = (&problem.model, &problem.tf, &problem.cp);
    let radius = problem.radius();
    let proposal = propose_next_window(problem, cfg, state)?;
    let curve = state.curve.restore(model, tf)?;
    let trial = |xi_next: f64| -> Result<(DiscreteCurve, WindowSolution)> {
        let grid = Arc::new(curve.grid().extend(tf, xi_next)?);
        let pro = prolong(model, &curve, grid)?;
        let sol = solve_window(model, &pro, &cfg.newton)?;
        Ok((pro, sol))
    };
    let (xi_next, pro, sol) = if cfg.mode == ScheduleMode::Adaptive {
        let mut eps = proposal.xi_next - state.xi_k;
        let mut last_err = None;
        let mut found = None;
        for _ in 0..40 {
            let xi = state.xi_k + eps;
            if !(xi > state.xi_k) {
                break;
            }
            match trial(xi) {
                Ok((pro, sol))
                    if settled(&sol.trace, cfg.stagnation_residual)
                        && sol.trace.iterations() <= cfg.adaptive_max_iterations
                        && sol.gamma > 0.0
                        && sol.curve.measured_entry(model, radius) < xi =>
                {
                    found = Some((xi, pro, sol));
                    break;
                }
                Ok(_) => {}
                Err(e) => last_err = Some(e),
            }
            eps *= 0.5;
        }
        found.ok_or_else(|| {
            Error::ScheduleStall(format!(
                "stage {}: no admissible window beyond ξ = {} ({})",
                state.k,
                state.xi_k,
                last_err.map(|e| e.to_string()).unwrap_or_else(|| "Newton did not settle".into())
            ))
        })?
    } else {
        let xi = proposal.xi_next;
        if !(xi > state.xi_k) {
            return Err(Error::ScheduleStall(format!("window did not grow beyond {}", state.xi_k)));
        }
        let (pro, sol) = trial(xi)?;
        if !(sol.gamma > 0.0) {
            return Err(Error::IndefiniteHessian { gamma: sol.gamma });
        }
        (xi, pro, sol)
    };
    let (bounds, lip) = compute_stage_bounds(problem, cfg, state, xi_next)?;
    let p_cert = certified_p(&bounds, lip.c_l);
    let action_prolonged = action(model, &pro)?;
    let gamma_initial = sol.gamma_initial.unwrap_or(sol.gamma);
    let step0 = sol.trace.iterates.first().map(|i| i.step_norm).unwrap_or(0.0);
    let certificate = certify(gamma_initial.max(f64::MIN_POSITIVE), step0, lip.c_l, cfg.trust_radius)?;
    let mass = sol.derivatives.mass.as_ref().expect("mass assembled");
    let holds = gamma_initial > 0.0 && rates_hold(&certificate, &sol.trace, resolution(mass, &sol.curve));

    let (mut gamma_next, mut gamma_alt) = (None, None);
    let (mut a_next, mut drift_next) = (state.a_acc, state.drift_sum);
    let mut heuristic = state.heuristic;
    match state.gamma_k {
        Some(g) if p_cert < 0.5 && bounds.a_k > 0.0 && !heuristic => {
            let step = floor_step(state.gamma_0, g, state.a_acc, state.drift_sum, p_cert, bounds.delta_k)?;
            drift_next = step.drift_sum;
            a_next = step.a_acc;
            gamma_next = Some(step.gamma);
            gamma_alt = Some(step.gamma_closed);
            if !(drift_next < state.gamma_0) {
                heuristic = true;
            }
        }
        _ => heuristic = true,
    }
    if heuristic {
        gamma_next = None;
    }

    let i_next = sol.derivatives.value;
    let reduced = state.i_hat_k - bounds.delta_i_k;
    let xi_hat_next = sol.curve.measured_entry(model, radius);
    let speeds = sol.curve.boundary_speeds(model);
    let decay_next = if xi_hat_next < xi_next {
        decay_bound(cp.lambda, radius, xi_hat_next, xi_next)?
    } else {
        f64::INFINITY
    };
    let record = StageRecord {
        k: state.k,
        xi_k: state.xi_k,
        xi_next,
        epsilon: xi_next - state.xi_k,
        p_target: proposal.p_target,
        p_certified: p_cert,
        l_measured: certificate.l,
        capped: proposal.capped,
        bounds,
        lipschitz: lip,
        gamma_floor_next: gamma_next,
        gamma_floor_next_alt: gamma_alt,
        gamma_initial,
        gamma_measured_next: sol.gamma,
        a_acc_next: a_next,
        drift_sum_next: drift_next,
        certificate,
        rates_hold: holds,
        newton: sol.trace.clone(),
        residual: sol.residual(),
        action_prolonged,
        action_next: i_next,
        telescoping_ok: i_next < reduced,
        xi_hat_next,
        boundary_speeds: speeds,
        decay_bound_next: decay_next,
        tail_distance: tail_distance(model, &sol.curve),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let mut p_history = state.p_history.clone();
    p_history.push(p_cert);
    let mut epsilon_history = state.epsilon_history.clone();
    epsilon_history.push(xi_next - state.xi_k);
    let mut mu_history = state.mu_history.clone();
    mu_history.push(record.bounds.mu);
    let mut c_l_history = state.c_l_history.clone();
    c_l_history.push(record.lipschitz.c_l);
    let next = ContinuationState {
        k: state.k + 1,
        xi_k: xi_next,
        xi_hat_k: xi_hat_next,
        gamma_0: state.gamma_0,
        gamma_k: gamma_next,
        gamma_measured: sol.gamma,
        a_acc: a_next,
        drift_sum: drift_next,
        i_hat_k: i_next,
        i_prev_reduced: Some(reduced),
        h_star: state.h_star,
        p_history,
        epsilon_history,
        mu_history,
        c_l_history,
        heuristic,
        curve: CurveSnapshot::of(&sol.curve),
    };
    Ok((next, record))
}

/// Boundary-velocity bound and tail distance both below their thresholds.
pub fn asymptotic_reached(problem: &Problem, cfg: &ContinuationConfig, state: &ContinuationState) -> Result<bool> {
    if !(state.xi_hat_k < state.xi_k) {
        return Ok(false);
    }
    let bound = decay_bound(problem.cp.lambda, problem.radius(), state.xi_hat_k, state.xi_k)?;
    let curve = state.curve.restore(&problem.model, &problem.tf)?;
    Ok(bound < cfg.eps_asymptotic && tail_distance(&problem.model, &curve) < cfg.eps_tail)
}

/// Decay rate fitted to `log d(q, x_±) + ½ log r` against `|ξ|` on the part
/// of each side between `0.35 ξ_k` and `0.8 ξ_k` inside the balls; the
/// smaller side is returned.
pub fn tail_rate(problem: &Problem, curve: &DiscreteCurve) -> Option<f64> {
    let (model, tf) = (&problem.model, &problem.tf);
    let xi_k = curve.grid().xi_k();
    let xi_hat = curve.measured_entry(model, problem.radius());
    let mut rates = Vec::new();
    for side in [-1.0, 1.0] {
        let target = if side > 0.0 { curve.x_plus() } else { curve.x_minus() };
        let pts: Vec<(f64, f64)> = curve
            .grid()
            .nodes()
            .iter()
            .zip(curve.points())
            .filter(|(x, _)| x.signum() == side && x.abs() >= (0.35 * xi_k).max(xi_hat) && x.abs() <= 0.8 * xi_k)
            .filter_map(|(x, p)| {
                let d = model.distance(p, target);
                (d > 1e-13).then(|| (x.abs(), d.ln() + 0.5 * tf.r(*x).ln()))
            })
            .collect();
        if pts.len() < 4 {
            continue;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if sxx > 0.0 {
            rates.push(-sxy / sxx);
        }
    }
    rates.into_iter().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |x| x.min(v))))
}

/// A run that stopped on an error, with the last good state for restart.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub state: Box<ContinuationState>,
    pub stages: Vec<StageRecord>,
}

/// Runs stages from `state` until the stopping rule or the budget; calls
/// `observer` after every stage.
pub fn continue_run(
    problem: &Problem,
    cfg: &ContinuationConfig,
    seed: SeedReport,
    state: ContinuationState,
    observer: &mut dyn FnMut(&ContinuationState, &StageRecord),
) -> std::result::Result<OrbitResult, RunFailure> {
    let mut state = state;
    let mut stages = Vec::new();
    let fail = |e: Error, s: &ContinuationState, st: Vec<StageRecord>| RunFailure { error: e, state: Box::new(s.clone()), stages: st };
    let mut stop = StopReason::Budget;
    loop {
        match asymptotic_reached(problem, cfg, &state) {
            Ok(true) => {
                stop = StopReason::Asymptotic;
                break;
            }
            Ok(false) => {}
            Err(e) => return Err(fail(e, &state, stages)),
        }
        if stages.len() >= cfg.stages {
            break;
        }
        match advance_stage(problem, cfg, &state) {
            Ok((next, record)) => {
                observer(&next, &record);
                stages.push(record);
                state = next;
            }
            Err(e) => return Err(fail(e, &state, stages)),
        }
    }
    let curve = match state.curve.restore(&problem.model, &problem.tf) {
        Ok(c) => c,
        Err(e) => return Err(fail(e, &state, stages)),
    };
    let lambda_eff = tail_rate(problem, &curve);
    let (c_gamma_run, sum, nec) = power_diagnostics(problem, cfg, seed.xi_0, &state);
    Ok(OrbitResult { seed, stages, state, stop, lambda_eff, c_gamma: c_gamma_run, convergence_sum: sum, necessary_condition: nec })
}

/// `C_γ`, the schedule sum and the necessary-condition comparison for power
/// factors; `None` otherwise or when a stage lacked the power data.
fn power_diagnostics(
    problem: &Problem,
    cfg: &ContinuationConfig,
    xi0: f64,
    state: &ContinuationState,
) -> (Option<f64>, Option<f64>, Option<(f64, f64)>) {
    let tf = &problem.tf;
    if tf.power_m().is_none() || state.epsilon_history.is_empty() {
        return (None, None, None);
    }
    let h = state.h_star;
    if !h.is_finite() {
        return (None, None, None);
    }
    let mu = state.mu_history.iter().copied().filter(|m| *m > 0.0).fold(f64::INFINITY, f64::min);
    let c_l = state.c_l_history.iter().copied().fold(0.0, f64::max);
    let lambda = problem.cp.lambda;
    let (Ok(cd), Ok(cb)) = (c_delta(tf, mu, h), c_b(tf, lambda, problem.radius(), h)) else {
        return (None, None, None);
    };
    let cg = c_gamma(cd, cb, c_l);
    let schedule: Vec<f64> = (0..state.epsilon_history.len()).map(|k| cfg.p_target(k)).collect();
    let sum = convergence_sum(&schedule, cg);
    let y = |xi: f64| power_argument(tf, lambda, h, xi).map(f_growth).unwrap_or(f64::NAN);
    let mut xi = xi0;
    let mut discrete = 0.0;
    for eps in &state.epsilon_history {
        discrete += eps / y(xi);
        xi += eps;
    }
    let integral = integrate(|x| 1.0 / y(x), xi0, state.xi_k, 1e-10, 0.0).value;
    (Some(cg), Some(sum), Some((discrete, integral)))
}

/// Validated problem → seed → stages.
pub fn run(problem: &Problem, cfg: &ContinuationConfig) -> std::result::Result<OrbitResult, RunFailure> {
    let (seed, q0) = seed_geodesic(problem, cfg).map_err(|e| RunFailure {
        error: e,
        state: Box::new(empty_state()),
        stages: Vec::new(),
    })?;
    let state = initial_state(problem, cfg, &seed, &q0);
    continue_run(problem, cfg, seed, state, &mut |_, _| {})
}

fn empty_state() -> ContinuationState {
    ContinuationState {
        k: 0,
        xi_k: 0.0,
        xi_hat_k: 0.0,
        gamma_0: 0.0,
        gamma_k: None,
        gamma_measured: 0.0,
        a_acc: 1.0,
        drift_sum: 0.0,
        i_hat_k: 0.0,
        i_prev_reduced: None,
        h_star: f64::INFINITY,
        p_history: Vec::new(),
        epsilon_history: Vec::new(),
        mu_history: Vec::new(),
        c_l_history: Vec::new(),
        heuristic: false,
        curve: CurveSnapshot { nodes: Vec::new(), dw_minus: 0.0, dw_plus: 0.0, points: Vec::new() },
    }
}

/// JSON has no infinities, so non-finite entries are written as strings.
mod tagged_floats {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Entry {
        Num(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let out: Vec<Entry> = v
            .iter()
            .map(|&x| {
                if x.is_finite() {
                    Entry::Num(x)
                } else {
                    Entry::Tag(x.to_string())
                }
            })
            .collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Entry>::deserialize(d)?
            .into_iter()
            .map(|e| match e {
                Entry::Num(x) => Ok(x),
                Entry::Tag(t) => t.parse::<f64>().map_err(serde::de::Error::custom),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{calibrate_ball, BallSampling, ConstantPotential, CoordTopology, Pendulum};
    use std::f64::consts::PI;

    pub(crate) fn pendulum_problem() -> Problem {
        let model = ManifoldModel::flat(vec![CoordTopology::Circle { period: 2.0 * PI }], Arc::new(Pendulum)).unwrap();
        let tf = TimeFactor::power(1).unwrap();
        let cp = CriticalPointData::analyze(&model, vec![0.0], vec![PI], -1.0, 1.0, None, None).unwrap();
        let cp = calibrate_ball(&model, &cp, 0.8, &BallSampling::default()).unwrap();
        Problem::new(model, tf, cp).unwrap()
    }

    #[test]
    fn free_particle_seed_has_zero_gradient_bound() {
        let model = ManifoldModel::flat(vec![CoordTopology::Line], Arc::new(ConstantPotential(0.0))).unwrap();
        let scan = LocalizedBallScan { samples: Vec::new(), k_max: 0.0, c_g: 0.0, c_k: 0.0, c_v: 0.0 };
        let cp = CriticalPointData {
            x_minus: vec![-1.0],
            x_plus: vec![1.0],
            sigma_minus: -1.0,
            sigma_plus: 1.0,
            hessian_eigs_minus: vec![1.0],
            hessian_eigs_plus: vec![1.0],
            lambda: 0.9,
            nu: 1.1,
            r_lambda: 0.25,
            scan: Some(scan),
        };
        let p = Problem::new(model, TimeFactor::power(1).unwrap(), cp).unwrap();
        let cfg = ContinuationConfig { xi0: 0.05, ..Default::default() };
        let (seed, q0) = seed_geodesic(&p, &cfg).unwrap();
        assert_eq!(seed.b_0, 0.0);
        assert_eq!(seed.halvings, 0);
        assert!(seed.c_gamma > 0.9 && seed.c_gamma <= 1.0, "{}", seed.c_gamma);
        // the geodesic is already critical
        assert_eq!(seed.newton.iterations(), 0);
        assert!(q0.points()[q0.grid().zero_index()][0].abs() < 1e-12);
    }

    #[test]
    fn budget_zero_returns_the_seed() {
        let p = pendulum_problem();
        let cfg = ContinuationConfig { stages: 0, ..Default::default() };
        let r = run(&p, &cfg).unwrap();
        assert!(r.stages.is_empty());
        assert_eq!(r.state.xi_k, r.seed.xi_0);
        assert!(r.seed.p_0 < 0.5 && r.seed.a_0 > 0.0);
        assert!(r.seed.margin_lhs <= r.seed.margin_rhs);
        assert!(r.seed.certificate.passed);
    }

    #[test]
    fn pendulum_stages_keep_invariants() {
        let p = pendulum_problem();
        let cfg = ContinuationConfig { stages: 3, ..Default::default() };
        let r = run(&p, &cfg).unwrap();
        assert_eq!(r.stages.len(), 3);
        for s in &r.stages {
            assert!(s.xi_next > s.xi_k);
            assert!(s.gamma_measured_next > 0.0);
            assert!(s.residual < 1e-8);
            assert!((s.action_prolonged - s.bounds.i_hat_k).abs() <= 1e-12 * s.bounds.i_hat_k.abs().max(1.0));
            assert!(s.action_next <= s.action_prolonged);
            if let (Some(a), Some(b)) = (s.gamma_floor_next, s.gamma_floor_next_alt) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                assert!(s.gamma_measured_next >= a);
            }
        }
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let p = pendulum_problem();
        let g = Arc::new(build_grid(&p.tf, 0.7, 40).unwrap());
        let c = DiscreteCurve::linear_in_time(&p.model, &p.tf, g, &[0.0], &[PI]).unwrap();
        let s = CurveSnapshot::of(&c);
        let back = s.restore(&p.model, &p.tf).unwrap();
        assert_eq!(back.grid().cells(), c.grid().cells());
        assert_eq!(back.points(), c.points());
    }

    #[test]
    fn trivial_loop_is_rejected() {
        let model = ManifoldModel::flat(vec![CoordTopology::Circle { period: 2.0 * PI }], Arc::new(Pendulum)).unwrap();
        let mut cp = CriticalPointData::analyze(&model, vec![PI], vec![PI], 1.0, 1.0, None, None).unwrap();
        cp.r_lambda = 0.5;
        cp.scan = Some(LocalizedBallScan { samples: Vec::new(), k_max: 0.0, c_g: 0.0, c_k: 0.0, c_v: 1.0 });
        assert!(Problem::new(model, TimeFactor::unit(), cp).is_err());
    }
}
