//! Scalar estimates for the window continuation: comparison problems, decay of
//! the boundary velocity, the gradient bound `b_k`, the coercivity loss `Δ_k`,
//! the entry-time bound, the Lipschitz constant and the power-law refinements.

use serde::{Deserialize, Serialize};

use crate::curvespace::{scalar_gram_forms, WindowGrid};
use crate::error::{Error, Result};
use crate::geometry::LocalizedBallScan;
use crate::linalg::smallest_generalized_eigen;
use crate::quadrature::integrate;
use crate::timescale::TimeFactor;

/// Solution of `v'' + 2 p v' − λ² v = 0`, `v(a) = 1`, `v(b) = 0` with
/// constant damping `p`: `v(ξ) = θ(b − ξ)/θ(b − a)` with
/// `θ(ζ) = e^{pζ} sinh(√(λ² + p²) ζ)`.
pub fn comparison_solution(damping: f64, lambda: f64, a: f64, b: f64, xi: f64) -> f64 {
    let k = (lambda * lambda + damping * damping).sqrt();
    let theta = |z: f64| (damping * z).exp() * (k * z).sinh();
    // Ratio form avoids overflow of both factors for long intervals.
    let (z, w) = (b - xi, b - a);
    if w * k > 300.0 {
        let num = if z * k > 30.0 { 0.5 * (k * z).exp() } else { (k * z).sinh() };
        return ((damping * (z - w)).exp() * num / (0.5 * (k * w).exp())).clamp(0.0, 1.0);
    }
    theta(z) / theta(w)
}

/// `λ R / sinh(λ (b − a))`.
pub fn decay_bound(lambda: f64, radius: f64, a: f64, b: f64) -> Result<f64> {
    if !(b > a) {
        return Err(Error::InvalidArgument(format!("decay interval [{a}, {b}] is empty")));
    }
    if !(lambda > 0.0) || !(radius > 0.0) {
        return Err(Error::InvalidArgument("rate and radius must be positive".into()));
    }
    let x = lambda * (b - a);
    Ok(if x < 1e-8 { radius / (b - a) } else { lambda * radius / x.sinh() })
}

/// Gradient bound at the prolonged curve:
/// `(r(ξ_k)^{1/2} + r(−ξ_k)^{1/2}) λ R (ξ_{k+1} − ξ_k)^{1/2} / sinh(λ(ξ_k − ξ̂_k))`.
pub fn gradient_bound_bk(tf: &TimeFactor, xi_k: f64, xi_hat: f64, lambda: f64, radius: f64, xi_next: f64) -> Result<f64> {
    if !(xi_next >= xi_k) || !(xi_k > xi_hat) {
        return Err(Error::InvalidArgument(format!(
            "ordering ξ̂ = {xi_hat} < ξ_k = {xi_k} ≤ ξ_(k+1) = {xi_next} violated"
        )));
    }
    let pre = tf.r(xi_k).sqrt() + tf.r(-xi_k).sqrt();
    Ok(pre * decay_bound(lambda, radius, xi_hat, xi_k)? * (xi_next - xi_k).sqrt())
}

/// `F(y) = sinh²(y)/y`.
pub fn f_growth(y: f64) -> f64 {
    if y < 1e-8 {
        return y;
    }
    let s = y.sinh();
    s * s / y
}

fn power_parts(tf: &TimeFactor) -> Result<(u32, f64)> {
    let m = tf
        .power_m()
        .ok_or_else(|| Error::Precondition("power-law refinement needs f = t^m".into()))?;
    Ok((m, tf.alpha().expect("power factor")))
}

/// `C_b = 2 λ^{1/2} R α / h_*`.
pub fn c_b(tf: &TimeFactor, lambda: f64, radius: f64, h_star: f64) -> Result<f64> {
    let (_, alpha) = power_parts(tf)?;
    Ok(2.0 * lambda.sqrt() * radius * alpha / h_star)
}

/// `y = κ α^{-1} h_* ξ^{m/(m+2)}` for rate `κ`.
pub fn power_argument(tf: &TimeFactor, rate: f64, h_star: f64, xi_k: f64) -> Result<f64> {
    let (m, alpha) = power_parts(tf)?;
    let m = m as f64;
    Ok(rate * h_star / alpha * xi_k.powf(m / (m + 2.0)))
}

/// Power-law form `C_b (ε / F(λ α^{-1} h_* ξ_k^{m/(m+2)}))^{1/2}` of `b_k`.
///
/// For `m > 2` the endpoint weight `r(ξ_k)^{1/2}` exceeds the `α^{1/2}` factor
/// used to derive this form, so the extra ratio `c^{(m−2)/(2(m+2))}` with
/// `c = (m+2)/2` is applied to keep it an upper bound.
pub fn power_b_bound(tf: &TimeFactor, lambda: f64, radius: f64, h_star: f64, xi_k: f64, eps: f64) -> Result<f64> {
    let (m, _) = power_parts(tf)?;
    let y = power_argument(tf, lambda, h_star, xi_k)?;
    let mf = m as f64;
    let c = 0.5 * (mf + 2.0);
    let fix = c.powf((mf - 2.0) / (2.0 * (mf + 2.0))).max(1.0);
    Ok(fix * c_b(tf, lambda, radius, h_star)? * (eps / f_growth(y)).sqrt())
}

/// Admissible coercivity rate on the outer pieces, or `None` when the
/// curvature term exhausts `λ²`.
pub fn mu_condition(k_max: f64, lambda: f64, nu: f64, radius: f64, gap: f64) -> Option<f64> {
    if !(gap > 0.0) {
        return None;
    }
    if k_max <= 0.0 {
        return Some(lambda);
    }
    let coth = 1.0 / (nu * gap).tanh();
    let v = lambda * lambda - k_max * (nu * nu * coth * coth + (nu * nu - lambda * lambda)) * radius * radius;
    (v > 0.0).then(|| v.sqrt())
}

/// Largest coercivity that enters `Δ_k`; values at or above one are clipped.
pub const GAMMA_CLIP: f64 = 1.0 - 1e-6;

/// Coercivity loss
/// `(1−γ)μ²/sinh²(μ(ξ_k−ξ̂)) Σ_± ∫_{Ω̂^±∪Ω_{k+1}^±} r^{-1} ∫_{Ω_{k+1}^±} r`.
pub fn coercivity_loss_delta(tf: &TimeFactor, xi_k: f64, xi_hat: f64, mu: f64, gamma_k: f64, xi_next: f64) -> Result<f64> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::Precondition(format!("coercivity rate {mu} must be positive")));
    }
    if !(xi_next >= xi_k) || !(xi_k > xi_hat) || xi_hat < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "ordering 0 ≤ ξ̂ = {xi_hat} < ξ_k = {xi_k} ≤ ξ_(k+1) = {xi_next} violated"
        )));
    }
    if xi_next == xi_k {
        return Ok(0.0);
    }
    let gamma = gamma_k.min(GAMMA_CLIP);
    let s = (mu * (xi_k - xi_hat)).sinh();
    let plus = tf.int_rinv(xi_hat, xi_next) * tf.int_r(xi_k, xi_next);
    let minus = tf.int_rinv(-xi_next, -xi_hat) * tf.int_r(-xi_next, -xi_k);
    Ok((1.0 - gamma) * mu * mu / (s * s) * (plus + minus))
}

/// `C_Δ = (1 + α/h_*) μ α c^{2(m+1)/(m+2)} (2^{2(m+1)/(m+2)} − 1)/(m+1)`.
pub fn c_delta(tf: &TimeFactor, mu: f64, h_star: f64) -> Result<f64> {
    let (m, alpha) = power_parts(tf)?;
    let m = m as f64;
    let e = 2.0 * (m + 1.0) / (m + 2.0);
    let c = 0.5 * (m + 2.0);
    Ok((1.0 + alpha / h_star) * mu * alpha * c.powf(e) / (m + 1.0) * (2f64.powf(e) - 1.0))
}

/// Power-law form `C_Δ (1−γ) ε / F(μ α^{-1} h_* ξ_k^{m/(m+2)})` of `Δ_k`.
pub fn power_delta_bound(tf: &TimeFactor, mu: f64, gamma_k: f64, h_star: f64, xi_k: f64, eps: f64) -> Result<f64> {
    let y = power_argument(tf, mu, h_star, xi_k)?;
    Ok(c_delta(tf, mu, h_star)? * (1.0 - gamma_k.min(GAMMA_CLIP)) * eps / f_growth(y))
}

/// Smallest root of `2 I h² − (2 I η − L²) h + R² η = 0`, with the linear
/// coefficient evaluated at `i_lin` and the constant product at `i_hat`
/// (equal except for the corollary form). `None` if no real root.
pub fn entry_root(i_lin: f64, i_hat: f64, eta: f64, l_k: f64, radius: f64) -> Option<f64> {
    let b = 2.0 * i_lin * eta - l_k * l_k;
    let disc = b * b - 8.0 * radius * radius * i_hat * eta;
    if disc < 0.0 || b <= 0.0 {
        return None;
    }
    Some(2.0 * radius * radius * eta / (b + disc.sqrt()))
}

/// `(h, ζ)`: the root and the largest `ζ^±` with `±∫_{±ζ}^{±ξ_k} r^{-1} = h`;
/// a side without a positive solution contributes zero, as does a missing root.
pub fn zeta_from_h(tf: &TimeFactor, xi_k: f64, h: Option<f64>) -> f64 {
    let Some(h) = h else { return 0.0 };
    let plus = {
        let g = tf.g(xi_k) - h;
        if g > 0.0 {
            tf.g_inv(g)
        } else {
            0.0
        }
    };
    let minus = {
        let g = tf.g(-xi_k) + h;
        if g < 0.0 {
            -tf.g_inv(g)
        } else {
            0.0
        }
    };
    plus.max(minus)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryTime {
    pub h: Option<f64>,
    pub zeta: f64,
    pub eta: f64,
}

/// Entry-time bound from the action `Î_k` at the solution.
pub fn entry_time_bound(tf: &TimeFactor, xi_k: f64, radius: f64, i_hat: f64, l_k: f64) -> Result<EntryTime> {
    if !(i_hat > 0.0) {
        return Err(Error::Precondition(format!("action {i_hat:e} must be positive")));
    }
    let eta = tf.int_rinv(-xi_k, xi_k);
    let h = entry_root(i_hat, i_hat, eta, l_k, radius);
    Ok(EntryTime { h, zeta: zeta_from_h(tf, xi_k, h), eta })
}

/// Corollary form: `Î_{k−1} − ΔÎ_{k−1}` in the linear coefficient.
pub fn entry_time_bound_corollary(
    tf: &TimeFactor,
    xi_k: f64,
    radius: f64,
    i_hat: f64,
    i_prev_reduced: f64,
    l_k: f64,
) -> Result<EntryTime> {
    if !(i_hat > 0.0) {
        return Err(Error::Precondition(format!("action {i_hat:e} must be positive")));
    }
    let eta = tf.int_rinv(-xi_k, xi_k);
    let h = entry_root(i_prev_reduced, i_hat, eta, l_k, radius);
    Ok(EntryTime { h, zeta: zeta_from_h(tf, xi_k, h), eta })
}

/// Guaranteed action decrease when the window grows from `ξ_{k−1}` to `ξ_k`:
/// the boundary-speed floor `νR / sinh(ν(s − ξ̂_{k−1}))` squared, halved and
/// integrated against `r` over the extension.
pub fn action_decrease(tf: &TimeFactor, nu: f64, radius: f64, xi_prev: f64, xi_hat_prev: f64, xi_k: f64) -> f64 {
    if !(xi_k > xi_prev) || !(xi_prev > xi_hat_prev) {
        return 0.0;
    }
    let density = |s: f64| {
        let sh = (nu * (s - xi_hat_prev)).sinh();
        0.5 * radius * radius * nu * nu / (sh * sh) * tf.r(s)
    };
    integrate(density, xi_prev, xi_k, 1e-10, 0.0).value
}

/// The same decrease with the speed floor frozen at `ξ_{k−1}`; only valid to
/// first order in `ξ_k − ξ_{k−1}`.
pub fn action_decrease_frozen(tf: &TimeFactor, nu: f64, radius: f64, xi_prev: f64, xi_hat_prev: f64, xi_k: f64) -> f64 {
    let s = (nu * (xi_prev - xi_hat_prev)).sinh();
    if s == 0.0 {
        return 0.0;
    }
    radius * radius * nu * nu / (2.0 * s * s) * tf.int_r(xi_prev, xi_k)
}

/// Uniform gap bound: `α^{-1} h_* ξ^{m/(m+2)}` above the threshold
/// `(α^{-1} h_*)^{(m+2)/2}`, `ξ` below it.
pub fn power_gap_bound(tf: &TimeFactor, h_star: f64, xi_k: f64) -> Result<f64> {
    let (m, alpha) = power_parts(tf)?;
    let m = m as f64;
    let k = h_star / alpha;
    if xi_k <= k.powf(0.5 * (m + 2.0)) {
        return Ok(xi_k);
    }
    Ok(k * xi_k.powf(m / (m + 2.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzData {
    pub c_r: f64,
    pub c_l: f64,
    /// Kinetic action `½∫|q'|² r`.
    pub j_k: f64,
    pub r_ball: f64,
}

/// Discrete embedding constant `‖v‖₁ ≤ C_r ‖v‖_r` on the window.
pub fn embedding_constant(grid: &WindowGrid) -> Result<f64> {
    let (plain, weighted) = scalar_gram_forms(grid);
    let e = smallest_generalized_eigen(&weighted, &plain, 1e-9)?;
    if !(e.value > 0.0) {
        return Err(Error::Precondition("weighted Gram form is not definite".into()));
    }
    Ok(1.0 / e.value.sqrt())
}

/// `C_L = 2(1 + (C_g² + C_K) C_r² (J + ½R²) + ¼ C_V C_r²)`.
pub fn lipschitz_from_constants(scan: &LocalizedBallScan, c_r: f64, j_k: f64, r_ball: f64) -> f64 {
    let cr2 = c_r * c_r;
    2.0 * (1.0 + (scan.c_g * scan.c_g + scan.c_k) * cr2 * (j_k + 0.5 * r_ball * r_ball) + 0.25 * scan.c_v * cr2)
}

pub fn lipschitz_cl(scan: &LocalizedBallScan, grid: &WindowGrid, j_k: f64, r_ball: f64) -> Result<LipschitzData> {
    let c_r = embedding_constant(grid)?;
    Ok(LipschitzData { c_r, c_l: lipschitz_from_constants(scan, c_r, j_k, r_ball), j_k, r_ball })
}

/// Terms `2p/(1+√(1−2p)) + C_γ √(1−2p) p²` summed over a schedule.
pub fn convergence_sum(p: &[f64], c_gamma: f64) -> f64 {
    p.iter()
        .map(|p| {
            let s = (1.0 - 2.0 * p).sqrt();
            2.0 * p / (1.0 + s) + c_gamma * s * p * p
        })
        .sum()
}

/// One step of the coercivity floor, carried both as the product
/// `γ_{k+1} = √(1−2p)(γ_k − Δ)` and in closed form `(γ_0 − Σ A_j Δ_j)/A_{k+1}`
/// with `A_{k+1} = A_k/√(1−2p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorStep {
    pub gamma: f64,
    pub gamma_closed: f64,
    pub a_acc: f64,
    pub drift_sum: f64,
}

pub fn floor_step(gamma_0: f64, gamma_k: f64, a_acc: f64, drift_sum: f64, p: f64, delta: f64) -> Result<FloorStep> {
    if !(p >= 0.0 && p < 0.5) {
        return Err(Error::Precondition(format!("schedule value {p} outside [0, 1/2)")));
    }
    let s = (1.0 - 2.0 * p).sqrt();
    let drift = drift_sum + a_acc * delta;
    let a_next = a_acc / s;
    Ok(FloorStep { gamma: s * (gamma_k - delta), gamma_closed: (gamma_0 - drift) / a_next, a_acc: a_next, drift_sum: drift })
}

/// `C_γ = C_Δ/(C_b² C_L²) · 2²3³/5⁵`.
pub fn c_gamma(c_delta: f64, c_b: f64, c_l: f64) -> f64 {
    c_delta / (c_b * c_b * c_l * c_l) * 108.0 / 3125.0
}

/// Step length from `ε/F(y) = p² γ_{k+1}⁴ / (C_b² C_L² (1 − 2p)²)`, capped at
/// `ξ_k^{m/(m+2)}`; returns `(ε, capped)`.
pub fn power_step(
    tf: &TimeFactor,
    lambda: f64,
    h_star: f64,
    xi_k: f64,
    p_k: f64,
    gamma_next: f64,
    c_b: f64,
    c_l: f64,
) -> Result<(f64, bool)> {
    if !(p_k > 0.0 && p_k < 0.5) {
        return Err(Error::Precondition(format!("schedule value {p_k} outside (0, 1/2)")));
    }
    let (m, _) = power_parts(tf)?;
    let m = m as f64;
    let y = power_argument(tf, lambda, h_star, xi_k)?;
    let rhs = p_k * p_k * gamma_next.powi(4) / (c_b * c_b * c_l * c_l * (1.0 - 2.0 * p_k).powi(2));
    let eps = f_growth(y) * rhs;
    let cap = xi_k.powf(m / (m + 2.0));
    Ok(if eps >= cap { (cap, true) } else { (eps, false) })
}

/// All bounds for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBounds {
    pub xi_k: f64,
    /// Entry time used in the estimates (the certified bound, never below the
    /// measured value).
    pub xi_hat_k: f64,
    pub xi_next: f64,
    pub b_k: f64,
    pub delta_k: f64,
    pub a_k: f64,
    pub h_k: Option<f64>,
    pub zeta_k: f64,
    pub eta_k: f64,
    pub l_k: f64,
    pub i_hat_k: f64,
    pub delta_i_k: f64,
    /// Decrease with the speed floor frozen at `ξ_k`.
    pub delta_i_frozen_k: f64,
    pub mu: f64,
    /// Power-law refinements, when the factor is `t^m`.
    pub b_k_power: Option<f64>,
    pub delta_k_power: Option<f64>,
    pub gap_bound_power: Option<f64>,
    /// Which entry-time branch was active.
    pub entry_branch: String,
}
