//! Acceptance criteria 1-10. Each test writes one PASS/FAIL line straight to
//! stdout (not through the capturing `println!`), so the lines show up in a
//! plain `cargo test` log.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use orbitforge_core::bounds::{
    comparison_solution, convergence_sum, decay_bound, floor_step, power_gap_bound,
};
use orbitforge_core::config::{build_problem, RunConfig};
use orbitforge_core::continuation::{
    continue_run, initial_state, seed_geodesic, ContinuationState, OrbitResult, Problem,
};
use orbitforge_core::curvespace::{action, assemble, build_grid, energy_profile, AssemblyOptions, DiscreteCurve};
use orbitforge_core::geometry::{CoordTopology, DoubleWell, ExprPotential, ManifoldModel, Pendulum};
use orbitforge_core::newton::{solve_window, NewtonOptions, NewtonTrace};
use orbitforge_core::oracle::{bvp_solve, fd_check, shoot_comparison, CollocationOptions};
use orbitforge_core::timescale::TimeFactor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
}

fn check(n: u32, (pass, detail): (bool, String)) {
    report(n, pass, &detail);
    assert!(pass, "criterion {n}: {detail}");
}

/// The end-to-end pendulum run shared by criteria 3-6, 8 and 9.
struct PendulumRun {
    problem: Problem,
    result: OrbitResult,
    /// States `0..=K`, one per window.
    states: Vec<ContinuationState>,
    seconds: f64,
}

fn pendulum_run() -> &'static PendulumRun {
    static RUN: OnceLock<PendulumRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let cfg = RunConfig::from_toml(include_str!("../../../configs/pendulum.toml")).unwrap();
        let problem = build_problem(&cfg).unwrap();
        let ccfg = &cfg.continuation;
        let (seed, q0) = seed_geodesic(&problem, ccfg).unwrap();
        let state = initial_state(&problem, ccfg, &seed, &q0);
        let mut states = vec![state.clone()];
        let result = continue_run(&problem, ccfg, seed, state, &mut |s, _| states.push(s.clone()))
            .unwrap_or_else(|f| panic!("pendulum run failed: {}", f.error));
        PendulumRun { problem, result, states, seconds: start.elapsed().as_secs_f64() }
    })
}

fn curve_of(run: &PendulumRun, s: &ContinuationState) -> DiscreteCurve {
    s.curve.restore(&run.problem.model, &run.problem.tf).unwrap()
}

fn random_curve(
    rng: &mut ChaCha8Rng,
    model: &ManifoldModel,
    tf: &TimeFactor,
    a: &[f64],
    b: &[f64],
) -> DiscreteCurve {
    let xi = rng.gen_range(0.5..2.0);
    let cells = rng.gen_range(16..40);
    let grid = Arc::new(build_grid(tf, xi, cells).unwrap());
    let amp: Vec<f64> = (0..a.len()).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let freq: Vec<f64> = (0..a.len()).map(|_| rng.gen_range(0.5..3.0)).collect();
    let pts = grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let w = 0.5 * (s / xi + 1.0);
            let edge = i == 0 || i + 1 == grid.nodes().len();
            (0..a.len())
                .map(|k| {
                    let bump = if edge { 0.0 } else { amp[k] * (PI * w).sin() * (freq[k] * s).cos() };
                    a[k] + w * (b[k] - a[k]) + bump
                })
                .collect()
        })
        .collect();
    DiscreteCurve::new(model, grid, pts).unwrap()
}

fn criterion_1() -> (bool, String) {
    let start = Instant::now();
    let line = ManifoldModel::flat(vec![CoordTopology::Line], Arc::new(DoubleWell)).unwrap();
    let circle = ManifoldModel::flat(vec![CoordTopology::Circle { period: 2.0 * PI }], Arc::new(Pendulum)).unwrap();
    let torus_v = ExprPotential::parse("-cos(x) - cos(y) - 0.1*cos(x - y)", &["x", "y"]).unwrap();
    let torus = ManifoldModel::flat(
        vec![CoordTopology::Circle { period: 2.0 * PI }, CoordTopology::Circle { period: 2.0 * PI }],
        Arc::new(torus_v),
    )
    .unwrap();
    let cases: [(&ManifoldModel, Vec<f64>, Vec<f64>, usize); 3] = [
        (&line, vec![-1.0], vec![1.0], 7),
        (&circle, vec![0.0], vec![PI], 7),
        (&torus, vec![0.0, 0.0], vec![PI, PI], 6),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let steps = [2e-2, 1e-2, 5e-3, 2.5e-3];
    let (mut worst_g, mut worst_h, mut worst_rel) = (f64::INFINITY, f64::INFINITY, 0.0_f64);
    let mut count = 0;
    for (model, a, b, n) in cases {
        for _ in 0..n {
            let m = rng.gen_range(1..=3);
            let tf = TimeFactor::power(m).unwrap();
            let c = random_curve(&mut rng, model, &tf, &a, &b);
            let d = assemble(model, &c, AssemblyOptions::FULL).unwrap();
            let hess = d.hessian.clone().unwrap();
            let dir: Vec<f64> = (0..c.n_unknowns()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let value = |s: &[f64]| action(model, &c.retract(model, s)?);
            let quad = |v: &[f64]| hess.quad_form(v);
            let rep = fd_check(&value, &d.gradient, Some(&quad), std::slice::from_ref(&dir), &steps).unwrap();
            worst_g = worst_g.min(rep.gradient_order.unwrap_or(f64::NAN));
            worst_h = worst_h.min(rep.hessian_order.unwrap_or(f64::NAN));
            let h = 1e-4;
            let plus: Vec<f64> = dir.iter().map(|v| v * h).collect();
            let minus: Vec<f64> = dir.iter().map(|v| -v * h).collect();
            let fd = (value(&plus).unwrap() - value(&minus).unwrap()) / (2.0 * h);
            let exact: f64 = d.gradient.iter().zip(&dir).map(|(g, v)| g * v).sum();
            worst_rel = worst_rel.max((fd - exact).abs() / exact.abs());
            count += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = count == 20 && worst_g >= 1.9 && worst_h >= 1.8 && worst_rel < 1e-6 && secs < 60.0;
    (
        pass,
        format!(
            "FD orders over {count} curves: gradient {worst_g:.3} (>= 1.9), Hessian {worst_h:.3} (>= 1.8), \
             relative mismatch at h=1e-4 {worst_rel:.2e} (< 1e-6), {secs:.1}s (< 60s)"
        ),
    )
}

fn criterion_2() -> (bool, String) {
    let combos: [(f64, f64, f64, u32); 10] = [
        (0.9, 0.5, 2.0, 1),
        (1.0, 0.3, 1.7, 1),
        (0.5, 1.0, 4.0, 1),
        (2.0, 0.2, 1.0, 1),
        (0.9, 0.5, 2.0, 2),
        (1.3, 0.1, 3.0, 2),
        (0.7, 2.0, 5.0, 2),
        (1.0, 0.5, 1.5, 3),
        (0.3, 0.4, 6.0, 3),
        (1.5, 1.0, 2.5, 4),
    ];
    let mut worst_gap = f64::NEG_INFINITY;
    let mut slope_ok = true;
    for (lambda, a, b, m) in combos {
        let tf = TimeFactor::power(m).unwrap();
        let s = shoot_comparison(&tf, lambda, a, b, 40_000).unwrap();
        // damping p/2 is largest at a and smallest at b for a power factor
        let (d_hi, d_lo) = (0.5 * tf.p(a), 0.5 * tf.p(b));
        for (x, v) in s.xi.iter().zip(&s.v) {
            let lower = comparison_solution(d_hi, lambda, a, b, *x);
            let upper = comparison_solution(d_lo, lambda, a, b, *x);
            worst_gap = worst_gap.max(lower - v).max(v - upper);
        }
        let end_slope = s.dv.last().unwrap().abs();
        slope_ok &= end_slope < lambda / (lambda * (b - a)).sinh();
    }
    let pass = worst_gap <= 1e-8 && slope_ok;
    (
        pass,
        format!("sandwich excess {worst_gap:.2e} (<= 1e-8) over 10 cases; end-slope bound strict: {slope_ok}"),
    )
}

fn traces(run: &PendulumRun) -> Vec<(String, &NewtonTrace, bool, bool)> {
    let r = &run.result;
    std::iter::once(("seed".to_string(), &r.seed.newton, r.seed.certificate.passed, r.seed.rates_hold))
        .chain(r.stages.iter().map(|s| (format!("stage {}", s.k), &s.newton, s.certificate.passed, s.rates_hold)))
        .collect()
}

fn criterion_3() -> (bool, String) {
    let run = pendulum_run();
    let r = &run.result;
    let mut certified = 0;
    let mut bad = Vec::new();
    let certs = std::iter::once(&r.seed.certificate).chain(r.stages.iter().map(|s| &s.certificate));
    for ((name, trace, passed, holds), cert) in traces(run).into_iter().zip(certs) {
        if !passed {
            continue;
        }
        certified += 1;
        // iterates whose distance sits above the predicted envelope and above roundoff
        let over = trace
            .iterates
            .iter()
            .enumerate()
            .filter(|(j, it)| it.distance_to_final > cert.predicted(*j) && it.distance_to_final > 1e-12)
            .count();
        if !holds || over > 0 {
            bad.push(name);
        }
    }
    let best = traces(run)
        .iter()
        .filter_map(|(_, t, _, _)| t.fitted_exponent(1e-13))
        .fold(f64::NEG_INFINITY, f64::max);
    let pass = certified > 0 && bad.is_empty() && best >= 1.8;
    (
        pass,
        format!("{certified} certified solves, rate violations {bad:?}, best fitted exponent {best:.3} (>= 1.8)"),
    )
}

fn criterion_4() -> (bool, String) {
    let run = pendulum_run();
    let (model, cp) = (&run.problem.model, &run.problem.cp);
    let radius = run.problem.radius();
    let mut worst = 0.0_f64;
    for s in &run.states[1..] {
        let c = curve_of(run, s);
        let xi_hat = c.measured_entry(model, radius);
        let bound = decay_bound(cp.lambda, radius, xi_hat, s.xi_k).unwrap();
        let (lo, hi) = c.boundary_speeds(model);
        worst = worst.max(lo.max(hi) / bound);
    }
    let pass = worst <= 1.05;
    (pass, format!("max |q'(±ξ_k)| / decay bound over {} stages = {worst:.4} (<= 1.05)", run.states.len() - 1))
}

fn criterion_5() -> (bool, String) {
    let run = pendulum_run();
    let tf = &run.problem.tf;
    let mut worst_entry = f64::NEG_INFINITY;
    let mut branches = Vec::new();
    for (s, rec) in run.states.iter().zip(&run.result.stages) {
        worst_entry = worst_entry.max(s.xi_hat_k - rec.bounds.zeta_k);
        branches.push(rec.bounds.entry_branch.clone());
    }
    let mut worst_gap = f64::INFINITY;
    for s in &run.states {
        let bound = power_gap_bound(tf, s.h_star, s.xi_k).unwrap();
        worst_gap = worst_gap.min((s.xi_k - s.xi_hat_k) - bound);
    }
    branches.dedup();
    let pass = worst_entry <= 0.0 && worst_gap >= 0.0;
    (
        pass,
        format!(
            "max(ξ̂_k − ζ_k) = {worst_entry:.3e} (<= 0), branches {branches:?}; \
             min(gap − power gap bound) = {worst_gap:.3e} (>= 0)"
        ),
    )
}

fn criterion_6() -> (bool, String) {
    let run = pendulum_run();
    let model = &run.problem.model;
    let mut worst = 0.0_f64;
    let mut cells = 0;
    for s in &run.states {
        let c = curve_of(run, s);
        let prof = energy_profile(model, &c);
        for i in 0..prof.energy.len() - 1 {
            if prof.mids[i] < s.xi_hat_k {
                continue;
            }
            cells += 1;
            let rise = prof.energy[i + 1] - prof.energy[i];
            if rise > 0.0 {
                worst = worst.max(rise / prof.truncation[i]);
            }
        }
    }
    let pass = worst < 10.0;
    (pass, format!("{cells} cells on the outer side, max energy rise / truncation = {worst:.3} (< 10)"))
}

fn criterion_7() -> (bool, String) {
    let start = Instant::now();
    let model = ManifoldModel::flat(vec![CoordTopology::Circle { period: 2.0 * PI }], Arc::new(Pendulum)).unwrap();
    let tf = TimeFactor::power(1).unwrap();
    let xi = 2.0;
    let init = |x: f64| vec![PI * (tf.g(x) + tf.g(xi)) / (2.0 * tf.g(xi))];
    let oracle = bvp_solve(&model, &tf, xi, &[0.0], &[PI], &init, &CollocationOptions::default()).unwrap();
    let cells = 800;
    let grid = Arc::new(build_grid(&tf, xi, cells).unwrap());
    let c0 = DiscreteCurve::linear_in_time(&model, &tf, grid.clone(), &[0.0], &[PI]).unwrap();
    let sol = solve_window(&model, &c0, &NewtonOptions::default()).unwrap();
    let dist = grid
        .nodes()
        .iter()
        .zip(sol.curve.points())
        .map(|(x, p)| model.distance(p, &oracle.eval_xi(&tf, *x)))
        .fold(0.0_f64, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = dist < 1e-6 && secs < 120.0;
    (
        pass,
        format!(
            "sup distance FEM vs collocation = {dist:.2e} (< 1e-6) at {} nodes, ξ_k = {xi}, {secs:.1}s (< 120s)",
            cells + 1
        ),
    )
}

fn criterion_8() -> (bool, String) {
    let run = pendulum_run();
    let r = &run.result;
    let gammas: Vec<f64> =
        std::iter::once(r.seed.gamma_measured).chain(r.stages.iter().map(|s| s.gamma_measured_next)).collect();
    let min_gamma = gammas.iter().copied().fold(f64::INFINITY, f64::min);
    let residual = r.stages.last().map_or(f64::NAN, |s| s.residual);
    let lambda = run.problem.cp.lambda;
    let lam_eff = r.lambda_eff.unwrap_or(f64::NAN);
    let pass = r.stages.len() >= 5
        && min_gamma > 0.0
        && residual < 1e-8
        && lam_eff >= 0.9 * lambda
        && run.seconds < 300.0;
    (
        pass,
        format!(
            "{} stages to ξ = {}, min γ = {min_gamma:.4} (> 0), final residual {residual:.2e} (< 1e-8), \
             λ_eff = {lam_eff:.4} vs 0.9λ = {:.4}, {:.1}s (< 300s)",
            r.stages.len(),
            r.state.xi_k,
            0.9 * lambda,
            run.seconds
        ),
    )
}

fn criterion_9() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gamma_0 = 0.8;
    let (mut g, mut a, mut d) = (gamma_0, 1.0, 0.0);
    let mut worst = 0.0_f64;
    for k in 0..10 {
        let p = 0.1 / ((k + 1) * (k + 1)) as f64;
        let delta = rng.gen_range(0.0..0.01);
        let st = floor_step(gamma_0, g, a, d, p, delta).unwrap();
        worst = worst.max((st.gamma - st.gamma_closed).abs() / st.gamma.abs());
        (g, a, d) = (st.gamma, st.a_acc, st.drift_sum);
    }
    let run = pendulum_run();
    let cg = run.result.c_gamma.unwrap_or(f64::NAN);
    let schedule: Vec<f64> = (0..100_000).map(|k| 0.1 / ((k + 1) as f64).powi(2)).collect();
    let sum = convergence_sum(&schedule, cg);
    let pass = worst <= 1e-12 && sum < 1.0;
    (
        pass,
        format!(
            "product vs closed floor over 10 stages: max relative gap {worst:.2e} (<= 1e-12); \
             schedule sum with C_γ = {cg:.4e}: {sum:.6} (< 1)"
        ),
    )
}

fn criterion_10() -> (bool, String) {
    let mut notes = Vec::new();
    let mut ok = true;
    for m in [1, 2] {
        let rep = TimeFactor::power(m).unwrap().validate(10.0, 2001).unwrap();
        let exempt = !rep.a3_exempt_points.is_empty();
        let good = rep.passed() && (m == 1) != exempt && (m == 1 || rep.a3.detail.contains("exempt"));
        ok &= good;
        notes.push(format!("t^{m}: pass={} exempt={exempt}", rep.passed()));
    }
    let cubic = TimeFactor::custom("t^3 - t", "3*t^2 - 1", "6*t", 0.0).unwrap();
    let rep = cubic.validate(10.0, 2001).unwrap();
    let good = !rep.a1.passed && rep.a2.passed && rep.a3.passed && rep.zeros.len() == 3;
    ok &= good;
    notes.push(format!("t^3-t: A1={} zeros={}", rep.a1.passed, rep.zeros.len()));

    // f f'' − 3/2 f'² = −3/2 + 8t⁴ − 8t⁸ > 0 exactly for t⁴ in (1/4, 3/4)
    let steep = TimeFactor::custom(
        "t*exp(t^4)",
        "exp(t^4)*(1 + 4*t^4)",
        "exp(t^4)*(20*t^3 + 16*t^7)",
        0.0,
    )
    .unwrap();
    let (span, n) = (2.0, 2001);
    let rep = steep.validate(span, n).unwrap();
    let outer = -(0.75f64).powf(0.25);
    let expected = (0..n)
        .map(|i| -span + 2.0 * span * i as f64 / (n - 1) as f64)
        .find(|t| *t > outer)
        .unwrap();
    let reported = rep.a3.first_violation;
    let good = rep.a1.passed && rep.a2.passed && !rep.a3.passed && reported == Some(expected);
    ok &= good;
    notes.push(format!("t·exp(t^4): A3={} at {reported:?} (expected {expected})", rep.a3.passed));
    (ok, notes.join("; "))
}

#[test]
fn criterion_01_derivative_consistency() {
    check(1, criterion_1());
}

#[test]
fn criterion_02_comparison_sandwich() {
    check(2, criterion_2());
}

#[test]
fn criterion_03_kantorovich_rate() {
    check(3, criterion_3());
}

#[test]
fn criterion_04_boundary_velocity() {
    check(4, criterion_4());
}

#[test]
fn criterion_05_entry_time() {
    check(5, criterion_5());
}

#[test]
fn criterion_06_energy_monotone() {
    check(6, criterion_6());
}

#[test]
fn criterion_07_oracle_agreement() {
    check(7, criterion_7());
}

#[test]
fn criterion_08_transversality() {
    check(8, criterion_8());
}

#[test]
fn criterion_09_recurrence_identities() {
    check(9, criterion_9());
}

#[test]
fn criterion_10_assumption_validator() {
    check(10, criterion_10());
}
