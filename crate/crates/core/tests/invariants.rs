//! Property tests for the structural invariants of each module.

use std::f64::consts::PI;
use std::sync::Arc;

use orbitforge_core::bounds::{comparison_solution, convergence_sum, decay_bound, floor_step};
use orbitforge_core::config::{build_problem, RunConfig};
use orbitforge_core::continuation::{run, ContinuationConfig};
use orbitforge_core::curvespace::{build_grid, hessian, scalar_gram_forms, DiscreteCurve};
use orbitforge_core::geometry::{
    CoordTopology, DoubleWell, ExprPotential, ManifoldModel, Pendulum, QuadraticPotential, SphereChartMetric,
};
use orbitforge_core::newton::certify;
use orbitforge_core::report::Checkpoint;
use orbitforge_core::timescale::TimeFactor;
use proptest::prelude::*;

fn sphere() -> ManifoldModel {
    ManifoldModel::new(
        vec![CoordTopology::Line, CoordTopology::Circle { period: 2.0 * PI }],
        Arc::new(SphereChartMetric),
        Arc::new(QuadraticPotential::new(vec![0.3, -0.2])),
    )
    .unwrap()
}

fn torus() -> ManifoldModel {
    let v = ExprPotential::parse("-cos(x) - cos(y) - 0.1*cos(x - y)", &["x", "y"]).unwrap();
    ManifoldModel::flat(
        vec![CoordTopology::Circle { period: 2.0 * PI }, CoordTopology::Circle { period: 2.0 * PI }],
        Arc::new(v),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metric_is_compatible_with_connection(theta in 0.3..2.8f64, phi in -3.0..3.0f64) {
        let m = sphere();
        let x = [theta, phi];
        let gamma = m.christoffel(&x).unwrap();
        let g = m.metric_at(&x);
        let h = 1e-3;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let dg = (m.metric_at(&xp) - m.metric_at(&xm)) / (2.0 * h);
            for i in 0..2 {
                for j in 0..2 {
                    let conn: f64 = (0..2).map(|l| gamma.get(l, k, i) * g[(l, j)] + gamma.get(l, k, j) * g[(i, l)]).sum();
                    prop_assert!((dg[(i, j)] - conn).abs() < 10.0 * h * h, "k={k} i={i} j={j}");
                }
            }
        }
    }

    #[test]
    fn exp_map_moves_by_the_tangent_length(theta in 0.4..2.7f64, phi in -3.0..3.0f64, a in -1.0..1.0f64, b in -1.0..1.0f64, s in 1e-3..0.05f64) {
        let m = sphere();
        let x = [theta, phi];
        let n = (a * a + b * b).sqrt().max(1e-3);
        let v = [s * a / n, s * b / n];
        let len = m.norm(&x, &v);
        let y = m.exp_map(&x, &v, 64).unwrap();
        let d = m.distance(&x, &y);
        prop_assert!((d - len).abs() <= 10.0 * len.powi(3) + 1e-12, "{d} vs {len}");
    }

    #[test]
    fn potential_hessians_are_symmetric(x in -3.0..3.0f64, y in -3.0..3.0f64, theta in 0.3..2.8f64) {
        for (m, p) in [(torus(), vec![x, y]), (sphere(), vec![theta, y])] {
            let h = m.potential_package(&p).unwrap().hessian;
            let scale = h.iter().fold(1e-300_f64, |a, v| a.max(v.abs()));
            prop_assert!((h[(0, 1)] - h[(1, 0)]).abs() <= 1e-12 * scale);
        }
        let line = ManifoldModel::flat(vec![CoordTopology::Line], Arc::new(DoubleWell)).unwrap();
        prop_assert!(line.potential_package(&[x]).unwrap().hessian.nrows() == 1);
    }

    #[test]
    fn factor_shape(m in 1u32..5, xi in 0.01..20.0f64) {
        let tf = TimeFactor::power(m).unwrap();
        let h = 1e-4 * xi;
        // p decreasing, g increasing and concave on the positive side
        prop_assert!(tf.p(xi + h) < tf.p(xi));
        let d1 = (tf.g(xi + h) - tf.g(xi - h)) / (2.0 * h);
        prop_assert!(d1 > 0.0);
        prop_assert!((d1 * tf.r(xi) - 1.0).abs() < 1e-5);
        prop_assert!(tf.g(xi + h) - 2.0 * tf.g(xi) + tf.g(xi - h) < 0.0);
        // reconstruction of original time round-trips
        let t = tf.t_of_xi(xi);
        prop_assert!((tf.xi_of_t(t) - xi).abs() <= 1e-9 * xi);
    }

    #[test]
    fn pointwise_embedding_bound(m in 1u32..4, xi_k in 0.3..3.0f64, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let tf = TimeFactor::power(m).unwrap();
        let grid = build_grid(&tf, xi_k, 48).unwrap();
        let (stiff, mass) = scalar_gram_forms(&grid);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..stiff.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = (stiff.quad_form(&v) + mass.quad_form(&v)).sqrt();
        // interior nodes; the unknown vector skips the two Dirichlet ends
        for (i, xi) in grid.nodes()[1..grid.nodes().len() - 1].iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            prop_assert!(v[i].abs() <= tf.pointwise_bound(*xi) * norm * (1.0 + 1e-12), "ξ = {xi}");
        }
    }

    #[test]
    fn curves_pin_their_ends_and_forms_are_symmetric(xi_k in 0.3..2.0f64, cells in 16usize..40, amp in -0.4..0.4f64) {
        let tf = TimeFactor::power(1).unwrap();
        let m = torus();
        let grid = Arc::new(build_grid(&tf, xi_k, cells).unwrap());
        let (a, b) = ([0.0, 0.0], [PI, PI]);
        let last = grid.nodes().len() - 1;
        let pts: Vec<Vec<f64>> = grid.nodes().iter().enumerate().map(|(i, s)| {
            let w = 0.5 * (s / xi_k + 1.0);
            let bump = if i == 0 || i == last { 0.0 } else { amp * (PI * w).sin() };
            vec![w * PI + bump, w * PI - bump]
        }).collect();
        let c = DiscreteCurve::new(&m, grid.clone(), pts).unwrap();
        prop_assert_eq!(c.points()[0].as_slice(), &a[..]);
        prop_assert_eq!(c.points()[last].as_slice(), &b[..]);
        prop_assert!(grid.n_cells() >= cells);
        let (h, mass) = hessian(&m, &c).unwrap();
        let (dh, dm) = (h.to_dense(), mass.to_dense());
        for i in 0..dh.len() {
            for j in 0..i {
                prop_assert_eq!(dh[i][j], dh[j][i]);
                prop_assert_eq!(dm[i][j], dm[j][i]);
            }
        }
        prop_assert!(mass.cholesky().is_ok());
    }

    #[test]
    fn certificate_gate(gamma in 1e-3..10.0f64, b in 0.0..1.0f64, c_l in 1e-2..50.0f64, trust in 0.01..2.0f64) {
        let cert = certify(gamma, b, c_l, trust).unwrap();
        let l = b * c_l / gamma;
        prop_assert!((cert.l - l).abs() <= 1e-14 * l.max(1e-300));
        prop_assert_eq!(cert.passed, l <= 0.5 && cert.r_star <= trust);
        if l <= 0.5 && l > 1e-6 {
            let expect = (1.0 - (1.0 - 2.0 * l).sqrt()) * gamma / c_l;
            prop_assert!((cert.r_star - expect).abs() <= 1e-10 * expect);
        }
        // the predicted distances shrink
        for w in cert.predicted_rates.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn comparison_solution_stays_in_unit_interval(d in 0.0..2.0f64, lambda in 0.1..3.0f64, a in 0.0..2.0f64, w in 0.05..20.0f64, s in 0.0..1.0f64) {
        let b = a + w;
        let v = comparison_solution(d, lambda, a, b, a + s * w);
        prop_assert!((0.0..=1.0).contains(&v));
        let far = decay_bound(lambda, 1.0, a, b + 0.1).unwrap();
        prop_assert!(far < decay_bound(lambda, 1.0, a, b).unwrap());
    }

    #[test]
    fn floor_product_matches_closed_form(g0 in 0.1..2.0f64, deltas in prop::collection::vec(0.0..0.01f64, 10), p_hat in 0.01..0.45f64) {
        let (mut g, mut a, mut d) = (g0, 1.0, 0.0);
        for (k, delta) in deltas.iter().enumerate() {
            let st = floor_step(g0, g, a, d, p_hat / ((k + 1) * (k + 1)) as f64, *delta).unwrap();
            prop_assert!((st.gamma - st.gamma_closed).abs() <= 1e-12 * st.gamma.abs().max(1e-3));
            prop_assert!(st.a_acc >= a);
            (g, a, d) = (st.gamma, st.a_acc, st.drift_sum);
        }
    }

    #[test]
    fn schedule_sum_grows_with_the_constant(c1 in 0.0..100.0f64, c2 in 0.0..100.0f64) {
        let p: Vec<f64> = (0..50).map(|k| 0.1 / ((k + 1) * (k + 1)) as f64).collect();
        let (lo, hi) = if c1 < c2 { (c1, c2) } else { (c2, c1) };
        prop_assert!(convergence_sum(&p, lo) <= convergence_sum(&p, hi));
    }
}

#[test]
fn pendulum_grid_cells_are_equidistributed_within_factor_four() {
    let tf = TimeFactor::power(2).unwrap();
    let grid = build_grid(&tf, 1.0, 200).unwrap();
    let w: Vec<f64> = grid.nodes().windows(2).map(|c| tf.int_rinv(c[0], c[1])).collect();
    let (lo, hi) = w.iter().fold((f64::INFINITY, 0.0_f64), |(a, b), v| (a.min(*v), b.max(*v)));
    assert!(hi / lo <= 4.0, "ratio {}", hi / lo);
    assert!(grid.n_cells() >= 200);
}

/// A short loop run: windows grow strictly, the action telescopes and the
/// saved state restores exactly.
#[test]
fn loop_run_keeps_stage_invariants() {
    let mut cfg = RunConfig::from_toml(include_str!("../../../configs/pendulum_loop.toml")).unwrap();
    cfg.continuation.stages = 5;
    let problem = build_problem(&cfg).unwrap();
    let res = run(&problem, &cfg.continuation).unwrap_or_else(|f| panic!("{}", f.error));
    assert_eq!(res.stages.len(), 5);
    let mut prev_xi = res.seed.xi_0;
    for s in &res.stages {
        assert!(s.xi_next > s.xi_k && s.xi_k == prev_xi);
        assert!(s.telescoping_ok, "stage {}: {} vs {}", s.k, s.action_next, s.action_prolonged);
        assert!(s.gamma_measured_next > 0.0);
        assert!(s.bounds.b_k >= 0.0);
        assert!(s.xi_hat_next < s.xi_next);
        prev_xi = s.xi_next;
    }
    let ck = Checkpoint { config_hash: "x".into(), seed: res.seed.clone(), state: res.state.clone() };
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back, ck);
}

/// Power mode keeps each step below `ξ_k^{m/(m+2)}`.
#[test]
fn power_steps_respect_the_cap() {
    let mut cfg = RunConfig::from_toml(include_str!("../../../configs/pendulum.toml")).unwrap();
    cfg.continuation = ContinuationConfig {
        stages: 3,
        mode: orbitforge_core::continuation::ScheduleMode::Power,
        ..cfg.continuation.clone()
    };
    let problem = build_problem(&cfg).unwrap();
    let res = run(&problem, &cfg.continuation).unwrap_or_else(|f| panic!("{}", f.error));
    for s in &res.stages {
        assert!(s.epsilon > 0.0);
        assert!(s.epsilon <= s.xi_k.powf(1.0 / 3.0) * (1.0 + 1e-12));
    }
}

#[test]
fn pendulum_model_is_periodic() {
    let m = ManifoldModel::flat(vec![CoordTopology::Circle { period: 2.0 * PI }], Arc::new(Pendulum)).unwrap();
    assert!((m.distance(&[0.1], &[2.0 * PI - 0.1]) - 0.2).abs() < 1e-14);
}
