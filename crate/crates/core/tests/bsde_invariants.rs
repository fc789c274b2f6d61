use std::sync::Arc;

use proptest::prelude::*;
use rcl_core::aggregator::{AuditBox, CubicMonotone, DriverSpec, LinearDriver};
use rcl_core::bsde::{backward_semigroup, comparison_check, ordered_mean, solve_bsde, stderr, ComparisonConfig};
use rcl_core::regression::RegressionConfig;
use rcl_core::sde::{simulate_paths, ControlPolicy, ControlledSDE, PathBundle};

fn gbm_bundle(n_paths: usize, steps: usize, seed: u64) -> PathBundle {
    let sde = ControlledSDE::gbm(0.05, 0.2, 1.0);
    simulate_paths(&sde, &ControlPolicy::Constant(vec![0.0]), 0.0, &[1.0], steps, n_paths, seed).unwrap()
}

fn linear(mu: f64, shift: f64) -> DriverSpec {
    let bx = AuditBox { x: vec![(0.0, 5.0)], ..AuditBox::new(1, 1, 1) };
    LinearDriver::spec(mu, 0.0, bx)
        .with_terminal(Arc::new(move |x: &[f64]| x[0] + shift), 1.0)
        .require_audit(512)
        .unwrap()
}

fn zero() -> ControlPolicy {
    ControlPolicy::Constant(vec![0.0])
}

#[test]
fn terminal_layer_is_exact() {
    let b = gbm_bundle(2000, 20, 1);
    let spec = linear(-0.5, 0.0);
    let sol = solve_bsde(&b, &spec, &zero(), &RegressionConfig::default()).unwrap();
    for p in 0..b.n_paths {
        assert_eq!(sol.y(p, b.steps).to_bits(), spec.h(b.state(p, b.steps)).to_bits());
    }
}

#[test]
fn linear_driver_matches_discounted_mean() {
    let (mu, t) = (-0.5, 1.0);
    let b = gbm_bundle(20_000, 100, 5);
    let sol = solve_bsde(&b, &linear(mu, 0.0), &zero(), &RegressionConfig::default()).unwrap();
    let disc: Vec<f64> = b.row(b.steps).iter().map(|x| f64::exp(mu * t) * x).collect();
    let (oracle, se) = (ordered_mean(&disc), stderr(&disc));
    assert!((sol.y0 - oracle).abs() <= 3.0 * se + 0.01, "y0 {} oracle {oracle} se {se}", sol.y0);
}

#[test]
fn solution_is_independent_of_worker_count() {
    let b = gbm_bundle(3000, 20, 2);
    let spec = CubicMonotone::spec(0.3, -0.2, 0.1, AuditBox::new(1, 1, 1))
        .unwrap()
        .with_terminal(Arc::new(|x: &[f64]| x[0]), 1.0)
        .require_audit(512)
        .unwrap();
    let reg = RegressionConfig::default();
    let a = solve_bsde(&b, &spec, &zero(), &reg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let c = pool.install(|| solve_bsde(&b, &spec, &zero(), &reg).unwrap());
    assert!(a.y_paths.iter().zip(&c.y_paths).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.z_paths.iter().zip(&c.z_paths).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(a.y0.to_bits(), c.y0.to_bits());
}

#[test]
fn semigroup_reproduces_full_solve() {
    let b = gbm_bundle(10_000, 40, 3);
    let spec = CubicMonotone::spec(0.3, -0.2, 0.1, AuditBox::new(1, 1, 1))
        .unwrap()
        .with_terminal(Arc::new(|x: &[f64]| x[0]), 1.0)
        .require_audit(512)
        .unwrap();
    let reg = RegressionConfig::default();
    let sol = solve_bsde(&b, &spec, &zero(), &reg).unwrap();
    let k1 = 20;
    let y0s = backward_semigroup(&b, &spec, &zero(), k1, sol.y_row(k1), &reg).unwrap();
    let y0 = ordered_mean(&y0s);
    let noise = sol.y0_stderr.max(stderr(&y0s));
    assert!((y0 - sol.y0).abs() <= 2.0 * noise + 1e-12, "{y0} vs {} (noise {noise})", sol.y0);
}

#[test]
fn terminal_shift_moves_y0_linearly() {
    let b = gbm_bundle(5000, 50, 4);
    let reg = RegressionConfig::default();
    let base = solve_bsde(&b, &linear(-0.5, 0.0), &zero(), &reg).unwrap().y0;
    let ratios: Vec<f64> = [0.1, 0.01]
        .into_iter()
        .map(|eps| (solve_bsde(&b, &linear(-0.5, eps), &zero(), &reg).unwrap().y0 - base).abs() / eps)
        .collect();
    assert!(ratios.iter().all(|c| *c <= 1.0 + 1e-9), "{ratios:?}");
    assert!((ratios[0] - ratios[1]).abs() <= 1e-6 * ratios[0], "{ratios:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn ordered_data_gives_ordered_solutions(
        cubic in 0.0f64..0.5,
        linear in -0.5f64..0.5,
        offset in -0.5f64..0.5,
        df in 0.0f64..0.3,
        dh in 0.0f64..0.3,
        seed in 0u64..1000,
    ) {
        let b = gbm_bundle(2000, 20, seed);
        let bx = AuditBox { x: vec![(0.0, 5.0)], ..AuditBox::new(1, 1, 1) };
        let lo = CubicMonotone::spec(cubic, linear, offset, bx.clone())
            .unwrap()
            .with_terminal(Arc::new(|x: &[f64]| x[0]), 1.0)
            .require_audit(512)
            .unwrap();
        let hi = CubicMonotone::spec(cubic, linear, offset + df, bx)
            .unwrap()
            .with_terminal(Arc::new(move |x: &[f64]| x[0] + dh), 1.0)
            .require_audit(512)
            .unwrap();
        let cfg = ComparisonConfig { steps: Some(vec![0, 10, 19]), ..Default::default() };
        let rep = comparison_check(&b, (&lo, &hi), &zero(), &RegressionConfig::default(), &cfg).unwrap();
        prop_assert!(rep.ordered, "{rep:?}");
    }
}
