use rcl_core::aggregator::EZParams;
use rcl_core::bsde::solve_bsde;
use rcl_core::ez::{build_problem, EzProblem, MarketSpec};
use rcl_core::hjb::{solve_hjb, Axis, Boundary, ControlGrid, SpaceTimeGrid};
use rcl_core::regression::RegressionConfig;
use rcl_core::sde::{simulate_paths, ControlPolicy};

fn case_one() -> EzProblem {
    let m = MarketSpec::constant(0.02, 0.05, 0.2, 1.0, 0.01, 1.0, 1.0);
    build_problem(&m, EZParams::new(0.1, 2.0, 2.0).unwrap()).unwrap()
}

#[test]
fn utility_stays_in_its_domain() {
    let ez = case_one();
    for pol in [vec![0.0, 0.01], vec![1.0, 0.5], vec![-1.0, 1.0]] {
        let pol = ControlPolicy::Constant(pol);
        let b = simulate_paths(&ez.problem.sde, &pol, 0.0, &[1.0], 50, 4000, 1).unwrap();
        let sol = solve_bsde(&b, &ez.problem.spec, &pol, &RegressionConfig::default()).unwrap();
        assert!(sol.y_paths.iter().all(|y| *y < 0.0), "{pol:?}");
        assert!(b.paths.iter().all(|x| *x > 0.0), "{pol:?}");
    }
}

#[test]
fn value_is_non_decreasing_in_wealth() {
    let ez = case_one();
    let p = &ez.problem;
    let cg = ControlGrid::uniform(p.controls(), &[5, 5]).unwrap();
    let axis = Axis::new(ez.market.x_floor(), ez.market.x_max(), 61);
    let g = SpaceTimeGrid::new(p.horizon(), 1, vec![axis], Boundary::Extrapolate)
        .unwrap()
        .with_cfl_steps(&p.sde, &cg, 0.9);
    let u = solve_hjb(&g, &p.sde, &p.spec, &cg).unwrap();
    for k in [0, g.time_steps / 2, g.time_steps] {
        let layer = u.layer(k);
        assert!(layer.windows(2).all(|w| w[1] >= w[0]), "layer {k}");
        assert!(layer.iter().all(|v| *v < 0.0), "layer {k}");
    }
}
