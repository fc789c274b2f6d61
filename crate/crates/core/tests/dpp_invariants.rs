use std::sync::Arc;

use rcl_core::aggregator::{AuditBox, DriverConstants, DriverSpec, FnDriver};
use rcl_core::dpp::{brute_force_value, dpp_residual, verify_dpp};
use rcl_core::hjb::{solve_hjb, Axis, Boundary, ControlGrid, SpaceTimeGrid, ValueGrid};
use rcl_core::problem::{ControlProblem, McConfig};
use rcl_core::regression::RegressionConfig;
use rcl_core::sde::{ControlSet, ControlledSDE};

fn problem() -> ControlProblem {
    let set = ControlSet::new(vec![-1.0], vec![1.0]).unwrap();
    let sde = ControlledSDE::arithmetic(0.0, 0.3, 0.5, set).with_domain(vec![(-3.0, 3.0)]);
    let f = FnDriver::new("running cost", true, |_, _, y, _, v| -0.2 * y - 0.5 * v[0] * v[0]).with_dy(|_, _, _, _, _| -0.2);
    let bx = AuditBox { x: vec![(-3.0, 3.0)], v: vec![(-1.0, 1.0)], ..AuditBox::new(1, 1, 1) };
    let c = DriverConstants { lambda: 1.0, mu: -0.2, kappa: 1.0, p: 1.0 };
    let spec = DriverSpec::new("running cost", Arc::new(f), c, bx)
        .with_terminal(Arc::new(|x: &[f64]| x[0].sin()), 1.0)
        .require_audit(1024)
        .unwrap();
    ControlProblem::new("toy", sde, spec)
}

fn mc(seed: u64) -> McConfig {
    McConfig {
        n_paths: 4000,
        steps_per_unit: 100.0,
        seed,
        regression: RegressionConfig::default(),
        tol_factor: 5.0,
        budget: 4096,
    }
}

fn value(p: &ControlProblem, cg: &ControlGrid, nodes: usize) -> ValueGrid {
    let g = SpaceTimeGrid::new(p.horizon(), 1, vec![Axis::new(-3.0, 3.0, nodes)], Boundary::Dirichlet)
        .unwrap()
        .with_cfl_steps(&p.sde, cg, 0.9);
    solve_hjb(&g, &p.sde, &p.spec, cg).unwrap()
}

#[test]
fn value_satisfies_the_sub_inequality() {
    let p = problem();
    let cg = ControlGrid::uniform(p.controls(), &[5]).unwrap();
    let fine = value(&p, &cg, 121);
    let coarse = value(&p, &cg, 61);
    let probes: Vec<(f64, Vec<f64>)> = [-0.5, 0.0, 0.5].into_iter().map(|x| (0.0, vec![x])).collect();
    let rep = verify_dpp(&fine, Some(&coarse), &p, &probes, 0.05, &cg, &mc(1)).unwrap();
    assert!(rep.summary.one_sided_pass, "{rep:?}");
    assert!(rep.summary.pass, "{rep:?}");
}

#[test]
fn brute_force_improves_with_information() {
    let p = problem();
    let coarse = ControlGrid::uniform(p.controls(), &[3]).unwrap();
    let fine = coarse.refined(p.controls()).unwrap();
    let m = mc(2);
    let a = brute_force_value(&p, 0.0, &[0.2], &coarse, 1, &m).unwrap();
    let b = brute_force_value(&p, 0.0, &[0.2], &fine, 1, &m).unwrap();
    let c = brute_force_value(&p, 0.0, &[0.2], &coarse, 2, &m).unwrap();
    let tol = 5.0 * a.stderr.max(1e-12);
    assert!(b.value >= a.value - tol, "{} < {}", b.value, a.value);
    assert!(c.value >= a.value - tol, "{} < {}", c.value, a.value);
}

#[test]
fn half_steps_compose() {
    let p = problem();
    let cg = ControlGrid::uniform(p.controls(), &[5]).unwrap();
    let u = value(&p, &cg, 121);
    let steps = u.grid.time_steps / 5;
    let m = mc(3);
    for x in [-0.5, 0.5] {
        let one = dpp_residual(&u, &p, 0, &[x], steps, &cg, &m).unwrap();
        let half = dpp_residual(&u, &p, 0, &[x], steps / 2, &cg, &m).unwrap();
        let tol = m.tol_factor * one.stderr.max(half.stderr) + 1e-3;
        assert!((one.semigroup - half.semigroup).abs() <= 2.0 * tol, "x={x}: {one:?} vs {half:?}");
    }
}
