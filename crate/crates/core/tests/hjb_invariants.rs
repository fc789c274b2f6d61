use std::sync::Arc;

use proptest::prelude::*;
use rcl_core::aggregator::{AbsDriver, AuditBox, CubicMonotone, DriverSpec};
use rcl_core::hjb::{convergence_study, solve_hjb, Axis, Boundary, ControlGrid, SpaceTimeGrid};
use rcl_core::sde::{ControlSet, ControlledSDE};

fn controlled() -> ControlledSDE {
    ControlledSDE::arithmetic(0.0, 0.4, 0.5, ControlSet::new(vec![-1.0], vec![1.0]).unwrap())
}

fn spec_with(h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> DriverSpec {
    let bx = AuditBox { x: vec![(-2.0, 2.0)], v: vec![(-1.0, 1.0)], ..AuditBox::new(1, 1, 1) };
    CubicMonotone::spec(0.2, -0.3, 0.1, bx).unwrap().with_terminal(Arc::new(h), 2.0).require_audit(512).unwrap()
}

fn grid(sde: &ControlledSDE, cg: &ControlGrid, nodes: usize) -> SpaceTimeGrid {
    SpaceTimeGrid::new(sde.horizon, 1, vec![Axis::new(-2.0, 2.0, nodes)], Boundary::Dirichlet)
        .unwrap()
        .with_cfl_steps(sde, cg, 0.9)
}

#[test]
fn terminal_layer_is_exact() {
    let sde = controlled();
    let cg = ControlGrid::uniform(&sde.controls, &[5]).unwrap();
    let spec = spec_with(|x| x[0].sin());
    let g = grid(&sde, &cg, 41);
    let u = solve_hjb(&g, &sde, &spec, &cg).unwrap();
    for node in 0..g.n_nodes() {
        assert_eq!(u.value(g.time_steps, node).to_bits(), spec.h(&g.node_x(node)).to_bits());
    }
}

#[test]
fn hamiltonian_gap_is_bounded_by_driver_gap() {
    let sde = ControlledSDE::arithmetic(0.0, 0.4, 0.5, ControlSet::new(vec![-1.0], vec![1.0]).unwrap());
    let cg = ControlGrid::uniform(&sde.controls, &[5]).unwrap();
    let bx = AuditBox { y: (-1.0, 1.0), x: vec![(-2.0, 2.0)], v: vec![(-1.0, 1.0)], ..AuditBox::new(1, 1, 1) };
    let spec = AbsDriver::spec(1.0, bx)
        .with_terminal(Arc::new(|x: &[f64]| x[0].abs().min(1.0)), 1.0)
        .require_audit(512)
        .unwrap();
    let g = grid(&sde, &cg, 41);
    let table = convergence_study(&g, &sde, &spec, &[4, 16], &cg, 64, 512).unwrap();
    assert!(table.rows.iter().all(|r| r.bound_holds), "{table:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ordered_terminals_give_ordered_values(a in -1.0f64..1.0, bump in 0.0f64..0.5, centre in -1.5f64..1.5) {
        let sde = controlled();
        let cg = ControlGrid::uniform(&sde.controls, &[5]).unwrap();
        let lo = spec_with(move |x| a * x[0].sin());
        let hi = spec_with(move |x| a * x[0].sin() + bump * f64::exp(-(x[0] - centre).powi(2)));
        let g = grid(&sde, &cg, 31);
        let u1 = solve_hjb(&g, &sde, &lo, &cg).unwrap();
        let u2 = solve_hjb(&g, &sde, &hi, &cg).unwrap();
        for k in 0..=g.time_steps {
            for (p, q) in u1.layer(k).iter().zip(u2.layer(k)) {
                prop_assert!(p <= q, "layer {k}: {p} > {q}");
            }
        }
    }
}
