use proptest::prelude::*;
use rcl_core::aggregator::{
    audit_conditions, mollify, project, truncate, uniform_gap, AbsDriver, AuditBox, CubicMonotone, Kernel,
    MollifierSpec,
};

fn scalar_box(y: (f64, f64)) -> AuditBox {
    AuditBox { y, ..AuditBox::new(1, 1, 1) }
}

#[test]
fn mollified_abs_gap_shrinks_with_n() {
    let spec = AbsDriver::spec(1.0, scalar_box((-1.0, 1.0)));
    let bx = scalar_box((-1.0, 1.0));
    let gaps: Vec<f64> = [2, 4, 8, 16, 32, 64]
        .into_iter()
        .map(|n| uniform_gap(&spec, &mollify(&spec, MollifierSpec::new(n)).unwrap(), &bx, 201).unwrap())
        .collect();
    for (w, n) in gaps.windows(2).zip([4.0, 8.0, 16.0, 32.0, 64.0]) {
        assert!(w[1] <= w[0], "{gaps:?}");
        assert!(w[1] <= 1.0 / n, "{gaps:?}");
    }
}

#[test]
fn mollified_cubic_has_finite_audited_lipschitz() {
    let bx = scalar_box((-2.0, 2.0));
    let spec = CubicMonotone::spec(1.0, 0.5, 0.2, bx).unwrap();
    for n in [4, 16] {
        let mut m = mollify(&spec, MollifierSpec::new(n)).unwrap();
        let rep = audit_conditions(&mut m, 2048).unwrap();
        assert!(rep.lambda_hat.is_finite() && rep.kappa_hat.is_finite(), "n={n}: {rep:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kernel_is_symmetric_with_unit_mass(n in 1u32..200) {
        let k = Kernel::new(MollifierSpec::new(n)).unwrap();
        prop_assert!((k.mass() - 1.0).abs() <= 1e-10);
        let m = k.offsets.len();
        for i in 0..m {
            prop_assert_eq!(k.offsets[i], -k.offsets[m - 1 - i]);
            prop_assert_eq!(k.weights[i].to_bits(), k.weights[m - 1 - i].to_bits());
            prop_assert_eq!(k.density(k.offsets[i]).to_bits(), k.density(-k.offsets[i]).to_bits());
        }
    }

    #[test]
    fn truncation_keeps_y_differences(offset in -10.0f64..10.0, m in 0.1f64..5.0, y in -2.0f64..2.0, y2 in -2.0f64..2.0) {
        let spec = CubicMonotone::spec(0.5, -0.3, offset, scalar_box((-2.0, 2.0))).unwrap();
        let t = truncate(&spec, m);
        let (x, z, v) = ([0.0], [0.0], [0.0]);
        let d = spec.f(0.3, &x, y, &z, &v).unwrap() - spec.f(0.3, &x, y2, &z, &v).unwrap();
        let dm = t.f(0.3, &x, y, &z, &v).unwrap() - t.f(0.3, &x, y2, &z, &v).unwrap();
        prop_assert!((d - dm).abs() <= 1e-12 * (1.0 + d.abs()) + f64::EPSILON * offset.abs() * 4.0);
        prop_assert!(t.driver.zero_level(0.3, &x, &z, &v).unwrap().abs() <= m);
    }

    #[test]
    fn mollification_keeps_monotonicity(cubic in 0.0f64..2.0, linear in -1.0f64..1.0, n in 2u32..64) {
        let bx = scalar_box((-1.5, 1.5));
        let mut spec = CubicMonotone::spec(cubic, linear, 0.0, bx).unwrap();
        let base = audit_conditions(&mut spec, 1024).unwrap();
        let mut m = mollify(&spec, MollifierSpec::new(n)).unwrap();
        let moll = audit_conditions(&mut m, 1024).unwrap();
        prop_assert!(moll.mu_hat <= base.mu_hat + 1e-8, "{} > {}", moll.mu_hat, base.mu_hat);
    }

    #[test]
    fn projection_is_radial(x in -100.0f64..100.0, m in 0.0f64..50.0) {
        let p = project(x, m);
        prop_assert!(p.abs() <= m);
        prop_assert!(p == 0.0 || p.signum() == x.signum());
        if x.abs() <= m {
            prop_assert_eq!(p, x);
        }
    }
}
