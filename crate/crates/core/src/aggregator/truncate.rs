use std::sync::Arc;

use super::{Driver, DriverError, DriverSpec};

/// Radial projection onto `[-m, m]`, with `project(0, m) = 0`.
pub fn project(x: f64, m: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().min(m)
    }
}

/// `f_m = f - f(.,0,.) + project(f(.,0,.), m)`.
#[derive(Clone)]
pub struct Truncated {
    pub parent: Arc<dyn Driver>,
    pub m: f64,
}

impl Driver for Truncated {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> Result<f64, DriverError> {
        let f = self.parent.eval(t, x, y, z, v)?;
        let f0 = self.parent.zero_level(t, x, z, v)?;
        if f0.abs() <= self.m {
            // projection inactive: return f itself, not f - f0 + f0
            Ok(f)
        } else {
            Ok(f - f0 + project(f0, self.m))
        }
    }

    fn dy(&self, t: f64, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> Option<Result<f64, DriverError>> {
        self.parent.dy(t, x, y, z, v)
    }

    fn zero_level(&self, t: f64, x: &[f64], z: &[f64], v: &[f64]) -> Result<f64, DriverError> {
        Ok(project(self.parent.zero_level(t, x, z, v)?, self.m))
    }

    fn z_free(&self) -> bool {
        self.parent.z_free()
    }

    fn describe(&self) -> String {
        format!("truncate[m={}]({})", self.m, self.parent.describe())
    }
}

/// Clips the zero-level of the driver to norm `m`. Differences in `y` are
/// untouched, so the monotonicity and growth constants carry over.
pub fn truncate(spec: &DriverSpec, m: f64) -> DriverSpec {
    let driver = Truncated { parent: spec.driver.clone(), m };
    let mut out = DriverSpec::new(format!("{}|m{}", spec.name, m), Arc::new(driver), spec.constants, spec.audit_box.clone());
    out.terminal = spec.terminal.clone();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::{AuditBox, DriverConstants, FnDriver};

    fn spec_with_zero_level(level: f64) -> DriverSpec {
        let d = FnDriver::new("shifted", true, move |_, _, y, _, _| -y + level);
        DriverSpec::new(
            "shifted",
            Arc::new(d),
            DriverConstants { lambda: 0.0, mu: -1.0, kappa: 1.0, p: 1.0 },
            AuditBox::new(1, 1, 1),
        )
    }

    #[test]
    fn projection_clips_radially() {
        assert_eq!(project(-5.0, 2.0), -2.0);
        assert_eq!(project(5.0, 2.0), 2.0);
        assert_eq!(project(1.5, 2.0), 1.5);
        assert_eq!(project(0.0, 2.0), 0.0);
    }

    #[test]
    fn truncated_zero_level() {
        let s = spec_with_zero_level(-5.0);
        let t = truncate(&s, 2.0);
        assert_eq!(t.f(0.0, &[0.0], 0.0, &[0.0], &[0.0]).unwrap(), -2.0);
        // differences in y are preserved
        let a = t.f(0.0, &[0.0], 1.7, &[0.0], &[0.0]).unwrap() - t.f(0.0, &[0.0], -0.4, &[0.0], &[0.0]).unwrap();
        let b = s.f(0.0, &[0.0], 1.7, &[0.0], &[0.0]).unwrap() - s.f(0.0, &[0.0], -0.4, &[0.0], &[0.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inactive_projection_is_identity() {
        let s = spec_with_zero_level(0.3);
        let t = truncate(&s, 1.0);
        for y in [-4.0, -0.1, 0.0, 2.2] {
            assert_eq!(t.f(0.0, &[0.0], y, &[0.0], &[0.0]).unwrap(), s.f(0.0, &[0.0], y, &[0.0], &[0.0]).unwrap());
        }
        let z = spec_with_zero_level(0.0);
        assert_eq!(truncate(&z, 1.0).f(0.0, &[0.0], 0.0, &[0.0], &[0.0]).unwrap(), 0.0);
    }
}
