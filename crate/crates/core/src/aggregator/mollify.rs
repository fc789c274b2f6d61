use std::sync::Arc;

use super::{Driver, DriverError, DriverSpec};
use crate::quadrature::gauss_legendre;

/// Bump-kernel mollifier with support radius `1/n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MollifierSpec {
    pub n: u32,
    pub quadrature_nodes: usize,
}

impl MollifierSpec {
    pub fn new(n: u32) -> Self {
        Self { n, quadrature_nodes: 64 }
    }
}

/// Discretised kernel: offsets `a_i` in `[-1/n, 1/n]` and weights
/// `w_i * rho_n(a_i)` that sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub n: u32,
    pub offsets: Vec<f64>,
    pub weights: Vec<f64>,
    /// Normalising constant `c_n` of `rho_n(a) = c_n exp(-1/(1-(na)^2))`.
    pub norm: f64,
}

fn bump(s: f64) -> f64 {
    // s = (n a)^2 in [0, 1)
    if s >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - s)).exp()
    }
}

impl Kernel {
    pub fn new(spec: MollifierSpec) -> Result<Self, DriverError> {
        if spec.n == 0 || spec.quadrature_nodes == 0 {
            return Err(DriverError::InvalidParameter("mollifier needs n >= 1 and at least one node".into()));
        }
        let (nodes, w) = gauss_legendre(spec.quadrature_nodes);
        let r = 1.0 / spec.n as f64;
        let offsets: Vec<f64> = nodes.iter().map(|u| u * r).collect();
        // int_{-r}^{r} g(a) da = r * sum w_i g(r u_i); bump depends on u^2 only
        let raw: Vec<f64> = nodes.iter().zip(&w).map(|(u, wi)| wi * r * bump(u * u)).collect();
        let mass: f64 = raw.iter().sum();
        let norm = 1.0 / mass;
        let weights = raw.iter().map(|x| x * norm).collect();
        Ok(Self { n: spec.n, offsets, weights, norm })
    }

    pub fn radius(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// `rho_n(a)`.
    pub fn density(&self, a: f64) -> f64 {
        let s = a * self.n as f64;
        self.norm * bump(s * s)
    }

    /// Quadrature of `int rho_n`.
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// `f_n(t,x,y,v) = int f(t,x,y-a,v) rho_n(a) da`.
#[derive(Clone)]
pub struct Mollified {
    pub parent: Arc<dyn Driver>,
    pub kernel: Kernel,
}

impl Driver for Mollified {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> Result<f64, DriverError> {
        let mut acc = 0.0;
        for (a, w) in self.kernel.offsets.iter().zip(&self.kernel.weights) {
            acc += w * self.parent.eval(t, x, y - a, z, v)?;
        }
        Ok(acc)
    }

    fn dy(&self, t: f64, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> Option<Result<f64, DriverError>> {
        let mut acc = 0.0;
        for (a, w) in self.kernel.offsets.iter().zip(&self.kernel.weights) {
            match self.parent.dy(t, x, y - a, z, v)? {
                Ok(d) => acc += w * d,
                Err(e) => return Some(Err(e)),
            }
        }
        Some(Ok(acc))
    }

    fn z_free(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        format!("mollify[n={}]({})", self.kernel.n, self.parent.describe())
    }
}

/// Mollifies a z-free driver in `y`. The result is unaudited; `mu` carries
/// over and `kappa` is widened to cover the kernel support.
pub fn mollify(spec: &DriverSpec, moll: MollifierSpec) -> Result<DriverSpec, DriverError> {
    if !spec.z_free() {
        return Err(DriverError::ZNotSupported);
    }
    let kernel = Kernel::new(moll)?;
    let mut c = spec.constants;
    c.kappa *= 3.0 + 2f64.powf(c.p - 1.0);
    let driver = Mollified { parent: spec.driver.clone(), kernel };
    let mut out = DriverSpec::new(format!("{}~n{}", spec.name, moll.n), Arc::new(driver), c, spec.audit_box.clone());
    out.terminal = spec.terminal.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::{AbsDriver, AuditBox, FnDriver, LinearDriver};

    #[test]
    fn kernel_is_even_with_unit_mass() {
        for n in [1, 4, 16, 64] {
            let k = Kernel::new(MollifierSpec::new(n)).unwrap();
            assert!((k.mass() - 1.0).abs() < 1e-10);
            let m = k.offsets.len();
            for i in 0..m {
                assert_eq!(k.offsets[i], -k.offsets[m - 1 - i]);
                assert_eq!(k.weights[i], k.weights[m - 1 - i]);
                assert!(k.offsets[i].abs() < 1.0 / n as f64);
            }
            assert_eq!(k.density(1.0 / n as f64), 0.0);
        }
    }

    #[test]
    fn constants_and_lines_are_fixed_points() {
        let bx = AuditBox::new(1, 1, 1);
        let c = LinearDriver::spec(0.0, 2.5, bx.clone());
        let cn = mollify(&c, MollifierSpec::new(4)).unwrap();
        for y in [-3.0, 0.0, 0.7] {
            assert!((cn.f(0.0, &[0.0], y, &[0.0], &[0.0]).unwrap() - 2.5).abs() < 1e-14);
        }
        let l = LinearDriver::spec(-1.3, 0.2, bx);
        let ln = mollify(&l, MollifierSpec::new(4)).unwrap();
        for y in [-3.0, 0.0, 0.7, 4.9] {
            let a = ln.f(0.0, &[0.0], y, &[0.0], &[0.0]).unwrap();
            let b = l.f(0.0, &[0.0], y, &[0.0], &[0.0]).unwrap();
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn abs_at_zero_is_first_absolute_moment() {
        let s = AbsDriver::spec(1.0, AuditBox::new(1, 1, 1));
        for n in [4u32, 16, 64] {
            let sn = mollify(&s, MollifierSpec::new(n)).unwrap();
            let v = sn.f(0.0, &[0.0], 0.0, &[0.0], &[0.0]).unwrap();
            assert!(v > 0.0 && v <= 1.0 / n as f64);
        }
    }

    #[test]
    fn z_dependent_driver_is_rejected() {
        let d = FnDriver::new("zdep", false, |_, _, y, z, _| y + z[0]);
        let s = DriverSpec::new(
            "zdep",
            Arc::new(d),
            crate::aggregator::DriverConstants { lambda: 1.0, mu: 1.0, kappa: 1.0, p: 1.0 },
            AuditBox::new(1, 1, 1),
        );
        assert!(matches!(mollify(&s, MollifierSpec::new(2)), Err(DriverError::ZNotSupported)));
    }
}
