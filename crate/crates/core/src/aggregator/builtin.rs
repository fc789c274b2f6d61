use std::sync::Arc;

use super::{AuditBox, Driver, DriverConstants, DriverError, DriverSpec};

/// `f = coef * y + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDriver {
    pub coef: f64,
    pub offset: f64,
}

impl LinearDriver {
    pub fn spec(coef: f64, offset: f64, audit_box: AuditBox) -> DriverSpec {
        let c = DriverConstants { lambda: 0.0, mu: coef, kappa: coef.abs(), p: 1.0 };
        DriverSpec::new("linear", Arc::new(Self { coef, offset }), c, audit_box)
    }
}

impl Driver for LinearDriver {
    fn eval(&self, _t: f64, _x: &[f64], y: f64, _z: &[f64], _v: &[f64]) -> Result<f64, DriverError> {
        Ok(self.coef * y + self.offset)
    }
    fn dy(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &[f64]) -> Option<Result<f64, DriverError>> {
        Some(Ok(self.coef))
    }
    fn z_free(&self) -> bool {
        true
    }
    fn describe(&self) -> String {
        format!("{} * y + {}", self.coef, self.offset)
    }
}

/// `f = -cubic * y^3 + linear * y + offset` with `cubic >= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubicMonotone {
    pub cubic: f64,
    pub linear: f64,
    pub offset: f64,
}

impl CubicMonotone {
    pub fn spec(cubic: f64, linear: f64, offset: f64, audit_box: AuditBox) -> Result<DriverSpec, DriverError> {
        if cubic < 0.0 {
            return Err(DriverError::InvalidParameter("cubic coefficient must be non-negative".into()));
        }
        let c = DriverConstants { lambda: 0.0, mu: linear, kappa: cubic + linear.abs(), p: 3.0 };
        Ok(DriverSpec::new("cubic_monotone", Arc::new(Self { cubic, linear, offset }), c, audit_box))
    }
}

impl Driver for CubicMonotone {
    fn eval(&self, _t: f64, _x: &[f64], y: f64, _z: &[f64], _v: &[f64]) -> Result<f64, DriverError> {
        Ok(-self.cubic * y * y * y + self.linear * y + self.offset)
    }
    fn dy(&self, _: f64, _: &[f64], y: f64, _: &[f64], _: &[f64]) -> Option<Result<f64, DriverError>> {
        Some(Ok(-3.0 * self.cubic * y * y + self.linear))
    }
    fn z_free(&self) -> bool {
        true
    }
    fn describe(&self) -> String {
        format!("-{} * y^3 + {} * y + {}", self.cubic, self.linear, self.offset)
    }
}

/// `f = scale * |y|`: monotone with `mu = |scale|`, not differentiable at 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AbsDriver {
    pub scale: f64,
}

impl AbsDriver {
    pub fn spec(scale: f64, audit_box: AuditBox) -> DriverSpec {
        let s = scale.abs();
        let c = DriverConstants { lambda: 0.0, mu: s, kappa: s, p: 1.0 };
        DriverSpec::new("abs", Arc::new(Self { scale }), c, audit_box)
    }
}

impl Driver for AbsDriver {
    fn eval(&self, _t: f64, _x: &[f64], y: f64, _z: &[f64], _v: &[f64]) -> Result<f64, DriverError> {
        Ok(self.scale * y.abs())
    }
    fn z_free(&self) -> bool {
        true
    }
    fn describe(&self) -> String {
        format!("{} * |y|", self.scale)
    }
}

/// `f = scale * y^2`. Not one-sided Lipschitz on the real line; the declared
/// `mu = 0` is wrong on purpose so that audits have something to catch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticDriver {
    pub scale: f64,
}

impl QuadraticDriver {
    pub fn spec(scale: f64, audit_box: AuditBox) -> DriverSpec {
        let c = DriverConstants { lambda: 0.0, mu: 0.0, kappa: scale.abs(), p: 2.0 };
        DriverSpec::new("quadratic", Arc::new(Self { scale }), c, audit_box)
    }
}

impl Driver for QuadraticDriver {
    fn eval(&self, _t: f64, _x: &[f64], y: f64, _z: &[f64], _v: &[f64]) -> Result<f64, DriverError> {
        Ok(self.scale * y * y)
    }
    fn dy(&self, _: f64, _: &[f64], y: f64, _: &[f64], _: &[f64]) -> Option<Result<f64, DriverError>> {
        Some(Ok(2.0 * self.scale * y))
    }
    fn z_free(&self) -> bool {
        true
    }
    fn describe(&self) -> String {
        format!("{} * y^2", self.scale)
    }
}

type DriverClosure = dyn Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync;

/// Driver from a closure.
#[derive(Clone)]
pub struct FnDriver {
    name: String,
    z_free: bool,
    f: Arc<DriverClosure>,
    dy: Option<Arc<DriverClosure>>,
}

impl FnDriver {
    pub fn new<F>(name: impl Into<String>, z_free: bool, f: F) -> Self
    where
        F: Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        Self { name: name.into(), z_free, f: Arc::new(f), dy: None }
    }

    pub fn with_dy<F>(mut self, dy: F) -> Self
    where
        F: Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.dy = Some(Arc::new(dy));
        self
    }
}

impl Driver for FnDriver {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> Result<f64, DriverError> {
        Ok((self.f)(t, x, y, z, v))
    }
    fn dy(&self, t: f64, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> Option<Result<f64, DriverError>> {
        self.dy.as_ref().map(|d| Ok(d(t, x, y, z, v)))
    }
    fn z_free(&self) -> bool {
        self.z_free
    }
    fn describe(&self) -> String {
        self.name.clone()
    }
}
