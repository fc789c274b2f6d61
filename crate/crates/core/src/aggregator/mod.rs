//! BSDE drivers (aggregators): evaluation, sample audits of the structural
//! conditions, mollification in `y`, zero-level truncation and the
//! Epstein-Zin aggregator.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::rng::Halton;

mod builtin;
mod epstein_zin;
mod mollify;
mod truncate;

pub use builtin::{AbsDriver, CubicMonotone, FnDriver, LinearDriver, QuadraticDriver};
pub use epstein_zin::{
    classify_regime, consumption_regularity, epstein_zin_driver, ConsumptionRegularity, EZParams, EpsteinZin, Regime,
};
pub use mollify::{mollify, Kernel, MollifierSpec, Mollified};
pub use truncate::{project, truncate, Truncated};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DriverError {
    #[error("non-finite driver value at {point}")]
    Evaluation { point: String },
    #[error("utility {y} outside the aggregator domain: {detail}")]
    DomainViolation { y: f64, detail: String },
    #[error("mollification in y requires a z-free driver")]
    ZNotSupported,
    #[error("unsupported Epstein-Zin regime (gamma={gamma}, psi={psi}, consumption floor {a1:?})")]
    UnsupportedRegime { gamma: f64, psi: f64, a1: Option<f64> },
    #[error("gamma={gamma}, psi={psi} outside the model (both must be positive and different from 1)")]
    OutOfModel { gamma: f64, psi: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("condition audit failed: {condition} violated at {count} sample(s)")]
    ConditionAuditFailed { condition: Condition, count: usize },
}

/// Driver `f(t, x, y, z, v)` of a scalar BSDE.
pub trait Driver: Send + Sync {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> Result<f64, DriverError>;

    /// Analytic `df/dy`, when the driver has one.
    fn dy(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], _v: &[f64]) -> Option<Result<f64, DriverError>> {
        None
    }

    /// `f(t, x, 0, z, v)`. Drivers whose domain excludes `y = 0` return the
    /// continuous extension.
    fn zero_level(&self, t: f64, x: &[f64], z: &[f64], v: &[f64]) -> Result<f64, DriverError> {
        self.eval(t, x, 0.0, z, v)
    }

    fn z_free(&self) -> bool;

    fn describe(&self) -> String;
}

pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Declared constants of the growth and monotonicity conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DriverConstants {
    /// Lipschitz constant in `x` and `z` (and of `h`).
    pub lambda: f64,
    /// One-sided monotonicity constant in `y`.
    pub mu: f64,
    pub kappa: f64,
    pub p: f64,
}

/// Box on which a driver is audited and compared.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditBox {
    pub t: (f64, f64),
    pub x: Vec<(f64, f64)>,
    pub y: (f64, f64),
    pub z: Vec<(f64, f64)>,
    pub v: Vec<(f64, f64)>,
}

impl AuditBox {
    pub fn new(n: usize, d: usize, m: usize) -> Self {
        Self { t: (0.0, 1.0), x: vec![(-5.0, 5.0); n], y: (-5.0, 5.0), z: vec![(-1.0, 1.0); d], v: vec![(0.0, 0.0); m] }
    }
}

#[derive(Clone)]
pub struct DriverSpec {
    pub name: String,
    pub driver: Arc<dyn Driver>,
    pub terminal: TerminalFn,
    pub constants: DriverConstants,
    pub audit_box: AuditBox,
    audited: bool,
}

impl fmt::Debug for DriverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverSpec")
            .field("name", &self.name)
            .field("driver", &self.driver.describe())
            .field("constants", &self.constants)
            .field("audit_box", &self.audit_box)
            .field("audited", &self.audited)
            .finish_non_exhaustive()
    }
}

impl DriverSpec {
    /// Unaudited spec with terminal `h = 0`.
    pub fn new(name: impl Into<String>, driver: Arc<dyn Driver>, constants: DriverConstants, audit_box: AuditBox) -> Self {
        Self { name: name.into(), driver, terminal: Arc::new(|_| 0.0), constants, audit_box, audited: false }
    }

    /// Replaces the terminal map; `lipschitz` raises the declared lambda if larger.
    pub fn with_terminal(mut self, h: TerminalFn, lipschitz: f64) -> Self {
        self.terminal = h;
        self.constants.lambda = self.constants.lambda.max(lipschitz);
        self.audited = false;
        self
    }

    pub fn with_audit_box(mut self, b: AuditBox) -> Self {
        self.audit_box = b;
        self.audited = false;
        self
    }

    pub fn with_constants(mut self, c: DriverConstants) -> Self {
        self.constants = c;
        self.audited = false;
        self
    }

    pub fn is_audited(&self) -> bool {
        self.audited
    }

    pub fn z_free(&self) -> bool {
        self.driver.z_free()
    }

    #[inline]
    pub fn f(&self, t: f64, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> Result<f64, DriverError> {
        self.driver.eval(t, x, y, z, v)
    }

    #[inline]
    pub fn h(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    /// Positive part of the declared monotonicity constant.
    pub fn mu_plus(&self) -> f64 {
        self.constants.mu.max(0.0)
    }

    /// Runs [`audit_conditions`] and fails with the first violated condition.
    pub fn require_audit(mut self, budget: usize) -> Result<Self, DriverError> {
        let rep = audit_conditions(&mut self, budget)?;
        if let Some(v) = rep.violations.first() {
            let count = rep.violations.iter().filter(|w| w.condition == v.condition).count();
            return Err(DriverError::ConditionAuditFailed { condition: v.condition, count });
        }
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Condition {
    /// Lipschitz in `x` and `z`, and Lipschitz terminal.
    Lipschitz,
    /// One-sided monotonicity in `y`.
    Monotonicity,
    /// Polynomial growth in `y`.
    Growth,
    /// Declared z-free but depends on `z`.
    ZFree,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Lipschitz => "lipschitz",
            Self::Monotonicity => "monotonicity",
            Self::Growth => "growth",
            Self::ZFree => "z-free",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub condition: Condition,
    pub t: f64,
    pub x: Vec<f64>,
    pub y: f64,
    pub y_alt: f64,
    pub v: Vec<f64>,
    pub observed: f64,
    pub declared: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub lambda_hat: f64,
    pub mu_hat: f64,
    pub kappa_hat: f64,
    pub p_hat: f64,
    pub samples: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

const REL_SLACK: f64 = 1e-9;

fn exceeds(observed: f64, declared: f64) -> bool {
    observed > declared + REL_SLACK * declared.abs().max(1.0)
}

fn lerp((lo, hi): (f64, f64), u: f64) -> f64 {
    lo + (hi - lo) * u
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn checked(val: f64, t: f64, x: &[f64], y: f64, v: &[f64]) -> Result<f64, DriverError> {
    if val.is_finite() {
        Ok(val)
    } else {
        Err(DriverError::Evaluation { point: format!("t={t}, x={x:?}, y={y}, v={v:?}") })
    }
}

/// Sample-based audit of the Lipschitz, monotonicity and growth conditions
/// over the spec's audit box. Marks the spec audited iff nothing is violated.
pub fn audit_conditions(spec: &mut DriverSpec, sample_budget: usize) -> Result<AuditReport, DriverError> {
    let b = spec.audit_box.clone();
    let (n, d, m) = (b.x.len(), b.z.len(), b.v.len());
    let halton = Halton::new(1 + 2 * n + 2 + 2 * d + m);
    let mut p = vec![0.0; halton.dim()];
    let (mut x, mut xp) = (vec![0.0; n], vec![0.0; n]);
    let (mut z, mut zp) = (vec![0.0; d], vec![0.0; d]);
    let mut v = vec![0.0; m];
    let c = spec.constants;
    let mut rep = AuditReport {
        lambda_hat: 0.0,
        mu_hat: f64::NEG_INFINITY,
        kappa_hat: 0.0,
        p_hat: c.p,
        samples: sample_budget,
        violations: Vec::new(),
    };
    let mut growth = Vec::new();
    for i in 0..sample_budget {
        halton.point(i, &mut p);
        let mut k = 0;
        let mut next = |r: (f64, f64)| {
            let val = lerp(r, p[k]);
            k += 1;
            val
        };
        let t = next(b.t);
        x.iter_mut().zip(&b.x).for_each(|(o, r)| *o = next(*r));
        xp.iter_mut().zip(&b.x).for_each(|(o, r)| *o = next(*r));
        let y = next(b.y);
        let yp = next(b.y);
        z.iter_mut().zip(&b.z).for_each(|(o, r)| *o = next(*r));
        zp.iter_mut().zip(&b.z).for_each(|(o, r)| *o = next(*r));
        v.iter_mut().zip(&b.v).for_each(|(o, r)| *o = next(*r));

        let f_y = checked(spec.f(t, &x, y, &z, &v)?, t, &x, y, &v)?;
        let f_yp = checked(spec.f(t, &x, yp, &z, &v)?, t, &x, yp, &v)?;
        let viol = |cond, observed, declared, y_alt| Violation {
            condition: cond,
            t,
            x: x.clone(),
            y,
            y_alt,
            v: v.clone(),
            observed,
            declared,
        };

        // x and z
        let f_xz = checked(spec.f(t, &xp, y, &zp, &v)?, t, &xp, y, &v)?;
        let denom = dist(&x, &xp) + dist(&z, &zp);
        if denom > 1e-12 {
            let q = ((spec.h(&x) - spec.h(&xp)).abs() + (f_y - f_xz).abs()) / denom;
            rep.lambda_hat = rep.lambda_hat.max(q);
            if exceeds(q, c.lambda) {
                rep.violations.push(viol(Condition::Lipschitz, q, c.lambda, y));
            }
        }
        if spec.z_free() && d > 0 {
            let f_z = checked(spec.f(t, &x, y, &zp, &v)?, t, &x, y, &v)?;
            if f_z != f_y {
                rep.violations.push(viol(Condition::ZFree, (f_z - f_y).abs(), 0.0, y));
            }
        }

        // monotonicity in y
        if (y - yp).abs() > 1e-12 {
            let q = (y - yp) * (f_y - f_yp) / ((y - yp) * (y - yp));
            rep.mu_hat = rep.mu_hat.max(q);
            if exceeds(q, c.mu) {
                rep.violations.push(viol(Condition::Monotonicity, q, c.mu, yp));
            }
        }

        // growth in y
        let f0 = checked(spec.driver.zero_level(t, &x, &z, &v)?, t, &x, 0.0, &v)?;
        let gap = (f_y - f0).abs();
        let q = gap / (1.0 + y.abs().powf(c.p));
        rep.kappa_hat = rep.kappa_hat.max(q);
        if exceeds(q, c.kappa) {
            rep.violations.push(viol(Condition::Growth, q, c.kappa, 0.0));
        }
        if y.abs() >= 1.0 && gap > 0.0 {
            growth.push((y.abs().ln(), gap.ln()));
        }
    }
    if growth.len() >= 2 {
        let k = growth.len() as f64;
        let mx = growth.iter().map(|g| g.0).sum::<f64>() / k;
        let my = growth.iter().map(|g| g.1).sum::<f64>() / k;
        let sxx: f64 = growth.iter().map(|g| (g.0 - mx).powi(2)).sum();
        let sxy: f64 = growth.iter().map(|g| (g.0 - mx) * (g.1 - my)).sum();
        if sxx > 1e-12 {
            rep.p_hat = sxy / sxx;
        }
    }
    spec.audited = rep.violations.is_empty();
    Ok(rep)
}

/// Axis values: `count` uniform points on `r`, or the midpoint when degenerate.
fn axis(r: (f64, f64), count: usize) -> Vec<f64> {
    if count <= 1 || r.0 == r.1 {
        return vec![0.5 * (r.0 + r.1)];
    }
    (0..count).map(|i| lerp(r, i as f64 / (count - 1) as f64)).collect()
}

/// Sup of `|f_a - f_b|` over a tensor grid on `bx`: `grid_density` points on
/// the `y` axis and `min(grid_density, 5)` on every other axis (`z` is held at
/// its box midpoint when both drivers are z-free).
pub fn uniform_gap(a: &DriverSpec, b: &DriverSpec, bx: &AuditBox, grid_density: usize) -> Result<f64, DriverError> {
    let aux = grid_density.clamp(1, 5);
    let mut axes: Vec<Vec<f64>> = vec![axis(bx.t, aux)];
    axes.extend(bx.x.iter().map(|r| axis(*r, aux)));
    let z_count = if a.z_free() && b.z_free() { 1 } else { aux };
    axes.extend(bx.z.iter().map(|r| axis(*r, z_count)));
    axes.extend(bx.v.iter().map(|r| axis(*r, aux)));
    let ys = axis(bx.y, grid_density.max(1));
    let (n, d) = (bx.x.len(), bx.z.len());
    let total: usize = axes.iter().map(Vec::len).product();
    let mut idx = vec![0usize; axes.len()];
    let mut pt = vec![0.0; axes.len()];
    let mut sup = 0.0f64;
    for flat in 0..total {
        let mut rem = flat;
        for (k, ax) in axes.iter().enumerate() {
            idx[k] = rem % ax.len();
            rem /= ax.len();
            pt[k] = ax[idx[k]];
        }
        let t = pt[0];
        let x = &pt[1..1 + n];
        let z = &pt[1 + n..1 + n + d];
        let v = &pt[1 + n + d..];
        for &y in &ys {
            let fa = a.f(t, x, y, z, v)?;
            let fb = b.f(t, x, y, z, v)?;
            sup = sup.max((fa - fb).abs());
        }
    }
    Ok(sup)
}
