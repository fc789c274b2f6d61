use std::sync::Arc;

use serde::Serialize;

use super::{AuditBox, Driver, DriverConstants, DriverError, DriverSpec};

/// Preference parameters: time preference `delta`, relative risk aversion
/// `gamma`, elasticity of intertemporal substitution `psi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EZParams {
    pub delta: f64,
    pub gamma: f64,
    pub psi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Regime {
    /// `gamma > 1` and `psi > 1`; utilities are negative.
    CaseI,
    /// `gamma < 1` and `psi < 1`; utilities are positive.
    CaseII,
    Unsupported,
}

/// Regularity of the aggregator in consumption on `[a1, a2]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ConsumptionRegularity {
    Lipschitz,
    ContinuousNotLipschitz,
    /// `c^(1-1/psi)` blows up at `c = 0`.
    Unbounded,
}

pub fn classify_regime(p: &EZParams) -> Result<Regime, DriverError> {
    if !(p.gamma > 0.0 && p.psi > 0.0) || p.gamma == 1.0 || p.psi == 1.0 {
        return Err(DriverError::OutOfModel { gamma: p.gamma, psi: p.psi });
    }
    Ok(if p.gamma > 1.0 && p.psi > 1.0 {
        Regime::CaseI
    } else if p.gamma < 1.0 && p.psi < 1.0 {
        Regime::CaseII
    } else {
        Regime::Unsupported
    })
}

/// With a positive consumption floor both regimes are Lipschitz in `c`; at
/// `a1 = 0` only case (i) stays continuous.
pub fn consumption_regularity(regime: Regime, a1: f64) -> ConsumptionRegularity {
    match (regime, a1 > 0.0) {
        (_, true) => ConsumptionRegularity::Lipschitz,
        (Regime::CaseI, false) => ConsumptionRegularity::ContinuousNotLipschitz,
        _ => ConsumptionRegularity::Unbounded,
    }
}

impl EZParams {
    pub fn new(delta: f64, gamma: f64, psi: f64) -> Result<Self, DriverError> {
        let p = Self { delta, gamma, psi };
        if !(delta > 0.0) {
            return Err(DriverError::InvalidParameter(format!("delta must be positive, got {delta}")));
        }
        match classify_regime(&p)? {
            Regime::Unsupported => Err(DriverError::UnsupportedRegime { gamma, psi, a1: None }),
            _ => Ok(p),
        }
    }

    /// `1 - 1/psi`.
    pub fn alpha(&self) -> f64 {
        1.0 - 1.0 / self.psi
    }

    /// Exponent of `(1-gamma)u` after expanding the aggregator.
    pub fn theta(&self) -> f64 {
        1.0 - self.alpha() / (1.0 - self.gamma)
    }

    /// `delta / (1 - 1/psi)`.
    pub fn scale(&self) -> f64 {
        self.delta / self.alpha()
    }

    /// Sup of `df/du` on the admissible half-line.
    pub fn monotonicity_constant(&self) -> f64 {
        self.delta * (1.0 - self.gamma).abs() / self.alpha().abs()
    }
}

/// Epstein-Zin aggregator
/// `f(c,u) = delta/(1-1/psi) (1-gamma)u [ (c / ((1-gamma)u)^(1/(1-gamma)))^(1-1/psi) - 1 ]`,
/// evaluated as `K (c^alpha w^theta - w)` with `w = (1-gamma)u > 0`.
/// Consumption is the last control component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsteinZin {
    pub params: EZParams,
    alpha: f64,
    theta: f64,
    scale: f64,
}

impl EpsteinZin {
    pub fn new(params: EZParams) -> Self {
        Self { params, alpha: params.alpha(), theta: params.theta(), scale: params.scale() }
    }

    #[inline]
    fn w(&self, u: f64) -> Result<f64, DriverError> {
        let w = (1.0 - self.params.gamma) * u;
        if w > 0.0 && w.is_finite() {
            Ok(w)
        } else {
            Err(DriverError::DomainViolation { y: u, detail: "(1-gamma)u must be positive".into() })
        }
    }

    #[inline]
    fn c_alpha(&self, v: &[f64]) -> Result<f64, DriverError> {
        let c = *v.last().ok_or_else(|| DriverError::InvalidParameter("missing consumption control".into()))?;
        if c > 0.0 {
            Ok((self.alpha * c.ln()).exp())
        } else if c == 0.0 && self.alpha > 0.0 {
            Ok(0.0)
        } else {
            Err(DriverError::InvalidParameter(format!("consumption {c} not admissible")))
        }
    }
}

impl Driver for EpsteinZin {
    fn eval(&self, _t: f64, _x: &[f64], y: f64, _z: &[f64], v: &[f64]) -> Result<f64, DriverError> {
        let w = self.w(y)?;
        let ca = self.c_alpha(v)?;
        Ok(self.scale * (ca * (self.theta * w.ln()).exp() - w))
    }

    fn dy(&self, _t: f64, _x: &[f64], y: f64, _z: &[f64], v: &[f64]) -> Option<Result<f64, DriverError>> {
        let r = (|| {
            let w = self.w(y)?;
            let ca = self.c_alpha(v)?;
            let wt1 = ((self.theta - 1.0) * w.ln()).exp();
            Ok(self.scale * (1.0 - self.params.gamma) * (self.theta * ca * wt1 - 1.0))
        })();
        Some(r)
    }

    /// Limit at `u -> 0`: zero, since `theta > 1` in both supported regimes.
    fn zero_level(&self, _t: f64, _x: &[f64], _z: &[f64], _v: &[f64]) -> Result<f64, DriverError> {
        Ok(0.0)
    }

    fn z_free(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        format!("epstein_zin(delta={}, gamma={}, psi={})", self.params.delta, self.params.gamma, self.params.psi)
    }
}

/// Epstein-Zin driver for controls `(pi, c)` with `c` in `[a1, a2]`. The audit
/// box covers `u` in `[-5, -0.1]` (case i) or `[0.1, 5]` (case ii); the
/// terminal map is zero until attached with [`DriverSpec::with_terminal`].
pub fn epstein_zin_driver(params: EZParams, a1: f64, a2: f64) -> Result<DriverSpec, DriverError> {
    let regime = classify_regime(&params)?;
    if regime == Regime::Unsupported {
        return Err(DriverError::UnsupportedRegime { gamma: params.gamma, psi: params.psi, a1: Some(a1) });
    }
    if !(a1 >= 0.0 && a2 > a1) {
        return Err(DriverError::InvalidParameter(format!("consumption bounds need 0 <= a1 < a2, got [{a1}, {a2}]")));
    }
    if consumption_regularity(regime, a1) == ConsumptionRegularity::Unbounded {
        return Err(DriverError::UnsupportedRegime { gamma: params.gamma, psi: params.psi, a1: Some(a1) });
    }
    let alpha = params.alpha();
    let c_max = if alpha > 0.0 { a2.powf(alpha) } else { a1.powf(alpha) };
    let g1 = (1.0 - params.gamma).abs();
    let kappa = params.scale().abs() * (c_max * g1.powf(params.theta()) + g1);
    let constants =
        DriverConstants { lambda: 0.0, mu: params.monotonicity_constant(), kappa, p: params.theta().max(1.0) };
    let y = match regime {
        Regime::CaseI => (-5.0, -0.1),
        _ => (0.1, 5.0),
    };
    let bx = AuditBox { t: (0.0, 1.0), x: vec![(0.0, 1.0)], y, z: vec![(0.0, 0.0)], v: vec![(-1.0, 1.0), (a1, a2)] };
    Ok(DriverSpec::new("epstein_zin", Arc::new(EpsteinZin::new(params)), constants, bx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::audit_conditions;

    fn ez(gamma: f64, psi: f64) -> EpsteinZin {
        EpsteinZin::new(EZParams::new(0.1, gamma, psi).unwrap())
    }

    #[test]
    fn hand_values() {
        let f = ez(2.0, 2.0);
        assert!(f.eval(0.0, &[1.0], -1.0, &[], &[0.0, 1.0]).unwrap().abs() < 1e-15);
        assert!((f.eval(0.0, &[1.0], -1.0, &[], &[0.0, 4.0]).unwrap() - 0.2).abs() < 1e-14);
    }

    #[test]
    fn matches_unexpanded_formula() {
        for (g, p, u) in [(2.0, 2.0, -0.7), (3.0, 1.5, -2.3), (0.5, 0.5, 1.4), (0.3, 0.8, 0.2)] {
            let f = ez(g, p);
            let c = 0.37;
            let w: f64 = (1.0 - g) * u;
            let direct = 0.1 / (1.0 - 1.0 / p) * w * ((c / w.powf(1.0 / (1.0 - g))).powf(1.0 - 1.0 / p) - 1.0);
            let got = f.eval(0.0, &[1.0], u, &[], &[0.0, c]).unwrap();
            assert!((got - direct).abs() < 1e-12 * direct.abs().max(1.0), "{g} {p}: {got} vs {direct}");
        }
    }

    #[test]
    fn analytic_derivative_matches_differences() {
        let f = ez(2.0, 2.0);
        let (u, h) = (-1.3, 1e-6);
        let fd = (f.eval(0.0, &[], u + h, &[], &[0.0, 0.5]).unwrap() - f.eval(0.0, &[], u - h, &[], &[0.0, 0.5]).unwrap())
            / (2.0 * h);
        let an = f.dy(0.0, &[], u, &[], &[0.0, 0.5]).unwrap().unwrap();
        assert!((fd - an).abs() < 1e-7);
    }

    #[test]
    fn regimes() {
        let r = |g, p| classify_regime(&EZParams { delta: 0.1, gamma: g, psi: p });
        assert_eq!(r(2.0, 2.0).unwrap(), Regime::CaseI);
        assert_eq!(r(0.5, 0.5).unwrap(), Regime::CaseII);
        assert_eq!(r(2.0, 0.5).unwrap(), Regime::Unsupported);
        assert!(matches!(r(1.0, 2.0), Err(DriverError::OutOfModel { .. })));
        assert!(matches!(EZParams::new(0.1, 2.0, 0.5), Err(DriverError::UnsupportedRegime { .. })));
        assert_eq!(consumption_regularity(Regime::CaseI, 0.0), ConsumptionRegularity::ContinuousNotLipschitz);
        assert_eq!(consumption_regularity(Regime::CaseII, 0.0), ConsumptionRegularity::Unbounded);
        assert_eq!(consumption_regularity(Regime::CaseII, 0.01), ConsumptionRegularity::Lipschitz);
    }

    #[test]
    fn rejects_wrong_sign_utility() {
        let f = ez(2.0, 2.0);
        assert!(matches!(f.eval(0.0, &[], 0.5, &[], &[0.0, 1.0]), Err(DriverError::DomainViolation { .. })));
        let mut s = epstein_zin_driver(EZParams::new(0.1, 2.0, 2.0).unwrap(), 0.01, 1.0).unwrap();
        s.audit_box.y = (-1.0, 1.0);
        assert!(matches!(audit_conditions(&mut s, 64), Err(DriverError::DomainViolation { .. })));
        assert!(matches!(
            epstein_zin_driver(EZParams::new(0.1, 0.5, 0.5).unwrap(), 0.0, 1.0),
            Err(DriverError::UnsupportedRegime { .. })
        ));
    }

    #[test]
    fn case_one_audit_passes_on_negative_box() {
        let mut s = epstein_zin_driver(EZParams::new(0.1, 2.0, 2.0).unwrap(), 0.01, 1.0).unwrap();
        let rep = audit_conditions(&mut s, 4096).unwrap();
        assert!(rep.passed(), "{:?}", rep.violations.first());
        assert!(rep.mu_hat.is_finite() && rep.mu_hat <= 0.2 + 1e-12);
        assert!(rep.p_hat.is_finite());
        assert!(rep.kappa_hat <= s.constants.kappa);
    }
}
