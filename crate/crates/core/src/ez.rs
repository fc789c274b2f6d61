//! Two-asset consumption/investment problem with Epstein-Zin utility: wealth
//! `dX = [r X + (b - r) pi X - c] dt + sigma pi X dB`, controls `(pi, c)`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{classify_regime, epstein_zin_driver, AuditBox, DriverError, EZParams, Regime};
use crate::dpp::{brute_force_value, regularity_probe, verify_dpp, DppReport, Regularity};
use crate::hjb::{solve_hjb, Axis, Boundary, ControlGrid, SpaceTimeGrid, ValueGrid};
use crate::output::{fmt_f64, to_json_string};
use crate::problem::{ControlProblem, McConfig};
use crate::regression::RegressionConfig;
use crate::sde::{simulate_from, ControlPolicy, ControlSet, ControlledSDE, InitialState, StepContext};
use crate::Error;

#[derive(Debug, Error)]
pub enum EzError {
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error("invalid market: {0}")]
    InvalidMarket(String),
    #[error("wealth dynamics audit failed: {0}")]
    AuditFailed(String),
    #[error("stage '{stage}' failed: {source}")]
    Stage { stage: String, source: Box<Error> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn stage<E: Into<Error>>(name: &str) -> impl FnOnce(E) -> EzError + '_ {
    move |e| EzError::Stage { stage: name.to_string(), source: Box::new(e.into()) }
}

/// Coefficient path on `[0, T]`: a constant or a linear ramp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Curve {
    Constant(f64),
    Linear { start: f64, end: f64 },
}

impl Curve {
    pub fn at(&self, t: f64, horizon: f64) -> f64 {
        match *self {
            Curve::Constant(c) => c,
            Curve::Linear { start, end } => start + (end - start) * (t / horizon).clamp(0.0, 1.0),
        }
    }

    pub fn sup_abs(&self) -> f64 {
        match *self {
            Curve::Constant(c) => c.abs(),
            Curve::Linear { start, end } => start.abs().max(end.abs()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    /// Bond rate.
    pub r: Curve,
    /// Stock appreciation rate.
    pub b: Curve,
    pub sigma: Curve,
    pub x0: f64,
    pub a1: f64,
    pub a2: f64,
    #[serde(default = "default_pi_bounds")]
    pub pi_bounds: (f64, f64),
    pub horizon: f64,
    /// Wealth floor as a fraction of `x0`; the terminal utility is linearized below it.
    #[serde(default = "default_floor")]
    pub floor_fraction: f64,
    /// Upper end of the wealth box as a multiple of `x0`.
    #[serde(default = "default_cap")]
    pub cap_factor: f64,
}

fn default_pi_bounds() -> (f64, f64) {
    (-1.0, 1.0)
}

fn default_floor() -> f64 {
    0.05
}

fn default_cap() -> f64 {
    4.0
}

impl MarketSpec {
    /// Constant coefficients with the default box.
    pub fn constant(r: f64, b: f64, sigma: f64, x0: f64, a1: f64, a2: f64, horizon: f64) -> Self {
        Self {
            r: Curve::Constant(r),
            b: Curve::Constant(b),
            sigma: Curve::Constant(sigma),
            x0,
            a1,
            a2,
            pi_bounds: default_pi_bounds(),
            horizon,
            floor_fraction: default_floor(),
            cap_factor: default_cap(),
        }
    }

    pub fn x_floor(&self) -> f64 {
        self.floor_fraction * self.x0
    }

    pub fn x_max(&self) -> f64 {
        self.cap_factor * self.x0
    }

    fn validate(&self) -> Result<(), EzError> {
        let bad = |m: String| Err(EzError::InvalidMarket(m));
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            return bad(format!("x0 must be positive, got {}", self.x0));
        }
        if !(self.a1 >= 0.0 && self.a2 > self.a1) {
            return bad(format!("consumption bounds need 0 <= a1 < a2, got [{}, {}]", self.a1, self.a2));
        }
        if !(self.pi_bounds.0 < self.pi_bounds.1) {
            return bad(format!("pi bounds {:?} are empty", self.pi_bounds));
        }
        if !(self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.floor_fraction > 0.0 && self.floor_fraction < 1.0) {
            return bad(format!("floor fraction must lie in (0, 1), got {}", self.floor_fraction));
        }
        if !(self.cap_factor > 1.0) {
            return bad(format!("cap factor must exceed 1, got {}", self.cap_factor));
        }
        let samples = 10_001;
        for (name, c) in [("r", self.r), ("b", self.b), ("sigma", self.sigma)] {
            let mut prev = c.at(0.0, self.horizon);
            for i in 0..samples {
                let t = self.horizon * i as f64 / (samples - 1) as f64;
                let v = c.at(t, self.horizon);
                if !v.is_finite() || (v - prev).abs() > 1e-2 * (1.0 + c.sup_abs()) {
                    return bad(format!("coefficient {name} is not finite and continuous at t={t}"));
                }
                prev = v;
            }
        }
        Ok(())
    }
}

/// Power terminal utility, linearized below `x_floor`:
/// `-x^(1-gamma)/(gamma-1)` in case (i), `x^(1-gamma)/(1-gamma)` in case (ii).
pub fn terminal_utility(gamma: f64, x_floor: f64) -> impl Fn(f64) -> f64 + Send + Sync + Clone {
    move |x: f64| {
        let power = |x: f64| x.powf(1.0 - gamma) / (1.0 - gamma);
        if x >= x_floor {
            power(x)
        } else {
            power(x_floor) + x_floor.powf(-gamma) * (x - x_floor)
        }
    }
}

/// Fraction of the pre-consumption wealth always kept by the wealth step.
pub const KEEP_FRACTION: f64 = 1e-3;

/// The Epstein-Zin problem together with the market it was built from.
#[derive(Clone, Debug)]
pub struct EzProblem {
    pub problem: ControlProblem,
    pub market: MarketSpec,
    pub params: EZParams,
    pub regime: Regime,
}

/// Wealth dynamics, control set `pi_bounds x [a1, a2]`, Epstein-Zin driver and
/// power terminal utility, with both audits run.
pub fn build_problem(market: &MarketSpec, ez: EZParams) -> Result<EzProblem, EzError> {
    market.validate()?;
    let regime = classify_regime(&ez)?;
    let (xf, xm, t_end) = (market.x_floor(), market.x_max(), market.horizon);
    let h = terminal_utility(ez.gamma, xf);
    let lip_h = xf.powf(-ez.gamma);
    let h0 = h(0.0);
    let hm = h(xm);
    let y = match regime {
        Regime::CaseI => (1.5 * h0, 0.5 * hm),
        _ => (0.5 * h0, 2.0 * hm),
    };
    let (plo, phi) = market.pi_bounds;
    let bx = AuditBox {
        t: (0.0, t_end),
        x: vec![(xf, xm)],
        y,
        z: vec![(0.0, 0.0)],
        v: vec![(plo, phi), (market.a1, market.a2)],
    };
    let hh = h.clone();
    let spec = epstein_zin_driver(ez, market.a1, market.a2)?
        .with_terminal(Arc::new(move |x: &[f64]| hh(x[0])), lip_h)
        .with_audit_box(bx)
        .require_audit(4096)?;

    let controls = ControlSet::new(vec![plo, market.a1], vec![phi, market.a2])
        .map_err(|e| EzError::InvalidMarket(e.to_string()))?;
    let (r, b, s) = (market.r, market.b, market.sigma);
    let drift = Arc::new(move |t: f64, x: &[f64], v: &[f64], out: &mut [f64]| {
        let (rt, bt) = (r.at(t, t_end), b.at(t, t_end));
        out[0] = rt * x[0] + (bt - rt) * v[0] * x[0] - v[1];
    });
    let diffusion = Arc::new(move |t: f64, x: &[f64], v: &[f64], out: &mut [f64]| {
        out[0] = s.at(t, t_end) * v[0] * x[0];
    });
    let pmax = plo.abs().max(phi.abs());
    let excess = r.sup_abs() + b.sup_abs();
    let lipschitz = r.sup_abs() + excess * pmax + excess * xm + 1.0 + s.sup_abs() * (pmax + xm);
    let stepper = Arc::new(move |cx: &StepContext<'_>, out: &mut [f64]| {
        let (rt, bt, st) = (r.at(cx.t, t_end), b.at(cx.t, t_end), s.at(cx.t, t_end));
        let (pi, c) = (cx.v[0], cx.v[1]);
        let growth =
            cx.x[0] * ((rt + (bt - rt) * pi - 0.5 * st * st * pi * pi) * cx.dt + st * pi * cx.db[0]).exp();
        let spend = c * cx.dt;
        let cap = (1.0 - KEEP_FRACTION) * growth;
        if spend > cap {
            out[0] = growth - cap;
            true
        } else {
            out[0] = growth - spend;
            false
        }
    });
    let sde = ControlledSDE::new(1, 1, t_end, controls, drift, diffusion)
        .with_domain(vec![(xf, xm)])
        .with_lipschitz(lipschitz)
        .with_stepper(stepper);
    let audit = sde.audit(4096);
    if !audit.passed() {
        return Err(EzError::AuditFailed(format!(
            "{} Lipschitz violations (max quotient {}), non-finite sample {:?}",
            audit.violations, audit.lipschitz_hat, audit.non_finite
        )));
    }
    let name = format!("epstein_zin_{}", if regime == Regime::CaseI { "case_i" } else { "case_ii" });
    Ok(EzProblem { problem: ControlProblem::new(name, sde, spec), market: market.clone(), params: ez, regime })
}

/// Solver settings of the end-to-end scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub n_paths: usize,
    /// Monte Carlo steps over `[0, T]`.
    pub steps: usize,
    pub seed: u64,
    pub grid_nodes: usize,
    /// Nodes per control axis.
    pub control_grid: Vec<usize>,
    /// Fixed number of HJB time steps; derived from `cfl_target` when absent.
    pub time_steps: Option<usize>,
    pub cfl_target: f64,
    pub trust_margin: f64,
    pub boundary: Boundary,
    pub regression: RegressionConfig,
    pub tol_factor: f64,
    pub budget: usize,
    /// Pieces of the brute-force control sequences.
    pub pieces: usize,
    /// Wealth levels of the cross-check at `t = 0`.
    pub probes: Vec<f64>,
    /// Wealth levels of the DPP check at `t = 0`.
    pub dpp_probes: Vec<f64>,
    /// DPP horizon as a fraction of `T`.
    pub dpp_delta: f64,
    /// Time layers written to `value_grid.csv`.
    pub export_layers: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            steps: 200,
            seed: 0,
            grid_nodes: 200,
            control_grid: vec![9, 9],
            time_steps: None,
            cfl_target: 0.9,
            trust_margin: 0.1,
            boundary: Boundary::Extrapolate,
            regression: RegressionConfig::default(),
            tol_factor: 5.0,
            budget: 4096,
            pieces: 1,
            probes: vec![0.5, 1.0, 2.0],
            dpp_probes: vec![0.5, 0.75, 1.0, 1.5, 2.0],
            dpp_delta: 0.1,
            export_layers: 51,
        }
    }
}

impl SolverConfig {
    pub fn mc(&self, horizon: f64) -> McConfig {
        McConfig {
            n_paths: self.n_paths,
            steps_per_unit: self.steps as f64 / horizon,
            seed: self.seed,
            regression: self.regression,
            tol_factor: self.tol_factor,
            budget: self.budget,
        }
    }
}

/// `|u_PDE - u_MC|` at one probe.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossCheck {
    pub t: f64,
    pub x: f64,
    pub u_pde: f64,
    pub u_mc: f64,
    pub mc_stderr: f64,
    /// `u_pde - u_mc`.
    pub signed_diff: f64,
    /// `|u_fine - u_coarse|`.
    pub grid_term: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub best_control: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WealthCheck {
    pub min_wealth: f64,
    pub clamp_events: u64,
    pub paths: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub regime: Regime,
    #[serde(skip)]
    pub value: ValueGrid,
    #[serde(skip)]
    pub coarse: ValueGrid,
    pub cross_check: Vec<CrossCheck>,
    pub dpp: DppReport,
    pub regularity: Regularity,
    /// `u(0, x)` is non-decreasing along the wealth nodes.
    pub monotone_in_wealth: bool,
    pub wealth: WealthCheck,
}

impl ScenarioReport {
    pub fn pass(&self) -> bool {
        self.cross_check.iter().all(|c| c.pass) && self.dpp.pass() && self.monotone_in_wealth && self.wealth.min_wealth > 0.0
    }
}

/// Solves the HJB on two wealth grids, brute-forces the probes by Monte Carlo,
/// checks the DPP and collects the scenario invariants.
pub fn run_scenario(ez: &EzProblem, cfg: &SolverConfig) -> Result<ScenarioReport, EzError> {
    let p = &ez.problem;
    let m = &ez.market;
    let t_end = m.horizon;
    let cgrid = ControlGrid::uniform(p.controls(), &cfg.control_grid).map_err(stage("control_grid"))?;
    let fine_nodes = cfg.grid_nodes.max(5);
    let coarse_nodes = fine_nodes.div_ceil(2).max(3);
    let mk = |nodes: usize| -> Result<SpaceTimeGrid, EzError> {
        let g = SpaceTimeGrid::new(t_end, 1, vec![Axis::new(m.x_floor(), m.x_max(), nodes)], cfg.boundary)
            .map_err(stage("hjb"))?
            .with_trust_margin(cfg.trust_margin);
        Ok(match cfg.time_steps {
            Some(n) => g.with_time_steps(n),
            None => g.with_cfl_steps(&p.sde, &cgrid, cfg.cfl_target),
        })
    };
    let value = solve_hjb(&mk(fine_nodes)?, &p.sde, &p.spec, &cgrid).map_err(stage("hjb"))?;
    let coarse = solve_hjb(&mk(coarse_nodes)?, &p.sde, &p.spec, &cgrid).map_err(stage("hjb_coarse"))?;

    let mc = cfg.mc(t_end);
    let mut cross_check = Vec::with_capacity(cfg.probes.len());
    for &x in &cfg.probes {
        let bf = brute_force_value(p, 0.0, &[x], &cgrid, cfg.pieces, &mc).map_err(stage("brute_force"))?;
        let u_pde = value.at(0.0, &[x]);
        let grid_term = (u_pde - coarse.at(0.0, &[x])).abs();
        let tolerance = cfg.tol_factor * bf.stderr + grid_term;
        let signed_diff = u_pde - bf.value;
        cross_check.push(CrossCheck {
            t: 0.0,
            x,
            u_pde,
            u_mc: bf.value,
            mc_stderr: bf.stderr,
            signed_diff,
            grid_term,
            tolerance,
            pass: signed_diff.abs() <= tolerance,
            best_control: bf.best,
        });
    }

    let dpp_points: Vec<(f64, Vec<f64>)> = cfg.dpp_probes.iter().map(|&x| (0.0, vec![x])).collect();
    let dpp = verify_dpp(&value, Some(&coarse), p, &dpp_points, cfg.dpp_delta * t_end, &cgrid, &mc)
        .map_err(stage("dpp"))?;
    let regularity = regularity_probe(&value, 0.1 * t_end);
    let layer0 = value.layer(0);
    let monotone_in_wealth = layer0.windows(2).all(|w| w[1] >= w[0]);

    let stress = ControlPolicy::Constant(vec![m.pi_bounds.1, m.a2]);
    let mut wealth = WealthCheck { min_wealth: f64::INFINITY, clamp_events: 0, paths: 0 };
    for &x in &cfg.probes {
        let bundle = simulate_from(&p.sde, &stress, 0.0, &InitialState::Point(vec![x]), mc.steps_for(t_end), cfg.n_paths, cfg.seed)
            .map_err(stage("wealth"))?;
        wealth.min_wealth = bundle.paths.iter().cloned().fold(wealth.min_wealth, f64::min);
        wealth.clamp_events += bundle.clamp_events;
        wealth.paths += bundle.n_paths;
    }
    Ok(ScenarioReport {
        name: p.name.clone(),
        regime: ez.regime,
        value,
        coarse,
        cross_check,
        dpp,
        regularity,
        monotone_in_wealth,
        wealth,
    })
}

/// Writes `value_grid.csv`, `bsde_probes.csv`, `dpp_report.json` and
/// `scenario_meta.json` (the given metadata merged with the report summary).
pub fn write_artifacts(report: &ScenarioReport, cfg: &SolverConfig, dir: &Path, meta: &serde_json::Value) -> Result<(), EzError> {
    fs::create_dir_all(dir)?;
    let nt = report.value.grid.time_steps;
    let stride = nt.div_ceil(cfg.export_layers.saturating_sub(1).max(1)).max(1);
    let mut buf = Vec::new();
    report.value.write_csv(stride, &mut buf)?;
    fs::write(dir.join("value_grid.csv"), buf)?;

    let mut w = Vec::new();
    writeln!(w, "t,x,u_pde,u_mc,mc_stderr,signed_diff,grid_term,tolerance,pass,best_pi,best_c")?;
    for c in &report.cross_check {
        let best = c.best_control.first().cloned().unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            fmt_f64(c.t),
            fmt_f64(c.x),
            fmt_f64(c.u_pde),
            fmt_f64(c.u_mc),
            fmt_f64(c.mc_stderr),
            fmt_f64(c.signed_diff),
            fmt_f64(c.grid_term),
            fmt_f64(c.tolerance),
            c.pass,
            best.first().map_or(String::new(), |v| fmt_f64(*v)),
            best.get(1).map_or(String::new(), |v| fmt_f64(*v)),
        )?;
    }
    fs::write(dir.join("bsde_probes.csv"), w)?;

    fs::write(dir.join("dpp_report.json"), json(&report.dpp)?)?;
    let mut full = meta.clone();
    if let serde_json::Value::Object(map) = &mut full {
        map.insert("report".into(), serde_json::to_value(report).map_err(std::io::Error::other)?);
        map.insert("scheme".into(), serde_json::to_value(&report.value.meta).map_err(std::io::Error::other)?);
    }
    fs::write(dir.join("scenario_meta.json"), json(&full)?)?;
    Ok(())
}

fn json<T: Serialize>(v: &T) -> std::io::Result<String> {
    to_json_string(v).map_err(std::io::Error::other)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_is_continuous_and_linear_below_floor() {
        let h = terminal_utility(2.0, 0.05);
        assert!((h(1.0) + 1.0).abs() < 1e-15);
        assert!((h(0.05) + 20.0).abs() < 1e-12);
        assert!((h(0.0) + 40.0).abs() < 1e-12);
        assert!((h(0.05 - 1e-9) - h(0.05)).abs() < 1e-6);
        let g = terminal_utility(0.5, 0.05);
        assert!((g(4.0) - 4.0).abs() < 1e-12);
        assert!(g(0.0) > 0.0);
    }

    #[test]
    fn builds_case_one() {
        let m = MarketSpec::constant(0.02, 0.05, 0.2, 1.0, 0.01, 1.0, 1.0);
        let ez = build_problem(&m, EZParams::new(0.1, 2.0, 2.0).unwrap()).unwrap();
        assert_eq!(ez.regime, Regime::CaseI);
        assert!(ez.problem.spec.is_audited());
        assert!(ez.problem.spec.audit_box.y.1 < 0.0);
    }

    #[test]
    fn zero_floor_needs_case_one() {
        let m = MarketSpec::constant(0.02, 0.05, 0.2, 1.0, 0.0, 1.0, 1.0);
        let r = build_problem(&m, EZParams::new(0.1, 0.5, 0.5).unwrap());
        assert!(matches!(r, Err(EzError::Driver(DriverError::UnsupportedRegime { .. }))));
        assert!(build_problem(&m, EZParams::new(0.1, 2.0, 2.0).unwrap()).is_ok());
    }

    #[test]
    fn stepper_keeps_wealth_positive() {
        let m = MarketSpec::constant(0.02, 0.05, 0.2, 1.0, 0.01, 1.0, 1.0);
        let ez = build_problem(&m, EZParams::new(0.1, 2.0, 2.0).unwrap()).unwrap();
        let pol = ControlPolicy::Constant(vec![1.0, 1.0]);
        let b = simulate_from(&ez.problem.sde, &pol, 0.0, &InitialState::Point(vec![0.1]), 100, 500, 1).unwrap();
        assert!(b.paths.iter().all(|&x| x > 0.0));
        assert!(b.clamp_events > 0);
    }

    #[test]
    fn curve_interpolates() {
        let c = Curve::Linear { start: 0.01, end: 0.03 };
        assert!((c.at(0.5, 1.0) - 0.02).abs() < 1e-15);
        let m: Curve = serde_json::from_str("0.02").unwrap();
        assert_eq!(m, Curve::Constant(0.02));
    }
}
