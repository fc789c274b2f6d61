//! Subcommand pipelines. Each writes its artifacts plus `scenario_meta.json`
//! into the output directory and reports whether its checks passed.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::ValueEnum;
use rcl_core::aggregator::{
    audit_conditions, AbsDriver, AuditBox, CubicMonotone, Driver, DriverError, DriverSpec, EZParams, LinearDriver,
    QuadraticDriver,
};
use rcl_core::bsde::{comparison_check, solve_bsde, ComparisonConfig};
use rcl_core::dpp::{determinism_probe, verify_dpp};
use rcl_core::ez::{build_problem, run_scenario, write_artifacts, EzProblem};
use rcl_core::hjb::{scheme_monotonicity_check, solve_hjb, Axis, ControlGrid, SpaceTimeGrid, ValueGrid};
use rcl_core::output::{fmt_f64, to_json_string};
use rcl_core::problem::ControlProblem;
use rcl_core::sde::{moment_report, simulate_paths, ControlPolicy, ControlSet, ControlledSDE, MomentConfig};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{DriverConfig, ProblemConfig, ScenarioConfig, SdeConfig, SdeModel, Terminal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    SolveBsde,
    SolveHjb,
    VerifyDpp,
    Compare,
    EzDemo,
    AuditDriver,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::SolveBsde => "solve-bsde",
            Self::SolveHjb => "solve-hjb",
            Self::VerifyDpp => "verify-dpp",
            Self::Compare => "compare",
            Self::EzDemo => "ez-demo",
            Self::AuditDriver => "audit-driver",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] rcl_core::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl<E: Into<rcl_core::Error>> From<E> for Box<RunError> {
    fn from(e: E) -> Self {
        Box::new(RunError::Core(e.into()))
    }
}

fn invalid(msg: impl Into<String>) -> Box<RunError> {
    Box::new(RunError::Invalid(msg.into()))
}

type Result<T> = std::result::Result<T, Box<RunError>>;

/// What a finished subcommand reports back.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    pub summary: String,
}

/// `f + shift`, used as the upper driver of `compare`.
struct Shifted {
    inner: Arc<dyn Driver>,
    shift: f64,
}

impl Driver for Shifted {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> std::result::Result<f64, DriverError> {
        Ok(self.inner.eval(t, x, y, z, v)? + self.shift)
    }
    fn dy(&self, t: f64, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> Option<std::result::Result<f64, DriverError>> {
        self.inner.dy(t, x, y, z, v)
    }
    fn zero_level(&self, t: f64, x: &[f64], z: &[f64], v: &[f64]) -> std::result::Result<f64, DriverError> {
        Ok(self.inner.zero_level(t, x, z, v)? + self.shift)
    }
    fn z_free(&self) -> bool {
        self.inner.z_free()
    }
    fn describe(&self) -> String {
        format!("{} + {}", self.inner.describe(), self.shift)
    }
}

/// The assembled problem with the pieces each subcommand needs.
pub struct Built {
    pub problem: ControlProblem,
    pub x0: Vec<f64>,
    pub grid_box: Vec<(f64, f64)>,
    pub ez: Option<EzProblem>,
}

fn terminal(t: &Terminal, domain: &[(f64, f64)]) -> (Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>, f64) {
    match *t {
        Terminal::Identity => (Arc::new(|x: &[f64]| x[0]), 1.0),
        Terminal::Square => {
            let r = domain.iter().map(|(a, b)| a.abs().max(b.abs()).powi(2)).sum::<f64>().sqrt();
            (Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum()), 2.0 * r)
        }
        Terminal::Constant { value } => (Arc::new(move |_: &[f64]| value), 0.0),
        Terminal::Linear { slope, offset } => (Arc::new(move |x: &[f64]| slope * x[0] + offset), slope.abs()),
    }
}

fn sde_from(c: &SdeConfig) -> Result<ControlledSDE> {
    let n = c.x0.len();
    if n == 0 || c.domain.len() != n {
        return Err(invalid("x0 and domain need one entry per state component"));
    }
    let controls = ControlSet::new(c.controls.lower.clone(), c.controls.upper.clone())?;
    let sde = match c.model {
        SdeModel::Zero => {
            let z = ControlledSDE::zero(n, c.horizon);
            ControlledSDE { controls, ..z }
        }
        SdeModel::Gbm | SdeModel::Arithmetic if n != 1 => {
            return Err(invalid("gbm and arithmetic models have a scalar state"));
        }
        SdeModel::Gbm => ControlledSDE { controls, ..ControlledSDE::gbm(c.mu, c.sigma, c.horizon) },
        SdeModel::Arithmetic => {
            if controls.dim() != 1 {
                return Err(invalid("the arithmetic model takes a scalar control"));
            }
            ControlledSDE::arithmetic(c.drift, c.sigma, c.horizon, controls)
        }
    };
    Ok(sde.with_domain(c.domain.clone()))
}

fn driver_spec(d: &DriverConfig, bx: AuditBox) -> Result<DriverSpec> {
    let with_y = |mut b: AuditBox, y: Option<(f64, f64)>| {
        if let Some(y) = y {
            b.y = y;
        }
        b
    };
    Ok(match d {
        DriverConfig::Linear { coef, offset, audit_y } => LinearDriver::spec(*coef, *offset, with_y(bx, *audit_y)),
        DriverConfig::CubicMonotone { cubic, linear, offset, audit_y } => {
            CubicMonotone::spec(*cubic, *linear, *offset, with_y(bx, *audit_y))?
        }
        DriverConfig::Abs { scale, audit_y } => AbsDriver::spec(*scale, with_y(bx, *audit_y)),
        DriverConfig::Quadratic { scale, audit_y } => QuadraticDriver::spec(*scale, with_y(bx, *audit_y)),
        DriverConfig::EpsteinZin { .. } => return Err(invalid("the epstein_zin driver needs an ez_market problem")),
    })
}

/// Builds the problem; the driver audit runs only when `audit` is set.
pub fn build(cfg: &ScenarioConfig, audit: bool) -> Result<Built> {
    match &cfg.problem {
        ProblemConfig::EzMarket(m) => {
            let DriverConfig::EpsteinZin { delta, gamma, psi } = cfg.driver else {
                return Err(invalid("an ez_market problem needs the epstein_zin driver"));
            };
            let ez = build_problem(m, EZParams::new(delta, gamma, psi)?)?;
            Ok(Built {
                problem: ez.problem.clone(),
                x0: vec![m.x0],
                grid_box: vec![(m.x_floor(), m.x_max())],
                ez: Some(ez),
            })
        }
        ProblemConfig::Sde(c) => {
            let sde = sde_from(c)?;
            let bx = AuditBox {
                t: (0.0, c.horizon),
                x: c.domain.clone(),
                y: (-5.0, 5.0),
                z: vec![(-1.0, 1.0); sde.dim_noise],
                v: sde.controls.lower.iter().zip(&sde.controls.upper).map(|(a, b)| (*a, *b)).collect(),
            };
            let (h, lip) = terminal(&c.terminal, &c.domain);
            let mut spec = driver_spec(&cfg.driver, bx)?.with_terminal(h, lip);
            if audit {
                spec = spec.require_audit(cfg.solver.audit_budget)?;
            }
            Ok(Built {
                problem: ControlProblem::new(cfg.name.clone(), sde, spec),
                x0: c.x0.clone(),
                grid_box: c.domain.clone(),
                ez: None,
            })
        }
    }
}

fn policy(cfg: &ScenarioConfig, set: &ControlSet) -> Result<ControlPolicy> {
    let v = match &cfg.run.policy {
        Some(v) => v.clone(),
        None => set.lower.iter().zip(&set.upper).map(|(a, b)| 0.5 * (a + b)).collect(),
    };
    if !set.contains(&v) {
        return Err(invalid(format!("policy {v:?} outside the control set")));
    }
    Ok(ControlPolicy::Constant(v))
}

fn control_grid(cfg: &ScenarioConfig, set: &ControlSet) -> Result<ControlGrid> {
    let m = set.dim();
    let per = &cfg.solver.core.control_grid;
    let per: Vec<usize> = if per.len() == m { per.clone() } else { vec![per.first().copied().unwrap_or(9); m] };
    Ok(ControlGrid::uniform(set, &per)?)
}

fn grid(cfg: &ScenarioConfig, b: &Built, cgrid: &ControlGrid, nodes: usize) -> Result<SpaceTimeGrid> {
    let s = &cfg.solver.core;
    let axes = b.grid_box.iter().map(|&(lo, hi)| Axis::new(lo, hi, nodes)).collect();
    let g = SpaceTimeGrid::new(b.problem.horizon(), 1, axes, s.boundary)?.with_trust_margin(s.trust_margin);
    Ok(match s.time_steps {
        Some(n) => g.with_time_steps(n),
        None => g.with_cfl_steps(&b.problem.sde, cgrid, s.cfl_target),
    })
}

fn stride(cfg: &ScenarioConfig, v: &ValueGrid) -> usize {
    v.grid.time_steps.div_ceil(cfg.solver.core.export_layers.saturating_sub(1).max(1)).max(1)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    let s = to_json_string(v).map_err(|e| rcl_core::Error::Io(std::io::Error::other(e)))?;
    fs::write(path, s).map_err(rcl_core::Error::Io)?;
    Ok(())
}

fn write_value_grid(cfg: &ScenarioConfig, v: &ValueGrid, out: &Path) -> Result<()> {
    let mut buf = Vec::new();
    v.write_csv(stride(cfg, v), &mut buf).map_err(rcl_core::Error::Io)?;
    fs::write(out.join("value_grid.csv"), buf).map_err(rcl_core::Error::Io)?;
    Ok(())
}

/// Config echo, versions and seed. `generated_at` is the only field that
/// changes between identical runs.
pub fn meta(cmd: Command, cfg: &ScenarioConfig) -> Value {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    json!({
        "subcommand": cmd.name(),
        "config": cfg,
        "versions": { "rcl": env!("CARGO_PKG_VERSION") },
        "seed": cfg.solver.core.seed,
        "generated_at": now,
    })
}

fn write_meta(cmd: Command, cfg: &ScenarioConfig, out: &Path, extra: Value) -> Result<()> {
    let mut m = meta(cmd, cfg);
    if let (Value::Object(map), Value::Object(e)) = (&mut m, extra) {
        map.extend(e);
    }
    write_json(&out.join("scenario_meta.json"), &m)
}

/// Runs `cmd` on a validated config, writing artifacts under `out`.
pub fn dispatch(cmd: Command, cfg: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out).map_err(rcl_core::Error::Io)?;
    match cmd {
        Command::Simulate => simulate(cfg, out),
        Command::SolveBsde => solve_bsde_cmd(cfg, out),
        Command::SolveHjb => solve_hjb_cmd(cfg, out),
        Command::VerifyDpp => verify_dpp_cmd(cfg, out),
        Command::Compare => compare(cfg, out),
        Command::EzDemo => ez_demo(cfg, out),
        Command::AuditDriver => audit_driver(cfg, out),
    }
}

fn simulate(cfg: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let b = build(cfg, false)?;
    let s = &cfg.solver.core;
    let pol = policy(cfg, &b.problem.sde.controls)?;
    let bundle = simulate_paths(&b.problem.sde, &pol, 0.0, &b.x0, s.steps, s.n_paths, s.seed)?;
    let n = bundle.dim_state;
    let mut w = Vec::new();
    let header: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    writeln!(w, "path_id,step,t,{}", header.join(",")).map_err(rcl_core::Error::Io)?;
    for p in 0..bundle.n_paths.min(cfg.run.max_paths_csv) {
        for k in 0..=bundle.steps {
            let xs: Vec<String> = bundle.state(p, k).iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{p},{k},{},{}", fmt_f64(bundle.time(k)), xs.join(",")).map_err(rcl_core::Error::Io)?;
        }
    }
    fs::write(out.join("paths.csv"), w).map_err(rcl_core::Error::Io)?;
    bundle.save(&out.join("bundle.rclb")).map_err(rcl_core::Error::Io)?;
    let mom = moment_report(&bundle, cfg.run.moment_q, &MomentConfig::default())?;
    let terminal_mean: Vec<f64> = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..bundle.n_paths).map(|p| bundle.state(p, bundle.steps)[j]).collect();
            rcl_core::bsde::ordered_mean(&col)
        })
        .collect();
    let report = json!({
        "n_paths": bundle.n_paths,
        "steps": bundle.steps,
        "dt": bundle.dt(),
        "terminal_mean": terminal_mean,
        "moment": { "q": cfg.run.moment_q, "sup_moment": mom.sup_moment,
                    "half_sample_moment": mom.half_sample_moment, "bound_ok": mom.bound_ok },
        "clamp_events": bundle.clamp_events,
    });
    write_json(&out.join("simulate_report.json"), &report)?;
    write_meta(Command::Simulate, cfg, out, json!({}))?;
    Ok(Outcome { pass: mom.bound_ok, summary: format!("terminal mean {terminal_mean:?}, sup moment {}", mom.sup_moment) })
}

fn solve_bsde_cmd(cfg: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let b = build(cfg, true)?;
    let s = &cfg.solver.core;
    let pol = policy(cfg, &b.problem.sde.controls)?;
    let bundle = simulate_paths(&b.problem.sde, &pol, 0.0, &b.x0, s.steps, s.n_paths, s.seed)?;
    let sol = solve_bsde(&bundle, &b.problem.spec, &pol, &s.regression)?;
    let mut w = Vec::new();
    sol.write_csv(&bundle, cfg.run.max_paths_csv, &mut w).map_err(rcl_core::Error::Io)?;
    fs::write(out.join("bsde_solution.csv"), w).map_err(rcl_core::Error::Io)?;
    write_json(&out.join("bsde_summary.json"), &sol)?;
    write_meta(Command::SolveBsde, cfg, out, json!({}))?;
    Ok(Outcome { pass: true, summary: format!("y0 = {} +/- {}", fmt_f64(sol.y0), fmt_f64(sol.y0_stderr)) })
}

fn solve_hjb_cmd(cfg: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let b = build(cfg, true)?;
    let cg = control_grid(cfg, &b.problem.sde.controls)?;
    let g = grid(cfg, &b, &cg, cfg.solver.core.grid_nodes)?;
    let v = solve_hjb(&g, &b.problem.sde, &b.problem.spec, &cg)?;
    let mono = scheme_monotonicity_check(&g, &b.problem.sde, &b.problem.spec, &cg, 256)?;
    write_value_grid(cfg, &v, out)?;
    let u0 = v.at(0.0, &b.x0);
    write_json(
        &out.join("hjb_summary.json"),
        &json!({ "grid": v.grid, "scheme": v.meta, "monotonicity": mono, "u_at_x0": u0, "controls": cg.len() }),
    )?;
    write_meta(Command::SolveHjb, cfg, out, json!({}))?;
    Ok(Outcome { pass: mono.monotone, summary: format!("u(0, x0) = {}", fmt_f64(u0)) })
}

fn dpp_points(cfg: &ScenarioConfig, b: &Built) -> Vec<(f64, Vec<f64>)> {
    let mut pts = vec![];
    if b.x0.len() == 1 && !cfg.solver.core.dpp_probes.is_empty() {
        pts.extend(cfg.solver.core.dpp_probes.iter().map(|&x| (0.0, vec![x])));
    } else {
        pts.push((0.0, b.x0.clone()));
    }
    pts
}

fn verify_dpp_cmd(cfg: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let b = build(cfg, true)?;
    let s = &cfg.solver.core;
    let cg = control_grid(cfg, &b.problem.sde.controls)?;
    let fine = solve_hjb(&grid(cfg, &b, &cg, s.grid_nodes)?, &b.problem.sde, &b.problem.spec, &cg)?;
    let coarse_nodes = s.grid_nodes.div_ceil(2).max(3);
    let coarse = solve_hjb(&grid(cfg, &b, &cg, coarse_nodes)?, &b.problem.sde, &b.problem.spec, &cg)?;
    let mc = s.mc(b.problem.horizon());
    let rep = verify_dpp(&fine, Some(&coarse), &b.problem, &dpp_points(cfg, &b), s.dpp_delta * b.problem.horizon(), &cg, &mc)?;
    write_json(&out.join("dpp_report.json"), &rep)?;
    write_value_grid(cfg, &fine, out)?;
    write_meta(Command::VerifyDpp, cfg, out, json!({}))?;
    let pass = rep.summary.pass && rep.summary.one_sided_pass;
    Ok(Outcome {
        pass,
        summary: format!(
            "{} of {} probes evaluated, max |residual| {}, pass={}",
            rep.summary.evaluated,
            rep.probes.len(),
            fmt_f64(rep.summary.max_abs_residual),
            pass
        ),
    })
}

fn compare(cfg: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let b = build(cfg, true)?;
    let s = &cfg.solver.core;
    let lo = &b.problem.spec;
    let shift = cfg.run.compare_shift;
    let h = lo.terminal.clone();
    let hi = DriverSpec::new(
        format!("{} + {shift}", lo.name),
        Arc::new(Shifted { inner: lo.driver.clone(), shift }),
        lo.constants,
        lo.audit_box.clone(),
    )
    .with_terminal(Arc::new(move |x: &[f64]| h(x) + shift), lo.constants.lambda)
    .require_audit(cfg.solver.audit_budget)?;
    let pol = policy(cfg, &b.problem.sde.controls)?;
    let bundle = simulate_paths(&b.problem.sde, &pol, 0.0, &b.x0, s.steps, s.n_paths, s.seed)?;
    let cc = ComparisonConfig { tol_factor: s.tol_factor, ..Default::default() };
    let rep = comparison_check(&bundle, (lo, &hi), &pol, &s.regression, &cc)?;
    write_json(&out.join("comparison_report.json"), &rep)?;
    write_meta(Command::Compare, cfg, out, json!({}))?;
    Ok(Outcome {
        pass: rep.ordered,
        summary: format!("ordered={}, worst violation {}", rep.ordered, fmt_f64(rep.worst_violation)),
    })
}

fn ez_demo(cfg: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let b = build(cfg, true)?;
    let ez = b.ez.as_ref().ok_or_else(|| invalid("ez-demo needs an ez_market problem"))?;
    let s = &cfg.solver.core;
    let rep = run_scenario(ez, s)?;
    let det = if cfg.run.seeds.len() >= 3 {
        let cg = control_grid(cfg, &ez.problem.sde.controls)?;
        let mc = s.mc(ez.market.horizon);
        Some(determinism_probe(&ez.problem, 0.0, &[ez.market.x0], &cg, s.pieces, &cfg.run.seeds, &mc)?)
    } else {
        None
    };
    let mut m = meta(Command::EzDemo, cfg);
    if let Value::Object(map) = &mut m {
        map.insert("determinism".into(), serde_json::to_value(&det).unwrap_or(Value::Null));
    }
    write_artifacts(&rep, s, out, &m)?;
    let pass = rep.pass();
    let rows: Vec<String> = rep
        .cross_check
        .iter()
        .map(|c| format!("x={}: u_pde-u_mc={} (tol {})", c.x, fmt_f64(c.signed_diff), fmt_f64(c.tolerance)))
        .collect();
    Ok(Outcome { pass, summary: format!("{}; dpp pass={}", rows.join("; "), rep.dpp.pass()) })
}

fn audit_driver(cfg: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let b = build(cfg, false)?;
    let mut spec = b.problem.spec.clone();
    let rep = audit_conditions(&mut spec, cfg.solver.audit_budget)?;
    write_json(&out.join("audit_report.json"), &rep)?;
    write_meta(Command::AuditDriver, cfg, out, json!({}))?;
    let summary = match rep.violations.first() {
        Some(v) => format!(
            "{} violation(s); first: {} at t={}, x={:?}, y={}, y'={}, v={:?} (observed {}, declared {})",
            rep.violations.len(),
            v.condition,
            v.t,
            v.x,
            v.y,
            v.y_alt,
            v.v,
            v.observed,
            v.declared
        ),
        None => format!("no violations in {} samples", rep.samples),
    };
    Ok(Outcome { pass: rep.passed(), summary })
}
