//! Scenario files: strict validation that reports every problem with a JSON
//! pointer, then typed deserialization with defaults filled in.

use std::fmt;
use std::path::Path;

use rcl_core::ez::{MarketSpec, SolverConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SchemaError {
    pub pointer: String,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", if self.pointer.is_empty() { "/" } else { &self.pointer }, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{} schema error(s):\n{}", .0.len(), .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Schema(Vec<SchemaError>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub problem: ProblemConfig,
    pub driver: DriverConfig,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub run: RunConfig,
}

fn default_name() -> String {
    "scenario".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    EzMarket(MarketSpec),
    Sde(SdeConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdeModel {
    /// `b = 0`, `sigma = 0`.
    Zero,
    /// `dX = mu X dt + sigma X dB`.
    Gbm,
    /// `dX = (drift + v) dt + sigma dB`.
    Arithmetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub model: SdeModel,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub drift: f64,
    pub x0: Vec<f64>,
    pub horizon: f64,
    #[serde(default = "default_controls")]
    pub controls: ControlBounds,
    /// Audit and grid box, one `[lo, hi]` per state axis.
    pub domain: Vec<(f64, f64)>,
    #[serde(default)]
    pub terminal: Terminal,
}

fn default_controls() -> ControlBounds {
    ControlBounds { lower: vec![0.0], upper: vec![0.0] }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Terminal {
    /// `h(x) = x_0`.
    #[default]
    Identity,
    /// `h(x) = |x|^2`.
    Square,
    Constant { value: f64 },
    /// `h(x) = slope * x_0 + offset`.
    Linear { slope: f64, offset: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverConfig {
    Linear {
        coef: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        audit_y: Option<(f64, f64)>,
    },
    CubicMonotone {
        cubic: f64,
        #[serde(default)]
        linear: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        audit_y: Option<(f64, f64)>,
    },
    Abs {
        scale: f64,
        #[serde(default)]
        audit_y: Option<(f64, f64)>,
    },
    Quadratic {
        scale: f64,
        #[serde(default)]
        audit_y: Option<(f64, f64)>,
    },
    EpsteinZin {
        delta: f64,
        gamma: f64,
        psi: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverBlock {
    #[serde(flatten)]
    pub core: SolverConfig,
    pub audit_budget: usize,
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self { core: SolverConfig::default(), audit_budget: 4096 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Constant control for simulate, solve-bsde and compare; the midpoint of
    /// the control box when absent.
    pub policy: Option<Vec<f64>>,
    /// Paths written to CSV exports.
    pub max_paths_csv: usize,
    /// Seeds of the determinism probe.
    pub seeds: Vec<u64>,
    /// Moment order of the simulate report.
    pub moment_q: u32,
    /// Added to the driver and the terminal of the upper spec in `compare`.
    pub compare_shift: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { policy: None, max_paths_csv: 100, seeds: vec![1, 2, 3], moment_q: 1, compare_shift: 1.0 }
    }
}

const TOP: &[&str] = &["name", "problem", "driver", "solver", "run"];
const EZ_MARKET: &[&str] = &["kind", "r", "b", "sigma", "x0", "a1", "a2", "pi_bounds", "horizon", "floor_fraction", "cap_factor"];
const SDE: &[&str] = &["kind", "model", "mu", "sigma", "drift", "x0", "horizon", "controls", "domain", "terminal"];
const SOLVER: &[&str] = &[
    "n_paths",
    "steps",
    "seed",
    "grid_nodes",
    "control_grid",
    "time_steps",
    "cfl_target",
    "trust_margin",
    "boundary",
    "regression",
    "tol_factor",
    "budget",
    "pieces",
    "probes",
    "dpp_probes",
    "dpp_delta",
    "export_layers",
    "audit_budget",
];
const RUN: &[&str] = &["policy", "max_paths_csv", "seeds", "moment_q", "compare_shift"];

#[derive(Default)]
struct Checker {
    errors: Vec<SchemaError>,
}

type Rule = fn(f64) -> Option<&'static str>;

fn positive(v: f64) -> Option<&'static str> {
    (!(v > 0.0)).then_some("must be positive")
}

fn non_negative(v: f64) -> Option<&'static str> {
    (!(v >= 0.0)).then_some("must be non-negative")
}

fn any(_: f64) -> Option<&'static str> {
    None
}

impl Checker {
    fn push(&mut self, pointer: String, message: impl Into<String>) {
        self.errors.push(SchemaError { pointer, message: message.into() });
    }

    fn object<'a>(&mut self, v: &'a Value, ptr: &str, allowed: &[&str]) -> Option<&'a Map<String, Value>> {
        match v.as_object() {
            Some(m) => {
                for k in m.keys() {
                    if !allowed.contains(&k.as_str()) {
                        self.push(format!("{ptr}/{k}"), "unknown key");
                    }
                }
                Some(m)
            }
            None => {
                self.push(ptr.to_string(), "expected an object");
                None
            }
        }
    }

    fn number(&mut self, m: &Map<String, Value>, ptr: &str, key: &str, required: bool, rule: Rule) -> Option<f64> {
        let p = format!("{ptr}/{key}");
        match m.get(key) {
            None if required => {
                self.push(p, "missing required number");
                None
            }
            None => None,
            Some(v) => match v.as_f64() {
                Some(x) if x.is_finite() => {
                    if let Some(msg) = rule(x) {
                        self.push(p, msg);
                    }
                    Some(x)
                }
                _ => {
                    self.push(p, "expected a finite number");
                    None
                }
            },
        }
    }

    fn integer(&mut self, m: &Map<String, Value>, ptr: &str, key: &str, min: u64) {
        let p = format!("{ptr}/{key}");
        if let Some(v) = m.get(key) {
            match v.as_u64() {
                Some(x) if x >= min => {}
                Some(_) => self.push(p, format!("must be an integer >= {min}")),
                None => self.push(p, "expected a non-negative integer"),
            }
        }
    }

    fn numbers(&mut self, v: Option<&Value>, ptr: &str, len: Option<usize>, rule: Rule) -> Option<Vec<f64>> {
        let v = v?;
        let Some(arr) = v.as_array() else {
            self.push(ptr.to_string(), "expected an array of numbers");
            return None;
        };
        if let Some(n) = len {
            if arr.len() != n {
                self.push(ptr.to_string(), format!("expected {n} entries, got {}", arr.len()));
            }
        }
        let mut out = Vec::new();
        for (i, e) in arr.iter().enumerate() {
            match e.as_f64() {
                Some(x) if x.is_finite() => {
                    if let Some(msg) = rule(x) {
                        self.push(format!("{ptr}/{i}"), msg);
                    }
                    out.push(x);
                }
                _ => self.push(format!("{ptr}/{i}"), "expected a finite number"),
            }
        }
        Some(out)
    }

    fn integers(&mut self, v: Option<&Value>, ptr: &str, min: u64) {
        let Some(v) = v else { return };
        match v.as_array() {
            Some(arr) => {
                for (i, e) in arr.iter().enumerate() {
                    if !e.as_u64().is_some_and(|x| x >= min) {
                        self.push(format!("{ptr}/{i}"), format!("expected an integer >= {min}"));
                    }
                }
            }
            None => self.push(ptr.to_string(), "expected an array of integers"),
        }
    }

    fn interval(&mut self, v: Option<&Value>, ptr: &str) -> Option<(f64, f64)> {
        let xs = self.numbers(v, ptr, Some(2), any)?;
        if xs.len() == 2 && !(xs[0] < xs[1]) {
            self.push(ptr.to_string(), "interval needs lo < hi");
        }
        (xs.len() == 2).then(|| (xs[0], xs[1]))
    }

    fn one_of(&mut self, m: &Map<String, Value>, ptr: &str, key: &str, allowed: &[&str], required: bool) -> Option<String> {
        let p = format!("{ptr}/{key}");
        match m.get(key) {
            None if required => {
                self.push(p, format!("missing; one of {allowed:?}"));
                None
            }
            None => None,
            Some(Value::String(s)) if allowed.contains(&s.as_str()) => Some(s.clone()),
            Some(_) => {
                self.push(p, format!("expected one of {allowed:?}"));
                None
            }
        }
    }

    fn curve(&mut self, m: &Map<String, Value>, ptr: &str, key: &str) {
        let p = format!("{ptr}/{key}");
        match m.get(key) {
            None => self.push(p, "missing required coefficient"),
            Some(Value::Number(_)) => {
                self.number(m, ptr, key, true, any);
            }
            Some(v @ Value::Object(_)) => {
                if let Some(o) = self.object(v, &p, &["start", "end"]) {
                    self.number(o, &p, "start", true, any);
                    self.number(o, &p, "end", true, any);
                }
            }
            Some(_) => self.push(p, "expected a number or {start, end}"),
        }
    }

    fn market(&mut self, m: &Map<String, Value>, ptr: &str) {
        for k in ["r", "b", "sigma"] {
            self.curve(m, ptr, k);
        }
        self.number(m, ptr, "x0", true, positive);
        let a1 = self.number(m, ptr, "a1", true, non_negative);
        let a2 = self.number(m, ptr, "a2", true, positive);
        if let (Some(a1), Some(a2)) = (a1, a2) {
            if !(a1 < a2) {
                self.push(format!("{ptr}/a2"), "consumption bounds need a1 < a2");
            }
        }
        self.interval(m.get("pi_bounds"), &format!("{ptr}/pi_bounds"));
        self.number(m, ptr, "horizon", true, positive);
        self.number(m, ptr, "floor_fraction", false, |v| (!(v > 0.0 && v < 1.0)).then_some("must lie in (0, 1)"));
        self.number(m, ptr, "cap_factor", false, |v| (!(v > 1.0)).then_some("must exceed 1"));
    }

    fn sde(&mut self, m: &Map<String, Value>, ptr: &str) {
        self.one_of(m, ptr, "model", &["zero", "gbm", "arithmetic"], true);
        for k in ["mu", "drift"] {
            self.number(m, ptr, k, false, any);
        }
        self.number(m, ptr, "sigma", false, any);
        self.number(m, ptr, "horizon", true, positive);
        let x0 = self.numbers(m.get("x0"), &format!("{ptr}/x0"), None, any);
        if m.get("x0").is_none() {
            self.push(format!("{ptr}/x0"), "missing required initial state");
        }
        match m.get("domain") {
            None => self.push(format!("{ptr}/domain"), "missing required state box"),
            Some(Value::Array(a)) => {
                if let Some(x0) = &x0 {
                    if a.len() != x0.len() {
                        self.push(format!("{ptr}/domain"), "one interval per state component");
                    }
                }
                for (i, e) in a.iter().enumerate() {
                    self.interval(Some(e), &format!("{ptr}/domain/{i}"));
                }
            }
            Some(_) => self.push(format!("{ptr}/domain"), "expected an array of [lo, hi]"),
        }
        if let Some(c) = m.get("controls") {
            let p = format!("{ptr}/controls");
            if let Some(o) = self.object(c, &p, &["lower", "upper"]) {
                let lo = self.numbers(o.get("lower"), &format!("{p}/lower"), None, any);
                let hi = self.numbers(o.get("upper"), &format!("{p}/upper"), None, any);
                match (lo, hi) {
                    (Some(l), Some(h)) if l.len() == h.len() => {
                        if l.iter().zip(&h).any(|(a, b)| a > b) {
                            self.push(p, "need lower <= upper componentwise");
                        }
                    }
                    (Some(_), Some(_)) => self.push(p, "lower and upper need the same length"),
                    _ => self.push(p, "needs lower and upper"),
                }
            }
        }
        if let Some(t) = m.get("terminal") {
            let p = format!("{ptr}/terminal");
            if let Some(o) = self.object(t, &p, &["kind", "value", "slope", "offset"]) {
                match self.one_of(o, &p, "kind", &["identity", "square", "constant", "linear"], true).as_deref() {
                    Some("constant") => {
                        self.number(o, &p, "value", true, any);
                    }
                    Some("linear") => {
                        self.number(o, &p, "slope", true, any);
                        self.number(o, &p, "offset", true, any);
                    }
                    _ => {}
                }
            }
        }
    }

    fn driver(&mut self, v: &Value) {
        let ptr = "/driver";
        let Some(m) = v.as_object() else {
            self.push(ptr.into(), "expected an object");
            return;
        };
        let names = ["linear", "cubic_monotone", "abs", "quadratic", "epstein_zin"];
        let Some(name) = self.one_of(m, ptr, "name", &names, true) else { return };
        let keys: &[&str] = match name.as_str() {
            "linear" => &["name", "coef", "offset", "audit_y"],
            "cubic_monotone" => &["name", "cubic", "linear", "offset", "audit_y"],
            "abs" | "quadratic" => &["name", "scale", "audit_y"],
            _ => &["name", "delta", "gamma", "psi"],
        };
        self.object(v, ptr, keys);
        match name.as_str() {
            "linear" => {
                self.number(m, ptr, "coef", true, any);
                self.number(m, ptr, "offset", false, any);
            }
            "cubic_monotone" => {
                self.number(m, ptr, "cubic", true, non_negative);
                self.number(m, ptr, "linear", false, any);
                self.number(m, ptr, "offset", false, any);
            }
            "abs" | "quadratic" => {
                self.number(m, ptr, "scale", true, any);
            }
            _ => {
                self.number(m, ptr, "delta", true, positive);
                self.number(m, ptr, "gamma", true, |g| {
                    (!(g > 0.0 && g != 1.0)).then_some("gamma must satisfy 0 < gamma != 1")
                });
                self.number(m, ptr, "psi", true, |p| {
                    (!(p > 0.0 && p != 1.0)).then_some("psi must satisfy 0 < psi != 1")
                });
            }
        }
        if m.contains_key("audit_y") {
            self.interval(m.get("audit_y"), &format!("{ptr}/audit_y"));
        }
    }

    fn solver(&mut self, v: &Value) {
        let ptr = "/solver";
        let Some(m) = self.object(v, ptr, SOLVER) else { return };
        self.integer(m, ptr, "n_paths", 1);
        self.integer(m, ptr, "steps", 1);
        self.integer(m, ptr, "seed", 0);
        self.integer(m, ptr, "grid_nodes", 5);
        self.integers(m.get("control_grid"), &format!("{ptr}/control_grid"), 1);
        if m.get("time_steps").is_some_and(|v| !v.is_null()) {
            self.integer(m, ptr, "time_steps", 1);
        }
        self.number(m, ptr, "cfl_target", false, |v| (!(v > 0.0 && v <= 1.0)).then_some("must lie in (0, 1]"));
        self.number(m, ptr, "trust_margin", false, |v| (!(v >= 0.0 && v < 0.5)).then_some("must lie in [0, 0.5)"));
        self.one_of(m, ptr, "boundary", &["dirichlet", "extrapolate"], false);
        if let Some(r) = m.get("regression") {
            let p = format!("{ptr}/regression");
            if let Some(o) = self.object(r, &p, &["basis", "ridge"]) {
                self.number(o, &p, "ridge", false, non_negative);
                if let Some(b) = o.get("basis") {
                    let bp = format!("{p}/basis");
                    if let Some(bo) = self.object(b, &bp, &["kind", "degree", "k"]) {
                        match self.one_of(bo, &bp, "kind", &["polynomial", "bins"], true).as_deref() {
                            Some("polynomial") => self.integer(bo, &bp, "degree", 0),
                            Some("bins") => self.integer(bo, &bp, "k", 1),
                            _ => {}
                        }
                    }
                }
            }
        }
        self.number(m, ptr, "tol_factor", false, positive);
        self.integer(m, ptr, "budget", 1);
        self.integer(m, ptr, "pieces", 1);
        self.numbers(m.get("probes"), &format!("{ptr}/probes"), None, any);
        self.numbers(m.get("dpp_probes"), &format!("{ptr}/dpp_probes"), None, any);
        self.number(m, ptr, "dpp_delta", false, |v| (!(v > 0.0 && v <= 1.0)).then_some("must lie in (0, 1]"));
        self.integer(m, ptr, "export_layers", 2);
        self.integer(m, ptr, "audit_budget", 1);
    }

    fn run(&mut self, v: &Value) {
        let ptr = "/run";
        let Some(m) = self.object(v, ptr, RUN) else { return };
        if m.get("policy").is_some_and(|v| !v.is_null()) {
            self.numbers(m.get("policy"), &format!("{ptr}/policy"), None, any);
        }
        self.integer(m, ptr, "max_paths_csv", 0);
        self.integers(m.get("seeds"), &format!("{ptr}/seeds"), 0);
        self.integer(m, ptr, "moment_q", 1);
        self.number(m, ptr, "compare_shift", false, non_negative);
    }
}

/// Every schema violation of a scenario document, in document order.
pub fn validate(doc: &Value) -> Vec<SchemaError> {
    let mut c = Checker::default();
    let Some(top) = c.object(doc, "", TOP) else { return c.errors };
    if let Some(n) = top.get("name") {
        if !n.is_string() {
            c.push("/name".into(), "expected a string");
        }
    }
    match top.get("problem") {
        None => c.push("/problem".into(), "missing required block"),
        Some(p) => {
            if let Some(m) = p.as_object() {
                match c.one_of(m, "/problem", "kind", &["ez_market", "sde"], true).as_deref() {
                    Some("ez_market") => {
                        c.object(p, "/problem", EZ_MARKET);
                        c.market(m, "/problem");
                    }
                    Some(_) => {
                        c.object(p, "/problem", SDE);
                        c.sde(m, "/problem");
                    }
                    None => {}
                }
            } else {
                c.push("/problem".into(), "expected an object");
            }
        }
    }
    match top.get("driver") {
        None => c.push("/driver".into(), "missing required block"),
        Some(d) => c.driver(d),
    }
    if let (Some(Value::Object(p)), Some(Value::Object(d))) = (top.get("problem"), top.get("driver")) {
        let ez_problem = p.get("kind").and_then(Value::as_str) == Some("ez_market");
        let ez_driver = d.get("name").and_then(Value::as_str) == Some("epstein_zin");
        if ez_problem != ez_driver {
            c.push("/driver/name".into(), "the epstein_zin driver goes with an ez_market problem and only with it");
        }
    }
    if let Some(s) = top.get("solver") {
        c.solver(s);
    }
    if let Some(r) = top.get("run") {
        c.run(r);
    }
    c.errors
}

/// Validates and resolves a scenario document.
pub fn parse_value(doc: &Value) -> Result<ScenarioConfig, ConfigError> {
    let errors = validate(doc);
    if !errors.is_empty() {
        return Err(ConfigError::Schema(errors));
    }
    serde_json::from_value(doc.clone())
        .map_err(|e| ConfigError::Schema(vec![SchemaError { pointer: String::new(), message: e.to_string() }]))
}

pub fn parse_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
    parse_value(&serde_json::from_str(text)?)
}

pub fn parse_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
    parse_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EZ: &str = r#"{
        "problem": {"kind": "ez_market", "r": 0.02, "b": 0.05, "sigma": 0.2, "x0": 1.0, "a1": 0.01, "a2": 1.0, "horizon": 1.0},
        "driver": {"name": "epstein_zin", "delta": 0.1, "gamma": 2.0, "psi": 2.0}
    }"#;

    #[test]
    fn minimal_ez_gets_defaults() {
        let c = parse_str(EZ).unwrap();
        assert_eq!(c.solver.core.n_paths, 100_000);
        assert_eq!(c.solver.core.control_grid, vec![9, 9]);
        assert_eq!(c.run.seeds, vec![1, 2, 3]);
        match c.problem {
            ProblemConfig::EzMarket(m) => assert_eq!(m.pi_bounds, (-1.0, 1.0)),
            _ => panic!("wrong problem kind"),
        }
    }

    #[test]
    fn gamma_one_is_rejected() {
        let doc = EZ.replace("\"gamma\": 2.0", "\"gamma\": 1.0");
        let Err(ConfigError::Schema(errs)) = parse_str(&doc) else { panic!("accepted gamma = 1") };
        assert!(errs.iter().any(|e| e.pointer == "/driver/gamma" && e.message.contains("gamma != 1")), "{errs:?}");
    }

    #[test]
    fn all_errors_are_listed() {
        let doc = EZ
            .replace("\"sigma\": 0.2", "\"sigma_typo\": 0.2")
            .replace("\"x0\": 1.0", "\"x0\": -1.0");
        let Err(ConfigError::Schema(errs)) = parse_str(&doc) else { panic!("accepted") };
        let ptrs: Vec<&str> = errs.iter().map(|e| e.pointer.as_str()).collect();
        assert!(ptrs.contains(&"/problem/sigma_typo"));
        assert!(ptrs.contains(&"/problem/sigma"));
        assert!(ptrs.contains(&"/problem/x0"));
    }

    #[test]
    fn sde_problem_parses() {
        let doc = r#"{
            "problem": {"kind": "sde", "model": "gbm", "mu": 0.05, "sigma": 0.2, "x0": [1.0], "horizon": 1.0,
                        "domain": [[0.0, 5.0]]},
            "driver": {"name": "linear", "coef": -0.5},
            "solver": {"n_paths": 1000, "regression": {"basis": {"kind": "bins", "k": 20}}}
        }"#;
        let c = parse_str(doc).unwrap();
        assert_eq!(c.solver.core.n_paths, 1000);
        assert_eq!(c.solver.core.steps, 200);
    }

    #[test]
    fn mismatched_driver_is_rejected() {
        let doc = EZ.replace(r#""name": "epstein_zin", "delta": 0.1, "gamma": 2.0, "psi": 2.0"#, r#""name": "linear", "coef": 1.0"#);
        let Err(ConfigError::Schema(errs)) = parse_str(&doc) else { panic!("accepted") };
        assert!(errs.iter().any(|e| e.pointer == "/driver/name"));
    }
}
