//! Dynamic-programming checks: the HJB value against the backward semigroup,
//! brute-force search over piecewise-constant controls, and regularity.

use serde::Serialize;
use thiserror::Error;

use crate::bsde::{solve_bsde, solve_with_terminal, BsdeError};
use crate::hjb::{ControlGrid, HjbError, ValueGrid};
use crate::problem::{ControlProblem, McConfig};
use crate::sde::{simulate_from, simulate_window, ControlPolicy, InitialState, SdeError};

#[derive(Debug, Error)]
pub enum DppError {
    #[error(transparent)]
    Bsde(#[from] BsdeError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error("brute force needs {needed} control sequences, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: usize },
    #[error("{exit_fraction} of paths left the value grid (limit 0.01)")]
    Reachability { exit_fraction: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Largest fraction of paths allowed outside the value grid at `t + delta`.
pub const MAX_EXIT_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SemigroupMax {
    /// `u(t, x)` read off the value grid.
    pub value: f64,
    /// `max_v G_{t,t+delta}[u(t+delta, X)]` over constant controls.
    pub semigroup: f64,
    pub stderr: f64,
    pub best_control: Vec<f64>,
    pub exit_fraction: f64,
    /// `value - semigroup`.
    pub residual: f64,
}

/// `u(t,x) - max_v G_{t, t+delta}[u(t+delta, X^{t,x;v})]` with constant
/// controls from `cgrid` and common random numbers across candidates.
pub fn dpp_residual(
    value: &ValueGrid,
    problem: &ControlProblem,
    t_index: usize,
    x: &[f64],
    delta_steps: usize,
    cgrid: &ControlGrid,
    mc: &McConfig,
) -> Result<SemigroupMax, DppError> {
    let g = &value.grid;
    let u_tx = value.interp(t_index, x);
    if delta_steps == 0 {
        return Ok(SemigroupMax {
            value: u_tx,
            semigroup: u_tx,
            stderr: 0.0,
            best_control: Vec::new(),
            exit_fraction: 0.0,
            residual: 0.0,
        });
    }
    let k1 = t_index + delta_steps;
    if k1 > g.time_steps {
        return Err(DppError::InvalidInput(format!("t_index + delta_steps = {k1} beyond {} layers", g.time_steps)));
    }
    let (t, t1) = (g.t(t_index), g.t(k1));
    let steps = mc.steps_for(t1 - t);
    let n = problem.sde.dim_state;
    let mut best: Option<(f64, f64, usize, f64)> = None;
    for (ci, v) in cgrid.points.iter().enumerate() {
        let policy = ControlPolicy::Constant(v.clone());
        let bundle =
            simulate_window(&problem.sde, &policy, t, t1, &InitialState::Point(x.to_vec()), steps, mc.n_paths, mc.seed)?;
        let end = bundle.row(steps);
        let exits = end.chunks(n).filter(|s| !g.in_box(s)).count();
        let exit_fraction = exits as f64 / mc.n_paths as f64;
        if exit_fraction > MAX_EXIT_FRACTION {
            return Err(DppError::Reachability { exit_fraction });
        }
        let eta: Vec<f64> = end.chunks(n).map(|s| value.interp(k1, s)).collect();
        let sol = solve_with_terminal(&bundle, &problem.spec, &policy, steps, &eta, &mc.regression)?;
        if best.is_none_or(|b| sol.y0 > b.0) {
            best = Some((sol.y0, sol.y0_stderr, ci, exit_fraction));
        }
    }
    let (semigroup, stderr, ci, exit_fraction) =
        best.ok_or_else(|| DppError::InvalidInput("empty control grid".into()))?;
    Ok(SemigroupMax {
        value: u_tx,
        semigroup,
        stderr,
        best_control: cgrid.points[ci].clone(),
        exit_fraction,
        residual: u_tx - semigroup,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToleranceDecomposition {
    pub mc_stderr: f64,
    /// `tol_factor * mc_stderr`.
    pub mc_term: f64,
    /// `|u_fine - u_coarse|` at the probe.
    pub grid_term: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DppProbe {
    pub t: f64,
    pub x: Vec<f64>,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// `u >= max_v G[u] - tolerance`.
    pub one_sided_pass: bool,
    pub decomposition: ToleranceDecomposition,
    pub value: f64,
    pub semigroup: f64,
    pub best_control: Vec<f64>,
    pub exit_fraction: f64,
    /// Reason the probe was not evaluated.
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DppSummary {
    pub pass: bool,
    pub one_sided_pass: bool,
    pub max_abs_residual: f64,
    pub evaluated: usize,
    pub skipped: usize,
    pub delta: f64,
    pub tolerance_rule: String,
    pub boundary_note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DppReport {
    pub probes: Vec<DppProbe>,
    pub summary: DppSummary,
}

impl DppReport {
    pub fn pass(&self) -> bool {
        self.summary.pass
    }
}

/// Checks the DPP at each `(t, x)` probe over a horizon `delta`. The grid term
/// of the tolerance compares `fine` with `coarse` when given.
#[allow(clippy::too_many_arguments)]
pub fn verify_dpp(
    fine: &ValueGrid,
    coarse: Option<&ValueGrid>,
    problem: &ControlProblem,
    probes: &[(f64, Vec<f64>)],
    delta: f64,
    cgrid: &ControlGrid,
    mc: &McConfig,
) -> Result<DppReport, DppError> {
    let g = &fine.grid;
    let mut out = Vec::with_capacity(probes.len());
    for (t, x) in probes {
        let k = g.layer_at(*t);
        let delta_steps = g.layer_at(g.t(k) + delta) - k;
        let grid_term = coarse.map_or(0.0, |c| (fine.at(g.t(k), x) - c.at(g.t(k), x)).abs());
        match dpp_residual(fine, problem, k, x, delta_steps, cgrid, mc) {
            Ok(r) => {
                let mc_term = mc.tol_factor * r.stderr;
                let tolerance = mc_term + grid_term;
                out.push(DppProbe {
                    t: g.t(k),
                    x: x.clone(),
                    residual: r.residual,
                    tolerance,
                    pass: r.residual.abs() <= tolerance,
                    one_sided_pass: r.residual >= -tolerance,
                    decomposition: ToleranceDecomposition { mc_stderr: r.stderr, mc_term, grid_term },
                    value: r.value,
                    semigroup: r.semigroup,
                    best_control: r.best_control,
                    exit_fraction: r.exit_fraction,
                    skipped: None,
                });
            }
            Err(DppError::Reachability { exit_fraction }) => out.push(DppProbe {
                t: g.t(k),
                x: x.clone(),
                residual: f64::NAN,
                tolerance: f64::NAN,
                pass: false,
                one_sided_pass: false,
                decomposition: ToleranceDecomposition { mc_stderr: f64::NAN, mc_term: f64::NAN, grid_term },
                value: fine.at(g.t(k), x),
                semigroup: f64::NAN,
                best_control: Vec::new(),
                exit_fraction,
                skipped: Some(format!("{exit_fraction} of paths left the grid")),
            }),
            Err(e) => return Err(e),
        }
    }
    let evaluated: Vec<&DppProbe> = out.iter().filter(|p| p.skipped.is_none()).collect();
    let summary = DppSummary {
        pass: !evaluated.is_empty() && evaluated.iter().all(|p| p.pass),
        one_sided_pass: !evaluated.is_empty() && evaluated.iter().all(|p| p.one_sided_pass),
        max_abs_residual: evaluated.iter().map(|p| p.residual.abs()).fold(0.0, f64::max),
        evaluated: evaluated.len(),
        skipped: out.len() - evaluated.len(),
        delta,
        tolerance_rule: format!("{} * stderr + |u_fine - u_coarse|", mc.tol_factor),
        boundary_note: fine.meta.boundary_note.to_string(),
    };
    Ok(DppReport { probes: out, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BruteForce {
    pub value: f64,
    pub stderr: f64,
    /// Control on each of the `pieces` intervals.
    pub best: Vec<Vec<f64>>,
    pub evaluated: usize,
}

/// Policy holding `seq[j]` on the `j`-th of `seq.len()` equal pieces of
/// `[t, T]`, with switches placed half a step before the first step of each
/// piece so that grid times never sit on a breakpoint.
pub fn piecewise_policy(seq: &[Vec<f64>], t: f64, horizon: f64, steps: usize) -> ControlPolicy {
    if seq.len() == 1 {
        return ControlPolicy::Constant(seq[0].clone());
    }
    let dt = (horizon - t) / steps as f64;
    let p = seq.len();
    let breaks: Vec<f64> = (1..p)
        .map(|j| {
            let k = ((j * steps) as f64 / p as f64).round();
            t + (k - 0.5) * dt
        })
        .collect();
    ControlPolicy::Piecewise { breakpoints: breaks, values: seq.to_vec() }
}

/// `max` of `y0` over all piecewise-constant control sequences with `pieces`
/// pieces from `cgrid`, each solved on the same random numbers.
pub fn brute_force_value(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    cgrid: &ControlGrid,
    pieces: usize,
    mc: &McConfig,
) -> Result<BruteForce, DppError> {
    if pieces == 0 || cgrid.is_empty() {
        return Err(DppError::InvalidInput("need at least one piece and one control".into()));
    }
    let k = cgrid.len() as u128;
    let needed = (pieces as u128).saturating_mul(k.checked_pow(pieces as u32).unwrap_or(u128::MAX));
    if needed > mc.budget as u128 {
        return Err(DppError::BudgetExceeded { needed, budget: mc.budget });
    }
    let horizon = problem.horizon();
    let steps = mc.steps_for(horizon - t);
    let total = k.pow(pieces as u32) as usize;
    let mut best: Option<BruteForce> = None;
    for code in 0..total {
        let mut rem = code;
        let seq: Vec<Vec<f64>> = (0..pieces)
            .map(|_| {
                let i = rem % cgrid.len();
                rem /= cgrid.len();
                cgrid.points[i].clone()
            })
            .collect();
        let policy = piecewise_policy(&seq, t, horizon, steps);
        let bundle =
            simulate_from(&problem.sde, &policy, t, &InitialState::Point(x.to_vec()), steps, mc.n_paths, mc.seed)?;
        let sol = solve_bsde(&bundle, &problem.spec, &policy, &mc.regression)?;
        if best.as_ref().is_none_or(|b| sol.y0 > b.value) {
            best = Some(BruteForce { value: sol.y0, stderr: sol.y0_stderr, best: seq, evaluated: 0 });
        }
    }
    let mut b = best.expect("at least one sequence");
    b.evaluated = total;
    Ok(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// The standard error is too large or too poorly estimated to judge.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeterminismReport {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub spread: f64,
    pub pooled_stderr: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

/// Below this many paths the sample standard error is not trusted.
pub const MIN_RELIABLE_PATHS: usize = 1000;
/// Relative standard error above which a spread cannot be judged.
pub const MAX_RELATIVE_STDERR: f64 = 0.05;

/// Spread of [`brute_force_value`] across independent seeds against
/// `tol_factor` pooled standard errors.
pub fn determinism_probe(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    cgrid: &ControlGrid,
    pieces: usize,
    seeds: &[u64],
    mc: &McConfig,
) -> Result<DeterminismReport, DppError> {
    if seeds.len() < 3 {
        return Err(DppError::InvalidInput("determinism probe needs at least 3 seeds".into()));
    }
    let mut values = Vec::new();
    let mut stderrs = Vec::new();
    for &s in seeds {
        let cfg = McConfig { seed: s, ..mc.clone() };
        let b = brute_force_value(problem, t, x, cgrid, pieces, &cfg)?;
        values.push(b.value);
        stderrs.push(b.stderr);
    }
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = hi - lo;
    let pooled = (stderrs.iter().map(|s| s * s).sum::<f64>() / stderrs.len() as f64).sqrt();
    let threshold = mc.tol_factor * pooled;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let verdict = if spread == 0.0 {
        Verdict::Pass
    } else if mc.n_paths < MIN_RELIABLE_PATHS || pooled > MAX_RELATIVE_STDERR * mean.abs() {
        Verdict::Inconclusive
    } else if spread <= threshold {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(DeterminismReport { seeds: seeds.to_vec(), values, stderrs, spread, pooled_stderr: pooled, threshold, verdict })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Regularity {
    /// Largest `|u(t, x') - u(t, x)| / |x' - x|` between adjacent trust-region nodes.
    pub lipschitz_x: f64,
    /// Largest `|u(t + lag, x) - u(t, x)| / sqrt(lag)` at trust-region nodes.
    pub holder_t: f64,
    pub lag: f64,
    /// Smallest `C` with `|u| <= C (1 + |x|)` at every node and layer.
    pub growth_c: f64,
}

/// Discrete difference quotients of a value surface. The time quotient uses a
/// fixed lag (rounded to whole layers) so it is comparable across refinements.
pub fn regularity_probe(value: &ValueGrid, lag: f64) -> Regularity {
    let g = &value.grid;
    let nt = g.time_steps;
    let trust = g.trust_nodes();
    let in_trust: std::collections::HashSet<usize> = trust.iter().copied().collect();
    let mut lip = 0.0f64;
    for k in 0..=nt {
        for &node in &trust {
            let idx = g.index(node);
            for (axis, ax) in g.axes.iter().enumerate() {
                if idx[axis] + 1 >= ax.nodes {
                    continue;
                }
                let mut j = idx;
                j[axis] += 1;
                let nb = g.flat(j);
                if !in_trust.contains(&nb) {
                    continue;
                }
                let dx = ax.x(idx[axis] + 1) - ax.x(idx[axis]);
                lip = lip.max((value.value(k, nb) - value.value(k, node)).abs() / dx);
            }
        }
    }
    let lag_steps = ((lag / g.dt()).round() as usize).clamp(1, nt);
    let lag_eff = g.t(lag_steps) - g.t(0);
    let mut hold = 0.0f64;
    for k in 0..=(nt - lag_steps) {
        for &node in &trust {
            hold = hold.max((value.value(k + lag_steps, node) - value.value(k, node)).abs() / lag_eff.sqrt());
        }
    }
    let mut growth = 0.0f64;
    for k in 0..=nt {
        for node in 0..g.n_nodes() {
            let x = g.node_x(node);
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            growth = growth.max(value.value(k, node).abs() / (1.0 + norm));
        }
    }
    Regularity { lipschitz_x: lip, holder_t: hold, lag: lag_eff, growth_c: growth }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::{AuditBox, LinearDriver};
    use crate::hjb::{solve_hjb, Axis, Boundary, SpaceTimeGrid};
    use crate::sde::{ControlSet, ControlledSDE};
    use std::sync::Arc;

    fn toy() -> ControlProblem {
        let set = ControlSet::new(vec![-1.0], vec![1.0]).unwrap();
        let sde = ControlledSDE::arithmetic(0.0, 0.0, 1.0, set);
        let spec = LinearDriver::spec(0.0, 0.0, AuditBox::new(1, 1, 1))
            .with_terminal(Arc::new(|x| x[0]), 1.0)
            .require_audit(128)
            .unwrap();
        ControlProblem::new("toy", sde, spec)
    }

    fn mc(n: usize) -> McConfig {
        McConfig { n_paths: n, steps_per_unit: 20.0, seed: 3, ..Default::default() }
    }

    #[test]
    fn two_candidate_enumeration() {
        let p = toy();
        let cg = ControlGrid::uniform(&p.sde.controls, &[2]).unwrap();
        let b = brute_force_value(&p, 0.0, &[0.0], &cg, 1, &mc(8)).unwrap();
        assert!((b.value - 1.0).abs() < 1e-12);
        assert_eq!(b.best, vec![vec![1.0]]);
        assert_eq!(b.evaluated, 2);
    }

    #[test]
    fn budget_is_enforced() {
        let p = toy();
        let cg = ControlGrid::uniform(&p.sde.controls, &[9]).unwrap();
        let r = brute_force_value(&p, 0.0, &[0.0], &cg, 4, &mc(8));
        assert!(matches!(r, Err(DppError::BudgetExceeded { needed: 26244, .. })));
    }

    #[test]
    fn more_pieces_never_lose() {
        let p = toy();
        let cg = ControlGrid::uniform(&p.sde.controls, &[3]).unwrap();
        let one = brute_force_value(&p, 0.0, &[0.0], &cg, 1, &mc(8)).unwrap();
        let two = brute_force_value(&p, 0.0, &[0.0], &cg, 2, &mc(8)).unwrap();
        assert!(two.value >= one.value - 1e-12);
    }

    #[test]
    fn deterministic_problem_has_zero_spread() {
        let p = toy();
        let cg = ControlGrid::uniform(&p.sde.controls, &[3]).unwrap();
        let r = determinism_probe(&p, 0.0, &[0.2], &cg, 1, &[1, 2, 3], &mc(16)).unwrap();
        assert_eq!(r.spread, 0.0);
        assert_eq!(r.verdict, Verdict::Pass);
    }

    #[test]
    fn zero_delta_residual_is_zero() {
        let p = toy();
        let cg = ControlGrid::uniform(&p.sde.controls, &[3]).unwrap();
        let grid = SpaceTimeGrid::new(1.0, 10, vec![Axis::new(-3.0, 3.0, 31)], Boundary::Dirichlet)
            .unwrap()
            .with_cfl_steps(&p.sde, &cg, 0.9);
        let v = solve_hjb(&grid, &p.sde, &p.spec, &cg).unwrap();
        let r = dpp_residual(&v, &p, 3, &[0.4], 0, &cg, &mc(8)).unwrap();
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn linear_surface_regularity() {
        let p = toy();
        let sde = ControlledSDE::zero(1, 1.0);
        let grid = SpaceTimeGrid::new(1.0, 4, vec![Axis::new(-1.0, 1.0, 11)], Boundary::Dirichlet).unwrap();
        let v = solve_hjb(&grid, &sde, &p.spec, &ControlGrid::single(vec![0.0])).unwrap();
        let r = regularity_probe(&v, 0.25);
        assert!((r.lipschitz_x - 1.0).abs() < 1e-12);
        assert_eq!(r.holder_t, 0.0);
    }
}
