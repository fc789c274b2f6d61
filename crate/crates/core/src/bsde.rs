//! Backward recursion for `Y_t = h(X_T) + int_t^T f(s,X,Y,Z,v) ds - int_t^T Z dB`
//! by least-squares Monte Carlo with an implicit step in `y`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::aggregator::{DriverError, DriverSpec};
use crate::output::fmt_f64;
use crate::regression::{self, RegressionConfig};
use crate::sde::{ControlPolicy, PathBundle, CHUNK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BsdeError {
    #[error("time step {dt} too large for monotonicity constant {mu_plus}: need dt * mu+ < 1")]
    TimeStepTooLarge { dt: f64, mu_plus: f64 },
    #[error("regression failed at step {step}: {detail}")]
    RegressionError { step: usize, detail: String },
    #[error("no sign change of y - c - dt f(y) found around c={c}")]
    RootBracketFailure { c: f64 },
    #[error("driver spec '{0}' has not passed a condition audit")]
    NotAudited(String),
    #[error("comparison premise violated: {0}")]
    PremiseViolated(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Driver(#[from] DriverError),
}

const MAX_EXPANSIONS: usize = 200;
const MAX_ITER: usize = 200;

fn tolerance(c: f64, y: f64) -> f64 {
    1e-12 * c.abs().max(y.abs()).max(1.0)
}

/// Root of `y = c + dt * f(y)` for a driver with one-sided constant `mu_plus`.
pub fn implicit_y_step<F>(c: f64, f: F, dt: f64, mu_plus: f64) -> Result<f64, BsdeError>
where
    F: Fn(f64) -> Result<f64, DriverError>,
{
    implicit_y_step_with(c, &f, None::<&fn(f64) -> Result<f64, DriverError>>, dt, mu_plus, None)
}

/// As [`implicit_y_step`], with an optional analytic derivative and an
/// optional trace receiving `|y - c - dt f(y)|` after every iterate.
pub fn implicit_y_step_with<F, D>(
    c: f64,
    f: &F,
    df: Option<&D>,
    dt: f64,
    mu_plus: f64,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<f64, BsdeError>
where
    F: Fn(f64) -> Result<f64, DriverError> + ?Sized,
    D: Fn(f64) -> Result<f64, DriverError> + ?Sized,
{
    if !(dt * mu_plus.max(0.0) < 1.0) {
        return Err(BsdeError::TimeStepTooLarge { dt, mu_plus });
    }
    if !c.is_finite() {
        return Err(BsdeError::RootBracketFailure { c });
    }
    let g = |y: f64| -> Result<f64, DriverError> { Ok(y - c - dt * f(y)?) };
    let g0 = g(c)?;
    if let Some(t) = trace.as_deref_mut() {
        t.push(g0.abs());
    }
    if g0.abs() < tolerance(c, c) {
        return Ok(c);
    }
    // g is increasing up to the one-sided bound, so the root lies on the side
    // where g changes sign
    let dir = if g0 < 0.0 { 1.0 } else { -1.0 };
    let (mut lo, mut glo) = (c, g0);
    // g(y) - g(c) >= (1 - dt mu+)(y - c) for y > c, so this step brackets the root
    let reach = g0.abs() / (1.0 - dt * mu_plus.max(0.0));
    let mut step = (reach * (1.0 + 1e-9)).max(1e-12 * c.abs().max(1.0));
    let mut hi = c + dir * step;
    let ghi;
    let mut expansions = 0;
    loop {
        match g(hi) {
            Ok(v) if v.is_finite() && v * g0 <= 0.0 => {
                ghi = v;
                break;
            }
            Ok(v) if v.is_finite() => {
                lo = hi;
                glo = v;
                step *= 2.0;
                hi = c + dir * step;
            }
            Ok(_) | Err(DriverError::DomainViolation { .. }) => {
                // shrink back toward the last admissible point
                step = 0.5 * (step + (lo - c).abs());
                hi = c + dir * step;
                if (hi - lo).abs() <= f64::EPSILON * lo.abs().max(1.0) {
                    return Err(BsdeError::RootBracketFailure { c });
                }
            }
            Err(e) => return Err(e.into()),
        }
        expansions += 1;
        if expansions > MAX_EXPANSIONS {
            return Err(BsdeError::RootBracketFailure { c });
        }
    }
    if ghi == 0.0 {
        return Ok(hi);
    }
    // a = side with g < 0, b = side with g > 0
    let (mut a, mut b) = if glo < 0.0 { (lo, hi) } else { (hi, lo) };
    let (mut ga, mut gb) = if glo < 0.0 { (glo, ghi) } else { (ghi, glo) };
    let mut y = if ga.abs() < gb.abs() { a } else { b };
    let mut gy = if ga.abs() < gb.abs() { ga } else { gb };
    for _ in 0..MAX_ITER {
        if gy.abs() < tolerance(c, y) {
            return Ok(y);
        }
        let slope = match df {
            Some(d) => Some(1.0 - dt * d(y)?),
            None => Some((gb - ga) / (b - a)),
        };
        let mut next = match slope {
            Some(s) if s.is_finite() && s > 0.0 => y - gy / s,
            _ => 0.5 * (a + b),
        };
        let (l, r) = if a < b { (a, b) } else { (b, a) };
        if !(next > l && next < r) {
            next = 0.5 * (a + b);
        }
        if next == y {
            next = 0.5 * (a + b);
        }
        if next == a || next == b {
            return Ok(y);
        }
        let gn = g(next)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(gn.abs());
        }
        if gn < 0.0 {
            a = next;
            ga = gn;
        } else {
            b = next;
            gb = gn;
        }
        // illinois-style guard against one-sided secant stalls
        if df.is_none() && (b - a).abs() > 0.5 * (l - r).abs() {
            let m = 0.5 * (a + b);
            let gm = g(m)?;
            if gm < 0.0 {
                a = m;
                ga = gm;
            } else {
                b = m;
                gb = gm;
            }
        }
        (y, gy) = if ga.abs() < gb.abs() { (a, ga) } else { (b, gb) };
    }
    if gy.abs() < tolerance(c, y) * 1e3 {
        Ok(y)
    } else {
        Err(BsdeError::RootBracketFailure { c })
    }
}

/// Per-path `Y`, `Z` on a bundle, step-major.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BsdeSolution {
    pub steps: usize,
    pub n_paths: usize,
    pub dim_noise: usize,
    pub t0: f64,
    pub dt: f64,
    /// `(steps+1) x n_paths`.
    #[serde(skip)]
    pub y_paths: Vec<f64>,
    /// `steps x n_paths x dim_noise`.
    #[serde(skip)]
    pub z_paths: Vec<f64>,
    /// Mean of `Y` at the first step.
    pub y0: f64,
    /// Standard error of the pathwise estimator `h(X_T) + sum dt f`.
    pub y0_stderr: f64,
    /// Basis used at each step (empty entries mark pathwise steps).
    pub regression_basis: Vec<String>,
}

impl BsdeSolution {
    pub fn y(&self, path: usize, step: usize) -> f64 {
        self.y_paths[step * self.n_paths + path]
    }

    pub fn y_row(&self, step: usize) -> &[f64] {
        &self.y_paths[step * self.n_paths..(step + 1) * self.n_paths]
    }

    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let d = self.dim_noise;
        let i = (step * self.n_paths + path) * d;
        &self.z_paths[i..i + d]
    }

    /// Long-format CSV `path_id,step,t,x...,y,z...` for the first `max_paths`
    /// paths (`z` is empty at the final step).
    pub fn write_csv<W: Write>(&self, bundle: &PathBundle, max_paths: usize, mut w: W) -> std::io::Result<()> {
        let n = bundle.dim_state;
        let mut header = vec!["path_id".to_string(), "step".into(), "t".into()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.push("y".into());
        header.extend((0..self.dim_noise).map(|i| format!("z{i}")));
        writeln!(w, "{}", header.join(","))?;
        for p in 0..self.n_paths.min(max_paths) {
            for k in 0..=self.steps {
                let mut row = vec![p.to_string(), k.to_string(), fmt_f64(self.t0 + k as f64 * self.dt)];
                row.extend(bundle.state(p, k).iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(self.y(p, k)));
                if k < self.steps {
                    row.extend(self.z(p, k).iter().map(|v| fmt_f64(*v)));
                } else {
                    row.extend((0..self.dim_noise).map(|_| String::new()));
                }
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

fn check_preconditions(bundle: &PathBundle, spec: &DriverSpec, policy: &ControlPolicy) -> Result<(), BsdeError> {
    if !spec.is_audited() {
        return Err(BsdeError::NotAudited(spec.name.clone()));
    }
    let dt = bundle.dt();
    if !(dt * spec.mu_plus() < 1.0) {
        return Err(BsdeError::TimeStepTooLarge { dt, mu_plus: spec.mu_plus() });
    }
    if policy.dim() != spec.audit_box.v.len() && !spec.audit_box.v.is_empty() {
        return Err(BsdeError::InvalidInput(format!(
            "policy has {} control components, driver expects {}",
            policy.dim(),
            spec.audit_box.v.len()
        )));
    }
    Ok(())
}

/// Solves on `[t0, T]` with terminal `h(X_T)`.
pub fn solve_bsde(
    bundle: &PathBundle,
    spec: &DriverSpec,
    policy: &ControlPolicy,
    reg: &RegressionConfig,
) -> Result<BsdeSolution, BsdeError> {
    let n = bundle.dim_state;
    let last = bundle.row(bundle.steps);
    let eta: Vec<f64> = last.chunks(n).map(|x| spec.h(x)).collect();
    solve_with_terminal(bundle, spec, policy, bundle.steps, &eta, reg)
}

/// Runs the recursion on steps `0..=k1` with `Y_{k1} = eta`.
pub fn solve_with_terminal(
    bundle: &PathBundle,
    spec: &DriverSpec,
    policy: &ControlPolicy,
    k1: usize,
    eta: &[f64],
    reg: &RegressionConfig,
) -> Result<BsdeSolution, BsdeError> {
    check_preconditions(bundle, spec, policy)?;
    let m = bundle.n_paths;
    let (n, d) = (bundle.dim_state, bundle.dim_noise);
    if k1 > bundle.steps {
        return Err(BsdeError::InvalidInput(format!("terminal step {k1} beyond bundle with {} steps", bundle.steps)));
    }
    if eta.len() != m {
        return Err(BsdeError::InvalidInput("terminal values must have one entry per path".into()));
    }
    if let Some(i) = eta.iter().position(|v| !v.is_finite()) {
        return Err(BsdeError::InvalidInput(format!("non-finite terminal value on path {i}")));
    }
    let dt = bundle.dt();
    let mu_plus = spec.mu_plus();
    let mut y = vec![0.0; (k1 + 1) * m];
    let mut z = vec![0.0; k1 * m * d];
    y[k1 * m..].copy_from_slice(eta);
    // running sum of dt * f along each path for the error estimate
    let mut fsum = vec![0.0; m];
    let mut basis = vec![String::new(); k1];
    let dv = policy.dim();

    for k in (0..k1).rev() {
        let t = bundle.time(k);
        let xs = bundle.row(k);
        let (head, tail) = y.split_at_mut((k + 1) * m);
        let y_next = &tail[..m];
        let y_cur = &mut head[k * m..];
        let z_cur = &mut z[k * m * d..(k + 1) * m * d];
        let inc = bundle.increment_row(k);

        // conditional expectations: c_k = E[Y_{k+1}|X_k], Z_k = E[(Y_{k+1}-c_k) dB|X_k]/dt
        let mut cond = vec![0.0; m];
        if bundle.diffusion_free {
            cond.copy_from_slice(y_next);
            z_cur.fill(0.0);
        } else {
            let mut fit = regression::fit(reg, xs, n, &[y_next])
                .map_err(|e| BsdeError::RegressionError { step: k, detail: e.to_string() })?;
            basis[k] = fit.design.describe();
            fit.fitted(0, &mut cond);
            // a conditional expectation never leaves the range of its target
            let lo = y_next.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = y_next.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            cond.iter_mut().for_each(|c| *c = c.clamp(lo, hi));
            let mut zl = vec![0.0; m];
            for l in 0..d {
                let target: Vec<f64> = (0..m).map(|p| (y_next[p] - cond[p]) * inc[p * d + l]).collect();
                let idx = fit.refit(&target).map_err(|e| BsdeError::RegressionError { step: k, detail: e.to_string() })?;
                fit.fitted(idx, &mut zl);
                for p in 0..m {
                    z_cur[p * d + l] = zl[p] / dt;
                }
            }
            if cond.iter().chain(z_cur.iter()).any(|v| !v.is_finite()) {
                return Err(BsdeError::RegressionError { step: k, detail: "non-finite fitted values".into() });
            }
        }

        let z_ro: &[f64] = z_cur;
        // analytic derivatives are a property of the driver, not of the point
        let has_dy = {
            let mut v0 = vec![0.0; dv];
            policy.control_at(t, &xs[..n], &mut v0);
            spec.driver.dy(t, &xs[..n], cond[0], &z_ro[..d], &v0).is_some()
        };
        let results: Vec<Result<(), BsdeError>> = y_cur
            .par_chunks_mut(CHUNK)
            .zip(fsum.par_chunks_mut(CHUNK))
            .enumerate()
            .map(|(ci, (ys, fs))| {
                let mut v = vec![0.0; dv];
                for (j, (yo, fo)) in ys.iter_mut().zip(fs.iter_mut()).enumerate() {
                    let p = ci * CHUNK + j;
                    let x = &xs[p * n..(p + 1) * n];
                    let zp = &z_ro[p * d..(p + 1) * d];
                    policy.control_at(t, x, &mut v);
                    let f = |yy: f64| spec.f(t, x, yy, zp, &v);
                    let val = if has_dy {
                        let dfn = |yy: f64| spec.driver.dy(t, x, yy, zp, &v).unwrap_or(Ok(0.0));
                        implicit_y_step_with(cond[p], &f, Some(&dfn), dt, mu_plus, None)?
                    } else {
                        implicit_y_step_with(cond[p], &f, None::<&fn(f64) -> Result<f64, DriverError>>, dt, mu_plus, None)?
                    };
                    *yo = val;
                    *fo += val - cond[p];
                }
                Ok(())
            })
            .collect();
        for r in results {
            r?;
        }
    }

    let y0_row = &y[..m];
    let y0 = ordered_mean(y0_row);
    let est: Vec<f64> = (0..m).map(|p| eta[p] + fsum[p]).collect();
    let y0_stderr = stderr(&est);
    Ok(BsdeSolution {
        steps: k1,
        n_paths: m,
        dim_noise: d,
        t0: bundle.t0,
        dt,
        y_paths: y,
        z_paths: z,
        y0,
        y0_stderr,
        regression_basis: basis,
    })
}

/// Mean accumulated over fixed chunks in order.
pub fn ordered_mean(xs: &[f64]) -> f64 {
    let s: f64 = xs.chunks(CHUNK).map(|c| c.iter().sum::<f64>()).sum();
    s / xs.len() as f64
}

/// Standard error of the sample mean.
pub fn stderr(xs: &[f64]) -> f64 {
    let m = xs.len();
    if m < 2 {
        return 0.0;
    }
    let mean = ordered_mean(xs);
    let ss: f64 = xs.chunks(CHUNK).map(|c| c.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sum();
    (ss / (m - 1) as f64 / m as f64).sqrt()
}

/// `G_{t0, t_{k1}}[eta]`: per-path `Y` at the bundle start.
pub fn backward_semigroup(
    bundle: &PathBundle,
    spec: &DriverSpec,
    policy: &ControlPolicy,
    k1: usize,
    eta: &[f64],
    reg: &RegressionConfig,
) -> Result<Vec<f64>, BsdeError> {
    let sol = solve_with_terminal(bundle, spec, policy, k1, eta, reg)?;
    Ok(sol.y_row(0).to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonConfig {
    /// Tolerance in pooled standard errors.
    pub tol_factor: f64,
    /// Fraction of paths that must be ordered at every checked step.
    pub path_fraction: f64,
    /// Steps to check; all steps when `None`.
    pub steps: Option<Vec<usize>>,
    /// Points per axis of the premise check grid.
    pub premise_density: usize,
    /// Absolute floor on the tolerance, for noise-free bundles.
    pub abs_floor: f64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self { tol_factor: 5.0, path_fraction: 0.99, steps: None, premise_density: 9, abs_floor: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub ordered: bool,
    /// Largest `Y - Y'` over checked steps and paths.
    pub worst_violation: f64,
    pub tol_mc: f64,
    /// Fraction of paths with `Y <= Y' + tol` at each checked step.
    pub ordered_fraction: Vec<(usize, f64)>,
    pub y0: (f64, f64),
}

fn premise(lo: &DriverSpec, hi: &DriverSpec, bundle: &PathBundle, density: usize) -> Result<(), BsdeError> {
    let b = &lo.audit_box;
    let ax = |r: (f64, f64), k: usize| -> Vec<f64> {
        if k <= 1 || r.0 == r.1 {
            vec![0.5 * (r.0 + r.1)]
        } else {
            (0..k).map(|i| r.0 + (r.1 - r.0) * i as f64 / (k - 1) as f64).collect()
        }
    };
    let aux = density.clamp(1, 3);
    let mut axes = vec![ax(b.t, aux)];
    axes.extend(b.x.iter().map(|r| ax(*r, aux)));
    axes.push(ax(b.y, density));
    axes.extend(b.z.iter().map(|r| ax(*r, aux)));
    axes.extend(b.v.iter().map(|r| ax(*r, aux)));
    let (n, d) = (b.x.len(), b.z.len());
    let total: usize = axes.iter().map(Vec::len).product();
    let mut pt = vec![0.0; axes.len()];
    for flat in 0..total {
        let mut rem = flat;
        for (k, a) in axes.iter().enumerate() {
            pt[k] = a[rem % a.len()];
            rem /= a.len();
        }
        let (t, x, y) = (pt[0], &pt[1..1 + n], pt[1 + n]);
        let z = &pt[2 + n..2 + n + d];
        let v = &pt[2 + n + d..];
        let (fa, fb) = (lo.f(t, x, y, z, v)?, hi.f(t, x, y, z, v)?);
        if fa > fb {
            return Err(BsdeError::PremiseViolated(format!("f > f' at t={t}, x={x:?}, y={y}: {fa} > {fb}")));
        }
        if lo.h(x) > hi.h(x) {
            return Err(BsdeError::PremiseViolated(format!("h > h' at x={x:?}")));
        }
    }
    for x in bundle.row(bundle.steps).chunks(bundle.dim_state) {
        if lo.h(x) > hi.h(x) {
            return Err(BsdeError::PremiseViolated(format!("h > h' at simulated terminal state {x:?}")));
        }
    }
    Ok(())
}

/// Solves both BSDEs on one bundle and checks `Y <= Y'` up to `tol_MC`.
pub fn comparison_check(
    bundle: &PathBundle,
    pair: (&DriverSpec, &DriverSpec),
    policy: &ControlPolicy,
    reg: &RegressionConfig,
    cfg: &ComparisonConfig,
) -> Result<ComparisonReport, BsdeError> {
    let (lo, hi) = pair;
    premise(lo, hi, bundle, cfg.premise_density)?;
    let a = solve_bsde(bundle, lo, policy, reg)?;
    let b = solve_bsde(bundle, hi, policy, reg)?;
    let pooled = (a.y0_stderr.powi(2) + b.y0_stderr.powi(2)).sqrt();
    let tol = (cfg.tol_factor * pooled).max(cfg.abs_floor);
    let steps: Vec<usize> = cfg.steps.clone().unwrap_or_else(|| (0..=bundle.steps).collect());
    let m = bundle.n_paths;
    let mut worst = f64::NEG_INFINITY;
    let mut fractions = Vec::with_capacity(steps.len());
    let mut ordered = true;
    for &k in &steps {
        if k > bundle.steps {
            return Err(BsdeError::InvalidInput(format!("step {k} beyond bundle")));
        }
        let (ra, rb) = (a.y_row(k), b.y_row(k));
        let mut ok = 0usize;
        for p in 0..m {
            let gap = ra[p] - rb[p];
            worst = worst.max(gap);
            if gap <= tol {
                ok += 1;
            }
        }
        let frac = ok as f64 / m as f64;
        ordered &= frac >= cfg.path_fraction;
        fractions.push((k, frac));
    }
    Ok(ComparisonReport { ordered, worst_violation: worst, tol_mc: tol, ordered_fraction: fractions, y0: (a.y0, b.y0) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bisect(g: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if g(m) < 0.0 {
                a = m
            } else {
                b = m
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn implicit_step_examples() {
        assert_eq!(implicit_y_step(5.0, |_| Ok(0.0), 0.1, 0.0).unwrap(), 5.0);
        let y = implicit_y_step(1.0, |y| Ok(-y), 0.1, 0.0).unwrap();
        assert!((y - 1.0 / 1.1).abs() < 1e-12);
        let oracle = bisect(|y| y + y * y * y - 1.0, 0.0, 1.0);
        let y = implicit_y_step(1.0, |y| Ok(-y * y * y), 1.0, 0.0).unwrap();
        assert!((y - oracle).abs() < 1e-10);
        assert!((y - 0.6823278).abs() < 1e-7);
    }

    #[test]
    fn implicit_step_rejects_large_dt() {
        assert!(matches!(implicit_y_step(1.0, |y| Ok(2.0 * y), 0.6, 2.0), Err(BsdeError::TimeStepTooLarge { .. })));
    }

    #[test]
    fn implicit_step_with_positive_mu() {
        // y = c + dt*(0.5 y + 1)
        let y = implicit_y_step(2.0, |y| Ok(0.5 * y + 1.0), 0.2, 0.5).unwrap();
        assert!((y - (2.0 + 0.2) / 0.9).abs() < 1e-12);
    }

    #[test]
    fn newton_residual_decreases() {
        let f = |y: f64| Ok(-y * y * y - 2.0 * y);
        let df = |y: f64| Ok(-3.0 * y * y - 2.0);
        let mut trace = Vec::new();
        implicit_y_step_with(3.0, &f, Some(&df), 0.5, 0.0, Some(&mut trace)).unwrap();
        assert!(trace.len() >= 3);
        for w in trace[1..].windows(2) {
            assert!(w[1] <= w[0], "{trace:?}");
        }
    }

    #[test]
    fn secant_without_derivative_converges() {
        let f = |y: f64| Ok(-y.abs() * y - 3.0);
        let y = implicit_y_step(0.5, f, 0.7, 0.0).unwrap();
        assert!((y - 0.5 - 0.7 * (-y.abs() * y - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn stops_at_domain_edge() {
        // f only defined for y < 0; the first bracket guess overshoots into y > 0
        let f = |y: f64| {
            if y < 0.0 {
                Ok(-100.0 * (y + 0.1))
            } else {
                Err(DriverError::DomainViolation { y, detail: "positive".into() })
            }
        };
        let y = implicit_y_step(-0.3, f, 0.1, 0.0).unwrap();
        assert!((y + 1.3 / 11.0).abs() < 1e-12);
    }
}
