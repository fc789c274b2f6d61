//! Controlled SDE simulation by Euler-Maruyama on a uniform grid.
//!
//! Paths are stored step-major (`[step][path][component]`) so that the
//! backward regression sweeps read one contiguous row per time step.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{Halton, Substream};

/// Paths handled per parallel work item. Fixed so that chunk boundaries, and
/// therefore every reduction order, do not depend on the thread count.
pub(crate) const CHUNK: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("non-finite state on path {path} at step {step}")]
    DivergedPath { step: usize, path: usize },
    #[error("policy emitted control {control:?} outside the admissible set at step {step}")]
    InvalidControl { step: usize, control: Vec<f64> },
    #[error("coupled inputs are identical; the comparison ratio has a zero denominator")]
    DegenerateComparison,
    #[error("moment estimate unstable: {half} with M/2 paths vs {full} with M paths")]
    UnstableMoment { half: f64, full: f64 },
    #[error("moment order 2q={order} exceeds the configured maximum {max}")]
    MomentOrderTooHigh { order: u32, max: u32 },
    #[error("initial state {0:?} lies outside the declared domain box")]
    OutsideDomain(Vec<f64>),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("path cache: {0}")]
    Cache(String),
}

pub type VectorField = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Inputs of a single custom time step.
pub struct StepContext<'a> {
    pub t: f64,
    pub dt: f64,
    pub x: &'a [f64],
    pub v: &'a [f64],
    pub db: &'a [f64],
}

/// Replacement for the plain Euler-Maruyama update. Writes the next state and
/// returns `true` when a positivity clamp was applied.
pub type Stepper = Arc<dyn Fn(&StepContext<'_>, &mut [f64]) -> bool + Send + Sync>;

/// Compact box `U` of admissible control values.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, SdeError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(SdeError::InvalidInput("control bounds must be non-empty and of equal length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return Err(SdeError::InvalidInput("control bounds must be finite with lower <= upper".into()));
        }
        Ok(Self { lower, upper })
    }

    /// The one-point set `{v}`.
    pub fn singleton(v: Vec<f64>) -> Self {
        Self { lower: v.clone(), upper: v }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (l, u))| x.is_finite() && *x >= l - 1e-12 && *x <= u + 1e-12)
    }
}

#[derive(Clone)]
pub enum ControlPolicy {
    Constant(Vec<f64>),
    /// `values[j]` applies on `[breakpoints[j-1], breakpoints[j])`; needs
    /// `values.len() == breakpoints.len() + 1`.
    Piecewise { breakpoints: Vec<f64>, values: Vec<Vec<f64>> },
    Feedback { dim: usize, map: Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync> },
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Self::Piecewise { breakpoints, values } => f
                .debug_struct("Piecewise")
                .field("breakpoints", breakpoints)
                .field("values", values)
                .finish(),
            Self::Feedback { dim, .. } => f.debug_struct("Feedback").field("dim", dim).finish_non_exhaustive(),
        }
    }
}

impl ControlPolicy {
    pub fn piecewise(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, SdeError> {
        if values.len() != breakpoints.len() + 1 {
            return Err(SdeError::InvalidInput("piecewise policy needs one more value than breakpoints".into()));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SdeError::InvalidInput("breakpoints must be strictly increasing".into()));
        }
        Ok(Self::Piecewise { breakpoints, values })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Constant(v) => v.len(),
            Self::Piecewise { values, .. } => values[0].len(),
            Self::Feedback { dim, .. } => *dim,
        }
    }

    pub fn control_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Constant(v) => out.copy_from_slice(v),
            Self::Piecewise { breakpoints, values } => {
                let j = breakpoints.partition_point(|b| *b <= t);
                out.copy_from_slice(&values[j]);
            }
            Self::Feedback { map, .. } => map(t, x, out),
        }
    }
}

/// Controlled diffusion `dX = b(t,X,v)dt + sigma(t,X,v)dB` on `[0, T]`.
#[derive(Clone)]
pub struct ControlledSDE {
    pub dim_state: usize,
    pub dim_noise: usize,
    pub horizon: f64,
    pub drift: VectorField,
    /// Writes the `n x d` matrix row-major.
    pub diffusion: VectorField,
    pub controls: ControlSet,
    /// Audit box for states; paths are never clamped to it.
    pub domain: Vec<(f64, f64)>,
    /// Declared Lipschitz constant L for the coefficient audit.
    pub lipschitz: f64,
    pub stepper: Option<Stepper>,
}

impl fmt::Debug for ControlledSDE {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlledSDE")
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("horizon", &self.horizon)
            .field("controls", &self.controls)
            .field("domain", &self.domain)
            .field("lipschitz", &self.lipschitz)
            .field("custom_stepper", &self.stepper.is_some())
            .finish_non_exhaustive()
    }
}

impl ControlledSDE {
    pub fn new(
        dim_state: usize,
        dim_noise: usize,
        horizon: f64,
        controls: ControlSet,
        drift: VectorField,
        diffusion: VectorField,
    ) -> Self {
        Self {
            dim_state,
            dim_noise,
            horizon,
            drift,
            diffusion,
            controls,
            domain: vec![(-10.0, 10.0); dim_state],
            lipschitz: f64::INFINITY,
            stepper: None,
        }
    }

    /// Scalar state and noise with closures returning the coefficients.
    pub fn scalar<B, S>(horizon: f64, controls: ControlSet, b: B, s: S) -> Self
    where
        B: Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
        S: Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::new(
            1,
            1,
            horizon,
            controls,
            Arc::new(move |t, x, v, out| out[0] = b(t, x[0], v)),
            Arc::new(move |t, x, v, out| out[0] = s(t, x[0], v)),
        )
    }

    /// `b = 0`, `sigma = 0` in dimension `n`, single control point 0.
    pub fn zero(n: usize, horizon: f64) -> Self {
        Self::new(
            n,
            1,
            horizon,
            ControlSet::singleton(vec![0.0]),
            Arc::new(|_, _, _, out| out.fill(0.0)),
            Arc::new(|_, _, _, out| out.fill(0.0)),
        )
        .with_lipschitz(0.0)
    }

    /// Geometric Brownian motion `dX = mu X dt + sigma X dB`, control ignored.
    pub fn gbm(mu: f64, sigma: f64, horizon: f64) -> Self {
        Self::scalar(
            horizon,
            ControlSet::singleton(vec![0.0]),
            move |_, x, _| mu * x,
            move |_, x, _| sigma * x,
        )
        .with_lipschitz(mu.abs() + sigma.abs())
    }

    /// Controlled arithmetic dynamics `dX = (drift + v) dt + sigma dB`.
    pub fn arithmetic(drift: f64, sigma: f64, horizon: f64, controls: ControlSet) -> Self {
        Self::scalar(horizon, controls, move |_, _, v| drift + v[0], move |_, _, _| sigma).with_lipschitz(1.0)
    }

    pub fn with_domain(mut self, domain: Vec<(f64, f64)>) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = l;
        self
    }

    pub fn with_stepper(mut self, stepper: Stepper) -> Self {
        self.stepper = Some(stepper);
        self
    }

    pub fn dim_control(&self) -> usize {
        self.controls.dim()
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        x.len() == self.dim_state && x.iter().zip(&self.domain).all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    /// Sample-based check of finiteness and of the Lipschitz bound on the
    /// coefficients over `domain x U x [0,T]`.
    pub fn audit(&self, budget: usize) -> SdeAudit {
        let n = self.dim_state;
        let m = self.dim_control();
        let nd = n * self.dim_noise;
        // t, x, x', v, v'
        let halton = Halton::new(1 + 2 * n + 2 * m);
        let mut p = vec![0.0; halton.dim()];
        let (mut x, mut xp, mut v, mut vp) = (vec![0.0; n], vec![0.0; n], vec![0.0; m], vec![0.0; m]);
        let (mut b1, mut b2) = (vec![0.0; n], vec![0.0; n]);
        let (mut s1, mut s2) = (vec![0.0; nd], vec![0.0; nd]);
        let mut report = SdeAudit { lipschitz_hat: 0.0, violations: 0, non_finite: None, samples: budget };
        for i in 0..budget {
            halton.point(i, &mut p);
            let t = p[0] * self.horizon;
            for j in 0..n {
                let (lo, hi) = self.domain[j];
                x[j] = lo + (hi - lo) * p[1 + j];
                xp[j] = lo + (hi - lo) * p[1 + n + j];
            }
            for j in 0..m {
                let (lo, hi) = (self.controls.lower[j], self.controls.upper[j]);
                v[j] = lo + (hi - lo) * p[1 + 2 * n + j];
                vp[j] = lo + (hi - lo) * p[1 + 2 * n + m + j];
            }
            (self.drift)(t, &x, &v, &mut b1);
            (self.drift)(t, &xp, &vp, &mut b2);
            (self.diffusion)(t, &x, &v, &mut s1);
            (self.diffusion)(t, &xp, &vp, &mut s2);
            if b1.iter().chain(&b2).chain(&s1).chain(&s2).any(|c| !c.is_finite()) {
                report.non_finite.get_or_insert_with(|| (t, x.clone(), v.clone()));
                continue;
            }
            let denom = norm_diff(&x, &xp) + norm_diff(&v, &vp);
            if denom < 1e-12 {
                continue;
            }
            let q = (norm_diff(&b1, &b2) + norm_diff(&s1, &s2)) / denom;
            report.lipschitz_hat = report.lipschitz_hat.max(q);
            if q > self.lipschitz * (1.0 + 1e-9) + 1e-12 {
                report.violations += 1;
            }
        }
        report
    }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Outcome of [`ControlledSDE::audit`].
#[derive(Clone, Debug, PartialEq)]
pub struct SdeAudit {
    pub lipschitz_hat: f64,
    pub violations: usize,
    pub non_finite: Option<(f64, Vec<f64>, Vec<f64>)>,
    pub samples: usize,
}

impl SdeAudit {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.non_finite.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    Point(Vec<f64>),
    /// `M x n` row-major.
    PerPath(Vec<f64>),
}

/// Seeded ensemble of simulated paths on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
    pub n_paths: usize,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub seed: u64,
    /// `(steps+1) x n_paths x dim_state`.
    pub paths: Vec<f64>,
    /// `steps x n_paths x dim_noise`.
    pub increments: Vec<f64>,
    /// True when every diffusion evaluation was exactly zero.
    pub diffusion_free: bool,
    /// True when all paths started from the same point.
    pub common_start: bool,
    pub clamp_events: u64,
}

impl PathBundle {
    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn time_grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let n = self.dim_state;
        let off = (step * self.n_paths + path) * n;
        &self.paths[off..off + n]
    }

    /// All states at `step`, `n_paths x dim_state`.
    pub fn row(&self, step: usize) -> &[f64] {
        let w = self.n_paths * self.dim_state;
        &self.paths[step * w..(step + 1) * w]
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let d = self.dim_noise;
        let off = (step * self.n_paths + path) * d;
        &self.increments[off..off + d]
    }

    pub fn increment_row(&self, step: usize) -> &[f64] {
        let w = self.n_paths * self.dim_noise;
        &self.increments[step * w..(step + 1) * w]
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        for v in [self.n_paths, self.steps, self.dim_state, self.dim_noise] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.t0.to_le_bytes())?;
        w.write_all(&self.t_end.to_le_bytes())?;
        w.write_all(&[self.diffusion_free as u8, self.common_start as u8])?;
        w.write_all(&self.clamp_events.to_le_bytes())?;
        for v in self.paths.iter().chain(&self.increments) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Self, SdeError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| SdeError::Cache(e.to_string()))?;
        let mut r = CacheReader { buf: &buf, pos: 0 };
        if r.take(CACHE_MAGIC.len())? != CACHE_MAGIC {
            return Err(SdeError::Cache("bad magic".into()));
        }
        let n_paths = r.u64()? as usize;
        let steps = r.u64()? as usize;
        let dim_state = r.u64()? as usize;
        let dim_noise = r.u64()? as usize;
        let seed = r.u64()?;
        let t0 = r.f64()?;
        let t_end = r.f64()?;
        let flags = r.take(2)?;
        let (diffusion_free, common_start) = (flags[0] != 0, flags[1] != 0);
        let clamp_events = r.u64()?;
        let np = (steps + 1) * n_paths * dim_state;
        let ni = steps * n_paths * dim_noise;
        let paths = (0..np).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let increments = (0..ni).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        if r.pos != buf.len() {
            return Err(SdeError::Cache("trailing bytes".into()));
        }
        Ok(Self {
            t0,
            t_end,
            steps,
            n_paths,
            dim_state,
            dim_noise,
            seed,
            paths,
            increments,
            diffusion_free,
            common_start,
            clamp_events,
        })
    }
}

pub const CACHE_MAGIC: &[u8] = b"RCLB1";

struct CacheReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> CacheReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SdeError> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or_else(|| SdeError::Cache("truncated file".into()))?;
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64, SdeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, SdeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Default)]
struct ChunkStat {
    clamps: u64,
    nonzero_diffusion: bool,
    error: Option<SdeError>,
}

/// Simulates `n_paths` paths from the deterministic start `x0` at `t0`.
pub fn simulate_paths(
    sde: &ControlledSDE,
    policy: &ControlPolicy,
    t0: f64,
    x0: &[f64],
    steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle, SdeError> {
    if !sde.in_domain(x0) {
        return Err(SdeError::OutsideDomain(x0.to_vec()));
    }
    simulate_from(sde, policy, t0, &InitialState::Point(x0.to_vec()), steps, n_paths, seed)
}

/// Simulation from a deterministic point or from per-path initial states.
pub fn simulate_from(
    sde: &ControlledSDE,
    policy: &ControlPolicy,
    t0: f64,
    init: &InitialState,
    steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle, SdeError> {
    simulate_window(sde, policy, t0, sde.horizon, init, steps, n_paths, seed)
}

/// Simulation on `[t0, t1]` with `t1` at most the horizon.
#[allow(clippy::too_many_arguments)]
pub fn simulate_window(
    sde: &ControlledSDE,
    policy: &ControlPolicy,
    t0: f64,
    t1: f64,
    init: &InitialState,
    steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle, SdeError> {
    let (n, d) = (sde.dim_state, sde.dim_noise);
    if !(t0 < t1 && t1 <= sde.horizon * (1.0 + 1e-12)) {
        return Err(SdeError::InvalidInput(format!("need t0 < t1 <= {}, got t0={t0}, t1={t1}", sde.horizon)));
    }
    if steps == 0 || n_paths == 0 {
        return Err(SdeError::InvalidInput("steps and n_paths must be positive".into()));
    }
    if policy.dim() != sde.dim_control() {
        return Err(SdeError::InvalidInput("policy and control set dimensions differ".into()));
    }
    let mut paths = vec![0.0; (steps + 1) * n_paths * n];
    let common_start = match init {
        InitialState::Point(x0) => {
            if x0.len() != n {
                return Err(SdeError::InvalidInput("initial state has wrong dimension".into()));
            }
            for row in paths[..n_paths * n].chunks_mut(n) {
                row.copy_from_slice(x0);
            }
            true
        }
        InitialState::PerPath(xs) => {
            if xs.len() != n_paths * n {
                return Err(SdeError::InvalidInput("per-path initial states have wrong length".into()));
            }
            paths[..n_paths * n].copy_from_slice(xs);
            false
        }
    };
    let mut increments = vec![0.0; steps * n_paths * d];
    let mut rngs: Vec<Substream> = (0..n_paths).map(|i| Substream::new(seed, i as u64, d)).collect();
    let dt = (t1 - t0) / steps as f64;
    let sqrt_dt = dt.sqrt();
    let mut clamp_events = 0;
    let mut nonzero_diffusion = false;

    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        let (head, tail) = paths.split_at_mut((k + 1) * n_paths * n);
        let cur = &head[k * n_paths * n..];
        let next = &mut tail[..n_paths * n];
        let inc_row = &mut increments[k * n_paths * d..(k + 1) * n_paths * d];
        let stats: Vec<ChunkStat> = next
            .par_chunks_mut(CHUNK * n)
            .zip(inc_row.par_chunks_mut(CHUNK * d))
            .zip(rngs.par_chunks_mut(CHUNK))
            .enumerate()
            .map(|(ci, ((nx, ninc), rg))| {
                let mut st = ChunkStat::default();
                let mut v = vec![0.0; sde.dim_control()];
                let mut b = vec![0.0; n];
                let mut s = vec![0.0; n * d];
                let mut z = vec![0.0; d];
                for (j, rng) in rg.iter_mut().enumerate() {
                    let path = ci * CHUNK + j;
                    let x = &cur[path * n..(path + 1) * n];
                    policy.control_at(t, x, &mut v);
                    if !sde.controls.contains(&v) {
                        st.error = Some(SdeError::InvalidControl { step: k, control: v.clone() });
                        return st;
                    }
                    rng.next_normals(&mut z);
                    let db = &mut ninc[j * d..(j + 1) * d];
                    for (o, zi) in db.iter_mut().zip(&z) {
                        *o = zi * sqrt_dt;
                    }
                    (sde.diffusion)(t, x, &v, &mut s);
                    if s.iter().any(|c| *c != 0.0) {
                        st.nonzero_diffusion = true;
                    }
                    let out = &mut nx[j * n..(j + 1) * n];
                    if let Some(stepper) = &sde.stepper {
                        let ctx = StepContext { t, dt, x, v: &v, db };
                        if stepper(&ctx, out) {
                            st.clamps += 1;
                        }
                    } else {
                        (sde.drift)(t, x, &v, &mut b);
                        for i in 0..n {
                            let mut acc = x[i] + b[i] * dt;
                            for l in 0..d {
                                acc += s[i * d + l] * db[l];
                            }
                            out[i] = acc;
                        }
                    }
                    if out.iter().any(|c| !c.is_finite()) {
                        st.error = Some(SdeError::DivergedPath { step: k, path });
                        return st;
                    }
                }
                st
            })
            .collect();
        for st in stats {
            if let Some(e) = st.error {
                return Err(e);
            }
            clamp_events += st.clamps;
            nonzero_diffusion |= st.nonzero_diffusion;
        }
    }

    Ok(PathBundle {
        t0,
        t_end: t1,
        steps,
        n_paths,
        dim_state: n,
        dim_noise: d,
        seed,
        paths,
        increments,
        diffusion_free: !nonzero_diffusion,
        common_start,
        clamp_events,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    pub t0: f64,
    pub steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

/// Coupled-simulation estimate of `sup_s E|X_s - X'_s|^2` divided by
/// `|x0 - x0'|^2 + E int |v - v'|^2 dt`.
pub fn estimate_flow_lipschitz(
    sde: &ControlledSDE,
    policies: (&ControlPolicy, &ControlPolicy),
    starts: (&[f64], &[f64]),
    cfg: &FlowConfig,
) -> Result<f64, SdeError> {
    let a = simulate_paths(sde, policies.0, cfg.t0, starts.0, cfg.steps, cfg.n_paths, cfg.seed)?;
    let b = simulate_paths(sde, policies.1, cfg.t0, starts.1, cfg.steps, cfg.n_paths, cfg.seed)?;
    let (n, m) = (sde.dim_state, cfg.n_paths);
    let dt = a.dt();
    let mut control_gap = 0.0;
    let (mut va, mut vb) = (vec![0.0; sde.dim_control()], vec![0.0; sde.dim_control()]);
    for k in 0..a.steps {
        let t = a.time(k);
        let mut acc = 0.0;
        for i in 0..m {
            policies.0.control_at(t, a.state(i, k), &mut va);
            policies.1.control_at(t, b.state(i, k), &mut vb);
            acc += va.iter().zip(&vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        control_gap += acc / m as f64 * dt;
    }
    let start_gap: f64 = starts.0.iter().zip(starts.1).map(|(x, y)| (x - y) * (x - y)).sum();
    let denom = start_gap + control_gap;
    if denom == 0.0 {
        return Err(SdeError::DegenerateComparison);
    }
    let mut sup = 0.0f64;
    for k in 0..=a.steps {
        let (ra, rb) = (a.row(k), b.row(k));
        let mean = ra
            .chunks(n)
            .zip(rb.chunks(n))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
            .sum::<f64>()
            / m as f64;
        sup = sup.max(mean);
    }
    Ok(sup / denom)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentConfig {
    /// Largest admissible `2q`.
    pub max_moment: u32,
    /// Allowed relative change between the M/2 and M estimates.
    pub stability_tol: f64,
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self { max_moment: 4, stability_tol: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentReport {
    pub sup_moment: f64,
    /// Same estimate on the first half of the paths.
    pub half_sample_moment: f64,
    pub bound_ok: bool,
}

/// Estimates `E[sup_s |X_s|^{2q}]` from path-wise maxima.
pub fn moment_report(bundle: &PathBundle, q: u32, cfg: &MomentConfig) -> Result<MomentReport, SdeError> {
    if q == 0 || 2 * q > cfg.max_moment {
        return Err(SdeError::MomentOrderTooHigh { order: 2 * q, max: cfg.max_moment });
    }
    if bundle.n_paths < 2 {
        return Err(SdeError::InvalidInput("moment report needs at least two paths".into()));
    }
    let m = bundle.n_paths;
    let sup_pow: Vec<f64> = (0..m)
        .map(|i| {
            (0..=bundle.steps)
                .map(|k| bundle.state(i, k).iter().map(|x| x * x).sum::<f64>().powi(q as i32))
                .fold(0.0, f64::max)
        })
        .collect();
    let full = sup_pow.iter().sum::<f64>() / m as f64;
    let half = sup_pow[..m / 2].iter().sum::<f64>() / (m / 2) as f64;
    if half > 0.0 && full >= 2.0 * half {
        return Err(SdeError::UnstableMoment { half, full });
    }
    let stable = if full == 0.0 { half == 0.0 } else { ((full - half) / full).abs() <= cfg.stability_tol };
    Ok(MomentReport { sup_moment: full, half_sample_moment: half, bound_ok: full.is_finite() && stable })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dynamics_stay_put() {
        let sde = ControlledSDE::zero(1, 1.0);
        let b = simulate_paths(&sde, &ControlPolicy::Constant(vec![0.0]), 0.0, &[3.0], 10, 7, 1).unwrap();
        assert!(b.paths.iter().all(|x| *x == 3.0));
        assert!(b.diffusion_free);
    }

    #[test]
    fn same_seed_same_paths() {
        let sde = ControlledSDE::gbm(0.05, 0.2, 1.0);
        let p = ControlPolicy::Constant(vec![0.0]);
        let a = simulate_paths(&sde, &p, 0.0, &[1.0], 50, 3000, 7).unwrap();
        let b = simulate_paths(&sde, &p, 0.0, &[1.0], 50, 3000, 7).unwrap();
        assert_eq!(a, b);
        let c = simulate_paths(&sde, &p, 0.0, &[1.0], 50, 3000, 8).unwrap();
        assert_ne!(a.paths, c.paths);
    }

    #[test]
    fn rejects_control_outside_set() {
        let u = ControlSet::new(vec![-1.0], vec![1.0]).unwrap();
        let sde = ControlledSDE::arithmetic(0.0, 0.1, 1.0, u);
        let err = simulate_paths(&sde, &ControlPolicy::Constant(vec![2.0]), 0.0, &[0.0], 4, 4, 1).unwrap_err();
        assert!(matches!(err, SdeError::InvalidControl { step: 0, .. }));
    }

    #[test]
    fn reports_divergence_step() {
        let sde = ControlledSDE::scalar(1.0, ControlSet::singleton(vec![0.0]), |t, _, _| if t > 0.45 { f64::NAN } else { 0.0 }, |_, _, _| 0.0);
        let err = simulate_paths(&sde, &ControlPolicy::Constant(vec![0.0]), 0.0, &[0.0], 10, 3, 1).unwrap_err();
        assert_eq!(err, SdeError::DivergedPath { step: 5, path: 0 });
    }

    #[test]
    fn piecewise_policy_switches_at_breakpoints() {
        let p = ControlPolicy::piecewise(vec![0.5], vec![vec![-1.0], vec![1.0]]).unwrap();
        let mut v = [0.0];
        p.control_at(0.49, &[0.0], &mut v);
        assert_eq!(v, [-1.0]);
        p.control_at(0.5, &[0.0], &mut v);
        assert_eq!(v, [1.0]);
        assert!(ControlPolicy::piecewise(vec![0.5], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn flow_ratio_for_identity_shift_is_one() {
        let sde = ControlledSDE::zero(1, 1.0);
        let p = ControlPolicy::Constant(vec![0.0]);
        let cfg = FlowConfig { t0: 0.0, steps: 10, n_paths: 5, seed: 3 };
        let r = estimate_flow_lipschitz(&sde, (&p, &p), (&[1.0], &[2.0]), &cfg).unwrap();
        assert_eq!(r, 1.0);
        let err = estimate_flow_lipschitz(&sde, (&p, &p), (&[1.0], &[1.0]), &cfg).unwrap_err();
        assert_eq!(err, SdeError::DegenerateComparison);
    }

    #[test]
    fn moment_of_constant_paths() {
        let sde = ControlledSDE::zero(1, 1.0);
        let b = simulate_paths(&sde, &ControlPolicy::Constant(vec![0.0]), 0.0, &[2.0], 5, 10, 1).unwrap();
        let r = moment_report(&b, 1, &MomentConfig::default()).unwrap();
        assert_eq!(r.sup_moment, 4.0);
        assert!(r.bound_ok);
        assert!(matches!(
            moment_report(&b, 3, &MomentConfig::default()),
            Err(SdeError::MomentOrderTooHigh { order: 6, max: 4 })
        ));
    }

    #[test]
    fn audit_flags_understated_lipschitz() {
        let sde = ControlledSDE::gbm(0.05, 0.2, 1.0).with_domain(vec![(0.1, 3.0)]);
        assert!(sde.audit(512).passed());
        let bad = sde.clone().with_lipschitz(0.1);
        let rep = bad.audit(512);
        assert!(rep.violations > 0);
        assert!(rep.lipschitz_hat <= 0.25 + 1e-12);
    }

    #[test]
    fn cache_roundtrip() {
        let sde = ControlledSDE::gbm(0.05, 0.2, 1.0);
        let b = simulate_paths(&sde, &ControlPolicy::Constant(vec![0.0]), 0.0, &[1.0], 8, 9, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("b.rclb");
        b.save(&f).unwrap();
        let raw = std::fs::read(&f).unwrap();
        assert_eq!(&raw[..5], b"RCLB1");
        assert_eq!(PathBundle::load(&f).unwrap(), b);
        std::fs::write(&f, &raw[..raw.len() - 3]).unwrap();
        assert!(matches!(PathBundle::load(&f), Err(SdeError::Cache(_))));
    }
}
