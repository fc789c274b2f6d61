//! Explicit monotone finite differences for
//! `u_t + sup_v { 1/2 tr(sigma sigma^T D2u) + <b, Du> + f(t,x,u,v) } = 0`, `u(T) = h`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{mollify, truncate, DriverError, DriverSpec, MollifierSpec};
use crate::output::fmt_f64;
use crate::rng::Halton;
use crate::sde::{ControlSet, ControlledSDE, CHUNK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HjbError {
    #[error("SchemeNotMonotone: CFL number {cfl} > 1 at t={t}, x={x:?}, control {control:?}")]
    SchemeNotMonotone { t: f64, x: Vec<f64>, control: Vec<f64>, cfl: f64 },
    #[error("SchemeNotMonotone: cross diffusion not diagonally dominant at x={x:?}, control {control:?}")]
    CrossDiffusion { x: Vec<f64>, control: Vec<f64> },
    #[error("Diverged: |u| = {value} at t={t}, x={x:?}")]
    Diverged { t: f64, x: Vec<f64>, value: f64 },
    #[error("non-finite Hamiltonian candidate at t={t}, x={x:?}, control {control:?}")]
    Evaluation { t: f64, x: Vec<f64>, control: Vec<f64> },
    #[error("time step {dt} too large for monotonicity constant {mu_plus}")]
    TimeStepTooLarge { dt: f64, mu_plus: f64 },
    #[error("driver depends on z; the grid solver needs a z-free driver")]
    ZDependent,
    #[error("driver spec '{0}' has not passed a condition audit")]
    NotAudited(String),
    #[error("grid solver supports state dimension 1 or 2, got {0}")]
    DimensionUnsupported(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Driver(#[from] DriverError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// `u = h` on the spatial boundary at every time.
    Dirichlet,
    /// Linear extrapolation from the two nearest interior nodes.
    Extrapolate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, nodes: usize) -> Self {
        Self { lo, hi, nodes }
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.hi
        } else {
            self.lo + i as f64 * self.dx()
        }
    }

    /// `2n - 1` nodes: halves `dx` and keeps the old nodes.
    pub fn refined(&self) -> Self {
        Self { nodes: 2 * self.nodes - 1, ..*self }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpaceTimeGrid {
    pub t0: f64,
    pub horizon: f64,
    pub time_steps: usize,
    pub axes: Vec<Axis>,
    pub boundary: Boundary,
    /// Fraction of each axis width excluded on both sides from comparisons.
    pub trust_margin: f64,
}

impl SpaceTimeGrid {
    pub fn new(horizon: f64, time_steps: usize, axes: Vec<Axis>, boundary: Boundary) -> Result<Self, HjbError> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(HjbError::DimensionUnsupported(axes.len()));
        }
        if axes.iter().any(|a| a.nodes < 3 || !(a.hi > a.lo)) {
            return Err(HjbError::InvalidGrid("every axis needs lo < hi and at least 3 nodes".into()));
        }
        if time_steps == 0 || !(horizon > 0.0) {
            return Err(HjbError::InvalidGrid("need a positive horizon and at least one time step".into()));
        }
        Ok(Self { t0: 0.0, horizon, time_steps, axes, boundary, trust_margin: 0.2 })
    }

    pub fn with_trust_margin(mut self, m: f64) -> Self {
        self.trust_margin = m;
        self
    }

    pub fn with_time_steps(mut self, steps: usize) -> Self {
        self.time_steps = steps;
        self
    }

    /// Smallest number of time steps keeping the CFL number at most `target`.
    pub fn with_cfl_steps(mut self, sde: &ControlledSDE, cgrid: &ControlGrid, target: f64) -> Self {
        let mut worst = 0.0f64;
        let samples = 11;
        for s in 0..samples {
            let t = self.t0 + (self.horizon - self.t0) * s as f64 / (samples - 1) as f64;
            for node in 0..self.n_nodes() {
                let x = self.node_x(node);
                for v in &cgrid.points {
                    worst = worst.max(self.cfl_rate(sde, t, &x, v).0);
                }
            }
        }
        let steps = ((self.horizon - self.t0) * worst / target).ceil().max(1.0) as usize;
        self.time_steps = steps;
        self
    }

    /// Halves every `dx` and re-derives the time step from the CFL target.
    pub fn refined(&self, sde: &ControlledSDE, cgrid: &ControlGrid, target: f64) -> Self {
        let g = Self { axes: self.axes.iter().map(Axis::refined).collect(), ..self.clone() };
        g.with_cfl_steps(sde, cgrid, target)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.time_steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.time_steps {
            self.horizon
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    /// Layer index closest to time `t`.
    pub fn layer_at(&self, t: f64) -> usize {
        (((t - self.t0) / self.dt()).round().max(0.0) as usize).min(self.time_steps)
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    /// Multi-index of a flat node (first axis fastest).
    pub fn index(&self, node: usize) -> [usize; 2] {
        let n0 = self.axes[0].nodes;
        [node % n0, node / n0]
    }

    pub fn flat(&self, idx: [usize; 2]) -> usize {
        idx[0] + self.axes[0].nodes * idx[1]
    }

    pub fn node_x(&self, node: usize) -> Vec<f64> {
        let idx = self.index(node);
        self.axes.iter().enumerate().map(|(i, a)| a.x(idx[i])).collect()
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let idx = self.index(node);
        self.axes.iter().enumerate().any(|(i, a)| idx[i] == 0 || idx[i] + 1 == a.nodes)
    }

    pub fn trust_region(&self) -> Vec<(f64, f64)> {
        self.axes
            .iter()
            .map(|a| {
                let w = self.trust_margin * (a.hi - a.lo);
                (a.lo + w, a.hi - w)
            })
            .collect()
    }

    pub fn in_trust(&self, x: &[f64]) -> bool {
        let tol = 1e-12;
        self.trust_region().iter().zip(x).all(|((lo, hi), v)| *v >= lo - tol && *v <= hi + tol)
    }

    pub fn trust_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| self.in_trust(&self.node_x(i))).collect()
    }

    pub fn in_box(&self, x: &[f64]) -> bool {
        self.axes.iter().zip(x).all(|(a, v)| *v >= a.lo && *v <= a.hi)
    }

    /// `sum a_ii / dx_i^2 + sum |b_i| / dx_i` at one node and control, and
    /// whether cross diffusion is diagonally dominant.
    fn cfl_rate(&self, sde: &ControlledSDE, t: f64, x: &[f64], v: &[f64]) -> (f64, bool) {
        let c = Coefficients::eval(sde, t, x, v);
        let mut rate = 0.0;
        for (i, ax) in self.axes.iter().enumerate() {
            let dx = ax.dx();
            rate += c.a[i * 2 + i] / (dx * dx) + c.b[i].abs() / dx;
        }
        let dominant = if self.dim() == 2 {
            let (dx, dy) = (self.axes[0].dx(), self.axes[1].dx());
            let cross = c.a[1].abs() / (dx * dy);
            c.a[0] / (dx * dx) >= cross - 1e-15 && c.a[3] / (dy * dy) >= cross - 1e-15
        } else {
            true
        };
        (rate, dominant)
    }
}

/// Drift and `a = sigma sigma^T` (2x2 storage) at one point.
struct Coefficients {
    b: [f64; 2],
    a: [f64; 4],
}

impl Coefficients {
    fn eval(sde: &ControlledSDE, t: f64, x: &[f64], v: &[f64]) -> Self {
        let (n, d) = (sde.dim_state, sde.dim_noise);
        let mut b = vec![0.0; n];
        let mut s = vec![0.0; n * d];
        (sde.drift)(t, x, v, &mut b);
        (sde.diffusion)(t, x, v, &mut s);
        let mut out = Self { b: [0.0; 2], a: [0.0; 4] };
        for i in 0..n.min(2) {
            out.b[i] = b[i];
            for j in 0..n.min(2) {
                out.a[i * 2 + j] = (0..d).map(|l| s[i * d + l] * s[j * d + l]).sum();
            }
        }
        out
    }
}

/// Finite control set used for the pointwise maximization.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControlGrid {
    pub points: Vec<Vec<f64>>,
    /// Nodes per control axis.
    pub resolution: Vec<usize>,
}

impl ControlGrid {
    /// Tensor grid with `per_axis[i]` uniform nodes on each axis of `set`
    /// (first axis fastest); degenerate axes get one node.
    pub fn uniform(set: &ControlSet, per_axis: &[usize]) -> Result<Self, HjbError> {
        let m = set.dim();
        if per_axis.len() != m || per_axis.contains(&0) {
            return Err(HjbError::InvalidGrid("one positive resolution per control axis".into()));
        }
        let res: Vec<usize> =
            (0..m).map(|i| if set.lower[i] == set.upper[i] { 1 } else { per_axis[i] }).collect();
        let axes: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let (lo, hi, k) = (set.lower[i], set.upper[i], res[i]);
                if k == 1 {
                    vec![if lo == hi { lo } else { 0.5 * (lo + hi) }]
                } else {
                    (0..k).map(|j| if j + 1 == k { hi } else { lo + (hi - lo) * j as f64 / (k - 1) as f64 }).collect()
                }
            })
            .collect();
        let total: usize = res.iter().product();
        let points = (0..total)
            .map(|flat| {
                let mut rem = flat;
                axes.iter()
                    .map(|ax| {
                        let v = ax[rem % ax.len()];
                        rem /= ax.len();
                        v
                    })
                    .collect()
            })
            .collect();
        Ok(Self { points, resolution: res })
    }

    pub fn single(v: Vec<f64>) -> Self {
        let m = v.len();
        Self { points: vec![v], resolution: vec![1; m] }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `2k - 1` nodes per non-degenerate axis, so old points are kept.
    pub fn refined(&self, set: &ControlSet) -> Result<Self, HjbError> {
        let per: Vec<usize> = self.resolution.iter().map(|&k| if k <= 1 { 3 } else { 2 * k - 1 }).collect();
        Self::uniform(set, &per)
    }

    /// Refines until the Hamiltonian changes by less than `tol` at every probe
    /// `(t, x, r, p, A)`, or `max_levels` refinements have been made.
    pub fn calibrate(
        set: &ControlSet,
        start: &[usize],
        sde: &ControlledSDE,
        spec: &DriverSpec,
        probes: &[HamiltonianProbe],
        tol: f64,
        max_levels: usize,
    ) -> Result<Self, HjbError> {
        let mut g = Self::uniform(set, start)?;
        for _ in 0..max_levels {
            let finer = g.refined(set)?;
            let mut change = 0.0f64;
            for p in probes {
                let a = hamiltonian(p.t, &p.x, p.r, &p.p, &p.a, sde, spec, &g)?.0;
                let b = hamiltonian(p.t, &p.x, p.r, &p.p, &p.a, sde, spec, &finer)?.0;
                change = change.max((a - b).abs());
            }
            g = finer;
            if change < tol {
                break;
            }
        }
        Ok(g)
    }
}

/// Arguments of one Hamiltonian evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HamiltonianProbe {
    pub t: f64,
    pub x: Vec<f64>,
    pub r: f64,
    pub p: Vec<f64>,
    /// Symmetric `n x n`, row-major.
    pub a: Vec<f64>,
}

/// `max_v 1/2 tr(sigma sigma^T A) + <p, b> + f(t,x,r,v)` over the control
/// grid, with the lowest index winning ties.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    t: f64,
    x: &[f64],
    r: f64,
    p: &[f64],
    a: &[f64],
    sde: &ControlledSDE,
    spec: &DriverSpec,
    cgrid: &ControlGrid,
) -> Result<(f64, usize), HjbError> {
    if !spec.z_free() {
        return Err(HjbError::ZDependent);
    }
    let (n, d) = (sde.dim_state, sde.dim_noise);
    let z = vec![0.0; spec.audit_box.z.len()];
    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n * d];
    let mut best = (f64::NEG_INFINITY, 0);
    for (idx, v) in cgrid.points.iter().enumerate() {
        (sde.drift)(t, x, v, &mut b);
        (sde.diffusion)(t, x, v, &mut s);
        let mut val = 0.0;
        for i in 0..n {
            for j in 0..n {
                let aij: f64 = (0..d).map(|l| s[i * d + l] * s[j * d + l]).sum();
                val += 0.5 * aij * a[i * n + j];
            }
            val += p[i] * b[i];
        }
        val += spec.f(t, x, r, &z, v)?;
        if !val.is_finite() {
            return Err(HjbError::Evaluation { t, x: x.to_vec(), control: v.clone() });
        }
        if val > best.0 {
            best = (val, idx);
        }
    }
    Ok(best)
}

/// Scheme metadata recorded with every solution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchemeMeta {
    pub dt: f64,
    pub max_cfl: f64,
    pub cfl_margin: f64,
    pub boundary: Boundary,
    pub trust_margin: f64,
    pub boundary_note: &'static str,
}

pub const NO_CONTROL: u32 = u32::MAX;

/// `u` on every time layer, with the maximizing control index per node.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValueGrid {
    pub grid: SpaceTimeGrid,
    /// `(time_steps+1) x n_nodes`.
    #[serde(skip)]
    pub values: Vec<f64>,
    /// `time_steps x n_nodes`; layer `k` holds the control chosen for `u_k`.
    #[serde(skip)]
    pub argmax: Vec<u32>,
    pub controls: Vec<Vec<f64>>,
    pub meta: SchemeMeta,
}

impl ValueGrid {
    pub fn layer(&self, k: usize) -> &[f64] {
        let nn = self.grid.n_nodes();
        &self.values[k * nn..(k + 1) * nn]
    }

    pub fn value(&self, k: usize, node: usize) -> f64 {
        self.values[k * self.grid.n_nodes() + node]
    }

    pub fn control(&self, k: usize, node: usize) -> Option<&[f64]> {
        if k >= self.grid.time_steps {
            return None;
        }
        let i = self.argmax[k * self.grid.n_nodes() + node];
        (i != NO_CONTROL).then(|| self.controls[i as usize].as_slice())
    }

    /// Multilinear interpolation on layer `k`, clamped to the box.
    pub fn interp(&self, k: usize, x: &[f64]) -> f64 {
        let layer = self.layer(k);
        let g = &self.grid;
        let mut base = [0usize; 2];
        let mut w = [0.0f64; 2];
        for (i, ax) in g.axes.iter().enumerate() {
            let s = ((x[i] - ax.lo) / ax.dx()).clamp(0.0, (ax.nodes - 1) as f64);
            let j = (s.floor() as usize).min(ax.nodes - 2);
            base[i] = j;
            w[i] = s - j as f64;
        }
        if g.dim() == 1 {
            let (j, w0) = (base[0], w[0]);
            if w0 == 0.0 {
                return layer[j];
            }
            (1.0 - w0) * layer[j] + w0 * layer[j + 1]
        } else {
            let mut acc = 0.0;
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let wt = (if di == 1 { w[0] } else { 1.0 - w[0] }) * (if dj == 1 { w[1] } else { 1.0 - w[1] });
                if wt != 0.0 {
                    acc += wt * layer[g.flat([base[0] + di, base[1] + dj])];
                }
            }
            acc
        }
    }

    /// `u(t, x)` on the layer closest to `t`.
    pub fn at(&self, t: f64, x: &[f64]) -> f64 {
        self.interp(self.grid.layer_at(t), x)
    }

    /// Long-format CSV `t,x...,u,control...` on every `stride`-th layer plus
    /// the terminal layer.
    pub fn write_csv<W: Write>(&self, stride: usize, mut w: W) -> std::io::Result<()> {
        let g = &self.grid;
        let m = self.controls.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((0..g.dim()).map(|i| format!("x{i}")));
        header.push("u".into());
        header.extend((0..m).map(|i| format!("v{i}")));
        writeln!(w, "{}", header.join(","))?;
        let stride = stride.max(1);
        for k in (0..=g.time_steps).filter(|k| k % stride == 0 || *k == g.time_steps) {
            for node in 0..g.n_nodes() {
                let mut row = vec![fmt_f64(g.t(k))];
                row.extend(g.node_x(node).iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(self.value(k, node)));
                match self.control(k, node) {
                    Some(c) => row.extend(c.iter().map(|v| fmt_f64(*v))),
                    None => row.extend((0..m).map(|_| String::new())),
                }
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// One explicit step at a single interior node.
struct Scheme<'a> {
    grid: &'a SpaceTimeGrid,
    sde: &'a ControlledSDE,
    spec: &'a DriverSpec,
    cgrid: &'a ControlGrid,
    dt: f64,
}

impl Scheme<'_> {
    fn update(&self, t: f64, prev: &[f64], node: usize) -> Result<(f64, u32), HjbError> {
        let g = self.grid;
        let x = g.node_x(node);
        let idx = g.index(node);
        let u = prev[node];
        let dim = g.dim();
        let nb = |axis: usize, off: isize| -> f64 {
            let mut j = idx;
            j[axis] = (j[axis] as isize + off) as usize;
            prev[g.flat(j)]
        };
        let mut d2 = [0.0; 2];
        let mut fwd = [0.0; 2];
        let mut bwd = [0.0; 2];
        for i in 0..dim {
            let dx = g.axes[i].dx();
            let (up, dn) = (nb(i, 1), nb(i, -1));
            d2[i] = (up - 2.0 * u + dn) / (dx * dx);
            fwd[i] = (up - u) / dx;
            bwd[i] = (u - dn) / dx;
        }
        let (cross_pos, cross_neg) = if dim == 2 {
            let (dx, dy) = (g.axes[0].dx(), g.axes[1].dx());
            let at = |a: isize, b: isize| prev[g.flat([(idx[0] as isize + a) as usize, (idx[1] as isize + b) as usize])];
            let side = at(1, 0) + at(-1, 0) + at(0, 1) + at(0, -1);
            let pos = (2.0 * u + at(1, 1) + at(-1, -1) - side) / (2.0 * dx * dy);
            let neg = (side - 2.0 * u - at(1, -1) - at(-1, 1)) / (2.0 * dx * dy);
            (pos, neg)
        } else {
            (0.0, 0.0)
        };
        let z = vec![0.0; self.spec.audit_box.z.len()];
        let mut best = (f64::NEG_INFINITY, 0u32);
        for (ci, v) in self.cgrid.points.iter().enumerate() {
            let c = Coefficients::eval(self.sde, t, &x, v);
            let mut val = 0.0;
            for i in 0..dim {
                val += 0.5 * c.a[i * 2 + i] * d2[i];
                val += if c.b[i] >= 0.0 { c.b[i] * fwd[i] } else { c.b[i] * bwd[i] };
            }
            if dim == 2 {
                let a12 = c.a[1];
                val += if a12 >= 0.0 { a12 * cross_pos } else { a12 * cross_neg };
            }
            val += self.spec.f(t, &x, u, &z, v)?;
            if !val.is_finite() {
                return Err(HjbError::Evaluation { t, x, control: v.clone() });
            }
            if val > best.0 {
                best = (val, ci as u32);
            }
        }
        Ok((u + self.dt * best.0, best.1))
    }

    fn apply_boundary(&self, t: f64, layer: &mut [f64]) {
        let g = self.grid;
        match g.boundary {
            Boundary::Dirichlet => {
                for node in 0..g.n_nodes() {
                    if g.is_boundary(node) {
                        layer[node] = self.spec.h(&g.node_x(node));
                    }
                }
            }
            Boundary::Extrapolate => {
                let _ = t;
                for axis in 0..g.dim() {
                    let n = g.axes[axis].nodes;
                    let other = if g.dim() == 2 { g.axes[1 - axis].nodes } else { 1 };
                    for o in 0..other {
                        let at = |i: usize| -> usize {
                            let mut idx = [0; 2];
                            idx[axis] = i;
                            if g.dim() == 2 {
                                idx[1 - axis] = o;
                            }
                            g.flat(idx)
                        };
                        layer[at(0)] = 2.0 * layer[at(1)] - layer[at(2)];
                        layer[at(n - 1)] = 2.0 * layer[at(n - 2)] - layer[at(n - 3)];
                    }
                }
            }
        }
    }

    fn step(&self, k: usize, prev: &[f64], next: &mut [f64], ctrl: &mut [u32]) -> Result<(), HjbError> {
        let t = self.grid.t(k);
        let results: Vec<Result<(), HjbError>> = next
            .par_chunks_mut(CHUNK)
            .zip(ctrl.par_chunks_mut(CHUNK))
            .enumerate()
            .map(|(ci, (out, cs))| {
                for (j, (o, c)) in out.iter_mut().zip(cs.iter_mut()).enumerate() {
                    let node = ci * CHUNK + j;
                    if self.grid.is_boundary(node) {
                        *c = NO_CONTROL;
                        continue;
                    }
                    let (val, arg) = self.update(t, prev, node)?;
                    *o = val;
                    *c = arg;
                }
                Ok(())
            })
            .collect();
        for r in results {
            r?;
        }
        self.apply_boundary(t, next);
        for (node, v) in next.iter().enumerate() {
            if !v.is_finite() || v.abs() > 1e12 {
                return Err(HjbError::Diverged { t, x: self.grid.node_x(node), value: v.abs() });
            }
        }
        Ok(())
    }
}

fn check_inputs(grid: &SpaceTimeGrid, sde: &ControlledSDE, spec: &DriverSpec, cgrid: &ControlGrid) -> Result<(), HjbError> {
    if grid.dim() != sde.dim_state || grid.dim() > 2 {
        return Err(HjbError::DimensionUnsupported(sde.dim_state));
    }
    if !spec.z_free() {
        return Err(HjbError::ZDependent);
    }
    if !spec.is_audited() {
        return Err(HjbError::NotAudited(spec.name.clone()));
    }
    if cgrid.is_empty() || cgrid.points.iter().any(|v| !sde.controls.contains(v)) {
        return Err(HjbError::InvalidGrid("control grid empty or outside the control set".into()));
    }
    let dt = grid.dt();
    if !(dt * spec.mu_plus() < 1.0) {
        return Err(HjbError::TimeStepTooLarge { dt, mu_plus: spec.mu_plus() });
    }
    Ok(())
}

/// Largest CFL number over all layers, nodes and controls; refuses grids
/// where it exceeds one or cross diffusion is not diagonally dominant.
pub fn cfl_check(grid: &SpaceTimeGrid, sde: &ControlledSDE, cgrid: &ControlGrid) -> Result<f64, HjbError> {
    let dt = grid.dt();
    let mut worst = 0.0f64;
    for k in 0..grid.time_steps {
        let t = grid.t(k);
        for node in 0..grid.n_nodes() {
            if grid.is_boundary(node) {
                continue;
            }
            let x = grid.node_x(node);
            for v in &cgrid.points {
                let (rate, dominant) = grid.cfl_rate(sde, t, &x, v);
                let cfl = dt * rate;
                if !dominant {
                    return Err(HjbError::CrossDiffusion { x, control: v.clone() });
                }
                if cfl > 1.0 + 1e-12 {
                    return Err(HjbError::SchemeNotMonotone { t, x, control: v.clone(), cfl });
                }
                worst = worst.max(cfl);
            }
        }
    }
    Ok(worst)
}

/// Backward march `u_k = u_{k+1} + dt H(t_k, x, u_{k+1}, Du_{k+1}, D2u_{k+1})`.
pub fn solve_hjb(
    grid: &SpaceTimeGrid,
    sde: &ControlledSDE,
    spec: &DriverSpec,
    cgrid: &ControlGrid,
) -> Result<ValueGrid, HjbError> {
    check_inputs(grid, sde, spec, cgrid)?;
    let max_cfl = cfl_check(grid, sde, cgrid)?;
    let nn = grid.n_nodes();
    let nt = grid.time_steps;
    let mut values = vec![0.0; (nt + 1) * nn];
    let mut argmax = vec![NO_CONTROL; nt * nn];
    for node in 0..nn {
        values[nt * nn + node] = spec.h(&grid.node_x(node));
    }
    let scheme = Scheme { grid, sde, spec, cgrid, dt: grid.dt() };
    for k in (0..nt).rev() {
        let (head, tail) = values.split_at_mut((k + 1) * nn);
        let prev = &tail[..nn];
        let next = &mut head[k * nn..];
        scheme.step(k, prev, next, &mut argmax[k * nn..(k + 1) * nn])?;
    }
    Ok(ValueGrid {
        grid: grid.clone(),
        values,
        argmax,
        controls: cgrid.points.clone(),
        meta: SchemeMeta {
            dt: grid.dt(),
            max_cfl,
            cfl_margin: 1.0 - max_cfl,
            boundary: grid.boundary,
            trust_margin: grid.trust_margin,
            boundary_note: match grid.boundary {
                Boundary::Dirichlet => "u = h imposed on the spatial boundary; compare inside the trust region only",
                Boundary::Extrapolate => "linear extrapolation on the spatial boundary; compare inside the trust region only",
            },
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonotonicityWitness {
    pub x: Vec<f64>,
    /// Stencil offset of the perturbed value relative to the node.
    pub offset: Vec<isize>,
    /// Change of the updated value caused by the `+1e-6` perturbation.
    pub change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub monotone: bool,
    pub probes: usize,
    pub witness: Option<MonotonicityWitness>,
}

/// Perturbs every stencil value of `u_{k+1} = h` by `+1e-6` at `probes`
/// interior nodes and checks that the updated value never decreases.
pub fn scheme_monotonicity_check(
    grid: &SpaceTimeGrid,
    sde: &ControlledSDE,
    spec: &DriverSpec,
    cgrid: &ControlGrid,
    probes: usize,
) -> Result<MonotonicityReport, HjbError> {
    const BUMP: f64 = 1e-6;
    let nn = grid.n_nodes();
    let interior: Vec<usize> = (0..nn).filter(|&i| !grid.is_boundary(i)).collect();
    let mut prev: Vec<f64> = (0..nn).map(|i| spec.h(&grid.node_x(i))).collect();
    let scheme = Scheme { grid, sde, spec, cgrid, dt: grid.dt() };
    let t = grid.t(grid.time_steps.saturating_sub(1));
    let count = probes.min(interior.len()).max(1);
    let offsets: Vec<Vec<isize>> = if grid.dim() == 1 {
        vec![vec![-1], vec![0], vec![1]]
    } else {
        let mut o = Vec::new();
        for b in -1..=1 {
            for a in -1..=1 {
                o.push(vec![a, b]);
            }
        }
        o
    };
    for p in 0..count {
        let node = interior[p * interior.len() / count];
        let base = scheme.update(t, &prev, node)?.0;
        let idx = grid.index(node);
        for off in &offsets {
            let mut j = idx;
            for (i, o) in off.iter().enumerate() {
                j[i] = (j[i] as isize + o) as usize;
            }
            let target = grid.flat(j);
            let saved = prev[target];
            prev[target] = saved + BUMP;
            let bumped = scheme.update(t, &prev, node);
            prev[target] = saved;
            let change = bumped?.0 - base;
            if change < -1e-12 * base.abs().max(1.0) {
                return Ok(MonotonicityReport {
                    monotone: false,
                    probes: count,
                    witness: Some(MonotonicityWitness { x: grid.node_x(node), offset: off.clone(), change }),
                });
            }
        }
    }
    Ok(MonotonicityReport { monotone: true, probes: count, witness: None })
}

/// Largest `|a - b|` over trust-region nodes on every time layer.
pub fn trust_gap(a: &ValueGrid, b: &ValueGrid) -> f64 {
    let nodes = a.grid.trust_nodes();
    let mut gap = 0.0f64;
    for k in 0..=a.grid.time_steps {
        for &n in &nodes {
            gap = gap.max((a.value(k, n) - b.value(k, n)).abs());
        }
    }
    gap
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: u32,
    /// `sup |u_n - u|` over the trust region.
    pub u_gap: f64,
    /// `max |H_n - H|` over the probe tuples.
    pub h_gap: f64,
    /// Largest `sup_v |f_n - f|` over the same probes.
    pub f_gap: f64,
    /// `|H_n - H| <= sup_v |f_n - f|` at every probe.
    pub bound_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    pub fn u_gaps_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].u_gap < w[0].u_gap)
    }
}

/// Deterministic probe tuples: `t` on the grid horizon, `x` in the trust
/// region, `r` in the driver's audit range, `p` and `A` entries in `[-1, 1]`.
pub fn probe_tuples(grid: &SpaceTimeGrid, spec: &DriverSpec, count: usize) -> Vec<HamiltonianProbe> {
    let n = grid.dim();
    let tr = grid.trust_region();
    let halton = Halton::new(2 + 2 * n + n * n);
    let mut q = vec![0.0; halton.dim()];
    (0..count)
        .map(|i| {
            halton.point(i, &mut q);
            let t = grid.t0 + (grid.horizon - grid.t0) * q[0];
            let x: Vec<f64> = (0..n).map(|j| tr[j].0 + (tr[j].1 - tr[j].0) * q[1 + j]).collect();
            let (ylo, yhi) = spec.audit_box.y;
            let r = ylo + (yhi - ylo) * q[1 + n];
            let p: Vec<f64> = (0..n).map(|j| 2.0 * q[2 + n + j] - 1.0).collect();
            let mut a = vec![0.0; n * n];
            for r_ in 0..n {
                for c in r_..n {
                    let v = 2.0 * q[2 + 2 * n + r_ * n + c] - 1.0;
                    a[r_ * n + c] = v;
                    a[c * n + r_] = v;
                }
            }
            HamiltonianProbe { t, x, r, p, a }
        })
        .collect()
}

/// `sup_v |f_a - f_b|` over the control grid at one `(t, x, r)`.
pub fn driver_gap_on_grid(a: &DriverSpec, b: &DriverSpec, t: f64, x: &[f64], r: f64, cgrid: &ControlGrid) -> Result<f64, HjbError> {
    let z = vec![0.0; a.audit_box.z.len()];
    let mut gap = 0.0f64;
    for v in &cgrid.points {
        gap = gap.max((a.f(t, x, r, &z, v)? - b.f(t, x, r, &z, v)?).abs());
    }
    Ok(gap)
}

/// Solves with `f` and with each mollified `f_n`, reporting value and
/// Hamiltonian gaps.
pub fn convergence_study(
    grid: &SpaceTimeGrid,
    sde: &ControlledSDE,
    spec: &DriverSpec,
    molls: &[u32],
    cgrid: &ControlGrid,
    probes: usize,
    audit_budget: usize,
) -> Result<ConvergenceTable, HjbError> {
    let base = solve_hjb(grid, sde, spec, cgrid)?;
    let tuples = probe_tuples(grid, spec, probes);
    let mut rows = Vec::with_capacity(molls.len());
    for &n in molls {
        let fnspec = mollify(spec, MollifierSpec::new(n))?.require_audit(audit_budget)?;
        let un = solve_hjb(grid, sde, &fnspec, cgrid)?;
        let mut h_gap = 0.0f64;
        let mut f_gap = 0.0f64;
        let mut holds = true;
        for p in &tuples {
            let h = hamiltonian(p.t, &p.x, p.r, &p.p, &p.a, sde, spec, cgrid)?.0;
            let hn = hamiltonian(p.t, &p.x, p.r, &p.p, &p.a, sde, &fnspec, cgrid)?.0;
            let bound = driver_gap_on_grid(&fnspec, spec, p.t, &p.x, p.r, cgrid)?;
            let diff = (hn - h).abs();
            // the candidates share every term but f, so only summation rounding separates the two sides
            let slack = 8.0 * f64::EPSILON * (h.abs() + hn.abs() + bound);
            holds &= diff <= bound + slack;
            h_gap = h_gap.max(diff);
            f_gap = f_gap.max(bound);
        }
        rows.push(ConvergenceRow { n, u_gap: trust_gap(&un, &base), h_gap, f_gap, bound_holds: holds });
    }
    Ok(ConvergenceTable { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruncationRow {
    pub m: f64,
    pub u_gap: f64,
    /// Every value on every layer equal bit for bit.
    pub identical: bool,
}

/// Solves with `f` and with each truncation `f_m`.
pub fn truncation_study(
    grid: &SpaceTimeGrid,
    sde: &ControlledSDE,
    spec: &DriverSpec,
    ms: &[f64],
    cgrid: &ControlGrid,
    audit_budget: usize,
) -> Result<Vec<TruncationRow>, HjbError> {
    let base = solve_hjb(grid, sde, spec, cgrid)?;
    let mut rows = Vec::new();
    for &m in ms {
        let tm = truncate(spec, m).require_audit(audit_budget)?;
        let um = solve_hjb(grid, sde, &tm, cgrid)?;
        let identical = um.values.iter().zip(&base.values).all(|(a, b)| a.to_bits() == b.to_bits());
        rows.push(TruncationRow { m, u_gap: trust_gap(&um, &base), identical });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::{AuditBox, LinearDriver};
    use std::sync::Arc;

    fn zero_spec() -> DriverSpec {
        LinearDriver::spec(0.0, 0.0, AuditBox::new(1, 1, 1)).require_audit(64).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let sde = ControlledSDE::zero(1, 1.0);
        let spec = zero_spec();
        let cg = ControlGrid::single(vec![0.0]);
        assert_eq!(hamiltonian(0.0, &[0.0], 0.0, &[1.0], &[1.0], &sde, &spec, &cg).unwrap(), (0.0, 0));

        let set = ControlSet::new(vec![-1.0], vec![1.0]).unwrap();
        let sde = ControlledSDE::arithmetic(0.0, 0.0, 1.0, set.clone());
        let cg = ControlGrid::uniform(&set, &[2]).unwrap();
        let (h, i) = hamiltonian(0.0, &[0.0], 0.0, &[2.0], &[0.0], &sde, &spec, &cg).unwrap();
        assert_eq!(h, 2.0);
        assert_eq!(cg.points[i], vec![1.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let set = ControlSet::new(vec![-1.0], vec![1.0]).unwrap();
        let sde = ControlledSDE::arithmetic(0.0, 0.0, 1.0, set.clone());
        let cg = ControlGrid::uniform(&set, &[5]).unwrap();
        let (_, i) = hamiltonian(0.0, &[0.0], 0.0, &[0.0], &[0.0], &sde, &zero_spec(), &cg).unwrap();
        assert_eq!(i, 0);
    }

    #[test]
    fn control_grid_refinement_nests() {
        let set = ControlSet::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        let g = ControlGrid::uniform(&set, &[3, 2]).unwrap();
        let f = g.refined(&set).unwrap();
        assert_eq!(f.resolution, vec![5, 3]);
        for p in &g.points {
            assert!(f.points.contains(p));
        }
    }

    #[test]
    fn frozen_dynamics_keep_terminal() {
        let sde = ControlledSDE::zero(1, 1.0);
        let spec = zero_spec().with_terminal(Arc::new(|x| x[0].sin()), 1.0).require_audit(64).unwrap();
        let grid = SpaceTimeGrid::new(1.0, 10, vec![Axis::new(-1.0, 1.0, 21)], Boundary::Dirichlet).unwrap();
        let v = solve_hjb(&grid, &sde, &spec, &ControlGrid::single(vec![0.0])).unwrap();
        for k in 0..=10 {
            for n in 0..21 {
                assert_eq!(v.value(k, n), grid.node_x(n)[0].sin());
            }
        }
    }

    #[test]
    fn cfl_violation_is_refused() {
        let set = ControlSet::singleton(vec![0.0]);
        let sde = ControlledSDE::arithmetic(0.0, 1.0, 1.0, set);
        let grid = SpaceTimeGrid::new(1.0, 10, vec![Axis::new(-1.0, 1.0, 41)], Boundary::Dirichlet).unwrap();
        let r = solve_hjb(&grid, &sde, &zero_spec(), &ControlGrid::single(vec![0.0]));
        assert!(matches!(r, Err(HjbError::SchemeNotMonotone { .. })));
        assert!(r.unwrap_err().to_string().starts_with("SchemeNotMonotone"));
    }

    #[test]
    fn interpolation_is_exact_for_linear_layers() {
        let sde = ControlledSDE::zero(1, 1.0);
        let spec = zero_spec().with_terminal(Arc::new(|x| 3.0 * x[0] - 1.0), 3.0).require_audit(64).unwrap();
        let grid = SpaceTimeGrid::new(1.0, 2, vec![Axis::new(0.0, 1.0, 11)], Boundary::Extrapolate).unwrap();
        let v = solve_hjb(&grid, &sde, &spec, &ControlGrid::single(vec![0.0])).unwrap();
        for x in [0.0, 0.123, 0.5, 0.999, 1.0] {
            assert!((v.interp(0, &[x]) - (3.0 * x - 1.0)).abs() < 1e-14);
        }
        assert_eq!(v.interp(0, &[2.0]), v.value(0, 10));
    }

    #[test]
    fn two_dimensional_heat_is_exact_for_quadratics() {
        let n = 2;
        let sde = ControlledSDE::new(
            n,
            2,
            1.0,
            ControlSet::singleton(vec![0.0]),
            Arc::new(|_, _, _, out| out.fill(0.0)),
            Arc::new(|_, _, _, out| {
                out.copy_from_slice(&[0.3, 0.1, 0.0, 0.2]);
            }),
        );
        let spec = zero_spec();
        let mut bx = AuditBox::new(2, 1, 1);
        bx.x = vec![(-1.0, 1.0); 2];
        let spec = spec.with_audit_box(bx).with_terminal(Arc::new(|x| x[0] * x[1]), 2.0).require_audit(64).unwrap();
        let cg = ControlGrid::single(vec![0.0]);
        let grid = SpaceTimeGrid::new(1.0, 1, vec![Axis::new(-1.0, 1.0, 21), Axis::new(-1.0, 1.0, 21)], Boundary::Extrapolate)
            .unwrap()
            .with_cfl_steps(&sde, &cg, 0.9);
        let v = solve_hjb(&grid, &sde, &spec, &cg).unwrap();
        // a12 = 0.3*0.0 + 0.1*0.2 = 0.02, so u = xy + 0.02 (T - t)
        let node = grid.flat([10, 10]);
        assert!((v.value(0, node) - 0.02).abs() < 1e-12);
    }
}
