//! Least-squares estimation of conditional expectations on the state.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sde::CHUNK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Basis {
    /// Monomials of total degree at most `degree` in the standardized state.
    Polynomial { degree: u32 },
    /// Indicators of `k` equal-width bins of a scalar state.
    Bins { k: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub basis: Basis,
    pub ridge: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self { basis: Basis::Polynomial { degree: 3 }, ridge: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RegressionFailure {
    NonFinite,
    Singular,
    Unsupported(String),
}

impl std::fmt::Display for RegressionFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::NonFinite => f.write_str("non-finite regression coefficients"),
            Self::Singular => f.write_str("normal equations not positive definite"),
            Self::Unsupported(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Features {
    Poly { mean: Vec<f64>, scale: Vec<f64>, exponents: Vec<Vec<u32>> },
    Bins { lo: f64, width: f64, k: usize },
}

/// Basis functions fixed on one cross-section of states.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    features: Features,
    dim: usize,
}

fn monomials(active: &[usize], n: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; n]];
    for total in 1..=degree {
        let mut cur = vec![0u32; active.len()];
        gen(active, n, total, 0, &mut cur, &mut out);
    }
    out
}

fn gen(active: &[usize], n: usize, left: u32, pos: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == active.len() {
        cur[pos] = left;
        let mut e = vec![0; n];
        for (a, c) in active.iter().zip(cur.iter()) {
            e[*a] = *c;
        }
        out.push(e);
        return;
    }
    for k in (0..=left).rev() {
        cur[pos] = k;
        gen(active, n, left - k, pos + 1, cur, out);
    }
}

impl Design {
    /// Builds the basis for states `xs` (`rows x n`, row-major). Coordinates
    /// with spread below `1e-14` are dropped, so a common start collapses to
    /// the constant basis.
    pub fn new(cfg: &RegressionConfig, xs: &[f64], n: usize) -> Result<Self, RegressionFailure> {
        let rows = xs.len() / n;
        let mut mean = vec![0.0; n];
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for r in xs.chunks(n) {
            for j in 0..n {
                mean[j] += r[j];
                lo[j] = lo[j].min(r[j]);
                hi[j] = hi[j].max(r[j]);
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; n];
        for r in xs.chunks(n) {
            for j in 0..n {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let scale: Vec<f64> = var.iter().map(|v| (v / rows as f64).sqrt()).collect();
        let active: Vec<usize> = (0..n).filter(|&j| scale[j] >= 1e-14 && hi[j] > lo[j]).collect();
        let features = match cfg.basis {
            Basis::Polynomial { degree } => {
                let exponents = if active.is_empty() { vec![vec![0; n]] } else { monomials(&active, n, degree) };
                Features::Poly { mean, scale, exponents }
            }
            Basis::Bins { k } => {
                if n != 1 {
                    return Err(RegressionFailure::Unsupported("bin basis needs a scalar state".into()));
                }
                if k == 0 {
                    return Err(RegressionFailure::Unsupported("bin basis needs k >= 1".into()));
                }
                if active.is_empty() {
                    Features::Bins { lo: lo[0], width: 1.0, k: 1 }
                } else {
                    Features::Bins { lo: lo[0], width: (hi[0] - lo[0]) / k as f64, k }
                }
            }
        };
        Ok(Self { features, dim: n })
    }

    pub fn len(&self) -> usize {
        match &self.features {
            Features::Poly { exponents, .. } => exponents.len(),
            Features::Bins { k, .. } => *k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn describe(&self) -> String {
        match &self.features {
            Features::Poly { exponents, .. } => {
                let deg = exponents.iter().map(|e| e.iter().sum::<u32>()).max().unwrap_or(0);
                format!("poly(deg={deg}, terms={})", exponents.len())
            }
            Features::Bins { k, .. } => format!("bins(k={k})"),
        }
    }

    /// Writes the basis row for state `x` into `out`.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match &self.features {
            Features::Poly { mean, scale, exponents } => {
                let mut z = [0.0; 8];
                let small = self.dim <= z.len();
                if small {
                    for j in 0..self.dim {
                        z[j] = (x[j] - mean[j]) / scale[j];
                    }
                }
                for (o, e) in out.iter_mut().zip(exponents) {
                    let mut v = 1.0;
                    for j in 0..self.dim {
                        if e[j] > 0 {
                            let zj = if small { z[j] } else { (x[j] - mean[j]) / scale[j] };
                            v *= zj.powi(e[j] as i32);
                        }
                    }
                    *o = v;
                }
            }
            Features::Bins { lo, width, k } => {
                out.fill(0.0);
                let b = ((x[0] - lo) / width).floor();
                let idx = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(k - 1) };
                out[idx] = 1.0;
            }
        }
    }

    fn penalized(&self, i: usize) -> bool {
        match &self.features {
            Features::Poly { .. } => i > 0,
            Features::Bins { .. } => true,
        }
    }
}

/// Fitted coefficients, one column per target. Keeps the basis matrix of the
/// fitting sample so extra targets and in-sample predictions are cheap.
#[derive(Clone, Debug)]
pub struct Fit {
    pub design: Design,
    pub coefs: Vec<DVector<f64>>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    phi: Vec<f64>,
}

impl Fit {
    pub fn predict(&self, target: usize, phi: &[f64]) -> f64 {
        self.coefs[target].iter().zip(phi).map(|(c, p)| c * p).sum()
    }

    /// Fitted values of `target` at every row of the fitting sample.
    pub fn fitted(&self, target: usize, out: &mut [f64]) {
        let k = self.design.len();
        let c = &self.coefs[target];
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, o)| {
            for (j, v) in o.iter_mut().enumerate() {
                let row = &self.phi[(ci * CHUNK + j) * k..(ci * CHUNK + j + 1) * k];
                *v = c.iter().zip(row).map(|(a, b)| a * b).sum();
            }
        });
    }

    /// Solves with the stored normal matrix for an extra right-hand side on
    /// the fitting sample.
    pub fn refit(&mut self, target: &[f64]) -> Result<usize, RegressionFailure> {
        let rhs = moments(&self.phi, self.design.len(), &[target]);
        let c = self.chol.solve(&rhs[0]);
        if c.iter().any(|v| !v.is_finite()) {
            return Err(RegressionFailure::NonFinite);
        }
        self.coefs.push(c);
        Ok(self.coefs.len() - 1)
    }
}

fn basis_matrix(design: &Design, xs: &[f64]) -> Vec<f64> {
    let n = design.dim;
    let k = design.len();
    let mut phi = vec![0.0; xs.len() / n * k];
    phi.par_chunks_mut(CHUNK * k).zip(xs.par_chunks(CHUNK * n)).for_each(|(out, x)| {
        for (o, xr) in out.chunks_mut(k).zip(x.chunks(n)) {
            design.eval(xr, o);
        }
    });
    phi
}

fn moments(phi: &[f64], k: usize, targets: &[&[f64]]) -> Vec<DVector<f64>> {
    let rows = phi.len() / k;
    let parts: Vec<Vec<f64>> = phi
        .par_chunks(CHUNK * k)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = vec![0.0; k * targets.len()];
            for (j, row) in chunk.chunks(k).enumerate() {
                let r = ci * CHUNK + j;
                for (t, y) in targets.iter().enumerate() {
                    let yv = y[r];
                    for i in 0..k {
                        acc[t * k + i] += row[i] * yv;
                    }
                }
            }
            acc
        })
        .collect();
    (0..targets.len())
        .map(|t| {
            let mut v = DVector::zeros(k);
            for p in &parts {
                for i in 0..k {
                    v[i] += p[t * k + i];
                }
            }
            v / rows as f64
        })
        .collect()
}

fn gram(phi: &[f64], k: usize) -> DMatrix<f64> {
    let rows = phi.len() / k;
    let parts: Vec<Vec<f64>> = phi
        .par_chunks(CHUNK * k)
        .map(|chunk| {
            let mut acc = vec![0.0; k * k];
            for row in chunk.chunks(k) {
                for i in 0..k {
                    if row[i] == 0.0 {
                        continue;
                    }
                    for j in i..k {
                        acc[i * k + j] += row[i] * row[j];
                    }
                }
            }
            acc
        })
        .collect();
    let mut g = DMatrix::zeros(k, k);
    for p in &parts {
        for i in 0..k {
            for j in i..k {
                g[(i, j)] += p[i * k + j];
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            let v = g[(i, j)] / rows as f64;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Ridge least squares of each target on the basis built from `xs`. Sums run
/// over fixed-size chunks in order, so the result does not depend on the
/// number of worker threads.
pub fn fit(cfg: &RegressionConfig, xs: &[f64], n: usize, targets: &[&[f64]]) -> Result<Fit, RegressionFailure> {
    if xs.is_empty() || xs.len() % n != 0 {
        return Err(RegressionFailure::Unsupported("empty or ragged state sample".into()));
    }
    let design = Design::new(cfg, xs, n)?;
    fit_with(design, cfg.ridge, xs, targets)
}

pub fn fit_with(design: Design, ridge: f64, xs: &[f64], targets: &[&[f64]]) -> Result<Fit, RegressionFailure> {
    let k = design.len();
    let phi = basis_matrix(&design, xs);
    let mut g = gram(&phi, k);
    for i in 0..k {
        if design.penalized(i) {
            g[(i, i)] += ridge;
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(RegressionFailure::NonFinite);
    }
    let chol = g.cholesky().ok_or(RegressionFailure::Singular)?;
    let rhs = moments(&phi, k, targets);
    let coefs: Vec<DVector<f64>> = rhs.iter().map(|b| chol.solve(b)).collect();
    if coefs.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(RegressionFailure::NonFinite);
    }
    Ok(Fit { design, coefs, chol, phi })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_count() {
        assert_eq!(monomials(&[0], 1, 3).len(), 4);
        assert_eq!(monomials(&[0, 1], 2, 3).len(), 10);
        assert_eq!(monomials(&[1], 2, 2), vec![vec![0, 0], vec![0, 1], vec![0, 2]]);
    }

    #[test]
    fn recovers_cubic_exactly() {
        let xs: Vec<f64> = (0..500).map(|i| -2.0 + 4.0 * i as f64 / 499.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x * x).collect();
        let cfg = RegressionConfig { ridge: 0.0, ..Default::default() };
        let f = fit(&cfg, &xs, 1, &[&ys]).unwrap();
        let mut phi = vec![0.0; f.design.len()];
        for x in [-1.5, 0.3, 1.9] {
            f.design.eval(&[x], &mut phi);
            assert!((f.predict(0, &phi) - (1.0 - 2.0 * x + 0.5 * x * x * x)).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_sample_gives_mean() {
        let xs = vec![2.0; 64];
        let ys: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let f = fit(&RegressionConfig::default(), &xs, 1, &[&ys]).unwrap();
        assert_eq!(f.design.len(), 1);
        assert!((f.coefs[0][0] - 31.5).abs() < 1e-12);
    }

    #[test]
    fn intercept_is_not_shrunk() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let ys = vec![7.25; 100];
        let f = fit(&RegressionConfig::default(), &xs, 1, &[&ys]).unwrap();
        let mut phi = vec![0.0; f.design.len()];
        f.design.eval(&[13.0], &mut phi);
        assert!((f.predict(0, &phi) - 7.25).abs() < 1e-10);
    }

    #[test]
    fn bins_average_within_bin() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| if *x < 50.0 { 1.0 } else { 3.0 }).collect();
        let cfg = RegressionConfig { basis: Basis::Bins { k: 2 }, ridge: 0.0 };
        let f = fit(&cfg, &xs, 1, &[&ys]).unwrap();
        let mut phi = vec![0.0; 2];
        f.design.eval(&[10.0], &mut phi);
        assert!((f.predict(0, &phi) - 1.0).abs() < 1e-12);
        f.design.eval(&[99.0], &mut phi);
        assert!((f.predict(0, &phi) - 3.0).abs() < 1e-12);
        assert!(fit(&cfg, &[0.0, 1.0, 2.0, 3.0], 2, &[&[1.0, 2.0]]).is_err());
    }
}
