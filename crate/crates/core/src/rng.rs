//! Counter-based random substreams and deterministic low-discrepancy points.
//!
//! Every simulated path owns a ChaCha8 stream selected by its path index, and
//! each time step consumes a fixed number of words from that stream. The normal
//! draw for `(seed, path, step)` therefore sits at a fixed counter position and
//! does not depend on how paths are scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TWO_POW_M53: f64 = 1.0 / 9_007_199_254_740_992.0;

/// Splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent child seed for a labelled sub-task.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(0x5151_5151)))
}

/// Normal draws for a single path.
#[derive(Clone, Debug)]
pub struct Substream {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Substream {
    /// Number of 32-bit ChaCha words consumed per step for `dim` normals.
    pub fn words_per_step(dim: usize) -> u128 {
        // one Box-Muller pair = two u64 = four words
        (dim.div_ceil(2) as u128) * 4
    }

    pub fn new(seed: u64, path: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        Self { rng, dim }
    }

    /// Positions the stream at the first word of `step`.
    pub fn at_step(seed: u64, path: u64, step: u64, dim: usize) -> Self {
        let mut s = Self::new(seed, path, dim);
        s.rng.set_word_pos(step as u128 * Self::words_per_step(dim));
        s
    }

    fn uniform_open(&mut self) -> f64 {
        // (0, 1]
        ((self.rng.next_u64() >> 11) + 1) as f64 * TWO_POW_M53
    }

    /// Fills `out` (length `dim`) with independent standard normals.
    pub fn next_normals(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut j = 0;
        while j < self.dim {
            let u1 = self.uniform_open();
            let u2 = self.uniform_open();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            out[j] = r * c;
            if j + 1 < self.dim {
                out[j + 1] = r * s;
            }
            j += 2;
        }
    }
}

fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut acc = 0.0;
    while index > 0 {
        acc += (index % base) as f64 * f;
        index /= base;
        f *= inv;
    }
    acc
}

const PRIMES: [u64; 32] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131,
];

/// Deterministic Halton point set in `[0,1)^dim` used by the condition audits.
#[derive(Clone, Debug)]
pub struct Halton {
    dim: usize,
}

impl Halton {
    pub fn new(dim: usize) -> Self {
        assert!(dim <= PRIMES.len(), "Halton dimension capped at {}", PRIMES.len());
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Point `i` (0-based; the all-zero origin is skipped).
    pub fn point(&self, i: usize, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate().take(self.dim) {
            *o = radical_inverse(i as u64 + 1, PRIMES[k]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_access_matches_sequential() {
        let mut seq = Substream::new(11, 3, 3);
        let mut buf = [0.0; 3];
        let mut rows = Vec::new();
        for _ in 0..5 {
            seq.next_normals(&mut buf);
            rows.push(buf);
        }
        let mut keyed = Substream::at_step(11, 3, 4, 3);
        keyed.next_normals(&mut buf);
        assert_eq!(buf, rows[4]);
    }

    #[test]
    fn distinct_paths_differ() {
        let mut a = Substream::new(1, 0, 1);
        let mut b = Substream::new(1, 1, 1);
        let (mut x, mut y) = ([0.0], [0.0]);
        a.next_normals(&mut x);
        b.next_normals(&mut y);
        assert_ne!(x, y);
    }

    #[test]
    fn normals_have_unit_variance() {
        let mut s = Substream::new(5, 0, 2);
        let mut buf = [0.0; 2];
        let n = 50_000;
        let (mut m, mut v) = (0.0, 0.0);
        for _ in 0..n {
            s.next_normals(&mut buf);
            for z in buf {
                m += z;
                v += z * z;
            }
        }
        let cnt = 2.0 * n as f64;
        assert!((m / cnt).abs() < 0.02);
        assert!((v / cnt - 1.0).abs() < 0.03);
    }

    #[test]
    fn halton_first_points() {
        let h = Halton::new(2);
        let mut p = [0.0; 2];
        h.point(0, &mut p);
        assert_eq!(p, [0.5, 1.0 / 3.0]);
        h.point(1, &mut p);
        assert_eq!(p, [0.25, 2.0 / 3.0]);
    }
}
