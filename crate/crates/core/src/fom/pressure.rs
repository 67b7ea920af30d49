//! Symmetric positive-definite banded solver for the TPFA pressure system.
//!
//! The 5-point stencil on an `nx * ny` grid gives bandwidth `nx`; a banded
//! Cholesky factorization is exact, deterministic, and costs `O(n * nx^2)`.

use crate::{Error, Result};
use nalgebra::DVector;

/// Lower-banded symmetric matrix. Row `i` stores `A[i][j]` for
/// `j in [i - bw, i]` at `band[i * (bw + 1) + (j - i + bw)]`.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Add to entry (i, j) with j <= i (lower triangle).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.band[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.band[self.idx(i, j)]
    }

    /// Jacobi equilibration: returns `S A S` with `S = diag(1/sqrt(a_ii))`
    /// plus the scale vector. Strong coefficient contrast makes the raw
    /// factorization's backward error exceed flux-balance tolerances;
    /// scaling restores it.
    pub fn equilibrated(&self) -> (BandedSpd, DVector<f64>) {
        let (n, bw) = (self.n, self.bw);
        let scale = DVector::from_fn(n, |i, _| 1.0 / self.get(i, i).sqrt());
        let mut out = BandedSpd::zeros(n, bw);
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                let k = out.idx(i, j);
                out.band[k] = self.get(i, j) * scale[i] * scale[j];
            }
        }
        (out, scale)
    }

    /// Symmetric matrix-vector product.
    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let (n, bw) = (self.n, self.bw);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let j_lo = i.saturating_sub(bw);
            let mut acc = self.get(i, i) * x[i];
            for j in j_lo..i {
                let v = self.get(i, j);
                acc += v * x[j];
                y[j] += v * x[i];
            }
            y[i] += acc;
        }
        y
    }

    /// In-place banded Cholesky, `A = L L^T`. Fails on a non-positive pivot.
    pub fn cholesky(mut self) -> Result<BandedCholesky> {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let j_lo = i.saturating_sub(bw);
            for j in j_lo..=i {
                let mut sum = self.get(i, j);
                let k_lo = j_lo.max(j.saturating_sub(bw));
                for k in k_lo..j {
                    sum -= self.get(i, k) * self.get(j, k);
                }
                if j < i {
                    let ljj = self.get(j, j);
                    let k = self.idx(i, j);
                    self.band[k] = sum / ljj;
                } else {
                    if sum <= 0.0 {
                        return Err(Error::PressureSolve {
                            step: 0,
                            reason: format!("non-positive Cholesky pivot {sum:.3e} at row {i}"),
                        });
                    }
                    let k = self.idx(i, i);
                    self.band[k] = sum.sqrt();
                }
            }
        }
        Ok(BandedCholesky { inner: self })
    }
}

/// Factorized form; solves by forward/backward substitution.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    inner: BandedSpd,
}

impl BandedCholesky {
    /// Solve with a couple of iterative-refinement passes against the
    /// unfactored matrix; strong permeability contrasts push the plain
    /// factorization's backward error above the flux-balance tolerance.
    pub fn solve_refined(&self, a: &BandedSpd, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = self.solve(rhs);
        for _ in 0..4 {
            let r = rhs - a.matvec(&x);
            if r.amax() <= 1e-300 {
                break;
            }
            let dx = self.solve(&r);
            let done = dx.amax() <= 1e-16 * x.amax();
            x += dx;
            if done {
                break;
            }
        }
        x
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let a = &self.inner;
        let (n, bw) = (a.n, a.bw);
        assert_eq!(rhs.len(), n);
        let mut y = rhs.clone();
        for i in 0..n {
            let j_lo = i.saturating_sub(bw);
            let mut sum = y[i];
            for j in j_lo..i {
                sum -= a.get(i, j) * y[j];
            }
            y[i] = sum / a.get(i, i);
        }
        for i in (0..n).rev() {
            let j_hi = (i + bw).min(n - 1);
            let mut sum = y[i];
            for j in (i + 1)..=j_hi {
                sum -= a.get(j, i) * y[j];
            }
            y[i] = sum / a.get(i, i);
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_dense_cholesky_on_random_spd_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 40;
        let bw = 6;
        let mut banded = BandedSpd::zeros(n, bw);
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(bw)..i {
                let v = rng.random_range(-1.0..1.0);
                banded.add(i, j, v);
                dense[(i, j)] = v;
                dense[(j, i)] = v;
            }
            let d = 2.0 * bw as f64 + rng.random_range(1.0..2.0);
            banded.add(i, i, d);
            dense[(i, i)] = d;
        }
        let rhs = DVector::from_fn(n, |i, _| (i as f64).sin());
        let x = banded.cholesky().unwrap().solve(&rhs);
        let x_ref = dense.cholesky().unwrap().solve(&rhs);
        assert!((x - x_ref).amax() < 1e-10);
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let mut a = BandedSpd::zeros(3, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, -1.0);
        a.add(2, 2, 1.0);
        assert!(a.cholesky().is_err());
    }
}
