//! Dense complex matrices for the propagator ODEs, plus spectral norms by
//! power iteration with an SVD fallback.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

/// Square complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    n: usize,
    data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(n: usize) -> Self {
        CMat { n, data: vec![Complex64::ZERO; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = Complex64::ONE;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.n + j] = v;
    }

    /// `self * b`, parallel over output rows; each row is accumulated
    /// sequentially so results are bit-reproducible.
    pub fn mul(&self, b: &CMat) -> CMat {
        assert_eq!(self.n, b.n);
        let n = self.n;
        let mut out = CMat::zeros(n);
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| {
                for k in 0..n {
                    let a = self.data[i * n + k];
                    if a == Complex64::ZERO {
                        continue;
                    }
                    let brow = &b.data[k * n..(k + 1) * n];
                    for (r, bv) in row.iter_mut().zip(brow) {
                        *r += a * bv;
                    }
                }
            });
        out
    }

    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.n);
        let n = self.n;
        (0..n)
            .map(|i| {
                let row = &self.data[i * n..(i + 1) * n];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: Complex64, other: &CMat) {
        assert_eq!(self.n, other.n);
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
    }

    pub fn scale(&mut self, a: Complex64) {
        for s in self.data.iter_mut() {
            *s *= a;
        }
    }

    pub fn sub(&self, other: &CMat) -> CMat {
        assert_eq!(self.n, other.n);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        CMat { n: self.n, data }
    }

    pub fn add(&self, other: &CMat) -> CMat {
        assert_eq!(self.n, other.n);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        CMat { n: self.n, data }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// `|| self self^dagger - I ||_F`: the unitarity defect.
    pub fn unitary_defect(&self) -> f64 {
        let n = self.n;
        let mut total = 0f64;
        for i in 0..n {
            let ri = &self.data[i * n..(i + 1) * n];
            for j in i..n {
                let rj = &self.data[j * n..(j + 1) * n];
                let mut acc = Complex64::ZERO;
                for (a, b) in ri.iter().zip(rj) {
                    acc += a * b.conj();
                }
                if i == j {
                    total += (acc - Complex64::ONE).norm_sqr();
                } else {
                    total += 2.0 * acc.norm_sqr();
                }
            }
        }
        total.sqrt()
    }

    /// Maximum deviation of column l2-norms from 1.
    pub fn column_norm_defect(&self) -> f64 {
        let n = self.n;
        (0..n)
            .map(|j| {
                let s: f64 = (0..n).map(|i| self.data[i * n + j].norm_sqr()).sum();
                (s.sqrt() - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Spectral norm (largest singular value) of a dense rectangular complex
/// matrix given in row-major order.
///
/// Primary route: power iteration on `A^dagger A` with a deterministic start
/// and Rayleigh-quotient convergence control. If the iteration has not
/// settled and the dimensions allow it, falls back to a dense SVD.
pub fn spectral_norm(rows: usize, cols: usize, data: &[Complex64]) -> f64 {
    assert_eq!(data.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let frob_sq: f64 = data.iter().map(|c| c.norm_sqr()).sum();
    if frob_sq == 0.0 {
        return 0.0;
    }
    // deterministic start with mildly varying phases so symmetric matrices
    // do not trap the iterate in a null direction
    let mut x: Vec<Complex64> = (0..cols)
        .map(|j| Complex64::from_polar(1.0, 0.7 * j as f64 + 0.31))
        .collect();
    normalize(&mut x);
    let mut prev = 0f64;
    let mut converged = false;
    let mut estimate = 0f64;
    for iter in 0..600 {
        // y = A x; x' = A^dagger y
        let mut y = vec![Complex64::ZERO; rows];
        for (i, yi) in y.iter_mut().enumerate() {
            let row = &data[i * cols..(i + 1) * cols];
            *yi = row.iter().zip(&x).map(|(a, b)| a * b).sum();
        }
        let mut xn = vec![Complex64::ZERO; cols];
        for (i, yi) in y.iter().enumerate() {
            if *yi == Complex64::ZERO {
                continue;
            }
            let row = &data[i * cols..(i + 1) * cols];
            for (xj, a) in xn.iter_mut().zip(row) {
                *xj += a.conj() * yi;
            }
        }
        // Rayleigh quotient for sigma^2 is ||y||^2 when x is unit
        let sigma_sq: f64 = y.iter().map(|c| c.norm_sqr()).sum();
        estimate = sigma_sq.sqrt();
        let norm_xn: f64 = xn.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if norm_xn == 0.0 {
            return 0.0;
        }
        for v in xn.iter_mut() {
            *v /= norm_xn;
        }
        x = xn;
        if iter > 4 && (estimate - prev).abs() <= 1e-13 * estimate.max(1e-300) {
            converged = true;
            break;
        }
        prev = estimate;
    }
    if !converged && rows <= 256 && cols <= 256 {
        let m = DMatrix::from_row_slice(rows, cols, data);
        let svd = m.svd(false, false);
        return svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    }
    estimate
}

fn normalize(x: &mut [Complex64]) {
    let n: f64 = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if n > 0.0 {
        for v in x.iter_mut() {
            *v /= n;
        }
    }
}

/// Dense-SVD spectral norm; the independent oracle for tests.
pub fn spectral_norm_svd(rows: usize, cols: usize, data: &[Complex64]) -> f64 {
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let m = DMatrix::from_row_slice(rows, cols, data);
    let svd = m.svd(false, false);
    svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b))
}
