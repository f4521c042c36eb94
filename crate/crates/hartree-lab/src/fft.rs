//! Exact spectral arithmetic on the 3-torus.
//!
//! Products of band-limited functions are computed on a zero-padded grid of
//! size `G >= 4N + 1` per axis. A product of two factors supported in the box
//! `[-N, N]^3` has frequencies in `[-2N, 2N]^3`; a further multiplication by
//! a third factor reaches `[-3N, 3N]^3`, and with `G >= 4N + 1` none of those
//! frequencies alias back into the retained window `<k> <= N`. All grid
//! arithmetic below is therefore exact up to rounding.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::lattice::{FourierState, Mode, ModeSet};

/// A cubic FFT grid of odd size `G` per axis, with cached 1-D plans.
///
/// Layout is row-major `[x][y][z]` (z fastest). Fourier synthesis is the
/// plain unnormalized sum `u(x_j) = sum_k u_k e^{i k . x_j}`; analysis divides
/// by `G^3`, matching the orthonormal-exponential convention in which
/// integrals over the torus are grid means.
pub struct SpectralGrid {
    g: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectralGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralGrid").field("g", &self.g).finish()
    }
}

impl SpectralGrid {
    /// Grid with `G = max(4N + 1, 5)` points per axis.
    pub fn for_scale(n: u32) -> Self {
        Self::with_size((4 * n as usize + 1).max(5))
    }

    pub fn with_size(g: usize) -> Self {
        assert!(g >= 2, "grid too small");
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(g);
        let inv = planner.plan_fft_inverse(g);
        SpectralGrid { g, fwd, inv }
    }

    pub fn size(&self) -> usize {
        self.g
    }

    pub fn len(&self) -> usize {
        self.g * self.g * self.g
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Largest `|j|` per axis that is represented without ambiguity.
    pub fn max_freq(&self) -> i64 {
        (self.g as i64 - 1) / 2
    }

    #[inline]
    fn wrap(&self, c: i64) -> usize {
        let g = self.g as i64;
        (((c % g) + g) % g) as usize
    }

    /// Flat index of frequency `k` (wrapped modulo `G`).
    #[inline]
    pub fn index_of(&self, k: Mode) -> usize {
        let g = self.g;
        (self.wrap(k[0]) * g + self.wrap(k[1])) * g + self.wrap(k[2])
    }

    /// Signed frequency of a flat index, in `[-(G-1)/2, (G-1)/2]^3`.
    pub fn freq_of(&self, idx: usize) -> Mode {
        let g = self.g;
        let z = idx % g;
        let y = (idx / g) % g;
        let x = idx / (g * g);
        let signed = |c: usize| {
            let c = c as i64;
            if c <= (g as i64 - 1) / 2 {
                c
            } else {
                c - g as i64
            }
        };
        [signed(x), signed(y), signed(z)]
    }

    fn fft3_inplace(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let g = self.g;
        assert_eq!(data.len(), self.len());
        // z-axis: contiguous lines, one batched call
        plan.process(data);
        // y-axis and x-axis: gather, transform, scatter
        let mut line = vec![Complex64::ZERO; g];
        for x in 0..g {
            for z in 0..g {
                for y in 0..g {
                    line[y] = data[(x * g + y) * g + z];
                }
                plan.process(&mut line);
                for y in 0..g {
                    data[(x * g + y) * g + z] = line[y];
                }
            }
        }
        for y in 0..g {
            for z in 0..g {
                for x in 0..g {
                    line[x] = data[(x * g + y) * g + z];
                }
                plan.process(&mut line);
                for x in 0..g {
                    data[(x * g + y) * g + z] = line[x];
                }
            }
        }
    }

    /// Frequency data -> physical samples, in place (unnormalized synthesis).
    pub fn to_physical(&self, data: &mut [Complex64]) {
        self.fft3_inplace(data, &self.inv);
    }

    /// Physical samples -> frequency data, in place (normalized by `1/G^3`).
    pub fn to_frequency(&self, data: &mut [Complex64]) {
        self.fft3_inplace(data, &self.fwd);
        let scale = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    /// Physical samples of a state: `u(x_j) = sum_k u_k e^{i k . x_j}`.
    pub fn synthesize(&self, u: &FourierState) -> Vec<Complex64> {
        self.synthesize_table(
            u.mode_set()
                .modes()
                .iter()
                .copied()
                .zip(u.coeffs().iter().copied()),
        )
    }

    /// Physical samples of an arbitrary finitely supported lattice function.
    pub fn synthesize_table(
        &self,
        entries: impl Iterator<Item = (Mode, Complex64)>,
    ) -> Vec<Complex64> {
        let mut data = vec![Complex64::ZERO; self.len()];
        for (k, c) in entries {
            debug_assert!(k.iter().all(|&c| c.unsigned_abs() as usize <= (self.g - 1) / 2));
            data[self.index_of(k)] += c;
        }
        self.to_physical(&mut data);
        data
    }

    /// Read the coefficients of `mode_set` out of frequency-domain data.
    pub fn extract_state(&self, freq: &[Complex64], mode_set: Arc<ModeSet>) -> FourierState {
        let coeffs = mode_set
            .modes()
            .iter()
            .map(|&k| freq[self.index_of(k)])
            .collect();
        FourierState::from_coeffs(mode_set, coeffs).expect("length matches by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::ModeSet;
    use approx::assert_relative_eq;

    #[test]
    fn single_mode_round_trip() {
        let ms = ModeSet::new(2).unwrap();
        let grid = SpectralGrid::for_scale(2);
        let u = FourierState::single_mode(ms.clone(), [1, 0, -1], Complex64::new(0.3, -0.7))
            .unwrap();
        let mut phys = grid.synthesize(&u);
        // sample check at j = (1, 2, 3): u(x) = c * exp(i k.x)
        let g = grid.size() as f64;
        let x = [1.0, 2.0, 3.0].map(|j: f64| 2.0 * std::f64::consts::PI * j / g);
        let expect = Complex64::new(0.3, -0.7) * Complex64::new(0.0, x[0] - x[2]).exp();
        let idx = (1 * grid.size() + 2) * grid.size() + 3;
        assert_relative_eq!(phys[idx].re, expect.re, epsilon = 1e-12);
        assert_relative_eq!(phys[idx].im, expect.im, epsilon = 1e-12);

        grid.to_frequency(&mut phys);
        let back = grid.extract_state(&phys, ms);
        assert!(back.max_abs_diff(&u) < 1e-13);
    }

    #[test]
    fn product_of_modes_is_mode_sum() {
        // e^{i a.x} * e^{i b.x} = e^{i (a+b).x}, captured exactly by padding
        let ms = ModeSet::new(4).unwrap();
        let grid = SpectralGrid::for_scale(4);
        let a = [2, 0, 0];
        let b = [1, 1, -2];
        let u = FourierState::single_mode(ms.clone(), a, Complex64::new(1.0, 0.0)).unwrap();
        let v = FourierState::single_mode(ms.clone(), b, Complex64::new(0.0, 1.0)).unwrap();
        let pu = grid.synthesize(&u);
        let pv = grid.synthesize(&v);
        let mut prod: Vec<Complex64> = pu.iter().zip(&pv).map(|(x, y)| x * y).collect();
        grid.to_frequency(&mut prod);
        let c = prod[grid.index_of([3, 1, -2])];
        assert_relative_eq!(c.re, 0.0, epsilon = 1e-12);
        assert_relative_eq!(c.im, 1.0, epsilon = 1e-12);
        // everything else in the box is zero
        let mut total = 0.0;
        for idx in 0..grid.len() {
            total += prod[idx].norm();
        }
        assert_relative_eq!(total, 1.0, epsilon = 1e-10);
    }
}
