//! Frequency lattice Z^3: Japanese brackets, dyadic mode sets, the sharp
//! projections Pi_N and Delta_N, and the resonance factor Omega.
//!
//! All dyadic comparisons `<k> <= N` are done in exact integer arithmetic as
//! `1 + |k|^2 <= N^2`, so shell membership never depends on floating point.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// A frequency vector in Z^3.
pub type Mode = [i64; 3];

/// `|k|^2` as an exact integer.
#[inline]
pub fn norm_sq(k: Mode) -> i64 {
    k[0] * k[0] + k[1] * k[1] + k[2] * k[2]
}

/// `<k>^2 = 1 + |k|^2` as an exact integer.
#[inline]
pub fn bracket_sq(k: Mode) -> i64 {
    1 + norm_sq(k)
}

/// Japanese bracket `<k> = (1 + |k|^2)^{1/2}`.
#[inline]
pub fn bracket(k: Mode) -> f64 {
    (bracket_sq(k) as f64).sqrt()
}

/// Resonance factor `Omega = |k1|^2 - |k2|^2 + |k3|^2 - |k|^2`.
///
/// Callers typically enforce `k = k1 - k2 + k3`; the value is computed
/// regardless. Swapping `(k1, k3)` leaves the value unchanged.
#[inline]
pub fn resonance(k: Mode, k1: Mode, k2: Mode, k3: Mode) -> i64 {
    norm_sq(k1) - norm_sq(k2) + norm_sq(k3) - norm_sq(k)
}

/// True for 0 and every power of two.
#[inline]
pub fn is_dyadic(n: u32) -> bool {
    n == 0 || n.is_power_of_two()
}

/// `N/2` on the dyadic scale, with `1/2 := 0`.
#[inline]
pub fn half(n: u32) -> u32 {
    n / 2
}

/// Dyadic scales `1, 2, 4, ..., n` (empty for `n = 0`).
pub fn dyadic_scales_up_to(n: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut l = 1;
    while l <= n {
        out.push(l);
        l *= 2;
    }
    out
}

/// The ordered set of modes `k` with `<k> <= N`, for a dyadic scale `N`.
///
/// Modes are stored in lexicographic order of `(k_x, k_y, k_z)`; this fixes
/// every matrix index convention in the crate. `index_of` is the inverse of
/// the ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeSet {
    n: u32,
    modes: Vec<Mode>,
}

impl ModeSet {
    /// All `k` with `1 + |k|^2 <= N^2`, lexicographically ordered.
    pub fn new(n: u32) -> Result<Arc<Self>> {
        if !is_dyadic(n) {
            return Err(Error::NotDyadic(n));
        }
        let mut modes = Vec::new();
        if n > 0 {
            let n_sq = (n as i64) * (n as i64);
            // <k> <= N implies |k_i| <= sqrt(N^2 - 1) < N.
            let r = n as i64 - 1;
            for kx in -r..=r {
                for ky in -r..=r {
                    for kz in -r..=r {
                        if 1 + kx * kx + ky * ky + kz * kz <= n_sq {
                            modes.push([kx, ky, kz]);
                        }
                    }
                }
            }
        }
        // The nested loop emits lexicographic order already.
        debug_assert!(modes.windows(2).all(|w| w[0] < w[1]));
        Ok(Arc::new(ModeSet { n, modes }))
    }

    pub fn scale(&self) -> u32 {
        self.n
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn mode(&self, i: usize) -> Mode {
        self.modes[i]
    }

    /// Position of `k` in the lexicographic ordering, if `<k> <= N`.
    pub fn index_of(&self, k: Mode) -> Option<usize> {
        self.modes.binary_search(&k).ok()
    }

    pub fn contains(&self, k: Mode) -> bool {
        self.index_of(k).is_some()
    }

    /// Indices of the annulus `N/2 < <k> <= N`.
    pub fn annulus_indices(&self) -> Vec<usize> {
        let h = half(self.n) as i64;
        let h_sq = h * h;
        (0..self.len())
            .filter(|&i| bracket_sq(self.modes[i]) > h_sq)
            .collect()
    }
}

/// Complex Fourier coefficients over a [`ModeSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct FourierState {
    mode_set: Arc<ModeSet>,
    coeffs: Vec<Complex64>,
}

impl FourierState {
    pub fn zeros(mode_set: Arc<ModeSet>) -> Self {
        let coeffs = vec![Complex64::ZERO; mode_set.len()];
        FourierState { mode_set, coeffs }
    }

    pub fn from_coeffs(mode_set: Arc<ModeSet>, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != mode_set.len() {
            return Err(Error::InvalidParameter(format!(
                "coefficient count {} does not match mode count {}",
                coeffs.len(),
                mode_set.len()
            )));
        }
        Ok(FourierState { mode_set, coeffs })
    }

    /// State with a single nonzero coefficient `c` at mode `k`.
    pub fn single_mode(mode_set: Arc<ModeSet>, k: Mode, c: Complex64) -> Result<Self> {
        let idx = mode_set
            .index_of(k)
            .ok_or(Error::SupportViolation(mode_set.scale()))?;
        let mut s = Self::zeros(mode_set);
        s.coeffs[idx] = c;
        Ok(s)
    }

    pub fn mode_set(&self) -> &Arc<ModeSet> {
        &self.mode_set
    }

    pub fn scale(&self) -> u32 {
        self.mode_set.scale()
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn coeff(&self, k: Mode) -> Complex64 {
        self.mode_set
            .index_of(k)
            .map(|i| self.coeffs[i])
            .unwrap_or(Complex64::ZERO)
    }

    /// `sum_k |u_k|^2`, i.e. the mass integral under the orthonormal convention.
    pub fn mass(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.mass().sqrt()
    }

    /// True when every coefficient with `<k> <= N/2` vanishes.
    pub fn supported_in_annulus(&self) -> bool {
        let h = half(self.scale()) as i64;
        let h_sq = h * h;
        self.mode_set
            .modes()
            .iter()
            .zip(&self.coeffs)
            .all(|(&k, c)| bracket_sq(k) > h_sq || *c == Complex64::ZERO)
    }

    /// Re-host the state on a smaller mode set, keeping only the modes the
    /// target carries. This is the only sanctioned way to build data "from
    /// the draws below scale L": the result cannot see any coefficient
    /// above the target scale.
    pub fn restrict(&self, target: Arc<ModeSet>) -> Result<Self> {
        if target.scale() > self.scale() {
            return Err(Error::ModeSetMismatch(target.scale(), self.scale()));
        }
        let coeffs = target.modes().iter().map(|&k| self.coeff(k)).collect();
        FourierState::from_coeffs(target, coeffs)
    }

    /// Re-host the state on the mode set of scale `n >= self.scale()`,
    /// zero-filling the new modes.
    pub fn embed(&self, target: Arc<ModeSet>) -> Result<Self> {
        if target.scale() < self.scale() {
            return Err(Error::SupportViolation(target.scale()));
        }
        let mut out = Self::zeros(target);
        for (i, &k) in self.mode_set.modes().iter().enumerate() {
            let j = out.mode_set.index_of(k).expect("nested mode sets");
            out.coeffs[j] = self.coeffs[i];
        }
        Ok(out)
    }

    pub fn scaled(&self, a: Complex64) -> Self {
        let coeffs = self.coeffs.iter().map(|c| a * c).collect();
        FourierState { mode_set: self.mode_set.clone(), coeffs }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_set(other)?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a + b)
            .collect();
        Ok(FourierState { mode_set: self.mode_set.clone(), coeffs })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_set(other)?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a - b)
            .collect();
        Ok(FourierState { mode_set: self.mode_set.clone(), coeffs })
    }

    pub fn check_same_set(&self, other: &Self) -> Result<()> {
        if self.mode_set.scale() != other.mode_set.scale() {
            return Err(Error::ModeSetMismatch(
                self.mode_set.scale(),
                other.mode_set.scale(),
            ));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Which sharp frequency projection to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    /// `Pi_N`: keep `<k> <= N`.
    Pi,
    /// `Delta_N = Pi_N - Pi_{N/2}`: keep `N/2 < <k> <= N`.
    Delta,
}

/// Apply `Pi_N` or `Delta_N` to a state, keeping its mode set.
pub fn project(u: &FourierState, n: u32, kind: Projection) -> Result<FourierState> {
    if !is_dyadic(n) {
        return Err(Error::NotDyadic(n));
    }
    let n_sq = (n as i64) * (n as i64);
    let h = half(n) as i64;
    let h_sq = h * h;
    let mut out = u.clone();
    for (i, &k) in u.mode_set().modes().iter().enumerate() {
        let b = bracket_sq(k);
        let keep = match kind {
            Projection::Pi => b <= n_sq,
            Projection::Delta => b > h_sq && b <= n_sq,
        };
        if !keep {
            out.coeffs[i] = Complex64::ZERO;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn bracket_values() {
        assert_eq!(bracket([0, 0, 0]), 1.0);
        assert_eq!(bracket([1, 1, 1]), 2.0);
        assert_relative_eq!(bracket([1, 0, 0]), std::f64::consts::SQRT_2, epsilon = 1e-14);
    }

    #[test]
    fn mode_set_small_scales() {
        assert!(ModeSet::new(0).unwrap().is_empty());
        let m1 = ModeSet::new(1).unwrap();
        assert_eq!(m1.modes(), &[[0, 0, 0]]);
        // <k> <= 2 is |k|^2 <= 3, i.e. the cube {-1,0,1}^3.
        let m2 = ModeSet::new(2).unwrap();
        assert_eq!(m2.len(), 27);
        assert!(ModeSet::new(3).is_err());
    }

    #[test]
    fn mode_set_count_matches_brute_force() {
        for n in [1u32, 2, 4, 8, 16, 32] {
            let ms = ModeSet::new(n).unwrap();
            let n_sq = (n as i64) * (n as i64);
            let r = n as i64;
            let mut count = 0usize;
            for kx in -r..=r {
                for ky in -r..=r {
                    for kz in -r..=r {
                        if 1 + kx * kx + ky * ky + kz * kz <= n_sq {
                            count += 1;
                        }
                    }
                }
            }
            assert_eq!(ms.len(), count, "N={n}");
        }
        // monotone in N
        let sizes: Vec<usize> = [0u32, 1, 2, 4, 8, 16, 32]
            .iter()
            .map(|&n| ModeSet::new(n).unwrap().len())
            .collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn index_is_bijective() {
        let ms = ModeSet::new(8).unwrap();
        for (i, &k) in ms.modes().iter().enumerate() {
            assert_eq!(ms.index_of(k), Some(i));
        }
        assert_eq!(ms.index_of([8, 0, 0]), None);
    }

    #[test]
    fn resonance_examples() {
        let k = [1, 1, 1];
        assert_eq!(resonance(k, k, k, k), 0);
        assert_eq!(resonance([1, -1, 1], [1, 0, 0], [0, 1, 0], [0, 0, 1]), -2);
        // symmetric under swapping k1 and k3
        let (k, k1, k2, k3) = ([2, 0, 1], [1, 2, 0], [0, 1, 1], [1, -1, 2]);
        assert_eq!(resonance(k, k1, k2, k3), resonance(k, k3, k2, k1));
    }

    fn all_ones(n: u32) -> FourierState {
        let ms = ModeSet::new(n).unwrap();
        let coeffs = vec![Complex64::new(1.0, 0.0); ms.len()];
        FourierState::from_coeffs(ms, coeffs).unwrap()
    }

    #[test]
    fn delta_of_all_ones_counts_annulus() {
        let u = all_ones(2);
        let d = project(&u, 2, Projection::Delta).unwrap();
        let nonzero = d.coeffs().iter().filter(|c| c.norm() > 0.0).count();
        assert_eq!(nonzero, 26);
        assert!(d.supported_in_annulus());
    }

    #[test]
    fn pi_is_idempotent_on_supported_state() {
        let u = all_ones(2);
        let big = u.embed(ModeSet::new(4).unwrap()).unwrap();
        let p = project(&big, 2, Projection::Pi).unwrap();
        let pp = project(&p, 2, Projection::Pi).unwrap();
        assert_eq!(p, pp);
        assert_eq!(project(&p, 4, Projection::Pi).unwrap(), p);
    }

    #[test]
    fn pi_half_plus_delta_is_pi() {
        let u = all_ones(8);
        for n in [2u32, 4, 8] {
            let lhs = project(&u, half(n), Projection::Pi)
                .unwrap()
                .add(&project(&u, n, Projection::Delta).unwrap())
                .unwrap();
            let rhs = project(&u, n, Projection::Pi).unwrap();
            assert_eq!(lhs, rhs, "N={n}");
        }
    }

    #[test]
    fn telescoping_deltas_sum_to_pi() {
        let u = all_ones(8);
        let mut acc = FourierState::zeros(u.mode_set().clone());
        for l in dyadic_scales_up_to(8) {
            acc = acc.add(&project(&u, l, Projection::Delta).unwrap()).unwrap();
        }
        assert_eq!(acc, project(&u, 8, Projection::Pi).unwrap());
    }

    proptest! {
        // Pi_N Pi_M = Pi_min(N,M), exactly.
        #[test]
        fn pi_composition(n_exp in 0u32..4, m_exp in 0u32..4, seed in any::<u64>()) {
            let n = 1u32 << n_exp;
            let m = 1u32 << m_exp;
            let ms = ModeSet::new(8).unwrap();
            let mut rng_state = seed;
            let coeffs: Vec<Complex64> = (0..ms.len()).map(|_| {
                // splitmix64, good enough to fill test coefficients
                rng_state = rng_state.wrapping_add(0x9e3779b97f4a7c15);
                let mut z = rng_state;
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
                z ^= z >> 31;
                Complex64::new((z as f64 / u64::MAX as f64) - 0.5, ((z >> 32) as f64 / u32::MAX as f64) - 0.5)
            }).collect();
            let u = FourierState::from_coeffs(ms, coeffs).unwrap();
            let lhs = project(&project(&u, m, Projection::Pi).unwrap(), n, Projection::Pi).unwrap();
            let rhs = project(&u, n.min(m), Projection::Pi).unwrap();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
