//! The convolution potential `V`, the smooth frequency cutoff `eta`, and the
//! multilinear forms built from them: the full nonresonant form, its low- and
//! high-frequency windows, the tiny window, and the physical-space
//! renormalized Hartree vector field.
//!
//! # Phase conventions
//!
//! The flow `i d/dt u + Lap u = N(u)` gives every mode the free phase
//! `e^{-i t |k|^2}`. The interaction picture (profile) therefore multiplies
//! `u_k` by `e^{+i t |k|^2}`, and in profile variables the nonresonant form
//! carries the factor `e^{-i s Omega}` with
//! `Omega = |k1|^2 - |k2|^2 + |k3|^2 - |k|^2`. Phased evaluation below is
//! implemented as conjugation by the free flow: twist all inputs by
//! `e^{-i s |k|^2}`, run the unphased bilinear-multiplier pipeline, untwist
//! the output by `e^{+i s |k|^2}`. This is exactly the `e^{-i s Omega}`
//! summand and keeps the evaluation a pure Fourier multiplier.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::SpectralGrid;
use crate::lattice::{bracket_sq, norm_sq, FourierState, Mode, Projection};
use crate::params::ParamSet;
use crate::{lattice, renorm::RenormConstants};

/// The convolution potential via its Fourier multiplier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Potential {
    /// `vhat(k) = <k>^{-beta}`; even, real, `vhat(0) = 1`, defocusing.
    Bessel { beta: f64, max_scale: u32 },
    /// Identically zero multiplier. Test scaffolding: turns the cubic term
    /// off so the flow degenerates to decoupled linear phases.
    Zero,
}

impl Potential {
    /// Bessel-type potential `vhat(k) = <k>^{-beta}`, tabulated on demand;
    /// `max_scale` records the largest dyadic scale the table export covers.
    pub fn bessel(beta: f64, max_scale: u32) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "beta = {beta} not in (0, 1]"
            )));
        }
        Ok(Potential::Bessel { beta, max_scale })
    }

    pub fn zero() -> Self {
        Potential::Zero
    }

    /// The Fourier multiplier `vhat(k)`.
    #[inline]
    pub fn vhat(&self, k: Mode) -> f64 {
        self.vhat_radial(norm_sq(k))
    }

    /// `vhat` as a function of `|k|^2`; both built-in potentials are radial.
    #[inline]
    pub fn vhat_radial(&self, norm_sq: i64) -> f64 {
        match self {
            Potential::Bessel { beta, .. } => ((1 + norm_sq) as f64).powf(-beta / 2.0),
            Potential::Zero => 0.0,
        }
    }

    /// Rows `(kx, ky, kz, vhat)` for every `<k> <= 2 * max_scale`.
    pub fn table_rows(&self) -> Vec<(Mode, f64)> {
        let n = match self {
            Potential::Bessel { max_scale, .. } => 2 * max_scale,
            Potential::Zero => 0,
        };
        match lattice::ModeSet::new(n) {
            Ok(ms) => ms.modes().iter().map(|&k| (k, self.vhat(k))).collect(),
            Err(_) => Vec::new(),
        }
    }

    /// Minimum physical-space sample of the heat-mollified kernel
    /// `sum_k vhat(k) e^{-t |k|^2} e^{i k.x}`.
    ///
    /// The mollification makes the lattice sum absolutely convergent; the
    /// sharp spherical partial sums of the `beta < 1` kernel do not converge
    /// pointwise, so the defocusing check samples the mollified kernel
    /// (positive kernel convolved with the positive heat kernel).
    pub fn min_mollified_sample(&self, t: f64) -> f64 {
        assert!(t > 0.0);
        // e^{-t K^2} below 1e-16 relative: truncation is far under the 1e-9 gate.
        let k_max = (37.0 / t).sqrt().ceil() as i64;
        let g = (2 * k_max + 1).max(33) as usize;
        let grid = SpectralGrid::with_size(g);
        let mut data = vec![Complex64::ZERO; grid.len()];
        for kx in -k_max..=k_max {
            for ky in -k_max..=k_max {
                for kz in -k_max..=k_max {
                    let k = [kx, ky, kz];
                    let w = self.vhat(k) * (-t * norm_sq(k) as f64).exp();
                    data[grid.index_of(k)] += Complex64::new(w, 0.0);
                }
            }
        }
        grid.to_physical(&mut data);
        data.iter().map(|c| c.re).fold(f64::INFINITY, f64::min)
    }
}

/// The fixed smooth cutoff profile: 1 on `[0, 1]`, 0 on `[2, oo)`, quintic
/// smoothstep in between (monotone, C^2 at the joins).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CutoffProfile;

impl CutoffProfile {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        if x <= 1.0 {
            1.0
        } else if x >= 2.0 {
            0.0
        } else {
            let t = x - 1.0;
            1.0 - t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
        }
    }
}

/// Frequency window applied to the difference `k1 - k2` inside the
/// multilinear forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// No window: the full nonresonant form.
    Full,
    /// `eta(|k1 - k2| / N^{1 - delta})`.
    Low,
    /// `1 - eta(|k1 - k2| / N^{1 - delta})`.
    High,
    /// `eta(|k1 - k2| / N^epsilon)`.
    Tiny,
}

impl Window {
    /// The full multiplier `m(j) = window(j) * vhat(j)` at difference `j`.
    #[inline]
    pub fn multiplier(self, j: Mode, pot: &Potential, n: u32, params: &ParamSet) -> f64 {
        let eta = CutoffProfile;
        let w = match self {
            Window::Full => 1.0,
            Window::Low => eta.eval((norm_sq(j) as f64).sqrt() / params.low_window_scale(n)),
            Window::High => {
                1.0 - eta.eval((norm_sq(j) as f64).sqrt() / params.low_window_scale(n))
            }
            Window::Tiny => eta.eval((norm_sq(j) as f64).sqrt() / params.tiny_window_scale(n)),
        };
        w * pot.vhat(j)
    }
}

/// Multiply every coefficient by the free-flow phase `e^{-i s |k|^2}`.
pub fn free_flow(u: &FourierState, s: f64) -> FourierState {
    let mut out = u.clone();
    for (i, &k) in u.mode_set().modes().iter().enumerate() {
        let phase = Complex64::from_polar(1.0, -s * norm_sq(k) as f64);
        out.coeffs_mut()[i] = u.coeffs()[i] * phase;
    }
    out
}

/// The windowed nonresonant trilinear form
/// `sum_{k1 - k2 + k3 = k, k2 not in {k1, k3}} [phase] m(k1 - k2) u_{k1} conj(v_{k2}) w_{k3}`
/// projected by `Pi_n`, where `m = window * vhat` and `[phase] = e^{-i s Omega}`
/// iff `phased` is set.
///
/// Evaluated as a bilinear Fourier multiplier on a `4N + 1` grid, with the
/// diagonal triples `k2 = k1` and `k2 = k3` removed (and the doubly counted
/// `k1 = k2 = k3` restored) in closed form.
#[allow(clippy::too_many_arguments)]
pub fn multilinear_apply(
    u: &FourierState,
    v: &FourierState,
    w: &FourierState,
    window: Window,
    pot: &Potential,
    n: u32,
    s: f64,
    phased: bool,
    params: &ParamSet,
) -> Result<FourierState> {
    let grid = SpectralGrid::for_scale(u.scale());
    multilinear_apply_with_grid(u, v, w, window, pot, n, s, phased, params, &grid)
}

#[allow(clippy::too_many_arguments)]
pub fn multilinear_apply_with_grid(
    u: &FourierState,
    v: &FourierState,
    w: &FourierState,
    window: Window,
    pot: &Potential,
    n: u32,
    s: f64,
    phased: bool,
    params: &ParamSet,
    grid: &SpectralGrid,
) -> Result<FourierState> {
    u.check_same_set(v)?;
    u.check_same_set(w)?;
    if !lattice::is_dyadic(n) {
        return Err(Error::NotDyadic(n));
    }

    let (ut, vt, wt);
    let (u, v, w) = if phased {
        ut = free_flow(u, s);
        vt = free_flow(v, s);
        wt = free_flow(w, s);
        (&ut, &vt, &wt)
    } else {
        (u, v, w)
    };

    let m0 = window.multiplier([0, 0, 0], pot, n, params);
    let modes = u.mode_set().modes();

    // main term: q = multiplier applied to (u . conj v), then q * w
    let pu = grid.synthesize(u);
    let pv = grid.synthesize(v);
    let mut p: Vec<Complex64> = pu.iter().zip(&pv).map(|(a, b)| a * b.conj()).collect();
    grid.to_frequency(&mut p);
    for idx in 0..grid.len() {
        let j = grid.freq_of(idx);
        p[idx] *= window.multiplier(j, pot, n, params);
    }
    grid.to_physical(&mut p);
    let pw = grid.synthesize(w);
    for (q, c) in p.iter_mut().zip(&pw) {
        *q *= c;
    }
    grid.to_frequency(&mut p);
    let mut out = grid.extract_state(&p, u.mode_set().clone());

    // diagonal corrections, in coefficient space
    // k2 = k1:    m(0) * <u, v> * w_k
    let inner_uv: Complex64 = u
        .coeffs()
        .iter()
        .zip(v.coeffs())
        .map(|(a, b)| a * b.conj())
        .sum();
    // k2 = k3:    u_k * sum_l m(k - l) conj(v_l) w_l
    let d: Vec<Complex64> = v
        .coeffs()
        .iter()
        .zip(w.coeffs())
        .map(|(a, b)| a.conj() * b)
        .collect();
    let conv = lattice_convolve(grid, modes, &d, |j| window.multiplier(j, pot, n, params));
    for i in 0..modes.len() {
        let uc = u.coeffs()[i];
        let vc = v.coeffs()[i];
        let wc = w.coeffs()[i];
        out.coeffs_mut()[i] += -m0 * inner_uv * wc - uc * conv[i] + m0 * uc * vc.conj() * wc;
    }

    if phased {
        out = free_flow(&out, -s);
    }
    lattice::project(&out, n, Projection::Pi)
}

/// Lattice convolution `(m * d)(k) = sum_l m(k - l) d_l` over a shared mode
/// set, exact on the padded grid.
fn lattice_convolve(
    grid: &SpectralGrid,
    modes: &[Mode],
    d: &[Complex64],
    m: impl Fn(Mode) -> f64,
) -> Vec<Complex64> {
    // kernel synthesis: M(x) = sum_j m(j) e^{i j.x} over the representable box
    let mf = grid.max_freq();
    let mut kernel = vec![Complex64::ZERO; grid.len()];
    for idx in 0..grid.len() {
        kernel[idx] = Complex64::new(m(grid.freq_of(idx)), 0.0);
    }
    debug_assert!(modes.iter().all(|k| k.iter().all(|&c| 2 * c.abs() <= mf)));
    grid.to_physical(&mut kernel);
    let mut table = grid.synthesize_table(modes.iter().copied().zip(d.iter().copied()));
    for (t, k) in table.iter_mut().zip(&kernel) {
        *t *= k;
    }
    grid.to_frequency(&mut table);
    modes.iter().map(|&k| table[grid.index_of(k)]).collect()
}

/// Direct triple-sum evaluation of the same form. Exact reference for small
/// mode sets; cost is cubic in the mode count.
#[allow(clippy::too_many_arguments)]
pub fn multilinear_direct(
    u: &FourierState,
    v: &FourierState,
    w: &FourierState,
    window: Window,
    pot: &Potential,
    n: u32,
    s: f64,
    phased: bool,
    params: &ParamSet,
) -> Result<FourierState> {
    u.check_same_set(v)?;
    u.check_same_set(w)?;
    let modes = u.mode_set().modes();
    let m = modes.len();
    if m * m * m > 30_000_000 {
        return Err(Error::BudgetExceeded(format!(
            "direct triple sum over {m} modes"
        )));
    }
    let n_sq = (n as i64) * (n as i64);
    let mut out = FourierState::zeros(u.mode_set().clone());
    for (i1, &k1) in modes.iter().enumerate() {
        for (i2, &k2) in modes.iter().enumerate() {
            if k2 == k1 {
                continue;
            }
            let j = [k1[0] - k2[0], k1[1] - k2[1], k1[2] - k2[2]];
            let mj = window.multiplier(j, pot, n, params);
            for (i3, &k3) in modes.iter().enumerate() {
                if k2 == k3 {
                    continue;
                }
                let k = [k1[0] - k2[0] + k3[0], k1[1] - k2[1] + k3[1], k1[2] - k2[2] + k3[2]];
                if bracket_sq(k) > n_sq {
                    continue;
                }
                if let Some(ik) = u.mode_set().index_of(k) {
                    let mut term = mj * u.coeffs()[i1] * v.coeffs()[i2].conj() * w.coeffs()[i3];
                    if phased {
                        let omega = lattice::resonance(k, k1, k2, k3);
                        term *= Complex64::from_polar(1.0, -s * omega as f64);
                    }
                    out.coeffs_mut()[ik] += term;
                }
            }
        }
    }
    Ok(out)
}

/// Right side of the truncated renormalized flow before the `-i`:
/// `Pi_N[(|u|^2 * V) u] - sigma_N u - C_N u`.
pub fn hartree_vector_field(
    u: &FourierState,
    pot: &Potential,
    consts: &RenormConstants,
) -> Result<FourierState> {
    let grid = SpectralGrid::for_scale(u.scale());
    hartree_vector_field_with_grid(u, pot, consts, &grid)
}

pub fn hartree_vector_field_with_grid(
    u: &FourierState,
    pot: &Potential,
    consts: &RenormConstants,
    grid: &SpectralGrid,
) -> Result<FourierState> {
    if u.scale() != consts.scale() {
        return Err(Error::ModeSetMismatch(u.scale(), consts.scale()));
    }
    let phys = grid.synthesize(u);
    let mut w: Vec<Complex64> = phys.iter().map(|c| Complex64::new(c.norm_sqr(), 0.0)).collect();
    grid.to_frequency(&mut w);
    for idx in 0..grid.len() {
        w[idx] *= pot.vhat(grid.freq_of(idx));
    }
    grid.to_physical(&mut w);
    for (m, c) in w.iter_mut().zip(&phys) {
        *m *= c;
    }
    grid.to_frequency(&mut w);
    let mut out = grid.extract_state(&w, u.mode_set().clone());
    let sigma = consts.sigma();
    for (i, c) in out.coeffs_mut().iter_mut().enumerate() {
        *c -= (sigma + consts.c_multiplier()[i]) * u.coeffs()[i];
    }
    Ok(out)
}

/// The diagonal-corrected potential sum of the gauged flow:
/// `D(v)_k = v_k * sum_{l != k, <l> <= n} vhat(k - l) (|v_l|^2 - <l>^{-2})`.
pub fn hartree_diag_term(v: &FourierState, n: u32, pot: &Potential) -> Result<FourierState> {
    if v.scale() != n {
        return Err(Error::ModeSetMismatch(v.scale(), n));
    }
    let modes = v.mode_set().modes();
    let tbl: Vec<f64> = modes
        .iter()
        .zip(v.coeffs())
        .map(|(&l, c)| c.norm_sqr() - 1.0 / bracket_sq(l) as f64)
        .collect();
    let mut out = FourierState::zeros(v.mode_set().clone());
    for (ik, &k) in modes.iter().enumerate() {
        let mut sum = 0.0;
        for (il, &l) in modes.iter().enumerate() {
            if il == ik {
                continue;
            }
            sum += pot.vhat([k[0] - l[0], k[1] - l[1], k[2] - l[2]]) * tbl[il];
        }
        out.coeffs_mut()[ik] = v.coeffs()[ik] * sum;
    }
    Ok(out)
}
