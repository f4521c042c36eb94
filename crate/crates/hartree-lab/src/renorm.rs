//! Wick renormalization: the counterterms `sigma_N`, `C_N`, `gamma_N`, the
//! gauge constant `B_N`, the truncated Hamiltonian and its potential part,
//! the Wick-ordered nonlinearity, and an exact Gaussian-expectation oracle.
//!
//! Fourier convention: the exponentials `e^{i k.x}` are orthonormal, so
//! `int |u|^2 = sum_k |u_k|^2` and `sigma_N = sum_{<k> <= N} <k>^{-2}`
//! without volume factors.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::SpectralGrid;
use crate::lattice::{bracket_sq, norm_sq, FourierState, Mode, ModeSet};
use crate::potential::Potential;
use crate::sampling::GaussianDraw;

/// The three lattice counterterm constants at a fixed scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenormConstants {
    n: u32,
    sigma: f64,
    gamma: f64,
    /// `(C_N)_k` aligned with the lexicographic mode order of `ModeSet(N)`.
    c_multiplier: Vec<f64>,
}

impl RenormConstants {
    pub fn scale(&self) -> u32 {
        self.n
    }

    /// `sigma_N = sum_{<k> <= N} <k>^{-2}`.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `gamma_N = sum_{<k>, <l> <= N} vhat(k - l) <k>^{-2} <l>^{-2}`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `(C_N)_k = sum_{<l> <= N} vhat(k - l) <l>^{-2}` per mode.
    pub fn c_multiplier(&self) -> &[f64] {
        &self.c_multiplier
    }

    /// JSON export `{N, sigma, gamma, c_multiplier: [[k, value], ...]}`.
    pub fn export_json(&self, mode_set: &ModeSet) -> serde_json::Value {
        let table: Vec<serde_json::Value> = mode_set
            .modes()
            .iter()
            .zip(&self.c_multiplier)
            .map(|(k, v)| serde_json::json!([k, v]))
            .collect();
        serde_json::json!({
            "N": self.n,
            "sigma": self.sigma,
            "gamma": self.gamma,
            "c_multiplier": table,
        })
    }
}

impl RenormConstants {
    /// All counterterms forced to zero. Test scaffolding for linear-flow
    /// stubs; not a renormalization of anything.
    pub fn zeroed(n: u32) -> Result<Self> {
        let ms = ModeSet::new(n)?;
        Ok(RenormConstants {
            n,
            sigma: 0.0,
            gamma: 0.0,
            c_multiplier: vec![0.0; ms.len()],
        })
    }
}

/// Exact lattice summation of all three counterterms.
pub fn renorm_constants(n: u32, pot: &Potential) -> Result<RenormConstants> {
    let ms = ModeSet::new(n)?;
    let modes = ms.modes();
    let sigma: f64 = modes.iter().map(|&k| 1.0 / bracket_sq(k) as f64).sum();
    let mut c_multiplier = Vec::with_capacity(modes.len());
    let mut gamma = 0.0;
    for &k in modes {
        let mut ck = 0.0;
        for &l in modes {
            ck += pot.vhat([k[0] - l[0], k[1] - l[1], k[2] - l[2]]) / bracket_sq(l) as f64;
        }
        gamma += ck / bracket_sq(k) as f64;
        c_multiplier.push(ck);
    }
    Ok(RenormConstants { n, sigma, gamma, c_multiplier })
}

fn check_support(u: &FourierState, consts: &RenormConstants) -> Result<()> {
    if u.scale() != consts.scale() {
        return Err(Error::ModeSetMismatch(u.scale(), consts.scale()));
    }
    Ok(())
}

/// `int |u|^2 (V * |u|^2)` via the padded grid (exact spectral arithmetic).
pub fn quartic_integral(u: &FourierState, pot: &Potential) -> f64 {
    let grid = SpectralGrid::for_scale(u.scale());
    quartic_integral_with_grid(u, pot, &grid)
}

pub fn quartic_integral_with_grid(u: &FourierState, pot: &Potential, grid: &SpectralGrid) -> f64 {
    let phys = grid.synthesize(u);
    let mut w: Vec<Complex64> = phys.iter().map(|c| Complex64::new(c.norm_sqr(), 0.0)).collect();
    grid.to_frequency(&mut w);
    (0..grid.len())
        .map(|idx| pot.vhat(grid.freq_of(idx)) * w[idx].norm_sqr())
        .sum()
}

/// The potential energy `H_N^pot[u]`:
/// `int (1/2 |u|^2 (V * |u|^2) - sigma_N |u|^2 - C_N u . conj u
///  + 1/2 sigma_N^2 - 1/2 gamma_N)`.
///
/// The coefficient on the `C_N` quadratic form is the one that makes the
/// full Hamiltonian the conserved generator of the truncated flow: the
/// asymmetric quartic has two c-type Wick contractions, so the ordering
/// subtracts the `C_N` tadpole once per contraction.
pub fn potential_energy(
    u: &FourierState,
    consts: &RenormConstants,
    pot: &Potential,
) -> Result<f64> {
    check_support(u, consts)?;
    let quartic = quartic_integral(u, pot);
    let mass = u.mass();
    let c_quad: f64 = u
        .coeffs()
        .iter()
        .zip(consts.c_multiplier())
        .map(|(c, m)| m * c.norm_sqr())
        .sum();
    Ok(0.5 * quartic - consts.sigma() * mass - c_quad + 0.5 * consts.sigma().powi(2)
        - 0.5 * consts.gamma())
}

/// The full Hamiltonian `H_N[u]`: kinetic term `sum |k|^2 |u_k|^2` plus the
/// potential energy.
pub fn hamiltonian(u: &FourierState, consts: &RenormConstants, pot: &Potential) -> Result<f64> {
    let kinetic: f64 = u
        .mode_set()
        .modes()
        .iter()
        .zip(u.coeffs())
        .map(|(&k, c)| norm_sq(k) as f64 * c.norm_sqr())
        .sum();
    Ok(kinetic + potential_energy(u, consts, pot)?)
}

/// The Wick-ordered quartic integrand
/// `:|u|^2 (V*|u|^2): = |u|^2(V*|u|^2) - sigma_N (V*|u|^2) - sigma_N |u|^2
///  - 2 C_N u . conj u + sigma_N^2 - gamma_N`,
/// so that the potential energy is half its integral plus the kinetic-free
/// constants (the c-type tadpole appears once per Wick contraction),
/// held as Fourier data on the padded grid together with the integrals of
/// the individual pieces.
pub struct WickIntegrand {
    /// grid frequencies and coefficients of the integrand
    pub freq_data: Vec<(Mode, Complex64)>,
    pub integral: f64,
    pub quartic: f64,
    /// `int sigma_N (V * |u|^2)`
    pub sigma_conv_term: f64,
    /// `int sigma_N |u|^2`
    pub sigma_mass_term: f64,
    /// `int C_N u . conj u`
    pub c_term: f64,
}

pub fn wick_nonlinearity(
    u: &FourierState,
    consts: &RenormConstants,
    pot: &Potential,
) -> Result<WickIntegrand> {
    check_support(u, consts)?;
    let grid = SpectralGrid::for_scale(u.scale());
    let sigma = consts.sigma();

    let phys = grid.synthesize(u);
    // |u|^2 and V * |u|^2 on the grid
    let w_phys: Vec<Complex64> = phys.iter().map(|c| Complex64::new(c.norm_sqr(), 0.0)).collect();
    let mut w_hat = w_phys.clone();
    grid.to_frequency(&mut w_hat);
    let mut conv_hat = w_hat.clone();
    for idx in 0..grid.len() {
        conv_hat[idx] *= pot.vhat(grid.freq_of(idx));
    }
    let mut conv_phys = conv_hat.clone();
    grid.to_physical(&mut conv_phys);

    // (C_N u)(x) conj(u(x))
    let cu = FourierState::from_coeffs(
        u.mode_set().clone(),
        u.coeffs()
            .iter()
            .zip(consts.c_multiplier())
            .map(|(c, m)| m * c)
            .collect(),
    )?;
    let cu_phys = grid.synthesize(&cu);

    let mut integrand: Vec<Complex64> = (0..grid.len())
        .map(|i| {
            w_phys[i] * conv_phys[i] - sigma * conv_phys[i] - sigma * w_phys[i]
                - 2.0 * cu_phys[i] * phys[i].conj()
                + Complex64::new(sigma * sigma - consts.gamma(), 0.0)
        })
        .collect();
    grid.to_frequency(&mut integrand);

    let integral = integrand[grid.index_of([0, 0, 0])].re;
    let freq_data = (0..grid.len())
        .filter(|&i| integrand[i].norm() > 0.0)
        .map(|i| (grid.freq_of(i), integrand[i]))
        .collect();

    let mass = u.mass();
    let c_term: f64 = u
        .coeffs()
        .iter()
        .zip(consts.c_multiplier())
        .map(|(c, m)| m * c.norm_sqr())
        .sum();
    // int sigma (V*|u|^2) = sigma * vhat(0) * what(0) = sigma * vhat(0) * mass
    let sigma_conv_term = sigma * conv_hat[grid.index_of([0, 0, 0])].re;
    Ok(WickIntegrand {
        freq_data,
        integral,
        quartic: quartic_integral_with_grid(u, pot, &grid),
        sigma_conv_term,
        sigma_mass_term: sigma * mass,
        c_term,
    })
}

/// The gauge constant `B_N = sum_{<l> <= N} (|g_l|^2 - 1) / <l>^2`.
pub fn gauge_constant(draw: &GaussianDraw, n: u32) -> Result<f64> {
    if draw.scale() < n {
        return Err(Error::SupportViolation(n));
    }
    let ms = ModeSet::new(n)?;
    let mut b = 0.0;
    for &k in ms.modes() {
        let g = draw.g(k).expect("draw covers <k> <= N");
        b += (g.norm_sqr() - 1.0) / bracket_sq(k) as f64;
    }
    Ok(b)
}

/// Exact expectations under the Gaussian reference law `rho_N`, computed by
/// explicit Wick pairing over lattice sums (complex Gaussian:
/// `E u_k conj(u_l) = delta_{kl} <k>^{-2}`, `E u u = 0`).
///
/// All sums below are independent double loops over the mode set; they do
/// not reuse the counterterm code.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianExpectations {
    pub n: u32,
    /// `E int |u|^2`
    pub mass: f64,
    /// `E int |u|^2 (V * |u|^2)`
    pub quartic: f64,
    /// `E int C_N u . conj u`
    pub c_quad: f64,
    /// `E H_N^pot`
    pub potential_energy: f64,
}

pub fn gaussian_expectation_oracle(n: u32, pot: &Potential) -> Result<GaussianExpectations> {
    let ms = ModeSet::new(n)?;
    let modes = ms.modes();
    let mass: f64 = modes.iter().map(|&k| 1.0 / bracket_sq(k) as f64).sum();
    // two pairings of E[u_{k1} conj(u_{k2}) u_{k3} conj(u_{k4})] on the
    // momentum shell k1 - k2 + k3 - k4 = 0:
    //   k1 = k2, k3 = k4  ->  vhat(0) <k1>^{-2} <k3>^{-2}
    //   k1 = k4, k2 = k3  ->  vhat(k1 - k2) <k1>^{-2} <k2>^{-2}
    let mut quartic = 0.0;
    let mut c_quad = 0.0;
    for &a in modes {
        for &b in modes {
            let wa = 1.0 / bracket_sq(a) as f64;
            let wb = 1.0 / bracket_sq(b) as f64;
            quartic += pot.vhat([0, 0, 0]) * wa * wb;
            quartic += pot.vhat([a[0] - b[0], a[1] - b[1], a[2] - b[2]]) * wa * wb;
            c_quad += pot.vhat([a[0] - b[0], a[1] - b[1], a[2] - b[2]]) * wa * wb;
        }
    }
    // assemble E H_pot per the definition of the potential energy
    let sigma_n: f64 = mass;
    let gamma_n = c_quad;
    let potential_energy =
        0.5 * quartic - sigma_n * mass - c_quad + 0.5 * sigma_n * sigma_n - 0.5 * gamma_n;
    Ok(GaussianExpectations { n, mass, quartic, c_quad, potential_energy })
}
