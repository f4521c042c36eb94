//! Gaussian free field draws (the laws `rho_N`) and a preconditioned
//! Crank-Nicolson chain for the truncated Gibbs measure.
//!
//! The reference measure `rho_N` is the exact Gaussian law of
//! `f_N = sum_{<k> <= N} (g_k / <k>) e^{i k.x}`, so the pCN proposal
//! `u' = sqrt(1 - s^2) u + s xi` leaves `rho_N` invariant and the acceptance
//! ratio only sees the potential energy. The paper never specifies a sampler;
//! pCN is the artifact's choice precisely because the Gaussian reference is
//! exact here.

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fft::SpectralGrid;
use crate::lattice::{bracket, FourierState, Mode, ModeSet, Projection};
use crate::potential::Potential;
use crate::renorm::{self, RenormConstants};
use crate::seeds;

/// One realization of the i.i.d. complex standard normals `{g_k}`.
///
/// Each `g_k` comes from its own counter-based stream keyed by `(seed, k)`,
/// so the same seed yields the same `g_k` at every truncation scale and the
/// modes can be generated in any order.
#[derive(Debug, Clone)]
pub struct GaussianDraw {
    seed: u64,
    mode_set: Arc<ModeSet>,
    gk: Vec<Complex64>,
}

/// A single complex standard normal from the `(seed, k)` stream:
/// two real normals scaled by `1/sqrt(2)`, so `E g = 0`, `E |g|^2 = 1`,
/// `E g^2 = 0`.
pub fn complex_normal(seed: u64, k: Mode) -> Complex64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(seeds::mode_stream(k));
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) / 2f64.sqrt()
}

impl GaussianDraw {
    pub fn new(n: u32, seed: u64) -> Result<Self> {
        let mode_set = ModeSet::new(n)?;
        let gk = mode_set
            .modes()
            .iter()
            .map(|&k| complex_normal(seed, k))
            .collect();
        Ok(GaussianDraw { seed, mode_set, gk })
    }

    pub fn scale(&self) -> u32 {
        self.mode_set.scale()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn g(&self, k: Mode) -> Option<Complex64> {
        self.mode_set.index_of(k).map(|i| self.gk[i])
    }

    /// `f_N`: coefficients `g_k / <k>`; the law is `rho_N`.
    pub fn state(&self) -> FourierState {
        let coeffs = self
            .mode_set
            .modes()
            .iter()
            .zip(&self.gk)
            .map(|(&k, g)| g / bracket(k))
            .collect();
        FourierState::from_coeffs(self.mode_set.clone(), coeffs).expect("aligned")
    }

    /// `F_N = Delta_N f`: the annulus restriction of `f_N`.
    pub fn annulus_state(&self) -> FourierState {
        crate::lattice::project(&self.state(), self.scale(), Projection::Delta)
            .expect("scale is dyadic")
    }
}

/// Draw `f_N` directly.
pub fn draw_gff(n: u32, seed: u64) -> Result<FourierState> {
    Ok(GaussianDraw::new(n, seed)?.state())
}

/// Which density reweights the Gaussian reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GibbsWeight {
    /// `e^{-H_N^pot}`: the truncated Gibbs measure.
    Full,
    /// Weight forced to 1; the chain reduces to `rho_N`. Test scaffolding.
    Unit,
}

/// A pCN chain targeting `d eta_N = e^{-H_N^pot} d rho_N` (unnormalized).
#[derive(Debug, Clone)]
pub struct GibbsChain {
    current: FourierState,
    step_s: f64,
    energy: f64,
    pub accept_count: u64,
    pub total_count: u64,
    chain_seed: u64,
    weight: GibbsWeight,
    grid: Arc<SpectralGrid>,
}

impl GibbsChain {
    pub fn new(
        n: u32,
        chain_seed: u64,
        step_s: f64,
        weight: GibbsWeight,
        consts: &RenormConstants,
        pot: &Potential,
    ) -> Result<Self> {
        if !(step_s > 0.0 && step_s <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "pCN step {step_s} not in (0, 1]"
            )));
        }
        let current = draw_gff(n, seeds::derive_labeled(chain_seed, "init", 0))?;
        let grid = Arc::new(SpectralGrid::for_scale(n));
        let energy = Self::weighted_energy(&current, weight, consts, pot, &grid)?;
        Ok(GibbsChain {
            current,
            step_s,
            energy,
            accept_count: 0,
            total_count: 0,
            chain_seed,
            weight,
            grid,
        })
    }

    fn weighted_energy(
        u: &FourierState,
        weight: GibbsWeight,
        consts: &RenormConstants,
        pot: &Potential,
        grid: &SpectralGrid,
    ) -> Result<f64> {
        match weight {
            GibbsWeight::Full => {
                let quartic = renorm::quartic_integral_with_grid(u, pot, grid);
                let mass = u.mass();
                let c_quad: f64 = u
                    .coeffs()
                    .iter()
                    .zip(consts.c_multiplier())
                    .map(|(c, m)| m * c.norm_sqr())
                    .sum();
                Ok(0.5 * quartic - consts.sigma() * mass - c_quad
                    + 0.5 * consts.sigma().powi(2)
                    - 0.5 * consts.gamma())
            }
            GibbsWeight::Unit => Ok(0.0),
        }
    }

    pub fn state(&self) -> &FourierState {
        &self.current
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn step_s(&self) -> f64 {
        self.step_s
    }

    pub fn set_step_s(&mut self, s: f64) {
        self.step_s = s.clamp(1e-6, 1.0);
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.total_count == 0 {
            0.0
        } else {
            self.accept_count as f64 / self.total_count as f64
        }
    }

    /// One pCN proposal/accept step. The proposal noise and the acceptance
    /// uniform come from streams derived from `(chain_seed, step index)`.
    pub fn pcn_step(&mut self, consts: &RenormConstants, pot: &Potential) -> Result<bool> {
        let step_idx = self.total_count;
        let xi = draw_gff(
            self.current.scale(),
            seeds::derive_labeled(self.chain_seed, "proposal", step_idx),
        )?;
        let s = self.step_s;
        let r = (1.0 - s * s).sqrt();
        let proposal = FourierState::from_coeffs(
            self.current.mode_set().clone(),
            self.current
                .coeffs()
                .iter()
                .zip(xi.coeffs())
                .map(|(u, x)| r * u + s * x)
                .collect(),
        )?;
        let new_energy =
            Self::weighted_energy(&proposal, self.weight, consts, pot, &self.grid)?;
        if !new_energy.is_finite() {
            return Err(Error::InvalidParameter(
                "non-finite potential energy in pCN step".into(),
            ));
        }
        let log_accept = self.energy - new_energy;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_labeled(
            self.chain_seed,
            "accept",
            step_idx,
        ));
        let accept = log_accept >= 0.0 || rng.random::<f64>() < log_accept.exp();
        self.total_count += 1;
        if accept {
            self.current = proposal;
            self.energy = new_energy;
            self.accept_count += 1;
        }
        Ok(accept)
    }
}

/// Ensemble of post-burn-in, thinned chain states.
#[derive(Debug, Clone)]
pub struct GibbsEnsemble {
    pub states: Vec<FourierState>,
    pub acceptance_rate: f64,
    pub energy_trace: Vec<f64>,
    pub final_step_s: f64,
}

/// Run a pCN chain and return `n_samples` thinned states.
///
/// When `tune` is set, the step size is adjusted multiplicatively during
/// burn-in (only) toward an acceptance rate in `[0.2, 0.5]`.
#[allow(clippy::too_many_arguments)]
pub fn sample_gibbs(
    n: u32,
    n_samples: usize,
    burn_in: usize,
    thinning: usize,
    step_s: f64,
    seed: u64,
    weight: GibbsWeight,
    tune: bool,
    consts: &RenormConstants,
    pot: &Potential,
) -> Result<GibbsEnsemble> {
    if n_samples < 1 {
        return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
    }
    let thinning = thinning.max(1);
    let mut chain = GibbsChain::new(n, seed, step_s, weight, consts, pot)?;
    let mut window_accepts = 0u64;
    let mut window_total = 0u64;
    for i in 0..burn_in {
        let accepted = chain.pcn_step(consts, pot)?;
        if tune {
            window_accepts += accepted as u64;
            window_total += 1;
            if window_total == 100 {
                let rate = window_accepts as f64 / window_total as f64;
                if rate < 0.2 {
                    chain.set_step_s(chain.step_s() * 0.8);
                } else if rate > 0.5 {
                    chain.set_step_s((chain.step_s() * 1.25).min(1.0));
                }
                window_accepts = 0;
                window_total = 0;
            }
        }
        let _ = i;
    }
    // freeze the step after burn-in so the kernel is fixed and stationarity holds
    let mut states = Vec::with_capacity(n_samples);
    let mut energy_trace = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        for _ in 0..thinning {
            chain.pcn_step(consts, pot)?;
        }
        states.push(chain.state().clone());
        energy_trace.push(chain.energy());
    }
    Ok(GibbsEnsemble {
        states,
        acceptance_rate: chain.acceptance_rate(),
        energy_trace,
        final_step_s: chain.step_s(),
    })
}

/// Batch-means standard error of the mean of a correlated sequence.
///
/// Splits the sequence into `n_batches` contiguous batches; the variance of
/// the batch means absorbs the autocorrelation that a naive SE misses.
pub fn batch_means_se(xs: &[f64], n_batches: usize) -> f64 {
    let b = n_batches.clamp(2, xs.len().max(2) / 2);
    let m = xs.len() / b;
    if m == 0 {
        return f64::INFINITY;
    }
    let means: Vec<f64> = (0..b)
        .map(|i| xs[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (b as f64 - 1.0);
    (var / b as f64).sqrt()
}

/// Write an ensemble as JSON lines:
/// `{"N":..,"seed":..,"coeffs":[[kx,ky,kz,re,im],...]}`.
pub fn write_jsonl<W: Write>(
    out: &mut W,
    states: &[FourierState],
    seed: u64,
) -> std::io::Result<()> {
    for s in states {
        let coeffs: Vec<serde_json::Value> = s
            .mode_set()
            .modes()
            .iter()
            .zip(s.coeffs())
            .map(|(k, c)| serde_json::json!([k[0], k[1], k[2], c.re, c.im]))
            .collect();
        let line = serde_json::json!({"N": s.scale(), "seed": seed, "coeffs": coeffs});
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parse one JSON line back into a state.
pub fn read_jsonl_state(line: &str) -> Result<FourierState> {
    let v: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::Config(e.to_string()))?;
    let n = v["N"]
        .as_u64()
        .ok_or_else(|| Error::Config("missing N".into()))? as u32;
    let ms = ModeSet::new(n)?;
    let mut state = FourierState::zeros(ms.clone());
    for entry in v["coeffs"]
        .as_array()
        .ok_or_else(|| Error::Config("missing coeffs".into()))?
    {
        let a = entry
            .as_array()
            .ok_or_else(|| Error::Config("bad coeff row".into()))?;
        let k = [
            a[0].as_i64().unwrap_or(0),
            a[1].as_i64().unwrap_or(0),
            a[2].as_i64().unwrap_or(0),
        ];
        let idx = ms
            .index_of(k)
            .ok_or_else(|| Error::Config(format!("mode {k:?} outside scale {n}")))?;
        state.coeffs_mut()[idx] =
            Complex64::new(a[3].as_f64().unwrap_or(0.0), a[4].as_f64().unwrap_or(0.0));
    }
    Ok(state)
}
