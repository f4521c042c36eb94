//! Sobolev norms, the space-time `X^c` / `Y^c` / `Z^c` norms as grid
//! diagnostics, exact Gaussian-expectation references, and scaling-exponent
//! fits.
//!
//! The localized norms are computed on the constant extension of the stored
//! trajectory (the same extension the short-time theory uses), multiplied by
//! the smooth window `chi(|t|/tau)` and transformed with a zero-padded
//! discrete time-Fourier transform. The result is a documented upper-bound
//! surrogate for the infimum over extensions, which is not computable.

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::lattice::{bracket_sq, FourierState, ModeSet};
use crate::linalg;
use crate::potential::CutoffProfile;
use crate::rao::RaoMatrices;

/// One measured norm value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormReport {
    pub label: String,
    pub n: u32,
    pub l: Option<u32>,
    pub kind: String,
    pub s_or_c: f64,
    pub value: f64,
    pub seed: u64,
}

impl NormReport {
    pub fn csv_header() -> &'static str {
        "label,N,L,kind,s_or_c,value,seed"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.label,
            self.n,
            self.l.map(|l| l.to_string()).unwrap_or_default(),
            self.kind,
            self.s_or_c,
            self.value,
            self.seed
        )
    }
}

/// `(sum_k <k>^{2s} |u_k|^2)^{1/2}`.
pub fn sobolev_norm(u: &FourierState, s: f64) -> f64 {
    u.mode_set()
        .modes()
        .iter()
        .zip(u.coeffs())
        .map(|(&k, c)| (bracket_sq(k) as f64).powf(s) * c.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Max over frames of the `H^s` norm.
pub fn sup_sobolev_norm(traj: &Trajectory, s: f64) -> f64 {
    traj.frames().iter().map(|f| sobolev_norm(f, s)).fold(0.0, f64::max)
}

/// Exact `E ||Delta_N f||_{H^s}^2 = sum_{N/2 < <k> <= N} <k>^{2s - 2}`.
pub fn expected_annulus_hs_sq(n: u32, s: f64) -> Result<f64> {
    let ms = ModeSet::new(n)?;
    let half = (n / 2) as i64;
    let h_sq = half * half;
    Ok(ms
        .modes()
        .iter()
        .filter(|&&k| bracket_sq(k) > h_sq)
        .map(|&k| (bracket_sq(k) as f64).powf(s - 1.0))
        .sum())
}

/// Windowed, constantly extended, zero-padded samples of a scalar time
/// series, together with the transform normalization.
struct TimeSeriesPlan {
    /// index of the first stored frame inside the padded series
    offset: usize,
    /// padded transform length
    g: usize,
    /// frame spacing
    dt: f64,
    /// window value per padded slot (0 outside the window support)
    window: Vec<f64>,
}

impl TimeSeriesPlan {
    fn new(len: usize, frame_dt: f64, tau: f64, oversample: usize) -> Result<Self> {
        if len < 4 {
            return Err(Error::InvalidParameter(
                "time transform needs at least 4 frames".into(),
            ));
        }
        let span = frame_dt * (len - 1) as f64;
        let mid = span / 2.0;
        // window support is |t'| <= 2 tau around the midpoint; extend the
        // grid (constant extension) to cover it
        let need = (2.0 * tau - mid).max(0.0);
        let ext = (need / frame_dt).ceil() as usize + 1;
        let total = len + 2 * ext;
        let g = (oversample * total).next_power_of_two();
        let profile = CutoffProfile;
        let window = (0..g)
            .map(|j| {
                if j >= total {
                    return 0.0;
                }
                let t = (j as f64 - ext as f64) * frame_dt - mid;
                profile.eval(t.abs() / tau)
            })
            .collect();
        Ok(TimeSeriesPlan { offset: ext, g, dt: frame_dt, window })
    }

    fn total(&self) -> usize {
        self.window.len()
    }

    fn lambda(&self, m: usize) -> f64 {
        let signed = if m <= self.g / 2 { m as f64 } else { m as f64 - self.g as f64 };
        2.0 * std::f64::consts::PI * signed / (self.g as f64 * self.dt)
    }

    fn d_lambda(&self) -> f64 {
        2.0 * std::f64::consts::PI / (self.g as f64 * self.dt)
    }

    /// Fill the padded, windowed series for one scalar signal; `sample(j)`
    /// returns the stored value at frame j (clamped constant extension is
    /// applied here).
    fn fill(&self, len: usize, sample: impl Fn(usize) -> Complex64) -> Vec<Complex64> {
        let mut out = vec![Complex64::ZERO; self.g];
        for (j, w) in self.window.iter().enumerate().take(self.total()) {
            if *w == 0.0 {
                continue;
            }
            let idx = (j as i64 - self.offset as i64).clamp(0, len as i64 - 1) as usize;
            out[j] = sample(idx) * *w;
        }
        out
    }
}

/// The `X^c` norm surrogate of a trajectory:
/// `(int <lambda>^{2c} || u_hat_k(lambda) ||_{l^2_k}^2 d lambda)^{1/2}`.
pub fn xc_norm(traj: &Trajectory, c: f64, _window: CutoffProfile, tau: f64) -> Result<f64> {
    xc_norm_oversampled(traj, c, tau, 8)
}

pub fn xc_norm_oversampled(
    traj: &Trajectory,
    c: f64,
    tau: f64,
    oversample: usize,
) -> Result<f64> {
    let plan = TimeSeriesPlan::new(traj.len(), traj.frame_dt(), tau, oversample)?;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(plan.g);
    let n_modes = traj.frame(0).coeffs().len();
    // accumulate sum_k |u_hat_k(lambda)|^2 per lambda, in deterministic order
    let spectra: Vec<Vec<f64>> = (0..n_modes)
        .into_par_iter()
        .map(|i| {
            let mut series = plan.fill(traj.len(), |j| traj.frame(j).coeffs()[i]);
            fft.process(&mut series);
            series.iter().map(|v| v.norm_sqr()).collect()
        })
        .collect();
    let mut power = vec![0f64; plan.g];
    for s in &spectra {
        for (p, v) in power.iter_mut().zip(s) {
            *p += v;
        }
    }
    let dt = plan.dt;
    let mut total = 0f64;
    for (m, p) in power.iter().enumerate() {
        let lam = plan.lambda(m);
        total += (1.0 + lam * lam).powf(c) * p * dt * dt * plan.d_lambda();
    }
    Ok(total.sqrt())
}

/// Matrix norm kind for [`matrix_norms`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixNormKind {
    /// per-lambda operator norm (`k -> k'`)
    Y,
    /// per-lambda Frobenius norm (`l^2_{kk'}`)
    Z,
}

/// The `Y^c` / `Z^c` norm surrogate of a time-indexed matrix family.
pub fn matrix_norms(
    mats: &RaoMatrices,
    c: f64,
    kind: MatrixNormKind,
    tau: f64,
) -> Result<f64> {
    matrix_norms_oversampled(mats, c, kind, tau, 8)
}

pub fn matrix_norms_oversampled(
    mats: &RaoMatrices,
    c: f64,
    kind: MatrixNormKind,
    tau: f64,
    oversample: usize,
) -> Result<f64> {
    let times = mats.times();
    if times.len() < 4 {
        return Err(Error::InvalidParameter("matrix transform needs >= 4 frames".into()));
    }
    let frame_dt = times[1] - times[0];
    let plan = TimeSeriesPlan::new(times.len(), frame_dt, tau, oversample)?;
    let a = mats.dim();
    let dt = plan.dt;
    match kind {
        MatrixNormKind::Z => {
            // stream over entries: only the per-lambda power is needed
            let mut planner = FftPlanner::new();
            let fft = planner.plan_fft_forward(plan.g);
            let powers: Vec<Vec<f64>> = (0..a * a)
                .into_par_iter()
                .map(|e| {
                    let mut series =
                        plan.fill(times.len(), |j| mats.mats()[j].data()[e]);
                    fft.process(&mut series);
                    series.iter().map(|v| v.norm_sqr()).collect()
                })
                .collect();
            let mut power = vec![0f64; plan.g];
            for s in &powers {
                for (p, v) in power.iter_mut().zip(s) {
                    *p += v;
                }
            }
            let mut total = 0f64;
            for (m, p) in power.iter().enumerate() {
                let lam = plan.lambda(m);
                total += (1.0 + lam * lam).powf(c) * p * dt * dt * plan.d_lambda();
            }
            Ok(total.sqrt())
        }
        MatrixNormKind::Y => {
            // assemble the matrix per lambda by direct transform and take
            // the operator norm
            let contributions: Vec<f64> = (0..plan.g)
                .into_par_iter()
                .map(|m| {
                    let lam = plan.lambda(m);
                    let mut mat = vec![Complex64::ZERO; a * a];
                    for (j, w) in plan.window.iter().enumerate().take(plan.total()) {
                        if *w == 0.0 {
                            continue;
                        }
                        let idx = (j as i64 - plan.offset as i64)
                            .clamp(0, times.len() as i64 - 1)
                            as usize;
                        let phase = Complex64::from_polar(
                            1.0,
                            -2.0 * std::f64::consts::PI * (m as f64) * (j as f64)
                                / plan.g as f64,
                        );
                        let wphase = phase * *w;
                        for (acc, v) in mat.iter_mut().zip(mats.mats()[idx].data()) {
                            *acc += v * wphase;
                        }
                    }
                    let op = linalg::spectral_norm(a, a, &mat);
                    (1.0 + lam * lam).powf(c) * (op * dt).powi(2) * plan.d_lambda()
                })
                .collect();
            Ok(contributions.iter().sum::<f64>().sqrt())
        }
    }
}

/// Least-squares slope of `log(value)` against `log(scale)` with a 95%
/// confidence band on the slope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub band_95: (f64, f64),
}

pub fn exponent_fit(points: &[(f64, f64)]) -> Result<ExponentFit> {
    let data: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let mut xs: Vec<f64> = data.iter().map(|d| d.0).collect();
    xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if xs.len() < 3 {
        return Err(Error::InvalidParameter(
            "exponent fit needs >= 3 distinct positive scales".into(),
        ));
    }
    let n = data.len() as f64;
    let mx = data.iter().map(|d| d.0).sum::<f64>() / n;
    let my = data.iter().map(|d| d.1).sum::<f64>() / n;
    let sxx: f64 = data.iter().map(|d| (d.0 - mx).powi(2)).sum();
    let sxy: f64 = data.iter().map(|d| (d.0 - mx) * (d.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = data
        .iter()
        .map(|d| (d.1 - intercept - slope * d.0).powi(2))
        .sum();
    let dof = (n - 2.0).max(1.0);
    let slope_stderr = (ss_res / dof / sxx).sqrt();
    let half = 1.96 * slope_stderr;
    Ok(ExponentFit {
        slope,
        intercept,
        slope_stderr,
        band_95: (slope - half, slope + half),
    })
}
