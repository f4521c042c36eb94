//! Random averaging operators: the matrices `H^{N,L}` and `M^N` as
//! column-wise propagators of the windowed linear equations on the dyadic
//! annulus, the derived objects `h`, `psi`, `zeta`, `xi`, `rho`, `z`, the
//! paraproduct operator, and unitarity diagnostics.
//!
//! Both equations have the shape `d/dt Y = -i Delta_N M_w(a, b, Y)` with
//! `a, b` frozen low-frequency profiles and `M_w` a windowed nonresonant
//! form. As an operator on annulus data this is the convolution matrix of
//! `m(j) p_t(j)` (with `p_t` the twisted cross-correlation of `a` and `b`)
//! conjugated by the free-flow phases, minus closed-form diagonal
//! corrections. Matrices are integrated as one matrix-valued ODE so each
//! rk4 stage costs one operator build plus one gemm; vector solves apply
//! the same operator by FFT convolution.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, Trajectory, TrajectoryKind};
use crate::error::{Error, Result};
use crate::fft::SpectralGrid;
use crate::lattice::{self, bracket_sq, norm_sq, FourierState, Mode, ModeSet};
use crate::linalg::CMat;
use crate::params::ParamSet;
use crate::potential::{Potential, Window};
use crate::renorm;
use crate::sampling::GaussianDraw;

/// Largest scale at which dense annulus matrices are considered desk-scale.
pub const MAX_RAO_SCALE: u32 = 8;

/// The annulus `N/2 < <k> <= N` inside `ModeSet(N)`, in lexicographic order.
#[derive(Debug, Clone)]
pub struct AnnulusBlock {
    n: u32,
    mode_set: Arc<ModeSet>,
    set_indices: Vec<usize>,
    modes: Vec<Mode>,
}

impl AnnulusBlock {
    pub fn new(n: u32) -> Result<Self> {
        let mode_set = ModeSet::new(n)?;
        let set_indices = mode_set.annulus_indices();
        let modes = set_indices.iter().map(|&i| mode_set.mode(i)).collect();
        Ok(AnnulusBlock { n, mode_set, set_indices, modes })
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

    pub fn mode_set(&self) -> &Arc<ModeSet> {
        &self.mode_set
    }

    /// Annulus coefficients of a state on `ModeSet(N)`.
    pub fn extract(&self, u: &FourierState) -> Result<Vec<Complex64>> {
        if u.scale() != self.n {
            return Err(Error::ModeSetMismatch(u.scale(), self.n));
        }
        Ok(self.set_indices.iter().map(|&i| u.coeffs()[i]).collect())
    }

    /// Build a state on `ModeSet(N)` supported on the annulus.
    pub fn inject(&self, values: &[Complex64]) -> Result<FourierState> {
        if values.len() != self.len() {
            return Err(Error::InvalidParameter("annulus length mismatch".into()));
        }
        let mut s = FourierState::zeros(self.mode_set.clone());
        for (&i, &v) in self.set_indices.iter().zip(values) {
            s.coeffs_mut()[i] = v;
        }
        Ok(s)
    }
}

/// One frozen-argument term `sign * Delta_N M_window(u, v, .)` of a linear
/// annulus equation.
#[derive(Clone, Copy)]
pub struct CouplingTerm<'a> {
    pub u: &'a FourierState,
    pub v: &'a FourierState,
    pub window: Window,
    pub sign: f64,
}

/// Radial multiplier cache: `m(j) = window(|j|) * vhat(j)` depends on `|j|^2`
/// only.
struct MultiplierTable {
    by_norm_sq: Vec<f64>,
}

impl MultiplierTable {
    fn new(window: Window, pot: &Potential, n: u32, params: &ParamSet, max_norm_sq: usize) -> Self {
        let by_norm_sq = (0..=max_norm_sq)
            .map(|q| {
                // representative vector with the right squared norm is not
                // needed: both factors are radial in j
                let r = (q as f64).sqrt();
                let eta = crate::potential::CutoffProfile;
                let w = match window {
                    Window::Full => 1.0,
                    Window::Low => eta.eval(r / params.low_window_scale(n)),
                    Window::High => 1.0 - eta.eval(r / params.low_window_scale(n)),
                    Window::Tiny => eta.eval(r / params.tiny_window_scale(n)),
                };
                w * pot.vhat_radial(q as i64)
            })
            .collect();
        MultiplierTable { by_norm_sq }
    }

    #[inline]
    fn get(&self, j: Mode) -> f64 {
        self.by_norm_sq[norm_sq(j) as usize]
    }

    #[inline]
    fn zero_value(&self) -> f64 {
        self.by_norm_sq[0]
    }
}

/// Twisted cross-correlation table
/// `p_t(j) = sum_{k1 - k2 = j} e^{-i t (|k1|^2 - |k2|^2)} u_{k1} conj(v_{k2})`
/// on the box `|j|_inf <= half`.
struct BoxTable {
    half: i64,
    side: usize,
    data: Vec<Complex64>,
}

impl BoxTable {
    #[inline]
    fn idx(&self, j: Mode) -> usize {
        let h = self.half;
        (((j[0] + h) as usize * self.side) + (j[1] + h) as usize) * self.side
            + (j[2] + h) as usize
    }

    #[inline]
    fn get(&self, j: Mode) -> Complex64 {
        if j.iter().any(|&c| c.abs() > self.half) {
            Complex64::ZERO
        } else {
            self.data[self.idx(j)]
        }
    }
}

fn twisted_coeffs(u: &FourierState, t: f64) -> Vec<Complex64> {
    u.mode_set()
        .modes()
        .iter()
        .zip(u.coeffs())
        .map(|(&k, c)| c * Complex64::from_polar(1.0, -t * norm_sq(k) as f64))
        .collect()
}

fn p_hat_table(u: &FourierState, v: &FourierState, t: f64) -> BoxTable {
    let half = (u.scale() as i64 + v.scale() as i64).max(1);
    let side = (2 * half + 1) as usize;
    let mut table = BoxTable { half, side, data: vec![Complex64::ZERO; side * side * side] };
    let ut = twisted_coeffs(u, t);
    let vt = twisted_coeffs(v, t);
    if u.mode_set().len() * v.mode_set().len() <= 300_000 {
        for (i1, &k1) in u.mode_set().modes().iter().enumerate() {
            if ut[i1] == Complex64::ZERO {
                continue;
            }
            for (i2, &k2) in v.mode_set().modes().iter().enumerate() {
                let j = [k1[0] - k2[0], k1[1] - k2[1], k1[2] - k2[2]];
                let idx = table.idx(j);
                table.data[idx] += ut[i1] * vt[i2].conj();
            }
        }
    } else {
        // grid route for large supports: p = U(x) conj(V(x))
        let g = SpectralGrid::with_size((2 * half + 1) as usize);
        let pu = g.synthesize_table(
            u.mode_set().modes().iter().copied().zip(ut.iter().copied()),
        );
        let pv = g.synthesize_table(
            v.mode_set().modes().iter().copied().zip(vt.iter().copied()),
        );
        let mut p: Vec<Complex64> = pu.iter().zip(&pv).map(|(a, b)| a * b.conj()).collect();
        g.to_frequency(&mut p);
        for jx in -half..=half {
            for jy in -half..=half {
                for jz in -half..=half {
                    let j = [jx, jy, jz];
                    let idx = table.idx(j);
                    table.data[idx] = p[g.index_of(j)];
                }
            }
        }
    }
    table
}

/// Inner product `sum_l u_l conj(v_l)` over the common support.
fn common_inner(u: &FourierState, v: &FourierState) -> Complex64 {
    let (small, big) = if u.mode_set().len() <= v.mode_set().len() { (u, v) } else { (v, u) };
    let mut acc = Complex64::ZERO;
    for (i, &k) in small.mode_set().modes().iter().enumerate() {
        let a = small.coeffs()[i];
        if a == Complex64::ZERO {
            continue;
        }
        let b = big.coeff(k);
        if std::ptr::eq(small, u) {
            acc += a * b.conj();
        } else {
            acc += b * a.conj();
        }
    }
    acc
}

/// Dense annulus-block matrix of `sum_terms sign * Delta_N M_w(u, v, .)` at
/// time `t`.
pub fn coupling_matrix(
    annulus: &AnnulusBlock,
    terms: &[CouplingTerm<'_>],
    t: f64,
    pot: &Potential,
    params: &ParamSet,
) -> CMat {
    let a = annulus.len();
    let mut g = CMat::zeros(a);
    let phases: Vec<Complex64> = annulus
        .modes
        .iter()
        .map(|&k| Complex64::from_polar(1.0, t * norm_sq(k) as f64))
        .collect();
    let max_nsq = annulus
        .modes
        .iter()
        .flat_map(|&ka| annulus.modes.iter().map(move |&kb| norm_sq(sub(ka, kb))))
        .max()
        .unwrap_or(0) as usize;
    for term in terms {
        let mult = MultiplierTable::new(term.window, pot, annulus.n, params, max_nsq);
        let p = p_hat_table(term.u, term.v, t);
        let m0 = mult.zero_value();
        let inner_uv = common_inner(term.u, term.v);
        let ua: Vec<Complex64> = annulus.modes.iter().map(|&k| term.u.coeff(k)).collect();
        let vb: Vec<Complex64> = annulus.modes.iter().map(|&k| term.v.coeff(k)).collect();
        let sign = Complex64::new(term.sign, 0.0);
        for ia in 0..a {
            let ka = annulus.modes[ia];
            let row = &mut g.data_mut()[ia * a..(ia + 1) * a];
            for (ib, r) in row.iter_mut().enumerate() {
                let kb = annulus.modes[ib];
                let j = sub(ka, kb);
                let mj = mult.get(j);
                let mut e = Complex64::ZERO;
                if mj != 0.0 {
                    let pj = p.get(j);
                    if pj != Complex64::ZERO {
                        // exact unit phase on the diagonal
                        let ph = if ia == ib {
                            Complex64::ONE
                        } else {
                            phases[ia] * phases[ib].conj()
                        };
                        e += ph * mj * pj;
                    }
                    // k2 = k3 diagonal correction (phase-free)
                    if ua[ia] != Complex64::ZERO && vb[ib] != Complex64::ZERO {
                        e -= mj * ua[ia] * vb[ib].conj();
                    }
                }
                if ia == ib {
                    e -= m0 * inner_uv;
                    e += m0 * ua[ia] * vb[ib].conj();
                }
                *r += sign * e;
            }
        }
    }
    g
}

#[inline]
fn sub(a: Mode, b: Mode) -> Mode {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Apply `sum_terms sign * Delta_N M_w(u, v, x)` to an annulus-supported
/// state on `ModeSet(N)` by FFT convolution.
pub fn coupling_apply(
    annulus: &AnnulusBlock,
    terms: &[CouplingTerm<'_>],
    t: f64,
    x: &FourierState,
    pot: &Potential,
    params: &ParamSet,
    grid: &SpectralGrid,
) -> Result<FourierState> {
    if x.scale() != annulus.n {
        return Err(Error::ModeSetMismatch(x.scale(), annulus.n));
    }
    let n = annulus.n;
    let xt = twisted_coeffs(x, t);
    let mut out_vals = vec![Complex64::ZERO; annulus.len()];
    // synthesized twisted input, shared across terms
    let x_phys = grid.synthesize_table(
        x.mode_set().modes().iter().copied().zip(xt.iter().copied()),
    );
    for term in terms {
        let max_nsq = 12 * (n as usize + 1) * (n as usize + 1);
        let mult = MultiplierTable::new(term.window, pot, n, params, max_nsq);
        let p = p_hat_table(term.u, term.v, t);
        let m0 = mult.zero_value();
        let inner_uv = common_inner(term.u, term.v);

        // kernel q(j) = m(j) p_t(j) synthesized on the grid
        let mf = grid.max_freq();
        let mut kernel = vec![Complex64::ZERO; grid.len()];
        let h = p.half.min(mf);
        for jx in -h..=h {
            for jy in -h..=h {
                for jz in -h..=h {
                    let j = [jx, jy, jz];
                    let pj = p.get(j);
                    if pj != Complex64::ZERO {
                        kernel[grid.index_of(j)] = mult.get(j) * pj;
                    }
                }
            }
        }
        grid.to_physical(&mut kernel);
        let mut prod: Vec<Complex64> =
            kernel.iter().zip(&x_phys).map(|(a, b)| a * b).collect();
        grid.to_frequency(&mut prod);

        // k2 = k3 correction: u_k * (m conv (conj(v) . x))(k)
        // nonzero only where v overlaps the annulus
        let needs_b = term.v.scale() as i64 > (n / 2) as i64;
        let mut b_conv: Option<Vec<Complex64>> = None;
        if needs_b {
            let d: Vec<(Mode, Complex64)> = x
                .mode_set()
                .modes()
                .iter()
                .enumerate()
                .filter_map(|(i, &k)| {
                    let xv = x.coeffs()[i];
                    if xv == Complex64::ZERO {
                        return None;
                    }
                    let vv = term.v.coeff(k);
                    if vv == Complex64::ZERO {
                        return None;
                    }
                    Some((k, vv.conj() * xv))
                })
                .collect();
            if !d.is_empty() {
                let mut mker = vec![Complex64::ZERO; grid.len()];
                let hh = (2 * n as i64).min(mf);
                for jx in -hh..=hh {
                    for jy in -hh..=hh {
                        for jz in -hh..=hh {
                            let j = [jx, jy, jz];
                            let mj = mult.get(j);
                            if mj != 0.0 {
                                mker[grid.index_of(j)] = Complex64::new(mj, 0.0);
                            }
                        }
                    }
                }
                grid.to_physical(&mut mker);
                let mut dt = grid.synthesize_table(d.into_iter());
                for (a, b) in dt.iter_mut().zip(&mker) {
                    *a *= b;
                }
                grid.to_frequency(&mut dt);
                b_conv = Some(dt);
            }
        }

        let sign = Complex64::new(term.sign, 0.0);
        for (o, &k) in annulus.modes.iter().enumerate() {
            let xi = x.coeff(k);
            let main = prod[grid.index_of(k)];
            let mut e = main;
            // remove diagonals in the twisted frame: A uses untwisted x too
            // since the twist cancels on diagonals
            e -= m0 * inner_uv * xt_at(x, &xt, k);
            if let Some(bc) = &b_conv {
                let uk = term.u.coeff(k);
                if uk != Complex64::ZERO {
                    // phase-free correction, computed on untwisted data
                    e -= uk * bc[grid.index_of(k)] * Complex64::from_polar(1.0, -t * norm_sq(k) as f64);
                }
            }
            let uk = term.u.coeff(k);
            let vk = term.v.coeff(k);
            if uk != Complex64::ZERO && vk != Complex64::ZERO {
                e += m0 * uk * vk.conj() * xt_at(x, &xt, k);
            }
            // untwist the output
            e *= Complex64::from_polar(1.0, t * norm_sq(k) as f64);
            out_vals[o] += sign * e * Complex64::ONE;
            let _ = xi;
        }
    }
    annulus.inject(&out_vals)
}

#[inline]
fn xt_at(x: &FourierState, xt: &[Complex64], k: Mode) -> Complex64 {
    x.mode_set().index_of(k).map(|i| xt[i]).unwrap_or(Complex64::ZERO)
}

/// Which matrix a [`RaoMatrices`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RaoLabel {
    /// `H^{N,L}` at the given `L`.
    Scale(u32),
    /// `M^N`.
    Xi,
}

/// Time-indexed dense propagator matrices on the dyadic annulus.
#[derive(Debug, Clone)]
pub struct RaoMatrices {
    n: u32,
    pub label: RaoLabel,
    times: Vec<f64>,
    mats: Vec<CMat>,
}

impl RaoMatrices {
    pub fn scale(&self) -> u32 {
        self.n
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn mats(&self) -> &[CMat] {
        &self.mats
    }

    pub fn dim(&self) -> usize {
        self.mats.first().map(|m| m.dim()).unwrap_or(0)
    }
}

/// Reading of the xi equation used to define `M^N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum XiForm {
    /// All three windowed terms act on the propagated matrix; `M^N` is a
    /// well-defined linear propagator. Default.
    Linear,
    /// Diagnostic reproduction of the printed mixed form: the first two
    /// terms are frozen vector forcings built from the (linear-reading)
    /// `xi^N` trajectory and broadcast to every column, only the third term
    /// acts on the matrix. Not unitary, comparison object only; midpoint
    /// stage values of the forcing average the neighboring frames.
    LiteralMixed,
}

/// Options shared by the matrix builders.
#[derive(Debug, Clone, Copy)]
pub struct RaoBuildOptions {
    /// store every `store_every`-th macro step (t = 0 is always stored)
    pub store_every: usize,
    pub xi_form: XiForm,
}

impl Default for RaoBuildOptions {
    fn default() -> Self {
        RaoBuildOptions { store_every: 10, xi_form: XiForm::Linear }
    }
}

fn check_rao_scale(n: u32) -> Result<()> {
    if n > MAX_RAO_SCALE {
        return Err(Error::BudgetExceeded(format!(
            "dense annulus matrices at N = {n} exceed desk scale (max {MAX_RAO_SCALE})"
        )));
    }
    Ok(())
}

/// Integrate a matrix-valued linear annulus ODE
/// `dY/dt = -i sum_terms(frame) Y`, `Y(0) = Id`, stepping over the macro
/// grid of the supplied trajectories and consuming their half-step frames at
/// the rk4 stage times exactly.
fn integrate_matrix_ode<'a>(
    annulus: &AnnulusBlock,
    grid_traj: &Trajectory,
    terms_at: impl Fn(usize) -> Vec<(TrajRef<'a>, TrajRef<'a>, Window, f64)>,
    forcing_at: Option<&dyn Fn(usize) -> Result<FourierState>>,
    label: RaoLabel,
    opts: &RaoBuildOptions,
    pot: &Potential,
    params: &ParamSet,
) -> Result<RaoMatrices> {
    check_rao_scale(annulus.n)?;
    let steps = (grid_traj.len() - 1) / 2;
    let h = grid_traj.dt();
    let a = annulus.len();
    let mut y = CMat::identity(a);
    let mut times = vec![grid_traj.t0()];
    let mut mats = vec![y.clone()];
    let mi = Complex64::new(0.0, -1.0);
    let store_every = opts.store_every.max(1);

    let stage = |frame: usize,
                 t: f64,
                 arg: &CMat,
                 terms_spec: &[(TrajRef<'a>, TrajRef<'a>, Window, f64)]|
     -> Result<CMat> {
        let terms: Vec<CouplingTerm> = terms_spec
            .iter()
            .map(|(u, v, w, s)| CouplingTerm {
                u: u.frame(frame),
                v: v.frame(frame),
                window: *w,
                sign: *s,
            })
            .collect();
        let g = coupling_matrix(annulus, &terms, t, pot, params);
        let mut k = g.mul(arg);
        if let Some(forcing) = forcing_at {
            let w = forcing(frame)?;
            let w_ann = annulus.extract(&w)?;
            // broadcast the forcing vector to every column
            for (i, wv) in w_ann.iter().enumerate() {
                for c in 0..a {
                    let cur = k.get(i, c);
                    k.set(i, c, cur + wv);
                }
            }
        }
        k.scale(mi);
        Ok(k)
    };

    for step in 0..steps {
        let f0 = 2 * step;
        let t0 = grid_traj.frame_time(f0);
        let spec0 = terms_at(f0);
        let spec1 = terms_at(f0 + 1);
        let spec2 = terms_at(f0 + 2);
        let k1 = stage(f0, t0, &y, &spec0)?;
        let mut y1 = y.clone();
        y1.axpy(Complex64::new(0.5 * h, 0.0), &k1);
        let k2 = stage(f0 + 1, t0 + 0.5 * h, &y1, &spec1)?;
        let mut y2 = y.clone();
        y2.axpy(Complex64::new(0.5 * h, 0.0), &k2);
        let k3 = stage(f0 + 1, t0 + 0.5 * h, &y2, &spec1)?;
        let mut y3 = y.clone();
        y3.axpy(Complex64::new(h, 0.0), &k3);
        let k4 = stage(f0 + 2, t0 + h, &y3, &spec2)?;
        let w = h / 6.0;
        y.axpy(Complex64::new(w, 0.0), &k1);
        y.axpy(Complex64::new(2.0 * w, 0.0), &k2);
        y.axpy(Complex64::new(2.0 * w, 0.0), &k3);
        y.axpy(Complex64::new(w, 0.0), &k4);
        if (step + 1) % store_every == 0 || step + 1 == steps {
            times.push(t0 + h);
            mats.push(y.clone());
        }
    }
    Ok(RaoMatrices { n: annulus.n, label, times, mats })
}

/// Reference to a trajectory whose frames feed a coupling term.
#[derive(Clone, Copy)]
struct TrajRef<'a>(&'a Trajectory);

impl<'a> TrajRef<'a> {
    fn frame(&self, j: usize) -> &'a FourierState {
        self.0.frame(j)
    }
}

fn check_profile_grid(v: &Trajectory) -> Result<()> {
    if v.kind() != TrajectoryKind::Profile {
        return Err(Error::InvalidParameter("coupling inputs must be profiles".into()));
    }
    if (v.frame_dt() - v.dt() / 2.0).abs() > 1e-15 {
        return Err(Error::GridMismatch("coupling inputs need half-step frames".into()));
    }
    Ok(())
}

/// Build `H^{N,L}`: the propagator of
/// `d/dt Psi = -i Delta_N M^<(v_L, v_L, Psi)` from annulus identity data.
pub fn build_h(
    n: u32,
    l: u32,
    v_l: &Trajectory,
    opts: &RaoBuildOptions,
    pot: &Potential,
    params: &ParamSet,
) -> Result<RaoMatrices> {
    if !lattice::is_dyadic(l) || l > n / 2 {
        return Err(Error::InvalidParameter(format!(
            "H^{{N,L}} needs dyadic L <= N/2, got L = {l}, N = {n}"
        )));
    }
    if v_l.scale() != l {
        return Err(Error::ModeSetMismatch(v_l.scale(), l));
    }
    check_profile_grid(v_l)?;
    let annulus = AnnulusBlock::new(n)?;
    integrate_matrix_ode(
        &annulus,
        v_l,
        |_f| vec![(TrajRef(v_l), TrajRef(v_l), Window::Low, 1.0)],
        None,
        RaoLabel::Scale(l),
        opts,
        pot,
        params,
    )
}

/// Build `M^N`: the propagator of the xi equation
/// `d/dt Xi = -i Delta_N [M^<(v_{N/2}, v_{N/2}, Xi) + M^<<(v_N, v_N, Xi)
///  - M^<<(v_{N/2}, v_{N/2}, Xi)]` under the linear reading (default), or
/// the literal mixed form as a diagnostic.
pub fn build_m(
    n: u32,
    v_half: &Trajectory,
    v_n: &Trajectory,
    opts: &RaoBuildOptions,
    pot: &Potential,
    params: &ParamSet,
) -> Result<RaoMatrices> {
    if v_half.scale() != n / 2 || v_n.scale() != n {
        return Err(Error::ModeSetMismatch(v_half.scale(), n / 2));
    }
    check_profile_grid(v_half)?;
    check_profile_grid(v_n)?;
    v_half.check_same_grid(v_n)?;
    let annulus = AnnulusBlock::new(n)?;
    match opts.xi_form {
        XiForm::Linear => integrate_matrix_ode(
            &annulus,
            v_n,
            |_f| {
                vec![
                    (TrajRef(v_half), TrajRef(v_half), Window::Low, 1.0),
                    (TrajRef(v_n), TrajRef(v_n), Window::Tiny, 1.0),
                    (TrajRef(v_half), TrajRef(v_half), Window::Tiny, -1.0),
                ]
            },
            None,
            RaoLabel::Xi,
            opts,
            pot,
            params,
        ),
        XiForm::LiteralMixed => {
            // xi from the linear reading feeds the frozen forcing
            let draw_state = solve_xi_vector(n, v_half, v_n, pot, params)?;
            let grid = SpectralGrid::for_scale(n);
            let forcing = move |frame: usize| -> Result<FourierState> {
                // frames of the vector solve sit on the macro grid; average
                // neighbors for the midpoint stages
                let xi_at = |f: usize| -> FourierState {
                    if f % 2 == 0 {
                        draw_state.frame(f / 2).clone()
                    } else {
                        let a = draw_state.frame(f / 2);
                        let b = draw_state.frame(f / 2 + 1);
                        a.add(b).expect("same set").scaled(Complex64::new(0.5, 0.0))
                    }
                };
                let xi = xi_at(frame);
                let t = v_n.frame_time(frame);
                let annulus = AnnulusBlock::new(n)?;
                let terms = [
                    CouplingTerm {
                        u: v_half.frame(frame),
                        v: v_half.frame(frame),
                        window: Window::Low,
                        sign: 1.0,
                    },
                    CouplingTerm {
                        u: v_n.frame(frame),
                        v: v_n.frame(frame),
                        window: Window::Tiny,
                        sign: 1.0,
                    },
                ];
                coupling_apply(&annulus, &terms, t, &xi, pot, params, &grid)
            };
            integrate_matrix_ode(
                &annulus,
                v_n,
                |_f| vec![(TrajRef(v_half), TrajRef(v_half), Window::Tiny, -1.0)],
                Some(&forcing),
                RaoLabel::Xi,
                opts,
                pot,
                params,
            )
        }
    }
}

/// Hold the xi trajectory produced by [`solve_xi_vector`]; the psi analogue
/// is [`solve_psi_vector`]. Both step the vector ODE with rk4 on the macro
/// grid, so their frames are spaced `dt`.
fn integrate_vector_ode<'a>(
    n: u32,
    data: &FourierState,
    grid_traj: &Trajectory,
    terms_at: impl Fn(usize) -> Vec<(TrajRef<'a>, TrajRef<'a>, Window, f64)>,
    pot: &Potential,
    params: &ParamSet,
) -> Result<Trajectory> {
    let annulus = AnnulusBlock::new(n)?;
    if data.scale() != n {
        return Err(Error::ModeSetMismatch(data.scale(), n));
    }
    if !data.supported_in_annulus() {
        return Err(Error::SupportViolation(n / 2));
    }
    let grid = SpectralGrid::for_scale(n);
    let steps = (grid_traj.len() - 1) / 2;
    let h = grid_traj.dt();
    let mi = Complex64::new(0.0, -1.0);
    let mut y = data.clone();
    let mut frames = vec![y.clone()];
    let stage = |frame: usize, t: f64, arg: &FourierState| -> Result<FourierState> {
        let spec = terms_at(frame);
        let terms: Vec<CouplingTerm> = spec
            .iter()
            .map(|(u, v, w, s)| CouplingTerm {
                u: u.frame(frame),
                v: v.frame(frame),
                window: *w,
                sign: *s,
            })
            .collect();
        let g = coupling_apply(&annulus, &terms, t, arg, pot, params, &grid)?;
        Ok(g.scaled(mi))
    };
    for step in 0..steps {
        let f0 = 2 * step;
        let t0 = grid_traj.frame_time(f0);
        let k1 = stage(f0, t0, &y)?;
        let k2 = stage(f0 + 1, t0 + 0.5 * h, &add_scaled(&y, 0.5 * h, &k1))?;
        let k3 = stage(f0 + 1, t0 + 0.5 * h, &add_scaled(&y, 0.5 * h, &k2))?;
        let k4 = stage(f0 + 2, t0 + h, &add_scaled(&y, h, &k3))?;
        for i in 0..y.coeffs().len() {
            y.coeffs_mut()[i] += h / 6.0
                * (k1.coeffs()[i]
                    + 2.0 * k2.coeffs()[i]
                    + 2.0 * k3.coeffs()[i]
                    + k4.coeffs()[i]);
        }
        frames.push(y.clone());
    }
    Trajectory::new(n, grid_traj.t0(), h, h, frames, TrajectoryKind::Profile)
}

fn add_scaled(u: &FourierState, a: f64, v: &FourierState) -> FourierState {
    let mut out = u.clone();
    for i in 0..out.coeffs().len() {
        out.coeffs_mut()[i] += a * v.coeffs()[i];
    }
    out
}

/// `psi^{N,L}` as a direct vector solve with data `F_N`.
pub fn solve_psi_vector(
    n: u32,
    v_l: &Trajectory,
    f_n: &FourierState,
    pot: &Potential,
    params: &ParamSet,
) -> Result<Trajectory> {
    check_profile_grid(v_l)?;
    integrate_vector_ode(
        n,
        f_n,
        v_l,
        |_f| vec![(TrajRef(v_l), TrajRef(v_l), Window::Low, 1.0)],
        pot,
        params,
    )
}

/// `xi^N` as a direct vector solve with data `F_N` (linear reading).
pub fn solve_xi_vector(
    n: u32,
    v_half: &Trajectory,
    v_n: &Trajectory,
    pot: &Potential,
    params: &ParamSet,
) -> Result<Trajectory> {
    check_profile_grid(v_half)?;
    check_profile_grid(v_n)?;
    let f_n = lattice::project(v_n.frame(0), n, lattice::Projection::Delta)?;
    integrate_vector_ode(
        n,
        &f_n,
        v_n,
        |_f| {
            vec![
                (TrajRef(v_half), TrajRef(v_half), Window::Low, 1.0),
                (TrajRef(v_n), TrajRef(v_n), Window::Tiny, 1.0),
                (TrajRef(v_half), TrajRef(v_half), Window::Tiny, -1.0),
            ]
        },
        pot,
        params,
    )
}

/// `h^{N,L} = H^{N,L} - H^{N,L/2}` per stored time; with `other = None` the
/// subtrahend is the identity (`H^{N,0} := Id`). The same operation computes
/// `Q^N = M^N - H^N`.
pub fn dyadic_matrix_difference(
    mats: &RaoMatrices,
    other: Option<&RaoMatrices>,
) -> Result<RaoMatrices> {
    let diff_mats: Vec<CMat> = match other {
        Some(o) => {
            if o.n != mats.n
                || o.times.len() != mats.times.len()
                || mats
                    .times
                    .iter()
                    .zip(&o.times)
                    .any(|(a, b)| (a - b).abs() > 1e-12)
            {
                return Err(Error::GridMismatch("matrix time grids differ".into()));
            }
            mats.mats.iter().zip(&o.mats).map(|(a, b)| a.sub(b)).collect()
        }
        None => {
            let id = CMat::identity(mats.dim());
            mats.mats.iter().map(|a| a.sub(&id)).collect()
        }
    };
    Ok(RaoMatrices {
        n: mats.n,
        label: mats.label,
        times: mats.times.clone(),
        mats: diff_mats,
    })
}

/// Per-time matrix-vector products `t -> M(t) data` as a trajectory on the
/// stored grid.
pub fn apply_matrices(mats: &RaoMatrices, data: &FourierState) -> Result<Trajectory> {
    let annulus = AnnulusBlock::new(mats.n)?;
    if !data.supported_in_annulus() || data.scale() != mats.n {
        return Err(Error::SupportViolation(mats.n / 2));
    }
    let x = annulus.extract(data)?;
    let frames: Result<Vec<FourierState>> = mats
        .mats
        .iter()
        .map(|m| annulus.inject(&m.matvec(&x)))
        .collect();
    let frame_dt = if mats.times.len() > 1 { mats.times[1] - mats.times[0] } else { 1.0 };
    for (i, w) in mats.times.windows(2).enumerate() {
        if ((w[1] - w[0]) - frame_dt).abs() > 1e-12 {
            return Err(Error::GridMismatch(format!(
                "stored matrix times are not uniform near index {i}"
            )));
        }
    }
    Trajectory::new(mats.n, mats.times[0], frame_dt, frame_dt, frames?, TrajectoryKind::Profile)
}

/// `z_N = y_N - xi^N` on xi's grid (y is consumed at the matching times).
pub fn remainder(y_n: &Trajectory, xi: &Trajectory) -> Result<Trajectory> {
    let ratio = xi.frame_dt() / y_n.frame_dt();
    let stride = ratio.round() as usize;
    if stride == 0 || (ratio - stride as f64).abs() > 1e-9 {
        return Err(Error::GridMismatch(format!(
            "frame spacings incompatible: {} vs {}",
            y_n.frame_dt(),
            xi.frame_dt()
        )));
    }
    if (y_n.len() - 1) / stride < xi.len() - 1 {
        return Err(Error::GridMismatch("y too short for xi grid".into()));
    }
    let frames: Result<Vec<FourierState>> = (0..xi.len())
        .map(|j| y_n.frame(j * stride).sub(xi.frame(j)))
        .collect();
    Trajectory::new(
        y_n.scale(),
        xi.t0(),
        xi.dt(),
        xi.frame_dt(),
        frames?,
        TrajectoryKind::Profile,
    )
}

/// The paraproduct operator:
/// `(L z)(t) = -i int_0^t Delta_N M^<(y_{L1}, y_{L2}, z)(t') dt'` by
/// trapezoid quadrature on the shared frame grid.
pub fn paraproduct_apply(
    y_l1: &Trajectory,
    y_l2: &Trajectory,
    z: &Trajectory,
    n: u32,
    pot: &Potential,
    params: &ParamSet,
) -> Result<Trajectory> {
    y_l1.check_same_grid(y_l2)?;
    y_l1.check_same_grid(z)?;
    let annulus = AnnulusBlock::new(n)?;
    let grid = SpectralGrid::for_scale(n);
    let mi = Complex64::new(0.0, -1.0);
    let integrand: Result<Vec<FourierState>> = (0..z.len())
        .map(|j| {
            let t = z.frame_time(j);
            let terms = [CouplingTerm {
                u: y_l1.frame(j),
                v: y_l2.frame(j),
                window: Window::Low,
                sign: 1.0,
            }];
            Ok(coupling_apply(&annulus, &terms, t, z.frame(j), pot, params, &grid)?.scaled(mi))
        })
        .collect();
    let integrand = integrand?;
    let h = z.frame_dt();
    let mut acc = FourierState::zeros(integrand[0].mode_set().clone());
    let mut frames = vec![acc.clone()];
    for j in 1..z.len() {
        for i in 0..acc.coeffs().len() {
            acc.coeffs_mut()[i] +=
                0.5 * h * (integrand[j - 1].coeffs()[i] + integrand[j].coeffs()[i]);
        }
        frames.push(acc.clone());
    }
    Trajectory::new(n, z.t0(), z.dt(), h, frames, TrajectoryKind::Profile)
}

/// Max over stored times of the Frobenius unitarity defect
/// `||M(t) M(t)^dagger - I||_F`.
pub fn unitarity_defect(mats: &RaoMatrices) -> f64 {
    mats.mats.iter().map(|m| m.unitary_defect()).fold(0.0, f64::max)
}

/// Max over stored times and columns of the column-mass defect.
pub fn column_mass_defect(mats: &RaoMatrices) -> f64 {
    mats.mats.iter().map(|m| m.column_norm_defect()).fold(0.0, f64::max)
}

/// Dump matrices: one JSON header line `{"N":..,"L_or_xi":..,"times":[..]}`
/// followed by row-major complex f64 (re, im) per stored frame.
pub fn write_matrices<W: std::io::Write>(out: &mut W, mats: &RaoMatrices) -> Result<()> {
    let label = match mats.label {
        RaoLabel::Scale(l) => serde_json::json!(l),
        RaoLabel::Xi => serde_json::json!("xi"),
    };
    let header = serde_json::json!({
        "N": mats.n, "L_or_xi": label, "dim": mats.dim(), "times": mats.times,
    });
    writeln!(out, "{header}")?;
    for m in &mats.mats {
        for c in m.data() {
            out.write_all(&c.re.to_le_bytes())?;
            out.write_all(&c.im.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Everything one seed's ansatz produces.
pub struct AnsatzBundle {
    pub n: u32,
    pub seed: u64,
    pub f_n: FourierState,
    /// profiles `v_L` for every dyadic `L <= N`
    pub profiles: BTreeMap<u32, Trajectory>,
    /// `y_N = v_N - v_{N/2}` at half-step frames
    pub y: Trajectory,
    /// vector-solve `psi^{N,L}` for every dyadic `L <= N/2`
    pub psi: BTreeMap<u32, Trajectory>,
    pub xi: Trajectory,
    pub rho: Trajectory,
    pub z: Trajectory,
    pub h_mats: BTreeMap<u32, RaoMatrices>,
    pub m_mat: RaoMatrices,
}

/// Exactness and consistency checks over an [`AnsatzBundle`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnsatzChecks {
    pub unitarity: Vec<(String, f64)>,
    pub column_mass: Vec<(String, f64)>,
    /// `max_t || sum_L h^{N,L}(t) + Id - H^N(t) ||_max`
    pub telescoping: f64,
    /// `h^{N,1}(0)` is exactly zero
    pub h1_at_zero: f64,
    /// matrix route vs vector route for psi^N
    pub psi_route_deviation: f64,
    /// matrix route vs vector route for xi^N
    pub xi_route_deviation: f64,
    /// `rho = Q F_N` vs `xi - psi`
    pub rho_q_deviation: f64,
    /// `xi = psi + rho` reassembly
    pub xi_identity: f64,
    /// `z = y - xi` reassembly and `z(0)`
    pub z_identity: f64,
    pub z_at_zero: f64,
    /// exact-zero support outside the annulus for psi/xi/rho
    pub annulus_leak: f64,
}

/// Evolve all dyadic scales from one draw, build every `H^{N,L}`, `M^N` and
/// the ansatz pieces, and run the consistency checks.
#[allow(clippy::too_many_arguments)]
pub fn build_ansatz(
    n: u32,
    seed: u64,
    t_final: f64,
    dt: f64,
    opts: &RaoBuildOptions,
    pot: &Potential,
    params: &ParamSet,
) -> Result<(AnsatzBundle, AnsatzChecks)> {
    check_rao_scale(n)?;
    if n < 2 {
        return Err(Error::InvalidParameter("ansatz needs N >= 2".into()));
    }
    let draw = GaussianDraw::new(n, seed)?;
    let f_n = draw.annulus_state();

    // evolve every dyadic scale L <= N from the shared draw, truncated at L;
    // v_L therefore depends only on the Gaussians with <k> <= L
    let mut profiles = BTreeMap::new();
    for l in lattice::dyadic_scales_up_to(n) {
        let ms_l = ModeSet::new(l)?;
        let u0 = draw.state().restrict(ms_l)?;
        let consts = renorm::renorm_constants(l, pot)?;
        let traj = dynamics::evolve(&u0, t_final, dt, &consts, pot, dynamics::Method::Rk4)?;
        let b_l = renorm::gauge_constant(&draw, l)?;
        profiles.insert(l, dynamics::to_profile(&traj, b_l)?);
    }
    let v_n = &profiles[&n];
    let v_half = &profiles[&(n / 2)];
    let y = dynamics::dyadic_difference(v_n, v_half)?;

    // matrices
    let mut h_mats = BTreeMap::new();
    for l in lattice::dyadic_scales_up_to(n / 2) {
        h_mats.insert(l, build_h(n, l, &profiles[&l], opts, pot, params)?);
    }
    let m_mat = build_m(n, v_half, v_n, opts, pot, params)?;

    // vector-route ansatz pieces
    let mut psi = BTreeMap::new();
    for l in lattice::dyadic_scales_up_to(n / 2) {
        psi.insert(l, solve_psi_vector(n, &profiles[&l], &f_n, pot, params)?);
    }
    let xi = solve_xi_vector(n, v_half, v_n, pot, params)?;
    let psi_n = &psi[&(n / 2)];
    let rho = sub_trajectories(&xi, psi_n)?;
    let z = remainder(&y, &xi)?;

    let bundle = AnsatzBundle {
        n,
        seed,
        f_n,
        profiles,
        y,
        psi,
        xi,
        rho,
        z,
        h_mats,
        m_mat,
    };
    let checks = check_ansatz(&bundle)?;
    Ok((bundle, checks))
}

fn sub_trajectories(a: &Trajectory, b: &Trajectory) -> Result<Trajectory> {
    a.check_same_grid(b)?;
    let frames: Result<Vec<FourierState>> = a
        .frames()
        .iter()
        .zip(b.frames())
        .map(|(x, y)| x.sub(y))
        .collect();
    Trajectory::new(a.scale(), a.t0(), a.dt(), a.frame_dt(), frames?, a.kind())
}

pub fn check_ansatz(bundle: &AnsatzBundle) -> Result<AnsatzChecks> {
    let n = bundle.n;
    let mut unitarity = Vec::new();
    let mut column_mass = Vec::new();
    for (l, mats) in &bundle.h_mats {
        unitarity.push((format!("H^{{{n},{l}}}"), unitarity_defect(mats)));
        column_mass.push((format!("H^{{{n},{l}}}"), column_mass_defect(mats)));
    }
    unitarity.push((format!("M^{n}"), unitarity_defect(&bundle.m_mat)));
    column_mass.push((format!("M^{n}"), column_mass_defect(&bundle.m_mat)));

    // telescoping: sum_L h^{N,L} + Id = H^{N,N/2} on the stored grid
    let h_top = &bundle.h_mats[&(n / 2)];
    let mut telescoping = 0f64;
    for (ti, _t) in h_top.times().iter().enumerate() {
        let mut acc = CMat::identity(h_top.dim());
        let mut prev: Option<&RaoMatrices> = None;
        for (_l, mats) in bundle.h_mats.iter() {
            let h_l = match prev {
                None => mats.mats()[ti].sub(&CMat::identity(mats.dim())),
                Some(p) => mats.mats()[ti].sub(&p.mats()[ti]),
            };
            acc = acc.add(&h_l);
            prev = Some(mats);
        }
        telescoping = telescoping.max(acc.sub(&h_top.mats()[ti]).max_abs());
    }
    let h1 = dyadic_matrix_difference(&bundle.h_mats[&1], None)?;
    let h1_at_zero = h1.mats()[0].max_abs();

    // route deviations on the stored grid
    let psi_mat = apply_matrices(h_top, &bundle.f_n)?;
    let psi_vec = &bundle.psi[&(n / 2)];
    let psi_route_deviation = route_deviation(&psi_mat, psi_vec)?;
    let xi_mat = apply_matrices(&bundle.m_mat, &bundle.f_n)?;
    let xi_route_deviation = route_deviation(&xi_mat, &bundle.xi)?;

    // rho via Q^N = M^N - H^N
    let q = dyadic_matrix_difference(&bundle.m_mat, Some(h_top))?;
    let rho_mat = apply_matrices(&q, &bundle.f_n)?;
    let rho_q_deviation = route_deviation(&rho_mat, &bundle.rho)?;

    // identities
    let mut xi_identity = 0f64;
    for j in 0..bundle.xi.len() {
        let s = bundle.psi[&(n / 2)].frame(j).add(bundle.rho.frame(j))?;
        xi_identity = xi_identity.max(s.max_abs_diff(bundle.xi.frame(j)));
    }
    let stride =
        (bundle.xi.frame_dt() / bundle.y.frame_dt()).round() as usize;
    let mut z_identity = 0f64;
    for j in 0..bundle.z.len() {
        let s = bundle.z.frame(j).add(bundle.xi.frame(j))?;
        z_identity = z_identity.max(s.max_abs_diff(bundle.y.frame(j * stride)));
    }
    let z_at_zero = bundle.z.frame(0).l2_norm();

    let mut annulus_leak = 0f64;
    let half_sq = ((n / 2) as i64) * ((n / 2) as i64);
    for traj in [&bundle.xi, &bundle.rho]
        .into_iter()
        .chain(bundle.psi.values())
    {
        for f in traj.frames() {
            for (i, &k) in f.mode_set().modes().iter().enumerate() {
                if bracket_sq(k) <= half_sq {
                    annulus_leak = annulus_leak.max(f.coeffs()[i].norm());
                }
            }
        }
    }

    Ok(AnsatzChecks {
        unitarity,
        column_mass,
        telescoping,
        h1_at_zero,
        psi_route_deviation,
        xi_route_deviation,
        rho_q_deviation,
        xi_identity,
        z_identity,
        z_at_zero,
        annulus_leak,
    })
}

fn route_deviation(stored: &Trajectory, full: &Trajectory) -> Result<f64> {
    let stride = (stored.frame_dt() / full.frame_dt()).round() as usize;
    if stride == 0 {
        return Err(Error::GridMismatch("stored grid finer than full grid".into()));
    }
    let mut worst = 0f64;
    for j in 0..stored.len() {
        let jj = j * stride;
        if jj >= full.len() {
            break;
        }
        worst = worst.max(stored.frame(j).max_abs_diff(full.frame(jj)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Method;
    use crate::potential::multilinear_apply;
    use crate::sampling;

    fn pot() -> Potential {
        Potential::bessel(0.99, 8).unwrap()
    }

    fn profile_of(n: u32, seed: u64, t: f64, dt: f64) -> Trajectory {
        let p = pot();
        let draw = GaussianDraw::new(n, seed).unwrap();
        let u0 = draw.state();
        let consts = renorm::renorm_constants(n, &p).unwrap();
        let traj = dynamics::evolve(&u0, t, dt, &consts, &p, Method::Rk4).unwrap();
        dynamics::to_profile(&traj, renorm::gauge_constant(&draw, n).unwrap()).unwrap()
    }

    #[test]
    fn coupling_matrix_matches_multilinear_oracle() {
        // G(t) x must equal Delta_N M^<(v, v, x) for annulus-supported x
        let p = pot();
        let params = ParamSet::default();
        let annulus = AnnulusBlock::new(2).unwrap();
        let v = sampling::draw_gff(1, 3).unwrap();
        let t = 0.43;
        let terms = [CouplingTerm { u: &v, v: &v, window: Window::Low, sign: 1.0 }];
        let g = coupling_matrix(&annulus, &terms, t, &p, &params);

        let x = sampling::GaussianDraw::new(2, 9).unwrap().annulus_state();
        let gx = annulus.inject(&g.matvec(&annulus.extract(&x).unwrap())).unwrap();

        let v_emb = v.embed(x.mode_set().clone()).unwrap();
        let oracle = multilinear_apply(&v_emb, &v_emb, &x, Window::Low, &p, 2, t, true, &params)
            .unwrap();
        let oracle = lattice::project(&oracle, 2, lattice::Projection::Delta).unwrap();
        assert!(
            gx.max_abs_diff(&oracle) < 1e-12,
            "coupling vs multilinear: {}",
            gx.max_abs_diff(&oracle)
        );
    }

    #[test]
    fn coupling_apply_matches_matrix() {
        let p = pot();
        let params = ParamSet::default();
        let annulus = AnnulusBlock::new(4).unwrap();
        let grid = SpectralGrid::for_scale(4);
        // v_N-type input with annulus content exercises the corrections
        let v = sampling::draw_gff(4, 17).unwrap();
        let x = sampling::GaussianDraw::new(4, 23).unwrap().annulus_state();
        for window in [Window::Low, Window::Tiny] {
            let terms = [CouplingTerm { u: &v, v: &v, window, sign: 1.0 }];
            let t = 0.21;
            let g = coupling_matrix(&annulus, &terms, t, &p, &params);
            let direct = annulus.inject(&g.matvec(&annulus.extract(&x).unwrap())).unwrap();
            let fast = coupling_apply(&annulus, &terms, t, &x, &p, &params, &grid).unwrap();
            assert!(
                fast.max_abs_diff(&direct) < 1e-11,
                "window {window:?}: {}",
                fast.max_abs_diff(&direct)
            );
        }
    }

    #[test]
    fn h_is_identity_at_zero_and_for_zero_profile() {
        let p = pot();
        let params = ParamSet::default();
        // genuinely zero low-frequency profile
        let ms1 = ModeSet::new(1).unwrap();
        let zero_frames: Vec<FourierState> =
            (0..21).map(|_| FourierState::zeros(ms1.clone())).collect();
        let v0 = Trajectory::new(1, 0.0, 1e-2, 5e-3, zero_frames, TrajectoryKind::Profile)
            .unwrap();
        let opts = RaoBuildOptions { store_every: 2, xi_form: XiForm::Linear };
        let h = build_h(2, 1, &v0, &opts, &p, &params).unwrap();
        for m in h.mats() {
            assert!(m.sub(&CMat::identity(m.dim())).max_abs() < 1e-14);
        }
    }

    #[test]
    fn h_n1_is_trivially_identity() {
        // the scale-1 profile has only the k = 0 mode, and the exclusion
        // k2 not in {k1, k3} empties the low-frequency form: H^{N,1} = Id
        let p = pot();
        let params = ParamSet::default();
        let opts = RaoBuildOptions { store_every: 5, xi_form: XiForm::Linear };
        let v1 = profile_of(1, 7, 0.1, 1e-3);
        let h = build_h(2, 1, &v1, &opts, &p, &params).unwrap();
        for m in h.mats() {
            assert_eq!(m.sub(&CMat::identity(m.dim())).max_abs(), 0.0);
        }
        assert_eq!(unitarity_defect(&h), 0.0);
    }

    #[test]
    fn unitarity_defect_small_and_scales_with_dt() {
        let p = pot();
        let params = ParamSet::default();
        let opts = RaoBuildOptions { store_every: 5, xi_form: XiForm::Linear };
        let v2 = profile_of(2, 7, 0.1, 1e-3);
        let h = build_h(4, 2, &v2, &opts, &p, &params).unwrap();
        let d1 = unitarity_defect(&h);
        assert!(d1 <= 1e-6, "defect {d1}");
        assert!(d1 > 0.0);
        assert_eq!(h.mats()[0].sub(&CMat::identity(h.dim())).max_abs(), 0.0);

        let v2c = profile_of(2, 7, 0.1, 4e-3);
        let v2f = profile_of(2, 7, 0.1, 2e-3);
        let dc = unitarity_defect(&build_h(4, 2, &v2c, &opts, &p, &params).unwrap());
        let df = unitarity_defect(&build_h(4, 2, &v2f, &opts, &p, &params).unwrap());
        let ratio = dc / df;
        assert!((6.0..50.0).contains(&ratio), "defect ratio {ratio} ({dc} / {df})");
    }

    #[test]
    fn m_reduces_to_h_when_profiles_coincide() {
        // if v_N == v_{N/2} framewise the two tiny-window terms cancel
        let p = pot();
        let params = ParamSet::default();
        let opts = RaoBuildOptions { store_every: 5, xi_form: XiForm::Linear };
        let v1 = profile_of(1, 5, 0.05, 1e-3);
        // fake a scale-2 copy of the scale-1 profile
        let ms2 = ModeSet::new(2).unwrap();
        let frames2: Vec<FourierState> =
            v1.frames().iter().map(|f| f.embed(ms2.clone()).unwrap()).collect();
        let v1_as2 =
            Trajectory::new(2, 0.0, v1.dt(), v1.frame_dt(), frames2, TrajectoryKind::Profile)
                .unwrap();
        let m = build_m(2, &v1, &v1_as2, &opts, &p, &params).unwrap();
        let h = build_h(2, 1, &v1, &opts, &p, &params).unwrap();
        let mut worst = 0f64;
        for (a, b) in m.mats().iter().zip(h.mats()) {
            worst = worst.max(a.sub(b).max_abs());
        }
        assert!(worst < 1e-12, "M vs H deviation {worst}");
        assert!(unitarity_defect(&m) <= 1e-6);
    }

    #[test]
    fn measurability_contract() {
        // H^{N,L} built from the shared draw truncated at L equals H^{N,L}
        // built from an independent scale-L draw with the same seed: the
        // construction path cannot see Gaussians above L
        let p = pot();
        let params = ParamSet::default();
        let opts = RaoBuildOptions::default();
        let seed = 31;

        let draw_full = GaussianDraw::new(4, seed).unwrap();
        let ms1 = ModeSet::new(1).unwrap();
        let u0_restricted = draw_full.state().restrict(ms1).unwrap();
        let consts1 = renorm::renorm_constants(1, &p).unwrap();
        let t1 = dynamics::evolve(&u0_restricted, 0.05, 1e-3, &consts1, &p, Method::Rk4).unwrap();
        let v1a =
            dynamics::to_profile(&t1, renorm::gauge_constant(&draw_full, 1).unwrap()).unwrap();

        let v1b = profile_of(1, seed, 0.05, 1e-3);
        let ha = build_h(4, 1, &v1a, &opts, &p, &params).unwrap();
        let hb = build_h(4, 1, &v1b, &opts, &p, &params).unwrap();
        for (a, b) in ha.mats().iter().zip(hb.mats()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn paraproduct_basics() {
        let p = pot();
        let params = ParamSet::default();
        let v1 = profile_of(1, 3, 0.05, 5e-3);
        let v2 = profile_of(2, 3, 0.05, 5e-3);
        let y1 = v1.clone();
        // z: an annulus trajectory at the same grid
        let f = GaussianDraw::new(4, 41).unwrap().annulus_state();
        let frames: Vec<FourierState> = (0..v1.len()).map(|_| f.clone()).collect();
        let z = Trajectory::new(4, 0.0, v1.dt(), v1.frame_dt(), frames, TrajectoryKind::Profile)
            .unwrap();

        let y2 = {
            // embed v2 pieces as the second input
            let frames: Vec<FourierState> = v2.frames().to_vec();
            Trajectory::new(2, 0.0, v2.dt(), v2.frame_dt(), frames, TrajectoryKind::Profile)
                .unwrap()
        };

        let lz = paraproduct_apply(&y1, &y2, &z, 4, &p, &params).unwrap();
        assert_eq!(lz.frame(0).l2_norm(), 0.0);

        // zero input maps to zero
        let z0 = Trajectory::new(
            4,
            0.0,
            v1.dt(),
            v1.frame_dt(),
            (0..v1.len()).map(|_| FourierState::zeros(f.mode_set().clone())).collect(),
            TrajectoryKind::Profile,
        )
        .unwrap();
        let lz0 = paraproduct_apply(&y1, &y2, &z0, 4, &p, &params).unwrap();
        for fr in lz0.frames() {
            assert_eq!(fr.l2_norm(), 0.0);
        }

        // linearity
        let za = z.map_frames(|_, s| s.scaled(Complex64::new(0.3, -0.2)));
        let lza = paraproduct_apply(&y1, &y2, &za, 4, &p, &params).unwrap();
        let mut worst = 0f64;
        for j in 0..lz.len() {
            let want = lz.frame(j).scaled(Complex64::new(0.3, -0.2));
            worst = worst.max(want.max_abs_diff(lza.frame(j)));
        }
        assert!(worst < 1e-12, "linearity {worst}");
    }

    #[test]
    fn ansatz_bundle_identities_n2() {
        let p = pot();
        let params = ParamSet::default();
        let opts = RaoBuildOptions { store_every: 10, xi_form: XiForm::Linear };
        let (bundle, checks) = build_ansatz(2, 11, 0.1, 1e-3, &opts, &p, &params).unwrap();
        assert!(checks.telescoping <= 1e-10, "telescoping {}", checks.telescoping);
        assert_eq!(checks.h1_at_zero, 0.0);
        assert!(checks.psi_route_deviation <= 1e-12, "psi routes {}", checks.psi_route_deviation);
        assert!(checks.xi_route_deviation <= 1e-12, "xi routes {}", checks.xi_route_deviation);
        assert!(checks.rho_q_deviation <= 1e-12, "rho vs Q F {}", checks.rho_q_deviation);
        assert!(checks.xi_identity <= 1e-12);
        assert!(checks.z_identity <= 1e-12);
        assert_eq!(checks.z_at_zero, 0.0);
        assert_eq!(checks.annulus_leak, 0.0);
        for (label, d) in &checks.unitarity {
            assert!(*d <= 1e-6, "{label} defect {d}");
        }
        // psi mass conservation: ||psi(t)|| = ||F_N|| up to defect
        let psi = &bundle.psi[&1];
        let f_norm = bundle.f_n.l2_norm();
        for f in psi.frames() {
            assert!((f.l2_norm() - f_norm).abs() <= 1e-6 * f_norm);
        }
    }

    #[test]
    fn literal_mixed_form_differs_but_starts_at_identity() {
        let p = pot();
        let params = ParamSet::default();
        let v1 = profile_of(1, 5, 0.05, 1e-3);
        let v2 = profile_of(2, 5, 0.05, 1e-3);
        let opts_lin = RaoBuildOptions { store_every: 10, xi_form: XiForm::Linear };
        let opts_mix = RaoBuildOptions { store_every: 10, xi_form: XiForm::LiteralMixed };
        let m_lin = build_m(2, &v1, &v2, &opts_lin, &p, &params).unwrap();
        let m_mix = build_m(2, &v1, &v2, &opts_mix, &p, &params).unwrap();
        assert_eq!(m_mix.mats()[0].sub(&CMat::identity(m_mix.dim())).max_abs(), 0.0);
        let mut diff = 0f64;
        for (a, b) in m_lin.mats().iter().zip(m_mix.mats()) {
            diff = diff.max(a.sub(b).max_abs());
        }
        assert!(diff > 1e-8, "mixed form unexpectedly identical ({diff})");
    }
}
