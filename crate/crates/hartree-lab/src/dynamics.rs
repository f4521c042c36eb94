//! Time integration of the truncated renormalized flow, the gauge/profile
//! transform, dyadic differences, conservation monitors, and the integral
//! equation satisfied by the dyadic difference of profiles.
//!
//! The flow integrated here is
//! `d/dt u_k = -i |k|^2 u_k - i (Pi_N[(|u|^2 * V) u] - sigma_N u - C_N u)_k`,
//! so each mode carries the free phase `e^{-i t |k|^2}` plus the phase
//! rotations `+sigma_N`, `+(C_N)_k` from the counterterms. The profile
//! transform `v_k(t) = e^{+i t |k|^2} e^{i B_N t} u_k(t)` inverts the free
//! phase and the gauge constant; see the phase-convention note in
//! [`crate::potential`].

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::SpectralGrid;
use crate::lattice::{bracket_sq, norm_sq, FourierState};
use crate::params::ParamSet;
use crate::potential::{self, Potential, Window};
use crate::renorm::{self, RenormConstants};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryKind {
    Physical,
    Profile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Rk4,
    Strang,
}

/// A time-gridded sequence of states with uniform frame spacing.
///
/// [`evolve`] produces frames at half-step resolution (`frame_dt = dt/2`), so
/// downstream matrix ODEs can consume stage values at `t`, `t + dt/2`,
/// `t + dt` without interpolation. Derived trajectories (matrix ODE outputs)
/// have `frame_dt = dt`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    n: u32,
    t0: f64,
    /// macro time step of the generating integrator
    dt: f64,
    /// spacing between stored frames (dt/2 for evolve outputs)
    frame_dt: f64,
    frames: Vec<FourierState>,
    kind: TrajectoryKind,
}

impl Trajectory {
    pub fn new(
        n: u32,
        t0: f64,
        dt: f64,
        frame_dt: f64,
        frames: Vec<FourierState>,
        kind: TrajectoryKind,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidParameter("trajectory needs frames".into()));
        }
        if frames.iter().any(|f| f.scale() != frames[0].scale()) {
            return Err(Error::GridMismatch("frames on mixed mode sets".into()));
        }
        Ok(Trajectory { n, t0, dt, frame_dt, frames, kind })
    }

    pub fn scale(&self) -> u32 {
        self.n
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn frame_dt(&self) -> f64 {
        self.frame_dt
    }

    pub fn kind(&self) -> TrajectoryKind {
        self.kind
    }

    pub fn frames(&self) -> &[FourierState] {
        &self.frames
    }

    pub fn frame(&self, j: usize) -> &FourierState {
        &self.frames[j]
    }

    pub fn frame_time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.frame_dt
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn final_state(&self) -> &FourierState {
        self.frames.last().expect("nonempty")
    }

    pub fn check_same_grid(&self, other: &Self) -> Result<()> {
        if self.len() != other.len()
            || (self.t0 - other.t0).abs() > 1e-12
            || (self.frame_dt - other.frame_dt).abs() > 1e-15
        {
            return Err(Error::GridMismatch(format!(
                "frames {} vs {}, t0 {} vs {}, frame_dt {} vs {}",
                self.len(),
                other.len(),
                self.t0,
                other.t0,
                self.frame_dt,
                other.frame_dt
            )));
        }
        Ok(())
    }

    /// Framewise map preserving the grid.
    pub fn map_frames(&self, f: impl FnMut(usize, &FourierState) -> FourierState) -> Self {
        let mut f = f;
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(j, s)| f(j, s))
            .collect();
        Trajectory { frames, ..self.clone() }
    }
}

/// Integrate the truncated renormalized flow from `u0` to time `t_final`.
///
/// `rk4` applies the classical scheme to the full projected vector field with
/// internal step `dt/2` (storing every internal state, hence half-step
/// frames). `strang` alternates the exact Fourier-multiplier phase
/// `e^{-i h (|k|^2 - sigma_N - (C_N)_k)}` with the exact pointwise phase
/// rotation `e^{-i h (V * |u|^2)(x)}` followed by `Pi_N`; the projection
/// after the nonlinear substep makes this a truncation-equivalent variant of
/// the same flow rather than the literal projected equation.
pub fn evolve(
    u0: &FourierState,
    t_final: f64,
    dt: f64,
    consts: &RenormConstants,
    pot: &Potential,
    method: Method,
) -> Result<Trajectory> {
    if dt <= 0.0 {
        return Err(Error::InvalidParameter(format!("dt = {dt} must be > 0")));
    }
    if u0.scale() != consts.scale() {
        return Err(Error::ModeSetMismatch(u0.scale(), consts.scale()));
    }
    let h = dt / 2.0;
    let n_frames = (t_final / h).round() as usize;
    if ((n_frames as f64) * h - t_final).abs() > 1e-9 * dt.max(1e-30) {
        return Err(Error::InvalidParameter(format!(
            "t_final = {t_final} is not a multiple of dt/2 = {h}"
        )));
    }
    let grid = SpectralGrid::for_scale(u0.scale());
    let mut frames = Vec::with_capacity(n_frames + 1);
    frames.push(u0.clone());
    let mut u = u0.clone();
    for _ in 0..n_frames {
        u = match method {
            Method::Rk4 => rk4_step(&u, h, consts, pot, &grid)?,
            Method::Strang => strang_step(&u, h, consts, pot, &grid)?,
        };
        frames.push(u.clone());
    }
    Trajectory::new(u0.scale(), 0.0, dt, h, frames, TrajectoryKind::Physical)
}

fn vector_field(
    u: &FourierState,
    consts: &RenormConstants,
    pot: &Potential,
    grid: &SpectralGrid,
) -> Result<FourierState> {
    let mut f = potential::hartree_vector_field_with_grid(u, pot, consts, grid)?;
    let mi = Complex64::new(0.0, -1.0);
    for (i, &k) in u.mode_set().modes().iter().enumerate() {
        let lin = norm_sq(k) as f64 * u.coeffs()[i];
        f.coeffs_mut()[i] = mi * (lin + f.coeffs()[i]);
    }
    Ok(f)
}

fn rk4_step(
    u: &FourierState,
    h: f64,
    consts: &RenormConstants,
    pot: &Potential,
    grid: &SpectralGrid,
) -> Result<FourierState> {
    let k1 = vector_field(u, consts, pot, grid)?;
    let k2 = vector_field(&axpy(u, 0.5 * h, &k1), consts, pot, grid)?;
    let k3 = vector_field(&axpy(u, 0.5 * h, &k2), consts, pot, grid)?;
    let k4 = vector_field(&axpy(u, h, &k3), consts, pot, grid)?;
    let mut out = u.clone();
    for i in 0..out.coeffs().len() {
        out.coeffs_mut()[i] += h / 6.0
            * (k1.coeffs()[i]
                + 2.0 * k2.coeffs()[i]
                + 2.0 * k3.coeffs()[i]
                + k4.coeffs()[i]);
    }
    Ok(out)
}

fn axpy(u: &FourierState, a: f64, v: &FourierState) -> FourierState {
    let mut out = u.clone();
    for i in 0..out.coeffs().len() {
        out.coeffs_mut()[i] += a * v.coeffs()[i];
    }
    out
}

fn strang_step(
    u: &FourierState,
    h: f64,
    consts: &RenormConstants,
    pot: &Potential,
    grid: &SpectralGrid,
) -> Result<FourierState> {
    let half_linear = |u: &FourierState| {
        let mut out = u.clone();
        for (i, &k) in u.mode_set().modes().iter().enumerate() {
            let rate = norm_sq(k) as f64 - consts.sigma() - consts.c_multiplier()[i];
            out.coeffs_mut()[i] *= Complex64::from_polar(1.0, -0.5 * h * rate);
        }
        out
    };
    let u = half_linear(u);
    // nonlinear substep: |u(x)| is pointwise conserved, so V * |u|^2 is
    // frozen and the substep is the exact phase rotation e^{-i h (V*|u|^2)(x)}
    let phys = grid.synthesize(&u);
    let mut w: Vec<Complex64> = phys.iter().map(|c| Complex64::new(c.norm_sqr(), 0.0)).collect();
    grid.to_frequency(&mut w);
    for idx in 0..grid.len() {
        w[idx] *= pot.vhat(grid.freq_of(idx));
    }
    grid.to_physical(&mut w);
    let mut rotated: Vec<Complex64> = phys
        .iter()
        .zip(&w)
        .map(|(c, m)| c * Complex64::from_polar(1.0, -h * m.re))
        .collect();
    grid.to_frequency(&mut rotated);
    let u = grid.extract_state(&rotated, u.mode_set().clone());
    Ok(half_linear(&u))
}

/// Apply the profile (interaction-picture plus gauge) transform
/// `v_k(t) = e^{+i t |k|^2} e^{i B_N t} u_k(t)` framewise.
pub fn to_profile(traj: &Trajectory, b_n: f64) -> Result<Trajectory> {
    if traj.kind() != TrajectoryKind::Physical {
        return Err(Error::InvalidParameter("to_profile expects a physical trajectory".into()));
    }
    let mut out = traj.map_frames(|j, s| profile_frame(s, traj.frame_time(j), b_n, 1.0));
    out.kind = TrajectoryKind::Profile;
    Ok(out)
}

/// Inverse of [`to_profile`].
pub fn from_profile(traj: &Trajectory, b_n: f64) -> Result<Trajectory> {
    if traj.kind() != TrajectoryKind::Profile {
        return Err(Error::InvalidParameter("from_profile expects a profile trajectory".into()));
    }
    let mut out = traj.map_frames(|j, s| profile_frame(s, traj.frame_time(j), b_n, -1.0));
    out.kind = TrajectoryKind::Physical;
    Ok(out)
}

fn profile_frame(u: &FourierState, t: f64, b_n: f64, sign: f64) -> FourierState {
    let mut out = u.clone();
    for (i, &k) in u.mode_set().modes().iter().enumerate() {
        let phase = Complex64::from_polar(1.0, sign * t * (norm_sq(k) as f64 + b_n));
        out.coeffs_mut()[i] = u.coeffs()[i] * phase;
    }
    out
}

/// `y_N = v_N - v_{N/2}` framewise, on the mode set of `v_N`.
pub fn dyadic_difference(v_n: &Trajectory, v_half: &Trajectory) -> Result<Trajectory> {
    v_n.check_same_grid(v_half)?;
    if v_half.scale() != crate::lattice::half(v_n.scale()) {
        return Err(Error::ModeSetMismatch(v_half.scale(), v_n.scale() / 2));
    }
    let target = v_n.frames()[0].mode_set().clone();
    let frames: Result<Vec<FourierState>> = v_n
        .frames()
        .iter()
        .zip(v_half.frames())
        .map(|(a, b)| a.sub(&b.embed(target.clone())?))
        .collect();
    Trajectory::new(v_n.scale(), v_n.t0(), v_n.dt(), v_n.frame_dt(), frames?, v_n.kind())
}

/// Maximum relative drift of the conserved quantities over a trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConservationReport {
    pub mass_drift: f64,
    pub hamiltonian_drift: f64,
}

pub fn conservation_report(
    traj: &Trajectory,
    consts: &RenormConstants,
    pot: &Potential,
) -> Result<ConservationReport> {
    if traj.kind() != TrajectoryKind::Physical {
        return Err(Error::InvalidParameter("conservation monitors use the physical flow".into()));
    }
    let mass0 = traj.frame(0).mass();
    let h0 = renorm::hamiltonian(traj.frame(0), consts, pot)?;
    let mut mass_drift = 0f64;
    let mut ham_drift = 0f64;
    for f in traj.frames().iter().skip(1) {
        let m = f.mass();
        let h = renorm::hamiltonian(f, consts, pot)?;
        mass_drift = mass_drift.max((m - mass0).abs() / mass0.max(1e-300));
        ham_drift = ham_drift.max((h - h0).abs() / h0.abs().max(1e-300));
    }
    Ok(ConservationReport { mass_drift, hamiltonian_drift: ham_drift })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quadrature {
    Trapezoid,
    Simpson,
}

/// Residual of the integral equation satisfied by `y_N = v_N - v_{N/2}`:
/// assemble the right side (the two projected nonresonant cubic terms, the
/// `<k>^{-2}` term and the two diagonal potential sums) by quadrature on the
/// frame grid, and return the maximum framewise coefficient error against
/// `y_N` itself.
pub fn integral_equation_residual(
    y_n: &Trajectory,
    v_n: &Trajectory,
    v_half: &Trajectory,
    pot: &Potential,
    params: &ParamSet,
    quad: Quadrature,
) -> Result<f64> {
    y_n.check_same_grid(v_n)?;
    y_n.check_same_grid(v_half)?;
    if y_n.kind() != TrajectoryKind::Profile || v_n.kind() != TrajectoryKind::Profile {
        return Err(Error::InvalidParameter("residual is defined for profiles".into()));
    }
    let n = v_n.scale();
    let nh = crate::lattice::half(n);
    let target = v_n.frames()[0].mode_set().clone();
    let grid = SpectralGrid::for_scale(n);
    let mi = Complex64::new(0.0, -1.0);
    let pi = Complex64::new(0.0, 1.0);

    // integrand g(s) per frame
    let mut integrand = Vec::with_capacity(y_n.len());
    for j in 0..y_n.len() {
        let s = y_n.frame_time(j);
        let vnf = v_n.frame(j);
        let vhf = v_half.frame(j);
        let ynf = y_n.frame(j);

        let m_n = potential::multilinear_apply_with_grid(
            vnf, vnf, vnf, Window::Full, pot, n, s, true, params, &grid,
        )?;
        let m_h_small = potential::multilinear_apply(
            vhf, vhf, vhf, Window::Full, pot, nh, s, true, params,
        )?;
        let m_h = m_h_small.embed(target.clone())?;

        let d_n = potential::hartree_diag_term(vnf, n, pot)?;
        let d_h = potential::hartree_diag_term(vhf, nh, pot)?.embed(target.clone())?;

        let mut g = FourierState::zeros(target.clone());
        for (i, &k) in target.modes().iter().enumerate() {
            g.coeffs_mut()[i] = mi * (m_n.coeffs()[i] - m_h.coeffs()[i])
                + mi * (d_n.coeffs()[i] - d_h.coeffs()[i])
                + pi * ynf.coeffs()[i] / bracket_sq(k) as f64;
        }
        integrand.push(g);
    }

    // cumulative quadrature and framewise comparison
    let h = y_n.frame_dt();
    let f0 = y_n.frame(0).clone();
    let mut acc = FourierState::zeros(target.clone());
    let mut residual = 0f64;
    let mut prev_acc = acc.clone();
    for j in 0..y_n.len() {
        if j > 0 {
            match quad {
                Quadrature::Trapezoid => {
                    acc = {
                        let mut a = acc.clone();
                        for i in 0..a.coeffs().len() {
                            a.coeffs_mut()[i] += 0.5
                                * h
                                * (integrand[j - 1].coeffs()[i] + integrand[j].coeffs()[i]);
                        }
                        a
                    };
                }
                Quadrature::Simpson => {
                    // composite Simpson over frame pairs; odd frames fall back
                    // to trapezoid from the previous frame
                    if j % 2 == 0 {
                        let mut a = prev_acc.clone();
                        for i in 0..a.coeffs().len() {
                            a.coeffs_mut()[i] += h / 3.0
                                * (integrand[j - 2].coeffs()[i]
                                    + 4.0 * integrand[j - 1].coeffs()[i]
                                    + integrand[j].coeffs()[i]);
                        }
                        prev_acc = a.clone();
                        acc = a;
                    } else {
                        let mut a = acc.clone();
                        for i in 0..a.coeffs().len() {
                            a.coeffs_mut()[i] += 0.5
                                * h
                                * (integrand[j - 1].coeffs()[i] + integrand[j].coeffs()[i]);
                        }
                        acc = a;
                    }
                }
            }
        } else {
            prev_acc = acc.clone();
        }
        let rhs = f0.add(&acc)?;
        residual = residual.max(y_n.frame(j).max_abs_diff(&rhs));
    }
    Ok(residual)
}

/// Linear-flow reference for stub tests: every mode rotates by
/// `e^{-i t (|k|^2 - sigma - (C_N)_k)}`.
pub fn linear_flow_state(
    u0: &FourierState,
    t: f64,
    consts: &RenormConstants,
) -> FourierState {
    let mut out = u0.clone();
    for (i, &k) in u0.mode_set().modes().iter().enumerate() {
        let rate = norm_sq(k) as f64 - consts.sigma() - consts.c_multiplier()[i];
        out.coeffs_mut()[i] *= Complex64::from_polar(1.0, -t * rate);
    }
    out
}

/// Dump a trajectory: one JSON header line
/// `{"N":..,"t0":..,"dt":..,"frame_dt":..,"frames":..,"kind":..}` followed by
/// little-endian f64 pairs (re, im) per mode per frame.
pub fn write_trajectory<W: std::io::Write>(out: &mut W, traj: &Trajectory) -> Result<()> {
    let header = serde_json::json!({
        "N": traj.scale(),
        "t0": traj.t0(),
        "dt": traj.dt(),
        "frame_dt": traj.frame_dt(),
        "frames": traj.len(),
        "kind": match traj.kind() { TrajectoryKind::Physical => "physical", TrajectoryKind::Profile => "profile" },
    });
    writeln!(out, "{header}")?;
    for f in traj.frames() {
        for c in f.coeffs() {
            out.write_all(&c.re.to_le_bytes())?;
            out.write_all(&c.im.to_le_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{ModeSet, Projection};
    use crate::sampling;
    use approx::assert_relative_eq;

    fn pot() -> Potential {
        Potential::bessel(0.99, 8).unwrap()
    }

    fn zero_consts(n: u32) -> RenormConstants {
        RenormConstants::zeroed(n).unwrap()
    }

    #[test]
    fn zero_potential_gives_linear_flow() {
        let consts = zero_consts(2);
        let p0 = Potential::zero();
        let u0 = sampling::draw_gff(2, 1).unwrap();
        let traj = evolve(&u0, 0.25, 1e-2, &consts, &p0, Method::Rk4).unwrap();
        // u_k(T) = e^{-i T |k|^2} u_k(0) up to rk4 error on the pure phases
        let expect = linear_flow_state(&u0, 0.25, &consts);
        assert!(traj.final_state().max_abs_diff(&expect) < 1e-8);

        let strang = evolve(&u0, 0.25, 1e-2, &consts, &p0, Method::Strang).unwrap();
        // strang applies the linear phase exactly
        assert!(strang.final_state().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn single_zero_mode_closed_form() {
        // (1.7)-type reduction at k = 0: phase rotation at rate
        // |c|^2 - sigma - (C_N)_0, modulus conserved
        let p = pot();
        let consts = renorm::renorm_constants(2, &p).unwrap();
        let ms = ModeSet::new(2).unwrap();
        let c = Complex64::new(0.4, 0.3);
        let u0 = FourierState::single_mode(ms.clone(), [0, 0, 0], c).unwrap();
        let t = 0.5;
        let traj = evolve(&u0, t, 1e-3, &consts, &p, Method::Rk4).unwrap();
        let idx = ms.index_of([0, 0, 0]).unwrap();
        let rate = c.norm_sqr() - consts.sigma() - consts.c_multiplier()[idx];
        let expect = c * Complex64::from_polar(1.0, -t * rate);
        let got = traj.final_state().coeffs()[idx];
        assert!((got - expect).norm() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn rk4_order_check() {
        let p = pot();
        let consts = renorm::renorm_constants(2, &p).unwrap();
        let u0 = sampling::draw_gff(2, 5).unwrap();
        let reference = evolve(&u0, 0.2, 0.00125, &consts, &p, Method::Rk4).unwrap();
        let coarse = evolve(&u0, 0.2, 0.01, &consts, &p, Method::Rk4).unwrap();
        let fine = evolve(&u0, 0.2, 0.005, &consts, &p, Method::Rk4).unwrap();
        let e_coarse = coarse.final_state().max_abs_diff(reference.final_state());
        let e_fine = fine.final_state().max_abs_diff(reference.final_state());
        let ratio = e_coarse / e_fine;
        assert!(
            (8.0..40.0).contains(&ratio),
            "rk4 refinement ratio {ratio} (errors {e_coarse} / {e_fine})"
        );
    }

    #[test]
    fn profile_round_trip_and_modulus() {
        let p = pot();
        let consts = renorm::renorm_constants(2, &p).unwrap();
        let u0 = sampling::draw_gff(2, 9).unwrap();
        let traj = evolve(&u0, 0.1, 1e-2, &consts, &p, Method::Rk4).unwrap();
        let b_n = 0.731;
        let prof = to_profile(&traj, b_n).unwrap();
        // t = 0 frame unchanged
        assert!(prof.frame(0).max_abs_diff(traj.frame(0)) == 0.0);
        // |v_k(t)| = |u_k(t)|
        for j in 0..traj.len() {
            for (a, b) in prof.frame(j).coeffs().iter().zip(traj.frame(j).coeffs()) {
                assert_relative_eq!(a.norm(), b.norm(), epsilon = 1e-13);
            }
        }
        let back = from_profile(&prof, b_n).unwrap();
        let mut worst = 0f64;
        for j in 0..traj.len() {
            worst = worst.max(back.frame(j).max_abs_diff(traj.frame(j)));
        }
        assert!(worst < 1e-13);
    }

    #[test]
    fn flow_commutes_with_global_phase() {
        let p = pot();
        let consts = renorm::renorm_constants(2, &p).unwrap();
        let u0 = sampling::draw_gff(2, 13).unwrap();
        let c = Complex64::from_polar(1.0, 0.9);
        let a = evolve(&u0.scaled(c), 0.05, 1e-2, &consts, &p, Method::Rk4).unwrap();
        let b = evolve(&u0, 0.05, 1e-2, &consts, &p, Method::Rk4).unwrap();
        assert!(a.final_state().max_abs_diff(&b.final_state().scaled(c)) < 1e-13);
    }

    #[test]
    fn dyadic_difference_structure() {
        let p = pot();
        let c4 = renorm::renorm_constants(4, &p).unwrap();
        let c2 = renorm::renorm_constants(2, &p).unwrap();
        let draw = sampling::GaussianDraw::new(4, 3).unwrap();
        let u0 = draw.state();
        let ms2 = ModeSet::new(2).unwrap();
        let u0h = crate::lattice::project(&u0, 2, Projection::Pi)
            .unwrap()
            .restrict(ms2)
            .unwrap();
        let t4 = evolve(&u0, 0.05, 1e-2, &c4, &p, Method::Rk4).unwrap();
        let t2 = evolve(&u0h, 0.05, 1e-2, &c2, &p, Method::Rk4).unwrap();
        let v4 = to_profile(&t4, renorm::gauge_constant(&draw, 4).unwrap()).unwrap();
        let v2 = to_profile(&t2, renorm::gauge_constant(&draw, 2).unwrap()).unwrap();
        let y = dyadic_difference(&v4, &v2).unwrap();
        // t = 0: y(0) = F_N
        let f_n = draw.annulus_state();
        assert!(y.frame(0).max_abs_diff(&f_n) < 1e-14);
        // y + v_half = v_N framewise
        for j in 0..y.len() {
            let rhs = y
                .frame(j)
                .add(&v2.frame(j).embed(v4.frame(0).mode_set().clone()).unwrap())
                .unwrap();
            assert!(rhs.max_abs_diff(v4.frame(j)) < 1e-13);
        }
    }

    #[test]
    fn conservation_linear_stub_is_exact() {
        let consts = zero_consts(2);
        let p0 = Potential::zero();
        let u0 = sampling::draw_gff(2, 21).unwrap();
        let traj = evolve(&u0, 0.2, 1e-2, &consts, &p0, Method::Strang).unwrap();
        let rep = conservation_report(&traj, &consts, &p0).unwrap();
        assert!(rep.mass_drift <= 1e-12, "mass drift {}", rep.mass_drift);
        assert!(rep.hamiltonian_drift <= 1e-12);
    }

    #[test]
    fn conservation_rk4_reference_resolution() {
        let p = pot();
        let consts = renorm::renorm_constants(2, &p).unwrap();
        let u0 = sampling::draw_gff(2, 31).unwrap();
        let traj = evolve(&u0, 1.0, 1e-3, &consts, &p, Method::Rk4).unwrap();
        let rep = conservation_report(&traj, &consts, &p).unwrap();
        assert!(rep.mass_drift <= 1e-6, "mass drift {}", rep.mass_drift);
        assert!(rep.hamiltonian_drift <= 1e-5, "H drift {}", rep.hamiltonian_drift);
    }

    #[test]
    fn drift_shrinks_under_refinement() {
        let p = pot();
        let consts = renorm::renorm_constants(2, &p).unwrap();
        let u0 = sampling::draw_gff(2, 37).unwrap();
        let d1 = conservation_report(
            &evolve(&u0, 0.25, 4e-3, &consts, &p, Method::Rk4).unwrap(),
            &consts,
            &p,
        )
        .unwrap();
        let d2 = conservation_report(
            &evolve(&u0, 0.25, 2e-3, &consts, &p, Method::Rk4).unwrap(),
            &consts,
            &p,
        )
        .unwrap();
        let ratio = d1.mass_drift / d2.mass_drift;
        assert!(ratio > 6.0, "mass drift refinement ratio {ratio}");
    }

    #[test]
    fn residual_zero_for_linear_stub() {
        // with the cubic term stubbed to zero and counterterms zero the
        // integral identity reduces to the <k>^{-2} term; quadrature of the
        // pure phase rotation is not exact, but the equation holds framewise
        // through the same quadrature on both sides, so compare against the
        // analytically integrated linear term instead: residual of the full
        // pipeline stays at quadrature order, and vanishes identically when
        // the state itself is zero.
        let p0 = Potential::zero();
        let c2 = zero_consts(2);
        let c4 = zero_consts(4);
        let ms4 = ModeSet::new(4).unwrap();
        let ms2 = ModeSet::new(2).unwrap();
        let z4 = FourierState::zeros(ms4);
        let z2 = FourierState::zeros(ms2);
        let t4 = evolve(&z4, 0.1, 1e-2, &c4, &p0, Method::Rk4).unwrap();
        let t2 = evolve(&z2, 0.1, 1e-2, &c2, &p0, Method::Rk4).unwrap();
        let v4 = to_profile(&t4, 0.0).unwrap();
        let v2 = to_profile(&t2, 0.0).unwrap();
        let y = dyadic_difference(&v4, &v2).unwrap();
        let r = integral_equation_residual(&y, &v4, &v2, &p0, &ParamSet::default(), Quadrature::Trapezoid)
            .unwrap();
        assert!(r <= 1e-12);
    }

    #[test]
    fn residual_converges_with_order_two() {
        let p = pot();
        let params = ParamSet::default();
        let c4 = renorm::renorm_constants(4, &p).unwrap();
        let c2 = renorm::renorm_constants(2, &p).unwrap();
        let draw = sampling::GaussianDraw::new(4, 11).unwrap();
        let b4 = renorm::gauge_constant(&draw, 4).unwrap();
        let b2 = renorm::gauge_constant(&draw, 2).unwrap();
        let mut residuals = Vec::new();
        for dt in [2e-2, 1e-2, 5e-3] {
            let u0 = draw.state();
            let ms2 = ModeSet::new(2).unwrap();
            let u0h = crate::lattice::project(&u0, 2, Projection::Pi)
                .unwrap()
                .restrict(ms2)
                .unwrap();
            let t4 = evolve(&u0, 0.1, dt, &c4, &p, Method::Rk4).unwrap();
            let t2 = evolve(&u0h, 0.1, dt, &c2, &p, Method::Rk4).unwrap();
            let v4 = to_profile(&t4, b4).unwrap();
            let v2 = to_profile(&t2, b2).unwrap();
            let y = dyadic_difference(&v4, &v2).unwrap();
            residuals.push(
                integral_equation_residual(&y, &v4, &v2, &p, &params, Quadrature::Trapezoid)
                    .unwrap(),
            );
        }
        let r1 = residuals[0] / residuals[1];
        let r2 = residuals[1] / residuals[2];
        assert!(r1 > 3.4 && r2 > 3.4, "orders {r1} {r2} from {residuals:?}");
    }
}
