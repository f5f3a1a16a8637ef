//! Per-realization solvers: the low-intensity linear system, the saturated
//! nonlinear internal-state equations, and the adiabatically eliminated
//! cavity amplitude.
//!
//! For a realization of pinned positions `X_j` the saturated equations are
//!
//! ```text
//! d/dt rho_ge[j] = (i Dbar_j - |G_j|^2/kb) rho_ge[j]
//!                + (1/kb) sum_{l!=j} G_j conj(G_l) (2 rho_ee[j] - 1) rho_ge[l]
//!                - i (2 rho_ee[j] - 1) [G_j a_F + H_j]
//! d/dt rho_ee[j] = -2 Re[1/kb] |G_j|^2 rho_ee[j]
//!                - 2 Re[(1/kb) sum_{l!=j} G_j conj(G_l) rho_eg[j] rho_ge[l]]
//!                + 2 Re[i G_j rho_eg[j] a_F] - 2 Re[i conj(H_j) rho_ge[j]]
//! ```
//!
//! with `1/kb = (kappa + i Delta_c)/(kappa^2 + Delta_c^2)`. Dropping terms
//! beyond first order in the drive gives the linear system `d rho/dt =
//! M rho + F` handled by [`build_linear_system`] / [`steady_state_low_intensity`].

use crate::model::{ModelError, SystemParams};
use crate::sampling::Realization;
use crate::{C64, IM};
use faer::linalg::solvers::Solve;
use faer::Mat;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("realization has no atoms")]
    Empty,
    #[error("linear system is near-singular (cond ~ {cond:.3e}); closest pole eigenvalue {pole}")]
    NearSingular { cond: f64, pole: C64 },
    #[error("linear solve residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    Residual { residual: f64, tolerance: f64 },
    #[error("fixed step dt = {dt:.3e} violates dt <= {bound:.3e}")]
    StepSize { dt: f64, bound: f64 },
    #[error("state became non-finite at t = {t:.6e} (|state| = {norm:.3e})")]
    NonFinite { t: f64, norm: f64 },
    #[error("integration hit the step limit ({0} steps) before t_end")]
    StepLimit(usize),
    #[error("steady-state search did not converge (best residual {residual:.3e})")]
    NoConvergence { residual: f64 },
    #[error("jacobian requested at a non-steady state (residual {residual:.3e})")]
    NotSteady { residual: f64 },
    #[error("eigendecomposition failed")]
    Eig,
}

/// Internal-state variables of one realization: coherences `rho_ge[j]` and
/// excited populations `rho_ee[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomState {
    pub rho_ge: Vec<C64>,
    pub rho_ee: Vec<f64>,
}

impl AtomState {
    pub fn zero(n: usize) -> Self {
        AtomState {
            rho_ge: vec![C64::ZERO; n],
            rho_ee: vec![0.0; n],
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.rho_ge.len()
    }

    /// Mean saturation `sum_j rho_ee[j] / N`.
    pub fn mean_saturation(&self) -> f64 {
        if self.rho_ee.is_empty() {
            0.0
        } else {
            self.rho_ee.iter().sum::<f64>() / self.rho_ee.len() as f64
        }
    }

    /// Check `0 <= rho_ee <= 1` and `|rho_ge|^2 <= rho_ee (1 - rho_ee) + tol`.
    pub fn positivity_violation(&self) -> f64 {
        let mut worst = 0f64;
        for (ge, &ee) in self.rho_ge.iter().zip(&self.rho_ee) {
            worst = worst.max(-ee).max(ee - 1.0);
            worst = worst.max(ge.norm_sqr() - ee * (1.0 - ee));
        }
        worst
    }

    fn pack(&self) -> Vec<f64> {
        let n = self.n_atoms();
        let mut u = vec![0.0; 3 * n];
        for j in 0..n {
            u[j] = self.rho_ge[j].re;
            u[n + j] = self.rho_ge[j].im;
            u[2 * n + j] = self.rho_ee[j];
        }
        u
    }

    fn unpack(u: &[f64]) -> Self {
        let n = u.len() / 3;
        AtomState {
            rho_ge: (0..n).map(|j| C64::new(u[j], u[n + j])).collect(),
            rho_ee: u[2 * n..].to_vec(),
        }
    }
}

/// Per-realization coefficients with the mask and profiles already applied:
/// effective couplings `G_j` (zero when uncoupled), detunings, transverse
/// pump values and the free field.
#[derive(Debug, Clone)]
pub struct PinnedAtoms {
    pub g: Vec<C64>,
    pub delta: Vec<f64>,
    pub h: Vec<C64>,
    pub a_f: C64,
    pub recip_kb: C64,
    pub gamma_unit: f64,
    pub coupling_amp: f64,
}

impl PinnedAtoms {
    pub fn new(realization: &Realization, params: &SystemParams) -> Result<Self, DynamicsError> {
        let n = realization.n_atoms();
        if n == 0 {
            return Err(DynamicsError::Empty);
        }
        let mut g = Vec::with_capacity(n);
        let mut delta = Vec::with_capacity(n);
        let mut h = Vec::with_capacity(n);
        for (&x, &coupled) in realization.positions.iter().zip(&realization.coupled) {
            g.push(if coupled { params.coupling(x) } else { C64::ZERO });
            delta.push(params.detuning(x)?);
            h.push(if coupled || params.masked_atoms_see_pump {
                params.pump_at(x)?
            } else {
                C64::ZERO
            });
        }
        Ok(PinnedAtoms {
            g,
            delta,
            h,
            a_f: params.free_field(),
            recip_kb: params.recip_kappa_bar(),
            gamma_unit: params.gamma_unit(),
            coupling_amp: params.coupling_amp,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.g.len()
    }

    /// Combined drive `f_j = G_j a_F + H_j`.
    pub fn drive(&self, j: usize) -> C64 {
        self.g[j] * self.a_f + self.h[j]
    }

    /// The fastest frequency scale named in the step-size contract.
    fn rate_scale(&self) -> f64 {
        let n = self.n_atoms() as f64;
        let dmax = self.delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let hmax = self.h.iter().fold(0.0f64, |m, h| m.max(h.norm()));
        dmax.max(n * self.gamma_unit)
            .max(self.coupling_amp * self.a_f.norm())
            .max(hmax)
    }

    /// All frequency scales, including the cavity Lamb-shift rotation; used
    /// to pick initial step sizes.
    fn stiff_scale(&self) -> f64 {
        let gmax = self.g.iter().fold(0.0f64, |m, g| m.max(g.norm_sqr()));
        self.rate_scale()
            .max(self.n_atoms() as f64 * gmax * self.recip_kb.norm())
            .max(1e-6)
    }
}

/// Low-intensity linear system `d rho/dt = M rho + F`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub matrix: Mat<C64>,
    pub drive: Vec<C64>,
}

/// Assemble `M` and `F` for one realization:
/// `M_jj = i Dbar(X_j) - |G_j|^2/kb`, `M_jl = -G_j conj(G_l)/kb`,
/// `F_j = i [G_j a_F + H_j]`.
pub fn build_linear_system(
    realization: &Realization,
    params: &SystemParams,
) -> Result<LinearSystem, DynamicsError> {
    let atoms = PinnedAtoms::new(realization, params)?;
    Ok(build_linear_system_pinned(&atoms))
}

pub fn build_linear_system_pinned(atoms: &PinnedAtoms) -> LinearSystem {
    let n = atoms.n_atoms();
    let rk = atoms.recip_kb;
    let matrix = Mat::from_fn(n, n, |j, l| {
        if j == l {
            IM * atoms.delta[j] - atoms.g[j].norm_sqr() * rk
        } else {
            -atoms.g[j] * atoms.g[l].conj() * rk
        }
    });
    let drive = (0..n).map(|j| IM * atoms.drive(j)).collect();
    LinearSystem { matrix, drive }
}

/// Condition-number cap beyond which a solve is reported as a resonance pole.
const COND_CAP: f64 = 1e12;

/// Steady state of the low-intensity system: solves `M rho + F = 0`.
pub fn steady_state_low_intensity(system: &LinearSystem) -> Result<Vec<C64>, DynamicsError> {
    let n = system.matrix.nrows();
    let m = &system.matrix;
    let lu = m.partial_piv_lu();
    let rhs = Mat::from_fn(n, 1, |j, _| -system.drive[j]);
    let mut x = lu.solve(&rhs);
    // one step of iterative refinement on r = M x + F
    let mut r = m * &x;
    for j in 0..n {
        r[(j, 0)] += system.drive[j];
    }
    let corr = lu.solve(&r);
    for j in 0..n {
        x[(j, 0)] -= corr[(j, 0)];
    }

    // scale-aware residual and condition checks
    let norm_f = system.drive.iter().map(|f| f.norm()).fold(0.0f64, f64::max);
    let norm_x = (0..n).map(|j| x[(j, 0)].norm()).fold(0.0f64, f64::max);
    let norm_m = one_norm(m);
    let mut resid = 0.0f64;
    for j in 0..n {
        let mut acc = system.drive[j];
        for l in 0..n {
            acc += m[(j, l)] * x[(l, 0)];
        }
        resid = resid.max(acc.norm());
    }
    let cond = norm_m * inv_one_norm(&lu, n);
    if cond > COND_CAP {
        let pole = nearest_pole(m);
        return Err(DynamicsError::NearSingular { cond, pole });
    }
    let tolerance = (1e-10 * norm_f).max(64.0 * f64::EPSILON * norm_m * norm_x * n as f64);
    if resid > tolerance && norm_f > 0.0 {
        return Err(DynamicsError::Residual {
            residual: resid,
            tolerance,
        });
    }
    Ok((0..n).map(|j| x[(j, 0)]).collect())
}

fn one_norm(m: &Mat<C64>) -> f64 {
    let (r, c) = (m.nrows(), m.ncols());
    (0..c)
        .map(|l| (0..r).map(|j| m[(j, l)].norm()).sum::<f64>())
        .fold(0.0f64, f64::max)
}

/// Exact 1-norm of the inverse via one solve per unit vector; fine for the
/// small dense systems used here.
fn inv_one_norm(lu: &faer::linalg::solvers::PartialPivLu<C64>, n: usize) -> f64 {
    let eye = Mat::<C64>::identity(n, n);
    let inv = lu.solve(&eye);
    one_norm(&inv)
}

fn nearest_pole(m: &Mat<C64>) -> C64 {
    m.eigenvalues()
        .map(|vals| {
            vals.into_iter()
                .min_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap())
                .unwrap_or(C64::ZERO)
        })
        .unwrap_or(C64::ZERO)
}

/// Low-intensity steady state packaged as an [`AtomState`] (populations 0).
pub fn low_intensity_state(system: &LinearSystem) -> Result<AtomState, DynamicsError> {
    let rho = steady_state_low_intensity(system)?;
    let n = rho.len();
    Ok(AtomState {
        rho_ge: rho,
        rho_ee: vec![0.0; n],
    })
}

/// Right-hand side of the saturated equations, written term-for-term in the
/// form quoted in the module docs (the transverse drive enters the population
/// equation through `-2 Re[i conj(H) rho_ge]`, the axial drive through
/// `+2 Re[i G rho_eg a_F]`).
pub fn saturated_rhs(atoms: &PinnedAtoms, state: &AtomState, out: &mut AtomState) {
    let n = atoms.n_atoms();
    let rk = atoms.recip_kb;
    // S = sum_l conj(G_l) rho_ge[l]; the l != j sums are S minus own term
    let s: C64 = (0..n).map(|l| atoms.g[l].conj() * state.rho_ge[l]).sum();
    for j in 0..n {
        let gj = atoms.g[j];
        let ge = state.rho_ge[j];
        let eg = ge.conj();
        let w = 2.0 * state.rho_ee[j] - 1.0;
        let kj = gj * (s - gj.conj() * ge); // sum_{l!=j} G_j conj(G_l) rho_ge[l]
        out.rho_ge[j] = (IM * atoms.delta[j] - gj.norm_sqr() * rk) * ge + rk * w * kj
            - IM * w * (gj * atoms.a_f + atoms.h[j]);
        out.rho_ee[j] = -2.0 * rk.re * gj.norm_sqr() * state.rho_ee[j]
            - 2.0 * (rk * kj * eg).re
            + 2.0 * (IM * gj * eg * atoms.a_f).re
            - 2.0 * (IM * atoms.h[j].conj() * ge).re;
    }
}

fn rhs_flat(atoms: &PinnedAtoms, u: &[f64], out: &mut [f64]) {
    let state = AtomState::unpack(u);
    let mut d = AtomState::zero(state.n_atoms());
    saturated_rhs(atoms, &state, &mut d);
    let n = state.n_atoms();
    for j in 0..n {
        out[j] = d.rho_ge[j].re;
        out[n + j] = d.rho_ge[j].im;
        out[2 * n + j] = d.rho_ee[j];
    }
}

fn inf_norm(u: &[f64]) -> f64 {
    u.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Options for [`evolve_saturated`].
#[derive(Debug, Clone)]
pub struct EvolveOptions {
    pub t_end: f64,
    /// `Some(dt)` selects fixed-step RK4 (bitwise-reproducible mode); `None`
    /// selects the adaptive embedded 5(4) pair.
    pub fixed_dt: Option<f64>,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
}

impl EvolveOptions {
    pub fn to_time(t_end: f64) -> Self {
        EvolveOptions {
            t_end,
            fixed_dt: None,
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_steps: 20_000_000,
        }
    }
}

/// Result of a time evolution.
#[derive(Debug, Clone)]
pub struct Evolution {
    pub state: AtomState,
    /// `true` when `|d state/dt| < 1e-9 max(1, |state|)` at the final time.
    pub converged: bool,
    pub steps: usize,
    pub t: f64,
}

/// Integrate the saturated equations from `state` to `opts.t_end`.
pub fn evolve_saturated(
    state: &AtomState,
    realization: &Realization,
    params: &SystemParams,
    opts: &EvolveOptions,
) -> Result<Evolution, DynamicsError> {
    let atoms = PinnedAtoms::new(realization, params)?;
    evolve_saturated_pinned(state, &atoms, opts, |_, _| {})
}

/// Same as [`evolve_saturated`] with a per-accepted-step observer.
pub fn evolve_saturated_pinned(
    state: &AtomState,
    atoms: &PinnedAtoms,
    opts: &EvolveOptions,
    mut observer: impl FnMut(f64, &AtomState),
) -> Result<Evolution, DynamicsError> {
    if let Some(dt) = opts.fixed_dt {
        let bound = 0.05 / atoms.rate_scale();
        if dt > bound {
            return Err(DynamicsError::StepSize { dt, bound });
        }
        return rk4_fixed(state, atoms, dt, opts, &mut observer);
    }
    dopri_adaptive(state, atoms, opts, &mut observer)
}

fn final_evolution(
    atoms: &PinnedAtoms,
    u: Vec<f64>,
    t: f64,
    steps: usize,
) -> Evolution {
    let mut d = vec![0.0; u.len()];
    rhs_flat(atoms, &u, &mut d);
    let converged = inf_norm(&d) < 1e-9 * inf_norm(&u).max(1.0);
    Evolution {
        state: AtomState::unpack(&u),
        converged,
        steps,
        t,
    }
}

fn rk4_fixed(
    state: &AtomState,
    atoms: &PinnedAtoms,
    dt: f64,
    opts: &EvolveOptions,
    observer: &mut impl FnMut(f64, &AtomState),
) -> Result<Evolution, DynamicsError> {
    let mut u = state.pack();
    let dim = u.len();
    let (mut k1, mut k2, mut k3, mut k4) = (
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
    );
    let mut tmp = vec![0.0; dim];
    let mut t = 0.0;
    let mut steps = 0usize;
    while t < opts.t_end {
        let h = dt.min(opts.t_end - t);
        rhs_flat(atoms, &u, &mut k1);
        for i in 0..dim {
            tmp[i] = u[i] + 0.5 * h * k1[i];
        }
        rhs_flat(atoms, &tmp, &mut k2);
        for i in 0..dim {
            tmp[i] = u[i] + 0.5 * h * k2[i];
        }
        rhs_flat(atoms, &tmp, &mut k3);
        for i in 0..dim {
            tmp[i] = u[i] + h * k3[i];
        }
        rhs_flat(atoms, &tmp, &mut k4);
        for i in 0..dim {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
        steps += 1;
        if !u.iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::NonFinite { t, norm: inf_norm(&u) });
        }
        observer(t, &AtomState::unpack(&u));
        if steps >= opts.max_steps {
            return Err(DynamicsError::StepLimit(steps));
        }
    }
    Ok(final_evolution(atoms, u, t, steps))
}

// Dormand-Prince 5(4) tableau
const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn dopri_adaptive(
    state: &AtomState,
    atoms: &PinnedAtoms,
    opts: &EvolveOptions,
    observer: &mut impl FnMut(f64, &AtomState),
) -> Result<Evolution, DynamicsError> {
    let mut u = state.pack();
    let dim = u.len();
    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; dim]).collect();
    let mut tmp = vec![0.0; dim];
    let mut unew = vec![0.0; dim];
    let mut t = 0.0;
    let mut h = (0.01 / atoms.stiff_scale()).min(opts.t_end);
    let mut steps = 0usize;
    let mut prev_err: f64 = 1.0;
    rhs_flat(atoms, &u, &mut k[0]);
    while t < opts.t_end {
        h = h.min(opts.t_end - t);
        for s in 1..7 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (r, kr) in k.iter().enumerate().take(s) {
                    let a = DP_A[s - 1][r];
                    if a != 0.0 {
                        acc += a * kr[i];
                    }
                }
                tmp[i] = u[i] + h * acc;
            }
            let _ = DP_C; // stage times unused: the system is autonomous
            if s < 6 {
                rhs_flat(atoms, &tmp, &mut k[s]);
            } else {
                // stage 7 is evaluated at the 5th-order solution (FSAL)
                unew.copy_from_slice(&tmp);
                rhs_flat(atoms, &unew, &mut k[6]);
            }
        }
        // error estimate
        let mut err: f64 = 0.0;
        for i in 0..dim {
            let mut e = 0.0;
            for (r, kr) in k.iter().enumerate() {
                if DP_E[r] != 0.0 {
                    e += DP_E[r] * kr[i];
                }
            }
            e *= h;
            let sc = opts.abs_tol + opts.rel_tol * u[i].abs().max(unew[i].abs());
            err += (e / sc) * (e / sc);
        }
        err = (err / dim as f64).sqrt();
        if !err.is_finite() {
            return Err(DynamicsError::NonFinite {
                t,
                norm: inf_norm(&unew),
            });
        }
        if err <= 1.0 {
            t += h;
            u.copy_from_slice(&unew);
            k.swap(0, 6); // FSAL
            observer(t, &AtomState::unpack(&u));
            if !u.iter().all(|v| v.is_finite()) {
                return Err(DynamicsError::NonFinite { t, norm: inf_norm(&u) });
            }
            // PI controller
            let fac = 0.9 * err.max(1e-10).powf(-0.7 / 5.0) * prev_err.powf(0.4 / 5.0);
            h *= fac.clamp(0.2, 5.0);
            prev_err = err.max(1e-10);
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
        }
        steps += 1;
        if steps >= opts.max_steps {
            return Err(DynamicsError::StepLimit(steps));
        }
    }
    Ok(final_evolution(atoms, u, t, steps))
}

/// How a saturated steady state was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteadyMethod {
    Newton,
    Relaxation,
}

#[derive(Debug, Clone)]
pub struct SaturatedSteadyState {
    pub state: AtomState,
    pub residual: f64,
    pub method: SteadyMethod,
    /// Filled when Newton and time integration both converged but disagree
    /// by more than 1e-6 (candidate bistability); holds the other state.
    pub bistable_alternative: Option<AtomState>,
}

/// Real-variable Newton residual and Jacobian for the saturated equations.
/// Layout: `u = [Re rho_ge | Im rho_ge | rho_ee]`.
fn newton_jacobian(atoms: &PinnedAtoms, u: &[f64]) -> Mat<f64> {
    let n = atoms.n_atoms();
    let rk = atoms.recip_kb;
    let state = AtomState::unpack(u);
    let s: C64 = (0..n)
        .map(|l| atoms.g[l].conj() * state.rho_ge[l])
        .sum();
    let mut jac = Mat::<f64>::zeros(3 * n, 3 * n);
    for j in 0..n {
        let gj = atoms.g[j];
        let ge = state.rho_ge[j];
        let eg = ge.conj();
        let w = 2.0 * state.rho_ee[j] - 1.0;
        let fj = gj * atoms.a_f + atoms.h[j];
        let kj = gj * (s - gj.conj() * ge);
        for l in 0..n {
            // A = d rho_ge'[j] / d rho_ge[l]
            let a = if j == l {
                IM * atoms.delta[j] - gj.norm_sqr() * rk
            } else {
                rk * w * gj * atoms.g[l].conj()
            };
            jac[(j, l)] = a.re;
            jac[(j, n + l)] = -a.im;
            jac[(n + j, l)] = a.im;
            jac[(n + j, n + l)] = a.re;
            // E = d rho_ee'[j] / d rho_ge[l]
            let e = if j == l {
                -(rk * kj).conj() - IM * fj.conj()
            } else {
                -rk * gj * atoms.g[l].conj() * eg
            };
            jac[(2 * n + j, l)] = 2.0 * e.re;
            jac[(2 * n + j, n + l)] = -2.0 * e.im;
        }
        // D = d rho_ge'[j] / d rho_ee[j]
        let d = 2.0 * rk * kj - 2.0 * IM * fj;
        jac[(j, 2 * n + j)] = d.re;
        jac[(n + j, 2 * n + j)] = d.im;
        jac[(2 * n + j, 2 * n + j)] = -2.0 * rk.re * gj.norm_sqr();
    }
    jac
}

fn newton_solve(
    atoms: &PinnedAtoms,
    init: &AtomState,
    max_iters: usize,
) -> Result<(AtomState, f64), f64> {
    let n = atoms.n_atoms();
    let dim = 3 * n;
    let mut u = init.pack();
    let mut r = vec![0.0; dim];
    rhs_flat(atoms, &u, &mut r);
    let mut rnorm = inf_norm(&r);
    let tol = 1e-10;
    for _ in 0..max_iters {
        if rnorm <= tol {
            let st = AtomState::unpack(&u);
            // reject clearly unphysical roots
            if st.positivity_violation() > 1e-6 {
                return Err(rnorm);
            }
            return Ok((st, rnorm));
        }
        let jac = newton_jacobian(atoms, &u);
        let lu = jac.partial_piv_lu();
        let rhs = Mat::from_fn(dim, 1, |i, _| -r[i]);
        let step = lu.solve(&rhs);
        // backtracking on |R|
        let mut lambda = 1.0;
        let mut accepted = false;
        let mut trial = vec![0.0; dim];
        let mut rt = vec![0.0; dim];
        for _ in 0..8 {
            for i in 0..dim {
                trial[i] = u[i] + lambda * step[(i, 0)];
            }
            rhs_flat(atoms, &trial, &mut rt);
            let tn = inf_norm(&rt);
            if tn.is_finite() && tn < rnorm * (1.0 - 0.25 * lambda) {
                u.copy_from_slice(&trial);
                r.copy_from_slice(&rt);
                rnorm = tn;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            // take the smallest step anyway if it improves at all
            for i in 0..dim {
                trial[i] = u[i] + lambda * step[(i, 0)];
            }
            rhs_flat(atoms, &trial, &mut rt);
            let tn = inf_norm(&rt);
            if tn.is_finite() && tn < rnorm {
                u.copy_from_slice(&trial);
                r.copy_from_slice(&rt);
                rnorm = tn;
            } else {
                return Err(rnorm);
            }
        }
    }
    if rnorm <= 1e-10 {
        let st = AtomState::unpack(&u);
        if st.positivity_violation() > 1e-6 {
            return Err(rnorm);
        }
        Ok((st, rnorm))
    } else {
        Err(rnorm)
    }
}

/// Low-intensity solution clamped to the single-atom positivity region, the
/// Newton starting point.
fn clamped_low_intensity_guess(atoms: &PinnedAtoms) -> AtomState {
    let system = build_linear_system_pinned(atoms);
    let rho = steady_state_low_intensity(&system).unwrap_or_else(|_| vec![C64::ZERO; atoms.n_atoms()]);
    let mut state = AtomState::zero(atoms.n_atoms());
    for (j, mut ge) in rho.into_iter().enumerate() {
        if ge.norm() > 0.49 {
            ge *= 0.49 / ge.norm();
        }
        // pure-state excited population for this coherence, small-excitation branch
        let ee = 0.5 * (1.0 - (1.0 - 4.0 * ge.norm_sqr()).max(0.0).sqrt());
        state.rho_ge[j] = ge;
        state.rho_ee[j] = ee;
    }
    state
}

/// Saturated steady state: damped Newton from the clamped low-intensity
/// guess, falling back to time integration (plus a Newton polish) when
/// Newton stalls.
pub fn steady_state_saturated(
    realization: &Realization,
    params: &SystemParams,
) -> Result<SaturatedSteadyState, DynamicsError> {
    let atoms = PinnedAtoms::new(realization, params)?;
    steady_state_saturated_pinned(&atoms, false)
}

/// As [`steady_state_saturated`], optionally cross-checking Newton against
/// time integration and flagging bistability candidates.
pub fn steady_state_saturated_pinned(
    atoms: &PinnedAtoms,
    verify_by_integration: bool,
) -> Result<SaturatedSteadyState, DynamicsError> {
    let guess = clamped_low_intensity_guess(atoms);
    let newton = newton_solve(atoms, &guess, 100);
    let (state, residual, method) = match newton {
        Ok((state, residual)) => (state, residual, SteadyMethod::Newton),
        Err(_) => {
            let relaxed = relax_to_steady(atoms)?;
            match newton_solve(atoms, &relaxed, 100) {
                Ok((state, residual)) => (state, residual, SteadyMethod::Relaxation),
                Err(best) => return Err(DynamicsError::NoConvergence { residual: best }),
            }
        }
    };
    let mut out = SaturatedSteadyState {
        state,
        residual,
        method,
        bistable_alternative: None,
    };
    if verify_by_integration && method == SteadyMethod::Newton {
        let relaxed = relax_to_steady(atoms)?;
        if let Ok((alt, _)) = newton_solve(atoms, &relaxed, 100) {
            let dist = state_distance(&out.state, &alt);
            if dist > 1e-6 {
                out.bistable_alternative = Some(alt);
            }
        }
    }
    Ok(out)
}

fn state_distance(a: &AtomState, b: &AtomState) -> f64 {
    let mut d = 0f64;
    for j in 0..a.n_atoms() {
        d = d.max((a.rho_ge[j] - b.rho_ge[j]).norm());
        d = d.max((a.rho_ee[j] - b.rho_ee[j]).abs());
    }
    d
}

/// Integrate from the vacuum until the state stops moving (or give up).
fn relax_to_steady(atoms: &PinnedAtoms) -> Result<AtomState, DynamicsError> {
    let mut state = AtomState::zero(atoms.n_atoms());
    let mut span = 10.0 / atoms.stiff_scale();
    for _ in 0..8 {
        let ev = evolve_saturated_pinned(&state, atoms, &EvolveOptions::to_time(span), |_, _| {})?;
        state = ev.state;
        if ev.converged {
            return Ok(state);
        }
        span *= 10.0;
    }
    Ok(state)
}

/// Adiabatically eliminated cavity amplitude
/// `a = a_F + (i/kb) sum_j conj(G_j) rho_ge[j]`.
pub fn cavity_amplitude(
    state: &AtomState,
    realization: &Realization,
    params: &SystemParams,
) -> Result<C64, DynamicsError> {
    let atoms = PinnedAtoms::new(realization, params)?;
    Ok(cavity_amplitude_pinned(&state.rho_ge, &atoms))
}

pub fn cavity_amplitude_pinned(rho_ge: &[C64], atoms: &PinnedAtoms) -> C64 {
    let scatter: C64 = atoms
        .g
        .iter()
        .zip(rho_ge)
        .map(|(g, r)| g.conj() * r)
        .sum();
    atoms.a_f + IM * atoms.recip_kb * scatter
}
