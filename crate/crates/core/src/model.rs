//! Physical parameters, cavity mode functions, detuning profiles and pump
//! profiles shared by all solvers.
//!
//! Frequencies are stored in units of the cavity linewidth `kappa`, lengths in
//! units of the cavity wavelength `lambda`. The reduced dipole element is
//! absorbed into the couplings, so `coupling_amp` is `D*g0` and the transverse
//! pump amplitude is `D*h`; products like `|G|^2 / kappa_bar` then carry plain
//! frequency units.

use crate::{C64, IM};
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parameter `{name}` is not finite")]
    NonFinite { name: &'static str },
    #[error("parameter `{name}` violates `{constraint}` (got {value})")]
    Invalid {
        name: &'static str,
        constraint: &'static str,
        value: f64,
    },
    #[error("tabulated profile queried outside its sample range: x = {x}, range [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },
    #[error("tabulated profile needs at least two samples with strictly increasing x")]
    BadTable,
    #[error("lattice field lengths disagree: {sites} sites, {occupancy} occupancies, {mask} mask entries")]
    LatticeShape {
        sites: usize,
        occupancy: usize,
        mask: usize,
    },
}

/// Spatial structure of the single relevant cavity mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeKind {
    /// `G(x) = G0 sin(2 pi x / lambda)`
    FabryPerot,
    /// `G(x) = G0 exp(+i 2 pi x / lambda)`
    RingPlus,
    /// `G(x) = G0 exp(-i 2 pi x / lambda)`
    RingMinus,
}

/// Spatial profile of the atomic transition detuning `Delta_bar(x)`.
#[derive(Debug, Clone)]
pub enum DetuningProfile {
    Constant(f64),
    /// `Delta_bar(x) = base + gradient * x / lambda`
    Linear { base: f64, gradient: f64 },
    /// `Delta_bar(x) = base + step * theta(x - at)`, with `theta(0) = 1`.
    Step { base: f64, step: f64, at: f64 },
    /// Linear interpolation between samples; queries outside the sampled
    /// range are an error.
    Tabulated { xs: Vec<f64>, values: Vec<f64> },
}

impl DetuningProfile {
    /// Shift the constant offset, used by pump-frequency sweeps.
    pub fn with_base(&self, base: f64) -> Self {
        match self {
            DetuningProfile::Constant(_) => DetuningProfile::Constant(base),
            DetuningProfile::Linear { gradient, .. } => DetuningProfile::Linear {
                base,
                gradient: *gradient,
            },
            DetuningProfile::Step { step, at, .. } => DetuningProfile::Step {
                base,
                step: *step,
                at: *at,
            },
            DetuningProfile::Tabulated { xs, values } => {
                // the tabulated base is its mean; shift all samples
                let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
                DetuningProfile::Tabulated {
                    xs: xs.clone(),
                    values: values.iter().map(|v| v - mean + base).collect(),
                }
            }
        }
    }

    pub fn base(&self) -> f64 {
        match self {
            DetuningProfile::Constant(b)
            | DetuningProfile::Linear { base: b, .. }
            | DetuningProfile::Step { base: b, .. } => *b,
            DetuningProfile::Tabulated { values, .. } => {
                values.iter().sum::<f64>() / values.len().max(1) as f64
            }
        }
    }
}

/// Transverse pump profile `H(x) = D*h(x)`; `Off` is exactly zero everywhere.
#[derive(Debug, Clone)]
pub enum TransversePump {
    Off,
    Uniform(C64),
    /// Constant amplitude on the closed window `[x_lo, x_hi]`, zero outside.
    RectWindow { amplitude: C64, x_lo: f64, x_hi: f64 },
    Tabulated { xs: Vec<f64>, values: Vec<C64> },
}

impl TransversePump {
    pub fn is_off(&self) -> bool {
        matches!(self, TransversePump::Off)
    }
}

/// Cavity, pump, coupling and unit conventions. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SystemParams {
    /// Cavity field decay rate; the global frequency unit (canonically 1).
    pub kappa: f64,
    /// Cavity-pump detuning `Delta_c = Omega - omega_c`.
    pub delta_c: f64,
    /// Axial pump strength.
    pub eta: f64,
    /// Effective peak coupling `G0 = D*g0`.
    pub coupling_amp: f64,
    pub mode_kind: ModeKind,
    /// Cavity wavelength; the global length unit (canonically 1).
    pub wavelength: f64,
    /// Recoil frequency `omega_R` in units of `kappa` (e.g. 1/342 when
    /// `kappa = 342 omega_R`). Pure conversion constant for reporting.
    pub recoil_unit: f64,
    pub detuning: DetuningProfile,
    pub pump: TransversePump,
    /// Whether atoms on masked lattice sites still feel the transverse pump.
    /// The site mask is defined only against the cavity mode, so this
    /// defaults to `true`.
    pub masked_atoms_see_pump: bool,
}

impl SystemParams {
    pub fn new(
        kappa: f64,
        delta_c: f64,
        eta: f64,
        coupling_amp: f64,
        mode_kind: ModeKind,
        detuning: DetuningProfile,
        pump: TransversePump,
    ) -> Result<Self, ModelError> {
        let p = SystemParams {
            kappa,
            delta_c,
            eta,
            coupling_amp,
            mode_kind,
            wavelength: 1.0,
            recoil_unit: 1.0,
            detuning,
            pump,
            masked_atoms_see_pump: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_recoil_unit(mut self, recoil_unit: f64) -> Self {
        self.recoil_unit = recoil_unit;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("kappa", self.kappa),
            ("delta_c", self.delta_c),
            ("eta", self.eta),
            ("coupling_amp", self.coupling_amp),
            ("wavelength", self.wavelength),
            ("recoil_unit", self.recoil_unit),
        ] {
            if !v.is_finite() {
                return Err(ModelError::NonFinite { name });
            }
        }
        if self.kappa <= 0.0 {
            return Err(ModelError::Invalid {
                name: "kappa",
                constraint: "kappa > 0",
                value: self.kappa,
            });
        }
        if self.coupling_amp < 0.0 {
            return Err(ModelError::Invalid {
                name: "coupling_amp",
                constraint: "coupling_amp >= 0",
                value: self.coupling_amp,
            });
        }
        if self.wavelength <= 0.0 {
            return Err(ModelError::Invalid {
                name: "wavelength",
                constraint: "wavelength > 0",
                value: self.wavelength,
            });
        }
        Ok(())
    }

    /// `1/kappa_bar = (kappa + i Delta_c) / (kappa^2 + Delta_c^2)`.
    pub fn recip_kappa_bar(&self) -> C64 {
        reciprocal_kappa_bar(self.kappa, self.delta_c)
    }

    /// Free cavity field `a_F = i eta / kappa_bar` (the field with no atoms).
    pub fn free_field(&self) -> C64 {
        free_field(self.eta, self.kappa, self.delta_c)
    }

    /// Effective coupling `G(x)` at position `x` (in wavelengths).
    pub fn coupling(&self, x: f64) -> C64 {
        coupling_at(x, self)
    }

    /// Detuning `Delta_bar(x)`.
    pub fn detuning(&self, x: f64) -> Result<f64, ModelError> {
        detuning_at(x, &self.detuning)
    }

    /// Transverse pump `H(x)`.
    pub fn pump_at(&self, x: f64) -> Result<C64, ModelError> {
        match &self.pump {
            TransversePump::Off => Ok(C64::ZERO),
            TransversePump::Uniform(a) => Ok(*a),
            TransversePump::RectWindow { amplitude, x_lo, x_hi } => {
                Ok(if x >= *x_lo && x <= *x_hi {
                    *amplitude
                } else {
                    C64::ZERO
                })
            }
            TransversePump::Tabulated { xs, values } => {
                let (w, idx) = table_lookup(xs, x)?;
                Ok(values[idx] * (1.0 - w) + values[idx + 1] * w)
            }
        }
    }

    /// Combined drive `f(x) = G(x) a_F + H(x)` for a coupled atom.
    pub fn drive_at(&self, x: f64, coupled: bool) -> Result<C64, ModelError> {
        let g_af = if coupled {
            self.coupling(x) * self.free_field()
        } else {
            C64::ZERO
        };
        let h = if coupled || self.masked_atoms_see_pump {
            self.pump_at(x)?
        } else {
            C64::ZERO
        };
        Ok(g_af + h)
    }

    /// Peak single-atom cavity-enhanced emission rate
    /// `Gamma_u = G0^2 Re[1/kappa_bar]`, the decay-rate unit used in reports.
    pub fn gamma_unit(&self) -> f64 {
        self.coupling_amp.powi(2) * self.recip_kappa_bar().re
    }

    /// Same parameters with a different cavity detuning.
    pub fn with_delta_c(&self, delta_c: f64) -> Self {
        let mut p = self.clone();
        p.delta_c = delta_c;
        p
    }

    /// Same parameters with the detuning-profile base offset replaced.
    pub fn with_detuning_base(&self, base: f64) -> Self {
        let mut p = self.clone();
        p.detuning = self.detuning.with_base(base);
        p
    }
}

/// `1/kappa_bar` with `kappa_bar = kappa - i Delta_c`.
pub fn reciprocal_kappa_bar(kappa: f64, delta_c: f64) -> C64 {
    assert!(
        kappa.is_finite() && delta_c.is_finite() && kappa > 0.0,
        "reciprocal_kappa_bar needs finite inputs with kappa > 0"
    );
    let d = kappa * kappa + delta_c * delta_c;
    C64::new(kappa / d, delta_c / d)
}

/// Free cavity field `a_F = i eta / kappa_bar`.
pub fn free_field(eta: f64, kappa: f64, delta_c: f64) -> C64 {
    assert!(eta.is_finite(), "free_field needs finite eta");
    IM * eta * reciprocal_kappa_bar(kappa, delta_c)
}

/// Cavity mode coupling `G(x)` for the configured mode shape.
pub fn coupling_at(x: f64, params: &SystemParams) -> C64 {
    let q = TAU / params.wavelength;
    match params.mode_kind {
        ModeKind::FabryPerot => C64::new(params.coupling_amp * (q * x).sin(), 0.0),
        ModeKind::RingPlus => C64::from_polar(params.coupling_amp, q * x),
        ModeKind::RingMinus => C64::from_polar(params.coupling_amp, -q * x),
    }
}

/// Evaluate a detuning profile at `x`.
pub fn detuning_at(x: f64, profile: &DetuningProfile) -> Result<f64, ModelError> {
    match profile {
        DetuningProfile::Constant(c) => Ok(*c),
        DetuningProfile::Linear { base, gradient } => Ok(base + gradient * x),
        DetuningProfile::Step { base, step, at } => {
            Ok(if x >= *at { base + step } else { *base })
        }
        DetuningProfile::Tabulated { xs, values } => {
            let (w, idx) = table_lookup(xs, x)?;
            Ok(values[idx] * (1.0 - w) + values[idx + 1] * w)
        }
    }
}

fn table_lookup(xs: &[f64], x: f64) -> Result<(f64, usize), ModelError> {
    if xs.len() < 2 {
        return Err(ModelError::BadTable);
    }
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    if x < lo || x > hi {
        return Err(ModelError::OutOfDomain { x, lo, hi });
    }
    let idx = match xs.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
        Ok(i) => i.min(xs.len() - 2),
        Err(i) => i.saturating_sub(1).min(xs.len() - 2),
    };
    let span = xs[idx + 1] - xs[idx];
    let w = if span > 0.0 { (x - xs[idx]) / span } else { 0.0 };
    Ok((w, idx))
}

/// Optical-lattice geometry: site centers, Wannier width, per-site occupancy
/// and the cavity-coupling mask.
#[derive(Debug, Clone)]
pub struct LatticeConfig {
    /// Site centers in wavelengths.
    pub site_centers: Vec<f64>,
    /// Wannier confinement length `L_x` (the density is
    /// `exp(-(x-l)^2/L_x^2)`, i.e. a Gaussian of standard deviation
    /// `L_x/sqrt(2)`).
    pub wannier_width: f64,
    /// Atoms per site.
    pub occupancy: Vec<u32>,
    /// `true` = site interacts with the cavity mode.
    pub coupled_mask: Vec<bool>,
}

impl LatticeConfig {
    pub fn new(
        site_centers: Vec<f64>,
        wannier_width: f64,
        occupancy: Vec<u32>,
        coupled_mask: Vec<bool>,
    ) -> Result<Self, ModelError> {
        if site_centers.len() != occupancy.len() || site_centers.len() != coupled_mask.len() {
            return Err(ModelError::LatticeShape {
                sites: site_centers.len(),
                occupancy: occupancy.len(),
                mask: coupled_mask.len(),
            });
        }
        if !(wannier_width > 0.0) {
            return Err(ModelError::Invalid {
                name: "wannier_width",
                constraint: "L_x > 0",
                value: wannier_width,
            });
        }
        if site_centers.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite { name: "site_centers" });
        }
        Ok(LatticeConfig {
            site_centers,
            wannier_width,
            occupancy,
            coupled_mask,
        })
    }

    /// `n` singly-occupied, fully coupled sites on consecutive antinodes of a
    /// Fabry-Perot mode (`x = (2m+1) lambda/4`), centered about `x = 0`.
    pub fn antinode_chain(n: usize, wannier_width: f64) -> Self {
        let centers: Vec<f64> = (0..n)
            .map(|i| 0.25 + 0.5 * i as f64 - 0.25 * n as f64)
            .collect();
        LatticeConfig::new(centers, wannier_width, vec![1; n], vec![true; n])
            .expect("consistent by construction")
    }

    pub fn n_atoms(&self) -> usize {
        self.occupancy.iter().map(|&n| n as usize).sum()
    }

    pub fn n_sites(&self) -> usize {
        self.site_centers.len()
    }

    /// Total one-body density `rho_1(x) = sum_i n_i |phi_i(x)|^2`,
    /// normalized to the atom number.
    pub fn density(&self, x: f64) -> f64 {
        self.site_centers
            .iter()
            .zip(&self.occupancy)
            .map(|(&c, &n)| n as f64 * wannier_density(c, self.wannier_width, x))
            .sum()
    }
}

/// Normalized single-site linear density `|phi(x - center)|^2` of the
/// Gaussian Wannier orbital with confinement length `l_x`.
pub fn wannier_density(center: f64, l_x: f64, x: f64) -> f64 {
    let u = (x - center) / l_x;
    (-u * u).exp() / (l_x * std::f64::consts::PI.sqrt())
}
