//! Stopping-power ratio maps from basis coefficients, and ROI statistics.
//!
//! Electron density mixes linearly over the basis; the mean excitation
//! energy mixes as electron-density-weighted `ln I`. The SPR relative to
//! water is then the Bethe stopping-number ratio at one proton energy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ComponentImage, N_BASIS};

pub const ELECTRON_MASS_MEV: f64 = 0.510_998_950;
pub const PROTON_MASS_MEV: f64 = 938.272_088_16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SprConfig {
    pub proton_kinetic_energy_mev: f64,
    /// Relative electron density of each basis material at unit coefficient.
    pub basis_rho_e: [f64; N_BASIS],
    /// Mean excitation energy of each basis material, eV.
    pub basis_i_ev: [f64; N_BASIS],
    pub water_i_ev: f64,
    pub electron_mass_mev: f64,
    pub proton_mass_mev: f64,
}

impl Default for SprConfig {
    fn default() -> Self {
        Self {
            proton_kinetic_energy_mev: 175.0,
            basis_rho_e: [1.024, 1.300],
            basis_i_ev: [68.7, 120.0],
            water_i_ev: 75.0,
            electron_mass_mev: ELECTRON_MASS_MEV,
            proton_mass_mev: PROTON_MASS_MEV,
        }
    }
}

impl SprConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.proton_kinetic_energy_mev, self.water_i_ev, self.electron_mass_mev, self.proton_mass_mev]
            .into_iter()
            .chain(self.basis_i_ev)
            .all(|v| v > 0.0 && v.is_finite());
        if !positive || self.basis_rho_e.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("SPR energy, masses, densities and I-values must be > 0".into()));
        }
        Ok(())
    }

    pub fn beta2(&self) -> f64 {
        let g = self.proton_mass_mev / (self.proton_kinetic_energy_mev + self.proton_mass_mev);
        1.0 - g * g
    }

    /// `ln(2 m_e c² β² / (I (1 - β²))) - β²` for `ln I` given in ln(eV).
    pub fn stopping_number(&self, ln_i_ev: f64) -> f64 {
        let b2 = self.beta2();
        (2.0 * self.electron_mass_mev * 1e6 * b2 / (1.0 - b2)).ln() - ln_i_ev - b2
    }

    /// SPR of a single pixel.
    pub fn spr(&self, c: [f64; N_BASIS]) -> f64 {
        let rho: f64 = c.iter().zip(&self.basis_rho_e).map(|(c, r)| c * r).sum();
        if rho <= 0.0 {
            return 0.0;
        }
        let ln_i = c
            .iter()
            .zip(&self.basis_rho_e)
            .zip(&self.basis_i_ev)
            .map(|((c, r), i)| c * r * i.ln())
            .sum::<f64>()
            / rho;
        rho * self.stopping_number(ln_i) / self.stopping_number(self.water_i_ev.ln())
    }
}

pub fn spr_map(c: &ComponentImage, cfg: &SprConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    c.check_finite()?;
    Ok(c.c[0].iter().zip(&c.c[1]).map(|(&a, &b)| cfg.spr([a, b])).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiStats {
    pub bias_pct: f64,
    pub std_pct: f64,
}

/// Percentage bias and population standard deviation of `est` over `roi`,
/// relative to `truth`.
pub fn roi_stats(est: &[f64], truth: f64, roi: &[usize]) -> Result<RoiStats> {
    if roi.is_empty() {
        return Err(Error::Value("ROI is empty".into()));
    }
    if truth == 0.0 || !truth.is_finite() {
        return Err(Error::Domain(format!("ROI truth value must be finite and nonzero, got {truth}")));
    }
    if let Some(&p) = roi.iter().find(|&&p| p >= est.len()) {
        return Err(Error::Index(format!("ROI pixel {p} outside image of {} pixels", est.len())));
    }
    let n = roi.len() as f64;
    // offset by the first sample so a constant ROI has an exact mean
    let x0 = est[roi[0]];
    let mean = x0 + roi.iter().map(|&p| est[p] - x0).sum::<f64>() / n;
    let var = roi.iter().map(|&p| (est[p] - mean).powi(2)).sum::<f64>() / n;
    Ok(RoiStats { bias_pct: 100.0 * (mean - truth) / truth, std_pct: 100.0 * var.sqrt() / truth.abs() })
}
