//! I-divergence data term, edge-preserving neighborhood penalty and their
//! derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ComponentImage;
use crate::spectral::CountSinogram;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub delta: f64,
    /// mm; neighbor weights are the inverse center-to-center distance.
    /// Run configs take it from the geometry, so it is not written out.
    #[serde(skip_serializing)]
    pub pixel_size: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self::none(1.0)
    }
}

impl PenaltyConfig {
    pub fn none(pixel_size: f64) -> Self {
        Self { lambda: 0.0, delta: 1.0, pixel_size }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::Config(format!("pixel size must be > 0, got {}", self.pixel_size)));
        }
        Ok(())
    }

    pub fn edge_weight(&self) -> f64 {
        1.0 / self.pixel_size
    }

    pub fn diagonal_weight(&self) -> f64 {
        1.0 / (self.pixel_size * std::f64::consts::SQRT_2)
    }

    /// The unordered 8-neighborhood pairs, as forward offsets with weights.
    fn offsets(&self) -> [(isize, isize, f64); 4] {
        let (e, d) = (self.edge_weight(), self.diagonal_weight());
        [(1, 0, e), (0, 1, e), (1, 1, d), (-1, 1, d)]
    }

    /// `Σ_{x̃ ∈ N_x} w(x, x̃)` per pixel (smaller on the image border).
    pub fn neighbor_weight_sum(&self, nx: usize, ny: usize) -> Vec<f64> {
        let mut out = vec![0.0; nx * ny];
        for_each_pair(nx, ny, &self.offsets(), |a, b, w| {
            out[a] += w;
            out[b] += w;
        });
        out
    }
}

fn for_each_pair(nx: usize, ny: usize, offsets: &[(isize, isize, f64)], mut f: impl FnMut(usize, usize, f64)) {
    for iy in 0..ny {
        for ix in 0..nx {
            let a = iy * nx + ix;
            for &(dx, dy, w) in offsets {
                let jx = ix as isize + dx;
                let jy = iy as isize + dy;
                if jx < 0 || jx >= nx as isize || jy >= ny as isize {
                    continue;
                }
                f(a, jy as usize * nx + jx as usize, w);
            }
        }
    }
}

/// Σ_j Σ_y [d ln(d/g) - d + g], with 0 ln 0 = 0.
pub fn idivergence(d: &CountSinogram, g: &CountSinogram) -> Result<f64> {
    d.check_matches(g)?;
    let mut total = 0.0;
    for (dj, gj) in d.counts.iter().zip(&g.counts) {
        total += idivergence_slice(dj, gj)?;
    }
    Ok(total)
}

pub fn idivergence_slice(d: &[f64], g: &[f64]) -> Result<f64> {
    if d.len() != g.len() {
        return Err(Error::Dimension(format!("{} measured vs {} estimated samples", d.len(), g.len())));
    }
    let mut total = 0.0;
    for (k, (&dk, &gk)) in d.iter().zip(g).enumerate() {
        if dk == 0.0 {
            total += gk;
            continue;
        }
        if !(gk > 0.0) {
            return Err(Error::Domain(format!("estimate is {gk} where measured count is {dk} (sample {k})")));
        }
        // d ln(d/g) - d + g = d (r - ln(1 + r)), r = (g - d) / d
        let r = (gk - dk) / dk;
        total += dk * (r - r.ln_1p());
    }
    Ok(total)
}

/// Convex edge-preserving potential `δ² (|t/δ| - ln(1 + |t/δ|))`.
pub fn potential(t: f64, delta: f64) -> f64 {
    let a = (t / delta).abs();
    delta * delta * (a - a.ln_1p())
}

/// `Φ'(t) = t / (1 + |t|/δ)`
pub fn potential_derivative(t: f64, delta: f64) -> f64 {
    t / (1.0 + t.abs() / delta)
}

/// Upper bound on `Φ''`, attained at `t = 0`.
pub const POTENTIAL_CURVATURE_BOUND: f64 = 1.0;

/// `R(c) = λ Σ_i Σ_x Σ_{x̃ ∈ N_x} w(x, x̃) Φ(c_i(x) - c_i(x̃))`; every
/// unordered pair appears twice.
pub fn penalty(c: &ComponentImage, cfg: &PenaltyConfig) -> f64 {
    if cfg.lambda == 0.0 {
        return 0.0;
    }
    let offsets = cfg.offsets();
    let mut total = 0.0;
    for comp in &c.c {
        for_each_pair(c.nx, c.ny, &offsets, |a, b, w| {
            total += 2.0 * w * potential(comp[a] - comp[b], cfg.delta);
        });
    }
    cfg.lambda * total
}

pub fn penalty_gradient(c: &ComponentImage, cfg: &PenaltyConfig) -> ComponentImage {
    let mut grad = ComponentImage::zeros(c.nx, c.ny);
    if cfg.lambda == 0.0 {
        return grad;
    }
    let offsets = cfg.offsets();
    for (comp, g) in c.c.iter().zip(grad.c.iter_mut()) {
        for_each_pair(c.nx, c.ny, &offsets, |a, b, w| {
            let s = 2.0 * cfg.lambda * w * potential_derivative(comp[a] - comp[b], cfg.delta);
            g[a] += s;
            g[b] -= s;
        });
    }
    grad
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub data_term: f64,
    pub penalty: f64,
    pub total: f64,
}

pub fn objective_terms(d: &CountSinogram, g: &CountSinogram, c: &ComponentImage, cfg: &PenaltyConfig) -> Result<ObjectiveValue> {
    let data_term = idivergence(d, g)?;
    let pen = penalty(c, cfg);
    Ok(ObjectiveValue { data_term, penalty: pen, total: data_term + pen })
}

pub fn objective_total(d: &CountSinogram, g: &CountSinogram, c: &ComponentImage, cfg: &PenaltyConfig) -> Result<f64> {
    Ok(objective_terms(d, g, c, cfg)?.total)
}
