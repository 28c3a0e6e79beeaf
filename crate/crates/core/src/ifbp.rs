//! Iterative filtered-backprojection basis decomposition.
//!
//! Both spectra are log-normalized and reconstructed by equiangular fan-beam
//! FBP, then split into basis coefficients by a per-pixel 2×2 solve at the
//! spectra's effective energies. Outer iterations correct beam hardening:
//! the current estimate is reprojected, each ray's basis line integrals are
//! moved by one Newton step of the polychromatic model toward the measured
//! data, and the corrected basis sinograms are reconstructed again.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FanBeamGeometry, SystemMatrix, SystemOperator};
use crate::image::{ComponentImage, N_BASIS};
use crate::spectral::{self, BasisAttenuation, CountSinogram, SpectrumTable, N_SPECTRA};

/// Counts below this are raised to it before taking logs.
pub const ZERO_COUNT_CLAMP: f64 = 0.5;

/// Largest accepted condition number of the effective-energy basis matrix.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Ramp,
    #[default]
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub kind: FilterKind,
    /// Fraction of the Nyquist frequency kept.
    pub cutoff: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { kind: FilterKind::Hann, cutoff: 1.0 }
    }
}

impl FilterConfig {
    pub fn ramp() -> Self {
        Self { kind: FilterKind::Ramp, cutoff: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) {
            return Err(Error::Config(format!("filter cutoff must be in (0, 1], got {}", self.cutoff)));
        }
        Ok(())
    }

    fn window(&self, f: f64) -> f64 {
        let fc = 0.5 * self.cutoff;
        if f > fc {
            return 0.0;
        }
        match self.kind {
            FilterKind::Ramp => 1.0,
            FilterKind::Hann => 0.5 * (1.0 + (PI * f / fc).cos()),
        }
    }
}

/// Log-normalized data, each laid out `[view][detector]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LineIntegrals {
    pub n_views: usize,
    pub n_detectors: usize,
    pub values: [Vec<f64>; N_SPECTRA],
    /// Rays whose counts were raised to [`ZERO_COUNT_CLAMP`].
    pub clamped: usize,
}

/// `L_j(y) = -ln(d_j(y) / Σ_E I0_j(y, E))`.
pub fn line_integrals(d: &CountSinogram, spec: &SpectrumTable) -> Result<LineIntegrals> {
    if d.n_detectors != spec.n_detectors() {
        return Err(Error::Dimension(format!(
            "sinogram has {} detectors, spectrum table {}",
            d.n_detectors,
            spec.n_detectors()
        )));
    }
    let nd = d.n_detectors;
    let mut clamped = 0;
    let values = std::array::from_fn(|j| {
        d.counts[j]
            .iter()
            .enumerate()
            .map(|(r, &v)| {
                if v < ZERO_COUNT_CLAMP {
                    clamped += 1;
                }
                -(v.max(ZERO_COUNT_CLAMP) / spec.blank(j, r % nd)).ln()
            })
            .collect()
    });
    if clamped > 0 {
        log::warn!("{clamped} rays had fewer than {ZERO_COUNT_CLAMP} counts and were clamped");
    }
    Ok(LineIntegrals { n_views: d.n_views, n_detectors: nd, values, clamped })
}

/// Precomputed fan-beam filter for one geometry.
pub struct FanFilter {
    n_detectors: usize,
    len: usize,
    kernel: Vec<Complex<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl FanFilter {
    pub fn new(geom: &FanBeamGeometry, filt: &FilterConfig) -> Result<Self> {
        filt.validate()?;
        let n = geom.n_detectors;
        let alpha = geom.detector_angular_pitch;
        let len = (2 * n).next_power_of_two();
        // equiangular ramp kernel g(kα) = ½ (kα / sin kα)² h(kα), scaled by α
        let mut g = vec![Complex::new(0.0, 0.0); len];
        g[0].re = 1.0 / (8.0 * alpha);
        for k in (1..n).step_by(2) {
            let v = -alpha / (2.0 * PI * PI * (k as f64 * alpha).sin().powi(2));
            g[k].re = v;
            g[len - k].re = v;
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        fwd.process(&mut g);
        for (k, v) in g.iter_mut().enumerate() {
            let f = k.min(len - k) as f64 / len as f64;
            *v *= filt.window(f) / len as f64;
        }
        Ok(Self { n_detectors: n, len, kernel: g, fwd, inv })
    }

    /// Filters one weighted projection row in place.
    fn apply(&self, row: &mut [f64]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.len];
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            b.re = v;
        }
        self.fwd.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel) {
            *b *= k;
        }
        self.inv.process(&mut buf);
        for (r, b) in row.iter_mut().zip(&buf[..self.n_detectors]) {
            *r = b.re;
        }
    }
}

/// Full-scan equiangular fan-beam FBP of a `[view][detector]` sinogram.
pub fn fbp(sino: &[f64], geom: &FanBeamGeometry, filt: &FilterConfig) -> Result<Vec<f64>> {
    fbp_with(sino, geom, &FanFilter::new(geom, filt)?)
}

pub fn fbp_with(sino: &[f64], geom: &FanBeamGeometry, filter: &FanFilter) -> Result<Vec<f64>> {
    let nd = geom.n_detectors;
    let nv = geom.n_views();
    if sino.len() != nv * nd {
        return Err(Error::Dimension(format!("sinogram has {} samples, geometry expects {}", sino.len(), nv * nd)));
    }
    let r = geom.source_to_isocenter;
    let pitch = geom.detector_angular_pitch;
    let mid = 0.5 * (nd as f64 - 1.0);
    let filtered: Vec<Vec<f64>> = sino
        .par_chunks(nd)
        .map(|row| {
            let mut w: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(k, &p)| p * r * ((k as f64 - mid) * pitch).cos())
                .collect();
            filter.apply(&mut w);
            w
        })
        .collect();
    let grid = &geom.grid;
    let dbeta = 2.0 * PI / nv as f64;
    let sources: Vec<[f64; 2]> = (0..nv).map(|v| geom.source_position(v)).collect();
    let img = (0..grid.len())
        .into_par_iter()
        .map(|x| {
            let p = grid.pixel_center(x % grid.nx, x / grid.nx);
            let mut acc = 0.0;
            for (v, q) in filtered.iter().enumerate() {
                let s = sources[v];
                let (dx, dy) = (p[0] - s[0], p[1] - s[1]);
                let l2 = dx * dx + dy * dy;
                let mut gamma = dy.atan2(dx) - (geom.view_angles[v] + PI);
                gamma = (gamma + PI).rem_euclid(2.0 * PI) - PI;
                let u = gamma / pitch + mid;
                if u < 0.0 || u > (nd - 1) as f64 {
                    continue;
                }
                let k = (u.floor() as usize).min(nd - 2);
                let t = u - k as f64;
                acc += ((1.0 - t) * q[k] + t * q[k + 1]) / l2;
            }
            acc * dbeta
        })
        .collect();
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IfbpConfig {
    pub n_outer: usize,
    pub filter: FilterConfig,
}

impl Default for IfbpConfig {
    fn default() -> Self {
        Self { n_outer: 5, filter: FilterConfig::default() }
    }
}

#[derive(Clone, Debug)]
pub struct IfbpResult {
    pub c: ComponentImage,
    /// Per outer iteration, the largest gap between the effective-energy
    /// line integrals of the corrected basis sinograms and the measured ones.
    /// Identically zero for monoenergetic spectra.
    pub correction_max: Vec<f64>,
    /// Largest measured line integral.
    pub l_max: f64,
    pub clamped: usize,
}

/// Effective-energy basis matrix `A[j][i] = μ_i(Ē_j)`, with `Ē_j` the mean
/// energy of spectrum `j` at the central detector.
pub fn effective_basis_matrix(spec: &SpectrumTable, basis: &BasisAttenuation) -> Result<[[f64; N_BASIS]; N_SPECTRA]> {
    let center = (spec.n_detectors() - 1) / 2;
    let a: [[f64; N_BASIS]; N_SPECTRA] =
        std::array::from_fn(|j| std::array::from_fn(|i| basis.interpolate(i, spec.mean_energy(j, center))));
    let cond = condition_2x2(&a);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Config(format!("effective-energy basis matrix is singular (condition {cond:.3e})")));
    }
    Ok(a)
}

/// 2-norm condition number of a 2×2 matrix.
fn condition_2x2(a: &[[f64; 2]; 2]) -> f64 {
    let fro2 = a.iter().flatten().map(|v| v * v).sum::<f64>();
    let det = (a[0][0] * a[1][1] - a[0][1] * a[1][0]).abs();
    if det == 0.0 {
        return f64::INFINITY;
    }
    let disc = (fro2 * fro2 - 4.0 * det * det).max(0.0).sqrt();
    ((fro2 + disc) / (fro2 - disc).max(f64::MIN_POSITIVE)).sqrt()
}

fn solve2(a: &[[f64; 2]; 2], b: [f64; 2]) -> [f64; 2] {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    [(a[1][1] * b[0] - a[0][1] * b[1]) / det, (a[0][0] * b[1] - a[1][0] * b[0]) / det]
}

fn solve_2x2(a: &[[f64; 2]; 2], m: [&[f64]; 2]) -> [Vec<f64>; 2] {
    let (c1, c2) = m[0].iter().zip(m[1]).map(|(&x, &y)| solve2(a, [x, y])).map(|[u, v]| (u, v)).unzip();
    [c1, c2]
}

pub fn ifbp_init(
    d: &CountSinogram,
    sm: &SystemMatrix,
    spec: &SpectrumTable,
    basis: &BasisAttenuation,
    cfg: &IfbpConfig,
) -> Result<IfbpResult> {
    if cfg.n_outer == 0 {
        return Err(Error::Config("ifbp needs at least one outer iteration".into()));
    }
    let geom = sm.geometry();
    if d.n_views != geom.n_views() || d.n_detectors != geom.n_detectors {
        return Err(Error::Dimension("measured data does not match geometry".into()));
    }
    basis.check_grid(spec)?;
    let a = effective_basis_matrix(spec, basis)?;
    let filter = FanFilter::new(geom, &cfg.filter)?;
    let li = line_integrals(d, spec)?;
    let l_max = li.values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));

    let fbp_pair = |sinos: &[Vec<f64>; N_SPECTRA]| -> Result<[Vec<f64>; 2]> {
        Ok([fbp_with(&sinos[0], geom, &filter)?, fbp_with(&sinos[1], geom, &filter)?])
    };
    let (nx, ny) = (geom.grid.nx, geom.grid.ny);

    let [m0, m1] = fbp_pair(&li.values)?;
    let [c1, c2] = solve_2x2(&a, [&m0, &m1]);
    let mut c = ComponentImage::new(nx, ny, c1, c2)?;
    let mut correction_max = vec![0.0];
    let nd = d.n_detectors;
    for _ in 1..cfg.n_outer {
        // One Newton step per ray on the basis line integrals, linearized at
        // the reprojection of the current estimate with the transmitted
        // spectrum's mean attenuation as Jacobian.
        let er = spectral::energy_resolved_counts(&c, sm, spec, basis)?;
        let p = [sm.forward_project(&c.c[0])?, sm.forward_project(&c.c[1])?];
        let mut target = [vec![0.0; d.n_rays()], vec![0.0; d.n_rays()]];
        let mut worst = 0.0f64;
        for r in 0..d.n_rays() {
            let mut jac = [[0.0; N_BASIS]; N_SPECTRA];
            let mut res = [0.0; N_SPECTRA];
            for j in 0..N_SPECTRA {
                let bins = er.bins(j, r);
                let g: f64 = bins.iter().sum();
                for (i, row) in jac[j].iter_mut().enumerate() {
                    *row = bins.iter().zip(basis.mu(i)).map(|(b, m)| b * m).sum::<f64>() / g;
                }
                res[j] = li.values[j][r] + (g / spec.blank(j, r % nd)).ln();
            }
            let [dl1, dl2] = solve2(&jac, res);
            target[0][r] = p[0][r] + dl1;
            target[1][r] = p[1][r] + dl2;
            for j in 0..N_SPECTRA {
                let lin = a[j][0] * target[0][r] + a[j][1] * target[1][r];
                worst = worst.max((lin - li.values[j][r]).abs());
            }
        }
        correction_max.push(worst);
        let [c1, c2] = fbp_pair(&target)?;
        c = ComponentImage::new(nx, ny, c1, c2)?;
    }
    Ok(IfbpResult { c, correction_max, l_max, clamped: li.clamped })
}
