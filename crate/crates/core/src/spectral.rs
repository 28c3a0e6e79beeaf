//! Polychromatic dual-spectrum forward model and Poisson data simulation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SystemOperator;
use crate::image::{ComponentImage, N_BASIS};

/// Two acquisitions: index 0 is the 90 kVp scan, index 1 the 140 kVp scan.
pub const N_SPECTRA: usize = 2;

const DEFAULT_SPECTRA_CSV: &str = include_str!("../data/spectra.csv");
const DEFAULT_BASIS_CSV: &str = include_str!("../data/basis.csv");

/// Incident fluence `I0_j(y, E)`, bowtie folded into a per-detector profile.
/// The fluence does not depend on the view.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumTable {
    energies: Vec<f64>,
    n_detectors: usize,
    /// `[spectrum][detector * n_energies + bin]`
    fluence: [Vec<f64>; N_SPECTRA],
}

/// Per-detector bowtie transmission for each spectrum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bowtie {
    #[default]
    Flat,
    /// Smooth synthetic profile, strongest at the central detector.
    Synthetic,
    Profile([Vec<f64>; N_SPECTRA]),
}

impl Bowtie {
    pub fn profile(&self, n_detectors: usize) -> Result<[Vec<f64>; N_SPECTRA]> {
        match self {
            Bowtie::Flat => Ok([vec![1.0; n_detectors], vec![1.0; n_detectors]]),
            Bowtie::Synthetic => {
                let half = 0.5 * (n_detectors.max(2) as f64 - 1.0);
                let shape = |floor: f64, k: f64| -> Vec<f64> {
                    (0..n_detectors)
                        .map(|d| {
                            let u = (d as f64 - half) / half;
                            floor + (1.0 - floor) * (-k * u * u).exp()
                        })
                        .collect()
                };
                Ok([shape(0.2, 3.0), shape(0.3, 2.5)])
            }
            Bowtie::Profile(p) => {
                if p.iter().any(|s| s.len() != n_detectors) {
                    return Err(Error::Dimension(format!(
                        "bowtie profile must have {n_detectors} entries per spectrum"
                    )));
                }
                Ok(p.clone())
            }
        }
    }

    /// Bowtie CSV with header `detector,s90,s140`.
    pub fn from_csv(path: &Path, n_detectors: usize) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            detector: usize,
            s90: f64,
            s140: f64,
        }
        let rows: Vec<Row> = read_csv(path)?;
        let mut p = [vec![f64::NAN; n_detectors], vec![f64::NAN; n_detectors]];
        for r in rows {
            if r.detector >= n_detectors {
                return Err(Error::Format(format!(
                    "{}: detector {} out of range (n_detectors = {n_detectors})",
                    path.display(),
                    r.detector
                )));
            }
            p[0][r.detector] = r.s90;
            p[1][r.detector] = r.s140;
        }
        if p.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("{}: missing detector rows", path.display())));
        }
        Ok(Bowtie::Profile(p))
    }
}

pub(crate) fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv { path: path.into(), source: e })?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Csv { path: path.into(), source: e })
}

fn parse_csv_str<T: serde::de::DeserializeOwned>(name: &str, text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Csv { path: name.into(), source: e })
}

#[derive(Deserialize)]
struct SpectrumRow {
    #[serde(rename = "energy_keV")]
    energy: f64,
    w90: f64,
    w140: f64,
}

#[derive(Deserialize)]
struct BasisRow {
    #[serde(rename = "energy_keV")]
    energy: f64,
    mu1_per_mm: f64,
    mu2_per_mm: f64,
}

/// Normalized spectral weights for both tube voltages on a shared energy grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralWeights {
    pub energies: Vec<f64>,
    pub weights: [Vec<f64>; N_SPECTRA],
}

impl SpectralWeights {
    fn from_rows(rows: Vec<SpectrumRow>) -> Self {
        let energies = rows.iter().map(|r| r.energy).collect();
        let weights = [rows.iter().map(|r| r.w90).collect(), rows.iter().map(|r| r.w140).collect()];
        Self { energies, weights }
    }

    /// Spectrum CSV with header `energy_keV,w90,w140`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        Ok(Self::from_rows(read_csv(path)?))
    }

    /// The synthetic spectra shipped with the crate.
    pub fn synthetic() -> Self {
        Self::from_rows(parse_csv_str("spectra.csv", DEFAULT_SPECTRA_CSV).expect("embedded spectra parse"))
    }
}

impl SpectrumTable {
    /// Builds `I0_j(y, E) = blank_counts * w_j(E) / Σ_E w_j(E) * bowtie_j(y)`,
    /// so a detector with unit bowtie sees `blank_counts` photons per ray.
    pub fn new(weights: &SpectralWeights, bowtie: &Bowtie, n_detectors: usize, blank_counts: f64) -> Result<Self> {
        if !(blank_counts > 0.0 && blank_counts.is_finite()) {
            return Err(Error::Config(format!("blank counts per ray must be > 0, got {blank_counts}")));
        }
        let ne = weights.energies.len();
        let profile = bowtie.profile(n_detectors)?;
        let mut fluence: [Vec<f64>; N_SPECTRA] = Default::default();
        for j in 0..N_SPECTRA {
            let w = &weights.weights[j];
            if w.len() != ne {
                return Err(Error::Dimension("spectral weights and energy grid differ in length".into()));
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Value(format!("spectrum {j} has no positive weight")));
            }
            let mut f = Vec::with_capacity(n_detectors * ne);
            for &s in &profile[j] {
                for &wk in w {
                    f.push(blank_counts * wk / total * s);
                }
            }
            fluence[j] = f;
        }
        Self::from_fluence(weights.energies.clone(), n_detectors, fluence)
    }

    /// Direct construction from a `[spectrum][detector * n_energies + bin]` table.
    pub fn from_fluence(energies: Vec<f64>, n_detectors: usize, fluence: [Vec<f64>; N_SPECTRA]) -> Result<Self> {
        let ne = energies.len();
        if ne == 0 {
            return Err(Error::Value("energy grid is empty".into()));
        }
        if energies.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Value("energy bins must be strictly increasing".into()));
        }
        for (j, f) in fluence.iter().enumerate() {
            if f.len() != n_detectors * ne {
                return Err(Error::Dimension(format!("fluence table {j} has wrong size")));
            }
            if f.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Value(format!("fluence table {j} has negative or non-finite entries")));
            }
            for d in 0..n_detectors {
                if !(f[d * ne..(d + 1) * ne].iter().sum::<f64>() > 0.0) {
                    return Err(Error::Value(format!("spectrum {j} detector {d} has zero blank fluence")));
                }
            }
        }
        Ok(Self { energies, n_detectors, fluence })
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn n_energies(&self) -> usize {
        self.energies.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn fluence(&self, spectrum: usize, detector: usize) -> &[f64] {
        let ne = self.n_energies();
        &self.fluence[spectrum][detector * ne..(detector + 1) * ne]
    }

    /// `Σ_E I0_j(y, E)`, the blank-scan count.
    pub fn blank(&self, spectrum: usize, detector: usize) -> f64 {
        self.fluence(spectrum, detector).iter().sum()
    }

    /// Fluence-weighted mean energy of spectrum `j` at `detector`, keV.
    pub fn mean_energy(&self, spectrum: usize, detector: usize) -> f64 {
        let f = self.fluence(spectrum, detector);
        let total: f64 = f.iter().sum();
        f.iter().zip(&self.energies).map(|(w, e)| w * e).sum::<f64>() / total
    }
}

/// Basis attenuation curves `μ_i(E)`, 1/mm per unit coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisAttenuation {
    energies: Vec<f64>,
    mu: [Vec<f64>; N_BASIS],
}

impl BasisAttenuation {
    pub fn new(energies: Vec<f64>, mu: [Vec<f64>; N_BASIS]) -> Result<Self> {
        if energies.is_empty() || energies.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Value("basis energy bins must be non-empty and strictly increasing".into()));
        }
        for (i, m) in mu.iter().enumerate() {
            if m.len() != energies.len() {
                return Err(Error::Dimension(format!("basis {} curve length mismatch", i + 1)));
            }
            if m.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Value(format!("basis {} attenuation must be positive", i + 1)));
            }
        }
        Ok(Self { energies, mu })
    }

    fn from_rows(rows: Vec<BasisRow>) -> Result<Self> {
        Self::new(
            rows.iter().map(|r| r.energy).collect(),
            [rows.iter().map(|r| r.mu1_per_mm).collect(), rows.iter().map(|r| r.mu2_per_mm).collect()],
        )
    }

    /// Basis CSV with header `energy_keV,mu1_per_mm,mu2_per_mm`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        Self::from_rows(read_csv(path)?)
    }

    pub fn synthetic() -> Self {
        Self::from_rows(parse_csv_str("basis.csv", DEFAULT_BASIS_CSV).expect("embedded basis parse"))
            .expect("embedded basis valid")
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn mu(&self, basis: usize) -> &[f64] {
        &self.mu[basis]
    }

    pub fn max_mu(&self, basis: usize) -> f64 {
        self.mu[basis].iter().copied().fold(0.0, f64::max)
    }

    /// Linear interpolation of `μ_i` at `energy` (clamped to the table ends).
    pub fn interpolate(&self, basis: usize, energy: f64) -> f64 {
        let e = &self.energies;
        let m = &self.mu[basis];
        if energy <= e[0] {
            return m[0];
        }
        if energy >= e[e.len() - 1] {
            return m[m.len() - 1];
        }
        let k = e.partition_point(|&x| x <= energy) - 1;
        let t = (energy - e[k]) / (e[k + 1] - e[k]);
        m[k] + t * (m[k + 1] - m[k])
    }

    pub fn check_grid(&self, spec: &SpectrumTable) -> Result<()> {
        let same = self.energies.len() == spec.energies.len()
            && self.energies.iter().zip(&spec.energies).all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0));
        if same {
            Ok(())
        } else {
            Err(Error::Config("spectrum and basis tables use different energy grids".into()))
        }
    }
}

/// Photon counts per spectrum, each laid out `[view][detector]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountSinogram {
    pub n_views: usize,
    pub n_detectors: usize,
    pub counts: [Vec<f64>; N_SPECTRA],
}

impl CountSinogram {
    pub fn new(n_views: usize, n_detectors: usize, counts: [Vec<f64>; N_SPECTRA]) -> Result<Self> {
        for (j, c) in counts.iter().enumerate() {
            if c.len() != n_views * n_detectors {
                return Err(Error::Dimension(format!(
                    "count sinogram {j} has {} samples, expected {}",
                    c.len(),
                    n_views * n_detectors
                )));
            }
            if c.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Value(format!("count sinogram {j} has negative or non-finite counts")));
            }
        }
        Ok(Self { n_views, n_detectors, counts })
    }

    pub fn n_rays(&self) -> usize {
        self.n_views * self.n_detectors
    }

    pub fn check_matches(&self, other: &CountSinogram) -> Result<()> {
        if self.n_views != other.n_views || self.n_detectors != other.n_detectors {
            return Err(Error::Dimension(format!(
                "sinogram shapes differ: {}x{} vs {}x{}",
                self.n_views, self.n_detectors, other.n_views, other.n_detectors
            )));
        }
        Ok(())
    }

    /// The blank scan `Σ_E I0_j(y, E)` replicated over views.
    pub fn blank(spec: &SpectrumTable, n_views: usize) -> Self {
        let counts = std::array::from_fn(|j| {
            let row: Vec<f64> = (0..spec.n_detectors()).map(|d| spec.blank(j, d)).collect();
            row.repeat(n_views)
        });
        Self { n_views, n_detectors: spec.n_detectors(), counts }
    }
}

/// Energy-resolved expected counts `ĝ_j(y, E)` for a set of views; ray `r`
/// of the set owns `[r * n_energies .. (r + 1) * n_energies]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyResolvedCounts {
    pub views: Vec<usize>,
    pub n_detectors: usize,
    pub n_energies: usize,
    pub counts: [Vec<f64>; N_SPECTRA],
}

impl EnergyResolvedCounts {
    pub fn bins(&self, spectrum: usize, ray: usize) -> &[f64] {
        &self.counts[spectrum][ray * self.n_energies..(ray + 1) * self.n_energies]
    }

    /// `g_j(y) = Σ_E ĝ_j(y, E)` for every ray of the set.
    pub fn totals(&self, spectrum: usize) -> Vec<f64> {
        self.counts[spectrum].chunks(self.n_energies).map(|c| c.iter().sum()).collect()
    }
}

fn check_inputs<O: SystemOperator>(c: &ComponentImage, op: &O, spec: &SpectrumTable, basis: &BasisAttenuation) -> Result<()> {
    if c.len() != op.n_pixels() || c.c.iter().any(|v| v.len() != op.n_pixels()) {
        return Err(Error::Dimension(format!(
            "component image has {} pixels, operator expects {}",
            c.len(),
            op.n_pixels()
        )));
    }
    if spec.n_detectors() != op.n_detectors() {
        return Err(Error::Dimension(format!(
            "spectrum table has {} detectors, geometry has {}",
            spec.n_detectors(),
            op.n_detectors()
        )));
    }
    basis.check_grid(spec)?;
    c.check_finite()
}

/// `ĝ_j(y, E) = I0_j(y, E) exp(-Σ_i μ_i(E) Σ_x h(x, y) c_i(x))` for the rays
/// of `views`.
pub fn energy_resolved_views<O: SystemOperator>(
    c: &ComponentImage,
    op: &O,
    spec: &SpectrumTable,
    basis: &BasisAttenuation,
    views: &[usize],
) -> Result<EnergyResolvedCounts> {
    check_inputs(c, op, spec, basis)?;
    let l1 = op.forward_views(&c.c[0], views)?;
    let l2 = op.forward_views(&c.c[1], views)?;
    Ok(attenuate(&[l1, l2], views, op.n_detectors(), spec, basis))
}

/// Applies Beer-Lambert attenuation to basis line integrals.
pub(crate) fn attenuate(
    line_integrals: &[Vec<f64>; N_BASIS],
    views: &[usize],
    n_detectors: usize,
    spec: &SpectrumTable,
    basis: &BasisAttenuation,
) -> EnergyResolvedCounts {
    let ne = spec.n_energies();
    let (mu1, mu2) = (basis.mu(0), basis.mu(1));
    let counts = std::array::from_fn(|j| {
        let mut out = vec![0.0; line_integrals[0].len() * ne];
        out.par_chunks_mut(ne).enumerate().for_each(|(r, bins)| {
            let det = r % n_detectors;
            let (a, b) = (line_integrals[0][r], line_integrals[1][r]);
            for (e, (slot, &i0)) in bins.iter_mut().zip(spec.fluence(j, det)).enumerate() {
                *slot = i0 * (-(mu1[e] * a + mu2[e] * b)).exp();
            }
        });
        out
    });
    EnergyResolvedCounts { views: views.to_vec(), n_detectors, n_energies: ne, counts }
}

pub fn energy_resolved_counts<O: SystemOperator>(
    c: &ComponentImage,
    op: &O,
    spec: &SpectrumTable,
    basis: &BasisAttenuation,
) -> Result<EnergyResolvedCounts> {
    let views: Vec<usize> = (0..op.n_views()).collect();
    energy_resolved_views(c, op, spec, basis, &views)
}

/// Expected counts `g_j(y)` of the polychromatic forward model.
pub fn forward_counts<O: SystemOperator>(
    c: &ComponentImage,
    op: &O,
    spec: &SpectrumTable,
    basis: &BasisAttenuation,
) -> Result<CountSinogram> {
    let er = energy_resolved_counts(c, op, spec, basis)?;
    Ok(CountSinogram {
        n_views: op.n_views(),
        n_detectors: op.n_detectors(),
        counts: [er.totals(0), er.totals(1)],
    })
}

/// Independent Poisson draws with means `g`. Each `(spectrum, ray)` sample
/// uses its own ChaCha stream, so the result does not depend on scheduling.
pub fn simulate_poisson(g: &CountSinogram, seed: u64) -> Result<CountSinogram> {
    for (j, c) in g.counts.iter().enumerate() {
        if let Some(k) = c.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Value(format!("expected counts must be finite and >= 0 (spectrum {j}, ray {k})")));
        }
    }
    let n = g.n_rays() as u64;
    let counts = std::array::from_fn(|j| {
        g.counts[j]
            .par_iter()
            .enumerate()
            .map(|(r, &mean)| {
                if mean == 0.0 {
                    return 0.0;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(j as u64 * n + r as u64);
                Poisson::new(mean).expect("positive finite mean").sample(&mut rng)
            })
            .collect()
    });
    Ok(CountSinogram { n_views: g.n_views, n_detectors: g.n_detectors, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{FanBeamGeometry, ImageGrid, SystemMatrix};
    use rand::{Rng, SeedableRng};

    fn setup(nbins_one: bool) -> (SystemMatrix, SpectrumTable, BasisAttenuation) {
        let g = FanBeamGeometry::full_scan(ImageGrid::new(12, 12, 4.0), 400.0, 700.0, 16, 21).unwrap();
        let sm = SystemMatrix::new(g).unwrap();
        if nbins_one {
            let w = SpectralWeights { energies: vec![60.0], weights: [vec![1.0], vec![1.0]] };
            let spec = SpectrumTable::new(&w, &Bowtie::Flat, 21, 1e4).unwrap();
            let basis = BasisAttenuation::new(vec![60.0], [vec![0.02], vec![0.05]]).unwrap();
            (sm, spec, basis)
        } else {
            let spec = SpectrumTable::new(&SpectralWeights::synthetic(), &Bowtie::Synthetic, 21, 1e4).unwrap();
            (sm, spec, BasisAttenuation::synthetic())
        }
    }

    fn random_c(seed: u64, n: usize) -> ComponentImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1 = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let c2 = (0..n * n).map(|_| rng.random_range(-0.1..0.5)).collect();
        ComponentImage::new(n, n, c1, c2).unwrap()
    }

    #[test]
    fn empty_object_gives_blank_scan() {
        let (sm, spec, basis) = setup(false);
        let g = forward_counts(&ComponentImage::zeros(12, 12), &sm, &spec, &basis).unwrap();
        for j in 0..2 {
            for r in 0..sm.n_rays() {
                assert_eq!(g.counts[j][r], spec.blank(j, r % 21));
            }
        }
        let er = energy_resolved_counts(&ComponentImage::zeros(12, 12), &sm, &spec, &basis).unwrap();
        for r in 0..sm.n_rays() {
            assert_eq!(er.bins(1, r), spec.fluence(1, r % 21));
        }
    }

    #[test]
    fn single_bin_single_pixel_is_beer_lambert() {
        let (sm, spec, basis) = setup(true);
        let g = sm.geometry().clone();
        let mut c = ComponentImage::zeros(12, 12);
        let pixel = 5 * 12 + 6;
        c.c[0][pixel] = 0.8;
        c.c[1][pixel] = 0.3;
        let out = forward_counts(&c, &sm, &spec, &basis).unwrap();
        for v in 0..16 {
            for d in 0..21 {
                let row = g.trace_ray(v, d).unwrap();
                let len = row.entries.iter().find(|e| e.0 == pixel).map_or(0.0, |e| e.1);
                let expect = 1e4 * (-(0.02 * 0.8 + 0.05 * 0.3) * len).exp();
                let got = out.counts[0][v * 21 + d];
                assert!((got - expect).abs() <= 1e-12 * expect);
            }
        }
    }

    #[test]
    fn energy_sum_matches_forward_counts() {
        let (sm, spec, basis) = setup(false);
        let c = random_c(3, 12);
        let g = forward_counts(&c, &sm, &spec, &basis).unwrap();
        let er = energy_resolved_counts(&c, &sm, &spec, &basis).unwrap();
        for j in 0..2 {
            for r in 0..sm.n_rays() {
                let s: f64 = er.bins(j, r).iter().sum();
                assert!((s - g.counts[j][r]).abs() <= 1e-12 * g.counts[j][r]);
                assert!(g.counts[j][r] > 0.0 && g.counts[j][r] <= spec.blank(j, r % 21));
            }
        }
    }

    #[test]
    fn increasing_a_coefficient_decreases_counts_on_its_rays() {
        let (sm, spec, basis) = setup(false);
        let c = random_c(5, 12);
        let base = forward_counts(&c, &sm, &spec, &basis).unwrap();
        let pixel = 40;
        for i in 0..2 {
            let mut c2 = c.clone();
            c2.c[i][pixel] += 0.1;
            let g = forward_counts(&c2, &sm, &spec, &basis).unwrap();
            for r in 0..sm.n_rays() {
                let hits = sm.row(r).0.contains(&(pixel as u32));
                for j in 0..2 {
                    if hits {
                        assert!(g.counts[j][r] < base.counts[j][r]);
                    } else {
                        assert_eq!(g.counts[j][r], base.counts[j][r]);
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_shift_scales_single_energy_counts() {
        let (sm, spec, basis) = setup(true);
        let c = random_c(9, 12);
        let mut shifted = c.clone();
        let delta = 0.07;
        shifted.c[0].iter_mut().for_each(|v| *v += delta);
        let a = forward_counts(&c, &sm, &spec, &basis).unwrap();
        let b = forward_counts(&shifted, &sm, &spec, &basis).unwrap();
        let lengths = sm.ray_lengths();
        for r in 0..sm.n_rays() {
            let expect = a.counts[0][r] * (-0.02 * lengths[r] * delta).exp();
            assert!((b.counts[0][r] - expect).abs() <= 1e-12 * expect);
        }
    }

    #[test]
    fn non_finite_coefficients_rejected() {
        let (sm, spec, basis) = setup(false);
        let mut c = ComponentImage::zeros(12, 12);
        c.c[1][3] = f64::NAN;
        assert!(matches!(forward_counts(&c, &sm, &spec, &basis), Err(Error::Value(_))));
        let mut c = ComponentImage::zeros(12, 12);
        c.c[0][0] = -0.5;
        assert!(forward_counts(&c, &sm, &spec, &basis).is_ok());
    }

    #[test]
    fn poisson_zero_mean_and_determinism() {
        let g = CountSinogram::new(2, 3, [vec![0.0; 6], vec![5.0; 6]]).unwrap();
        let a = simulate_poisson(&g, 11).unwrap();
        let b = simulate_poisson(&g, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.counts[0].iter().all(|&v| v == 0.0));
        let c = simulate_poisson(&g, 12).unwrap();
        assert_ne!(a.counts[1], c.counts[1]);
        let bad = CountSinogram { n_views: 1, n_detectors: 1, counts: [vec![-1.0], vec![1.0]] };
        assert!(matches!(simulate_poisson(&bad, 0), Err(Error::Value(_))));
    }

    #[test]
    fn poisson_mean_within_clt_bound() {
        let g = CountSinogram::new(100, 100, [vec![100.0; 10_000], vec![100.0; 10_000]]).unwrap();
        let d = simulate_poisson(&g, 2024).unwrap();
        for j in 0..2 {
            let mean = d.counts[j].iter().sum::<f64>() / 1e4;
            assert!((mean - 100.0).abs() < 3.0 * (100f64.sqrt() / 100.0), "mean {mean}");
            assert!(d.counts[j].iter().all(|v| v.fract() == 0.0));
        }
    }

    #[test]
    fn tables_validate() {
        assert!(BasisAttenuation::new(vec![1.0, 2.0], [vec![1.0, 0.0], vec![1.0, 1.0]]).is_err());
        assert!(BasisAttenuation::new(vec![2.0, 1.0], [vec![1.0, 1.0], vec![1.0, 1.0]]).is_err());
        let w = SpectralWeights { energies: vec![50.0, 60.0], weights: [vec![0.0, 0.0], vec![1.0, 1.0]] };
        assert!(SpectrumTable::new(&w, &Bowtie::Flat, 4, 1e3).is_err());
        let w = SpectralWeights::synthetic();
        assert!(SpectrumTable::new(&w, &Bowtie::Flat, 4, 0.0).is_err());
        let spec = SpectrumTable::new(&w, &Bowtie::Synthetic, 9, 1e3).unwrap();
        assert!((spec.blank(0, 4) - 1e3).abs() < 1e-9);
        assert!(spec.blank(0, 0) < spec.blank(0, 4));
        assert!(spec.mean_energy(1, 4) > spec.mean_energy(0, 4));
        let b = BasisAttenuation::synthetic();
        assert!((b.interpolate(0, 60.0) - 0.0192).abs() < 1e-12);
        let mid = b.interpolate(1, 65.0);
        assert!((mid - 0.5 * (b.mu(1)[3] + b.mu(1)[4])).abs() < 1e-15);
    }
}
