//! JSON run configuration shared by all CLI commands.
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deam::SolverConfig;
use crate::error::{Error, Result};
use crate::geometry::{FanBeamGeometry, ImageGrid};
use crate::ifbp::IfbpConfig;
use crate::phantom::{Family, MaterialTable, PhantomSpec};
use crate::spectral::{BasisAttenuation, Bowtie, SpectralWeights, SpectrumTable};
use crate::spr::SprConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub nx: usize,
    pub ny: usize,
    pub pixel_size_mm: f64,
    pub origin_mm: [f64; 2],
    pub source_to_isocenter_mm: f64,
    pub source_to_detector_mm: f64,
    pub n_views: usize,
    pub n_detectors: usize,
    /// Radians; derived from the grid when absent.
    pub detector_angular_pitch: Option<f64>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 64,
            pixel_size_mm: 3.0,
            origin_mm: [0.0, 0.0],
            source_to_isocenter_mm: 500.0,
            source_to_detector_mm: 900.0,
            n_views: 120,
            n_detectors: 96,
            detector_angular_pitch: None,
        }
    }
}

impl GeometryConfig {
    pub fn grid(&self) -> ImageGrid {
        ImageGrid { nx: self.nx, ny: self.ny, pixel_size: self.pixel_size_mm, origin: self.origin_mm }
    }

    pub fn build(&self) -> Result<FanBeamGeometry> {
        let mut g = FanBeamGeometry::full_scan(
            self.grid(),
            self.source_to_isocenter_mm,
            self.source_to_detector_mm,
            self.n_views,
            self.n_detectors,
        )?;
        if let Some(p) = self.detector_angular_pitch {
            g.detector_angular_pitch = p;
            g.validate()?;
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BowtieConfig {
    Flat,
    Synthetic,
    Csv(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectraConfig {
    /// `energy_keV,w90,w140`; shipped defaults when absent.
    pub spectra_csv: Option<PathBuf>,
    pub bowtie: BowtieConfig,
    /// Blank-scan photons per ray at unit bowtie.
    pub blank_counts: f64,
}

impl Default for SpectraConfig {
    fn default() -> Self {
        Self { spectra_csv: None, bowtie: BowtieConfig::Flat, blank_counts: 1e5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomConfig {
    FiveMaterial,
    TwoMaterialDisk,
    Random { family: Family, seed: u64 },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub seed: u64,
    /// Multiplies the blank-scan counts of the simulation.
    pub fluence_scale: f64,
    /// When false, measured data are the expected counts.
    pub poisson: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { seed: 1, fluence_scale: 1.0, poisson: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitializerKind {
    #[default]
    Ifbp,
    Cnn,
    GroundTruth,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitializerConfig {
    pub kind: InitializerKind,
    pub ifbp: IfbpConfig,
    /// External initializer argv; the exchange directory is appended.
    pub command: Vec<String>,
    /// Also write update directions at the initial image.
    pub write_update_directions: bool,
    /// Send update directions to the external initializer; zeros otherwise.
    pub send_update_directions: bool,
}

impl Default for InitializerConfig {
    fn default() -> Self {
        Self {
            kind: InitializerKind::Ifbp,
            ifbp: IfbpConfig {
                filter: crate::ifbp::FilterConfig { cutoff: 0.5, ..Default::default() },
                ..Default::default()
            },
            command: Vec::new(),
            write_update_directions: false,
            send_update_directions: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Image evaluated: `recon`, `init` or `truth`.
    pub input: Option<String>,
    /// Materials that must have an ROI; every material with nonzero truth
    /// when absent.
    pub rois: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub spectra: SpectraConfig,
    /// `energy_keV,mu1_per_mm,mu2_per_mm`; shipped defaults when absent.
    pub basis_csv: Option<PathBuf>,
    /// `name,c1,c2,rho_e_rel,I_eV,spr_ref`; shipped defaults when absent.
    pub materials_csv: Option<PathBuf>,
    pub phantom: PhantomConfig,
    pub noise: NoiseConfig,
    pub solver: SolverConfig,
    pub initializer: InitializerConfig,
    pub spr: SprConfig,
    pub metrics: MetricsConfig,
    /// Write wall-clock seconds into traces; off keeps outputs reproducible.
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::default(),
            spectra: SpectraConfig::default(),
            basis_csv: None,
            materials_csv: None,
            phantom: PhantomConfig::FiveMaterial,
            noise: NoiseConfig::default(),
            solver: SolverConfig { n_iterations: 50, ..Default::default() },
            initializer: InitializerConfig::default(),
            spr: SprConfig::default(),
            metrics: MetricsConfig::default(),
            record_wall_time: false,
        }
    }
}

/// Everything that defines the objective being minimized. Runs that differ
/// only in initializer or iteration budget share this hash.
#[derive(Serialize)]
struct ObjectiveKey<'a> {
    geometry: &'a GeometryConfig,
    spectra: &'a SpectraConfig,
    basis_csv: &'a Option<PathBuf>,
    materials_csv: &'a Option<PathBuf>,
    phantom: &'a PhantomConfig,
    noise: &'a NoiseConfig,
    penalty: &'a crate::objective::PenaltyConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config without resolving paths or validating.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.spectra.spectra_csv.as_mut() {
            fix(p);
        }
        if let BowtieConfig::Csv(p) = &mut self.spectra.bowtie {
            fix(p);
        }
        if let Some(p) = self.basis_csv.as_mut() {
            fix(p);
        }
        if let Some(p) = self.materials_csv.as_mut() {
            fix(p);
        }
        if let PhantomConfig::File(p) = &mut self.phantom {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut paths: Vec<&PathBuf> = Vec::new();
        paths.extend(self.spectra.spectra_csv.iter());
        paths.extend(self.basis_csv.iter());
        paths.extend(self.materials_csv.iter());
        if let BowtieConfig::Csv(p) = &self.spectra.bowtie {
            paths.push(p);
        }
        if let PhantomConfig::File(p) = &self.phantom {
            paths.push(p);
        }
        if let Some(p) = paths.into_iter().find(|p| !p.exists()) {
            return Err(Error::Config(format!("referenced file does not exist: {}", p.display())));
        }
        if !(self.noise.fluence_scale > 0.0 && self.noise.fluence_scale.is_finite()) {
            return Err(Error::Config(format!("fluence_scale must be > 0, got {}", self.noise.fluence_scale)));
        }
        if self.initializer.kind == InitializerKind::Cnn && self.initializer.command.is_empty() {
            return Err(Error::Config("cnn initializer needs a command".into()));
        }
        self.solver_config().validate(self.geometry.n_views)?;
        self.spr.validate()
    }

    /// Solver settings with the penalty's pixel size taken from the geometry.
    pub fn solver_config(&self) -> SolverConfig {
        let mut s = self.solver.clone();
        s.penalty.pixel_size = self.geometry.pixel_size_mm;
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn objective_hash(&self) -> String {
        let solver = self.solver_config();
        let key = ObjectiveKey {
            geometry: &self.geometry,
            spectra: &self.spectra,
            basis_csv: &self.basis_csv,
            materials_csv: &self.materials_csv,
            phantom: &self.phantom,
            noise: &self.noise,
            penalty: &solver.penalty,
        };
        sha256_hex(serde_json::to_string(&key).expect("key serializes").as_bytes())
    }

    pub fn weights(&self) -> Result<SpectralWeights> {
        match &self.spectra.spectra_csv {
            Some(p) => SpectralWeights::from_csv(p),
            None => Ok(SpectralWeights::synthetic()),
        }
    }

    /// Incident spectra with `scale` applied to the blank counts.
    pub fn spectrum_table(&self, scale: f64) -> Result<SpectrumTable> {
        let n = self.geometry.n_detectors;
        let bowtie = match &self.spectra.bowtie {
            BowtieConfig::Flat => Bowtie::Flat,
            BowtieConfig::Synthetic => Bowtie::Synthetic,
            BowtieConfig::Csv(p) => Bowtie::from_csv(p, n)?,
        };
        SpectrumTable::new(&self.weights()?, &bowtie, n, self.spectra.blank_counts * scale)
    }

    pub fn basis(&self) -> Result<BasisAttenuation> {
        match &self.basis_csv {
            Some(p) => BasisAttenuation::from_csv(p),
            None => Ok(BasisAttenuation::synthetic()),
        }
    }

    pub fn materials(&self) -> Result<MaterialTable> {
        match &self.materials_csv {
            Some(p) => MaterialTable::from_csv(p),
            None => Ok(MaterialTable::synthetic()),
        }
    }

    pub fn phantom_spec(&self) -> Result<PhantomSpec> {
        let grid = self.geometry.grid();
        Ok(match &self.phantom {
            PhantomConfig::FiveMaterial => PhantomSpec::five_material(grid),
            PhantomConfig::TwoMaterialDisk => PhantomSpec::two_material_disk(grid),
            PhantomConfig::Random { family, seed } => crate::phantom::generate_random_phantom(*family, *seed, &grid),
            PhantomConfig::File(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let spec: PhantomSpec = serde_json::from_str(&text).map_err(|e| Error::Json { path: p.clone(), source: e })?;
                if spec.grid != grid {
                    return Err(Error::Config("phantom file grid differs from the configured geometry".into()));
                }
                spec
            }
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn objective_hash_ignores_initializer_and_budget() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.initializer.kind = InitializerKind::Zeros;
        b.solver.n_iterations = 7;
        assert_eq!(a.objective_hash(), b.objective_hash());
        assert_ne!(a.config_hash(), b.config_hash());
        b.solver.penalty.lambda = 1.0;
        assert_ne!(a.objective_hash(), b.objective_hash());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = RunConfig::default();
        c.noise.fluence_scale = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.basis_csv = Some("/nonexistent/basis.csv".into());
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.initializer.kind = InitializerKind::Cnn;
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"geometri": {}}"#).is_err());
    }
}
