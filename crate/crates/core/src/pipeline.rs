//! The four CLI commands. Each reads the artifacts of the previous stage from
//! the output directory and writes its own, plus a `manifest_<cmd>.json`
//! carrying the config and objective hashes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};

use crate::config::{InitializerKind, RunConfig};
use crate::deam::{self, Solver, TraceRow};
use crate::error::{Error, Result};
use crate::geometry::{FanBeamGeometry, SystemMatrix};
use crate::ifbp;
use crate::image::ComponentImage;
use crate::io::TensorFile;
use crate::phantom::{self, LabelImage, MaterialTable};
use crate::spectral::{self, BasisAttenuation, CountSinogram, SpectrumTable};
use crate::spr::{self, roi_stats};

pub const TRUTH: &str = "truth.json";
pub const LABELS: &str = "labels.json";
pub const EXPECTED: &str = "expected.json";
pub const COUNTS: &str = "counts.json";
pub const PHANTOM: &str = "phantom.json";
pub const INIT: &str = "init.json";
pub const UPDATE_DIRECTIONS: &str = "ud.json";
pub const RECON: &str = "recon.json";
pub const SPR: &str = "spr.json";
pub const TRACE: &str = "trace.csv";
pub const METRICS_SPR: &str = "metrics_spr.csv";
pub const METRICS_C: [&str; 2] = ["metrics_c1.csv", "metrics_c2.csv"];
pub const EXCHANGE_DIR: &str = "initializer";

pub const TRACE_HEADER: &str = "iter,subset_pass,data_term,penalty,total,seconds";
pub const METRICS_HEADER: &str = "roi,material,bias_pct,std_pct,n_pixels";

/// Everything the commands share, built once from a config.
pub struct Problem {
    pub config: RunConfig,
    pub system: SystemMatrix,
    /// Incident spectra at the configured fluence scale.
    pub spectrum: SpectrumTable,
    pub basis: BasisAttenuation,
    pub materials: MaterialTable,
}

impl Problem {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let geom: FanBeamGeometry = config.geometry.build()?;
        let spectrum = config.spectrum_table(config.noise.fluence_scale)?;
        let basis = config.basis()?;
        basis.check_grid(&spectrum)?;
        Ok(Self {
            config: config.clone(),
            system: SystemMatrix::new(geom)?,
            spectrum,
            basis,
            materials: config.materials()?,
        })
    }

    fn grid(&self) -> (usize, usize) {
        (self.config.geometry.nx, self.config.geometry.ny)
    }

    fn pixel_size(&self) -> f64 {
        self.config.geometry.pixel_size_mm
    }

    fn write_components(&self, c: &ComponentImage, path: &Path) -> Result<()> {
        TensorFile::from_components(c, self.pixel_size())?.write(path)
    }

    fn read_components(&self, path: &Path) -> Result<ComponentImage> {
        let c = TensorFile::read(path)?.to_components()?;
        let (nx, ny) = self.grid();
        c.check_shape(nx, ny).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(c)
    }

    fn read_counts(&self, out: &Path) -> Result<CountSinogram> {
        let path = out.join(COUNTS);
        let d = TensorFile::read(&path)?.to_sinogram()?;
        let g = &self.config.geometry;
        if d.n_views != g.n_views || d.n_detectors != g.n_detectors {
            return Err(Error::Format(format!("{}: sinogram does not match the configured geometry", path.display())));
        }
        Ok(d)
    }

    fn manifest(&self, command: &str, extra: Value) -> Value {
        let mut m = json!({
            "command": command,
            "config_hash": self.config.config_hash(),
            "objective_hash": self.config.objective_hash(),
        });
        if let (Value::Object(m), Value::Object(extra)) = (&mut m, extra) {
            m.extend(extra);
        }
        m
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Json { path: path.into(), source: e })?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("manifest_{command}.json"))
}

/// Ground truth, expected counts and measured counts.
pub fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<()> {
    let p = Problem::new(config)?;
    ensure_dir(out)?;
    let spec = config.phantom_spec()?;
    let (truth, labels) = phantom::rasterize(&spec, &p.materials)?;
    let g = spectral::forward_counts(&truth, &p.system, &p.spectrum, &p.basis)?;
    let d = if config.noise.poisson { spectral::simulate_poisson(&g, config.noise.seed)? } else { g.clone() };

    p.write_components(&truth, &out.join(TRUTH))?;
    let lab: Vec<f64> = labels.labels.iter().map(|&l| l as f64).collect();
    TensorFile::from_image(&lab, labels.nx, labels.ny, p.pixel_size())?.write(&out.join(LABELS))?;
    TensorFile::from_sinogram(&g)?.write(&out.join(EXPECTED))?;
    TensorFile::from_sinogram(&d)?.write(&out.join(COUNTS))?;
    let spec_json = serde_json::to_value(&spec).expect("phantom serializes");
    write_json(&out.join(PHANTOM), &spec_json)?;

    let sums = |s: &CountSinogram| -> Vec<f64> { s.counts.iter().map(|c| c.iter().sum()).collect() };
    let m = p.manifest(
        "simulate",
        json!({
            "noise_seed": config.noise.seed,
            "poisson": config.noise.poisson,
            "fluence_scale": config.noise.fluence_scale,
            "expected_sums": sums(&g),
            "measured_sums": sums(&d),
        }),
    );
    write_json(&manifest_path(out, "simulate"), &m)
}

/// Initial image for DEAM.
pub fn cmd_init(config: &RunConfig, out: &Path) -> Result<()> {
    let p = Problem::new(config)?;
    ensure_dir(out)?;
    let (nx, ny) = p.grid();
    let init_cfg = &config.initializer;
    let mut extra = json!({ "initializer": init_cfg.kind });
    let c = match init_cfg.kind {
        InitializerKind::Zeros => ComponentImage::zeros(nx, ny),
        InitializerKind::GroundTruth => p.read_components(&out.join(TRUTH))?,
        InitializerKind::Ifbp => {
            let d = p.read_counts(out)?;
            let r = ifbp::ifbp_init(&d, &p.system, &p.spectrum, &p.basis, &init_cfg.ifbp)?;
            extra["ifbp_correction_max"] = json!(r.correction_max);
            extra["ifbp_clamped_rays"] = json!(r.clamped);
            r.c
        }
        InitializerKind::Cnn => {
            let d = p.read_counts(out)?;
            let start = ifbp::ifbp_init(&d, &p.system, &p.spectrum, &p.basis, &init_cfg.ifbp)?.c;
            let ud = if init_cfg.send_update_directions {
                deam::update_directions_at(&start, &d, &p.system, &p.spectrum, &p.basis)?
            } else {
                [vec![0.0; nx * ny], vec![0.0; nx * ny]]
            };
            run_external_initializer(&p, out, &start, &ud)?
        }
    };
    c.check_finite()?;
    p.write_components(&c, &out.join(INIT))?;
    if init_cfg.write_update_directions {
        let d = p.read_counts(out)?;
        let ud = deam::update_directions_at(&c, &d, &p.system, &p.spectrum, &p.basis)?;
        TensorFile::from_channels(&[&ud[0], &ud[1]], nx, ny, p.pixel_size())?.write(&out.join(UPDATE_DIRECTIONS))?;
    }
    write_json(&manifest_path(out, "init"), &p.manifest("init", extra))
}

/// Writes `request/{c1,c2,ud1,ud2}.json` and a manifest under the exchange
/// directory, runs the configured command with that directory as its last
/// argument, and reads `response/{c1,c2}.json` back.
fn run_external_initializer(p: &Problem, out: &Path, c: &ComponentImage, ud: &[Vec<f64>; 2]) -> Result<ComponentImage> {
    let (nx, ny) = p.grid();
    let px = p.pixel_size();
    let exchange = out.join(EXCHANGE_DIR);
    let request = exchange.join("request");
    let response = exchange.join("response");
    if response.exists() {
        fs::remove_dir_all(&response).map_err(|e| Error::io(&response, e))?;
    }
    ensure_dir(&request)?;
    ensure_dir(&response)?;
    let inputs: [(&str, &[f64]); 4] = [("c1", &c.c[0]), ("c2", &c.c[1]), ("ud1", &ud[0]), ("ud2", &ud[1])];
    for (name, img) in inputs {
        TensorFile::from_image(img, nx, ny, px)?.write(&request.join(format!("{name}.json")))?;
    }
    let manifest = json!({
        "inputs": ["c1", "c2", "ud1", "ud2"],
        "outputs": ["c1", "c2"],
        "shape": [ny, nx],
        "pixel_size_mm": px,
        "config_hash": p.config.config_hash(),
    });
    write_json(&request.join("manifest.json"), &manifest)?;

    let argv = &p.config.initializer.command;
    let status = Command::new(&argv[0])
        .args(&argv[1..])
        .arg(&exchange)
        .status()
        .map_err(|e| Error::External(format!("cannot run '{}': {e}", argv[0])))?;
    if !status.success() {
        return Err(Error::External(format!("'{}' exited with {status}", argv[0])));
    }

    let mut channels = Vec::with_capacity(2);
    for name in ["c1", "c2"] {
        let path = response.join(format!("{name}.json"));
        let t = TensorFile::read(&path)?;
        if t.shape != [ny, nx] {
            return Err(Error::Format(format!("{}: expected shape [{ny}, {nx}], got {:?}", path.display(), t.shape)));
        }
        channels.push(t.to_image()?.2);
    }
    let c2 = channels.pop().unwrap();
    let c1 = channels.pop().unwrap();
    let c = ComponentImage::new(nx, ny, c1, c2)?;
    c.check_finite().map_err(|e| Error::Format(format!("initializer response: {e}")))?;
    Ok(c)
}

pub fn format_trace(rows: &[TraceRow], wall_time: bool) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let secs = if wall_time { r.seconds } else { 0.0 };
        s.push_str(&format!("{},{},{},{},{},{}\n", r.iter, r.subset_pass, r.data_term, r.penalty, r.total, secs));
    }
    s
}

/// DEAM from the initial image: final components, SPR map and trace.
pub fn cmd_recon(config: &RunConfig, out: &Path) -> Result<()> {
    let p = Problem::new(config)?;
    let d = p.read_counts(out)?;
    let init = p.read_components(&out.join(INIT))?;
    let solver = Solver::new(&p.system, &d, &p.spectrum, &p.basis, config.solver_config(), p.grid())?;
    let state = solver.run(init)?;
    log::info!("recon: {} iterations, objective {}", state.iteration, state.objective.total);
    p.write_components(&state.current, &out.join(RECON))?;
    let s = spr::spr_map(&state.current, &config.spr)?;
    let (nx, ny) = p.grid();
    TensorFile::from_image(&s, nx, ny, p.pixel_size())?.write(&out.join(SPR))?;
    write_text(&out.join(TRACE), &format_trace(&state.trace, config.record_wall_time))?;
    let extra = json!({
        "iterations": state.iteration,
        "subset_passes": state.subset_passes,
        "final_total": state.objective.total,
    });
    write_json(&manifest_path(out, "recon"), &p.manifest("recon", extra))
}

/// One line of a metrics CSV.
pub struct MetricsRow {
    pub roi: String,
    pub material: String,
    pub bias_pct: f64,
    pub std_pct: f64,
    pub n_pixels: usize,
}

pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.roi, r.material, r.bias_pct, r.std_pct, r.n_pixels));
    }
    s
}

/// ROI statistics of `est` against `truth`. ROIs where the truth is zero
/// (air, or a component a material lacks) have no relative error and are
/// left out.
pub fn roi_table(est: &[f64], truth: &[f64], rois: &[phantom::Roi]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for roi in rois {
        let t = truth[roi.pixels[0]];
        if t == 0.0 {
            continue;
        }
        let s = roi_stats(est, t, &roi.pixels)?;
        rows.push(MetricsRow {
            roi: roi.name.clone(),
            material: roi.material.clone(),
            bias_pct: s.bias_pct,
            std_pct: s.std_pct,
            n_pixels: roi.pixels.len(),
        });
    }
    Ok(rows)
}

/// ROI bias and std of an image (default `recon`) against the ground truth,
/// for the two components and the SPR map.
pub fn cmd_metrics(config: &RunConfig, out: &Path) -> Result<()> {
    let p = Problem::new(config)?;
    let (nx, ny) = p.grid();
    let input = config.metrics.input.as_deref().unwrap_or("recon");
    if !["recon", "init", "truth"].contains(&input) {
        return Err(Error::Config(format!("metrics input must be recon, init or truth, got '{input}'")));
    }
    let est = p.read_components(&out.join(format!("{input}.json")))?;
    let truth = p.read_components(&out.join(TRUTH))?;
    let lab_path = out.join(LABELS);
    let (lx, ly, lab) = TensorFile::read(&lab_path)?.to_image()?;
    if (lx, ly) != (nx, ny) {
        return Err(Error::Format(format!("{}: label image does not match the grid", lab_path.display())));
    }
    let labels = LabelImage { nx, ny, labels: lab.iter().map(|&v| v as u32).collect() };
    let rois = phantom::material_rois(&labels, &p.materials);
    if let Some(wanted) = &config.metrics.rois {
        if let Some(m) = wanted.iter().find(|m| !rois.iter().any(|r| &r.material == *m)) {
            return Err(Error::Config(format!("no ROI for material '{m}'")));
        }
    }
    let rois: Vec<_> = match &config.metrics.rois {
        Some(wanted) => rois.into_iter().filter(|r| wanted.contains(&r.material)).collect(),
        None => rois,
    };
    if rois.is_empty() {
        return Err(Error::Config("phantom has no ROI large enough to evaluate".into()));
    }

    for (i, name) in METRICS_C.iter().enumerate() {
        write_text(&out.join(name), &format_metrics(&roi_table(&est.c[i], &truth.c[i], &rois)?))?;
    }
    let spr_est = spr::spr_map(&est, &config.spr)?;
    let spr_truth = spr::spr_map(&truth, &config.spr)?;
    write_text(&out.join(METRICS_SPR), &format_metrics(&roi_table(&spr_est, &spr_truth, &rois)?))?;
    let extra = json!({ "input": input, "rois": rois.iter().map(|r| &r.name).collect::<Vec<_>>() });
    write_json(&manifest_path(out, "metrics"), &p.manifest("metrics", extra))
}

/// simulate, init, recon and metrics in order.
pub fn run_all(config: &RunConfig, out: &Path) -> Result<()> {
    cmd_simulate(config, out)?;
    cmd_init(config, out)?;
    cmd_recon(config, out)?;
    cmd_metrics(config, out)
}
