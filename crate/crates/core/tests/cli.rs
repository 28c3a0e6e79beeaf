use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deam::config::{InitializerKind, PhantomConfig, RunConfig};
use deam::geometry::SystemMatrix;
use deam::ifbp::ifbp_init;
use deam::io::TensorFile;
use deam::phantom::{material_rois, LabelImage};
use deam::pipeline::{self, Problem};
use deam::spr::roi_stats;

fn deam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deam")).args(args).output().unwrap()
}

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.geometry.nx = 16;
    c.geometry.ny = 16;
    c.geometry.pixel_size_mm = 8.0;
    c.geometry.n_views = 24;
    c.geometry.n_detectors = 32;
    c.phantom = PhantomConfig::TwoMaterialDisk;
    c.solver.n_iterations = 3;
    c
}

fn write_config(dir: &Path, name: &str, c: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, c.to_json()).unwrap();
    p
}

fn run_ok(cmd: &str, config: &Path, out: &Path) {
    let o = deam(&[cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
}

fn error_line(o: &Output) -> serde_json::Value {
    serde_json::from_str(String::from_utf8_lossy(&o.stderr).lines().last().unwrap()).unwrap()
}

#[test]
fn error_lines_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();

    let r = deam(&["simulate", "--config", "/nonexistent/config.json", "--out", o]);
    assert_eq!(r.status.code(), Some(3));
    assert_eq!(error_line(&r)["error"], "io");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let r = deam(&["simulate", "--config", bad.to_str().unwrap(), "--out", o]);
    assert_eq!(r.status.code(), Some(4));

    let mut c = small();
    c.noise.fluence_scale = 0.0;
    let cfg = write_config(dir.path(), "zero.json", &c);
    let r = deam(&["simulate", "--config", cfg.to_str().unwrap(), "--out", o]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_line(&r)["error"], "config");

    // recon before simulate: counts are missing
    let cfg = write_config(dir.path(), "ok.json", &small());
    let r = deam(&["recon", "--config", cfg.to_str().unwrap(), "--out", o]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn print_config_round_trips() {
    let o = deam(&["print-config"]);
    assert!(o.status.success());
    let c: RunConfig = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(c, RunConfig::default());
}

#[test]
fn ifbp_init_matches_library_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let c = small();
    let cfg = write_config(dir.path(), "c.json", &c);
    run_ok("simulate", &cfg, dir.path());
    run_ok("init", &cfg, dir.path());

    let d = TensorFile::read(&dir.path().join(pipeline::COUNTS)).unwrap().to_sinogram().unwrap();
    let sm = SystemMatrix::new(c.geometry.build().unwrap()).unwrap();
    let spec = c.spectrum_table(c.noise.fluence_scale).unwrap();
    let lib = ifbp_init(&d, &sm, &spec, &c.basis().unwrap(), &c.initializer.ifbp).unwrap().c;
    let expect = TensorFile::from_components(&lib, c.geometry.pixel_size_mm).unwrap();
    assert_eq!(TensorFile::read(&dir.path().join(pipeline::INIT)).unwrap(), expect);
}

#[test]
fn simulated_count_sums_within_four_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small());
    run_ok("simulate", &cfg, dir.path());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(pipeline::manifest_path(dir.path(), "simulate")).unwrap()).unwrap();
    for j in 0..2 {
        let g = m["expected_sums"][j].as_f64().unwrap();
        let d = m["measured_sums"][j].as_f64().unwrap();
        assert!((d - g).abs() < 4.0 * g.sqrt(), "spectrum {j}: {d} vs {g}");
    }
}

#[test]
fn paired_initializers_share_the_objective() {
    let dir = tempfile::tempdir().unwrap();
    let stub = dir.path().join("echo.sh");
    fs::write(&stub, "mkdir -p \"$1/response\" && cp \"$1\"/request/c1.* \"$1\"/request/c2.* \"$1/response/\"\n").unwrap();
    let a = small();
    let mut b = small();
    b.initializer.kind = InitializerKind::Cnn;
    b.initializer.command = vec!["sh".into(), stub.to_str().unwrap().into()];
    let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
    for (c, out, name) in [(&a, &out_a, "a.json"), (&b, &out_b, "b.json")] {
        let cfg = write_config(dir.path(), name, c);
        for cmd in ["simulate", "init", "recon"] {
            run_ok(cmd, &cfg, out);
        }
    }
    let hash = |out: &Path, key: &str| -> String {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(pipeline::manifest_path(out, "recon")).unwrap()).unwrap();
        m[key].as_str().unwrap().to_string()
    };
    assert_eq!(hash(&out_a, "objective_hash"), hash(&out_b, "objective_hash"));
    assert_ne!(hash(&out_a, "config_hash"), hash(&out_b, "config_hash"));
    // the echo stub returns the iFBP image, so both runs start identically
    assert_eq!(fs::read(out_a.join(pipeline::TRACE)).unwrap(), fs::read(out_b.join(pipeline::TRACE)).unwrap());
}

#[test]
fn failing_initializer_is_external_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small();
    c.initializer.kind = InitializerKind::Cnn;
    c.initializer.command = vec!["sh".into(), "-c".into(), "exit 3".into()];
    let cfg = write_config(dir.path(), "c.json", &c);
    run_ok("simulate", &cfg, dir.path());
    let r = deam(&["init", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(6));
    assert_eq!(error_line(&r)["error"], "external");
}

#[test]
fn metrics_reproduce_roi_stats() {
    let dir = tempfile::tempdir().unwrap();
    let c = small();
    let cfg = write_config(dir.path(), "c.json", &c);
    for cmd in ["simulate", "init", "recon", "metrics"] {
        run_ok(cmd, &cfg, dir.path());
    }
    let p = Problem::new(&c).unwrap();
    let est = TensorFile::read(&dir.path().join(pipeline::RECON)).unwrap().to_components().unwrap();
    let truth = TensorFile::read(&dir.path().join(pipeline::TRUTH)).unwrap().to_components().unwrap();
    let (_, _, lab) = TensorFile::read(&dir.path().join(pipeline::LABELS)).unwrap().to_image().unwrap();
    let labels = LabelImage { nx: 16, ny: 16, labels: lab.iter().map(|&v| v as u32).collect() };
    let rois = material_rois(&labels, &p.materials);

    let text = fs::read_to_string(dir.path().join(pipeline::METRICS_C[0])).unwrap();
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), rois.len());
    for (row, roi) in rows.iter().zip(&rois) {
        let s = roi_stats(&est.c[0], truth.c[0][roi.pixels[0]], &roi.pixels).unwrap();
        assert_eq!(row[0], roi.name);
        assert_eq!(row[2].parse::<f64>().unwrap(), s.bias_pct);
        assert_eq!(row[3].parse::<f64>().unwrap(), s.std_pct);
        assert_eq!(row[4].parse::<usize>().unwrap(), roi.pixels.len());
    }
}
