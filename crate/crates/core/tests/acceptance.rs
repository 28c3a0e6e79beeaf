//! Acceptance suite A1-A9. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fail.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deam::config::{InitializerKind, PhantomConfig, RunConfig};
use deam::deam::{Solver, SolverConfig, SolverState};
use deam::geometry::{FanBeamGeometry, ImageGrid, SystemMatrix, SystemOperator};
use deam::ifbp::{ifbp_init, FilterConfig, FilterKind, IfbpConfig};
use deam::image::ComponentImage;
use deam::io::TensorFile;
use deam::objective::{idivergence_slice, penalty, penalty_gradient, potential, PenaltyConfig};
use deam::phantom::{material_rois, rasterize, LabelImage, MaterialTable, PhantomSpec, ROI_EROSION};
use deam::spectral::{forward_counts, simulate_poisson, BasisAttenuation, Bowtie, CountSinogram, SpectralWeights, SpectrumTable};
use deam::spr::{spr_map, SprConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn a1_adjoint() -> Outcome {
    let t = Instant::now();
    let grid = ImageGrid::new(64, 64, 3.0);
    let sm = SystemMatrix::new(FanBeamGeometry::full_scan(grid, 500.0, 900.0, 90, 128).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let u: Vec<f64> = (0..sm.n_pixels()).map(|_| rng.random::<f64>()).collect();
        let v: Vec<f64> = (0..sm.n_rays()).map(|_| rng.random::<f64>()).collect();
        let lhs = dot(&sm.forward_project(&u).unwrap(), &v);
        let rhs = dot(&u, &sm.back_project(&v).unwrap());
        worst = worst.max(rel(rhs, lhs));
    }
    let secs = t.elapsed().as_secs_f64();
    check(worst < 1e-6 && secs < 30.0, format!("max rel err {worst:.2e} over 100 pairs, {secs:.1} s"))
}

fn a2_objective() -> Outcome {
    let mut errs = Vec::new();
    let mut note = |name: &str, got: f64, want: f64| {
        let e = if want == 0.0 { got.abs() } else { rel(got, want) };
        if e >= 1e-12 {
            errs.push(format!("{name}: {got} vs {want}"));
        }
    };
    note("I(d=g)", idivergence_slice(&[3.5, 7.0], &[3.5, 7.0]).unwrap(), 0.0);
    note("I(2|1)", idivergence_slice(&[2.0], &[1.0]).unwrap(), 2.0 * 2f64.ln() - 1.0);
    note("I(0|1)", idivergence_slice(&[0.0], &[1.0]).unwrap(), 1.0);
    let delta = 0.7;
    note("phi(delta)", potential(delta, delta), delta * delta * (1.0 - 2f64.ln()));
    let (lambda, px, a) = (0.3, 2.0, 1.3);
    let cfg = PenaltyConfig { lambda, delta, pixel_size: px };
    let two = ComponentImage::new(2, 1, vec![0.0, a], vec![0.0, 0.0]).unwrap();
    note("R(0,a)", penalty(&two, &cfg), lambda * (1.0 / px) * potential(a, delta) * 2.0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut img = || -> Vec<f64> { (0..64).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let c = ComponentImage::new(8, 8, img(), img()).unwrap();
    let cfg = PenaltyConfig { lambda: 0.8, delta: 0.4, pixel_size: 1.0 };
    let g = penalty_gradient(&c, &cfg);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..2 {
        let scale = g.c[i].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for x in 0..64 {
            let (mut up, mut dn) = (c.clone(), c.clone());
            up.c[i][x] += h;
            dn.c[i][x] -= h;
            let fd = (penalty(&up, &cfg) - penalty(&dn, &cfg)) / (2.0 * h);
            worst = worst.max((g.c[i][x] - fd).abs() / g.c[i][x].abs().max(1e-3 * scale));
        }
    }
    if worst >= 1e-5 {
        errs.push(format!("gradient vs central differences {worst:.2e}"));
    }
    check(errs.is_empty(), if errs.is_empty() { format!("oracles to 1e-12, gradient fd err {worst:.2e}") } else { errs.join("; ") })
}

struct Problem {
    sm: SystemMatrix,
    spec: SpectrumTable,
    basis: BasisAttenuation,
    truth: ComponentImage,
    labels: LabelImage,
    expected: CountSinogram,
}

fn problem(phantom: PhantomSpec, views: usize, dets: usize, blank: f64) -> Problem {
    let sm = SystemMatrix::new(FanBeamGeometry::full_scan(phantom.grid.clone(), 500.0, 900.0, views, dets).unwrap()).unwrap();
    let spec = SpectrumTable::new(&SpectralWeights::synthetic(), &Bowtie::Flat, dets, blank).unwrap();
    let basis = BasisAttenuation::synthetic();
    let (truth, labels) = rasterize(&phantom, &MaterialTable::synthetic()).unwrap();
    let expected = forward_counts(&truth, &sm, &spec, &basis).unwrap();
    Problem { sm, spec, basis, truth, labels, expected }
}

/// 32x32 two-material disk at 6 mm, 90 views x 64 detectors, 1e5 counts.
fn disk_problem() -> (Problem, CountSinogram) {
    let p = problem(PhantomSpec::two_material_disk(ImageGrid::new(32, 32, 6.0)), 90, 64, 1e5);
    let d = simulate_poisson(&p.expected, 7).unwrap();
    (p, d)
}

fn smooth_ifbp() -> IfbpConfig {
    IfbpConfig { n_outer: 5, filter: FilterConfig { kind: FilterKind::Hann, cutoff: 0.5 } }
}

fn a3_fixed_point() -> Outcome {
    let p = problem(PhantomSpec::five_material(ImageGrid::new(32, 32, 6.0)), 90, 64, 1e5);
    let cfg = SolverConfig { n_iterations: 1, penalty: PenaltyConfig::none(6.0), ..Default::default() };
    let solver = Solver::new(&p.sm, &p.expected, &p.spec, &p.basis, cfg, (32, 32)).unwrap();
    let mut state: SolverState = solver.start(p.truth.clone()).unwrap();
    solver.iterate(&mut state).unwrap();
    let dc = state.current.max_abs_diff(&p.truth);
    check(dc < 1e-10, format!("max |dc| = {dc:.2e} after one iteration"))
}

fn monotone(totals: &[f64]) -> (bool, f64) {
    let mut worst = f64::NEG_INFINITY;
    for w in totals.windows(2) {
        worst = worst.max((w[1] - w[0]) / w[0].abs());
    }
    (worst <= 1e-9, worst)
}

fn a4_monotone() -> Outcome {
    let t = Instant::now();
    let (p, d) = disk_problem();
    let init = ifbp_init(&d, &p.sm, &p.spec, &p.basis, &smooth_ifbp()).unwrap().c;
    let cfg = SolverConfig { n_iterations: 50, n_subsets: 1, z_scale: 1.0, penalty: PenaltyConfig::none(6.0), ..Default::default() };
    let state = Solver::new(&p.sm, &d, &p.spec, &p.basis, cfg, (32, 32)).unwrap().run(init).unwrap();
    let totals: Vec<f64> = state.trace.iter().map(|r| r.total).collect();
    let (ok, worst) = monotone(&totals);
    let secs = t.elapsed().as_secs_f64();
    check(
        ok && totals.len() == 51 && secs < 300.0,
        format!(
            "{} rows, objective {:.1} -> {:.1}, max rel increase {worst:.2e}, {secs:.1} s",
            totals.len(),
            totals[0],
            totals[totals.len() - 1]
        ),
    )
}

fn interior(labels: &LabelImage) -> Vec<usize> {
    labels.present().into_iter().flat_map(|l| labels.eroded(l, ROI_EROSION)).collect()
}

fn a5_convergence() -> Outcome {
    let (p, d) = disk_problem();
    let init = ifbp_init(&d, &p.sm, &p.spec, &p.basis, &smooth_ifbp()).unwrap().c;
    let cfg = SolverConfig { n_iterations: 500, penalty: PenaltyConfig::none(6.0), ..Default::default() };
    let state = Solver::new(&p.sm, &d, &p.spec, &p.basis, cfg, (32, 32)).unwrap().run(init).unwrap();
    let px = interior(&p.labels);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for i in 0..2 {
        let t = &p.truth.c[i];
        let range = t.iter().cloned().fold(f64::MIN, f64::max) - t.iter().cloned().fold(f64::MAX, f64::min);
        let mse = px.iter().map(|&x| (state.current.c[i][x] - t[x]).powi(2)).sum::<f64>() / px.len() as f64;
        let r = 100.0 * mse.sqrt() / range;
        worst = worst.max(r);
        parts.push(format!("c{} {r:.2}%", i + 1));
    }
    check(worst <= 2.0, format!("interior RMSE / range: {} (limit 2%)", parts.join(", ")))
}

fn a6_ifbp() -> Outcome {
    let p = problem(PhantomSpec::five_material(ImageGrid::new(64, 64, 3.0)), 120, 96, 1e5);
    let table = MaterialTable::synthetic();
    let rois = material_rois(&p.labels, &table);
    let clean = ifbp_init(&p.expected, &p.sm, &p.spec, &p.basis, &smooth_ifbp()).unwrap().c;
    let mean = |img: &[f64], px: &[usize]| px.iter().map(|&x| img[x]).sum::<f64>() / px.len() as f64;
    let mut worst = (0.0f64, String::new());
    for roi in &rois {
        for i in 0..2 {
            let truth = p.truth.c[i][roi.pixels[0]];
            let b = 100.0 * (mean(&clean.c[i], &roi.pixels) - truth).abs() / truth.abs();
            if b > worst.0 {
                worst = (b, format!("{} c{}", roi.material, i + 1));
            }
        }
    }

    let water = rois.iter().find(|r| r.material == "water").expect("water ROI");
    let mut stds = Vec::new();
    for scale in [10.0, 1.0, 0.1] {
        let spec = SpectrumTable::new(&SpectralWeights::synthetic(), &Bowtie::Flat, 96, 1e5 * scale).unwrap();
        let g = forward_counts(&p.truth, &p.sm, &spec, &p.basis).unwrap();
        let d = simulate_poisson(&g, 11).unwrap();
        let c = ifbp_init(&d, &p.sm, &spec, &p.basis, &smooth_ifbp()).unwrap().c;
        let m = mean(&c.c[0], &water.pixels);
        let var = water.pixels.iter().map(|&x| (c.c[0][x] - m).powi(2)).sum::<f64>() / water.pixels.len() as f64;
        stds.push(var.sqrt());
    }
    let increasing = stds.windows(2).all(|w| w[1] > w[0]);
    check(
        worst.0 < 2.0 && increasing,
        format!(
            "max |bias| {:.2}% ({}) over {} ROIs; water c1 std at fluence x10, x1, x0.1: {:.4} {:.4} {:.4}",
            worst.0,
            worst.1,
            rois.len(),
            stds[0],
            stds[1],
            stds[2]
        ),
    )
}

fn a7_spr() -> Outcome {
    let cfg = SprConfig::default();
    let w = MaterialTable::synthetic().get("water").unwrap().clone();
    let water = cfg.spr([w.c1, w.c2]);
    let air = spr_map(&ComponentImage::zeros(4, 4), &cfg).unwrap();
    let gamma = (175.0 + 938.27208816) / 938.27208816;
    let b2 = 1.0 - 1.0 / (gamma * gamma);
    let bethe = |i_ev: f64| (2.0 * 0.51099895e6 * b2 / (i_ev * (1.0 - b2))).ln() - b2;
    let mut worst = 0.0f64;
    for i in 0..2 {
        let mut c = [0.0; 2];
        c[i] = 1.0;
        worst = worst.max((cfg.spr(c) - cfg.basis_rho_e[i] * bethe(cfg.basis_i_ev[i]) / bethe(75.0)).abs());
    }
    let ok = (water - 1.0).abs() <= 1e-12 && air.iter().all(|&v| v == 0.0) && worst <= 1e-10;
    check(ok, format!("water {water:.15}, air max {:.1e}, pure-basis err {worst:.2e}", air.iter().fold(0.0f64, |m, v| m.max(v.abs()))))
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_deam")).args(args).output().expect("run deam binary")
}

fn a8_determinism() -> Outcome {
    let t = Instant::now();
    let config = repo_root().join("configs/default.json");
    let config = config.to_str().unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        for cmd in ["simulate", "init", "recon", "metrics"] {
            let o = cli(&[cmd, "--config", config, "--out", dir.path().to_str().unwrap()]);
            if !o.status.success() {
                return Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&o.stderr)));
            }
        }
    }
    let mut names: Vec<_> = fs::read_dir(dirs[0].path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut differ = Vec::new();
    for n in &names {
        if fs::read(dirs[0].path().join(n)).unwrap() != fs::read(dirs[1].path().join(n)).ok().unwrap_or_default() {
            differ.push(n.to_string_lossy().into_owned());
        }
    }
    let has = |ext: &str| names.iter().any(|n| n.to_string_lossy().ends_with(ext));
    let secs = t.elapsed().as_secs_f64();
    check(
        differ.is_empty() && has(".csv") && has(".raw") && secs < 600.0,
        format!("{} files compared, {} differ {:?}, {secs:.1} s", names.len(), differ.len(), differ),
    )
}

fn small_config(dir: &Path, command: &Path) -> PathBuf {
    let mut c = RunConfig::default();
    c.geometry.nx = 16;
    c.geometry.ny = 16;
    c.geometry.pixel_size_mm = 8.0;
    c.geometry.n_views = 24;
    c.geometry.n_detectors = 32;
    c.phantom = PhantomConfig::TwoMaterialDisk;
    c.solver.n_iterations = 2;
    c.initializer.kind = InitializerKind::Cnn;
    c.initializer.command = vec!["sh".into(), command.to_str().unwrap().into()];
    let path = dir.join("config.json");
    fs::write(&path, c.to_json()).unwrap();
    path
}

const ECHO_STUB: &str = r#"set -e
mkdir -p "$1/response"
for k in c1 c2; do
  cp "$1/request/$k.json" "$1/response/$k.json"
  cp "$1/request/$k.raw" "$1/response/$k.raw"
done
"#;

/// Answers with one correct channel and one shaped `[1, 256]` instead of
/// `[16, 16]`; the payload size is right so only the shape is wrong.
const MALFORMED_STUB: &str = r#"set -e
mkdir -p "$1/response"
cp "$1/request/c1.json" "$1/response/c1.json"
cp "$1/request/c1.raw" "$1/response/c1.raw"
cp "$1/request/c2.raw" "$1/response/c2.raw"
printf '{"shape":[1,256],"dtype":"float32_le","axes":["a","b"],"spacing_mm":[0,0],"payload":"c2.raw"}' > "$1/response/c2.json"
"#;

fn a9_external_initializer() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let echo = dir.path().join("echo.sh");
    fs::write(&echo, ECHO_STUB).unwrap();
    let config = small_config(dir.path(), &echo);
    let out = dir.path().join("out");
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    for cmd in ["simulate", "init", "recon"] {
        let r = cli(&[cmd, "--config", c, "--out", o]);
        if !r.status.success() {
            return Err(format!("echo stub: {cmd} failed: {}", String::from_utf8_lossy(&r.stderr)));
        }
    }
    let req = out.join("initializer/request");
    let shapes: Vec<Vec<usize>> =
        ["c1", "c2", "ud1", "ud2"].iter().map(|k| TensorFile::read(&req.join(format!("{k}.json"))).unwrap().shape).collect();
    let init = TensorFile::read(&out.join("init.json")).unwrap();
    let sent: Vec<f32> = ["c1", "c2"].iter().flat_map(|k| TensorFile::read(&req.join(format!("{k}.json"))).unwrap().data).collect();
    let echo_ok = shapes.iter().all(|s| s == &[16, 16]) && init.shape == [2, 16, 16] && init.data == sent;

    let bad = dir.path().join("bad.sh");
    fs::write(&bad, MALFORMED_STUB).unwrap();
    let config = small_config(dir.path(), &bad);
    let r = cli(&["init", "--config", config.to_str().unwrap(), "--out", o]);
    let stderr = String::from_utf8_lossy(&r.stderr);
    let line: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap_or("")).unwrap_or_default();
    let format_err = r.status.code() == Some(4) && line["error"] == "format";
    check(
        echo_ok && format_err,
        format!("echo stub round trip {echo_ok}; malformed response exit {:?}, error line {}", r.status.code(), line),
    )
}

fn main() {
    // libtest flags such as --test-threads may be passed; a name filter
    // selects criteria by prefix.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, &str, fn() -> Outcome); 9] = [
        ("A1", "adjoint identity", a1_adjoint),
        ("A2", "objective correctness", a2_objective),
        ("A3", "fixed point", a3_fixed_point),
        ("A4", "monotone descent", a4_monotone),
        ("A5", "convergence quality", a5_convergence),
        ("A6", "iFBP baseline", a6_ifbp),
        ("A7", "SPR exactness", a7_spr),
        ("A8", "pipeline determinism", a8_determinism),
        ("A9", "external-initializer protocol", a9_external_initializer),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if filter.as_deref().is_some_and(|p| !id.starts_with(p)) {
            continue;
        }
        let r = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match r {
            Ok(d) => println!("{id} PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("{id} FAIL {name}: {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
