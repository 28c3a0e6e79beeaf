//! Dual-energy alternating minimization.
//!
//! Each sub-iteration forms the basis-weighted backprojections of the
//! data-scaled and model energy-resolved counts,
//!
//! ```text
//! q_ij(x) = Σ_y h(x,y) Σ_E μ_i(E) ĝ_j(y,E)
//! p_ij(x) = Σ_y h(x,y) Σ_E μ_i(E) ĝ_j(y,E) d_j(y) / g_j(y)
//! ```
//!
//! takes the update direction `ud_i = ln(Σ_j p_ij / Σ_j q_ij)` and moves
//! `c_i ← c_i - ud_i / Z_i`. With a penalty the step instead minimizes the
//! separable surrogate of the data term plus a quadratic majorizer of the
//! penalty, pixel by pixel.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SystemOperator;
use crate::image::{ComponentImage, N_BASIS};
use crate::objective::{self, ObjectiveValue, PenaltyConfig, POTENTIAL_CURVATURE_BOUND};
use crate::spectral::{self, BasisAttenuation, CountSinogram, SpectrumTable, N_SPECTRA};

/// Smallest `P / Q` ratio accepted in the log; only reached on rays with
/// zero measured counts.
const MIN_RATIO: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub n_iterations: usize,
    pub n_subsets: usize,
    /// Safety factor on the step normalizer; `>= 1` keeps the surrogate a
    /// true majorizer.
    pub z_scale: f64,
    pub penalty: PenaltyConfig,
    /// Stop when the relative objective change of one iteration drops below
    /// this. Zero disables the rule.
    pub stop_rel_tol: f64,
    pub trace_every: usize,
    pub clamp_nonnegative: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_iterations: 100,
            n_subsets: 1,
            z_scale: 1.0,
            penalty: PenaltyConfig::none(1.0),
            stop_rel_tol: 0.0,
            trace_every: 1,
            clamp_nonnegative: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, n_views: usize) -> Result<()> {
        if self.n_subsets == 0 || !n_views.is_multiple_of(self.n_subsets) {
            return Err(Error::Config(format!(
                "n_subsets ({}) must be >= 1 and divide n_views ({n_views})",
                self.n_subsets
            )));
        }
        if !(self.z_scale > 0.0 && self.z_scale.is_finite()) {
            return Err(Error::Config(format!("z_scale must be > 0, got {}", self.z_scale)));
        }
        if !(self.stop_rel_tol >= 0.0) {
            return Err(Error::Config("stop_rel_tol must be >= 0".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::Config("trace_every must be >= 1".into()));
        }
        self.penalty.validate()
    }
}

/// Interleaved angular subsets: subset `k` holds views `k, k + K, k + 2K, ...`.
pub fn ordered_subsets(n_views: usize, n_subsets: usize) -> Vec<Vec<usize>> {
    (0..n_subsets).map(|k| (k..n_views).step_by(n_subsets).collect()).collect()
}

/// Basis-weighted backprojections, indexed `[basis][spectrum]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisBackprojections {
    pub p: [[Vec<f64>; N_SPECTRA]; N_BASIS],
    pub q: [[Vec<f64>; N_SPECTRA]; N_BASIS],
}

impl BasisBackprojections {
    /// `(Σ_j p_ij, Σ_j q_ij)` for basis `i`.
    pub fn summed(&self, basis: usize) -> (Vec<f64>, Vec<f64>) {
        let sum = |a: &[Vec<f64>; N_SPECTRA]| a[0].iter().zip(&a[1]).map(|(x, y)| x + y).collect::<Vec<_>>();
        (sum(&self.p[basis]), sum(&self.q[basis]))
    }
}

fn check_data<O: SystemOperator>(d: &CountSinogram, op: &O) -> Result<()> {
    if d.n_views != op.n_views() || d.n_detectors != op.n_detectors() {
        return Err(Error::Dimension(format!(
            "measured data is {}x{}, geometry is {}x{}",
            d.n_views,
            d.n_detectors,
            op.n_views(),
            op.n_detectors()
        )));
    }
    for (j, c) in d.counts.iter().enumerate() {
        if c.len() != d.n_rays() || c.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Value(format!("measured counts for spectrum {j} must be finite and >= 0")));
        }
    }
    Ok(())
}

/// `p_ij`, `q_ij` over the rays of `views`.
pub fn compute_pq<O: SystemOperator>(
    c: &ComponentImage,
    d: &CountSinogram,
    op: &O,
    spec: &SpectrumTable,
    basis: &BasisAttenuation,
    views: &[usize],
) -> Result<BasisBackprojections> {
    check_data(d, op)?;
    let er = spectral::energy_resolved_views(c, op, spec, basis, views)?;
    let nd = op.n_detectors();
    let n = views.len() * nd;
    // channel order: q_00 q_01 q_10 q_11 p_00 p_01 p_10 p_11, index i * 2 + j
    let mut channels = vec![vec![0.0; n]; 2 * N_BASIS * N_SPECTRA];
    for j in 0..N_SPECTRA {
        for (k, &v) in views.iter().enumerate() {
            for det in 0..nd {
                let r = k * nd + det;
                let bins = er.bins(j, r);
                let g: f64 = bins.iter().sum();
                let dv = d.counts[j][v * nd + det];
                let ratio = if dv == 0.0 {
                    0.0
                } else if g > 0.0 {
                    dv / g
                } else {
                    return Err(Error::Domain(format!(
                        "estimated count is zero where measured count is {dv} (spectrum {j}, view {v}, detector {det})"
                    )));
                };
                for i in 0..N_BASIS {
                    let q: f64 = bins.iter().zip(basis.mu(i)).map(|(gb, m)| gb * m).sum();
                    channels[i * 2 + j][r] = q;
                    channels[4 + i * 2 + j][r] = q * ratio;
                }
            }
        }
    }
    let refs: Vec<&[f64]> = channels.iter().map(|c| c.as_slice()).collect();
    let mut bp = op.back_project_views(&refs, views)?.into_iter();
    let mut next = || bp.next().expect("eight channels");
    let q = [[next(), next()], [next(), next()]];
    let p = [[next(), next()], [next(), next()]];
    Ok(BasisBackprojections { p, q })
}

/// `ud_i(x) = ln(Σ_j p_ij(x) / Σ_j q_ij(x))`, zero where no ray of the
/// subset reaches the pixel.
pub fn update_direction(pq: &BasisBackprojections) -> [Vec<f64>; N_BASIS] {
    std::array::from_fn(|i| {
        let (p, q) = pq.summed(i);
        p.iter().zip(&q).map(|(&p, &q)| direction(p, q)).collect()
    })
}

fn direction(p: f64, q: f64) -> f64 {
    if q > 0.0 {
        (p / q).max(MIN_RATIO).ln()
    } else {
        0.0
    }
}

/// Update directions at `c` using every view as a single subset.
pub fn update_directions_at<O: SystemOperator>(
    c: &ComponentImage,
    d: &CountSinogram,
    op: &O,
    spec: &SpectrumTable,
    basis: &BasisAttenuation,
) -> Result<[Vec<f64>; N_BASIS]> {
    let views: Vec<usize> = (0..op.n_views()).collect();
    Ok(update_direction(&compute_pq(c, d, op, spec, basis, &views)?))
}

/// Step normalizer `Z_i = z_scale · r_i · τ`.
///
/// `r_i = (max μ_1 + max μ_2) / max μ_i` splits the joint attenuation
/// between the two components; `τ = ℓ_max (M_1² + M_2²) / (M_1 + M_2)`,
/// with `ℓ_max` the longest ray chord through the grid and `M_i = max_E
/// μ_i(E)`, converts it to the attenuation scale of the problem. Together
/// they guarantee `Σ_{x,i} h(x,y) μ_i(E) / Z_i <= 1 / z_scale` for every ray
/// and energy, which makes the data-term surrogate a majorizer when
/// `z_scale >= 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepNormalizer {
    pub z_scale: f64,
    pub splitting_ratio: [f64; N_BASIS],
    pub attenuation_scale: f64,
}

impl StepNormalizer {
    pub fn z(&self, basis: usize) -> f64 {
        self.z_scale * self.splitting_ratio[basis] * self.attenuation_scale
    }

    /// `z_scale · r_i`, the dimensionless part of `Z_i`.
    pub fn scaled_ratio(&self, basis: usize) -> f64 {
        self.z_scale * self.splitting_ratio[basis]
    }
}

pub fn compute_step_normalizer<O: SystemOperator>(op: &O, basis: &BasisAttenuation, z_scale: f64) -> StepNormalizer {
    let longest = op.ray_lengths().into_iter().fold(0.0, f64::max);
    step_normalizer_from(longest, [basis.max_mu(0), basis.max_mu(1)], z_scale)
}

pub fn step_normalizer_from(longest_ray: f64, max_mu: [f64; N_BASIS], z_scale: f64) -> StepNormalizer {
    let [m1, m2] = max_mu;
    StepNormalizer {
        z_scale,
        splitting_ratio: [(m1 + m2) / m1, (m1 + m2) / m2],
        attenuation_scale: longest_ray * (m1 * m1 + m2 * m2) / (m1 + m2),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub subset_pass: usize,
    pub data_term: f64,
    pub penalty: f64,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SolverState {
    pub current: ComponentImage,
    pub iteration: usize,
    pub subset_passes: usize,
    pub trace: Vec<TraceRow>,
    pub objective: ObjectiveValue,
    started: Instant,
}

impl SolverState {
    pub fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn record(&mut self) {
        self.trace.push(TraceRow {
            iter: self.iteration,
            subset_pass: self.subset_passes,
            data_term: self.objective.data_term,
            penalty: self.objective.penalty,
            total: self.objective.total,
            seconds: self.elapsed(),
        });
    }
}

/// A reconstruction problem bound to its data, with the per-problem
/// constants (subsets, normalizer, neighbor weights) precomputed.
pub struct Solver<'a, O: SystemOperator> {
    pub op: &'a O,
    pub data: &'a CountSinogram,
    pub spec: &'a SpectrumTable,
    pub basis: &'a BasisAttenuation,
    pub config: SolverConfig,
    pub normalizer: StepNormalizer,
    subsets: Vec<Vec<usize>>,
    weight_sum: Vec<f64>,
    grid: (usize, usize),
}

impl<'a, O: SystemOperator> Solver<'a, O> {
    pub fn new(
        op: &'a O,
        data: &'a CountSinogram,
        spec: &'a SpectrumTable,
        basis: &'a BasisAttenuation,
        config: SolverConfig,
        grid: (usize, usize),
    ) -> Result<Self> {
        config.validate(op.n_views())?;
        check_data(data, op)?;
        if grid.0 * grid.1 != op.n_pixels() {
            return Err(Error::Dimension(format!(
                "grid {}x{} does not match operator with {} pixels",
                grid.0,
                grid.1,
                op.n_pixels()
            )));
        }
        basis.check_grid(spec)?;
        let normalizer = compute_step_normalizer(op, basis, config.z_scale);
        let subsets = ordered_subsets(op.n_views(), config.n_subsets);
        let weight_sum = config.penalty.neighbor_weight_sum(grid.0, grid.1);
        Ok(Self { op, data, spec, basis, config, normalizer, subsets, weight_sum, grid })
    }

    pub fn objective(&self, c: &ComponentImage) -> Result<ObjectiveValue> {
        let g = spectral::forward_counts(c, self.op, self.spec, self.basis)?;
        objective::objective_terms(self.data, &g, c, &self.config.penalty)
    }

    pub fn start(&self, initial: ComponentImage) -> Result<SolverState> {
        initial.check_shape(self.grid.0, self.grid.1)?;
        initial.check_finite()?;
        let objective = self.objective(&initial)?;
        if !objective.total.is_finite() {
            return Err(Error::Domain("objective at the initial image is not finite".into()));
        }
        let mut state = SolverState {
            current: initial,
            iteration: 0,
            subset_passes: 0,
            trace: Vec::new(),
            objective,
            started: Instant::now(),
        };
        state.record();
        Ok(state)
    }

    /// One sub-iteration over the views of one subset.
    pub fn subset_update(&self, c: &mut ComponentImage, views: &[usize]) -> Result<()> {
        let pq = compute_pq(c, self.data, self.op, self.spec, self.basis, views)?;
        let lambda = self.config.penalty.lambda;
        let k = self.subsets.len() as f64;
        let grad = (lambda > 0.0).then(|| objective::penalty_gradient(c, &self.config.penalty));
        for i in 0..N_BASIS {
            let (p, q) = pq.summed(i);
            let z = self.normalizer.z(i);
            let comp = &mut c.c[i];
            for x in 0..comp.len() {
                if !(q[x] > 0.0) {
                    continue;
                }
                let step = match &grad {
                    None => -direction(p[x], q[x]) / z,
                    Some(g) => {
                        let curvature = 4.0 * lambda * POTENTIAL_CURVATURE_BOUND * self.weight_sum[x] / k;
                        surrogate_step(p[x], q[x], z, g.c[i][x] / k, curvature)
                    }
                };
                comp[x] += step;
                if self.config.clamp_nonnegative && comp[x] < 0.0 {
                    comp[x] = 0.0;
                }
            }
        }
        Ok(())
    }

    /// One full pass over all subsets, followed by an objective evaluation.
    pub fn iterate(&self, state: &mut SolverState) -> Result<()> {
        for views in &self.subsets {
            self.subset_update(&mut state.current, views)?;
            state.subset_passes += 1;
        }
        state.iteration += 1;
        state.objective = self.objective(&state.current)?;
        Ok(())
    }

    pub fn run(&self, initial: ComponentImage) -> Result<SolverState> {
        let mut state = self.start(initial)?;
        for it in 1..=self.config.n_iterations {
            let before = state.objective.total;
            self.iterate(&mut state)?;
            let after = state.objective.total;
            let stop = self.config.stop_rel_tol > 0.0
                && ((before - after).abs() <= self.config.stop_rel_tol * after.abs());
            if it % self.config.trace_every == 0 || it == self.config.n_iterations || stop {
                state.record();
            }
            if stop {
                break;
            }
        }
        Ok(state)
    }
}

/// Minimizer of the per-pixel surrogate
/// `F(s) = (P + G) s + (Q / Z) e^{-Z s} + C s² / 2`.
///
/// `F'` is increasing and concave, so Newton converges monotonically after
/// the first step.
fn surrogate_step(p: f64, q: f64, z: f64, g: f64, c: f64) -> f64 {
    let mut s = -(p - q + g) / (q * z + c);
    for _ in 0..100 {
        let e = q * (-z * s).exp();
        let f = p + g - e + c * s;
        let fp = z * e + c;
        let ds = f / fp;
        s -= ds;
        if ds.abs() <= 1e-14 * (1.0 + s.abs()) {
            break;
        }
    }
    s
}

/// One DEAM iteration (all subsets) from `state`.
#[allow(clippy::too_many_arguments)]
pub fn deam_iteration<O: SystemOperator>(
    state: &mut SolverState,
    d: &CountSinogram,
    op: &O,
    spec: &SpectrumTable,
    basis: &BasisAttenuation,
    config: &SolverConfig,
) -> Result<()> {
    let grid = (state.current.nx, state.current.ny);
    let solver = Solver::new(op, d, spec, basis, config.clone(), grid)?;
    solver.iterate(state)?;
    state.record();
    Ok(())
}

/// Runs DEAM from `initial` until the iteration budget or the stopping rule.
pub fn run<O: SystemOperator>(
    initial: ComponentImage,
    d: &CountSinogram,
    op: &O,
    spec: &SpectrumTable,
    basis: &BasisAttenuation,
    config: &SolverConfig,
) -> Result<SolverState> {
    let grid = (initial.nx, initial.ny);
    Solver::new(op, d, spec, basis, config.clone(), grid)?.run(initial)
}
