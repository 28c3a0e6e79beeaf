//! Fan-beam system operator: exact pixel/ray intersection lengths (Siddon
//! traversal), forward projection and its adjoint.
//!
//! Coordinates are in mm with the isocenter at the origin. For a view angle
//! `beta` the source sits at `R (cos beta, sin beta)` and the central ray
//! points back through the isocenter. Detector `k` lies on an equiangular arc
//! at fan angle `(k - (n - 1) / 2) * pitch`, measured counter-clockwise from
//! the central ray. Pixel `(ix, iy)` has linear index `iy * nx + ix`, with `x`
//! increasing with `ix` and `y` increasing with `iy`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segments shorter than this are treated as corner grazes and dropped.
pub const MIN_SEGMENT_MM: f64 = 1e-12;

/// Views per backprojection block. Fixed so the reduction order (and hence
/// the result) does not depend on the thread count.
const VIEW_BLOCK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub nx: usize,
    pub ny: usize,
    /// Square pixel edge length, mm.
    pub pixel_size: f64,
    /// Offset of the grid center from the isocenter, mm.
    #[serde(default)]
    pub origin: [f64; 2],
}

impl ImageGrid {
    pub fn new(nx: usize, ny: usize, pixel_size: f64) -> Self {
        Self { nx, ny, pixel_size, origin: [0.0, 0.0] }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_min(&self) -> f64 {
        self.origin[0] - 0.5 * self.nx as f64 * self.pixel_size
    }

    pub fn y_min(&self) -> f64 {
        self.origin[1] - 0.5 * self.ny as f64 * self.pixel_size
    }

    pub fn x_max(&self) -> f64 {
        self.origin[0] + 0.5 * self.nx as f64 * self.pixel_size
    }

    pub fn y_max(&self) -> f64 {
        self.origin[1] + 0.5 * self.ny as f64 * self.pixel_size
    }

    /// Center of pixel `(ix, iy)`.
    pub fn pixel_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin[0] + (ix as f64 - 0.5 * (self.nx as f64 - 1.0)) * self.pixel_size,
            self.origin[1] + (iy as f64 - 0.5 * (self.ny as f64 - 1.0)) * self.pixel_size,
        ]
    }

    pub fn diagonal(&self) -> f64 {
        self.pixel_size * ((self.nx * self.nx + self.ny * self.ny) as f64).sqrt()
    }

    /// Radius of the smallest isocenter-centered circle containing the grid.
    pub fn enclosing_radius(&self) -> f64 {
        let dx = self.origin[0].abs() + 0.5 * self.nx as f64 * self.pixel_size;
        let dy = self.origin[1].abs() + 0.5 * self.ny as f64 * self.pixel_size;
        dx.hypot(dy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::Config("image grid must be non-empty".into()));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::Config(format!("pixel size must be > 0, got {}", self.pixel_size)));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanBeamGeometry {
    /// mm
    pub source_to_isocenter: f64,
    /// mm
    pub source_to_detector: f64,
    pub n_detectors: usize,
    /// Angular spacing of detector elements on the arc, radians.
    pub detector_angular_pitch: f64,
    /// Source angles, radians, strictly increasing.
    pub view_angles: Vec<f64>,
    pub grid: ImageGrid,
}

impl FanBeamGeometry {
    /// Full 2π scan with evenly spaced views and a detector pitch chosen so
    /// the fan just covers the grid's enclosing circle.
    pub fn full_scan(
        grid: ImageGrid,
        source_to_isocenter: f64,
        source_to_detector: f64,
        n_views: usize,
        n_detectors: usize,
    ) -> Result<Self> {
        grid.validate()?;
        let r = grid.enclosing_radius();
        if r >= source_to_isocenter {
            return Err(Error::Config(format!(
                "grid (enclosing radius {r:.3} mm) does not fit inside the source orbit ({source_to_isocenter} mm)"
            )));
        }
        if n_detectors < 2 {
            return Err(Error::Config("need at least 2 detectors".into()));
        }
        let half_fan = (r / source_to_isocenter).asin() * 1.02;
        let pitch = 2.0 * half_fan / (n_detectors - 1) as f64;
        let geom = Self {
            source_to_isocenter,
            source_to_detector,
            n_detectors,
            detector_angular_pitch: pitch,
            view_angles: even_angles(n_views),
            grid,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn n_views(&self) -> usize {
        self.view_angles.len()
    }

    pub fn n_rays(&self) -> usize {
        self.n_views() * self.n_detectors
    }

    pub fn fan_angle(&self, detector: usize) -> f64 {
        (detector as f64 - 0.5 * (self.n_detectors as f64 - 1.0)) * self.detector_angular_pitch
    }

    pub fn source_position(&self, view: usize) -> [f64; 2] {
        let beta = self.view_angles[view];
        [self.source_to_isocenter * beta.cos(), self.source_to_isocenter * beta.sin()]
    }

    /// Unit direction of ray `(view, detector)`, pointing from the source.
    pub fn ray_direction(&self, view: usize, detector: usize) -> [f64; 2] {
        let beta = self.view_angles[view];
        let theta = beta + PI + self.fan_angle(detector);
        [theta.cos(), theta.sin()]
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.source_to_isocenter) || !finite_pos(self.source_to_detector) {
            return Err(Error::Config("source distances must be > 0".into()));
        }
        if self.source_to_detector <= self.source_to_isocenter {
            return Err(Error::Config("source_to_detector must exceed source_to_isocenter".into()));
        }
        if self.n_detectors == 0 {
            return Err(Error::Config("n_detectors must be >= 1".into()));
        }
        if !finite_pos(self.detector_angular_pitch) {
            return Err(Error::Config("detector_angular_pitch must be > 0".into()));
        }
        if self.n_views() < 2 {
            return Err(Error::Config("need at least 2 views".into()));
        }
        if self.view_angles.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("view angles must be strictly increasing".into()));
        }
        let step = (self.view_angles[self.n_views() - 1] - self.view_angles[0]) / (self.n_views() - 1) as f64;
        let span = self.view_angles[self.n_views() - 1] - self.view_angles[0];
        if span >= 2.0 * PI + step {
            return Err(Error::Config("view angles span more than one rotation".into()));
        }
        let half_fan = 0.5 * (self.n_detectors as f64 - 1.0) * self.detector_angular_pitch;
        if half_fan >= 0.5 * PI {
            return Err(Error::Config("fan angle must be below 180 degrees".into()));
        }
        if self.grid.enclosing_radius() >= self.source_to_isocenter {
            return Err(Error::Config("image grid intersects the source orbit".into()));
        }
        Ok(())
    }

    fn check_ray(&self, view: usize, detector: usize) -> Result<()> {
        if view >= self.n_views() {
            return Err(Error::Index(format!("view {view} >= {}", self.n_views())));
        }
        if detector >= self.n_detectors {
            return Err(Error::Index(format!("detector {detector} >= {}", self.n_detectors)));
        }
        Ok(())
    }

    /// Pixel intersections of ray `(view, detector)`, source to detector.
    pub fn trace_ray(&self, view: usize, detector: usize) -> Result<RaySegmentList> {
        self.check_ray(view, detector)?;
        let mut out = RaySegmentList::default();
        let mut scratch = Vec::new();
        siddon(
            &self.grid,
            self.source_position(view),
            self.ray_direction(view, detector),
            self.source_to_detector,
            &mut scratch,
            &mut out.entries,
        );
        Ok(out)
    }
}

/// `n` evenly spaced angles covering `[0, 2π)`.
pub fn even_angles(n: usize) -> Vec<f64> {
    (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect()
}

/// One sparse row of the system matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySegmentList {
    /// `(pixel_index, intersection_length_mm)`
    pub entries: Vec<(usize, f64)>,
}

impl RaySegmentList {
    pub fn total_length(&self) -> f64 {
        self.entries.iter().map(|&(_, l)| l).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parametric interval `[t0, t1]` of `p + t u` inside the axis-aligned grid box.
fn clip_to_box(grid: &ImageGrid, p: [f64; 2], u: [f64; 2], t_max: f64) -> Option<(f64, f64)> {
    let mut lo = 0.0_f64;
    let mut hi = t_max;
    let bounds = [(grid.x_min(), grid.x_max()), (grid.y_min(), grid.y_max())];
    for axis in 0..2 {
        let (bmin, bmax) = bounds[axis];
        if u[axis] == 0.0 {
            if p[axis] < bmin || p[axis] > bmax {
                return None;
            }
        } else {
            let ta = (bmin - p[axis]) / u[axis];
            let tb = (bmax - p[axis]) / u[axis];
            lo = lo.max(ta.min(tb));
            hi = hi.min(ta.max(tb));
        }
    }
    (hi > lo).then_some((lo, hi))
}

/// Siddon traversal: merge the sorted plane-crossing parameters and assign
/// each interval to the pixel containing its midpoint.
fn siddon(
    grid: &ImageGrid,
    p: [f64; 2],
    u: [f64; 2],
    t_max: f64,
    crossings: &mut Vec<f64>,
    out: &mut Vec<(usize, f64)>,
) {
    out.clear();
    let Some((t0, t1)) = clip_to_box(grid, p, u, t_max) else {
        return;
    };
    crossings.clear();
    crossings.push(t0);
    let mins = [grid.x_min(), grid.y_min()];
    let counts = [grid.nx, grid.ny];
    for axis in 0..2 {
        if u[axis] == 0.0 {
            continue;
        }
        for plane in 0..=counts[axis] {
            let coord = mins[axis] + plane as f64 * grid.pixel_size;
            let t = (coord - p[axis]) / u[axis];
            if t > t0 && t < t1 {
                crossings.push(t);
            }
        }
    }
    crossings.push(t1);
    crossings.sort_by(f64::total_cmp);

    let inv = 1.0 / grid.pixel_size;
    for w in crossings.windows(2) {
        let len = w[1] - w[0];
        if len <= MIN_SEGMENT_MM {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let mx = p[0] + tm * u[0];
        let my = p[1] + tm * u[1];
        let ix = (((mx - mins[0]) * inv).floor() as isize).clamp(0, grid.nx as isize - 1) as usize;
        let iy = (((my - mins[1]) * inv).floor() as isize).clamp(0, grid.ny as isize - 1) as usize;
        out.push((iy * grid.nx + ix, len));
    }
}

/// Abstract system operator `h(x, y)`: one sparse row per ray, rays ordered
/// view-major. Projection and backprojection are written against this trait
/// so a different scanner model can be dropped in.
pub trait SystemOperator: Sync {
    fn n_views(&self) -> usize;
    fn n_detectors(&self) -> usize;
    fn n_pixels(&self) -> usize;

    /// Pixel indices and weights of ray `view * n_detectors + detector`.
    fn row(&self, ray: usize) -> (&[u32], &[f64]);

    fn n_rays(&self) -> usize {
        self.n_views() * self.n_detectors()
    }

    /// Line integrals `Σ_x h(x, y) img(x)` for every ray of the given views,
    /// laid out `[views.len()][n_detectors]`.
    fn forward_views(&self, img: &[f64], views: &[usize]) -> Result<Vec<f64>> {
        if img.len() != self.n_pixels() {
            return Err(Error::Dimension(format!(
                "image has {} pixels, operator expects {}",
                img.len(),
                self.n_pixels()
            )));
        }
        let nd = self.n_detectors();
        let mut out = vec![0.0; views.len() * nd];
        out.par_chunks_mut(nd).zip(views.par_iter()).for_each(|(chunk, &v)| {
            for (d, slot) in chunk.iter_mut().enumerate() {
                let (idx, w) = self.row(v * nd + d);
                *slot = idx.iter().zip(w).map(|(&i, &l)| l * img[i as usize]).sum();
            }
        });
        Ok(out)
    }

    fn forward_project(&self, img: &[f64]) -> Result<Vec<f64>> {
        let views: Vec<usize> = (0..self.n_views()).collect();
        self.forward_views(img, &views)
    }

    /// Adjoint of [`forward_views`](Self::forward_views) applied to several
    /// sinogram channels at once. Each channel is laid out
    /// `[views.len()][n_detectors]`; the result holds one image per channel.
    fn back_project_views(&self, channels: &[&[f64]], views: &[usize]) -> Result<Vec<Vec<f64>>> {
        let nd = self.n_detectors();
        let np = self.n_pixels();
        for ch in channels {
            if ch.len() != views.len() * nd {
                return Err(Error::Dimension(format!(
                    "sinogram channel has {} samples, expected {}",
                    ch.len(),
                    views.len() * nd
                )));
            }
        }
        let nc = channels.len();
        let partials: Vec<Vec<f64>> = (0..views.len())
            .collect::<Vec<_>>()
            .par_chunks(VIEW_BLOCK)
            .map(|block| {
                let mut acc = vec![0.0; nc * np];
                for &k in block {
                    let v = views[k];
                    for d in 0..nd {
                        let (idx, w) = self.row(v * nd + d);
                        if idx.is_empty() {
                            continue;
                        }
                        for (c, ch) in channels.iter().enumerate() {
                            let val = ch[k * nd + d];
                            if val == 0.0 {
                                continue;
                            }
                            let img = &mut acc[c * np..(c + 1) * np];
                            for (&i, &l) in idx.iter().zip(w) {
                                img[i as usize] += l * val;
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; nc * np];
        for part in &partials {
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        Ok(total.chunks(np.max(1)).take(nc).map(|c| c.to_vec()).collect())
    }

    fn back_project(&self, sino: &[f64]) -> Result<Vec<f64>> {
        let views: Vec<usize> = (0..self.n_views()).collect();
        Ok(self.back_project_views(&[sino], &views)?.pop().unwrap_or_default())
    }

    /// `Σ_x h(x, y)` for every ray: the ray's chord length through the grid.
    fn ray_lengths(&self) -> Vec<f64> {
        (0..self.n_rays()).map(|r| self.row(r).1.iter().sum()).collect()
    }
}

/// Precomputed sparse system matrix for a [`FanBeamGeometry`], CSR by ray.
#[derive(Clone, Debug)]
pub struct SystemMatrix {
    geometry: FanBeamGeometry,
    offsets: Vec<usize>,
    pixels: Vec<u32>,
    lengths: Vec<f64>,
}

impl SystemMatrix {
    pub fn new(geometry: FanBeamGeometry) -> Result<Self> {
        geometry.validate()?;
        if geometry.grid.len() > u32::MAX as usize {
            return Err(Error::Config("image grid too large".into()));
        }
        let nd = geometry.n_detectors;
        let per_view: Vec<(Vec<usize>, Vec<u32>, Vec<f64>)> = (0..geometry.n_views())
            .into_par_iter()
            .map(|v| {
                let mut counts = Vec::with_capacity(nd);
                let mut pix = Vec::new();
                let mut len = Vec::new();
                let mut scratch = Vec::new();
                let mut seg = Vec::new();
                for d in 0..nd {
                    siddon(
                        &geometry.grid,
                        geometry.source_position(v),
                        geometry.ray_direction(v, d),
                        geometry.source_to_detector,
                        &mut scratch,
                        &mut seg,
                    );
                    counts.push(seg.len());
                    for &(i, l) in &seg {
                        pix.push(i as u32);
                        len.push(l);
                    }
                }
                (counts, pix, len)
            })
            .collect();
        let mut offsets = Vec::with_capacity(geometry.n_rays() + 1);
        offsets.push(0);
        let total: usize = per_view.iter().map(|(_, p, _)| p.len()).sum();
        let mut pixels = Vec::with_capacity(total);
        let mut lengths = Vec::with_capacity(total);
        for (counts, pix, len) in per_view {
            for c in counts {
                offsets.push(offsets.last().unwrap() + c);
            }
            pixels.extend(pix);
            lengths.extend(len);
        }
        Ok(Self { geometry, offsets, pixels, lengths })
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn nnz(&self) -> usize {
        self.pixels.len()
    }
}

impl SystemOperator for SystemMatrix {
    fn n_views(&self) -> usize {
        self.geometry.n_views()
    }

    fn n_detectors(&self) -> usize {
        self.geometry.n_detectors
    }

    fn n_pixels(&self) -> usize {
        self.geometry.grid.len()
    }

    fn row(&self, ray: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[ray], self.offsets[ray + 1]);
        (&self.pixels[a..b], &self.lengths[a..b])
    }
}

/// A system operator given by explicit sparse rows. Handy for small
/// hand-built problems.
#[derive(Clone, Debug)]
pub struct ExplicitOperator {
    n_views: usize,
    n_detectors: usize,
    n_pixels: usize,
    offsets: Vec<usize>,
    pixels: Vec<u32>,
    lengths: Vec<f64>,
}

impl ExplicitOperator {
    /// `rows[view * n_detectors + detector]` lists `(pixel, length)` pairs.
    pub fn new(n_views: usize, n_detectors: usize, n_pixels: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        if rows.len() != n_views * n_detectors {
            return Err(Error::Dimension(format!("{} rows for {} rays", rows.len(), n_views * n_detectors)));
        }
        let mut offsets = vec![0];
        let mut pixels = Vec::new();
        let mut lengths = Vec::new();
        for row in rows {
            for &(i, l) in row {
                if i >= n_pixels {
                    return Err(Error::Index(format!("pixel {i} >= {n_pixels}")));
                }
                if !(l > 0.0 && l.is_finite()) {
                    return Err(Error::Value(format!("intersection length must be > 0, got {l}")));
                }
                pixels.push(i as u32);
                lengths.push(l);
            }
            offsets.push(pixels.len());
        }
        Ok(Self { n_views, n_detectors, n_pixels, offsets, pixels, lengths })
    }
}

impl SystemOperator for ExplicitOperator {
    fn n_views(&self) -> usize {
        self.n_views
    }

    fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    fn n_pixels(&self) -> usize {
        self.n_pixels
    }

    fn row(&self, ray: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[ray], self.offsets[ray + 1]);
        (&self.pixels[a..b], &self.lengths[a..b])
    }
}
