//! Ellipse phantoms with ground-truth basis coefficients, a material table
//! and ROI masks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageGrid;
use crate::image::ComponentImage;
use crate::spectral::read_csv;

const DEFAULT_MATERIALS: &str = include_str!("../data/materials.csv");

/// Pixels eroded from each material mask when forming ROIs.
pub const ROI_EROSION: usize = 2;

/// Label of pixels not covered by any ellipse.
pub const BACKGROUND: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    pub c1: f64,
    pub c2: f64,
    pub rho_e_rel: f64,
    #[serde(rename = "I_eV")]
    pub i_ev: f64,
    pub spr_ref: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaterialTable {
    pub materials: Vec<Material>,
}

impl MaterialTable {
    pub fn new(materials: Vec<Material>) -> Result<Self> {
        let t = Self { materials };
        t.validate()?;
        Ok(t)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        Self::new(read_csv(path)?)
    }

    /// Desk-scale defaults shipped with the crate.
    pub fn synthetic() -> Self {
        let mut rdr = csv::Reader::from_reader(DEFAULT_MATERIALS.as_bytes());
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<Material>, _>>().expect("embedded table");
        Self::new(rows).expect("embedded table is valid")
    }

    pub fn validate(&self) -> Result<()> {
        for (k, m) in self.materials.iter().enumerate() {
            if !(m.rho_e_rel >= 0.0) || !(m.i_ev > 0.0) || !m.c1.is_finite() || !m.c2.is_finite() {
                return Err(Error::Config(format!("material '{}' has invalid properties", m.name)));
            }
            if self.materials[..k].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("material '{}' listed twice", m.name)));
            }
        }
        match self.get("water") {
            Ok(w) if w.spr_ref == 1.0 => Ok(()),
            Ok(w) => Err(Error::Config(format!("water spr_ref must be 1, got {}", w.spr_ref))),
            Err(_) => Err(Error::Config("material table has no water row".into())),
        }
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.materials
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::Config(format!("unknown material '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&Material> {
        Ok(&self.materials[self.index_of(name)?])
    }

    /// Material of a label produced by [`rasterize`].
    pub fn by_label(&self, label: u32) -> Option<&Material> {
        (label as usize).checked_sub(1).and_then(|k| self.materials.get(k))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// mm, isocenter frame
    pub center: [f64; 2],
    /// mm
    pub semi_axes: [f64; 2],
    /// radians, counter-clockwise
    #[serde(default)]
    pub rotation: f64,
    pub material: String,
}

impl Ellipse {
    pub fn disk(center: [f64; 2], radius: f64, material: &str) -> Self {
        Self { center, semi_axes: [radius, radius], rotation: 0.0, material: material.into() }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let u = (c * dx + s * dy) / self.semi_axes[0];
        let v = (-s * dx + c * dy) / self.semi_axes[1];
        u * u + v * v <= 1.0
    }

    /// Half-widths of the axis-aligned bounding box.
    fn half_extent(&self) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let [a, b] = self.semi_axes;
        [(a * c).hypot(b * s), (a * s).hypot(b * c)]
    }
}

/// Ellipses drawn in order; later ellipses overwrite earlier ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: ImageGrid,
    pub ellipses: Vec<Ellipse>,
}

impl PhantomSpec {
    pub fn validate(&self, table: &MaterialTable) -> Result<()> {
        self.grid.validate()?;
        let g = &self.grid;
        let tol = 1e-9 * g.pixel_size;
        for (k, e) in self.ellipses.iter().enumerate() {
            if !(e.semi_axes[0] > 0.0 && e.semi_axes[1] > 0.0) || !e.center.iter().all(|v| v.is_finite()) {
                return Err(Error::Config(format!("ellipse {k} has invalid shape")));
            }
            let h = e.half_extent();
            if e.center[0] - h[0] < g.x_min() - tol
                || e.center[0] + h[0] > g.x_max() + tol
                || e.center[1] - h[1] < g.y_min() - tol
                || e.center[1] + h[1] > g.y_max() + tol
            {
                return Err(Error::Config(format!("ellipse {k} extends outside the image grid")));
            }
            table.index_of(&e.material)?;
        }
        Ok(())
    }

    /// Water disk filling 80% of the grid with a bone insert, the two-material
    /// test object.
    pub fn two_material_disk(grid: ImageGrid) -> Self {
        let r = 0.5 * grid.nx.min(grid.ny) as f64 * grid.pixel_size;
        let o = grid.origin;
        Self {
            ellipses: vec![
                Ellipse::disk(o, 0.8 * r, "water"),
                Ellipse::disk([o[0] + 0.3 * r, o[1] + 0.1 * r], 0.3 * r, "bone"),
            ],
            grid,
        }
    }

    /// Water body with four inserts, giving five material ROIs.
    pub fn five_material(grid: ImageGrid) -> Self {
        let r = 0.5 * grid.nx.min(grid.ny) as f64 * grid.pixel_size;
        let o = grid.origin;
        let at = |dx: f64, dy: f64| [o[0] + dx * r, o[1] + dy * r];
        Self {
            ellipses: vec![
                Ellipse {
                    center: o,
                    semi_axes: [0.9 * r, 0.82 * r],
                    rotation: 0.0,
                    material: "water".into(),
                },
                Ellipse::disk(at(-0.42, 0.3), 0.24 * r, "adipose"),
                Ellipse::disk(at(0.42, 0.3), 0.24 * r, "muscle"),
                Ellipse::disk(at(-0.42, -0.32), 0.24 * r, "bone"),
                Ellipse::disk(at(0.42, -0.32), 0.24 * r, "cartilage"),
            ],
            grid,
        }
    }
}

/// Ground-truth labels on the image grid; `k + 1` marks material `k` of the
/// table, [`BACKGROUND`] marks uncovered pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelImage {
    pub nx: usize,
    pub ny: usize,
    pub labels: Vec<u32>,
}

impl LabelImage {
    /// Pixels whose whole `(2e+1)²` neighborhood carries their label.
    pub fn eroded(&self, label: u32, e: usize) -> Vec<usize> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = Vec::new();
        for iy in e..ny.saturating_sub(e) {
            for ix in e..nx.saturating_sub(e) {
                if self.labels[iy * nx + ix] != label {
                    continue;
                }
                let inside = (iy - e..=iy + e).all(|y| (ix - e..=ix + e).all(|x| self.labels[y * nx + x] == label));
                if inside {
                    out.push(iy * nx + ix);
                }
            }
        }
        out
    }

    pub fn present(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.labels.iter().copied().filter(|&l| l != BACKGROUND).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

pub fn rasterize(spec: &PhantomSpec, table: &MaterialTable) -> Result<(ComponentImage, LabelImage)> {
    spec.validate(table)?;
    let g = &spec.grid;
    let idx: Vec<usize> = spec.ellipses.iter().map(|e| table.index_of(&e.material)).collect::<Result<_>>()?;
    let mut c = ComponentImage::zeros(g.nx, g.ny);
    let mut labels = vec![BACKGROUND; g.len()];
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let p = g.pixel_center(ix, iy);
            if let Some(k) = spec.ellipses.iter().rposition(|e| e.contains(p)) {
                let m = &table.materials[idx[k]];
                let x = iy * g.nx + ix;
                c.c[0][x] = m.c1;
                c.c[1][x] = m.c2;
                labels[x] = idx[k] as u32 + 1;
            }
        }
    }
    Ok((c, LabelImage { nx: g.nx, ny: g.ny, labels }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Roi {
    pub name: String,
    pub material: String,
    pub pixels: Vec<usize>,
}

/// One ROI per material present, by eroding its mask [`ROI_EROSION`]
/// pixels. Materials whose eroded mask is empty get no ROI.
pub fn material_rois(labels: &LabelImage, table: &MaterialTable) -> Vec<Roi> {
    labels
        .present()
        .into_iter()
        .filter_map(|l| {
            let m = table.by_label(l)?;
            let pixels = labels.eroded(l, ROI_EROSION);
            (!pixels.is_empty()).then(|| Roi { name: format!("roi_{}", m.name), material: m.name.clone(), pixels })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    A,
    B,
}

impl Family {
    pub fn body_materials(self) -> &'static [&'static str] {
        &["water", "muscle"]
    }

    pub fn insert_materials(self) -> &'static [&'static str] {
        match self {
            Family::A => &["adipose", "muscle", "bone", "air", "cartilage"],
            Family::B => &["adipose", "muscle", "bone", "air", "spongiosa"],
        }
    }

    pub fn exclusive_material(self) -> &'static str {
        match self {
            Family::A => "cartilage",
            Family::B => "spongiosa",
        }
    }
}

pub const MIN_ELLIPSES: usize = 3;
pub const MAX_ELLIPSES: usize = 8;

/// Random body ellipse with 2..=7 non-overlapping inserts. The first insert
/// is always the family's exclusive material.
pub fn generate_random_phantom(family: Family, seed: u64, grid: &ImageGrid) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 * grid.nx.min(grid.ny) as f64 * grid.pixel_size;
    let o = grid.origin;
    let body_axes = [half * rng.random_range(0.82..0.94), half * rng.random_range(0.72..0.9)];
    let body_material = family.body_materials()[rng.random_range(0..2)];
    let mut ellipses = vec![Ellipse {
        center: o,
        semi_axes: body_axes,
        rotation: rng.random_range(-0.3..0.3),
        material: body_material.into(),
    }];
    let inner = body_axes[0].min(body_axes[1]) - 2.0 * grid.pixel_size;
    let target = rng.random_range(MIN_ELLIPSES..=MAX_ELLIPSES) - 1;
    let (r_min, r_max) = (0.15 * half, 0.25 * half);
    let mut placed: Vec<([f64; 2], f64)> = Vec::new();
    for k in 0..target {
        let material = if k == 0 {
            family.exclusive_material()
        } else {
            let m = family.insert_materials();
            m[rng.random_range(0..m.len())]
        };
        for attempt in 0..200 {
            // shrink toward r_min if space is tight
            let hi = r_max - (r_max - r_min) * (attempt as f64 / 200.0);
            let a = rng.random_range(r_min..=hi.max(r_min));
            let b = a * rng.random_range(0.7..=1.0);
            let ring = inner - a;
            if ring <= 0.0 {
                break;
            }
            let rad = ring * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let center = [o[0] + rad * phi.cos(), o[1] + rad * phi.sin()];
            let clear = placed
                .iter()
                .all(|(c, r)| (c[0] - center[0]).hypot(c[1] - center[1]) >= r + a + 2.0 * grid.pixel_size);
            if clear {
                placed.push((center, a));
                ellipses.push(Ellipse {
                    center,
                    semi_axes: [a, b],
                    rotation: rng.random_range(0.0..std::f64::consts::PI),
                    material: material.into(),
                });
                break;
            }
        }
    }
    PhantomSpec { grid: grid.clone(), ellipses }
}
