use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of basis materials in the basis vector model.
pub const N_BASIS: usize = 2;

/// Basis-coefficient maps `c1` (polystyrene) and `c2` (CaCl2) over one slice,
/// each row-major `[ny][nx]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentImage {
    pub nx: usize,
    pub ny: usize,
    pub c: [Vec<f64>; N_BASIS],
}

impl ComponentImage {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self { nx, ny, c: [vec![0.0; nx * ny], vec![0.0; nx * ny]] }
    }

    pub fn new(nx: usize, ny: usize, c1: Vec<f64>, c2: Vec<f64>) -> Result<Self> {
        if c1.len() != nx * ny || c2.len() != nx * ny {
            return Err(Error::Dimension(format!(
                "component images must have {}x{} = {} pixels (got {} and {})",
                nx,
                ny,
                nx * ny,
                c1.len(),
                c2.len()
            )));
        }
        Ok(Self { nx, ny, c: [c1, c2] })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, comp) in self.c.iter().enumerate() {
            if let Some(k) = comp.iter().position(|v| !v.is_finite()) {
                return Err(Error::Value(format!("component {} has non-finite value at pixel {k}", i + 1)));
            }
        }
        Ok(())
    }

    pub fn check_shape(&self, nx: usize, ny: usize) -> Result<()> {
        if self.nx != nx || self.ny != ny || self.c.iter().any(|c| c.len() != nx * ny) {
            return Err(Error::Dimension(format!(
                "component image is {}x{}, expected {nx}x{ny}",
                self.nx, self.ny
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ComponentImage) -> f64 {
        self.c
            .iter()
            .zip(&other.c)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}
