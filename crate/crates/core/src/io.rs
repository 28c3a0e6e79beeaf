//! TensorFile: a JSON header next to a raw little-endian f32 payload.
//!
//! `name.json` holds shape, element type, axis names, pixel spacing and the
//! payload file name (relative to the header); `name.raw` holds the
//! row-major values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ComponentImage;
use crate::spectral::CountSinogram;

pub const DTYPE: &str = "float32_le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub axes: Vec<String>,
    /// One entry per axis; zero for non-spatial axes.
    pub spacing_mm: Vec<f64>,
    pub payload: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub axes: Vec<String>,
    pub spacing_mm: Vec<f64>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, axes: &[&str], spacing_mm: Vec<f64>, data: Vec<f32>) -> Result<Self> {
        let t = Self { shape, axes: axes.iter().map(|s| s.to_string()).collect(), spacing_mm, data };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if self.axes.len() != self.shape.len() || self.spacing_mm.len() != self.shape.len() {
            return Err(Error::Format("tensor axes and spacing must match the shape's rank".into()));
        }
        if n != self.data.len() {
            return Err(Error::Format(format!("tensor of shape {:?} needs {n} values, has {}", self.shape, self.data.len())));
        }
        Ok(())
    }

    /// Stacks images (each `ny × nx`) along a leading channel axis.
    pub fn from_channels(channels: &[&[f64]], nx: usize, ny: usize, pixel_size: f64) -> Result<Self> {
        let mut data = Vec::with_capacity(channels.len() * nx * ny);
        for ch in channels {
            if ch.len() != nx * ny {
                return Err(Error::Dimension(format!("channel has {} pixels, expected {}", ch.len(), nx * ny)));
            }
            data.extend(ch.iter().map(|&v| v as f32));
        }
        Self::new(vec![channels.len(), ny, nx], &["channel", "y", "x"], vec![0.0, pixel_size, pixel_size], data)
    }

    pub fn from_image(img: &[f64], nx: usize, ny: usize, pixel_size: f64) -> Result<Self> {
        if img.len() != nx * ny {
            return Err(Error::Dimension(format!("image has {} pixels, expected {}", img.len(), nx * ny)));
        }
        Self::new(vec![ny, nx], &["y", "x"], vec![pixel_size, pixel_size], img.iter().map(|&v| v as f32).collect())
    }

    pub fn from_components(c: &ComponentImage, pixel_size: f64) -> Result<Self> {
        Self::from_channels(&[&c.c[0], &c.c[1]], c.nx, c.ny, pixel_size)
    }

    pub fn from_sinogram(s: &CountSinogram) -> Result<Self> {
        let data = s.counts.iter().flatten().map(|&v| v as f32).collect();
        Self::new(vec![2, s.n_views, s.n_detectors], &["spectrum", "view", "detector"], vec![0.0; 3], data)
    }

    pub fn channel(&self, k: usize) -> Result<Vec<f64>> {
        let n: usize = self.shape.iter().skip(1).product();
        if self.shape.is_empty() || k >= self.shape[0] {
            return Err(Error::Format(format!("tensor of shape {:?} has no channel {k}", self.shape)));
        }
        Ok(self.data[k * n..(k + 1) * n].iter().map(|&v| v as f64).collect())
    }

    pub fn to_components(&self) -> Result<ComponentImage> {
        if self.shape.len() != 3 || self.shape[0] != 2 {
            return Err(Error::Format(format!("component image must have shape [2, ny, nx], got {:?}", self.shape)));
        }
        ComponentImage::new(self.shape[2], self.shape[1], self.channel(0)?, self.channel(1)?)
    }

    pub fn to_sinogram(&self) -> Result<CountSinogram> {
        if self.shape.len() != 3 || self.shape[0] != 2 {
            return Err(Error::Format(format!("count sinogram must have shape [2, views, detectors], got {:?}", self.shape)));
        }
        CountSinogram::new(self.shape[1], self.shape[2], [self.channel(0)?, self.channel(1)?])
    }

    /// 2D image of shape `[ny, nx]`.
    pub fn to_image(&self) -> Result<(usize, usize, Vec<f64>)> {
        if self.shape.len() != 2 {
            return Err(Error::Format(format!("image must have shape [ny, nx], got {:?}", self.shape)));
        }
        Ok((self.shape[1], self.shape[0], self.data.iter().map(|&v| v as f64).collect()))
    }

    /// Writes `header` (a `.json` path) and its `.raw` payload.
    pub fn write(&self, header: &Path) -> Result<()> {
        self.validate()?;
        let payload = payload_path(header)?;
        let h = TensorHeader {
            shape: self.shape.clone(),
            dtype: DTYPE.into(),
            axes: self.axes.clone(),
            spacing_mm: self.spacing_mm.clone(),
            payload: payload.file_name().unwrap().to_string_lossy().into_owned(),
        };
        let mut json = serde_json::to_string_pretty(&h).map_err(|e| Error::Json { path: header.into(), source: e })?;
        json.push('\n');
        fs::write(header, json).map_err(|e| Error::io(header, e))?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))
    }

    pub fn read(header: &Path) -> Result<Self> {
        let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
        let h: TensorHeader = serde_json::from_str(&text).map_err(|e| Error::Json { path: header.into(), source: e })?;
        if h.dtype != DTYPE {
            return Err(Error::Format(format!("{}: unsupported dtype '{}'", header.display(), h.dtype)));
        }
        let payload = header.parent().unwrap_or(Path::new(".")).join(&h.payload);
        let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
        let n: usize = h.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::Format(format!(
                "{}: payload has {} bytes, shape {:?} needs {}",
                payload.display(),
                bytes.len(),
                h.shape,
                4 * n
            )));
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Self { shape: h.shape, axes: h.axes, spacing_mm: h.spacing_mm, data };
        t.validate().map_err(|e| Error::Format(format!("{}: {e}", header.display())))?;
        Ok(t)
    }
}

fn payload_path(header: &Path) -> Result<PathBuf> {
    if header.extension().and_then(|e| e.to_str()) != Some("json") || header.file_name().is_none() {
        return Err(Error::Value(format!("tensor header path must end in .json: {}", header.display())));
    }
    Ok(header.with_extension("raw"))
}
