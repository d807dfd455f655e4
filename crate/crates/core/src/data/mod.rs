//! Hyperspectral cubes, ground-truth masks, spectra and a synthetic scene
//! generator.

mod formats;
mod synth;

pub use formats::{
    decode_cube, decode_mask, encode_cube, encode_mask, parse_spectrum, read_cube, read_mask, read_mask_for,
    read_spectrum, read_spectrum_for, write_cube, write_mask, write_spectrum,
};
pub use synth::{generate_scene, SyntheticScene, SyntheticSceneSpec};

use crate::error::{Error, Result};

/// An `H × W × B` cube stored band-interleaved-by-pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::InvalidShape {
                op: "cube",
                msg: format!("extents must be positive, got {height}×{width}×{bands}"),
            });
        }
        if values.len() != height * width * bands {
            return Err(Error::InvalidShape {
                op: "cube",
                msg: format!("{height}×{width}×{bands} needs {} values, got {}", height * width * bands, values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cube value {i} (pixel {}, band {})", i / bands, i % bands)));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Spectrum of the pixel at row-major index `i`.
    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.values[i * self.bands..(i + 1) * self.bands]
    }

    pub fn pixel_at(&self, row: usize, col: usize) -> &[f32] {
        self.pixel(row * self.width + col)
    }
}

/// Binary ground truth, row-major, one byte per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetMask {
    height: usize,
    width: usize,
    labels: Vec<bool>,
}

impl TargetMask {
    pub fn new(height: usize, width: usize, labels: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::InvalidShape {
                op: "mask",
                msg: format!("{height}×{width} mask with {} labels", labels.len()),
            });
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Errors unless the mask covers the same `H × W` grid as `cube`.
    pub fn check_matches(&self, cube: &HsiCube) -> Result<()> {
        if (self.height, self.width) != (cube.height(), cube.width()) {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}×{} but cube is {}×{}",
                self.height,
                self.width,
                cube.height(),
                cube.width()
            )));
        }
        Ok(())
    }
}

/// The target pixel nearest (Euclidean) to the mean target spectrum; ties go
/// to the lowest row-major index.
pub fn select_target_spectrum(cube: &HsiCube, mask: &TargetMask) -> Result<Vec<f32>> {
    mask.check_matches(cube)?;
    let targets: Vec<usize> = (0..cube.pixels()).filter(|&i| mask.labels()[i]).collect();
    if targets.is_empty() {
        return Err(Error::Config("mask contains no target pixels".into()));
    }
    let b = cube.bands();
    let mut mean = vec![0.0f64; b];
    for &i in &targets {
        for (m, &v) in mean.iter_mut().zip(cube.pixel(i)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= targets.len() as f64);
    let mut best = targets[0];
    let mut best_dist = f64::INFINITY;
    for &i in &targets {
        let d: f64 = cube.pixel(i).iter().zip(&mean).map(|(&v, m)| (v as f64 - m).powi(2)).sum();
        if d < best_dist {
            best_dist = d;
            best = i;
        }
    }
    Ok(cube.pixel(best).to_vec())
}
