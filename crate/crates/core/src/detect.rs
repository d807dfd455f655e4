//! Per-pixel scoring against a prior target spectrum and nonlinear
//! background suppression.

use std::path::Path;

use crate::binio::{dim_u32, put_f32s, put_u32, Reader};
use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_DELTA: f64 = 0.1;
/// Spectra per forward pass during inference.
pub const INFERENCE_CHUNK: usize = 256;

const SCORE_MAGIC: &[u8; 4] = b"HTDS";

/// Raw cosine scores and their suppressed counterparts, row-major `H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    /// cosine similarity to the target feature, in `[-1, 1]`
    pub raw: Vec<f64>,
    /// `exp(−(μ − 1)² / δ)`, in `(0, 1]`
    pub suppressed: Vec<f64>,
    pub delta: f64,
}

/// `exp(−(μ − 1)² / δ)` elementwise.
pub fn suppress(scores: &[f64], delta: f64) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!("suppression width must be positive, got {delta}")));
    }
    Ok(scores.iter().map(|&mu| (-(mu - 1.0).powi(2) / delta).exp()).collect())
}

fn cosine<R: Real>(a: &[R], b: &[R]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (dot / denom).clamp(-1.0, 1.0)
    }
}

/// Scores every pixel of `cube` by the cosine between its feature and the
/// feature of `target`, computed once.
pub fn detect<R: Real>(model: &Model<R>, cube: &HsiCube, target: &[f32], delta: f64) -> Result<ScoreMap> {
    let bands = model.config().bands;
    if cube.bands() != bands || target.len() != bands {
        return Err(Error::DimensionMismatch(format!(
            "model expects {bands} bands, cube has {} and target {}",
            cube.bands(),
            target.len()
        )));
    }
    let lift = |v: &[f32]| v.iter().map(|&x| R::lit(x as f64)).collect::<Vec<R>>();
    let target_feature = model.features(&Tensor::new(vec![1, bands], lift(target))?)?;
    let feats = model.features_batched(&lift(cube.values()), INFERENCE_CHUNK)?;
    let d = model.config().head_dim;
    let raw: Vec<f64> = feats.chunks(d).map(|f| cosine(f, target_feature.data())).collect();
    let suppressed = suppress(&raw, delta)?;
    Ok(ScoreMap {
        height: cube.height(),
        width: cube.width(),
        raw,
        suppressed,
        delta,
    })
}

/// Cosine of every pixel spectrum with `target` directly, without a model.
pub fn spectral_cosine(cube: &HsiCube, target: &[f32]) -> Result<Vec<f64>> {
    if target.len() != cube.bands() {
        return Err(Error::DimensionMismatch(format!(
            "target has {} bands, cube {}",
            target.len(),
            cube.bands()
        )));
    }
    Ok((0..cube.pixels()).map(|i| cosine(cube.pixel(i), target)).collect())
}

/// A score grid as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

pub fn encode_scores(grid: &ScoreGrid) -> Result<Vec<u8>> {
    if grid.values.len() != grid.height * grid.width {
        return Err(Error::InvalidShape {
            op: "score map",
            msg: format!("{}×{} grid with {} values", grid.height, grid.width, grid.values.len()),
        });
    }
    let mut out = SCORE_MAGIC.to_vec();
    put_u32(&mut out, dim_u32(grid.height, "height")?);
    put_u32(&mut out, dim_u32(grid.width, "width")?);
    put_f32s(&mut out, grid.values.iter().copied());
    Ok(out)
}

pub fn decode_scores(bytes: &[u8]) -> Result<ScoreGrid> {
    let mut r = Reader::new(bytes);
    r.magic(SCORE_MAGIC)?;
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    let n = h.checked_mul(w).filter(|&n| n > 0).ok_or_else(|| Error::Format {
        offset: 4,
        msg: format!("invalid extents {h}×{w}"),
    })?;
    let values = r.f32s(n)?;
    r.finish()?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    Ok(ScoreGrid {
        height: h,
        width: w,
        values,
    })
}

pub fn write_scores(path: &Path, grid: &ScoreGrid) -> Result<()> {
    std::fs::write(path, encode_scores(grid)?)?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<ScoreGrid> {
    decode_scores(&std::fs::read(path)?)
}

impl ScoreMap {
    pub fn raw_grid(&self) -> ScoreGrid {
        self.grid(&self.raw)
    }

    pub fn suppressed_grid(&self) -> ScoreGrid {
        self.grid(&self.suppressed)
    }

    fn grid(&self, v: &[f64]) -> ScoreGrid {
        ScoreGrid {
            height: self.height,
            width: self.width,
            values: v.iter().map(|&x| x as f32).collect(),
        }
    }
}
