//! Spatial-encoded spectral augmentation: a pixel's second view is the
//! cosine-softmax weighted mix of its spatial neighbourhood.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Added to every norm before dividing.
pub const NORM_GUARD: f64 = 1e-12;

/// A `p × p` neighbourhood, border pixels replicated.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `p² × B`, row-major over the window
    pub pixels: Vec<f32>,
    pub side: usize,
    pub bands: usize,
    /// `(row, col)` of the center
    pub location: (usize, usize),
}

impl Patch {
    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.side == 0
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.pixels[i * self.bands..(i + 1) * self.bands]
    }

    pub fn center(&self) -> &[f32] {
        self.pixel((self.len() - 1) / 2)
    }
}

fn check_side(side: usize) -> Result<()> {
    if side == 0 || side % 2 == 0 {
        return Err(Error::Config(format!("patch size must be odd and positive, got {side}")));
    }
    Ok(())
}

/// The window centred on `(row, col)` with clamp-to-edge borders.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, side: usize) -> Result<Patch> {
    check_side(side)?;
    if row >= cube.height() || col >= cube.width() {
        return Err(Error::InvalidShape {
            op: "extract_patch",
            msg: format!("center ({row}, {col}) outside {}×{}", cube.height(), cube.width()),
        });
    }
    let half = (side / 2) as isize;
    let b = cube.bands();
    let mut pixels = Vec::with_capacity(side * side * b);
    for dr in -half..=half {
        let r = (row as isize + dr).clamp(0, cube.height() as isize - 1) as usize;
        for dc in -half..=half {
            let c = (col as isize + dc).clamp(0, cube.width() as isize - 1) as usize;
            pixels.extend_from_slice(cube.pixel_at(r, c));
        }
    }
    Ok(Patch {
        pixels,
        side,
        bands: b,
        location: (row, col),
    })
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

/// Softmax over patch pixels of their cosine with the center.
pub fn sesa_weights(patch: &Patch) -> Result<Vec<f64>> {
    if patch.pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("patch at {:?}", patch.location)));
    }
    let y = patch.center();
    let ny = norm(y) + NORM_GUARD;
    let cos: Vec<f64> = (0..patch.len())
        .map(|i| {
            let p = patch.pixel(i);
            let dot: f64 = p.iter().zip(y).map(|(&a, &b)| a as f64 * b as f64).sum();
            dot / (ny * (norm(p) + NORM_GUARD))
        })
        .collect();
    let top = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = cos.iter().map(|c| (c - top).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / z).collect())
}

/// The augmented view `Pᵀ W`, rounded once to f32.
pub fn sesa_view(patch: &Patch) -> Result<Vec<f32>> {
    let w = sesa_weights(patch)?;
    let mut x = vec![0.0f64; patch.bands];
    for (i, &wi) in w.iter().enumerate() {
        x.iter_mut().zip(patch.pixel(i)).for_each(|(acc, &p)| *acc += wi * p as f64);
    }
    Ok(x.into_iter().map(|v| v as f32).collect())
}

/// Differentiable view of one patch `[p², B]` on the tape, returning `[1, B]`.
///
/// Uses unguarded norms; meant for gradient checks of the whole pipeline.
pub fn sesa_view_on_tape<R: Real>(tape: &mut Tape<R>, patch: Var) -> Result<Var> {
    let shape = tape.shape(patch).to_vec();
    let [n, _] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "sesa_view_on_tape",
            msg: format!("expected [p², B], got {shape:?}"),
        });
    };
    let center = tape.slice(patch, 0, (n - 1) / 2, 1)?;
    let pn = tape.l2_normalize_rows(patch);
    let cn = tape.l2_normalize_rows(center);
    let ct = tape.transpose(cn)?;
    let cos = tape.matmul(pn, ct)?;
    let cos = tape.reshape(cos, &[1, n])?;
    let lse = tape.logsumexp_rows(cos);
    let shifted = tape.sub(cos, lse)?;
    let w = tape.exp(shifted);
    tape.matmul(w, patch)
}

/// Training pairs: `views[i]` is the augmented view of `centers[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub bands: usize,
    /// `P × B`
    pub views: Vec<f32>,
    /// `P × B`
    pub centers: Vec<f32>,
    pub locations: Vec<(usize, usize)>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Pairs for the pixels at the given row-major indices.
pub fn build_pairs(cube: &HsiCube, indices: &[usize], side: usize) -> Result<PairBatch> {
    check_side(side)?;
    let b = cube.bands();
    let mut batch = PairBatch {
        bands: b,
        views: Vec::with_capacity(indices.len() * b),
        centers: Vec::with_capacity(indices.len() * b),
        locations: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        let (r, c) = (i / cube.width(), i % cube.width());
        let patch = extract_patch(cube, r, c, side)?;
        batch.views.extend(sesa_view(&patch)?);
        batch.centers.extend_from_slice(cube.pixel(i));
        batch.locations.push((r, c));
    }
    Ok(batch)
}

/// `size` distinct centers drawn uniformly over all pixels.
pub fn sample_batch(cube: &HsiCube, side: usize, size: usize, rng: &mut impl Rng) -> Result<PairBatch> {
    let n = cube.pixels();
    if size == 0 || size > n {
        return Err(Error::Config(format!("batch size {size} must be in 1..={n}")));
    }
    let indices = sample(rng, n, size).into_vec();
    build_pairs(cube, &indices, side)
}

/// One epoch: a fresh permutation of every pixel split into `⌈n / size⌉`
/// batches.
pub fn epoch_batches(pixels: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if size == 0 || size > pixels {
        return Err(Error::Config(format!("batch size {size} must be in 1..={pixels}")));
    }
    let mut order: Vec<usize> = (0..pixels).collect();
    order.shuffle(rng);
    Ok(order.chunks(size).map(<[usize]>::to_vec).collect())
}
