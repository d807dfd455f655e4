//! Linear-mixing synthetic scenes with implanted sub-pixel targets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{HsiCube, TargetMask};
use crate::error::{Error, Result};

/// Largest cosine allowed between the target signature and any background
/// endmember.
const MAX_TARGET_COSINE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// background endmembers
    pub endmembers: usize,
    /// signal-to-noise ratio in dB; infinity disables noise
    pub snr_db: f64,
    /// target fill fraction range `[lo, hi]`
    pub abundance_lo: f64,
    pub abundance_hi: f64,
    pub target_pixels: usize,
    /// side of the square clusters targets are placed in
    pub target_blob: usize,
    /// Gaussian smoothing (pixels) of the abundance field
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            bands: 60,
            endmembers: 4,
            snr_db: 30.0,
            abundance_lo: 0.5,
            abundance_hi: 1.0,
            target_pixels: 40,
            target_blob: 2,
            smoothness: 4.0,
            seed: 7,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return bad("scene extents must be positive".into());
        }
        if self.endmembers < 2 {
            return bad(format!("need at least 2 endmembers, got {}", self.endmembers));
        }
        if !(0.0 < self.abundance_lo && self.abundance_lo <= self.abundance_hi && self.abundance_hi <= 1.0) {
            return bad(format!(
                "abundance range [{}, {}] must satisfy 0 < lo ≤ hi ≤ 1",
                self.abundance_lo, self.abundance_hi
            ));
        }
        if self.snr_db.is_nan() {
            return bad("snr_db is NaN".into());
        }
        if self.target_blob == 0 || self.target_blob > self.height.min(self.width) {
            return bad(format!("target_blob {} does not fit the scene", self.target_blob));
        }
        if self.target_pixels == 0 || self.target_pixels * 4 > self.height * self.width {
            return bad(format!(
                "{} target pixels in a {}×{} scene (at most a quarter of the pixels)",
                self.target_pixels, self.height, self.width
            ));
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return bad(format!("smoothness {} must be finite and non-negative", self.smoothness));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub cube: HsiCube,
    pub mask: TargetMask,
    /// the implanted signature
    pub target: Vec<f32>,
    pub endmembers: Vec<Vec<f32>>,
    /// background abundances, `H·W × E`, before implanting
    pub abundances: Vec<f64>,
    /// mean squared value of the noise-free cube
    pub signal_power: f64,
    /// mean squared value of the noise actually added
    pub noise_power: f64,
}

/// Peak-normalised sum of 3–5 Gaussian bumps over the band axis.
fn smooth_signature(bands: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let b = bands as f64;
    let bumps = rng.random_range(3..=5);
    let params: Vec<(f64, f64, f64)> = (0..bumps)
        .map(|_| {
            let center = rng.random_range(0.0..b);
            let width = rng.random_range((b / 20.0).max(1.0)..(b / 5.0).max(1.5));
            let amp = rng.random_range(0.2..1.0);
            (center, width, amp)
        })
        .collect();
    let raw: Vec<f64> = (0..bands)
        .map(|i| {
            let x = i as f64;
            params
                .iter()
                .map(|&(c, w, a)| a * (-(x - c).powi(2) / (2.0 * w * w)).exp())
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    let peak = raw.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    raw.into_iter().map(|v| v / peak).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return field.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = (-radius..=radius)
                .zip(&kernel)
                .map(|(d, k)| k * field[r * w + clamp(c as isize + d, w)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = (-radius..=radius)
                .zip(&kernel)
                .map(|(d, k)| k * tmp[clamp(r as isize + d, h) * w + c])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// Top-left corners of non-touching square blobs covering `count` pixels.
fn place_targets(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let (h, w, s) = (spec.height, spec.width, spec.target_blob);
    let mut labels = vec![false; h * w];
    let mut blocked = vec![false; h * w];
    let mut corners: Vec<(usize, usize)> = (0..=h - s).flat_map(|r| (0..=w - s).map(move |c| (r, c))).collect();
    corners.shuffle(rng);
    let mut placed = 0;
    for (r, c) in corners {
        if placed == spec.target_pixels {
            break;
        }
        let cells: Vec<usize> = (r..r + s).flat_map(|rr| (c..c + s).map(move |cc| rr * w + cc)).collect();
        if cells.iter().any(|&i| blocked[i]) {
            continue;
        }
        for &i in cells.iter().take(spec.target_pixels - placed) {
            labels[i] = true;
            placed += 1;
        }
        // keep a one-pixel gap around each blob
        for rr in r.saturating_sub(1)..(r + s + 1).min(h) {
            for cc in c.saturating_sub(1)..(c + s + 1).min(w) {
                blocked[rr * w + cc] = true;
            }
        }
    }
    if placed < spec.target_pixels {
        return Err(Error::Config(format!(
            "could only place {placed} of {} target pixels",
            spec.target_pixels
        )));
    }
    Ok(labels)
}

/// Builds a scene from `spec`; the same spec always gives the same scene.
pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, b, e) = (spec.height, spec.width, spec.bands, spec.endmembers);
    let n = h * w;

    let background: Vec<Vec<f64>> = (0..e).map(|_| smooth_signature(b, &mut rng)).collect();
    let mut target = smooth_signature(b, &mut rng);
    let mut tries = 0;
    while background.iter().any(|m| cosine(m, &target) > MAX_TARGET_COSINE) {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::Config("could not draw a distinct target signature".into()));
        }
        target = smooth_signature(b, &mut rng);
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let fields: Vec<Vec<f64>> = (0..e)
        .map(|_| {
            let white: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let f = blur(&white, h, w, spec.smoothness);
            let mean = f.iter().sum::<f64>() / n as f64;
            let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
            f.into_iter().map(|v| 2.0 * (v - mean) / sd).collect()
        })
        .collect();
    let mut abundances = vec![0.0; n * e];
    for i in 0..n {
        let row = &mut abundances[i * e..(i + 1) * e];
        let top = (0..e).map(|k| fields[k][i]).fold(f64::NEG_INFINITY, f64::max);
        for (k, a) in row.iter_mut().enumerate() {
            *a = (fields[k][i] - top).exp();
        }
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|a| *a /= z);
    }

    let labels = place_targets(spec, &mut rng)?;
    let mut clean = vec![0.0f64; n * b];
    for i in 0..n {
        let px = &mut clean[i * b..(i + 1) * b];
        for (k, m) in background.iter().enumerate() {
            let a = abundances[i * e + k];
            px.iter_mut().zip(m).for_each(|(p, v)| *p += a * v);
        }
        if labels[i] {
            let f = if spec.abundance_lo == spec.abundance_hi {
                spec.abundance_lo
            } else {
                rng.random_range(spec.abundance_lo..=spec.abundance_hi)
            };
            px.iter_mut().zip(&target).for_each(|(p, t)| *p = f * t + (1.0 - f) * *p);
        }
    }

    let signal_power = clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
    let mut noise_power = 0.0;
    let values: Vec<f32> = if spec.snr_db.is_infinite() && spec.snr_db > 0.0 {
        clean.iter().map(|&v| v as f32).collect()
    } else {
        let sigma = (signal_power / 10f64.powf(spec.snr_db / 10.0)).sqrt();
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise level: {e}")))?;
        let mut sum_sq = 0.0;
        let v = clean
            .iter()
            .map(|&c| {
                let z = noise.sample(&mut rng);
                let out = (c + z) as f32;
                sum_sq += (out as f64 - c).powi(2);
                out
            })
            .collect();
        noise_power = sum_sq / clean.len() as f64;
        v
    };

    let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    Ok(SyntheticScene {
        cube: HsiCube::new(h, w, b, values)?,
        mask: TargetMask::new(h, w, labels)?,
        target: to_f32(&target),
        endmembers: background.iter().map(|m| to_f32(m)).collect(),
        abundances,
        signal_power,
        noise_power,
    })
}
