//! AdamW with a linear-warmup, cosine-decay schedule over contrastive
//! batches of augmented pairs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{build_pairs, epoch_batches};
use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::loss::batch_loss_on_tape;
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Self::F32),
            "f64" | "64" => Ok(Self::F64),
            other => Err(Error::Config(format!("precision must be f32 or f64, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// contrastive temperature
    pub alpha: f64,
    /// odd side length of the augmentation window
    pub patch: usize,
    pub seed: u64,
    pub precision: Precision,
    pub group_len: usize,
    pub embed_dim: usize,
    pub state_dim: usize,
    pub head_dim: usize,
    pub depth: usize,
    pub leaky_slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 80,
            base_lr: 1e-4,
            weight_decay: 1e-4,
            warmup_fraction: 0.1,
            alpha: 0.1,
            patch: 5,
            seed: 0,
            precision: Precision::F32,
            group_len: 30,
            embed_dim: 16,
            state_dim: 16,
            head_dim: 32,
            depth: 1,
            leaky_slope: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, bands: usize) -> ModelConfig {
        ModelConfig {
            bands,
            group_len: self.group_len,
            embed_dim: self.embed_dim,
            state_dim: self.state_dim,
            head_dim: self.head_dim,
            depth: self.depth,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        for (v, name) in [(self.base_lr, "base_lr"), (self.alpha, "alpha")] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction must be in (0, 1), got {}", self.warmup_fraction));
        }
        if self.patch % 2 == 0 {
            return bad(format!("patch must be odd, got {}", self.patch));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based) of `total` steps: linear from 0 over
/// the first `⌈warmup_fraction · total⌉` steps, then half-cosine to 0 at
/// the last step.
pub fn lr_at(step: usize, total: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * total as f64).ceil() as usize;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return base_lr;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-tensor AdamW moments.
#[derive(Clone, Debug)]
pub struct AdamW<R> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
    t: u64,
}

impl<R: Real> AdamW<R> {
    pub fn new(params: &[Tensor<R>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| vec![R::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![R::zero(); p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<R>], grads: &[Vec<R>], lr: f64, wd: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters, {} gradients, optimizer tracks {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::DimensionMismatch(format!(
                    "parameter {i} has {} values, gradient {}",
                    p.len(),
                    g.len()
                )));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i} at {j}; step rejected")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 / (1.0 - self.beta1.powi(t));
        let c2 = 1.0 / (1.0 - self.beta2.powi(t));
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let (one, eps, lr, wd) = (R::one(), R::lit(self.eps), R::lit(lr), R::lit(wd));
        let (c1, c2) = (R::lit(c1), R::lit(c2));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let update = (*mi * c1) / ((*vi * c2).sqrt() + eps) + wd * *theta;
                *theta -= lr * update;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based
    pub epoch: usize,
    pub mean_loss: f64,
    /// rate used at the epoch's last step
    pub lr: f64,
}

/// Where to persist training artefacts as they are produced.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOutputs<'a> {
    /// rewritten after every completed epoch
    pub checkpoint: Option<&'a Path>,
    /// `epoch,mean_loss,lr`, flushed after every epoch
    pub loss_log: Option<&'a Path>,
}

/// Copies `rows × bands` f32 values into a training-precision tensor.
fn to_tensor<R: Real>(values: &[f32], rows: usize, bands: usize) -> Result<Tensor<R>> {
    Tensor::new(vec![rows, bands], values.iter().map(|&v| R::lit(v as f64)).collect())
}

/// Contrastive loss and gradients for one batch of pairs. Both views go
/// through the shared backbone in a single `[2P, B]` pass.
pub fn loss_and_grads<R: Real>(
    model: &Model<R>,
    views: &[f32],
    centers: &[f32],
    alpha: f64,
) -> Result<(f64, Vec<Vec<R>>)> {
    let bands = model.config().bands;
    let p = views.len() / bands;
    let both = to_tensor::<R>(&[views, centers].concat(), 2 * p, bands)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let x = tape.constant(both);
    let feats = model.forward(&mut tape, &vars, x)?;
    let fx = tape.slice(feats, 0, 0, p)?;
    let fy = tape.slice(feats, 0, p, p)?;
    let loss = batch_loss_on_tape(&mut tape, fx, fy, alpha)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![R::zero(); p.len()]))
        .collect();
    Ok((value, g))
}

/// Loss of a freshly initialised model on one sampled batch.
pub fn initial_loss<R: Real>(cube: &HsiCube, cfg: &TrainConfig) -> Result<f64> {
    let model = Model::<R>::new(cfg.model_config(cube.bands()), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = crate::augment::sample_batch(cube, cfg.patch, cfg.batch_size, &mut rng)?;
    Ok(loss_and_grads(&model, &batch.views, &batch.centers, cfg.alpha)?.0)
}

pub struct TrainResult<R> {
    pub model: Model<R>,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

/// Trains a model from scratch; `(cube, cfg)` fully determine the result.
///
/// A non-finite loss or gradient aborts with [`Error::Diverged`]; the
/// checkpoint on disk then still holds the last completed epoch.
pub fn train<R: Real>(cube: &HsiCube, cfg: &TrainConfig, out: TrainOutputs<'_>) -> Result<TrainResult<R>> {
    train_with(cube, cfg, out, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<R: Real>(
    cube: &HsiCube,
    cfg: &TrainConfig,
    out: TrainOutputs<'_>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainResult<R>> {
    cfg.validate()?;
    let n = cube.pixels();
    if cfg.batch_size > n {
        return Err(Error::Config(format!("batch size {} exceeds the {n} pixels", cfg.batch_size)));
    }
    let mut model = Model::<R>::new(cfg.model_config(cube.bands()), cfg.seed)?;
    let mut opt = AdamW::new(model.params());
    // separate stream from parameter initialisation
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5DEE_CE66_D1CE_5EED);
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut log_file = match out.loss_log {
        Some(path) => {
            let mut f = BufWriter::new(File::create(path)?);
            writeln!(f, "epoch,mean_loss,lr")?;
            f.flush()?;
            Some(f)
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        let mut lr = 0.0;
        for indices in epoch_batches(n, cfg.batch_size, &mut rng)? {
            let batch = build_pairs(cube, &indices, cfg.patch)?;
            let (loss, grads) = loss_and_grads(&model, &batch.views, &batch.centers, cfg.alpha)?;
            let diverged = Error::Diverged { epoch, step, loss };
            if !loss.is_finite() {
                return Err(diverged);
            }
            lr = lr_at(step, total, cfg.base_lr, cfg.warmup_fraction);
            opt.step(model.params_mut(), &grads, lr, cfg.weight_decay)
                .map_err(|e| match e {
                    Error::NonFinite(_) => diverged,
                    other => other,
                })?;
            sum += loss;
            step += 1;
        }
        if model.params().iter().any(|p| !p.all_finite()) {
            return Err(Error::Diverged {
                epoch,
                step,
                loss: f64::NAN,
            });
        }
        let entry = EpochLog {
            epoch,
            mean_loss: sum / per_epoch as f64,
            lr,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{},{},{}", entry.epoch, entry.mean_loss, entry.lr)?;
            f.flush()?;
        }
        if let Some(path) = out.checkpoint {
            save_checkpoint(&model, path)?;
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainResult { model, log, steps: step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SyntheticSceneSpec};

    #[test]
    fn first_adamw_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::full(&[1], 1.0)];
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &[vec![1.0]], 0.1, 0.0).unwrap();
        assert!((p[0].item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::<f64>::full(&[2], 1.5)];
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &[vec![0.0, 0.0]], 0.1, 0.0).unwrap();
        assert_eq!(p[0].data(), &[1.5, 1.5]);
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut p = vec![Tensor::<f64>::full(&[1], 1.0)];
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &[vec![0.0]], 0.1, 0.1).unwrap();
        assert!((p[0].item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn two_step_trace_matches_hand_computed_adam() {
        let mut p = vec![Tensor::<f64>::full(&[1], 0.5)];
        let mut opt = AdamW::new(&p);
        let (lr, gs) = (0.01, [0.2, -0.4]);
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.5f64);
        for (t, &g) in gs.iter().enumerate() {
            opt.step(&mut p, &[vec![g]], lr, 0.0).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            theta -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((p[0].item() - theta).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = vec![Tensor::<f64>::full(&[2], 1.0)];
        let mut opt = AdamW::new(&p);
        let err = opt.step(&mut p, &[vec![0.1, f64::NAN]], 0.1, 0.1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p[0].data(), &[1.0, 1.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn schedule_examples() {
        // 200 epochs of one step each, 20 warmup steps
        let base = 1e-4;
        assert!((lr_at(10, 200, base, 0.1) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(0, 200, base, 0.1), 0.0);
        assert_eq!(lr_at(20, 200, base, 0.1), base);
        assert!(lr_at(199, 200, base, 0.1).abs() < 1e-20);
        let before = lr_at(19, 200, base, 0.1);
        assert!((base - before) <= base / 20.0 + 1e-18);
        let after = lr_at(21, 200, base, 0.1);
        assert!(base - after < 1e-7);
        for s in 20..199 {
            assert!(lr_at(s + 1, 200, base, 0.1) <= lr_at(s, 200, base, 0.1));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig { warmup_fraction: 1.0, ..TrainConfig::default() },
            TrainConfig { alpha: 0.0, ..TrainConfig::default() },
            TrainConfig { patch: 4, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    fn tiny_setup() -> (HsiCube, TrainConfig) {
        let scene = generate_scene(&SyntheticSceneSpec {
            height: 12,
            width: 12,
            bands: 24,
            target_pixels: 8,
            ..SyntheticSceneSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 40,
            patch: 3,
            seed: 3,
            group_len: 4,
            embed_dim: 4,
            state_dim: 4,
            head_dim: 8,
            base_lr: 1e-3,
            ..TrainConfig::default()
        };
        (scene.cube, cfg)
    }

    #[test]
    fn seeded_training_replays_exactly() {
        let (cube, cfg) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let (log_a, log_b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let a = train::<f32>(&cube, &cfg, TrainOutputs { checkpoint: None, loss_log: Some(&log_a) }).unwrap();
        let b = train::<f32>(&cube, &cfg, TrainOutputs { checkpoint: None, loss_log: Some(&log_b) }).unwrap();
        assert_eq!(std::fs::read(&log_a).unwrap(), std::fs::read(&log_b).unwrap());
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.steps, 2 * 144usize.div_ceil(40));
        let text = std::fs::read_to_string(&log_a).unwrap();
        assert_eq!(text.lines().next(), Some("epoch,mean_loss,lr"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn divergence_keeps_last_good_checkpoint() {
        let (cube, cfg) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.htdm");
        let cfg = TrainConfig { base_lr: 1e30, epochs: 4, ..cfg };
        let res = train::<f32>(&cube, &cfg, TrainOutputs { checkpoint: Some(&ckpt), loss_log: None });
        match res {
            Err(Error::Diverged { .. }) => {
                if ckpt.exists() {
                    let m: Model<f32> = crate::model::load_checkpoint(&ckpt).unwrap();
                    assert!(m.params().iter().all(Tensor::all_finite));
                }
            }
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("training with a huge rate should diverge"),
        }
    }
}
