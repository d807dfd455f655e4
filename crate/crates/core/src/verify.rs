//! Self-checks against independent oracles: finite differences for the
//! whole training pipeline, the step-by-step recurrence for the parallel
//! scan, and the pairwise ranking statistic for the ROC area.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::sesa_view_on_tape;
use crate::detect::suppress;
use crate::error::{Error, Result};
use crate::eval::{auc_all, normalize_scores, roc};
use crate::loss::batch_loss_on_tape;
use crate::model::{Model, ModelConfig};
use crate::ssm::{discretize, scan_parallel, scan_sequential};
use crate::tensor::{grad_check_many, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Scan,
    Metrics,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Grad, Suite::Scan, Suite::Metrics];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Scan => "scan",
            Suite::Metrics => "metrics",
        }
    }

    /// `all` expands to every suite.
    pub fn parse_list(s: &str) -> Result<Vec<Suite>> {
        match s {
            "all" => Ok(Self::ALL.to_vec()),
            "grad" => Ok(vec![Suite::Grad]),
            "scan" => Ok(vec![Suite::Scan]),
            "metrics" => Ok(vec![Suite::Metrics]),
            other => Err(Error::Config(format!("unknown suite {other:?} (grad, scan, metrics, all)"))),
        }
    }

    pub fn run(self, seed: u64) -> Result<SuiteReport> {
        match self {
            Suite::Grad => grad_suite(seed),
            Suite::Scan => scan_suite(seed),
            Suite::Metrics => metrics_suite(seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

/// Pipeline sizes used by the gradient suite.
pub fn grad_suite_config() -> ModelConfig {
    ModelConfig {
        bands: 40,
        group_len: 8,
        embed_dim: 8,
        state_dim: 8,
        head_dim: 16,
        depth: 1,
        leaky_slope: 0.01,
    }
}

/// Contrastive loss of `patches` (each `[p², B]`) through augmentation, the
/// model and the loss, with the augmented views as anchors.
pub fn pipeline_loss(model: &Model<f64>, tape: &mut Tape<f64>, params: &[Var], patches: &[Var], alpha: f64) -> Result<Var> {
    let mut views = Vec::with_capacity(patches.len());
    let mut centers = Vec::with_capacity(patches.len());
    for &patch in patches {
        let n = tape.shape(patch)[0];
        views.push(sesa_view_on_tape(tape, patch)?);
        centers.push(tape.slice(patch, 0, (n - 1) / 2, 1)?);
    }
    let views = tape.concat(&views, 0)?;
    let centers = tape.concat(&centers, 0)?;
    let x = model.forward(tape, params, views)?;
    let y = model.forward(tape, params, centers)?;
    batch_loss_on_tape(tape, x, y, alpha)
}

/// Central differences over the model parameters and the input patches.
pub fn grad_suite(seed: u64) -> Result<SuiteReport> {
    let (pairs, side) = (4, 3);
    let model = Model::<f64>::new(grad_suite_config(), seed)?;
    let bands = model.config().bands;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6752_4144);
    let patches: Vec<Tensor<f64>> = (0..pairs)
        .map(|_| Tensor::from_fn(&[side * side, bands], |_| rng.random_range(0.1..1.0)))
        .collect();
    let n_params = model.params().len();
    let points: Vec<Tensor<f64>> = model.params().iter().cloned().chain(patches).collect();
    let report = grad_check_many(
        |tape, vars| pipeline_loss(&model, tape, &vars[..n_params], &vars[n_params..], 0.1),
        &points,
        1e-6,
        Some(4),
        seed,
    )?;
    Ok(SuiteReport {
        suite: "grad",
        max_error: report.max_rel_error,
        tolerance: 1e-4,
        cases: report.coords_checked,
    })
}

/// Largest elementwise difference relative to the largest reference magnitude.
pub fn relative_error(value: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    value
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

/// One random discretised scan instance `(Ā, B̄, C, z)` of length `len`.
pub fn random_scan_instance(len: usize, channels: usize, state: usize, rng: &mut ChaCha8Rng) -> Result<[Tensor<f64>; 4]> {
    let delta = Tensor::from_fn(&[len, channels], |_| rng.random_range(0.001..2.0));
    let a = Tensor::from_fn(&[channels, state], |_| -rng.random_range(0.05..4.0));
    let b = Tensor::from_fn(&[len, state], |_| rng.random_range(-1.0..1.0));
    let c = Tensor::from_fn(&[len, state], |_| rng.random_range(-1.0..1.0));
    let z = Tensor::from_fn(&[len, channels], |_| rng.random_range(-1.0..1.0));
    let (a_bar, b_bar) = discretize(&delta, &a, &b)?;
    Ok([a_bar, b_bar, c, z])
}

/// Parallel scan against the sequential recurrence on 100 random instances.
pub fn scan_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = 100;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let len = rng.random_range(1..=256);
        let channels = rng.random_range(1..=8);
        let state = rng.random_range(1..=8);
        let [a_bar, b_bar, c, z] = random_scan_instance(len, channels, state, &mut rng)?;
        let s = scan_sequential(&a_bar, &b_bar, &c, &z)?;
        let p = scan_parallel(&a_bar, &b_bar, &c, &z)?;
        worst = worst.max(relative_error(p.data(), s.data()));
    }
    Ok(SuiteReport {
        suite: "scan",
        max_error: worst,
        tolerance: 1e-10,
        cases,
    })
}

/// Share of target/background pairs ranked correctly, ties counted half.
pub fn pairwise_auc(scores: &[f64], mask: &[bool]) -> f64 {
    let targets: Vec<f64> = scores.iter().zip(mask).filter(|(_, &t)| t).map(|(&s, _)| s).collect();
    let background: Vec<f64> = scores.iter().zip(mask).filter(|(_, &t)| !t).map(|(&s, _)| s).collect();
    let mut wins = 0.0;
    for &t in &targets {
        for &b in &background {
            wins += if t > b {
                1.0
            } else if t == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (targets.len() * background.len()) as f64
}

/// Trapezoidal area against [`pairwise_auc`] on 200 random instances, plus
/// the composite identities and invariance under suppression.
pub fn metrics_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = 200;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(2..=300);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        mask[0] = true;
        mask[1] = false;
        let scores = normalize_scores(&raw);
        let report = auc_all(&roc(&scores, &mask)?)?;
        worst = worst.max((report.auc_pf_pd - pairwise_auc(&scores, &mask)).abs());
        let oa = report.auc_pf_pd + report.auc_tau_pd - report.auc_tau_pf;
        let snpr = report.auc_tau_pd / report.auc_tau_pf;
        if report.auc_oa != oa || report.auc_snpr != snpr {
            worst = f64::INFINITY;
        }
        let suppressed = auc_all(&roc(&suppress(&raw, 0.1)?, &mask)?)?;
        worst = worst.max((suppressed.auc_pf_pd - report.auc_pf_pd).abs());
    }
    Ok(SuiteReport {
        suite: "metrics",
        max_error: worst,
        tolerance: 1e-12,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!(Suite::parse_list("all").unwrap().len(), 3);
        assert_eq!(Suite::parse_list("scan").unwrap(), vec![Suite::Scan]);
        assert!(matches!(Suite::parse_list("bogus"), Err(Error::Config(_))));
    }

    #[test]
    fn scan_and_metrics_suites_pass() {
        for suite in [Suite::Scan, Suite::Metrics] {
            let r = suite.run(3).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn grad_suite_passes() {
        let r = Suite::Grad.run(1).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn pairwise_hand_case() {
        assert_eq!(pairwise_auc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]), 0.75);
        assert_eq!(pairwise_auc(&[0.5, 0.5], &[true, false]), 0.5);
    }
}
