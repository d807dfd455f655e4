//! Three-dimensional ROC analysis: detection and false-alarm rates as a
//! function of threshold, the five area summaries, and per-class box
//! statistics.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Unfolded ROC curves over an ascending threshold grid.
///
/// The grid is `{0} ∪ unique scores ∪ {1}` followed by one sentinel entry
/// standing for `1⁺` (stored as `τ = 1`) at which nothing is detected.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurves {
    pub thresholds: Vec<f64>,
    pub pf: Vec<f64>,
    pub pd: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AucReport {
    pub auc_pf_pd: f64,
    pub auc_tau_pd: f64,
    pub auc_tau_pf: f64,
    /// `auc_pf_pd + auc_tau_pd − auc_tau_pf`
    pub auc_oa: f64,
    /// `auc_tau_pd / auc_tau_pf`, `+∞` when the false-alarm area is zero
    pub auc_snpr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separability {
    pub background: BoxSummary,
    pub target: BoxSummary,
}

/// Splits scores by class, rejecting size mismatches and single-class masks.
fn split(scores: &[f64], mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != mask.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for a mask of {} pixels",
            scores.len(),
            mask.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let (mut targets, mut background) = (Vec::new(), Vec::new());
    for (&s, &t) in scores.iter().zip(mask) {
        if t {
            targets.push(s);
        } else {
            background.push(s);
        }
    }
    if targets.is_empty() || background.is_empty() {
        return Err(Error::Config(format!(
            "mask needs both classes, has {} target and {} background pixels",
            targets.len(),
            background.len()
        )));
    }
    Ok((targets, background))
}

/// Min–max rescaling to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|&s| ((s - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Fraction of `sorted` (ascending) that is `≥ tau`.
fn rate_at(sorted: &[f64], tau: f64) -> f64 {
    let below = sorted.partition_point(|&s| s < tau);
    (sorted.len() - below) as f64 / sorted.len() as f64
}

/// ROC curves of normalised scores against a ground-truth mask.
pub fn roc(scores: &[f64], mask: &[bool]) -> Result<RocCurves> {
    let (mut targets, mut background) = split(scores, mask)?;
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Config(format!("scores must be normalised to [0, 1], found {s}")));
    }
    targets.sort_by(f64::total_cmp);
    background.sort_by(f64::total_cmp);
    let mut grid: Vec<f64> = scores.to_vec();
    grid.push(0.0);
    grid.push(1.0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut pf: Vec<f64> = grid.iter().map(|&t| rate_at(&background, t)).collect();
    let mut pd: Vec<f64> = grid.iter().map(|&t| rate_at(&targets, t)).collect();
    grid.push(1.0);
    pf.push(0.0);
    pd.push(0.0);
    Ok(RocCurves {
        thresholds: grid,
        pf,
        pd,
    })
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]).abs() * (y[0] + y[1]) / 2.0)
        .sum()
}

/// Trapezoidal areas under the three unfolded curves plus the two composites.
pub fn auc_all(curves: &RocCurves) -> Result<AucReport> {
    let n = curves.thresholds.len();
    if n < 2 || curves.pf.len() != n || curves.pd.len() != n {
        return Err(Error::InvalidShape {
            op: "auc",
            msg: format!("{n} thresholds, {} false-alarm and {} detection rates", curves.pf.len(), curves.pd.len()),
        });
    }
    let auc_pf_pd = trapezoid(&curves.pf, &curves.pd);
    let auc_tau_pd = trapezoid(&curves.thresholds, &curves.pd);
    let auc_tau_pf = trapezoid(&curves.thresholds, &curves.pf);
    let auc_snpr = if auc_tau_pf == 0.0 {
        f64::INFINITY
    } else {
        auc_tau_pd / auc_tau_pf
    };
    Ok(AucReport {
        auc_pf_pd,
        auc_tau_pd,
        auc_tau_pf,
        auc_oa: auc_pf_pd + auc_tau_pd - auc_tau_pf,
        auc_snpr,
    })
}

/// Linear-interpolation quantile of ascending `sorted` at `q ∈ [0, 1]`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_summary(values: &[f64]) -> Result<BoxSummary> {
    if values.is_empty() {
        return Err(Error::Config("box summary of an empty class".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(BoxSummary {
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    })
}

pub fn separability_stats(scores: &[f64], mask: &[bool]) -> Result<Separability> {
    let (targets, background) = split(scores, mask)?;
    Ok(Separability {
        background: box_summary(&background)?,
        target: box_summary(&targets)?,
    })
}

pub fn roc_csv(curves: &RocCurves) -> String {
    let mut out = String::from("tau,pf,pd\n");
    for ((t, f), d) in curves.thresholds.iter().zip(&curves.pf).zip(&curves.pd) {
        let _ = writeln!(out, "{t},{f},{d}");
    }
    out
}

pub fn auc_csv(report: &AucReport) -> String {
    format!(
        "auc_pf_pd,auc_tau_pd,auc_tau_pf,auc_oa,auc_snpr\n{},{},{},{},{}\n",
        report.auc_pf_pd, report.auc_tau_pd, report.auc_tau_pf, report.auc_oa, report.auc_snpr
    )
}

pub fn separability_csv(stats: &Separability) -> String {
    let mut out = String::from("class,min,q1,median,q3,max\n");
    for (name, b) in [("background", &stats.background), ("target", &stats.target)] {
        let _ = writeln!(out, "{name},{},{},{},{},{}", b.min, b.q1, b.median, b.q3, b.max);
    }
    out
}

/// Writes `roc.csv`, `auc.csv` and `separability.csv` into `dir`.
pub fn write_reports(dir: &Path, curves: &RocCurves, report: &AucReport, stats: &Separability) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("roc.csv"), roc_csv(curves))?;
    std::fs::write(dir.join("auc.csv"), auc_csv(report))?;
    std::fs::write(dir.join("separability.csv"), separability_csv(stats))?;
    Ok(())
}
