use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic − numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Central-difference check of a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report = grad_check_many(|t, vars| f(t, vars[0]), std::slice::from_ref(point), eps, None, 0)?;
    Ok(report.max_rel_error)
}

/// Central-difference check of a scalar function of several tensors.
///
/// With `max_coords = Some(k)`, tensors larger than `k` are checked on `k`
/// coordinates drawn without replacement from a generator seeded by `seed`.
pub fn grad_check_many<F>(
    f: F,
    points: &[Tensor<f64>],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let v = tape.value(root);
        if v.len() != 1 {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        let out = v.item();
        if !out.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.value(root).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut report = GradCheckReport::default();
    for (ti, &var) in vars.iter().enumerate() {
        let analytic = grads.tensor(var).expect("leaf on tape");
        if !analytic.all_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of input {ti}")));
        }
        let n = points[ti].len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = points[ti].data()[c];
            work[ti].data_mut()[c] = orig + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[c] = orig - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((ti, c));
            }
        }
    }
    Ok(report)
}
