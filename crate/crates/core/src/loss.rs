//! Temperature-scaled cosine contrastive loss, anchored on the first view:
//!
//! ```text
//! ℓ_i = −log( exp(c(x_i, y_i)/α) / Σ_j exp(c(x_i, y_j)/α) ),   L = mean_i ℓ_i
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {alpha}")));
    }
    Ok(())
}

/// Cosine similarity; zero-norm inputs are an error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NonFinite("cosine of a zero-norm feature".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn rows(x: &[f64], y: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || x.len() != y.len() || x.len() % dim != 0 || x.is_empty() {
        return Err(Error::InvalidShape {
            op: "contrastive loss",
            msg: format!("{} and {} values with feature size {dim}", x.len(), y.len()),
        });
    }
    Ok(x.len() / dim)
}

/// Loss of anchor `i` against every `y_j` in the batch (`P × dim`, row-major).
pub fn pair_loss(i: usize, x: &[f64], y: &[f64], dim: usize, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let p = rows(x, y, dim)?;
    let xi = &x[i * dim..(i + 1) * dim];
    let logits = (0..p)
        .map(|j| Ok(cosine(xi, &y[j * dim..(j + 1) * dim])? / alpha))
        .collect::<Result<Vec<f64>>>()?;
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    Ok(lse - logits[i])
}

/// Mean of [`pair_loss`] over the batch.
pub fn batch_loss(x: &[f64], y: &[f64], dim: usize, alpha: f64) -> Result<f64> {
    let p = rows(x, y, dim)?;
    let mut total = 0.0;
    for i in 0..p {
        total += pair_loss(i, x, y, dim, alpha)?;
    }
    Ok(total / p as f64)
}

/// The same loss recorded on a tape; `x`, `y` are `[P, d]`.
pub fn batch_loss_on_tape<R: Real>(tape: &mut Tape<R>, x: Var, y: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    if tape.shape(x) != tape.shape(y) || tape.shape(x).len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "contrastive loss",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(y).to_vec(),
        });
    }
    let xn = tape.l2_normalize_rows(x);
    let yn = tape.l2_normalize_rows(y);
    let yt = tape.transpose(yn)?;
    let cos = tape.matmul(xn, yt)?;
    let logits = tape.scale(cos, R::lit(1.0 / alpha));
    let lse = tape.logsumexp_rows(logits);
    let positive = tape.diagonal(logits)?;
    let per_anchor = tape.sub(lse, positive)?;
    Ok(tape.mean(per_anchor))
}
