//! Selective state space (S6): input-dependent projections, zero-order-hold
//! discretization and the linear recurrence
//!
//! ```text
//! h_t = Ā_t ⊙ h_{t−1} + B̄_t x_t,   y_t = ⟨C_t, h_t⟩,   h_0 = 0
//! Ā_t = exp(Δ_t A),                B̄_t = Δ_t B_t
//! ```
//!
//! `A` is diagonal per (channel, state), so every (channel, state) lane is an
//! independent first-order recurrence. Lanes share `B_t` and `C_t` across
//! channels.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Real, Tape, Tensor, Var};

/// Learnable parameters of one selective SSM over `channels` token width
/// and `state` hidden size. Linear maps are stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct S6Params<R> {
    /// `[C, D]`; `A = −exp(a_log)`
    pub a_log: Tensor<R>,
    pub w_b: Tensor<R>,
    pub b_b: Tensor<R>,
    pub w_c: Tensor<R>,
    pub b_c: Tensor<R>,
    /// `[C, 1]`, broadcast over channels after projection
    pub w_delta: Tensor<R>,
    /// `[C]`
    pub delta_bias: Tensor<R>,
}

/// Softplus of the initial `delta_bias`.
pub const INITIAL_DELTA: f64 = 0.05;

impl<R: Real> S6Params<R> {
    /// `−A = 1..=D` along the state axis, `softplus(delta_bias) = 0.05`, and
    /// uniform ±1/√C projections.
    pub fn init(channels: usize, state: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let delta_bias = INITIAL_DELTA.exp_m1().ln();
        Self {
            a_log: Tensor::from_fn(&[channels, state], |i| R::lit(((i % state) as f64 + 1.0).ln())),
            w_b: Tensor::uniform(&[channels, state], bound, rng),
            b_b: Tensor::uniform(&[state], bound, rng),
            w_c: Tensor::uniform(&[channels, state], bound, rng),
            b_c: Tensor::uniform(&[state], bound, rng),
            w_delta: Tensor::uniform(&[channels, 1], bound, rng),
            delta_bias: Tensor::full(&[channels], R::lit(delta_bias)),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// The (strictly negative) state matrix diagonal, `[C, D]`.
    pub fn a(&self) -> Tensor<R> {
        self.a_log.map(|v| -v.exp())
    }

    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> S6Vars {
        let mut leaf = |t: &Tensor<R>| tape.leaf(t.clone(), trainable);
        S6Vars {
            a_log: leaf(&self.a_log),
            w_b: leaf(&self.w_b),
            b_b: leaf(&self.b_b),
            w_c: leaf(&self.w_c),
            b_c: leaf(&self.b_c),
            w_delta: leaf(&self.w_delta),
            delta_bias: leaf(&self.delta_bias),
        }
    }
}

/// Tape handles of an [`S6Params`].
#[derive(Clone, Copy, Debug)]
pub struct S6Vars {
    pub a_log: Var,
    pub w_b: Var,
    pub b_b: Var,
    pub w_c: Var,
    pub b_c: Var,
    pub w_delta: Var,
    pub delta_bias: Var,
}

/// Input-dependent projections of `z [.., L, C]`: `(B, C, Δ)` with shapes
/// `[.., L, D]`, `[.., L, D]`, `[.., L, C]`.
pub fn project_on_tape<R: Real>(tape: &mut Tape<R>, z: Var, v: &S6Vars) -> Result<(Var, Var, Var)> {
    let b = tape.linear(z, v.w_b, Some(v.b_b))?;
    let c = tape.linear(z, v.w_c, Some(v.b_c))?;
    let d1 = tape.matmul(z, v.w_delta)?;
    let shape = tape.shape(z).to_vec();
    let d = tape.broadcast(d1, &shape)?;
    let d = tape.add(d, v.delta_bias)?;
    let delta = tape.softplus(d);
    Ok((b, c, delta))
}

/// Full S6 on a tape: projections, discretization and scan.
pub fn s6_on_tape<R: Real>(tape: &mut Tape<R>, z: Var, v: &S6Vars) -> Result<Var> {
    let (b, c, delta) = project_on_tape(tape, z, v)?;
    let e = tape.exp(v.a_log);
    let a = tape.neg(e);
    selective_scan(tape, z, delta, a, b, c)
}

fn check_finite<R: Real>(t: &Tensor<R>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `(B [L, D], C [L, D], Δ [L, C])` for one sequence `z [L, C]`.
pub fn generate_params<R: Real>(z: &Tensor<R>, p: &S6Params<R>) -> Result<(Tensor<R>, Tensor<R>, Tensor<R>)> {
    check_finite(z, "S6 input")?;
    if z.rank() != 2 || z.shape()[1] != p.channels() {
        return Err(Error::ShapeMismatch {
            op: "generate_params",
            lhs: z.shape().to_vec(),
            rhs: p.a_log.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let vars = p.bind(&mut tape, false);
    let (b, c, d) = project_on_tape(&mut tape, zv, &vars)?;
    Ok((tape.value(b).clone(), tape.value(c).clone(), tape.value(d).clone()))
}

/// `Ā = exp(Δ ⊗ A)` and `B̄ = Δ ⊗ B`, both `[L, C, D]`.
pub fn discretize<R: Real>(delta: &Tensor<R>, a: &Tensor<R>, b: &Tensor<R>) -> Result<(Tensor<R>, Tensor<R>)> {
    let (l, c) = dims2(delta, "discretize Δ")?;
    let (ca, d) = dims2(a, "discretize A")?;
    let (lb, db) = dims2(b, "discretize B")?;
    if ca != c || lb != l || db != d {
        return Err(Error::ShapeMismatch {
            op: "discretize",
            lhs: vec![l, c, d],
            rhs: vec![lb, ca, db],
        });
    }
    let (dv, av, bv) = (delta.data(), a.data(), b.data());
    let a_bar = Tensor::from_fn(&[l, c, d], |i| {
        let (t, ch, s) = (i / (c * d), (i / d) % c, i % d);
        (dv[t * c + ch] * av[ch * d + s]).exp()
    });
    let b_bar = Tensor::from_fn(&[l, c, d], |i| {
        let (t, ch, s) = (i / (c * d), (i / d) % c, i % d);
        dv[t * c + ch] * bv[t * d + s]
    });
    Ok((a_bar, b_bar))
}

fn dims2<R: Real>(t: &Tensor<R>, what: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        _ => Err(Error::InvalidShape {
            op: what,
            msg: format!("expected rank 2, got {:?}", t.shape()),
        }),
    }
}

fn dims3<R: Real>(t: &Tensor<R>, what: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::InvalidShape {
            op: what,
            msg: format!("expected rank 3, got {:?}", t.shape()),
        }),
    }
}

/// One step of the recurrence as an affine map `h ↦ a·h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElement<R> {
    pub a: R,
    pub b: R,
}

impl<R: Real> ScanElement<R> {
    pub fn identity() -> Self {
        Self {
            a: R::one(),
            b: R::zero(),
        }
    }

    /// Applies `self` then `later`: `(a2·a1, a2·b1 + b2)`.
    #[inline]
    pub fn combine(self, later: Self) -> Self {
        Self {
            a: later.a * self.a,
            b: later.a * self.b + later.b,
        }
    }
}

const SCAN_CHUNK: usize = 32;

/// In-place inclusive prefix scan under [`ScanElement::combine`].
///
/// Three phases: independent scans of fixed-size chunks, a sequential scan
/// of chunk totals, then a parallel fix-up with each chunk's carry. Chunk
/// size does not depend on the thread count, so the result is the same for
/// any degree of parallelism.
pub fn parallel_inclusive_scan<R: Real>(elems: &mut [ScanElement<R>]) {
    if elems.len() <= SCAN_CHUNK {
        sequential_inclusive_scan(elems);
        return;
    }
    elems.par_chunks_mut(SCAN_CHUNK).for_each(sequential_inclusive_scan);
    let mut carries = Vec::with_capacity(elems.len().div_ceil(SCAN_CHUNK));
    let mut carry = ScanElement::identity();
    for chunk in elems.chunks(SCAN_CHUNK) {
        carries.push(carry);
        carry = carry.combine(*chunk.last().expect("non-empty chunk"));
    }
    elems
        .par_chunks_mut(SCAN_CHUNK)
        .zip(carries)
        .skip(1)
        .for_each(|(chunk, carry)| {
            for e in chunk {
                *e = carry.combine(*e);
            }
        });
}

fn sequential_inclusive_scan<R: Real>(elems: &mut [ScanElement<R>]) {
    for i in 1..elems.len() {
        elems[i] = elems[i - 1].combine(elems[i]);
    }
}

fn check_scan_shapes<R: Real>(
    a_bar: &Tensor<R>,
    b_bar: &Tensor<R>,
    c_out: &Tensor<R>,
    z: &Tensor<R>,
) -> Result<(usize, usize, usize)> {
    let (l, c, d) = dims3(a_bar, "scan Ā")?;
    let ok = b_bar.shape() == a_bar.shape() && c_out.shape() == [l, d] && z.shape() == [l, c];
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "scan",
            lhs: a_bar.shape().to_vec(),
            rhs: [b_bar.shape(), c_out.shape(), z.shape()].concat(),
        });
    }
    Ok((l, c, d))
}

/// Hidden states `h [L, C, D]` of the recurrence, computed step by step.
pub fn hidden_states<R: Real>(a_bar: &Tensor<R>, b_bar: &Tensor<R>, z: &Tensor<R>) -> Result<Tensor<R>> {
    let (l, c, d) = dims3(a_bar, "scan Ā")?;
    if b_bar.shape() != a_bar.shape() || z.shape() != [l, c] {
        return Err(Error::ShapeMismatch {
            op: "hidden_states",
            lhs: a_bar.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    let (av, bv, zv) = (a_bar.data(), b_bar.data(), z.data());
    let mut h = vec![R::zero(); l * c * d];
    let mut state = vec![R::zero(); c * d];
    for t in 0..l {
        for ch in 0..c {
            let x = zv[t * c + ch];
            for s in 0..d {
                let i = (t * c + ch) * d + s;
                let k = ch * d + s;
                state[k] = av[i] * state[k] + bv[i] * x;
            }
        }
        h[t * c * d..(t + 1) * c * d].copy_from_slice(&state);
    }
    Tensor::new(vec![l, c, d], h)
}

fn readout<R: Real>(h: &[R], c_out: &[R], l: usize, c: usize, d: usize) -> Vec<R> {
    let mut y = vec![R::zero(); l * c];
    for t in 0..l {
        let ct = &c_out[t * d..(t + 1) * d];
        for ch in 0..c {
            let hs = &h[(t * c + ch) * d..][..d];
            y[t * c + ch] = hs.iter().zip(ct).map(|(&a, &b)| a * b).sum();
        }
    }
    y
}

/// `ȳ [L, C]` by the step-by-step recurrence from `h_0 = 0`.
pub fn scan_sequential<R: Real>(
    a_bar: &Tensor<R>,
    b_bar: &Tensor<R>,
    c_out: &Tensor<R>,
    z: &Tensor<R>,
) -> Result<Tensor<R>> {
    let (l, c, d) = check_scan_shapes(a_bar, b_bar, c_out, z)?;
    let (av, bv, cv, zv) = (a_bar.data(), b_bar.data(), c_out.data(), z.data());
    // only the current state is kept, so memory is O(C·D) whatever L is
    let mut state = vec![R::zero(); c * d];
    let mut y = vec![R::zero(); l * c];
    for t in 0..l {
        let ct = &cv[t * d..(t + 1) * d];
        for ch in 0..c {
            let x = zv[t * c + ch];
            let base = (t * c + ch) * d;
            let hs = &mut state[ch * d..(ch + 1) * d];
            for s in 0..d {
                hs[s] = av[base + s] * hs[s] + bv[base + s] * x;
            }
            y[t * c + ch] = hs.iter().zip(ct).map(|(&a, &b)| a * b).sum();
        }
    }
    Tensor::new(vec![l, c], y)
}

/// `ȳ [L, C]` via an associative prefix scan of every (channel, state) lane.
pub fn scan_parallel<R: Real>(
    a_bar: &Tensor<R>,
    b_bar: &Tensor<R>,
    c_out: &Tensor<R>,
    z: &Tensor<R>,
) -> Result<Tensor<R>> {
    let (l, c, d) = check_scan_shapes(a_bar, b_bar, c_out, z)?;
    let (av, bv, zv) = (a_bar.data(), b_bar.data(), z.data());
    let lanes: Vec<Vec<ScanElement<R>>> = (0..c * d)
        .into_par_iter()
        .map(|lane| {
            let (ch, s) = (lane / d, lane % d);
            let mut elems: Vec<ScanElement<R>> = (0..l)
                .map(|t| {
                    let i = (t * c + ch) * d + s;
                    ScanElement {
                        a: av[i],
                        b: bv[i] * zv[t * c + ch],
                    }
                })
                .collect();
            parallel_inclusive_scan(&mut elems);
            elems
        })
        .collect();
    let mut h = vec![R::zero(); l * c * d];
    for (lane, elems) in lanes.iter().enumerate() {
        for (t, e) in elems.iter().enumerate() {
            h[t * c * d + lane] = e.b;
        }
    }
    Tensor::new(vec![l, c], readout(&h, c_out.data(), l, c, d))
}

/// Fused discretize + scan over a batch, recorded on the tape.
///
/// Inputs: `u [P, L, C]`, `Δ [P, L, C]`, `A [C, D]`, `B [P, L, D]`,
/// `C [P, L, D]`; output `[P, L, C]`. Gradients use the reverse-time
/// adjoint recurrence over saved forward states.
pub fn selective_scan<R: Real>(tape: &mut Tape<R>, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
    let us = tape.shape(u).to_vec();
    let (batch, len, ch) = match *us.as_slice() {
        [p, l, c] => (p, l, c),
        [l, c] => (1, l, c),
        _ => {
            return Err(Error::InvalidShape {
                op: "selective_scan",
                msg: format!("input must be [P, L, C] or [L, C], got {us:?}"),
            })
        }
    };
    let state = tape.shape(a).get(1).copied().unwrap_or(0);
    let bd: Vec<usize> = us[..us.len() - 1].iter().copied().chain([state]).collect();
    if tape.shape(delta) != us.as_slice()
        || tape.shape(a) != [ch, state]
        || tape.shape(b) != bd.as_slice()
        || tape.shape(c) != bd.as_slice()
    {
        return Err(Error::ShapeMismatch {
            op: "selective_scan",
            lhs: us,
            rhs: [tape.shape(delta), tape.shape(a), tape.shape(b), tape.shape(c)].concat(),
        });
    }
    let dims = ScanDims {
        batch,
        len,
        ch,
        state,
    };
    let save = tape.any_requires_grad(&[u, delta, a, b, c]);
    let (y, saved) = scan_forward(
        &dims,
        tape.value(u).data(),
        tape.value(delta).data(),
        tape.value(a).data(),
        tape.value(b).data(),
        tape.value(c).data(),
        save,
    );
    let out = Tensor::new(us, y)?;
    Ok(tape.custom(&[u, delta, a, b, c], out, Box::new(ScanOp { dims, saved })))
}

#[derive(Clone, Copy, Debug)]
struct ScanDims {
    batch: usize,
    len: usize,
    ch: usize,
    state: usize,
}

struct Saved<R> {
    /// `h_t` for every step, `[P, L, C, D]`
    h: Vec<R>,
    /// `Ā_t`, `[P, L, C, D]`
    a_bar: Vec<R>,
}

struct ScanOp<R> {
    dims: ScanDims,
    saved: Option<Saved<R>>,
}

fn scan_forward<R: Real>(
    dims: &ScanDims,
    u: &[R],
    delta: &[R],
    a: &[R],
    b: &[R],
    c: &[R],
    save: bool,
) -> (Vec<R>, Option<Saved<R>>) {
    let ScanDims {
        batch,
        len,
        ch,
        state,
    } = *dims;
    let cd = ch * state;
    let mut y = vec![R::zero(); batch * len * ch];
    let mut saved = save.then(|| Saved {
        h: vec![R::zero(); batch * len * cd],
        a_bar: vec![R::zero(); batch * len * cd],
    });
    let mut h = vec![R::zero(); cd];
    for p in 0..batch {
        h.iter_mut().for_each(|v| *v = R::zero());
        for t in 0..len {
            let row = p * len + t;
            let bt = &b[row * state..][..state];
            let ct = &c[row * state..][..state];
            for k in 0..ch {
                let dt = delta[row * ch + k];
                let x = u[row * ch + k];
                let hk = &mut h[k * state..][..state];
                let ak = &a[k * state..][..state];
                let mut acc = R::zero();
                match saved.as_mut() {
                    Some(sv) => {
                        let abar_out = &mut sv.a_bar[row * cd + k * state..][..state];
                        for s in 0..state {
                            let abar = (dt * ak[s]).exp();
                            abar_out[s] = abar;
                            hk[s] = abar * hk[s] + dt * bt[s] * x;
                            acc += ct[s] * hk[s];
                        }
                    }
                    None => {
                        for s in 0..state {
                            let abar = (dt * ak[s]).exp();
                            hk[s] = abar * hk[s] + dt * bt[s] * x;
                            acc += ct[s] * hk[s];
                        }
                    }
                }
                y[row * ch + k] = acc;
            }
            if let Some(sv) = saved.as_mut() {
                sv.h[row * cd..(row + 1) * cd].copy_from_slice(&h);
            }
        }
    }
    (y, saved)
}

impl<R: Real> CustomOp<R> for ScanOp<R> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor<R>], _output: &Tensor<R>, g: &[R], needs: &[bool]) -> Vec<Option<Vec<R>>> {
        let saved = self.saved.as_ref().expect("states saved when gradients are required");
        let ScanDims {
            batch,
            len,
            ch,
            state,
        } = self.dims;
        let cd = ch * state;
        let (u, delta, a, b, c) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let mut gu = vec![R::zero(); u.len()];
        let mut gdelta = vec![R::zero(); delta.len()];
        let mut ga = vec![R::zero(); a.len()];
        let mut gb = vec![R::zero(); b.len()];
        let mut gc = vec![R::zero(); c.len()];
        // adjoint carried backwards in time: Ā_{t+1} ⊙ λ_{t+1}
        let mut lam = vec![R::zero(); cd];
        let zeros = vec![R::zero(); cd];
        for p in 0..batch {
            lam.iter_mut().for_each(|v| *v = R::zero());
            for t in (0..len).rev() {
                let row = p * len + t;
                let h_t = &saved.h[row * cd..][..cd];
                let h_prev = if t > 0 { &saved.h[(row - 1) * cd..][..cd] } else { &zeros[..] };
                let abar_t = &saved.a_bar[row * cd..][..cd];
                let bt = &b[row * state..][..state];
                let ct = &c[row * state..][..state];
                let gbt = &mut gb[row * state..][..state];
                let gct = &mut gc[row * state..][..state];
                for k in 0..ch {
                    let gy = g[row * ch + k];
                    let dt = delta[row * ch + k];
                    let x = u[row * ch + k];
                    let mut gd = R::zero();
                    let mut gx = R::zero();
                    for s in 0..state {
                        let i = k * state + s;
                        let l = lam[i] + ct[s] * gy;
                        gct[s] += gy * h_t[i];
                        let abar = abar_t[i];
                        let d_abar = l * h_prev[i] * abar;
                        gd += d_abar * a[i] + l * bt[s] * x;
                        ga[i] += d_abar * dt;
                        gbt[s] += l * dt * x;
                        gx += l * dt * bt[s];
                        lam[i] = l * abar;
                    }
                    gdelta[row * ch + k] += gd;
                    gu[row * ch + k] += gx;
                }
            }
        }
        [gu, gdelta, ga, gb, gc]
            .into_iter()
            .zip(needs)
            .map(|(g, &n)| n.then_some(g))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn zero_delta_weights_give_log_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = S6Params::<f64>::init(4, 3, &mut rng);
        p.w_delta = Tensor::zeros(&[4, 1]);
        p.delta_bias = Tensor::zeros(&[4]);
        let z = rand_tensor(&[5, 4], -1.0, 1.0, &mut rng);
        let (_, _, delta) = generate_params(&z, &p).unwrap();
        for &d in delta.data() {
            assert!((d - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_coupling_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = S6Params::<f64>::init(4, 3, &mut rng);
        p.w_b = Tensor::zeros(&[4, 3]);
        p.b_b = Tensor::zeros(&[3]);
        let z = rand_tensor(&[6, 4], -1.0, 1.0, &mut rng);
        let (b, c, delta) = generate_params(&z, &p).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
        let (ab, bb) = discretize(&delta, &p.a(), &b).unwrap();
        let y = scan_sequential(&ab, &bb, &c, &z).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_is_positive_and_non_finite_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = S6Params::<f64>::init(3, 2, &mut rng);
        let z = rand_tensor(&[7, 3], -5.0, 5.0, &mut rng);
        let (b, c, delta) = generate_params(&z, &p).unwrap();
        assert_eq!(b.shape(), &[7, 2]);
        assert_eq!(c.shape(), &[7, 2]);
        assert!(delta.data().iter().all(|&d| d > 0.0));
        let mut bad = z.clone();
        bad.data_mut()[4] = f64::NAN;
        assert!(matches!(generate_params(&bad, &p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn initial_parameters_follow_conventions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = S6Params::<f64>::init(2, 4, &mut rng);
        let expect = [-1.0, -2.0, -3.0, -4.0, -1.0, -2.0, -3.0, -4.0];
        for (a, e) in p.a().data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((p.delta_bias.data()[0].exp().ln_1p() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn discretize_examples() {
        let one = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let (ab, bb) = discretize(&one(1.0), &one(-1.0), &one(1.0)).unwrap();
        assert!((ab.item() - 0.367879).abs() < 1e-6);
        assert_eq!(bb.item(), 1.0);
        let (ab, bb) = discretize(&one(0.0), &one(-3.0), &one(2.0)).unwrap();
        assert_eq!((ab.item(), bb.item()), (1.0, 0.0));
    }

    #[test]
    fn hand_recurrence() {
        // a = 0.5, B̄x = 1, C = 1  →  h = [1, 1.5]
        let ab = Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap();
        let bb = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        let c = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let z = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let y = scan_sequential(&ab, &bb, &c, &z).unwrap();
        assert_eq!(y.data(), &[1.0, 1.5]);
        assert_eq!(scan_parallel(&ab, &bb, &c, &z).unwrap().data(), &[1.0, 1.5]);
    }

    #[test]
    fn unit_gain_and_no_input_stay_at_zero() {
        let ab = Tensor::full(&[5, 2, 3], 1.0);
        let bb = Tensor::zeros(&[5, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = rand_tensor(&[5, 3], -1.0, 1.0, &mut rng);
        let z = rand_tensor(&[5, 2], -1.0, 1.0, &mut rng);
        let y = scan_sequential(&ab, &bb, &c, &z).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ab = rand_tensor(&[1, 3, 2], 0.1, 0.9, &mut rng);
        let bb = rand_tensor(&[1, 3, 2], -1.0, 1.0, &mut rng);
        let c = rand_tensor(&[1, 2], -1.0, 1.0, &mut rng);
        let z = rand_tensor(&[1, 3], -1.0, 1.0, &mut rng);
        let y = scan_sequential(&ab, &bb, &c, &z).unwrap();
        for ch in 0..3 {
            let expect: f64 = (0..2).map(|s| c.data()[s] * bb.data()[ch * 2 + s] * z.data()[ch]).sum();
            assert!((y.data()[ch] - expect).abs() < 1e-15);
        }
        assert_eq!(scan_parallel(&ab, &bb, &c, &z).unwrap(), y);
    }

    #[test]
    fn fused_scan_matches_discretized_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (l, c, d) = (9, 3, 4);
        let p = S6Params::<f64>::init(c, d, &mut rng);
        let z = rand_tensor(&[l, c], -1.0, 1.0, &mut rng);
        let (b, cm, delta) = generate_params(&z, &p).unwrap();
        let (ab, bb) = discretize(&delta, &p.a(), &b).unwrap();
        let reference = scan_sequential(&ab, &bb, &cm, &z).unwrap();

        let mut tape = Tape::<f64>::new();
        let zv = tape.constant(z);
        let vars = p.bind(&mut tape, false);
        let y = s6_on_tape(&mut tape, zv, &vars).unwrap();
        assert!(max_rel(tape.value(y), &reference) < 1e-14);
    }

    #[test]
    fn fused_scan_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (p, l, c, d) = (2, 6, 3, 4);
        let points = vec![
            rand_tensor(&[p, l, c], -1.0, 1.0, &mut rng),
            rand_tensor(&[p, l, c], 0.05, 1.5, &mut rng),
            rand_tensor(&[c, d], -2.0, -0.2, &mut rng),
            rand_tensor(&[p, l, d], -1.0, 1.0, &mut rng),
            rand_tensor(&[p, l, d], -1.0, 1.0, &mut rng),
        ];
        let weights = rand_tensor(&[p, l, c], -1.0, 1.0, &mut rng);
        let report = grad_check_many(
            |t, v| {
                let y = selective_scan(t, v[0], v[1], v[2], v[3], v[4])?;
                let w = t.constant(weights.clone());
                let wy = t.mul(y, w)?;
                let sq = t.mul(wy, y)?;
                Ok(t.sum(sq))
            },
            &points,
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn full_s6_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (l, c, d) = (5, 3, 2);
        let p = S6Params::<f64>::init(c, d, &mut rng);
        let z = rand_tensor(&[2, l, c], -1.0, 1.0, &mut rng);
        let points = vec![
            z,
            p.a_log.clone(),
            p.w_b.clone(),
            p.b_b.clone(),
            p.w_c.clone(),
            p.b_c.clone(),
            p.w_delta.clone(),
            p.delta_bias.clone(),
        ];
        let report = grad_check_many(
            |t, v| {
                let vars = S6Vars {
                    a_log: v[1],
                    w_b: v[2],
                    b_b: v[3],
                    w_c: v[4],
                    b_c: v[5],
                    w_delta: v[6],
                    delta_bias: v[7],
                };
                let y = s6_on_tape(t, v[0], &vars)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &points,
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn arb_element() -> impl Strategy<Value = ScanElement<f64>> {
        (-2.0f64..2.0, -2.0f64..2.0).prop_map(|(a, b)| ScanElement { a, b })
    }

    proptest! {
        #[test]
        fn combine_is_associative(e1 in arb_element(), e2 in arb_element(), e3 in arb_element()) {
            let left = e1.combine(e2).combine(e3);
            let right = e1.combine(e2.combine(e3));
            prop_assert!((left.a - right.a).abs() < 1e-12);
            prop_assert!((left.b - right.b).abs() < 1e-12);
        }

        #[test]
        fn parallel_matches_sequential(l in 1usize..200, c in 1usize..6, d in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ab = rand_tensor(&[l, c, d], 0.0, 1.0, &mut rng);
            let bb = rand_tensor(&[l, c, d], -1.0, 1.0, &mut rng);
            let cm = rand_tensor(&[l, d], -1.0, 1.0, &mut rng);
            let z = rand_tensor(&[l, c], -1.0, 1.0, &mut rng);
            let s = scan_sequential(&ab, &bb, &cm, &z).unwrap();
            let p = scan_parallel(&ab, &bb, &cm, &z).unwrap();
            prop_assert!(max_rel(&p, &s) < 1e-10);
        }

        #[test]
        fn hidden_state_is_bounded_by_contraction(l in 1usize..120, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, d) = (3, 4);
            let delta = rand_tensor(&[l, c], 0.01, 2.0, &mut rng);
            let a = rand_tensor(&[c, d], -3.0, -0.1, &mut rng);
            let b = rand_tensor(&[l, d], -1.0, 1.0, &mut rng);
            let z = rand_tensor(&[l, c], -1.0, 1.0, &mut rng);
            let (ab, bb) = discretize(&delta, &a, &b).unwrap();
            prop_assert!(ab.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            let h = hidden_states(&ab, &bb, &z).unwrap();
            let max_in = (0..l * c * d)
                .map(|i| (bb.data()[i] * z.data()[i / d]).abs())
                .fold(0.0f64, f64::max);
            let max_gain = ab.data().iter().copied().fold(0.0f64, f64::max);
            let bound = max_in / (1.0 - max_gain);
            prop_assert!(h.data().iter().all(|v| v.abs() <= bound * (1.0 + 1e-12)));
        }
    }
}
