//! The detector backbone: strided group-wise spectral embedding, stacked
//! pyramid SSM blocks and a two-layer contrastive head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ssm::{s6_on_tape, S6Params, S6Vars};
use crate::tensor::{deconv_padding_for, Real, Tape, Tensor, Var};

/// Number of stride-2 downsamplings in a pyramid block.
pub const PYRAMID_LEVELS: usize = 4;
pub const RMS_EPS: f64 = 1e-6;

/// Hyperparameters fixing the model's shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// spectral bands per input pixel
    pub bands: usize,
    /// bands per embedding group (kernel length of the embedding conv)
    pub group_len: usize,
    /// token width after embedding
    pub embed_dim: usize,
    /// SSM hidden size per channel
    pub state_dim: usize,
    /// output feature size
    pub head_dim: usize,
    /// stacked pyramid blocks
    pub depth: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bands: 189,
            group_len: 30,
            embed_dim: 16,
            state_dim: 16,
            head_dim: 32,
            depth: 1,
            leaky_slope: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        (self.group_len / 4).max(1)
    }

    /// Tokens produced by the embedding.
    pub fn seq_len(&self) -> usize {
        (self.bands - self.group_len) / self.stride() + 1
    }

    /// Sequence length at each pyramid level.
    pub fn level_lens(&self) -> [usize; PYRAMID_LEVELS] {
        let mut lens = [self.seq_len(); PYRAMID_LEVELS];
        for k in 1..PYRAMID_LEVELS {
            lens[k] = lens[k - 1] / 2;
        }
        lens
    }

    /// Channel width at each pyramid level.
    pub fn level_widths(&self) -> [usize; PYRAMID_LEVELS] {
        std::array::from_fn(|k| self.embed_dim << (k + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.group_len == 0 || self.embed_dim == 0 || self.state_dim == 0 || self.head_dim == 0 {
            return bad("group_len, embed_dim, state_dim and head_dim must be positive".into());
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.bands < self.group_len {
            return bad(format!(
                "group length {} exceeds the {} input bands",
                self.group_len, self.bands
            ));
        }
        if self.seq_len() < 8 {
            return bad(format!(
                "{} bands with group length {} (stride {}) give {} tokens; at least 8 are needed",
                self.bands,
                self.group_len,
                self.stride(),
                self.seq_len()
            ));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky slope {} must be finite and non-negative", self.leaky_slope));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct S6Idx {
    a_log: usize,
    w_b: usize,
    b_b: usize,
    w_c: usize,
    b_c: usize,
    w_delta: usize,
    delta_bias: usize,
}

#[derive(Clone, Debug)]
struct LevelIdx {
    /// stride-2 conv from the previous level (levels ≥ 1)
    down: Option<Affine>,
    depthwise: Affine,
    s6: S6Idx,
    /// transposed conv to the previous level (levels ≥ 1)
    up: Option<Affine>,
    /// fusion map for this level's SSM output (all but the top level)
    fuse: Option<Affine>,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    gain: usize,
    z1: Affine,
    z2: Affine,
    levels: Vec<LevelIdx>,
    out: Affine,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: Affine,
    blocks: Vec<BlockIdx>,
    hidden: Affine,
    head: Affine,
}

struct Builder<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
    rng: ChaCha8Rng,
}

impl<R: Real> Builder<R> {
    fn push(&mut self, name: String, t: Tensor<R>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Weight of `shape` and bias of `out` entries, uniform in ±1/√fan_in.
    fn affine(&mut self, prefix: &str, shape: &[usize], out: usize, fan_in: usize) -> Affine {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::uniform(shape, bound, &mut self.rng);
        let b = Tensor::uniform(&[out], bound, &mut self.rng);
        Affine {
            w: self.push(format!("{prefix}.weight"), w),
            b: self.push(format!("{prefix}.bias"), b),
        }
    }

    fn linear(&mut self, prefix: &str, input: usize, out: usize) -> Affine {
        self.affine(prefix, &[input, out], out, input)
    }

    fn s6(&mut self, prefix: &str, channels: usize, state: usize) -> S6Idx {
        let p = S6Params::<R>::init(channels, state, &mut self.rng);
        let mut put = |n: &str, t: Tensor<R>| self.push(format!("{prefix}.{n}"), t);
        S6Idx {
            a_log: put("a_log", p.a_log),
            w_b: put("b_proj.weight", p.w_b),
            b_b: put("b_proj.bias", p.b_b),
            w_c: put("c_proj.weight", p.w_c),
            b_c: put("c_proj.bias", p.b_c),
            w_delta: put("delta_proj.weight", p.w_delta),
            delta_bias: put("delta_bias", p.delta_bias),
        }
    }
}

/// Model parameters with a fixed, named layout.
#[derive(Clone, Debug)]
pub struct Model<R> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
    layout: Layout,
}

/// Tensor shapes through one pyramid block, for one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidTrace {
    /// `(length, width)` of the SSM input at each level
    pub levels: Vec<(usize, usize)>,
    /// `(length, width)` after each upsampling, top level first
    pub upsampled: Vec<(usize, usize)>,
}

impl<R: Real> Model<R> {
    /// Deterministic initialisation from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let n = config.embed_dim;
        let m = config.group_len;
        let embed = b.affine("embed", &[n, 1, m], n, m);
        let widths = config.level_widths();
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("block{i}");
            let gain = b.push(format!("{p}.norm.gain"), Tensor::full(&[n], R::one()));
            let z1 = b.linear(&format!("{p}.z1"), n, 2 * n);
            let z2 = b.linear(&format!("{p}.z2"), n, 2 * n);
            let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
            for (k, &w) in widths.iter().enumerate() {
                let lp = format!("{p}.level{k}");
                let down = (k > 0).then(|| {
                    let prev = widths[k - 1];
                    b.affine(&format!("{lp}.down"), &[w, prev, 3], w, prev * 3)
                });
                let depthwise = b.affine(&format!("{lp}.depthwise"), &[w, 1, 3], w, 3);
                let s6 = b.s6(&format!("{lp}.ssm"), w, config.state_dim);
                let up = (k > 0).then(|| {
                    let prev = widths[k - 1];
                    b.affine(&format!("{lp}.up"), &[w, prev, 3], prev, prev * 3)
                });
                let fuse = (k + 1 < PYRAMID_LEVELS).then(|| b.linear(&format!("{lp}.fuse"), w, w));
                levels.push(LevelIdx {
                    down,
                    depthwise,
                    s6,
                    up,
                    fuse,
                });
            }
            let out = b.linear(&format!("{p}.out"), 2 * n, n);
            blocks.push(BlockIdx {
                gain,
                z1,
                z2,
                levels,
                out,
            });
        }
        let d = config.head_dim;
        let flat = config.seq_len() * n;
        let hidden = b.linear("head.hidden", flat, 2 * d);
        let head = b.linear("head.out", 2 * d, d);
        Ok(Self {
            config,
            names: b.names,
            tensors: b.tensors,
            layout: Layout {
                embed,
                blocks,
                hidden,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<R>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces all parameters; names and shapes must match the layout.
    pub fn set_params(&mut self, named: Vec<(String, Tensor<R>)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameter tensors supplied, model has {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for ((name, t), (own_name, own)) in named.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != own_name || t.shape() != own.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "parameter {name} {:?} does not match {own_name} {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
        }
        self.tensors = named.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Places every parameter on `tape`, in layout order.
    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    /// Features `[P, d]` for spectra `[P, B]` (or `[B]` giving `[d]`).
    pub fn forward(&self, tape: &mut Tape<R>, vars: &[Var], spectra: Var) -> Result<Var> {
        let mut s = self.embed(tape, vars, spectra)?;
        for i in 0..self.config.depth {
            s = self.pyramid_block(tape, vars, i, s)?;
        }
        self.head(tape, vars, s)
    }

    /// Group-wise embedding `[P, B] → [P, L, N]`.
    pub fn embed(&self, tape: &mut Tape<R>, vars: &[Var], spectra: Var) -> Result<Var> {
        let shape = tape.shape(spectra).to_vec();
        let bands = *shape.last().unwrap_or(&0);
        if bands != self.config.bands {
            return Err(Error::DimensionMismatch(format!(
                "spectrum has {bands} bands, model expects {}",
                self.config.bands
            )));
        }
        let mut as_seq = shape.clone();
        as_seq.push(1);
        let x = tape.reshape(spectra, &as_seq)?;
        let e = self.layout.embed;
        let y = tape.conv1d(x, vars[e.w], Some(vars[e.b]), self.config.stride(), 0, 1)?;
        Ok(tape.leaky_relu(y, R::lit(self.config.leaky_slope)))
    }

    /// One pyramid SSM block; output shape equals input shape.
    pub fn pyramid_block(&self, tape: &mut Tape<R>, vars: &[Var], index: usize, s: Var) -> Result<Var> {
        Ok(self.pyramid_block_traced(tape, vars, index, s)?.0)
    }

    /// [`Self::pyramid_block`] plus the shapes actually produced inside it.
    pub fn pyramid_block_traced(
        &self,
        tape: &mut Tape<R>,
        vars: &[Var],
        index: usize,
        s: Var,
    ) -> Result<(Var, PyramidTrace)> {
        let blk = &self.layout.blocks[index];
        let lens = self.config.level_lens();
        let level_axis = tape.shape(s).len() - 2;

        let normed = tape.rms_norm(s, R::lit(RMS_EPS));
        let normed = tape.mul(normed, vars[blk.gain])?;
        let z1 = linear(tape, vars, blk.z1, normed)?;
        let z2 = linear(tape, vars, blk.z2, normed)?;

        let mut extracted = Vec::with_capacity(PYRAMID_LEVELS);
        let mut trace = PyramidTrace {
            levels: Vec::with_capacity(PYRAMID_LEVELS),
            upsampled: Vec::with_capacity(PYRAMID_LEVELS - 1),
        };
        let seq_shape = |tape: &Tape<R>, v: Var| {
            let sh = tape.shape(v);
            (sh[level_axis], sh[level_axis + 1])
        };
        let mut z = z1;
        for (k, lv) in blk.levels.iter().enumerate() {
            if let Some(down) = lv.down {
                let full = tape.conv1d(z, vars[down.w], Some(vars[down.b]), 2, 1, 1)?;
                z = if tape.shape(full)[level_axis] > lens[k] {
                    tape.slice(full, level_axis, 0, lens[k])?
                } else {
                    full
                };
            }
            let width = tape.shape(z).last().copied().unwrap_or(0);
            let dw = tape.conv1d(z, vars[lv.depthwise.w], Some(vars[lv.depthwise.b]), 1, 1, width)?;
            let act = tape.silu(dw);
            trace.levels.push(seq_shape(tape, act));
            let s6 = s6_vars(vars, &lv.s6);
            extracted.push(s6_on_tape(tape, act, &s6)?);
        }

        let mut fused = extracted[PYRAMID_LEVELS - 1];
        for k in (1..PYRAMID_LEVELS).rev() {
            let up = blk.levels[k].up.expect("upper levels have an upsampler");
            let len = tape.shape(fused)[level_axis];
            let (padding, output_padding) = deconv_padding_for(len, lens[k - 1], 2, 3)?;
            let upsampled = tape.deconv1d(fused, vars[up.w], Some(vars[up.b]), 2, padding, output_padding)?;
            trace.upsampled.push(seq_shape(tape, upsampled));
            let fuse = blk.levels[k - 1].fuse.expect("lower levels have a fusion map");
            let lateral = linear(tape, vars, fuse, extracted[k - 1])?;
            fused = tape.add(upsampled, lateral)?;
        }

        let gate = tape.silu(z2);
        let gated = tape.mul(fused, gate)?;
        let out = linear(tape, vars, blk.out, gated)?;
        Ok((tape.add(s, out)?, trace))
    }

    /// Contrastive head `[P, L, N] → [P, d]`.
    pub fn head(&self, tape: &mut Tape<R>, vars: &[Var], s: Var) -> Result<Var> {
        let shape = tape.shape(s).to_vec();
        let flat = match shape.as_slice() {
            [l, n] => vec![1, l * n],
            [p, l, n] => vec![*p, l * n],
            _ => {
                return Err(Error::InvalidShape {
                    op: "head",
                    msg: format!("expected [L, N] or [P, L, N], got {shape:?}"),
                })
            }
        };
        let x = tape.reshape(s, &flat)?;
        let h = linear(tape, vars, self.layout.hidden, x)?;
        let h = tape.leaky_relu(h, R::lit(self.config.leaky_slope));
        let y = linear(tape, vars, self.layout.head, h)?;
        if shape.len() == 2 {
            tape.reshape(y, &[self.config.head_dim])
        } else {
            Ok(y)
        }
    }

    /// Inference-only features `[P, d]` for spectra `[P, B]`.
    pub fn features(&self, spectra: &Tensor<R>) -> Result<Tensor<R>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(spectra.clone());
        let y = self.forward(&mut tape, &vars, x)?;
        let out = tape.value(y).clone();
        if !out.all_finite() {
            return Err(Error::NonFinite("model features".into()));
        }
        Ok(out)
    }

    /// [`Self::features`] over row chunks of `chunk` spectra, evaluated in
    /// parallel. Each chunk is computed independently, so the result does
    /// not depend on the thread count.
    pub fn features_batched(&self, spectra: &[R], chunk: usize) -> Result<Vec<R>> {
        let bands = self.config.bands;
        if spectra.len() % bands != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} values is not a whole number of {bands}-band spectra",
                spectra.len()
            )));
        }
        let rows: Vec<Result<Vec<R>>> = spectra
            .par_chunks(chunk.max(1) * bands)
            .map(|part| {
                let t = Tensor::new(vec![part.len() / bands, bands], part.to_vec())?;
                Ok(self.features(&t)?.into_data())
            })
            .collect();
        let mut out = Vec::with_capacity(spectra.len() / bands * self.config.head_dim);
        for r in rows {
            out.extend(r?);
        }
        Ok(out)
    }

    /// Shapes a pyramid block is designed to produce.
    pub fn trace(&self) -> PyramidTrace {
        let lens = self.config.level_lens();
        let widths = self.config.level_widths();
        PyramidTrace {
            levels: lens.iter().copied().zip(widths).collect(),
            upsampled: (1..PYRAMID_LEVELS).rev().map(|k| (lens[k - 1], widths[k - 1])).collect(),
        }
    }
}

fn linear<R: Real>(tape: &mut Tape<R>, vars: &[Var], a: Affine, x: Var) -> Result<Var> {
    tape.linear(x, vars[a.w], Some(vars[a.b]))
}

fn s6_vars(vars: &[Var], i: &S6Idx) -> S6Vars {
    S6Vars {
        a_log: vars[i.a_log],
        w_b: vars[i.w_b],
        b_b: vars[i.b_b],
        w_c: vars[i.w_c],
        b_c: vars[i.b_c],
        w_delta: vars[i.w_delta],
        delta_bias: vars[i.delta_bias],
    }
}
