use super::broadcast::{broadcast_shapes_compatible, BroadcastMap};
use super::tape::{Op, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[inline]
pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<R: Real>(x: R) -> R {
    if x > R::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let rows = shape.iter().product::<usize>() / last.max(1);
    (rows, last)
}

/// Sums `g` (laid out like `out_shape`) down to `in_shape`.
fn reduce_to<R: Real>(g: &[R], out_shape: &[usize], in_shape: &[usize]) -> Vec<R> {
    let map = BroadcastMap::new(out_shape, in_shape);
    if let BroadcastMap::Identity = map {
        return g.to_vec();
    }
    let n: usize = in_shape.iter().product();
    let mut out = vec![R::zero(); n];
    for (i, &v) in g.iter().enumerate() {
        out[map.map(i)] += v;
    }
    out
}

impl<R: Real> Tape<R> {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !broadcast_shapes_compatible(&sa, &sb) {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        let map = BroadcastMap::new(&sa, &sb);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let f = |x: R, y: R| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<R> = match map {
            BroadcastMap::Identity => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            BroadcastMap::Suffix(n) => av
                .chunks(n)
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect(),
            _ => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[map.map(i)]))
                .collect(),
        };
        let value = Tensor::new(sa, data)?;
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
            Binary::Div => Op::Div(a, b),
        };
        Ok(self.push(value, op, &[a, b]))
    }

    /// `a + b`, with `b` broadcast to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `x · w + b` for `x [.., in]`, `w [in, out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -R::one())
    }

    /// `a [.., k] · b [k, n] -> [.., n]`; leading dimensions of `a` are
    /// treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k) = split_last(&sa);
        let n = sb[1];
        let mut out = vec![R::zero(); m * n];
        R::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                msg: format!("needs rank >= 2, got {shape:?}"),
            });
        }
        let value = transpose_last2(self.value(x).data(), &shape);
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape.swap(r - 1, r - 2);
        let value = Tensor::new(out_shape, value)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: R) -> Var {
        self.unary(
            x,
            move |v| if v > R::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: R = t.data().iter().copied().sum();
        let n = R::lit(t.len() as f64);
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or(Error::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?)
        .to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_rest = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same_rest {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Expands `x` to `shape` (right-aligned; size-1 or missing dimensions
    /// are repeated).
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if !broadcast_shapes_compatible(shape, &sx) {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: sx,
                rhs: shape.to_vec(),
            });
        }
        let map = BroadcastMap::new(shape, &sx);
        let src = self.value(x).data();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|i| src[map.map(i)]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::Broadcast(x), &[x]))
    }

    /// `a [n] ⊗ b [m] -> [n, m]`.
    pub fn outer_product(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "outer_product",
                lhs: sa,
                rhs: sb,
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av
            .iter()
            .flat_map(|&x| bv.iter().map(move |&y| x * y))
            .collect();
        let value = Tensor::new(vec![sa[0], sb[0]], data)?;
        Ok(self.push(value, Op::OuterProduct(a, b), &[a, b]))
    }

    /// Divides every row (last axis) by its root mean square,
    /// `sqrt(mean(x²) + eps)`. No gain is applied.
    pub fn rms_norm(&mut self, x: Var, eps: R) -> Var {
        let t = self.value(x);
        let (_, n) = split_last(t.shape());
        let nr = R::lit(n as f64);
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let ms = row.iter().map(|&v| v * v).sum::<R>() / nr;
            let inv = R::one() / (ms + eps).sqrt();
            data.extend(row.iter().map(|&v| v * inv));
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::RmsNorm { x, eps }, &[x])
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, n) = split_last(t.shape());
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let norm = row.iter().map(|&v| v * v).sum::<R>().sqrt();
            data.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::L2NormalizeRows(x), &[x])
    }

    /// `log Σ exp` over the last axis, computed with max subtraction.
    /// The last axis is removed from the shape.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, n) = split_last(t.shape());
        let data: Vec<R> = t
            .data()
            .chunks(n)
            .map(|row| {
                let m = row.iter().copied().fold(R::neg_infinity(), R::max);
                m + row.iter().map(|&v| (v - m).exp()).sum::<R>().ln()
            })
            .collect();
        let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, data).expect("row count");
        self.push(value, Op::LogSumExpRows(x), &[x])
    }

    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::InvalidShape {
                op: "diagonal",
                msg: format!("needs a square matrix, got {s:?}"),
            });
        }
        let n = s[0];
        let src = self.value(x).data();
        let data = (0..n).map(|i| src[i * n + i]).collect();
        let value = Tensor::new(vec![n], data)?;
        Ok(self.push(value, Op::Diagonal(x), &[x]))
    }

    pub(crate) fn backward_node(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                if self.requires_grad(b) {
                    self.accumulate(grads, b, reduce_to(g, out.shape(), self.shape(b)));
                }
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                if self.requires_grad(b) {
                    let neg: Vec<R> = g.iter().map(|&v| -v).collect();
                    self.accumulate(grads, b, reduce_to(&neg, out.shape(), self.shape(b)));
                }
            }
            &Op::Mul(a, b) => {
                let map = BroadcastMap::new(out.shape(), self.shape(b));
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.requires_grad(a) {
                    let ga = g.iter().enumerate().map(|(j, &gv)| gv * bv[map.map(j)]).collect();
                    self.accumulate(grads, a, ga);
                }
                if self.requires_grad(b) {
                    let full: Vec<R> = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    self.accumulate(grads, b, reduce_to(&full, out.shape(), self.shape(b)));
                }
            }
            &Op::Div(a, b) => {
                let map = BroadcastMap::new(out.shape(), self.shape(b));
                let bv = self.value(b).data();
                if self.requires_grad(a) {
                    let ga = g.iter().enumerate().map(|(j, &gv)| gv / bv[map.map(j)]).collect();
                    self.accumulate(grads, a, ga);
                }
                if self.requires_grad(b) {
                    // d(a/b)/db = -(a/b)/b
                    let full: Vec<R> = g
                        .iter()
                        .zip(out.data())
                        .enumerate()
                        .map(|(j, (&gv, &q))| -gv * q / bv[map.map(j)])
                        .collect();
                    self.accumulate(grads, b, reduce_to(&full, out.shape(), self.shape(b)));
                }
            }
            &Op::Scale(x, c) => self.accumulate(grads, x, g.iter().map(|&v| v * c).collect()),
            &Op::MatMul(a, b) => {
                let sa = self.shape(a);
                let (m, k) = split_last(sa);
                let n = self.shape(b)[1];
                if self.requires_grad(a) {
                    let mut ga = vec![R::zero(); m * k];
                    R::gemm(m, n, k, g, false, self.value(b).data(), true, &mut ga, false);
                    self.accumulate(grads, a, ga);
                }
                if self.requires_grad(b) {
                    let mut gb = vec![R::zero(); k * n];
                    R::gemm(k, m, n, self.value(a).data(), true, g, false, &mut gb, false);
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Transpose(x) => {
                self.accumulate(grads, x, transpose_last2(g, out.shape()));
            }
            &Op::Exp(x) => {
                let gx = g.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(grads, x, gx);
            }
            &Op::Log(x) => {
                let xv = self.value(x).data();
                let gx = g.iter().zip(xv).map(|(&gv, &v)| gv / v).collect();
                self.accumulate(grads, x, gx);
            }
            &Op::Softplus(x) => {
                let xv = self.value(x).data();
                let gx = g.iter().zip(xv).map(|(&gv, &v)| gv * sigmoid(v)).collect();
                self.accumulate(grads, x, gx);
            }
            &Op::Sigmoid(x) => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (R::one() - y))
                    .collect();
                self.accumulate(grads, x, gx);
            }
            &Op::Silu(x) => {
                let xv = self.value(x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| {
                        let s = sigmoid(v);
                        gv * s * (R::one() + v * (R::one() - s))
                    })
                    .collect();
                self.accumulate(grads, x, gx);
            }
            &Op::LeakyRelu(x, slope) => {
                let xv = self.value(x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > R::zero() { gv } else { gv * slope })
                    .collect();
                self.accumulate(grads, x, gx);
            }
            &Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![g[0] / R::lit(n as f64); n]);
            }
            &Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
            &Op::Slice { x, axis, start } => {
                let shape = self.shape(x);
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let dim = shape[axis];
                let len = out.shape()[axis];
                let mut gx = vec![R::zero(); self.value(x).len()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, x, gx);
            }
            Op::Concat { xs, axis } => {
                let axis = *axis;
                let shape = out.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis];
                let mut offset = 0;
                for &v in xs {
                    let d = self.shape(v)[axis];
                    if self.requires_grad(v) {
                        let mut gv = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + d * inner]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += d;
                }
            }
            &Op::Broadcast(x) => {
                self.accumulate(grads, x, reduce_to(g, out.shape(), self.shape(x)));
            }
            &Op::OuterProduct(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let m = bv.len();
                if self.requires_grad(a) {
                    let ga = g
                        .chunks(m)
                        .map(|row| row.iter().zip(bv).map(|(&gv, &y)| gv * y).sum())
                        .collect();
                    self.accumulate(grads, a, ga);
                }
                if self.requires_grad(b) {
                    let mut gb = vec![R::zero(); m];
                    for (row, &x) in g.chunks(m).zip(av) {
                        gb.iter_mut().zip(row).for_each(|(acc, &gv)| *acc += gv * x);
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::RmsNorm { x, eps } => {
                let xv = self.value(x).data();
                let (_, n) = split_last(out.shape());
                let nr = R::lit(n as f64);
                let mut gx = Vec::with_capacity(xv.len());
                for ((xr, yr), gr) in xv.chunks(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                    let ms = xr.iter().map(|&v| v * v).sum::<R>() / nr;
                    let inv = R::one() / (ms + eps).sqrt();
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<R>() / nr;
                    gx.extend(gr.iter().zip(yr).map(|(&gv, &y)| (gv - y * dot) * inv));
                }
                self.accumulate(grads, x, gx);
            }
            &Op::L2NormalizeRows(x) => {
                let xv = self.value(x).data();
                let (_, n) = split_last(out.shape());
                let mut gx = Vec::with_capacity(xv.len());
                for ((xr, yr), gr) in xv.chunks(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                    let norm = xr.iter().map(|&v| v * v).sum::<R>().sqrt();
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<R>();
                    gx.extend(gr.iter().zip(yr).map(|(&gv, &y)| (gv - y * dot) / norm));
                }
                self.accumulate(grads, x, gx);
            }
            &Op::LogSumExpRows(x) => {
                let xv = self.value(x).data();
                let (_, n) = split_last(self.shape(x));
                let mut gx = Vec::with_capacity(xv.len());
                for ((row, &lse), &gv) in xv.chunks(n).zip(out.data()).zip(g) {
                    gx.extend(row.iter().map(|&v| gv * (v - lse).exp()));
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Diagonal(x) => {
                let n = g.len();
                let mut gx = vec![R::zero(); n * n];
                for (i, &gv) in g.iter().enumerate() {
                    gx[i * n + i] = gv;
                }
                self.accumulate(grads, x, gx);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            } => self.conv1d_backward(*x, *w, *b, *stride, *padding, *groups, out, g, grads),
            Op::Deconv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => self.deconv1d_backward(*x, *w, *b, *stride, *padding, out, g, grads),
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<R>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.requires_grad(v)).collect();
                let gs = op.backward(&values, out, g, &needs);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        self.accumulate(grads, v, gv);
                    }
                }
            }
        }
    }
}

fn transpose_last2<R: Real>(src: &[R], shape: &[usize]) -> Vec<R> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let mut out = vec![R::zero(); src.len()];
    for (blk_in, blk_out) in src.chunks(rows * cols).zip(out.chunks_mut(rows * cols)) {
        for i in 0..rows {
            for j in 0..cols {
                blk_out[j * rows + i] = blk_in[i * cols + j];
            }
        }
    }
    out
}
