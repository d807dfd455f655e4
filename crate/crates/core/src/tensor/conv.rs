//! Strided, padded, grouped 1-D convolution and its transpose over
//! `[batch, length, channels]` sequences.

use super::tape::{Op, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// `⌊(len + 2·padding − kernel) / stride⌋ + 1`.
pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidShape {
            op: "conv1d",
            msg: format!("kernel ({kernel}) and stride ({stride}) must be positive"),
        });
    }
    if len + 2 * padding < kernel {
        return Err(Error::EmptyOutput {
            op: "conv1d",
            len,
            padding,
            kernel,
        });
    }
    Ok((len + 2 * padding - kernel) / stride + 1)
}

/// `(len − 1)·stride − 2·padding + kernel + output_padding`.
pub fn deconv1d_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<usize> {
    let full = (len.max(1) - 1) * stride + kernel + output_padding;
    if len == 0 || full <= 2 * padding {
        return Err(Error::EmptyOutput {
            op: "deconv1d",
            len,
            padding,
            kernel,
        });
    }
    Ok(full - 2 * padding)
}

/// Picks `(padding, output_padding)` so a transposed convolution maps
/// `len` to exactly `target`. `output_padding < stride`.
pub fn deconv_padding_for(len: usize, target: usize, stride: usize, kernel: usize) -> Result<(usize, usize)> {
    for padding in 0..kernel {
        for output_padding in 0..stride {
            if deconv1d_out_len(len, kernel, stride, padding, output_padding).ok() == Some(target) {
                return Ok((padding, output_padding));
            }
        }
    }
    Err(Error::LengthMismatch {
        from: len,
        to: target,
        stride,
        kernel,
    })
}

/// `[L, C]` is treated as a batch of one.
fn batch_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [l, c] => Ok((1, l, c)),
        [p, l, c] => Ok((p, l, c)),
        _ => Err(Error::InvalidShape {
            op,
            msg: format!("input must be [L, C] or [P, L, C], got {shape:?}"),
        }),
    }
}

fn out_shape(in_shape: &[usize], len: usize, channels: usize) -> Vec<usize> {
    if in_shape.len() == 2 {
        vec![len, channels]
    } else {
        vec![in_shape[0], len, channels]
    }
}

struct ConvGeom {
    batch: usize,
    len: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    out_len: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl ConvGeom {
    /// Input position read by output `t` at tap `j`, if inside the sequence.
    #[inline]
    fn src(&self, t: usize, j: usize) -> Option<usize> {
        (t * self.stride + j).checked_sub(self.padding).filter(|&p| p < self.len)
    }

    fn im2col<R: Real>(&self, x: &[R]) -> Vec<R> {
        let width = self.kernel * self.cin;
        let mut cols = vec![R::zero(); self.batch * self.out_len * width];
        for p in 0..self.batch {
            for t in 0..self.out_len {
                let row = &mut cols[(p * self.out_len + t) * width..][..width];
                for j in 0..self.kernel {
                    if let Some(pos) = self.src(t, j) {
                        let xs = &x[(p * self.len + pos) * self.cin..][..self.cin];
                        row[j * self.cin..(j + 1) * self.cin].copy_from_slice(xs);
                    }
                }
            }
        }
        cols
    }

    /// `[cout, cin, k]` kernel as a `[k·cin, cout]` matrix.
    fn weight_matrix<R: Real>(&self, w: &[R]) -> Vec<R> {
        let (cin, cout, k) = (self.cin, self.cout, self.kernel);
        let mut m = vec![R::zero(); k * cin * cout];
        for o in 0..cout {
            for c in 0..cin {
                for j in 0..k {
                    m[(j * cin + c) * cout + o] = w[(o * cin + c) * k + j];
                }
            }
        }
        m
    }
}

impl<R: Real> Tape<R> {
    fn conv_geom(&self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<ConvGeom> {
        let (batch, len, cin) = batch_dims(self.shape(x), "conv1d")?;
        let ws = self.shape(w).to_vec();
        if groups == 0 || cin % groups != 0 || ws.len() != 3 || ws[0] % groups != 0 || ws[1] * groups != cin {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let out_len = conv1d_out_len(len, ws[2], stride, padding)?;
        Ok(ConvGeom {
            batch,
            len,
            cin,
            cout: ws[0],
            kernel: ws[2],
            out_len,
            stride,
            padding,
            groups,
        })
    }

    /// Cross-correlation of `x` (`[L, Cin]` or `[P, L, Cin]`) with kernels
    /// `w` of shape `[Cout, Cin/groups, m]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let geo = self.conv_geom(x, w, b, stride, padding, groups)?;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let rows = geo.batch * geo.out_len;
        let mut y = vec![R::zero(); rows * geo.cout];
        if groups == 1 {
            let cols = geo.im2col(xv);
            let wm = geo.weight_matrix(wv);
            R::gemm(rows, geo.kernel * geo.cin, geo.cout, &cols, false, &wm, false, &mut y, false);
        } else {
            grouped_forward(&geo, xv, wv, &mut y);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(geo.cout) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let value = Tensor::new(out_shape(self.shape(x), geo.out_len, geo.cout), y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            },
            &inputs,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
        _out: &Tensor<R>,
        g: &[R],
        grads: &mut [Option<Vec<R>>],
    ) {
        let geo = self.conv_geom(x, w, b, stride, padding, groups).expect("validated in forward");
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        if let Some(b) = b.filter(|&b| self.requires_grad(b)) {
            let mut gb = vec![R::zero(); geo.cout];
            for row in g.chunks(geo.cout) {
                gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
            self.accumulate(grads, b, gb);
        }
        let (need_x, need_w) = (self.requires_grad(x), self.requires_grad(w));
        if groups == 1 {
            let rows = geo.batch * geo.out_len;
            let width = geo.kernel * geo.cin;
            if need_w {
                let cols = geo.im2col(xv);
                let mut gm = vec![R::zero(); width * geo.cout];
                R::gemm(width, rows, geo.cout, &cols, true, g, false, &mut gm, false);
                let mut gw = vec![R::zero(); wv.len()];
                for o in 0..geo.cout {
                    for c in 0..geo.cin {
                        for j in 0..geo.kernel {
                            gw[(o * geo.cin + c) * geo.kernel + j] = gm[(j * geo.cin + c) * geo.cout + o];
                        }
                    }
                }
                self.accumulate(grads, w, gw);
            }
            if need_x {
                let wm = geo.weight_matrix(wv);
                let mut gcols = vec![R::zero(); rows * width];
                R::gemm(rows, geo.cout, width, g, false, &wm, true, &mut gcols, false);
                let mut gx = vec![R::zero(); xv.len()];
                for p in 0..geo.batch {
                    for t in 0..geo.out_len {
                        let row = &gcols[(p * geo.out_len + t) * width..][..width];
                        for j in 0..geo.kernel {
                            if let Some(pos) = geo.src(t, j) {
                                let dst = &mut gx[(p * geo.len + pos) * geo.cin..][..geo.cin];
                                dst.iter_mut()
                                    .zip(&row[j * geo.cin..(j + 1) * geo.cin])
                                    .for_each(|(a, &v)| *a += v);
                            }
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
        } else {
            let mut gx = vec![R::zero(); if need_x { xv.len() } else { 0 }];
            let mut gw = vec![R::zero(); if need_w { wv.len() } else { 0 }];
            grouped_backward(&geo, xv, wv, g, need_x.then_some(&mut gx[..]), need_w.then_some(&mut gw[..]));
            if need_x {
                self.accumulate(grads, x, gx);
            }
            if need_w {
                self.accumulate(grads, w, gw);
            }
        }
    }

    fn deconv_geom(&self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, output_padding: usize) -> Result<ConvGeom> {
        let (batch, len, cin) = batch_dims(self.shape(x), "deconv1d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != cin || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "deconv1d",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(Error::ShapeMismatch {
                    op: "deconv1d bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let out_len = deconv1d_out_len(len, ws[2], stride, padding, output_padding)?;
        Ok(ConvGeom {
            batch,
            len,
            cin,
            cout: ws[1],
            kernel: ws[2],
            out_len,
            stride,
            padding,
            groups: 1,
        })
    }

    /// Transposed convolution of `x` (`[L, Cin]` or `[P, L, Cin]`) with
    /// kernels `w` of shape `[Cin, Cout, k]`.
    pub fn deconv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let geo = self.deconv_geom(x, w, b, stride, padding, output_padding)?;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let (k, cout) = (geo.kernel, geo.cout);
        let wm = deconv_weight_matrix(&geo, wv);
        let rows = geo.batch * geo.len;
        let mut yc = vec![R::zero(); rows * k * cout];
        R::gemm(rows, geo.cin, k * cout, xv, false, &wm, false, &mut yc, false);
        let mut out = vec![R::zero(); geo.batch * geo.out_len * cout];
        for p in 0..geo.batch {
            for t in 0..geo.len {
                let row = &yc[(p * geo.len + t) * k * cout..][..k * cout];
                for j in 0..k {
                    if let Some(pos) = deconv_dst(&geo, t, j) {
                        let dst = &mut out[(p * geo.out_len + pos) * cout..][..cout];
                        dst.iter_mut()
                            .zip(&row[j * cout..(j + 1) * cout])
                            .for_each(|(a, &v)| *a += v);
                    }
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let value = Tensor::new(out_shape(self.shape(x), geo.out_len, cout), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::Deconv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn deconv1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        out: &Tensor<R>,
        g: &[R],
        grads: &mut [Option<Vec<R>>],
    ) {
        let (_, len, cin) = batch_dims(self.shape(x), "deconv1d").expect("validated");
        let k = self.shape(w)[2];
        let out_len = out.shape()[out.rank() - 2];
        // recover output_padding from the recorded output length
        let output_padding = out_len + 2 * padding - ((len - 1) * stride + k);
        let geo = self
            .deconv_geom(x, w, b, stride, padding, output_padding)
            .expect("validated in forward");
        debug_assert_eq!(geo.cin, cin);
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let cout = geo.cout;
        if let Some(b) = b.filter(|&b| self.requires_grad(b)) {
            let mut gb = vec![R::zero(); cout];
            for row in g.chunks(cout) {
                gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
            self.accumulate(grads, b, gb);
        }
        let rows = geo.batch * geo.len;
        let mut gyc = vec![R::zero(); rows * k * cout];
        for p in 0..geo.batch {
            for t in 0..geo.len {
                let row = &mut gyc[(p * geo.len + t) * k * cout..][..k * cout];
                for j in 0..k {
                    if let Some(pos) = deconv_dst(&geo, t, j) {
                        row[j * cout..(j + 1) * cout]
                            .copy_from_slice(&g[(p * geo.out_len + pos) * cout..][..cout]);
                    }
                }
            }
        }
        if self.requires_grad(x) {
            let wm = deconv_weight_matrix(&geo, wv);
            let mut gx = vec![R::zero(); xv.len()];
            R::gemm(rows, k * cout, geo.cin, &gyc, false, &wm, true, &mut gx, false);
            self.accumulate(grads, x, gx);
        }
        if self.requires_grad(w) {
            let mut gm = vec![R::zero(); geo.cin * k * cout];
            R::gemm(geo.cin, rows, k * cout, xv, true, &gyc, false, &mut gm, false);
            let mut gw = vec![R::zero(); wv.len()];
            for c in 0..geo.cin {
                for o in 0..cout {
                    for j in 0..k {
                        gw[(c * cout + o) * k + j] = gm[c * k * cout + j * cout + o];
                    }
                }
            }
            self.accumulate(grads, w, gw);
        }
    }
}

#[inline]
fn deconv_dst(geo: &ConvGeom, t: usize, j: usize) -> Option<usize> {
    (t * geo.stride + j).checked_sub(geo.padding).filter(|&p| p < geo.out_len)
}

/// `[cin, cout, k]` kernel as a `[cin, k·cout]` matrix.
fn deconv_weight_matrix<R: Real>(geo: &ConvGeom, w: &[R]) -> Vec<R> {
    let (cin, cout, k) = (geo.cin, geo.cout, geo.kernel);
    let mut m = vec![R::zero(); w.len()];
    for c in 0..cin {
        for o in 0..cout {
            for j in 0..k {
                m[c * k * cout + j * cout + o] = w[(c * cout + o) * k + j];
            }
        }
    }
    m
}

fn grouped_forward<R: Real>(geo: &ConvGeom, x: &[R], w: &[R], y: &mut [R]) {
    let cin_g = geo.cin / geo.groups;
    let cout_g = geo.cout / geo.groups;
    for p in 0..geo.batch {
        for t in 0..geo.out_len {
            let yrow = &mut y[(p * geo.out_len + t) * geo.cout..][..geo.cout];
            for j in 0..geo.kernel {
                let Some(pos) = geo.src(t, j) else { continue };
                let xrow = &x[(p * geo.len + pos) * geo.cin..][..geo.cin];
                for (o, yv) in yrow.iter_mut().enumerate() {
                    let base = (o / cout_g) * cin_g;
                    for c in 0..cin_g {
                        *yv += xrow[base + c] * w[(o * cin_g + c) * geo.kernel + j];
                    }
                }
            }
        }
    }
}

fn grouped_backward<R: Real>(
    geo: &ConvGeom,
    x: &[R],
    w: &[R],
    g: &[R],
    mut gx: Option<&mut [R]>,
    mut gw: Option<&mut [R]>,
) {
    let cin_g = geo.cin / geo.groups;
    let cout_g = geo.cout / geo.groups;
    for p in 0..geo.batch {
        for t in 0..geo.out_len {
            let grow = &g[(p * geo.out_len + t) * geo.cout..][..geo.cout];
            for j in 0..geo.kernel {
                let Some(pos) = geo.src(t, j) else { continue };
                let xoff = (p * geo.len + pos) * geo.cin;
                for (o, &gv) in grow.iter().enumerate() {
                    let base = (o / cout_g) * cin_g;
                    for c in 0..cin_g {
                        let widx = (o * cin_g + c) * geo.kernel + j;
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[xoff + base + c] += gv * w[widx];
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[widx] += gv * x[xoff + base + c];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    fn seq(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Direct definition of a (grouped) cross-correlation.
    fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, groups: usize) -> Vec<f64> {
        let (l, cin) = (x.shape()[0], x.shape()[1]);
        let (cout, cin_g, m) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let lout = (l + 2 * pad - m) / stride + 1;
        let cout_g = cout / groups;
        let mut y = vec![0.0; lout * cout];
        for t in 0..lout {
            for o in 0..cout {
                let grp = o / cout_g;
                for c in 0..cin_g {
                    for j in 0..m {
                        let pos = (t * stride + j) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < l {
                            y[t * cout + o] += x.data()[pos as usize * cin + grp * cin_g + c]
                                * w.data()[(o * cin_g + c) * m + j];
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn length_formula_examples() {
        assert_eq!(conv1d_out_len(189, 30, 7, 0).unwrap(), 23);
        assert_eq!(conv1d_out_len(10, 3, 2, 1).unwrap(), 5);
        assert!(matches!(conv1d_out_len(2, 5, 1, 1), Err(Error::EmptyOutput { .. })));
        assert_eq!(deconv1d_out_len(5, 3, 2, 1, 1).unwrap(), 10);
        assert_eq!(deconv1d_out_len(2, 3, 2, 1, 0).unwrap(), 3);
    }

    #[test]
    fn deconv_padding_inverts_floor_halving() {
        for target in 2..200 {
            let half = target / 2;
            let (p, o) = deconv_padding_for(half, target, 2, 3).unwrap();
            assert_eq!(deconv1d_out_len(half, 3, 2, p, o).unwrap(), target);
        }
        assert!(matches!(deconv_padding_for(2, 12, 2, 3), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut tape = Tape::<f64>::new();
        let xv = seq(&[7, 1], 1);
        let x = tape.constant(xv.clone());
        let w = tape.constant(Tensor::full(&[1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1d(x, w, Some(b), 1, 0, 1).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn conv_matches_direct_definition() {
        for &(l, cin, cout, m, s, p, g) in &[
            (10, 1, 4, 3, 2, 1, 1),
            (12, 6, 6, 3, 1, 1, 6),
            (9, 4, 6, 2, 3, 0, 2),
            (23, 8, 16, 3, 2, 1, 1),
        ] {
            let xv = seq(&[l, cin], 3);
            let wv = seq(&[cout, cin / g, m], 4);
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(xv.clone());
            let w = tape.constant(wv.clone());
            let y = tape.conv1d(x, w, None, s, p, g).unwrap();
            let expect = conv_reference(&xv, &wv, s, p, g);
            for (a, b) in tape.value(y).data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_deconv_gives_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[5, 3]));
        let w = tape.constant(seq(&[3, 2, 3], 9));
        let b = tape.constant(Tensor::new(vec![2], vec![0.25, -1.5]).unwrap());
        let y = tape.deconv1d(x, w, Some(b), 2, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[10, 2]);
        for row in tape.value(y).data().chunks(2) {
            assert_eq!(row, &[0.25, -1.5]);
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> = <x, deconv(y)> for matching geometry and no bias.
        let (l, cin, cout) = (11, 3, 4);
        let xv = seq(&[l, cin], 5);
        let wv = seq(&[cout, cin, 3], 6);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv.clone());
        let w = tape.constant(wv.clone());
        let y = tape.conv1d(x, w, None, 2, 1, 1).unwrap();
        let lout = tape.shape(y)[0];
        let yv = seq(&[lout, cout], 7);
        let lhs: f64 = tape.value(y).data().iter().zip(yv.data()).map(|(a, b)| a * b).sum();
        // the conv kernel [cout, cin, k] read as a deconv kernel [cin', cout', k]
        let yc = tape.constant(yv);
        let (p, o) = deconv_padding_for(lout, l, 2, 3).unwrap();
        let back = tape.deconv1d(yc, w, None, 2, p, o).unwrap();
        assert_eq!(p, 1);
        let rhs: f64 = tape.value(back).data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for &(cin, cout, s, p, g) in &[(3, 4, 2, 1, 1), (4, 4, 1, 1, 4), (4, 6, 2, 0, 2)] {
            let n_x = 2 * 9 * cin;
            let n_w = cout * (cin / g) * 3;
            let point = seq(&[n_x + n_w + cout], 11);
            let err = grad_check(
                |t, v| {
                    let x = t.slice(v, 0, 0, n_x)?;
                    let x = t.reshape(x, &[2, 9, cin])?;
                    let w = t.slice(v, 0, n_x, n_w)?;
                    let w = t.reshape(w, &[cout, cin / g, 3])?;
                    let b = t.slice(v, 0, n_x + n_w, cout)?;
                    let y = t.conv1d(x, w, Some(b), s, p, g)?;
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum(y2))
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "conv ({cin},{cout},{s},{p},{g}): {err}");
        }
    }

    #[test]
    fn deconv_gradients_match_finite_differences() {
        for &(l, target) in &[(5usize, 10usize), (5, 11), (2, 3)] {
            let (cin, cout) = (3, 2);
            let (p, o) = deconv_padding_for(l, target, 2, 3).unwrap();
            let n_x = 2 * l * cin;
            let n_w = cin * cout * 3;
            let point = seq(&[n_x + n_w + cout], 13);
            let err = grad_check(
                |t, v| {
                    let x = t.slice(v, 0, 0, n_x)?;
                    let x = t.reshape(x, &[2, l, cin])?;
                    let w = t.slice(v, 0, n_x, n_w)?;
                    let w = t.reshape(w, &[cin, cout, 3])?;
                    let b = t.slice(v, 0, n_x + n_w, cout)?;
                    let y = t.deconv1d(x, w, Some(b), 2, p, o)?;
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum(y2))
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "deconv {l}->{target}: {err}");
        }
    }

    proptest! {
        #[test]
        fn conv_length_formula_holds(l in 1usize..64, m in 1usize..9, s in 1usize..6, p in 0usize..4) {
            prop_assume!(l + 2 * p >= m);
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::full(&[l, 2], 1.0));
            let w = tape.constant(Tensor::full(&[3, 2, m], 0.5));
            let y = tape.conv1d(x, w, None, s, p, 1).unwrap();
            prop_assert_eq!(tape.shape(y)[0], (l + 2 * p - m) / s + 1);
        }
    }
}
