//! Forward definitions of every recorded operation.

use super::kernels::{self, axis_split};
use super::tape::{sigmoid, softplus, Op};
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn build(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    Tensor {
        shape,
        data,
        grad: None,
        requires_grad: false,
    }
}

impl Tape {
    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = build(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(out, op, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = build(ta.shape().to_vec(), data);
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Shift(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Sum of a list of same-shaped values.
    pub fn sum_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Contract("sum_all of an empty list".into()))?;
        let mut acc = *first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// `x[c, ...] * m[...]`: a per-position weight shared by every channel.
    pub fn channel_mul(&mut self, x: Var, m: Var) -> Result<Var> {
        let (sx, sm) = (self.shape(x).to_vec(), self.shape(m).to_vec());
        let inner: usize = sm.iter().product();
        if sx.len() < 2 || sx[1..].iter().product::<usize>() != inner {
            return Err(Error::dim("channel_mul", &sx, &sm));
        }
        let (xv, mv) = (self.data(x), self.data(m));
        let data = xv
            .chunks(inner)
            .flat_map(|row| row.iter().zip(mv).map(|(a, b)| a * b))
            .collect();
        Ok(self.push(build(sx, data), Op::ChannelMul(x, m), &[x, m]))
    }

    /// `x[c, ...] + b[c]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.is_empty() || sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::dim("channel_bias", &sx, &sb));
        }
        let inner = self.value(x).numel() / sx[0];
        let (xv, bv) = (self.data(x), self.data(b));
        let data = xv
            .chunks(inner)
            .zip(bv)
            .flat_map(|(row, &c)| row.iter().map(move |v| v + c))
            .collect();
        Ok(self.push(build(sx, data), Op::ChannelBias(x, b), &[x, b]))
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.max(0.0).sqrt())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// ln(clamp(x, lo, hi)); zero gradient outside the open interval.
    pub fn clamp_log(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::ClampLog { x, lo, hi }, |v| v.clamp(lo, hi).ln())
    }

    /// ln(1 + eˣ), evaluated without overflow for large |x|.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// sqrt(Σ x²); the gradient at x = 0 is taken to be 0.
    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(s), Op::FrobeniusNorm(x), &[x])
    }

    pub fn l1_norm(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::L1Norm(x), &[x])
    }

    /// Global maximum; ties resolve to the lowest flat index.
    pub fn max(&mut self, x: Var) -> Var {
        let idx = arg_extremum(self.data(x), |a, b| a > b);
        let v = self.data(x)[idx];
        self.push(Tensor::scalar(v), Op::Extremum(x, idx), &[x])
    }

    /// Global minimum; ties resolve to the lowest flat index.
    pub fn min(&mut self, x: Var) -> Var {
        let idx = arg_extremum(self.data(x), |a, b| a < b);
        let v = self.data(x)[idx];
        self.push(Tensor::scalar(v), Op::Extremum(x, idx), &[x])
    }

    /// Maximum along `axis` (removed from the shape); ties take the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.data(x);
        let mut vals = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for n in 0..inner {
                let mut best = (o * len) * inner + n;
                for l in 1..len {
                    let idx = (o * len + l) * inner + n;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                vals.push(xv[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(build(out_shape, vals), Op::MaxAxis { x, argmax }, &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for n in 0..inner {
                    out[o * inner + n] += xv[(o * len + l) * inner + n];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(build(out_shape, out), Op::SumAxis { x, axis }, &[x]))
    }

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        let out = softmax_slices(self.data(x), &shape, axis, false);
        Ok(self.push(build(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        let out = softmax_slices(self.data(x), &shape, axis, true);
        Ok(self.push(build(shape, out), Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(build(vec![m, n], out), Op::Matmul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2()?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Contiguous flat range of `x`, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let len = self.value(x).numel();
        if offset + n > len {
            return Err(Error::Index {
                what: "slice",
                index: offset + n,
                len,
            });
        }
        let data = self.data(x)[offset..offset + n].to_vec();
        Ok(self.push(build(shape.to_vec(), data), Op::Slice { x, offset }, &[x]))
    }

    /// Concatenation along axis 0 (the channel axis for feature maps).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(build(shape, data), Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks same-shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(p));
            rows.push(self.reshape(p, &s)?);
        }
        self.concat(&rows)
    }

    /// Right-pads every row of a rank-2 tensor with zero columns up to `cols`.
    pub fn pad_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || cols < s[1] {
            return Err(Error::dim("pad_cols", &s, &[s.first().copied().unwrap_or(0), cols]));
        }
        let (rows, from) = (s[0], s[1]);
        let xv = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            out[r * cols..r * cols + from].copy_from_slice(&xv[r * from..(r + 1) * from]);
        }
        Ok(self.push(
            build(vec![rows, cols], out),
            Op::PadCols { x, from, to: cols },
            &[x],
        ))
    }

    /// Selects rows of a `[vocab, d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", &s, &[2]));
        }
        let d = s[1];
        let tv = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= s[0] {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: id,
                    len: s[0],
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            build(vec![ids.len(), d], out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// 3×3 stride-1 same-padded convolution: x `[cin,h,w]`, w `[cout,cin,3,3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::dim("conv3x3", &sx, &sw));
        }
        if let Some(bv) = b {
            if self.shape(bv) != [sw[0]] {
                return Err(Error::dim("conv3x3 bias", self.shape(bv), &[sw[0]]));
            }
        }
        let (cin, h, wd, cout) = (sx[0], sx[1], sx[2], sw[0]);
        let mut out = vec![0.0; cout * h * wd];
        kernels::conv3_forward(
            self.data(x),
            self.data(w),
            b.map(|bv| self.data(bv)),
            &mut out,
            cin,
            cout,
            h,
            wd,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(build(vec![cout, h, wd], out), Op::Conv3 { x, w, b }, &inputs))
    }

    /// Nearest-neighbour 2× upsampling of a `[c,h,w]` map.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("upsample2", &s, &[3]));
        }
        let out = kernels::upsample2_forward(self.data(x), s[0], s[1], s[2]);
        Ok(self.push(build(vec![s[0], s[1] * 2, s[2] * 2], out), Op::Upsample2(x), &[x]))
    }

    /// 2×2 mean pooling of a `[c,h,w]` map with even sides.
    pub fn mean_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::dim("mean_pool2", &s, &[3]));
        }
        let out = kernels::pool2_forward(self.data(x), s[0], s[1], s[2]);
        Ok(self.push(build(vec![s[0], s[1] / 2, s[2] / 2], out), Op::Pool2(x), &[x]))
    }

    /// Row-wise affine map: x `[rows, in]` (or `[in]`), w `[out, in]`, b `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let vector = sx.len() == 1;
        if sw.len() != 2 || sx.is_empty() || sx.len() > 2 || *sx.last().unwrap() != sw[1] {
            return Err(Error::dim("affine", &sx, &sw));
        }
        let (fout, fin) = (sw[0], sw[1]);
        if let Some(bv) = b {
            if self.shape(bv) != [fout] {
                return Err(Error::dim("affine bias", self.shape(bv), &[fout]));
            }
        }
        let rows = if vector { 1 } else { sx[0] };
        let mut out = vec![0.0; rows * fout];
        if let Some(bv) = b {
            let bd = self.data(bv);
            out.chunks_mut(fout).for_each(|r| r.copy_from_slice(bd));
        }
        kernels::matmul_bt_acc(self.data(x), self.data(w), &mut out, rows, fin, fout);
        let shape = if vector { vec![fout] } else { vec![rows, fout] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(build(shape, out), Op::AffineRows { x, w, b }, &inputs))
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Index {
            what: "axis",
            index: axis,
            len: shape.len(),
        });
    }
    Ok(())
}

fn arg_extremum(v: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if better(x, v[best]) {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_slices(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for n in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + n;
            let m = (0..len).map(|l| x[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|l| (x[idx(l)] - m).exp()).sum();
            for l in 0..len {
                out[idx(l)] = if log {
                    x[idx(l)] - m - z.ln()
                } else {
                    (x[idx(l)] - m).exp() / z
                };
            }
        }
    }
    out
}
