//! Forward operations. Each checks shapes, computes the result, and records
//! provenance for the backward pass.

use super::{broadcast_chunk, Op, Tape, TensorId};
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let chunk = broadcast_chunk(name, self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.data(a), self.data(b));
        // rhs index repeats every `chunk` elements (suffix broadcast)
        let out: Vec<f64> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % chunk]))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_op(name, out, shape, &[a.0, b.0], op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("add_scalar", data, shape, &[a.0], Op::AddScalar { a: a.0 })
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("mul_scalar", data, shape, &[a.0], Op::MulScalar { a: a.0, c })
    }

    /// 2-D matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push_op("matmul", out, vec![m, n], &[a.0, b.0], Op::Matmul { a: a.0, b: b.0, m, k, n })
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                detail: format!("expected a 2-D tensor, got {:?}", sa),
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let ad = self.data(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = ad[i * cols + j];
            }
        }
        self.push_op("transpose", out, vec![cols, rows], &[a.0], Op::Transpose { a: a.0, rows, cols })
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(name, data, shape, &[a.0], op)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid { a: a.0 })
    }

    /// `x * sigmoid(x)` (SiLU).
    pub fn swish(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("swish", a, |x| x * sigmoid(x), Op::Swish { a: a.0 })
    }

    pub fn sin(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("sin", a, f64::sin, Op::Sin { a: a.0 })
    }

    pub fn cos(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("cos", a, f64::cos, Op::Cos { a: a.0 })
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("exp", a, f64::exp, Op::Exp { a: a.0 })
    }

    pub fn recip(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("recip", a, |x| 1.0 / x, Op::Recip { a: a.0 })
    }

    /// Softmax along the last dimension, max-shifted for stability.
    pub fn softmax_lastdim(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let width = *sa.last().ok_or(Error::InvalidShape {
            op: "softmax_lastdim",
            detail: "zero-rank tensor".into(),
        })?;
        let ad = self.data(a);
        let mut out = vec![0.0; ad.len()];
        for (row_in, row_out) in ad.chunks(width).zip(out.chunks_mut(width)) {
            softmax_row(row_in, row_out);
        }
        let shape = sa.to_vec();
        self.push_op("softmax_lastdim", out, shape, &[a.0], Op::SoftmaxLastDim { a: a.0, width })
    }

    /// Row-wise softmax of a square score matrix restricted to the causal
    /// prefix: row `i` is a softmax over columns `0..=i`, zero beyond.
    pub fn causal_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 || sa[0] != sa[1] {
            return Err(Error::InvalidShape {
                op: "causal_softmax",
                detail: format!("expected a square matrix, got {:?}", sa),
            });
        }
        let n = sa[0];
        let ad = self.data(a);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &ad[i * n..i * n + i + 1];
            softmax_row(row, &mut out[i * n..i * n + i + 1]);
        }
        self.push_op("causal_softmax", out, vec![n, n], &[a.0], Op::CausalSoftmax { a: a.0, n })
    }

    /// Elementwise Huber penalty between predictions and targets:
    /// quadratic inside `delta`, linear outside.
    pub fn huber(&mut self, pred: TensorId, target: TensorId, delta: f64) -> Result<TensorId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::ShapeMismatch {
                op: "huber",
                lhs: self.shape(pred).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        if delta <= 0.0 {
            return Err(Error::InvalidShape {
                op: "huber",
                detail: format!("delta must be positive, got {delta}"),
            });
        }
        let (pd, td) = (self.data(pred), self.data(target));
        let data: Vec<f64> = pd
            .iter()
            .zip(td)
            .map(|(&p, &t)| {
                let r = (p - t).abs();
                if r <= delta {
                    0.5 * r * r
                } else {
                    delta * (r - 0.5 * delta)
                }
            })
            .collect();
        let shape = self.shape(pred).to_vec();
        self.push_op(
            "huber",
            data,
            shape,
            &[pred.0, target.0],
            Op::Huber { pred: pred.0, target: target.0, delta },
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let mut acc = 0.0;
        for &v in self.data(a) {
            acc += v;
        }
        self.push_op("sum", vec![acc], vec![1], &[a.0], Op::Sum { a: a.0 })
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.numel(a) as f64;
        let mut acc = 0.0;
        for &v in self.data(a) {
            acc += v;
        }
        self.push_op("mean", vec![acc / n], vec![1], &[a.0], Op::Mean { a: a.0 })
    }

    /// Sum along the last dimension: `[..., w] -> [...]`.
    pub fn sum_lastdim(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() < 2 {
            return Err(Error::InvalidShape {
                op: "sum_lastdim",
                detail: format!("need at least 2 dims, got {:?}", sa),
            });
        }
        let width = sa[sa.len() - 1];
        let out: Vec<f64> = self
            .data(a)
            .chunks(width)
            .map(|row| row.iter().sum())
            .collect();
        let shape = sa[..sa.len() - 1].to_vec();
        self.push_op("sum_lastdim", out, shape, &[a.0], Op::SumLastDim { a: a.0, width })
    }

    /// Column slice `[..., start..start+len]` along the last dimension.
    pub fn slice_lastdim(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        let width = *sa.last().ok_or(Error::InvalidShape {
            op: "slice_lastdim",
            detail: "zero-rank tensor".into(),
        })?;
        if len == 0 || start + len > width {
            return Err(Error::InvalidShape {
                op: "slice_lastdim",
                detail: format!("slice {start}..{} out of width {width}", start + len),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .chunks(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = len;
        self.push_op(
            "slice_lastdim",
            out,
            shape,
            &[a.0],
            Op::SliceLastDim { a: a.0, start, width_in: width, width_out: len },
        )
    }

    /// Concatenate along the last dimension; leading dims must agree.
    pub fn concat_lastdim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len()
            || sa.is_empty()
            || sa[..sa.len() - 1] != sb[..sb.len() - 1]
        {
            return Err(Error::ShapeMismatch {
                op: "concat_lastdim",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let rows = ad.len() / wa;
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for r in 0..rows {
            out.extend_from_slice(&ad[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&bd[r * wb..(r + 1) * wb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = wa + wb;
        self.push_op(
            "concat_lastdim",
            out,
            shape,
            &[a.0, b.0],
            Op::ConcatLastDim { a: a.0, b: b.0, wa, wb },
        )
    }

    /// Contiguous row slice `[start..start+len, ...]` along the first axis.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.is_empty() || len == 0 || start + len > sa[0] {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of {:?}", start + len, sa),
            });
        }
        let row_w: usize = sa[1..].iter().product();
        let out = self.data(a)[start * row_w..(start + len) * row_w].to_vec();
        let mut shape = sa.to_vec();
        shape[0] = len;
        self.push_op("slice_rows", out, shape, &[a.0], Op::SliceRows { a: a.0, start, row_w })
    }

    /// Gather rows by index along the first axis; indices may repeat.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.is_empty() || idx.is_empty() {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                detail: "empty input or index list".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= sa[0]) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                detail: format!("index {bad} out of {} rows", sa[0]),
            });
        }
        let row_w: usize = sa[1..].iter().product();
        let ad = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * row_w);
        for &i in idx {
            out.extend_from_slice(&ad[i * row_w..(i + 1) * row_w]);
        }
        let mut shape = sa.to_vec();
        shape[0] = idx.len();
        self.push_op(
            "gather_rows",
            out,
            shape,
            &[a.0],
            Op::GatherRows { a: a.0, idx: idx.to_vec(), row_w },
        )
    }

    /// Scatter-add rows of `src` into a zero tensor with `out_rows` rows:
    /// `out[idx[j]] += src[j]`. The inverse of [`Tape::gather_rows`].
    pub fn scatter_add_rows(&mut self, src: TensorId, idx: &[usize], out_rows: usize) -> Result<TensorId> {
        let ss = self.shape(src);
        if ss.is_empty() || ss[0] != idx.len() {
            return Err(Error::InvalidShape {
                op: "scatter_add_rows",
                detail: format!("{} source rows vs {} indices", ss.first().unwrap_or(&0), idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(Error::InvalidShape {
                op: "scatter_add_rows",
                detail: format!("index {bad} out of {out_rows} rows"),
            });
        }
        let row_w: usize = ss[1..].iter().product();
        let sd = self.data(src);
        let mut out = vec![0.0; out_rows * row_w];
        for (j, &i) in idx.iter().enumerate() {
            let dst = &mut out[i * row_w..(i + 1) * row_w];
            for (d, &s) in dst.iter_mut().zip(&sd[j * row_w..(j + 1) * row_w]) {
                *d += s;
            }
        }
        let mut shape = ss.to_vec();
        shape[0] = out_rows;
        self.push_op(
            "scatter_add_rows",
            out,
            shape,
            &[src.0],
            Op::ScatterAddRows { src: src.0, idx: idx.to_vec(), row_w },
        )
    }

    /// Multiply row `i` of `a` by `s[i]`; `s` has shape `[rows]` or `[rows, 1]`.
    pub fn scale_rows(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let (sa, ss) = (self.shape(a), self.shape(s));
        let rows = sa.first().copied().unwrap_or(0);
        let s_ok = ss == [rows] || ss == [rows, 1];
        if sa.len() < 2 || !s_ok {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: sa.to_vec(),
                rhs: ss.to_vec(),
            });
        }
        let row_w: usize = sa[1..].iter().product();
        let (ad, sd) = (self.data(a), self.data(s));
        let mut out = Vec::with_capacity(ad.len());
        for (r, row) in ad.chunks(row_w).enumerate() {
            out.extend(row.iter().map(|&x| x * sd[r]));
        }
        let shape = sa.to_vec();
        self.push_op("scale_rows", out, shape, &[a.0, s.0], Op::ScaleRows { a: a.0, s: s.0, row_w })
    }

    /// Causal dilated depthwise convolution along the time axis:
    /// `out[j, c] = sum_k filt[k, c] * x[j - k*d, c]`, zero where the lag
    /// runs off the left edge. The filter looks strictly backward.
    pub fn depthwise_dilated_conv1d(&mut self, x: TensorId, filt: TensorId, dilation: usize) -> Result<TensorId> {
        let (sx, sf) = (self.shape(x), self.shape(filt));
        if sx.len() != 2 || sf.len() != 2 || sx[1] != sf[1] {
            return Err(Error::ShapeMismatch {
                op: "depthwise_dilated_conv1d",
                lhs: sx.to_vec(),
                rhs: sf.to_vec(),
            });
        }
        if dilation == 0 {
            return Err(Error::InvalidShape {
                op: "depthwise_dilated_conv1d",
                detail: "dilation must be >= 1".into(),
            });
        }
        let (t, h, k) = (sx[0], sx[1], sf[0]);
        let (xd, fd) = (self.data(x), self.data(filt));
        let mut out = vec![0.0; t * h];
        for j in 0..t {
            for lag in 0..k {
                let Some(src) = j.checked_sub(lag * dilation) else { break };
                let frow = &fd[lag * h..(lag + 1) * h];
                let xrow = &xd[src * h..(src + 1) * h];
                let orow = &mut out[j * h..(j + 1) * h];
                for c in 0..h {
                    orow[c] += frow[c] * xrow[c];
                }
            }
        }
        self.push_op(
            "depthwise_dilated_conv1d",
            out,
            vec![t, h],
            &[x.0, filt.0],
            Op::DepthwiseConv { x: x.0, filt: filt.0, dilation, t, h, k },
        )
    }

    /// Layer normalization over the last dimension with learnable gain and
    /// bias: `y = gamma * (x - mu) / sqrt(var + eps) + beta` per row.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let sx = self.shape(x);
        let width = *sx.last().ok_or(Error::InvalidShape {
            op: "layer_norm",
            detail: "zero-rank tensor".into(),
        })?;
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: sx.to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xd.len()];
        for (row, orow) in xd.chunks(width).zip(out.chunks_mut(width)) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..width {
                orow[c] = gd[c] * (row[c] - mean) * inv + bd[c];
            }
        }
        let shape = sx.to_vec();
        self.push_op(
            "layer_norm",
            out,
            shape,
            &[x.0, gamma.0, beta.0],
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps, width },
        )
    }
}

/// Stable softmax of one row into `out`.
fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}
