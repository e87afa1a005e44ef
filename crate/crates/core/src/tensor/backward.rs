//! Reverse pass: walk the tape from the root down, applying each op's
//! vector-Jacobian product. Nodes are visited exactly once, in reverse
//! creation order. Each pass computes its own flow and adds it into the
//! persistent grad slots, so repeated backward calls accumulate exactly.

use super::{Node, Op, Tape, TensorId};
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Add `update`'s contribution into the pass-local flow buffer of `node`.
fn accum(
    nodes: &[Node],
    flow: &mut [Option<Vec<f64>>],
    node: usize,
    update: impl FnOnce(&[f64], &mut [f64]),
) {
    if !nodes[node].requires_grad {
        return;
    }
    let dst = flow[node].get_or_insert_with(|| vec![0.0; nodes[node].data.len()]);
    update(&nodes[node].data, dst);
}

impl Tape {
    /// Accumulate `d root / d node` into the grad slot of every reachable
    /// node that requires grad. `root` must hold exactly one element.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidShape {
                op: "backward",
                detail: "empty tape".into(),
            });
        }
        if self.numel(root) != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.shape(root).to_vec(),
            });
        }
        let mut flow: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        flow[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = flow[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            {
                let n = &mut self.nodes[i];
                let grad = n.grad.get_or_insert_with(|| vec![0.0; n.data.len()]);
                for (d, &gv) in grad.iter_mut().zip(&g) {
                    *d += gv;
                }
            }
            let op = self.nodes[i].op.clone();
            self.propagate(&mut flow, i, &op, &g);
        }
        Ok(())
    }

    fn propagate(&self, flow: &mut [Option<Vec<f64>>], out: usize, op: &Op, g: &[f64]) {
        let nodes = &self.nodes;
        match *op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                accum(nodes, flow, a, |_, da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                accum(nodes, flow, b, |bd, db| {
                    let chunk = bd.len();
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % chunk] += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                accum(nodes, flow, a, |_, da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                accum(nodes, flow, b, |bd, db| {
                    let chunk = bd.len();
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % chunk] -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let bd = &nodes[b].data;
                let chunk = bd.len();
                accum(nodes, flow, a, |_, da| {
                    for (i, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                        *d += gv * bd[i % chunk];
                    }
                });
                let ad = &nodes[a].data;
                accum(nodes, flow, b, |_, db| {
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % chunk] += gv * ad[i];
                    }
                });
            }
            Op::AddScalar { a } => {
                accum(nodes, flow, a, |_, da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::MulScalar { a, c } => {
                accum(nodes, flow, a, |_, da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                let bd = &nodes[b].data;
                // dA = g @ B^T
                accum(nodes, flow, a, |_, da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            da[i * k + p] += acc;
                        }
                    }
                });
                let ad = &nodes[a].data;
                // dB = A^T @ g
                accum(nodes, flow, b, |_, db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let brow = &mut db[p * n..(p + 1) * n];
                            for (d, &gv) in brow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose { a, rows, cols } => {
                accum(nodes, flow, a, |_, da| {
                    for i in 0..rows {
                        for j in 0..cols {
                            da[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = &nodes[out].data;
                accum(nodes, flow, a, |_, da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Swish { a } => {
                accum(nodes, flow, a, |ad, da| {
                    for i in 0..da.len() {
                        let s = sigmoid(ad[i]);
                        da[i] += g[i] * (s + ad[i] * s * (1.0 - s));
                    }
                });
            }
            Op::Sin { a } => {
                accum(nodes, flow, a, |ad, da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * ad[i].cos();
                    }
                });
            }
            Op::Cos { a } => {
                accum(nodes, flow, a, |ad, da| {
                    for i in 0..da.len() {
                        da[i] -= g[i] * ad[i].sin();
                    }
                });
            }
            Op::Exp { a } => {
                let y = &nodes[out].data;
                accum(nodes, flow, a, |_, da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * y[i];
                    }
                });
            }
            Op::Recip { a } => {
                let y = &nodes[out].data;
                accum(nodes, flow, a, |_, da| {
                    for i in 0..da.len() {
                        da[i] -= g[i] * y[i] * y[i];
                    }
                });
            }
            Op::SoftmaxLastDim { a, width } => {
                let y = &nodes[out].data;
                accum(nodes, flow, a, |_, da| {
                    for r in 0..y.len() / width {
                        let yr = &y[r * width..(r + 1) * width];
                        let gr = &g[r * width..(r + 1) * width];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        let dr = &mut da[r * width..(r + 1) * width];
                        for c in 0..width {
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::CausalSoftmax { a, n } => {
                let y = &nodes[out].data;
                accum(nodes, flow, a, |_, da| {
                    for i in 0..n {
                        let w = i + 1;
                        let yr = &y[i * n..i * n + w];
                        let gr = &g[i * n..i * n + w];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        let dr = &mut da[i * n..i * n + w];
                        for c in 0..w {
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Huber { pred, target, delta } => {
                let pd = &nodes[pred].data;
                let td = &nodes[target].data;
                accum(nodes, flow, pred, |_, dp| {
                    for i in 0..dp.len() {
                        dp[i] += g[i] * (pd[i] - td[i]).clamp(-delta, delta);
                    }
                });
                accum(nodes, flow, target, |_, dt| {
                    for i in 0..dt.len() {
                        dt[i] -= g[i] * (pd[i] - td[i]).clamp(-delta, delta);
                    }
                });
            }
            Op::Sum { a } => {
                let gv = g[0];
                accum(nodes, flow, a, |_, da| {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Mean { a } => {
                let gv = g[0];
                accum(nodes, flow, a, |ad, da| {
                    let scale = gv / ad.len() as f64;
                    for d in da.iter_mut() {
                        *d += scale;
                    }
                });
            }
            Op::SumLastDim { a, width } => {
                accum(nodes, flow, a, |_, da| {
                    for (r, &gv) in g.iter().enumerate() {
                        for d in &mut da[r * width..(r + 1) * width] {
                            *d += gv;
                        }
                    }
                });
            }
            Op::SliceLastDim { a, start, width_in, width_out } => {
                accum(nodes, flow, a, |_, da| {
                    for r in 0..g.len() / width_out {
                        for c in 0..width_out {
                            da[r * width_in + start + c] += g[r * width_out + c];
                        }
                    }
                });
            }
            Op::ConcatLastDim { a, b, wa, wb } => {
                let w = wa + wb;
                let rows = g.len() / w;
                accum(nodes, flow, a, |_, da| {
                    for r in 0..rows {
                        for c in 0..wa {
                            da[r * wa + c] += g[r * w + c];
                        }
                    }
                });
                accum(nodes, flow, b, |_, db| {
                    for r in 0..rows {
                        for c in 0..wb {
                            db[r * wb + c] += g[r * w + wa + c];
                        }
                    }
                });
            }
            Op::SliceRows { a, start, row_w } => {
                accum(nodes, flow, a, |_, da| {
                    let off = start * row_w;
                    for (d, &gv) in da[off..off + g.len()].iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::GatherRows { a, ref idx, row_w } => {
                accum(nodes, flow, a, |_, da| {
                    for (j, &i) in idx.iter().enumerate() {
                        let dst = &mut da[i * row_w..(i + 1) * row_w];
                        for (d, &gv) in dst.iter_mut().zip(&g[j * row_w..(j + 1) * row_w]) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::ScatterAddRows { src, ref idx, row_w } => {
                accum(nodes, flow, src, |_, ds| {
                    for (j, &i) in idx.iter().enumerate() {
                        let dst = &mut ds[j * row_w..(j + 1) * row_w];
                        for (d, &gv) in dst.iter_mut().zip(&g[i * row_w..(i + 1) * row_w]) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::ScaleRows { a, s, row_w } => {
                let sd = &nodes[s].data;
                accum(nodes, flow, a, |_, da| {
                    for (r, chunk) in da.chunks_mut(row_w).enumerate() {
                        for (c, d) in chunk.iter_mut().enumerate() {
                            *d += g[r * row_w + c] * sd[r];
                        }
                    }
                });
                let ad = &nodes[a].data;
                accum(nodes, flow, s, |_, ds| {
                    for r in 0..ds.len() {
                        let mut acc = 0.0;
                        for c in 0..row_w {
                            acc += g[r * row_w + c] * ad[r * row_w + c];
                        }
                        ds[r] += acc;
                    }
                });
            }
            Op::DepthwiseConv { x, filt, dilation, t, h, k } => {
                let fd = &nodes[filt].data;
                accum(nodes, flow, x, |_, dx| {
                    for src in 0..t {
                        for lag in 0..k {
                            let j = src + lag * dilation;
                            if j >= t {
                                break;
                            }
                            for c in 0..h {
                                dx[src * h + c] += fd[lag * h + c] * g[j * h + c];
                            }
                        }
                    }
                });
                let xd = &nodes[x].data;
                accum(nodes, flow, filt, |_, df| {
                    for j in 0..t {
                        for lag in 0..k {
                            let Some(src) = j.checked_sub(lag * dilation) else { break };
                            for c in 0..h {
                                df[lag * h + c] += g[j * h + c] * xd[src * h + c];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps, width } => {
                let xd = &nodes[x].data;
                let gd = &nodes[gamma].data;
                let rows = xd.len() / width;
                let mut mu = vec![0.0; rows];
                let mut inv = vec![0.0; rows];
                for r in 0..rows {
                    let row = &xd[r * width..(r + 1) * width];
                    let m = row.iter().sum::<f64>() / width as f64;
                    let v = row.iter().map(|&q| (q - m) * (q - m)).sum::<f64>() / width as f64;
                    mu[r] = m;
                    inv[r] = 1.0 / (v + eps).sqrt();
                }
                accum(nodes, flow, gamma, |_, dg| {
                    for r in 0..rows {
                        for c in 0..width {
                            let xh = (xd[r * width + c] - mu[r]) * inv[r];
                            dg[c] += g[r * width + c] * xh;
                        }
                    }
                });
                accum(nodes, flow, beta, |_, db| {
                    for r in 0..rows {
                        for c in 0..width {
                            db[c] += g[r * width + c];
                        }
                    }
                });
                accum(nodes, flow, x, |_, dx| {
                    for r in 0..rows {
                        let rowx = &xd[r * width..(r + 1) * width];
                        let rowg = &g[r * width..(r + 1) * width];
                        let mut sum_gg = 0.0;
                        let mut sum_ggx = 0.0;
                        for c in 0..width {
                            let gg = rowg[c] * gd[c];
                            let xh = (rowx[c] - mu[r]) * inv[r];
                            sum_gg += gg;
                            sum_ggx += gg * xh;
                        }
                        let wn = width as f64;
                        for c in 0..width {
                            let gg = rowg[c] * gd[c];
                            let xh = (rowx[c] - mu[r]) * inv[r];
                            dx[r * width + c] += inv[r] * (gg - sum_gg / wn - xh * sum_ggx / wn);
                        }
                    }
                });
            }
        }
    }
}
