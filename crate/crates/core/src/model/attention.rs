//! Causal multi-head self-attention with rotary position encoding and a
//! pre-norm residual around the sublayer.

use crate::error::Result;
use crate::tensor::{Tape, TensorId};

pub const LN_EPS: f64 = 1e-5;

/// Tape handles of one attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct BoundAttn {
    pub ln_gamma: TensorId,
    pub ln_beta: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
}

/// Precomputed rotation angles, `[T, head_dim/2]` each.
#[derive(Debug, Clone)]
pub struct RotaryTables {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
    pub half: usize,
    pub len: usize,
}

/// Angles `t * base^(-2p / head_dim)` for position `t` and pair `p`.
pub fn rotary_tables(len: usize, head_dim: usize, base: f64) -> RotaryTables {
    let half = head_dim / 2;
    let mut cos = vec![0.0; len * half];
    let mut sin = vec![0.0; len * half];
    for t in 0..len {
        for p in 0..half {
            let inv_freq = base.powf(-2.0 * p as f64 / head_dim as f64);
            let angle = t as f64 * inv_freq;
            cos[t * half + p] = angle.cos();
            sin[t * half + p] = angle.sin();
        }
    }
    RotaryTables { cos, sin, half, len }
}

/// Rotate each position's (first-half, second-half) coordinate pairs.
fn apply_rotary(tape: &mut Tape, x: TensorId, rope: &RotaryTables) -> Result<TensorId> {
    let half = rope.half;
    let cos = tape.constant(rope.cos.clone(), vec![rope.len, half])?;
    let sin = tape.constant(rope.sin.clone(), vec![rope.len, half])?;
    let x1 = tape.slice_lastdim(x, 0, half)?;
    let x2 = tape.slice_lastdim(x, half, half)?;
    let a = tape.mul(x1, cos)?;
    let b = tape.mul(x2, sin)?;
    let r1 = tape.sub(a, b)?;
    let c = tape.mul(x1, sin)?;
    let d = tape.mul(x2, cos)?;
    let r2 = tape.add(c, d)?;
    tape.concat_lastdim(r1, r2)
}

/// Output of the attention sublayer; per-head attention matrices stay
/// addressable for inspection.
#[derive(Debug)]
pub struct AttnOutput {
    pub out: TensorId,
    /// `[T, T]` causal attention weights, one per head.
    pub weights: Vec<TensorId>,
}

/// Pre-norm residual attention: `x + Wo . attend(ln(x))` where token `t`
/// attends to positions `1..=t` of the rotated queries/keys.
pub fn causal_attention(
    tape: &mut Tape,
    x: TensorId,
    p: &BoundAttn,
    heads: usize,
    rope: Option<&RotaryTables>,
) -> Result<AttnOutput> {
    let h = *tape.shape(x).last().unwrap();
    let head_dim = h / heads;
    let normed = tape.layer_norm(x, p.ln_gamma, p.ln_beta, LN_EPS)?;
    let q = tape.matmul(normed, p.wq)?;
    let k = tape.matmul(normed, p.wk)?;
    let v = tape.matmul(normed, p.wv)?;

    let mut weights = Vec::with_capacity(heads);
    let mut merged: Option<TensorId> = None;
    for head in 0..heads {
        let start = head * head_dim;
        let mut qh = tape.slice_lastdim(q, start, head_dim)?;
        let mut kh = tape.slice_lastdim(k, start, head_dim)?;
        let vh = tape.slice_lastdim(v, start, head_dim)?;
        if let Some(rope) = rope {
            qh = apply_rotary(tape, qh, rope)?;
            kh = apply_rotary(tape, kh, rope)?;
        }
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.mul_scalar(scores, 1.0 / (head_dim as f64).sqrt())?;
        let attn = tape.causal_softmax(scaled)?;
        weights.push(attn);
        let oh = tape.matmul(attn, vh)?;
        merged = Some(match merged {
            None => oh,
            Some(prev) => tape.concat_lastdim(prev, oh)?,
        });
    }
    let concat = merged.expect("heads >= 1");
    let proj = tape.matmul(concat, p.wo)?;
    let out = tape.add(x, proj)?;
    Ok(AttnOutput { out, weights })
}
