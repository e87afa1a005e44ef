//! Point-wise token embedding and local context mixing.
//!
//! Each scalar time point maps to an `h`-dimensional token through two
//! parallel rank-1 projections blended by a learnable sigmoid gate; a
//! causal dilated depthwise convolution then mixes nearby tokens, with a
//! residual keeping the point-wise embedding intact, followed by an output
//! linear map.

use crate::error::Result;
use crate::tensor::{Tape, TensorId};

/// Tape handles of the embedding parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundEmbed {
    /// `[h, 1]` projection feeding the swish branch.
    pub proj_w: TensorId,
    /// `[h, 1]` linear branch projection.
    pub proj_v: TensorId,
    /// `[1]` gate logit; the mixing coefficient is its sigmoid.
    pub gate_logit: TensorId,
    /// `[K, h]` depthwise filter taps, tap `k` reads lag `k * dilation`.
    pub conv: TensorId,
    /// `[h, h]` output map.
    pub out_weight: TensorId,
    /// `[h]` output bias.
    pub out_bias: TensorId,
    pub dilation: usize,
}

/// Map scalars `[T, 1]` to tokens `[T, h]`:
/// `alpha * swish(W x) + (1 - alpha) * V x` with `alpha = sigmoid(gate)`.
pub fn pointwise_embed(tape: &mut Tape, x: TensorId, p: &BoundEmbed) -> Result<TensorId> {
    let wt = tape.transpose(p.proj_w)?;
    let vt = tape.transpose(p.proj_v)?;
    let z_w = tape.matmul(x, wt)?;
    let z_v = tape.matmul(x, vt)?;
    let alpha = tape.sigmoid(p.gate_logit)?;
    let swished = tape.swish(z_w)?;
    let gated = tape.mul(swished, alpha)?;
    let neg = tape.mul_scalar(alpha, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let linear = tape.mul(z_v, one_minus)?;
    tape.add(gated, linear)
}

/// Mix local temporal context: causal dilated depthwise convolution plus
/// residual, then the output linear map row-wise.
pub fn dilated_context_mix(tape: &mut Tape, tokens: TensorId, p: &BoundEmbed) -> Result<TensorId> {
    let conv = tape.depthwise_dilated_conv1d(tokens, p.conv, p.dilation)?;
    let mixed = tape.add(tokens, conv)?;
    let projected = tape.matmul(mixed, p.out_weight)?;
    tape.add(projected, p.out_bias)
}
