//! Training objective: Huber next-point loss, expert load-balance penalty,
//! and their weighted combination.

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::model::RoutingStats;
use crate::tensor::{Tape, TensorId};

/// Huber penalty of a single residual: quadratic inside `delta`, linear
/// outside. Both branches meet at the knee with matching value and slope.
pub fn huber(y: f64, y_hat: f64, delta: f64) -> f64 {
    let r = (y - y_hat).abs();
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

/// Load-balance penalty `N * sum_i f_i * P_i` over dispatch fractions and
/// mean gate probabilities. Uniform routing scores 1, collapse scores N.
pub fn aux_load_balance(stats: &RoutingStats) -> f64 {
    let n = stats.dispatch_fraction.len() as f64;
    let mut acc = 0.0;
    for (f, p) in stats.dispatch_fraction.iter().zip(&stats.mean_prob) {
        acc += f * p;
    }
    n * acc
}

/// Values of one combined-loss evaluation.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub ar_loss: f64,
    pub aux_loss_per_layer: Vec<f64>,
    pub total: f64,
}

/// Tape handles of the combined loss, for backward.
#[derive(Debug, Clone, Copy)]
pub struct LossIds {
    pub total: TensorId,
    pub ar: TensorId,
}

/// Assemble the combined loss on the tape. `preds` must be a `[n, 1]`
/// column of next-point predictions aligned with `targets_norm` (the
/// normalized supervision values, treated as constants). `aux_ids` are the
/// per-layer on-tape load-balance scalars; they enter as
/// `aux_weight * mean over layers`.
pub fn combined_loss(
    tape: &mut Tape,
    preds: TensorId,
    targets_norm: &[f64],
    aux_ids: &[TensorId],
    cfg: &LossConfig,
) -> Result<(LossIds, LossBreakdown)> {
    let n = targets_norm.len();
    if n == 0 || tape.numel(preds) != n {
        return Err(Error::LengthMismatch { lhs: n, rhs: tape.numel(preds) });
    }
    let shape = tape.shape(preds).to_vec();
    let targets = tape.constant(targets_norm.to_vec(), shape)?;
    let pointwise = tape.huber(preds, targets, cfg.huber_delta)?;
    let ar = tape.mean(pointwise)?;

    let mut total = ar;
    let mut aux_values = Vec::with_capacity(aux_ids.len());
    if !aux_ids.is_empty() {
        let mut acc = aux_ids[0];
        aux_values.push(tape.data(aux_ids[0])[0]);
        for &id in &aux_ids[1..] {
            aux_values.push(tape.data(id)[0]);
            acc = tape.add(acc, id)?;
        }
        let mean_aux = tape.mul_scalar(acc, 1.0 / aux_ids.len() as f64)?;
        let weighted = tape.mul_scalar(mean_aux, cfg.aux_weight)?;
        total = tape.add(ar, weighted)?;
    }

    let breakdown = LossBreakdown {
        ar_loss: tape.data(ar)[0],
        aux_loss_per_layer: aux_values,
        total: tape.data(total)[0],
    };
    Ok((LossIds { total, ar }, breakdown))
}
