//! Deterministic training loop: shuffled batching, linear warmup into a
//! constant learning rate, AdamW updates, and finite-difference gradient
//! checking.
//!
//! Supervision is dense next-point autoregression: each window's context
//! and target are concatenated, normalized with the window's instance
//! statistics, and every position's prediction is penalized against the
//! next normalized value. Targets enter the loss as constants snapshotted
//! from the current affine parameters, so the normalizer is learned
//! through the input path only (otherwise shrinking the affine scale
//! would shrink the loss without learning anything).

use crate::checkpoint::Checkpoint;
use crate::config::{LossConfig, ModelConfig, Phase, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{bind, model_forward_with_stats, normalize_plain, RoutingStats};
use crate::objective::{combined_loss, LossBreakdown};
use crate::optim::{adamw_step, AdamWState, ADAM_EPS};
use crate::params::ModelParams;
use crate::preprocess::{RevInStats, SeriesWindow};
use crate::tensor::{Tape, TensorId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Linear ramp from 0 to `lr` over the first `warmup_fraction * steps`
/// steps, constant `lr` afterward.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let warmup_steps = (cfg.warmup_fraction * cfg.steps as f64).round() as u64;
    if step < warmup_steps {
        cfg.lr * step as f64 / warmup_steps as f64
    } else {
        cfg.lr
    }
}

/// One optimizer step's record.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    /// Loss values averaged over the batch.
    pub loss: LossBreakdown,
    /// Per-layer routing stats averaged over the batch windows.
    pub routing: Vec<RoutingStats>,
}

/// Outcome of a training run: the per-step log plus the RNG stream state,
/// which checkpoints persist for exact resumption.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub log: Vec<StepRecord>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub steps_done: u64,
}

fn average_routing(per_window: &[Vec<RoutingStats>]) -> Vec<RoutingStats> {
    let layers = per_window.first().map(Vec::len).unwrap_or(0);
    (0..layers)
        .map(|l| {
            let n_experts = per_window[0][l].dispatch_fraction.len();
            let mut dispatch = vec![0.0; n_experts];
            let mut prob = vec![0.0; n_experts];
            let mut tokens = 0usize;
            for w in per_window {
                for e in 0..n_experts {
                    dispatch[e] += w[l].dispatch_fraction[e];
                    prob[e] += w[l].mean_prob[e];
                }
                tokens += w[l].token_count;
            }
            let b = per_window.len() as f64;
            for e in 0..n_experts {
                dispatch[e] /= b;
                prob[e] /= b;
            }
            RoutingStats { dispatch_fraction: dispatch, mean_prob: prob, token_count: tokens }
        })
        .collect()
}

/// Build one window's loss on the tape. Returns the loss handle and the
/// recorded values.
fn window_loss(
    tape: &mut Tape,
    bound: &crate::model::BoundModel,
    params: &ModelParams,
    cfg: &ModelConfig,
    lcfg: &LossConfig,
    window: &SeriesWindow,
) -> Result<(TensorId, LossBreakdown, Vec<RoutingStats>)> {
    let seq = window.full_sequence();
    let stats = if cfg.revin {
        RevInStats::from_values(&seq)?
    } else {
        RevInStats::identity()
    };
    let targets = normalize_plain(params, cfg, &seq[1..], &stats)?;
    let fwd = model_forward_with_stats(tape, bound, cfg, &seq, stats, false)?;
    let supervised = tape.slice_rows(fwd.predictions, 0, seq.len() - 1)?;
    let (ids, breakdown) = combined_loss(tape, supervised, &targets, &fwd.aux_ids, lcfg)?;
    Ok((ids.total, breakdown, fwd.routing))
}

/// Train in place. Deterministic under the config seed: shuffling,
/// batching, and updates reproduce bit-identically.
pub fn train(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    windows: &[SeriesWindow],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    tcfg.validate()?;
    lcfg.validate()?;
    if windows.is_empty() {
        return Err(Error::EmptyInput("training windows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut state = AdamWState::new();
    let mut deck: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(tcfg.steps as usize);

    for step in 0..tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        while batch.len() < tcfg.batch_size {
            if deck.is_empty() {
                deck = (0..windows.len()).collect();
                deck.shuffle(&mut rng);
            }
            batch.push(deck.pop().expect("deck refilled"));
        }

        let mut tape = Tape::new();
        let outcome: Result<(TensorId, Vec<LossBreakdown>, Vec<Vec<RoutingStats>>)> = (|| {
            let bound = bind(&mut tape, params, cfg, true)?;
            let mut totals = Vec::with_capacity(batch.len());
            let mut breakdowns = Vec::with_capacity(batch.len());
            let mut routings = Vec::with_capacity(batch.len());
            for &w in &batch {
                let (total, breakdown, routing) =
                    window_loss(&mut tape, &bound, params, cfg, lcfg, &windows[w])?;
                totals.push(total);
                breakdowns.push(breakdown);
                routings.push(routing);
            }
            let mut acc = totals[0];
            for &t in &totals[1..] {
                acc = tape.add(acc, t)?;
            }
            let batch_total = tape.mul_scalar(acc, 1.0 / totals.len() as f64)?;
            tape.backward(batch_total)?;
            let grads = bound.collect_grads(&tape);
            let lr = lr_schedule(step, tcfg);
            adamw_step(params, &grads, &mut state, lr, tcfg.weight_decay, tcfg.beta1, tcfg.beta2, ADAM_EPS)?;
            Ok((batch_total, breakdowns, routings))
        })();
        let (_, breakdowns, routings) =
            outcome.map_err(|e| Error::TrainAbort { step, detail: e.to_string() })?;

        let b = breakdowns.len() as f64;
        let layers = breakdowns[0].aux_loss_per_layer.len();
        let loss = LossBreakdown {
            ar_loss: breakdowns.iter().map(|x| x.ar_loss).sum::<f64>() / b,
            aux_loss_per_layer: (0..layers)
                .map(|l| breakdowns.iter().map(|x| x.aux_loss_per_layer[l]).sum::<f64>() / b)
                .collect(),
            total: breakdowns.iter().map(|x| x.total).sum::<f64>() / b,
        };
        log.push(StepRecord {
            step,
            lr: lr_schedule(step, tcfg),
            loss,
            routing: average_routing(&routings),
        });
    }

    Ok(TrainRun {
        log,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
        steps_done: tcfg.steps,
    })
}

/// Continue from a checkpoint with fresh optimizer moments. The checkpoint
/// configuration must match `cfg` exactly and the phase must be finetune.
pub fn finetune(
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    windows: &[SeriesWindow],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<(ModelParams, TrainRun)> {
    if tcfg.phase != Phase::Finetune {
        return Err(Error::InvalidConfig {
            field: "train.phase".into(),
            detail: "finetune requires phase = finetune".into(),
        });
    }
    ckpt.require_config(cfg)?;
    let mut params = ckpt.params.clone();
    let run = train(&mut params, cfg, windows, tcfg, lcfg)?;
    Ok((params, run))
}

/// One parameter array's verification result.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub total_checked: usize,
    pub max_rel_err: f64,
}

/// Reverse-mode gradients of the combined loss against central finite
/// differences (step 1e-5) on a sampled subset of parameter entries; at
/// least one entry per array, the rest spread by array size. Targets are
/// snapshotted once so both sides differentiate the same function.
pub fn grad_check(
    params: &ModelParams,
    cfg: &ModelConfig,
    lcfg: &LossConfig,
    window: &SeriesWindow,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let seq = window.full_sequence();
    let stats = if cfg.revin {
        RevInStats::from_values(&seq)?
    } else {
        RevInStats::identity()
    };
    let targets = normalize_plain(params, cfg, &seq[1..], &stats)?;

    let eval_loss = |p: &ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, p, cfg, false)?;
        let fwd = model_forward_with_stats(&mut tape, &bound, cfg, &seq, stats, false)?;
        let supervised = tape.slice_rows(fwd.predictions, 0, seq.len() - 1)?;
        let (_, breakdown) = combined_loss(&mut tape, supervised, &targets, &fwd.aux_ids, lcfg)?;
        Ok(breakdown.total)
    };

    // reverse-mode gradients once
    let analytic = {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params, cfg, true)?;
        let fwd = model_forward_with_stats(&mut tape, &bound, cfg, &seq, stats, false)?;
        let supervised = tape.slice_rows(fwd.predictions, 0, seq.len() - 1)?;
        let (ids, _) = combined_loss(&mut tape, supervised, &targets, &fwd.aux_ids, lcfg)?;
        tape.backward(ids.total)?;
        bound.collect_grads(&tape)
    };

    // sample entries: one per array, the rest proportional to size
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<(String, usize)> = params.iter().map(|(n, p)| (n.clone(), p.numel())).collect();
    let mut picks: Vec<(String, usize)> = Vec::new();
    for (name, numel) in &names {
        picks.push((name.clone(), rng.gen_range(0..*numel)));
    }
    let total_scalars: usize = names.iter().map(|(_, n)| n).sum();
    while picks.len() < samples {
        let mut target = rng.gen_range(0..total_scalars);
        for (name, numel) in &names {
            if target < *numel {
                picks.push((name.clone(), rng.gen_range(0..*numel)));
                break;
            }
            target -= numel;
        }
    }

    let step = 1e-5;
    let mut per_param: std::collections::BTreeMap<String, ParamCheck> = std::collections::BTreeMap::new();
    let mut max_rel_err: f64 = 0.0;
    for (name, idx) in picks {
        let mut plus = params.clone();
        plus.get_mut(&name)?.data[idx] += step;
        let mut minus = params.clone();
        minus.get_mut(&name)?.data[idx] -= step;
        let fd = (eval_loss(&plus)? - eval_loss(&minus)?) / (2.0 * step);
        let ad = analytic[&name][idx];
        let denom = ad.abs().max(fd.abs());
        let rel = if denom < 1e-10 { 0.0 } else { (ad - fd).abs() / denom };
        max_rel_err = max_rel_err.max(rel);
        let entry = per_param.entry(name.clone()).or_insert_with(|| ParamCheck {
            name: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
        });
        entry.checked += 1;
        entry.max_rel_err = entry.max_rel_err.max(rel);
    }
    let total_checked = per_param.values().map(|p| p.checked).sum();
    Ok(GradCheckReport {
        per_param: per_param.into_values().collect(),
        total_checked,
        max_rel_err,
    })
}
