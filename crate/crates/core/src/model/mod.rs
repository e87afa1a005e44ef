//! The decoder: gated point-wise embedding with dilated context mixing,
//! then `L` blocks of (causal attention, routed expert mixture), a final
//! layer norm, and a scalar next-point head. Prediction at position `t`
//! estimates the normalized value at `t + 1`.

mod attention;
mod moe;

pub use attention::{causal_attention, rotary_tables, AttnOutput, BoundAttn, RotaryTables, LN_EPS};
pub use moe::{
    aux_on_tape, expert_forward, harmonic_basis, moe_layer, moe_mixture, route, BoundExpert,
    Routing, RoutingStats,
};

use crate::config::ModelConfig;
use crate::embedding::{dilated_context_mix, pointwise_embed, BoundEmbed};
use crate::error::{Error, Result};
use crate::params::{Init, ModelParams, ParamSpec};
use crate::preprocess::{revin_denormalize, RevInParams, RevInStats, REVIN_EPS};
use crate::tensor::{Tape, TensorId};
use std::collections::BTreeMap;

/// Feed-forward width giving a plain expert the same scalar count as a
/// frequency-time expert (`4hm + m^2 + 3m + h` vs `2hw + w + h`).
pub fn ffn_expert_width(h: usize, m: usize) -> usize {
    let target = 4 * h * m + m * m + 3 * m;
    ((target as f64) / ((2 * h + 1) as f64)).round().max(1.0) as usize
}

/// Every learnable parameter of the architecture, in a fixed declaration
/// order that also fixes the initialization RNG stream.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let h = cfg.h;
    let m = cfg.expert_width;
    let mut specs = Vec::new();
    if cfg.revin {
        specs.push(ParamSpec::new("revin.scale", vec![1], Init::Ones));
        specs.push(ParamSpec::new("revin.shift", vec![1], Init::Zeros));
    }
    specs.push(ParamSpec::new("embed.proj_w", vec![h, 1], Init::UniformFanIn(1)));
    specs.push(ParamSpec::new("embed.proj_v", vec![h, 1], Init::UniformFanIn(1)));
    specs.push(ParamSpec::new("embed.gate_logit", vec![1], Init::Zeros));
    // zero-init filters make the residual path dominant early on
    specs.push(ParamSpec::new("embed.conv", vec![cfg.conv_kernel, h], Init::Zeros));
    specs.push(ParamSpec::new("embed.out.weight", vec![h, h], Init::UniformFanIn(h)));
    specs.push(ParamSpec::new("embed.out.bias", vec![h], Init::Zeros));
    for l in 0..cfg.layers {
        let p = format!("layers.{l:02}");
        specs.push(ParamSpec::new(format!("{p}.attn.ln.gamma"), vec![h], Init::Ones));
        specs.push(ParamSpec::new(format!("{p}.attn.ln.beta"), vec![h], Init::Zeros));
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push(ParamSpec::new(format!("{p}.attn.{w}"), vec![h, h], Init::UniformFanIn(h)));
        }
        specs.push(ParamSpec::new(format!("{p}.moe.ln.gamma"), vec![h], Init::Ones));
        specs.push(ParamSpec::new(format!("{p}.moe.ln.beta"), vec![h], Init::Zeros));
        specs.push(ParamSpec::new(
            format!("{p}.moe.gate"),
            vec![h, cfg.experts],
            Init::UniformFanIn(h),
        ));
        for e in 0..cfg.experts {
            let q = format!("{p}.moe.experts.{e:02}");
            if cfg.ftc {
                specs.push(ParamSpec::new(format!("{q}.freq.weight"), vec![h, m], Init::UniformFanIn(h)));
                specs.push(ParamSpec::new(format!("{q}.freq.bias"), vec![m], Init::Zeros));
                specs.push(ParamSpec::new(format!("{q}.time1.weight"), vec![h, m], Init::UniformFanIn(h)));
                specs.push(ParamSpec::new(format!("{q}.time1.bias"), vec![m], Init::Zeros));
                specs.push(ParamSpec::new(format!("{q}.time2.weight"), vec![m, m], Init::UniformFanIn(m)));
                specs.push(ParamSpec::new(format!("{q}.time2.bias"), vec![m], Init::Zeros));
                specs.push(ParamSpec::new(
                    format!("{q}.combine.weight"),
                    vec![2 * m, h],
                    Init::UniformFanIn(2 * m),
                ));
                specs.push(ParamSpec::new(format!("{q}.combine.bias"), vec![h], Init::Zeros));
            } else {
                let w = ffn_expert_width(h, m);
                specs.push(ParamSpec::new(format!("{q}.ff1.weight"), vec![h, w], Init::UniformFanIn(h)));
                specs.push(ParamSpec::new(format!("{q}.ff1.bias"), vec![w], Init::Zeros));
                specs.push(ParamSpec::new(format!("{q}.ff2.weight"), vec![w, h], Init::UniformFanIn(w)));
                specs.push(ParamSpec::new(format!("{q}.ff2.bias"), vec![h], Init::Zeros));
            }
        }
    }
    specs.push(ParamSpec::new("final_ln.gamma", vec![h], Init::Ones));
    specs.push(ParamSpec::new("final_ln.beta", vec![h], Init::Zeros));
    specs.push(ParamSpec::new("head.weight", vec![h, 1], Init::UniformFanIn(h)));
    specs.push(ParamSpec::new("head.bias", vec![1], Init::Zeros));
    specs
}

/// Fresh parameters for a configuration, deterministic under `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    ModelParams::init_from_specs(&param_specs(cfg), seed)
}

/// One decoder block's tape handles.
#[derive(Debug)]
pub struct BoundLayer {
    pub attn: BoundAttn,
    pub moe_ln_gamma: TensorId,
    pub moe_ln_beta: TensorId,
    pub gate: TensorId,
    pub experts: Vec<BoundExpert>,
}

/// All model parameters registered on a tape, plus the name-to-leaf map
/// used to harvest gradients after backward.
#[derive(Debug)]
pub struct BoundModel {
    pub leaves: Vec<(String, TensorId)>,
    pub revin_scale: Option<TensorId>,
    pub revin_shift: Option<TensorId>,
    pub embed: BoundEmbed,
    pub layers: Vec<BoundLayer>,
    pub final_ln_gamma: TensorId,
    pub final_ln_beta: TensorId,
    pub head_weight: TensorId,
    pub head_bias: TensorId,
}

impl BoundModel {
    /// Gradient per parameter after backward; parameters no flow reached
    /// report zeros (an unselected expert has a genuinely zero gradient).
    pub fn collect_grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.leaves
            .iter()
            .map(|(name, id)| {
                let g = tape
                    .grad(*id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.numel(*id)]);
                (name.clone(), g)
            })
            .collect()
    }
}

/// Register every parameter as a tape leaf. `trainable` turns on gradient
/// tracking for all of them.
pub fn bind(tape: &mut Tape, params: &ModelParams, cfg: &ModelConfig, trainable: bool) -> Result<BoundModel> {
    let specs = param_specs(cfg);
    let mut ids: BTreeMap<String, TensorId> = BTreeMap::new();
    let mut leaves = Vec::with_capacity(specs.len());
    for spec in &specs {
        let param = params.get(&spec.name)?;
        if param.shape != spec.shape {
            return Err(Error::BadParam {
                name: spec.name.clone(),
                detail: format!("shape {:?}, expected {:?}", param.shape, spec.shape),
            });
        }
        let id = tape.leaf(param.data.clone(), param.shape.clone(), trainable)?;
        ids.insert(spec.name.clone(), id);
        leaves.push((spec.name.clone(), id));
    }
    let get = |name: &str| -> TensorId { ids[name] };

    let embed = BoundEmbed {
        proj_w: get("embed.proj_w"),
        proj_v: get("embed.proj_v"),
        gate_logit: get("embed.gate_logit"),
        conv: get("embed.conv"),
        out_weight: get("embed.out.weight"),
        out_bias: get("embed.out.bias"),
        dilation: cfg.conv_dilation,
    };
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("layers.{l:02}");
        let attn = BoundAttn {
            ln_gamma: get(&format!("{p}.attn.ln.gamma")),
            ln_beta: get(&format!("{p}.attn.ln.beta")),
            wq: get(&format!("{p}.attn.wq")),
            wk: get(&format!("{p}.attn.wk")),
            wv: get(&format!("{p}.attn.wv")),
            wo: get(&format!("{p}.attn.wo")),
        };
        let experts = (0..cfg.experts)
            .map(|e| {
                let q = format!("{p}.moe.experts.{e:02}");
                if cfg.ftc {
                    BoundExpert::Ftc {
                        freq_weight: get(&format!("{q}.freq.weight")),
                        freq_bias: get(&format!("{q}.freq.bias")),
                        time1_weight: get(&format!("{q}.time1.weight")),
                        time1_bias: get(&format!("{q}.time1.bias")),
                        time2_weight: get(&format!("{q}.time2.weight")),
                        time2_bias: get(&format!("{q}.time2.bias")),
                        combine_weight: get(&format!("{q}.combine.weight")),
                        combine_bias: get(&format!("{q}.combine.bias")),
                    }
                } else {
                    BoundExpert::Ffn {
                        w1: get(&format!("{q}.ff1.weight")),
                        b1: get(&format!("{q}.ff1.bias")),
                        w2: get(&format!("{q}.ff2.weight")),
                        b2: get(&format!("{q}.ff2.bias")),
                    }
                }
            })
            .collect();
        layers.push(BoundLayer {
            attn,
            moe_ln_gamma: get(&format!("{p}.moe.ln.gamma")),
            moe_ln_beta: get(&format!("{p}.moe.ln.beta")),
            gate: get(&format!("{p}.moe.gate")),
            experts,
        });
    }
    Ok(BoundModel {
        revin_scale: cfg.revin.then(|| get("revin.scale")),
        revin_shift: cfg.revin.then(|| get("revin.shift")),
        embed,
        layers,
        final_ln_gamma: get("final_ln.gamma"),
        final_ln_beta: get("final_ln.beta"),
        head_weight: get("head.weight"),
        head_bias: get("head.bias"),
        leaves,
    })
}

/// One forward pass over a raw sequence.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[T, 1]` normalized next-point predictions; position `t` estimates
    /// the normalized value at `t + 1`.
    pub predictions: TensorId,
    /// Per-layer routing summaries.
    pub routing: Vec<RoutingStats>,
    /// Per-layer on-tape load-balance scalars.
    pub aux_ids: Vec<TensorId>,
    /// Post-MoE block activations per layer, `T x h` row-major, when
    /// capture was requested.
    pub captured: Option<Vec<Vec<f64>>>,
    /// Instance statistics used for normalization (identity when the
    /// normalizer is disabled).
    pub stats: RevInStats,
}

/// Forward pass computing instance statistics from the input itself.
pub fn model_forward(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    input: &[f64],
    capture: bool,
) -> Result<ForwardOutput> {
    let stats = if cfg.revin {
        RevInStats::from_values(input)?
    } else {
        RevInStats::identity()
    };
    model_forward_with_stats(tape, bound, cfg, input, stats, capture)
}

/// Forward pass under fixed normalization statistics, the form used by
/// autoregressive rollout where the original context's statistics persist.
pub fn model_forward_with_stats(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    input: &[f64],
    stats: RevInStats,
    capture: bool,
) -> Result<ForwardOutput> {
    if input.is_empty() {
        return Err(Error::EmptyInput("model input"));
    }
    let t = input.len();
    let x = tape.constant(input.to_vec(), vec![t, 1])?;
    let xn = if cfg.revin {
        let scale = bound.revin_scale.expect("revin params bound");
        let shift = bound.revin_shift.expect("revin params bound");
        let denom = (stats.var + REVIN_EPS).sqrt();
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::NonFinite { op: "revin_normalize" });
        }
        let centered = tape.add_scalar(x, -stats.mean)?;
        let standardized = tape.mul_scalar(centered, 1.0 / denom)?;
        let scaled = tape.mul(standardized, scale)?;
        tape.add(scaled, shift)?
    } else {
        x
    };

    let embedded = pointwise_embed(tape, xn, &bound.embed)?;
    let mut tokens = dilated_context_mix(tape, embedded, &bound.embed)?;
    let rope = rotary_tables(t, cfg.head_dim(), cfg.rope_base);

    let mut routing = Vec::with_capacity(cfg.layers);
    let mut aux_ids = Vec::with_capacity(cfg.layers);
    let mut captured = capture.then(Vec::new);
    for layer in &bound.layers {
        let attn = causal_attention(tape, tokens, &layer.attn, cfg.heads, Some(&rope))?;
        let normed = tape.layer_norm(attn.out, layer.moe_ln_gamma, layer.moe_ln_beta, LN_EPS)?;
        let (mix, route_info) = moe_mixture(tape, normed, layer.gate, &layer.experts, cfg.top_k)?;
        tokens = tape.add(attn.out, mix)?;
        aux_ids.push(aux_on_tape(tape, &route_info)?);
        routing.push(route_info.stats);
        if let Some(c) = captured.as_mut() {
            c.push(tape.data(tokens).to_vec());
        }
    }

    let finaled = tape.layer_norm(tokens, bound.final_ln_gamma, bound.final_ln_beta, LN_EPS)?;
    let projected = tape.matmul(finaled, bound.head_weight)?;
    let predictions = tape.add(projected, bound.head_bias)?;
    Ok(ForwardOutput {
        predictions,
        routing,
        aux_ids,
        captured,
        stats,
    })
}

/// The affine normalization view of this model's parameters; identity when
/// normalization is disabled.
pub fn revin_params_of(params: &ModelParams, cfg: &ModelConfig) -> Result<RevInParams> {
    if cfg.revin {
        Ok(RevInParams {
            affine_scale: params.get("revin.scale")?.data[0],
            affine_shift: params.get("revin.shift")?.data[0],
            eps: REVIN_EPS,
        })
    } else {
        Ok(RevInParams { affine_scale: 1.0, affine_shift: 0.0, eps: 0.0 })
    }
}

/// Normalize values with this model's affine under the given statistics
/// (plain math, off the tape). Identity when normalization is disabled.
pub fn normalize_plain(
    params: &ModelParams,
    cfg: &ModelConfig,
    values: &[f64],
    stats: &RevInStats,
) -> Result<Vec<f64>> {
    if !cfg.revin {
        return Ok(values.to_vec());
    }
    let p = revin_params_of(params, cfg)?;
    let denom = (stats.var + p.eps).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::NonFinite { op: "revin_normalize" });
    }
    Ok(values
        .iter()
        .map(|&v| p.affine_scale * (v - stats.mean) / denom + p.affine_shift)
        .collect())
}

/// Roll the model forward `horizon` points: predict the next normalized
/// point, denormalize it with the original context's statistics, append,
/// repeat. Deterministic.
pub fn autoregressive_forecast(
    params: &ModelParams,
    cfg: &ModelConfig,
    context: &[f64],
    horizon: usize,
) -> Result<Vec<f64>> {
    let stats = if cfg.revin {
        RevInStats::from_values(context)?
    } else {
        RevInStats::identity()
    };
    autoregressive_forecast_with_stats(params, cfg, context, horizon, stats)
}

/// Rollout under explicitly fixed statistics; rolling `a + b` points
/// equals rolling `a` and then `b` more from the extended context.
pub fn autoregressive_forecast_with_stats(
    params: &ModelParams,
    cfg: &ModelConfig,
    context: &[f64],
    horizon: usize,
    stats: RevInStats,
) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::InvalidConfig {
            field: "horizon".into(),
            detail: "must be >= 1".into(),
        });
    }
    let rp = revin_params_of(params, cfg)?;
    let mut seq = context.to_vec();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params, cfg, false)?;
        let fwd = model_forward_with_stats(&mut tape, &bound, cfg, &seq, stats, false)?;
        let last_norm = *tape.data(fwd.predictions).last().expect("nonempty predictions");
        let denorm = revin_denormalize(&[last_norm], &rp, &stats)?[0];
        seq.push(denorm);
        out.push(denorm);
    }
    Ok(out)
}
