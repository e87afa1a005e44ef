//! Routed mixture of experts: per-token softmax gating with top-K
//! selection, frequency-time experts, and the sparse dispatch that runs
//! each expert only on the tokens routed to it.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Per-batch routing summary feeding the load-balance penalty.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RoutingStats {
    /// Fraction of token-to-expert assignments landing on each expert,
    /// counting K assignments per token. Sums to 1.
    pub dispatch_fraction: Vec<f64>,
    /// Softmax probability per expert averaged over tokens, taken over the
    /// full distribution (not just selected). Sums to 1.
    pub mean_prob: Vec<f64>,
    pub token_count: usize,
}

/// Routing decision for one token batch.
#[derive(Debug)]
pub struct Routing {
    /// Per token: the K selected expert ids, highest probability first
    /// (ties broken toward the lower id).
    pub selected: Vec<Vec<usize>>,
    /// Per token: renormalized weights matching `selected`.
    pub weights: Vec<Vec<f64>>,
    /// `[T, N]` renormalized weight matrix on the tape; zero at unselected
    /// entries. Gradients flow to the gate through these weights only; the
    /// discrete selection itself is constant during backward.
    pub weights_id: TensorId,
    /// `[1, N]` mean softmax probability, on the tape (the differentiable
    /// half of the load-balance product).
    pub mean_prob_id: TensorId,
    pub stats: RoutingStats,
}

/// Softmax over expert logits, top-K selection, and renormalization.
pub fn route(tape: &mut Tape, tokens: TensorId, gate: TensorId, top_k: usize) -> Result<Routing> {
    let n_experts = *tape.shape(gate).last().ok_or(Error::InvalidShape {
        op: "route",
        detail: "gate must be [h, N]".into(),
    })?;
    if top_k == 0 || top_k > n_experts {
        return Err(Error::InvalidShape {
            op: "route",
            detail: format!("top_k={top_k} out of 1..={n_experts}"),
        });
    }
    let t = tape.shape(tokens)[0];
    let logits = tape.matmul(tokens, gate)?;
    let softmax = tape.softmax_lastdim(logits)?;
    let probs = tape.data(softmax).to_vec();

    let mut selected = Vec::with_capacity(t);
    let mut mask = vec![0.0; t * n_experts];
    let mut counts = vec![0usize; n_experts];
    for tok in 0..t {
        let row = &probs[tok * n_experts..(tok + 1) * n_experts];
        let mut order: Vec<usize> = (0..n_experts).collect();
        // stable sort by probability descending keeps lower ids first on ties
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite probs"));
        let chosen = &order[..top_k];
        for &e in chosen {
            mask[tok * n_experts + e] = 1.0;
            counts[e] += 1;
        }
        selected.push(chosen.to_vec());
    }

    let mut mean_prob = vec![0.0; n_experts];
    for tok in 0..t {
        for e in 0..n_experts {
            mean_prob[e] += probs[tok * n_experts + e];
        }
    }
    for p in mean_prob.iter_mut() {
        *p /= t as f64;
    }
    let dispatch_fraction: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / (top_k * t) as f64)
        .collect();

    // mean over tokens stays on the tape: (1/T) * ones @ softmax
    let ones = tape.constant(vec![1.0 / t as f64; t], vec![1, t])?;
    let mean_prob_id = tape.matmul(ones, softmax)?;

    // renormalize the selected probabilities to a convex combination
    let mask_id = tape.constant(mask, vec![t, n_experts])?;
    let masked = tape.mul(softmax, mask_id)?;
    let denom = tape.sum_lastdim(masked)?;
    let inv = tape.recip(denom)?;
    let weights_id = tape.scale_rows(masked, inv)?;

    let wdata = tape.data(weights_id);
    let weights = selected
        .iter()
        .enumerate()
        .map(|(tok, ids)| ids.iter().map(|&e| wdata[tok * n_experts + e]).collect())
        .collect();

    Ok(Routing {
        selected,
        weights,
        weights_id,
        mean_prob_id,
        stats: RoutingStats {
            dispatch_fraction,
            mean_prob,
            token_count: t,
        },
    })
}

/// Load-balance penalty on the tape: `N * sum_i f_i * P_i`. Dispatch
/// fractions are counts and enter as constants; gradients reach the gate
/// through the mean probabilities only.
pub fn aux_on_tape(tape: &mut Tape, routing: &Routing) -> Result<TensorId> {
    let n = routing.stats.dispatch_fraction.len();
    let f = tape.constant(routing.stats.dispatch_fraction.clone(), vec![1, n])?;
    let prod = tape.mul(routing.mean_prob_id, f)?;
    let sum = tape.sum(prod)?;
    tape.mul_scalar(sum, n as f64)
}

/// One expert's tape handles.
#[derive(Debug, Clone, Copy)]
pub enum BoundExpert {
    /// Frequency-time cell: a harmonic branch (`cos + sin` of a learned
    /// linear map) concatenated with a two-layer feed-forward time branch,
    /// then projected back to width `h`.
    Ftc {
        freq_weight: TensorId,
        freq_bias: TensorId,
        time1_weight: TensorId,
        time1_bias: TensorId,
        time2_weight: TensorId,
        time2_bias: TensorId,
        combine_weight: TensorId,
        combine_bias: TensorId,
    },
    /// Plain two-layer feed-forward of matched parameter count; the
    /// ablation baseline.
    Ffn {
        w1: TensorId,
        b1: TensorId,
        w2: TensorId,
        b2: TensorId,
    },
}

/// The harmonic branch: `cos(Xf) + sin(Xf)` of the learned projection.
/// Every output lies in `[-sqrt(2), sqrt(2)]` and is 2-pi periodic in `Xf`.
pub fn harmonic_basis(
    tape: &mut Tape,
    x: TensorId,
    freq_weight: TensorId,
    freq_bias: TensorId,
) -> Result<TensorId> {
    let proj = tape.matmul(x, freq_weight)?;
    let xf = tape.add(proj, freq_bias)?;
    let c = tape.cos(xf)?;
    let s = tape.sin(xf)?;
    tape.add(c, s)
}

/// Apply one expert to a `[n, h]` batch of tokens.
pub fn expert_forward(tape: &mut Tape, x: TensorId, expert: &BoundExpert) -> Result<TensorId> {
    match *expert {
        BoundExpert::Ftc {
            freq_weight,
            freq_bias,
            time1_weight,
            time1_bias,
            time2_weight,
            time2_bias,
            combine_weight,
            combine_bias,
        } => {
            let freq_out = harmonic_basis(tape, x, freq_weight, freq_bias)?;
            let t1 = tape.matmul(x, time1_weight)?;
            let t1 = tape.add(t1, time1_bias)?;
            let t1 = tape.swish(t1)?;
            let t2 = tape.matmul(t1, time2_weight)?;
            let time_out = tape.add(t2, time2_bias)?;
            let cat = tape.concat_lastdim(freq_out, time_out)?;
            let out = tape.matmul(cat, combine_weight)?;
            tape.add(out, combine_bias)
        }
        BoundExpert::Ffn { w1, b1, w2, b2 } => {
            let hdn = tape.matmul(x, w1)?;
            let hdn = tape.add(hdn, b1)?;
            let hdn = tape.swish(hdn)?;
            let out = tape.matmul(hdn, w2)?;
            tape.add(out, b2)
        }
    }
}

/// Weighted expert mixture without the residual: each expert runs only on
/// the tokens routed to it, results are scattered back weighted by the
/// renormalized gate probabilities.
pub fn moe_mixture(
    tape: &mut Tape,
    tokens: TensorId,
    gate: TensorId,
    experts: &[BoundExpert],
    top_k: usize,
) -> Result<(TensorId, Routing)> {
    let n_experts = *tape.shape(gate).last().unwrap_or(&0);
    if experts.len() != n_experts {
        return Err(Error::InvalidShape {
            op: "moe_mixture",
            detail: format!("{} experts vs gate width {n_experts}", experts.len()),
        });
    }
    let t = tape.shape(tokens)[0];
    let routing = route(tape, tokens, gate, top_k)?;

    // token indices per expert, ascending for determinism
    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
    for (tok, ids) in routing.selected.iter().enumerate() {
        for &e in ids {
            per_expert[e].push(tok);
        }
    }

    let mut acc: Option<TensorId> = None;
    for (e, idx) in per_expert.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let sub = tape.gather_rows(tokens, idx)?;
        let out = expert_forward(tape, sub, &experts[e])?;
        let col = tape.slice_lastdim(routing.weights_id, e, 1)?;
        let w = tape.gather_rows(col, idx)?;
        let weighted = tape.scale_rows(out, w)?;
        let scattered = tape.scatter_add_rows(weighted, idx, t)?;
        acc = Some(match acc {
            None => scattered,
            Some(prev) => tape.add(prev, scattered)?,
        });
    }
    let mix = acc.expect("top_k >= 1 routes every token");
    Ok((mix, routing))
}

/// Expert mixture plus the residual connection over its own input.
pub fn moe_layer(
    tape: &mut Tape,
    tokens: TensorId,
    gate: TensorId,
    experts: &[BoundExpert],
    top_k: usize,
) -> Result<(TensorId, Routing)> {
    let (mix, routing) = moe_mixture(tape, tokens, gate, experts, top_k)?;
    let out = tape.add(tokens, mix)?;
    Ok((out, routing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::aux_load_balance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_gate(tape: &mut Tape, n: usize) -> TensorId {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        tape.leaf(m, vec![n, n], true).unwrap()
    }

    #[test]
    fn route_matches_hand_softmax() {
        let mut tape = Tape::new();
        let tokens = tape.constant(vec![2.0, 1.0, 0.0, -1.0], vec![1, 4]).unwrap();
        let gate = identity_gate(&mut tape, 4);
        let routing = route(&mut tape, tokens, gate, 2).unwrap();
        assert_eq!(routing.selected[0], vec![0, 1]);
        assert!((routing.weights[0][0] - 0.7311).abs() < 1e-4);
        assert!((routing.weights[0][1] - 0.2689).abs() < 1e-4);
        let p = &routing.stats.mean_prob;
        assert!((p[0] - 0.6439).abs() < 1e-4);
        assert!((p[1] - 0.2369).abs() < 1e-4);
        assert!((p[2] - 0.0871).abs() < 1e-4);
        assert!((p[3] - 0.0321).abs() < 1e-4);
    }

    #[test]
    fn route_with_full_k_keeps_softmax() {
        let mut tape = Tape::new();
        let tokens = tape.constant(vec![0.5, -0.25, 1.0], vec![1, 3]).unwrap();
        let gate = identity_gate(&mut tape, 3);
        let routing = route(&mut tape, tokens, gate, 3).unwrap();
        for (e, &w) in routing.selected[0].iter().zip(&routing.weights[0]) {
            assert!((w - routing.stats.mean_prob[*e]).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_break_toward_lower_id() {
        let mut tape = Tape::new();
        let tokens = tape.constant(vec![0.0; 4], vec![1, 4]).unwrap();
        let gate = identity_gate(&mut tape, 4);
        let routing = route(&mut tape, tokens, gate, 1).unwrap();
        assert_eq!(routing.selected[0], vec![0]);
        assert_eq!(routing.stats.dispatch_fraction, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(routing.stats.mean_prob, vec![0.25; 4]);
    }

    #[test]
    fn routing_stats_conserve_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, h, n) = (11, 6, 5);
        let mut tape = Tape::new();
        let tokens_data: Vec<f64> = (0..t * h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gate_data: Vec<f64> = (0..h * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tokens = tape.constant(tokens_data, vec![t, h]).unwrap();
        let gate = tape.leaf(gate_data, vec![h, n], true).unwrap();
        let routing = route(&mut tape, tokens, gate, 2).unwrap();
        let fsum: f64 = routing.stats.dispatch_fraction.iter().sum();
        let psum: f64 = routing.stats.mean_prob.iter().sum();
        assert!((fsum - 1.0).abs() < 1e-9);
        assert!((psum - 1.0).abs() < 1e-9);
        for tok in 0..t {
            let wsum: f64 = routing.weights[tok].iter().sum();
            assert!((wsum - 1.0).abs() < 1e-12);
        }
        // on-tape aux agrees with the direct evaluation
        let aux = aux_on_tape(&mut tape, &routing).unwrap();
        assert!((tape.data(aux)[0] - aux_load_balance(&routing.stats)).abs() < 1e-12);
    }

    /// FTC with h = m = 2 whose combine projection extracts the harmonic
    /// branch unchanged, exposing it for inspection.
    fn harmonic_probe(tape: &mut Tape, freq_w: Vec<f64>, freq_b: Vec<f64>) -> BoundExpert {
        let freq_weight = tape.leaf(freq_w, vec![2, 2], true).unwrap();
        let freq_bias = tape.leaf(freq_b, vec![2], true).unwrap();
        let time1_weight = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let time1_bias = tape.constant(vec![0.0; 2], vec![2]).unwrap();
        let time2_weight = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let time2_bias = tape.constant(vec![0.0; 2], vec![2]).unwrap();
        let combine_weight = tape
            .constant(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], vec![4, 2])
            .unwrap();
        let combine_bias = tape.constant(vec![0.0; 2], vec![2]).unwrap();
        BoundExpert::Ftc {
            freq_weight,
            freq_bias,
            time1_weight,
            time1_bias,
            time2_weight,
            time2_bias,
            combine_weight,
            combine_bias,
        }
    }

    #[test]
    fn zero_token_zero_bias_gives_unit_basis() {
        let mut tape = Tape::new();
        let expert = harmonic_probe(&mut tape, vec![0.3, -0.4, 0.8, 0.1], vec![0.0, 0.0]);
        let x = tape.constant(vec![0.0, 0.0], vec![1, 2]).unwrap();
        let out = expert_forward(&mut tape, x, &expert).unwrap();
        assert_eq!(tape.data(out), &[1.0, 1.0]);
    }

    #[test]
    fn harmonic_basis_is_bounded_by_sqrt2() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tape = Tape::new();
        let fw = tape
            .constant((0..8).map(|_| rng.gen_range(-3.0..3.0)).collect(), vec![4, 2])
            .unwrap();
        let fb = tape
            .constant((0..2).map(|_| rng.gen_range(-3.0..3.0)).collect(), vec![2])
            .unwrap();
        let x = tape
            .constant((0..40).map(|_| rng.gen_range(-10.0..10.0)).collect(), vec![10, 4])
            .unwrap();
        let basis = harmonic_basis(&mut tape, x, fw, fb).unwrap();
        let bound = 2f64.sqrt() + 1e-12;
        assert!(tape.data(basis).iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn harmonic_basis_is_two_pi_periodic() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x_data: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let fw_data: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |bias: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let fw = tape.constant(fw_data.clone(), vec![2, 2]).unwrap();
            let fb = tape.constant(vec![bias; 2], vec![2]).unwrap();
            let x = tape.constant(x_data.clone(), vec![4, 2]).unwrap();
            let b = harmonic_basis(&mut tape, x, fw, fb).unwrap();
            tape.data(b).to_vec()
        };
        let base = run(0.25);
        let shifted = run(0.25 + 2.0 * std::f64::consts::PI);
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn random_ftc(tape: &mut Tape, rng: &mut ChaCha8Rng, h: usize, m: usize) -> BoundExpert {
        let mut mk = |rows: usize, cols: usize, scale: f64| {
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
            if cols == 1 {
                tape.leaf(data, vec![rows], true).unwrap()
            } else {
                tape.leaf(data, vec![rows, cols], true).unwrap()
            }
        };
        BoundExpert::Ftc {
            freq_weight: mk(h, m, 0.5),
            freq_bias: mk(m, 1, 0.2),
            time1_weight: mk(h, m, 0.5),
            time1_bias: mk(m, 1, 0.2),
            time2_weight: mk(m, m, 0.5),
            time2_bias: mk(m, 1, 0.2),
            combine_weight: mk(2 * m, h, 0.5),
            combine_bias: mk(h, 1, 0.2),
        }
    }

    #[test]
    fn single_expert_layer_is_residual_plus_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (t, h) = (5, 4);
        let mut tape = Tape::new();
        let expert = random_ftc(&mut tape, &mut rng, h, 3);
        let gate_data: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gate = tape.leaf(gate_data, vec![h, 1], true).unwrap();
        let tokens_data: Vec<f64> = (0..t * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tokens = tape.constant(tokens_data, vec![t, h]).unwrap();

        let (out, routing) = moe_layer(&mut tape, tokens, gate, &[expert], 1).unwrap();
        assert_eq!(routing.stats.dispatch_fraction, vec![1.0]);

        let dense = expert_forward(&mut tape, tokens, &expert).unwrap();
        let expected: Vec<f64> = tape
            .data(dense)
            .iter()
            .zip(tape.data(tokens))
            .map(|(&e, &x)| e + x)
            .collect();
        for (a, b) in tape.data(out).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_experts_make_selection_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (t, h, m) = (6, 4, 3);
        let mut tape = Tape::new();
        let shared = random_ftc(&mut tape, &mut rng, h, m);
        let tokens_data: Vec<f64> = (0..t * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tokens = tape.constant(tokens_data, vec![t, h]).unwrap();
        let gate_data: Vec<f64> = (0..h * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gate = tape.leaf(gate_data.clone(), vec![h, 2], true).unwrap();
        let (out1, _) = moe_layer(&mut tape, tokens, gate, &[shared, shared], 1).unwrap();
        // swap the gate columns: selections flip, output must not
        let swapped: Vec<f64> = gate_data.chunks(2).flat_map(|c| [c[1], c[0]]).collect();
        let gate2 = tape.leaf(swapped, vec![h, 2], true).unwrap();
        let (out2, _) = moe_layer(&mut tape, tokens, gate2, &[shared, shared], 1).unwrap();
        for (a, b) in tape.data(out1).iter().zip(tape.data(out2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_full_k_equals_mean_of_experts_plus_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (t, h, m, n) = (4, 4, 3, 3);
        let mut tape = Tape::new();
        let experts: Vec<BoundExpert> =
            (0..n).map(|_| random_ftc(&mut tape, &mut rng, h, m)).collect();
        let gate = tape.constant(vec![0.0; h * n], vec![h, n]).unwrap();
        let tokens_data: Vec<f64> = (0..t * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tokens = tape.constant(tokens_data, vec![t, h]).unwrap();
        let (out, _) = moe_layer(&mut tape, tokens, gate, &experts, n).unwrap();

        let mut expected = tape.data(tokens).to_vec();
        for expert in &experts {
            let dense = expert_forward(&mut tape, tokens, expert).unwrap();
            for (acc, &v) in expected.iter_mut().zip(tape.data(dense)) {
                *acc += v / n as f64;
            }
        }
        for (a, b) in tape.data(out).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn sparse_dispatch_equals_dense_oracle_at_full_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (t, h, m, n) = (7, 4, 3, 4);
        let mut tape = Tape::new();
        let experts: Vec<BoundExpert> =
            (0..n).map(|_| random_ftc(&mut tape, &mut rng, h, m)).collect();
        let gate_data: Vec<f64> = (0..h * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gate = tape.leaf(gate_data, vec![h, n], true).unwrap();
        let tokens_data: Vec<f64> = (0..t * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tokens = tape.constant(tokens_data, vec![t, h]).unwrap();
        let (out, routing) = moe_layer(&mut tape, tokens, gate, &experts, n).unwrap();

        // brute force: every expert on every token, weighted by the full
        // renormalized weights (== softmax when K = N), plus residual
        let mut expected = tape.data(tokens).to_vec();
        for (e, expert) in experts.iter().enumerate() {
            let dense = expert_forward(&mut tape, tokens, expert).unwrap();
            let dd = tape.data(dense).to_vec();
            let wmat = tape.data(routing.weights_id).to_vec();
            for tok in 0..t {
                let w = wmat[tok * n + e];
                for c in 0..h {
                    expected[tok * h + c] += w * dd[tok * h + c];
                }
            }
        }
        for (a, b) in tape.data(out).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn routed_gradients_match_finite_differences() {
        // gradient flows through gate, expert weights, and tokens across
        // the discrete dispatch (selection held constant)
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (t, h, m, n, k) = (5, 4, 3, 3, 2);
        let gate_data: Vec<f64> = (0..h * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tokens_data: Vec<f64> = (0..t * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let freq_data: Vec<f64> = (0..h * m).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let weights: Vec<f64> = (0..t * h).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let build = |gate_v: &[f64], tokens_v: &[f64], freq_v: &[f64]| -> (Tape, TensorId, [TensorId; 3]) {
            let mut tape = Tape::new();
            let mut rng2 = ChaCha8Rng::seed_from_u64(99);
            let gate = tape.leaf(gate_v.to_vec(), vec![h, n], true).unwrap();
            let tokens = tape.leaf(tokens_v.to_vec(), vec![t, h], true).unwrap();
            let freq_weight = tape.leaf(freq_v.to_vec(), vec![h, m], true).unwrap();
            let mut experts = vec![];
            for e in 0..n {
                let fixed = random_ftc(&mut tape, &mut rng2, h, m);
                if e == 0 {
                    if let BoundExpert::Ftc { freq_bias, time1_weight, time1_bias, time2_weight, time2_bias, combine_weight, combine_bias, .. } = fixed {
                        experts.push(BoundExpert::Ftc {
                            freq_weight,
                            freq_bias,
                            time1_weight,
                            time1_bias,
                            time2_weight,
                            time2_bias,
                            combine_weight,
                            combine_bias,
                        });
                        continue;
                    }
                }
                experts.push(fixed);
            }
            let (out, _) = moe_layer(&mut tape, tokens, gate, &experts, k).unwrap();
            let wc = tape.constant(weights.clone(), vec![t, h]).unwrap();
            let prod = tape.mul(out, wc).unwrap();
            let root = tape.sum(prod).unwrap();
            (tape, root, [gate, tokens, freq_weight])
        };

        let (mut tape, root, leaves) = build(&gate_data, &tokens_data, &freq_data);
        tape.backward(root).unwrap();
        let inputs = [gate_data.clone(), tokens_data.clone(), freq_data.clone()];
        let step = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let grad = tape.grad(*leaf).unwrap().to_vec();
            for j in 0..inputs[li].len() {
                let mut plus = inputs.clone();
                plus[li][j] += step;
                let mut minus = inputs.clone();
                minus[li][j] -= step;
                let (tp, rp, _) = build(&plus[0], &plus[1], &plus[2]);
                let (tm, rm, _) = build(&minus[0], &minus[1], &minus[2]);
                let fd = (tp.data(rp)[0] - tm.data(rm)[0]) / (2.0 * step);
                let denom = grad[j].abs().max(fd.abs()).max(1e-8);
                assert!(
                    (grad[j] - fd).abs() / denom < 1e-4,
                    "leaf {li} elem {j}: analytic {} vs fd {}",
                    grad[j],
                    fd
                );
            }
        }
    }
}
