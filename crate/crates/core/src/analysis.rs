//! Evaluation tooling: forecast error metrics, FFT spectra of captured
//! hidden states, the expert-type ablation harness, and per-point
//! inference timing.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{autoregressive_forecast, bind, model_forward, normalize_plain};
use crate::params::ModelParams;
use crate::preprocess::{RawSeries, RevInStats};
use crate::tensor::Tape;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MetricSpace {
    #[serde(rename = "normalized")]
    Normalized,
    #[serde(rename = "original-units")]
    OriginalUnits,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub horizon: usize,
    pub space: MetricSpace,
}

/// Mean squared and mean absolute error.
pub fn mse_mae(y: &[f64], y_hat: &[f64], horizon: usize, space: MetricSpace) -> Result<MetricReport> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(Error::LengthMismatch { lhs: y.len(), rhs: y_hat.len() });
    }
    let n = y.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (&a, &b) in y.iter().zip(y_hat) {
        let r = a - b;
        se += r * r;
        ae += r.abs();
    }
    Ok(MetricReport { mse: se / n, mae: ae / n, horizon, space })
}

#[derive(Debug, Clone, Serialize)]
pub struct Peak {
    pub freq_hz: f64,
    pub energy: f64,
}

/// One-sided energy spectrum of a multi-channel signal along time.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub bin_freqs_hz: Vec<f64>,
    /// `w_k * |X_k|^2 / T` averaged over channels, with the one-sided
    /// doubling weight (DC and Nyquist unduplicated); the total equals the
    /// time-domain energy `sum x^2` averaged over channels.
    pub energy: Vec<f64>,
    /// Non-DC local maxima, highest energy first.
    pub peaks: Vec<Peak>,
}

/// FFT along the time axis of a `t x channels` row-major array, energy
/// averaged over channels. The DC bin is reported but never a peak.
pub fn hidden_spectrum(hidden: &[f64], t: usize, channels: usize, sample_rate_hz: f64) -> Result<SpectralReport> {
    if t < 4 {
        return Err(Error::InvalidShape {
            op: "hidden_spectrum",
            detail: format!("need at least 4 time steps, got {t}"),
        });
    }
    if channels == 0 || hidden.len() != t * channels {
        return Err(Error::InvalidShape {
            op: "hidden_spectrum",
            detail: format!("{} values do not form {t} x {channels}", hidden.len()),
        });
    }
    let bins = t / 2 + 1;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(t);
    let mut energy = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    for c in 0..channels {
        for (j, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(hidden[j * channels + c], 0.0);
        }
        fft.process(&mut buf);
        for (k, e) in energy.iter_mut().enumerate() {
            let weight = if k == 0 || (t % 2 == 0 && k == t / 2) { 1.0 } else { 2.0 };
            *e += weight * buf[k].norm_sqr() / t as f64;
        }
    }
    for e in energy.iter_mut() {
        *e /= channels as f64;
    }
    let bin_freqs_hz: Vec<f64> = (0..bins).map(|k| k as f64 * sample_rate_hz / t as f64).collect();

    // local maxima over the non-DC bins; bin 1 is never compared to DC
    let mut peaks: Vec<Peak> = (1..bins)
        .filter(|&k| {
            let left_ok = k == 1 || energy[k] >= energy[k - 1];
            let right_ok = k + 1 >= bins || energy[k] >= energy[k + 1];
            left_ok && right_ok
        })
        .map(|k| Peak { freq_hz: bin_freqs_hz[k], energy: energy[k] })
        .collect();
    peaks.sort_by(|a, b| b.energy.partial_cmp(&a.energy).expect("finite energy"));

    Ok(SpectralReport { bin_freqs_hz, energy, peaks })
}

/// Fraction of truth frequencies matched by one of the top-`|truth|`
/// peaks within one bin. `None` when there are no truth frequencies.
pub fn peak_alignment(report: &SpectralReport, truth_freqs: &[f64]) -> Option<f64> {
    if truth_freqs.is_empty() {
        return None;
    }
    let bin_hz = if report.bin_freqs_hz.len() > 1 {
        report.bin_freqs_hz[1]
    } else {
        return Some(0.0);
    };
    let top = &report.peaks[..report.peaks.len().min(truth_freqs.len())];
    let matched = truth_freqs
        .iter()
        .filter(|&&f| top.iter().any(|p| (p.freq_hz - f).abs() <= bin_hz + 1e-9))
        .count();
    Some(matched as f64 / truth_freqs.len() as f64)
}

/// One arm of the expert-type comparison.
#[derive(Debug, Clone, Serialize)]
pub struct ArmReport {
    pub ftc: bool,
    pub spectrum: SpectralReport,
    pub metrics: Vec<MetricReport>,
    /// Peak alignment against the truth tones; absent without truth.
    pub alignment: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralComparison {
    pub ftc_arm: ArmReport,
    pub baseline_arm: ArmReport,
}

fn arm_report(
    params: &ModelParams,
    cfg: &ModelConfig,
    context: &[f64],
    target: &[f64],
    sample_rate_hz: f64,
    truth_freqs: &[f64],
) -> Result<ArmReport> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, cfg, false)?;
    let fwd = model_forward(&mut tape, &bound, cfg, context, true)?;
    let captured = fwd.captured.expect("capture requested");
    let last_layer = captured.last().expect("at least one layer");
    let spectrum = hidden_spectrum(last_layer, context.len(), cfg.h, sample_rate_hz)?;

    let forecast = autoregressive_forecast(params, cfg, context, target.len())?;
    let original = mse_mae(target, &forecast, target.len(), MetricSpace::OriginalUnits)?;
    let stats = if cfg.revin {
        RevInStats::from_values(context)?
    } else {
        RevInStats::identity()
    };
    let t_norm = normalize_plain(params, cfg, target, &stats)?;
    let f_norm = normalize_plain(params, cfg, &forecast, &stats)?;
    let normalized = mse_mae(&t_norm, &f_norm, target.len(), MetricSpace::Normalized)?;

    let alignment = peak_alignment(&spectrum, truth_freqs);
    Ok(ArmReport {
        ftc: cfg.ftc,
        spectrum,
        metrics: vec![normalized, original],
        alignment,
    })
}

/// Compare a frequency-time-expert model against its feed-forward-expert
/// twin on one signal: last-layer spectra, forecast metrics, and peak
/// alignment. Both configurations must be identical apart from the expert
/// type.
#[allow(clippy::too_many_arguments)]
pub fn spectral_experiment(
    params_ftc: &ModelParams,
    cfg_ftc: &ModelConfig,
    params_baseline: &ModelParams,
    cfg_baseline: &ModelConfig,
    signal: &RawSeries,
    sample_rate_hz: f64,
    truth_freqs: &[f64],
    t_x: usize,
    t_y: usize,
) -> Result<SpectralComparison> {
    let diff: Vec<String> = cfg_ftc
        .diff_fields(cfg_baseline)
        .into_iter()
        .filter(|f| f != "ftc")
        .collect();
    if !diff.is_empty() {
        return Err(Error::ConfigMismatch { fields: diff });
    }
    if signal.values.len() < t_x + t_y {
        return Err(Error::SeriesTooShort {
            series_id: signal.series_id.clone(),
            needed: t_x + t_y,
            got: signal.values.len(),
        });
    }
    // held-out tail: the last context/horizon pair of the signal
    let tail = &signal.values[signal.values.len() - t_x - t_y..];
    let (context, target) = tail.split_at(t_x);

    Ok(SpectralComparison {
        ftc_arm: arm_report(params_ftc, cfg_ftc, context, target, sample_rate_hz, truth_freqs)?,
        baseline_arm: arm_report(
            params_baseline,
            cfg_baseline,
            context,
            target,
            sample_rate_hz,
            truth_freqs,
        )?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyRow {
    pub context_len: usize,
    pub median_s_per_point: f64,
    pub p90_s_per_point: f64,
}

/// Wall-clock seconds per generated point across context lengths. The
/// first repeat warms up and is discarded; the rest give the median and
/// p90. Runs on the current thread.
pub fn time_inference(
    params: &ModelParams,
    cfg: &ModelConfig,
    context_lengths: &[usize],
    repeats: usize,
    horizon: usize,
) -> Result<Vec<LatencyRow>> {
    if repeats < 3 {
        return Err(Error::InvalidConfig {
            field: "repeats".into(),
            detail: "need at least 3 (first is discarded as warmup)".into(),
        });
    }
    if horizon == 0 {
        return Err(Error::InvalidConfig {
            field: "horizon".into(),
            detail: "must be >= 1".into(),
        });
    }
    let mut rows = Vec::with_capacity(context_lengths.len());
    for &len in context_lengths {
        let context: Vec<f64> = (0..len)
            .map(|t| (t as f64 * 0.37).sin() + 0.2 * (t as f64 * 0.11).cos())
            .collect();
        let mut per_point = Vec::with_capacity(repeats.saturating_sub(1));
        for rep in 0..repeats {
            let start = std::time::Instant::now();
            autoregressive_forecast(params, cfg, &context, horizon)?;
            let elapsed = start.elapsed().as_secs_f64() / horizon as f64;
            if rep > 0 {
                per_point.push(elapsed);
            }
        }
        per_point.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        let median = per_point[per_point.len() / 2];
        let p90_idx = ((per_point.len() as f64 * 0.9).ceil() as usize).saturating_sub(1);
        rows.push(LatencyRow {
            context_len: len,
            median_s_per_point: median,
            p90_s_per_point: per_point[p90_idx.min(per_point.len() - 1)],
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::preprocess::synth_composite;
    use proptest::prelude::*;

    #[test]
    fn mse_mae_hand_values() {
        let r = mse_mae(&[0.0, 0.0], &[1.0, -1.0], 2, MetricSpace::OriginalUnits).unwrap();
        assert_eq!((r.mse, r.mae), (1.0, 1.0));
        let r = mse_mae(&[0.0, 0.0], &[2.0, 0.0], 2, MetricSpace::OriginalUnits).unwrap();
        assert_eq!((r.mse, r.mae), (2.0, 1.0));
        let r = mse_mae(&[0.5, -1.0], &[0.5, -1.0], 2, MetricSpace::Normalized).unwrap();
        assert_eq!((r.mse, r.mae), (0.0, 0.0));
        assert!(mse_mae(&[1.0], &[1.0, 2.0], 1, MetricSpace::Normalized).is_err());
    }

    #[test]
    fn pure_tone_peaks_at_its_bin() {
        let t = 128;
        let channels = 3;
        let rate = 64.0;
        let mut hidden = vec![0.0; t * channels];
        for j in 0..t {
            let v = (2.0 * std::f64::consts::PI * 8.0 * j as f64 / rate).sin();
            for c in 0..channels {
                hidden[j * channels + c] = v;
            }
        }
        let report = hidden_spectrum(&hidden, t, channels, rate).unwrap();
        // bin 16 carries 8 Hz at this length and rate
        assert_eq!(report.peaks[0].freq_hz, report.bin_freqs_hz[16]);
        assert!((report.peaks[0].freq_hz - 8.0).abs() < 1e-12);
        let total: f64 = report.energy.iter().sum();
        assert!(report.peaks[0].energy / total > 0.999);
    }

    #[test]
    fn constant_signal_has_dc_only() {
        let t = 32;
        let hidden = vec![2.5; t * 2];
        let report = hidden_spectrum(&hidden, t, 2, 8.0).unwrap();
        for (k, &e) in report.energy.iter().enumerate() {
            if k == 0 {
                assert!(e > 0.0);
            } else {
                assert!(e < 1e-20, "bin {k} has energy {e}");
            }
        }
    }

    #[test]
    fn two_tone_energy_ratio_is_squared_amplitude_ratio() {
        let t = 64;
        let rate = 64.0;
        let hidden: Vec<f64> = (0..t)
            .map(|j| {
                let x = j as f64 / rate;
                (2.0 * std::f64::consts::PI * 4.0 * x).sin()
                    + 0.5 * (2.0 * std::f64::consts::PI * 12.0 * x).sin()
            })
            .collect();
        let report = hidden_spectrum(&hidden, t, 1, rate).unwrap();
        let e4 = report.energy[4];
        let e12 = report.energy[12];
        assert!((e4 / e12 - 4.0).abs() < 1e-6, "ratio {}", e4 / e12);
        // the two tones dominate the ranked peak list
        assert_eq!(report.peaks[0].freq_hz, report.bin_freqs_hz[4]);
        assert_eq!(report.peaks[1].freq_hz, report.bin_freqs_hz[12]);
    }

    #[test]
    fn parseval_energy_conservation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for &t in &[16usize, 21, 64] {
            let channels = 4;
            let hidden: Vec<f64> = (0..t * channels).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let report = hidden_spectrum(&hidden, t, channels, 10.0).unwrap();
            let spectral: f64 = report.energy.iter().sum();
            let mut time_energy = 0.0;
            for c in 0..channels {
                for j in 0..t {
                    time_energy += hidden[j * channels + c] * hidden[j * channels + c];
                }
            }
            time_energy /= channels as f64;
            assert!(
                (spectral - time_energy).abs() / time_energy < 1e-6,
                "t={t}: {spectral} vs {time_energy}"
            );
        }
    }

    #[test]
    fn spectrum_invariant_to_channel_permutation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (t, channels) = (24, 5);
        let hidden: Vec<f64> = (0..t * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut permuted = vec![0.0; hidden.len()];
        let perm = [3usize, 0, 4, 1, 2];
        for j in 0..t {
            for (c, &p) in perm.iter().enumerate() {
                permuted[j * channels + c] = hidden[j * channels + p];
            }
        }
        let a = hidden_spectrum(&hidden, t, channels, 1.0).unwrap();
        let b = hidden_spectrum(&permuted, t, channels, 1.0).unwrap();
        for (x, y) in a.energy.iter().zip(&b.energy) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn synth_composite_energy_lands_on_expected_bins() {
        let s = synth_composite(&[4.0, 6.0, 8.0], &[1.0, 1.0, 1.0], 64.0, 512, 0.0, 0).unwrap();
        let report = hidden_spectrum(&s.values, 512, 1, 64.0).unwrap();
        // bin = f * n / rate
        let expected_bins = [32usize, 48, 64];
        let on: f64 = expected_bins.iter().map(|&b| report.energy[b]).sum();
        let total: f64 = report.energy.iter().sum();
        assert!(on / total > 0.9999, "concentration {}", on / total);
        let align = peak_alignment(&report, &[4.0, 6.0, 8.0]).unwrap();
        assert_eq!(align, 1.0);
        assert!(peak_alignment(&report, &[]).is_none());
    }

    fn tiny_cfg(ftc: bool) -> ModelConfig {
        ModelConfig {
            h: 8,
            layers: 1,
            heads: 2,
            experts: 2,
            top_k: 1,
            expert_width: 6,
            ftc,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn spectral_experiment_mechanics() {
        let signal = synth_composite(&[2.0, 4.0], &[1.0, 0.5], 16.0, 64, 0.0, 0).unwrap();
        let cfg_f = tiny_cfg(true);
        let cfg_b = tiny_cfg(false);
        let p_f = init_params(&cfg_f, 1);
        let p_b = init_params(&cfg_b, 1);
        let cmp = spectral_experiment(&p_f, &cfg_f, &p_b, &cfg_b, &signal, 16.0, &[2.0, 4.0], 16, 4)
            .unwrap();
        assert!(cmp.ftc_arm.ftc && !cmp.baseline_arm.ftc);
        assert!(cmp.ftc_arm.alignment.is_some());
        assert_eq!(cmp.ftc_arm.metrics.len(), 2);

        // identical arms give identical reports
        let same = spectral_experiment(&p_f, &cfg_f, &p_f, &cfg_f, &signal, 16.0, &[], 16, 4).unwrap();
        assert_eq!(
            serde_json::to_string(&same.ftc_arm.spectrum).unwrap(),
            serde_json::to_string(&same.baseline_arm.spectrum).unwrap()
        );
        assert!(same.ftc_arm.alignment.is_none());

        // any difference beyond the expert type is rejected
        let mut off = tiny_cfg(false);
        off.heads = 4;
        let p_off = init_params(&off, 1);
        match spectral_experiment(&p_f, &cfg_f, &p_off, &off, &signal, 16.0, &[], 16, 4) {
            Err(Error::ConfigMismatch { fields }) => assert_eq!(fields, vec!["heads"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inference_timing_rows_and_growth() {
        let cfg = tiny_cfg(true);
        let params = init_params(&cfg, 4);
        let rows = time_inference(&params, &cfg, &[8, 128], 4, 2).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.median_s_per_point > 0.0));
        assert!(rows.iter().all(|r| r.p90_s_per_point >= r.median_s_per_point));
        // attention cost grows with context; allow generous jitter
        assert!(
            rows[1].median_s_per_point >= 0.8 * rows[0].median_s_per_point,
            "{} then {}",
            rows[0].median_s_per_point,
            rows[1].median_s_per_point
        );
        assert!(time_inference(&params, &cfg, &[8], 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn mae_bounded_by_rmse(
            y in proptest::collection::vec(-10.0f64..10.0, 1..32),
            noise in proptest::collection::vec(-5.0f64..5.0, 32),
        ) {
            let y_hat: Vec<f64> = y.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let r = mse_mae(&y, &y_hat, y.len(), MetricSpace::Normalized).unwrap();
            prop_assert!(r.mae <= r.mse.sqrt() + 1e-12);
        }
    }
}
