//! Series ingestion and signal conditioning: per-instance reversible
//! normalization, window cutting, CSV I/O, and sinusoid synthesis.
//!
//! CSV schema (UTF-8, comma-separated, LF or CRLF):
//! header `series_id,timestamp,value`; `series_id` is any non-empty string,
//! `timestamp` is opaque (ordering is file order), `value` is a decimal
//! literal.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// Default guard added to the variance before taking the square root:
/// small enough not to distort, large enough to survive constant series.
pub const REVIN_EPS: f64 = 1e-5;

/// One univariate series as loaded or synthesized.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub series_id: String,
    pub values: Vec<f64>,
    pub granularity: String,
}

/// One (context, target) pair cut from a series; the target immediately
/// follows the context in source order.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    pub context: Vec<f64>,
    pub target: Vec<f64>,
}

impl SeriesWindow {
    /// Context followed by target, the teacher-forcing sequence.
    pub fn full_sequence(&self) -> Vec<f64> {
        let mut seq = Vec::with_capacity(self.context.len() + self.target.len());
        seq.extend_from_slice(&self.context);
        seq.extend_from_slice(&self.target);
        seq
    }
}

/// Affine half of the reversible normalization. The scale/shift pair is
/// learnable and lives in the model's parameter store; this is the plain
/// value view used by the math.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevInParams {
    pub affine_scale: f64,
    pub affine_shift: f64,
    pub eps: f64,
}

impl Default for RevInParams {
    fn default() -> Self {
        RevInParams { affine_scale: 1.0, affine_shift: 0.0, eps: REVIN_EPS }
    }
}

/// Instance statistics captured at normalization time: mean and population
/// variance (mean squared deviation) of the context window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevInStats {
    pub mean: f64,
    pub var: f64,
}

impl RevInStats {
    /// Identity statistics, used when normalization is disabled.
    pub fn identity() -> Self {
        RevInStats { mean: 0.0, var: 1.0 }
    }

    pub fn from_values(x: &[f64]) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::EmptyInput("revin statistics"));
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(RevInStats { mean, var })
    }
}

/// Standardize per instance, then apply the learnable affine:
/// `scale * (x - mean) / sqrt(var + eps) + shift`.
pub fn revin_normalize(x: &[f64], p: &RevInParams) -> Result<(Vec<f64>, RevInStats)> {
    let stats = RevInStats::from_values(x)?;
    let denom = (stats.var + p.eps).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::NonFinite { op: "revin_normalize" });
    }
    let out = x
        .iter()
        .map(|&v| p.affine_scale * (v - stats.mean) / denom + p.affine_shift)
        .collect();
    Ok((out, stats))
}

/// Exact inverse of [`revin_normalize`] under the same parameters and
/// statistics: `sqrt(var + eps) * (y - shift) / scale + mean`.
pub fn revin_denormalize(y: &[f64], p: &RevInParams, stats: &RevInStats) -> Result<Vec<f64>> {
    if p.affine_scale.abs() < 1e-8 {
        return Err(Error::ScaleTooSmall { value: p.affine_scale });
    }
    let scale = (stats.var + p.eps).sqrt();
    Ok(y
        .iter()
        .map(|&v| scale * (v - p.affine_shift) / p.affine_scale + stats.mean)
        .collect())
}

/// Cut overlapping windows at offsets `0, stride, 2*stride, ...`.
pub fn make_windows(s: &RawSeries, t_x: usize, t_y: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
    if t_x == 0 || t_y == 0 {
        return Err(Error::InvalidConfig {
            field: "window".into(),
            detail: "context and horizon must be positive".into(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidConfig {
            field: "stride".into(),
            detail: "must be >= 1".into(),
        });
    }
    let needed = t_x + t_y;
    if s.values.len() < needed {
        return Err(Error::SeriesTooShort {
            series_id: s.series_id.clone(),
            needed,
            got: s.values.len(),
        });
    }
    let count = (s.values.len() - needed) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let off = w * stride;
        out.push(SeriesWindow {
            context: s.values[off..off + t_x].to_vec(),
            target: s.values[off + t_x..off + needed].to_vec(),
        });
    }
    Ok(out)
}

const CSV_HEADER: [&str; 3] = ["series_id", "timestamp", "value"];

/// Load every series from a CSV file, one [`RawSeries`] per distinct id in
/// first-appearance order, rows kept in file order.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<RawSeries>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::CsvFormat { path: display.clone(), detail: e.to_string() })?;

    let mut records = reader.records();
    let header = match records.next() {
        None => {
            return Err(Error::CsvFormat { path: display, detail: "empty file".into() });
        }
        Some(rec) => rec.map_err(|e| Error::CsvFormat { path: display.clone(), detail: e.to_string() })?,
    };
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::CsvFormat {
            path: display,
            detail: format!("missing header `{}`", CSV_HEADER.join(",")),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_id: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::CsvFormat { path: display.clone(), detail: e.to_string() })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 3 {
            return Err(Error::CsvValue {
                path: display,
                line,
                detail: format!("expected 3 fields, got {}", rec.len()),
            });
        }
        let id = rec.get(0).unwrap_or("");
        if id.is_empty() {
            return Err(Error::CsvValue {
                path: display,
                line,
                detail: "empty series_id".into(),
            });
        }
        let raw = rec.get(2).unwrap_or("");
        let value: f64 = raw.parse().map_err(|_| Error::CsvValue {
            path: display.clone(),
            line,
            detail: format!("unparseable value `{raw}`"),
        })?;
        if !value.is_finite() {
            return Err(Error::CsvValue {
                path: display,
                line,
                detail: format!("non-finite value `{raw}`"),
            });
        }
        if !by_id.contains_key(id) {
            order.push(id.to_string());
        }
        by_id.entry(id.to_string()).or_default().push(value);
    }
    if order.is_empty() {
        return Err(Error::CsvFormat { path: display, detail: "no data rows".into() });
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let values = by_id.remove(&id).expect("collected above");
            RawSeries { series_id: id, values, granularity: "unknown".into() }
        })
        .collect())
}

/// Write series in the same schema, timestamps as 0-based indices.
pub fn write_csv(path: impl AsRef<Path>, series: &[RawSeries]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::CsvFormat {
        path: path.as_ref().display().to_string(),
        detail: e.to_string(),
    })?;
    writer
        .write_record(CSV_HEADER)
        .map_err(|e| Error::CsvFormat {
            path: path.as_ref().display().to_string(),
            detail: e.to_string(),
        })?;
    for s in series {
        for (t, v) in s.values.iter().enumerate() {
            writer
                .write_record([s.series_id.as_str(), &t.to_string(), &format!("{v}")])
                .map_err(|e| Error::CsvFormat {
                    path: path.as_ref().display().to_string(),
                    detail: e.to_string(),
                })?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Sum of sinusoids sampled at `sample_rate_hz` with optional Gaussian
/// noise: `sum_i amps[i] * sin(2 pi freqs[i] t / rate)`. Deterministic
/// under `seed`.
pub fn synth_composite(
    freqs_hz: &[f64],
    amps: &[f64],
    sample_rate_hz: f64,
    n: usize,
    noise_std: f64,
    seed: u64,
) -> Result<RawSeries> {
    if freqs_hz.len() != amps.len() {
        return Err(Error::InvalidConfig {
            field: "synth".into(),
            detail: format!("{} freqs vs {} amps", freqs_hz.len(), amps.len()),
        });
    }
    if n == 0 {
        return Err(Error::InvalidConfig {
            field: "synth.n".into(),
            detail: "must be >= 1".into(),
        });
    }
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
        return Err(Error::InvalidConfig {
            field: "synth.sample_rate_hz".into(),
            detail: "must be positive".into(),
        });
    }
    if noise_std < 0.0 {
        return Err(Error::InvalidConfig {
            field: "synth.noise_std".into(),
            detail: "must be non-negative".into(),
        });
    }
    let nyquist = sample_rate_hz / 2.0;
    for &f in freqs_hz {
        if f >= nyquist {
            return Err(Error::NyquistViolation { freq: f, nyquist });
        }
    }

    let mut values = vec![0.0; n];
    for (v, t) in values.iter_mut().zip(0..) {
        let mut acc = 0.0;
        for (&f, &a) in freqs_hz.iter().zip(amps) {
            acc += a * (2.0 * std::f64::consts::PI * f * t as f64 / sample_rate_hz).sin();
        }
        *v = acc;
    }
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_std).expect("validated std");
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(RawSeries {
        series_id: "synth".into(),
        values,
        granularity: format!("{sample_rate_hz}hz"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(values: Vec<f64>) -> RawSeries {
        RawSeries { series_id: "s".into(), values, granularity: "test".into() }
    }

    #[test]
    fn normalize_uses_population_variance() {
        let p = RevInParams { affine_scale: 1.0, affine_shift: 0.0, eps: 0.0 };
        let (out, stats) = revin_normalize(&[1.0, 2.0, 3.0], &p).unwrap();
        let expected = (1.5f64).sqrt(); // 1/sqrt(2/3)
        assert!((out[0] + expected).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12);
        assert!((out[2] - expected).abs() < 1e-12);
        assert!((out[2] - 1.224745).abs() < 1e-6);
        assert_eq!(stats.mean, 2.0);
        assert!((stats.var - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_series_normalizes_to_zero() {
        let p = RevInParams::default();
        let (out, stats) = revin_normalize(&[5.0, 5.0, 5.0], &p).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0]);
        assert_eq!(stats.var, 0.0);
    }

    #[test]
    fn affine_acts_after_standardization() {
        // [-1, 1] already has zero mean and unit population variance
        let p = RevInParams { affine_scale: 2.0, affine_shift: 1.0, eps: 0.0 };
        let (out, _) = revin_normalize(&[-1.0, 1.0], &p).unwrap();
        assert_eq!(out, vec![-1.0, 3.0]);
    }

    #[test]
    fn denormalize_maps_shift_back_to_mean() {
        let p = RevInParams { affine_scale: 3.0, affine_shift: 0.25, eps: 1e-5 };
        let (_, stats) = revin_normalize(&[4.0, 8.0, 6.0], &p).unwrap();
        let out = revin_denormalize(&[0.25, 0.25], &p, &stats).unwrap();
        assert!(out.iter().all(|&v| (v - stats.mean).abs() < 1e-12));
    }

    #[test]
    fn degenerate_variance_denormalizes_to_mean() {
        let p = RevInParams::default();
        let (_, stats) = revin_normalize(&[7.0, 7.0], &p).unwrap();
        let out = revin_denormalize(&[0.0, 0.0], &p, &stats).unwrap();
        assert!(out.iter().all(|&v| (v - 7.0).abs() < 1e-2));
    }

    #[test]
    fn tiny_scale_rejected_on_denormalize() {
        let p = RevInParams { affine_scale: 1e-9, affine_shift: 0.0, eps: 1e-5 };
        let stats = RevInStats { mean: 0.0, var: 1.0 };
        assert!(matches!(
            revin_denormalize(&[1.0], &p, &stats),
            Err(Error::ScaleTooSmall { .. })
        ));
    }

    #[test]
    fn normalized_output_is_centered_and_nearly_unit() {
        let p = RevInParams::default();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() * 3.0 + 2.0).collect();
        let (out, stats) = revin_normalize(&x, &p).unwrap();
        let m = out.iter().sum::<f64>() / out.len() as f64;
        assert!(m.abs() < 1e-10);
        let var = out.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / out.len() as f64;
        assert!(var <= 1.0 + 1e-12);
        assert!(var >= stats.var / (stats.var + p.eps) - 1e-12);
    }

    #[test]
    fn window_count_matches_enumeration() {
        let s = series((0..10).map(|v| v as f64).collect());
        let ws = make_windows(&s, 4, 2, 1).unwrap();
        assert_eq!(ws.len(), 5);
        // enumeration oracle: every valid offset, in order
        for (w, window) in ws.iter().enumerate() {
            assert_eq!(window.context, s.values[w..w + 4]);
            assert_eq!(window.target, s.values[w + 4..w + 6]);
        }
    }

    #[test]
    fn window_boundaries() {
        let s = series((0..6).map(|v| v as f64).collect());
        assert_eq!(make_windows(&s, 4, 2, 1).unwrap().len(), 1);
        let s10 = series((0..10).map(|v| v as f64).collect());
        assert_eq!(make_windows(&s10, 4, 2, 10).unwrap().len(), 1);
    }

    #[test]
    fn short_series_rejected_with_minimum() {
        let s = series(vec![1.0, 2.0, 3.0]);
        match make_windows(&s, 4, 2, 1) {
            Err(Error::SeriesTooShort { needed, got, .. }) => {
                assert_eq!(needed, 6);
                assert_eq!(got, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn csv_single_series() {
        let f = write_tmp("series_id,timestamp,value\na,0,1.5\na,1,2.5\na,2,-3\n");
        let out = load_csv(f.path()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].series_id, "a");
        assert_eq!(out[0].values, vec![1.5, 2.5, -3.0]);
    }

    #[test]
    fn csv_interleaved_series_preserve_order() {
        let f = write_tmp(
            "series_id,timestamp,value\nb,0,1\na,0,10\nb,1,2\na,1,20\nb,2,3\n",
        );
        let out = load_csv(f.path()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].series_id, "b");
        assert_eq!(out[0].values, vec![1.0, 2.0, 3.0]);
        assert_eq!(out[1].series_id, "a");
        assert_eq!(out[1].values, vec![10.0, 20.0]);
    }

    #[test]
    fn csv_bad_value_names_line() {
        let f = write_tmp(
            "series_id,timestamp,value\na,0,1\na,1,2\na,2,3\na,3,4\na,4,5\na,5,abc\n",
        );
        match load_csv(f.path()) {
            Err(Error::CsvValue { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_missing_header_and_empty_file() {
        let f = write_tmp("a,0,1\na,1,2\n");
        assert!(matches!(load_csv(f.path()), Err(Error::CsvFormat { .. })));
        let f = write_tmp("");
        assert!(matches!(load_csv(f.path()), Err(Error::CsvFormat { .. })));
    }

    #[test]
    fn csv_rejects_non_finite_values() {
        let f = write_tmp("series_id,timestamp,value\na,0,NaN\n");
        assert!(matches!(load_csv(f.path()), Err(Error::CsvValue { line: 2, .. })));
    }

    #[test]
    fn csv_roundtrip_through_writer() {
        let s = vec![
            series(vec![1.0, -2.5, 3.25]),
            RawSeries { series_id: "other".into(), values: vec![0.5], granularity: "test".into() },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_csv(&path, &s).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back[0].values, s[0].values);
        assert_eq!(back[1].series_id, "other");
    }

    #[test]
    fn synth_empty_freqs_is_zero() {
        let s = synth_composite(&[], &[], 64.0, 8, 0.0, 1).unwrap();
        assert_eq!(s.values, vec![0.0; 8]);
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_composite(&[4.0, 6.0], &[1.0, 0.5], 64.0, 128, 0.3, 9).unwrap();
        let b = synth_composite(&[4.0, 6.0], &[1.0, 0.5], 64.0, 128, 0.3, 9).unwrap();
        assert_eq!(a.values, b.values);
        let c = synth_composite(&[4.0, 6.0], &[1.0, 0.5], 64.0, 128, 0.3, 10).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn synth_rejects_nyquist_violation() {
        assert!(matches!(
            synth_composite(&[32.0], &[1.0], 64.0, 16, 0.0, 0),
            Err(Error::NyquistViolation { .. })
        ));
        assert!(synth_composite(&[31.9], &[1.0], 64.0, 16, 0.0, 0).is_ok());
    }

    #[test]
    fn synth_periodicity_when_tones_align() {
        // all freqs are multiples of rate/P with P = 16
        let s = synth_composite(&[4.0, 8.0, 12.0], &[1.0, 0.5, 0.25], 64.0, 96, 0.0, 0).unwrap();
        let p = 16;
        for t in 0..s.values.len() - p {
            assert!((s.values[t + p] - s.values[t]).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn revin_round_trip_is_identity(
            data in proptest::collection::vec(-100.0f64..100.0, 3..64),
            log_scale in -4.0f64..4.0,
            shift in -10.0f64..10.0,
        ) {
            let stats = RevInStats::from_values(&data).unwrap();
            prop_assume!(stats.var > 1e-6);
            let p = RevInParams {
                affine_scale: 10f64.powf(log_scale),
                affine_shift: shift,
                eps: REVIN_EPS,
            };
            let (norm, stats) = revin_normalize(&data, &p).unwrap();
            let back = revin_denormalize(&norm, &p, &stats).unwrap();
            for (orig, rec) in data.iter().zip(&back) {
                prop_assert!((orig - rec).abs() < 1e-9, "{} vs {}", orig, rec);
            }
        }

        #[test]
        fn windows_tile_the_source(
            len in 8usize..40,
            t_x in 1usize..6,
            t_y in 1usize..4,
            stride in 1usize..5,
        ) {
            prop_assume!(len >= t_x + t_y);
            let s = series((0..len).map(|v| v as f64 * 1.5).collect());
            let ws = make_windows(&s, t_x, t_y, stride).unwrap();
            prop_assert_eq!(ws.len(), (len - t_x - t_y) / stride + 1);
            for (w, window) in ws.iter().enumerate() {
                let off = w * stride;
                let rebuilt = window.full_sequence();
                prop_assert_eq!(&rebuilt[..], &s.values[off..off + t_x + t_y]);
            }
        }
    }
}
