//! Signal preprocessing: Butterworth bandpass filtering, per-lead
//! standardization, and fixed-length windowing.
//!
//! The pipeline runs filter → z-score → window so crops never carry filter
//! edge transients. Filtering is zero-phase (forward-backward) with
//! edge-reflected padding and steady-state initial conditions per section,
//! so QRS timing survives for saliency alignment and a constant input is
//! rejected to machine precision.

use crate::dataio::EcgRecord;
use num_complex::Complex64;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("cutoff above Nyquist: high cutoff {high_hz} Hz >= {nyquist} Hz")]
    CutoffAboveNyquist { high_hz: f64, nyquist: f64 },
    #[error("invalid bandpass spec: {0}")]
    InvalidSpec(String),
    #[error("unsupported sampling rate: record '{id}' has fs {got} Hz, pipeline expects {expected} Hz")]
    SampleRateMismatch { id: String, expected: f64, got: f64 },
}

/// Bandpass design parameters. `order` is the analog prototype order; the
/// resulting bandpass cascade has `order` biquad sections.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BandpassSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
    pub fs: f64,
}

impl Default for BandpassSpec {
    fn default() -> Self {
        BandpassSpec {
            low_hz: 0.5,
            high_hz: 45.0,
            order: 2,
            fs: 500.0,
        }
    }
}

impl BandpassSpec {
    pub fn validate(&self) -> Result<(), DspError> {
        if self.high_hz >= self.fs / 2.0 {
            return Err(DspError::CutoffAboveNyquist {
                high_hz: self.high_hz,
                nyquist: self.fs / 2.0,
            });
        }
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz) {
            return Err(DspError::InvalidSpec(format!(
                "need 0 < low ({}) < high ({})",
                self.low_hz, self.high_hz
            )));
        }
        if self.order < 1 {
            return Err(DspError::InvalidSpec("order must be >= 1".into()));
        }
        if !(self.fs > 0.0) {
            return Err(DspError::InvalidSpec("fs must be > 0".into()));
        }
        Ok(())
    }
}

/// One second-order section, direct form II transposed. `a[0] == 1`.
#[derive(Clone, Copy, Debug)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[1] + self.a[2])
    }
}

/// Cascade of second-order sections plus the sampling rate it was designed
/// for.
#[derive(Clone, Debug)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
    pub fs: f64,
}

/// Designs a Butterworth bandpass as second-order sections via the bilinear
/// transform with frequency prewarping.
pub fn design_bandpass(spec: &BandpassSpec) -> Result<SosFilter, DspError> {
    spec.validate()?;
    let n = spec.order;
    let fs2 = 2.0 * spec.fs;

    // Prewarped analog edge frequencies.
    let w1 = fs2 * (std::f64::consts::PI * spec.low_hz / spec.fs).tan();
    let w2 = fs2 * (std::f64::consts::PI * spec.high_hz / spec.fs).tan();
    let w0 = (w1 * w2).sqrt();
    let bw = w2 - w1;

    // Analog prototype poles on the unit circle, left half-plane.
    let proto: Vec<Complex64> = (0..n)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            Complex64::new(theta.cos(), theta.sin())
        })
        .collect();

    // Lowpass -> bandpass: each prototype pole yields two bandpass poles.
    let mut analog_poles = Vec::with_capacity(2 * n);
    for p in proto {
        let ps = p * (bw / 2.0);
        let disc = (ps * ps - Complex64::new(w0 * w0, 0.0)).sqrt();
        analog_poles.push(ps + disc);
        analog_poles.push(ps - disc);
    }

    // Bilinear transform. Analog gain bw^n; the N zeros at s=0 map to z=+1
    // and the N zeros at infinity map to z=-1.
    let mut digital_poles = Vec::with_capacity(2 * n);
    let mut gain_num = Complex64::new(1.0, 0.0);
    let mut gain_den = Complex64::new(1.0, 0.0);
    for &s in &analog_poles {
        digital_poles.push((Complex64::new(fs2, 0.0) + s) / (Complex64::new(fs2, 0.0) - s));
        gain_den *= Complex64::new(fs2, 0.0) - s;
    }
    for _ in 0..n {
        gain_num *= Complex64::new(fs2, 0.0); // factor (fs2 - 0) per s-plane zero
    }
    let k = bw.powi(n as i32) * (gain_num / gain_den).re;

    // Pair conjugate (or real) poles into biquads; numerator per section is
    // (z-1)(z+1) = z^2 - 1.
    let mut used = vec![false; digital_poles.len()];
    let mut sections = Vec::with_capacity(n);
    for i in 0..digital_poles.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let p = digital_poles[i];
        let mate = if p.im.abs() > 1e-10 * p.norm().max(1.0) {
            let target = p.conj();
            let mut best = None;
            let mut best_d = f64::INFINITY;
            for (j, q) in digital_poles.iter().enumerate() {
                if !used[j] {
                    let d = (q - target).norm();
                    if d < best_d {
                        best_d = d;
                        best = Some(j);
                    }
                }
            }
            best.expect("conjugate pole present")
        } else {
            let mut best = None;
            let mut best_d = f64::INFINITY;
            for (j, q) in digital_poles.iter().enumerate() {
                if !used[j] && q.im.abs() <= 1e-10 * q.norm().max(1.0) {
                    let d = (q.re - p.re).abs();
                    if d < best_d {
                        best_d = d;
                        best = Some(j);
                    }
                }
            }
            best.expect("real poles come in pairs for a bandpass")
        };
        used[mate] = true;
        let q = digital_poles[mate];
        let a1 = -(p + q).re;
        let a2 = (p * q).re;
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, a1, a2],
        });
    }
    // All gain on the first section.
    for b in sections[0].b.iter_mut() {
        *b *= k;
    }

    let filt = SosFilter {
        sections,
        fs: spec.fs,
    };
    if !filt
        .sections
        .iter()
        .all(|s| s.a.iter().chain(s.b.iter()).all(|c| c.is_finite()))
    {
        return Err(DspError::InvalidSpec(
            "design produced non-finite coefficients".into(),
        ));
    }
    Ok(filt)
}

impl SosFilter {
    /// Magnitude response |H(e^{j2πf/fs})| of a single forward pass.
    pub fn magnitude_at(&self, f_hz: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f_hz / self.fs;
        let z1 = Complex64::new(w.cos(), -w.sin()); // z^-1
        let z2 = z1 * z1;
        let mut h = Complex64::new(1.0, 0.0);
        for s in &self.sections {
            let num = Complex64::new(s.b[0], 0.0) + z1 * s.b[1] + z2 * s.b[2];
            let den = Complex64::new(1.0, 0.0) + z1 * s.a[1] + z2 * s.a[2];
            h *= num / den;
        }
        h.norm()
    }

    /// Single-pass cascade filter with steady-state initial conditions
    /// scaled to `zi_scale` (the level the input is assumed to have held
    /// before the first sample).
    fn sosfilt(&self, x: &[f64], zi_scale: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        let mut scale = zi_scale;
        for s in &self.sections {
            let dc = s.dc_gain();
            let mut s1 = (dc - s.b[0]) * scale;
            let mut s2 = (s.b[2] - s.a[2] * dc) * scale;
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b[0] * xin + s1;
                s1 = s.b[1] * xin - s.a[1] * out + s2;
                s2 = s.b[2] * xin - s.a[2] * out;
                *v = out;
            }
            scale *= dc;
        }
        y
    }

    /// Zero-phase application: edge-reflect pad by 3× the cascade length,
    /// filter forward and backward with steady-state initial conditions,
    /// then strip the padding. Output length equals input length.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if x.is_empty() {
            return Vec::new();
        }
        let ntaps = 2 * self.sections.len() + 1;
        let pad = (3 * ntaps).min(x.len() - 1);
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(x[n - 1 - i]);
        }

        let fwd = self.sosfilt(&ext, ext[0]);
        let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
        rev = self.sosfilt(&rev, rev[0]);
        rev.reverse();
        rev[pad..pad + n].to_vec()
    }
}

/// Convenience wrapper matching the pipeline vocabulary.
pub fn apply_bandpass(filter: &SosFilter, signal: &[f64]) -> Vec<f64> {
    filter.apply(signal)
}

/// Standardizes each lead to zero mean and unit population standard
/// deviation. Constant leads map to all-zeros via a σ-clamp at 1e-8.
pub fn zscore_per_lead(leads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    leads
        .iter()
        .map(|lead| {
            if lead.is_empty() {
                return Vec::new();
            }
            let n = lead.len() as f64;
            let mean = lead.iter().sum::<f64>() / n;
            let var = lead.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sigma = var.sqrt().max(1e-8);
            lead.iter().map(|v| (v - mean) / sigma).collect()
        })
        .collect()
}

/// Window mode: random offset for training-time augmentation, center crop
/// for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WindowMode {
    TrainRandomOffset,
    EvalCenter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowSpec {
    pub length_samples: usize,
    pub mode: WindowMode,
}

impl WindowSpec {
    pub fn eval(length_samples: usize) -> Self {
        WindowSpec {
            length_samples,
            mode: WindowMode::EvalCenter,
        }
    }
    pub fn train(length_samples: usize) -> Self {
        WindowSpec {
            length_samples,
            mode: WindowMode::TrainRandomOffset,
        }
    }
}

/// Crops or zero-pads every lead to exactly `spec.length_samples`.
///
/// Shorter inputs keep their prefix and gain trailing zeros. Longer inputs
/// are cropped at ⌊(T−L)/2⌋ for [`WindowMode::EvalCenter`] or at a uniform
/// start in `[0, T−L]` for [`WindowMode::TrainRandomOffset`].
pub fn window(leads: &[Vec<f64>], spec: &WindowSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    assert!(spec.length_samples >= 1, "window length must be >= 1");
    let l = spec.length_samples;
    let t = leads.first().map_or(0, Vec::len);
    let start = if t > l {
        match spec.mode {
            WindowMode::EvalCenter => (t - l) / 2,
            WindowMode::TrainRandomOffset => rng.random_range(0..=(t - l)),
        }
    } else {
        0
    };
    leads
        .iter()
        .map(|lead| {
            let mut out = Vec::with_capacity(l);
            if lead.len() >= l {
                out.extend_from_slice(&lead[start..start + l]);
            } else {
                out.extend_from_slice(lead);
                out.resize(l, 0.0);
            }
            out
        })
        .collect()
}

/// Filter + z-score stages of preprocessing, without windowing. The result
/// is window-invariant, so training loops cache it and crop per epoch.
///
/// Rejects records whose sampling rate differs from the filter design rate;
/// resampling is out of scope.
pub fn filter_zscore(record: &EcgRecord, filter: &SosFilter) -> Result<Vec<Vec<f64>>, DspError> {
    if (record.fs - filter.fs).abs() > 1e-9 {
        return Err(DspError::SampleRateMismatch {
            id: record.id.clone(),
            expected: filter.fs,
            got: record.fs,
        });
    }
    let filtered: Vec<Vec<f64>> = record
        .leads
        .iter()
        .map(|lead| {
            let as64: Vec<f64> = lead.iter().map(|&v| v as f64).collect();
            filter.apply(&as64)
        })
        .collect();
    Ok(zscore_per_lead(&filtered))
}

/// Full preprocessing of one record: filter → z-score → window.
pub fn preprocess(
    record: &EcgRecord,
    filter: &SosFilter,
    winspec: &WindowSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f32>>, DspError> {
    let normalized = filter_zscore(record, filter)?;
    let windowed = window(&normalized, winspec, rng);
    Ok(windowed
        .into_iter()
        .map(|lead| lead.into_iter().map(|v| v as f32).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ArrhythmiaClass;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn default_filter() -> SosFilter {
        design_bandpass(&BandpassSpec::default()).unwrap()
    }

    fn db(x: f64) -> f64 {
        20.0 * x.log10()
    }

    /// Power of `x` in the band [f_lo, f_hi], via DFT bins.
    fn band_power(x: &[f64], fs: f64, f_lo: f64, f_hi: f64) -> f64 {
        let n = x.len();
        let mut power = 0.0;
        let k_lo = (f_lo * n as f64 / fs).floor() as usize;
        let k_hi = ((f_hi * n as f64 / fs).ceil() as usize).min(n / 2);
        for k in k_lo..=k_hi {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            power += re * re + im * im;
        }
        power
    }

    #[test]
    fn design_hits_minus_3db_at_both_edges() {
        let f = default_filter();
        assert_eq!(f.sections.len(), 2, "order-2 prototype gives 2 biquads");
        for edge in [0.5, 45.0] {
            let g = db(f.magnitude_at(edge));
            assert!((g + 3.0103).abs() < 0.5, "edge {edge} Hz gain {g} dB");
        }
    }

    #[test]
    fn design_passband_center_is_unity() {
        let f = default_filter();
        let center = (0.5f64 * 45.0).sqrt();
        let g = db(f.magnitude_at(center));
        assert!(g.abs() < 0.1, "center gain {g} dB");
    }

    #[test]
    fn design_rejects_cutoff_above_nyquist() {
        let spec = BandpassSpec {
            high_hz: 300.0,
            ..BandpassSpec::default()
        };
        match design_bandpass(&spec) {
            Err(DspError::CutoffAboveNyquist { .. }) => {}
            other => panic!("expected CutoffAboveNyquist, got {other:?}"),
        }
    }

    #[test]
    fn design_handles_odd_order() {
        let spec = BandpassSpec {
            order: 3,
            ..BandpassSpec::default()
        };
        let f = design_bandpass(&spec).unwrap();
        assert_eq!(f.sections.len(), 3);
        for edge in [0.5, 45.0] {
            let g = db(f.magnitude_at(edge));
            assert!((g + 3.0103).abs() < 0.5, "edge {edge} Hz gain {g} dB");
        }
        let center = (0.5f64 * 45.0).sqrt();
        assert!(db(f.magnitude_at(center)).abs() < 0.1);
    }

    #[test]
    fn constant_signal_is_rejected() {
        let f = default_filter();
        let x = vec![7.0; 5000];
        let y = f.apply(&x);
        let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 1e-3, "DC residue {peak}");
    }

    #[test]
    fn passband_sine_amplitude_preserved() {
        let f = default_filter();
        let fs = 500.0;
        let n = 5000;
        let x: Vec<f64> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * 10.0 * t as f64 / fs).sin())
            .collect();
        let y = f.apply(&x);
        let mid = &y[n / 5..n - n / 5];
        let amp = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((amp - 1.0).abs() < 0.02, "steady-state amplitude {amp}");
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let f = default_filter();
        assert!(f.apply(&[]).is_empty());
    }

    #[test]
    fn zero_phase_no_lag() {
        let f = default_filter();
        let fs = 500.0;
        let n = 4000;
        // band-limited input: sum of passband sines
        let x: Vec<f64> = (0..n)
            .map(|t| {
                let tt = t as f64 / fs;
                (2.0 * std::f64::consts::PI * 5.0 * tt).sin()
                    + 0.5 * (2.0 * std::f64::consts::PI * 12.0 * tt).sin()
            })
            .collect();
        let y = f.apply(&x);
        let mut best_lag = 0i64;
        let mut best = f64::NEG_INFINITY;
        for lag in -20i64..=20 {
            let mut c = 0.0;
            for i in 0..n as i64 {
                let j = i + lag;
                if j >= 0 && j < n as i64 {
                    c += x[i as usize] * y[j as usize];
                }
            }
            if c > best {
                best = c;
                best_lag = lag;
            }
        }
        assert_eq!(best_lag, 0, "cross-correlation peak must be at lag 0");
    }

    #[test]
    fn zscore_closed_form() {
        let out = zscore_per_lead(&[vec![1.0, 2.0, 3.0]]);
        let expected = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (o, e) in out[0].iter().zip(expected) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_constant_lead_maps_to_zeros() {
        let out = zscore_per_lead(&[vec![5.0; 7]]);
        assert!(out[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zscore_idempotent_on_standardized_input() {
        let lead = vec![1.0, -1.0, 2.0, -2.0, 0.5];
        let once = zscore_per_lead(&[lead]);
        let twice = zscore_per_lead(&once);
        for (a, b) in once[0].iter().zip(&twice[0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn window_pads_short_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = window(
            &[vec![1.0, 2.0, 3.0, 4.0, 5.0]],
            &WindowSpec::eval(8),
            &mut rng,
        );
        assert_eq!(out[0], vec![1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn window_center_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lead: Vec<f64> = (1..=12).map(f64::from).collect();
        let out = window(&[lead], &WindowSpec::eval(8), &mut rng);
        // start = (12-8)/2 = 2 -> samples at indices 2..9
        assert_eq!(out[0], (3..=10).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn window_random_offset_in_range_and_deterministic() {
        let lead: Vec<f64> = (0..12).map(f64::from).collect();
        let spec = WindowSpec::train(8);
        let mut starts = std::collections::HashSet::new();
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = window(&[lead.clone()], &spec, &mut rng);
            let start = out[0][0] as usize;
            assert!(start <= 4);
            starts.insert(start);
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(window(&[lead.clone()], &spec, &mut rng2), out);
        }
        assert!(starts.len() > 1, "offsets should vary across seeds");
    }

    fn record_with_wander() -> EcgRecord {
        let fs = 500.0;
        let n = 5000;
        let leads: Vec<Vec<f32>> = (0..12)
            .map(|li| {
                (0..n)
                    .map(|t| {
                        let tt = t as f64 / fs;
                        let qrs = (2.0 * std::f64::consts::PI * 9.0 * tt).sin();
                        let wander = 0.5 * (2.0 * std::f64::consts::PI * 0.2 * tt).sin();
                        ((qrs * (1.0 + 0.05 * li as f64)) + wander) as f32
                    })
                    .collect()
            })
            .collect();
        EcgRecord {
            id: "wander".into(),
            domain: "test".into(),
            fs,
            leads,
            label: ArrhythmiaClass::N,
        }
    }

    #[test]
    fn preprocess_rejects_baseline_wander() {
        let rec = record_with_wander();
        let filter = default_filter();
        let raw: Vec<f64> = rec.leads[0].iter().map(|&v| v as f64).collect();
        let filtered = filter.apply(&raw);
        let before = band_power(&raw, rec.fs, 0.0, 0.4);
        let after = band_power(&filtered, rec.fs, 0.0, 0.4);
        let drop_db = 10.0 * (before / after).log10();
        assert!(drop_db >= 20.0, "wander only dropped {drop_db:.1} dB");
    }

    #[test]
    fn preprocess_shape_and_determinism() {
        let rec = record_with_wander();
        let filter = default_filter();
        let spec = WindowSpec::train(4096);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = preprocess(&rec, &filter, &spec, &mut r1).unwrap();
        let b = preprocess(&rec, &filter, &spec, &mut r2).unwrap();
        assert_eq!(a.len(), 12);
        assert!(a.iter().all(|l| l.len() == 4096));
        assert_eq!(a, b, "same record and seed must give identical output");
    }

    #[test]
    fn preprocess_rejects_wrong_sampling_rate() {
        let mut rec = record_with_wander();
        rec.fs = 360.0;
        let filter = default_filter();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match preprocess(&rec, &filter, &WindowSpec::eval(100), &mut rng) {
            Err(DspError::SampleRateMismatch { .. }) => {}
            other => panic!("expected SampleRateMismatch, got {other:?}"),
        }
    }

    #[test]
    fn filter_linearity() {
        let f = default_filter();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..800).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..800).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (2.5, -0.75);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(&u, &v)| a * u + b * v).collect();
        let lhs = f.apply(&combo);
        let fx = f.apply(&x);
        let fy = f.apply(&y);
        for i in 0..800 {
            let rhs = a * fx[i] + b * fy[i];
            let scale = rhs.abs().max(1.0);
            assert!((lhs[i] - rhs).abs() / scale < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn zscore_scale_invariance(scale in 1e-3f64..1e3, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lead: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
            let scaled: Vec<f64> = lead.iter().map(|v| v * scale).collect();
            let a = zscore_per_lead(&[lead]);
            let b = zscore_per_lead(&[scaled]);
            for (x, y) in a[0].iter().zip(&b[0]) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn window_never_changes_lead_count(n_leads in 1usize..14, t in 1usize..64, l in 1usize..64) {
            let leads: Vec<Vec<f64>> = (0..n_leads).map(|i| vec![i as f64; t]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = window(&leads, &WindowSpec::train(l), &mut rng);
            prop_assert_eq!(out.len(), n_leads);
            prop_assert!(out.iter().all(|lead| lead.len() == l));
        }
    }
}
