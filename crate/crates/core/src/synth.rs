//! Deterministic synthetic 12-lead ECG generator.
//!
//! Each beat is a sum of five Gaussian bumps (P, Q, R, S, T) projected onto
//! the 12 leads; class rules bend the morphology (P-wave presence, PR
//! interval, QRS width, ectopic beats, RR-interval statistics) and domain
//! profiles add acquisition character (baseline wander, noise level, gain,
//! per-lead gain jitter). The point is a solvable, measurably shiftable
//! desk-scale task, not physiological fidelity.
//!
//! [`measure`] recovers the class-defining margins (RR variability, QRS
//! width, P amplitude, PR interval, V1/V6 polarity) straight from the
//! rendered signal, so tests can verify that generated records carry their
//! class evidence.

use crate::dataio::{
    save_manifest, write_signal, ArrhythmiaClass, DatasetManifest, EcgRecord, ManifestRecord,
};
use crate::util;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid class rule: {0}")]
    InvalidRule(String),
    #[error("invalid domain profile: {0}")]
    InvalidProfile(String),
    #[error("class proportions sum to {0}, expected 1")]
    BadProportions(f64),
    #[error("duration {duration_s} s too short, need at least 2 x RR mean ({rr_mean_s} s)")]
    TooShort { duration_s: f64, rr_mean_s: f64 },
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
}

/// One Gaussian wave component, relative to the R peak at t = 0.
#[derive(Clone, Copy, Debug)]
pub struct WaveBump {
    pub center_s: f64,
    pub width_s: f64,
    pub amplitude_mv: f64,
}

/// Per-beat morphology: five bumps plus a per-lead projection vector.
#[derive(Clone, Debug)]
pub struct BeatTemplate {
    pub p: WaveBump,
    pub q: WaveBump,
    pub r: WaveBump,
    pub s: WaveBump,
    pub t: WaveBump,
    pub lead_projection: [f64; 12],
}

impl BeatTemplate {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, b) in [
            ("P", &self.p),
            ("Q", &self.q),
            ("R", &self.r),
            ("S", &self.s),
            ("T", &self.t),
        ] {
            if !(b.width_s > 0.0) {
                return Err(SynthError::InvalidRule(format!("{name} width must be > 0")));
            }
        }
        if !(self.r.amplitude_mv > 0.0) {
            return Err(SynthError::InvalidRule("R amplitude must be > 0".into()));
        }
        Ok(())
    }
}

/// Lead order: I, II, III, aVR, aVL, aVF, V1..V6.
pub const LEAD_V1: usize = 6;
pub const LEAD_V6: usize = 11;

fn normal_projection() -> [f64; 12] {
    [0.6, 1.0, 0.5, -0.8, 0.3, 0.7, -0.35, -0.15, 0.3, 0.7, 0.9, 0.8]
}

fn sinus_template(p_amp: f64, pr_s: f64, qrs_width_mult: f64, projection: [f64; 12]) -> BeatTemplate {
    BeatTemplate {
        p: WaveBump {
            center_s: -pr_s,
            width_s: 0.025,
            amplitude_mv: p_amp,
        },
        q: WaveBump {
            center_s: -0.035 * qrs_width_mult,
            width_s: 0.010 * qrs_width_mult,
            amplitude_mv: -0.10,
        },
        r: WaveBump {
            center_s: 0.0,
            width_s: 0.025 * qrs_width_mult,
            amplitude_mv: 1.2,
        },
        s: WaveBump {
            center_s: 0.035 * qrs_width_mult,
            width_s: 0.012 * qrs_width_mult,
            amplitude_mv: -0.25,
        },
        t: WaveBump {
            center_s: 0.30,
            width_s: 0.06,
            amplitude_mv: 0.35,
        },
        lead_projection: projection,
    }
}

/// Ectopic-beat shape and timing relative to the underlying rhythm.
#[derive(Clone, Debug)]
pub struct EctopicRule {
    pub template: BeatTemplate,
    /// Fraction by which the ectopic beat arrives early (0.25 = 25% early).
    pub early_fraction: f64,
    /// Full compensatory pause after the ectopic (ventricular pattern).
    pub compensatory: bool,
    /// Probability per eligible beat; at least one ectopic is always placed.
    pub rate: f64,
}

/// Class recipe: rhythm statistics plus morphology switches.
#[derive(Clone, Debug)]
pub struct ClassRule {
    pub class: ArrhythmiaClass,
    pub rr_mean_s: f64,
    pub rr_cov: f64,
    pub p_wave: bool,
    pub pr_interval_s: f64,
    pub qrs_width_mult: f64,
    pub ectopic: Option<EctopicRule>,
}

impl ClassRule {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.rr_mean_s > 0.3) {
            return Err(SynthError::InvalidRule("RR mean must be > 0.3 s".into()));
        }
        if self.rr_cov < 0.0 {
            return Err(SynthError::InvalidRule("RR CoV must be >= 0".into()));
        }
        self.template().validate()?;
        if let Some(e) = &self.ectopic {
            e.template.validate()?;
            if !(0.0..1.0).contains(&e.early_fraction) || !(0.0..=1.0).contains(&e.rate) {
                return Err(SynthError::InvalidRule("bad ectopic timing".into()));
            }
        }
        Ok(())
    }

    /// The regular (non-ectopic) beat template this rule renders.
    pub fn template(&self) -> BeatTemplate {
        let p_amp = if self.p_wave { 0.18 } else { 0.0 };
        let projection = match self.class {
            ArrhythmiaClass::LBBB => {
                let mut pr = normal_projection();
                pr[LEAD_V1] = -0.9;
                pr[LEAD_V6] = 0.9;
                pr
            }
            ArrhythmiaClass::RBBB => {
                let mut pr = normal_projection();
                pr[LEAD_V1] = 0.9;
                pr[LEAD_V6] = -0.6;
                pr
            }
            _ => normal_projection(),
        };
        sinus_template(p_amp, self.pr_interval_s, self.qrs_width_mult, projection)
    }
}

/// Built-in rule for each class; the margins line up with
/// [`measure::classify_by_margins`].
pub fn rule_for(class: ArrhythmiaClass) -> ClassRule {
    match class {
        ArrhythmiaClass::N => ClassRule {
            class,
            rr_mean_s: 0.80,
            rr_cov: 0.04,
            p_wave: true,
            pr_interval_s: 0.16,
            qrs_width_mult: 1.0,
            ectopic: None,
        },
        ArrhythmiaClass::AF => ClassRule {
            class,
            rr_mean_s: 0.78,
            rr_cov: 0.34,
            p_wave: false,
            pr_interval_s: 0.16,
            qrs_width_mult: 1.0,
            ectopic: None,
        },
        ArrhythmiaClass::PAC => ClassRule {
            class,
            rr_mean_s: 0.80,
            rr_cov: 0.04,
            p_wave: true,
            pr_interval_s: 0.16,
            qrs_width_mult: 1.0,
            ectopic: Some(EctopicRule {
                template: sinus_template(0.15, 0.14, 1.0, normal_projection()),
                early_fraction: 0.35,
                compensatory: false,
                rate: 0.22,
            }),
        },
        ArrhythmiaClass::PVC => ClassRule {
            class,
            rr_mean_s: 0.80,
            rr_cov: 0.04,
            p_wave: true,
            pr_interval_s: 0.16,
            qrs_width_mult: 1.0,
            ectopic: Some(EctopicRule {
                template: {
                    let mut t = sinus_template(0.0, 0.16, 2.4, normal_projection());
                    t.r.amplitude_mv = 1.5;
                    t.s.amplitude_mv = -0.5;
                    t
                },
                early_fraction: 0.25,
                compensatory: true,
                rate: 0.22,
            }),
        },
        ArrhythmiaClass::LBBB => ClassRule {
            class,
            rr_mean_s: 0.82,
            rr_cov: 0.04,
            p_wave: true,
            pr_interval_s: 0.16,
            qrs_width_mult: 2.1,
            ectopic: None,
        },
        ArrhythmiaClass::RBBB => ClassRule {
            class,
            rr_mean_s: 0.82,
            rr_cov: 0.04,
            p_wave: true,
            pr_interval_s: 0.16,
            qrs_width_mult: 2.1,
            ectopic: None,
        },
        ArrhythmiaClass::IAVB => ClassRule {
            class,
            rr_mean_s: 0.85,
            rr_cov: 0.04,
            p_wave: true,
            pr_interval_s: 0.28,
            qrs_width_mult: 1.0,
            ectopic: None,
        },
    }
}

/// Acquisition character of one synthetic site.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DomainProfile {
    pub name: String,
    pub wander_amp_mv: f64,
    pub wander_freq_hz: f64,
    pub noise_std_mv: f64,
    pub gain: f64,
    pub lead_gain_jitter: f64,
}

impl DomainProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.gain > 0.0) {
            return Err(SynthError::InvalidProfile("gain must be > 0".into()));
        }
        if self.noise_std_mv < 0.0 || self.wander_amp_mv < 0.0 || self.lead_gain_jitter < 0.0 {
            return Err(SynthError::InvalidProfile(
                "noise, wander, jitter must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Built-in site profiles. Baseline wander sits inside the pipeline's
/// passband (the 0.5 Hz highpass does not remove it), with amplitude and
/// noise growing site by site, so the last site is a genuine acquisition
/// shift for held-out-domain experiments.
pub fn default_profiles(n: usize) -> Vec<DomainProfile> {
    let base = [
        ("site_a", 0.10, 0.70, 0.015, 1.00, 0.03),
        ("site_b", 0.30, 0.90, 0.050, 1.20, 0.06),
        ("site_c", 0.55, 1.10, 0.085, 0.85, 0.08),
        ("site_d", 0.90, 0.80, 0.120, 1.40, 0.10),
    ];
    (0..n)
        .map(|i| {
            let (name, wa, wf, ns, g, j) = base[i % base.len()];
            let rep = i / base.len();
            DomainProfile {
                name: if rep == 0 {
                    name.to_string()
                } else {
                    format!("{name}{rep}")
                },
                wander_amp_mv: wa * (1.0 + 0.2 * rep as f64),
                wander_freq_hz: wf,
                noise_std_mv: ns * (1.0 + 0.3 * rep as f64),
                gain: g,
                lead_gain_jitter: j,
            }
        })
        .collect()
}

/// Default class proportions: strong normal-class majority with a long tail,
/// so accuracy and macro-F1 visibly diverge on collapsed models.
pub fn default_class_mix() -> Vec<(ArrhythmiaClass, f64)> {
    vec![
        (ArrhythmiaClass::N, 0.68),
        (ArrhythmiaClass::AF, 0.12),
        (ArrhythmiaClass::PAC, 0.05),
        (ArrhythmiaClass::PVC, 0.05),
        (ArrhythmiaClass::LBBB, 0.04),
        (ArrhythmiaClass::RBBB, 0.03),
        (ArrhythmiaClass::IAVB, 0.03),
    ]
}

struct Beat {
    t_r: f64,
    ectopic: bool,
}

/// Renders one record. Identical `(rule, profile, duration, fs, seed)` give
/// bit-identical output.
pub fn generate_record(
    id: &str,
    rule: &ClassRule,
    profile: &DomainProfile,
    duration_s: f64,
    fs: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EcgRecord, SynthError> {
    rule.validate()?;
    profile.validate()?;
    if duration_s < 2.0 * rule.rr_mean_s {
        return Err(SynthError::TooShort {
            duration_s,
            rr_mean_s: rule.rr_mean_s,
        });
    }

    let n = (duration_s * fs).round() as usize;
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");

    // 1. rhythm schedule
    let start = 0.25 + rng.random_range(0.0..rule.rr_mean_s * 0.5);
    let mut grid = vec![start];
    loop {
        let z: f64 = gauss.sample(rng);
        let mult = (rule.rr_cov * z).exp().clamp(0.55, 1.9);
        let next = grid.last().unwrap() + rule.rr_mean_s * mult;
        if next > duration_s - 0.35 {
            break;
        }
        grid.push(next);
    }

    // 2. ectopic placement: sampled with a cap of one third of the beats,
    //    and at least one forced so the class evidence is always present
    let mut beats: Vec<Beat> = grid.iter().map(|&t_r| Beat { t_r, ectopic: false }).collect();
    if let Some(e) = &rule.ectopic {
        let eligible: Vec<usize> = (2..beats.len().saturating_sub(1)).collect();
        let cap = (beats.len() / 3).max(1);
        let mut chosen = Vec::new();
        for &i in &eligible {
            if chosen.len() >= cap {
                break;
            }
            if rng.random_range(0.0..1.0) < e.rate {
                chosen.push(i);
            }
        }
        if chosen.is_empty() && !eligible.is_empty() {
            chosen.push(eligible[eligible.len() / 2]);
        }
        for &i in &chosen {
            beats[i].ectopic = true;
            let rr_prev = beats[i].t_r - beats[i - 1].t_r;
            let delta = rr_prev * e.early_fraction;
            beats[i].t_r -= delta;
            if !e.compensatory {
                // atrial pattern: rhythm restarts from the early beat
                for b in beats.iter_mut().skip(i + 1) {
                    b.t_r -= delta;
                }
            }
        }
        beats.retain(|b| b.t_r > 0.1 && b.t_r < duration_s - 0.35);
    }

    // 3. morphology rendering
    let base_template = rule.template();
    let ect_template = rule.ectopic.as_ref().map(|e| e.template.clone());
    let mut leads = vec![vec![0.0f64; n]; 12];
    for beat in &beats {
        let template = if beat.ectopic {
            ect_template.as_ref().expect("ectopic rule present")
        } else {
            &base_template
        };
        for bump in [&template.p, &template.q, &template.r, &template.s, &template.t] {
            if bump.amplitude_mv == 0.0 {
                continue;
            }
            let c = beat.t_r + bump.center_s;
            let half = 4.0 * bump.width_s;
            let i0 = (((c - half) * fs).floor().max(0.0)) as usize;
            let i1 = ((((c + half) * fs).ceil()) as usize).min(n.saturating_sub(1));
            for i in i0..=i1 {
                let t = i as f64 / fs;
                let d = (t - c) / bump.width_s;
                let v = bump.amplitude_mv * (-0.5 * d * d).exp();
                for (li, lead) in leads.iter_mut().enumerate() {
                    lead[i] += v * template.lead_projection[li];
                }
            }
        }
    }

    // 4. acquisition character: wander, per-lead jitter, noise, global gain
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let jitters: Vec<f64> = (0..12)
        .map(|_| (1.0 + profile.lead_gain_jitter * gauss.sample(rng)).max(0.1))
        .collect();
    for (li, lead) in leads.iter_mut().enumerate() {
        for (i, v) in lead.iter_mut().enumerate() {
            let t = i as f64 / fs;
            let wander =
                profile.wander_amp_mv * (std::f64::consts::TAU * profile.wander_freq_hz * t + phase).sin();
            let noise = profile.noise_std_mv * gauss.sample(rng);
            *v = profile.gain * (jitters[li] * *v + wander + noise);
        }
    }

    let record = EcgRecord {
        id: id.to_string(),
        domain: profile.name.clone(),
        fs,
        leads: leads
            .into_iter()
            .map(|l| l.into_iter().map(|v| v as f32).collect())
            .collect(),
        label: rule.class,
    };
    record.validate()?;
    Ok(record)
}

/// Rounds `n * proportions` to integer per-class counts by largest
/// remainder; ties break toward the lower class index.
pub fn class_counts(mix: &[(ArrhythmiaClass, f64)], n: usize) -> Result<Vec<(ArrhythmiaClass, usize)>, SynthError> {
    let total: f64 = mix.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SynthError::BadProportions(total));
    }
    let mut counts: Vec<(ArrhythmiaClass, usize, f64)> = mix
        .iter()
        .map(|&(c, p)| {
            let exact = p * n as f64;
            (c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = counts.iter().map(|(_, k, _)| k).sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        counts[b]
            .2
            .partial_cmp(&counts[a].2)
            .unwrap()
            .then(counts[a].0.index().cmp(&counts[b].0.index()))
    });
    for i in 0..(n - assigned) {
        counts[order[i % order.len()]].1 += 1;
    }
    Ok(counts.into_iter().map(|(c, k, _)| (c, k)).collect())
}

/// Generates `n_per_domain` records per domain under the class mix, writes
/// them as ECG1 files under `out_dir/<domain>/`, and returns the manifest
/// (also written to `out_dir/manifest.json`).
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    domains: &[DomainProfile],
    class_mix: &[(ArrhythmiaClass, f64)],
    n_per_domain: usize,
    fs: f64,
    duration_s: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    let counts = class_counts(class_mix, n_per_domain)?;
    let mut records = Vec::with_capacity(domains.len() * n_per_domain);
    for (di, profile) in domains.iter().enumerate() {
        profile.validate()?;
        let dir = out_dir.join(&profile.name);
        std::fs::create_dir_all(&dir).map_err(|source| crate::dataio::DataError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut rec_idx = 0u64;
        for &(class, k) in &counts {
            let rule = rule_for(class);
            for _ in 0..k {
                let id = format!("{}_{}_{:04}", profile.name, class.name(), rec_idx);
                let mut rng = util::rng_from(&[seed, di as u64, rec_idx]);
                let record = generate_record(&id, &rule, profile, duration_s, fs, &mut rng)?;
                let rel = format!("{}/{}.ecg1", profile.name, id);
                write_signal(&out_dir.join(&rel), &record.leads, fs.round() as u32)?;
                records.push(ManifestRecord {
                    id,
                    path: rel,
                    domain: profile.name.clone(),
                    label: class.name().to_string(),
                    fs,
                    n_leads: 12,
                    n_samples: record.n_samples(),
                });
                rec_idx += 1;
            }
        }
    }
    let manifest = DatasetManifest::new(records);
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub mod measure {
    //! Margin measurements recovered from rendered signals, used to verify
    //! that generated records carry their class evidence.

    use super::*;
    use crate::dsp::{design_bandpass, BandpassSpec};

    /// Features measurable from one record.
    #[derive(Clone, Debug)]
    pub struct BeatFeatures {
        pub n_beats: usize,
        pub rr_cov: f64,
        pub rr_median_s: f64,
        /// Smallest RR over median RR; early beats push this below 1.
        pub min_rr_ratio: f64,
        pub qrs_width_median_s: f64,
        /// Fraction of beats wider than the wide-QRS threshold.
        pub wide_fraction: f64,
        /// Median P amplitude relative to the R amplitude, over beats with a
        /// clean pre-beat window.
        pub p_rel: f64,
        /// Median P-to-R distance in seconds over the same beats.
        pub pr_s: f64,
        /// Mean V1 and V6 values at wide-beat R times (sign carries the
        /// bundle-branch laterality).
        pub v1_at_r: f64,
        pub v6_at_r: f64,
    }

    const WIDE_QRS_S: f64 = 0.054;
    const P_REL_MIN: f64 = 0.13;
    const EARLY_RR_RATIO: f64 = 0.80;
    const PR_LONG_S: f64 = 0.215;

    fn moving_average(x: &[f64], w: usize) -> Vec<f64> {
        if w <= 1 || x.is_empty() {
            return x.to_vec();
        }
        let mut out = vec![0.0; x.len()];
        let mut acc = 0.0;
        let half = w / 2;
        for i in 0..x.len() + half {
            if i < x.len() {
                acc += x[i];
            }
            if i >= w {
                acc -= x[i - w];
            }
            if i >= half {
                let idx = i - half;
                let lo = i.saturating_sub(w - 1);
                let hi = i.min(x.len() - 1);
                out[idx] = acc / (hi - lo + 1) as f64;
            }
        }
        out
    }

    fn median(xs: &mut [f64]) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if xs.is_empty() {
            return 0.0;
        }
        let m = xs.len() / 2;
        if xs.len() % 2 == 1 {
            xs[m]
        } else {
            0.5 * (xs[m - 1] + xs[m])
        }
    }

    /// Subtracts a 0.16 s moving-average baseline: wander near 1 Hz is
    /// almost fully removed while narrow waves keep most of their height.
    fn detrend(x: &[f64], fs: f64) -> Vec<f64> {
        let base = moving_average(x, (0.16 * fs).round() as usize);
        x.iter().zip(&base).map(|(v, b)| v - b).collect()
    }

    /// Extracts beat features, or `None` if fewer than 3 beats can be found.
    ///
    /// Leads are bandpassed with the standard pipeline band, then locally
    /// detrended so that in-band baseline wander (which survives the 0.5 Hz
    /// highpass) cannot mask the margins.
    pub fn measure_features(record: &EcgRecord) -> Option<BeatFeatures> {
        let fs = record.fs;
        let filter = design_bandpass(&BandpassSpec {
            fs,
            ..BandpassSpec::default()
        })
        .ok()?;
        let lead2: Vec<f64> = record.leads[1].iter().map(|&v| v as f64).collect();
        let d2 = detrend(&filter.apply(&lead2), fs);
        let qrs_smooth = moving_average(&d2, (0.015 * fs).round() as usize);
        let p_smooth = moving_average(&d2, (0.05 * fs).round() as usize);
        let v1: Vec<f64> = record.leads[LEAD_V1].iter().map(|&v| v as f64).collect();
        let v6: Vec<f64> = record.leads[LEAD_V6].iter().map(|&v| v as f64).collect();
        let v1f = moving_average(&detrend(&filter.apply(&v1), fs), (0.015 * fs).round() as usize);
        let v6f = moving_average(&detrend(&filter.apply(&v6), fs), (0.015 * fs).round() as usize);

        // R-peak detection: local maxima above half the global max with a
        // 0.25 s refractory window
        let peak_max = qrs_smooth.iter().fold(0.0f64, |m, &v| m.max(v));
        if peak_max <= 0.0 {
            return None;
        }
        let thresh = 0.5 * peak_max;
        let refractory = (0.25 * fs) as usize;
        let mut peaks: Vec<usize> = Vec::new();
        let mut i = 1;
        while i + 1 < qrs_smooth.len() {
            if qrs_smooth[i] > thresh
                && qrs_smooth[i] >= qrs_smooth[i - 1]
                && qrs_smooth[i] >= qrs_smooth[i + 1]
            {
                // keep the larger of peaks closer than the refractory window
                if let Some(&last) = peaks.last() {
                    if i - last < refractory {
                        if qrs_smooth[i] > qrs_smooth[last] {
                            *peaks.last_mut().unwrap() = i;
                        }
                        i += 1;
                        continue;
                    }
                }
                peaks.push(i);
            }
            i += 1;
        }
        let edge = (0.40 * fs) as usize;
        peaks.retain(|&p| p >= edge && p + edge < qrs_smooth.len());
        if peaks.len() < 3 {
            return None;
        }

        let mut rrs: Vec<f64> = peaks.windows(2).map(|w| (w[1] - w[0]) as f64 / fs).collect();
        let rr_mean = rrs.iter().sum::<f64>() / rrs.len() as f64;
        let rr_var = rrs.iter().map(|r| (r - rr_mean).powi(2)).sum::<f64>() / rrs.len() as f64;
        let rr_cov = rr_var.sqrt() / rr_mean;
        let rr_min = rrs.iter().cloned().fold(f64::INFINITY, f64::min);
        let rr_median = median(&mut rrs);

        // QRS width at half height of the positive lobe
        let mut widths: Vec<f64> = Vec::with_capacity(peaks.len());
        for &p in &peaks {
            let h = qrs_smooth[p];
            let half = 0.5 * h;
            let mut l = p;
            while l > 0 && qrs_smooth[l] > half {
                l -= 1;
            }
            let mut r = p;
            while r + 1 < qrs_smooth.len() && qrs_smooth[r] > half {
                r += 1;
            }
            widths.push((r - l) as f64 / fs);
        }
        let wide: Vec<bool> = widths.iter().map(|&w| w >= WIDE_QRS_S).collect();
        let wide_fraction = wide.iter().filter(|&&w| w).count() as f64 / wide.len() as f64;
        let mut widths_sorted = widths.clone();
        let qrs_width_median = median(&mut widths_sorted);

        // P search on beats with a clean window before them
        let mut p_rels = Vec::new();
        let mut prs = Vec::new();
        for (bi, &p) in peaks.iter().enumerate().skip(1) {
            let rr_prev = (p - peaks[bi - 1]) as f64 / fs;
            if rr_prev < 0.62 {
                continue;
            }
            let lo = ((peaks[bi - 1] as f64 + 0.45 * fs) as usize).max(p.saturating_sub((0.36 * fs) as usize));
            let hi = p.saturating_sub((0.07 * fs) as usize);
            if hi <= lo + 4 {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            let mut best_i = lo;
            for (i, &v) in p_smooth[lo..hi].iter().enumerate() {
                if v > best {
                    best = v;
                    best_i = lo + i;
                }
            }
            // The band-limited beat train rides on a depressed inter-beat
            // baseline, so P height is taken relative to a low quantile of
            // the window rather than to zero.
            let mut sorted: Vec<f64> = p_smooth[lo..hi].to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let baseline = sorted[sorted.len() / 5];
            let r_height = qrs_smooth[p] - baseline;
            if r_height > 0.0 {
                p_rels.push((best - baseline) / r_height);
                prs.push((p - best_i) as f64 / fs);
            }
        }
        let p_rel = median(&mut p_rels);
        let pr_s = median(&mut prs);

        // polarity at R times, using wide beats when present
        let polarity_beats: Vec<usize> = peaks
            .iter()
            .zip(&wide)
            .filter(|(_, &w)| w || wide_fraction == 0.0)
            .map(|(&p, _)| p)
            .collect();
        let v1_at_r = polarity_beats.iter().map(|&p| v1f[p]).sum::<f64>()
            / polarity_beats.len().max(1) as f64;
        let v6_at_r = polarity_beats.iter().map(|&p| v6f[p]).sum::<f64>()
            / polarity_beats.len().max(1) as f64;

        Some(BeatFeatures {
            n_beats: peaks.len(),
            rr_cov,
            rr_median_s: rr_median,
            min_rr_ratio: rr_min / rr_median,
            qrs_width_median_s: qrs_width_median,
            wide_fraction,
            p_rel,
            pr_s,
            v1_at_r,
            v6_at_r,
        })
    }

    /// Threshold decision list over the measured margins.
    pub fn classify_by_margins(f: &BeatFeatures) -> ArrhythmiaClass {
        if f.wide_fraction > 0.5 {
            if f.v1_at_r < f.v6_at_r {
                ArrhythmiaClass::LBBB
            } else {
                ArrhythmiaClass::RBBB
            }
        } else if f.wide_fraction > 0.02 {
            ArrhythmiaClass::PVC
        } else if f.p_rel < P_REL_MIN {
            ArrhythmiaClass::AF
        } else if f.min_rr_ratio < EARLY_RR_RATIO {
            ArrhythmiaClass::PAC
        } else if f.pr_s >= PR_LONG_S {
            ArrhythmiaClass::IAVB
        } else {
            ArrhythmiaClass::N
        }
    }
}
