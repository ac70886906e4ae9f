//! Evaluation: split protocols, the metric suite, resampling statistics,
//! significance testing, and robustness stress tests.
//!
//! Two protocols are supported. The intra-source split stratifies one
//! domain (or the pooled set) into 70/10/20 train/validation/test by class.
//! The leave-one-domain-out split trains on every other domain (90/10
//! train/validation, stratified) and tests zero-shot on the full held-out
//! domain; a leakage guard asserts that no target-domain id ever reaches
//! training.

use crate::dataio::{Checkpoint, DataError, DatasetManifest, ALL_CLASSES};
use crate::dsp::{design_bandpass, window, BandpassSpec, DspError, WindowSpec};
use crate::model::Model;
use crate::nn::softmax_row;
use crate::util;
use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

pub const N_CLASSES: usize = 7;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: y_true has {true_len} entries, y_pred {pred_len}")]
    LengthMismatch { true_len: usize, pred_len: usize },
    #[error("label {0} out of range 0..{N_CLASSES}")]
    LabelOutOfRange(usize),
    #[error("target domain '{0}' absent from manifest")]
    TargetDomainAbsent(String),
    #[error("insufficient pairs: {m} non-zero differences, need at least 5")]
    InsufficientPairs { m: usize },
    #[error("target domain leaked into training: record '{id}' is in the checkpoint's {role} set")]
    LeakageDetected { id: String, role: String },
    #[error("invalid stress spec: {0}")]
    InvalidStress(String),
    #[error("split produced an empty {0} partition")]
    EmptySplit(String),
    #[error("leave-one-domain-out needs at least 2 domains, found {0}")]
    TooFewDomains(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Which split protocol to run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// 70/10/20 within one domain, or pooled over all domains when `None`.
    IntraSource { domain: Option<String> },
    /// Hold one domain out entirely; train/validate on the rest.
    Lodo { target: String },
}

impl Protocol {
    pub fn descriptor(&self) -> String {
        match self {
            Protocol::IntraSource { domain: Some(d) } => format!("intra:{d}"),
            Protocol::IntraSource { domain: None } => "intra:all".into(),
            Protocol::Lodo { target } => format!("lodo:{target}"),
        }
    }

    /// Parses `intra:DOMAIN`, `intra:all`, or `lodo:TARGET`.
    pub fn parse(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            Some(("intra", "all")) => Ok(Protocol::IntraSource { domain: None }),
            Some(("intra", d)) if !d.is_empty() => Ok(Protocol::IntraSource {
                domain: Some(d.to_string()),
            }),
            Some(("lodo", t)) if !t.is_empty() => Ok(Protocol::Lodo {
                target: t.to_string(),
            }),
            _ => Err(format!(
                "bad protocol '{s}' (expected intra:DOMAIN, intra:all, or lodo:TARGET)"
            )),
        }
    }
}

/// Record-id assignments for one protocol run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitPlan {
    pub protocol: String,
    pub lodo_target: Option<String>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

/// Largest-remainder allocation of `targets` whole items across groups with
/// sizes `group_n` proportional to per-group exact shares, capped by
/// `group_cap`.
fn largest_remainder(exact: &[f64], total: usize, cap: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    for (o, c) in out.iter_mut().zip(cap) {
        *o = (*o).min(*c);
    }
    let mut assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut i = 0;
    while assigned < total && i < 4 * order.len() {
        let g = order[i % order.len()];
        if out[g] < cap[g] {
            out[g] += 1;
            assigned += 1;
        }
        i += 1;
    }
    out
}

/// Stratified three-way split of `ids_by_class` with global partition sizes
/// ⌊f_train·n⌋ / ⌊f_val·n⌋ / rest.
fn stratified_split(
    ids_by_class: &[Vec<String>],
    f_train: f64,
    f_val: f64,
) -> (Vec<String>, Vec<String>, Vec<String>) {
    let n: usize = ids_by_class.iter().map(Vec::len).sum();
    let train_target = (f_train * n as f64).floor() as usize;
    let val_target = (f_val * n as f64).floor() as usize;
    let caps: Vec<usize> = ids_by_class.iter().map(Vec::len).collect();
    let train_exact: Vec<f64> = caps.iter().map(|&c| f_train * c as f64).collect();
    let train_counts = largest_remainder(&train_exact, train_target, &caps);
    let caps_left: Vec<usize> = caps.iter().zip(&train_counts).map(|(&c, &t)| c - t).collect();
    let val_exact: Vec<f64> = caps.iter().map(|&c| f_val * c as f64).collect();
    let val_counts = largest_remainder(&val_exact, val_target, &caps_left);

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (ci, ids) in ids_by_class.iter().enumerate() {
        let t = train_counts[ci];
        let v = val_counts[ci];
        train.extend_from_slice(&ids[..t]);
        val.extend_from_slice(&ids[t..t + v]);
        test.extend_from_slice(&ids[t + v..]);
    }
    (train, val, test)
}

/// Groups eligible record ids by class and shuffles each group with a
/// class-specific stream derived from `seed`.
fn grouped_shuffled(
    manifest: &DatasetManifest,
    keep: impl Fn(&str) -> bool,
    seed: u64,
) -> Result<Vec<Vec<String>>, EvalError> {
    let mut groups: Vec<Vec<String>> = vec![Vec::new(); N_CLASSES];
    for r in &manifest.records {
        if keep(&r.domain) {
            let class = manifest.label_of(r)?;
            groups[class.index()].push(r.id.clone());
        }
    }
    for (ci, g) in groups.iter_mut().enumerate() {
        g.sort();
        let mut rng = util::rng_from(&[seed, 0x73706c69, ci as u64]);
        g.shuffle(&mut rng);
    }
    Ok(groups)
}

/// Builds the id assignment for a protocol; deterministic in `seed`.
pub fn make_split(
    manifest: &DatasetManifest,
    protocol: &Protocol,
    seed: u64,
) -> Result<SplitPlan, EvalError> {
    let plan = match protocol {
        Protocol::IntraSource { domain } => {
            let groups = grouped_shuffled(
                manifest,
                |d| domain.as_deref().is_none_or(|want| d == want),
                seed,
            )?;
            let (train, val, test) = stratified_split(&groups, 0.70, 0.10);
            SplitPlan {
                protocol: protocol.descriptor(),
                lodo_target: None,
                train_ids: train,
                val_ids: val,
                test_ids: test,
                seed,
            }
        }
        Protocol::Lodo { target } => {
            let domains = manifest.domains();
            if domains.len() < 2 {
                return Err(EvalError::TooFewDomains(domains.len()));
            }
            if !domains.iter().any(|d| d == target) {
                return Err(EvalError::TargetDomainAbsent(target.clone()));
            }
            let groups = grouped_shuffled(manifest, |d| d != target, seed)?;
            // rounding leftovers join the validation side so every source
            // record lands in exactly one partition
            let (train, mut val, rest) = stratified_split(&groups, 0.90, 0.10);
            val.extend(rest);
            let test: Vec<String> = manifest
                .records
                .iter()
                .filter(|r| &r.domain == target)
                .map(|r| r.id.clone())
                .collect();
            SplitPlan {
                protocol: protocol.descriptor(),
                lodo_target: Some(target.clone()),
                train_ids: train,
                val_ids: val,
                test_ids: test,
                seed,
            }
        }
    };
    for (name, part) in [
        ("train", &plan.train_ids),
        ("val", &plan.val_ids),
        ("test", &plan.test_ids),
    ] {
        if part.is_empty() {
            return Err(EvalError::EmptySplit(name.into()));
        }
    }
    debug_assert!(plan.partitions_disjoint());
    Ok(plan)
}

impl SplitPlan {
    pub fn partitions_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.train_ids
            .iter()
            .chain(&self.val_ids)
            .chain(&self.test_ids)
            .all(|id| seen.insert(id.as_str()))
    }

    /// Leakage guard: no target-domain id may appear in train or val.
    pub fn check_lodo_leakage(&self, manifest: &DatasetManifest) -> Result<(), EvalError> {
        let Some(target) = &self.lodo_target else {
            return Ok(());
        };
        let target_ids: HashSet<&str> = manifest
            .records
            .iter()
            .filter(|r| &r.domain == target)
            .map(|r| r.id.as_str())
            .collect();
        for (role, ids) in [("train", &self.train_ids), ("val", &self.val_ids)] {
            if let Some(id) = ids.iter().find(|id| target_ids.contains(id.as_str())) {
                return Err(EvalError::LeakageDetected {
                    id: id.clone(),
                    role: role.into(),
                });
            }
        }
        Ok(())
    }
}

/// Per-class precision/recall/F1 with the 0/0 → 0 convention.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Confusion matrix plus derived metrics for one prediction set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsCore {
    /// `confusion[true][pred]`, 7 × 7 in frozen class order.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub n: usize,
}

/// Builds the confusion matrix and macro metrics. Macro averages run over
/// classes with nonzero support in `y_true`; 0/0 ratios collapse to 0.
pub fn confusion_and_metrics(y_true: &[usize], y_pred: &[usize]) -> Result<MetricsCore, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch {
            true_len: y_true.len(),
            pred_len: y_pred.len(),
        });
    }
    let mut confusion = vec![vec![0usize; N_CLASSES]; N_CLASSES];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= N_CLASSES {
            return Err(EvalError::LabelOutOfRange(t));
        }
        if p >= N_CLASSES {
            return Err(EvalError::LabelOutOfRange(p));
        }
        confusion[t][p] += 1;
    }
    let n = y_true.len();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut per_class = Vec::with_capacity(N_CLASSES);
    let mut correct = 0usize;
    for c in 0..N_CLASSES {
        let tp = confusion[c][c];
        correct += tp;
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..N_CLASSES).map(|t| confusion[t][c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            class: ALL_CLASSES[c].name().to_string(),
            precision,
            recall,
            f1,
            support,
        });
    }
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let k = present.len().max(1) as f64;
    Ok(MetricsCore {
        macro_precision: present.iter().map(|m| m.precision).sum::<f64>() / k,
        macro_recall: present.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_f1: present.iter().map(|m| m.f1).sum::<f64>() / k,
        accuracy: ratio(correct, n),
        confusion,
        per_class,
        n,
    })
}

/// One-vs-rest AUROC per class via the rank statistic (tied scores count
/// half), macro-averaged over classes that have both positives and
/// negatives. `None` when no class qualifies.
pub fn auroc_macro(y_true: &[usize], scores: &[Vec<f64>]) -> Result<Option<f64>, EvalError> {
    if y_true.len() != scores.len() {
        return Err(EvalError::LengthMismatch {
            true_len: y_true.len(),
            pred_len: scores.len(),
        });
    }
    let mut aucs = Vec::new();
    for c in 0..N_CLASSES {
        let n_pos = y_true.iter().filter(|&&t| t == c).count();
        let n_neg = y_true.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            continue;
        }
        let mut pairs: Vec<(f64, bool)> = y_true
            .iter()
            .zip(scores)
            .map(|(&t, s)| (s[c], t == c))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // average ranks over ties
        let mut rank_sum_pos = 0.0;
        let mut i = 0;
        while i < pairs.len() {
            let mut j = i;
            while j < pairs.len() && pairs[j].0 == pairs[i].0 {
                j += 1;
            }
            let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
            for p in &pairs[i..j] {
                if p.1 {
                    rank_sum_pos += avg_rank;
                }
            }
            i = j;
        }
        let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
        aucs.push(auc);
    }
    Ok(if aucs.is_empty() {
        None
    } else {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    })
}

/// Percentile bootstrap confidence interval for macro-F1 under index
/// resampling with replacement. Deterministic in `seed`.
pub fn bootstrap_ci(
    y_true: &[usize],
    y_pred: &[usize],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch {
            true_len: y_true.len(),
            pred_len: y_pred.len(),
        });
    }
    let n = y_true.len();
    if n == 0 {
        return Err(EvalError::EmptySplit("bootstrap sample".into()));
    }
    let mut rng = util::rng_from(&[seed, 0x626f6f74]);
    let mut values = Vec::with_capacity(n_resamples);
    let mut rt = vec![0usize; n];
    let mut rp = vec![0usize; n];
    for _ in 0..n_resamples {
        for i in 0..n {
            let j = rng.random_range(0..n);
            rt[i] = y_true[j];
            rp[i] = y_pred[j];
        }
        values.push(confusion_and_metrics(&rt, &rp)?.macro_f1);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let h = p * (values.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        values[lo] + (h - lo as f64) * (values[hi] - values[lo])
    };
    let alpha = (1.0 - level) / 2.0;
    Ok((q(alpha), q(1.0 - alpha)))
}

/// Wilcoxon signed-rank outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// min(W+, W−) over non-zero differences.
    pub w: f64,
    pub p_value: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_used: usize,
    pub significant_at_05: bool,
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped, tied absolute differences get averaged ranks, the exact
/// null distribution is enumerated for m ≤ 20, and the normal approximation
/// with continuity and tie corrections is used above.
pub fn wilcoxon_signed_rank(paired_a: &[f64], paired_b: &[f64]) -> Result<WilcoxonResult, EvalError> {
    if paired_a.len() != paired_b.len() {
        return Err(EvalError::LengthMismatch {
            true_len: paired_a.len(),
            pred_len: paired_b.len(),
        });
    }
    let diffs: Vec<f64> = paired_a
        .iter()
        .zip(paired_b)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let m = diffs.len();
    if m < 5 {
        return Err(EvalError::InsufficientPairs { m });
    }

    // ranks of |d| with tie averaging
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0.0f64; m];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j < m && diffs[order[j]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        tie_sizes.push(j - i);
        i = j;
    }
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total: f64 = ranks.iter().sum();
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);

    let p_value = if m <= 20 {
        // exact: distribution of W+ over all 2^m sign assignments, on ranks
        // scaled by 2 so tie-averaged halves become integers
        let scaled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max_sum: usize = scaled.iter().sum();
        let mut dp = vec![0.0f64; max_sum + 1];
        dp[0] = 1.0;
        for &r in &scaled {
            for s in (r..=max_sum).rev() {
                dp[s] += dp[s - r];
            }
        }
        let w_scaled = (2.0 * w).round() as usize;
        let below: f64 = dp[..=w_scaled.min(max_sum)].iter().sum();
        (2.0 * below / 2.0f64.powi(m as i32)).min(1.0)
    } else {
        let mf = m as f64;
        let mean = mf * (mf + 1.0) / 4.0;
        let tie_corr: f64 = tie_sizes
            .iter()
            .map(|&t| {
                let tf = t as f64;
                tf * tf * tf - tf
            })
            .sum::<f64>()
            / 48.0;
        let var = mf * (mf + 1.0) * (2.0 * mf + 1.0) / 24.0 - tie_corr;
        let z = (w - mean + 0.5) / var.sqrt();
        (2.0 * normal_cdf(z)).min(1.0)
    };

    Ok(WilcoxonResult {
        w,
        p_value,
        n_used: m,
        significant_at_05: p_value < 0.05,
    })
}

/// Standard normal CDF via an erfc rational approximation (absolute error
/// below 1.2e-7, ample for p-values).
fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.5 * x.abs());
    let tau = t
        * (-x * x - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        tau
    } else {
        2.0 - tau
    }
}

/// Robustness perturbation applied to a preprocessed `[12 × L]` window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StressSpec {
    /// Zero out `k` random leads (k in 1..=3).
    LeadDrop { k: usize },
    /// Add white noise scaled to the given record-level SNR in dB (5..=20).
    GaussianNoise { snr_db: f64 },
}

impl StressSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        match self {
            StressSpec::LeadDrop { k } => {
                if !(1..=3).contains(k) {
                    return Err(EvalError::InvalidStress(format!(
                        "lead drop k must be 1..=3, got {k}"
                    )));
                }
            }
            StressSpec::GaussianNoise { snr_db } => {
                if !(5.0..=20.0).contains(snr_db) {
                    return Err(EvalError::InvalidStress(format!(
                        "noise SNR must be within 5..20 dB, got {snr_db}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        match self {
            StressSpec::LeadDrop { k } => format!("lead-drop:{k}"),
            StressSpec::GaussianNoise { snr_db } => format!("noise:{snr_db}"),
        }
    }

    /// Parses `lead-drop:K` or `noise:SNR_DB`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| format!("bad stress spec '{s}'"))?;
        let spec = match kind {
            "lead-drop" => StressSpec::LeadDrop {
                k: arg.parse().map_err(|_| format!("bad lead count '{arg}'"))?,
            },
            "noise" => StressSpec::GaussianNoise {
                snr_db: arg.parse().map_err(|_| format!("bad SNR '{arg}'"))?,
            },
            _ => return Err(format!("unknown stress kind '{kind}'")),
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

/// Applies the perturbation in place. Lead dropout runs after normalization
/// so zeroed leads stay exactly zero; noise is scaled to the window's own
/// mean-square power.
pub fn stress_apply(window: &mut [Vec<f32>], spec: &StressSpec, rng: &mut ChaCha8Rng) {
    match spec {
        StressSpec::LeadDrop { k } => {
            let mut leads: Vec<usize> = (0..window.len()).collect();
            leads.shuffle(rng);
            for &li in leads.iter().take(*k) {
                window[li].fill(0.0);
            }
        }
        StressSpec::GaussianNoise { snr_db } => {
            let n: usize = window.iter().map(Vec::len).sum();
            if n == 0 {
                return;
            }
            let p_signal: f64 = window
                .iter()
                .flat_map(|l| l.iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                / n as f64;
            let sigma = (p_signal / 10f64.powf(snr_db / 10.0)).sqrt();
            let gauss = Normal::new(0.0, sigma).expect("sigma >= 0");
            for lead in window.iter_mut() {
                for v in lead.iter_mut() {
                    *v += gauss.sample(rng) as f32;
                }
            }
        }
    }
}

/// Provenance block embedded in every output artifact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    pub manifest_hash: String,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(seed: u64, manifest_bytes: &[u8], config: serde_json::Value) -> Self {
        Provenance {
            tool_version: crate::TOOL_VERSION.to_string(),
            seed,
            manifest_hash: format!("{:016x}", util::fnv1a64(manifest_bytes)),
            config,
        }
    }
}

/// Full evaluation artifact for one protocol run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub stress: Option<String>,
    pub n_test: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub auroc_macro: Option<f64>,
    pub bootstrap_ci: (f64, f64),
    /// Set when accuracy − macro-F1 > 0.3: the model is likely collapsing
    /// onto the majority class.
    pub majority_collapse_flag: bool,
    pub per_class: Vec<ClassMetrics>,
    pub confusion_matrix: Vec<Vec<usize>>,
    pub provenance: Provenance,
}

impl EvalReport {
    /// Confusion matrix as CSV with named axes (rows = truth).
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in ALL_CLASSES {
            out.push(',');
            out.push_str(c.name());
        }
        out.push('\n');
        for (ci, row) in self.confusion_matrix.iter().enumerate() {
            out.push_str(ALL_CLASSES[ci].name());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluation knobs beyond the split itself.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub stress: Option<StressSpec>,
    pub seed: u64,
    pub threads: usize,
    pub provenance_config: serde_json::Value,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            stress: None,
            seed: 42,
            threads: 1,
            provenance_config: serde_json::Value::Null,
        }
    }
}

/// Runs eval-mode inference for the plan's test partition and assembles the
/// report. Records are processed in plan order; fan-out across threads does
/// not change results.
pub fn evaluate(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    base_dir: &Path,
    plan: &SplitPlan,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if let Some(stress) = &opts.stress {
        stress.validate()?;
    }
    plan.check_lodo_leakage(manifest)?;
    if let Some(target) = &plan.lodo_target {
        // also guard against a mismatched checkpoint: its recorded training
        // ids must not intersect the target domain
        let target_ids: HashSet<&str> = manifest
            .records
            .iter()
            .filter(|r| &r.domain == target)
            .map(|r| r.id.as_str())
            .collect();
        for (role, ids) in [
            ("train", &checkpoint.meta.train_ids),
            ("val", &checkpoint.meta.val_ids),
        ] {
            if let Some(id) = ids.iter().find(|id| target_ids.contains(id.as_str())) {
                return Err(EvalError::LeakageDetected {
                    id: id.clone(),
                    role: role.into(),
                });
            }
        }
    }

    let by_id: std::collections::HashMap<&str, &crate::dataio::ManifestRecord> = manifest
        .records
        .iter()
        .map(|r| (r.id.as_str(), r))
        .collect();
    let fs = plan
        .test_ids
        .first()
        .and_then(|id| by_id.get(id.as_str()))
        .map(|r| r.fs)
        .unwrap_or(500.0);
    let filter = design_bandpass(&BandpassSpec {
        fs,
        ..BandpassSpec::default()
    })?;
    let winspec = WindowSpec::eval(checkpoint.config.window_len);

    let n = plan.test_ids.len();
    let threads = opts.threads.max(1);
    let results: Vec<Result<(usize, Vec<f64>), EvalError>> = {
        let run_one = |i: usize| -> Result<(usize, Vec<f64>), EvalError> {
            let id = &plan.test_ids[i];
            let rec = by_id
                .get(id.as_str())
                .ok_or_else(|| DataError::Manifest(format!("id '{id}' not in manifest")))?;
            let record = manifest.load_record(base_dir, rec)?;
            let normalized = crate::dsp::filter_zscore(&record, &filter)?;
            let mut rng = util::rng_from(&[opts.seed, 0x77696e, util::seed_of_str(id)]);
            let mut win: Vec<Vec<f32>> = window(&normalized, &winspec, &mut rng)
                .into_iter()
                .map(|l| l.into_iter().map(|v| v as f32).collect())
                .collect();
            if let Some(stress) = &opts.stress {
                let mut srng = util::rng_from(&[opts.seed, 0x73747273, util::seed_of_str(id)]);
                stress_apply(&mut win, stress, &mut srng);
            }
            let flat: Vec<f32> = win.iter().flat_map(|l| l.iter().copied()).collect();
            let mut model: Model<f32> =
                Model::from_state(checkpoint.config.clone(), &checkpoint.params);
            let logits = model.infer(&flat, 1).pop().expect("one row");
            let mut probs = vec![0.0f32; logits.len()];
            softmax_row(&logits, &mut probs);
            let truth = manifest.label_of(rec)?.index();
            Ok((truth, probs.iter().map(|&p| p as f64).collect()))
        };
        util::parallel_map(n, threads, run_one)
    };

    let mut y_true = Vec::with_capacity(n);
    let mut y_pred = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for r in results {
        let (truth, probs) = r?;
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        y_true.push(truth);
        y_pred.push(pred);
        scores.push(probs);
    }

    let core = confusion_and_metrics(&y_true, &y_pred)?;
    let auroc = auroc_macro(&y_true, &scores)?;
    let ci = bootstrap_ci(&y_true, &y_pred, 1000, 0.95, opts.seed)?;
    let manifest_bytes = serde_json::to_vec(manifest).expect("manifest serializes");
    Ok(EvalReport {
        protocol: plan.protocol.clone(),
        stress: opts.stress.as_ref().map(|s| s.descriptor()),
        n_test: core.n,
        accuracy: core.accuracy,
        macro_precision: core.macro_precision,
        macro_recall: core.macro_recall,
        macro_f1: core.macro_f1,
        auroc_macro: auroc,
        bootstrap_ci: ci,
        majority_collapse_flag: core.accuracy - core.macro_f1 > 0.3,
        per_class: core.per_class,
        confusion_matrix: core.confusion,
        provenance: Provenance::new(opts.seed, &manifest_bytes, opts.provenance_config.clone()),
    })
}

/// Mean ± sample standard deviation of headline metrics across runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateStats {
    pub n_runs: usize,
    pub macro_f1_mean: f64,
    pub macro_f1_sd: f64,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
}

pub fn aggregate(reports: &[EvalReport]) -> AggregateStats {
    let n = reports.len();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let sd = |xs: &[f64]| {
        if xs.len() < 2 {
            return 0.0;
        }
        let m = mean(xs);
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    };
    let f1s: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    AggregateStats {
        n_runs: n,
        macro_f1_mean: mean(&f1s),
        macro_f1_sd: sd(&f1s),
        accuracy_mean: mean(&accs),
        accuracy_sd: sd(&accs),
    }
}

/// Paired comparison of two report sets: per-class F1 values across
/// (classes with support in both runs) × (run pairs), tested with the
/// Wilcoxon signed-rank statistic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n_pairs: usize,
    pub wilcoxon: WilcoxonResult,
    pub mean_f1_a: f64,
    pub mean_f1_b: f64,
    pub verdict: String,
}

pub fn compare_runs(a: &[EvalReport], b: &[EvalReport]) -> Result<ComparisonReport, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            true_len: a.len(),
            pred_len: b.len(),
        });
    }
    let mut pa = Vec::new();
    let mut pb = Vec::new();
    for (ra, rb) in a.iter().zip(b) {
        for (ca, cb) in ra.per_class.iter().zip(&rb.per_class) {
            if ca.support > 0 && cb.support > 0 {
                pa.push(ca.f1);
                pb.push(cb.f1);
            }
        }
    }
    let wilcoxon = wilcoxon_signed_rank(&pa, &pb)?;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let (ma, mb) = (mean(&pa), mean(&pb));
    let verdict = if wilcoxon.significant_at_05 {
        if ma > mb {
            "A significantly better (p < 0.05)".to_string()
        } else {
            "B significantly better (p < 0.05)".to_string()
        }
    } else {
        "no significant difference at alpha = 0.05".to_string()
    };
    Ok(ComparisonReport {
        n_pairs: wilcoxon.n_used,
        wilcoxon,
        mean_f1_a: ma,
        mean_f1_b: mb,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{DatasetManifest, ManifestRecord};
    use rand::SeedableRng;

    fn manifest_of(entries: &[(&str, &str, &str)]) -> DatasetManifest {
        DatasetManifest::new(
            entries
                .iter()
                .map(|(id, domain, label)| ManifestRecord {
                    id: id.to_string(),
                    path: format!("{id}.ecg1"),
                    domain: domain.to_string(),
                    label: label.to_string(),
                    fs: 500.0,
                    n_leads: 12,
                    n_samples: 100,
                })
                .collect(),
        )
    }

    #[test]
    fn worked_macro_f1_example() {
        let m = confusion_and_metrics(&[0, 0, 1, 2], &[0, 1, 1, 2]).unwrap();
        assert!((m.macro_f1 - 7.0 / 9.0).abs() < 1e-12);
        assert_eq!(m.confusion[0][0], 1);
        assert_eq!(m.confusion[0][1], 1);
        assert_eq!(m.n, 4);
    }

    #[test]
    fn perfect_prediction_metrics() {
        let y = [0, 1, 2, 3, 4, 5, 6];
        let m = confusion_and_metrics(&y, &y).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        for c in 0..N_CLASSES {
            assert_eq!(m.confusion[c][c], 1);
        }
    }

    #[test]
    fn accuracy_paradox_shape() {
        // all-majority prediction on balanced 2-class truth
        let m = confusion_and_metrics(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert!((m.accuracy - 0.5).abs() < 1e-12);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-12, "macro {}", m.macro_f1);
    }

    #[test]
    fn macro_f1_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.random_range(1..=50);
            let yt: Vec<usize> = (0..n).map(|_| rng.random_range(0..N_CLASSES)).collect();
            let yp: Vec<usize> = (0..n).map(|_| rng.random_range(0..N_CLASSES)).collect();
            let m = confusion_and_metrics(&yt, &yp).unwrap();
            // brute force: per-class counts from scratch
            let mut f1s = Vec::new();
            for c in 0..N_CLASSES {
                let tp = yt
                    .iter()
                    .zip(&yp)
                    .filter(|(&t, &p)| t == c && p == c)
                    .count() as f64;
                let fp = yt
                    .iter()
                    .zip(&yp)
                    .filter(|(&t, &p)| t != c && p == c)
                    .count() as f64;
                let fneg = yt
                    .iter()
                    .zip(&yp)
                    .filter(|(&t, &p)| t == c && p != c)
                    .count() as f64;
                let support = yt.iter().filter(|&&t| t == c).count();
                if support == 0 {
                    continue;
                }
                let prec = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
                let rec = if tp + fneg == 0.0 { 0.0 } else { tp / (tp + fneg) };
                let f1 = if prec + rec == 0.0 {
                    0.0
                } else {
                    2.0 * prec * rec / (prec + rec)
                };
                f1s.push(f1);
            }
            let brute = f1s.iter().sum::<f64>() / f1s.len().max(1) as f64;
            assert!((m.macro_f1 - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_worked_example_and_edges() {
        // binary view: class 1 scores [0.1, 0.4, 0.35, 0.8], labels 0 0 1 1
        let y = [0usize, 0, 1, 1];
        let scores: Vec<Vec<f64>> = [0.1, 0.4, 0.35, 0.8]
            .iter()
            .map(|&s| {
                let mut row = vec![0.0; N_CLASSES];
                row[1] = s;
                row[0] = 1.0 - s;
                row
            })
            .collect();
        let auc = auroc_macro(&y, &scores).unwrap().unwrap();
        // class 0 AUC with score=1-s mirrors class 1's 0.75
        assert!((auc - 0.75).abs() < 1e-12, "auc {auc}");

        // perfectly separating
        let scores2: Vec<Vec<f64>> = [0.1, 0.2, 0.8, 0.9]
            .iter()
            .map(|&s| {
                let mut row = vec![0.0; N_CLASSES];
                row[1] = s;
                row[0] = 1.0 - s;
                row
            })
            .collect();
        assert_eq!(auroc_macro(&y, &scores2).unwrap().unwrap(), 1.0);

        // all ties
        let scores3 = vec![vec![0.5; N_CLASSES]; 4];
        assert_eq!(auroc_macro(&y, &scores3).unwrap().unwrap(), 0.5);

        // single-class truth: no valid one-vs-rest split
        assert!(auroc_macro(&[1, 1], &scores3[..2].to_vec()).unwrap().is_none());
    }

    #[test]
    fn auroc_matches_pair_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let n = rng.random_range(5..=60);
            let yt: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let scores: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..N_CLASSES)
                        .map(|_| (rng.random_range(0..8) as f64) / 8.0)
                        .collect()
                })
                .collect();
            let fast = auroc_macro(&yt, &scores).unwrap();
            // O(n^2) pair counting
            let mut aucs = Vec::new();
            for c in 0..N_CLASSES {
                let pos: Vec<f64> = yt
                    .iter()
                    .zip(&scores)
                    .filter(|(&t, _)| t == c)
                    .map(|(_, s)| s[c])
                    .collect();
                let neg: Vec<f64> = yt
                    .iter()
                    .zip(&scores)
                    .filter(|(&t, _)| t != c)
                    .map(|(_, s)| s[c])
                    .collect();
                if pos.is_empty() || neg.is_empty() {
                    continue;
                }
                let mut wins = 0.0;
                for &p in &pos {
                    for &q in &neg {
                        if p > q {
                            wins += 1.0;
                        } else if p == q {
                            wins += 0.5;
                        }
                    }
                }
                aucs.push(wins / (pos.len() * neg.len()) as f64);
            }
            let brute = if aucs.is_empty() {
                None
            } else {
                Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
            };
            match (fast, brute) {
                (Some(f), Some(b)) => assert!((f - b).abs() < 1e-10, "{f} vs {b}"),
                (None, None) => {}
                other => panic!("mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let y = vec![0usize, 1, 2, 3, 4, 5, 6, 0, 1, 2];
        let ci = bootstrap_ci(&y, &y, 1000, 0.95, 7).unwrap();
        assert_eq!(ci, (1.0, 1.0), "perfect predictions give a point CI");
        let n1 = bootstrap_ci(&[3], &[3], 1000, 0.95, 7).unwrap();
        assert_eq!(n1, (1.0, 1.0));
        let yp = vec![0usize, 1, 2, 2, 4, 5, 0, 0, 1, 2];
        let a = bootstrap_ci(&y, &yp, 1000, 0.95, 123).unwrap();
        let b = bootstrap_ci(&y, &yp, 1000, 0.95, 123).unwrap();
        assert_eq!(a, b, "same seed, same interval");
        let point = confusion_and_metrics(&y, &yp).unwrap().macro_f1;
        assert!(a.0 <= point && point <= a.1, "CI {a:?} contains point {point}");
    }

    #[test]
    fn wilcoxon_all_zero_diffs_is_an_error() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        match wilcoxon_signed_rank(&a, &a) {
            Err(EvalError::InsufficientPairs { m: 0 }) => {}
            other => panic!("expected InsufficientPairs, got {other:?}"),
        }
    }

    #[test]
    fn wilcoxon_six_positive_differences_exact_p() {
        let a = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let b = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w, 0.0);
        assert!((r.p_value - 0.03125).abs() < 1e-12, "p {}", r.p_value);
        assert!(r.significant_at_05);
    }

    #[test]
    fn wilcoxon_symmetric_differences_not_significant() {
        let a = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        let b = [0.0; 6];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(r.p_value > 0.05, "p {}", r.p_value);
        assert!(!r.significant_at_05);
    }

    #[test]
    fn wilcoxon_normal_approximation_path() {
        // m = 30 strictly positive differences: p must be tiny but valid
        let a: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let b = vec![0.0; 30];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(r.p_value > 0.0 && r.p_value < 1e-4, "p {}", r.p_value);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let entries: Vec<(String, String, String)> = (0..100)
            .map(|i| {
                (
                    format!("r{i}"),
                    "A".to_string(),
                    if i % 2 == 0 { "N" } else { "AF" }.to_string(),
                )
            })
            .collect();
        let refs: Vec<(&str, &str, &str)> = entries
            .iter()
            .map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str()))
            .collect();
        let manifest = manifest_of(&refs);
        let p = Protocol::IntraSource { domain: Some("A".into()) };
        let plan = make_split(&manifest, &p, 42).unwrap();
        assert_eq!(plan.train_ids.len(), 70);
        assert_eq!(plan.val_ids.len(), 10);
        assert_eq!(plan.test_ids.len(), 20);
        assert!(plan.partitions_disjoint());
        let plan2 = make_split(&manifest, &p, 42).unwrap();
        assert_eq!(plan.train_ids, plan2.train_ids);
        assert_eq!(plan.test_ids, plan2.test_ids);
        // stratified: each partition keeps the 50/50 class balance within 1
        let count = |ids: &[String], label: &str| {
            ids.iter()
                .filter(|id| {
                    let idx: usize = id[1..].parse().unwrap();
                    let l = if idx % 2 == 0 { "N" } else { "AF" };
                    l == label
                })
                .count() as i64
        };
        assert!((count(&plan.train_ids, "N") - count(&plan.train_ids, "AF")).abs() <= 1);
        assert!((count(&plan.test_ids, "N") - count(&plan.test_ids, "AF")).abs() <= 1);
    }

    #[test]
    fn lodo_split_holds_out_whole_domain() {
        let manifest = manifest_of(&[
            ("a0", "A", "N"),
            ("a1", "A", "AF"),
            ("a2", "A", "N"),
            ("a3", "A", "AF"),
            ("a4", "A", "N"),
            ("a5", "A", "AF"),
            ("a6", "A", "N"),
            ("a7", "A", "AF"),
            ("a8", "A", "N"),
            ("a9", "A", "AF"),
            ("b0", "B", "N"),
            ("b1", "B", "AF"),
            ("c0", "C", "N"),
            ("c1", "C", "AF"),
        ]);
        let plan = make_split(&manifest, &Protocol::Lodo { target: "C".into() }, 1).unwrap();
        assert_eq!(plan.test_ids, ["c0", "c1"]);
        assert!(plan
            .train_ids
            .iter()
            .chain(&plan.val_ids)
            .all(|id| !id.starts_with('c')));
        plan.check_lodo_leakage(&manifest).unwrap();

        match make_split(&manifest, &Protocol::Lodo { target: "Z".into() }, 1) {
            Err(EvalError::TargetDomainAbsent(t)) => assert_eq!(t, "Z"),
            other => panic!("expected TargetDomainAbsent, got {other:?}"),
        }
    }

    #[test]
    fn lodo_split_is_exhaustive_over_sources() {
        // 11 source records: floor(0.9*11) + floor(0.1*11) = 9 + 1 = 10
        // would drop one without the leftover rule
        let entries: Vec<(String, String, String)> = (0..11)
            .map(|i| (format!("s{i}"), "A".to_string(), "N".to_string()))
            .chain([("t0".to_string(), "T".to_string(), "N".to_string())])
            .collect();
        let refs: Vec<(&str, &str, &str)> = entries
            .iter()
            .map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str()))
            .collect();
        let manifest = manifest_of(&refs);
        let plan = make_split(&manifest, &Protocol::Lodo { target: "T".into() }, 3).unwrap();
        assert_eq!(plan.train_ids.len() + plan.val_ids.len(), 11, "no source record dropped");
        assert!(plan.partitions_disjoint());
    }

    #[test]
    fn bootstrap_interval_contains_point_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut contained = 0;
        let trials = 200;
        for t in 0..trials {
            let n = rng.random_range(10..=40usize);
            let yt: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let yp: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let point = confusion_and_metrics(&yt, &yp).unwrap().macro_f1;
            let (lo, hi) = bootstrap_ci(&yt, &yp, 300, 0.95, t as u64).unwrap();
            if lo <= point && point <= hi {
                contained += 1;
            }
        }
        assert!(
            contained as f64 / trials as f64 >= 0.99,
            "point estimate contained in only {contained}/{trials} trials"
        );
    }

    #[test]
    fn leakage_guard_fires_on_contaminated_plan() {
        let manifest = manifest_of(&[
            ("a0", "A", "N"),
            ("a1", "A", "N"),
            ("t0", "T", "N"),
            ("t1", "T", "AF"),
        ]);
        let plan = SplitPlan {
            protocol: "lodo:T".into(),
            lodo_target: Some("T".into()),
            train_ids: vec!["a0".into(), "t0".into()],
            val_ids: vec!["a1".into()],
            test_ids: vec!["t1".into()],
            seed: 0,
        };
        match plan.check_lodo_leakage(&manifest) {
            Err(EvalError::LeakageDetected { id, role }) => {
                assert_eq!(id, "t0");
                assert_eq!(role, "train");
            }
            other => panic!("expected LeakageDetected, got {other:?}"),
        }
    }

    #[test]
    fn lead_drop_zeroes_exactly_k_leads() {
        let mut win: Vec<Vec<f32>> = (0..12).map(|i| vec![i as f32 + 1.0; 40]).collect();
        let orig = win.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        stress_apply(&mut win, &StressSpec::LeadDrop { k: 3 }, &mut rng);
        let zeroed = win.iter().filter(|l| l.iter().all(|&v| v == 0.0)).count();
        assert_eq!(zeroed, 3);
        let untouched = win
            .iter()
            .zip(&orig)
            .filter(|(w, o)| w == o)
            .count();
        assert_eq!(untouched, 9, "other leads unchanged");
        // determinism
        let mut win2 = orig.clone();
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        stress_apply(&mut win2, &StressSpec::LeadDrop { k: 3 }, &mut rng2);
        assert_eq!(win, win2);
    }

    #[test]
    fn gaussian_noise_hits_requested_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clean: Vec<Vec<f32>> = (0..12)
            .map(|_| (0..4000).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let mut noisy = clean.clone();
        let mut srng = ChaCha8Rng::seed_from_u64(17);
        stress_apply(&mut noisy, &StressSpec::GaussianNoise { snr_db: 20.0 }, &mut srng);
        let power = |m: &[Vec<f32>]| {
            m.iter()
                .flat_map(|l| l.iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                / (12.0 * 4000.0)
        };
        let p_sig = power(&clean);
        let p_noise: f64 = clean
            .iter()
            .flatten()
            .zip(noisy.iter().flatten())
            .map(|(&c, &n)| ((n - c) as f64).powi(2))
            .sum::<f64>()
            / (12.0 * 4000.0);
        let snr = 10.0 * (p_sig / p_noise).log10();
        assert!((snr - 20.0).abs() < 0.5, "measured snr {snr}");
    }

    #[test]
    fn stress_spec_validation_and_parsing() {
        assert!(StressSpec::LeadDrop { k: 4 }.validate().is_err());
        assert!(StressSpec::GaussianNoise { snr_db: 3.0 }.validate().is_err());
        assert_eq!(
            StressSpec::parse("lead-drop:2").unwrap(),
            StressSpec::LeadDrop { k: 2 }
        );
        assert_eq!(
            StressSpec::parse("noise:12.5").unwrap(),
            StressSpec::GaussianNoise { snr_db: 12.5 }
        );
        assert!(StressSpec::parse("foo:1").is_err());
    }

    #[test]
    fn protocol_parse_roundtrip() {
        for s in ["intra:all", "intra:site_a", "lodo:site_d"] {
            assert_eq!(Protocol::parse(s).unwrap().descriptor(), s);
        }
        assert!(Protocol::parse("nope").is_err());
    }
}
