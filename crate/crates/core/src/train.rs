//! Training loop: label-smoothed cross-entropy, decoupled-weight-decay
//! adaptive optimizer, plateau learning-rate scheduler, early stopping, and
//! best-checkpoint tracking.
//!
//! Everything is seeded: shuffles, crops, dropout masks, and mixing draws
//! all derive from `(seed, epoch, position)` streams, so two runs with the
//! same seed produce bit-identical logs and checkpoints.

use crate::dataio::{Checkpoint, DataError, DatasetManifest, TrainMeta};
use crate::dsp::{design_bandpass, filter_zscore, window, BandpassSpec, DspError, WindowSpec};
use crate::eval::confusion_and_metrics;
use crate::model::{Model, Variant};
use crate::nn::{Graph, Mode, ParamStore, Scalar};
use crate::util;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("record '{id}' appears in more than one split partition")]
    OverlappingSplits { id: String },
    #[error("{0} loader is empty")]
    EmptyLoader(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; aborting")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("gradient explosion: non-finite gradient in parameter '{param}' at epoch {epoch}, batch {batch}")]
    GradientExplosion {
        param: String,
        epoch: usize,
        batch: usize,
    },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub label_smooth: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            label_smooth: 0.05,
            scheduler_factor: 0.5,
            scheduler_patience: 5,
            early_stop_patience: 15,
            max_epochs: 50,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_floor: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.label_smooth) {
            return Err(TrainError::InvalidConfig(
                "label_smooth must be in [0, 1)".into(),
            ));
        }
        if self.early_stop_patience < 1 {
            return Err(TrainError::InvalidConfig(
                "early stop patience must be >= 1".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(
                "batch size must be >= 2 (statistics mixing needs a partner)".into(),
            ));
        }
        if self.max_epochs < 1 {
            return Err(TrainError::InvalidConfig("max_epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Variant-adjusted copy: the baseline ablation trains with plain
    /// cross-entropy (ε = 0); the others keep the configured smoothing.
    pub fn for_variant(&self, variant: Variant) -> TrainConfig {
        let mut out = self.clone();
        if !variant.uses_label_smoothing() {
            out.label_smooth = 0.0;
        }
        out
    }
}

/// Decoupled-weight-decay adaptive optimizer state. Moment buffers live in
/// the parameter store; this tracks the shared step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub t: u64,
}

/// One optimizer step over all trainable parameters.
///
/// Weight decay multiplies weights by `1 − lr·wd` directly, independent of
/// the gradient-derived update; bias and normalization parameters are
/// exempt. Returns the name of any parameter with a non-finite gradient.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), String> {
    for e in params.entries() {
        if !e.trainable {
            continue;
        }
        if e.grad.iter().any(|g| !g.is_finite()) {
            return Err(e.name.clone());
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let eps = T::of(cfg.adam_eps);
    let lr_t = T::of(lr);
    let bias1 = T::of(1.0 - cfg.beta1.powi(t));
    let bias2 = T::of(1.0 - cfg.beta2.powi(t));
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    for e in params.entries_mut() {
        if !e.trainable {
            continue;
        }
        let apply_decay = !e.decay_exempt && cfg.weight_decay > 0.0;
        for i in 0..e.values.len() {
            if apply_decay {
                e.values[i] = e.values[i] * decay;
            }
            let g = e.grad[i];
            e.moment1[i] = b1 * e.moment1[i] + (T::one() - b1) * g;
            e.moment2[i] = b2 * e.moment2[i] + (T::one() - b2) * g * g;
            let m_hat = e.moment1[i] / bias1;
            let v_hat = e.moment2[i] / bias2;
            e.values[i] = e.values[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Reduce-on-plateau over a maximized score (validation macro-F1): after
/// `patience` consecutive epochs without strict improvement the rate halves
/// (by `factor`), floored at `lr_floor`.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    best: f64,
    bad_epochs: usize,
    factor: f64,
    patience: usize,
    floor: f64,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauScheduler {
            lr: cfg.lr0,
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
            factor: cfg.scheduler_factor,
            patience: cfg.scheduler_patience,
            floor: cfg.lr_floor,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's score; returns the rate for the next epoch.
    pub fn step(&mut self, val_macro_f1: f64) -> f64 {
        if val_macro_f1 > self.best {
            self.best = val_macro_f1;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.floor);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// One record prepared for training: filtered and standardized full-length
/// leads plus its label, cached so per-epoch work is only the crop.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub domain: String,
    pub label: usize,
    pub normalized: Vec<Vec<f32>>,
}

/// An in-memory partition of preprocessed records.
#[derive(Clone, Debug, Default)]
pub struct Loader {
    pub samples: Vec<Sample>,
}

impl Loader {
    /// Loads and preprocesses the given manifest ids (in the given order).
    pub fn from_manifest(
        manifest: &DatasetManifest,
        base_dir: &Path,
        ids: &[String],
    ) -> Result<Loader, TrainError> {
        let by_id: std::collections::HashMap<&str, &crate::dataio::ManifestRecord> = manifest
            .records
            .iter()
            .map(|r| (r.id.as_str(), r))
            .collect();
        let mut samples = Vec::with_capacity(ids.len());
        for id in ids {
            let rec = by_id
                .get(id.as_str())
                .ok_or_else(|| DataError::Manifest(format!("id '{id}' not in manifest")))?;
            let record = manifest.load_record(base_dir, rec)?;
            let filter = design_bandpass(&BandpassSpec {
                fs: record.fs,
                ..BandpassSpec::default()
            })?;
            let normalized = filter_zscore(&record, &filter)?
                .into_iter()
                .map(|l| l.into_iter().map(|v| v as f32).collect())
                .collect();
            samples.push(Sample {
                id: record.id.clone(),
                domain: record.domain.clone(),
                label: record.label.index(),
                normalized,
            });
        }
        Ok(Loader { samples })
    }

    pub fn domains(&self) -> Vec<String> {
        let mut ds: Vec<String> = self.samples.iter().map(|s| s.domain.clone()).collect();
        ds.sort();
        ds.dedup();
        ds
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc,val_macro_f1,lr\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_acc, e.val_macro_f1, e.lr
            ));
        }
        out
    }
}

fn crop_window<T: Scalar>(
    sample: &Sample,
    winspec: &WindowSpec,
    rng: &mut rand_chacha::ChaCha8Rng,
    out: &mut Vec<T>,
) {
    let as64: Vec<Vec<f64>> = sample
        .normalized
        .iter()
        .map(|l| l.iter().map(|&v| v as f64).collect())
        .collect();
    for lead in window(&as64, winspec, rng) {
        out.extend(lead.into_iter().map(T::of));
    }
}

/// Eval-mode pass over a loader: mean smoothed loss, accuracy, macro-F1.
fn validate_pass<T: Scalar>(
    model: &mut Model<T>,
    loader: &Loader,
    cfg: &TrainConfig,
) -> (f64, f64, f64) {
    let mcfg = model.config.clone();
    let winspec = WindowSpec::eval(mcfg.window_len);
    let mut y_true = Vec::with_capacity(loader.samples.len());
    let mut y_pred = Vec::with_capacity(loader.samples.len());
    let mut loss_sum = 0.0f64;
    let mut rng = util::rng_from(&[0]);
    for chunk in loader.samples.chunks(cfg.batch_size) {
        let mut batch: Vec<T> = Vec::with_capacity(chunk.len() * mcfg.in_leads * mcfg.window_len);
        let mut labels = Vec::with_capacity(chunk.len());
        for s in chunk {
            crop_window(s, &winspec, &mut rng, &mut batch);
            labels.push(s.label);
        }
        let mut g = Graph::new();
        let trace = model.forward(&mut g, &batch, chunk.len(), Mode::Eval, &mut rng, None);
        let loss = g.smoothed_cross_entropy(trace.logits, &labels, cfg.label_smooth);
        loss_sum += g.scalar_value(loss).as_f64() * chunk.len() as f64;
        let lv = g.value(trace.logits);
        for (bi, &label) in labels.iter().enumerate() {
            let row = &lv[bi * mcfg.n_classes..(bi + 1) * mcfg.n_classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            y_true.push(label);
            y_pred.push(pred);
        }
    }
    let metrics = confusion_and_metrics(&y_true, &y_pred).expect("labels in range");
    (
        loss_sum / loader.samples.len() as f64,
        metrics.accuracy,
        metrics.macro_f1,
    )
}

/// Trains `model` and returns the best-epoch checkpoint plus the log.
///
/// Per epoch: seeded shuffle, random-offset crops, forward in train mode,
/// label-smoothed loss, backward, optimizer step; then an eval-mode pass
/// over the validation set drives the scheduler, best tracking (strict
/// improvement only), and early stopping. The returned checkpoint is the
/// best epoch's state, not the last.
pub fn fit<T: Scalar>(
    train_loader: &Loader,
    val_loader: &Loader,
    model: &mut Model<T>,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate()?;
    if train_loader.samples.is_empty() {
        return Err(TrainError::EmptyLoader("train"));
    }
    if val_loader.samples.is_empty() {
        return Err(TrainError::EmptyLoader("validation"));
    }
    let mut seen: HashSet<&str> = HashSet::new();
    for s in train_loader.samples.iter().chain(&val_loader.samples) {
        if !seen.insert(&s.id) {
            return Err(TrainError::OverlappingSplits { id: s.id.clone() });
        }
    }

    let mcfg = model.config.clone();
    let train_winspec = WindowSpec::train(mcfg.window_len);
    let mut scheduler = PlateauScheduler::new(cfg);
    let mut adam = AdamState::default();
    let mut log = TrainLog::default();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_state: Vec<f32> = model.params.flatten_f32();
    let mut bad_epochs = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let lr = scheduler.lr();

        let mut order: Vec<usize> = (0..train_loader.samples.len()).collect();
        let mut shuffle_rng = util::rng_from(&[cfg.seed, 0x73687566, epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut train_loss_sum = 0.0f64;
        for (bi, idx_chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch: Vec<T> =
                Vec::with_capacity(idx_chunk.len() * mcfg.in_leads * mcfg.window_len);
            let mut labels = Vec::with_capacity(idx_chunk.len());
            for &i in idx_chunk {
                let s = &train_loader.samples[i];
                let mut crop_rng = util::rng_from(&[
                    cfg.seed,
                    0x63726f70,
                    epoch as u64,
                    util::seed_of_str(&s.id),
                ]);
                crop_window(s, &train_winspec, &mut crop_rng, &mut batch);
                labels.push(s.label);
            }
            let mut model_rng =
                util::rng_from(&[cfg.seed, 0x6d6f64, epoch as u64, bi as u64]);
            let mut g = Graph::new();
            let trace = model.forward(
                &mut g,
                &batch,
                idx_chunk.len(),
                Mode::Train,
                &mut model_rng,
                None,
            );
            let loss = g.smoothed_cross_entropy(trace.logits, &labels, cfg.label_smooth);
            let loss_val = g.scalar_value(loss).as_f64();
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            train_loss_sum += loss_val * idx_chunk.len() as f64;
            g.backward(loss);
            model.params.zero_grad();
            model.accumulate_grads(&g, &trace);
            optimizer_step(&mut model.params, &mut adam, lr, cfg).map_err(|param| {
                TrainError::GradientExplosion {
                    param,
                    epoch,
                    batch: bi,
                }
            })?;
        }
        let train_loss = train_loss_sum / train_loader.samples.len() as f64;

        let (val_loss, val_acc, val_f1) = validate_pass(model, val_loader, cfg);
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            val_macro_f1: val_f1,
            lr,
        });
        scheduler.step(val_f1);

        if val_f1 > best_f1 {
            best_f1 = val_f1;
            best_epoch = epoch;
            best_state = model.params.flatten_f32();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.early_stop_patience {
                break;
            }
        }
    }

    log.best_epoch = best_epoch;
    log.best_val_macro_f1 = best_f1;
    let checkpoint = Checkpoint {
        config: mcfg,
        params: best_state,
        meta: TrainMeta {
            epochs_run,
            best_val_macro_f1: best_f1,
            best_epoch,
            seed: cfg.seed,
            source_domains: train_loader.domains(),
            train_ids: train_loader.ids(),
            val_ids: val_loader.ids(),
        },
    };
    Ok((checkpoint, log))
}
