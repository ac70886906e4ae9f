//! Engine for 12-lead ECG arrhythmia classification under domain shift.
//!
//! The crate is organized as a pipeline:
//!
//! * [`dataio`] — on-disk signal, manifest, and checkpoint formats.
//! * [`synth`] — deterministic synthetic 12-lead ECG generator with per-class
//!   morphology rules and per-domain acquisition profiles.
//! * [`dsp`] — bandpass filtering, per-lead standardization, windowing.
//! * [`nn`] — rank-3 tensor graph with reverse-mode automatic differentiation.
//! * [`model`] — SE-ResNet1D backbone, feature-statistics mixing, multi-layer
//!   concentration fusion, MLP head, and the ablation variants.
//! * [`train`] — label-smoothed loss, decoupled-weight-decay optimizer,
//!   plateau scheduler, early stopping.
//! * [`eval`] — split protocols, metric suite, bootstrap/Wilcoxon statistics,
//!   robustness stress tests.
//! * [`xai`] — 1D Grad-CAM saliency maps aligned to the input signal.

pub mod dataio;
pub mod dsp;
pub mod eval;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;
pub mod util;
pub mod xai;

/// Crate version string, embedded in output artifacts for provenance.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
